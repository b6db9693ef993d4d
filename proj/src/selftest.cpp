#include "selftest.hpp"

#include <cmath>
#include <sstream>

#include "model.hpp"
#include "relevance.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace attrib {

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.gaussian();
    return t;
}

std::string fmt(double v) {
    std::ostringstream out;
    out.precision(6);
    out << v;
    return out.str();
}

SelftestCheck check_relevance_chain(bool inject_fault, std::uint64_t seed) {
    ModelConfig config;  // image defaults
    RuleSet rules;
    rules.normalize_binary = !inject_fault;
    double worst = 0.0;
    Rng rng(seed);
    for (std::size_t trial = 0; trial < 5; ++trial) {
        const Model model = random_model(config, rng.next_u64());
        Tensor input({config.content_tokens(), config.input_cols()});
        for (std::size_t i = 0; i < input.size(); ++i) input[i] = rng.uniform();
        const ForwardResult fwd = classify(model, input);
        const std::size_t t = rng.index(config.classes);
        const NetworkRelevance net = propagate_network(fwd.tape, t, rules);
        for (double s : net.layer_sums) worst = std::max(worst, std::abs(s - 1.0));
        worst = std::max(worst, net.conservation_defect);
    }
    return {"relevance_chain_conserves", worst <= 1e-6,
            "max layer-sum deviation " + fmt(worst) + " (tol 1e-6)"};
}

SelftestCheck check_add_split(std::uint64_t seed) {
    Rng rng(seed);
    double worst = 0.0;
    for (std::size_t trial = 0; trial < 100; ++trial) {
        const Tensor u = random_tensor({3, 4}, rng);
        const Tensor v = random_tensor({3, 4}, rng);
        const Tensor r = random_tensor({3, 4}, rng);
        const auto [ru, rv] = propagate_binary(u, v, r, BinaryOp::Add);
        worst = std::max(worst, std::abs(ru.sum() + rv.sum() - r.sum()));
    }
    return {"add_split_conserves", worst <= 1e-9, "max defect " + fmt(worst) + " (tol 1e-9)"};
}

SelftestCheck check_matmul_split_doubles(std::uint64_t seed) {
    Rng rng(seed);
    double worst = 0.0;
    for (std::size_t trial = 0; trial < 100; ++trial) {
        const Tensor u = random_tensor({3, 4}, rng);
        const Tensor v = random_tensor({4, 2}, rng);
        const Tensor r = random_tensor({3, 2}, rng);
        const auto [ru, rv] = propagate_binary(u, v, r, BinaryOp::MatMul);
        worst = std::max(worst, std::abs(ru.sum() + rv.sum() - 2.0 * r.sum()));
    }
    return {"matmul_split_doubles", worst <= 1e-9,
            "max |sum - 2*sum(R)| " + fmt(worst) + " (tol 1e-9)"};
}

SelftestCheck check_matmul_conservation(bool inject_fault, std::uint64_t seed) {
    Rng rng(seed);
    double worst_total = 0.0;
    double worst_branch = 0.0;
    for (std::size_t trial = 0; trial < 100; ++trial) {
        const Tensor u = random_tensor({3, 4}, rng);
        const Tensor v = random_tensor({4, 2}, rng);
        Tensor r({3, 2});
        for (std::size_t i = 0; i < r.size(); ++i) r[i] = rng.uniform();
        const double rs = r.sum();
        for (std::size_t i = 0; i < r.size(); ++i) r[i] /= rs;  // sum = 1
        auto [ru, rv] = propagate_binary(u, v, r, BinaryOp::MatMul);
        if (!inject_fault) std::tie(ru, rv) = normalize_binary(ru, rv, r.sum());
        worst_total = std::max(worst_total, std::abs(ru.sum() + rv.sum() - 1.0));
        for (double s : {ru.sum(), rv.sum()}) {
            worst_branch = std::max(worst_branch, std::max(-s, s - 1.0));
        }
    }
    return {"matmul_conservation",
            worst_total <= 1e-9 && worst_branch <= 1e-9,
            "max total defect " + fmt(worst_total) + ", max branch excursion " + fmt(worst_branch) +
                " (tol 1e-9)"};
}

SelftestCheck check_skip_instability() {
    // Skip connection u + v with u = (e^a, e^b), v = (1-e^a, 1-e^b): the raw
    // split conserves but its magnitudes explode as e^a; normalization pins
    // both branch sums inside [0, sum(R)].
    const double a = 20.0, b = 20.0;
    const Tensor u({2}, {std::exp(a), std::exp(b)});
    const Tensor v({2}, {1.0 - std::exp(a), 1.0 - std::exp(b)});
    const Tensor r({2}, {1.0, 1.0});
    const auto [ru, rv] = propagate_binary(u, v, r, BinaryOp::Add);
    double peak = 0.0;
    for (std::size_t i = 0; i < ru.size(); ++i) {
        peak = std::max(peak, std::max(std::abs(ru[i]), std::abs(rv[i])));
    }
    const auto [rub, rvb] = normalize_binary(ru, rv, r.sum());
    const double su = rub.sum(), sv = rvb.sum();
    const bool bounded = su >= 0.0 && su <= 2.0 && sv >= 0.0 && sv <= 2.0 &&
                         std::abs(su + sv - 2.0) <= 1e-9;
    return {"skip_normalization_tames_explosion", peak > 1e8 && bounded,
            "raw peak " + fmt(peak) + ", normalized branch sums " + fmt(su) + " / " + fmt(sv)};
}

SelftestCheck check_classic_rule_doubling(std::uint64_t seed) {
    Rng rng(seed);
    double worst = 0.0;
    for (std::size_t trial = 0; trial < 100; ++trial) {
        Tensor x = random_tensor({1, 4}, rng);
        Tensor w = random_tensor({4, 3}, rng);
        // Pin one positive and one negative product per output so both sign
        // branches are active everywhere, the premise of the 2x identity.
        x[0] = std::abs(x[0]);
        x[1] = -std::abs(x[1]);
        for (std::size_t i = 0; i < 3; ++i) {
            w.at(0, i) = std::abs(w.at(0, i));
            w.at(1, i) = std::abs(w.at(1, i));
        }
        Tensor r({1, 3});
        for (std::size_t i = 0; i < r.size(); ++i) r[i] = 0.1 + rng.uniform();
        const Tensor r_out = propagate_lrp_classic(x, w, r);
        worst = std::max(worst, std::abs(r_out.sum() - 2.0 * r.sum()));
    }
    return {"classic_rule_doubles_mixed_sign", worst <= 1e-9,
            "max |sum - 2*sum(R)| " + fmt(worst) + " (tol 1e-9)"};
}

SelftestCheck check_gradients(std::uint64_t seed) {
    ModelConfig config;
    const Model model = random_model(config, seed);
    Rng rng(seed ^ 0x5bd1e995ULL);
    Tensor input({config.content_tokens(), config.input_cols()});
    for (std::size_t i = 0; i < input.size(); ++i) input[i] = rng.uniform();
    const double err = finite_diff_check(model, input, 0, 1e-5, 20, seed);
    return {"gradient_matches_finite_difference", err < 1e-4,
            "max relative error " + fmt(err) + " (tol 1e-4)"};
}

}  // namespace

SelftestReport run_selftest(bool inject_fault, std::uint64_t seed) {
    SelftestReport report;
    report.checks.push_back(check_add_split(seed));
    report.checks.push_back(check_matmul_split_doubles(seed + 1));
    report.checks.push_back(check_matmul_conservation(inject_fault, seed + 2));
    report.checks.push_back(check_skip_instability());
    report.checks.push_back(check_classic_rule_doubling(seed + 3));
    report.checks.push_back(check_relevance_chain(inject_fault, seed + 4));
    report.checks.push_back(check_gradients(seed + 5));
    report.all_passed = true;
    for (const SelftestCheck& c : report.checks) report.all_passed = report.all_passed && c.passed;
    return report;
}

std::string selftest_to_text(const SelftestReport& report) {
    std::ostringstream out;
    for (const SelftestCheck& c : report.checks) {
        out << (c.passed ? "PASS" : "FAIL") << "  " << c.name << ": " << c.detail << "\n";
    }
    out << (report.all_passed ? "all checks passed" : "some checks FAILED") << "\n";
    return out.str();
}

}  // namespace attrib
