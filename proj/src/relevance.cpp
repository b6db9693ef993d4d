#include "relevance.hpp"

#include <cmath>

namespace attrib {

namespace {

// Sign-preserving denominator guard; exact division whenever the magnitude
// is healthy, so conservation defects stay at f64 rounding level.
double stabilize(double d, double eps) {
    if (std::abs(d) >= eps) return d;
    return d < 0.0 ? -eps : eps;  // sign(0) = +1
}

void check_linear_shapes(const Tensor& x, const Tensor& w, const Tensor& r_in) {
    if (x.rank() != 2 || w.rank() != 2 || x.extent(1) != w.extent(0)) {
        throw ShapeError("linear relevance shapes do not conform: x=" + x.shape_str() +
                         " w=" + w.shape_str());
    }
    if (r_in.size() != x.extent(0) * w.extent(1)) {
        throw ShapeError("relevance shape " + r_in.shape_str() + " does not match output of x=" +
                         x.shape_str() + " w=" + w.shape_str());
    }
}

}  // namespace

Tensor init_relevance(std::size_t target_class, std::size_t classes) {
    if (target_class >= classes) {
        throw std::out_of_range("target class " + std::to_string(target_class) +
                                " out of range for " + std::to_string(classes) + " classes");
    }
    Tensor r({classes});
    r[target_class] = 1.0;
    return r;
}

Tensor propagate_generic(const Tensor& x, const Tensor& out, const Tensor& jacobian,
                         const Tensor& r_in, double epsilon) {
    if (jacobian.rank() != 2 || jacobian.extent(0) != out.size() || jacobian.extent(1) != x.size() ||
        r_in.size() != out.size()) {
        throw ShapeError("propagate_generic shapes do not conform: x=" + x.shape_str() + " out=" +
                         out.shape_str() + " jacobian=" + jacobian.shape_str());
    }
    Tensor r_out(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double denom = stabilize(out[i], epsilon);
        for (std::size_t j = 0; j < x.size(); ++j) {
            r_out[j] += x[j] * jacobian.at(i, j) * r_in[i] / denom;
        }
    }
    return r_out;
}

Tensor propagate_linear_positive_subset(const Tensor& x_in, const Tensor& w, const Tensor& r_in,
                                        double epsilon, double* defect) {
    const Tensor x = x_in.rank() == 1 ? Tensor({1, x_in.size()},
                                               std::vector<double>(x_in.data(), x_in.data() + x_in.size()))
                                      : x_in;
    check_linear_shapes(x, w, r_in);
    const std::size_t rows = x.extent(0), din = x.extent(1), dout = w.extent(1);
    Tensor r_out(x_in.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t i = 0; i < dout; ++i) {
            const double ri = r_in[r * dout + i];
            double denom = 0.0;
            bool any = false;
            for (std::size_t j = 0; j < din; ++j) {
                const double z = x.at(r, j) * w.at(j, i);
                if (z >= 0.0) {
                    denom += z;
                    any = true;
                }
            }
            if (!any || denom < epsilon) {
                // Empty (or numerically empty) subset: this unit's relevance
                // is dropped and surfaced as a conservation defect.
                if (defect) *defect += std::abs(ri);
                continue;
            }
            for (std::size_t j = 0; j < din; ++j) {
                const double z = x.at(r, j) * w.at(j, i);
                if (z >= 0.0) r_out[r * din + j] += z / denom * ri;
            }
        }
    }
    return r_out;
}

Tensor propagate_lrp_classic(const Tensor& x_in, const Tensor& w, const Tensor& r_in, double epsilon) {
    const Tensor x = x_in.rank() == 1 ? Tensor({1, x_in.size()},
                                               std::vector<double>(x_in.data(), x_in.data() + x_in.size()))
                                      : x_in;
    check_linear_shapes(x, w, r_in);
    const std::size_t rows = x.extent(0), din = x.extent(1), dout = w.extent(1);
    Tensor r_out(x_in.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t i = 0; i < dout; ++i) {
            const double ri = r_in[r * dout + i];
            double zp = 0.0, zn = 0.0;
            for (std::size_t j = 0; j < din; ++j) {
                const double z = x.at(r, j) * w.at(j, i);
                if (z > 0.0) zp += z;
                if (z < 0.0) zn += z;
            }
            for (std::size_t j = 0; j < din; ++j) {
                const double z = x.at(r, j) * w.at(j, i);
                if (z > 0.0 && zp >= epsilon) r_out[r * din + j] += z / zp * ri;
                if (z < 0.0 && zn <= -epsilon) r_out[r * din + j] += z / zn * ri;
            }
        }
    }
    return r_out;
}

std::pair<Tensor, Tensor> propagate_binary(const Tensor& u, const Tensor& v, const Tensor& r_in,
                                           BinaryOp op, double epsilon) {
    if (op == BinaryOp::Add) {
        if (!u.same_shape(v) || !u.same_shape(r_in)) {
            throw ShapeError("binary add shapes differ: u=" + u.shape_str() + " v=" + v.shape_str() +
                             " r=" + r_in.shape_str());
        }
        Tensor ru(u.shape()), rv(v.shape());
        for (std::size_t i = 0; i < u.size(); ++i) {
            const double denom = stabilize(u[i] + v[i], epsilon);
            ru[i] = u[i] * r_in[i] / denom;
            rv[i] = v[i] * r_in[i] / denom;
        }
        return {std::move(ru), std::move(rv)};
    }

    // Matrix multiplication, 2-D or batched 3-D.
    const Tensor out = matmul(u, v);
    if (!out.same_shape(r_in)) {
        throw ShapeError("binary matmul relevance shape " + r_in.shape_str() +
                         " does not match product " + out.shape_str());
    }
    Tensor ru(u.shape()), rv(v.shape());
    const bool batched = u.rank() == 3;
    const std::size_t heads = batched ? u.extent(0) : 1;
    const std::size_t m = u.extent(batched ? 1 : 0);
    const std::size_t k = u.extent(batched ? 2 : 1);
    const std::size_t n = v.extent(batched ? 2 : 1);
    for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t uo = h * m * k, vo = h * k * n, oo = h * m * n;
        for (std::size_t a = 0; a < m; ++a) {
            for (std::size_t c = 0; c < n; ++c) {
                const double scale = r_in[oo + a * n + c] / stabilize(out[oo + a * n + c], epsilon);
                for (std::size_t b = 0; b < k; ++b) {
                    const double z = u[uo + a * k + b] * v[vo + b * n + c];
                    ru[uo + a * k + b] += z * scale;
                    rv[vo + b * n + c] += z * scale;
                }
            }
        }
    }
    return {std::move(ru), std::move(rv)};
}

std::pair<Tensor, Tensor> normalize_binary(const Tensor& r_u, const Tensor& r_v,
                                           double r_prev_sum, double epsilon) {
    const double su = r_u.sum(), sv = r_v.sum();
    const double au = r_u.abs_sum(), av = r_v.abs_sum();
    Tensor ru_bar = Tensor::zeros(r_u.shape());
    Tensor rv_bar = Tensor::zeros(r_v.shape());
    if (au + av < epsilon) return {std::move(ru_bar), std::move(rv_bar)};

    const double wu = au / (au + av);
    const double wv = av / (au + av);
    const bool u_alive = std::abs(su) >= epsilon;
    const bool v_alive = std::abs(sv) >= epsilon;
    if (u_alive && v_alive) {
        for (std::size_t i = 0; i < r_u.size(); ++i) ru_bar[i] = r_u[i] * wu * r_prev_sum / su;
        for (std::size_t i = 0; i < r_v.size(); ++i) rv_bar[i] = r_v[i] * wv * r_prev_sum / sv;
    } else if (u_alive) {
        // Degenerate branch: the other operand takes all of r_prev_sum.
        for (std::size_t i = 0; i < r_u.size(); ++i) ru_bar[i] = r_u[i] * r_prev_sum / su;
    } else if (v_alive) {
        for (std::size_t i = 0; i < r_v.size(); ++i) rv_bar[i] = r_v[i] * r_prev_sum / sv;
    }
    return {std::move(ru_bar), std::move(rv_bar)};
}

NetworkRelevance propagate_network(const Tape& tape, std::size_t target_class, const RuleSet& rules) {
    const auto& records = tape.records();
    if (tape.logits_node() < 0) throw std::logic_error("tape has no logits node");
    const Tensor& logits = tape.value(tape.logits_node());

    NetworkRelevance net;
    net.by_node.resize(records.size());
    for (std::size_t i = 0; i < records.size(); ++i) net.by_node[i] = Tensor::zeros(records[i].value.shape());
    net.attention_relevance.resize(tape.num_blocks());

    const Tensor seed = init_relevance(target_class, logits.size());
    for (std::size_t i = 0; i < seed.size(); ++i) net.by_node[static_cast<std::size_t>(tape.logits_node())][i] = seed[i];

    auto frontier_sum = [&](std::size_t next_idx) {
        double s = 0.0;
        for (std::size_t j = 0; j < records.size(); ++j) {
            const bool leaf = records[j].kind == OpKind::Input || records[j].kind == OpKind::Param;
            if (j < next_idx || leaf) s += net.by_node[j].sum();
        }
        return s;
    };

    for (std::size_t idx = records.size(); idx-- > 0;) {
        const LayerRecord& rec = records[idx];
        const Tensor r = net.by_node[idx];
        auto pv = [&](std::size_t i) -> const Tensor& {
            return records[static_cast<std::size_t>(rec.parents[i])].value;
        };
        auto deliver = [&](std::size_t i, const Tensor& contribution) {
            Tensor& dst = net.by_node[static_cast<std::size_t>(rec.parents[i])];
            for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += contribution[k];
        };
        auto split_binary = [&](BinaryOp op) {
            auto [ru, rv] = propagate_binary(pv(0), pv(1), r, op, rules.epsilon);
            if (rules.normalize_binary) {
                const double r_prev = r.sum();
                auto [ru_bar, rv_bar] = normalize_binary(ru, rv, r_prev, rules.epsilon);
                net.conservation_defect += std::abs(r_prev - (ru_bar.sum() + rv_bar.sum()));
                deliver(0, ru_bar);
                deliver(1, rv_bar);
            } else {
                deliver(0, ru);
                deliver(1, rv);
            }
        };

        switch (rec.kind) {
            case OpKind::Input:
            case OpKind::Param:
                break;
            case OpKind::Linear: {
                double defect = 0.0;
                Tensor rx = rules.linear_rule == LinearRule::PositiveSubset
                                ? propagate_linear_positive_subset(pv(0), pv(1), r, rules.epsilon, &defect)
                                : propagate_lrp_classic(pv(0), pv(1), r, rules.epsilon);
                net.conservation_defect += defect;
                deliver(0, rx);
                break;
            }
            case OpKind::MatMul:
                split_binary(BinaryOp::MatMul);
                break;
            case OpKind::Add:
                split_binary(BinaryOp::Add);
                break;
            case OpKind::Softmax:
                if (rec.is_attention_map && rec.block_index >= 0) {
                    net.attention_relevance[static_cast<std::size_t>(rec.block_index)] = r;
                }
                deliver(0, r);
                break;
            case OpKind::Gelu:
            case OpKind::LayerNorm:
            case OpKind::Scale:
                // Elementwise activations and normalization pass relevance
                // through unchanged.
                deliver(0, r);
                break;
            case OpKind::Transpose: {
                const Tensor& x = pv(0);
                Tensor rx = Tensor::zeros(x.shape());
                if (x.rank() == 2) {
                    for (std::size_t i = 0; i < x.extent(0); ++i)
                        for (std::size_t j = 0; j < x.extent(1); ++j) rx.at(i, j) = r.at(j, i);
                } else {
                    for (std::size_t h = 0; h < x.extent(0); ++h)
                        for (std::size_t i = 0; i < x.extent(1); ++i)
                            for (std::size_t j = 0; j < x.extent(2); ++j) rx.at(h, i, j) = r.at(h, j, i);
                }
                deliver(0, rx);
                break;
            }
            case OpKind::SplitHeads: {
                const Tensor& x = pv(0);
                Tensor rx = Tensor::zeros(x.shape());
                const std::size_t hh = rec.value.extent(0), s = rec.value.extent(1), dh = rec.value.extent(2);
                for (std::size_t h = 0; h < hh; ++h)
                    for (std::size_t i = 0; i < s; ++i)
                        for (std::size_t j = 0; j < dh; ++j) rx.at(i, h * dh + j) = r.at(h, i, j);
                deliver(0, rx);
                break;
            }
            case OpKind::MergeHeads: {
                const Tensor& x = pv(0);
                Tensor rx = Tensor::zeros(x.shape());
                const std::size_t hh = x.extent(0), s = x.extent(1), dh = x.extent(2);
                for (std::size_t h = 0; h < hh; ++h)
                    for (std::size_t i = 0; i < s; ++i)
                        for (std::size_t j = 0; j < dh; ++j) rx.at(h, i, j) = r.at(i, h * dh + j);
                deliver(0, rx);
                break;
            }
            case OpKind::ConcatRows: {
                const Tensor& a = pv(0);
                const Tensor& b = pv(1);
                Tensor ra = Tensor::zeros(a.shape());
                Tensor rb = Tensor::zeros(b.shape());
                const std::size_t cols = a.extent(1);
                for (std::size_t i = 0; i < a.extent(0); ++i)
                    for (std::size_t j = 0; j < cols; ++j) ra.at(i, j) = r.at(i, j);
                for (std::size_t i = 0; i < b.extent(0); ++i)
                    for (std::size_t j = 0; j < cols; ++j) rb.at(i, j) = r.at(a.extent(0) + i, j);
                deliver(0, ra);
                deliver(1, rb);
                break;
            }
            case OpKind::SelectRow: {
                const Tensor& x = pv(0);
                Tensor rx = Tensor::zeros(x.shape());
                for (std::size_t j = 0; j < r.size(); ++j) rx.at(rec.row, j) = r[j];
                deliver(0, rx);
                break;
            }
        }
        net.layer_sums.push_back(frontier_sum(idx));
    }
    return net;
}

}  // namespace attrib
