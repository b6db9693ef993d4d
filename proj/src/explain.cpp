#include "explain.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "io.hpp"

namespace attrib {

namespace {

// Mean over heads of an h x s x s tensor.
Tensor head_mean(const Tensor& a) {
    const std::size_t hh = a.extent(0), s = a.extent(1);
    Tensor out({s, s});
    for (std::size_t h = 0; h < hh; ++h)
        for (std::size_t i = 0; i < s; ++i)
            for (std::size_t j = 0; j < s; ++j) out.at(i, j) += a.at(h, i, j);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] /= static_cast<double>(hh);
    return out;
}

Tensor add_identity(Tensor m) {
    for (std::size_t i = 0; i < m.extent(0); ++i) m.at(i, i) += 1.0;
    return m;
}

// CLS row without the CLS column.
Tensor cls_row_scores(const Tensor& m) {
    const std::size_t s = m.extent(1);
    Tensor scores({s - 1});
    for (std::size_t j = 1; j < s; ++j) scores[j - 1] = m.at(0, j);
    return scores;
}

Tensor ones_like(const Tensor& t) {
    Tensor out(t.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0;
    return out;
}

// Gradients of the class probability y_t (not the raw logit): seed the
// backward pass with dp_t/dlogits = p_t (1_t - p). The contrastive form is
// what makes the maps class-specific regardless of which logit the model
// uses to encode the evidence.
Gradients probability_gradients(const Tape& tape, std::size_t t) {
    const Tensor p = softmax_lastdim(tape.value(tape.logits_node()));
    Tensor seed(p.shape());
    for (std::size_t c = 0; c < p.size(); ++c) {
        seed[c] = p[t] * ((c == t ? 1.0 : 0.0) - p[c]);
    }
    return tape.backward_with_seed(seed);
}

// Attention rows live on the probability simplex, so the component of the
// gradient along the all-ones direction is unobservable; removing the
// per-row mean keeps only feasible perturbations.
Tensor center_rows(const Tensor& g) {
    Tensor out = g;
    const std::size_t hh = g.extent(0), s = g.extent(1);
    for (std::size_t h = 0; h < hh; ++h) {
        for (std::size_t i = 0; i < s; ++i) {
            double mean = 0.0;
            for (std::size_t j = 0; j < s; ++j) mean += g.at(h, i, j);
            mean /= static_cast<double>(s);
            for (std::size_t j = 0; j < s; ++j) out.at(h, i, j) -= mean;
        }
    }
    return out;
}

}  // namespace

Method method_from_string(const std::string& name) {
    if (name == "ours") return Method::Ours;
    if (name == "ours_no_grad") return Method::OursNoGrad;
    if (name == "ours_block_last") return Method::OursBlockLast;
    if (name == "ours_block_first") return Method::OursBlockFirst;
    if (name == "rollout") return Method::Rollout;
    if (name == "raw_attention") return Method::RawAttention;
    if (name == "gradcam_attn") return Method::GradcamAttn;
    if (name == "partial_lrp") return Method::PartialLrp;
    if (name == "full_lrp") return Method::FullLrp;
    throw ConfigError("unknown explanation method \"" + name + "\"");
}

std::string method_to_string(Method m) {
    switch (m) {
        case Method::Ours: return "ours";
        case Method::OursNoGrad: return "ours_no_grad";
        case Method::OursBlockLast: return "ours_block_last";
        case Method::OursBlockFirst: return "ours_block_first";
        case Method::Rollout: return "rollout";
        case Method::RawAttention: return "raw_attention";
        case Method::GradcamAttn: return "gradcam_attn";
        case Method::PartialLrp: return "partial_lrp";
        case Method::FullLrp: return "full_lrp";
    }
    throw std::logic_error("unreachable method");
}

bool method_is_class_agnostic(Method m) {
    return m == Method::Rollout || m == Method::RawAttention;
}

Tensor weighted_attention(const Tensor& grad_a, const Tensor& rel_a, bool clamp) {
    if (!grad_a.same_shape(rel_a)) {
        throw ShapeError("gradient/relevance shapes differ: " + grad_a.shape_str() + " vs " +
                         rel_a.shape_str());
    }
    Tensor prod(grad_a.shape());
    for (std::size_t i = 0; i < prod.size(); ++i) {
        const double v = grad_a[i] * rel_a[i];
        prod[i] = clamp ? std::max(v, 0.0) : v;
    }
    return add_identity(head_mean(prod));
}

Tensor cls_row_to_map(const Tensor& scores, std::size_t grid_h, std::size_t grid_w,
                      std::size_t out_h, std::size_t out_w) {
    if (scores.size() != grid_h * grid_w) {
        throw ShapeError("cannot reshape " + std::to_string(scores.size()) + " scores to a " +
                         std::to_string(grid_h) + "x" + std::to_string(grid_w) + " grid");
    }
    Tensor grid({grid_h, grid_w}, std::vector<double>(scores.data(), scores.data() + scores.size()));
    Tensor out({out_h, out_w});
    for (std::size_t y = 0; y < out_h; ++y) {
        const double sy = out_h > 1
                              ? static_cast<double>(y) * static_cast<double>(grid_h - 1) /
                                    static_cast<double>(out_h - 1)
                              : 0.0;
        const std::size_t y0 = std::min(static_cast<std::size_t>(sy), grid_h - 1);
        const std::size_t y1 = std::min(y0 + 1, grid_h - 1);
        const double fy = sy - static_cast<double>(y0);
        for (std::size_t x = 0; x < out_w; ++x) {
            const double sx = out_w > 1
                                  ? static_cast<double>(x) * static_cast<double>(grid_w - 1) /
                                        static_cast<double>(out_w - 1)
                                  : 0.0;
            const std::size_t x0 = std::min(static_cast<std::size_t>(sx), grid_w - 1);
            const std::size_t x1 = std::min(x0 + 1, grid_w - 1);
            const double fx = sx - static_cast<double>(x0);
            out.at(y, x) = grid.at(y0, x0) * (1 - fy) * (1 - fx) + grid.at(y0, x1) * (1 - fy) * fx +
                           grid.at(y1, x0) * fy * (1 - fx) + grid.at(y1, x1) * fy * fx;
        }
    }
    return out;
}

RelevanceMap explain(const Model& model, const Tensor& input_leaf, Method method,
                     std::optional<std::size_t> target) {
    ForwardResult fwd = classify(model, input_leaf);
    const std::size_t t = target.value_or(fwd.predicted_class);
    if (t >= model.config.classes) {
        throw std::out_of_range("target class " + std::to_string(t) + " out of range for " +
                                std::to_string(model.config.classes) + " classes");
    }
    const Tape& tape = fwd.tape;
    const std::vector<int> attn_nodes = tape.attention_nodes();
    const std::size_t num_blocks = attn_nodes.size();
    const std::size_t s = model.config.seq_len;

    RelevanceMap result;
    result.method = method;
    result.target_class = t;
    result.predicted_class = fwd.predicted_class;

    // Multiplies per-block matrices with the block closest to the output
    // leftmost, matching the attention-rollout product order.
    auto block_product = [&](auto&& block_matrix) {
        Tensor c = Tensor::identity(s);
        for (std::size_t b = num_blocks; b-- > 0;) c = matmul(c, block_matrix(b));
        return c;
    };

    switch (method) {
        case Method::Ours:
        case Method::OursNoGrad:
        case Method::OursBlockLast:
        case Method::OursBlockFirst: {
            const Gradients grads = probability_gradients(tape, t);
            const NetworkRelevance net = propagate_network(tape, t, RuleSet{});
            auto abar = [&](std::size_t b) {
                const Tensor a_grad =
                    center_rows(grads.by_node[static_cast<std::size_t>(attn_nodes[b])]);
                const Tensor& a_rel = net.attention_relevance[b];
                return method == Method::OursNoGrad ? weighted_attention(ones_like(a_rel), a_rel)
                                                    : weighted_attention(a_grad, a_rel);
            };
            if (method == Method::OursBlockLast) {
                result.token_scores = cls_row_scores(abar(num_blocks - 1));
            } else if (method == Method::OursBlockFirst) {
                result.token_scores = cls_row_scores(abar(0));
            } else {
                result.token_scores = cls_row_scores(block_product(abar));
            }
            break;
        }
        case Method::Rollout: {
            result.token_scores = cls_row_scores(block_product([&](std::size_t b) {
                return add_identity(head_mean(tape.value(attn_nodes[b])));
            }));
            break;
        }
        case Method::RawAttention: {
            result.token_scores = cls_row_scores(head_mean(tape.value(attn_nodes[num_blocks - 1])));
            break;
        }
        case Method::GradcamAttn: {
            // CLS row of the attention map closest to the output as an
            // h-channel feature map over token positions; channel weights are
            // position-averaged gradients, the weighted sum is clamped.
            const Gradients grads = probability_gradients(tape, t);
            const Tensor& a = tape.value(attn_nodes[num_blocks - 1]);
            const Tensor& ga = grads.by_node[static_cast<std::size_t>(attn_nodes[num_blocks - 1])];
            const std::size_t hh = a.extent(0);
            Tensor scores({s - 1});
            for (std::size_t h = 0; h < hh; ++h) {
                double alpha = 0.0;
                for (std::size_t j = 1; j < s; ++j) alpha += ga.at(h, 0, j);
                alpha /= static_cast<double>(s - 1);
                for (std::size_t j = 1; j < s; ++j) scores[j - 1] += alpha * a.at(h, 0, j);
            }
            for (std::size_t i = 0; i < scores.size(); ++i) scores[i] = std::max(scores[i], 0.0);
            result.token_scores = scores;
            break;
        }
        case Method::PartialLrp: {
            const NetworkRelevance net =
                propagate_network(tape, t, RuleSet{LinearRule::ClassicLrp, 1e-9, false});
            result.token_scores = cls_row_scores(head_mean(net.attention_relevance[num_blocks - 1]));
            break;
        }
        case Method::FullLrp: {
            const NetworkRelevance net =
                propagate_network(tape, t, RuleSet{LinearRule::ClassicLrp, 1e-9, false});
            const Tensor& leaf = net.by_node[static_cast<std::size_t>(tape.input_node())];
            Tensor scores({s - 1});
            for (std::size_t i = 0; i + 1 < s; ++i)
                for (std::size_t j = 0; j < leaf.extent(1); ++j) scores[i] += leaf.at(i, j);
            result.token_scores = scores;
            break;
        }
    }

    if (!result.token_scores.all_finite()) {
        throw std::runtime_error("non-finite token scores from method " + method_to_string(method));
    }

    if (model.config.modality == Modality::Image) {
        const std::size_t g = model.config.grid_side();
        const std::size_t side = model.config.image_side();
        result.grid_h = result.grid_w = g;
        result.pixel_map = cls_row_to_map(result.token_scores, g, g, side, side);
        result.has_pixel_map = true;
    }
    return result;
}

namespace {

std::pair<double, double> raw_range(const RelevanceMap& map) {
    const Tensor& src = map.has_pixel_map ? map.pixel_map : map.token_scores;
    double lo = src[0], hi = src[0];
    for (std::size_t i = 0; i < src.size(); ++i) {
        lo = std::min(lo, src[i]);
        hi = std::max(hi, src[i]);
    }
    return {lo, hi};
}

}  // namespace

std::string heatmap_json(const RelevanceMap& map) {
    const auto [lo, hi] = raw_range(map);
    nlohmann::ordered_json j;
    j["method"] = method_to_string(map.method);
    j["target_class"] = map.target_class;
    j["token_scores"] = std::vector<double>(map.token_scores.data(),
                                            map.token_scores.data() + map.token_scores.size());
    j["grid"] = map.has_pixel_map
                    ? std::vector<std::size_t>{map.grid_h, map.grid_w}
                    : std::vector<std::size_t>{1, map.token_scores.size()};
    j["raw_min"] = lo;
    j["raw_max"] = hi;
    return j.dump(2) + "\n";
}

void write_heatmap(const RelevanceMap& map, const std::string& stem) {
    const Tensor& src = map.has_pixel_map ? map.pixel_map : map.token_scores;
    const auto [lo, hi] = raw_range(map);
    const double span = hi - lo;
    Tensor img(map.has_pixel_map ? src.shape() : std::vector<std::size_t>{1, src.size()});
    for (std::size_t i = 0; i < src.size(); ++i) {
        img[i] = span > 0.0 ? (src[i] - lo) / span : 0.0;
    }
    write_pgm(stem + ".pgm", img);
    write_file(stem + ".json", heatmap_json(map));
}

}  // namespace attrib
