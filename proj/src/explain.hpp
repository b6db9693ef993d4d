#pragma once

#include <optional>
#include <string>

#include "model.hpp"
#include "relevance.hpp"
#include "tensor.hpp"

namespace attrib {

enum class Method {
    Ours,
    OursNoGrad,
    OursBlockLast,   // single block closest to the output
    OursBlockFirst,  // single block closest to the input
    Rollout,
    RawAttention,
    GradcamAttn,
    PartialLrp,
    FullLrp,
};

Method method_from_string(const std::string& name);
std::string method_to_string(Method m);
// Rollout and raw attention ignore the target class entirely.
bool method_is_class_agnostic(Method m);

struct RelevanceMap {
    Method method;
    std::size_t target_class = 0;
    std::size_t predicted_class = 0;
    Tensor token_scores;  // {s-1}, content tokens only
    bool has_pixel_map = false;
    Tensor pixel_map;  // H x W, image modality only
    std::size_t grid_h = 0, grid_w = 0;
};

// I + E_h((grad_a ⊙ rel_a)^+) over an h x s x s pair; clamp=false drops the
// positive part (used to demonstrate why the clamp matters).
Tensor weighted_attention(const Tensor& grad_a, const Tensor& rel_a, bool clamp = true);

// Row-major reshape of per-token scores to the patch grid, then bilinear
// upsampling (align-corners) to out_h x out_w.
Tensor cls_row_to_map(const Tensor& scores, std::size_t grid_h, std::size_t grid_w,
                      std::size_t out_h, std::size_t out_w);

// One entry point for all methods. target absent means the predicted class.
RelevanceMap explain(const Model& model, const Tensor& input_leaf, Method method,
                     std::optional<std::size_t> target = std::nullopt);

// Heatmap sidecar: method, target class, raw token scores, the score grid,
// and the raw range used for PGM normalization.
std::string heatmap_json(const RelevanceMap& map);
// Writes <stem>.pgm (min-max normalized map; token scores as a single row
// for text models) and <stem>.json.
void write_heatmap(const RelevanceMap& map, const std::string& stem);

}  // namespace attrib
