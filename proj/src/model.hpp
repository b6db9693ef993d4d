#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "tape.hpp"
#include "tensor.hpp"

namespace attrib {

class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

class IoError : public std::runtime_error {
public:
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

enum class Modality { Image, Text };

struct ModelConfig {
    Modality modality = Modality::Image;
    std::size_t seq_len = 17;    // s, including the CLS position
    std::size_t embed_dim = 24;  // d
    std::size_t heads = 3;       // h
    std::size_t head_dim = 8;    // d_h, h * d_h = d
    std::size_t blocks = 2;      // B
    std::size_t classes = 2;     // C
    std::size_t mlp_dim = 48;
    std::size_t patch_size = 5;  // image only
    std::size_t vocab_size = 0;  // text only

    void validate() const;
    std::size_t content_tokens() const { return seq_len - 1; }
    // Square patch grid side for image models.
    std::size_t grid_side() const;
    std::size_t image_side() const { return grid_side() * patch_size; }
    std::size_t input_cols() const {
        return modality == Modality::Image ? patch_size * patch_size : vocab_size;
    }
};

struct Model {
    ModelConfig config;
    // Ordered by name for deterministic serialization.
    std::map<std::string, Tensor> params;

    const Tensor& param(const std::string& name) const;
};

struct ForwardResult {
    Tape tape;
    std::map<std::string, int> param_nodes;
    Tensor logits;  // shape {1, C}
    std::size_t predicted_class = 0;
};

Model random_model(const ModelConfig& config, std::uint64_t seed, double weight_scale = 0.5);

// Non-overlapping patch extraction: (s-1) x p^2 row-major patch matrix.
Tensor image_to_patches(const Tensor& image, const ModelConfig& config);
// One-hot rows over the vocabulary; ids are clamped to the content length
// (truncate or pad with the reserved unknown id 1).
Tensor tokens_to_onehot(const std::vector<std::size_t>& ids, const ModelConfig& config);

// Full recorded forward pass. The input leaf is the patch matrix (image) or
// the one-hot token matrix (text).
ForwardResult classify(const Model& model, const Tensor& input_leaf);
ForwardResult classify_image(const Model& model, const Tensor& image);
ForwardResult classify_tokens(const Model& model, const std::vector<std::size_t>& ids);

void save_model(const Model& model, const std::string& path);
Model load_model(const std::string& path);
Model parse_model_json(const std::string& text);
std::string model_to_json(const Model& model);
std::string config_to_json(const ModelConfig& config);

// Gradient check against central finite differences on the full model.
double finite_diff_check(const Model& model, const Tensor& input_leaf, std::size_t target_class,
                         double h, std::size_t n_coords, std::uint64_t seed);

}  // namespace attrib
