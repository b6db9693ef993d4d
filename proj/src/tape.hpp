#pragma once

#include <cstdint>
#include <vector>

#include "tensor.hpp"

namespace attrib {

enum class OpKind {
    Input,
    Param,
    MatMul,
    Add,
    Softmax,
    Gelu,
    LayerNorm,
    Linear,
    Scale,
    Transpose,
    SplitHeads,
    MergeHeads,
    ConcatRows,
    SelectRow,
};

// One recorded forward operation. Parents index earlier records; leaves
// (Input/Param) have none.
struct LayerRecord {
    OpKind kind;
    Tensor value;
    std::vector<int> parents;

    double scale_factor = 1.0;   // Scale
    double ln_eps = 0.0;         // LayerNorm
    std::size_t heads = 0;       // SplitHeads
    std::size_t row = 0;         // SelectRow
    int block_index = -1;        // attention softmax only
    bool is_attention_map = false;
};

struct Gradients {
    // Gradient of y_t w.r.t. each record's output, aligned with Tape records.
    std::vector<Tensor> by_node;
};

class Tape {
public:
    int add_input(Tensor value);
    int add_param(Tensor value);
    int matmul(int a, int b);
    int add(int a, int b);
    int softmax(int x, int block_index = -1, bool is_attention_map = false);
    int gelu(int x);
    int layer_norm(int x, int gamma, int beta, double eps);
    int linear(int x, int w, int bias);
    int scale(int x, double factor);
    int transpose(int x);
    int split_heads(int x, std::size_t heads);
    int merge_heads(int x);
    int concat_rows(int a, int b);
    int select_row(int x, std::size_t row);

    const std::vector<LayerRecord>& records() const { return records_; }
    const Tensor& value(int node) const { return records_[static_cast<std::size_t>(node)].value; }
    std::size_t num_records() const { return records_.size(); }

    int input_node() const { return input_node_; }
    int logits_node() const { return logits_node_; }
    std::size_t num_blocks() const { return num_blocks_; }
    void set_input_node(int n) { input_node_ = n; }
    void set_logits_node(int n) { logits_node_ = n; }
    void set_num_blocks(std::size_t b) { num_blocks_ = b; }

    // Attention-map record indices in execution order (block 0 first).
    std::vector<int> attention_nodes() const;

    // Overwrites a leaf value; replay() then recomputes every non-leaf record.
    void set_leaf_value(int node, Tensor value);
    void replay();

    // Reverse-mode gradients of y_t (logits element t) w.r.t. every record.
    Gradients backward(std::size_t target_class) const;

    // Same pass seeded with an arbitrary cotangent on the logits (used by the
    // toy trainer for cross-entropy).
    Gradients backward_with_seed(const Tensor& seed) const;

private:
    int emit(LayerRecord rec);
    Tensor compute(const LayerRecord& rec) const;

    std::vector<LayerRecord> records_;
    int input_node_ = -1;
    int logits_node_ = -1;
    std::size_t num_blocks_ = 0;
};

// Max relative error between analytic gradients and central finite
// differences over n_coords sampled coordinates of the input leaf.
double finite_diff_check(const Tape& tape, std::size_t target_class, double h,
                         std::size_t n_coords, std::uint64_t seed);

}  // namespace attrib
