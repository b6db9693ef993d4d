#pragma once

#include <utility>
#include <vector>

#include "tape.hpp"
#include "tensor.hpp"

namespace attrib {

enum class LinearRule { PositiveSubset, ClassicLrp };
enum class BinaryOp { Add, MatMul };

struct RuleSet {
    LinearRule linear_rule = LinearRule::PositiveSubset;
    double epsilon = 1e-9;
    bool normalize_binary = true;
};

// One-hot relevance seed over the classifier output.
Tensor init_relevance(std::size_t target_class, std::size_t classes);

// Generic deep-Taylor propagation for a single-input layer described by its
// output and dense Jacobian (out_size x in_size).
Tensor propagate_generic(const Tensor& x, const Tensor& out, const Tensor& jacobian,
                         const Tensor& r_in, double epsilon = 1e-9);

// Positive-subset linear rule: only index pairs with x_j * w_ji >= 0
// participate. Outputs whose subset is empty drop their relevance; the drop
// is accumulated into *defect when provided.
Tensor propagate_linear_positive_subset(const Tensor& x, const Tensor& w, const Tensor& r_in,
                                        double epsilon = 1e-9, double* defect = nullptr);

// Classic two-branch LRP split over the positive and negative parts of
// z = x_j * w_ji. Violates conservation by 2x when both branches are active.
Tensor propagate_lrp_classic(const Tensor& x, const Tensor& w, const Tensor& r_in,
                             double epsilon = 1e-9);

// Relevance split across the two operands of add / matmul.
std::pair<Tensor, Tensor> propagate_binary(const Tensor& u, const Tensor& v, const Tensor& r_in,
                                           BinaryOp op, double epsilon = 1e-9);

// Rescales the two operand relevances by their relative absolute mass so
// that the pair conserves r_prev_sum and each branch sum stays within
// [0, r_prev_sum] for nonnegative r_prev_sum.
std::pair<Tensor, Tensor> normalize_binary(const Tensor& r_u, const Tensor& r_v,
                                           double r_prev_sum, double epsilon = 1e-9);

struct NetworkRelevance {
    // Relevance delivered to each record's output, aligned with tape records.
    std::vector<Tensor> by_node;
    // R^(n_b) per attention block, indexed by execution order (block 0 is the
    // one closest to the input).
    std::vector<Tensor> attention_relevance;
    // Total pending relevance across the frontier after each record is
    // processed, in reverse execution order.
    std::vector<double> layer_sums;
    // Relevance dropped by degenerate denominators (empty positive subsets,
    // cancelled branch sums).
    double conservation_defect = 0.0;
};

// Full backward relevance pass over a recorded forward tape.
NetworkRelevance propagate_network(const Tape& tape, std::size_t target_class, const RuleSet& rules);

}  // namespace attrib
