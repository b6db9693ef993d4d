#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "explain.hpp"
#include "model.hpp"
#include "tensor.hpp"

namespace attrib {

struct SyntheticItem {
    Tensor input_leaf;  // patch matrix (image) or one-hot rows (text)
    Tensor image;       // H x W pixels, image modality only
    std::size_t label = 0;
    // Ground-truth pixel mask per class; empty tensor when the class's
    // pattern is absent from the item.
    std::vector<Tensor> class_masks;
    std::vector<std::size_t> gold_tokens;  // rationale positions, text only
};

enum class DatasetKind { SingleObject, TwoObject, Decoy };

struct SyntheticDataset {
    Modality modality = Modality::Image;
    std::uint64_t seed = 0;
    DatasetKind kind = DatasetKind::SingleObject;
    std::vector<SyntheticItem> items;
};

// Seeded, bit-reproducible toy data. Image mode places a class-specific
// pattern (solid block vs stripes) in a random patch cell over low noise;
// the two-object variant places both patterns in every item; the decoy
// variant adds the opposite class's pattern to each single-object item so
// class-blind saliency cannot tell target evidence from counter-evidence.
// Text mode plants class-sentinel tokens whose positions form the gold
// rationale.
SyntheticDataset gen_synthetic_dataset(const ModelConfig& config, std::size_t n_items,
                                       std::uint64_t seed,
                                       DatasetKind kind = DatasetKind::SingleObject);

struct TrainResult {
    Model model;
    std::vector<double> epoch_loss;
    double final_accuracy = 0.0;
};

// Plain SGD on softmax cross-entropy using tape gradients; deterministic
// given the seed. Throws on divergence, naming the epoch.
TrainResult train_toy(const ModelConfig& config, const SyntheticDataset& dataset,
                      std::size_t epochs, double lr, std::uint64_t seed);

enum class Polarity { Positive, Negative };
enum class ClassMode { Predicted, Target };

struct PerturbationResult {
    Polarity polarity = Polarity::Positive;
    ClassMode class_mode = ClassMode::Predicted;
    std::vector<double> fractions;  // 0.1 .. 0.9
    std::vector<double> accuracy;
    double auc = 0.0;
};

// Pixel-map provider per item; index is stable so seeded baselines stay
// deterministic under parallel evaluation.
using ExplainFn =
    std::function<RelevanceMap(std::size_t item_index, const SyntheticItem& item,
                               std::optional<std::size_t> target)>;

ExplainFn method_explainer(const Model& model, Method method);
// Uniform-random pixel maps, the reference baseline for ordering checks.
ExplainFn random_map_explainer(const Model& model, std::uint64_t seed);

PerturbationResult perturbation_test(const Model& model, const SyntheticDataset& dataset,
                                     const ExplainFn& explainer, Polarity polarity,
                                     ClassMode class_mode);

struct SegmentationScores {
    double pixel_accuracy = 0.0;
    double mAP = 0.0;
    double mIoU = 0.0;
};

// Per-image mean-value threshold for accuracy/IoU; AP is threshold-free.
SegmentationScores segmentation_metrics(const std::vector<Tensor>& maps,
                                        const std::vector<Tensor>& gts);
double average_precision(const Tensor& scores, const Tensor& mask);

// F1 between the k highest-scoring tokens (ties broken by lower index) and
// the gold token set.
double token_f1_topk(const Tensor& scores, const std::vector<std::size_t>& gold, std::size_t k);

struct EvaluateOptions {
    std::vector<Method> methods;
    std::uint64_t dataset_seed = 7;
    std::size_t items = 50;
    std::uint64_t seed = 1;
    bool include_random_baseline = false;
};

struct EvaluateReport {
    std::string json;
    std::string csv;
};

// Runs every requested method through the protocols that apply to the
// model's modality and renders report.json / report.csv contents.
EvaluateReport evaluate(const Model& model, const EvaluateOptions& options);

// Bounded parallel map honoring the ATTRIB_THREADS cap; results are ordered
// by index regardless of scheduling.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace attrib
