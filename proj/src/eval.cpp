#include "eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "rng.hpp"

namespace attrib {

namespace {

constexpr double kNoiseAmplitude = 0.05;

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t idx) {
    return seed ^ (0x9e3779b97f4a7c15ULL * (idx + 1));
}

// Class 0: solid block. Class 1: vertical stripes. contrast scales the
// pattern's intensity.
void stamp_pattern(Tensor& image, std::size_t cell, std::size_t cls, const ModelConfig& c,
                   double contrast = 1.0) {
    const std::size_t g = c.grid_side(), p = c.patch_size;
    const std::size_t gy = cell / g, gx = cell % g;
    for (std::size_t py = 0; py < p; ++py)
        for (std::size_t px = 0; px < p; ++px) {
            const double v = cls == 0 ? 1.0 : (px % 2 == 0 ? 1.0 : 0.0);
            image.at(gy * p + py, gx * p + px) = contrast * v;
        }
}

// Class-neutral salient object: horizontal stripes, present in every
// single-object item so class-agnostic saliency has a false target.
void stamp_distractor(Tensor& image, std::size_t cell, const ModelConfig& c) {
    const std::size_t g = c.grid_side(), p = c.patch_size;
    const std::size_t gy = cell / g, gx = cell % g;
    for (std::size_t py = 0; py < p; ++py)
        for (std::size_t px = 0; px < p; ++px) {
            image.at(gy * p + py, gx * p + px) = py % 2 == 0 ? 1.0 : 0.0;
        }
}

Tensor cell_mask(std::size_t cell, const ModelConfig& c) {
    const std::size_t g = c.grid_side(), p = c.patch_size, side = c.image_side();
    Tensor mask({side, side});
    const std::size_t gy = cell / g, gx = cell % g;
    for (std::size_t py = 0; py < p; ++py)
        for (std::size_t px = 0; px < p; ++px) mask.at(gy * p + py, gx * p + px) = 1.0;
    return mask;
}

std::vector<double> softmax_vec(const Tensor& logits) {
    std::vector<double> p(logits.size());
    double mx = logits[0];
    for (std::size_t i = 1; i < logits.size(); ++i) mx = std::max(mx, logits[i]);
    double denom = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        p[i] = std::exp(logits[i] - mx);
        denom += p[i];
    }
    for (double& v : p) v /= denom;
    return p;
}

std::vector<std::size_t> order_by_score(const Tensor& scores, bool descending) {
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        return descending ? scores[a] > scores[b] : scores[a] < scores[b];
    });
    return idx;
}

std::string fmt(double v) { return nlohmann::json(v).dump(); }

}  // namespace

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
    std::size_t threads = std::max(1u, std::thread::hardware_concurrency());
    if (const char* cap = std::getenv("ATTRIB_THREADS")) {
        const long v = std::strtol(cap, nullptr, 10);
        if (v >= 1) threads = static_cast<std::size_t>(v);
    }
    threads = std::min(threads, n);
    if (threads <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::exception_ptr first_error;
    std::mutex err_mutex;
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) {
        pool.emplace_back([&, t] {
            for (std::size_t i = t; i < n; i += threads) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(err_mutex);
                    if (!first_error) first_error = std::current_exception();
                }
            }
        });
    }
    for (auto& th : pool) th.join();
    if (first_error) std::rethrow_exception(first_error);
}

SyntheticDataset gen_synthetic_dataset(const ModelConfig& config, std::size_t n_items,
                                       std::uint64_t seed, DatasetKind kind) {
    if (n_items == 0) throw ConfigError("dataset must contain at least one item");
    config.validate();
    SyntheticDataset ds;
    ds.modality = config.modality;
    ds.seed = seed;
    ds.kind = kind;
    Rng rng(seed);

    for (std::size_t i = 0; i < n_items; ++i) {
        SyntheticItem item;
        item.label = i % 2;
        item.class_masks.resize(config.classes);
        if (config.modality == Modality::Image) {
            const std::size_t side = config.image_side();
            const std::size_t cells = config.content_tokens();
            Tensor image({side, side});
            for (std::size_t k = 0; k < image.size(); ++k) image[k] = kNoiseAmplitude * rng.uniform();
            if (kind == DatasetKind::TwoObject) {
                // Both class patterns appear at full contrast; per-class
                // masks let class-conditioned explanations be scored against
                // each pattern's region separately.
                const std::size_t a = rng.index(cells);
                std::size_t b = rng.index(cells - 1);
                if (b >= a) ++b;
                stamp_pattern(image, a, 0, config);
                stamp_pattern(image, b, 1, config);
                item.class_masks[0] = cell_mask(a, config);
                item.class_masks[1] = cell_mask(b, config);
            } else {
                const std::size_t cell = rng.index(cells);
                std::size_t dcell = rng.index(cells - 1);
                if (dcell >= cell) ++dcell;
                stamp_pattern(image, cell, item.label, config);
                stamp_distractor(image, dcell, config);
                item.class_masks[item.label] = cell_mask(cell, config);
                if (kind == DatasetKind::Decoy) {
                    // Opposite class's pattern in a third cell, equal
                    // contrast: only class-conditioned evidence separates
                    // the true pattern from the decoy.
                    std::size_t lo = std::min(cell, dcell), hi = std::max(cell, dcell);
                    std::size_t xcell = rng.index(cells - 2);
                    if (xcell >= lo) ++xcell;
                    if (xcell >= hi) ++xcell;
                    stamp_pattern(image, xcell, 1 - item.label, config);
                    item.class_masks[1 - item.label] = cell_mask(xcell, config);
                }
            }
            item.image = image;
            item.input_leaf = image_to_patches(image, config);
        } else {
            const std::size_t n = config.content_tokens();
            std::vector<std::size_t> ids(n);
            for (std::size_t k = 0; k < n; ++k) {
                ids[k] = config.vocab_size > 4 ? 4 + rng.index(config.vocab_size - 4) : 1;
            }
            const std::size_t n_gold = std::max<std::size_t>(1, n / 8);
            std::vector<std::size_t> positions(n);
            std::iota(positions.begin(), positions.end(), 0);
            for (std::size_t k = 0; k < n_gold; ++k) {
                const std::size_t pick = k + rng.index(n - k);
                std::swap(positions[k], positions[pick]);
            }
            positions.resize(n_gold);
            std::sort(positions.begin(), positions.end());
            for (std::size_t pos : positions) ids[pos] = 2 + item.label;
            item.gold_tokens = positions;
            item.input_leaf = tokens_to_onehot(ids, config);
        }
        ds.items.push_back(std::move(item));
    }
    return ds;
}

TrainResult train_toy(const ModelConfig& config, const SyntheticDataset& dataset,
                      std::size_t epochs, double lr, std::uint64_t seed) {
    if (dataset.items.empty()) throw ConfigError("cannot train on an empty dataset");
    TrainResult res;
    res.model = random_model(config, seed);

    for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
        double loss_sum = 0.0;
        for (const SyntheticItem& item : dataset.items) {
            ForwardResult fwd = classify(res.model, item.input_leaf);
            const std::vector<double> p = softmax_vec(fwd.logits);
            loss_sum += -std::log(std::max(p[item.label], 1e-300));
            if (lr == 0.0) continue;
            Tensor grad_seed(fwd.logits.shape());
            for (std::size_t c = 0; c < p.size(); ++c) {
                grad_seed[c] = p[c] - (c == item.label ? 1.0 : 0.0);
            }
            const Gradients grads = fwd.tape.backward_with_seed(grad_seed);
            for (const auto& [name, node] : fwd.param_nodes) {
                Tensor& param = res.model.params.at(name);
                const Tensor& g = grads.by_node[static_cast<std::size_t>(node)];
                for (std::size_t k = 0; k < param.size(); ++k) param[k] -= lr * g[k];
            }
        }
        const double mean_loss = loss_sum / static_cast<double>(dataset.items.size());
        if (!std::isfinite(mean_loss)) {
            throw std::runtime_error("training diverged (non-finite loss) at epoch " +
                                     std::to_string(epoch));
        }
        res.epoch_loss.push_back(mean_loss);
    }

    std::size_t correct = 0;
    for (const SyntheticItem& item : dataset.items) {
        if (classify(res.model, item.input_leaf).predicted_class == item.label) ++correct;
    }
    res.final_accuracy = static_cast<double>(correct) / static_cast<double>(dataset.items.size());
    return res;
}

ExplainFn method_explainer(const Model& model, Method method) {
    return [&model, method](std::size_t, const SyntheticItem& item,
                            std::optional<std::size_t> target) {
        return explain(model, item.input_leaf, method, target);
    };
}

ExplainFn random_map_explainer(const Model& model, std::uint64_t seed) {
    const ModelConfig config = model.config;
    return [config, seed](std::size_t idx, const SyntheticItem&,
                          std::optional<std::size_t> target) {
        Rng rng(mix_seed(seed, idx));
        RelevanceMap map;
        map.method = Method::Rollout;  // placeholder tag, never reported
        map.target_class = target.value_or(0);
        map.token_scores = Tensor({config.content_tokens()});
        for (std::size_t i = 0; i < map.token_scores.size(); ++i) map.token_scores[i] = rng.uniform();
        if (config.modality == Modality::Image) {
            const std::size_t side = config.image_side();
            map.pixel_map = Tensor({side, side});
            for (std::size_t i = 0; i < map.pixel_map.size(); ++i) map.pixel_map[i] = rng.uniform();
            map.has_pixel_map = true;
            map.grid_h = map.grid_w = config.grid_side();
        }
        return map;
    };
}

PerturbationResult perturbation_test(const Model& model, const SyntheticDataset& dataset,
                                     const ExplainFn& explainer, Polarity polarity,
                                     ClassMode class_mode) {
    if (model.config.modality != Modality::Image) {
        throw ConfigError("perturbation test requires an image model");
    }
    if (dataset.items.empty()) throw ConfigError("perturbation test on empty dataset");

    PerturbationResult res;
    res.polarity = polarity;
    res.class_mode = class_mode;
    for (int i = 1; i <= 9; ++i) res.fractions.push_back(0.1 * i);

    const std::size_t n = dataset.items.size();
    std::vector<std::vector<int>> correct(n, std::vector<int>(res.fractions.size(), 0));
    parallel_for(n, [&](std::size_t i) {
        const SyntheticItem& item = dataset.items[i];
        const std::optional<std::size_t> target =
            class_mode == ClassMode::Target ? std::optional<std::size_t>(item.label) : std::nullopt;
        const RelevanceMap map = explainer(i, item, target);
        if (!map.has_pixel_map) throw ConfigError("explainer produced no pixel map");
        const std::vector<std::size_t> order =
            order_by_score(map.pixel_map, polarity == Polarity::Positive);
        for (std::size_t f = 0; f < res.fractions.size(); ++f) {
            const auto n_mask = static_cast<std::size_t>(
                std::llround(res.fractions[f] * static_cast<double>(item.image.size())));
            Tensor masked = item.image;
            for (std::size_t k = 0; k < n_mask; ++k) masked[order[k]] = 0.0;
            const ForwardResult fwd = classify_image(model, masked);
            correct[i][f] = fwd.predicted_class == item.label ? 1 : 0;
        }
    });

    for (std::size_t f = 0; f < res.fractions.size(); ++f) {
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) acc += correct[i][f];
        res.accuracy.push_back(acc / static_cast<double>(n));
    }
    double area = 0.0;
    for (std::size_t f = 0; f + 1 < res.fractions.size(); ++f) {
        area += 0.5 * (res.accuracy[f] + res.accuracy[f + 1]) *
                (res.fractions[f + 1] - res.fractions[f]);
    }
    res.auc = area / (res.fractions.back() - res.fractions.front());
    return res;
}

double average_precision(const Tensor& scores, const Tensor& mask) {
    if (!scores.same_shape(mask)) {
        throw ShapeError("score/mask shapes differ: " + scores.shape_str() + " vs " + mask.shape_str());
    }
    std::size_t total_pos = 0;
    for (std::size_t i = 0; i < mask.size(); ++i)
        if (mask[i] > 0.5) ++total_pos;
    if (total_pos == 0) throw ConfigError("average precision needs a nonempty mask");

    const std::vector<std::size_t> order = order_by_score(scores, true);
    double ap = 0.0;
    std::size_t hits = 0;
    for (std::size_t rank = 0; rank < order.size(); ++rank) {
        if (mask[order[rank]] > 0.5) {
            ++hits;
            ap += static_cast<double>(hits) / static_cast<double>(rank + 1);
        }
    }
    return ap / static_cast<double>(total_pos);
}

SegmentationScores segmentation_metrics(const std::vector<Tensor>& maps,
                                        const std::vector<Tensor>& gts) {
    if (maps.size() != gts.size() || maps.empty()) {
        throw ConfigError("segmentation_metrics needs matching nonempty map/mask lists");
    }
    SegmentationScores scores;
    std::size_t pixels = 0, correct = 0;
    double inter_fg = 0, union_fg = 0, inter_bg = 0, union_bg = 0;
    double ap_sum = 0.0;
    for (std::size_t i = 0; i < maps.size(); ++i) {
        const Tensor& map = maps[i];
        const Tensor& gt = gts[i];
        if (!map.same_shape(gt)) {
            throw ShapeError("map/mask shapes differ at item " + std::to_string(i) + ": " +
                             map.shape_str() + " vs " + gt.shape_str());
        }
        ap_sum += average_precision(map, gt);
        const double thr = map.sum() / static_cast<double>(map.size());
        for (std::size_t k = 0; k < map.size(); ++k) {
            const bool pred = map[k] >= thr;
            const bool pos = gt[k] > 0.5;
            ++pixels;
            if (pred == pos) ++correct;
            if (pred && pos) ++inter_fg;
            if (pred || pos) ++union_fg;
            if (!pred && !pos) ++inter_bg;
            if (!pred || !pos) ++union_bg;
        }
    }
    scores.pixel_accuracy = static_cast<double>(correct) / static_cast<double>(pixels);
    scores.mAP = ap_sum / static_cast<double>(maps.size());
    const double iou_fg = union_fg > 0 ? inter_fg / union_fg : 1.0;
    const double iou_bg = union_bg > 0 ? inter_bg / union_bg : 1.0;
    scores.mIoU = 0.5 * (iou_fg + iou_bg);
    return scores;
}

double token_f1_topk(const Tensor& scores, const std::vector<std::size_t>& gold, std::size_t k) {
    if (k == 0) throw ConfigError("token F1 needs k >= 1");
    if (k > scores.size()) {
        throw ConfigError("k=" + std::to_string(k) + " exceeds " + std::to_string(scores.size()) +
                          " content tokens");
    }
    const std::vector<std::size_t> order = order_by_score(scores, true);
    std::size_t overlap = 0;
    for (std::size_t rank = 0; rank < k; ++rank) {
        if (std::find(gold.begin(), gold.end(), order[rank]) != gold.end()) ++overlap;
    }
    if (overlap == 0 || gold.empty()) return 0.0;
    const double precision = static_cast<double>(overlap) / static_cast<double>(k);
    const double recall = static_cast<double>(overlap) / static_cast<double>(gold.size());
    return 2.0 * precision * recall / (precision + recall);
}

namespace {

const char* polarity_name(Polarity p) { return p == Polarity::Positive ? "positive" : "negative"; }
const char* class_mode_name(ClassMode m) { return m == ClassMode::Predicted ? "predicted" : "target"; }

nlohmann::ordered_json perturbation_json(const std::string& method, const PerturbationResult& r) {
    nlohmann::ordered_json j;
    j["method"] = method;
    j["polarity"] = polarity_name(r.polarity);
    j["class_mode"] = class_mode_name(r.class_mode);
    j["fractions"] = r.fractions;
    j["accuracy"] = r.accuracy;
    j["auc"] = r.auc;
    return j;
}

}  // namespace

EvaluateReport evaluate(const Model& model, const EvaluateOptions& options) {
    // Image protocols run on the decoy variant: both class patterns are
    // present, so the metrics reward class-conditioned localization.
    const DatasetKind kind = model.config.modality == Modality::Image ? DatasetKind::Decoy
                                                                      : DatasetKind::SingleObject;
    const SyntheticDataset dataset =
        gen_synthetic_dataset(model.config, options.items, options.dataset_seed, kind);

    std::vector<std::pair<std::string, ExplainFn>> explainers;
    for (Method m : options.methods) {
        explainers.emplace_back(method_to_string(m), method_explainer(model, m));
    }
    if (options.include_random_baseline) {
        explainers.emplace_back("random", random_map_explainer(model, options.seed));
    }

    nlohmann::ordered_json report;
    report["seed"] = options.seed;
    report["dataset_seed"] = options.dataset_seed;
    report["items"] = options.items;
    report["config"] = nlohmann::ordered_json::parse(config_to_json(model.config));
    std::ostringstream csv;

    if (model.config.modality == Modality::Image) {
        report["perturbation"] = nlohmann::ordered_json::array();
        report["segmentation"] = nlohmann::ordered_json::array();
        csv << "section,method,polarity,class_mode,auc\n";
        for (const auto& [name, fn] : explainers) {
            for (Polarity pol : {Polarity::Positive, Polarity::Negative}) {
                for (ClassMode mode : {ClassMode::Predicted, ClassMode::Target}) {
                    const PerturbationResult r = perturbation_test(model, dataset, fn, pol, mode);
                    report["perturbation"].push_back(perturbation_json(name, r));
                    csv << "perturbation," << name << "," << polarity_name(pol) << ","
                        << class_mode_name(mode) << "," << fmt(r.auc) << "\n";
                }
            }
        }
        csv << "section,method,pixel_accuracy,mAP,mIoU\n";
        for (const auto& [name, fn] : explainers) {
            std::vector<Tensor> maps(dataset.items.size());
            std::vector<Tensor> gts(dataset.items.size());
            parallel_for(dataset.items.size(), [&](std::size_t i) {
                const SyntheticItem& item = dataset.items[i];
                maps[i] = fn(i, item, item.label).pixel_map;
                gts[i] = item.class_masks[item.label];
            });
            const SegmentationScores s = segmentation_metrics(maps, gts);
            nlohmann::ordered_json j;
            j["method"] = name;
            j["pixel_accuracy"] = s.pixel_accuracy;
            j["mAP"] = s.mAP;
            j["mIoU"] = s.mIoU;
            report["segmentation"].push_back(std::move(j));
            csv << "segmentation," << name << "," << fmt(s.pixel_accuracy) << "," << fmt(s.mAP)
                << "," << fmt(s.mIoU) << "\n";
        }
    } else {
        report["token_f1"] = nlohmann::ordered_json::array();
        csv << "section,method,k,f1\n";
        std::vector<std::size_t> ks;
        for (std::size_t k = 10; k <= 80 && k <= model.config.content_tokens(); k += 10) ks.push_back(k);
        if (ks.empty()) ks.push_back(model.config.content_tokens());
        for (const auto& [name, fn] : explainers) {
            std::vector<Tensor> scores(dataset.items.size());
            parallel_for(dataset.items.size(), [&](std::size_t i) {
                scores[i] = fn(i, dataset.items[i], dataset.items[i].label).token_scores;
            });
            nlohmann::ordered_json j;
            j["method"] = name;
            j["k"] = ks;
            std::vector<double> f1s;
            for (std::size_t k : ks) {
                double f1 = 0.0;
                for (std::size_t i = 0; i < dataset.items.size(); ++i) {
                    f1 += token_f1_topk(scores[i], dataset.items[i].gold_tokens, k);
                }
                f1 /= static_cast<double>(dataset.items.size());
                f1s.push_back(f1);
                csv << "token_f1," << name << "," << k << "," << fmt(f1) << "\n";
            }
            j["f1"] = f1s;
            report["token_f1"].push_back(std::move(j));
        }
    }

    return EvaluateReport{report.dump(2) + "\n", csv.str()};
}

}  // namespace attrib
