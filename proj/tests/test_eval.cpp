#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <set>
#include <vector>

#include <json.hpp>

#include "eval.hpp"
#include "explain.hpp"
#include "model.hpp"
#include "rng.hpp"

using namespace attrib;

namespace {

ModelConfig text_config() {
    ModelConfig c;
    c.modality = Modality::Text;
    c.vocab_size = 16;
    return c;
}

// Patch cell covered by a mask, or npos for an empty mask.
std::size_t mask_cell(const Tensor& mask, const ModelConfig& c) {
    if (mask.size() == 0) return static_cast<std::size_t>(-1);
    const std::size_t g = c.grid_side(), p = c.patch_size;
    for (std::size_t cell = 0; cell < g * g; ++cell) {
        if (mask.at((cell / g) * p, (cell % g) * p) > 0.5) return cell;
    }
    return static_cast<std::size_t>(-1);
}

}  // namespace

TEST_CASE("image datasets are seed-deterministic with per-class masks") {
    ModelConfig c;
    const SyntheticDataset a = gen_synthetic_dataset(c, 6, 5);
    const SyntheticDataset b = gen_synthetic_dataset(c, 6, 5);
    const SyntheticDataset other = gen_synthetic_dataset(c, 6, 6);
    REQUIRE(a.items.size() == 6);
    CHECK(std::memcmp(a.items[3].image.data(), b.items[3].image.data(),
                      a.items[3].image.size() * sizeof(double)) == 0);
    bool differs = false;
    for (std::size_t i = 0; i < a.items[0].image.size(); ++i)
        differs = differs || a.items[0].image[i] != other.items[0].image[i];
    CHECK(differs);

    for (std::size_t i = 0; i < a.items.size(); ++i) {
        const SyntheticItem& item = a.items[i];
        CHECK(item.label == i % 2);
        // Exactly the label's mask is present and covers one patch cell.
        CHECK(item.class_masks[item.label].sum() ==
              static_cast<double>(c.patch_size * c.patch_size));
        CHECK(item.class_masks[1 - item.label].size() == 0);
        CHECK(mask_cell(item.class_masks[item.label], c) != static_cast<std::size_t>(-1));
        CHECK(item.input_leaf.shape() ==
              std::vector<std::size_t>{c.content_tokens(), c.input_cols()});
    }
    CHECK_THROWS_AS(gen_synthetic_dataset(c, 0, 1), ConfigError);
}

TEST_CASE("two-object and decoy variants place both patterns in distinct cells") {
    ModelConfig c;
    for (DatasetKind kind : {DatasetKind::TwoObject, DatasetKind::Decoy}) {
        const SyntheticDataset ds = gen_synthetic_dataset(c, 8, 9, kind);
        for (const SyntheticItem& item : ds.items) {
            const std::size_t c0 = mask_cell(item.class_masks[0], c);
            const std::size_t c1 = mask_cell(item.class_masks[1], c);
            CHECK(c0 != static_cast<std::size_t>(-1));
            CHECK(c1 != static_cast<std::size_t>(-1));
            CHECK(c0 != c1);
        }
    }
}

TEST_CASE("text datasets plant sentinel tokens at the gold positions") {
    const ModelConfig c = text_config();
    const SyntheticDataset ds = gen_synthetic_dataset(c, 4, 3);
    for (const SyntheticItem& item : ds.items) {
        REQUIRE(!item.gold_tokens.empty());
        CHECK(std::is_sorted(item.gold_tokens.begin(), item.gold_tokens.end()));
        const std::set<std::size_t> unique(item.gold_tokens.begin(), item.gold_tokens.end());
        CHECK(unique.size() == item.gold_tokens.size());
        for (std::size_t pos : item.gold_tokens) {
            CHECK(item.input_leaf.at(pos, 2 + item.label) == 1.0);
        }
    }
}

TEST_CASE("toy training is deterministic and lr=0 is a no-op") {
    ModelConfig c;
    const SyntheticDataset ds = gen_synthetic_dataset(c, 4, 2);
    const TrainResult a = train_toy(c, ds, 2, 0.05, 3);
    const TrainResult b = train_toy(c, ds, 2, 0.05, 3);
    CHECK(model_to_json(a.model) == model_to_json(b.model));
    CHECK(a.epoch_loss.size() == 2);
    CHECK(a.epoch_loss == b.epoch_loss);

    const TrainResult frozen = train_toy(c, ds, 2, 0.0, 3);
    CHECK(model_to_json(frozen.model) == model_to_json(random_model(c, 3)));
    CHECK(frozen.epoch_loss[0] == frozen.epoch_loss[1]);
}

TEST_CASE("average precision matches hand-worked rankings") {
    // Perfect ranking: both positives lead.
    CHECK(average_precision(Tensor({4}, {0.9, 0.1, 0.2, 0.8}), Tensor({4}, {1, 0, 0, 1})) ==
          doctest::Approx(1.0).epsilon(1e-12));
    // Positives at ranks 1 and 3: (1/1 + 2/3) / 2.
    CHECK(average_precision(Tensor({4}, {0.9, 0.8, 0.1, 0.2}), Tensor({4}, {1, 0, 0, 1})) ==
          doctest::Approx((1.0 + 2.0 / 3.0) / 2.0).epsilon(1e-12));
    CHECK_THROWS_AS(average_precision(Tensor({4}), Tensor({4})), ConfigError);
    CHECK_THROWS_AS(average_precision(Tensor({4}), Tensor({3})), ShapeError);
}

TEST_CASE("segmentation metrics on a clean 2x2 case") {
    const std::vector<Tensor> maps = {Tensor({2, 2}, {0.9, 0.1, 0.2, 0.8})};
    const std::vector<Tensor> gts = {Tensor({2, 2}, {1, 0, 0, 1})};
    const SegmentationScores s = segmentation_metrics(maps, gts);
    CHECK(s.pixel_accuracy == 1.0);
    CHECK(s.mAP == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(s.mIoU == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("token F1 against the gold set") {
    // 8 scores, top-6 picks indices 7,6,5,4,3,2; gold {0,2,3,4} overlaps 3.
    Tensor scores({8});
    for (std::size_t i = 0; i < 8; ++i) scores[i] = static_cast<double>(i);
    const std::vector<std::size_t> gold = {0, 2, 3, 4};
    CHECK(token_f1_topk(scores, gold, 6) == doctest::Approx(0.6).epsilon(1e-12));
    CHECK(token_f1_topk(scores, {0}, 2) == 0.0);  // no overlap
    CHECK_THROWS_AS(token_f1_topk(scores, gold, 0), ConfigError);
    CHECK_THROWS_AS(token_f1_topk(scores, gold, 9), ConfigError);

    // Ties break toward the lower index.
    Tensor tied({4}, {1.0, 1.0, 1.0, 1.0});
    CHECK(token_f1_topk(tied, {0, 1}, 2) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("parallel_for covers every index once and propagates exceptions") {
    setenv("ATTRIB_THREADS", "3", 1);
    std::vector<std::atomic<int>> hits(257);
    parallel_for(hits.size(), [&](std::size_t i) { hits[i]++; });
    for (const auto& h : hits) CHECK(h.load() == 1);
    CHECK_THROWS_AS(
        parallel_for(8, [](std::size_t i) { if (i == 5) throw ConfigError("boom"); }),
        ConfigError);
    unsetenv("ATTRIB_THREADS");
}

TEST_CASE("random baseline maps are seeded per item") {
    ModelConfig c;
    const Model model = random_model(c, 1);
    const SyntheticDataset ds = gen_synthetic_dataset(c, 2, 2);
    const ExplainFn fn = random_map_explainer(model, 7);
    const RelevanceMap a0 = fn(0, ds.items[0], 0);
    const RelevanceMap a0_again = fn(0, ds.items[0], 0);
    const RelevanceMap a1 = fn(1, ds.items[1], 0);
    CHECK(std::memcmp(a0.pixel_map.data(), a0_again.pixel_map.data(),
                      a0.pixel_map.size() * sizeof(double)) == 0);
    bool differs = false;
    for (std::size_t i = 0; i < a0.pixel_map.size(); ++i)
        differs = differs || a0.pixel_map[i] != a1.pixel_map[i];
    CHECK(differs);
}

TEST_CASE("perturbation curves are bounded and ordered by fraction") {
    ModelConfig c;
    const Model model = random_model(c, 4);
    const SyntheticDataset ds = gen_synthetic_dataset(c, 2, 8);
    const PerturbationResult r = perturbation_test(model, ds, method_explainer(model, Method::RawAttention),
                                                   Polarity::Positive, ClassMode::Predicted);
    REQUIRE(r.fractions.size() == 9);
    CHECK(r.fractions.front() == doctest::Approx(0.1));
    CHECK(r.fractions.back() == doctest::Approx(0.9));
    REQUIRE(r.accuracy.size() == 9);
    for (double a : r.accuracy) {
        CHECK(a >= 0.0);
        CHECK(a <= 1.0);
    }
    CHECK(r.auc >= 0.0);
    CHECK(r.auc <= 1.0);
}

TEST_CASE("evaluation report carries both renderings for text models") {
    const ModelConfig c = text_config();
    const Model model = random_model(c, 6);
    EvaluateOptions options;
    options.methods = {Method::Rollout, Method::Ours};
    options.items = 4;
    options.dataset_seed = 3;
    options.include_random_baseline = true;
    const EvaluateReport report = evaluate(model, options);

    const nlohmann::json j = nlohmann::json::parse(report.json);
    CHECK(j.at("dataset_seed") == 3);
    CHECK(j.at("items") == 4);
    REQUIRE(j.at("token_f1").size() == 3);  // two methods plus the baseline
    CHECK(j.at("token_f1")[0].at("method") == "rollout");
    CHECK(j.at("token_f1")[2].at("method") == "random");
    CHECK(!j.at("token_f1")[0].at("f1").empty());
    CHECK(report.csv.find("token_f1,rollout,") != std::string::npos);

    // Byte-stable across repeat runs.
    const EvaluateReport again = evaluate(model, options);
    CHECK(report.json == again.json);
    CHECK(report.csv == again.csv);
}

TEST_CASE("evaluation report covers perturbation and segmentation for images") {
    ModelConfig c;
    const Model model = random_model(c, 6);
    EvaluateOptions options;
    options.methods = {Method::RawAttention};
    options.items = 2;
    options.dataset_seed = 3;
    const EvaluateReport report = evaluate(model, options);
    const nlohmann::json j = nlohmann::json::parse(report.json);
    REQUIRE(j.at("perturbation").size() == 4);  // polarity x class mode
    CHECK(j.at("perturbation")[0].at("method") == "raw_attention");
    REQUIRE(j.at("segmentation").size() == 1);
    CHECK(j.at("segmentation")[0].at("mAP").get<double>() >= 0.0);
    CHECK(report.csv.find("segmentation,raw_attention,") != std::string::npos);
}
