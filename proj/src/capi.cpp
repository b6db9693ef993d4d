#include "attrib.h"

#include <cstdlib>
#include <cstring>
#include <sstream>
#include <string>

#include <json.hpp>

#include "eval.hpp"
#include "explain.hpp"
#include "io.hpp"
#include "model.hpp"
#include "selftest.hpp"

struct attrib_model {
    attrib::Model model;
};

struct attrib_explanation {
    attrib::RelevanceMap map;
};

namespace {

thread_local std::string g_last_error = "ok";

char* dup_string(const std::string& s) {
    char* out = static_cast<char*>(std::malloc(s.size() + 1));
    if (!out) throw std::bad_alloc();
    std::memcpy(out, s.c_str(), s.size() + 1);
    return out;
}

// Exceptions cross the C boundary as status codes: file/format/argument
// problems map to ATTRIB_ERR_IO, everything else to ATTRIB_ERR_INVARIANT.
template <typename F>
attrib_status guard(F&& f) {
    try {
        f();
        return ATTRIB_OK;
    } catch (const attrib::IoError& e) {
        g_last_error = e.what();
        return ATTRIB_ERR_IO;
    } catch (const attrib::ConfigError& e) {
        g_last_error = e.what();
        return ATTRIB_ERR_IO;
    } catch (const std::out_of_range& e) {
        g_last_error = e.what();
        return ATTRIB_ERR_IO;
    } catch (const std::exception& e) {
        g_last_error = e.what();
        return ATTRIB_ERR_INVARIANT;
    }
}

void require(bool ok, const std::string& msg) {
    if (!ok) throw attrib::ConfigError(msg);
}

attrib::Tensor load_input_leaf(const attrib::Model& model, const char* input_path,
                               const char* vocab_path) {
    require(input_path != nullptr, "input path is required");
    if (model.config.modality == attrib::Modality::Image) {
        return attrib::image_to_patches(attrib::read_pgm(input_path), model.config);
    }
    require(vocab_path != nullptr, "text models require a vocab file");
    const auto vocab = attrib::read_vocab(vocab_path);
    return attrib::tokens_to_onehot(attrib::read_tokens(input_path, vocab), model.config);
}

}  // namespace

extern "C" {

const char* attrib_last_error(void) { return g_last_error.c_str(); }

attrib_status attrib_model_load(const char* path, attrib_model** out) {
    return guard([&] {
        require(path && out, "model path and output pointer are required");
        auto* m = new attrib_model{attrib::load_model(path)};
        *out = m;
    });
}

attrib_status attrib_model_save(const attrib_model* model, const char* path) {
    return guard([&] {
        require(model && path, "model handle and path are required");
        attrib::save_model(model->model, path);
    });
}

attrib_status attrib_model_config_json(const attrib_model* model, char** out_json) {
    return guard([&] {
        require(model && out_json, "model handle and output pointer are required");
        *out_json = dup_string(attrib::config_to_json(model->model.config));
    });
}

void attrib_model_free(attrib_model* model) { delete model; }

attrib_status attrib_train_toy(const char* modality, size_t items, size_t epochs, double lr,
                               uint64_t dataset_seed, uint64_t seed, attrib_model** out_model,
                               char** out_summary_json) {
    return guard([&] {
        require(modality && out_model, "modality and output pointer are required");
        attrib::ModelConfig config;
        if (std::string(modality) == "image") {
            config.modality = attrib::Modality::Image;
        } else if (std::string(modality) == "text") {
            config.modality = attrib::Modality::Text;
            config.vocab_size = 16;
        } else {
            throw attrib::ConfigError("modality must be \"image\" or \"text\", got \"" +
                                      std::string(modality) + "\"");
        }
        const attrib::SyntheticDataset dataset =
            attrib::gen_synthetic_dataset(config, items, dataset_seed);
        attrib::TrainResult result = attrib::train_toy(config, dataset, epochs, lr, seed);
        if (out_summary_json) {
            nlohmann::ordered_json j;
            j["modality"] = modality;
            j["items"] = items;
            j["epochs"] = epochs;
            j["lr"] = lr;
            j["dataset_seed"] = dataset_seed;
            j["seed"] = seed;
            j["epoch_loss"] = result.epoch_loss;
            j["final_accuracy"] = result.final_accuracy;
            *out_summary_json = dup_string(j.dump(2) + "\n");
        }
        *out_model = new attrib_model{std::move(result.model)};
    });
}

attrib_status attrib_classify_file(const attrib_model* model, const char* input_path,
                                   const char* vocab_path, size_t* out_class) {
    return guard([&] {
        require(model && out_class, "model handle and output pointer are required");
        const attrib::Tensor leaf = load_input_leaf(model->model, input_path, vocab_path);
        *out_class = attrib::classify(model->model, leaf).predicted_class;
    });
}

attrib_status attrib_explain_file(const attrib_model* model, const char* input_path,
                                  const char* vocab_path, const char* method, int target_class,
                                  attrib_explanation** out) {
    return guard([&] {
        require(model && method && out, "model handle, method, and output pointer are required");
        const attrib::Tensor leaf = load_input_leaf(model->model, input_path, vocab_path);
        std::optional<std::size_t> target;
        if (target_class >= 0) target = static_cast<std::size_t>(target_class);
        *out = new attrib_explanation{
            attrib::explain(model->model, leaf, attrib::method_from_string(method), target)};
    });
}

size_t attrib_explanation_num_tokens(const attrib_explanation* e) {
    return e ? e->map.token_scores.size() : 0;
}

size_t attrib_explanation_target_class(const attrib_explanation* e) {
    return e ? e->map.target_class : 0;
}

size_t attrib_explanation_predicted_class(const attrib_explanation* e) {
    return e ? e->map.predicted_class : 0;
}

attrib_status attrib_explanation_token_scores(const attrib_explanation* e, double* buf,
                                              size_t len) {
    return guard([&] {
        require(e && buf, "explanation handle and buffer are required");
        require(len >= e->map.token_scores.size(), "buffer too small for token scores");
        std::memcpy(buf, e->map.token_scores.data(),
                    e->map.token_scores.size() * sizeof(double));
    });
}

attrib_status attrib_explanation_pixel_size(const attrib_explanation* e, size_t* out_h,
                                            size_t* out_w) {
    return guard([&] {
        require(e && out_h && out_w, "explanation handle and output pointers are required");
        *out_h = e->map.has_pixel_map ? e->map.pixel_map.extent(0) : 0;
        *out_w = e->map.has_pixel_map ? e->map.pixel_map.extent(1) : 0;
    });
}

attrib_status attrib_explanation_pixel_map(const attrib_explanation* e, double* buf, size_t len) {
    return guard([&] {
        require(e && buf, "explanation handle and buffer are required");
        require(e->map.has_pixel_map, "explanation has no pixel map");
        require(len >= e->map.pixel_map.size(), "buffer too small for pixel map");
        std::memcpy(buf, e->map.pixel_map.data(), e->map.pixel_map.size() * sizeof(double));
    });
}

attrib_status attrib_explanation_write(const attrib_explanation* e, const char* out_stem) {
    return guard([&] {
        require(e && out_stem, "explanation handle and output stem are required");
        attrib::write_heatmap(e->map, out_stem);
    });
}

void attrib_explanation_free(attrib_explanation* e) { delete e; }

attrib_status attrib_evaluate(const attrib_model* model, const char* methods_csv,
                              uint64_t dataset_seed, size_t items, uint64_t seed,
                              int include_random, char** out_json, char** out_csv) {
    return guard([&] {
        require(model && methods_csv && out_json && out_csv,
                "model handle, methods, and output pointers are required");
        attrib::EvaluateOptions options;
        options.dataset_seed = dataset_seed;
        options.items = items;
        options.seed = seed;
        options.include_random_baseline = include_random != 0;
        std::istringstream in(methods_csv);
        std::string name;
        while (std::getline(in, name, ',')) {
            if (!name.empty()) options.methods.push_back(attrib::method_from_string(name));
        }
        require(!options.methods.empty(), "at least one method is required");
        const attrib::EvaluateReport report = attrib::evaluate(model->model, options);
        *out_json = dup_string(report.json);
        *out_csv = dup_string(report.csv);
    });
}

attrib_status attrib_selftest(int inject_fault, char** out_text) {
    return guard([&] {
        const attrib::SelftestReport report = attrib::run_selftest(inject_fault != 0);
        if (out_text) *out_text = dup_string(attrib::selftest_to_text(report));
        if (!report.all_passed) throw std::runtime_error("self-test found failing checks");
    });
}

void attrib_string_free(char* s) { std::free(s); }

}  // extern "C"
