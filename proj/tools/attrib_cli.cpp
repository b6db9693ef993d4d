// Command-line front end over the C library API. Exit codes: 0 success,
// 1 invariant failure, 2 I/O or configuration error.
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <string>

#include <CLI11.hpp>

#include "attrib.h"

namespace {

// Owns a char* handed out by the library.
struct LibString {
    char* ptr = nullptr;
    ~LibString() { attrib_string_free(ptr); }
    const char* get() const { return ptr ? ptr : ""; }
};

struct ModelHandle {
    attrib_model* ptr = nullptr;
    ~ModelHandle() { attrib_model_free(ptr); }
};

struct ExplanationHandle {
    attrib_explanation* ptr = nullptr;
    ~ExplanationHandle() { attrib_explanation_free(ptr); }
};

int fail(attrib_status status) {
    std::fprintf(stderr, "error: %s\n", attrib_last_error());
    return static_cast<int>(status);
}

int write_text(const std::filesystem::path& path, const std::string& content) {
    std::FILE* f = std::fopen(path.string().c_str(), "wb");
    if (!f) {
        std::fprintf(stderr, "error: cannot open %s for writing\n", path.string().c_str());
        return 2;
    }
    std::fwrite(content.data(), 1, content.size(), f);
    std::fclose(f);
    return 0;
}

struct Args {
    std::string model_path;
    std::string input_path;
    std::string vocab_path;
    std::string method = "ours";
    std::string methods = "ours,rollout,raw_attention,gradcam_attn,partial_lrp,full_lrp";
    std::string out_dir = ".";
    std::string out_model;
    std::string modality = "image";
    std::string format = "all";
    int target_class = -1;
    std::uint64_t seed = 1;
    std::uint64_t dataset_seed = 7;
    std::size_t items = 50;
    std::size_t epochs = 200;
    double lr = 0.05;
    bool random_baseline = false;
    bool inject_fault = false;
};

int cmd_explain(const Args& a) {
    ModelHandle model;
    if (attrib_status s = attrib_model_load(a.model_path.c_str(), &model.ptr)) return fail(s);
    ExplanationHandle e;
    const char* vocab = a.vocab_path.empty() ? nullptr : a.vocab_path.c_str();
    if (attrib_status s = attrib_explain_file(model.ptr, a.input_path.c_str(), vocab,
                                              a.method.c_str(), a.target_class, &e.ptr)) {
        return fail(s);
    }
    const std::size_t cls = attrib_explanation_target_class(e.ptr);
    const std::filesystem::path stem =
        std::filesystem::path(a.out_dir) /
        (std::filesystem::path(a.input_path).stem().string() + "." + a.method + "." +
         std::to_string(cls));
    if (attrib_status s = attrib_explanation_write(e.ptr, stem.string().c_str())) return fail(s);
    std::printf("%s.pgm\n%s.json\n", stem.string().c_str(), stem.string().c_str());
    return 0;
}

int cmd_evaluate(const Args& a) {
    ModelHandle model;
    if (attrib_status s = attrib_model_load(a.model_path.c_str(), &model.ptr)) return fail(s);
    LibString json, csv;
    if (attrib_status s = attrib_evaluate(model.ptr, a.methods.c_str(), a.dataset_seed, a.items,
                                          a.seed, a.random_baseline ? 1 : 0, &json.ptr, &csv.ptr)) {
        return fail(s);
    }
    const std::filesystem::path dir(a.out_dir);
    if (a.format == "all" || a.format == "json") {
        if (int rc = write_text(dir / "report.json", json.get())) return rc;
        std::printf("%s\n", (dir / "report.json").string().c_str());
    }
    if (a.format == "all" || a.format == "csv") {
        if (int rc = write_text(dir / "report.csv", csv.get())) return rc;
        std::printf("%s\n", (dir / "report.csv").string().c_str());
    }
    return 0;
}

int cmd_selftest(const Args& a) {
    LibString text;
    const attrib_status s = attrib_selftest(a.inject_fault ? 1 : 0, &text.ptr);
    std::printf("%s", text.get());
    if (s != ATTRIB_OK && !text.ptr) return fail(s);
    return static_cast<int>(s);
}

int cmd_train_toy(const Args& a) {
    ModelHandle model;
    LibString summary;
    if (attrib_status s = attrib_train_toy(a.modality.c_str(), a.items, a.epochs, a.lr,
                                           a.dataset_seed, a.seed, &model.ptr, &summary.ptr)) {
        return fail(s);
    }
    if (attrib_status s = attrib_model_save(model.ptr, a.out_model.c_str())) return fail(s);
    std::printf("%s", summary.get());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Transformer attribution toolkit"};
    app.require_subcommand(1);
    Args a;

    CLI::App* explain = app.add_subcommand("explain", "Write a heatmap (PGM + JSON) for one input");
    explain->add_option("--model", a.model_path, "model JSON file")->required();
    explain->add_option("--input", a.input_path, "PGM image or token text file")->required();
    explain->add_option("--vocab", a.vocab_path, "vocab JSON (text models)");
    explain->add_option("--method", a.method, "explanation method");
    explain->add_option("--class", a.target_class, "target class (-1 = predicted)");
    explain->add_option("--out", a.out_dir, "output directory");

    CLI::App* evaluate = app.add_subcommand("evaluate", "Run the evaluation protocols");
    evaluate->add_option("--model", a.model_path, "model JSON file")->required();
    evaluate->add_option("--method", a.methods, "comma-separated method list");
    evaluate->add_option("--items", a.items, "synthetic dataset size");
    evaluate->add_option("--dataset-seed", a.dataset_seed, "dataset generation seed");
    evaluate->add_option("--seed", a.seed, "evaluation seed (random baseline)");
    evaluate->add_option("--out", a.out_dir, "output directory");
    evaluate->add_option("--format", a.format, "report format")
        ->check(CLI::IsMember({"all", "json", "csv"}));
    evaluate->add_flag("--random-baseline", a.random_baseline, "include the random-map baseline");

    CLI::App* selftest = app.add_subcommand("selftest", "Run the invariant suite");
    selftest->add_flag("--inject-fault", a.inject_fault,
                       "disable binary-split normalization (must make a check fail)");

    CLI::App* train = app.add_subcommand("train-toy", "Train a small model on synthetic data");
    train->add_option("--modality", a.modality, "image or text");
    train->add_option("--items", a.items, "synthetic dataset size");
    train->add_option("--epochs", a.epochs, "training epochs");
    train->add_option("--lr", a.lr, "learning rate");
    train->add_option("--dataset-seed", a.dataset_seed, "dataset generation seed");
    train->add_option("--seed", a.seed, "weight initialization seed");
    train->add_option("--out", a.out_model, "output model JSON path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    if (explain->parsed()) return cmd_explain(a);
    if (evaluate->parsed()) return cmd_evaluate(a);
    if (selftest->parsed()) return cmd_selftest(a);
    if (train->parsed()) return cmd_train_toy(a);
    return 2;
}
