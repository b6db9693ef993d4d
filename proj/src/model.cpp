#include "model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "rng.hpp"

namespace attrib {

namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr const char* kFormatVersion = "1";

std::vector<std::pair<std::string, std::vector<std::size_t>>> expected_params(const ModelConfig& c) {
    std::vector<std::pair<std::string, std::vector<std::size_t>>> out;
    const std::size_t d = c.embed_dim;
    if (c.modality == Modality::Image) {
        out.push_back({"patch_proj.w", {c.patch_size * c.patch_size, d}});
        out.push_back({"patch_proj.b", {d}});
    } else {
        out.push_back({"embedding.w", {c.vocab_size, d}});
        out.push_back({"embedding.b", {d}});
    }
    out.push_back({"cls", {1, d}});
    out.push_back({"pos", {c.seq_len, d}});
    for (std::size_t b = 0; b < c.blocks; ++b) {
        const std::string pre = "block" + std::to_string(b) + ".";
        out.push_back({pre + "wq", {d, d}});
        out.push_back({pre + "bq", {d}});
        out.push_back({pre + "wk", {d, d}});
        out.push_back({pre + "bk", {d}});
        out.push_back({pre + "wv", {d, d}});
        out.push_back({pre + "bv", {d}});
        out.push_back({pre + "wo", {d, d}});
        out.push_back({pre + "bo", {d}});
        out.push_back({pre + "ln1.gamma", {d}});
        out.push_back({pre + "ln1.beta", {d}});
        out.push_back({pre + "ln2.gamma", {d}});
        out.push_back({pre + "ln2.beta", {d}});
        out.push_back({pre + "mlp.w1", {d, c.mlp_dim}});
        out.push_back({pre + "mlp.b1", {c.mlp_dim}});
        out.push_back({pre + "mlp.w2", {c.mlp_dim, d}});
        out.push_back({pre + "mlp.b2", {d}});
    }
    out.push_back({"final_ln.gamma", {d}});
    out.push_back({"final_ln.beta", {d}});
    out.push_back({"head.w", {d, c.classes}});
    out.push_back({"head.b", {c.classes}});
    return out;
}

bool is_weight_matrix(const std::string& name) {
    return name == "patch_proj.w" || name == "embedding.w" || name == "head.w" ||
           name.find(".w") != std::string::npos;
}

}  // namespace

void ModelConfig::validate() const {
    if (heads * head_dim != embed_dim) {
        throw ConfigError("heads*head_dim must equal embed_dim (" + std::to_string(heads) + "*" +
                          std::to_string(head_dim) + " != " + std::to_string(embed_dim) + ")");
    }
    if (seq_len < 2) throw ConfigError("seq_len must be at least 2 (CLS plus content)");
    if (classes < 2) throw ConfigError("classes must be at least 2");
    if (mlp_dim == 0) throw ConfigError("mlp_dim must be positive");
    if (modality == Modality::Image) {
        if (patch_size == 0) throw ConfigError("patch_size must be positive for image models");
        grid_side();
    } else {
        if (vocab_size < 2) throw ConfigError("vocab_size must be at least 2 for text models");
    }
}

std::size_t ModelConfig::grid_side() const {
    const std::size_t n = content_tokens();
    const auto g = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n))));
    if (g * g != n) {
        throw ConfigError("seq_len-1 = " + std::to_string(n) + " is not a square patch grid");
    }
    return g;
}

const Tensor& Model::param(const std::string& name) const {
    auto it = params.find(name);
    if (it == params.end()) throw ConfigError("missing parameter " + name);
    return it->second;
}

Model random_model(const ModelConfig& config, std::uint64_t seed, double weight_scale) {
    config.validate();
    Rng rng(seed);
    Model m;
    m.config = config;
    for (const auto& [name, shape] : expected_params(config)) {
        Tensor t(shape);
        if (name.find("gamma") != std::string::npos) {
            for (std::size_t i = 0; i < t.size(); ++i) t[i] = 1.0;
        } else if (name.find("beta") != std::string::npos || name.find(".b") != std::string::npos) {
            // zero biases
        } else if (name == "cls" || name == "pos") {
            for (std::size_t i = 0; i < t.size(); ++i) t[i] = 0.02 * rng.gaussian();
        } else if (is_weight_matrix(name)) {
            const double fan_in = static_cast<double>(shape[0]);
            const double s = weight_scale / std::sqrt(fan_in);
            for (std::size_t i = 0; i < t.size(); ++i) t[i] = s * rng.gaussian();
        }
        m.params.emplace(name, std::move(t));
    }
    return m;
}

Tensor image_to_patches(const Tensor& image, const ModelConfig& config) {
    const std::size_t side = config.image_side();
    if (image.rank() != 2 || image.extent(0) != side || image.extent(1) != side) {
        throw ShapeError("image shape " + image.shape_str() + " does not match configured " +
                         std::to_string(side) + "x" + std::to_string(side));
    }
    const std::size_t g = config.grid_side(), p = config.patch_size;
    Tensor patches({g * g, p * p});
    for (std::size_t gy = 0; gy < g; ++gy)
        for (std::size_t gx = 0; gx < g; ++gx)
            for (std::size_t py = 0; py < p; ++py)
                for (std::size_t px = 0; px < p; ++px)
                    patches.at(gy * g + gx, py * p + px) = image.at(gy * p + py, gx * p + px);
    return patches;
}

Tensor tokens_to_onehot(const std::vector<std::size_t>& ids, const ModelConfig& config) {
    const std::size_t n = config.content_tokens();
    Tensor onehot({n, config.vocab_size});
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t id = i < ids.size() ? ids[i] : 1;  // pad with the unknown id
        if (id >= config.vocab_size) id = 1;
        onehot.at(i, id) = 1.0;
    }
    return onehot;
}

ForwardResult classify(const Model& model, const Tensor& input_leaf) {
    const ModelConfig& c = model.config;
    c.validate();
    if (input_leaf.rank() != 2 || input_leaf.extent(0) != c.content_tokens() ||
        input_leaf.extent(1) != c.input_cols()) {
        throw ShapeError("input leaf shape " + input_leaf.shape_str() + " does not match config (" +
                         std::to_string(c.content_tokens()) + "x" + std::to_string(c.input_cols()) + ")");
    }

    ForwardResult res;
    Tape& tape = res.tape;
    auto P = [&](const std::string& name) {
        auto it = res.param_nodes.find(name);
        if (it != res.param_nodes.end()) return it->second;
        const int node = tape.add_param(model.param(name));
        res.param_nodes.emplace(name, node);
        return node;
    };

    const int leaf = tape.add_input(input_leaf);
    tape.set_input_node(leaf);

    const bool image = c.modality == Modality::Image;
    const int proj = tape.linear(leaf, P(image ? "patch_proj.w" : "embedding.w"),
                                 P(image ? "patch_proj.b" : "embedding.b"));
    int x = tape.add(tape.concat_rows(P("cls"), proj), P("pos"));

    const double att_scale = 1.0 / std::sqrt(static_cast<double>(c.head_dim));
    for (std::size_t b = 0; b < c.blocks; ++b) {
        const std::string pre = "block" + std::to_string(b) + ".";
        const int n1 = tape.layer_norm(x, P(pre + "ln1.gamma"), P(pre + "ln1.beta"), kLayerNormEps);
        const int qh = tape.split_heads(tape.linear(n1, P(pre + "wq"), P(pre + "bq")), c.heads);
        const int kh = tape.split_heads(tape.linear(n1, P(pre + "wk"), P(pre + "bk")), c.heads);
        const int vh = tape.split_heads(tape.linear(n1, P(pre + "wv"), P(pre + "bv")), c.heads);
        const int scores = tape.scale(tape.matmul(qh, tape.transpose(kh)), att_scale);
        const int attn = tape.softmax(scores, static_cast<int>(b), /*is_attention_map=*/true);
        const int ctx = tape.merge_heads(tape.matmul(attn, vh));
        x = tape.add(x, tape.linear(ctx, P(pre + "wo"), P(pre + "bo")));
        const int n2 = tape.layer_norm(x, P(pre + "ln2.gamma"), P(pre + "ln2.beta"), kLayerNormEps);
        const int hidden = tape.gelu(tape.linear(n2, P(pre + "mlp.w1"), P(pre + "mlp.b1")));
        x = tape.add(x, tape.linear(hidden, P(pre + "mlp.w2"), P(pre + "mlp.b2")));
    }

    const int xf = tape.layer_norm(x, P("final_ln.gamma"), P("final_ln.beta"), kLayerNormEps);
    const int logits = tape.linear(tape.select_row(xf, 0), P("head.w"), P("head.b"));
    tape.set_logits_node(logits);
    tape.set_num_blocks(c.blocks);

    res.logits = tape.value(logits);
    res.predicted_class = 0;
    for (std::size_t i = 1; i < res.logits.size(); ++i)
        if (res.logits[i] > res.logits[res.predicted_class]) res.predicted_class = i;
    return res;
}

ForwardResult classify_image(const Model& model, const Tensor& image) {
    return classify(model, image_to_patches(image, model.config));
}

ForwardResult classify_tokens(const Model& model, const std::vector<std::size_t>& ids) {
    return classify(model, tokens_to_onehot(ids, model.config));
}

namespace {

nlohmann::ordered_json config_json(const ModelConfig& c) {
    nlohmann::ordered_json j;
    j["modality"] = c.modality == Modality::Image ? "image" : "text";
    j["seq_len"] = c.seq_len;
    j["embed_dim"] = c.embed_dim;
    j["heads"] = c.heads;
    j["head_dim"] = c.head_dim;
    j["blocks"] = c.blocks;
    j["classes"] = c.classes;
    j["mlp_dim"] = c.mlp_dim;
    if (c.modality == Modality::Image) {
        j["patch_size"] = c.patch_size;
    } else {
        j["vocab_size"] = c.vocab_size;
    }
    return j;
}

ModelConfig config_from_json(const nlohmann::json& j) {
    static const std::vector<std::string> known = {"modality", "seq_len",  "embed_dim", "heads",
                                                   "head_dim", "blocks",   "classes",   "mlp_dim",
                                                   "patch_size", "vocab_size"};
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (std::find(known.begin(), known.end(), it.key()) == known.end()) {
            throw IoError("unknown config field \"" + it.key() + "\"");
        }
    }
    ModelConfig c;
    const std::string modality = j.at("modality").get<std::string>();
    if (modality == "image") {
        c.modality = Modality::Image;
        c.patch_size = j.at("patch_size").get<std::size_t>();
        c.vocab_size = 0;
    } else if (modality == "text") {
        c.modality = Modality::Text;
        c.vocab_size = j.at("vocab_size").get<std::size_t>();
        c.patch_size = 0;
    } else {
        throw IoError("unknown modality \"" + modality + "\"");
    }
    c.seq_len = j.at("seq_len").get<std::size_t>();
    c.embed_dim = j.at("embed_dim").get<std::size_t>();
    c.heads = j.at("heads").get<std::size_t>();
    c.head_dim = j.at("head_dim").get<std::size_t>();
    c.blocks = j.at("blocks").get<std::size_t>();
    c.classes = j.at("classes").get<std::size_t>();
    c.mlp_dim = j.at("mlp_dim").get<std::size_t>();
    c.validate();
    return c;
}

}  // namespace

std::string config_to_json(const ModelConfig& config) { return config_json(config).dump(); }

std::string model_to_json(const Model& model) {
    nlohmann::ordered_json j;
    j["format_version"] = kFormatVersion;
    j["config"] = config_json(model.config);
    nlohmann::ordered_json params = nlohmann::ordered_json::object();
    for (const auto& [name, t] : model.params) {
        nlohmann::ordered_json p;
        p["shape"] = t.shape();
        p["data"] = std::vector<double>(t.data(), t.data() + t.size());
        params[name] = std::move(p);
    }
    j["params"] = std::move(params);
    return j.dump();
}

Model parse_model_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("model file is not valid JSON: ") + e.what());
    }
    try {
        for (auto it = j.begin(); it != j.end(); ++it) {
            if (it.key() != "format_version" && it.key() != "config" && it.key() != "params") {
                throw IoError("unknown top-level field \"" + it.key() + "\"");
            }
        }
        const std::string version = j.at("format_version").get<std::string>();
        if (version != kFormatVersion) {
            throw IoError("unsupported format_version \"" + version + "\" (expected \"" +
                          kFormatVersion + "\")");
        }
        Model m;
        m.config = config_from_json(j.at("config"));
        const auto& params = j.at("params");
        for (const auto& [name, shape] : expected_params(m.config)) {
            if (!params.contains(name)) throw IoError("missing tensor \"" + name + "\"");
            const auto& p = params.at(name);
            const auto got_shape = p.at("shape").get<std::vector<std::size_t>>();
            if (got_shape != shape) {
                throw IoError("tensor \"" + name + "\" has shape " + shape_to_string(got_shape) +
                              ", expected " + shape_to_string(shape));
            }
            auto data = p.at("data").get<std::vector<double>>();
            m.params.emplace(name, Tensor(shape, std::move(data)));
        }
        if (params.size() != m.params.size()) {
            for (auto it = params.begin(); it != params.end(); ++it) {
                if (m.params.find(it.key()) == m.params.end()) {
                    throw IoError("unknown tensor \"" + it.key() + "\"");
                }
            }
        }
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("malformed model file: ") + e.what());
    }
}

void save_model(const Model& model, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out << model_to_json(model) << "\n";
    if (!out) throw IoError("failed writing " + path);
}

Model load_model(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open model file " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_model_json(buf.str());
}

double finite_diff_check(const Model& model, const Tensor& input_leaf, std::size_t target_class,
                         double h, std::size_t n_coords, std::uint64_t seed) {
    ForwardResult fwd = classify(model, input_leaf);
    return finite_diff_check(fwd.tape, target_class, h, n_coords, seed);
}

}  // namespace attrib
