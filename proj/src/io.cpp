#include "io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace attrib {

namespace {

// Skips whitespace and '#' comment lines in a PGM header.
void skip_pgm_separators(std::istream& in) {
    for (;;) {
        const int c = in.peek();
        if (c == '#') {
            std::string line;
            std::getline(in, line);
        } else if (std::isspace(c)) {
            in.get();
        } else {
            return;
        }
    }
}

std::size_t read_pgm_number(std::istream& in, const std::string& path) {
    skip_pgm_separators(in);
    std::size_t v = 0;
    if (!(in >> v)) throw IoError("truncated PGM header in " + path);
    return v;
}

}  // namespace

Tensor read_pgm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open image file " + path);
    std::string magic;
    in >> magic;
    if (magic != "P2" && magic != "P5") {
        throw IoError(path + " is not a P2/P5 PGM file (magic \"" + magic + "\")");
    }
    const std::size_t width = read_pgm_number(in, path);
    const std::size_t height = read_pgm_number(in, path);
    const std::size_t maxval = read_pgm_number(in, path);
    if (maxval == 0 || maxval > 255) {
        throw IoError(path + ": unsupported PGM maxval " + std::to_string(maxval));
    }
    Tensor img({height, width});
    if (magic == "P2") {
        for (std::size_t i = 0; i < img.size(); ++i) {
            std::size_t v;
            if (!(in >> v)) throw IoError("truncated P2 pixel data in " + path);
            img[i] = static_cast<double>(v) / static_cast<double>(maxval);
        }
    } else {
        in.get();  // single separator after maxval
        std::vector<unsigned char> raw(img.size());
        in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
        if (static_cast<std::size_t>(in.gcount()) != raw.size()) {
            throw IoError("truncated P5 pixel data in " + path);
        }
        for (std::size_t i = 0; i < img.size(); ++i) {
            img[i] = static_cast<double>(raw[i]) / static_cast<double>(maxval);
        }
    }
    return img;
}

void write_pgm(const std::string& path, const Tensor& image) {
    if (image.rank() != 2) throw ShapeError("write_pgm expects a 2-D tensor, got " + image.shape_str());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out << "P5\n" << image.extent(1) << " " << image.extent(0) << "\n255\n";
    std::vector<unsigned char> raw(image.size());
    for (std::size_t i = 0; i < image.size(); ++i) {
        const double v = std::clamp(image[i], 0.0, 1.0);
        raw[i] = static_cast<unsigned char>(std::lround(v * 255.0));
    }
    out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!out) throw IoError("failed writing " + path);
}

std::map<std::string, std::size_t> read_vocab(const std::string& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw IoError("vocab file " + path + " is not valid JSON: " + e.what());
    }
    std::map<std::string, std::size_t> vocab;
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::size_t id = it.value().get<std::size_t>();
        if (id < 2) throw IoError("vocab id " + std::to_string(id) + " is reserved (0=CLS, 1=unknown)");
        vocab[it.key()] = id;
    }
    return vocab;
}

std::vector<std::size_t> read_tokens(const std::string& path,
                                     const std::map<std::string, std::size_t>& vocab) {
    std::istringstream in(read_file(path));
    std::vector<std::size_t> ids;
    std::string token;
    while (in >> token) {
        auto it = vocab.find(token);
        ids.push_back(it != vocab.end() ? it->second : 1);
    }
    return ids;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

void write_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out << content;
    if (!out) throw IoError("failed writing " + path);
}

}  // namespace attrib
