#pragma once

#include <map>
#include <string>
#include <vector>

#include "model.hpp"
#include "tensor.hpp"

namespace attrib {

// 8-bit grayscale PGM (P2 ASCII or P5 binary), rescaled to [0,1].
Tensor read_pgm(const std::string& path);
// Writes P5 from values in [0,1]; values are clamped and quantized to 0..255.
void write_pgm(const std::string& path, const Tensor& image);

// Vocab JSON {token -> id}; id 0 is reserved for CLS, unknown tokens map to 1.
std::map<std::string, std::size_t> read_vocab(const std::string& path);
// Whitespace tokenization of a UTF-8 file against the vocab.
std::vector<std::size_t> read_tokens(const std::string& path,
                                     const std::map<std::string, std::size_t>& vocab);

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& content);

}  // namespace attrib
