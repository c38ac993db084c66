// Deterministic feature-hash prompt embeddings.
#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "tensor.hpp"

namespace fastinit {

constexpr std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ull) {
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  return h;
}

struct PromptEmbedding {
  std::uint64_t prompt_id = 0;
  std::vector<float> values;  // unit L2 norm

  std::size_t dim() const { return values.size(); }
  friend bool operator==(const PromptEmbedding&, const PromptEmbedding&) = default;
};

/// Bag-of-tokens signed feature hash. Tokens are maximal runs of ASCII
/// alphanumerics or non-ASCII bytes, lowercased.
inline PromptEmbedding embed_prompt(std::string_view text, std::size_t dim = 64) {
  detail::require(!text.empty(), "embed_prompt: empty prompt text");
  detail::require(dim > 0, "embed_prompt: embedding dim must be positive");
  std::vector<double> acc(dim, 0.0);
  std::string token;
  std::size_t tokens = 0;
  auto flush = [&] {
    if (token.empty()) return;
    const std::uint64_t h = fnv1a64(token);
    const double sign = (h >> 63) ? -1.0 : 1.0;
    acc[(h & 0x7fffffffffffffffull) % dim] += sign;
    ++tokens;
    token.clear();
  };
  for (unsigned char ch : text) {
    const bool ascii_alnum = (ch >= '0' && ch <= '9') || (ch >= 'a' && ch <= 'z') || (ch >= 'A' && ch <= 'Z');
    if (ascii_alnum || ch >= 0x80) {
      token.push_back(static_cast<char>(ch >= 'A' && ch <= 'Z' ? ch - 'A' + 'a' : ch));
    } else {
      flush();
    }
  }
  flush();
  double norm = 0;
  for (double v : acc) norm += v * v;
  norm = std::sqrt(norm);
  detail::require(tokens > 0 && norm > 0, "embed_prompt: prompt '", text,
                  "' has no usable tokens");
  PromptEmbedding e{fnv1a64(text), std::vector<float>(dim)};
  for (std::size_t i = 0; i < dim; ++i) e.values[i] = static_cast<float>(acc[i] / norm);
  return e;
}

}  // namespace fastinit
