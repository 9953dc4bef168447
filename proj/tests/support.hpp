#pragma once

#include <cstdint>
#include <vector>

#include "dynplan/backbone.hpp"
#include "dynplan/data.hpp"
#include "dynplan/model.hpp"
#include "dynplan/random.hpp"
#include "dynplan/tensor.hpp"

namespace testing {

inline dynplan::Tensor random_tensor(dynplan::Rng& rng, dynplan::Shape shape, double scale = 1.0) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal() * scale;
  return dynplan::Tensor(std::move(shape), std::move(v));
}

inline dynplan::ModelConfig tiny_config(std::size_t layers = 2, std::size_t d = 8, std::size_t heads = 2) {
  dynplan::ModelConfig c;
  c.vocab_size = 12;
  c.max_seq_len = 6;
  c.num_layers = layers;
  c.d_model = d;
  c.num_heads = heads;
  c.d_ff = 2 * d;
  c.num_classes = 2;
  return c;
}

inline dynplan::TokenSequence random_sequence(dynplan::Rng& rng, const dynplan::ModelConfig& c, std::size_t len = 0) {
  if (len == 0) len = 2 + rng.below(c.max_seq_len - 1);
  dynplan::TokenSequence s;
  s.token_ids.push_back(dynplan::kClsId);
  s.segment_ids.push_back(0);
  for (std::size_t i = 1; i < len; ++i) {
    s.token_ids.push_back(dynplan::kNumReserved + rng.below(c.vocab_size - dynplan::kNumReserved));
    s.segment_ids.push_back(i * 2 >= len ? 1 : 0);
  }
  return s;
}

inline dynplan::Example random_example(dynplan::Rng& rng, const dynplan::ModelConfig& c) {
  dynplan::Example ex;
  ex.tokens = random_sequence(rng, c);
  ex.label = static_cast<double>(rng.below(c.num_classes));
  return ex;
}

inline dynplan::DatasetSpec encoded_synthetic(dynplan::SyntheticKind kind, std::size_t n, std::uint64_t seed,
                                              std::size_t max_len = 16) {
  auto d = dynplan::gen_synthetic(kind, n, seed);
  dynplan::encode_dataset(d, max_len);
  return d;
}

}  // namespace testing
