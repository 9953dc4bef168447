#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dynplan/tensor.hpp"

namespace dynplan {

// Reserved vocabulary ids.
inline constexpr std::size_t kPadId = 0;
inline constexpr std::size_t kUnkId = 1;
inline constexpr std::size_t kClsId = 2;
inline constexpr std::size_t kSepId = 3;
inline constexpr std::size_t kNumReserved = 4;

struct ModelConfig {
  std::size_t vocab_size = 32;
  std::size_t max_seq_len = 16;
  std::size_t num_layers = 6;
  std::size_t d_model = 64;
  std::size_t num_heads = 4;
  std::size_t d_ff = 256;
  std::size_t num_classes = 2;  // 1 selects a scalar regression head

  void validate() const;
  bool regression() const { return num_classes == 1; }
};

struct TokenSequence {
  std::vector<std::size_t> token_ids;
  std::vector<std::size_t> segment_ids;

  std::size_t size() const { return token_ids.size(); }
};

// Throws std::invalid_argument naming the offending position.
void validate_sequence(const TokenSequence& seq, const ModelConfig& config);

struct TransformerLayer {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln1_gamma, ln1_beta;
  Tensor w1, b1, w2, b2;
  Tensor ln2_gamma, ln2_beta;
};

// logits = weight * h_cls + bias, weight is num_classes x d_model.
struct Classifier {
  Tensor weight;
  Tensor bias;
};

struct Backbone {
  ModelConfig config;
  Tensor word_emb;  // vocab_size x d_model
  Tensor pos_emb;   // max_seq_len x d_model
  Tensor seg_emb;   // 2 x d_model
  std::vector<TransformerLayer> layers;
  Classifier classifier;
};

Backbone init_backbone(const ModelConfig& config, std::uint64_t seed);
TransformerLayer init_layer(std::size_t d_model, std::size_t d_ff, std::uint64_t seed);
Classifier init_classifier(std::size_t num_classes, std::size_t d_model, std::uint64_t seed);

Tensor embed(const TokenSequence& seq, const Backbone& backbone);
// Post-norm encoder layer: self-attention, residual, norm, gelu feed-forward,
// residual, norm.
Tensor transformer_layer_forward(const Tensor& h_prev, const TransformerLayer& layer, std::size_t num_heads);
// Reads only row 0 (the CLS position) of h_last.
Tensor classify(const Tensor& h_last, const Classifier& classifier);
Tensor full_forward(const TokenSequence& seq, const Backbone& backbone);

// Count of transformer_layer_forward calls made on the calling thread.
std::size_t layer_evaluations();
void reset_layer_evaluations();

using ParamVisitor = std::function<void(const std::string& path, Tensor& value)>;
using ConstParamVisitor = std::function<void(const std::string& path, const Tensor& value)>;

void for_each_param(Backbone& backbone, const ParamVisitor& visit);
void for_each_param(const Backbone& backbone, const ConstParamVisitor& visit);
void for_each_param(Classifier& classifier, const std::string& prefix, const ParamVisitor& visit);
void for_each_param(const Classifier& classifier, const std::string& prefix, const ConstParamVisitor& visit);

// FNV-1a over parameter paths, shapes and raw bytes.
std::uint64_t parameter_hash(const Backbone& backbone);

}  // namespace dynplan
