#include "dynplan/backbone.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

#include "dynplan/random.hpp"

namespace dynplan {

namespace {

thread_local std::size_t g_layer_evaluations = 0;

Tensor random_normal(Shape shape, double stddev, Rng& rng) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  std::vector<double> values(n);
  for (auto& v : values) v = rng.normal() * stddev;
  return Tensor(std::move(shape), std::move(values));
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return ops::add(ops::matmul(x, w), b); }

template <class B, class Visit>
void visit_backbone(B& backbone, Visit&& visit) {
  visit(std::string("word_emb"), backbone.word_emb);
  visit(std::string("pos_emb"), backbone.pos_emb);
  visit(std::string("seg_emb"), backbone.seg_emb);
  for (std::size_t i = 0; i < backbone.layers.size(); ++i) {
    auto& l = backbone.layers[i];
    const std::string p = "layers." + std::to_string(i) + ".";
    visit(p + "attn.wq", l.wq);
    visit(p + "attn.bq", l.bq);
    visit(p + "attn.wk", l.wk);
    visit(p + "attn.bk", l.bk);
    visit(p + "attn.wv", l.wv);
    visit(p + "attn.bv", l.bv);
    visit(p + "attn.wo", l.wo);
    visit(p + "attn.bo", l.bo);
    visit(p + "ln1.gamma", l.ln1_gamma);
    visit(p + "ln1.beta", l.ln1_beta);
    visit(p + "ffn.w1", l.w1);
    visit(p + "ffn.b1", l.b1);
    visit(p + "ffn.w2", l.w2);
    visit(p + "ffn.b2", l.b2);
    visit(p + "ln2.gamma", l.ln2_gamma);
    visit(p + "ln2.beta", l.ln2_beta);
  }
  visit(std::string("classifier.weight"), backbone.classifier.weight);
  visit(std::string("classifier.bias"), backbone.classifier.bias);
}

}  // namespace

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("model config: " + what); };
  if (vocab_size <= kNumReserved) fail("vocab_size must exceed the reserved ids");
  if (max_seq_len < 2) fail("max_seq_len must be at least 2");
  if (d_model < 2) fail("d_model must be at least 2");
  if (num_heads == 0 || d_model % num_heads != 0) fail("num_heads must divide d_model");
  if (d_ff == 0) fail("d_ff must be positive");
  if (num_classes == 0) fail("num_classes must be positive");
}

void validate_sequence(const TokenSequence& seq, const ModelConfig& config) {
  if (seq.token_ids.empty()) throw std::invalid_argument("sequence: empty");
  if (seq.token_ids.size() != seq.segment_ids.size())
    throw std::invalid_argument("sequence: token and segment lengths differ");
  if (seq.size() > config.max_seq_len)
    throw std::invalid_argument("sequence: length " + std::to_string(seq.size()) + " exceeds max_seq_len " +
                                std::to_string(config.max_seq_len));
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (seq.token_ids[i] >= config.vocab_size)
      throw std::invalid_argument("sequence: token id " + std::to_string(seq.token_ids[i]) + " at position " +
                                  std::to_string(i) + " out of range");
    if (seq.segment_ids[i] > 1)
      throw std::invalid_argument("sequence: segment id at position " + std::to_string(i) + " must be 0 or 1");
  }
}

TransformerLayer init_layer(std::size_t d_model, std::size_t d_ff, std::uint64_t seed) {
  Rng rng(seed);
  const double s_model = 1.0 / std::sqrt(static_cast<double>(d_model));
  const double s_ff = 1.0 / std::sqrt(static_cast<double>(d_ff));
  TransformerLayer l;
  l.wq = random_normal({d_model, d_model}, s_model, rng);
  l.bq = Tensor::zeros({1, d_model});
  l.wk = random_normal({d_model, d_model}, s_model, rng);
  l.bk = Tensor::zeros({1, d_model});
  l.wv = random_normal({d_model, d_model}, s_model, rng);
  l.bv = Tensor::zeros({1, d_model});
  l.wo = random_normal({d_model, d_model}, s_model, rng);
  l.bo = Tensor::zeros({1, d_model});
  l.ln1_gamma = Tensor::filled({1, d_model}, 1.0);
  l.ln1_beta = Tensor::zeros({1, d_model});
  l.w1 = random_normal({d_model, d_ff}, s_model, rng);
  l.b1 = Tensor::zeros({1, d_ff});
  l.w2 = random_normal({d_ff, d_model}, s_ff, rng);
  l.b2 = Tensor::zeros({1, d_model});
  l.ln2_gamma = Tensor::filled({1, d_model}, 1.0);
  l.ln2_beta = Tensor::zeros({1, d_model});
  return l;
}

Classifier init_classifier(std::size_t num_classes, std::size_t d_model, std::uint64_t seed) {
  Rng rng(seed);
  Classifier c;
  c.weight = random_normal({num_classes, d_model}, 1.0 / std::sqrt(static_cast<double>(d_model)), rng);
  c.bias = Tensor::zeros({1, num_classes});
  return c;
}

Backbone init_backbone(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  Backbone b;
  b.config = config;
  b.word_emb = random_normal({config.vocab_size, config.d_model}, 1.0, rng);
  b.pos_emb = random_normal({config.max_seq_len, config.d_model}, 1.0, rng);
  b.seg_emb = random_normal({2, config.d_model}, 1.0, rng);
  for (std::size_t i = 0; i < config.num_layers; ++i)
    b.layers.push_back(init_layer(config.d_model, config.d_ff, rng.next()));
  b.classifier = init_classifier(config.num_classes, config.d_model, rng.next());
  return b;
}

Tensor embed(const TokenSequence& seq, const Backbone& backbone) {
  validate_sequence(seq, backbone.config);
  std::vector<std::size_t> positions(seq.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = i;
  Tensor words = ops::gather_rows(backbone.word_emb, seq.token_ids);
  Tensor pos = ops::gather_rows(backbone.pos_emb, std::move(positions));
  Tensor seg = ops::gather_rows(backbone.seg_emb, seq.segment_ids);
  return ops::add(ops::add(words, pos), seg);
}

Tensor transformer_layer_forward(const Tensor& h_prev, const TransformerLayer& layer, std::size_t num_heads) {
  const std::size_t d_model = layer.wq.rows();
  if (h_prev.rank() != 2 || h_prev.cols() != d_model)
    throw std::invalid_argument("transformer_layer_forward: hidden state " + shape_string(h_prev.shape()) +
                                " does not match d_model " + std::to_string(d_model));
  if (num_heads == 0 || d_model % num_heads != 0)
    throw std::invalid_argument("transformer_layer_forward: num_heads must divide d_model");
  ++g_layer_evaluations;

  const std::size_t head_dim = d_model / num_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));

  const Tensor q = linear(h_prev, layer.wq, layer.bq);
  const Tensor k = linear(h_prev, layer.wk, layer.bk);
  const Tensor v = linear(h_prev, layer.wv, layer.bv);

  std::vector<Tensor> heads;
  heads.reserve(num_heads);
  for (std::size_t h = 0; h < num_heads; ++h) {
    const std::size_t begin = h * head_dim;
    Tensor qh = num_heads == 1 ? q : ops::slice_cols(q, begin, head_dim);
    Tensor kh = num_heads == 1 ? k : ops::slice_cols(k, begin, head_dim);
    Tensor vh = num_heads == 1 ? v : ops::slice_cols(v, begin, head_dim);
    Tensor scores = ops::scale(ops::matmul(qh, ops::transpose(kh)), inv_sqrt);
    heads.push_back(ops::matmul(ops::softmax(scores), vh));
  }
  const Tensor context = num_heads == 1 ? heads.front() : ops::concat_cols(heads);
  const Tensor attn = linear(context, layer.wo, layer.bo);
  const Tensor h1 = ops::layer_norm(ops::add(h_prev, attn), layer.ln1_gamma, layer.ln1_beta);

  const Tensor ff = linear(ops::gelu(linear(h1, layer.w1, layer.b1)), layer.w2, layer.b2);
  return ops::layer_norm(ops::add(h1, ff), layer.ln2_gamma, layer.ln2_beta);
}

Tensor classify(const Tensor& h_last, const Classifier& classifier) {
  if (h_last.rank() != 2 || h_last.cols() != classifier.weight.cols())
    throw std::invalid_argument("classify: hidden state " + shape_string(h_last.shape()) +
                                " does not match classifier " + shape_string(classifier.weight.shape()));
  const Tensor cls = ops::slice_row(h_last, 0);
  return ops::add(ops::matmul(cls, ops::transpose(classifier.weight)), classifier.bias);
}

Tensor full_forward(const TokenSequence& seq, const Backbone& backbone) {
  Tensor h = embed(seq, backbone);
  for (const auto& layer : backbone.layers) h = transformer_layer_forward(h, layer, backbone.config.num_heads);
  return classify(h, backbone.classifier);
}

std::size_t layer_evaluations() { return g_layer_evaluations; }
void reset_layer_evaluations() { g_layer_evaluations = 0; }

void for_each_param(Backbone& backbone, const ParamVisitor& visit) { visit_backbone(backbone, visit); }

void for_each_param(const Backbone& backbone, const ConstParamVisitor& visit) { visit_backbone(backbone, visit); }

void for_each_param(Classifier& classifier, const std::string& prefix, const ParamVisitor& visit) {
  visit(prefix + "weight", classifier.weight);
  visit(prefix + "bias", classifier.bias);
}

void for_each_param(const Classifier& classifier, const std::string& prefix, const ConstParamVisitor& visit) {
  visit(prefix + "weight", classifier.weight);
  visit(prefix + "bias", classifier.bias);
}

std::uint64_t parameter_hash(const Backbone& backbone) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const void* bytes, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 1099511628211ULL;
    }
  };
  for_each_param(backbone, [&](const std::string& path, const Tensor& t) {
    mix(path.data(), path.size());
    for (auto d : t.shape()) mix(&d, sizeof(d));
    mix(t.data().data(), t.size() * sizeof(double));
  });
  return h;
}

}  // namespace dynplan
