#include "dynplan/early_exit.hpp"

#include <cmath>
#include <map>
#include <stdexcept>

namespace dynplan {

std::string to_string(ExitOn exit_on) { return exit_on == ExitOn::above ? "above" : "below"; }

ExitOn parse_exit_on(const std::string& name) {
  if (name == "below") return ExitOn::below;
  if (name == "above") return ExitOn::above;
  throw std::invalid_argument("unknown exit_on '" + name + "' (expected below or above)");
}

void ExitConfig::validate() const {
  if (!(entropy_threshold >= 0.0)) throw std::invalid_argument("entropy_threshold must be non-negative");
}

double entropy(std::span<const double> probs) {
  if (probs.empty()) throw std::invalid_argument("entropy: empty distribution");
  double total = 0.0;
  double h = 0.0;
  for (double p : probs) {
    if (!(p >= 0.0)) throw std::invalid_argument("entropy: negative probability");
    total += p;
    if (p > 0.0) h -= p * std::log(p);
  }
  if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("entropy: probabilities sum to " + std::to_string(total));
  return h;
}

std::vector<Classifier> init_exit_heads(const ModelConfig& config, std::uint64_t seed) {
  if (config.regression()) throw std::invalid_argument("early exit needs a classification task");
  std::vector<Classifier> heads;
  for (std::size_t i = 0; i < config.num_layers; ++i)
    heads.push_back(init_classifier(config.num_classes, config.d_model, seed + 7919 * (i + 1)));
  return heads;
}

ExitOutput early_exit_forward(const TokenSequence& seq, const Backbone& backbone, std::span<const Classifier> heads,
                              const ExitConfig& config) {
  config.validate();
  const std::size_t num_layers = backbone.layers.size();
  if (heads.size() != num_layers)
    throw std::invalid_argument("early_exit_forward: " + std::to_string(heads.size()) + " heads for " +
                                std::to_string(num_layers) + " layers");
  ExitOutput out;
  Tensor h = embed(seq, backbone);
  for (std::size_t i = 0; i < num_layers; ++i) {
    h = transformer_layer_forward(h, backbone.layers[i], backbone.config.num_heads);
    ++out.layer_evaluations;
    Tensor logits = classify(h, heads[i]);
    const double e = entropy(ops::softmax(logits).data());
    out.entropies.push_back(e);
    const bool leave = config.exit_on == ExitOn::below ? e < config.entropy_threshold : e > config.entropy_threshold;
    if (leave || i + 1 == num_layers) {
      out.logits = logits;
      out.exit_layer = i + 1;
      break;
    }
  }
  return out;
}

std::vector<Tensor> layer_cls_states(const TokenSequence& seq, const Backbone& backbone) {
  std::vector<Tensor> out;
  Tensor h = embed(seq, backbone);
  for (const auto& layer : backbone.layers) {
    h = transformer_layer_forward(h, layer, backbone.config.num_heads);
    out.push_back(ops::slice_row(h, 0));
  }
  return out;
}

TrainSummary train_exit_heads(Model& model, const DatasetSpec& data, const OptimConfig& optim, TrainingLog* log) {
  if (data.empty()) throw std::invalid_argument("exit-heads: empty dataset");
  if (data.task_kind == TaskKind::regression) throw std::invalid_argument("exit-heads: regression tasks have no entropy");
  if (optim.batch_size == 0) throw std::invalid_argument("exit-heads: batch_size must be positive");
  if (model.exit_heads.size() != model.num_layers())
    model.exit_heads = init_exit_heads(model.config(), optim.seed ^ 0xe7037ed1a0b428dbULL);
  const std::uint64_t before = parameter_hash(model.backbone);

  // The backbone is frozen, so its CLS states are computed once.
  std::map<const Example*, std::vector<Tensor>> cache;
  for (const auto& ex : data.examples) cache.emplace(&ex, layer_cls_states(ex.tokens, model.backbone));

  StageState state = make_stage_state(Stage::exit_heads, model, optim);
  Rng rng(optim.seed);
  TrainSummary summary;
  std::vector<const Example*> order;
  for (const auto& ex : data.examples) order.push_back(&ex);
  for (std::size_t epoch = 0; epoch < optim.epochs; ++epoch) {
    rng.shuffle(order);
    double loss_total = 0.0;
    std::size_t hits = 0;
    for (std::size_t start = 0; start < order.size(); start += optim.batch_size) {
      const std::size_t stop = std::min(order.size(), start + optim.batch_size);
      std::span<const Example* const> batch(order.data() + start, stop - start);
      double batch_loss = 0.0;
      std::size_t batch_hits = 0;
      const GradientBuffer grads = batch_gradients(model, state, batch, [&](const Model& bound, const Example& ex) {
        const auto& states = cache.at(&ex);
        Tensor total;
        for (std::size_t i = 0; i < states.size(); ++i) {
          const Tensor logits = classify(states[i], bound.exit_heads[i]);
          const Tensor loss = task_loss(logits, ex.label, data.task_kind);
          total = i == 0 ? loss : ops::add(total, loss);
          if (i + 1 == states.size()) {
            batch_loss += loss.item();
            batch_hits += correct(logits, ex.label, data.task_kind) ? 1 : 0;
          }
        }
        return total;
      });
      for (const auto& [path, g] : grads)
        if (!is_exit_head_param(path)) throw std::logic_error("exit-heads: frozen parameter " + path + " received a gradient");
      state.optimizer.step(model, grads);
      ++state.step;
      loss_total += batch_loss;
      hits += batch_hits;
      if (log != nullptr) {
        LogRow row;
        row.step = state.step;
        row.stage = Stage::exit_heads;
        row.task_loss = batch_loss / static_cast<double>(batch.size());
        row.train_acc = static_cast<double>(batch_hits) / static_cast<double>(batch.size());
        log->add(row);
      }
      ++summary.steps;
    }
    summary.final_loss = loss_total / static_cast<double>(data.size());
    summary.final_accuracy = static_cast<double>(hits) / static_cast<double>(data.size());
  }
  if (parameter_hash(model.backbone) != before)
    throw std::logic_error("exit-heads: backbone parameters changed while frozen");
  return summary;
}

}  // namespace dynplan
