#include "dynplan/planning.hpp"

#include <cmath>
#include <stdexcept>

namespace dynplan {

std::string to_string(PlanMode mode) {
  switch (mode) {
    case PlanMode::deterministic: return "deterministic";
    case PlanMode::sampled: return "sampled";
    case PlanMode::soft: return "soft";
    case PlanMode::forced: return "forced";
  }
  return "deterministic";
}

std::vector<PlanningGate> init_gates(const ModelConfig& config, std::uint64_t seed) {
  Rng rng(seed);
  const double stddev = 0.1 / std::sqrt(static_cast<double>(config.d_model));
  std::vector<PlanningGate> gates(config.num_layers);
  for (auto& g : gates) {
    std::vector<double> w(config.d_model);
    for (auto& v : w) v = rng.normal() * stddev;
    g.weight = Tensor::row(std::move(w));
    g.bias = Tensor::scalar(0.0);
  }
  return gates;
}

Tensor gate_logit(const Tensor& h_cls, const PlanningGate& gate) {
  if (h_cls.rows() != 1 || h_cls.cols() != gate.weight.cols())
    throw std::invalid_argument("gate: CLS vector " + shape_string(h_cls.shape()) + " does not match gate weight " +
                                shape_string(gate.weight.shape()));
  return ops::add(ops::matmul(h_cls, ops::transpose(gate.weight)), gate.bias);
}

double gate_score(std::span<const double> h_cls, const PlanningGate& gate) {
  std::vector<double> row(h_cls.begin(), h_cls.end());
  return ops::sigmoid(gate_logit(Tensor::row(std::move(row)), gate)).item();
}

int threshold_action(double score) { return score > 0.5 ? 1 : 0; }

ActionSample sample_action(double score, Rng& rng) {
  ActionSample out;
  out.action = rng.uniform() < score ? 1 : 0;
  out.log_prob = out.action == 1 ? std::log(score) : std::log1p(-score);
  return out;
}

GatedOutput gated_forward(const TokenSequence& seq, const Backbone& backbone, std::span<const PlanningGate> gates,
                          PlanMode mode, Rng* rng, std::span<const int> forced_actions) {
  const std::size_t num_layers = backbone.layers.size();
  if (gates.size() != num_layers)
    throw std::invalid_argument("gated_forward: " + std::to_string(gates.size()) + " gates for " +
                                std::to_string(num_layers) + " layers");
  if (mode == PlanMode::sampled && rng == nullptr)
    throw std::invalid_argument("gated_forward: sampled mode requires an rng");
  if (mode == PlanMode::forced && forced_actions.size() != num_layers)
    throw std::invalid_argument("gated_forward: forced mode needs one action per layer");

  GatedOutput out;
  out.trace.mode = mode;
  out.trace.scores.reserve(num_layers);
  out.trace.actions.reserve(num_layers);

  Tensor h = embed(seq, backbone);
  out.hidden.push_back(h);
  for (std::size_t i = 0; i < num_layers; ++i) {
    const Tensor z = gate_logit(ops::slice_row(h, 0), gates[i]);
    const Tensor s = ops::sigmoid(z);
    const double score = s.item();
    out.gate_logits.push_back(z);
    out.scores.push_back(s);
    out.trace.scores.push_back(score);

    if (mode == PlanMode::soft) {
      const Tensor t = transformer_layer_forward(h, backbone.layers[i], backbone.config.num_heads);
      ++out.layer_evaluations;
      const Tensor keep = ops::add_scalar(ops::scale(s, -1.0), 1.0);
      h = ops::add(ops::mul(s, t), ops::mul(keep, h));
      out.trace.actions.push_back(threshold_action(score));
    } else {
      int action = 0;
      switch (mode) {
        case PlanMode::deterministic: action = threshold_action(score); break;
        case PlanMode::sampled: action = sample_action(score, *rng).action; break;
        case PlanMode::forced: action = forced_actions[i] != 0 ? 1 : 0; break;
        case PlanMode::soft: break;
      }
      out.trace.actions.push_back(action);
      if (action == 1) {
        h = transformer_layer_forward(h, backbone.layers[i], backbone.config.num_heads);
        ++out.layer_evaluations;
      }
    }
    out.hidden.push_back(h);
  }
  out.logits = classify(h, backbone.classifier);
  return out;
}

std::vector<std::size_t> executed_layer_set(const PlanTrace& trace) {
  if (trace.mode == PlanMode::soft)
    throw std::invalid_argument("executed_layer_set: soft traces have no discrete path");
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < trace.actions.size(); ++i)
    if (trace.actions[i] == 1) out.push_back(i + 1);
  return out;
}

std::string render_path(std::span<const std::size_t> layers) {
  std::string out;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (i) out += ' ';
    out += std::to_string(layers[i]);
  }
  return out;
}

namespace {
template <class Gates, class Visit>
void visit_gates(Gates& gates, Visit&& visit) {
  for (std::size_t i = 0; i < gates.size(); ++i) {
    const std::string p = "gates." + std::to_string(i) + ".";
    visit(p + "weight", gates[i].weight);
    visit(p + "bias", gates[i].bias);
  }
}
}  // namespace

void for_each_param(std::vector<PlanningGate>& gates, const ParamVisitor& visit) { visit_gates(gates, visit); }
void for_each_param(const std::vector<PlanningGate>& gates, const ConstParamVisitor& visit) {
  visit_gates(gates, visit);
}

}  // namespace dynplan
