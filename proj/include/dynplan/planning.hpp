#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dynplan/backbone.hpp"
#include "dynplan/random.hpp"

namespace dynplan {

// One-layer gate s = sigmoid(h_cls . A + b). Each layer owns its own gate.
struct PlanningGate {
  Tensor weight;  // 1 x d_model
  Tensor bias;    // 1 x 1
};

enum class PlanMode {
  deterministic,  // a = [s > 0.5]
  sampled,        // a ~ Bernoulli(s)
  soft,           // a := s, every layer evaluated
  forced,         // caller-supplied actions; gates still evaluated
};

std::string to_string(PlanMode mode);

struct PlanTrace {
  std::vector<double> scores;
  std::vector<int> actions;
  PlanMode mode = PlanMode::deterministic;
};

std::vector<PlanningGate> init_gates(const ModelConfig& config, std::uint64_t seed);

// Pre-sigmoid gate output for a 1 x d_model CLS row.
Tensor gate_logit(const Tensor& h_cls, const PlanningGate& gate);
double gate_score(std::span<const double> h_cls, const PlanningGate& gate);

int threshold_action(double score);

struct ActionSample {
  int action = 0;
  double log_prob = 0.0;
};

ActionSample sample_action(double score, Rng& rng);

struct GatedOutput {
  Tensor logits;
  PlanTrace trace;
  std::vector<Tensor> gate_logits;  // z^i, tape-attached when gates are
  std::vector<Tensor> scores;       // s^i as tensors
  std::vector<Tensor> hidden;       // h^0 .. h^L
  std::size_t layer_evaluations = 0;
};

// Runs the backbone with a gate in front of every layer. In deterministic,
// sampled and forced modes a bypassed layer is not evaluated and h^i is h^{i-1}.
GatedOutput gated_forward(const TokenSequence& seq, const Backbone& backbone, std::span<const PlanningGate> gates,
                          PlanMode mode, Rng* rng = nullptr, std::span<const int> forced_actions = {});

// 1-based indices of executed layers.
std::vector<std::size_t> executed_layer_set(const PlanTrace& trace);

// "1 2 3 4 5 6" style rendering of a computational path.
std::string render_path(std::span<const std::size_t> layers);

void for_each_param(std::vector<PlanningGate>& gates, const ParamVisitor& visit);
void for_each_param(const std::vector<PlanningGate>& gates, const ConstParamVisitor& visit);

}  // namespace dynplan
