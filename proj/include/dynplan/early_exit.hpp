#pragma once

#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "dynplan/backbone.hpp"
#include "dynplan/data.hpp"
#include "dynplan/model.hpp"
#include "dynplan/training.hpp"

namespace dynplan {

enum class ExitOn { below, above };

std::string to_string(ExitOn exit_on);
ExitOn parse_exit_on(const std::string& name);

struct ExitConfig {
  double entropy_threshold = 0.0;
  ExitOn exit_on = ExitOn::below;

  void validate() const;
};

// -sum p ln p with 0 ln 0 = 0. Rejects negative entries and mass off 1 by more
// than 1e-9.
double entropy(std::span<const double> probs);

// One head per layer, the last one included.
std::vector<Classifier> init_exit_heads(const ModelConfig& config, std::uint64_t seed);

struct ExitOutput {
  Tensor logits;
  std::size_t exit_layer = 0;  // 1-based
  std::vector<double> entropies;
  std::size_t layer_evaluations = 0;
};

// Runs layers in order and stops at the first head whose entropy passes the
// threshold test. Layers after the exit are never evaluated.
ExitOutput early_exit_forward(const TokenSequence& seq, const Backbone& backbone, std::span<const Classifier> heads,
                              const ExitConfig& config);

// CLS rows h^1..h^L of the ungated backbone.
std::vector<Tensor> layer_cls_states(const TokenSequence& seq, const Backbone& backbone);

// Trains every head on its own layer's CLS state with the backbone frozen.
// Throws std::logic_error if the backbone hash moves.
TrainSummary train_exit_heads(Model& model, const DatasetSpec& data, const OptimConfig& optim,
                              TrainingLog* log = nullptr);

}  // namespace dynplan
