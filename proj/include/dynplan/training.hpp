#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "dynplan/data.hpp"
#include "dynplan/model.hpp"
#include "dynplan/planning.hpp"
#include "dynplan/random.hpp"

namespace dynplan {

// ---------------------------------------------------------------------------
// Losses

// Cross-entropy for classification tasks, squared error for regression.
Tensor task_loss(const Tensor& output, double label, TaskKind kind);
double task_loss_value(const Tensor& output, double label, TaskKind kind);

// argmax class, or the scalar prediction for regression.
double predict(const Tensor& output, TaskKind kind);
bool correct(const Tensor& output, double label, TaskKind kind);

// ---------------------------------------------------------------------------
// Optimization plumbing

struct OptimConfig {
  double learning_rate = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  std::size_t batch_size = 16;
  std::size_t epochs = 5;
  std::uint64_t seed = 0;
};

using GradientBuffer = std::unordered_map<std::string, std::vector<double>>;

// Adam with decoupled weight decay; one moment pair per parameter path.
class AdamW {
 public:
  explicit AdamW(OptimConfig config = {}) : config_(config) {}

  // Updates every parameter that has an entry in `grads`. Throws naming the
  // parameter path when a gradient is not finite.
  void step(Model& model, const GradientBuffer& grads);

  const OptimConfig& config() const { return config_; }
  std::size_t steps() const { return t_; }

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  OptimConfig config_;
  std::unordered_map<std::string, Moments> moments_;
  std::size_t t_ = 0;
};

enum class Stage { backbone_finetune, gate_init, rl_joint, soft_ablation, exit_heads };
std::string to_string(Stage stage);

struct StageState {
  Stage stage = Stage::backbone_finetune;
  std::set<std::string> frozen;
  AdamW optimizer;
  std::vector<double> baselines;  // per-layer EMA of the policy credit
  bool baselines_ready = false;
  std::size_t step = 0;

  bool trainable(const std::string& path) const { return frozen.count(path) == 0; }
};

// Freezes whatever the stage does not train (gate-init freezes every backbone
// parameter, and so on).
StageState make_stage_state(Stage stage, const Model& model, const OptimConfig& optim);

using LossBuilder = std::function<Tensor(const Model& bound, const Example& example)>;

// Mean gradient of `build` over the batch with respect to every trainable
// parameter. Each example gets its own tape.
GradientBuffer batch_gradients(const Model& model, const StageState& state, std::span<const Example* const> batch,
                               const LossBuilder& build);

struct LogRow {
  std::size_t step = 0;
  Stage stage = Stage::backbone_finetune;
  double task_loss = 0.0;
  std::optional<double> mean_mu;
  std::optional<double> penalty;
  std::optional<double> mean_sum_r;
  std::optional<double> objective;
  double train_acc = 0.0;
};

class TrainingLog {
 public:
  void add(LogRow row) { rows_.push_back(std::move(row)); }
  const std::vector<LogRow>& rows() const { return rows_; }
  std::string csv() const;
  void write_csv(const std::string& path) const;

 private:
  std::vector<LogRow> rows_;
};

struct TrainSummary {
  std::size_t steps = 0;
  double final_loss = 0.0;      // mean task loss of the last epoch
  double final_accuracy = 0.0;  // train accuracy of the last epoch
};

// ---------------------------------------------------------------------------
// Stages

// Fine-tunes the backbone through full_forward; gates untouched.
TrainSummary stage1_finetune_backbone(Model& model, const DatasetSpec& data, const OptimConfig& optim,
                                      TrainingLog* log = nullptr);

// Trains only the gates in soft mode; every backbone parameter is left
// bit-identical (checked by hash, std::logic_error otherwise).
TrainSummary stage2_init_gates(Model& model, const DatasetSpec& data, const OptimConfig& optim,
                               TrainingLog* log = nullptr);

enum class RateSemantics { execute, skip };

struct RLConfig {
  double beta = 5.0;
  double lambda1 = 0.5;
  double lambda2 = 1.0;
  double target_rate = 0.4;
  std::vector<double> layer_cost;  // empty means 1.0 for every layer
  double learning_rate = 3e-4;
  double weight_decay = 0.01;
  std::size_t batch_size = 16;
  std::size_t epochs = 2;
  std::uint64_t seed = 0;
  double baseline_decay = 0.9;
  std::size_t samples_per_example = 1;
  RateSemantics rate_semantics = RateSemantics::execute;

  void validate(std::size_t num_layers) const;
  std::vector<double> costs(std::size_t num_layers) const;
  OptimConfig optim() const;
};

nlohmann::json rl_config_to_json(const RLConfig& cfg);
RLConfig rl_config_from_json(const nlohmann::json& j);

struct RewardBreakdown {
  std::vector<int> actions;
  std::vector<double> layer_returns;  // R^i
  std::vector<double> credits;        // part of sum_k R^k that a^i can influence
  double task_loss = 0.0;
  double mu = 0.0;
  double penalty = 0.0;
  double objective = 0.0;

  double sum_returns() const;
};

// (1/L) * sum_{j=i..L} (1 - a^j) C^j, with i 1-based.
double layer_return(std::span<const int> actions, std::span<const double> costs, std::size_t i);
double reward(std::span<const int> actions, std::span<const double> costs, double task_loss_value, double beta,
              std::size_t i);
double execution_rate_mu(std::span<const double> scores);
double rate_penalty(double mu, double target);
double rl_objective(double task_loss_value, std::span<const double> rewards, double xi, double lambda1,
                    double lambda2);

// Credit for layer i: sum_k R^k minus the savings of layers before i, which
// a^i cannot affect. Weighting grad log p(a^i) by this keeps the estimator
// unbiased for grad E[sum_i R^i].
std::vector<double> policy_credits(std::span<const int> actions, std::span<const double> costs,
                                   double task_loss_value, double beta);

struct RLSample {
  Tensor surrogate;  // scalar whose gradient is the per-sample update direction
  RewardBreakdown breakdown;
};

// One sampled (or, with `forced_actions`, forced) action vector for one
// example. The surrogate is task_loss + lambda2 * xi
// - lambda1 * sum_i (credit_i - baseline_i) * log p(a^i | s^i).
RLSample rl_sample(const Model& model, const Example& example, TaskKind kind, const RLConfig& cfg,
                   std::span<const double> baselines, Rng* rng, std::span<const int> forced_actions = {});

struct RLGradients {
  GradientBuffer grads;
  std::vector<RewardBreakdown> breakdowns;
};

// Gradient half of reinforce_step; updates the EMA baselines in `state`.
RLGradients rl_gradients(const Model& model, std::span<const Example* const> batch, TaskKind kind,
                         const RLConfig& cfg, Rng& rng, StageState& state);

// One optimizer step of joint training from sampled actions.
std::vector<RewardBreakdown> reinforce_step(Model& model, std::span<const Example* const> batch, TaskKind kind,
                                            const RLConfig& cfg, Rng& rng, StageState& state);

// Stage 3: epochs of reinforce_step over the dataset.
TrainSummary train_rl(Model& model, const DatasetSpec& data, const RLConfig& cfg, TrainingLog* log = nullptr,
                      StageState* state = nullptr);

// Soft-relaxed joint training minimizing task_loss + lambda2 * xi.
TrainSummary train_soft_ablation(Model& model, const DatasetSpec& data, const RLConfig& cfg,
                                 TrainingLog* log = nullptr);

}  // namespace dynplan
