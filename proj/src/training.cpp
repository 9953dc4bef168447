#include "dynplan/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace dynplan {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Losses

Tensor task_loss(const Tensor& output, double label, TaskKind kind) {
  if (kind == TaskKind::regression) {
    if (output.size() != 1) throw std::invalid_argument("task_loss: regression expects a scalar output");
    const Tensor diff = ops::add_scalar(output, -label);
    return ops::mul(diff, diff);
  }
  if (label < 0.0 || label != std::floor(label) || static_cast<std::size_t>(label) >= output.cols())
    throw std::invalid_argument("task_loss: label " + std::to_string(label) + " out of range for " +
                                std::to_string(output.cols()) + " classes");
  return ops::cross_entropy(output, static_cast<std::size_t>(label));
}

double task_loss_value(const Tensor& output, double label, TaskKind kind) {
  return task_loss(output.detach(), label, kind).item();
}

double predict(const Tensor& output, TaskKind kind) {
  auto v = output.data();
  if (kind == TaskKind::regression) return v[0];
  return static_cast<double>(std::max_element(v.begin(), v.end()) - v.begin());
}

bool correct(const Tensor& output, double label, TaskKind kind) {
  const double p = predict(output, kind);
  if (kind == TaskKind::regression) return std::abs(p - label) < 0.5;
  return p == label;
}

// ---------------------------------------------------------------------------
// Optimizer

void AdamW::step(Model& model, const GradientBuffer& grads) {
  ++t_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  const double lr = config_.learning_rate;
  for (auto& ref : param_refs(model)) {
    auto it = grads.find(ref.path);
    if (it == grads.end()) continue;
    const auto& g = it->second;
    for (double v : g)
      if (!std::isfinite(v)) throw std::runtime_error("non-finite gradient for parameter " + ref.path);
    Tensor& param = *ref.value;
    auto& mom = moments_[ref.path];
    if (mom.m.empty()) {
      mom.m.assign(g.size(), 0.0);
      mom.v.assign(g.size(), 0.0);
    }
    std::vector<double> values(param.data().begin(), param.data().end());
    for (std::size_t i = 0; i < values.size(); ++i) {
      mom.m[i] = config_.beta1 * mom.m[i] + (1.0 - config_.beta1) * g[i];
      mom.v[i] = config_.beta2 * mom.v[i] + (1.0 - config_.beta2) * g[i] * g[i];
      const double mhat = mom.m[i] / bc1;
      const double vhat = mom.v[i] / bc2;
      values[i] -= lr * (mhat / (std::sqrt(vhat) + config_.eps) + config_.weight_decay * values[i]);
    }
    param = Tensor(param.shape(), std::move(values));
  }
}

std::string to_string(Stage stage) {
  switch (stage) {
    case Stage::backbone_finetune: return "backbone-finetune";
    case Stage::gate_init: return "gate-init";
    case Stage::rl_joint: return "rl-joint";
    case Stage::soft_ablation: return "soft-ablation";
    case Stage::exit_heads: return "exit-heads";
  }
  return "unknown";
}

StageState make_stage_state(Stage stage, const Model& model, const OptimConfig& optim) {
  StageState state;
  state.stage = stage;
  state.optimizer = AdamW(optim);
  state.baselines.assign(model.num_layers(), 0.0);
  for_each_param(model, [&](const std::string& path, const Tensor&) {
    bool train = false;
    switch (stage) {
      case Stage::backbone_finetune: train = is_backbone_param(path); break;
      case Stage::gate_init: train = is_gate_param(path); break;
      case Stage::rl_joint:
      case Stage::soft_ablation: train = !is_exit_head_param(path); break;
      case Stage::exit_heads: train = is_exit_head_param(path); break;
    }
    if (!train) state.frozen.insert(path);
  });
  return state;
}

GradientBuffer batch_gradients(const Model& model, const StageState& state, std::span<const Example* const> batch,
                               const LossBuilder& build) {
  if (batch.empty()) throw std::invalid_argument("batch_gradients: empty batch");
  GradientBuffer out;
  const double inv = 1.0 / static_cast<double>(batch.size());
  for (const Example* ex : batch) {
    Model bound = model;
    Tape tape;
    auto refs = param_refs(bound);
    for (auto& ref : refs)
      if (state.trainable(ref.path)) *ref.value = tape.leaf(*ref.value);
    const Tensor loss = build(bound, *ex);
    const GradientMap grads = backward(tape, loss);
    for (auto& ref : refs) {
      if (!ref.value->on_tape()) continue;
      auto g = grads.of(*ref.value).data();
      auto& dst = out[ref.path];
      if (dst.empty()) dst.assign(g.size(), 0.0);
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * inv;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Logging

std::string TrainingLog::csv() const {
  std::ostringstream os;
  os.precision(17);
  auto opt = [&os](const std::optional<double>& v) {
    if (v) os << *v;
  };
  os << "step,stage,task_loss,mean_mu,penalty,mean_sum_R,objective,train_acc\n";
  for (const auto& r : rows_) {
    os << r.step << ',' << to_string(r.stage) << ',' << r.task_loss << ',';
    opt(r.mean_mu);
    os << ',';
    opt(r.penalty);
    os << ',';
    opt(r.mean_sum_r);
    os << ',';
    opt(r.objective);
    os << ',' << r.train_acc << '\n';
  }
  return os.str();
}

void TrainingLog::write_csv(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write training log '" + path + "'");
  out << csv();
}

// ---------------------------------------------------------------------------
// Supervised stages

namespace {

struct ExampleStats {
  double task_loss = 0.0;
  bool correct = false;
  std::optional<double> mu;
  std::optional<double> penalty;
  std::optional<double> objective;
};

using StatsLossBuilder = std::function<Tensor(const Model&, const Example&, ExampleStats&)>;

std::vector<std::vector<const Example*>> make_batches(const DatasetSpec& data, std::size_t batch_size, Rng& rng) {
  std::vector<const Example*> order;
  order.reserve(data.size());
  for (const auto& ex : data.examples) order.push_back(&ex);
  rng.shuffle(order);
  std::vector<std::vector<const Example*>> batches;
  for (std::size_t i = 0; i < order.size(); i += batch_size)
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + batch_size)));
  return batches;
}

std::optional<double> mean_of(const std::vector<ExampleStats>& stats, std::optional<double> ExampleStats::*field) {
  if (stats.empty() || !(stats.front().*field)) return std::nullopt;
  double total = 0.0;
  for (const auto& s : stats) total += (s.*field).value_or(0.0);
  return total / static_cast<double>(stats.size());
}

TrainSummary run_supervised(Model& model, const DatasetSpec& data, StageState& state, const OptimConfig& optim,
                            const StatsLossBuilder& build, TrainingLog* log) {
  if (data.empty()) throw std::invalid_argument(to_string(state.stage) + ": empty dataset");
  if (optim.batch_size == 0) throw std::invalid_argument(to_string(state.stage) + ": batch_size must be positive");
  Rng rng(optim.seed);
  TrainSummary summary;
  for (std::size_t epoch = 0; epoch < optim.epochs; ++epoch) {
    double loss_total = 0.0;
    std::size_t hits = 0;
    for (const auto& batch : make_batches(data, optim.batch_size, rng)) {
      std::vector<ExampleStats> stats;
      const GradientBuffer grads = batch_gradients(model, state, batch, [&](const Model& bound, const Example& ex) {
        ExampleStats s;
        Tensor loss = build(bound, ex, s);
        stats.push_back(s);
        return loss;
      });
      for (const auto& [path, g] : grads)
        if (!state.trainable(path))
          throw std::logic_error(to_string(state.stage) + ": frozen parameter " + path + " received a gradient");
      state.optimizer.step(model, grads);
      ++state.step;

      LogRow row;
      row.step = state.step;
      row.stage = state.stage;
      double batch_loss = 0.0;
      std::size_t batch_hits = 0;
      for (const auto& s : stats) {
        batch_loss += s.task_loss;
        batch_hits += s.correct ? 1 : 0;
      }
      loss_total += batch_loss;
      hits += batch_hits;
      row.task_loss = batch_loss / static_cast<double>(stats.size());
      row.train_acc = static_cast<double>(batch_hits) / static_cast<double>(stats.size());
      row.mean_mu = mean_of(stats, &ExampleStats::mu);
      row.penalty = mean_of(stats, &ExampleStats::penalty);
      row.objective = mean_of(stats, &ExampleStats::objective);
      if (log != nullptr) log->add(row);
      ++summary.steps;
    }
    summary.final_loss = loss_total / static_cast<double>(data.size());
    summary.final_accuracy = static_cast<double>(hits) / static_cast<double>(data.size());
  }
  return summary;
}

Tensor mean_score(const std::vector<Tensor>& scores, RateSemantics semantics) {
  Tensor total = scores.front();
  for (std::size_t i = 1; i < scores.size(); ++i) total = ops::add(total, scores[i]);
  Tensor mu = ops::scale(total, 1.0 / static_cast<double>(scores.size()));
  if (semantics == RateSemantics::skip) mu = ops::add_scalar(ops::scale(mu, -1.0), 1.0);
  return mu;
}

}  // namespace

TrainSummary stage1_finetune_backbone(Model& model, const DatasetSpec& data, const OptimConfig& optim,
                                      TrainingLog* log) {
  StageState state = make_stage_state(Stage::backbone_finetune, model, optim);
  const TaskKind kind = data.task_kind;
  return run_supervised(model, data, state, optim,
                        [kind](const Model& bound, const Example& ex, ExampleStats& s) {
                          const Tensor out = full_forward(ex.tokens, bound.backbone);
                          Tensor loss = task_loss(out, ex.label, kind);
                          s.task_loss = loss.item();
                          s.correct = correct(out, ex.label, kind);
                          return loss;
                        },
                        log);
}

TrainSummary stage2_init_gates(Model& model, const DatasetSpec& data, const OptimConfig& optim, TrainingLog* log) {
  if (model.gates.size() != model.num_layers()) throw std::invalid_argument("gate-init: model has no gates");
  const std::uint64_t before = parameter_hash(model.backbone);
  StageState state = make_stage_state(Stage::gate_init, model, optim);
  const TaskKind kind = data.task_kind;
  TrainSummary summary = run_supervised(
      model, data, state, optim,
      [kind](const Model& bound, const Example& ex, ExampleStats& s) {
        const GatedOutput out = gated_forward(ex.tokens, bound.backbone, bound.gates, PlanMode::soft);
        Tensor loss = task_loss(out.logits, ex.label, kind);
        s.task_loss = loss.item();
        s.correct = correct(out.logits, ex.label, kind);
        s.mu = execution_rate_mu(out.trace.scores);
        return loss;
      },
      log);
  if (parameter_hash(model.backbone) != before)
    throw std::logic_error("gate-init: backbone parameters changed while frozen");
  return summary;
}

// ---------------------------------------------------------------------------
// Reward arithmetic

void RLConfig::validate(std::size_t num_layers) const {
  if (!(target_rate >= 0.0 && target_rate <= 1.0)) throw std::invalid_argument("rl config: target_rate must be in [0,1]");
  if (beta < 0.0 || lambda1 < 0.0 || lambda2 < 0.0)
    throw std::invalid_argument("rl config: beta, lambda1 and lambda2 must be non-negative");
  if (!layer_cost.empty() && layer_cost.size() != num_layers)
    throw std::invalid_argument("rl config: layer_cost needs one entry per layer");
  for (double c : layer_cost)
    if (c < 0.0) throw std::invalid_argument("rl config: layer costs must be non-negative");
  if (batch_size == 0) throw std::invalid_argument("rl config: batch_size must be positive");
  if (samples_per_example == 0) throw std::invalid_argument("rl config: samples_per_example must be positive");
  if (!(baseline_decay >= 0.0 && baseline_decay < 1.0))
    throw std::invalid_argument("rl config: baseline_decay must be in [0,1)");
}

std::vector<double> RLConfig::costs(std::size_t num_layers) const {
  if (layer_cost.empty()) return std::vector<double>(num_layers, 1.0);
  return layer_cost;
}

OptimConfig RLConfig::optim() const {
  OptimConfig o;
  o.learning_rate = learning_rate;
  o.weight_decay = weight_decay;
  o.batch_size = batch_size;
  o.epochs = epochs;
  o.seed = seed;
  return o;
}

json rl_config_to_json(const RLConfig& c) {
  return json{{"beta", c.beta},
              {"lambda1", c.lambda1},
              {"lambda2", c.lambda2},
              {"target_rate", c.target_rate},
              {"layer_cost", c.layer_cost},
              {"learning_rate", c.learning_rate},
              {"weight_decay", c.weight_decay},
              {"batch_size", c.batch_size},
              {"epochs", c.epochs},
              {"seed", c.seed},
              {"baseline_decay", c.baseline_decay},
              {"samples_per_example", c.samples_per_example},
              {"rate_semantics", c.rate_semantics == RateSemantics::skip ? "skip" : "execute"}};
}

RLConfig rl_config_from_json(const json& j) {
  RLConfig c;
  c.beta = j.value("beta", c.beta);
  c.lambda1 = j.value("lambda1", c.lambda1);
  c.lambda2 = j.value("lambda2", c.lambda2);
  c.target_rate = j.value("target_rate", c.target_rate);
  c.layer_cost = j.value("layer_cost", c.layer_cost);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.epochs = j.value("epochs", c.epochs);
  c.seed = j.value("seed", c.seed);
  c.baseline_decay = j.value("baseline_decay", c.baseline_decay);
  c.samples_per_example = j.value("samples_per_example", c.samples_per_example);
  c.rate_semantics = j.value("rate_semantics", std::string("execute")) == "skip" ? RateSemantics::skip
                                                                                 : RateSemantics::execute;
  return c;
}

double RewardBreakdown::sum_returns() const { return std::accumulate(layer_returns.begin(), layer_returns.end(), 0.0); }

double layer_return(std::span<const int> actions, std::span<const double> costs, std::size_t i) {
  const std::size_t num_layers = actions.size();
  if (i < 1 || i > num_layers) throw std::invalid_argument("layer_return: layer index out of range");
  if (costs.size() != num_layers) throw std::invalid_argument("layer_return: one cost per layer required");
  double saved = 0.0;
  for (std::size_t j = i - 1; j < num_layers; ++j) saved += (1.0 - actions[j]) * costs[j];
  return saved / static_cast<double>(num_layers);
}

double reward(std::span<const int> actions, std::span<const double> costs, double task_loss_value, double beta,
              std::size_t i) {
  return layer_return(actions, costs, i) - beta * task_loss_value;
}

double execution_rate_mu(std::span<const double> scores) {
  if (scores.empty()) throw std::invalid_argument("execution_rate_mu: no scores");
  return std::accumulate(scores.begin(), scores.end(), 0.0) / static_cast<double>(scores.size());
}

double rate_penalty(double mu, double target) { return (mu - target) * (mu - target); }

double rl_objective(double task_loss_value, std::span<const double> rewards, double xi, double lambda1,
                    double lambda2) {
  const double total = std::accumulate(rewards.begin(), rewards.end(), 0.0);
  return task_loss_value - lambda1 * total + lambda2 * xi;
}

std::vector<double> policy_credits(std::span<const int> actions, std::span<const double> costs,
                                   double task_loss_value, double beta) {
  const std::size_t num_layers = actions.size();
  const double inv_l = 1.0 / static_cast<double>(num_layers);
  // sum_k R^k = (1/L) sum_j j (1 - a^j) C^j - L beta loss
  std::vector<double> credits(num_layers);
  double tail = 0.0;
  for (std::size_t j = num_layers; j-- > 0;) {
    tail += static_cast<double>(j + 1) * (1.0 - actions[j]) * costs[j] * inv_l;
    credits[j] = tail - static_cast<double>(num_layers) * beta * task_loss_value;
  }
  return credits;
}

// ---------------------------------------------------------------------------
// Policy-gradient training

RLSample rl_sample(const Model& model, const Example& example, TaskKind kind, const RLConfig& cfg,
                   std::span<const double> baselines, Rng* rng, std::span<const int> forced_actions) {
  const std::size_t num_layers = model.num_layers();
  if (num_layers == 0) throw std::invalid_argument("rl_sample: model has no layers");
  if (baselines.size() != num_layers) throw std::invalid_argument("rl_sample: one baseline per layer required");
  const std::vector<double> costs = cfg.costs(num_layers);
  const PlanMode mode = forced_actions.empty() ? PlanMode::sampled : PlanMode::forced;
  const GatedOutput out = gated_forward(example.tokens, model.backbone, model.gates, mode, rng, forced_actions);

  const Tensor loss = task_loss(out.logits, example.label, kind);
  const Tensor mu = mean_score(out.scores, cfg.rate_semantics);
  const Tensor dev = ops::add_scalar(mu, -cfg.target_rate);
  const Tensor xi = ops::mul(dev, dev);

  RLSample sample;
  RewardBreakdown& b = sample.breakdown;
  b.actions = out.trace.actions;
  b.task_loss = loss.item();
  b.mu = mu.item();
  b.penalty = rate_penalty(b.mu, cfg.target_rate);
  for (std::size_t i = 1; i <= num_layers; ++i) b.layer_returns.push_back(reward(b.actions, costs, b.task_loss, cfg.beta, i));
  b.credits = policy_credits(b.actions, costs, b.task_loss, cfg.beta);
  b.objective = rl_objective(b.task_loss, b.layer_returns, b.penalty, cfg.lambda1, cfg.lambda2);

  Tensor surrogate = ops::add(loss, ops::scale(xi, cfg.lambda2));
  if (cfg.lambda1 != 0.0) {
    for (std::size_t i = 0; i < num_layers; ++i) {
      const Tensor& z = out.gate_logits[i];
      const Tensor log_p = b.actions[i] == 1 ? ops::log_sigmoid(z) : ops::log_sigmoid(ops::scale(z, -1.0));
      const double advantage = b.credits[i] - baselines[i];
      surrogate = ops::sub(surrogate, ops::scale(log_p, cfg.lambda1 * advantage));
    }
  }
  sample.surrogate = surrogate;
  return sample;
}

RLGradients rl_gradients(const Model& model, std::span<const Example* const> batch, TaskKind kind,
                         const RLConfig& cfg, Rng& rng, StageState& state) {
  const std::size_t num_layers = model.num_layers();
  cfg.validate(num_layers);
  if (batch.empty()) throw std::invalid_argument("reinforce_step: empty batch");
  if (state.baselines.size() != num_layers) state.baselines.assign(num_layers, 0.0);

  auto batch_mean_credits = [num_layers](const std::vector<RewardBreakdown>& bs) {
    std::vector<double> mean(num_layers, 0.0);
    for (const auto& b : bs)
      for (std::size_t i = 0; i < num_layers; ++i) mean[i] += b.credits[i] / static_cast<double>(bs.size());
    return mean;
  };

  if (!state.baselines_ready) {
    // Seed the baselines from a forward-only pass so the first update is not
    // dominated by the raw return.
    std::vector<RewardBreakdown> warm;
    for (const Example* ex : batch) warm.push_back(rl_sample(model, *ex, kind, cfg, state.baselines, &rng).breakdown);
    state.baselines = batch_mean_credits(warm);
    state.baselines_ready = true;
  }

  RLGradients result;
  const double inv_k = 1.0 / static_cast<double>(cfg.samples_per_example);
  result.grads = batch_gradients(model, state, batch, [&](const Model& bound, const Example& ex) {
    Tensor total;
    for (std::size_t k = 0; k < cfg.samples_per_example; ++k) {
      RLSample s = rl_sample(bound, ex, kind, cfg, state.baselines, &rng);
      total = k == 0 ? s.surrogate : ops::add(total, s.surrogate);
      result.breakdowns.push_back(std::move(s.breakdown));
    }
    return cfg.samples_per_example == 1 ? total : ops::scale(total, inv_k);
  });

  const auto mean = batch_mean_credits(result.breakdowns);
  for (std::size_t i = 0; i < num_layers; ++i)
    state.baselines[i] = cfg.baseline_decay * state.baselines[i] + (1.0 - cfg.baseline_decay) * mean[i];
  return result;
}

std::vector<RewardBreakdown> reinforce_step(Model& model, std::span<const Example* const> batch, TaskKind kind,
                                            const RLConfig& cfg, Rng& rng, StageState& state) {
  RLGradients g = rl_gradients(model, batch, kind, cfg, rng, state);
  for (const auto& [path, values] : g.grads)
    if (!state.trainable(path)) throw std::logic_error("reinforce_step: frozen parameter " + path + " received a gradient");
  state.optimizer.step(model, g.grads);
  ++state.step;
  return std::move(g.breakdowns);
}

TrainSummary train_rl(Model& model, const DatasetSpec& data, const RLConfig& cfg, TrainingLog* log,
                      StageState* external_state) {
  if (data.empty()) throw std::invalid_argument("rl-joint: empty dataset");
  cfg.validate(model.num_layers());
  StageState local = make_stage_state(Stage::rl_joint, model, cfg.optim());
  StageState& state = external_state != nullptr ? *external_state : local;
  Rng rng(cfg.seed);
  Rng order_rng(cfg.seed ^ 0x5851f42d4c957f2dULL);
  TrainSummary summary;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double loss_total = 0.0;
    std::size_t hits = 0;
    std::size_t seen = 0;
    for (const auto& batch : make_batches(data, cfg.batch_size, order_rng)) {
      const auto breakdowns = reinforce_step(model, batch, data.task_kind, cfg, rng, state);
      LogRow row;
      row.step = state.step;
      row.stage = Stage::rl_joint;
      double loss = 0.0, mu = 0.0, pen = 0.0, sum_r = 0.0, obj = 0.0;
      for (const auto& b : breakdowns) {
        loss += b.task_loss;
        mu += b.mu;
        pen += b.penalty;
        sum_r += b.sum_returns();
        obj += b.objective;
      }
      const double n = static_cast<double>(breakdowns.size());
      row.task_loss = loss / n;
      row.mean_mu = mu / n;
      row.penalty = pen / n;
      row.mean_sum_r = sum_r / n;
      row.objective = obj / n;
      // Training accuracy under the current deterministic policy.
      std::size_t batch_hits = 0;
      for (const Example* ex : batch) {
        const GatedOutput out = gated_forward(ex->tokens, model.backbone, model.gates, PlanMode::deterministic);
        batch_hits += correct(out.logits, ex->label, data.task_kind) ? 1 : 0;
      }
      row.train_acc = static_cast<double>(batch_hits) / static_cast<double>(batch.size());
      hits += batch_hits;
      loss_total += loss / static_cast<double>(cfg.samples_per_example);
      seen += batch.size();
      if (log != nullptr) log->add(row);
      ++summary.steps;
    }
    summary.final_loss = loss_total / static_cast<double>(seen);
    summary.final_accuracy = static_cast<double>(hits) / static_cast<double>(seen);
  }
  return summary;
}

TrainSummary train_soft_ablation(Model& model, const DatasetSpec& data, const RLConfig& cfg, TrainingLog* log) {
  cfg.validate(model.num_layers());
  StageState state = make_stage_state(Stage::soft_ablation, model, cfg.optim());
  const TaskKind kind = data.task_kind;
  return run_supervised(
      model, data, state, cfg.optim(),
      [&cfg, kind](const Model& bound, const Example& ex, ExampleStats& s) {
        const GatedOutput out = gated_forward(ex.tokens, bound.backbone, bound.gates, PlanMode::soft);
        const Tensor loss = task_loss(out.logits, ex.label, kind);
        const Tensor mu = mean_score(out.scores, cfg.rate_semantics);
        const Tensor dev = ops::add_scalar(mu, -cfg.target_rate);
        const Tensor xi = ops::mul(dev, dev);
        s.task_loss = loss.item();
        s.correct = correct(out.logits, ex.label, kind);
        s.mu = mu.item();
        s.penalty = rate_penalty(*s.mu, cfg.target_rate);
        s.objective = s.task_loss + cfg.lambda2 * *s.penalty;
        return ops::add(loss, ops::scale(xi, cfg.lambda2));
      },
      log);
}

}  // namespace dynplan
