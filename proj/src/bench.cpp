#include "dynplan/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

namespace dynplan {

using nlohmann::json;

InferenceFn full_inference(const Model& model) {
  return [&model](const Example& ex) {
    return InferenceOutcome{full_forward(ex.tokens, model.backbone), model.num_layers(), std::nullopt};
  };
}

InferenceFn planning_inference(const Model& model) {
  return [&model](const Example& ex) {
    GatedOutput out = gated_forward(ex.tokens, model.backbone, model.gates, PlanMode::deterministic);
    return InferenceOutcome{out.logits, out.layer_evaluations, execution_rate_mu(out.trace.scores)};
  };
}

InferenceFn forced_inference(const Model& model, std::vector<int> actions) {
  if (actions.size() != model.num_layers()) throw std::invalid_argument("forced_inference: one action per layer");
  return [&model, actions = std::move(actions)](const Example& ex) {
    GatedOutput out = gated_forward(ex.tokens, model.backbone, model.gates, PlanMode::forced, nullptr, actions);
    return InferenceOutcome{out.logits, out.layer_evaluations, std::nullopt};
  };
}

InferenceFn early_exit_inference(const Model& model, ExitConfig config) {
  config.validate();
  if (model.exit_heads.size() != model.num_layers()) throw std::invalid_argument("early exit needs trained exit heads");
  return [&model, config](const Example& ex) {
    ExitOutput out = early_exit_forward(ex.tokens, model.backbone, model.exit_heads, config);
    return InferenceOutcome{out.logits, out.layer_evaluations, std::nullopt};
  };
}

InferenceFn prefix_inference(const Model& model, std::size_t k) {
  if (k < 1 || k > model.num_layers()) throw std::invalid_argument("prefix_inference: k must be in [1, L]");
  if (model.exit_heads.size() != model.num_layers()) throw std::invalid_argument("prefix inference needs exit heads");
  return [&model, k](const Example& ex) {
    Tensor h = embed(ex.tokens, model.backbone);
    for (std::size_t i = 0; i < k; ++i)
      h = transformer_layer_forward(h, model.backbone.layers[i], model.backbone.config.num_heads);
    return InferenceOutcome{classify(h, model.exit_heads[k - 1]), k, std::nullopt};
  };
}

EvalStats evaluate(const InferenceFn& infer, const DatasetSpec& data) {
  if (data.empty()) throw std::invalid_argument("evaluate: empty dataset");
  EvalStats s;
  double score = 0.0;
  bool scored = true;
  double easy_layers = 0.0, hard_layers = 0.0, easy_hits = 0.0, hard_hits = 0.0;
  std::size_t easy = 0, hard = 0;
  for (const auto& ex : data.examples) {
    const InferenceOutcome out = infer(ex);
    const bool ok = correct(out.output, ex.label, data.task_kind);
    s.accuracy += ok ? 1.0 : 0.0;
    s.mean_layers += static_cast<double>(out.executed_layers);
    if (out.mean_score) score += *out.mean_score;
    else scored = false;
    if (ex.difficulty == "easy") {
      ++easy;
      easy_layers += static_cast<double>(out.executed_layers);
      easy_hits += ok ? 1.0 : 0.0;
    } else if (ex.difficulty == "hard") {
      ++hard;
      hard_layers += static_cast<double>(out.executed_layers);
      hard_hits += ok ? 1.0 : 0.0;
    }
  }
  s.count = data.size();
  const double n = static_cast<double>(s.count);
  s.accuracy /= n;
  s.mean_layers /= n;
  if (scored) s.mean_score = score / n;
  if (easy > 0) {
    s.easy_mean_layers = easy_layers / static_cast<double>(easy);
    s.easy_accuracy = easy_hits / static_cast<double>(easy);
  }
  if (hard > 0) {
    s.hard_mean_layers = hard_layers / static_cast<double>(hard);
    s.hard_accuracy = hard_hits / static_cast<double>(hard);
  }
  return s;
}

void LatencyReport::set_baseline(double base_mean) {
  base_mean_ns = base_mean;
  speedup = speedup_ratio(base_mean, mean_ns);
}

bool LatencyReport::consistent() const {
  if (!speedup || !base_mean_ns) return !speedup && !base_mean_ns;
  return *speedup == *base_mean_ns / mean_ns;
}

LatencyReport measure_latency(const InferenceFn& infer, const DatasetSpec& data, std::size_t warmup,
                              std::size_t repeats) {
  if (data.empty()) throw std::invalid_argument("measure_latency: empty dataset");
  if (repeats < 3) throw std::invalid_argument("measure_latency: repeats must be at least 3");
  using clock = std::chrono::steady_clock;
  LatencyReport r;
  r.warmup = warmup;
  r.repeats = repeats;
  std::vector<double> samples(repeats);
  double hits = 0.0, layers = 0.0;
  for (const auto& ex : data.examples) {
    for (std::size_t w = 0; w < warmup; ++w) (void)infer(ex);
    InferenceOutcome last;
    for (std::size_t k = 0; k < repeats; ++k) {
      const auto start = clock::now();
      last = infer(ex);
      samples[k] = static_cast<double>(std::chrono::duration_cast<std::chrono::nanoseconds>(clock::now() - start).count());
    }
    std::sort(samples.begin(), samples.end());
    const double median = repeats % 2 == 1 ? samples[repeats / 2]
                                           : 0.5 * (samples[repeats / 2 - 1] + samples[repeats / 2]);
    r.per_example_ns.push_back(median);
    hits += correct(last.output, ex.label, data.task_kind) ? 1.0 : 0.0;
    layers += static_cast<double>(last.executed_layers);
  }
  const double n = static_cast<double>(data.size());
  r.mean_ns = std::accumulate(r.per_example_ns.begin(), r.per_example_ns.end(), 0.0) / n;
  std::vector<double> sorted = r.per_example_ns;
  std::sort(sorted.begin(), sorted.end());
  r.median_ns = sorted.size() % 2 == 1 ? sorted[sorted.size() / 2]
                                       : 0.5 * (sorted[sorted.size() / 2 - 1] + sorted[sorted.size() / 2]);
  r.accuracy = hits / n;
  r.mean_layers = layers / n;
  return r;
}

double speedup_ratio(double base_mean_ns, double variant_mean_ns) {
  if (!(base_mean_ns > 0.0) || !(variant_mean_ns > 0.0))
    throw std::invalid_argument("speedup_ratio: latencies must be positive");
  return base_mean_ns / variant_mean_ns;
}

std::vector<double> layer_usage_histogram(std::span<const PlanTrace> traces) {
  if (traces.empty()) throw std::invalid_argument("layer_usage_histogram: no traces");
  const std::size_t num_layers = traces.front().actions.size();
  std::vector<double> freq(num_layers, 0.0);
  for (const auto& t : traces) {
    if (t.mode == PlanMode::soft) throw std::invalid_argument("layer_usage_histogram: soft traces have no discrete actions");
    if (t.actions.size() != num_layers) throw std::invalid_argument("layer_usage_histogram: ragged traces");
    for (std::size_t i = 0; i < num_layers; ++i) freq[i] += t.actions[i] == 1 ? 1.0 : 0.0;
  }
  for (auto& f : freq) f /= static_cast<double>(traces.size());
  return freq;
}

std::vector<PlanTrace> collect_traces(const Model& model, const DatasetSpec& data) {
  std::vector<PlanTrace> out;
  for (const auto& ex : data.examples)
    out.push_back(gated_forward(ex.tokens, model.backbone, model.gates, PlanMode::deterministic).trace);
  return out;
}

// ---------------------------------------------------------------------------
// Sweeps

namespace {

SweepPoint make_point(std::string method, double param, const EvalStats& s, std::size_t num_layers,
                      std::size_t gates) {
  SweepPoint p;
  p.method = std::move(method);
  p.param = param;
  p.mean_layers = s.mean_layers;
  p.layer_fraction = s.mean_layers / static_cast<double>(num_layers);
  p.gates = gates;
  p.accuracy = s.accuracy;
  p.mean_score = s.mean_score;
  p.easy_mean_layers = s.easy_mean_layers;
  p.hard_mean_layers = s.hard_mean_layers;
  return p;
}

}  // namespace

SweepResult sweep_target_rate(const Model& base, const DatasetSpec& train, const DatasetSpec& test,
                              const SweepConfig& config) {
  if (config.targets.size() < 2) throw std::invalid_argument("sweep: at least two target rates required");
  if (std::set<double>(config.targets.begin(), config.targets.end()).size() != config.targets.size())
    throw std::invalid_argument("sweep: duplicate target rates");
  const std::size_t num_layers = base.num_layers();

  SweepResult result;
  std::optional<double> full_ns;
  auto timed = [&](SweepPoint& p, const InferenceFn& fn) {
    if (!config.time_latency) return;
    const LatencyReport r = measure_latency(fn, test, config.warmup, config.repeats);
    p.mean_latency_ns = r.mean_ns;
    if (full_ns) {
      p.latency_fraction = r.mean_ns / *full_ns;
      p.speedup = speedup_ratio(*full_ns, r.mean_ns);
    }
  };

  {
    SweepPoint p = make_point("full", static_cast<double>(num_layers), evaluate(full_inference(base), test),
                              num_layers, 0);
    if (config.time_latency) {
      full_ns = measure_latency(full_inference(base), test, config.warmup, config.repeats).mean_ns;
      p.mean_latency_ns = full_ns;
      p.latency_fraction = 1.0;
      p.speedup = 1.0;
    }
    result.points.push_back(p);
  }

  for (double t : config.targets) {
    Model m = base;
    if (m.gates.size() != num_layers) m.gates = init_gates(m.config(), config.rl.seed ^ 0x9e3779b97f4a7c15ULL);
    stage2_init_gates(m, train, config.gate_optim);
    RLConfig rl = config.rl;
    rl.target_rate = t;
    train_rl(m, train, rl);
    const InferenceFn fn = planning_inference(m);
    SweepPoint p = make_point("dynamic-planning", t, evaluate(fn, test), num_layers, num_layers);
    timed(p, fn);
    result.points.push_back(p);
    result.models.push_back(std::move(m));
  }

  for (double threshold : config.thresholds) {
    const InferenceFn fn = early_exit_inference(base, ExitConfig{threshold, ExitOn::below});
    SweepPoint p = make_point("early-exit", threshold, evaluate(fn, test), num_layers, 0);
    timed(p, fn);
    result.points.push_back(p);
  }

  if (config.include_prefix) {
    for (std::size_t k = 1; k <= num_layers; ++k) {
      const InferenceFn fn = prefix_inference(base, k);
      SweepPoint p = make_point("fixed-prefix", static_cast<double>(k), evaluate(fn, test), num_layers, 0);
      timed(p, fn);
      result.points.push_back(p);
    }
  }

  sort_sweep(result.points);
  return result;
}

void sort_sweep(std::vector<SweepPoint>& points) {
  std::stable_sort(points.begin(), points.end(), [](const SweepPoint& a, const SweepPoint& b) {
    if (a.layer_fraction != b.layer_fraction) return a.layer_fraction < b.layer_fraction;
    if (a.method != b.method) return a.method < b.method;
    return a.param < b.param;
  });
}

std::string sweep_csv(std::span<const SweepPoint> points) {
  std::ostringstream os;
  os.precision(10);
  auto opt = [&os](const std::optional<double>& v) {
    if (v) os << *v;
  };
  os << "method,param,mean_layers,layer_fraction,gates,accuracy,mean_score,easy_mean_layers,hard_mean_layers,"
        "mean_latency_ns,latency_fraction,speedup\n";
  for (const auto& p : points) {
    os << p.method << ',' << p.param << ',' << p.mean_layers << ',' << p.layer_fraction << ',' << p.gates << ','
       << p.accuracy << ',';
    opt(p.mean_score);
    os << ',';
    opt(p.easy_mean_layers);
    os << ',';
    opt(p.hard_mean_layers);
    os << ',';
    opt(p.mean_latency_ns);
    os << ',';
    opt(p.latency_fraction);
    os << ',';
    opt(p.speedup);
    os << '\n';
  }
  return os.str();
}

std::vector<SweepPoint> filter_speedup_band(std::span<const SweepPoint> points, double lo, double hi) {
  std::vector<SweepPoint> out;
  for (const auto& p : points) {
    const double s = p.speedup ? *p.speedup : (p.layer_fraction > 0.0 ? 1.0 / p.layer_fraction : INFINITY);
    if (s >= lo && s <= hi) out.push_back(p);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Trace dumps

namespace {

json base_record(std::size_t example_id, const Example& ex, const Tensor& logits) {
  json j;
  j["example_id"] = example_id;
  j["text_a"] = ex.text_a;
  if (ex.text_b) j["text_b"] = *ex.text_b;
  j["label"] = ex.label;
  if (!ex.difficulty.empty()) j["difficulty"] = ex.difficulty;
  j["logits"] = std::vector<double>(logits.data().begin(), logits.data().end());
  return j;
}

void write_lines(const std::string& path, const std::vector<json>& records) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write traces to '" + path + "'");
  for (const auto& r : records) out << r.dump() << '\n';
  if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

}  // namespace

json trace_record(std::size_t example_id, const Example& example, const GatedOutput& out) {
  json j = base_record(example_id, example, out.logits);
  const auto layers = executed_layer_set(out.trace);
  j["scores"] = out.trace.scores;
  j["actions"] = out.trace.actions;
  j["executed_layers"] = layers;
  j["path"] = render_path(layers);
  return j;
}

json exit_trace_record(std::size_t example_id, const Example& example, const ExitOutput& out) {
  json j = base_record(example_id, example, out.logits);
  std::vector<std::size_t> layers(out.exit_layer);
  std::iota(layers.begin(), layers.end(), std::size_t{1});
  j["entropies"] = out.entropies;
  j["exit_layer"] = out.exit_layer;
  j["executed_layers"] = layers;
  j["path"] = render_path(layers);
  return j;
}

void dump_traces(const Model& model, const DatasetSpec& data, const std::string& path) {
  std::vector<json> records;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& ex = data.examples[i];
    records.push_back(
        trace_record(i, ex, gated_forward(ex.tokens, model.backbone, model.gates, PlanMode::deterministic)));
  }
  write_lines(path, records);
}

void dump_exit_traces(const Model& model, const DatasetSpec& data, const ExitConfig& config, const std::string& path) {
  std::vector<json> records;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& ex = data.examples[i];
    records.push_back(exit_trace_record(i, ex, early_exit_forward(ex.tokens, model.backbone, model.exit_heads, config)));
  }
  write_lines(path, records);
}

}  // namespace dynplan
