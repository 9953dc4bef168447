#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dynplan/data.hpp"
#include "dynplan/early_exit.hpp"
#include "dynplan/model.hpp"
#include "dynplan/planning.hpp"
#include "dynplan/training.hpp"

namespace dynplan {

struct InferenceOutcome {
  Tensor output;
  std::size_t executed_layers = 0;
  std::optional<double> mean_score;  // planning variants only
};

using InferenceFn = std::function<InferenceOutcome(const Example&)>;

// Batch-size-1 inference closures over a read-only model.
InferenceFn full_inference(const Model& model);
InferenceFn planning_inference(const Model& model);
InferenceFn forced_inference(const Model& model, std::vector<int> actions);
InferenceFn early_exit_inference(const Model& model, ExitConfig config);
// First k layers, then exit head k.
InferenceFn prefix_inference(const Model& model, std::size_t k);

struct EvalStats {
  std::size_t count = 0;
  double accuracy = 0.0;
  double mean_layers = 0.0;
  std::optional<double> mean_score;
  std::optional<double> easy_mean_layers;
  std::optional<double> hard_mean_layers;
  std::optional<double> easy_accuracy;
  std::optional<double> hard_accuracy;
};

EvalStats evaluate(const InferenceFn& infer, const DatasetSpec& data);

struct LatencyReport {
  std::vector<double> per_example_ns;  // median over repeats
  double mean_ns = 0.0;
  double median_ns = 0.0;
  double accuracy = 0.0;
  double mean_layers = 0.0;
  std::size_t warmup = 0;
  std::size_t repeats = 0;
  std::size_t threads = 1;
  std::optional<double> base_mean_ns;
  std::optional<double> speedup;

  void set_baseline(double base_mean);
  // speedup == base_mean_ns / mean_ns exactly.
  bool consistent() const;
};

// Each example runs warmup + repeats times back to back; the warmup runs are
// discarded and the per-example median of the rest is kept.
LatencyReport measure_latency(const InferenceFn& infer, const DatasetSpec& data, std::size_t warmup = 5,
                              std::size_t repeats = 7);

double speedup_ratio(double base_mean_ns, double variant_mean_ns);

// freq[i] = fraction of traces with a^{i+1} = 1.
std::vector<double> layer_usage_histogram(std::span<const PlanTrace> traces);

std::vector<PlanTrace> collect_traces(const Model& model, const DatasetSpec& data);

struct SweepConfig {
  std::vector<double> targets;
  std::vector<double> thresholds;
  RLConfig rl;
  OptimConfig gate_optim;
  bool include_prefix = true;
  bool time_latency = false;
  std::size_t warmup = 5;
  std::size_t repeats = 7;
};

struct SweepPoint {
  std::string method;  // full, dynamic-planning, early-exit, fixed-prefix
  double param = 0.0;  // t, entropy threshold or prefix length
  double mean_layers = 0.0;
  double layer_fraction = 0.0;
  std::size_t gates = 0;
  double accuracy = 0.0;
  std::optional<double> mean_score;
  std::optional<double> easy_mean_layers;
  std::optional<double> hard_mean_layers;
  std::optional<double> mean_latency_ns;
  std::optional<double> latency_fraction;
  std::optional<double> speedup;
};

struct SweepResult {
  std::vector<SweepPoint> points;  // sorted by layer fraction
  std::vector<Model> models;       // one per target, in input order
};

// `base` carries a stage-1 backbone (and exit heads when thresholds or
// prefixes are requested). Each target gets its own copy trained through
// gate-init and joint training.
SweepResult sweep_target_rate(const Model& base, const DatasetSpec& train, const DatasetSpec& test,
                              const SweepConfig& config);

void sort_sweep(std::vector<SweepPoint>& points);
std::string sweep_csv(std::span<const SweepPoint> points);
// Keeps points whose speedup (measured, or 1 / layer_fraction without timing)
// lies in [lo, hi].
std::vector<SweepPoint> filter_speedup_band(std::span<const SweepPoint> points, double lo = 1.30, double hi = 1.96);

nlohmann::json trace_record(std::size_t example_id, const Example& example, const GatedOutput& out);
nlohmann::json exit_trace_record(std::size_t example_id, const Example& example, const ExitOutput& out);

void dump_traces(const Model& model, const DatasetSpec& data, const std::string& path);
void dump_exit_traces(const Model& model, const DatasetSpec& data, const ExitConfig& config, const std::string& path);

}  // namespace dynplan
