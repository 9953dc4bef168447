#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dynplan/bench.hpp"
#include "dynplan/config.hpp"
#include "support.hpp"

using namespace dynplan;
using testing::encoded_synthetic;
using testing::random_example;
using testing::tiny_config;

namespace {

DatasetSpec tiny_dataset(const ModelConfig& c, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  DatasetSpec d;
  d.label_names = {"0", "1"};
  for (std::size_t i = 0; i < n; ++i) {
    Example ex = random_example(rng, c);
    ex.difficulty = i % 2 == 0 ? "easy" : "hard";
    d.examples.push_back(ex);
  }
  return d;
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

}  // namespace

TEST_CASE("speedup ratio") {
  CHECK(speedup_ratio(100.0, 75.0) == doctest::Approx(4.0 / 3.0).epsilon(1e-15));
  CHECK(speedup_ratio(42.0, 42.0) == 1.0);
  CHECK_THROWS_AS(speedup_ratio(100.0, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(speedup_ratio(0.0, 10.0), std::invalid_argument);
}

TEST_CASE("measure latency contract") {
  const auto c = tiny_config(2, 8, 2);
  const Model m = make_model(c, 3);
  const auto data = tiny_dataset(c, 20, 4);
  CHECK_THROWS_AS(measure_latency(full_inference(m), DatasetSpec{}, 1, 3), std::invalid_argument);
  CHECK_THROWS_AS(measure_latency(full_inference(m), data, 1, 2), std::invalid_argument);

  LatencyReport r = measure_latency(full_inference(m), data, 2, 5);
  CHECK(r.per_example_ns.size() == data.size());
  CHECK(r.mean_layers == 2.0);
  CHECK(r.threads == 1);
  CHECK(r.repeats == 5);
  CHECK(r.warmup == 2);
  for (double ns : r.per_example_ns) CHECK(ns > 0.0);
  const EvalStats stats = evaluate(full_inference(m), data);
  CHECK(r.accuracy == stats.accuracy);

  CHECK(r.consistent());
  r.set_baseline(2.0 * r.mean_ns);
  CHECK(r.consistent());
  CHECK(*r.speedup == 2.0 * r.mean_ns / r.mean_ns);
  r.speedup = *r.speedup + 1e-9;
  CHECK_FALSE(r.consistent());
}

TEST_CASE("full backbone against itself stays in the noise band") {
  ModelConfig c = tiny_config(4, 32, 4);
  c.max_seq_len = 16;
  const Model m = make_model(c, 5);
  DatasetSpec data;
  data.label_names = {"0", "1"};
  Rng rng(6);
  for (int i = 0; i < 40; ++i) {
    Example ex;
    ex.tokens = testing::random_sequence(rng, c, 16);
    data.examples.push_back(ex);
  }
  std::vector<double> ratios;
  for (int pair = 0; pair < 5; ++pair) {
    const double a = measure_latency(full_inference(m), data).mean_ns;
    const double b = measure_latency(full_inference(m), data).mean_ns;
    ratios.push_back(speedup_ratio(a, b));
  }
  std::sort(ratios.begin(), ratios.end());
  CHECK(ratios[2] >= 0.97);
  CHECK(ratios[2] <= 1.03);
}

TEST_CASE("layer usage histogram") {
  PlanTrace all{{0.9, 0.9, 0.9}, {1, 1, 1}, PlanMode::deterministic};
  const std::vector<PlanTrace> full(5, all);
  CHECK(layer_usage_histogram(full) == std::vector<double>{1.0, 1.0, 1.0});

  std::vector<PlanTrace> alternating;
  for (int i = 0; i < 10; ++i) {
    const int a = i % 2;
    alternating.push_back({{0.5, 0.5}, {a, 1 - a}, PlanMode::sampled});
  }
  CHECK(layer_usage_histogram(alternating) == std::vector<double>{0.5, 0.5});

  Rng rng(7);
  std::vector<PlanTrace> random;
  std::vector<std::size_t> counts(6, 0);
  double total_layers = 0.0;
  for (int n = 0; n < 333; ++n) {
    PlanTrace t;
    for (std::size_t i = 0; i < 6; ++i) {
      const int a = rng.uniform() < 0.3 + 0.1 * static_cast<double>(i) ? 1 : 0;
      t.actions.push_back(a);
      t.scores.push_back(0.5);
      counts[i] += static_cast<std::size_t>(a);
      total_layers += a;
    }
    random.push_back(t);
  }
  const auto freq = layer_usage_histogram(random);
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK(freq[i] == static_cast<double>(counts[i]) / 333.0);
    CHECK(freq[i] >= 0.0);
    CHECK(freq[i] <= 1.0);
  }
  const double mean_freq = std::accumulate(freq.begin(), freq.end(), 0.0) / 6.0;
  CHECK(mean_freq == doctest::Approx(total_layers / 333.0 / 6.0).epsilon(1e-14));

  std::vector<PlanTrace> soft{{{0.3}, {1}, PlanMode::soft}};
  CHECK_THROWS_AS(layer_usage_histogram(soft), std::invalid_argument);
  CHECK_THROWS_AS(layer_usage_histogram(std::vector<PlanTrace>{}), std::invalid_argument);
  std::vector<PlanTrace> ragged{all, {{0.5}, {1}, PlanMode::deterministic}};
  CHECK_THROWS_AS(layer_usage_histogram(ragged), std::invalid_argument);
}

TEST_CASE("histogram mean matches evaluated mean layers") {
  const auto c = tiny_config(4, 8, 2);
  Model m = make_model(c, 8);
  const auto data = tiny_dataset(c, 50, 9);
  const auto traces = collect_traces(m, data);
  const auto freq = layer_usage_histogram(traces);
  const double mean_freq = std::accumulate(freq.begin(), freq.end(), 0.0) / 4.0;
  CHECK(mean_freq == doctest::Approx(evaluate(planning_inference(m), data).mean_layers / 4.0).epsilon(1e-14));
}

TEST_CASE("inference closures report executed layers") {
  const auto c = tiny_config(3, 8, 2);
  Model m = make_model(c, 10);
  m.exit_heads = init_exit_heads(c, 11);
  Rng rng(12);
  const Example ex = random_example(rng, c);
  CHECK(full_inference(m)(ex).executed_layers == 3);
  CHECK(forced_inference(m, {1, 0, 1})(ex).executed_layers == 2);
  CHECK(prefix_inference(m, 2)(ex).executed_layers == 2);
  CHECK(early_exit_inference(m, ExitConfig{0.0, ExitOn::below})(ex).executed_layers == 3);
  CHECK(planning_inference(m)(ex).mean_score.has_value());
  CHECK_FALSE(full_inference(m)(ex).mean_score.has_value());
  CHECK_THROWS_AS(prefix_inference(m, 0), std::invalid_argument);
  CHECK_THROWS_AS(prefix_inference(m, 4), std::invalid_argument);

  const Tensor full = full_inference(m)(ex).output;
  const Tensor forced = forced_inference(m, {1, 1, 1})(ex).output;
  CHECK(std::equal(full.data().begin(), full.data().end(), forced.data().begin(), forced.data().end()));
}

TEST_CASE("evaluate stratifies by difficulty") {
  const auto c = tiny_config(2, 8, 2);
  const Model m = make_model(c, 13);
  const auto data = tiny_dataset(c, 30, 14);
  const EvalStats s = evaluate(forced_inference(m, {1, 0}), data);
  CHECK(s.count == 30);
  CHECK(s.mean_layers == 1.0);
  REQUIRE(s.easy_mean_layers.has_value());
  CHECK(*s.easy_mean_layers == 1.0);
  CHECK(*s.hard_mean_layers == 1.0);
  std::size_t hits = 0;
  for (const auto& ex : data.examples) hits += correct(full_inference(m)(ex).output, ex.label, data.task_kind);
  CHECK(evaluate(full_inference(m), data).accuracy == static_cast<double>(hits) / 30.0);
}

TEST_CASE("sweep over target rates") {
  auto train = encoded_synthetic(SyntheticKind::easy_hard_mix, 48, 15, 12);
  auto test = gen_synthetic(SyntheticKind::easy_hard_mix, 24, 16);
  encode_dataset(test, 12, &train.vocab);
  ModelConfig c = tiny_config(3, 8, 2);
  c.vocab_size = train.vocab.size();
  c.max_seq_len = 12;
  Model base = make_model(c, 17);
  base.exit_heads = init_exit_heads(c, 18);

  SweepConfig cfg;
  cfg.targets = {1.0, 0.4};
  cfg.thresholds = {0.1, 0.6};
  cfg.rl.epochs = 1;
  cfg.rl.batch_size = 8;
  cfg.gate_optim.epochs = 1;
  cfg.gate_optim.batch_size = 8;
  cfg.rl.lambda2 = 50.0;
  cfg.gate_optim.learning_rate = 5e-2;
  cfg.rl.learning_rate = 5e-2;

  const SweepResult r = sweep_target_rate(base, train, test, cfg);
  CHECK(r.models.size() == 2);
  CHECK(r.points.size() == 1 + 2 + 2 + 3);
  for (std::size_t i = 1; i < r.points.size(); ++i) CHECK(r.points[i - 1].layer_fraction <= r.points[i].layer_fraction);
  std::multiset<double> ts;
  for (const auto& p : r.points)
    if (p.method == "dynamic-planning") ts.insert(p.param);
  CHECK(ts == std::multiset<double>{0.4, 1.0});

  const double full_acc = evaluate(full_inference(base), test).accuracy;
  for (const auto& p : r.points) {
    CHECK(p.layer_fraction == doctest::Approx(p.mean_layers / 3.0));
    if (p.method == "dynamic-planning" && p.param == 1.0) {
      CHECK(p.layer_fraction == 1.0);
      CHECK(p.gates == 3);
      CHECK(p.accuracy == full_acc);
    }
    if (p.method == "full") CHECK(p.accuracy == full_acc);
  }
  const std::string csv = sweep_csv(r.points);
  CHECK(csv.rfind("method,param,mean_layers,layer_fraction,gates,accuracy,", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == static_cast<long>(r.points.size() + 1));

  SweepConfig bad = cfg;
  bad.targets = {0.4};
  CHECK_THROWS_AS(sweep_target_rate(base, train, test, bad), std::invalid_argument);
  bad.targets = {0.4, 0.4};
  CHECK_THROWS_AS(sweep_target_rate(base, train, test, bad), std::invalid_argument);
}

TEST_CASE("speedup band filter") {
  std::vector<SweepPoint> pts(4);
  pts[0].layer_fraction = 1.0;
  pts[1].layer_fraction = 0.7;
  pts[2].layer_fraction = 0.5;
  pts[3].layer_fraction = 0.5;
  pts[3].speedup = 1.5;
  const auto kept = filter_speedup_band(pts);
  REQUIRE(kept.size() == 2);
  CHECK(kept[0].layer_fraction == 0.7);
  CHECK(*kept[1].speedup == 1.5);
  CHECK(filter_speedup_band(pts, 1.0, 2.0).size() == 4);
}

TEST_CASE("sweep ordering is deterministic") {
  std::vector<SweepPoint> pts(3);
  auto point = [](std::string method, double param, double fraction) {
    SweepPoint p;
    p.method = std::move(method);
    p.param = param;
    p.layer_fraction = fraction;
    return p;
  };
  pts[0] = point("fixed-prefix", 3, 0.5);
  pts[1] = point("dynamic-planning", 0.4, 0.5);
  pts[2] = point("early-exit", 0.2, 0.25);
  sort_sweep(pts);
  CHECK(pts[0].method == "early-exit");
  CHECK(pts[1].method == "dynamic-planning");
  CHECK(pts[2].method == "fixed-prefix");
}

TEST_CASE("trace dumps") {
  ModelConfig c = tiny_config(6, 8, 2);
  Model m = make_model(c, 19);
  m.exit_heads = init_exit_heads(c, 20);
  Rng rng(21);
  Example ex = random_example(rng, c);
  ex.text_a = "w1 mark w2";
  ex.difficulty = "easy";

  const auto all = gated_forward(ex.tokens, m.backbone, m.gates, PlanMode::forced, nullptr,
                                 std::vector<int>{1, 1, 1, 1, 1, 1});
  const auto rec = trace_record(7, ex, all);
  CHECK(rec["path"] == "1 2 3 4 5 6");
  CHECK(rec["example_id"] == 7);
  CHECK(rec["difficulty"] == "easy");
  CHECK(rec["text_a"] == "w1 mark w2");
  CHECK(rec["executed_layers"].size() == 6);

  const auto none = gated_forward(ex.tokens, m.backbone, m.gates, PlanMode::forced, nullptr,
                                  std::vector<int>{0, 0, 0, 0, 0, 0});
  CHECK(trace_record(0, ex, none)["path"] == "");
  const auto some = gated_forward(ex.tokens, m.backbone, m.gates, PlanMode::forced, nullptr,
                                  std::vector<int>{1, 0, 1, 1, 0, 1});
  CHECK(trace_record(0, ex, some)["path"] == "1 3 4 6");

  const auto exit = early_exit_forward(ex.tokens, m.backbone, m.exit_heads, ExitConfig{10.0, ExitOn::below});
  const auto erec = exit_trace_record(0, ex, exit);
  CHECK(erec["exit_layer"] == 1);
  CHECK(erec["path"] == "1");

  const auto dir = std::filesystem::temp_directory_path();
  DatasetSpec data = tiny_dataset(c, 5, 22);
  const std::string path = (dir / "dynplan_traces.jsonl").string();
  dump_traces(m, data, path);
  const auto lines = read_lines(path);
  REQUIRE(lines.size() == 5);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const auto j = nlohmann::json::parse(lines[i]);
    CHECK(j["example_id"] == i);
    CHECK(j["scores"].size() == 6);
    CHECK(j.contains("difficulty"));
  }
  dump_exit_traces(m, data, ExitConfig{0.0, ExitOn::below}, path);
  for (const auto& line : read_lines(path)) CHECK(nlohmann::json::parse(line)["path"] == "1 2 3 4 5 6");
  std::filesystem::remove(path);

  const std::string bad = (dir / "no-such-dir" / "traces.jsonl").string();
  CHECK_THROWS_WITH_AS(dump_traces(m, data, bad), doctest::Contains("no-such-dir"), std::runtime_error);
}

TEST_CASE("settings parsing") {
  Settings s = Settings::parse("# comment\nmodel.num_layers = 4\n\nrl.beta=2.5\nrl.targets=0.4,0.7\n");
  CHECK(s.get("model.num_layers", std::size_t{0}) == 4);
  CHECK(s.get("rl.beta", 0.0) == 2.5);
  CHECK(s.get("missing", 1.5) == 1.5);
  CHECK(s.get_list("rl.targets", {}) == std::vector<double>{0.4, 0.7});
  s.set("rl.beta=3");
  CHECK(s.get("rl.beta", 0.0) == 3.0);
  CHECK_THROWS_AS(s.set("no-equals-sign"), std::invalid_argument);
  CHECK_THROWS_AS(Settings::parse("just words\n"), std::invalid_argument);
  CHECK_THROWS_AS(s.get("rl.targets", 0.0), std::invalid_argument);

  CHECK_NOTHROW(Settings::parse("rl.beta=1\nexit.threshold=0.3\n").check_known(known_setting_keys()));
  CHECK_THROWS_WITH_AS(Settings::parse("rl.bta=1\n").check_known(known_setting_keys()), doctest::Contains("rl.bta"),
                       std::invalid_argument);

  const RLConfig rl = rl_config_from(Settings::parse("rl.beta=7\nrl.lambda1=0.25\nrl.target_rate=0.7\n"));
  CHECK(rl.beta == 7.0);
  CHECK(rl.lambda1 == 0.25);
  CHECK(rl.target_rate == 0.7);
  CHECK(rl.lambda2 == RLConfig{}.lambda2);
  const ExitConfig ec = exit_config_from(Settings::parse("exit.threshold=0.2\nexit.exit_on=above\n"));
  CHECK(ec.entropy_threshold == 0.2);
  CHECK(ec.exit_on == ExitOn::above);
  CHECK(parse_double_list("1, 2.5,3") == std::vector<double>{1.0, 2.5, 3.0});
  CHECK_THROWS_AS(parse_double_list("1,x"), std::invalid_argument);
}
