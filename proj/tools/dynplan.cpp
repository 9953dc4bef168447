// Command-line front end: data generation, the training stages, evaluation,
// latency benchmarks, target-rate sweeps and trace dumps.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dynplan/bench.hpp"
#include "dynplan/config.hpp"
#include "dynplan/data.hpp"
#include "dynplan/early_exit.hpp"
#include "dynplan/model.hpp"
#include "dynplan/training.hpp"

using namespace dynplan;
using nlohmann::json;

namespace {

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;

  Settings settings() const {
    Settings s = config_path.empty() ? Settings{} : Settings::load(config_path);
    for (const auto& o : overrides) s.set(o);
    s.check_known(known_setting_keys());
    return s;
  }
};

void add_common(CLI::App* cmd, Common& common) {
  cmd->add_option("--config", common.config_path, "key=value settings file");
  cmd->add_option("--set", common.overrides, "override a setting, key=value (repeatable)");
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out << text;
  if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

struct Loaded {
  Model model;
  CheckpointMeta meta;
};

Loaded load(const std::string& path) {
  Loaded l;
  l.model = load_model(path, &l.meta);
  return l;
}

DatasetSpec load_with_meta(const std::string& path, const Loaded& l) {
  LoadOptions opts;
  opts.task_kind = l.meta.task_kind;
  opts.max_seq_len = l.model.config().max_seq_len;
  opts.vocab = l.meta.vocab;
  if (l.meta.task_kind != TaskKind::regression) opts.label_names = l.meta.label_names;
  return load_dataset(path, opts);
}

void save(const std::string& path, const Loaded& l) { save_model(path, l.model, l.meta); }

InferenceFn inference_for(const std::string& mode, const Model& model, const Settings& s, std::size_t k) {
  if (mode == "planning") return planning_inference(model);
  if (mode == "full") return full_inference(model);
  if (mode == "early-exit") return early_exit_inference(model, exit_config_from(s));
  if (mode == "prefix") return prefix_inference(model, k);
  throw std::invalid_argument("unknown mode '" + mode + "' (planning, full, early-exit, prefix)");
}

std::string opt_str(const std::optional<double>& v) {
  if (!v) return "";
  std::ostringstream os;
  os.precision(10);
  os << *v;
  return os.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dynamic layer planning for a small transformer encoder"};
  app.require_subcommand(1);
  std::string active = "dynplan";

  // gen-data
  Common gen_common;
  std::string gen_kind = "easy-hard-mix", gen_out;
  std::size_t gen_size = 10000;
  std::uint64_t gen_seed = 0;
  auto* gen = app.add_subcommand("gen-data", "write a synthetic JSONL dataset");
  gen->add_option("--kind", gen_kind, "easy-hard-mix | keyword-count | pair-overlap");
  gen->add_option("--size", gen_size);
  gen->add_option("--seed", gen_seed);
  gen->add_option("--out", gen_out)->required();

  // train-backbone
  Common tb_common;
  std::string tb_train, tb_out, tb_log, tb_task = "classification";
  auto* tb = app.add_subcommand("train-backbone", "stage 1: fine-tune a fresh backbone");
  add_common(tb, tb_common);
  tb->add_option("--train", tb_train)->required();
  tb->add_option("--task", tb_task, "classification | regression | pair-classification");
  tb->add_option("--out", tb_out)->required();
  tb->add_option("--log", tb_log, "training log CSV");

  // stage commands sharing --model/--train/--out/--log
  struct StageArgs {
    Common common;
    std::string model, train, out, log;
  };
  auto add_stage = [&](const std::string& name, const std::string& help, StageArgs& a) {
    auto* cmd = app.add_subcommand(name, help);
    add_common(cmd, a.common);
    cmd->add_option("--model", a.model)->required();
    cmd->add_option("--train", a.train)->required();
    cmd->add_option("--out", a.out)->required();
    cmd->add_option("--log", a.log, "training log CSV");
    return cmd;
  };
  StageArgs ig_args, rl_args, soft_args, ex_args;
  auto* ig = add_stage("init-gates", "stage 2: gate initialization under soft relaxation", ig_args);
  auto* rl = add_stage("train-rl", "stage 3: joint training with policy gradients", rl_args);
  auto* soft = add_stage("train-soft", "soft-relaxed joint training (ablation)", soft_args);
  auto* ex = add_stage("train-exit", "train early-exit heads on a frozen backbone", ex_args);

  // eval / bench
  struct EvalArgs {
    Common common;
    std::string model, data, out, mode = "planning";
    std::size_t k = 1;
  };
  EvalArgs ev_args, bn_args;
  auto add_eval = [&](const std::string& name, const std::string& help, EvalArgs& a) {
    auto* cmd = app.add_subcommand(name, help);
    add_common(cmd, a.common);
    cmd->add_option("--model", a.model)->required();
    cmd->add_option("--data", a.data)->required();
    cmd->add_option("--mode", a.mode, "planning | full | early-exit | prefix");
    cmd->add_option("--k", a.k, "prefix length for --mode prefix");
    cmd->add_option("--out", a.out, "metrics CSV (stdout when omitted)");
    return cmd;
  };
  auto* ev = add_eval("eval", "accuracy and executed layers", ev_args);
  auto* bn = add_eval("bench", "per-example latency against the full backbone", bn_args);

  // sweep
  Common sw_common;
  std::string sw_model, sw_train, sw_test, sw_out, sw_targets = "0.2,0.4,0.6,0.8,1.0",
                                                   sw_thresholds = "0.05,0.1,0.2,0.3,0.4,0.5,0.6,0.7";
  bool sw_band = false, sw_time = false;
  auto* sw = app.add_subcommand("sweep", "target-rate sweep with early-exit and fixed-prefix baselines");
  add_common(sw, sw_common);
  sw->add_option("--model", sw_model, "stage-1 checkpoint with exit heads")->required();
  sw->add_option("--train", sw_train)->required();
  sw->add_option("--test", sw_test)->required();
  sw->add_option("--targets", sw_targets);
  sw->add_option("--thresholds", sw_thresholds);
  sw->add_flag("--time", sw_time, "measure latency for every point");
  sw->add_flag("--band", sw_band, "keep only points with speedup in [1.30, 1.96]");
  sw->add_option("--out", sw_out)->required();

  // dump-traces
  Common dt_common;
  std::string dt_model, dt_data, dt_out;
  bool dt_exit = false;
  auto* dt = app.add_subcommand("dump-traces", "per-example computational paths as JSONL");
  add_common(dt, dt_common);
  dt->add_option("--model", dt_model)->required();
  dt->add_option("--data", dt_data)->required();
  dt->add_option("--out", dt_out)->required();
  dt->add_flag("--early-exit", dt_exit, "trace the early-exit heads instead of the gates");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << json{{"error", e.what()}, {"command", "parse"}}.dump() << '\n';
    return 2;
  }

  try {
    if (*gen) {
      active = "gen-data";
      DatasetSpec d = gen_synthetic(parse_synthetic_kind(gen_kind), gen_size, gen_seed);
      write_dataset(d, gen_out);
      std::cout << "wrote " << d.size() << " examples to " << gen_out << '\n';
    } else if (*tb) {
      active = "train-backbone";
      const Settings s = tb_common.settings();
      LoadOptions opts;
      opts.task_kind = parse_task_kind(tb_task);
      opts.max_seq_len = s.get("data.max_seq_len", std::size_t{16});
      DatasetSpec data = load_dataset(tb_train, opts);
      ModelConfig cfg = model_config_from(s);
      cfg.vocab_size = data.vocab.size();
      cfg.num_classes = data.num_classes();
      Loaded l;
      l.model = make_model(cfg, s.get("model.seed", std::size_t{0}));
      l.meta.vocab = data.vocab;
      l.meta.label_names = data.label_names;
      l.meta.task_kind = data.task_kind;
      TrainingLog log;
      const TrainSummary sum = stage1_finetune_backbone(l.model, data, optim_config_from(s, "optim"), &log);
      save(tb_out, l);
      if (!tb_log.empty()) log.write_csv(tb_log);
      std::cout << "steps " << sum.steps << " loss " << sum.final_loss << " acc " << sum.final_accuracy << '\n';
    } else if (*ig || *rl || *soft || *ex) {
      StageArgs& a = *ig ? ig_args : *rl ? rl_args : *soft ? soft_args : ex_args;
      active = *ig ? "init-gates" : *rl ? "train-rl" : *soft ? "train-soft" : "train-exit";
      const Settings s = a.common.settings();
      Loaded l = load(a.model);
      DatasetSpec data = load_with_meta(a.train, l);
      TrainingLog log;
      TrainSummary sum;
      if (*ig) {
        sum = stage2_init_gates(l.model, data, optim_config_from(s, "gate", OptimConfig{1e-3}));
      } else if (*rl || *soft) {
        const RLConfig cfg = rl_config_from(s);
        sum = *rl ? train_rl(l.model, data, cfg, &log) : train_soft_ablation(l.model, data, cfg, &log);
        l.meta.extra["rl"] = rl_config_to_json(cfg);
      } else {
        sum = train_exit_heads(l.model, data, optim_config_from(s, "exit_train"), &log);
      }
      save(a.out, l);
      if (!a.log.empty()) log.write_csv(a.log);
      std::cout << "steps " << sum.steps << " loss " << sum.final_loss << " acc " << sum.final_accuracy << '\n';
    } else if (*ev || *bn) {
      EvalArgs& a = *ev ? ev_args : bn_args;
      active = *ev ? "eval" : "bench";
      const Settings s = a.common.settings();
      Loaded l = load(a.model);
      DatasetSpec data = load_with_meta(a.data, l);
      const InferenceFn fn = inference_for(a.mode, l.model, s, a.k);
      std::ostringstream os;
      os.precision(10);
      if (*ev) {
        const EvalStats st = evaluate(fn, data);
        os << "mode,count,accuracy,mean_layers,mean_score,easy_mean_layers,hard_mean_layers,easy_accuracy,"
              "hard_accuracy\n"
           << a.mode << ',' << st.count << ',' << st.accuracy << ',' << st.mean_layers << ','
           << opt_str(st.mean_score) << ',' << opt_str(st.easy_mean_layers) << ',' << opt_str(st.hard_mean_layers)
           << ',' << opt_str(st.easy_accuracy) << ',' << opt_str(st.hard_accuracy) << '\n';
      } else {
        const std::size_t warmup = s.get("bench.warmup", std::size_t{5});
        const std::size_t repeats = s.get("bench.repeats", std::size_t{7});
        const LatencyReport base = measure_latency(full_inference(l.model), data, warmup, repeats);
        LatencyReport r = measure_latency(fn, data, warmup, repeats);
        r.set_baseline(base.mean_ns);
        os << "mode,count,accuracy,mean_layers,mean_ns,median_ns,base_mean_ns,speedup,warmup,repeats,threads\n"
           << a.mode << ',' << data.size() << ',' << r.accuracy << ',' << r.mean_layers << ',' << r.mean_ns << ','
           << r.median_ns << ',' << *r.base_mean_ns << ',' << *r.speedup << ',' << r.warmup << ',' << r.repeats
           << ',' << r.threads << '\n';
      }
      if (a.out.empty()) std::cout << os.str();
      else write_text(a.out, os.str());
    } else if (*sw) {
      active = "sweep";
      const Settings s = sw_common.settings();
      Loaded l = load(sw_model);
      DatasetSpec train = load_with_meta(sw_train, l);
      DatasetSpec test = load_with_meta(sw_test, l);
      SweepConfig cfg;
      cfg.targets = parse_double_list(sw_targets);
      cfg.thresholds = parse_double_list(sw_thresholds);
      cfg.rl = rl_config_from(s);
      cfg.gate_optim = optim_config_from(s, "gate", OptimConfig{1e-3});
      cfg.time_latency = sw_time;
      cfg.warmup = s.get("bench.warmup", std::size_t{5});
      cfg.repeats = s.get("bench.repeats", std::size_t{7});
      if (l.model.exit_heads.size() != l.model.num_layers())
        train_exit_heads(l.model, train, optim_config_from(s, "exit_train"));
      SweepResult result = sweep_target_rate(l.model, train, test, cfg);
      const auto points = sw_band ? filter_speedup_band(result.points) : result.points;
      write_text(sw_out, sweep_csv(points));
      std::cout << "wrote " << points.size() << " points to " << sw_out << '\n';
    } else if (*dt) {
      active = "dump-traces";
      const Settings s = dt_common.settings();
      Loaded l = load(dt_model);
      DatasetSpec data = load_with_meta(dt_data, l);
      if (dt_exit) dump_exit_traces(l.model, data, exit_config_from(s), dt_out);
      else dump_traces(l.model, data, dt_out);
      std::cout << "wrote " << data.size() << " traces to " << dt_out << '\n';
    }
  } catch (const std::exception& e) {
    std::cerr << json{{"error", e.what()}, {"command", active}}.dump() << '\n';
    return 1;
  }
  return 0;
}
