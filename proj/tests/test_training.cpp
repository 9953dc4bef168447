#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "dynplan/training.hpp"
#include "support.hpp"

using namespace dynplan;
using testing::random_example;
using testing::tiny_config;

namespace {

std::vector<int> bits(unsigned mask, std::size_t n) {
  std::vector<int> a(n);
  for (std::size_t i = 0; i < n; ++i) a[i] = (mask >> i) & 1U;
  return a;
}

DatasetSpec random_dataset(Rng& rng, const ModelConfig& c, std::size_t n) {
  DatasetSpec d;
  d.label_names = {"0", "1"};
  for (std::size_t i = 0; i < n; ++i) d.examples.push_back(random_example(rng, c));
  return d;
}

std::vector<const Example*> pointers(const DatasetSpec& d) {
  std::vector<const Example*> out;
  for (const auto& e : d.examples) out.push_back(&e);
  return out;
}

std::vector<Tensor> snapshot(const Model& m) {
  std::vector<Tensor> out;
  for_each_param(m, [&](const std::string&, const Tensor& t) { out.push_back(t); });
  return out;
}

bool identical(const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!a[i].bitwise_equal(b[i])) return false;
  return true;
}

double mean_gate_score(const Model& m, const DatasetSpec& d, std::size_t gate) {
  double total = 0.0;
  for (const auto& ex : d.examples)
    total += gated_forward(ex.tokens, m.backbone, m.gates, PlanMode::soft).trace.scores[gate];
  return total / static_cast<double>(d.size());
}

}  // namespace

TEST_CASE("task_loss") {
  CHECK(task_loss(Tensor::row({0.0, 0.0}), 0, TaskKind::classification).item() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(task_loss(Tensor::scalar(1.5), 1.5, TaskKind::regression).item() == 0.0);
  const double want = -std::log(std::exp(-1.0) / (std::exp(2.0) + std::exp(-1.0)));
  CHECK(task_loss(Tensor::row({2.0, -1.0}), 1, TaskKind::classification).item() == doctest::Approx(want).epsilon(1e-14));
  CHECK(want == doctest::Approx(3.04858735157).epsilon(1e-10));
  CHECK_THROWS_AS((void)task_loss(Tensor::row({0.0, 0.0}), 2, TaskKind::classification), std::invalid_argument);
  CHECK_THROWS_AS((void)task_loss(Tensor::row({0.0, 0.0}), -1, TaskKind::classification), std::invalid_argument);
}

TEST_CASE("AdamW first step matches the closed form") {
  Model m = make_model(tiny_config(1, 4, 1), 1);
  OptimConfig cfg;
  cfg.learning_rate = 0.01;
  cfg.weight_decay = 0.1;
  AdamW opt(cfg);
  const Tensor before = m.backbone.classifier.bias;
  GradientBuffer g;
  g["classifier.bias"] = {0.5, -2.0};
  opt.step(m, g);
  for (std::size_t i = 0; i < 2; ++i) {
    const double gi = g["classifier.bias"][i];
    const double theta = before.data()[i];
    const double want = theta - 0.01 * (gi / (std::abs(gi) + 1e-8) + 0.1 * theta);
    CHECK(m.backbone.classifier.bias.data()[i] == doctest::Approx(want).epsilon(1e-12));
  }
  GradientBuffer bad;
  bad["layers.0.ffn.w1"] = std::vector<double>(m.backbone.layers[0].w1.size(), 0.0);
  bad["layers.0.ffn.w1"][3] = std::nan("");
  try {
    opt.step(m, bad);
    FAIL("expected NaN rejection");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("layers.0.ffn.w1") != std::string::npos);
  }
}

TEST_CASE("stage states freeze the right parameters") {
  const Model m = make_model(tiny_config(2), 1);
  const StageState gi = make_stage_state(Stage::gate_init, m, {});
  for_each_param(m, [&](const std::string& p, const Tensor&) {
    CHECK(gi.trainable(p) == is_gate_param(p));
  });
  const StageState s1 = make_stage_state(Stage::backbone_finetune, m, {});
  CHECK(s1.trainable("layers.1.attn.wq"));
  CHECK_FALSE(s1.trainable("gates.0.bias"));
}

TEST_CASE("stage 1") {
  const ModelConfig c = tiny_config(2, 8, 2);
  Rng rng(2);
  SUBCASE("memorizes a single example") {
    DatasetSpec d = random_dataset(rng, c, 1);
    Model m = make_model(c, 3);
    OptimConfig o;
    o.learning_rate = 1e-2;
    o.batch_size = 1;
    o.epochs = 200;
    const TrainSummary s = stage1_finetune_backbone(m, d, o);
    CHECK(s.steps == 200);
    CHECK(s.final_loss < 0.01);
  }
  SUBCASE("zero learning rate leaves parameters bit-identical") {
    DatasetSpec d = random_dataset(rng, c, 8);
    Model m = make_model(c, 3);
    const auto before = snapshot(m);
    OptimConfig o;
    o.learning_rate = 0.0;
    o.epochs = 2;
    stage1_finetune_backbone(m, d, o);
    CHECK(identical(before, snapshot(m)));
  }
  SUBCASE("separable task reaches 99% train accuracy") {
    DatasetSpec all = gen_synthetic(SyntheticKind::easy_hard_mix, 800, 4);
    DatasetSpec easy = all;
    easy.examples.clear();
    for (const auto& e : all.examples)
      if (e.difficulty == "easy") easy.examples.push_back(e);
    encode_dataset(easy, 16);
    ModelConfig ec = tiny_config(2, 16, 2);
    ec.vocab_size = easy.vocab.size();
    ec.max_seq_len = 16;
    Model m = make_model(ec, 5);
    OptimConfig o;
    o.learning_rate = 3e-3;
    o.epochs = 5;
    stage1_finetune_backbone(m, easy, o);
    std::size_t hits = 0;
    for (const auto& e : easy.examples)
      hits += correct(full_forward(e.tokens, m.backbone), e.label, TaskKind::classification) ? 1 : 0;
    CHECK(static_cast<double>(hits) / static_cast<double>(easy.size()) >= 0.99);
  }
  SUBCASE("empty dataset is rejected") {
    Model m = make_model(c, 3);
    CHECK_THROWS_AS(stage1_finetune_backbone(m, DatasetSpec{}, {}), std::invalid_argument);
  }
}

TEST_CASE("stage 2") {
  const ModelConfig c = tiny_config(2, 8, 2);
  Rng rng(3);
  DatasetSpec d = random_dataset(rng, c, 16);
  SUBCASE("zero learning rate leaves gates unchanged; backbone hash is invariant") {
    Model m = make_model(c, 4);
    const auto before = snapshot(m);
    const auto hash = parameter_hash(m.backbone);
    OptimConfig o;
    o.learning_rate = 0.0;
    stage2_init_gates(m, d, o);
    CHECK(identical(before, snapshot(m)));
    o.learning_rate = 1e-2;
    stage2_init_gates(m, d, o);
    CHECK(parameter_hash(m.backbone) == hash);
    CHECK_FALSE(identical(before, snapshot(m)));
  }
  SUBCASE("a harmful layer loses gate mass") {
    DatasetSpec task = gen_synthetic(SyntheticKind::easy_hard_mix, 400, 6);
    encode_dataset(task, 16);
    ModelConfig one = tiny_config(1, 16, 2);
    one.vocab_size = task.vocab.size();
    one.max_seq_len = 16;
    Model base = make_model(one, 7);
    OptimConfig o1;
    o1.learning_rate = 1e-3;
    o1.epochs = 3;
    stage1_finetune_backbone(base, task, o1);

    ModelConfig two = one;
    two.num_layers = 2;
    Model m = make_model(two, 8);
    m.backbone.word_emb = base.backbone.word_emb;
    m.backbone.pos_emb = base.backbone.pos_emb;
    m.backbone.seg_emb = base.backbone.seg_emb;
    m.backbone.classifier = base.backbone.classifier;
    // Layer 1 stays the trained one; layer 2 is random and sits at the top.
    m.backbone.layers[0] = base.backbone.layers[0];
    TransformerLayer noise = init_layer(two.d_model, two.d_ff, 99);
    Rng scramble(100);
    for (Tensor* t : {&noise.wq, &noise.wk, &noise.wv, &noise.wo, &noise.w1, &noise.w2})
      *t = testing::random_tensor(scramble, t->shape(), 3.0);
    m.backbone.layers[1] = noise;

    double with = 0.0, without = 0.0;
    for (const auto& ex : task.examples) {
      with += task_loss_value(gated_forward(ex.tokens, m.backbone, m.gates, PlanMode::forced, nullptr,
                                            std::vector<int>{1, 1}).logits, ex.label, task.task_kind);
      without += task_loss_value(gated_forward(ex.tokens, m.backbone, m.gates, PlanMode::forced, nullptr,
                                               std::vector<int>{1, 0}).logits, ex.label, task.task_kind);
    }
    REQUIRE(with > without);

    const double before = mean_gate_score(m, task, 1);
    OptimConfig o2;
    o2.learning_rate = 1e-2;
    o2.epochs = 2;
    stage2_init_gates(m, task, o2);
    CHECK(mean_gate_score(m, task, 1) < before);
  }
}

TEST_CASE("reward arithmetic examples") {
  const std::vector<double> costs(4, 1.0);
  const std::vector<int> all_on(4, 1), all_off(4, 0), alt = {1, 0, 1, 0};
  for (std::size_t i = 1; i <= 4; ++i) CHECK(layer_return(all_on, costs, i) == 0.0);
  CHECK(layer_return(all_off, costs, 1) == 1.0);
  CHECK(layer_return(all_off, costs, 3) == 0.5);
  CHECK(layer_return(alt, costs, 1) == 0.5);
  CHECK(layer_return(alt, costs, 4) == 0.25);
  CHECK_THROWS_AS((void)layer_return(alt, costs, 0), std::invalid_argument);

  for (std::size_t i = 1; i <= 4; ++i) CHECK(reward(all_on, costs, 0.7, 0.0, i) == 0.0);
  CHECK(reward(alt, costs, 0.2, 5.0, 1) == doctest::Approx(-0.5).epsilon(1e-15));
  CHECK(reward(alt, costs, 0.0, 5.0, 2) == layer_return(alt, costs, 2));

  CHECK(execution_rate_mu(std::vector<double>(12, 0.5)) == 0.5);
  CHECK(execution_rate_mu(std::vector<double>(5, 1.0)) == 1.0);
  CHECK(execution_rate_mu(std::vector<double>{0.2, 0.4, 0.9}) == doctest::Approx(0.5).epsilon(1e-15));

  CHECK(rate_penalty(0.4, 0.4) == 0.0);
  CHECK(rate_penalty(0.6, 0.4) == doctest::Approx(0.04).epsilon(1e-13));
  CHECK(rate_penalty(0.4 + 0.125, 0.4) == rate_penalty(0.4 - 0.125, 0.4));

  CHECK(rl_objective(0.3, std::vector<double>{1.0, 2.0}, 0.5, 0.0, 0.0) == 0.3);
  CHECK(rl_objective(0.2, std::vector<double>{-1.0, -1.0}, 0.04, 0.5, 1.0) == doctest::Approx(1.24).epsilon(1e-14));
  const std::vector<double> zero_r(4, 0.0);
  CHECK(rl_objective(0.9, zero_r, rate_penalty(0.5, 0.5), 0.5, 1.0) == 0.9);
}

TEST_CASE("policy credits equal the return total minus earlier savings") {
  Rng rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng.below(6);
    std::vector<int> a(n);
    std::vector<double> costs(n);
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = static_cast<int>(rng.below(2));
      costs[i] = rng.uniform() * 2.0;
    }
    const double loss = rng.uniform();
    const double beta = rng.uniform() * 10.0;
    const auto credits = policy_credits(a, costs, loss, beta);
    double total = 0.0;
    for (std::size_t i = 1; i <= n; ++i) total += reward(a, costs, loss, beta, i);
    for (std::size_t i = 0; i < n; ++i) {
      double earlier = 0.0;
      for (std::size_t j = 0; j < i; ++j) earlier += (j + 1) * (1.0 - a[j]) * costs[j] / static_cast<double>(n);
      CHECK(credits[i] == doctest::Approx(total - earlier).epsilon(1e-12));
    }
  }
}

TEST_CASE("config validation and serialization") {
  RLConfig cfg;
  CHECK_NOTHROW(cfg.validate(3));
  cfg.target_rate = 1.5;
  CHECK_THROWS_AS(cfg.validate(3), std::invalid_argument);
  cfg.target_rate = 0.4;
  cfg.layer_cost = {1.0, -1.0, 1.0};
  CHECK_THROWS_AS(cfg.validate(3), std::invalid_argument);
  cfg.layer_cost = {1.0, 2.0, 0.5};
  cfg.rate_semantics = RateSemantics::skip;
  const RLConfig back = rl_config_from_json(rl_config_to_json(cfg));
  CHECK(back.layer_cost == cfg.layer_cost);
  CHECK(back.rate_semantics == RateSemantics::skip);
  CHECK(back.lambda1 == cfg.lambda1);
}

TEST_CASE("rate semantics switch") {
  const ModelConfig c = tiny_config(2, 8, 2);
  Rng rng(4);
  const Model m = make_model(c, 2);
  const Example ex = random_example(rng, c);
  RLConfig cfg;
  const std::vector<double> zero(2, 0.0);
  const RLSample exec = rl_sample(m, ex, TaskKind::classification, cfg, zero, nullptr, std::vector<int>{1, 0});
  cfg.rate_semantics = RateSemantics::skip;
  const RLSample skip = rl_sample(m, ex, TaskKind::classification, cfg, zero, nullptr, std::vector<int>{1, 0});
  CHECK(skip.breakdown.mu == doctest::Approx(1.0 - exec.breakdown.mu).epsilon(1e-15));
}

TEST_CASE("reinforce_step bookkeeping") {
  const ModelConfig c = tiny_config(3, 8, 2);
  Rng data_rng(5);
  DatasetSpec d = random_dataset(data_rng, c, 12);
  const auto batch = pointers(d);
  RLConfig cfg;
  cfg.learning_rate = 1e-3;

  auto run = [&](std::uint64_t seed) {
    Model m = make_model(c, 9);
    StageState st = make_stage_state(Stage::rl_joint, m, cfg.optim());
    Rng rng(seed);
    std::vector<RewardBreakdown> stream;
    for (int step = 0; step < 3; ++step) {
      auto b = reinforce_step(m, batch, TaskKind::classification, cfg, rng, st);
      stream.insert(stream.end(), b.begin(), b.end());
    }
    return stream;
  };

  const auto first = run(1);
  const auto second = run(1);
  REQUIRE(first.size() == 36);
  REQUIRE(second.size() == first.size());
  for (std::size_t k = 0; k < first.size(); ++k) {
    const auto& b = first[k];
    CHECK(b.actions == second[k].actions);
    CHECK(std::bit_cast<std::uint64_t>(b.objective) == std::bit_cast<std::uint64_t>(second[k].objective));
    CHECK(b.penalty == (b.mu - cfg.target_rate) * (b.mu - cfg.target_rate));
    const double want = b.task_loss - cfg.lambda1 * b.sum_returns() + cfg.lambda2 * (b.mu - cfg.target_rate) * (b.mu - cfg.target_rate);
    CHECK(std::abs(b.objective - want) <= 1e-12);
    for (double r : b.layer_returns) CHECK(std::isfinite(r));
  }
}

TEST_CASE("lambda1 = 0 reduces to the supervised gradient") {
  const ModelConfig c = tiny_config(2, 8, 2);
  Rng data_rng(6);
  DatasetSpec d = random_dataset(data_rng, c, 4);
  const auto batch = pointers(d);
  const Model m = make_model(c, 10);
  RLConfig cfg;
  cfg.lambda1 = 0.0;
  cfg.lambda2 = 2.0;
  StageState st = make_stage_state(Stage::rl_joint, m, cfg.optim());
  st.baselines_ready = true;
  Rng rng(11);
  const RLGradients got = rl_gradients(m, batch, TaskKind::classification, cfg, rng, st);

  Rng replay(11);
  const StageState fresh = make_stage_state(Stage::rl_joint, m, cfg.optim());
  const GradientBuffer want = batch_gradients(m, fresh, batch, [&](const Model& bound, const Example& ex) {
    const GatedOutput out = gated_forward(ex.tokens, bound.backbone, bound.gates, PlanMode::sampled, &replay);
    Tensor mu = ops::scale(ops::add(out.scores[0], out.scores[1]), 0.5);
    Tensor dev = ops::add_scalar(mu, -cfg.target_rate);
    return ops::add(ops::cross_entropy(out.logits, static_cast<std::size_t>(ex.label)),
                    ops::scale(ops::mul(dev, dev), cfg.lambda2));
  });
  REQUIRE(got.grads.size() == want.size());
  for (const auto& [path, g] : want) {
    const auto& h = got.grads.at(path);
    for (std::size_t i = 0; i < g.size(); ++i) CHECK(h[i] == doctest::Approx(g[i]).epsilon(1e-12));
  }
}

TEST_CASE("expected policy gradient equals the exact gradient of the expected return") {
  // Weighting every forced action vector's surrogate gradient by p(a) must give
  // -lambda1 * grad E_a[sum_i R^i] for the gate parameters, whatever the baselines.
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const ModelConfig c = tiny_config(3, 8, 2);
    Rng rng(seed + 100);
    Model m = make_model(c, seed);
    for (auto& g : m.gates) g.weight = testing::random_tensor(rng, g.weight.shape(), 0.5);
    const Example ex = random_example(rng, c);
    RLConfig cfg;
    cfg.beta = 2.0;
    cfg.lambda1 = 1.0;
    cfg.lambda2 = 0.0;
    cfg.layer_cost = {1.0, 0.5, 2.0};
    const std::vector<double> baselines = {0.3, -1.0, 2.5};
    const StageState st = make_stage_state(Stage::gate_init, m, {});
    const std::vector<const Example*> one = {&ex};

    GradientBuffer weighted, exact;
    for (unsigned mask = 0; mask < 8; ++mask) {
      const auto a = bits(mask, 3);
      double prob = 0.0, total_return = 0.0;
      const GradientBuffer gp = batch_gradients(m, st, one, [&](const Model& bound, const Example& e) {
        const GatedOutput out = gated_forward(e.tokens, bound.backbone, bound.gates, PlanMode::forced, nullptr, a);
        Tensor p = Tensor::scalar(1.0);
        for (std::size_t i = 0; i < 3; ++i)
          p = ops::mul(p, a[i] == 1 ? out.scores[i] : ops::add_scalar(ops::scale(out.scores[i], -1.0), 1.0));
        prob = p.item();
        const double loss = task_loss_value(out.logits, e.label, TaskKind::classification);
        const auto costs = cfg.costs(3);
        for (std::size_t i = 1; i <= 3; ++i) total_return += reward(a, costs, loss, cfg.beta, i);
        return p;
      });
      const GradientBuffer gs = batch_gradients(m, st, one, [&](const Model& bound, const Example& e) {
        return rl_sample(bound, e, TaskKind::classification, cfg, baselines, nullptr, a).surrogate;
      });
      for (const auto& [path, g] : gp) {
        auto& w = weighted[path];
        auto& x = exact[path];
        if (w.empty()) w.assign(g.size(), 0.0), x.assign(g.size(), 0.0);
        for (std::size_t i = 0; i < g.size(); ++i) {
          w[i] += prob * gs.at(path)[i];
          x[i] += -cfg.lambda1 * total_return * g[i];
        }
      }
    }
    for (const auto& [path, x] : exact)
      for (std::size_t i = 0; i < x.size(); ++i) CHECK(weighted.at(path)[i] == doctest::Approx(x[i]).epsilon(1e-9));
  }
}

TEST_CASE("larger lambda1 pushes harder toward skipping on the one-gate bandit") {
  ModelConfig c = tiny_config(1, 8, 2);
  Rng rng(12);
  const Model m = make_model(c, 3);
  const Example ex = random_example(rng, c);
  const StageState st = make_stage_state(Stage::gate_init, m, {});
  const std::vector<const Example*> one = {&ex};
  double previous = 0.0;
  for (double lambda1 : {0.1, 0.5, 1.0, 1.5}) {
    RLConfig cfg;
    cfg.beta = 0.0;
    cfg.lambda1 = lambda1;
    cfg.lambda2 = 0.0;
    cfg.target_rate = 0.0;
    double expected_bias_grad = 0.0;
    for (int a : {0, 1}) {
      const std::vector<int> forced = {a};
      const double s = gated_forward(ex.tokens, m.backbone, m.gates, PlanMode::deterministic).trace.scores[0];
      const GradientBuffer g = batch_gradients(m, st, one, [&](const Model& bound, const Example& e) {
        return rl_sample(bound, e, TaskKind::classification, cfg, std::vector<double>{0.0}, nullptr, forced).surrogate;
      });
      expected_bias_grad += (a == 1 ? s : 1.0 - s) * g.at("gates.0.bias")[0];
    }
    // A positive bias gradient means descent lowers s.
    CHECK(expected_bias_grad > previous);
    previous = expected_bias_grad;
  }
}

TEST_CASE("soft ablation") {
  DatasetSpec d = gen_synthetic(SyntheticKind::easy_hard_mix, 200, 3);
  encode_dataset(d, 16);
  ModelConfig c = tiny_config(3, 8, 2);
  c.vocab_size = d.vocab.size();
  c.max_seq_len = 16;
  Model m = make_model(c, 4);
  RLConfig cfg;
  cfg.lambda2 = 200.0;
  cfg.target_rate = 0.3;
  cfg.learning_rate = 3e-3;
  cfg.epochs = 4;
  TrainingLog log;
  train_soft_ablation(m, d, cfg, &log);
  double mu = 0.0;
  for (const auto& ex : d.examples)
    mu += execution_rate_mu(gated_forward(ex.tokens, m.backbone, m.gates, PlanMode::soft).trace.scores);
  mu /= static_cast<double>(d.size());
  CHECK(std::abs(mu - 0.3) < 0.05);
  for (const auto& row : log.rows()) {
    REQUIRE(row.objective);
    CHECK(std::abs(*row.objective - (row.task_loss + cfg.lambda2 * *row.penalty)) < 1e-9);
  }
  CHECK_NOTHROW((void)gated_forward(d.examples[0].tokens, m.backbone, m.gates, PlanMode::deterministic));
}

TEST_CASE("training log CSV") {
  TrainingLog log;
  LogRow r;
  r.step = 1;
  r.stage = Stage::rl_joint;
  r.task_loss = 0.5;
  r.mean_mu = 0.25;
  log.add(r);
  const std::string csv = log.csv();
  CHECK(csv.rfind("step,stage,task_loss,mean_mu,penalty,mean_sum_R,objective,train_acc\n", 0) == 0);
  CHECK(csv.find("1,rl-joint,0.5,0.25,,,,0\n") != std::string::npos);
}
