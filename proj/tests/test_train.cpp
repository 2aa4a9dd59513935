#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "unifork/train.hpp"

using namespace unifork;
using namespace unifork::toyworld;

namespace {

const std::string kConfigDir = UNIFORK_CONFIG_DIR;

std::string read_file(const std::string& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::vector<SequenceSample> make_batch(const ModelConfig& cfg, std::uint64_t seed, std::size_t n, Task task,
                                       Format f = Format::Dialogue) {
  World w(cfg);
  Lexicon lex(cfg);
  SceneStream stream(seed);
  std::vector<SequenceSample> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(regenerate(w, lex, stream.entry(i, task, f), 0.0));
  return out;
}

std::map<std::string, Tensor> snapshot(const ForkedTransformer& m) {
  std::map<std::string, Tensor> out;
  for (const auto& [n, v] : m.parameters()) out.emplace(n, v.value());
  return out;
}

std::set<std::string> changed(const std::map<std::string, Tensor>& before, const ForkedTransformer& m) {
  std::set<std::string> out;
  for (const auto& [n, v] : m.parameters())
    if (!(before.at(n) == v.value())) out.insert(n);
  return out;
}

StagePlan quick_plan(Stage st, std::size_t steps, double lr = 1e-3) {
  StagePlan p;
  p.stage = st;
  p.lr = lr;
  p.steps = steps;
  p.batch_size = 2;
  return p;
}

ModelConfig tiny() {
  ModelConfig c;
  c.d_model = 16;
  c.n_heads = 2;
  c.shared_layers = 1;
  c.branch_layers = 1;
  c.init_std = 0.05;
  return c;
}

}  // namespace

TEST(StageConfig, PublishedValuesParse) {
  auto plans = load_table1_config(kConfigDir + "/table1.cfg");
  ASSERT_EQ(plans.size(), 5u);
  EXPECT_EQ(plans[0].stage, Stage::I);
  EXPECT_DOUBLE_EQ(plans[0].lr, 1e-4);
  EXPECT_DOUBLE_EQ(plans[0].warmup_fraction, 0.03);
  EXPECT_EQ(plans[0].steps, 125000u);
  EXPECT_DOUBLE_EQ(plans[1].lr, 5e-5);
  EXPECT_EQ(plans[1].steps, 170000u);
  EXPECT_EQ(plans[2].steps, 23000u);
  EXPECT_DOUBLE_EQ(plans[3].lr, 3e-5);
  EXPECT_EQ(plans[3].steps, 17000u);
  EXPECT_EQ(plans[4].stage, Stage::IIIUnd);
  EXPECT_EQ(plans[4].schedule, LrSchedule::Cosine);
  EXPECT_EQ(plans[4].batch_size, 256u);
  EXPECT_DOUBLE_EQ(plans[4].lr, 2e-5);
  for (const auto& p : plans) {
    EXPECT_EQ(p.weight_decay, 0.0);
    EXPECT_EQ(p.optimizer, "adamw");
    EXPECT_EQ(p.context_length, 1350u);
    EXPECT_EQ(p.precision, "bfloat16");
    if (p.stage != Stage::IIIUnd) {
      EXPECT_EQ(p.schedule, LrSchedule::Constant);
      EXPECT_EQ(p.batch_size, 384u);
    }
  }
}

TEST(StageConfig, DeskConfigParses) { EXPECT_EQ(load_table1_config(kConfigDir + "/desk.cfg").size(), 5u); }

TEST(StageConfig, RejectsUnknownKeyAndMissingStage) {
  const auto text = read_file(kConfigDir + "/table1.cfg");
  EXPECT_NO_THROW(parse_stage_config(text));
  EXPECT_THROW(parse_stage_config(text + "\nmomentum = 0.9\n"), ConfigError);
  const auto cut = text.substr(0, text.find("[stage III-und]"));
  EXPECT_THROW(parse_stage_config(cut), ConfigError);
  auto missing_key = text;
  missing_key.erase(missing_key.find("precision = bfloat16"), 20);
  EXPECT_THROW(parse_stage_config(missing_key), ConfigError);
  EXPECT_THROW(parse_stage_config(text + "\n[stage IV]\n"), ConfigError);
  EXPECT_THROW(parse_stage_config(text + "\n[stage I]\n"), ConfigError);
  auto bad_number = text;
  bad_number.replace(bad_number.find("1e-4"), 4, "fast");
  EXPECT_THROW(parse_stage_config(bad_number), ConfigError);
}

TEST(Schedule, WarmupReachesBaseRateAtLastWarmupStep) {
  StagePlan p;
  p.lr = 1e-4;
  p.steps = 100;
  p.warmup_fraction = 0.03;
  EXPECT_DOUBLE_EQ(lr_at(p, 1), 1e-4 / 3);
  EXPECT_DOUBLE_EQ(lr_at(p, 2), 2e-4 / 3);
  EXPECT_DOUBLE_EQ(lr_at(p, 3), 1e-4);
  EXPECT_DOUBLE_EQ(lr_at(p, 50), 1e-4);
  EXPECT_DOUBLE_EQ(lr_at(p, 100), 1e-4);
}

TEST(Schedule, CosineDecaysToZero) {
  StagePlan p;
  p.lr = 2e-5;
  p.steps = 100;
  p.warmup_fraction = 0.03;
  p.schedule = LrSchedule::Cosine;
  EXPECT_DOUBLE_EQ(lr_at(p, 3), 2e-5);
  EXPECT_NEAR(lr_at(p, 100), 0.0, 1e-20);
  // Halfway through the post-warmup span.
  EXPECT_NEAR(lr_at(p, 51), 2e-5 * 0.5 * (1 + std::cos(M_PI * 48.0 / 97.0)), 1e-18);
  for (std::size_t t = 4; t <= 100; ++t) EXPECT_LE(lr_at(p, t), lr_at(p, t - 1));
}

TEST(Schedule, TaskAlternationIsOneToOne) {
  int gen = 0;
  for (std::size_t t = 1; t <= 100; ++t) {
    const auto task = task_for_step(0.5, t);
    gen += task == Task::Gen;
    EXPECT_EQ(task, t % 2 == 1 ? Task::Gen : Task::Und);
  }
  EXPECT_EQ(gen, 50);
  EXPECT_EQ(task_for_step(1.0, 7), Task::Gen);
  EXPECT_EQ(task_for_step(0.0, 7), Task::Und);
}

TEST(StageSets, TrainableSetsFollowStage) {
  ForkedTransformer m(ModelConfig{}, 1);
  auto s1 = trainable_params(Stage::I, m);
  for (const auto& n : s1) EXPECT_TRUE(n.starts_with("shared.connector.") || n.starts_with("heads.")) << n;
  EXPECT_TRUE(s1.count("heads.vision.out.weight"));
  EXPECT_EQ(trainable_params(Stage::IIPretrain, m).size(), m.parameters().size());
  EXPECT_EQ(trainable_params(Stage::IIIGen, m), m.branch_params(Branch::Gen));
  EXPECT_EQ(trainable_params(Stage::IIIUnd, m), m.branch_params(Branch::Und));
}

TEST(Loss, UntrainedUndLossNearLogVocab) {
  ModelConfig cfg;
  ForkedTransformer m(cfg, 3);
  auto batch = make_batch(cfg, 1, 4, Task::Und);
  const double loss = step_loss(m, batch).und;
  EXPECT_NEAR(loss, std::log(static_cast<double>(cfg.text_vocab)), 0.15 * std::log(static_cast<double>(cfg.text_vocab)));
}

TEST(Loss, DuplicatingSampleKeepsLoss) {
  ModelConfig cfg;
  ForkedTransformer m(cfg, 3);
  auto one = make_batch(cfg, 2, 1, Task::Gen);
  auto two = one;
  two.push_back(one[0]);
  EXPECT_NEAR(step_loss(m, one).total.value().item(), step_loss(m, two).total.value().item(), 1e-12);
}

TEST(Loss, MixedBatchIsCountWeightedMean) {
  ModelConfig cfg;
  ForkedTransformer m(cfg, 4);
  auto batch = make_batch(cfg, 3, 3, Task::Gen);
  auto und = make_batch(cfg, 4, 2, Task::Und);
  batch.insert(batch.end(), und.begin(), und.end());
  auto l = step_loss(m, batch);
  EXPECT_EQ(l.n_gen, 3u);
  EXPECT_EQ(l.n_und, 2u);
  EXPECT_NEAR(l.total.value().item(), (3 * l.gen + 2 * l.und) / 5.0, 1e-12);
}

TEST(Loss, MaskedOutTargetsDoNotMatter) {
  ModelConfig cfg;
  ForkedTransformer m(cfg, 5);
  auto batch = make_batch(cfg, 5, 2, Task::Gen);
  auto und = make_batch(cfg, 6, 2, Task::Und);
  batch.insert(batch.end(), und.begin(), und.end());
  const auto base = step_loss(m, batch);
  std::vector<std::vector<int>> targets;
  Rng rng(1);
  for (const auto& s : batch) {
    auto t = s.ids;
    for (std::size_t i = 0; i < t.size(); ++i)
      if (!s.loss_mask[i]) t[i] = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(m.vocab().size())));
    targets.push_back(t);
  }
  const auto pert = step_loss(m, batch, nullptr, &targets);
  EXPECT_EQ(base.gen, pert.gen);
  EXPECT_EQ(base.und, pert.und);
  EXPECT_EQ(base.total.value().item(), pert.total.value().item());
}

TEST(Loss, EmptyMaskAndEmptyBatchThrow) {
  ModelConfig cfg;
  ForkedTransformer m(cfg, 5);
  EXPECT_THROW(step_loss(m, {}), Error);
  auto batch = make_batch(cfg, 5, 1, Task::Und);
  batch[0].loss_mask.assign(batch[0].loss_mask.size(), false);
  EXPECT_THROW(step_loss(m, batch), Error);
}

TEST(Optimizer, ConvergesOnQuadraticBowl) {
  struct Bowl {
    Var x = parameter(Tensor({8}));
    const Var& param(const std::string&) const { return x; }
  } bowl;
  Tensor target({8});
  for (std::size_t i = 0; i < 8; ++i) target[i] = 0.5 * static_cast<double>(i) - 1.7;
  AdamW opt(AdamWConfig{0.9, 0.95, 1e-8, 0.0, 0.0});
  StagePlan sched;
  sched.lr = 0.05;
  sched.steps = 2000;
  sched.schedule = LrSchedule::Cosine;
  for (std::size_t t = 1; t <= sched.steps; ++t) {
    bowl.x.node().zero_grad();
    auto diff = add(bowl.x, scale(constant(target), -1.0));
    backward(scale(sum(mul(diff, diff)), 0.5));
    opt.step(bowl, {"x"}, lr_at(sched, t));
  }
  for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(bowl.x.value()[i], target[i], 1e-6);
}

TEST(Optimizer, ClipsGlobalNorm) {
  struct P {
    Var x = parameter(Tensor({2}));
    const Var& param(const std::string&) const { return x; }
  } p;
  p.x.node().grad = {30.0, 40.0};
  AdamW opt;
  EXPECT_DOUBLE_EQ(opt.step(p, {"x"}, 0.1), 50.0);
  // First Adam step: lr * g / (|g| + eps) on the clipped gradient (0.6, 0.8).
  EXPECT_NEAR(p.x.value()[0], -0.1 * 0.6 / (0.6 + 1e-8), 1e-15);
  EXPECT_NEAR(p.x.value()[1], -0.1 * 0.8 / (0.8 + 1e-8), 1e-15);
}

TEST(Optimizer, DecoupledDecayShrinksWithoutGradient) {
  struct P {
    Var x = parameter(Tensor({1}, 2.0));
    const Var& param(const std::string&) const { return x; }
  } p;
  AdamW opt(AdamWConfig{0.9, 0.95, 1e-8, 0.1, 1.0});
  opt.step(p, {"x"}, 0.5);
  EXPECT_DOUBLE_EQ(p.x.value()[0], 2.0 - 0.5 * 0.1 * 2.0);
}

TEST(Stages, StageOneTouchesOnlyConnectorAndHeads) {
  ModelConfig cfg;
  TrainState st(ForkedTransformer(cfg, 1), 1);
  DataSpec data;
  auto before = snapshot(st.model);
  apply_stage(quick_plan(Stage::I, 6), st, data);
  const auto ch = changed(before, st.model);
  EXPECT_EQ(ch, trainable_params(Stage::I, st.model));
  EXPECT_EQ(st.step, 6u);
  EXPECT_EQ(st.log.size(), 6u);
}

TEST(Stages, StageThreeGenKeepsSharedAndUndAndLowersLoss) {
  auto cfg = tiny();
  TrainState st(ForkedTransformer(cfg, 2), 2);
  DataSpec data;
  data.fixed_scenes = std::vector<Scene>{make_scene({Object{ShapeKind::Circle, Color::Blue, 4, Size::Large}}),
                                         make_scene({Object{ShapeKind::Cross, Color::Red, 0, Size::Small}})};
  data.p_cfg = 0.0;
  auto before = snapshot(st.model);
  auto plan = quick_plan(Stage::IIIGen, 200, 3e-3);
  apply_stage(plan, st, data);
  const auto ch = changed(before, st.model);
  for (const auto& n : ch) EXPECT_EQ(param_group(n), ParamGroup::Gen) << n;
  EXPECT_EQ(ch, st.model.branch_params(Branch::Gen));
  // Smoothed loss trend: each 40-step window mean below the previous.
  std::vector<double> windows;
  for (std::size_t w = 0; w < 5; ++w) {
    double s = 0.0;
    for (std::size_t i = w * 40; i < (w + 1) * 40; ++i) s += st.log[i].loss;
    windows.push_back(s / 40.0);
  }
  for (std::size_t w = 1; w < windows.size(); ++w) EXPECT_LT(windows[w], windows[w - 1]);
  for (const auto& row : st.log) EXPECT_EQ(row.task, "gen");
}

TEST(Stages, OverfitSingleSample) {
  ModelConfig cfg;
  TrainState st(ForkedTransformer(cfg, 3), 3);
  DataSpec data;
  data.fixed_scenes = std::vector<Scene>{make_scene({Object{ShapeKind::Triangle, Color::Yellow, 2, Size::Large}})};
  data.p_cfg = 0.0;
  auto plan = quick_plan(Stage::IIPretrain, 1000, 1e-3);
  plan.batch_size = 1;
  apply_stage(plan, st, data);
  const auto& log = st.log;
  EXPECT_EQ(log[log.size() - 2].task, "gen");
  EXPECT_LT(log[log.size() - 2].loss, 0.05);
  EXPECT_EQ(log.back().task, "und");
  EXPECT_LT(log.back().loss, 0.05);
}

TEST(State, CheckpointRoundTripIsByteIdentical) {
  auto cfg = tiny();
  TrainState st(ForkedTransformer(cfg, 4), 4);
  DataSpec data;
  apply_stage(quick_plan(Stage::IIPretrain, 3), st, data);
  apply_stage(quick_plan(Stage::IIIUnd, 2), st, data);
  const auto dir = std::filesystem::temp_directory_path() / "unifork_state_rt";
  std::filesystem::create_directories(dir);
  const auto a = (dir / "a.ckpt").string(), b = (dir / "b.ckpt").string();
  st.save(a);
  auto back = TrainState::load(a);
  back.save(b);
  EXPECT_EQ(read_file(a), read_file(b));
  EXPECT_EQ(read_file(a + ".json"), read_file(b + ".json"));
  EXPECT_EQ(back.step, 5u);
  EXPECT_EQ(back.gen_cursor, st.gen_cursor);

  // Resuming from the checkpoint continues exactly as the original would.
  apply_stage(quick_plan(Stage::IISft, 2), st, data);
  apply_stage(quick_plan(Stage::IISft, 2), back, data);
  EXPECT_EQ(st.encode(), back.encode());
  std::filesystem::remove_all(dir);
}

TEST(State, LogCsvUsesHeaderAndDotDecimals) {
  std::vector<LogRow> rows{{1, "I", "gen", 0.25, 1e-4}};
  EXPECT_EQ(log_csv(rows), "step,stage,task,loss,lr\n1,I,gen,0.25,1e-04\n");
}
