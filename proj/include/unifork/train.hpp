#pragma once

#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "unifork/model.hpp"
#include "unifork/optim.hpp"
#include "unifork/toyworld.hpp"

namespace unifork {

enum class Stage { I, IIPretrain, IISft, IIIGen, IIIUnd };
enum class LrSchedule { Constant, Cosine };

inline const char* stage_name(Stage s) {
  switch (s) {
    case Stage::I: return "I";
    case Stage::IIPretrain: return "II-pretrain";
    case Stage::IISft: return "II-sft";
    case Stage::IIIGen: return "III-gen";
    case Stage::IIIUnd: return "III-und";
  }
  return "?";
}

inline Stage parse_stage(const std::string& s) {
  for (Stage st : {Stage::I, Stage::IIPretrain, Stage::IISft, Stage::IIIGen, Stage::IIIUnd})
    if (s == stage_name(st)) return st;
  throw ConfigError("unknown stage: " + s);
}

struct StagePlan {
  Stage stage = Stage::IIPretrain;
  double lr = 1e-4;
  LrSchedule schedule = LrSchedule::Constant;
  double warmup_fraction = 0.0;
  std::size_t steps = 0;
  std::size_t batch_size = 1;
  double weight_decay = 0.0;
  std::string optimizer = "adamw";
  std::size_t context_length = 0;
  std::string precision = "float64";

  // Fractions of steps spent on each task; scaled by the stage's task set.
  double gen_fraction() const {
    if (stage == Stage::IIIGen) return 1.0;
    if (stage == Stage::IIIUnd) return 0.0;
    return 0.5;
  }
  toyworld::Format format() const {
    return (stage == Stage::I || stage == Stage::IIPretrain) ? toyworld::Format::Pretrain : toyworld::Format::Dialogue;
  }
};

// Parameters updated during a stage.
inline std::set<std::string> trainable_params(Stage stage, const ForkedTransformer& model) {
  switch (stage) {
    case Stage::I: {
      std::set<std::string> out;
      for (const auto& name : model.parameter_names())
        if (name.starts_with("shared.connector.") || name.starts_with("heads.")) out.insert(name);
      return out;
    }
    case Stage::IIPretrain:
    case Stage::IISft: {
      auto names = model.parameter_names();
      return {names.begin(), names.end()};
    }
    case Stage::IIIGen: return model.branch_params(Branch::Gen);
    case Stage::IIIUnd: return model.branch_params(Branch::Und);
  }
  return {};
}

// Learning rate at 1-based step t: linear warmup over round(warmup * steps)
// steps reaching the base rate at the last warmup step, then constant or a
// half cosine down to zero at the final step.
inline double lr_at(const StagePlan& plan, std::size_t t) {
  const auto warm = static_cast<std::size_t>(std::llround(plan.warmup_fraction * static_cast<double>(plan.steps)));
  if (warm > 0 && t <= warm) return plan.lr * static_cast<double>(t) / static_cast<double>(warm);
  if (plan.schedule == LrSchedule::Constant) return plan.lr;
  const std::size_t span = plan.steps > warm ? plan.steps - warm : 1;
  const double progress = static_cast<double>(t - warm) / static_cast<double>(span);
  return plan.lr * 0.5 * (1.0 + std::cos(M_PI * std::min(1.0, progress)));
}

// ---------------------------------------------------------------------------
// Stage configuration file: flat "key = value" lines grouped under
// "[stage <name>]" headers; '#' starts a comment.

inline std::vector<StagePlan> parse_stage_config(const std::string& text) {
  static const std::set<std::string> keys = {"learning_rate", "lr_scheduler", "warmup",    "training_steps",
                                             "batch_size",    "weight_decay", "optimizer", "context_length",
                                             "precision"};
  std::map<Stage, StagePlan> plans;
  std::map<Stage, std::set<std::string>> seen;
  std::optional<Stage> current;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return std::string{};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  };
  auto to_double = [&](const std::string& v) {
    double d = 0.0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), d);
    if (ec != std::errc() || p != v.data() + v.size())
      throw ConfigError("line " + std::to_string(lineno) + ": not a number: " + v);
    return d;
  };
  auto to_size = [&](const std::string& v) {
    std::size_t n = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), n);
    if (ec != std::errc() || p != v.data() + v.size())
      throw ConfigError("line " + std::to_string(lineno) + ": not an integer: " + v);
    return n;
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']' || !line.starts_with("[stage "))
        throw ConfigError("line " + std::to_string(lineno) + ": bad section header " + line);
      current = parse_stage(trim(line.substr(7, line.size() - 8)));
      if (plans.count(*current)) throw ConfigError("duplicate stage section " + line);
      plans[*current].stage = *current;
      continue;
    }
    if (!current) throw ConfigError("line " + std::to_string(lineno) + ": key outside a stage section");
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    if (!keys.count(key)) throw ConfigError("line " + std::to_string(lineno) + ": unknown key " + key);
    seen[*current].insert(key);
    auto& p = plans[*current];
    if (key == "learning_rate") p.lr = to_double(val);
    else if (key == "lr_scheduler") {
      if (val == "constant") p.schedule = LrSchedule::Constant;
      else if (val == "cosine") p.schedule = LrSchedule::Cosine;
      else throw ConfigError("unknown lr_scheduler " + val);
    } else if (key == "warmup") p.warmup_fraction = to_double(val);
    else if (key == "training_steps") p.steps = to_size(val);
    else if (key == "batch_size") p.batch_size = to_size(val);
    else if (key == "weight_decay") p.weight_decay = to_double(val);
    else if (key == "optimizer") {
      if (val != "adamw") throw ConfigError("only adamw is supported, got " + val);
      p.optimizer = val;
    } else if (key == "context_length") p.context_length = to_size(val);
    else if (key == "precision") p.precision = val;
  }
  std::vector<StagePlan> out;
  for (Stage st : {Stage::I, Stage::IIPretrain, Stage::IISft, Stage::IIIGen, Stage::IIIUnd}) {
    if (!plans.count(st)) throw ConfigError(std::string("missing stage section ") + stage_name(st));
    for (const auto& k : keys)
      if (!seen[st].count(k)) throw ConfigError(std::string("stage ") + stage_name(st) + " missing key " + k);
    if (plans[st].batch_size == 0) throw ConfigError("batch_size must be positive");
    out.push_back(plans[st]);
  }
  return out;
}

inline std::vector<StagePlan> load_table1_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open stage config " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_stage_config(ss.str());
}

// ---------------------------------------------------------------------------
// Loss

struct LossBreakdown {
  Var total;
  double gen = 0.0;  // mean per-sample loss over gen samples
  double und = 0.0;
  std::size_t n_gen = 0;
  std::size_t n_und = 0;
};

// Mean over samples of each sample's mean masked cross-entropy. Gen samples
// run through the gen branch and vision head, und samples through the und
// branch and text head; no task weights.
// `targets`, when given, replaces each sample's ids as the prediction
// targets (inputs stay the sample ids).
inline LossBreakdown step_loss(const ForkedTransformer& model, const std::vector<toyworld::SequenceSample>& batch,
                               Rng* dropout_rng = nullptr,
                               const std::vector<std::vector<int>>* targets = nullptr) {
  if (targets && targets->size() != batch.size()) throw Error("targets do not match batch");
  if (batch.empty()) throw Error("step_loss on an empty batch");
  LossBreakdown out;
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  std::vector<Var> terms;
  for (auto task : {toyworld::Task::Gen, toyworld::Task::Und}) {
    std::vector<const toyworld::SequenceSample*> group;
    std::vector<const std::vector<int>*> group_targets;
    for (std::size_t i = 0; i < batch.size(); ++i)
      if (batch[i].task == task) {
        group.push_back(&batch[i]);
        group_targets.push_back(targets ? &(*targets)[i] : &batch[i].ids);
      }
    if (group.empty()) continue;
    std::vector<TokenSequence> ids;
    for (auto* s : group) ids.push_back(s->ids);
    ForwardOptions opt;
    opt.training = dropout_rng != nullptr;
    opt.dropout_rng = dropout_rng;
    const Branch branch = task == toyworld::Task::Gen ? Branch::Gen : Branch::Und;
    auto trace = model.forward(ids, branch, opt);
    const auto& lay = trace.layout;
    const std::size_t text_rows = trace.text_logits.rows();
    const std::size_t code_rows = trace.code_logits ? trace.code_logits.rows() : 0;
    std::vector<int> text_t(text_rows, 0), code_t(code_rows, 0);
    std::vector<double> text_w(text_rows, 0.0), code_w(code_rows, 0.0);
    for (std::size_t s = 0; s < group.size(); ++s) {
      const auto& mask = group[s]->loss_mask;
      if (mask.size() != group[s]->ids.size() || group_targets[s]->size() != mask.size())
        throw Error("loss mask length does not match ids");
      const auto n = static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true));
      if (n == 0) throw Error("sample with empty loss mask");
      const double w = inv_b / static_cast<double>(n);
      for (std::size_t i = 0; i < mask.size(); ++i) {
        if (!mask[i]) continue;
        const auto& p = lay.predictions[s][i];
        const int id = (*group_targets[s])[i];
        if (p.kind == Prediction::Kind::Text) {
          text_t[p.row] = id;
          text_w[p.row] += w;
        } else if (p.kind == Prediction::Kind::Code) {
          if (branch != Branch::Gen) throw Error("image-code targets require gen routing");
          if (!model.vocab().is_image(id)) throw VocabularyError("image-code target outside the code range");
          code_t[p.row] = model.vocab().code_of(id);
          code_w[p.row] += w;
        } else {
          throw Error("masked position has no prediction source");
        }
      }
    }
    std::vector<Var> task_terms;
    if (std::any_of(text_w.begin(), text_w.end(), [](double w) { return w != 0.0; }))
      task_terms.push_back(weighted_cross_entropy(trace.text_logits, text_t, text_w));
    if (std::any_of(code_w.begin(), code_w.end(), [](double w) { return w != 0.0; }))
      task_terms.push_back(weighted_cross_entropy(trace.code_logits, code_t, code_w));
    double task_sum = 0.0;
    for (auto& t : task_terms) {
      task_sum += t.value().item();
      terms.push_back(t);
    }
    // task_sum is (1/B) * sum of per-sample means for this task
    const double mean = task_sum * static_cast<double>(batch.size()) / static_cast<double>(group.size());
    if (task == toyworld::Task::Gen) {
      out.gen = mean;
      out.n_gen = group.size();
    } else {
      out.und = mean;
      out.n_und = group.size();
    }
  }
  Var total = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) total = add(total, terms[i]);
  out.total = total;
  return out;
}

// ---------------------------------------------------------------------------
// Data and state

// Where training samples come from. Each task has its own deterministic
// stream so variants trained on different task mixes see identical data.
struct DataSpec {
  std::uint64_t seed = 1;
  double p_cfg = 0.1;
  double two_object_fraction = 0.5;
  std::optional<std::vector<toyworld::Scene>> fixed_scenes;  // cycled in order when set
  std::optional<toyworld::Format> gen_format;                // override the stage's format
  std::optional<toyworld::Format> und_format;
};

struct LogRow {
  std::size_t step = 0;
  std::string stage;
  std::string task;
  double loss = 0.0;
  double lr = 0.0;
};

inline std::string format_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, p);
}

inline std::string log_csv(const std::vector<LogRow>& rows) {
  std::string out = "step,stage,task,loss,lr\n";
  for (const auto& r : rows)
    out += std::to_string(r.step) + "," + r.stage + "," + r.task + "," + format_double(r.loss) + "," +
           format_double(r.lr) + "\n";
  return out;
}

struct TrainState {
  std::size_t step = 0;
  ForkedTransformer model;
  AdamW optimizer;
  Rng dropout_rng;
  std::uint64_t gen_cursor = 0;
  std::uint64_t und_cursor = 0;
  std::vector<LogRow> log;

  TrainState(ForkedTransformer m, std::uint64_t seed)
      : model(std::move(m)), dropout_rng(substream(seed, "dropout")) {}

  // Model, optimizer and counters. The loss log is not part of the archive.
  std::string encode() const {
    auto ts = model.named_tensors();
    auto os = optimizer.named_tensors();
    ts.insert(ts.end(), os.begin(), os.end());
    return checkpoint::encode(ts);
  }
  nlohmann::json sidecar() const {
    return {{"model", nlohmann::json(model.config())},
            {"step", step},
            {"gen_cursor", gen_cursor},
            {"und_cursor", und_cursor},
            {"dropout_rng", rng_state(dropout_rng)},
            {"optimizer", {{"beta1", optimizer.config().beta1},
                           {"beta2", optimizer.config().beta2},
                           {"eps", optimizer.config().eps},
                           {"weight_decay", optimizer.config().weight_decay},
                           {"clip_norm", optimizer.config().clip_norm}}}};
  }

  void save(const std::string& path) const {
    checkpoint::write_file(path, encode());
    std::ofstream side(path + ".json");
    side << sidecar().dump(2) << '\n';
  }

  static TrainState load(const std::string& path) {
    std::ifstream side(path + ".json");
    if (!side) throw Error("missing train-state sidecar " + path + ".json");
    const auto j = nlohmann::json::parse(side);
    const auto tensors = checkpoint::load(path);
    ForkedTransformer m(j.at("model").get<ModelConfig>(), 0);
    m.load_named_tensors(tensors);
    AdamWConfig oc;
    const auto& o = j.at("optimizer");
    oc.beta1 = o.at("beta1");
    oc.beta2 = o.at("beta2");
    oc.eps = o.at("eps");
    oc.weight_decay = o.at("weight_decay");
    oc.clip_norm = o.at("clip_norm");
    TrainState st(std::move(m), 0);
    st.optimizer = AdamW(oc);
    st.optimizer.load_named_tensors(tensors);
    st.step = j.at("step");
    st.gen_cursor = j.at("gen_cursor");
    st.und_cursor = j.at("und_cursor");
    set_rng_state(st.dropout_rng, j.at("dropout_rng").get<std::string>());
    return st;
  }
};

// Samples for the next batch of `task`, advancing that task's cursor.
inline std::vector<toyworld::SequenceSample> next_batch(TrainState& st, const DataSpec& data, toyworld::Task task,
                                                        toyworld::Format format, std::size_t batch_size) {
  const auto& cfg = st.model.config();
  toyworld::World world(cfg);
  toyworld::Lexicon lex(cfg);
  const bool gen = task == toyworld::Task::Gen;
  if (gen && data.gen_format) format = *data.gen_format;
  if (!gen && data.und_format) format = *data.und_format;
  toyworld::SceneStream stream(substream(data.seed, gen ? "data.gen" : "data.und")(), data.two_object_fraction);
  auto& cursor = gen ? st.gen_cursor : st.und_cursor;
  std::vector<toyworld::SequenceSample> out;
  for (std::size_t b = 0; b < batch_size; ++b, ++cursor) {
    auto e = stream.entry(cursor, task, format);
    if (data.fixed_scenes) e.scene = (*data.fixed_scenes)[cursor % data.fixed_scenes->size()];
    out.push_back(toyworld::regenerate(world, lex, e, gen ? data.p_cfg : 0.0));
  }
  return out;
}

// Task for step t (1-based) of a plan mixing tasks at `gen_fraction`.
inline toyworld::Task task_for_step(double gen_fraction, std::size_t t) {
  if (gen_fraction >= 1.0) return toyworld::Task::Gen;
  if (gen_fraction <= 0.0) return toyworld::Task::Und;
  // Gen takes step t whenever its quota ceil(t * f) ticks over, so t=1 is gen.
  const auto a = std::ceil(static_cast<double>(t) * gen_fraction);
  const auto b = std::ceil(static_cast<double>(t - 1) * gen_fraction);
  return a > b ? toyworld::Task::Gen : toyworld::Task::Und;
}

struct StageOptions {
  std::optional<double> gen_fraction;  // override plan's mix
  bool log = true;
};

// Runs plan.steps optimizer steps. Parameters outside the stage's trainable
// set take no gradient and stay bit-identical.
inline void apply_stage(const StagePlan& plan, TrainState& st, const DataSpec& data, const StageOptions& so = {}) {
  const auto trainable = trainable_params(plan.stage, st.model);
  st.model.set_trainable(trainable);
  st.optimizer.set_weight_decay(plan.weight_decay);
  const double mix = so.gen_fraction.value_or(plan.gen_fraction());
  for (std::size_t t = 1; t <= plan.steps; ++t) {
    const auto task = task_for_step(mix, t);
    auto batch = next_batch(st, data, task, plan.format(), plan.batch_size);
    auto loss = step_loss(st.model, batch, st.model.config().dropout_prob > 0.0 ? &st.dropout_rng : nullptr);
    backward(loss.total);
    const double lr = lr_at(plan, t);
    st.optimizer.step(st.model, trainable, lr);
    st.model.zero_grad();
    ++st.step;
    if (so.log)
      st.log.push_back({st.step, stage_name(plan.stage), toyworld::task_name(task), loss.total.value().item(), lr});
  }
  st.model.set_all_trainable();
}

}  // namespace unifork
