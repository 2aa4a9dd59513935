#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "unifork/align.hpp"
#include "unifork/gradcheck.hpp"
#include "unifork/sampling.hpp"
#include "unifork/train.hpp"

namespace unifork {

// ---------------------------------------------------------------------------
// Ablation variants

enum class VariantKind { GenExpert, UndExpert, FullyShared, UniFork };
inline constexpr VariantKind kAllVariants[] = {VariantKind::GenExpert, VariantKind::UndExpert, VariantKind::FullyShared,
                                               VariantKind::UniFork};

inline const char* variant_name(VariantKind k) {
  switch (k) {
    case VariantKind::GenExpert: return "gen_expert";
    case VariantKind::UndExpert: return "und_expert";
    case VariantKind::FullyShared: return "fully_shared";
    case VariantKind::UniFork: return "unifork";
  }
  return "?";
}

inline VariantKind parse_variant(const std::string& s) {
  for (auto k : kAllVariants)
    if (s == variant_name(k)) return k;
  throw ConfigError("unknown variant: " + s);
}

struct VariantSpec {
  VariantKind kind = VariantKind::UniFork;
  ModelConfig model;
  bool trains_gen = true;
  bool trains_und = true;
};

// Every variant runs M+N layers per task. Only UniFork forks; the others are
// one dense stack of the same depth.
inline VariantSpec make_variant(VariantKind kind, const ModelConfig& unifork_cfg) {
  VariantSpec v;
  v.kind = kind;
  v.model = unifork_cfg;
  if (kind != VariantKind::UniFork) {
    v.model.shared_layers = unifork_cfg.depth();
    v.model.branch_layers = 0;
  } else if (unifork_cfg.branch_layers == 0) {
    throw ConfigError("unifork variant needs branch_layers > 0");
  }
  v.trains_gen = kind != VariantKind::UndExpert;
  v.trains_und = kind != VariantKind::GenExpert;
  v.model.validate();
  return v;
}

// ---------------------------------------------------------------------------
// Protocol

struct EvalSettings {
  std::size_t prompts_per_factor = 20;
  std::size_t n_per_prompt = 2;
  std::size_t und_scenes = 200;
  double cfg_scale = 2.0;
  double temperature = 1.0;
  std::size_t top_k = 0;
};

struct AblationConfig {
  ModelConfig model;
  std::vector<VariantKind> variants{std::begin(kAllVariants), std::end(kAllVariants)};
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::size_t steps = 5000;  // per unified variant; experts get their task's share
  std::size_t batch_size = 4;
  double lr = 1e-3;
  LrSchedule schedule = LrSchedule::Cosine;
  double warmup_fraction = 0.03;
  double weight_decay = 0.0;
  double two_object_fraction = 0.5;
  double p_cfg = 0.1;
  EvalSettings eval;
  ProbeConfig probe;
};

inline AblationConfig parse_ablation_config(const nlohmann::json& j) {
  static const std::set<std::string> known{"model", "variants", "seeds", "steps", "batch_size", "learning_rate",
                                           "lr_scheduler", "warmup", "weight_decay", "two_object_fraction", "p_cfg",
                                           "eval", "probe"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key())) throw ConfigError("unknown ablation key: " + it.key());
  AblationConfig a;
  try {
    if (j.contains("model")) a.model = j.at("model").get<ModelConfig>();
    if (j.contains("variants")) {
      a.variants.clear();
      for (const auto& v : j.at("variants")) a.variants.push_back(parse_variant(v.get<std::string>()));
    }
    if (j.contains("seeds")) a.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    if (j.contains("steps")) a.steps = j.at("steps").get<std::size_t>();
    if (j.contains("batch_size")) a.batch_size = j.at("batch_size").get<std::size_t>();
    if (j.contains("learning_rate")) a.lr = j.at("learning_rate").get<double>();
    if (j.contains("lr_scheduler")) {
      const auto s = j.at("lr_scheduler").get<std::string>();
      if (s == "constant") a.schedule = LrSchedule::Constant;
      else if (s == "cosine") a.schedule = LrSchedule::Cosine;
      else throw ConfigError("unknown lr_scheduler: " + s);
    }
    if (j.contains("warmup")) a.warmup_fraction = j.at("warmup").get<double>();
    if (j.contains("weight_decay")) a.weight_decay = j.at("weight_decay").get<double>();
    if (j.contains("two_object_fraction")) a.two_object_fraction = j.at("two_object_fraction").get<double>();
    if (j.contains("p_cfg")) a.p_cfg = j.at("p_cfg").get<double>();
    if (j.contains("eval")) {
      const auto& e = j.at("eval");
      for (auto it = e.begin(); it != e.end(); ++it) {
        const auto& k = it.key();
        if (k == "prompts_per_factor") a.eval.prompts_per_factor = it->get<std::size_t>();
        else if (k == "n_per_prompt") a.eval.n_per_prompt = it->get<std::size_t>();
        else if (k == "und_scenes") a.eval.und_scenes = it->get<std::size_t>();
        else if (k == "cfg_scale") a.eval.cfg_scale = it->get<double>();
        else if (k == "temperature") a.eval.temperature = it->get<double>();
        else if (k == "top_k") a.eval.top_k = it->get<std::size_t>();
        else throw ConfigError("unknown eval key: " + k);
      }
    }
    if (j.contains("probe")) {
      const auto& p = j.at("probe");
      for (auto it = p.begin(); it != p.end(); ++it) {
        const auto& k = it.key();
        if (k == "k") a.probe.k = it->get<std::size_t>();
        else if (k == "prompt_count") a.probe.prompt_count = it->get<std::size_t>();
        else if (k == "metric") a.probe.metric = parse_metric(it->get<std::string>());
        else if (k == "per_layer_text") a.probe.per_layer_text = it->get<bool>();
        else throw ConfigError("unknown probe key: " + k);
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("ablation config: ") + e.what());
  }
  if (a.steps < 2 || a.batch_size == 0) throw ConfigError("ablation needs steps >= 2 and batch_size >= 1");
  if (a.seeds.empty() || a.variants.empty()) throw ConfigError("ablation needs at least one seed and one variant");
  a.model.validate();
  return a;
}

inline StagePlan ablation_plan(const AblationConfig& a, const VariantSpec& v) {
  StagePlan p;
  p.stage = Stage::IIPretrain;  // every parameter trainable
  p.lr = a.lr;
  p.schedule = a.schedule;
  p.warmup_fraction = a.warmup_fraction;
  p.weight_decay = a.weight_decay;
  p.batch_size = a.batch_size;
  p.context_length = a.model.max_seq_len;
  p.steps = v.trains_gen && v.trains_und ? a.steps : a.steps / 2;
  return p;
}

inline DataSpec ablation_data(const AblationConfig& a, std::uint64_t seed) {
  DataSpec d;
  d.seed = seed;
  d.p_cfg = a.p_cfg;
  d.two_object_fraction = a.two_object_fraction;
  d.gen_format = toyworld::Format::Pretrain;
  d.und_format = toyworld::Format::Dialogue;
  return d;
}

inline SamplerConfig eval_sampler(const EvalSettings& e, std::uint64_t seed) {
  SamplerConfig sc;
  sc.cfg_scale = e.cfg_scale;
  sc.temperature = e.temperature;
  sc.top_k = e.top_k;
  sc.seed = substream(seed, "sampler")();
  sc.format = toyworld::Format::Pretrain;
  return sc;
}

// Mean of the last `window` logged losses of a task.
inline std::optional<double> final_loss(const std::vector<LogRow>& log, const std::string& task, std::size_t window = 100) {
  double sum = 0.0;
  std::size_t n = 0;
  for (auto it = log.rbegin(); it != log.rend() && n < window; ++it)
    if (it->task == task) {
      sum += it->loss;
      ++n;
    }
  if (n == 0) return std::nullopt;
  return sum / static_cast<double>(n);
}

struct VariantResult {
  VariantKind kind = VariantKind::UniFork;
  std::uint64_t seed = 0;
  std::size_t steps = 0;
  std::size_t active_params = 0;
  std::optional<GenReport> gen;
  std::optional<UndReport> und;
  std::optional<double> final_gen_loss, final_und_loss;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["variant"] = variant_name(kind);
    j["seed"] = seed;
    j["steps"] = steps;
    j["active_params"] = active_params;
    j["gen"] = gen ? gen->to_json() : nlohmann::ordered_json(nullptr);
    j["und"] = und ? und->to_json() : nlohmann::ordered_json(nullptr);
    j["final_gen_loss"] = final_gen_loss ? nlohmann::ordered_json(*final_gen_loss) : nlohmann::ordered_json(nullptr);
    j["final_und_loss"] = final_und_loss ? nlohmann::ordered_json(*final_und_loss) : nlohmann::ordered_json(nullptr);
    return j;
  }
};

struct TrainedVariant {
  VariantResult result;
  TrainState state;
};

inline std::size_t variant_active_params(const VariantSpec& v, const ForkedTransformer& m) {
  return m.active_parameter_count(v.trains_gen ? Branch::Gen : Branch::Und);
}

inline TrainedVariant train_variant(const AblationConfig& a, VariantKind kind, std::uint64_t seed) {
  const auto v = make_variant(kind, a.model);
  TrainState st(ForkedTransformer(v.model, substream(seed, "init")()), seed);
  const auto plan = ablation_plan(a, v);
  StageOptions so;
  so.gen_fraction = v.trains_gen && v.trains_und ? 0.5 : (v.trains_gen ? 1.0 : 0.0);
  apply_stage(plan, st, ablation_data(a, seed), so);

  VariantResult r;
  r.kind = kind;
  r.seed = seed;
  r.steps = plan.steps;
  r.active_params = variant_active_params(v, st.model);
  r.final_gen_loss = final_loss(st.log, "gen");
  r.final_und_loss = final_loss(st.log, "und");
  const std::uint64_t eval_seed = substream(seed, "eval")();
  if (v.trains_gen)
    r.gen = score_generation(st.model, make_suite(eval_seed, a.eval.prompts_per_factor), a.eval.n_per_prompt,
                             eval_sampler(a.eval, seed));
  if (v.trains_und) r.und = score_understanding(st.model, make_und_suite(eval_seed, a.eval.und_scenes));
  return {std::move(r), std::move(st)};
}

struct AblationReport {
  std::vector<VariantResult> rows;

  const VariantResult* find(VariantKind k, std::uint64_t seed) const {
    for (const auto& r : rows)
      if (r.kind == k && r.seed == seed) return &r;
    return nullptr;
  }

  std::vector<std::uint64_t> seeds() const {
    std::vector<std::uint64_t> s;
    for (const auto& r : rows)
      if (std::find(s.begin(), s.end(), r.seed) == s.end()) s.push_back(r.seed);
    return s;
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["rows"] = nlohmann::ordered_json::array();
    for (const auto& r : rows) j["rows"].push_back(r.to_json());
    return j;
  }

  static AblationReport from_json(const nlohmann::json& j) {
    AblationReport rep;
    for (const auto& row : j.at("rows")) {
      VariantResult r;
      r.kind = parse_variant(row.at("variant").get<std::string>());
      r.seed = row.at("seed").get<std::uint64_t>();
      r.steps = row.at("steps").get<std::size_t>();
      r.active_params = row.at("active_params").get<std::size_t>();
      if (!row.at("gen").is_null()) {
        GenReport g;
        for (auto f : kGenFactors) g.factors[factor_name(f)] = row["gen"].at(factor_name(f)).get<double>();
        g.overall = row["gen"].at("overall").get<double>();
        g.parse_failure_rate = row["gen"].at("parse_failure_rate").get<double>();
        g.samples = row["gen"].at("samples").get<std::size_t>();
        r.gen = g;
      }
      if (!row.at("und").is_null()) {
        UndReport u;
        const auto& x = row["und"];
        u.exact = x.at("exact").get<double>();
        u.shape = x.at("shape").get<double>();
        u.color = x.at("color").get<double>();
        u.position = x.at("position").get<double>();
        u.size = x.at("size").get<double>();
        u.samples = x.at("samples").get<std::size_t>();
        r.und = u;
      }
      if (!row.at("final_gen_loss").is_null()) r.final_gen_loss = row["final_gen_loss"].get<double>();
      if (!row.at("final_und_loss").is_null()) r.final_und_loss = row["final_und_loss"].get<double>();
      rep.rows.push_back(r);
    }
    return rep;
  }

  // One line per variant and seed, gen factors then und accuracies; cells
  // for a task the variant never trained on stay empty.
  std::string csv() const {
    std::string out = "variant,seed,steps,active_params";
    for (auto f : kGenFactors) out += std::string(",gen_") + factor_name(f);
    out += ",gen_overall,und_exact,und_shape,und_color,und_position,und_size,final_gen_loss,final_und_loss\n";
    auto cell = [](std::optional<double> v) { return v ? format_double(*v) : std::string(); };
    for (const auto& r : rows) {
      out += std::string(variant_name(r.kind)) + "," + std::to_string(r.seed) + "," + std::to_string(r.steps) + "," +
             std::to_string(r.active_params);
      for (auto f : kGenFactors) out += "," + cell(r.gen ? std::optional(r.gen->factors.at(factor_name(f))) : std::nullopt);
      out += "," + cell(r.gen ? std::optional(r.gen->overall) : std::nullopt);
      out += "," + cell(r.und ? std::optional(r.und->exact) : std::nullopt);
      out += "," + cell(r.und ? std::optional(r.und->shape) : std::nullopt);
      out += "," + cell(r.und ? std::optional(r.und->color) : std::nullopt);
      out += "," + cell(r.und ? std::optional(r.und->position) : std::nullopt);
      out += "," + cell(r.und ? std::optional(r.und->size) : std::nullopt);
      out += "," + cell(r.final_gen_loss) + "," + cell(r.final_und_loss) + "\n";
    }
    return out;
  }
};

// UniFork against FullyShared for one seed: gen at least as good, und no
// worse than `und_margin` below.
struct TrendOutcome {
  std::uint64_t seed = 0;
  double unifork_gen = 0, shared_gen = 0, unifork_und = 0, shared_und = 0;
  bool gen_ok = false, und_ok = false;
  bool holds() const { return gen_ok && und_ok; }
};

inline std::vector<TrendOutcome> ablation_trend(const AblationReport& rep, double und_margin = 0.02) {
  std::vector<TrendOutcome> out;
  for (auto seed : rep.seeds()) {
    const auto* u = rep.find(VariantKind::UniFork, seed);
    const auto* f = rep.find(VariantKind::FullyShared, seed);
    if (!u || !f || !u->gen || !f->gen || !u->und || !f->und) continue;
    TrendOutcome t;
    t.seed = seed;
    t.unifork_gen = u->gen->overall;
    t.shared_gen = f->gen->overall;
    t.unifork_und = u->und->exact;
    t.shared_und = f->und->exact;
    t.gen_ok = t.unifork_gen >= t.shared_gen;
    t.und_ok = t.unifork_und >= t.shared_und - und_margin;
    out.push_back(t);
  }
  return out;
}

// Held-out probe scenes, from their own stream.
inline std::vector<toyworld::Scene> probe_scenes(std::uint64_t seed, std::size_t n, double two_object_fraction = 0.5) {
  Rng rng = substream(seed, "probe.scenes");
  std::vector<toyworld::Scene> out;
  for (std::size_t i = 0; i < n; ++i)
    out.push_back(toyworld::sample_scene(
        rng, uniform01(rng) < two_object_fraction ? toyworld::Curriculum::TwoObject : toyworld::Curriculum::Single));
  return out;
}

// ---------------------------------------------------------------------------
// Finite-difference check of the full model loss

struct ModelGradCheck {
  std::vector<GradCheckResult> params;
  std::size_t coords = 0;
  double max_rel_err = 0.0;
  bool pass = true;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["pass"] = pass;
    j["coords"] = coords;
    j["max_rel_err"] = max_rel_err;
    j["params"] = nlohmann::ordered_json::array();
    for (const auto& r : params)
      j["params"].push_back({{"name", r.name}, {"checked", r.checked}, {"max_rel_err", r.max_rel_err}, {"pass", r.pass}});
    return j;
  }
};

// A gen and an und sample (one of each format) drive the loss, so every
// parameter tensor receives gradient.
inline std::vector<toyworld::SequenceSample> gradcheck_batch(const ModelConfig& cfg, std::uint64_t seed) {
  toyworld::World world(cfg);
  toyworld::Lexicon lex(cfg);
  toyworld::SceneStream stream(substream(seed, "gradcheck.data")(), 1.0);
  return {toyworld::regenerate(world, lex, stream.entry(0, toyworld::Task::Gen, toyworld::Format::Pretrain), 0.0),
          toyworld::regenerate(world, lex, stream.entry(1, toyworld::Task::Und, toyworld::Format::Dialogue), 0.0)};
}

// The loss sums thousands of terms, so rounding noise in a central
// difference at h = 1e-5 reaches ~1e-10; h = 1e-4 keeps both rounding and
// truncation near 1e-12.
inline GradCheckOptions model_gradcheck_options() {
  GradCheckOptions o;
  o.step = 1e-4;
  return o;
}

inline ModelGradCheck gradcheck_model(const ForkedTransformer& source, std::uint64_t seed, std::size_t coords_per_param,
                                      GradCheckOptions opt = model_gradcheck_options()) {
  auto model = source.clone();
  model.set_all_trainable();
  const auto batch = gradcheck_batch(model.config(), seed);
  auto loss = step_loss(model, batch);
  backward(loss.total);
  auto eval = [&] {
    NoGradGuard ng;
    return step_loss(model, batch).total.value().item();
  };
  Rng rng = substream(seed, "gradcheck.coords");
  opt.max_coords = coords_per_param;
  ModelGradCheck out;
  for (const auto& name : model.parameter_names()) {
    Var p = model.param(name);
    const Tensor g = p.grad();
    auto r = check_gradient(name, p, g, eval, rng, opt);
    out.coords += r.checked;
    out.max_rel_err = std::max(out.max_rel_err, r.max_rel_err);
    out.pass = out.pass && r.pass;
    out.params.push_back(std::move(r));
  }
  return out;
}

}  // namespace unifork
