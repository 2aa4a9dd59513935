#pragma once

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "unifork/experiment.hpp"

namespace unifork {

namespace fs = std::filesystem;

class UsageError : public Error {
 public:
  using Error::Error;
};

inline const char* error_kind(const std::exception& e) {
  if (dynamic_cast<const UsageError*>(&e)) return "usage";
  if (dynamic_cast<const ConfigError*>(&e)) return "config";
  if (dynamic_cast<const DimensionError*>(&e)) return "dimension";
  if (dynamic_cast<const VocabularyError*>(&e)) return "vocabulary";
  if (dynamic_cast<const Error*>(&e)) return "runtime";
  return "internal";
}

inline nlohmann::ordered_json error_record(const std::string& command, const std::exception& e) {
  nlohmann::ordered_json j;
  j["status"] = "error";
  j["command"] = command;
  j["kind"] = error_kind(e);
  j["message"] = e.what();
  return j;
}

inline std::string output_root() {
  const char* env = std::getenv("UNIFORK_OUT");
  return env && *env ? env : "out";
}

// Files are staged in a hidden sibling directory and moved into place by a
// single rename, so a reader never sees a half-written result.
class OutputDir {
 public:
  OutputDir(const fs::path& root, const std::string& name, bool overwrite)
      : final_(root / name), staging_(root / ("." + name + ".partial")), overwrite_(overwrite) {
    if (name.empty() || name.find('/') != std::string::npos || name.front() == '.')
      throw UsageError("bad output name: " + name);
    if (fs::exists(final_) && !overwrite_) throw UsageError("output " + final_.string() + " exists (use --overwrite)");
    fs::create_directories(root);
    fs::remove_all(staging_);
    fs::create_directory(staging_);
  }
  OutputDir(const OutputDir&) = delete;
  OutputDir& operator=(const OutputDir&) = delete;
  ~OutputDir() {
    std::error_code ec;
    if (!committed_) fs::remove_all(staging_, ec);
  }

  fs::path path(const std::string& rel) const {
    auto p = staging_ / rel;
    fs::create_directories(p.parent_path());
    return p;
  }

  void write(const std::string& rel, const std::string& content) const {
    std::ofstream f(path(rel), std::ios::binary);
    f << content;
    if (!f) throw Error("cannot write " + rel);
  }

  void write_json(const std::string& rel, const nlohmann::ordered_json& j) const { write(rel, j.dump(2) + "\n"); }

  const fs::path& final_path() const { return final_; }

  void commit() {
    if (fs::exists(final_)) {
      if (!overwrite_) throw UsageError("output " + final_.string() + " appeared while running");
      const auto old = final_.parent_path() / ("." + final_.filename().string() + ".old");
      fs::remove_all(old);
      fs::rename(final_, old);
      fs::rename(staging_, final_);
      fs::remove_all(old);
    } else {
      fs::rename(staging_, final_);
    }
    committed_ = true;
  }

 private:
  fs::path final_, staging_;
  bool overwrite_;
  bool committed_ = false;
};

inline std::string read_text(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline nlohmann::json read_json(const std::string& path) {
  try {
    return nlohmann::json::parse(read_text(path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("bad JSON in " + path + ": " + e.what());
  }
}

// Loads a checkpoint, or builds a fresh model when none is given.
struct ModelSource {
  std::string checkpoint;
  std::string config;  // model JSON, used when there is no checkpoint
  std::uint64_t seed = 1;

  ForkedTransformer load() const {
    if (!checkpoint.empty()) {
      if (!fs::exists(checkpoint)) throw ConfigError("checkpoint not found: " + checkpoint);
      return ForkedTransformer::load(checkpoint);
    }
    ModelConfig cfg = config.empty() ? ModelConfig{} : load_model_config(config);
    return ForkedTransformer(cfg, substream(seed, "init")());
  }

  nlohmann::ordered_json to_json() const {
    return {{"checkpoint", checkpoint}, {"config", config}, {"seed", seed}};
  }
};

// ---------------------------------------------------------------------------
// gradcheck

struct GradcheckOptions {
  ModelSource model;
  std::size_t coords_per_param = 16;
  double tolerance = 1e-4;
};

inline nlohmann::ordered_json cmd_gradcheck(const GradcheckOptions& o, OutputDir& out) {
  const auto m = o.model.load();
  GradCheckOptions gopt = model_gradcheck_options();
  gopt.tolerance = o.tolerance;
  const auto r = gradcheck_model(m, o.model.seed, o.coords_per_param, gopt);
  auto j = r.to_json();
  out.write_json("gradcheck.json", j);
  out.commit();
  return {{"status", r.pass ? "pass" : "fail"}, {"coords", r.coords}, {"max_rel_err", r.max_rel_err}};
}

// ---------------------------------------------------------------------------
// train

struct TrainOptions {
  std::string model_config;
  std::string stage_config;
  VariantKind variant = VariantKind::UniFork;
  std::uint64_t seed = 1;
  std::optional<std::size_t> steps;  // replaces every stage's step count
  std::optional<std::size_t> batch_size;
};

inline nlohmann::ordered_json cmd_train(const TrainOptions& o, OutputDir& out) {
  if (o.stage_config.empty()) throw UsageError("train needs --stages");
  auto plans = load_table1_config(o.stage_config);
  ModelConfig base = o.model_config.empty() ? ModelConfig{} : load_model_config(o.model_config);
  const auto v = make_variant(o.variant, base);
  TrainState st(ForkedTransformer(v.model, substream(o.seed, "init")()), o.seed);
  DataSpec data;
  data.seed = o.seed;
  nlohmann::ordered_json stages = nlohmann::ordered_json::array();
  for (auto plan : plans) {
    if (o.steps) plan.steps = *o.steps;
    if (o.batch_size) plan.batch_size = *o.batch_size;
    if (plan.context_length && plan.context_length < v.model.max_seq_len)
      throw ConfigError(std::string("stage ") + stage_name(plan.stage) + " context_length below max_seq_len");
    // Experts skip the other task's stage and see only their own data.
    if ((plan.stage == Stage::IIIGen && !v.trains_gen) || (plan.stage == Stage::IIIUnd && !v.trains_und)) continue;
    StageOptions so;
    if (!v.trains_und) so.gen_fraction = 1.0;
    if (!v.trains_gen) so.gen_fraction = 0.0;
    const auto first = st.log.size();
    apply_stage(plan, st, data, so);
    const std::string name = stage_name(plan.stage);
    st.save(out.path("checkpoints/stage_" + name + ".state").string());
    std::vector<LogRow> rows(st.log.begin() + static_cast<std::ptrdiff_t>(first), st.log.end());
    nlohmann::ordered_json s;
    s["stage"] = name;
    s["steps"] = plan.steps;
    s["final_gen_loss"] = final_loss(rows, "gen") ? nlohmann::ordered_json(*final_loss(rows, "gen")) : nullptr;
    s["final_und_loss"] = final_loss(rows, "und") ? nlohmann::ordered_json(*final_loss(rows, "und")) : nullptr;
    stages.push_back(s);
  }
  st.model.save(out.path("model.bin").string());
  out.write("train_log.csv", log_csv(st.log));
  nlohmann::ordered_json summary;
  summary["status"] = "ok";
  summary["variant"] = variant_name(o.variant);
  summary["seed"] = o.seed;
  summary["total_steps"] = st.step;
  summary["stages"] = stages;
  out.write_json("summary.json", summary);
  out.commit();
  return summary;
}

// ---------------------------------------------------------------------------
// ablate

struct AblateOptions {
  std::string config;
  std::optional<std::vector<std::uint64_t>> seeds;
  std::optional<std::size_t> steps;
  bool checkpoints = true;
};

inline nlohmann::ordered_json cmd_ablate(const AblateOptions& o, OutputDir& out) {
  auto a = o.config.empty() ? AblationConfig{} : parse_ablation_config(read_json(o.config));
  if (o.seeds) a.seeds = *o.seeds;
  if (o.steps) {
    if (*o.steps < 2) throw ConfigError("ablation needs steps >= 2");
    a.steps = *o.steps;
  }
  AblationReport rep;
  std::string curves = curve_csv_header();
  nlohmann::ordered_json shapes = nlohmann::ordered_json::array();
  std::string logs = "variant,seed,step,stage,task,loss,lr\n";
  for (auto seed : a.seeds) {
    for (auto kind : a.variants) {
      auto tv = train_variant(a, kind, seed);
      const std::string tag = std::string(variant_name(kind)) + "_seed" + std::to_string(seed);
      if (o.checkpoints) tv.state.model.save(out.path("checkpoints/" + tag + ".bin").string());
      for (const auto& r : tv.state.log)
        logs += std::string(variant_name(kind)) + "," + std::to_string(seed) + "," + std::to_string(r.step) + "," +
                r.stage + "," + r.task + "," + format_double(r.loss) + "," + format_double(r.lr) + "\n";
      // Experts get the alignment probe on their own task.
      if (kind == VariantKind::GenExpert || kind == VariantKind::UndExpert) {
        const auto task = kind == VariantKind::GenExpert ? toyworld::Task::Gen : toyworld::Task::Und;
        const auto scenes = probe_scenes(substream(seed, "probe")(), a.probe.prompt_count, a.two_object_fraction);
        const auto curve = probe(tv.state.model, task, scenes, a.probe);
        curves += curve_csv_rows(curve);
        auto sj = curve_shape_json(curve);
        nlohmann::ordered_json row;
        row["variant"] = variant_name(kind);
        row["seed"] = seed;
        for (auto it = sj.begin(); it != sj.end(); ++it) row[it.key()] = it.value();
        shapes.push_back(row);
      }
      rep.rows.push_back(std::move(tv.result));
    }
  }
  const auto trend = ablation_trend(rep);
  nlohmann::ordered_json tj = nlohmann::ordered_json::array();
  std::size_t holds = 0;
  for (const auto& t : trend) {
    holds += t.holds();
    tj.push_back({{"seed", t.seed},
                  {"unifork_gen", t.unifork_gen},
                  {"fully_shared_gen", t.shared_gen},
                  {"unifork_und", t.unifork_und},
                  {"fully_shared_und", t.shared_und},
                  {"gen_ok", t.gen_ok},
                  {"und_ok", t.und_ok},
                  {"holds", t.holds()}});
  }
  auto report = rep.to_json();
  report["trend"] = tj;
  report["trend_holds"] = holds;
  report["alignment"] = shapes;
  out.write_json("ablation.json", report);
  out.write("ablation.csv", rep.csv());
  out.write("train_log.csv", logs);
  out.write("alignment.csv", curves);
  out.commit();
  nlohmann::ordered_json s;
  s["status"] = "ok";
  s["rows"] = rep.rows.size();
  s["trend_holds"] = holds;
  s["seeds"] = trend.size();
  return s;
}

// ---------------------------------------------------------------------------
// probe

struct ProbeOptions {
  ModelSource model;
  std::vector<toyworld::Task> tasks{toyworld::Task::Gen, toyworld::Task::Und};
  ProbeConfig probe;
  std::uint64_t scene_seed = 1;
};

inline nlohmann::ordered_json cmd_probe(const ProbeOptions& o, OutputDir& out) {
  const auto m = o.model.load();
  if (o.probe.prompt_count < 2) throw ConfigError("probe needs at least 2 prompts");
  const auto scenes = probe_scenes(o.scene_seed, o.probe.prompt_count);
  std::string csv = curve_csv_header();
  nlohmann::ordered_json shapes;
  for (auto task : o.tasks) {
    const auto curve = probe(m, task, scenes, o.probe);
    csv += curve_csv_rows(curve);
    shapes[toyworld::task_name(task)] = curve_shape_json(curve);
  }
  out.write("alignment.csv", csv);
  out.write_json("alignment_shape.json", shapes);
  out.commit();
  nlohmann::ordered_json s;
  s["status"] = "ok";
  s["shapes"] = shapes;
  return s;
}

// ---------------------------------------------------------------------------
// sample

struct SampleOptions {
  ModelSource model;
  SamplerConfig sampler;
  std::size_t prompts = 4;
  std::size_t n_per_prompt = 1;
  std::string suite;  // JSON lines of scenes; drawn at random when empty
  std::uint64_t scene_seed = 1;
};

inline std::vector<toyworld::Scene> read_scene_lines(const std::string& path) {
  std::vector<toyworld::Scene> out;
  std::istringstream in(read_text(path));
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto j = nlohmann::json::parse(line);
      out.push_back(toyworld::scene_from_json(j.contains("scene") ? j.at("scene") : j));
    } catch (const std::exception& e) {
      throw ConfigError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (out.empty()) throw ConfigError("no scenes in " + path);
  return out;
}

inline nlohmann::ordered_json cmd_sample(const SampleOptions& o, OutputDir& out) {
  o.sampler.validate();
  const auto m = o.model.load();
  const auto& cfg = m.config();
  toyworld::World world(cfg);
  const auto scenes = o.suite.empty() ? probe_scenes(o.scene_seed, o.prompts) : read_scene_lines(o.suite);
  nlohmann::ordered_json items = nlohmann::ordered_json::array();
  std::string art;
  std::size_t parsed_ok = 0, exact = 0;
  for (std::size_t p = 0; p < scenes.size(); ++p) {
    for (std::size_t k = 0; k < o.n_per_prompt; ++k) {
      Rng rng = sample_rng(o.sampler.seed, p, k);
      const auto g = sample_image(m, &scenes[p], o.sampler, rng);
      const auto parsed = world.parse(g);
      parsed_ok += parsed.has_value();
      exact += parsed && *parsed == scenes[p];
      nlohmann::ordered_json it;
      it["prompt"] = p;
      it["replica"] = k;
      it["scene"] = toyworld::scene_to_json(scenes[p]);
      it["grid"] = g.cells;
      it["parsed"] = parsed ? nlohmann::ordered_json(toyworld::scene_to_json(*parsed)) : nlohmann::ordered_json(nullptr);
      items.push_back(it);
      toyworld::Lexicon lex(cfg);
      std::string caption;
      for (int id : toyworld::describe(lex, scenes[p])) caption += (caption.empty() ? "" : " ") + lex.word(id);
      art += "# prompt " + std::to_string(p) + " replica " + std::to_string(k) + ": " + caption + "\n";
      art += grid_art(g, cfg.image_codebook) + "\n";
    }
  }
  nlohmann::ordered_json j;
  j["sampler"] = {{"cfg_scale", o.sampler.cfg_scale},
                  {"temperature", o.sampler.temperature},
                  {"top_k", o.sampler.top_k},
                  {"greedy", o.sampler.greedy},
                  {"seed", o.sampler.seed}};
  j["samples"] = items;
  out.write_json("samples.json", j);
  out.write("samples.txt", art);
  out.commit();
  return {{"status", "ok"}, {"samples", items.size()}, {"parsed", parsed_ok}, {"exact", exact}};
}

// ---------------------------------------------------------------------------
// eval

struct EvalOptions {
  ModelSource model;
  EvalSettings eval;
  std::uint64_t seed = 1;
  std::string suite;  // JSON lines {"factor", "scene"}; drawn from seed when empty
};

inline PromptSuite read_suite(const std::string& path) {
  PromptSuite s;
  std::istringstream in(read_text(path));
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto j = nlohmann::json::parse(line);
      const auto name = j.at("factor").get<std::string>();
      std::optional<GenFactor> f;
      for (auto g : kGenFactors)
        if (name == factor_name(g)) f = g;
      if (!f) throw ConfigError("unknown factor " + name);
      s.prompts.emplace_back(*f, toyworld::scene_from_json(j.at("scene")));
    } catch (const std::exception& e) {
      throw ConfigError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (s.prompts.empty()) throw ConfigError("no prompts in " + path);
  return s;
}

inline nlohmann::ordered_json cmd_eval(const EvalOptions& o, OutputDir& out) {
  const auto m = o.model.load();
  const std::uint64_t eval_seed = substream(o.seed, "eval")();
  const auto suite = o.suite.empty() ? make_suite(eval_seed, o.eval.prompts_per_factor) : read_suite(o.suite);
  const auto sc = eval_sampler(o.eval, o.seed);
  sc.validate();
  const auto gen = score_generation(m, suite, o.eval.n_per_prompt, sc);
  const auto und = score_understanding(m, make_und_suite(eval_seed, o.eval.und_scenes));
  std::string lines;
  for (const auto& [f, s] : suite.prompts) lines += suite_line(f, s).dump() + "\n";
  nlohmann::ordered_json j;
  j["gen"] = gen.to_json();
  j["und"] = und.to_json();
  out.write_json("eval.json", j);
  out.write("suite.jsonl", lines);
  out.commit();
  nlohmann::ordered_json s;
  s["status"] = "ok";
  s["gen_overall"] = gen.overall;
  s["und_exact"] = und.exact;
  return s;
}

}  // namespace unifork
