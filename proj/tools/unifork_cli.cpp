#include <iostream>
#include <sstream>
#include <string>

#include "CLI11.hpp"

#include "unifork/commands.hpp"

using namespace unifork;

namespace {

std::vector<std::uint64_t> parse_seed_list(const std::string& s) {
  std::vector<std::uint64_t> out;
  std::stringstream in(s);
  std::string tok;
  while (std::getline(in, tok, ',')) {
    if (tok.empty()) continue;
    std::size_t used = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(tok, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != tok.size()) throw UsageError("bad seed: " + tok);
    out.push_back(v);
  }
  if (out.empty()) throw UsageError("empty seed list");
  return out;
}

std::vector<toyworld::Task> parse_tasks(const std::string& s) {
  if (s == "gen") return {toyworld::Task::Gen};
  if (s == "und") return {toyworld::Task::Und};
  if (s == "both") return {toyworld::Task::Gen, toyworld::Task::Und};
  throw UsageError("--task must be gen, und or both");
}

void add_model_source(CLI::App* cmd, ModelSource& m) {
  cmd->add_option("--checkpoint", m.checkpoint, "Model checkpoint (.bin with .json sidecar)");
  cmd->add_option("--config", m.config, "Model config JSON, used without --checkpoint");
  cmd->add_option("--seed", m.seed, "Root seed");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"UniFork toy-world pipeline"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string name;
  bool overwrite = false;
  app.add_option("--name", name, "Output directory name under $UNIFORK_OUT (default: subcommand)");
  app.add_flag("--overwrite", overwrite, "Replace an existing output directory");

  GradcheckOptions gc;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient check of the full model");
  add_model_source(gradcheck, gc.model);
  gradcheck->add_option("--coords-per-param", gc.coords_per_param, "Sampled coordinates per parameter tensor");

  TrainOptions tr;
  std::string variant = "unifork";
  std::size_t train_steps = 0, train_batch = 0;
  auto* train = app.add_subcommand("train", "Run stages I through III");
  train->add_option("--config", tr.model_config, "Model config JSON");
  train->add_option("--stages", tr.stage_config, "Stage plan file")->required();
  train->add_option("--variant", variant, "gen_expert | und_expert | fully_shared | unifork");
  train->add_option("--seed", tr.seed, "Root seed");
  train->add_option("--steps", train_steps, "Override steps of every stage");
  train->add_option("--batch-size", train_batch, "Override batch size of every stage");

  AblateOptions ab;
  std::string seeds;
  std::size_t ablate_steps = 0;
  bool no_ckpt = false;
  auto* ablate = app.add_subcommand("ablate", "Train and evaluate the four variants");
  ablate->add_option("--config", ab.config, "Ablation config JSON");
  ablate->add_option("--seeds", seeds, "Comma-separated seed list");
  ablate->add_option("--steps", ablate_steps, "Steps per unified variant");
  ablate->add_flag("--no-checkpoints", no_ckpt, "Skip writing variant checkpoints");

  ProbeOptions pr;
  std::string task = "both", metric = "euclidean";
  auto* probe_cmd = app.add_subcommand("probe", "Layer-wise mutual-kNN alignment curves");
  add_model_source(probe_cmd, pr.model);
  probe_cmd->add_option("--task", task, "gen | und | both");
  probe_cmd->add_option("--k", pr.probe.k, "Neighbours");
  probe_cmd->add_option("--prompts", pr.probe.prompt_count, "Number of probe scenes");
  probe_cmd->add_option("--metric", metric, "euclidean | cosine");
  probe_cmd->add_flag("--per-layer-text", pr.probe.per_layer_text, "Compare against same-layer text features");
  probe_cmd->add_option("--scene-seed", pr.scene_seed, "Seed of the probe scene stream");

  SampleOptions sa;
  bool greedy = false;
  auto* sample = app.add_subcommand("sample", "Dump sampled grids");
  add_model_source(sample, sa.model);
  sample->add_option("--cfg-scale", sa.sampler.cfg_scale, "Guidance scale");
  sample->add_option("--temperature", sa.sampler.temperature, "Sampling temperature");
  sample->add_option("--top-k", sa.sampler.top_k, "Top-k cutoff, 0 for none");
  sample->add_flag("--greedy", greedy, "Argmax decoding");
  sample->add_option("--n-per-prompt", sa.n_per_prompt, "Samples per prompt");
  sample->add_option("--prompts", sa.prompts, "Random prompts when no suite is given");
  sample->add_option("--suite", sa.suite, "JSON lines of scenes");
  sample->add_option("--scene-seed", sa.scene_seed, "Seed of the random prompt stream");
  sample->add_option("--sample-seed", sa.sampler.seed, "Sampler seed");

  EvalOptions ev;
  auto* eval = app.add_subcommand("eval", "Generation and understanding reports");
  eval->add_option("--checkpoint", ev.model.checkpoint, "Model checkpoint");
  eval->add_option("--config", ev.model.config, "Model config JSON, used without --checkpoint");
  eval->add_option("--seed", ev.seed, "Evaluation seed");
  eval->add_option("--cfg-scale", ev.eval.cfg_scale, "Guidance scale");
  eval->add_option("--temperature", ev.eval.temperature, "Sampling temperature");
  eval->add_option("--top-k", ev.eval.top_k, "Top-k cutoff, 0 for none");
  eval->add_option("--n-per-prompt", ev.eval.n_per_prompt, "Samples per prompt");
  eval->add_option("--prompts-per-factor", ev.eval.prompts_per_factor, "Prompts per factor");
  eval->add_option("--und-scenes", ev.eval.und_scenes, "Captioning scenes");
  eval->add_option("--suite", ev.suite, "JSON lines {factor, scene}");

  std::string command = "unifork";
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << error_record(command, UsageError(e.what())).dump() << "\n";
    return 2;
  }

  try {
    const auto* sub = app.get_subcommands().front();
    command = sub->get_name();
    OutputDir out(output_root(), name.empty() ? command : name, overwrite);
    nlohmann::ordered_json result;
    if (sub == gradcheck) {
      result = cmd_gradcheck(gc, out);
    } else if (sub == train) {
      tr.variant = parse_variant(variant);
      if (train_steps) tr.steps = train_steps;
      if (train_batch) tr.batch_size = train_batch;
      result = cmd_train(tr, out);
    } else if (sub == ablate) {
      if (!seeds.empty()) ab.seeds = parse_seed_list(seeds);
      if (ablate_steps) ab.steps = ablate_steps;
      ab.checkpoints = !no_ckpt;
      result = cmd_ablate(ab, out);
    } else if (sub == probe_cmd) {
      pr.tasks = parse_tasks(task);
      pr.probe.metric = parse_metric(metric);
      result = cmd_probe(pr, out);
    } else if (sub == sample) {
      sa.sampler.greedy = greedy;
      result = cmd_sample(sa, out);
    } else {
      result = cmd_eval(ev, out);
    }
    result["output"] = out.final_path().string();
    std::cout << result.dump() << "\n";
    if (sub == gradcheck && result["status"] != "pass") return 1;
    return 0;
  } catch (const UsageError& e) {
    std::cerr << error_record(command, e).dump() << "\n";
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << error_record(command, e).dump() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << error_record(command, e).dump() << "\n";
    return 1;
  }
}
