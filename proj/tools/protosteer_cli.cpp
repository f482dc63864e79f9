// command line front end: every pipeline stage as a subcommand plus a
// single-prompt steer command. all numeric work lives in the library; this
// file only resolves configs and dispatches.

#include <cstdint>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "protosteer/io.hpp"
#include "protosteer/pipeline.hpp"
#include "protosteer/proto.hpp"

namespace {

using namespace ps;

struct CommonOpts {
  std::string config;
  std::vector<std::string> sets;
  std::string out;
  std::int64_t seed = -1;
  int jobs = 0;
  std::string mode;
};

void add_common(CLI::App* cmd, CommonOpts& o) {
  cmd->add_option("--config", o.config, "json config file")->check(CLI::ExistingFile);
  cmd->add_option("--set", o.sets, "dotted override, e.g. corpus.mix_rho=0.5 (repeatable)");
  cmd->add_option("--out", o.out, "run directory (overrides out_dir)");
  cmd->add_option("--seed", o.seed, "master seed");
  cmd->add_option("--jobs", o.jobs, "worker threads for per-head training");
  cmd->add_option("--mode", o.mode, "steering mode: recode | online");
}

pipeline::ExperimentConfig resolve(const CommonOpts& o) {
  io::json j = o.config.empty() ? pipeline::config_to_json(pipeline::default_config())
                                : io::load_json(o.config);
  for (const auto& s : o.sets) pipeline::apply_override(j, s);
  if (!o.out.empty()) j["out_dir"] = o.out;
  if (o.seed >= 0) j["seed"] = static_cast<std::uint64_t>(o.seed);
  if (o.jobs > 0) j["jobs"] = o.jobs;
  if (!o.mode.empty()) j["mode"] = o.mode;
  return pipeline::config_from_json(j);
}

std::vector<int> read_prompt_file(const std::string& path) {
  std::istringstream in(io::read_text(path));
  std::vector<int> tokens;
  int t = 0;
  while (in >> t) tokens.push_back(t);
  if (tokens.empty()) {
    throw std::runtime_error("prompt file '" + path + "' contains no tokens");
  }
  return tokens;
}

int resolve_target(const std::string& target, const std::vector<stylegen::StyleSpec>& specs) {
  try {
    size_t used = 0;
    const int id = std::stoi(target, &used);
    if (used == target.size()) return id;
  } catch (const std::exception&) {
    // falls through to name lookup
  }
  std::string names;
  for (const auto& s : specs) {
    if (s.name == target) return s.class_id;
    if (!names.empty()) names += ", ";
    names += s.name;
  }
  throw std::runtime_error("unknown target class '" + target + "' (known: " + names + ")");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"prototype-guided latent steering workbench"};
  app.require_subcommand(1);

  CommonOpts common;

  auto* gen_data = app.add_subcommand("gen-data", "generate the styled corpus and class specs");
  add_common(gen_data, common);
  gen_data->callback([&] { pipeline::stage_gen_data(resolve(common)); });

  auto* train_lm = app.add_subcommand("train-lm", "train the decoder-only model on the corpus");
  add_common(train_lm, common);
  train_lm->callback([&] { pipeline::stage_train_lm(resolve(common)); });

  auto* dump_acts = app.add_subcommand("dump-acts", "dump hook-site activations for the train split");
  add_common(dump_acts, common);
  dump_acts->callback([&] { pipeline::stage_dump_acts(resolve(common)); });

  auto* train_sae = app.add_subcommand("train-sae", "train the per-head autoencoder bank on a dump");
  add_common(train_sae, common);
  train_sae->callback([&] { pipeline::stage_train_sae(resolve(common)); });

  auto* build_protos = app.add_subcommand("build-protos", "build class prototypes in code space");
  add_common(build_protos, common);
  build_protos->callback([&] { pipeline::stage_build_protos(resolve(common)); });

  auto* eval_fewshot = app.add_subcommand("eval-fewshot", "prototype classification on the test split");
  add_common(eval_fewshot, common);
  eval_fewshot->callback([&] { pipeline::stage_eval_fewshot(resolve(common)); });

  auto* eval_steer = app.add_subcommand("eval-steer", "steered-generation report over test prompts");
  add_common(eval_steer, common);
  eval_steer->callback([&] { pipeline::stage_eval_steer(resolve(common)); });

  auto* baselines = app.add_subcommand("baselines", "raw-query and direct-assignment comparisons");
  add_common(baselines, common);
  baselines->callback([&] { pipeline::stage_baselines(resolve(common)); });

  auto* run_all = app.add_subcommand("run-all", "full pipeline: corpus through reports");
  add_common(run_all, common);
  run_all->callback([&] { pipeline::run_end_to_end(resolve(common)); });

  std::string sweep_axis;
  auto* sweep = app.add_subcommand("sweep", "rerun downstream stages along one config axis");
  add_common(sweep, common);
  sweep->add_option("--axis", sweep_axis, "layer | alpha | latent | penalty | site")->required();
  sweep->callback([&] { pipeline::run_sweep(resolve(common), sweep_axis); });

  std::string prompt_file, target, source_kind, method = "gradient", out_file;
  int max_new = -1;
  auto* steer = app.add_subcommand("steer", "steer one prompt toward a target class");
  add_common(steer, common);
  steer->add_option("--prompt-file", prompt_file, "whitespace-separated prompt token ids")
      ->required()
      ->check(CLI::ExistingFile);
  steer->add_option("--target", target, "target class name or id")->required();
  steer->add_option("--source", source_kind, "sae-query | raw-query | sae-residual");
  steer->add_option("--method", method, "gradient | direct");
  steer->add_option("--max-new", max_new, "generation cap (defaults to eval.max_new)");
  steer->add_option("--out-file", out_file, "write generated tokens here, one per line");
  steer->callback([&] {
    const auto cfg = resolve(common);
    const auto p = pipeline::Paths::at(cfg.out_dir);
    const std::string kind =
        source_kind.empty() ? (cfg.hook_site == "query" ? "sae-query" : "sae-residual") : source_kind;

    const auto loaded = pipeline::load_source(cfg, kind);
    const auto source = loaded.source();
    const auto protos = proto::load_prototypes(
        source.kind == proto::SourceKind::RawQuery ? p.protos_raw : p.protos);
    const auto specs = io::load_specs(p.specs);
    const auto prompt = read_prompt_file(prompt_file);
    const int target_id = resolve_target(target, specs);

    proto::SteerConfig sc = cfg.steer;
    if (source.kind == proto::SourceKind::RawQuery) sc.nonneg = false;
    const int cap = max_new > 0 ? max_new : cfg.eval.max_new;

    const auto sg = pipeline::generate_steered(loaded.lm, source, protos, prompt, target_id,
                                               cfg.mode, sc, cap, method);
    if (!out_file.empty()) {
      std::string text;
      for (int t : sg.tokens) {
        text += std::to_string(t);
        text += '\n';
      }
      io::write_text(out_file, text);
    }
    const int judged = pipeline::judge_generated(sg.tokens, specs, loaded.lm.cfg.eos_token);
    std::cout << "[steer] target=" << target_id << " method=" << method << " mode=" << cfg.mode
              << " tokens=" << sg.tokens.size() << " steps=" << io::fmt(sg.mean_steps, 2)
              << " skipped=" << (sg.skipped ? 1 : 0) << " judged=" << specs[judged].name << "\n";
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
