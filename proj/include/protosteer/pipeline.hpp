#pragma once

// end-to-end experiment orchestration: corpus -> lm -> activation dump ->
// sae bank -> prototypes -> fewshot eval -> steered generation reports.
// every stage writes its artifacts to disk and later stages reload them,
// so a staged cli run and a single run-all pass produce identical bytes.

#include <cstdint>
#include <string>
#include <vector>

#include "protosteer/io.hpp"
#include "protosteer/microlm.hpp"
#include "protosteer/proto.hpp"
#include "protosteer/sae.hpp"
#include "protosteer/stylegen.hpp"

namespace ps::pipeline {

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

struct EvalConfig {
  int support_per_class = 30;  // prototype support set size per class
  int prompts_per_cell = 50;   // steering eval prompts per (source, target)
  int source_class = 0;        // label whose test prompts seed the steering eval
  int max_new = 48;            // generation cap, response length + slack
  std::string selector = "response";  // pooling positions for code embedding
};

struct SweepConfig {
  std::vector<int> layers{0, 1, 2, 3};
  std::vector<double> alphas{3e-4, 3e-3, 3e-2};
  std::vector<int> latents{256, 512, 1024, 2048};
  std::vector<std::string> penalties{"l1", "l2"};
  std::vector<std::string> sites{"query", "residual"};
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  std::string out_dir = "runs/default";
  int jobs = 1;                       // worker threads for per-head sae training
  std::string mode = "recode";        // steering mode: recode | online
  std::string dump_selector = "all";  // positions written to the activation dump

  stylegen::CorpusConfig corpus;

  // lm shape; vocab and special ids derive from the corpus config
  int lm_dim = 64;
  int lm_layers = 4;
  int lm_heads = 4;
  int lm_head_dim = 16;
  int lm_context = 128;
  int hook_layer = 2;
  std::string hook_site = "query";  // query | residual

  microlm::TrainConfig lm_train;
  sae::SaeConfig sae;  // d_in and seed derive from the site and master seed
  proto::SteerConfig steer;
  EvalConfig eval;
  SweepConfig sweep;

  microlm::LmConfig lm_config() const;
  sae::SaeConfig sae_config() const;
  void validate() const;
};

ExperimentConfig default_config();
io::json config_to_json(const ExperimentConfig& cfg);
// rejects unknown keys at every nesting level
ExperimentConfig config_from_json(const io::json& j);

// applies a dotted-path override like "corpus.mix_rho=0.55" to a config json.
// the value is parsed as json when possible, otherwise taken as a string.
void apply_override(io::json& j, const std::string& assignment);

// ---------------------------------------------------------------------------
// artifact layout
// ---------------------------------------------------------------------------

struct Paths {
  std::string root;
  std::string config;        // resolved config echo
  std::string manifest;      // stage -> artifact list
  std::string specs;         // class unigram specs
  std::string train, valid, test;
  std::string lm_ckpt, lm_curve;
  std::string dump;
  std::string sae_ckpt, sae_curve, sparsity;
  std::string protos, protos_raw;
  std::string fewshot, fewshot_confusion;
  std::string steer_report, steer_traces;
  std::string report_raw, report_direct, compare;

  static Paths at(const std::string& root);
};

// ---------------------------------------------------------------------------
// steered generation
// ---------------------------------------------------------------------------

struct SteeredGen {
  std::vector<int> tokens;   // generated response tokens, eos kept if emitted
  proto::Code steered_code;  // z* from the pooled steer (recode) or mean (online)
  double mean_steps = 0.0;   // mean iterations over the steer calls made
  bool skipped = false;      // steering disabled or exact zero delta: unsteered path
  std::vector<proto::SteerTrace> traces;
};

// method: "gradient" runs ascent per the steer config, "direct" assigns the
// target prototype. mode: "recode" steers the pooled code of a draft
// generation and re-decodes with the fixed delta; "online" steers each new
// position's code independently during decoding.
SteeredGen generate_steered(const microlm::LmWeights& lm,
                            const proto::CodeSource& source,
                            const proto::PrototypeBank& protos,
                            const std::vector<int>& prompt, int target,
                            const std::string& mode,
                            const proto::SteerConfig& steer_cfg, int max_new,
                            const std::string& method = "gradient");

// ---------------------------------------------------------------------------
// reports
// ---------------------------------------------------------------------------

struct CellReport {
  int source = 0;
  int target = 0;
  std::vector<std::int64_t> steered_counts;    // judge class counts, steered
  std::vector<std::int64_t> unsteered_counts;  // judge class counts, unsteered
  double steered_frac = 0.0;                   // fraction judged == target
  double unsteered_frac = 0.0;
  double mean_iters = 0.0;
  double mean_margin = 0.0;    // mean (ll[target] - best other ll) on steered text
  double code_variance = 0.0;  // mean per-dim variance of z* across examples
};

struct SteerReport {
  std::string method;  // gradient | direct
  std::string source_kind;
  std::string mode;
  int prompts = 0;
  std::vector<CellReport> cells;
};

SteerReport eval_steering(const microlm::LmWeights& lm,
                          const proto::CodeSource& source,
                          const proto::PrototypeBank& protos,
                          const std::vector<stylegen::StyledExample>& test,
                          const std::vector<stylegen::StyleSpec>& specs,
                          const ExperimentConfig& cfg, const std::string& method,
                          const std::string& traces_path = "");

void save_steer_report(const std::string& path, const SteerReport& report);

// judge class of a generated token stream: trailing eos stripped, an empty
// remainder falls back to judging the eos token itself.
int judge_generated(const std::vector<int>& tokens,
                    const std::vector<stylegen::StyleSpec>& specs, int eos_id);

// ---------------------------------------------------------------------------
// stages
// ---------------------------------------------------------------------------

void stage_gen_data(const ExperimentConfig& cfg);
void stage_train_lm(const ExperimentConfig& cfg);
void stage_dump_acts(const ExperimentConfig& cfg);
void stage_train_sae(const ExperimentConfig& cfg);
void stage_build_protos(const ExperimentConfig& cfg);
void stage_eval_fewshot(const ExperimentConfig& cfg);
void stage_eval_steer(const ExperimentConfig& cfg);
void stage_baselines(const ExperimentConfig& cfg);
void run_end_to_end(const ExperimentConfig& cfg);

// sweeps one axis: layer | alpha | latent | penalty | site. per-value failures
// are recorded in the collated csv and the sweep continues.
void run_sweep(const ExperimentConfig& cfg, const std::string& axis);

// loads the artifacts a code source needs from cfg.out_dir. the CodeSource
// borrows pointers into this object, so build it fresh via source() after any
// move and keep the LoadedSource alive while the source is in use.
struct LoadedSource {
  microlm::LmWeights lm;
  sae::HeadBank bank;  // unused for raw kinds
  proto::SourceKind kind = proto::SourceKind::SaeQuery;
  microlm::PositionSelector selector = microlm::PositionSelector::ResponseOnly;

  proto::CodeSource source() const;
};
LoadedSource load_source(const ExperimentConfig& cfg, const std::string& kind);

}  // namespace ps::pipeline
