#include "protosteer/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <map>
#include <stdexcept>
#include <utility>

#include "protosteer/rng.hpp"

namespace ps::pipeline {

namespace fs = std::filesystem;
using numkit::Tensor;

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

namespace {

// corpus config with the master seed applied; the per-stage streams derive
// from it inside stylegen
stylegen::CorpusConfig corpus_cfg(const ExperimentConfig& c) {
  stylegen::CorpusConfig cc = c.corpus;
  cc.seed = c.seed;
  return cc;
}

microlm::TrainConfig lm_train_cfg(const ExperimentConfig& c) {
  microlm::TrainConfig tc = c.lm_train;
  tc.seed = c.seed;
  return tc;
}

void check_keys(const io::json& j, std::initializer_list<const char*> allowed,
                const std::string& ctx) {
  if (!j.is_object()) {
    throw std::invalid_argument("config: expected an object at '" + (ctx.empty() ? "<root>" : ctx) + "'");
  }
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* k : allowed) {
      if (it.key() == k) {
        known = true;
        break;
      }
    }
    if (!known) throw std::invalid_argument("config: unknown key '" + ctx + it.key() + "'");
  }
}

template <typename T>
void maybe(const io::json& j, const char* key, T& out) {
  if (j.contains(key)) j.at(key).get_to(out);
}

}  // namespace

microlm::LmConfig ExperimentConfig::lm_config() const {
  microlm::LmConfig c;
  c.vocab = corpus.vocab_size();
  c.dim = lm_dim;
  c.layers = lm_layers;
  c.heads = lm_heads;
  c.head_dim = lm_head_dim;
  c.context = lm_context;
  c.hook_layer = hook_layer;
  c.hook_site = hook_site;
  c.bos_token = corpus.bos();
  c.eos_token = corpus.eos();
  c.sep_token = corpus.sep();
  return c;
}

sae::SaeConfig ExperimentConfig::sae_config() const {
  sae::SaeConfig c = sae;
  c.d_in = lm_config().hook_width();
  c.seed = derive_seed(seed, "sae");
  return c;
}

void ExperimentConfig::validate() const {
  if (out_dir.empty()) throw std::invalid_argument("config: out_dir must not be empty");
  if (jobs < 1) throw std::invalid_argument("config: jobs must be at least 1");
  if (mode != "recode" && mode != "online") {
    throw std::invalid_argument("config: mode must be 'recode' or 'online', got '" + mode + "'");
  }
  microlm::selector_from_string(dump_selector);
  microlm::selector_from_string(eval.selector);
  lm_config().validate();
  sae_config().validate();
  if (steer.eta < 0.0 || !std::isfinite(steer.eta)) {
    throw std::invalid_argument("config: steer.eta must be finite and nonnegative");
  }
  if (steer.max_iters < 0) throw std::invalid_argument("config: steer.max_iters must be nonnegative");
  if (steer.distance != "l2" && steer.distance != "sq") {
    throw std::invalid_argument("config: steer.distance must be 'l2' or 'sq'");
  }
  if (eval.support_per_class < 1) throw std::invalid_argument("config: eval.support_per_class must be positive");
  if (eval.prompts_per_cell < 1) throw std::invalid_argument("config: eval.prompts_per_cell must be positive");
  if (eval.max_new < 1) throw std::invalid_argument("config: eval.max_new must be positive");
  if (eval.source_class < 0 || eval.source_class >= corpus.num_classes) {
    throw std::invalid_argument("config: eval.source_class out of range for " +
                                std::to_string(corpus.num_classes) + " classes");
  }
}

ExperimentConfig default_config() { return ExperimentConfig{}; }

io::json config_to_json(const ExperimentConfig& c) {
  io::json j;
  j["seed"] = c.seed;
  j["out_dir"] = c.out_dir;
  j["jobs"] = c.jobs;
  j["mode"] = c.mode;
  j["dump_selector"] = c.dump_selector;
  j["corpus"] = {{"num_classes", c.corpus.num_classes},
                 {"content_tokens", c.corpus.content_tokens},
                 {"marker_block", c.corpus.marker_block},
                 {"marker_weight", c.corpus.marker_weight},
                 {"smoothing_floor", c.corpus.smoothing_floor},
                 {"prompt_len_min", c.corpus.prompt_len_min},
                 {"prompt_len_max", c.corpus.prompt_len_max},
                 {"response_len_min", c.corpus.response_len_min},
                 {"response_len_max", c.corpus.response_len_max},
                 {"mix_rho", c.corpus.mix_rho},
                 {"split_train", c.corpus.split_train},
                 {"split_valid", c.corpus.split_valid},
                 {"split_test", c.corpus.split_test},
                 {"corpus_size", c.corpus.corpus_size}};
  j["lm"] = {{"dim", c.lm_dim},         {"layers", c.lm_layers},
             {"heads", c.lm_heads},     {"head_dim", c.lm_head_dim},
             {"context", c.lm_context}, {"hook_layer", c.hook_layer},
             {"hook_site", c.hook_site}};
  j["lm_train"] = {{"epochs", c.lm_train.epochs},
                   {"batch", c.lm_train.batch},
                   {"lr", c.lm_train.lr},
                   {"warmup_fraction", c.lm_train.warmup_fraction},
                   {"val_batch", c.lm_train.val_batch}};
  j["sae"] = {{"latent", c.sae.latent},
              {"alpha", c.sae.alpha},
              {"beta", c.sae.beta},
              {"penalty", c.sae.penalty},
              {"norm_eps", c.sae.norm_eps},
              {"epochs", c.sae.epochs},
              {"batch", c.sae.batch},
              {"lr", c.sae.lr},
              {"warmup_fraction", c.sae.warmup_fraction},
              {"max_vectors", c.sae.max_vectors}};
  j["steer"] = {{"eta", c.steer.eta},
                {"eps_stop", c.steer.eps_stop},
                {"max_iters", c.steer.max_iters},
                {"distance", c.steer.distance},
                {"nonneg", c.steer.nonneg}};
  j["eval"] = {{"support_per_class", c.eval.support_per_class},
               {"prompts_per_cell", c.eval.prompts_per_cell},
               {"source_class", c.eval.source_class},
               {"max_new", c.eval.max_new},
               {"selector", c.eval.selector}};
  j["sweep"] = {{"layers", c.sweep.layers},
                {"alphas", c.sweep.alphas},
                {"latents", c.sweep.latents},
                {"penalties", c.sweep.penalties},
                {"sites", c.sweep.sites}};
  return j;
}

ExperimentConfig config_from_json(const io::json& j) {
  ExperimentConfig c = default_config();
  check_keys(j, {"seed", "out_dir", "jobs", "mode", "dump_selector", "corpus", "lm", "lm_train",
                 "sae", "steer", "eval", "sweep"},
             "");
  maybe(j, "seed", c.seed);
  maybe(j, "out_dir", c.out_dir);
  maybe(j, "jobs", c.jobs);
  maybe(j, "mode", c.mode);
  maybe(j, "dump_selector", c.dump_selector);
  if (j.contains("corpus")) {
    const auto& s = j.at("corpus");
    check_keys(s,
               {"num_classes", "content_tokens", "marker_block", "marker_weight", "smoothing_floor",
                "prompt_len_min", "prompt_len_max", "response_len_min", "response_len_max",
                "mix_rho", "split_train", "split_valid", "split_test", "corpus_size"},
               "corpus.");
    maybe(s, "num_classes", c.corpus.num_classes);
    maybe(s, "content_tokens", c.corpus.content_tokens);
    maybe(s, "marker_block", c.corpus.marker_block);
    maybe(s, "marker_weight", c.corpus.marker_weight);
    maybe(s, "smoothing_floor", c.corpus.smoothing_floor);
    maybe(s, "prompt_len_min", c.corpus.prompt_len_min);
    maybe(s, "prompt_len_max", c.corpus.prompt_len_max);
    maybe(s, "response_len_min", c.corpus.response_len_min);
    maybe(s, "response_len_max", c.corpus.response_len_max);
    maybe(s, "mix_rho", c.corpus.mix_rho);
    maybe(s, "split_train", c.corpus.split_train);
    maybe(s, "split_valid", c.corpus.split_valid);
    maybe(s, "split_test", c.corpus.split_test);
    maybe(s, "corpus_size", c.corpus.corpus_size);
  }
  if (j.contains("lm")) {
    const auto& s = j.at("lm");
    check_keys(s, {"dim", "layers", "heads", "head_dim", "context", "hook_layer", "hook_site"},
               "lm.");
    maybe(s, "dim", c.lm_dim);
    maybe(s, "layers", c.lm_layers);
    maybe(s, "heads", c.lm_heads);
    maybe(s, "head_dim", c.lm_head_dim);
    maybe(s, "context", c.lm_context);
    maybe(s, "hook_layer", c.hook_layer);
    maybe(s, "hook_site", c.hook_site);
  }
  if (j.contains("lm_train")) {
    const auto& s = j.at("lm_train");
    check_keys(s, {"epochs", "batch", "lr", "warmup_fraction", "val_batch"}, "lm_train.");
    maybe(s, "epochs", c.lm_train.epochs);
    maybe(s, "batch", c.lm_train.batch);
    maybe(s, "lr", c.lm_train.lr);
    maybe(s, "warmup_fraction", c.lm_train.warmup_fraction);
    maybe(s, "val_batch", c.lm_train.val_batch);
  }
  if (j.contains("sae")) {
    const auto& s = j.at("sae");
    check_keys(s,
               {"latent", "alpha", "beta", "penalty", "norm_eps", "epochs", "batch", "lr",
                "warmup_fraction", "max_vectors"},
               "sae.");
    maybe(s, "latent", c.sae.latent);
    maybe(s, "alpha", c.sae.alpha);
    maybe(s, "beta", c.sae.beta);
    maybe(s, "penalty", c.sae.penalty);
    maybe(s, "norm_eps", c.sae.norm_eps);
    maybe(s, "epochs", c.sae.epochs);
    maybe(s, "batch", c.sae.batch);
    maybe(s, "lr", c.sae.lr);
    maybe(s, "warmup_fraction", c.sae.warmup_fraction);
    maybe(s, "max_vectors", c.sae.max_vectors);
  }
  if (j.contains("steer")) {
    const auto& s = j.at("steer");
    check_keys(s, {"eta", "eps_stop", "max_iters", "distance", "nonneg"}, "steer.");
    maybe(s, "eta", c.steer.eta);
    maybe(s, "eps_stop", c.steer.eps_stop);
    maybe(s, "max_iters", c.steer.max_iters);
    maybe(s, "distance", c.steer.distance);
    maybe(s, "nonneg", c.steer.nonneg);
  }
  if (j.contains("eval")) {
    const auto& s = j.at("eval");
    check_keys(s, {"support_per_class", "prompts_per_cell", "source_class", "max_new", "selector"},
               "eval.");
    maybe(s, "support_per_class", c.eval.support_per_class);
    maybe(s, "prompts_per_cell", c.eval.prompts_per_cell);
    maybe(s, "source_class", c.eval.source_class);
    maybe(s, "max_new", c.eval.max_new);
    maybe(s, "selector", c.eval.selector);
  }
  if (j.contains("sweep")) {
    const auto& s = j.at("sweep");
    check_keys(s, {"layers", "alphas", "latents", "penalties", "sites"}, "sweep.");
    maybe(s, "layers", c.sweep.layers);
    maybe(s, "alphas", c.sweep.alphas);
    maybe(s, "latents", c.sweep.latents);
    maybe(s, "penalties", c.sweep.penalties);
    maybe(s, "sites", c.sweep.sites);
  }
  c.validate();
  return c;
}

void apply_override(io::json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw std::invalid_argument("override '" + assignment + "' is not of the form key=value");
  }
  const std::string path = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);

  io::json value;
  try {
    value = io::json::parse(raw);
  } catch (const std::exception&) {
    value = raw;  // unparseable values are taken as strings
  }

  io::json* node = &j;
  size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw std::invalid_argument("override '" + assignment + "' has an empty key segment");
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    node = &(*node)[key];
    start = dot + 1;
  }
}

// ---------------------------------------------------------------------------
// artifact layout
// ---------------------------------------------------------------------------

Paths Paths::at(const std::string& root) {
  Paths p;
  p.root = root;
  auto f = [&root](const char* name) { return root + "/" + name; };
  p.config = f("config.json");
  p.manifest = f("manifest.json");
  p.specs = f("specs.json");
  p.train = f("train.jsonl");
  p.valid = f("valid.jsonl");
  p.test = f("test.jsonl");
  p.lm_ckpt = f("lm.ckpt");
  p.lm_curve = f("lm_curve.csv");
  p.dump = f("acts.dump");
  p.sae_ckpt = f("sae.ckpt");
  p.sae_curve = f("sae_curve.csv");
  p.sparsity = f("sparsity.csv");
  p.protos = f("protos.ckpt");
  p.protos_raw = f("protos_raw.ckpt");
  p.fewshot = f("fewshot.csv");
  p.fewshot_confusion = f("fewshot_confusion.csv");
  p.steer_report = f("steer_report.csv");
  p.steer_traces = f("steer_traces.jsonl");
  p.report_raw = f("steer_report_raw.csv");
  p.report_direct = f("steer_report_direct.csv");
  p.compare = f("baseline_compare.csv");
  return p;
}

namespace {

void require_artifact(const std::string& path, const std::string& what, const std::string& producer) {
  if (!fs::exists(path)) {
    throw std::runtime_error("missing artifact: " + what + " at '" + path + "'; run " + producer +
                             " first");
  }
}

// writes the resolved config echo and returns the layout; every stage starts here
Paths prepare_run_dir(const ExperimentConfig& cfg) {
  cfg.validate();
  fs::create_directories(cfg.out_dir);
  Paths p = Paths::at(cfg.out_dir);
  io::save_json(p.config, config_to_json(cfg));
  return p;
}

void record_stage(const Paths& p, const std::string& stage, const std::vector<std::string>& files) {
  io::json m;
  if (fs::exists(p.manifest)) {
    m = io::load_json(p.manifest);
  } else {
    m = io::json{{"format_version", 1}, {"stages", io::json::object()}};
  }
  io::json names = io::json::array();
  for (const auto& f : files) names.push_back(fs::path(f).filename().string());
  m["stages"][stage] = names;
  io::save_json(p.manifest, m);
}

void copy_bytes(const std::string& from, const std::string& to) {
  io::write_text(to, io::read_text(from));
}

std::string sanitize_cell(std::string s) {
  for (char& ch : s) {
    if (ch == ',' || ch == '\n' || ch == '\r') ch = ';';
  }
  return s;
}

// minimal reader for the csv files this module writes (no quoting, no commas
// inside cells)
std::vector<std::vector<std::string>> read_csv(const std::string& path) {
  const std::string text = io::read_text(path);
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string cell;
  for (char ch : text) {
    if (ch == '\r') continue;
    if (ch == ',') {
      row.push_back(cell);
      cell.clear();
    } else if (ch == '\n') {
      row.push_back(cell);
      cell.clear();
      rows.push_back(row);
      row.clear();
    } else {
      cell.push_back(ch);
    }
  }
  if (!cell.empty() || !row.empty()) {
    row.push_back(cell);
    rows.push_back(row);
  }
  return rows;
}

int csv_col(const std::vector<std::string>& header, const std::string& name) {
  for (size_t i = 0; i < header.size(); ++i) {
    if (header[i] == name) return static_cast<int>(i);
  }
  throw std::runtime_error("csv column '" + name + "' not found");
}

}  // namespace

// ---------------------------------------------------------------------------
// steered generation
// ---------------------------------------------------------------------------

namespace {

std::vector<int> full_prefix(const microlm::LmConfig& cfg, const std::vector<int>& prompt) {
  std::vector<int> prefix;
  prefix.reserve(prompt.size() + 2);
  prefix.push_back(cfg.bos_token);
  prefix.insert(prefix.end(), prompt.begin(), prompt.end());
  prefix.push_back(cfg.sep_token);
  return prefix;
}

std::vector<int> strip_trailing_eos(std::vector<int> tokens, int eos_id) {
  if (!tokens.empty() && tokens.back() == eos_id) tokens.pop_back();
  return tokens;
}

// applies a code-space delta to one hook vector: encode per head, shift by the
// head's slice of the delta, clamp at zero, decode back. raw sources shift the
// vector directly.
void apply_code_delta(const proto::CodeSource& source, const std::vector<double>& delta,
                      std::vector<float>& hook_vec) {
  if (source.kind == proto::SourceKind::RawQuery) {
    for (size_t i = 0; i < hook_vec.size(); ++i) {
      hook_vec[i] = static_cast<float>(static_cast<double>(hook_vec[i]) + delta[i]);
    }
    return;
  }
  const sae::HeadBank& bank = *source.bank;
  const int heads = static_cast<int>(bank.heads.size());
  const int width = bank.cfg.d_in;
  const int latent = bank.cfg.latent;
  for (int h = 0; h < heads; ++h) {
    std::vector<float> q(hook_vec.begin() + static_cast<size_t>(h) * width,
                         hook_vec.begin() + static_cast<size_t>(h + 1) * width);
    Tensor z = sae::encode(bank.heads[h], Tensor::row(std::move(q)));
    for (int j = 0; j < latent; ++j) {
      const double shifted = static_cast<double>(z[j]) + delta[static_cast<size_t>(h) * latent + j];
      z[j] = static_cast<float>(std::max(0.0, shifted));
    }
    const Tensor qhat = sae::decode(bank.heads[h], z, bank.cfg.norm_eps);
    std::copy(qhat.data(), qhat.data() + width, hook_vec.begin() + static_cast<size_t>(h) * width);
  }
}

// per-position code of one hook vector, same layout as pooled codes
proto::Code encode_hook_vec(const proto::CodeSource& source, const std::vector<float>& hook_vec) {
  proto::Code z;
  z.reserve(static_cast<size_t>(source.width()));
  if (source.kind == proto::SourceKind::RawQuery) {
    z.assign(hook_vec.begin(), hook_vec.end());
    return z;
  }
  const sae::HeadBank& bank = *source.bank;
  const int heads = static_cast<int>(bank.heads.size());
  const int width = bank.cfg.d_in;
  for (int h = 0; h < heads; ++h) {
    std::vector<float> q(hook_vec.begin() + static_cast<size_t>(h) * width,
                         hook_vec.begin() + static_cast<size_t>(h + 1) * width);
    const Tensor zh = sae::encode(bank.heads[h], Tensor::row(std::move(q)));
    z.insert(z.end(), zh.data(), zh.data() + zh.numel());
  }
  return z;
}

}  // namespace

SteeredGen generate_steered(const microlm::LmWeights& lm, const proto::CodeSource& source,
                            const proto::PrototypeBank& protos, const std::vector<int>& prompt,
                            int target, const std::string& mode,
                            const proto::SteerConfig& steer_cfg, int max_new,
                            const std::string& method) {
  source.validate();
  if (method != "gradient" && method != "direct") {
    throw std::invalid_argument("generate_steered: unknown method '" + method + "'");
  }
  if (mode != "recode" && mode != "online") {
    throw std::invalid_argument("generate_steered: unknown mode '" + mode + "'");
  }
  if (target < 0 || target >= static_cast<int>(protos.classes())) {
    throw std::invalid_argument("generate_steered: target " + std::to_string(target) +
                                " out of range for " + std::to_string(protos.classes()) + " classes");
  }
  if (protos.width() != source.width()) {
    throw std::invalid_argument("generate_steered: prototype width " + std::to_string(protos.width()) +
                                " does not match source width " + std::to_string(source.width()));
  }

  const microlm::LmConfig& cfg = lm.cfg;
  const std::vector<int> prefix = full_prefix(cfg, prompt);
  // eta = 0 or a zero iteration cap disables gradient steering; the unsteered
  // path is taken without touching the hooks so the output is exactly the
  // plain generation
  const bool disabled = method == "gradient" && (steer_cfg.eta == 0.0 || steer_cfg.max_iters == 0);

  SteeredGen out;
  if (mode == "recode") {
    const microlm::GenResult draft = microlm::generate(lm, prefix, max_new);
    const std::vector<int> response = strip_trailing_eos(draft.tokens, cfg.eos_token);
    if (disabled || response.empty()) {
      out.tokens = draft.tokens;
      out.skipped = true;
      return out;
    }

    stylegen::StyledExample ex;
    ex.prompt = prompt;
    ex.response = response;
    const proto::Code z = proto::embed_example(source, ex);

    proto::Code z_star;
    if (method == "direct") {
      z_star = proto::direct_assign(z, protos, target);
    } else {
      auto [zs, trace] = proto::steer(z, protos, target, steer_cfg);
      z_star = std::move(zs);
      out.mean_steps = trace.steps;
      out.traces.push_back(std::move(trace));
    }
    out.steered_code = z_star;

    std::vector<double> delta(z.size());
    bool all_zero = true;
    for (size_t i = 0; i < z.size(); ++i) {
      delta[i] = z_star[i] - z[i];
      if (delta[i] != 0.0) all_zero = false;
    }
    if (all_zero) {
      out.tokens = draft.tokens;
      out.skipped = true;
      return out;
    }

    const auto cb = [&source, &delta](int, std::vector<float>& hook_vec) {
      apply_code_delta(source, delta, hook_vec);
    };
    out.tokens = microlm::generate(lm, prefix, max_new, cb).tokens;
    return out;
  }

  // online: each new position's own code is steered independently
  if (disabled) {
    out.tokens = microlm::generate(lm, prefix, max_new).tokens;
    out.skipped = true;
    return out;
  }
  proto::Code code_sum(static_cast<size_t>(source.width()), 0.0);
  double steps_sum = 0.0;
  int calls = 0;
  const auto cb = [&](int, std::vector<float>& hook_vec) {
    const proto::Code z = encode_hook_vec(source, hook_vec);
    proto::Code z_star;
    if (method == "direct") {
      z_star = proto::direct_assign(z, protos, target);
    } else {
      auto [zs, trace] = proto::steer(z, protos, target, steer_cfg);
      z_star = std::move(zs);
      steps_sum += trace.steps;
      if (out.traces.empty()) out.traces.push_back(std::move(trace));
    }
    std::vector<double> delta(z.size());
    for (size_t i = 0; i < z.size(); ++i) {
      delta[i] = z_star[i] - z[i];
      code_sum[i] += z_star[i];
    }
    ++calls;
    apply_code_delta(source, delta, hook_vec);
  };
  out.tokens = microlm::generate(lm, prefix, max_new, cb).tokens;
  if (calls > 0) {
    out.mean_steps = method == "direct" ? 0.0 : steps_sum / calls;
    out.steered_code.resize(code_sum.size());
    for (size_t i = 0; i < code_sum.size(); ++i) out.steered_code[i] = code_sum[i] / calls;
  } else {
    out.skipped = true;
  }
  return out;
}

// ---------------------------------------------------------------------------
// steering evaluation
// ---------------------------------------------------------------------------

int judge_generated(const std::vector<int>& tokens, const std::vector<stylegen::StyleSpec>& specs,
                    int eos_id) {
  std::vector<int> body = strip_trailing_eos(tokens, eos_id);
  if (body.empty()) body.push_back(eos_id);
  return stylegen::judge(body, specs).cls;
}

namespace {

stylegen::JudgeResult judge_body(const std::vector<int>& tokens,
                                 const std::vector<stylegen::StyleSpec>& specs, int eos_id) {
  std::vector<int> body = strip_trailing_eos(tokens, eos_id);
  if (body.empty()) body.push_back(eos_id);
  return stylegen::judge(body, specs);
}

// mean per-dimension population variance; dimensions whose values are all
// bitwise equal contribute exactly zero
double code_variance(const std::vector<proto::Code>& codes) {
  if (codes.size() < 2) return 0.0;
  const size_t width = codes[0].size();
  if (width == 0) return 0.0;
  double acc = 0.0;
  const double n = static_cast<double>(codes.size());
  for (size_t j = 0; j < width; ++j) {
    double lo = codes[0][j], hi = codes[0][j];
    for (const auto& c : codes) {
      lo = std::min(lo, c[j]);
      hi = std::max(hi, c[j]);
    }
    if (lo == hi) continue;
    double mean = 0.0;
    for (const auto& c : codes) mean += c[j];
    mean /= n;
    double var = 0.0;
    for (const auto& c : codes) var += (c[j] - mean) * (c[j] - mean);
    acc += var / n;
  }
  return acc / static_cast<double>(width);
}

}  // namespace

SteerReport eval_steering(const microlm::LmWeights& lm, const proto::CodeSource& source,
                          const proto::PrototypeBank& protos,
                          const std::vector<stylegen::StyledExample>& test,
                          const std::vector<stylegen::StyleSpec>& specs,
                          const ExperimentConfig& cfg, const std::string& method,
                          const std::string& traces_path) {
  const int num_classes = static_cast<int>(specs.size());
  const int source_class = cfg.eval.source_class;
  const int want = cfg.eval.prompts_per_cell;

  std::vector<const stylegen::StyledExample*> prompts;
  for (const auto& ex : test) {
    if (ex.label == source_class && static_cast<int>(prompts.size()) < want) prompts.push_back(&ex);
  }
  if (static_cast<int>(prompts.size()) < want) {
    throw std::runtime_error("eval-steer: only " + std::to_string(prompts.size()) +
                             " test examples with label " + std::to_string(source_class) + ", need " +
                             std::to_string(want));
  }

  SteerReport report;
  report.method = method;
  report.source_kind = proto::source_kind_to_string(source.kind);
  report.mode = cfg.mode;
  report.prompts = want;

  // the unsteered baseline shares the prompt set across every cell
  std::vector<std::int64_t> unsteered_counts(static_cast<size_t>(num_classes), 0);
  for (const auto* ex : prompts) {
    const auto gen = microlm::generate(lm, full_prefix(lm.cfg, ex->prompt), cfg.eval.max_new);
    unsteered_counts[static_cast<size_t>(judge_generated(gen.tokens, specs, lm.cfg.eos_token))]++;
  }

  std::string traces_text;
  for (int target = 0; target < num_classes; ++target) {
    if (target == source_class) continue;
    CellReport cell;
    cell.source = source_class;
    cell.target = target;
    cell.steered_counts.assign(static_cast<size_t>(num_classes), 0);
    cell.unsteered_counts = unsteered_counts;

    std::vector<proto::Code> steered_codes;
    double iter_sum = 0.0;
    double margin_sum = 0.0;
    for (size_t i = 0; i < prompts.size(); ++i) {
      const auto sg = generate_steered(lm, source, protos, prompts[i]->prompt, target, cfg.mode,
                                       cfg.steer, cfg.eval.max_new, method);
      const auto jr = judge_body(sg.tokens, specs, lm.cfg.eos_token);
      cell.steered_counts[static_cast<size_t>(jr.cls)]++;
      double best_other = -1e300;
      for (int k = 0; k < num_classes; ++k) {
        if (k != target) best_other = std::max(best_other, jr.loglik[static_cast<size_t>(k)]);
      }
      margin_sum += jr.loglik[static_cast<size_t>(target)] - best_other;
      iter_sum += sg.mean_steps;
      if (!sg.steered_code.empty()) steered_codes.push_back(sg.steered_code);

      if (!traces_path.empty()) {
        io::json line{{"source", source_class},
                      {"target", target},
                      {"prompt_index", static_cast<int>(i)},
                      {"skipped", sg.skipped}};
        if (!sg.traces.empty()) {
          line["steps"] = sg.traces[0].steps;
          line["termination"] = sg.traces[0].termination;
          if (i == 0) {  // the full curve is kept for the first prompt per cell
            line["log_prob"] = sg.traces[0].log_prob;
            line["grad_sq"] = sg.traces[0].grad_sq;
          }
        }
        traces_text += line.dump();
        traces_text += '\n';
      }
    }

    const double n = static_cast<double>(prompts.size());
    cell.steered_frac = static_cast<double>(cell.steered_counts[static_cast<size_t>(target)]) / n;
    cell.unsteered_frac = static_cast<double>(unsteered_counts[static_cast<size_t>(target)]) / n;
    cell.mean_iters = iter_sum / n;
    cell.mean_margin = margin_sum / n;
    cell.code_variance = code_variance(steered_codes);
    report.cells.push_back(std::move(cell));
  }

  if (!traces_path.empty()) io::write_text(traces_path, traces_text);
  return report;
}

void save_steer_report(const std::string& path, const SteerReport& report) {
  const int num_classes =
      report.cells.empty() ? 0 : static_cast<int>(report.cells[0].steered_counts.size());
  std::vector<std::string> header{"method",        "source_kind", "mode",
                                  "source",        "target",      "prompts",
                                  "steered_frac",  "unsteered_frac", "mean_iters",
                                  "mean_margin",   "code_variance"};
  for (int k = 0; k < num_classes; ++k) header.push_back("s" + std::to_string(k));
  for (int k = 0; k < num_classes; ++k) header.push_back("u" + std::to_string(k));

  std::vector<std::vector<std::string>> rows;
  for (const auto& cell : report.cells) {
    std::vector<std::string> row{report.method,
                                 report.source_kind,
                                 report.mode,
                                 std::to_string(cell.source),
                                 std::to_string(cell.target),
                                 std::to_string(report.prompts),
                                 io::fmt(cell.steered_frac),
                                 io::fmt(cell.unsteered_frac),
                                 io::fmt(cell.mean_iters),
                                 io::fmt(cell.mean_margin),
                                 io::fmt(cell.code_variance, 9)};
    for (const auto v : cell.steered_counts) row.push_back(std::to_string(v));
    for (const auto v : cell.unsteered_counts) row.push_back(std::to_string(v));
    rows.push_back(std::move(row));
  }
  io::write_csv(path, header, rows);
}

// ---------------------------------------------------------------------------
// stages
// ---------------------------------------------------------------------------

namespace {

proto::SourceKind primary_kind(const ExperimentConfig& cfg) {
  return cfg.hook_site == "query" ? proto::SourceKind::SaeQuery : proto::SourceKind::SaeResidual;
}

proto::CodeSource make_source(const ExperimentConfig& cfg, const microlm::LmWeights& lm,
                              const sae::HeadBank* bank, proto::SourceKind kind) {
  proto::CodeSource s;
  s.kind = kind;
  s.lm = &lm;
  s.bank = bank;
  s.selector = microlm::selector_from_string(cfg.eval.selector);
  s.validate();
  return s;
}

}  // namespace

void stage_gen_data(const ExperimentConfig& cfg) {
  const Paths p = prepare_run_dir(cfg);
  const auto cc = corpus_cfg(cfg);
  const auto specs = stylegen::build_specs(cc, cc.seed);
  const auto splits = stylegen::generate_corpus(cc);
  io::save_specs(p.specs, specs);
  io::save_examples(p.train, splits.train);
  io::save_examples(p.valid, splits.valid);
  io::save_examples(p.test, splits.test);
  record_stage(p, "gen-data", {p.specs, p.train, p.valid, p.test});
  std::cout << "[gen-data] train=" << splits.train.size() << " valid=" << splits.valid.size()
            << " test=" << splits.test.size() << " classes=" << cc.num_classes << "\n";
}

void stage_train_lm(const ExperimentConfig& cfg) {
  const Paths p = prepare_run_dir(cfg);
  require_artifact(p.train, "training split", "gen-data");
  require_artifact(p.valid, "validation split", "gen-data");
  const auto train = io::load_examples(p.train);
  const auto valid = io::load_examples(p.valid);

  microlm::TrainLog log;
  const auto lm = microlm::train_lm(cfg.lm_config(), train, valid, lm_train_cfg(cfg), &log);
  microlm::save_weights(p.lm_ckpt, lm);

  std::vector<std::vector<std::string>> rows;
  rows.push_back({"initial_val", "0", io::fmt(log.initial_val_loss)});
  for (size_t e = 0; e < log.epoch_val_loss.size(); ++e) {
    rows.push_back({"epoch_val", std::to_string(e), io::fmt(log.epoch_val_loss[e])});
  }
  rows.push_back({"final_val", "0", io::fmt(log.final_val_loss)});
  for (size_t s = 0; s < log.step_loss.size(); ++s) {
    rows.push_back({"step", std::to_string(s), io::fmt(log.step_loss[s])});
  }
  io::write_csv(p.lm_curve, {"kind", "index", "value"}, rows);
  record_stage(p, "train-lm", {p.lm_ckpt, p.lm_curve});
  std::cout << "[train-lm] initial_val=" << io::fmt(log.initial_val_loss)
            << " final_val=" << io::fmt(log.final_val_loss) << " steps=" << log.step_loss.size()
            << "\n";
}

void stage_dump_acts(const ExperimentConfig& cfg) {
  const Paths p = prepare_run_dir(cfg);
  require_artifact(p.lm_ckpt, "model checkpoint", "train-lm");
  require_artifact(p.train, "training split", "gen-data");
  const auto lm = microlm::load_weights(p.lm_ckpt);
  const auto train = io::load_examples(p.train);
  const auto sel = microlm::selector_from_string(cfg.dump_selector);
  const auto records = microlm::dump_activations(lm, train, sel);
  const auto header = microlm::dump_header(lm.cfg, static_cast<int64_t>(records.size()));
  io::save_dump(p.dump, header, records);
  int64_t vectors = 0;
  for (const auto& r : records) vectors += r.positions;
  record_stage(p, "dump-acts", {p.dump});
  std::cout << "[dump-acts] examples=" << records.size() << " positions=" << vectors
            << " heads=" << header.num_heads << " width=" << header.width << "\n";
}

void stage_train_sae(const ExperimentConfig& cfg) {
  const Paths p = prepare_run_dir(cfg);
  require_artifact(p.dump, "activation dump", "dump-acts");
  const auto dump = io::load_dump(p.dump);
  const auto sc = cfg.sae_config();
  if (dump.header.width != sc.d_in) {
    throw std::runtime_error("train-sae: dump width " + std::to_string(dump.header.width) +
                             " does not match configured input width " + std::to_string(sc.d_in));
  }

  std::vector<sae::TrainCurve> curves;
  const auto bank = sae::train_bank(dump, sc, cfg.jobs, &curves);
  sae::save_bank(p.sae_ckpt, bank);

  std::vector<std::vector<std::string>> curve_rows;
  for (size_t h = 0; h < curves.size(); ++h) {
    const auto& c = curves[h];
    curve_rows.push_back({std::to_string(h), "initial_holdout", "0", io::fmt(c.initial_holdout)});
    for (size_t e = 0; e < c.epoch_holdout.size(); ++e) {
      curve_rows.push_back({std::to_string(h), "epoch_holdout", std::to_string(e), io::fmt(c.epoch_holdout[e])});
    }
    curve_rows.push_back({std::to_string(h), "final_holdout", "0", io::fmt(c.final_holdout)});
  }
  io::write_csv(p.sae_curve, {"head", "kind", "index", "value"}, curve_rows);

  std::vector<std::vector<std::string>> stat_rows;
  for (size_t h = 0; h < bank.heads.size(); ++h) {
    const auto vectors = sae::head_matrix(dump, static_cast<int>(h));
    const auto st = sae::sparsity_stats(bank.heads[h], vectors, sc.norm_eps);
    stat_rows.push_back({std::to_string(h), std::to_string(st.vectors), io::fmt(st.active_fraction),
                         io::fmt(st.dead_fraction), io::fmt(st.mean_recon, 9)});
    std::cout << "[train-sae] head=" << h << " holdout=" << io::fmt(curves[h].final_holdout)
              << " active=" << io::fmt(st.active_fraction) << " dead=" << io::fmt(st.dead_fraction)
              << "\n";
  }
  io::write_csv(p.sparsity, {"head", "vectors", "active_fraction", "dead_fraction", "mean_recon"},
                stat_rows);
  record_stage(p, "train-sae", {p.sae_ckpt, p.sae_curve, p.sparsity});
}

void stage_build_protos(const ExperimentConfig& cfg) {
  const Paths p = prepare_run_dir(cfg);
  require_artifact(p.lm_ckpt, "model checkpoint", "train-lm");
  require_artifact(p.sae_ckpt, "autoencoder bank", "train-sae");
  require_artifact(p.train, "training split", "gen-data");
  const auto lm = microlm::load_weights(p.lm_ckpt);
  const auto bank = sae::load_bank(p.sae_ckpt);
  const auto train = io::load_examples(p.train);

  const auto source = make_source(cfg, lm, &bank, primary_kind(cfg));
  const auto protos = proto::build_prototypes(source, train, cfg.eval.support_per_class);
  proto::save_prototypes(p.protos, protos);
  std::vector<std::string> files{p.protos};

  if (cfg.hook_site == "query") {  // the raw baseline exists only at the query site
    const auto raw = make_source(cfg, lm, nullptr, proto::SourceKind::RawQuery);
    proto::save_prototypes(p.protos_raw, proto::build_prototypes(raw, train, cfg.eval.support_per_class));
    files.push_back(p.protos_raw);
  }
  record_stage(p, "build-protos", files);
  std::cout << "[build-protos] classes=" << protos.classes() << " width=" << protos.width()
            << " support=" << protos.support_per_class << "\n";
}

void stage_eval_fewshot(const ExperimentConfig& cfg) {
  const Paths p = prepare_run_dir(cfg);
  require_artifact(p.lm_ckpt, "model checkpoint", "train-lm");
  require_artifact(p.sae_ckpt, "autoencoder bank", "train-sae");
  require_artifact(p.protos, "prototype bank", "build-protos");
  require_artifact(p.test, "test split", "gen-data");
  require_artifact(p.specs, "style specs", "gen-data");
  const auto lm = microlm::load_weights(p.lm_ckpt);
  const auto bank = sae::load_bank(p.sae_ckpt);
  const auto test = io::load_examples(p.test);
  const auto specs = io::load_specs(p.specs);
  const auto cc = corpus_cfg(cfg);

  const auto ceiling = stylegen::bayes_reference(specs, cc, 6000, derive_seed(cfg.seed, "bayes-ceiling"));
  const double chance = 1.0 / static_cast<double>(cc.num_classes);

  struct Entry {
    std::string kind;
    proto::EvalResult result;
  };
  std::vector<Entry> entries;
  {
    const auto source = make_source(cfg, lm, &bank, primary_kind(cfg));
    const auto protos = proto::load_prototypes(p.protos);
    entries.push_back({proto::source_kind_to_string(source.kind), proto::fewshot_eval(source, protos, test)});
  }
  if (cfg.hook_site == "query" && fs::exists(p.protos_raw)) {
    const auto raw = make_source(cfg, lm, nullptr, proto::SourceKind::RawQuery);
    const auto protos_raw = proto::load_prototypes(p.protos_raw);
    entries.push_back({"raw-query", proto::fewshot_eval(raw, protos_raw, test)});
  }

  std::vector<std::string> header{"source", "overall", "ceiling", "ceiling_lo", "ceiling_hi",
                                  "chance", "count"};
  for (int k = 0; k < cc.num_classes; ++k) header.push_back("acc_c" + std::to_string(k));
  std::vector<std::vector<std::string>> rows;
  std::vector<std::vector<std::string>> confusion_rows;
  for (const auto& e : entries) {
    std::vector<std::string> row{e.kind,
                                 io::fmt(e.result.overall),
                                 io::fmt(ceiling.accuracy),
                                 io::fmt(ceiling.ci_lo),
                                 io::fmt(ceiling.ci_hi),
                                 io::fmt(chance),
                                 std::to_string(e.result.count)};
    for (double a : e.result.per_class) row.push_back(io::fmt(a));
    rows.push_back(std::move(row));
    for (size_t label = 0; label < e.result.confusion.size(); ++label) {
      std::vector<std::string> crow{e.kind, std::to_string(label)};
      for (auto v : e.result.confusion[label]) crow.push_back(std::to_string(v));
      confusion_rows.push_back(std::move(crow));
    }
    std::cout << "[eval-fewshot] source=" << e.kind << " overall=" << io::fmt(e.result.overall)
              << " ceiling=" << io::fmt(ceiling.accuracy) << "\n";
  }
  io::write_csv(p.fewshot, header, rows);

  std::vector<std::string> cheader{"source", "label"};
  for (int k = 0; k < cc.num_classes; ++k) cheader.push_back("pred_c" + std::to_string(k));
  io::write_csv(p.fewshot_confusion, cheader, confusion_rows);
  record_stage(p, "eval-fewshot", {p.fewshot, p.fewshot_confusion});
}

void stage_eval_steer(const ExperimentConfig& cfg) {
  const Paths p = prepare_run_dir(cfg);
  require_artifact(p.lm_ckpt, "model checkpoint", "train-lm");
  require_artifact(p.sae_ckpt, "autoencoder bank", "train-sae");
  require_artifact(p.protos, "prototype bank", "build-protos");
  require_artifact(p.test, "test split", "gen-data");
  require_artifact(p.specs, "style specs", "gen-data");
  const auto lm = microlm::load_weights(p.lm_ckpt);
  const auto bank = sae::load_bank(p.sae_ckpt);
  const auto test = io::load_examples(p.test);
  const auto specs = io::load_specs(p.specs);
  const auto protos = proto::load_prototypes(p.protos);

  const auto source = make_source(cfg, lm, &bank, primary_kind(cfg));
  const auto report = eval_steering(lm, source, protos, test, specs, cfg, "gradient", p.steer_traces);
  save_steer_report(p.steer_report, report);
  record_stage(p, "eval-steer", {p.steer_report, p.steer_traces});
  for (const auto& cell : report.cells) {
    std::cout << "[eval-steer] target=" << cell.target << " steered=" << io::fmt(cell.steered_frac)
              << " unsteered=" << io::fmt(cell.unsteered_frac)
              << " iters=" << io::fmt(cell.mean_iters) << "\n";
  }
}

void stage_baselines(const ExperimentConfig& cfg) {
  const Paths p = prepare_run_dir(cfg);
  require_artifact(p.lm_ckpt, "model checkpoint", "train-lm");
  require_artifact(p.sae_ckpt, "autoencoder bank", "train-sae");
  require_artifact(p.protos, "prototype bank", "build-protos");
  require_artifact(p.test, "test split", "gen-data");
  require_artifact(p.specs, "style specs", "gen-data");
  const auto lm = microlm::load_weights(p.lm_ckpt);
  const auto bank = sae::load_bank(p.sae_ckpt);
  const auto test = io::load_examples(p.test);
  const auto specs = io::load_specs(p.specs);
  const auto protos = proto::load_prototypes(p.protos);
  const auto source = make_source(cfg, lm, &bank, primary_kind(cfg));

  std::vector<SteerReport> reports;
  reports.push_back(eval_steering(lm, source, protos, test, specs, cfg, "gradient"));

  if (cfg.hook_site == "query") {
    require_artifact(p.protos_raw, "raw-query prototype bank", "build-protos");
    const auto protos_raw = proto::load_prototypes(p.protos_raw);
    const auto raw = make_source(cfg, lm, nullptr, proto::SourceKind::RawQuery);
    ExperimentConfig raw_cfg = cfg;
    raw_cfg.steer.nonneg = false;  // raw query space is signed
    reports.push_back(eval_steering(lm, raw, protos_raw, test, specs, raw_cfg, "gradient"));
    save_steer_report(p.report_raw, reports.back());
  }

  reports.push_back(eval_steering(lm, source, protos, test, specs, cfg, "direct"));
  save_steer_report(p.report_direct, reports.back());

  struct Line {
    std::string method, kind;
    double steered = 0.0, unsteered = 0.0, iters = 0.0;
  };
  std::vector<Line> lines;
  for (const auto& r : reports) {
    Line ln;
    ln.method = r.method;
    ln.kind = r.source_kind;
    for (const auto& cell : r.cells) {
      ln.steered += cell.steered_frac;
      ln.unsteered += cell.unsteered_frac;
      ln.iters += cell.mean_iters;
    }
    const double n = std::max<size_t>(r.cells.size(), 1);
    ln.steered /= n;
    ln.unsteered /= n;
    ln.iters /= n;
    lines.push_back(std::move(ln));
  }
  std::stable_sort(lines.begin(), lines.end(),
                   [](const Line& a, const Line& b) { return a.steered > b.steered; });
  std::vector<std::vector<std::string>> rows;
  for (size_t i = 0; i < lines.size(); ++i) {
    rows.push_back({std::to_string(i + 1), lines[i].method, lines[i].kind, io::fmt(lines[i].steered),
                    io::fmt(lines[i].unsteered), io::fmt(lines[i].iters)});
    std::cout << "[baselines] rank=" << (i + 1) << " method=" << lines[i].method << "/"
              << lines[i].kind << " steered=" << io::fmt(lines[i].steered) << "\n";
  }
  io::write_csv(p.compare,
                {"rank", "method", "source_kind", "mean_steered_frac", "mean_unsteered_frac",
                 "mean_iters"},
                rows);

  std::vector<std::string> files{p.report_direct, p.compare};
  if (cfg.hook_site == "query") files.insert(files.begin(), p.report_raw);
  record_stage(p, "baselines", files);
}

void run_end_to_end(const ExperimentConfig& cfg) {
  stage_gen_data(cfg);
  stage_train_lm(cfg);
  stage_dump_acts(cfg);
  stage_train_sae(cfg);
  stage_build_protos(cfg);
  stage_eval_fewshot(cfg);
  stage_eval_steer(cfg);
  stage_baselines(cfg);
}

// ---------------------------------------------------------------------------
// sweeps
// ---------------------------------------------------------------------------

namespace {

struct SweepRow {
  std::string value;
  std::string status = "ok";
  double fewshot = 0.0, ceiling = 0.0;
  double active = 0.0, dead = 0.0, recon = 0.0;
  double steered = 0.0, unsteered = 0.0, iters = 0.0;
};

SweepRow collect_run(const Paths& p, const std::string& value) {
  SweepRow row;
  row.value = value;

  const auto fewshot = read_csv(p.fewshot);
  const int f_overall = csv_col(fewshot[0], "overall");
  const int f_ceiling = csv_col(fewshot[0], "ceiling");
  row.fewshot = std::stod(fewshot[1][static_cast<size_t>(f_overall)]);
  row.ceiling = std::stod(fewshot[1][static_cast<size_t>(f_ceiling)]);

  const auto sparsity = read_csv(p.sparsity);
  const int s_active = csv_col(sparsity[0], "active_fraction");
  const int s_dead = csv_col(sparsity[0], "dead_fraction");
  const int s_recon = csv_col(sparsity[0], "mean_recon");
  for (size_t r = 1; r < sparsity.size(); ++r) {
    row.active += std::stod(sparsity[r][static_cast<size_t>(s_active)]);
    row.dead += std::stod(sparsity[r][static_cast<size_t>(s_dead)]);
    row.recon += std::stod(sparsity[r][static_cast<size_t>(s_recon)]);
  }
  const double heads = static_cast<double>(sparsity.size() - 1);
  row.active /= heads;
  row.dead /= heads;
  row.recon /= heads;

  const auto steer = read_csv(p.steer_report);
  const int c_steered = csv_col(steer[0], "steered_frac");
  const int c_unsteered = csv_col(steer[0], "unsteered_frac");
  const int c_iters = csv_col(steer[0], "mean_iters");
  for (size_t r = 1; r < steer.size(); ++r) {
    row.steered += std::stod(steer[r][static_cast<size_t>(c_steered)]);
    row.unsteered += std::stod(steer[r][static_cast<size_t>(c_unsteered)]);
    row.iters += std::stod(steer[r][static_cast<size_t>(c_iters)]);
  }
  const double cells = static_cast<double>(steer.size() - 1);
  row.steered /= cells;
  row.unsteered /= cells;
  row.iters /= cells;
  return row;
}

}  // namespace

void run_sweep(const ExperimentConfig& cfg, const std::string& axis) {
  const Paths base = prepare_run_dir(cfg);

  std::vector<std::pair<std::string, ExperimentConfig>> values;
  if (axis == "layer") {
    for (int v : cfg.sweep.layers) {
      ExperimentConfig sub = cfg;
      sub.hook_layer = v;
      values.emplace_back("layer" + std::to_string(v), sub);
    }
  } else if (axis == "alpha") {
    for (double v : cfg.sweep.alphas) {
      ExperimentConfig sub = cfg;
      sub.sae.alpha = v;
      values.emplace_back("alpha" + io::fmt(v), sub);
    }
  } else if (axis == "latent") {
    for (int v : cfg.sweep.latents) {
      ExperimentConfig sub = cfg;
      sub.sae.latent = v;
      values.emplace_back("latent" + std::to_string(v), sub);
    }
  } else if (axis == "penalty") {
    for (const auto& v : cfg.sweep.penalties) {
      ExperimentConfig sub = cfg;
      sub.sae.penalty = v;
      values.emplace_back("penalty-" + v, sub);
    }
  } else if (axis == "site") {
    for (const auto& v : cfg.sweep.sites) {
      ExperimentConfig sub = cfg;
      sub.hook_site = v;
      values.emplace_back("site-" + v, sub);
    }
  } else {
    throw std::invalid_argument("sweep: unknown axis '" + axis +
                                "' (expected layer|alpha|latent|penalty|site)");
  }

  // corpus and base model are shared across values; build them once here
  if (!fs::exists(base.train)) stage_gen_data(cfg);
  if (!fs::exists(base.lm_ckpt)) stage_train_lm(cfg);

  std::vector<SweepRow> rows;
  for (auto& [tag, sub] : values) {
    sub.out_dir = cfg.out_dir + "/sweep-" + axis + "/" + tag;
    SweepRow row;
    row.value = tag;
    try {
      const Paths p = prepare_run_dir(sub);
      for (const auto& [from, to] :
           {std::pair{base.specs, p.specs}, std::pair{base.train, p.train},
            std::pair{base.valid, p.valid}, std::pair{base.test, p.test}}) {
        copy_bytes(from, to);
      }
      copy_bytes(base.lm_ckpt, p.lm_ckpt);
      record_stage(p, "gen-data", {p.specs, p.train, p.valid, p.test});
      record_stage(p, "train-lm", {p.lm_ckpt});

      stage_dump_acts(sub);
      stage_train_sae(sub);
      stage_build_protos(sub);
      stage_eval_fewshot(sub);
      stage_eval_steer(sub);
      row = collect_run(p, tag);
    } catch (const std::exception& e) {
      row.status = sanitize_cell(e.what());
      std::cout << "[sweep] value=" << tag << " failed: " << e.what() << "\n";
    }
    rows.push_back(std::move(row));
  }

  std::vector<std::vector<std::string>> out;
  for (const auto& r : rows) {
    out.push_back({r.value, r.status, io::fmt(r.fewshot), io::fmt(r.ceiling), io::fmt(r.active),
                   io::fmt(r.dead), io::fmt(r.recon, 9), io::fmt(r.steered), io::fmt(r.unsteered),
                   io::fmt(r.iters)});
  }
  const std::string path = cfg.out_dir + "/sweep_" + axis + ".csv";
  io::write_csv(path,
                {"value", "status", "fewshot_overall", "ceiling", "active_fraction",
                 "dead_fraction", "mean_recon", "mean_steered_frac", "mean_unsteered_frac",
                 "mean_iters"},
                out);
  record_stage(base, "sweep-" + axis, {path});
  std::cout << "[sweep] axis=" << axis << " values=" << rows.size() << " -> " << path << "\n";
}

// ---------------------------------------------------------------------------
// source loading for single-shot commands
// ---------------------------------------------------------------------------

proto::CodeSource LoadedSource::source() const {
  proto::CodeSource s;
  s.kind = kind;
  s.lm = &lm;
  s.bank = kind == proto::SourceKind::RawQuery ? nullptr : &bank;
  s.selector = selector;
  s.validate();
  return s;
}

LoadedSource load_source(const ExperimentConfig& cfg, const std::string& kind) {
  const Paths p = Paths::at(cfg.out_dir);
  require_artifact(p.lm_ckpt, "model checkpoint", "train-lm");
  LoadedSource out;
  out.kind = proto::source_kind_from_string(kind);
  out.selector = microlm::selector_from_string(cfg.eval.selector);
  out.lm = microlm::load_weights(p.lm_ckpt);
  if (out.kind != proto::SourceKind::RawQuery) {
    require_artifact(p.sae_ckpt, "autoencoder bank", "train-sae");
    out.bank = sae::load_bank(p.sae_ckpt);
  }
  return out;
}

}  // namespace ps::pipeline
