#include "protosteer/proto.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace ps::proto {

using numkit::Tensor;

SourceKind source_kind_from_string(const std::string& s) {
  if (s == "sae-query") return SourceKind::SaeQuery;
  if (s == "raw-query") return SourceKind::RawQuery;
  if (s == "sae-residual") return SourceKind::SaeResidual;
  throw std::invalid_argument("unknown code source '" + s +
                              "' (expected sae-query | raw-query | sae-residual)");
}

std::string source_kind_to_string(SourceKind k) {
  switch (k) {
    case SourceKind::SaeQuery: return "sae-query";
    case SourceKind::RawQuery: return "raw-query";
    case SourceKind::SaeResidual: return "sae-residual";
  }
  return "?";
}

void CodeSource::validate() const {
  if (!lm) throw std::invalid_argument("code source: missing model weights");
  const std::string& site = lm->cfg.hook_site;
  switch (kind) {
    case SourceKind::SaeQuery:
      if (site != "query") throw std::invalid_argument("sae-query source needs hook site 'query', got '" + site + "'");
      if (!bank || bank->site != "query") throw std::invalid_argument("sae-query source needs a query-site bank");
      if (bank->heads.size() != static_cast<size_t>(lm->cfg.heads)) {
        throw std::invalid_argument("bank has " + std::to_string(bank->heads.size()) + " SAEs for " +
                                    std::to_string(lm->cfg.heads) + " heads");
      }
      break;
    case SourceKind::RawQuery:
      if (site != "query") throw std::invalid_argument("raw-query source needs hook site 'query', got '" + site + "'");
      break;
    case SourceKind::SaeResidual:
      if (site != "residual") {
        throw std::invalid_argument("sae-residual source needs hook site 'residual', got '" + site + "'");
      }
      if (!bank || bank->site != "residual" || bank->heads.size() != 1) {
        throw std::invalid_argument("sae-residual source needs a single residual-site SAE");
      }
      break;
  }
}

int CodeSource::width() const {
  switch (kind) {
    case SourceKind::SaeQuery: return lm->cfg.heads * bank->cfg.latent;
    case SourceKind::RawQuery: return lm->cfg.heads * lm->cfg.head_dim;
    case SourceKind::SaeResidual: return bank->cfg.latent;
  }
  return 0;
}

std::string CodeSource::describe() const {
  return source_kind_to_string(kind) + "/layer" + std::to_string(lm->cfg.hook_layer) + "/" +
         microlm::selector_to_string(selector);
}

Code embed_example(const CodeSource& source, const stylegen::StyledExample& ex) {
  source.validate();
  const auto seq = microlm::sequence_tokens(source.lm->cfg, ex);
  const auto [logits, cap] = microlm::forward_capture(*source.lm, seq);
  (void)logits;
  const auto positions = microlm::selected_positions(ex, source.selector);
  if (positions.empty()) throw std::invalid_argument("embed_example: no selected positions");

  const bool use_sae = source.kind != SourceKind::RawQuery;
  const int heads = cap.num_heads;
  const int in_width = cap.width;
  const int out_width = use_sae ? source.bank->cfg.latent : in_width;
  Code code(static_cast<size_t>(heads) * out_width, 0.0);
  Tensor buf({in_width});
  for (int h = 0; h < heads; ++h) {
    double* acc = code.data() + static_cast<size_t>(h) * out_width;
    for (int pos : positions) {
      const float* src = cap.at(pos, h);
      if (use_sae) {
        std::copy(src, src + in_width, buf.data());
        const Tensor z = sae::encode(source.bank->heads[static_cast<size_t>(h)], buf);
        for (int j = 0; j < out_width; ++j) acc[j] += z[j];
      } else {
        for (int j = 0; j < out_width; ++j) acc[j] += src[j];
      }
    }
    const double inv = 1.0 / static_cast<double>(positions.size());
    for (int j = 0; j < out_width; ++j) acc[j] *= inv;
  }
  return code;
}

PrototypeBank build_prototypes(const CodeSource& source, const std::vector<stylegen::StyledExample>& support,
                               int per_class) {
  source.validate();
  if (per_class < 1) throw std::invalid_argument("build_prototypes: per-class count must be positive");
  int classes = 0;
  for (const auto& ex : support) classes = std::max(classes, ex.label + 1);
  if (classes < 2) throw std::invalid_argument("build_prototypes: need at least 2 classes in the support set");

  PrototypeBank bank;
  bank.support_per_class = per_class;
  bank.source_desc = source.describe();
  bank.mu.assign(static_cast<size_t>(classes), Code(static_cast<size_t>(source.width()), 0.0));
  std::vector<int> counts(static_cast<size_t>(classes), 0);
  for (const auto& ex : support) {
    int& n = counts[static_cast<size_t>(ex.label)];
    if (n >= per_class) continue;
    const Code code = embed_example(source, ex);
    Code& mu = bank.mu[static_cast<size_t>(ex.label)];
    for (size_t j = 0; j < code.size(); ++j) mu[j] += code[j];
    ++n;
  }
  for (int c = 0; c < classes; ++c) {
    if (counts[static_cast<size_t>(c)] == 0) {
      throw std::invalid_argument("build_prototypes: no support examples for class " + std::to_string(c));
    }
    const double inv = 1.0 / counts[static_cast<size_t>(c)];
    for (double& v : bank.mu[static_cast<size_t>(c)]) v *= inv;
  }
  return bank;
}

namespace {

void check_code(const Code& code, const PrototypeBank& bank, const char* who) {
  if (bank.classes() < 2) throw std::invalid_argument(std::string(who) + ": bank has fewer than 2 classes");
  if (static_cast<int>(code.size()) != bank.width()) {
    throw std::invalid_argument(std::string(who) + ": code width " + std::to_string(code.size()) +
                                " vs bank width " + std::to_string(bank.width()));
  }
  for (double v : code) {
    if (!std::isfinite(v)) throw std::invalid_argument(std::string(who) + ": non-finite code");
  }
}

std::vector<double> distances(const Code& code, const PrototypeBank& bank, const std::string& distance) {
  if (distance != "l2" && distance != "sq") {
    throw std::invalid_argument("unknown distance kind '" + distance + "' (expected l2 | sq)");
  }
  std::vector<double> d(bank.classes(), 0.0);
  for (size_t c = 0; c < bank.classes(); ++c) {
    double ss = 0.0;
    const Code& mu = bank.mu[c];
    for (size_t j = 0; j < code.size(); ++j) {
      const double diff = code[j] - mu[j];
      ss += diff * diff;
    }
    d[c] = distance == "l2" ? std::sqrt(ss) : ss;
  }
  return d;
}

std::vector<double> softmax_neg(const std::vector<double>& d) {
  const double m = *std::min_element(d.begin(), d.end());
  std::vector<double> p(d.size());
  double sum = 0.0;
  for (size_t c = 0; c < d.size(); ++c) {
    p[c] = std::exp(-(d[c] - m));
    sum += p[c];
  }
  for (double& v : p) v /= sum;
  return p;
}

}  // namespace

std::vector<double> classify(const Code& code, const PrototypeBank& bank, const std::string& distance) {
  check_code(code, bank, "classify");
  return softmax_neg(distances(code, bank, distance));
}

double log_prob_target(const Code& code, const PrototypeBank& bank, int target, const std::string& distance) {
  check_code(code, bank, "log_prob_target");
  if (target < 0 || static_cast<size_t>(target) >= bank.classes()) {
    throw std::out_of_range("target class " + std::to_string(target) + " outside bank of " +
                            std::to_string(bank.classes()));
  }
  const auto d = distances(code, bank, distance);
  const double m = *std::min_element(d.begin(), d.end());
  double sum = 0.0;
  for (double dc : d) sum += std::exp(-(dc - m));
  return -(d[static_cast<size_t>(target)] - m) - std::log(sum);
}

EvalResult fewshot_eval(const CodeSource& source, const PrototypeBank& bank,
                        const std::vector<stylegen::StyledExample>& test) {
  const size_t classes = bank.classes();
  EvalResult r;
  r.per_class.assign(classes, 0.0);
  r.confusion.assign(classes, std::vector<int64_t>(classes, 0));
  std::vector<int64_t> totals(classes, 0);
  int64_t hits = 0;
  for (const auto& ex : test) {
    if (ex.label < 0 || static_cast<size_t>(ex.label) >= classes) {
      throw std::out_of_range("fewshot_eval: label " + std::to_string(ex.label) + " outside bank of " +
                              std::to_string(classes));
    }
    const auto p = classify(embed_example(source, ex), bank);
    int pred = 0;
    for (size_t c = 1; c < p.size(); ++c) {
      if (p[c] > p[static_cast<size_t>(pred)]) pred = static_cast<int>(c);
    }
    r.confusion[static_cast<size_t>(ex.label)][static_cast<size_t>(pred)] += 1;
    totals[static_cast<size_t>(ex.label)] += 1;
    if (pred == ex.label) ++hits;
    ++r.count;
  }
  if (r.count == 0) throw std::invalid_argument("fewshot_eval: empty test set");
  r.overall = static_cast<double>(hits) / static_cast<double>(r.count);
  for (size_t c = 0; c < classes; ++c) {
    r.per_class[c] = totals[c] ? static_cast<double>(r.confusion[c][c]) / static_cast<double>(totals[c]) : 0.0;
  }
  return r;
}

Code steer_grad(const Code& z, const PrototypeBank& bank, int target, const std::string& distance) {
  check_code(z, bank, "steer_grad");
  if (target < 0 || static_cast<size_t>(target) >= bank.classes()) {
    throw std::out_of_range("target class " + std::to_string(target) + " outside bank of " +
                            std::to_string(bank.classes()));
  }
  const auto d = distances(z, bank, distance);
  const auto p = softmax_neg(d);
  Code grad(z.size(), 0.0);
  if (distance == "l2") {
    // d log p_t / dz = -u_t + sum_k p_k u_k,  u_k = (z - mu_k) / max(||z - mu_k||, 1e-12)
    for (size_t c = 0; c < bank.classes(); ++c) {
      const double denom = std::max(d[c], 1e-12);
      const double w = p[c] - (static_cast<size_t>(target) == c ? 1.0 : 0.0);
      const Code& mu = bank.mu[c];
      for (size_t j = 0; j < z.size(); ++j) grad[j] += w * (z[j] - mu[j]) / denom;
    }
  } else {
    // squared-L2 variant: -2(z - mu_t) + sum_k p_k 2(z - mu_k)
    for (size_t c = 0; c < bank.classes(); ++c) {
      const double w = 2.0 * (p[c] - (static_cast<size_t>(target) == c ? 1.0 : 0.0));
      const Code& mu = bank.mu[c];
      for (size_t j = 0; j < z.size(); ++j) grad[j] += w * (z[j] - mu[j]);
    }
  }
  return grad;
}

std::pair<Code, SteerTrace> steer(const Code& z0, const PrototypeBank& bank, int target,
                                  const SteerConfig& cfg) {
  if (cfg.eta <= 0.0 || cfg.eps_stop <= 0.0) {
    throw std::invalid_argument("steer: eta and eps_stop must be positive");
  }
  check_code(z0, bank, "steer");
  Code z = z0;
  SteerTrace trace;
  while (true) {
    const Code g = steer_grad(z, bank, target, cfg.distance);
    double gsq = 0.0;
    for (double v : g) gsq += v * v;
    trace.log_prob.push_back(log_prob_target(z, bank, target, cfg.distance));
    trace.grad_sq.push_back(gsq);
    if (gsq <= cfg.eps_stop) {
      trace.termination = "converged";
      break;
    }
    if (trace.steps >= cfg.max_iters) {
      trace.termination = "max-iters";
      break;
    }
    for (size_t j = 0; j < z.size(); ++j) {
      z[j] += cfg.eta * g[j];
      if (cfg.nonneg && z[j] < 0.0) z[j] = 0.0;
      if (!std::isfinite(z[j])) {
        throw std::runtime_error("steer: non-finite iterate at step " + std::to_string(trace.steps + 1));
      }
    }
    ++trace.steps;
  }
  return {std::move(z), std::move(trace)};
}

Code direct_assign(const Code& z, const PrototypeBank& bank, int target) {
  (void)z;
  if (target < 0 || static_cast<size_t>(target) >= bank.classes()) {
    throw std::out_of_range("target class " + std::to_string(target) + " outside bank of " +
                            std::to_string(bank.classes()));
  }
  return bank.mu[static_cast<size_t>(target)];
}

void save_prototypes(const std::string& path, const PrototypeBank& bank) {
  io::Checkpoint ckpt;
  ckpt.header = io::json{{"kind", "proto-bank"},
                         {"classes", bank.classes()},
                         {"support_per_class", bank.support_per_class},
                         {"width", bank.width()},
                         {"source", bank.source_desc}};
  for (size_t c = 0; c < bank.mu.size(); ++c) {
    Tensor t({static_cast<int64_t>(bank.mu[c].size())});
    for (size_t j = 0; j < bank.mu[c].size(); ++j) t[static_cast<int64_t>(j)] = static_cast<float>(bank.mu[c][j]);
    ckpt.put("mu" + std::to_string(c), t);
  }
  io::save_checkpoint(path, ckpt);
}

PrototypeBank load_prototypes(const std::string& path) {
  const io::Checkpoint ckpt = io::load_checkpoint(path);
  if (ckpt.header.value("kind", "") != "proto-bank") {
    throw std::runtime_error("not a prototype bank: " + path);
  }
  PrototypeBank bank;
  bank.support_per_class = ckpt.header.at("support_per_class").get<int>();
  bank.source_desc = ckpt.header.at("source").get<std::string>();
  const size_t classes = ckpt.header.at("classes").get<size_t>();
  for (size_t c = 0; c < classes; ++c) {
    const Tensor& t = ckpt.get("mu" + std::to_string(c));
    Code mu(static_cast<size_t>(t.numel()));
    for (int64_t j = 0; j < t.numel(); ++j) mu[static_cast<size_t>(j)] = t[j];
    bank.mu.push_back(std::move(mu));
  }
  return bank;
}

}  // namespace ps::proto
