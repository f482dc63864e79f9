#include "protosteer/stylegen.hpp"

#include <cmath>
#include <stdexcept>

#include "protosteer/rng.hpp"

namespace ps::stylegen {

namespace {

const char* kClassNames[6] = {"remember", "understand", "apply", "analyze", "evaluate", "create"};

void validate(const CorpusConfig& cfg) {
  if (cfg.num_classes < 2) {
    throw std::invalid_argument("corpus config: need at least 2 classes, got " + std::to_string(cfg.num_classes));
  }
  if (cfg.num_classes * cfg.marker_block > cfg.content_tokens) {
    throw std::invalid_argument("corpus config: " + std::to_string(cfg.num_classes) + " classes x " +
                                std::to_string(cfg.marker_block) + " marker tokens exceed " +
                                std::to_string(cfg.content_tokens) + " content tokens");
  }
  const double split_sum = cfg.split_train + cfg.split_valid + cfg.split_test;
  if (std::fabs(split_sum - 1.0) > 1e-9) {
    throw std::invalid_argument("corpus config: split fractions sum to " + std::to_string(split_sum));
  }
  if (cfg.prompt_len_min < 1 || cfg.prompt_len_max < cfg.prompt_len_min || cfg.response_len_min < 1 ||
      cfg.response_len_max < cfg.response_len_min) {
    throw std::invalid_argument("corpus config: bad length ranges");
  }
  if (cfg.mix_rho < 0.0 || cfg.mix_rho > 1.0) {
    throw std::invalid_argument("corpus config: mix rho outside [0,1]");
  }
}

std::vector<int> sample_tokens(const std::vector<double>& dist, int n, Rng& rng) {
  std::vector<int> out(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) out[static_cast<size_t>(i)] = static_cast<int>(rng.discrete(dist));
  return out;
}

std::vector<int> sample_response(const StyleSpec& spec, const std::vector<double>& shared, double rho, int n,
                                 Rng& rng) {
  std::vector<int> out(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    const bool from_class = rng.uniform() < rho;
    out[static_cast<size_t>(i)] = static_cast<int>(rng.discrete(from_class ? spec.probs : shared));
  }
  return out;
}

std::vector<StyledExample> make_split(const CorpusConfig& cfg, const std::vector<StyleSpec>& specs,
                                      const std::vector<double>& shared, int count, uint64_t seed) {
  Rng rng(seed);
  std::vector<StyledExample> out;
  out.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) {
    StyledExample ex;
    ex.label = i % cfg.num_classes;  // balanced: counts per class differ by at most 1
    const int plen = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(cfg.prompt_len_min),
                                                      static_cast<uint64_t>(cfg.prompt_len_max)));
    const int rlen = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(cfg.response_len_min),
                                                      static_cast<uint64_t>(cfg.response_len_max)));
    ex.prompt = sample_tokens(shared, plen, rng);
    ex.response = sample_response(specs[static_cast<size_t>(ex.label)], shared, cfg.mix_rho, rlen, rng);
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace

const char* default_class_name(int class_id) {
  if (class_id >= 0 && class_id < 6) return kClassNames[class_id];
  return "class";
}

std::vector<StyleSpec> build_specs(const CorpusConfig& cfg, uint64_t seed) {
  validate(cfg);
  Rng rng(derive_seed(seed, "specs"));
  const int v = cfg.vocab_size();
  std::vector<StyleSpec> specs;
  specs.reserve(static_cast<size_t>(cfg.num_classes));
  for (int c = 0; c < cfg.num_classes; ++c) {
    StyleSpec s;
    s.class_id = c;
    s.name = c < 6 ? kClassNames[c] : ("class" + std::to_string(c));
    // Raw weights over content tokens: marker_weight on this class's block,
    // jittered unit weight elsewhere. Specials carry only the smoothing floor.
    std::vector<double> w(static_cast<size_t>(v), 0.0);
    const int block_lo = c * cfg.marker_block;
    const int block_hi = block_lo + cfg.marker_block;
    double total = 0.0;
    for (int t = 0; t < cfg.content_tokens; ++t) {
      const bool marked = t >= block_lo && t < block_hi;
      const double jitter = rng.uniform(0.8, 1.2);
      w[static_cast<size_t>(t)] = marked ? cfg.marker_weight : jitter;
      total += w[static_cast<size_t>(t)];
    }
    // p = (1 - V*floor) * raw + floor, so every token sits at or above the floor
    const double keep = 1.0 - static_cast<double>(v) * cfg.smoothing_floor;
    if (keep <= 0.0) throw std::invalid_argument("corpus config: smoothing floor too large for vocabulary");
    s.probs.resize(static_cast<size_t>(v));
    for (int t = 0; t < v; ++t) {
      s.probs[static_cast<size_t>(t)] = keep * (w[static_cast<size_t>(t)] / total) + cfg.smoothing_floor;
    }
    specs.push_back(std::move(s));
  }
  return specs;
}

std::vector<double> shared_distribution(const CorpusConfig& cfg) {
  validate(cfg);
  std::vector<double> p(static_cast<size_t>(cfg.vocab_size()), 0.0);
  // rank(t) = t*37 mod V scatters consecutive tokens across the Zipf ranks,
  // keeping every marker block's share of the shared mass comparable.
  // The 8+rank offset caps the top shared probability (~0.055) for two load
  // bearing reasons: in the rho-weighted response mixture every class's modal
  // token must be one of its own markers rather than the shared head, and
  // prompts must rarely repeat a token, since a token repeated several times
  // in the prompt locks greedy decoding onto its marker block regardless of
  // interventions downstream.
  double total = 0.0;
  for (int t = 0; t < cfg.content_tokens; ++t) {
    const int rank = (t * 37) % cfg.content_tokens;
    p[static_cast<size_t>(t)] = 1.0 / static_cast<double>(8 + rank);
    total += p[static_cast<size_t>(t)];
  }
  for (int t = 0; t < cfg.content_tokens; ++t) p[static_cast<size_t>(t)] /= total;
  return p;
}

CorpusSplits generate_corpus(const CorpusConfig& cfg) {
  validate(cfg);
  const auto specs = build_specs(cfg, cfg.seed);
  const auto shared = shared_distribution(cfg);
  const int n_train = static_cast<int>(std::llround(cfg.split_train * cfg.corpus_size));
  const int n_valid = static_cast<int>(std::llround(cfg.split_valid * cfg.corpus_size));
  const int n_test = cfg.corpus_size - n_train - n_valid;
  CorpusSplits splits;
  splits.train = make_split(cfg, specs, shared, n_train, derive_seed(cfg.seed, "corpus/train"));
  splits.valid = make_split(cfg, specs, shared, n_valid, derive_seed(cfg.seed, "corpus/valid"));
  splits.test = make_split(cfg, specs, shared, n_test, derive_seed(cfg.seed, "corpus/test"));
  return splits;
}

JudgeResult judge(const std::vector<int>& response, const std::vector<StyleSpec>& specs) {
  if (response.empty()) throw std::invalid_argument("judge: empty response");
  if (specs.empty()) throw std::invalid_argument("judge: no class specs");
  const auto v = specs[0].probs.size();
  JudgeResult r;
  r.loglik.assign(specs.size(), 0.0);
  for (int tok : response) {
    if (tok < 0 || static_cast<size_t>(tok) >= v) {
      throw std::out_of_range("judge: token " + std::to_string(tok) + " outside vocabulary of " +
                              std::to_string(v));
    }
    for (size_t k = 0; k < specs.size(); ++k) {
      r.loglik[k] += std::log(specs[k].probs[static_cast<size_t>(tok)]);
    }
  }
  r.cls = 0;
  for (size_t k = 1; k < specs.size(); ++k) {
    if (r.loglik[k] > r.loglik[static_cast<size_t>(r.cls)]) r.cls = static_cast<int>(k);
  }
  return r;
}

BayesEstimate bayes_reference(const std::vector<StyleSpec>& specs, const CorpusConfig& cfg, int n_samples,
                              uint64_t seed) {
  if (n_samples < 1000) {
    throw std::invalid_argument("bayes_reference: need at least 1000 samples, got " + std::to_string(n_samples));
  }
  const auto shared = shared_distribution(cfg);
  Rng rng(derive_seed(seed, "bayes"));
  int hits = 0;
  for (int i = 0; i < n_samples; ++i) {
    const int label = i % cfg.num_classes;
    const int rlen = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(cfg.response_len_min),
                                                      static_cast<uint64_t>(cfg.response_len_max)));
    const auto resp = sample_response(specs[static_cast<size_t>(label)], shared, cfg.mix_rho, rlen, rng);
    if (judge(resp, specs).cls == label) ++hits;
  }
  BayesEstimate est;
  est.n = n_samples;
  est.accuracy = static_cast<double>(hits) / static_cast<double>(n_samples);
  const double se = std::sqrt(est.accuracy * (1.0 - est.accuracy) / static_cast<double>(n_samples));
  est.ci_lo = est.accuracy - 1.96 * se;
  est.ci_hi = est.accuracy + 1.96 * se;
  return est;
}

double total_variation(const StyleSpec& a, const StyleSpec& b) {
  if (a.probs.size() != b.probs.size()) {
    throw std::invalid_argument("total_variation: spec lengths " + std::to_string(a.probs.size()) + " vs " +
                                std::to_string(b.probs.size()));
  }
  double s = 0.0;
  for (size_t i = 0; i < a.probs.size(); ++i) s += std::fabs(a.probs[i] - b.probs[i]);
  return 0.5 * s;
}

}  // namespace ps::stylegen
