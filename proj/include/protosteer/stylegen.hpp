#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace ps::stylegen {

// One style class: a smoothed unigram distribution over the full vocabulary.
struct StyleSpec {
  int class_id = 0;
  std::string name;
  std::vector<double> probs;  // length = vocab size, sums to 1
};

struct CorpusConfig {
  int num_classes = 6;
  int content_tokens = 64;  // specials (BOS, EOS, SEP) appended after these
  int marker_block = 10;    // disjoint content-token block owned by each class
  double marker_weight = 20.0;
  double smoothing_floor = 1e-4;
  int prompt_len_min = 12;
  int prompt_len_max = 20;
  int response_len_min = 24;
  int response_len_max = 40;
  double mix_rho = 0.7;  // response tokens: rho from class unigram, rest shared
  double split_train = 0.5;
  double split_valid = 0.2;
  double split_test = 0.3;
  int corpus_size = 3000;
  uint64_t seed = 1;

  int vocab_size() const { return content_tokens + 3; }
  int bos() const { return content_tokens; }
  int eos() const { return content_tokens + 1; }
  int sep() const { return content_tokens + 2; }
};

struct StyledExample {
  std::vector<int> prompt;
  std::vector<int> response;
  int label = 0;
};

struct CorpusSplits {
  std::vector<StyledExample> train;
  std::vector<StyledExample> valid;
  std::vector<StyledExample> test;
};

struct JudgeResult {
  int cls = 0;
  std::vector<double> loglik;
};

struct BayesEstimate {
  double accuracy = 0.0;
  double ci_lo = 0.0;  // binomial 95% interval, normal approximation
  double ci_hi = 0.0;
  int n = 0;
};

// C distinct unigram distributions. Class c puts marker_weight on its own
// disjoint block of content tokens, unit weight (jittered per class) on the
// rest, floor-smoothed so every vocabulary token has probability >= floor.
std::vector<StyleSpec> build_specs(const CorpusConfig& cfg, uint64_t seed);

// Zipf distribution over content tokens under a fixed rank permutation, so
// each class's marker block holds a balanced mix of common and rare tokens.
// Prompts and the (1-rho) share of response tokens are drawn from it. The
// skew gives the LM learnable structure in prompts; a uniform shared
// distribution would leave prompt positions at irreducible maximum entropy.
std::vector<double> shared_distribution(const CorpusConfig& cfg);

CorpusSplits generate_corpus(const CorpusConfig& cfg);

// Per-class log-likelihood of the response under each spec's unigram; argmax
// with ties broken toward the lowest class id.
JudgeResult judge(const std::vector<int>& response, const std::vector<StyleSpec>& specs);

// Monte-Carlo estimate of judge accuracy on freshly sampled labeled responses.
BayesEstimate bayes_reference(const std::vector<StyleSpec>& specs, const CorpusConfig& cfg,
                              int n_samples, uint64_t seed);

double total_variation(const StyleSpec& a, const StyleSpec& b);

const char* default_class_name(int class_id);

}  // namespace ps::stylegen
