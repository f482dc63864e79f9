#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "protosteer/microlm.hpp"
#include "protosteer/sae.hpp"

namespace ps::proto {

// Pooled example embeddings and all prototype arithmetic run in double:
// the steering gradient is validated against finite differences at 1e-6,
// which float32 storage cannot express.
using Code = std::vector<double>;

enum class SourceKind { SaeQuery, RawQuery, SaeResidual };

SourceKind source_kind_from_string(const std::string& s);
std::string source_kind_to_string(SourceKind k);

// Turns examples into fixed-width codes: capture hook-site vectors, encode
// them per head (SAE kinds) or take them raw, mean-pool over the selected
// positions, concatenate heads.
struct CodeSource {
  SourceKind kind = SourceKind::SaeQuery;
  const microlm::LmWeights* lm = nullptr;
  const sae::HeadBank* bank = nullptr;  // unused for RawQuery
  microlm::PositionSelector selector = microlm::PositionSelector::ResponseOnly;

  int width() const;
  void validate() const;
  std::string describe() const;
};

Code embed_example(const CodeSource& source, const stylegen::StyledExample& ex);

struct PrototypeBank {
  std::vector<Code> mu;  // one per class, uniform width
  int support_per_class = 0;
  std::string source_desc;

  size_t classes() const { return mu.size(); }
  int width() const { return mu.empty() ? 0 : static_cast<int>(mu[0].size()); }
};

PrototypeBank build_prototypes(const CodeSource& source, const std::vector<stylegen::StyledExample>& support,
                               int per_class);

// p_c = softmax over negative distances, computed shift-stably.
std::vector<double> classify(const Code& code, const PrototypeBank& bank, const std::string& distance = "l2");
double log_prob_target(const Code& code, const PrototypeBank& bank, int target,
                       const std::string& distance = "l2");

struct EvalResult {
  double overall = 0.0;
  std::vector<double> per_class;
  std::vector<std::vector<int64_t>> confusion;  // [label][predicted]
  int64_t count = 0;
};

EvalResult fewshot_eval(const CodeSource& source, const PrototypeBank& bank,
                        const std::vector<stylegen::StyledExample>& test);

struct SteerConfig {
  double eta = 0.8;
  double eps_stop = 1e-4;  // threshold on the squared gradient norm
  int max_iters = 200;
  std::string distance = "l2";  // "l2" | "sq" (squared-L2)
  bool nonneg = true;           // clamp the iterate at 0 after each step (SAE codes)
};

struct SteerTrace {
  std::vector<double> log_prob;  // one entry per visited iterate
  std::vector<double> grad_sq;
  int steps = 0;
  std::string termination;  // "converged" | "max-iters"
};

Code steer_grad(const Code& z, const PrototypeBank& bank, int target, const std::string& distance = "l2");

std::pair<Code, SteerTrace> steer(const Code& z0, const PrototypeBank& bank, int target,
                                  const SteerConfig& cfg);

Code direct_assign(const Code& z, const PrototypeBank& bank, int target);

void save_prototypes(const std::string& path, const PrototypeBank& bank);
PrototypeBank load_prototypes(const std::string& path);

}  // namespace ps::proto
