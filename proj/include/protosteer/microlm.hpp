#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "protosteer/io.hpp"
#include "protosteer/stylegen.hpp"
#include "protosteer/tensor.hpp"

namespace ps::microlm {

using numkit::Tensor;

// Decoder-only transformer, pre-norm blocks, per-head QKV projections, rotary
// positions. Queries are captured after the query projection and before the
// rotary mix, so captured (and replaced) vectors are position-agnostic.
struct LmConfig {
  int vocab = 67;
  int dim = 64;       // D
  int layers = 4;     // L_all
  int heads = 4;      // A
  int head_dim = 16;  // d_head = D / A
  int context = 128;  // S_max
  int hook_layer = 2;
  std::string hook_site = "query";  // "query" or "residual"
  int bos_token = 64;
  int eos_token = 65;
  int sep_token = 66;
  float rope_base = 10000.0f;
  float ln_eps = 1e-5f;

  void validate() const;
  int hook_heads() const { return hook_site == "query" ? heads : 1; }
  int hook_width() const { return hook_site == "query" ? head_dim : dim; }
};

struct LayerWeights {
  std::vector<Tensor> wq, wk, wv;  // per head: (D, d_head)
  Tensor wo, bo;                   // (D, D), (D)
  Tensor ln1_g, ln1_b, ln2_g, ln2_b;
  Tensor w1, b1, w2, b2;  // MLP: (D, 4D), (4D), (4D, D), (D)
};

struct LmWeights {
  LmConfig cfg;
  Tensor embed;  // (vocab, D)
  std::vector<LayerWeights> layers;
  Tensor lnf_g, lnf_b;
  Tensor w_out, b_out;  // (D, vocab), (vocab)
};

// Hook-site activations for every position of one forward pass.
// data layout: position-major, then head, then feature.
struct QueryCapture {
  int layer = 0;
  std::string site;
  int positions = 0;
  int num_heads = 0;
  int width = 0;
  std::vector<float> data;

  const float* at(int pos, int head) const {
    return data.data() + (static_cast<size_t>(pos) * num_heads + static_cast<size_t>(head)) * width;
  }
};

// Replacement vectors in capture layout plus a per-position mask.
struct InterventionPlan {
  int positions = 0;
  int num_heads = 0;
  int width = 0;
  std::vector<float> data;
  std::vector<uint8_t> mask;  // length = positions; nonzero -> replace

  static InterventionPlan from_capture(const QueryCapture& cap);
  float* at(int pos, int head) {
    return data.data() + (static_cast<size_t>(pos) * num_heads + static_cast<size_t>(head)) * width;
  }
};

LmWeights init_weights(const LmConfig& cfg, uint64_t seed);

Tensor forward(const LmWeights& w, const std::vector<int>& tokens);
std::pair<Tensor, QueryCapture> forward_capture(const LmWeights& w, const std::vector<int>& tokens);
Tensor forward_intervene(const LmWeights& w, const std::vector<int>& tokens, const InterventionPlan& plan);

// Receives the new position's hook vector (all heads concatenated) and may
// rewrite it in place before the step's attention runs.
using SteerCallback = std::function<void(int pos, std::vector<float>& hook_vec)>;

struct GenResult {
  std::vector<int> tokens;  // generated continuation only
  bool truncated = false;   // context filled before EOS
};

GenResult generate(const LmWeights& w, const std::vector<int>& prompt, int max_new,
                   const SteerCallback& steer = nullptr);

// --------------------------------------------------------------------------
// Training
// --------------------------------------------------------------------------

struct TrainConfig {
  int epochs = 3;
  int batch = 8;  // sequences per Adam step (gradient accumulation)
  double lr = 1e-3;
  double warmup_fraction = 0.1;
  int val_batch = 64;  // fixed validation prefix used for the loss record
  uint64_t seed = 1;
};

struct TrainLog {
  double initial_val_loss = 0.0;
  double final_val_loss = 0.0;
  std::vector<double> epoch_val_loss;
  std::vector<double> step_loss;  // per optimizer step, mean microbatch loss
};

// [BOS] x [SEP] y [EOS]
std::vector<int> sequence_tokens(const LmConfig& cfg, const stylegen::StyledExample& ex);

double mean_sequence_loss(const LmWeights& w, const std::vector<stylegen::StyledExample>& examples,
                          int limit);

LmWeights train_lm(const LmConfig& cfg, const std::vector<stylegen::StyledExample>& train,
                   const std::vector<stylegen::StyledExample>& valid, const TrainConfig& tc,
                   TrainLog* log = nullptr);

void save_weights(const std::string& path, const LmWeights& w);
LmWeights load_weights(const std::string& path);

// --------------------------------------------------------------------------
// Activation dumps
// --------------------------------------------------------------------------

enum class PositionSelector { All, ResponseOnly };

PositionSelector selector_from_string(const std::string& s);
std::string selector_to_string(PositionSelector s);

// Absolute sequence positions of the example's own tokens (specials excluded):
// prompt and response positions for All, response positions only otherwise.
std::vector<int> selected_positions(const stylegen::StyledExample& ex, PositionSelector sel);

// Teacher-forces each example and keeps the hook vectors at the selected
// positions. Record order follows the example order.
std::vector<io::DumpRecord> dump_activations(const LmWeights& w,
                                             const std::vector<stylegen::StyledExample>& examples,
                                             PositionSelector sel);
io::DumpHeader dump_header(const LmConfig& cfg, int64_t examples);

}  // namespace ps::microlm
