#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "protosteer/io.hpp"
#include "protosteer/tensor.hpp"

namespace ps::sae {

using numkit::Tensor;

struct SaeConfig {
  int d_in = 16;
  int latent = 512;  // H; must exceed d_in (overcomplete code)
  double alpha = 3e-4;
  double beta = 1e-4;
  std::string penalty = "l1";  // "l1" | "l2" (squared L2 ablation)
  float norm_eps = 1e-8f;
  int epochs = 40;
  int batch = 256;
  double lr = 3e-5;
  double warmup_fraction = 0.1;
  int max_vectors = 16384;  // per-head training subsample cap
  uint64_t seed = 1;

  void validate() const;
};

struct SaeParams {
  Tensor w_e;  // (H, d_in)
  Tensor b_e;  // (H)
  Tensor w_d;  // (d_in, H); raw trainable weights, normalized per column on use
};

struct HeadBank {
  int layer = 0;
  std::string site;  // "query" (one SAE per head) or "residual" (single SAE)
  SaeConfig cfg;
  std::vector<SaeParams> heads;
};

struct LossParts {
  double total = 0.0;
  double recon = 0.0;
  double sparsity = 0.0;  // penalty value before the alpha factor
  double bias = 0.0;      // ||b_e||_2 before the beta factor
};

struct TrainCurve {
  double initial_holdout = 0.0;
  double final_holdout = 0.0;
  std::vector<double> epoch_holdout;
  std::vector<double> step_loss;
};

struct SparsityStats {
  double active_fraction = 0.0;  // mean fraction of strictly positive latents
  double dead_fraction = 0.0;    // latents never active over the dataset
  double mean_recon = 0.0;       // mean squared reconstruction error
  int64_t vectors = 0;
};

SaeParams init_params(const SaeConfig& cfg, uint64_t seed);

// z = ReLU(W_e q + b_e), rows of q independent.
Tensor encode(const SaeParams& p, const Tensor& q_rows);
Tensor normalize_decoder(const Tensor& w_d, float norm_eps);
// q_hat = normalize(W_d) z, rows of z independent.
Tensor decode(const SaeParams& p, const Tensor& z_rows, float norm_eps);

// Single-example Eq.-style loss: ||q_hat - q||^2 + alpha*P(z) + beta*||b_e||_2.
LossParts sae_loss(const SaeParams& p, const Tensor& q, const SaeConfig& cfg);

// All of one head's vectors from a dump, stacked into an (N, width) matrix.
Tensor head_matrix(const io::Dump& dump, int head);

SaeParams train_sae(const Tensor& vectors, const SaeConfig& cfg, TrainCurve* curve = nullptr);

HeadBank train_bank(const io::Dump& dump, const SaeConfig& cfg, int jobs = 1,
                    std::vector<TrainCurve>* curves = nullptr);

SparsityStats sparsity_stats(const SaeParams& p, const Tensor& vectors, float norm_eps);

void save_bank(const std::string& path, const HeadBank& bank);
HeadBank load_bank(const std::string& path);

io::json sae_config_to_json(const SaeConfig& c);
SaeConfig sae_config_from_json(const io::json& j);

}  // namespace ps::sae
