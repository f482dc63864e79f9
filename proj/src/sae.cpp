#include "protosteer/sae.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <stdexcept>
#include <thread>

#include "protosteer/autodiff.hpp"
#include "protosteer/optim.hpp"
#include "protosteer/rng.hpp"

namespace ps::sae {

namespace nk = numkit::kernels;

void SaeConfig::validate() const {
  if (latent <= d_in) {
    throw std::invalid_argument("sae config: latent width " + std::to_string(latent) +
                                " must exceed input width " + std::to_string(d_in));
  }
  if (alpha < 0.0 || beta < 0.0) throw std::invalid_argument("sae config: negative penalty coefficient");
  if (penalty != "l1" && penalty != "l2") {
    throw std::invalid_argument("sae config: unknown penalty '" + penalty + "' (expected l1 | l2)");
  }
  if (batch < 1 || epochs < 0 || max_vectors < 2) throw std::invalid_argument("sae config: bad training sizes");
}

SaeParams init_params(const SaeConfig& cfg, uint64_t seed) {
  cfg.validate();
  Rng rng(derive_seed(seed, "sae-init"));
  const float s = 1.0f / std::sqrt(static_cast<float>(cfg.d_in));
  SaeParams p;
  p.w_e = Tensor({cfg.latent, cfg.d_in});
  for (int64_t i = 0; i < p.w_e.numel(); ++i) p.w_e[i] = static_cast<float>(rng.uniform(-s, s));
  p.b_e = Tensor({cfg.latent});
  p.w_d = Tensor({cfg.d_in, cfg.latent});
  for (int64_t i = 0; i < p.w_d.numel(); ++i) p.w_d[i] = static_cast<float>(rng.uniform(-s, s));
  return p;
}

Tensor encode(const SaeParams& p, const Tensor& q_rows) {
  const Tensor q = q_rows.rank() == 1 ? q_rows.reshaped({1, q_rows.dim(0)}) : q_rows;
  if (q.dim(1) != p.w_e.dim(1)) {
    throw std::invalid_argument("encode: input width " + std::to_string(q.dim(1)) + " vs encoder width " +
                                std::to_string(p.w_e.dim(1)));
  }
  Tensor z = nk::relu(nk::add_rowvec(nk::matmul_nt(q, p.w_e), p.b_e));
  return q_rows.rank() == 1 ? z.reshaped({z.dim(1)}) : z;
}

Tensor normalize_decoder(const Tensor& w_d, float norm_eps) {
  return nk::normalize_columns(w_d, norm_eps);
}

Tensor decode(const SaeParams& p, const Tensor& z_rows, float norm_eps) {
  const Tensor z = z_rows.rank() == 1 ? z_rows.reshaped({1, z_rows.dim(0)}) : z_rows;
  if (z.dim(1) != p.w_d.dim(1)) {
    throw std::invalid_argument("decode: code width " + std::to_string(z.dim(1)) + " vs decoder width " +
                                std::to_string(p.w_d.dim(1)));
  }
  Tensor qhat = nk::matmul_nt(z, normalize_decoder(p.w_d, norm_eps));
  return z_rows.rank() == 1 ? qhat.reshaped({qhat.dim(1)}) : qhat;
}

LossParts sae_loss(const SaeParams& p, const Tensor& q, const SaeConfig& cfg) {
  const Tensor z = encode(p, q);
  const Tensor qhat = decode(p, z, cfg.norm_eps);
  LossParts parts;
  const Tensor q_flat = q.rank() == 1 ? q : q.reshaped({q.numel()});
  parts.recon = nk::l2_norm_sq(nk::sub(qhat.rank() == 1 ? qhat : qhat.reshaped({qhat.numel()}), q_flat));
  parts.sparsity = cfg.penalty == "l1" ? nk::l1_norm(z) : nk::l2_norm_sq(z);
  parts.bias = nk::l2_norm(p.b_e);
  parts.total = parts.recon + cfg.alpha * parts.sparsity + cfg.beta * parts.bias;
  return parts;
}

Tensor head_matrix(const io::Dump& dump, int head) {
  if (head < 0 || head >= dump.header.num_heads) {
    throw std::out_of_range("head " + std::to_string(head) + " outside dump with " +
                            std::to_string(dump.header.num_heads) + " heads");
  }
  const int width = dump.header.width;
  const int heads = dump.header.num_heads;
  int64_t total = 0;
  for (const auto& r : dump.records) total += r.positions;
  Tensor m({total, width});
  int64_t row = 0;
  for (const auto& r : dump.records) {
    for (int pos = 0; pos < r.positions; ++pos) {
      const float* src = r.data.data() + (static_cast<size_t>(pos) * heads + head) * width;
      std::copy(src, src + width, m.data() + row * width);
      ++row;
    }
  }
  return m;
}

namespace {

Tensor take_rows(const Tensor& m, const std::vector<int64_t>& rows, int64_t lo, int64_t hi) {
  const int64_t w = m.dim(1);
  Tensor out({hi - lo, w});
  for (int64_t i = lo; i < hi; ++i) {
    const float* src = m.data() + rows[static_cast<size_t>(i)] * w;
    std::copy(src, src + w, out.data() + (i - lo) * w);
  }
  return out;
}

// Batch-mean loss on fixed params, kernel path only.
double batch_loss(const SaeParams& p, const Tensor& q, const SaeConfig& cfg) {
  const int64_t b = q.dim(0);
  const Tensor z = encode(p, q);
  const Tensor qhat = decode(p, z, cfg.norm_eps);
  const double recon = nk::l2_norm_sq(nk::sub(qhat, q));
  const double pen = cfg.penalty == "l1" ? nk::l1_norm(z) : nk::l2_norm_sq(z);
  return (recon + cfg.alpha * pen) / static_cast<double>(b) + cfg.beta * nk::l2_norm(p.b_e);
}

}  // namespace

SaeParams train_sae(const Tensor& vectors, const SaeConfig& cfg, TrainCurve* curve) {
  cfg.validate();
  if (vectors.rank() != 2 || vectors.dim(1) != cfg.d_in) {
    throw std::invalid_argument("train_sae: vectors " + vectors.shape_str() + " vs input width " +
                                std::to_string(cfg.d_in));
  }
  const int64_t n_all = vectors.dim(0);
  if (n_all < 2 * cfg.batch) {
    throw std::invalid_argument("train_sae: only " + std::to_string(n_all) +
                                " vectors; need at least two batches");
  }
  // Subsample (without replacement), then hold out one leading batch for the
  // before/after loss comparison.
  Rng rng(derive_seed(cfg.seed, "sae-sample"));
  std::vector<int64_t> rows(static_cast<size_t>(n_all));
  for (int64_t i = 0; i < n_all; ++i) rows[static_cast<size_t>(i)] = i;
  rng.shuffle(rows);
  const int64_t kept = std::min<int64_t>(n_all, cfg.max_vectors);
  const Tensor holdout = take_rows(vectors, rows, 0, cfg.batch);
  const Tensor train = take_rows(vectors, rows, cfg.batch, kept);
  const int64_t n = train.dim(0);

  SaeParams p = init_params(cfg, cfg.seed);
  p.w_d = normalize_decoder(p.w_d, cfg.norm_eps);

  TrainCurve local;
  TrainCurve& tc = curve ? *curve : local;
  tc.initial_holdout = batch_loss(p, holdout, cfg);

  const int64_t steps_per_epoch = (n + cfg.batch - 1) / cfg.batch;
  optim::LrSchedule sched{cfg.lr, cfg.warmup_fraction, cfg.epochs * steps_per_epoch};
  optim::AdamState adam_we(p.w_e.shape(), "w_e");
  optim::AdamState adam_be(p.b_e.shape(), "b_e");
  optim::AdamState adam_wd(p.w_d.shape(), "w_d");

  int64_t step = 0;
  std::vector<int64_t> order(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng erng(derive_seed(cfg.seed, "sae-epoch-" + std::to_string(epoch)));
    erng.shuffle(order);
    for (int64_t start = 0; start < n; start += cfg.batch) {
      const int64_t b = std::min<int64_t>(cfg.batch, n - start);
      ad::Var w_e = ad::leaf(p.w_e, true);
      ad::Var b_e = ad::leaf(p.b_e, true);
      ad::Var w_d = ad::leaf(p.w_d, true);
      ad::Var q = ad::constant(take_rows(train, order, start, start + b));
      ad::Var z = ad::relu(ad::add_rowvec(ad::matmul_nt(q, w_e), b_e));
      ad::Var qhat = ad::matmul_nt(z, ad::normalize_columns(w_d, cfg.norm_eps));
      ad::Var recon = ad::scale(ad::l2_norm_sq(ad::sub(qhat, q)), 1.0f / static_cast<float>(b));
      ad::Var pen = cfg.penalty == "l1" ? ad::l1_norm(z) : ad::l2_norm_sq(z);
      ad::Var total = ad::add(recon, ad::scale(pen, static_cast<float>(cfg.alpha) / static_cast<float>(b)));
      total = ad::add(total, ad::scale(ad::l2_norm(b_e), static_cast<float>(cfg.beta)));
      if (!std::isfinite(total->val[0])) {
        throw std::runtime_error("sae training diverged at step " + std::to_string(step));
      }
      tc.step_loss.push_back(total->val[0]);
      ad::backward(total);
      const double lr = optim::lr_at(sched, step);
      adam_step(adam_we, w_e->val, w_e->grad, lr);
      adam_step(adam_be, b_e->val, b_e->grad, lr);
      adam_step(adam_wd, w_d->val, w_d->grad, lr);
      p.w_e = w_e->val;
      p.b_e = b_e->val;
      // re-projection keeps the stored dictionary at unit column norms
      p.w_d = normalize_decoder(w_d->val, cfg.norm_eps);
      ++step;
    }
    tc.epoch_holdout.push_back(batch_loss(p, holdout, cfg));
  }
  tc.final_holdout = cfg.epochs > 0 ? tc.epoch_holdout.back() : tc.initial_holdout;
  return p;
}

HeadBank train_bank(const io::Dump& dump, const SaeConfig& cfg, int jobs, std::vector<TrainCurve>* curves) {
  if (dump.records.empty()) throw std::invalid_argument("train_bank: empty dump");
  if (cfg.d_in != dump.header.width) {
    throw std::invalid_argument("train_bank: config width " + std::to_string(cfg.d_in) +
                                " vs dump width " + std::to_string(dump.header.width));
  }
  const int heads = dump.header.num_heads;
  HeadBank bank;
  bank.layer = dump.header.layer;
  bank.site = dump.header.site;
  bank.cfg = cfg;
  bank.heads.resize(static_cast<size_t>(heads));
  if (curves) curves->resize(static_cast<size_t>(heads));

  auto run_head = [&](int h) {
    SaeConfig head_cfg = cfg;
    head_cfg.seed = derive_seed(cfg.seed, "sae-head-" + std::to_string(h));
    TrainCurve curve;
    bank.heads[static_cast<size_t>(h)] = train_sae(head_matrix(dump, h), head_cfg, &curve);
    if (curves) (*curves)[static_cast<size_t>(h)] = std::move(curve);
  };

  if (jobs <= 1 || heads == 1) {
    for (int h = 0; h < heads; ++h) run_head(h);
  } else {
    std::vector<std::thread> pool;
    std::atomic_int next{0};
    const int workers = std::min(jobs, heads);
    for (int t = 0; t < workers; ++t) {
      pool.emplace_back([&]() {
        for (int h = next.fetch_add(1); h < heads; h = next.fetch_add(1)) run_head(h);
      });
    }
    for (auto& t : pool) t.join();
  }
  return bank;
}

SparsityStats sparsity_stats(const SaeParams& p, const Tensor& vectors, float norm_eps) {
  if (vectors.rank() != 2 || vectors.dim(0) == 0) {
    throw std::invalid_argument("sparsity_stats: need a nonempty (N, width) matrix, got " +
                                vectors.shape_str());
  }
  const int64_t latent = p.b_e.dim(0);
  const Tensor z = encode(p, vectors);
  const Tensor qhat = decode(p, z, norm_eps);
  const int64_t n = vectors.dim(0);
  std::vector<uint8_t> ever_active(static_cast<size_t>(latent), 0);
  double active_sum = 0.0;
  double recon_sum = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    int64_t active = 0;
    const float* zrow = z.data() + i * latent;
    for (int64_t j = 0; j < latent; ++j) {
      if (zrow[j] > 0.0f) {
        ++active;
        ever_active[static_cast<size_t>(j)] = 1;
      }
    }
    active_sum += static_cast<double>(active) / static_cast<double>(latent);
    const float* qr = vectors.data() + i * vectors.dim(1);
    const float* hr = qhat.data() + i * vectors.dim(1);
    double err = 0.0;
    for (int64_t j = 0; j < vectors.dim(1); ++j) {
      const double d = static_cast<double>(hr[j]) - static_cast<double>(qr[j]);
      err += d * d;
    }
    recon_sum += err;
  }
  SparsityStats st;
  st.vectors = n;
  st.active_fraction = active_sum / static_cast<double>(n);
  int64_t dead = 0;
  for (uint8_t a : ever_active) {
    if (!a) ++dead;
  }
  st.dead_fraction = static_cast<double>(dead) / static_cast<double>(latent);
  st.mean_recon = recon_sum / static_cast<double>(n);
  return st;
}

io::json sae_config_to_json(const SaeConfig& c) {
  return io::json{{"d_in", c.d_in},
                  {"latent", c.latent},
                  {"alpha", c.alpha},
                  {"beta", c.beta},
                  {"penalty", c.penalty},
                  {"norm_eps", c.norm_eps},
                  {"epochs", c.epochs},
                  {"batch", c.batch},
                  {"lr", c.lr},
                  {"warmup_fraction", c.warmup_fraction},
                  {"max_vectors", c.max_vectors},
                  {"seed", c.seed}};
}

SaeConfig sae_config_from_json(const io::json& j) {
  SaeConfig c;
  c.d_in = j.at("d_in").get<int>();
  c.latent = j.at("latent").get<int>();
  c.alpha = j.at("alpha").get<double>();
  c.beta = j.at("beta").get<double>();
  c.penalty = j.at("penalty").get<std::string>();
  c.norm_eps = j.at("norm_eps").get<float>();
  c.epochs = j.at("epochs").get<int>();
  c.batch = j.at("batch").get<int>();
  c.lr = j.at("lr").get<double>();
  c.warmup_fraction = j.at("warmup_fraction").get<double>();
  c.max_vectors = j.at("max_vectors").get<int>();
  c.seed = j.at("seed").get<uint64_t>();
  return c;
}

void save_bank(const std::string& path, const HeadBank& bank) {
  io::Checkpoint ckpt;
  ckpt.header = io::json{{"kind", "sae-bank"},
                         {"layer", bank.layer},
                         {"site", bank.site},
                         {"head_count", bank.heads.size()},
                         {"config", sae_config_to_json(bank.cfg)}};
  for (size_t h = 0; h < bank.heads.size(); ++h) {
    const std::string pre = "h" + std::to_string(h) + ".";
    ckpt.put(pre + "w_e", bank.heads[h].w_e);
    ckpt.put(pre + "b_e", bank.heads[h].b_e);
    ckpt.put(pre + "w_d", bank.heads[h].w_d);
  }
  io::save_checkpoint(path, ckpt);
}

HeadBank load_bank(const std::string& path) {
  const io::Checkpoint ckpt = io::load_checkpoint(path);
  if (ckpt.header.value("kind", "") != "sae-bank") {
    throw std::runtime_error("not an sae bank checkpoint: " + path);
  }
  HeadBank bank;
  bank.layer = ckpt.header.at("layer").get<int>();
  bank.site = ckpt.header.at("site").get<std::string>();
  bank.cfg = sae_config_from_json(ckpt.header.at("config"));
  const size_t heads = ckpt.header.at("head_count").get<size_t>();
  for (size_t h = 0; h < heads; ++h) {
    const std::string pre = "h" + std::to_string(h) + ".";
    SaeParams p;
    p.w_e = ckpt.get(pre + "w_e");
    p.b_e = ckpt.get(pre + "b_e");
    p.w_d = ckpt.get(pre + "w_d");
    bank.heads.push_back(std::move(p));
  }
  return bank;
}

}  // namespace ps::sae
