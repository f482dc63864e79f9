#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "protosteer/io.hpp"
#include "protosteer/rng.hpp"
#include "protosteer/sae.hpp"
#include "protosteer/tensor.hpp"

using namespace ps;
using numkit::Tensor;
namespace fs = std::filesystem;

namespace {

struct temp_dir {
  fs::path path;
  temp_dir() {
    path = fs::temp_directory_path() / ("protosteer_sae_" + std::to_string(::getpid()) + "_" +
                                        std::to_string(counter()++));
    fs::create_directories(path);
  }
  ~temp_dir() { fs::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
  static int& counter() {
    static int c = 0;
    return c;
  }
};

// Tiny hand-checkable autoencoder: d_in = 2, latent = 3. Decoder columns
// normalize to (0.6, 0.8), (0, 1), (1/sqrt2, 1/sqrt2).
sae::SaeParams hand_params() {
  sae::SaeParams p;
  p.w_e = Tensor({3, 2}, {1.0f, 0.0f, 0.0f, 1.0f, -1.0f, -1.0f});
  p.b_e = Tensor({3}, {0.5f, -0.25f, 0.0f});
  p.w_d = Tensor({2, 3}, {3.0f, 0.0f, 1.0f, 4.0f, 2.0f, 1.0f});
  return p;
}

sae::SaeConfig hand_config() {
  sae::SaeConfig cfg;
  cfg.d_in = 2;
  cfg.latent = 3;
  cfg.alpha = 0.5;
  cfg.beta = 2.0;
  return cfg;
}

// Vectors with planted sparse structure: each sample mixes two unit atoms
// from a fixed dictionary plus small noise, so an overcomplete code can win.
Tensor synthetic_vectors(int64_t n, int d_in, int atoms, uint64_t seed) {
  Rng rng(seed);
  std::vector<std::vector<float>> dict(static_cast<size_t>(atoms), std::vector<float>(d_in));
  for (auto& col : dict) {
    double ss = 0.0;
    for (auto& v : col) {
      v = static_cast<float>(rng.normal());
      ss += static_cast<double>(v) * v;
    }
    const float inv = 1.0f / static_cast<float>(std::sqrt(ss));
    for (auto& v : col) v *= inv;
  }
  Tensor m({n, d_in});
  for (int64_t i = 0; i < n; ++i) {
    const int64_t a = rng.uniform_int(0, atoms - 1);
    int64_t b = rng.uniform_int(0, atoms - 2);
    if (b >= a) ++b;
    const float ca = static_cast<float>(rng.uniform(0.5, 1.5));
    const float cb = static_cast<float>(rng.uniform(0.5, 1.5));
    for (int j = 0; j < d_in; ++j) {
      m.at(i, j) = ca * dict[static_cast<size_t>(a)][static_cast<size_t>(j)] +
                   cb * dict[static_cast<size_t>(b)][static_cast<size_t>(j)] +
                   0.01f * static_cast<float>(rng.normal());
    }
  }
  return m;
}

sae::SaeConfig train_config() {
  sae::SaeConfig cfg;
  cfg.d_in = 8;
  cfg.latent = 16;
  cfg.alpha = 3e-3;
  cfg.beta = 1e-4;
  cfg.epochs = 20;
  cfg.batch = 64;
  cfg.lr = 3e-3;
  cfg.seed = 7;
  return cfg;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.numel() != b.numel()) return false;
  return std::memcmp(a.data(), b.data(), sizeof(float) * static_cast<size_t>(a.numel())) == 0;
}

// Dump with per-position values chosen so every (record, position, head) slice
// is identifiable: value = base + head * 100 + slot.
io::Dump toy_dump() {
  io::Dump dump;
  dump.header.layer = 1;
  dump.header.site = "query";
  dump.header.num_heads = 2;
  dump.header.width = 3;
  dump.header.examples = 2;
  io::DumpRecord r0;
  r0.label = 0;
  r0.positions = 2;
  for (int pos = 0; pos < 2; ++pos)
    for (int h = 0; h < 2; ++h)
      for (int w = 0; w < 3; ++w) r0.data.push_back(static_cast<float>(pos * 10 + h * 100 + w));
  io::DumpRecord r1;
  r1.label = 1;
  r1.positions = 1;
  for (int h = 0; h < 2; ++h)
    for (int w = 0; w < 3; ++w) r1.data.push_back(static_cast<float>(1000 + h * 100 + w));
  dump.records = {r0, r1};
  return dump;
}

}  // namespace

// ---------------------------------------------------------------------------
// config validation
// ---------------------------------------------------------------------------

TEST_CASE("config rejects non-overcomplete code width") {
  sae::SaeConfig cfg;
  cfg.d_in = 16;
  cfg.latent = 16;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg.latent = 8;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg.latent = 17;
  CHECK_NOTHROW(cfg.validate());
}

TEST_CASE("config rejects bad penalties and training sizes") {
  sae::SaeConfig cfg;
  cfg.alpha = -1e-3;
  CHECK_THROWS_WITH(cfg.validate(), "sae config: negative penalty coefficient");
  cfg.alpha = 3e-4;
  cfg.beta = -1.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg.beta = 1e-4;
  cfg.penalty = "l0";
  CHECK_THROWS_WITH(cfg.validate(), "sae config: unknown penalty 'l0' (expected l1 | l2)");
  cfg.penalty = "l2";
  CHECK_NOTHROW(cfg.validate());
  cfg.batch = 0;
  CHECK_THROWS_WITH(cfg.validate(), "sae config: bad training sizes");
  cfg.batch = 256;
  cfg.epochs = -1;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg.epochs = 0;
  cfg.max_vectors = 1;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("config json roundtrip preserves every field") {
  sae::SaeConfig cfg;
  cfg.d_in = 12;
  cfg.latent = 77;
  cfg.alpha = 1.25e-3;
  cfg.beta = 2.5e-4;
  cfg.penalty = "l2";
  cfg.norm_eps = 1e-7f;
  cfg.epochs = 9;
  cfg.batch = 33;
  cfg.lr = 4.5e-4;
  cfg.warmup_fraction = 0.25;
  cfg.max_vectors = 555;
  cfg.seed = 42;
  const sae::SaeConfig back = sae::sae_config_from_json(sae::sae_config_to_json(cfg));
  CHECK(back.d_in == cfg.d_in);
  CHECK(back.latent == cfg.latent);
  CHECK(back.alpha == cfg.alpha);
  CHECK(back.beta == cfg.beta);
  CHECK(back.penalty == cfg.penalty);
  CHECK(back.norm_eps == cfg.norm_eps);
  CHECK(back.epochs == cfg.epochs);
  CHECK(back.batch == cfg.batch);
  CHECK(back.lr == cfg.lr);
  CHECK(back.warmup_fraction == cfg.warmup_fraction);
  CHECK(back.max_vectors == cfg.max_vectors);
  CHECK(back.seed == cfg.seed);
}

// ---------------------------------------------------------------------------
// initialization
// ---------------------------------------------------------------------------

TEST_CASE("init draws weights within the 1/sqrt(d_in) band and zero bias") {
  sae::SaeConfig cfg;
  cfg.d_in = 4;
  cfg.latent = 9;
  const sae::SaeParams p = sae::init_params(cfg, 3);
  CHECK(p.w_e.dim(0) == 9);
  CHECK(p.w_e.dim(1) == 4);
  CHECK(p.b_e.dim(0) == 9);
  CHECK(p.w_d.dim(0) == 4);
  CHECK(p.w_d.dim(1) == 9);
  const float s = 0.5f;
  for (int64_t i = 0; i < p.w_e.numel(); ++i) {
    CHECK(p.w_e[i] >= -s);
    CHECK(p.w_e[i] < s);
  }
  for (int64_t i = 0; i < p.w_d.numel(); ++i) {
    CHECK(p.w_d[i] >= -s);
    CHECK(p.w_d[i] < s);
  }
  for (int64_t i = 0; i < p.b_e.numel(); ++i) CHECK(p.b_e[i] == 0.0f);
}

TEST_CASE("init is deterministic in the seed") {
  sae::SaeConfig cfg;
  cfg.d_in = 4;
  cfg.latent = 9;
  const sae::SaeParams a = sae::init_params(cfg, 11);
  const sae::SaeParams b = sae::init_params(cfg, 11);
  const sae::SaeParams c = sae::init_params(cfg, 12);
  CHECK(bitwise_equal(a.w_e, b.w_e));
  CHECK(bitwise_equal(a.w_d, b.w_d));
  CHECK_FALSE(bitwise_equal(a.w_e, c.w_e));
}

// ---------------------------------------------------------------------------
// encode / decode / loss against hand arithmetic
// ---------------------------------------------------------------------------

TEST_CASE("encode matches relu(W_e q + b_e) by hand") {
  const sae::SaeParams p = hand_params();
  const Tensor z = sae::encode(p, Tensor({2}, {2.0f, 1.0f}));
  REQUIRE(z.rank() == 1);
  REQUIRE(z.dim(0) == 3);
  CHECK(z[0] == doctest::Approx(2.5).epsilon(1e-6));
  CHECK(z[1] == doctest::Approx(0.75).epsilon(1e-6));
  CHECK(z[2] == 0.0f);  // relu clamps -3 exactly
}

TEST_CASE("decode normalizes dictionary columns before mixing") {
  const sae::SaeParams p = hand_params();
  const Tensor norm = sae::normalize_decoder(p.w_d, 1e-8f);
  CHECK(norm.at(0, 0) == doctest::Approx(0.6).epsilon(1e-6));
  CHECK(norm.at(1, 0) == doctest::Approx(0.8).epsilon(1e-6));
  CHECK(norm.at(0, 1) == doctest::Approx(0.0).epsilon(1e-6));
  CHECK(norm.at(1, 1) == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(norm.at(0, 2) == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-6));

  const Tensor qhat = sae::decode(p, Tensor({3}, {2.5f, 0.75f, 0.0f}), 1e-8f);
  REQUIRE(qhat.rank() == 1);
  CHECK(qhat[0] == doctest::Approx(1.5).epsilon(1e-6));
  CHECK(qhat[1] == doctest::Approx(2.75).epsilon(1e-6));
}

TEST_CASE("zero dictionary column survives normalization as zeros") {
  Tensor w({2, 2}, {0.0f, 3.0f, 0.0f, 4.0f});
  const Tensor norm = sae::normalize_decoder(w, 1e-8f);
  CHECK(norm.at(0, 0) == 0.0f);
  CHECK(norm.at(1, 0) == 0.0f);
  CHECK(norm.at(0, 1) == doctest::Approx(0.6).epsilon(1e-6));
}

TEST_CASE("encode and decode accept row batches") {
  const sae::SaeParams p = hand_params();
  const Tensor q({2, 2}, {2.0f, 1.0f, -1.0f, -1.0f});
  const Tensor z = sae::encode(p, q);
  REQUIRE(z.rank() == 2);
  REQUIRE(z.dim(0) == 2);
  REQUIRE(z.dim(1) == 3);
  CHECK(z.at(0, 0) == doctest::Approx(2.5).epsilon(1e-6));
  CHECK(z.at(1, 0) == 0.0f);
  CHECK(z.at(1, 1) == 0.0f);
  CHECK(z.at(1, 2) == doctest::Approx(2.0).epsilon(1e-6));
  const Tensor qhat = sae::decode(p, z, 1e-8f);
  REQUIRE(qhat.rank() == 2);
  CHECK(qhat.at(1, 0) == doctest::Approx(std::sqrt(2.0)).epsilon(1e-6));
  CHECK(qhat.at(1, 1) == doctest::Approx(std::sqrt(2.0)).epsilon(1e-6));
}

TEST_CASE("encode and decode reject width mismatches") {
  const sae::SaeParams p = hand_params();
  CHECK_THROWS_AS(sae::encode(p, Tensor({3}, {1.0f, 2.0f, 3.0f})), std::invalid_argument);
  CHECK_THROWS_AS(sae::decode(p, Tensor({2}, {1.0f, 2.0f}), 1e-8f), std::invalid_argument);
}

TEST_CASE("loss decomposes into recon + alpha*penalty + beta*bias") {
  const sae::SaeParams p = hand_params();
  sae::SaeConfig cfg = hand_config();
  const Tensor q({2}, {2.0f, 1.0f});
  const sae::LossParts l1 = sae::sae_loss(p, q, cfg);
  CHECK(l1.recon == doctest::Approx(3.3125).epsilon(1e-5));
  CHECK(l1.sparsity == doctest::Approx(3.25).epsilon(1e-5));
  CHECK(l1.bias == doctest::Approx(std::sqrt(0.3125)).epsilon(1e-5));
  CHECK(l1.total == doctest::Approx(3.3125 + 0.5 * 3.25 + 2.0 * std::sqrt(0.3125)).epsilon(1e-5));

  cfg.penalty = "l2";
  const sae::LossParts l2 = sae::sae_loss(p, q, cfg);
  CHECK(l2.recon == doctest::Approx(l1.recon).epsilon(1e-7));
  CHECK(l2.sparsity == doctest::Approx(6.8125).epsilon(1e-5));
  CHECK(l2.total == doctest::Approx(3.3125 + 0.5 * 6.8125 + 2.0 * std::sqrt(0.3125)).epsilon(1e-5));
}

// ---------------------------------------------------------------------------
// head extraction
// ---------------------------------------------------------------------------

TEST_CASE("head_matrix stacks one head's rows across records in order") {
  const io::Dump dump = toy_dump();
  const Tensor h0 = sae::head_matrix(dump, 0);
  REQUIRE(h0.dim(0) == 3);
  REQUIRE(h0.dim(1) == 3);
  CHECK(h0.at(0, 0) == 0.0f);
  CHECK(h0.at(0, 2) == 2.0f);
  CHECK(h0.at(1, 0) == 10.0f);
  CHECK(h0.at(2, 0) == 1000.0f);
  const Tensor h1 = sae::head_matrix(dump, 1);
  CHECK(h1.at(0, 0) == 100.0f);
  CHECK(h1.at(1, 1) == 111.0f);
  CHECK(h1.at(2, 2) == 1102.0f);
}

TEST_CASE("head_matrix rejects heads outside the dump") {
  const io::Dump dump = toy_dump();
  CHECK_THROWS_AS(sae::head_matrix(dump, 2), std::out_of_range);
  CHECK_THROWS_AS(sae::head_matrix(dump, -1), std::out_of_range);
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

TEST_CASE("training lowers holdout loss on planted sparse data") {
  const Tensor vectors = synthetic_vectors(1024, 8, 12, 31);
  const sae::SaeConfig cfg = train_config();
  sae::TrainCurve curve;
  const sae::SaeParams p = sae::train_sae(vectors, cfg, &curve);
  CHECK(curve.final_holdout < curve.initial_holdout);
  CHECK(curve.epoch_holdout.size() == 20);
  CHECK(curve.final_holdout == curve.epoch_holdout.back());
  CHECK_FALSE(curve.step_loss.empty());
  for (double v : curve.step_loss) CHECK(std::isfinite(v));
  // stored dictionary is kept at unit column norms by the re-projection
  for (int64_t j = 0; j < p.w_d.dim(1); ++j) {
    double ss = 0.0;
    for (int64_t i = 0; i < p.w_d.dim(0); ++i) ss += static_cast<double>(p.w_d.at(i, j)) * p.w_d.at(i, j);
    CHECK(std::sqrt(ss) == doctest::Approx(1.0).epsilon(1e-4));
  }
}

TEST_CASE("training is bitwise deterministic in the seed") {
  const Tensor vectors = synthetic_vectors(512, 8, 12, 31);
  sae::SaeConfig cfg = train_config();
  cfg.epochs = 4;
  const sae::SaeParams a = sae::train_sae(vectors, cfg);
  const sae::SaeParams b = sae::train_sae(vectors, cfg);
  CHECK(bitwise_equal(a.w_e, b.w_e));
  CHECK(bitwise_equal(a.b_e, b.b_e));
  CHECK(bitwise_equal(a.w_d, b.w_d));
  cfg.seed = 8;
  const sae::SaeParams c = sae::train_sae(vectors, cfg);
  CHECK_FALSE(bitwise_equal(a.w_e, c.w_e));
}

TEST_CASE("training demands at least two batches of vectors") {
  const Tensor vectors = synthetic_vectors(100, 8, 12, 31);
  const sae::SaeConfig cfg = train_config();  // batch 64, so 100 < 128
  CHECK_THROWS_AS(sae::train_sae(vectors, cfg), std::invalid_argument);
}

TEST_CASE("training rejects vectors whose width disagrees with the config") {
  const Tensor vectors = synthetic_vectors(256, 6, 12, 31);
  const sae::SaeConfig cfg = train_config();
  CHECK_THROWS_AS(sae::train_sae(vectors, cfg), std::invalid_argument);
}

TEST_CASE("zero epochs returns the projected init and a flat curve") {
  const Tensor vectors = synthetic_vectors(256, 8, 12, 31);
  sae::SaeConfig cfg = train_config();
  cfg.epochs = 0;
  sae::TrainCurve curve;
  const sae::SaeParams p = sae::train_sae(vectors, cfg, &curve);
  CHECK(curve.final_holdout == curve.initial_holdout);
  CHECK(curve.epoch_holdout.empty());
  sae::SaeParams init = sae::init_params(cfg, cfg.seed);
  init.w_d = sae::normalize_decoder(init.w_d, cfg.norm_eps);
  CHECK(bitwise_equal(p.w_e, init.w_e));
  CHECK(bitwise_equal(p.w_d, init.w_d));
}

// ---------------------------------------------------------------------------
// sparsity statistics and the penalty knob
// ---------------------------------------------------------------------------

TEST_CASE("sparsity_stats counts active and dead latents by hand") {
  const sae::SaeParams p = hand_params();
  const Tensor q({2, 2}, {2.0f, 1.0f, -1.0f, -1.0f});
  const sae::SparsityStats st = sae::sparsity_stats(p, q, 1e-8f);
  CHECK(st.vectors == 2);
  // row 0 activates latents {0, 1}, row 1 activates {2}
  CHECK(st.active_fraction == doctest::Approx(0.5).epsilon(1e-9));
  CHECK(st.dead_fraction == doctest::Approx(0.0).epsilon(1e-9));
  const double err0 = 3.3125;
  const double err1 = 2.0 * (std::sqrt(2.0) + 1.0) * (std::sqrt(2.0) + 1.0);
  CHECK(st.mean_recon == doctest::Approx(0.5 * (err0 + err1)).epsilon(1e-5));
}

TEST_CASE("sparsity_stats flags latents that never fire") {
  sae::SaeParams p = hand_params();
  const Tensor q({1, 2}, {2.0f, 1.0f});
  const sae::SparsityStats st = sae::sparsity_stats(p, q, 1e-8f);
  CHECK(st.active_fraction == doctest::Approx(2.0 / 3.0).epsilon(1e-9));
  CHECK(st.dead_fraction == doctest::Approx(1.0 / 3.0).epsilon(1e-9));
}

TEST_CASE("sparsity_stats rejects empty input") {
  const sae::SaeParams p = hand_params();
  CHECK_THROWS_AS(sae::sparsity_stats(p, Tensor({0, 2}), 1e-8f), std::invalid_argument);
  CHECK_THROWS_AS(sae::sparsity_stats(p, Tensor({4}), 1e-8f), std::invalid_argument);
}

TEST_CASE("stronger l1 weight yields strictly sparser codes") {
  const Tensor vectors = synthetic_vectors(1024, 8, 12, 47);
  std::vector<double> fractions;
  for (double alpha : {3e-4, 3e-3, 3e-2}) {
    sae::SaeConfig cfg = train_config();
    cfg.alpha = alpha;
    const sae::SaeParams p = sae::train_sae(vectors, cfg);
    fractions.push_back(sae::sparsity_stats(p, vectors, cfg.norm_eps).active_fraction);
  }
  CHECK(fractions[0] > fractions[1]);
  CHECK(fractions[1] > fractions[2]);
}

TEST_CASE("squared l2 penalty leaves denser codes than l1 at equal weight") {
  const Tensor vectors = synthetic_vectors(1024, 8, 12, 47);
  sae::SaeConfig cfg = train_config();
  cfg.alpha = 3e-3;
  cfg.penalty = "l1";
  const sae::SaeParams l1 = sae::train_sae(vectors, cfg);
  cfg.penalty = "l2";
  const sae::SaeParams l2 = sae::train_sae(vectors, cfg);
  const double f1 = sae::sparsity_stats(l1, vectors, cfg.norm_eps).active_fraction;
  const double f2 = sae::sparsity_stats(l2, vectors, cfg.norm_eps).active_fraction;
  CHECK(f1 < f2);
}

// ---------------------------------------------------------------------------
// per-head banks
// ---------------------------------------------------------------------------

namespace {

io::Dump training_dump(uint64_t seed) {
  io::Dump dump;
  dump.header.layer = 2;
  dump.header.site = "query";
  dump.header.num_heads = 2;
  dump.header.width = 8;
  dump.header.examples = 24;
  Rng rng(seed);
  const Tensor h0 = synthetic_vectors(24 * 20, 8, 12, seed + 1);
  const Tensor h1 = synthetic_vectors(24 * 20, 8, 12, seed + 2);
  int64_t row = 0;
  for (int rec = 0; rec < 24; ++rec) {
    io::DumpRecord r;
    r.label = rec % 6;
    r.positions = 20;
    for (int pos = 0; pos < 20; ++pos) {
      for (int w = 0; w < 8; ++w) r.data.push_back(h0.at(row + pos, w));
      for (int w = 0; w < 8; ++w) r.data.push_back(h1.at(row + pos, w));
    }
    row += 20;
    dump.records.push_back(std::move(r));
  }
  return dump;
}

sae::SaeConfig bank_config() {
  sae::SaeConfig cfg = train_config();
  cfg.epochs = 3;
  cfg.batch = 32;
  return cfg;
}

}  // namespace

TEST_CASE("bank trains one code table per head on that head's rows") {
  const io::Dump dump = training_dump(5);
  const sae::SaeConfig cfg = bank_config();
  std::vector<sae::TrainCurve> curves;
  const sae::HeadBank bank = sae::train_bank(dump, cfg, 1, &curves);
  CHECK(bank.layer == 2);
  CHECK(bank.site == "query");
  REQUIRE(bank.heads.size() == 2);
  REQUIRE(curves.size() == 2);
  for (const auto& c : curves) CHECK(c.final_holdout < c.initial_holdout);
  // per-head seeds are derived, so the two heads land on different params
  CHECK_FALSE(bitwise_equal(bank.heads[0].w_e, bank.heads[1].w_e));
  // head 0's table equals a direct training run on head 0's matrix
  sae::SaeConfig head_cfg = cfg;
  head_cfg.seed = derive_seed(cfg.seed, "sae-head-0");
  const sae::SaeParams direct = sae::train_sae(sae::head_matrix(dump, 0), head_cfg);
  CHECK(bitwise_equal(bank.heads[0].w_e, direct.w_e));
  CHECK(bitwise_equal(bank.heads[0].w_d, direct.w_d));
}

TEST_CASE("threaded bank training matches single-threaded bitwise") {
  const io::Dump dump = training_dump(5);
  const sae::SaeConfig cfg = bank_config();
  const sae::HeadBank serial = sae::train_bank(dump, cfg, 1);
  const sae::HeadBank threaded = sae::train_bank(dump, cfg, 2);
  REQUIRE(serial.heads.size() == threaded.heads.size());
  for (size_t h = 0; h < serial.heads.size(); ++h) {
    CHECK(bitwise_equal(serial.heads[h].w_e, threaded.heads[h].w_e));
    CHECK(bitwise_equal(serial.heads[h].b_e, threaded.heads[h].b_e));
    CHECK(bitwise_equal(serial.heads[h].w_d, threaded.heads[h].w_d));
  }
}

TEST_CASE("bank training rejects empty dumps and width mismatches") {
  io::Dump empty;
  empty.header = training_dump(5).header;
  CHECK_THROWS_AS(sae::train_bank(empty, bank_config()), std::invalid_argument);
  sae::SaeConfig cfg = bank_config();
  cfg.d_in = 4;
  CHECK_THROWS_AS(sae::train_bank(training_dump(5), cfg), std::invalid_argument);
}

TEST_CASE("bank checkpoint roundtrips bitwise with config intact") {
  temp_dir tmp;
  const io::Dump dump = training_dump(9);
  sae::SaeConfig cfg = bank_config();
  cfg.epochs = 1;
  const sae::HeadBank bank = sae::train_bank(dump, cfg);
  const std::string path = tmp.file("bank.ckpt");
  sae::save_bank(path, bank);
  const sae::HeadBank back = sae::load_bank(path);
  CHECK(back.layer == bank.layer);
  CHECK(back.site == bank.site);
  CHECK(back.cfg.latent == cfg.latent);
  CHECK(back.cfg.alpha == cfg.alpha);
  CHECK(back.cfg.penalty == cfg.penalty);
  REQUIRE(back.heads.size() == bank.heads.size());
  for (size_t h = 0; h < bank.heads.size(); ++h) {
    CHECK(bitwise_equal(back.heads[h].w_e, bank.heads[h].w_e));
    CHECK(bitwise_equal(back.heads[h].b_e, bank.heads[h].b_e));
    CHECK(bitwise_equal(back.heads[h].w_d, bank.heads[h].w_d));
  }
}

TEST_CASE("loading a non-bank checkpoint is refused") {
  temp_dir tmp;
  io::Checkpoint ckpt;
  ckpt.header["kind"] = "lm";
  ckpt.put("w", Tensor({2}, {1.0f, 2.0f}));
  const std::string path = tmp.file("other.ckpt");
  io::save_checkpoint(path, ckpt);
  CHECK_THROWS_AS(sae::load_bank(path), std::runtime_error);
}
