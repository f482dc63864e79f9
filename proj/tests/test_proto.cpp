#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "protosteer/io.hpp"
#include "protosteer/proto.hpp"
#include "protosteer/rng.hpp"

using namespace ps;
using numkit::Tensor;
namespace fs = std::filesystem;
namespace lm = ps::microlm;

namespace {

struct temp_dir {
  fs::path path;
  temp_dir() {
    path = fs::temp_directory_path() / ("protosteer_proto_" + std::to_string(::getpid()) + "_" +
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

// Two 1-d prototypes at 0 and 1: every softmax and gradient value below is
// hand arithmetic on this pair.
proto::PrototypeBank line_bank() {
  proto::PrototypeBank bank;
  bank.mu = {proto::Code{0.0}, proto::Code{1.0}};
  bank.support_per_class = 1;
  bank.source_desc = "unit";
  return bank;
}

proto::PrototypeBank plane_bank() {
  proto::PrototypeBank bank;
  bank.mu = {proto::Code{0.0, 0.0}, proto::Code{10.0, 10.0}, proto::Code{-6.0, 8.0}};
  bank.support_per_class = 1;
  bank.source_desc = "unit";
  return bank;
}

lm::LmConfig tiny_config() {
  lm::LmConfig cfg;
  cfg.vocab = 11;
  cfg.dim = 8;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.head_dim = 4;
  cfg.context = 24;
  cfg.hook_layer = 1;
  cfg.bos_token = 8;
  cfg.eos_token = 9;
  cfg.sep_token = 10;
  return cfg;
}

stylegen::StyledExample make_example(std::vector<int> prompt, std::vector<int> response, int label) {
  stylegen::StyledExample ex;
  ex.prompt = std::move(prompt);
  ex.response = std::move(response);
  ex.label = label;
  return ex;
}

sae::HeadBank tiny_head_bank(const lm::LmConfig& cfg, uint64_t seed) {
  sae::HeadBank bank;
  bank.layer = cfg.hook_layer;
  bank.site = "query";
  bank.cfg.d_in = cfg.head_dim;
  bank.cfg.latent = 6;
  for (int h = 0; h < cfg.heads; ++h) {
    bank.heads.push_back(sae::init_params(bank.cfg, derive_seed(seed, "h" + std::to_string(h))));
  }
  return bank;
}

proto::Code random_code(size_t width, uint64_t seed, double lo, double hi) {
  Rng rng(seed);
  proto::Code z(width);
  for (double& v : z) v = rng.uniform(lo, hi);
  return z;
}

}  // namespace

// ---------------------------------------------------------------------------
// source kinds
// ---------------------------------------------------------------------------

TEST_CASE("source kind strings roundtrip and reject junk") {
  for (const std::string name : {"sae-query", "raw-query", "sae-residual"}) {
    CHECK(proto::source_kind_to_string(proto::source_kind_from_string(name)) == name);
  }
  CHECK_THROWS_AS(proto::source_kind_from_string("sae"), std::invalid_argument);
}

TEST_CASE("code source validation catches wiring mistakes") {
  const lm::LmConfig cfg = tiny_config();
  const lm::LmWeights w = lm::init_weights(cfg, 3);
  const sae::HeadBank bank = tiny_head_bank(cfg, 5);

  proto::CodeSource src;
  src.lm = nullptr;
  CHECK_THROWS_AS(src.validate(), std::invalid_argument);

  src.lm = &w;
  src.kind = proto::SourceKind::SaeQuery;
  src.bank = nullptr;
  CHECK_THROWS_AS(src.validate(), std::invalid_argument);

  sae::HeadBank short_bank = bank;
  short_bank.heads.pop_back();
  src.bank = &short_bank;
  CHECK_THROWS_AS(src.validate(), std::invalid_argument);

  src.bank = &bank;
  CHECK_NOTHROW(src.validate());
  CHECK(src.width() == cfg.heads * 6);

  src.kind = proto::SourceKind::RawQuery;
  src.bank = nullptr;
  CHECK_NOTHROW(src.validate());
  CHECK(src.width() == cfg.heads * cfg.head_dim);

  // residual source requires a residual-site model and a single-table bank
  src.kind = proto::SourceKind::SaeResidual;
  src.bank = &bank;
  CHECK_THROWS_AS(src.validate(), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// classification against hand softmax values
// ---------------------------------------------------------------------------

TEST_CASE("classify matches the softmax of negative distances by hand") {
  const proto::PrototypeBank bank = line_bank();
  const auto p = proto::classify(proto::Code{0.0}, bank);
  REQUIRE(p.size() == 2);
  // distances (0, 1): p0 = 1 / (1 + e^-1)
  CHECK(p[0] == doctest::Approx(0.7310585786300049).epsilon(1e-12));
  CHECK(p[1] == doctest::Approx(0.2689414213699951).epsilon(1e-12));
}

TEST_CASE("classification is stable under huge common distance offsets") {
  proto::PrototypeBank bank;
  const double base = 67108864.0;  // 2^26: both distances below are exact doubles
  bank.mu = {proto::Code{base}, proto::Code{base + 1.0}};
  const auto p = proto::classify(proto::Code{0.0}, bank);
  CHECK(p[0] == doctest::Approx(0.7310585786300049).epsilon(1e-12));
  CHECK(p[0] + p[1] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("log_prob_target agrees with the log of classify") {
  const proto::PrototypeBank bank = plane_bank();
  const proto::Code z = random_code(2, 17, -3.0, 3.0);
  const auto p = proto::classify(z, bank);
  for (int t = 0; t < 3; ++t) {
    CHECK(proto::log_prob_target(z, bank, t) ==
          doctest::Approx(std::log(p[static_cast<size_t>(t)])).epsilon(1e-12));
  }
  // hand value on the 1-d pair: z = 0.25, target 1
  CHECK(proto::log_prob_target(proto::Code{0.25}, line_bank(), 1) ==
        doctest::Approx(-0.9740769841801067).epsilon(1e-12));
}

TEST_CASE("classify rejects malformed codes and distances") {
  const proto::PrototypeBank bank = line_bank();
  CHECK_THROWS_AS(proto::classify(proto::Code{1.0, 2.0}, bank), std::invalid_argument);
  CHECK_THROWS_AS(proto::classify(proto::Code{std::nan("")}, bank), std::invalid_argument);
  CHECK_THROWS_AS(proto::classify(proto::Code{0.0}, bank, "cosine"), std::invalid_argument);
  CHECK_THROWS_AS(proto::log_prob_target(proto::Code{0.0}, bank, 2), std::out_of_range);
  CHECK_THROWS_AS(proto::log_prob_target(proto::Code{0.0}, bank, -1), std::out_of_range);
  proto::PrototypeBank one;
  one.mu = {proto::Code{0.0}};
  CHECK_THROWS_AS(proto::classify(proto::Code{0.0}, one), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// steering gradient
// ---------------------------------------------------------------------------

TEST_CASE("gradient matches hand arithmetic on the 1-d pair") {
  const proto::PrototypeBank bank = line_bank();
  const proto::Code z{0.25};
  // both distance kinds give 2 * sigma(1/2) at this point
  const proto::Code g_l2 = proto::steer_grad(z, bank, 1, "l2");
  REQUIRE(g_l2.size() == 1);
  CHECK(g_l2[0] == doctest::Approx(1.2449186624037092).epsilon(1e-12));
  const proto::Code g_sq = proto::steer_grad(z, bank, 1, "sq");
  CHECK(g_sq[0] == doctest::Approx(1.2449186624037092).epsilon(1e-12));
  // pushing toward class 0 is the mirror image
  const proto::Code g_back = proto::steer_grad(z, bank, 0, "l2");
  CHECK(g_back[0] == doctest::Approx(-2.0 * (1.0 - 0.6224593312018546)).epsilon(1e-12));
}

TEST_CASE("gradient agrees with central finite differences") {
  const proto::PrototypeBank bank = plane_bank();
  for (const std::string distance : {"l2", "sq"}) {
    for (uint64_t seed : {3u, 4u, 5u}) {
      const proto::Code z = random_code(2, seed, -4.0, 4.0);
      for (int t = 0; t < 3; ++t) {
        const proto::Code g = proto::steer_grad(z, bank, t, distance);
        for (size_t j = 0; j < z.size(); ++j) {
          proto::Code hi = z, lo = z;
          const double h = 1e-6;
          hi[j] += h;
          lo[j] -= h;
          const double fd = (proto::log_prob_target(hi, bank, t, distance) -
                             proto::log_prob_target(lo, bank, t, distance)) /
                            (2.0 * h);
          CHECK(g[j] == doctest::Approx(fd).epsilon(1e-5));
        }
      }
    }
  }
}

TEST_CASE("gradient rejects targets outside the bank") {
  const proto::PrototypeBank bank = line_bank();
  CHECK_THROWS_AS(proto::steer_grad(proto::Code{0.5}, bank, 2), std::out_of_range);
}

// ---------------------------------------------------------------------------
// gradient ascent
// ---------------------------------------------------------------------------

TEST_CASE("a single step moves the iterate by eta times the gradient") {
  const proto::PrototypeBank bank = line_bank();
  proto::SteerConfig cfg;
  cfg.eta = 0.1;
  cfg.max_iters = 1;
  cfg.eps_stop = 1e-30;
  cfg.nonneg = false;
  const auto [z, trace] = proto::steer(proto::Code{0.25}, bank, 1, cfg);
  CHECK(trace.steps == 1);
  CHECK(trace.termination == "max-iters");
  CHECK(z[0] == doctest::Approx(0.3744918662403709).epsilon(1e-12));
}

TEST_CASE("ascent raises target log-probability monotonically to convergence") {
  const proto::PrototypeBank bank = plane_bank();
  proto::SteerConfig cfg;
  cfg.eta = 0.2;
  cfg.max_iters = 500;  // the run needs ~310 steps to pass eps_stop
  cfg.nonneg = false;
  const proto::Code z0{2.0, -1.0};
  const auto [z, trace] = proto::steer(z0, bank, 1, cfg);
  CHECK(trace.termination == "converged");
  CHECK(trace.steps < cfg.max_iters);
  REQUIRE(trace.log_prob.size() == static_cast<size_t>(trace.steps) + 1);
  REQUIRE(trace.grad_sq.size() == trace.log_prob.size());
  for (size_t i = 1; i < trace.log_prob.size(); ++i) {
    CHECK(trace.log_prob[i] >= trace.log_prob[i - 1] - 1e-9);
  }
  CHECK(trace.log_prob.back() > trace.log_prob.front());
  CHECK(trace.grad_sq.back() <= cfg.eps_stop);
  // the iterate ends in the target's cell, nearly certain
  const auto p = proto::classify(z, bank);
  CHECK(p[1] > 0.99);
}

TEST_CASE("iteration cap is honored and labeled") {
  const proto::PrototypeBank bank = plane_bank();
  proto::SteerConfig cfg;
  cfg.eta = 1e-6;
  cfg.eps_stop = 1e-30;
  cfg.max_iters = 5;
  const auto [z, trace] = proto::steer(proto::Code{2.0, 2.0}, bank, 1, cfg);
  (void)z;
  CHECK(trace.steps == 5);
  CHECK(trace.termination == "max-iters");
  CHECK(trace.log_prob.size() == 6);
}

TEST_CASE("nonnegative mode clamps every visited coordinate at zero") {
  proto::PrototypeBank bank;
  bank.mu = {proto::Code{1.0, 1.0}, proto::Code{-3.0, 1.0}};
  proto::SteerConfig cfg;
  cfg.eta = 0.3;
  const auto [z_clamped, t1] = proto::steer(proto::Code{0.5, 0.5}, bank, 1, cfg);
  (void)t1;
  CHECK(z_clamped[0] >= 0.0);
  CHECK(z_clamped[1] >= 0.0);
  cfg.nonneg = false;
  const auto [z_free, t2] = proto::steer(proto::Code{0.5, 0.5}, bank, 1, cfg);
  (void)t2;
  CHECK(z_free[0] < 0.0);
}

TEST_CASE("steer validates its hyperparameters") {
  const proto::PrototypeBank bank = line_bank();
  proto::SteerConfig cfg;
  cfg.eta = 0.0;
  CHECK_THROWS_AS(proto::steer(proto::Code{0.5}, bank, 1, cfg), std::invalid_argument);
  cfg.eta = 0.8;
  cfg.eps_stop = 0.0;
  CHECK_THROWS_AS(proto::steer(proto::Code{0.5}, bank, 1, cfg), std::invalid_argument);
}

TEST_CASE("direct assignment returns the target prototype unchanged") {
  const proto::PrototypeBank bank = plane_bank();
  const proto::Code z{7.0, -7.0};
  const proto::Code out = proto::direct_assign(z, bank, 2);
  CHECK(out == bank.mu[2]);
  CHECK_THROWS_AS(proto::direct_assign(z, bank, 3), std::out_of_range);
}

// ---------------------------------------------------------------------------
// example embedding and prototype means
// ---------------------------------------------------------------------------

TEST_CASE("raw-query embedding is the mean of captured vectors over response positions") {
  const lm::LmConfig cfg = tiny_config();
  const lm::LmWeights w = lm::init_weights(cfg, 3);
  proto::CodeSource src;
  src.kind = proto::SourceKind::RawQuery;
  src.lm = &w;

  const auto ex = make_example({1, 2}, {3, 4, 5}, 0);
  const proto::Code code = proto::embed_example(src, ex);
  REQUIRE(code.size() == static_cast<size_t>(cfg.heads * cfg.head_dim));

  const auto seq = lm::sequence_tokens(cfg, ex);
  const auto [logits, cap] = lm::forward_capture(w, seq);
  (void)logits;
  const auto positions = lm::selected_positions(ex, lm::PositionSelector::ResponseOnly);
  REQUIRE(positions.size() == 3);
  for (int h = 0; h < cfg.heads; ++h) {
    for (int j = 0; j < cfg.head_dim; ++j) {
      double acc = 0.0;
      for (int pos : positions) acc += cap.at(pos, h)[j];
      acc /= static_cast<double>(positions.size());
      CHECK(code[static_cast<size_t>(h * cfg.head_dim + j)] == doctest::Approx(acc).epsilon(1e-12));
    }
  }
}

TEST_CASE("sae-query embedding pools per-head codes, not raw vectors") {
  const lm::LmConfig cfg = tiny_config();
  const lm::LmWeights w = lm::init_weights(cfg, 3);
  const sae::HeadBank bank = tiny_head_bank(cfg, 5);
  proto::CodeSource src;
  src.kind = proto::SourceKind::SaeQuery;
  src.lm = &w;
  src.bank = &bank;

  const auto ex = make_example({1, 2}, {3, 4}, 0);
  const proto::Code code = proto::embed_example(src, ex);
  REQUIRE(code.size() == static_cast<size_t>(cfg.heads) * 6);

  const auto seq = lm::sequence_tokens(cfg, ex);
  const auto [logits, cap] = lm::forward_capture(w, seq);
  (void)logits;
  const auto positions = lm::selected_positions(ex, lm::PositionSelector::ResponseOnly);
  for (int h = 0; h < cfg.heads; ++h) {
    std::vector<double> acc(6, 0.0);
    for (int pos : positions) {
      Tensor q({cfg.head_dim});
      std::memcpy(q.data(), cap.at(pos, h), sizeof(float) * static_cast<size_t>(cfg.head_dim));
      const Tensor z = sae::encode(bank.heads[static_cast<size_t>(h)], q);
      for (int j = 0; j < 6; ++j) acc[static_cast<size_t>(j)] += z[j];
    }
    for (int j = 0; j < 6; ++j) {
      CHECK(code[static_cast<size_t>(h * 6 + j)] ==
            doctest::Approx(acc[static_cast<size_t>(j)] / static_cast<double>(positions.size())).epsilon(1e-12));
    }
  }
  // codes are relu outputs pooled with nonnegative weights
  for (double v : code) CHECK(v >= 0.0);
}

TEST_CASE("embedding an example with no response positions is refused") {
  const lm::LmConfig cfg = tiny_config();
  const lm::LmWeights w = lm::init_weights(cfg, 3);
  proto::CodeSource src;
  src.kind = proto::SourceKind::RawQuery;
  src.lm = &w;
  CHECK_THROWS_AS(proto::embed_example(src, make_example({1, 2}, {}, 0)), std::invalid_argument);
}

TEST_CASE("prototypes are per-class means capped at the support budget") {
  const lm::LmConfig cfg = tiny_config();
  const lm::LmWeights w = lm::init_weights(cfg, 3);
  proto::CodeSource src;
  src.kind = proto::SourceKind::RawQuery;
  src.lm = &w;

  const std::vector<stylegen::StyledExample> support = {
      make_example({1, 2}, {3, 4, 5}, 0), make_example({0, 3}, {6, 7}, 1),
      make_example({2, 5}, {1, 0, 7}, 0), make_example({4, 1}, {5, 2}, 1),
      make_example({6, 0}, {2, 3}, 0),  // third class-0 example, beyond a budget of 2
  };

  const proto::PrototypeBank bank = proto::build_prototypes(src, support, 2);
  REQUIRE(bank.classes() == 2);
  CHECK(bank.support_per_class == 2);
  CHECK(bank.source_desc == src.describe());
  CHECK(bank.width() == src.width());

  const proto::Code a = proto::embed_example(src, support[0]);
  const proto::Code b = proto::embed_example(src, support[2]);
  for (size_t j = 0; j < a.size(); ++j) {
    CHECK(bank.mu[0][j] == doctest::Approx(0.5 * (a[j] + b[j])).epsilon(1e-12));
  }
}

TEST_CASE("prototype construction rejects degenerate support sets") {
  const lm::LmConfig cfg = tiny_config();
  const lm::LmWeights w = lm::init_weights(cfg, 3);
  proto::CodeSource src;
  src.kind = proto::SourceKind::RawQuery;
  src.lm = &w;

  CHECK_THROWS_AS(proto::build_prototypes(src, {make_example({1}, {2}, 0)}, 0), std::invalid_argument);
  CHECK_THROWS_AS(proto::build_prototypes(src, {make_example({1}, {2}, 0)}, 5), std::invalid_argument);
  // labels 0 and 2 present, class 1 empty
  CHECK_THROWS_AS(
      proto::build_prototypes(src, {make_example({1}, {2}, 0), make_example({3}, {4}, 2)}, 5),
      std::invalid_argument);
}

TEST_CASE("support examples sit at their own single-shot prototypes") {
  const lm::LmConfig cfg = tiny_config();
  const lm::LmWeights w = lm::init_weights(cfg, 3);
  proto::CodeSource src;
  src.kind = proto::SourceKind::RawQuery;
  src.lm = &w;

  const std::vector<stylegen::StyledExample> support = {make_example({1, 2}, {3, 4, 5}, 0),
                                                        make_example({0, 3}, {6, 7, 1}, 1),
                                                        make_example({2, 5}, {1, 0, 7}, 2)};
  const proto::PrototypeBank bank = proto::build_prototypes(src, support, 1);
  const proto::EvalResult r = proto::fewshot_eval(src, bank, support);
  CHECK(r.overall == doctest::Approx(1.0));
  CHECK(r.count == 3);
  for (size_t c = 0; c < 3; ++c) {
    CHECK(r.per_class[c] == doctest::Approx(1.0));
    CHECK(r.confusion[c][c] == 1);
  }
}

TEST_CASE("fewshot evaluation rejects stray labels and empty sets") {
  const lm::LmConfig cfg = tiny_config();
  const lm::LmWeights w = lm::init_weights(cfg, 3);
  proto::CodeSource src;
  src.kind = proto::SourceKind::RawQuery;
  src.lm = &w;
  const std::vector<stylegen::StyledExample> support = {make_example({1, 2}, {3, 4}, 0),
                                                        make_example({0, 3}, {6, 7}, 1)};
  const proto::PrototypeBank bank = proto::build_prototypes(src, support, 1);
  CHECK_THROWS_AS(proto::fewshot_eval(src, bank, {make_example({1}, {2}, 7)}), std::out_of_range);
  CHECK_THROWS_AS(proto::fewshot_eval(src, bank, {}), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// persistence
// ---------------------------------------------------------------------------

TEST_CASE("prototype banks roundtrip through float storage") {
  temp_dir tmp;
  proto::PrototypeBank bank;
  bank.mu = {random_code(8, 1, -2.0, 2.0), random_code(8, 2, -2.0, 2.0), random_code(8, 3, -2.0, 2.0)};
  bank.support_per_class = 30;
  bank.source_desc = "raw-query/layer1/response";
  const std::string path = tmp.file("protos.ckpt");
  proto::save_prototypes(path, bank);
  const proto::PrototypeBank back = proto::load_prototypes(path);
  CHECK(back.classes() == 3);
  CHECK(back.width() == 8);
  CHECK(back.support_per_class == 30);
  CHECK(back.source_desc == bank.source_desc);
  for (size_t c = 0; c < 3; ++c) {
    for (size_t j = 0; j < 8; ++j) {
      // stored as float32, so compare against the rounded value exactly
      CHECK(back.mu[c][j] == static_cast<double>(static_cast<float>(bank.mu[c][j])));
    }
  }
}

TEST_CASE("loading a non-prototype checkpoint is refused") {
  temp_dir tmp;
  io::Checkpoint ckpt;
  ckpt.header["kind"] = "sae-bank";
  ckpt.put("w", Tensor({2}, {1.0f, 2.0f}));
  const std::string path = tmp.file("other.ckpt");
  io::save_checkpoint(path, ckpt);
  CHECK_THROWS_AS(proto::load_prototypes(path), std::runtime_error);
}
