#include "protosteer/microlm.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

#include "protosteer/autodiff.hpp"
#include "protosteer/optim.hpp"
#include "protosteer/rng.hpp"

namespace ps::microlm {

namespace nk = numkit::kernels;

void LmConfig::validate() const {
  if (dim != heads * head_dim) {
    throw std::invalid_argument("lm config: dim " + std::to_string(dim) + " != heads*head_dim " +
                                std::to_string(heads * head_dim));
  }
  if (hook_layer < 0 || hook_layer >= layers) {
    throw std::invalid_argument("lm config: hook layer " + std::to_string(hook_layer) + " outside 0.." +
                                std::to_string(layers - 1));
  }
  if (hook_site != "query" && hook_site != "residual") {
    throw std::invalid_argument("lm config: unknown hook site '" + hook_site + "'");
  }
  if (bos_token >= vocab || eos_token >= vocab || sep_token >= vocab) {
    throw std::invalid_argument("lm config: special tokens exceed vocabulary");
  }
  if (context < 4) throw std::invalid_argument("lm config: context too small");
}

InterventionPlan InterventionPlan::from_capture(const QueryCapture& cap) {
  InterventionPlan plan;
  plan.positions = cap.positions;
  plan.num_heads = cap.num_heads;
  plan.width = cap.width;
  plan.data = cap.data;
  plan.mask.assign(static_cast<size_t>(cap.positions), 0);
  return plan;
}

namespace {

void check_tokens(const LmConfig& cfg, const std::vector<int>& tokens) {
  if (tokens.empty()) throw std::invalid_argument("forward: empty token sequence");
  if (static_cast<int>(tokens.size()) > cfg.context) {
    throw std::invalid_argument("forward: sequence length " + std::to_string(tokens.size()) +
                                " exceeds context " + std::to_string(cfg.context));
  }
  for (int t : tokens) {
    if (t < 0 || t >= cfg.vocab) {
      throw std::out_of_range("forward: token " + std::to_string(t) + " outside vocabulary of " +
                              std::to_string(cfg.vocab));
    }
  }
}

Tensor causal_mask(int64_t s) {
  Tensor m({s, s});
  for (int64_t i = 0; i < s; ++i) {
    for (int64_t j = i + 1; j < s; ++j) m.at(i, j) = -1e9f;
  }
  return m;
}

struct Hooks {
  QueryCapture* capture = nullptr;
  const InterventionPlan* plan = nullptr;
  const SteerCallback* live = nullptr;
  int live_pos = -1;
};

// Capture copies what the model computed; the plan then overwrites masked
// positions; the live edit rewrites one position's vector last. Order matters:
// a captured value is always the pre-substitution one.
void apply_hooks_rows(std::vector<Tensor*> per_head_rows, const Hooks& hooks, int num_heads, int width,
                      int64_t s) {
  if (hooks.capture) {
    hooks.capture->positions = static_cast<int>(s);
    hooks.capture->num_heads = num_heads;
    hooks.capture->width = width;
    hooks.capture->data.resize(static_cast<size_t>(s) * num_heads * width);
    for (int64_t p = 0; p < s; ++p) {
      for (int h = 0; h < num_heads; ++h) {
        const float* src = per_head_rows[static_cast<size_t>(h)]->data() + p * width;
        float* dst = hooks.capture->data.data() + (static_cast<size_t>(p) * num_heads + h) * width;
        std::copy(src, src + width, dst);
      }
    }
  }
  if (hooks.plan) {
    const auto& plan = *hooks.plan;
    if (plan.positions != static_cast<int>(s) || plan.num_heads != num_heads || plan.width != width) {
      throw std::invalid_argument("intervention plan shape (" + std::to_string(plan.positions) + "," +
                                  std::to_string(plan.num_heads) + "," + std::to_string(plan.width) +
                                  ") does not match capture shape (" + std::to_string(s) + "," +
                                  std::to_string(num_heads) + "," + std::to_string(width) + ")");
    }
    for (int64_t p = 0; p < s; ++p) {
      if (!plan.mask[static_cast<size_t>(p)]) continue;
      for (int h = 0; h < num_heads; ++h) {
        const float* src = plan.data.data() + (static_cast<size_t>(p) * num_heads + h) * width;
        float* dst = per_head_rows[static_cast<size_t>(h)]->data() + p * width;
        std::copy(src, src + width, dst);
      }
    }
  }
  if (hooks.live && *hooks.live && hooks.live_pos >= 0 && hooks.live_pos < s) {
    const int64_t p = hooks.live_pos;
    std::vector<float> vec(static_cast<size_t>(num_heads) * width);
    for (int h = 0; h < num_heads; ++h) {
      const float* src = per_head_rows[static_cast<size_t>(h)]->data() + p * width;
      std::copy(src, src + width, vec.data() + static_cast<size_t>(h) * width);
    }
    (*hooks.live)(static_cast<int>(p), vec);
    for (int h = 0; h < num_heads; ++h) {
      const float* src = vec.data() + static_cast<size_t>(h) * width;
      float* dst = per_head_rows[static_cast<size_t>(h)]->data() + p * width;
      std::copy(src, src + width, dst);
    }
  }
}

Tensor forward_impl(const LmWeights& w, const std::vector<int>& tokens, const Hooks& hooks) {
  const LmConfig& cfg = w.cfg;
  check_tokens(cfg, tokens);
  const int64_t s = static_cast<int64_t>(tokens.size());
  const float att_scale = 1.0f / std::sqrt(static_cast<float>(cfg.head_dim));
  const Tensor mask = causal_mask(s);

  Tensor x = nk::gather_rows(w.embed, tokens);
  for (int l = 0; l < cfg.layers; ++l) {
    const LayerWeights& lw = w.layers[static_cast<size_t>(l)];
    if (l == cfg.hook_layer && cfg.hook_site == "residual") {
      apply_hooks_rows({&x}, hooks, 1, cfg.dim, s);
    }
    Tensor h = nk::layer_norm(x, lw.ln1_g, lw.ln1_b, cfg.ln_eps);
    std::vector<Tensor> qs(static_cast<size_t>(cfg.heads));
    for (int a = 0; a < cfg.heads; ++a) qs[static_cast<size_t>(a)] = nk::matmul(h, lw.wq[static_cast<size_t>(a)]);
    if (l == cfg.hook_layer && cfg.hook_site == "query") {
      std::vector<Tensor*> rows(static_cast<size_t>(cfg.heads));
      for (int a = 0; a < cfg.heads; ++a) rows[static_cast<size_t>(a)] = &qs[static_cast<size_t>(a)];
      apply_hooks_rows(rows, hooks, cfg.heads, cfg.head_dim, s);
    }
    std::vector<Tensor> outs(static_cast<size_t>(cfg.heads));
    for (int a = 0; a < cfg.heads; ++a) {
      const Tensor k = nk::matmul(h, lw.wk[static_cast<size_t>(a)]);
      const Tensor v = nk::matmul(h, lw.wv[static_cast<size_t>(a)]);
      const Tensor qr = nk::rope(qs[static_cast<size_t>(a)], 0, cfg.rope_base);
      const Tensor kr = nk::rope(k, 0, cfg.rope_base);
      Tensor scores = nk::add(nk::scale(nk::matmul_nt(qr, kr), att_scale), mask);
      outs[static_cast<size_t>(a)] = nk::matmul(nk::softmax_rows(scores), v);
    }
    std::vector<const Tensor*> parts(static_cast<size_t>(cfg.heads));
    for (int a = 0; a < cfg.heads; ++a) parts[static_cast<size_t>(a)] = &outs[static_cast<size_t>(a)];
    x = nk::add(x, nk::add_rowvec(nk::matmul(nk::concat_cols(parts), lw.wo), lw.bo));
    Tensor h2 = nk::layer_norm(x, lw.ln2_g, lw.ln2_b, cfg.ln_eps);
    Tensor mid = nk::relu(nk::add_rowvec(nk::matmul(h2, lw.w1), lw.b1));
    x = nk::add(x, nk::add_rowvec(nk::matmul(mid, lw.w2), lw.b2));
  }
  Tensor xf = nk::layer_norm(x, w.lnf_g, w.lnf_b, cfg.ln_eps);
  return nk::add_rowvec(nk::matmul(xf, w.w_out), w.b_out);
}

}  // namespace

LmWeights init_weights(const LmConfig& cfg, uint64_t seed) {
  cfg.validate();
  Rng rng(derive_seed(seed, "lm-init"));
  const float sd = 0.02f;
  auto mat = [&](int64_t r, int64_t c) {
    Tensor t({r, c});
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<float>(rng.normal()) * sd;
    return t;
  };
  LmWeights w;
  w.cfg = cfg;
  w.embed = mat(cfg.vocab, cfg.dim);
  const int64_t mlp = 4 * cfg.dim;
  for (int l = 0; l < cfg.layers; ++l) {
    LayerWeights lw;
    for (int a = 0; a < cfg.heads; ++a) lw.wq.push_back(mat(cfg.dim, cfg.head_dim));
    for (int a = 0; a < cfg.heads; ++a) lw.wk.push_back(mat(cfg.dim, cfg.head_dim));
    for (int a = 0; a < cfg.heads; ++a) lw.wv.push_back(mat(cfg.dim, cfg.head_dim));
    lw.wo = mat(cfg.dim, cfg.dim);
    lw.bo = Tensor({cfg.dim});
    lw.ln1_g = Tensor::full({cfg.dim}, 1.0f);
    lw.ln1_b = Tensor({cfg.dim});
    lw.ln2_g = Tensor::full({cfg.dim}, 1.0f);
    lw.ln2_b = Tensor({cfg.dim});
    lw.w1 = mat(cfg.dim, mlp);
    lw.b1 = Tensor({mlp});
    lw.w2 = mat(mlp, cfg.dim);
    lw.b2 = Tensor({cfg.dim});
    w.layers.push_back(std::move(lw));
  }
  w.lnf_g = Tensor::full({cfg.dim}, 1.0f);
  w.lnf_b = Tensor({cfg.dim});
  w.w_out = mat(cfg.dim, cfg.vocab);
  w.b_out = Tensor({cfg.vocab});
  return w;
}

Tensor forward(const LmWeights& w, const std::vector<int>& tokens) {
  return forward_impl(w, tokens, Hooks{});
}

std::pair<Tensor, QueryCapture> forward_capture(const LmWeights& w, const std::vector<int>& tokens) {
  QueryCapture cap;
  cap.layer = w.cfg.hook_layer;
  cap.site = w.cfg.hook_site;
  Hooks hooks;
  hooks.capture = &cap;
  Tensor logits = forward_impl(w, tokens, hooks);
  return {std::move(logits), std::move(cap)};
}

Tensor forward_intervene(const LmWeights& w, const std::vector<int>& tokens, const InterventionPlan& plan) {
  Hooks hooks;
  hooks.plan = &plan;
  return forward_impl(w, tokens, hooks);
}

GenResult generate(const LmWeights& w, const std::vector<int>& prompt, int max_new,
                   const SteerCallback& steer) {
  const LmConfig& cfg = w.cfg;
  check_tokens(cfg, prompt);
  GenResult res;
  std::vector<int> tokens = prompt;
  // Earlier steps' live edits must persist, so they are replayed through a
  // growing plan on every re-forward.
  std::map<int, std::vector<float>> edits;
  const int num_heads = cfg.hook_heads();
  const int width = cfg.hook_width();
  for (int step = 0; step < max_new; ++step) {
    if (static_cast<int>(tokens.size()) >= cfg.context) {
      res.truncated = true;
      break;
    }
    const int64_t s = static_cast<int64_t>(tokens.size());
    Hooks hooks;
    InterventionPlan plan;
    SteerCallback record;
    if (steer) {
      plan.positions = static_cast<int>(s);
      plan.num_heads = num_heads;
      plan.width = width;
      plan.data.assign(static_cast<size_t>(s) * num_heads * width, 0.0f);
      plan.mask.assign(static_cast<size_t>(s), 0);
      for (const auto& [pos, vec] : edits) {
        plan.mask[static_cast<size_t>(pos)] = 1;
        std::copy(vec.begin(), vec.end(), plan.at(pos, 0));
      }
      hooks.plan = &plan;
      record = [&steer, &edits](int pos, std::vector<float>& vec) {
        steer(pos, vec);
        edits[pos] = vec;
      };
      hooks.live = &record;
      hooks.live_pos = static_cast<int>(s) - 1;
    }
    const Tensor logits = forward_impl(w, tokens, hooks);
    const int64_t last = (s - 1) * cfg.vocab;
    int best = 0;
    for (int t = 1; t < cfg.vocab; ++t) {
      if (logits[last + t] > logits[last + best]) best = t;
    }
    tokens.push_back(best);
    res.tokens.push_back(best);
    if (best == cfg.eos_token) break;
  }
  return res;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

std::vector<int> sequence_tokens(const LmConfig& cfg, const stylegen::StyledExample& ex) {
  std::vector<int> seq;
  seq.reserve(ex.prompt.size() + ex.response.size() + 3);
  seq.push_back(cfg.bos_token);
  seq.insert(seq.end(), ex.prompt.begin(), ex.prompt.end());
  seq.push_back(cfg.sep_token);
  seq.insert(seq.end(), ex.response.begin(), ex.response.end());
  seq.push_back(cfg.eos_token);
  return seq;
}

double mean_sequence_loss(const LmWeights& w, const std::vector<stylegen::StyledExample>& examples,
                          int limit) {
  const int n = std::min<int>(limit, static_cast<int>(examples.size()));
  if (n == 0) throw std::invalid_argument("mean_sequence_loss: no examples");
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    const auto seq = sequence_tokens(w.cfg, examples[static_cast<size_t>(i)]);
    const Tensor logits = forward(w, seq);
    std::vector<int> targets(seq.begin() + 1, seq.end());
    targets.push_back(-1);
    total += nk::cross_entropy_logits(logits, targets);
  }
  return total / static_cast<double>(n);
}

namespace {

struct LayerVars {
  std::vector<ad::Var> wq, wk, wv;
  ad::Var wo, bo, ln1_g, ln1_b, ln2_g, ln2_b, w1, b1, w2, b2;
};

struct ParamVars {
  ad::Var embed;
  std::vector<LayerVars> layers;
  ad::Var lnf_g, lnf_b, w_out, b_out;
  std::vector<std::pair<std::string, ad::Var>> all;  // optimizer traversal order
};

ParamVars make_param_vars(const LmWeights& w) {
  ParamVars p;
  auto track = [&p](const std::string& name, const Tensor& t) {
    ad::Var v = ad::leaf(t, true);
    p.all.emplace_back(name, v);
    return v;
  };
  p.embed = track("embed", w.embed);
  for (size_t l = 0; l < w.layers.size(); ++l) {
    const LayerWeights& lw = w.layers[l];
    LayerVars lv;
    const std::string pre = "l" + std::to_string(l) + ".";
    for (size_t a = 0; a < lw.wq.size(); ++a) lv.wq.push_back(track(pre + "wq" + std::to_string(a), lw.wq[a]));
    for (size_t a = 0; a < lw.wk.size(); ++a) lv.wk.push_back(track(pre + "wk" + std::to_string(a), lw.wk[a]));
    for (size_t a = 0; a < lw.wv.size(); ++a) lv.wv.push_back(track(pre + "wv" + std::to_string(a), lw.wv[a]));
    lv.wo = track(pre + "wo", lw.wo);
    lv.bo = track(pre + "bo", lw.bo);
    lv.ln1_g = track(pre + "ln1g", lw.ln1_g);
    lv.ln1_b = track(pre + "ln1b", lw.ln1_b);
    lv.ln2_g = track(pre + "ln2g", lw.ln2_g);
    lv.ln2_b = track(pre + "ln2b", lw.ln2_b);
    lv.w1 = track(pre + "w1", lw.w1);
    lv.b1 = track(pre + "b1", lw.b1);
    lv.w2 = track(pre + "w2", lw.w2);
    lv.b2 = track(pre + "b2", lw.b2);
    p.layers.push_back(std::move(lv));
  }
  p.lnf_g = track("lnf.g", w.lnf_g);
  p.lnf_b = track("lnf.b", w.lnf_b);
  p.w_out = track("out.w", w.w_out);
  p.b_out = track("out.b", w.b_out);
  return p;
}

void write_back(const ParamVars& p, LmWeights& w) {
  size_t i = 0;
  auto take = [&]() { return p.all[i++].second->val; };
  w.embed = take();
  for (auto& lw : w.layers) {
    for (auto& t : lw.wq) t = take();
    for (auto& t : lw.wk) t = take();
    for (auto& t : lw.wv) t = take();
    lw.wo = take();
    lw.bo = take();
    lw.ln1_g = take();
    lw.ln1_b = take();
    lw.ln2_g = take();
    lw.ln2_b = take();
    lw.w1 = take();
    lw.b1 = take();
    lw.w2 = take();
    lw.b2 = take();
  }
  w.lnf_g = take();
  w.lnf_b = take();
  w.w_out = take();
  w.b_out = take();
}

ad::Var sequence_loss_graph(const ParamVars& p, const LmConfig& cfg, const std::vector<int>& tokens) {
  const int64_t s = static_cast<int64_t>(tokens.size());
  const float att_scale = 1.0f / std::sqrt(static_cast<float>(cfg.head_dim));
  const ad::Var mask = ad::constant(causal_mask(s));
  ad::Var x = ad::gather_rows(p.embed, tokens);
  for (int l = 0; l < cfg.layers; ++l) {
    const LayerVars& lv = p.layers[static_cast<size_t>(l)];
    ad::Var h = ad::layer_norm(x, lv.ln1_g, lv.ln1_b, cfg.ln_eps);
    std::vector<ad::Var> outs;
    for (int a = 0; a < cfg.heads; ++a) {
      ad::Var q = ad::matmul(h, lv.wq[static_cast<size_t>(a)]);
      ad::Var k = ad::matmul(h, lv.wk[static_cast<size_t>(a)]);
      ad::Var v = ad::matmul(h, lv.wv[static_cast<size_t>(a)]);
      ad::Var qr = ad::rope(q, 0, cfg.rope_base);
      ad::Var kr = ad::rope(k, 0, cfg.rope_base);
      ad::Var scores = ad::add(ad::scale(ad::matmul_nt(qr, kr), att_scale), mask);
      outs.push_back(ad::matmul(ad::softmax_rows(scores), v));
    }
    x = ad::add(x, ad::add_rowvec(ad::matmul(ad::concat_cols(outs), lv.wo), lv.bo));
    ad::Var h2 = ad::layer_norm(x, lv.ln2_g, lv.ln2_b, cfg.ln_eps);
    ad::Var mid = ad::relu(ad::add_rowvec(ad::matmul(h2, lv.w1), lv.b1));
    x = ad::add(x, ad::add_rowvec(ad::matmul(mid, lv.w2), lv.b2));
  }
  ad::Var xf = ad::layer_norm(x, p.lnf_g, p.lnf_b, cfg.ln_eps);
  ad::Var logits = ad::add_rowvec(ad::matmul(xf, p.w_out), p.b_out);
  std::vector<int> targets(tokens.begin() + 1, tokens.end());
  targets.push_back(-1);
  return ad::cross_entropy_logits(logits, targets);
}

}  // namespace

LmWeights train_lm(const LmConfig& cfg, const std::vector<stylegen::StyledExample>& train,
                   const std::vector<stylegen::StyledExample>& valid, const TrainConfig& tc,
                   TrainLog* log) {
  cfg.validate();
  if (train.empty()) throw std::invalid_argument("train_lm: empty training corpus");
  LmWeights w = init_weights(cfg, tc.seed);

  TrainLog local;
  TrainLog& tl = log ? *log : local;
  const auto& val_src = valid.empty() ? train : valid;
  tl.initial_val_loss = mean_sequence_loss(w, val_src, tc.val_batch);
  if (tc.epochs == 0) {
    tl.final_val_loss = tl.initial_val_loss;
    return w;
  }

  std::vector<std::vector<int>> seqs;
  seqs.reserve(train.size());
  for (const auto& ex : train) seqs.push_back(sequence_tokens(cfg, ex));

  const int64_t n = static_cast<int64_t>(seqs.size());
  const int64_t steps_per_epoch = (n + tc.batch - 1) / tc.batch;
  optim::LrSchedule sched{tc.lr, tc.warmup_fraction, tc.epochs * steps_per_epoch};

  std::map<std::string, optim::AdamState> adam;
  int64_t step = 0;
  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    std::vector<int64_t> order(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
    Rng erng(derive_seed(tc.seed, "lm-epoch-" + std::to_string(epoch)));
    erng.shuffle(order);
    for (int64_t start = 0; start < n; start += tc.batch) {
      const int64_t chunk = std::min<int64_t>(tc.batch, n - start);
      ParamVars p = make_param_vars(w);
      ad::Var total;
      for (int64_t i = 0; i < chunk; ++i) {
        ad::Var loss = sequence_loss_graph(p, cfg, seqs[static_cast<size_t>(order[static_cast<size_t>(start + i)])]);
        total = total ? ad::add(total, loss) : loss;
      }
      ad::Var mean = ad::scale(total, 1.0f / static_cast<float>(chunk));
      if (!std::isfinite(mean->val[0])) {
        throw std::runtime_error("lm training diverged at step " + std::to_string(step));
      }
      tl.step_loss.push_back(mean->val[0]);
      ad::backward(mean);
      const double lr = optim::lr_at(sched, step);
      for (auto& [name, var] : p.all) {
        if (!var->grad_ready) {
          throw std::logic_error("lm training: parameter '" + name + "' received no gradient");
        }
        auto it = adam.find(name);
        if (it == adam.end()) it = adam.emplace(name, optim::AdamState(var->val.shape(), name)).first;
        adam_step(it->second, var->val, var->grad, lr);
      }
      write_back(p, w);
      ++step;
    }
    tl.epoch_val_loss.push_back(mean_sequence_loss(w, val_src, tc.val_batch));
  }
  tl.final_val_loss = tl.epoch_val_loss.back();
  return w;
}

// ---------------------------------------------------------------------------
// Checkpoint
// ---------------------------------------------------------------------------

namespace {

io::json config_to_json(const LmConfig& c) {
  return io::json{{"vocab", c.vocab},           {"dim", c.dim},
                  {"layers", c.layers},         {"heads", c.heads},
                  {"head_dim", c.head_dim},     {"context", c.context},
                  {"hook_layer", c.hook_layer}, {"hook_site", c.hook_site},
                  {"bos_token", c.bos_token},   {"eos_token", c.eos_token},
                  {"sep_token", c.sep_token},   {"rope_base", c.rope_base},
                  {"ln_eps", c.ln_eps}};
}

LmConfig config_from_json(const io::json& j) {
  LmConfig c;
  c.vocab = j.at("vocab").get<int>();
  c.dim = j.at("dim").get<int>();
  c.layers = j.at("layers").get<int>();
  c.heads = j.at("heads").get<int>();
  c.head_dim = j.at("head_dim").get<int>();
  c.context = j.at("context").get<int>();
  c.hook_layer = j.at("hook_layer").get<int>();
  c.hook_site = j.at("hook_site").get<std::string>();
  c.bos_token = j.at("bos_token").get<int>();
  c.eos_token = j.at("eos_token").get<int>();
  c.sep_token = j.at("sep_token").get<int>();
  c.rope_base = j.at("rope_base").get<float>();
  c.ln_eps = j.at("ln_eps").get<float>();
  return c;
}

}  // namespace

void save_weights(const std::string& path, const LmWeights& w) {
  io::Checkpoint ckpt;
  ckpt.header = io::json{{"kind", "lm"}, {"config", config_to_json(w.cfg)}};
  ckpt.put("embed", w.embed);
  for (size_t l = 0; l < w.layers.size(); ++l) {
    const LayerWeights& lw = w.layers[l];
    const std::string pre = "l" + std::to_string(l) + ".";
    for (size_t a = 0; a < lw.wq.size(); ++a) ckpt.put(pre + "wq" + std::to_string(a), lw.wq[a]);
    for (size_t a = 0; a < lw.wk.size(); ++a) ckpt.put(pre + "wk" + std::to_string(a), lw.wk[a]);
    for (size_t a = 0; a < lw.wv.size(); ++a) ckpt.put(pre + "wv" + std::to_string(a), lw.wv[a]);
    ckpt.put(pre + "wo", lw.wo);
    ckpt.put(pre + "bo", lw.bo);
    ckpt.put(pre + "ln1g", lw.ln1_g);
    ckpt.put(pre + "ln1b", lw.ln1_b);
    ckpt.put(pre + "ln2g", lw.ln2_g);
    ckpt.put(pre + "ln2b", lw.ln2_b);
    ckpt.put(pre + "w1", lw.w1);
    ckpt.put(pre + "b1", lw.b1);
    ckpt.put(pre + "w2", lw.w2);
    ckpt.put(pre + "b2", lw.b2);
  }
  ckpt.put("lnf.g", w.lnf_g);
  ckpt.put("lnf.b", w.lnf_b);
  ckpt.put("out.w", w.w_out);
  ckpt.put("out.b", w.b_out);
  io::save_checkpoint(path, ckpt);
}

LmWeights load_weights(const std::string& path) {
  const io::Checkpoint ckpt = io::load_checkpoint(path);
  if (ckpt.header.value("kind", "") != "lm") {
    throw std::runtime_error("not an lm checkpoint: " + path);
  }
  LmWeights w;
  w.cfg = config_from_json(ckpt.header.at("config"));
  w.cfg.validate();
  w.embed = ckpt.get("embed");
  for (int l = 0; l < w.cfg.layers; ++l) {
    LayerWeights lw;
    const std::string pre = "l" + std::to_string(l) + ".";
    for (int a = 0; a < w.cfg.heads; ++a) lw.wq.push_back(ckpt.get(pre + "wq" + std::to_string(a)));
    for (int a = 0; a < w.cfg.heads; ++a) lw.wk.push_back(ckpt.get(pre + "wk" + std::to_string(a)));
    for (int a = 0; a < w.cfg.heads; ++a) lw.wv.push_back(ckpt.get(pre + "wv" + std::to_string(a)));
    lw.wo = ckpt.get(pre + "wo");
    lw.bo = ckpt.get(pre + "bo");
    lw.ln1_g = ckpt.get(pre + "ln1g");
    lw.ln1_b = ckpt.get(pre + "ln1b");
    lw.ln2_g = ckpt.get(pre + "ln2g");
    lw.ln2_b = ckpt.get(pre + "ln2b");
    lw.w1 = ckpt.get(pre + "w1");
    lw.b1 = ckpt.get(pre + "b1");
    lw.w2 = ckpt.get(pre + "w2");
    lw.b2 = ckpt.get(pre + "b2");
    w.layers.push_back(std::move(lw));
  }
  w.lnf_g = ckpt.get("lnf.g");
  w.lnf_b = ckpt.get("lnf.b");
  w.w_out = ckpt.get("out.w");
  w.b_out = ckpt.get("out.b");
  return w;
}

// ---------------------------------------------------------------------------
// Activation dumps
// ---------------------------------------------------------------------------

PositionSelector selector_from_string(const std::string& s) {
  if (s == "all") return PositionSelector::All;
  if (s == "response") return PositionSelector::ResponseOnly;
  throw std::invalid_argument("unknown position selector '" + s + "' (expected all | response)");
}

std::string selector_to_string(PositionSelector s) {
  return s == PositionSelector::All ? "all" : "response";
}

std::vector<int> selected_positions(const stylegen::StyledExample& ex, PositionSelector sel) {
  // sequence layout: [BOS] x [SEP] y [EOS]
  const int p = static_cast<int>(ex.prompt.size());
  const int r = static_cast<int>(ex.response.size());
  std::vector<int> out;
  if (sel == PositionSelector::All) {
    for (int i = 0; i < p; ++i) out.push_back(1 + i);
  }
  for (int i = 0; i < r; ++i) out.push_back(p + 2 + i);
  return out;
}

std::vector<io::DumpRecord> dump_activations(const LmWeights& w,
                                             const std::vector<stylegen::StyledExample>& examples,
                                             PositionSelector sel) {
  const int num_heads = w.cfg.hook_heads();
  const int width = w.cfg.hook_width();
  std::vector<io::DumpRecord> records;
  records.reserve(examples.size());
  for (const auto& ex : examples) {
    const auto seq = sequence_tokens(w.cfg, ex);
    const auto [logits, cap] = forward_capture(w, seq);
    (void)logits;
    const auto positions = selected_positions(ex, sel);
    io::DumpRecord rec;
    rec.label = ex.label;
    rec.positions = static_cast<int>(positions.size());
    rec.data.reserve(positions.size() * static_cast<size_t>(num_heads) * width);
    for (int pos : positions) {
      for (int h = 0; h < num_heads; ++h) {
        const float* src = cap.at(pos, h);
        rec.data.insert(rec.data.end(), src, src + width);
      }
    }
    records.push_back(std::move(rec));
  }
  return records;
}

io::DumpHeader dump_header(const LmConfig& cfg, int64_t examples) {
  io::DumpHeader h;
  h.layer = cfg.hook_layer;
  h.site = cfg.hook_site;
  h.num_heads = cfg.hook_heads();
  h.width = cfg.hook_width();
  h.examples = examples;
  return h;
}

}  // namespace ps::microlm
