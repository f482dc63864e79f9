#include "protosteer/autodiff.hpp"

#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace ps::ad {

namespace nk = numkit::kernels;
using numkit::Tensor;

void Node::accum(const numkit::Tensor& g) {
  if (!g.same_shape(val)) {
    throw std::logic_error("grad shape " + g.shape_str() + " does not match value shape " + val.shape_str());
  }
  if (!grad_ready) {
    grad = Tensor(val.shape());
    grad_ready = true;
  }
  float* pg = grad.data();
  const float* ps = g.data();
  for (int64_t i = 0; i < grad.numel(); ++i) pg[i] += ps[i];
}

Var leaf(Tensor val, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->val = std::move(val);
  n->requires_grad = requires_grad;
  return n;
}

Var constant(Tensor val) { return leaf(std::move(val), false); }

namespace {

Var make_op(Tensor val, std::vector<Var> parents) {
  auto n = std::make_shared<Node>();
  n->val = std::move(val);
  for (const Var& p : parents) {
    if (p->requires_grad) n->requires_grad = true;
  }
  n->parents = std::move(parents);
  return n;
}

}  // namespace

void backward(const Var& root) {
  if (root->val.numel() != 1) {
    throw std::invalid_argument("backward: root must be a scalar, got shape " + root->val.shape_str());
  }
  if (!root->requires_grad) {
    throw std::invalid_argument("backward: root does not depend on any trainable leaf");
  }
  // Post-order DFS; each node appears once, after all of its consumers were
  // already emitted in the reversed order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(root.get(), 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    bool descended = false;
    while (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) {
        stack.emplace_back(p, 0);
        descended = true;
        break;
      }
    }
    if (descended) continue;
    order.push_back(node);
    stack.pop_back();
  }
  root->accum(Tensor::scalar(1.0f));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backprop && n->grad_ready) n->backprop();
  }
}

Var matmul(const Var& a, const Var& b) {
  Var out = make_op(nk::matmul(a->val, b->val), {a, b});
  Node* o = out.get();
  Node* pa = a.get();
  Node* pb = b.get();
  out->backprop = [o, pa, pb]() {
    if (pa->requires_grad) pa->accum(nk::matmul_nt(o->grad, pb->val));
    if (pb->requires_grad) pb->accum(nk::matmul_tn(pa->val, o->grad));
  };
  return out;
}

Var matmul_nt(const Var& a, const Var& b) {
  Var out = make_op(nk::matmul_nt(a->val, b->val), {a, b});
  Node* o = out.get();
  Node* pa = a.get();
  Node* pb = b.get();
  out->backprop = [o, pa, pb]() {
    if (pa->requires_grad) pa->accum(nk::matmul(o->grad, pb->val));
    if (pb->requires_grad) pb->accum(nk::matmul_tn(o->grad, pa->val));
  };
  return out;
}

Var add(const Var& a, const Var& b) {
  Var out = make_op(nk::add(a->val, b->val), {a, b});
  Node* o = out.get();
  Node* pa = a.get();
  Node* pb = b.get();
  out->backprop = [o, pa, pb]() {
    if (pa->requires_grad) pa->accum(o->grad);
    if (pb->requires_grad) pb->accum(o->grad);
  };
  return out;
}

Var sub(const Var& a, const Var& b) {
  Var out = make_op(nk::sub(a->val, b->val), {a, b});
  Node* o = out.get();
  Node* pa = a.get();
  Node* pb = b.get();
  out->backprop = [o, pa, pb]() {
    if (pa->requires_grad) pa->accum(o->grad);
    if (pb->requires_grad) pb->accum(nk::scale(o->grad, -1.0f));
  };
  return out;
}

Var mul(const Var& a, const Var& b) {
  Var out = make_op(nk::mul(a->val, b->val), {a, b});
  Node* o = out.get();
  Node* pa = a.get();
  Node* pb = b.get();
  out->backprop = [o, pa, pb]() {
    if (pa->requires_grad) pa->accum(nk::mul(o->grad, pb->val));
    if (pb->requires_grad) pb->accum(nk::mul(o->grad, pa->val));
  };
  return out;
}

Var add_rowvec(const Var& a, const Var& v) {
  Var out = make_op(nk::add_rowvec(a->val, v->val), {a, v});
  Node* o = out.get();
  Node* pa = a.get();
  Node* pv = v.get();
  out->backprop = [o, pa, pv]() {
    if (pa->requires_grad) pa->accum(o->grad);
    if (pv->requires_grad) {
      const int64_t m = o->grad.dim(0), n = o->grad.dim(1);
      Tensor g({n});
      for (int64_t i = 0; i < m; ++i) {
        const float* row = o->grad.data() + i * n;
        for (int64_t j = 0; j < n; ++j) g[j] += row[j];
      }
      pv->accum(g);
    }
  };
  return out;
}

Var scale(const Var& a, float s) {
  Var out = make_op(nk::scale(a->val, s), {a});
  Node* o = out.get();
  Node* pa = a.get();
  out->backprop = [o, pa, s]() {
    if (pa->requires_grad) pa->accum(nk::scale(o->grad, s));
  };
  return out;
}

Var relu(const Var& a) {
  Var out = make_op(nk::relu(a->val), {a});
  Node* o = out.get();
  Node* pa = a.get();
  out->backprop = [o, pa]() {
    if (!pa->requires_grad) return;
    Tensor g = o->grad;
    const float* x = pa->val.data();
    for (int64_t i = 0; i < g.numel(); ++i) {
      if (x[i] <= 0.0f) g[i] = 0.0f;
    }
    pa->accum(g);
  };
  return out;
}

Var softmax_rows(const Var& a) {
  Var out = make_op(nk::softmax_rows(a->val), {a});
  Node* o = out.get();
  Node* pa = a.get();
  out->backprop = [o, pa]() {
    if (!pa->requires_grad) return;
    const int64_t m = o->val.dim(0), n = o->val.dim(1);
    Tensor g({m, n});
    for (int64_t i = 0; i < m; ++i) {
      const float* y = o->val.data() + i * n;
      const float* dy = o->grad.data() + i * n;
      float dot = 0.0f;
      for (int64_t j = 0; j < n; ++j) dot += y[j] * dy[j];
      float* dst = g.data() + i * n;
      for (int64_t j = 0; j < n; ++j) dst[j] = y[j] * (dy[j] - dot);
    }
    pa->accum(g);
  };
  return out;
}

Var layer_norm(const Var& a, const Var& gain, const Var& bias, float eps) {
  Var out = make_op(nk::layer_norm(a->val, gain->val, bias->val, eps), {a, gain, bias});
  Node* o = out.get();
  Node* pa = a.get();
  Node* pg = gain.get();
  Node* pb = bias.get();
  out->backprop = [o, pa, pg, pb, eps]() {
    const int64_t m = pa->val.dim(0), n = pa->val.dim(1);
    Tensor da({m, n});
    Tensor dg({n});
    Tensor db({n});
    for (int64_t i = 0; i < m; ++i) {
      const float* x = pa->val.data() + i * n;
      const float* dy = o->grad.data() + i * n;
      float mean = 0.0f;
      for (int64_t j = 0; j < n; ++j) mean += x[j];
      mean /= static_cast<float>(n);
      float var = 0.0f;
      for (int64_t j = 0; j < n; ++j) {
        const float d = x[j] - mean;
        var += d * d;
      }
      var /= static_cast<float>(n);
      const float inv = 1.0f / std::sqrt(var + eps);
      // xhat_j = (x_j - mean) * inv; y_j = xhat_j * gain_j + bias_j
      float sum_gdy = 0.0f, sum_gdy_xhat = 0.0f;
      for (int64_t j = 0; j < n; ++j) {
        const float xhat = (x[j] - mean) * inv;
        const float gdy = dy[j] * pg->val[j];
        sum_gdy += gdy;
        sum_gdy_xhat += gdy * xhat;
        dg[j] += dy[j] * xhat;
        db[j] += dy[j];
      }
      const float invn = 1.0f / static_cast<float>(n);
      float* dst = da.data() + i * n;
      for (int64_t j = 0; j < n; ++j) {
        const float xhat = (x[j] - mean) * inv;
        const float gdy = dy[j] * pg->val[j];
        dst[j] = inv * (gdy - invn * sum_gdy - xhat * invn * sum_gdy_xhat);
      }
    }
    if (pa->requires_grad) pa->accum(da);
    if (pg->requires_grad) pg->accum(dg);
    if (pb->requires_grad) pb->accum(db);
  };
  return out;
}

Var gather_rows(const Var& table, const std::vector<int>& ids) {
  Var out = make_op(nk::gather_rows(table->val, ids), {table});
  Node* o = out.get();
  Node* pt = table.get();
  out->backprop = [o, pt, ids]() {
    if (!pt->requires_grad) return;
    Tensor g(pt->val.shape());
    const int64_t n = pt->val.dim(1);
    for (size_t i = 0; i < ids.size(); ++i) {
      const float* src = o->grad.data() + static_cast<int64_t>(i) * n;
      float* dst = g.data() + static_cast<int64_t>(ids[i]) * n;
      for (int64_t j = 0; j < n; ++j) dst[j] += src[j];
    }
    pt->accum(g);
  };
  return out;
}

Var concat_cols(const std::vector<Var>& parts) {
  std::vector<const Tensor*> vals;
  vals.reserve(parts.size());
  for (const Var& p : parts) vals.push_back(&p->val);
  Var out = make_op(nk::concat_cols(vals), parts);
  Node* o = out.get();
  std::vector<Node*> raw;
  raw.reserve(parts.size());
  for (const Var& p : parts) raw.push_back(p.get());
  out->backprop = [o, raw]() {
    const int64_t m = o->grad.dim(0), total = o->grad.dim(1);
    int64_t col = 0;
    for (Node* p : raw) {
      const int64_t w = p->val.dim(1);
      if (p->requires_grad) {
        Tensor g({m, w});
        for (int64_t i = 0; i < m; ++i) {
          const float* src = o->grad.data() + i * total + col;
          float* dst = g.data() + i * w;
          for (int64_t j = 0; j < w; ++j) dst[j] = src[j];
        }
        p->accum(g);
      }
      col += w;
    }
  };
  return out;
}

Var mean_rows(const Var& a) {
  Var out = make_op(nk::mean_rows(a->val), {a});
  Node* o = out.get();
  Node* pa = a.get();
  out->backprop = [o, pa]() {
    if (!pa->requires_grad) return;
    const int64_t m = pa->val.dim(0), n = pa->val.dim(1);
    Tensor g({m, n});
    const float inv = 1.0f / static_cast<float>(m);
    for (int64_t i = 0; i < m; ++i) {
      float* dst = g.data() + i * n;
      for (int64_t j = 0; j < n; ++j) dst[j] = o->grad[j] * inv;
    }
    pa->accum(g);
  };
  return out;
}

Var normalize_columns(const Var& a, float eps) {
  Var out = make_op(nk::normalize_columns(a->val, eps), {a});
  Node* o = out.get();
  Node* pa = a.get();
  out->backprop = [o, pa, eps]() {
    if (!pa->requires_grad) return;
    const int64_t m = pa->val.dim(0), n = pa->val.dim(1);
    Tensor g({m, n});
    for (int64_t j = 0; j < n; ++j) {
      float ss = 0.0f;
      for (int64_t i = 0; i < m; ++i) {
        const float v = pa->val.at(i, j);
        ss += v * v;
      }
      const float norm = std::sqrt(ss);
      if (norm > eps) {
        // y = x / ‖x‖: dx = (dy - y (y·dy)) / ‖x‖
        float dot = 0.0f;
        for (int64_t i = 0; i < m; ++i) dot += o->val.at(i, j) * o->grad.at(i, j);
        const float inv = 1.0f / norm;
        for (int64_t i = 0; i < m; ++i) {
          g.at(i, j) = (o->grad.at(i, j) - o->val.at(i, j) * dot) * inv;
        }
      } else {
        // clamped branch: y = x / eps with eps constant
        const float inv = 1.0f / eps;
        for (int64_t i = 0; i < m; ++i) g.at(i, j) = o->grad.at(i, j) * inv;
      }
    }
    pa->accum(g);
  };
  return out;
}

Var rope(const Var& a, int64_t offset, float base) {
  Var out = make_op(nk::rope(a->val, offset, base), {a});
  Node* o = out.get();
  Node* pa = a.get();
  out->backprop = [o, pa, offset, base]() {
    if (!pa->requires_grad) return;
    // rotation is orthogonal, so the adjoint rotates by the negated angle
    const int64_t m = o->grad.dim(0), n = o->grad.dim(1);
    Tensor g({m, n});
    for (int64_t i = 0; i < m; ++i) {
      const float pos = static_cast<float>(i + offset);
      const float* dy = o->grad.data() + i * n;
      float* dst = g.data() + i * n;
      for (int64_t j = 0; j < n / 2; ++j) {
        const float theta = std::pow(base, -2.0f * static_cast<float>(j) / static_cast<float>(n));
        const float ang = pos * theta;
        const float ca = std::cos(ang), sa = std::sin(ang);
        const float gx = dy[2 * j], gy = dy[2 * j + 1];
        dst[2 * j] = gx * ca + gy * sa;
        dst[2 * j + 1] = -gx * sa + gy * ca;
      }
    }
    pa->accum(g);
  };
  return out;
}

Var l1_norm(const Var& a) {
  Var out = make_op(Tensor::scalar(nk::l1_norm(a->val)), {a});
  Node* o = out.get();
  Node* pa = a.get();
  out->backprop = [o, pa]() {
    if (!pa->requires_grad) return;
    const float g = o->grad[0];
    Tensor d(pa->val.shape());
    const float* x = pa->val.data();
    for (int64_t i = 0; i < d.numel(); ++i) {
      d[i] = x[i] > 0.0f ? g : (x[i] < 0.0f ? -g : 0.0f);
    }
    pa->accum(d);
  };
  return out;
}

Var l2_norm_sq(const Var& a) {
  Var out = make_op(Tensor::scalar(nk::l2_norm_sq(a->val)), {a});
  Node* o = out.get();
  Node* pa = a.get();
  out->backprop = [o, pa]() {
    if (!pa->requires_grad) return;
    pa->accum(nk::scale(pa->val, 2.0f * o->grad[0]));
  };
  return out;
}

Var l2_norm(const Var& a) {
  Var out = make_op(Tensor::scalar(nk::l2_norm(a->val)), {a});
  Node* o = out.get();
  Node* pa = a.get();
  out->backprop = [o, pa]() {
    if (!pa->requires_grad) return;
    const float norm = o->val[0];
    const float g = o->grad[0];
    const float inv = g / std::max(norm, 1e-12f);
    pa->accum(nk::scale(pa->val, inv));
  };
  return out;
}

Var cross_entropy_logits(const Var& logits, const std::vector<int>& targets) {
  Var out = make_op(Tensor::scalar(nk::cross_entropy_logits(logits->val, targets)), {logits});
  Node* o = out.get();
  Node* pl = logits.get();
  out->backprop = [o, pl, targets]() {
    if (!pl->requires_grad) return;
    const int64_t m = pl->val.dim(0), n = pl->val.dim(1);
    int64_t counted = 0;
    for (int t : targets) {
      if (t >= 0) ++counted;
    }
    const float g = o->grad[0] / static_cast<float>(counted);
    Tensor d({m, n});
    Tensor sm = nk::softmax_rows(pl->val);
    for (int64_t i = 0; i < m; ++i) {
      const int t = targets[static_cast<size_t>(i)];
      if (t < 0) continue;
      const float* p = sm.data() + i * n;
      float* dst = d.data() + i * n;
      for (int64_t j = 0; j < n; ++j) dst[j] = p[j] * g;
      dst[t] -= g;
    }
    pl->accum(d);
  };
  return out;
}

}  // namespace ps::ad
