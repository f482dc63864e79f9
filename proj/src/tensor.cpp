#include "protosteer/tensor.hpp"

#include <cmath>
#include <cstdlib>
#include <sstream>
#include <stdexcept>

namespace ps::numkit {

namespace {

int64_t product(const std::vector<int64_t>& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    if (d < 0) throw std::invalid_argument("tensor: negative dimension in shape " + shape_to_string(shape));
    n *= d;
  }
  return n;
}

void require_rank2(const Tensor& t, const char* who) {
  if (t.rank() != 2) {
    throw std::invalid_argument(std::string(who) + ": expected rank-2 tensor, got shape " + t.shape_str());
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* who) {
  if (!a.same_shape(b)) {
    throw std::invalid_argument(std::string(who) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
  }
}

}  // namespace

Tensor::Tensor(std::vector<int64_t> shape, std::vector<float> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (product(shape_) != static_cast<int64_t>(data_.size())) {
    throw std::invalid_argument("tensor: shape " + shape_to_string(shape_) + " wants " +
                                std::to_string(product(shape_)) + " elements, got " +
                                std::to_string(data_.size()));
  }
}

Tensor::Tensor(std::vector<int64_t> shape) : shape_(std::move(shape)) {
  data_.assign(static_cast<size_t>(product(shape_)), 0.0f);
}

Tensor Tensor::full(std::vector<int64_t> shape, float v) {
  Tensor t(std::move(shape));
  for (auto& x : t.data_) x = v;
  return t;
}

Tensor Tensor::row(std::vector<float> v) {
  auto n = static_cast<int64_t>(v.size());
  return Tensor({n}, std::move(v));
}

bool Tensor::all_finite() const {
  for (float x : data_) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

Tensor Tensor::reshaped(std::vector<int64_t> shape) const {
  if (product(shape) != numel()) {
    throw std::invalid_argument("reshape: " + shape_str() + " -> " + shape_to_string(shape) +
                                " changes element count");
  }
  return Tensor(std::move(shape), data_);
}

std::string Tensor::shape_str() const { return shape_to_string(shape_); }

std::string shape_to_string(const std::vector<int64_t>& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ",";
    os << s[i];
  }
  os << "]";
  return os.str();
}

namespace kernels {

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  if (a.dim(1) != b.dim(0)) {
    throw std::invalid_argument("matmul: inner dims disagree, " + a.shape_str() + " x " + b.shape_str());
  }
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor c({m, n});
  const float* pa = a.data();
  const float* pb = b.data();
  float* pc = c.data();
  // ikj order: the inner loop streams both b and c rows.
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t kk = 0; kk < k; ++kk) {
      const float av = pa[i * k + kk];
      if (av == 0.0f) continue;
      const float* brow = pb + kk * n;
      float* crow = pc + i * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul_nt");
  require_rank2(b, "matmul_nt");
  if (a.dim(1) != b.dim(1)) {
    throw std::invalid_argument("matmul_nt: inner dims disagree, " + a.shape_str() + " x " + b.shape_str() + "^T");
  }
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  Tensor c({m, n});
  const float* pa = a.data();
  const float* pb = b.data();
  float* pc = c.data();
  for (int64_t i = 0; i < m; ++i) {
    const float* arow = pa + i * k;
    for (int64_t j = 0; j < n; ++j) {
      const float* brow = pb + j * k;
      float acc = 0.0f;
      for (int64_t kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
      pc[i * n + j] = acc;
    }
  }
  return c;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul_tn");
  require_rank2(b, "matmul_tn");
  if (a.dim(0) != b.dim(0)) {
    throw std::invalid_argument("matmul_tn: inner dims disagree, " + a.shape_str() + "^T x " + b.shape_str());
  }
  const int64_t k = a.dim(0), m = a.dim(1), n = b.dim(1);
  Tensor c({m, n});
  const float* pa = a.data();
  const float* pb = b.data();
  float* pc = c.data();
  for (int64_t kk = 0; kk < k; ++kk) {
    const float* arow = pa + kk * m;
    const float* brow = pb + kk * n;
    for (int64_t i = 0; i < m; ++i) {
      const float av = arow[i];
      if (av == 0.0f) continue;
      float* crow = pc + i * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor c = a;
  float* pc = c.data();
  const float* pb = b.data();
  for (int64_t i = 0; i < c.numel(); ++i) pc[i] += pb[i];
  return c;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor c = a;
  float* pc = c.data();
  const float* pb = b.data();
  for (int64_t i = 0; i < c.numel(); ++i) pc[i] -= pb[i];
  return c;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor c = a;
  float* pc = c.data();
  const float* pb = b.data();
  for (int64_t i = 0; i < c.numel(); ++i) pc[i] *= pb[i];
  return c;
}

Tensor add_rowvec(const Tensor& a, const Tensor& v) {
  require_rank2(a, "add_rowvec");
  if (v.rank() != 1 || v.dim(0) != a.dim(1)) {
    throw std::invalid_argument("add_rowvec: vector " + v.shape_str() + " does not match row width of " +
                                a.shape_str());
  }
  Tensor c = a;
  const int64_t m = a.dim(0), n = a.dim(1);
  float* pc = c.data();
  const float* pv = v.data();
  for (int64_t i = 0; i < m; ++i) {
    float* crow = pc + i * n;
    for (int64_t j = 0; j < n; ++j) crow[j] += pv[j];
  }
  return c;
}

Tensor scale(const Tensor& a, float s) {
  Tensor c = a;
  for (int64_t i = 0; i < c.numel(); ++i) c[i] *= s;
  return c;
}

Tensor relu(const Tensor& a) {
  Tensor c = a;
  for (int64_t i = 0; i < c.numel(); ++i) {
    if (c[i] < 0.0f) c[i] = 0.0f;
  }
  return c;
}

Tensor softmax_rows(const Tensor& a) {
  require_rank2(a, "softmax_rows");
  const int64_t m = a.dim(0), n = a.dim(1);
  Tensor c({m, n});
  const float* pa = a.data();
  float* pc = c.data();
  for (int64_t i = 0; i < m; ++i) {
    const float* arow = pa + i * n;
    float* crow = pc + i * n;
    float mx = arow[0];
    for (int64_t j = 1; j < n; ++j) mx = std::max(mx, arow[j]);
    float sum = 0.0f;
    for (int64_t j = 0; j < n; ++j) {
      crow[j] = std::exp(arow[j] - mx);
      sum += crow[j];
    }
    const float inv = 1.0f / sum;
    for (int64_t j = 0; j < n; ++j) crow[j] *= inv;
  }
  return c;
}

Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias, float eps) {
  require_rank2(a, "layer_norm");
  const int64_t m = a.dim(0), n = a.dim(1);
  if (gain.rank() != 1 || gain.dim(0) != n || bias.rank() != 1 || bias.dim(0) != n) {
    throw std::invalid_argument("layer_norm: gain " + gain.shape_str() + " / bias " + bias.shape_str() +
                                " do not match row width of " + a.shape_str());
  }
  Tensor c({m, n});
  const float* pa = a.data();
  const float* pg = gain.data();
  const float* pb = bias.data();
  float* pc = c.data();
  for (int64_t i = 0; i < m; ++i) {
    const float* arow = pa + i * n;
    float* crow = pc + i * n;
    float mean = 0.0f;
    for (int64_t j = 0; j < n; ++j) mean += arow[j];
    mean /= static_cast<float>(n);
    float var = 0.0f;
    for (int64_t j = 0; j < n; ++j) {
      const float d = arow[j] - mean;
      var += d * d;
    }
    var /= static_cast<float>(n);
    const float inv = 1.0f / std::sqrt(var + eps);
    for (int64_t j = 0; j < n; ++j) crow[j] = (arow[j] - mean) * inv * pg[j] + pb[j];
  }
  return c;
}

Tensor gather_rows(const Tensor& table, const std::vector<int>& ids) {
  require_rank2(table, "gather_rows");
  const int64_t rows = table.dim(0), n = table.dim(1);
  Tensor c({static_cast<int64_t>(ids.size()), n});
  for (size_t i = 0; i < ids.size(); ++i) {
    const int id = ids[i];
    if (id < 0 || id >= rows) {
      throw std::out_of_range("gather_rows: id " + std::to_string(id) + " outside table " + table.shape_str());
    }
    const float* src = table.data() + static_cast<int64_t>(id) * n;
    float* dst = c.data() + static_cast<int64_t>(i) * n;
    for (int64_t j = 0; j < n; ++j) dst[j] = src[j];
  }
  return c;
}

Tensor concat_cols(const std::vector<const Tensor*>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const int64_t m = parts[0]->dim(0);
  int64_t total = 0;
  for (const Tensor* p : parts) {
    require_rank2(*p, "concat_cols");
    if (p->dim(0) != m) {
      throw std::invalid_argument("concat_cols: row counts disagree, " + parts[0]->shape_str() + " vs " +
                                  p->shape_str());
    }
    total += p->dim(1);
  }
  Tensor c({m, total});
  for (int64_t i = 0; i < m; ++i) {
    float* dst = c.data() + i * total;
    for (const Tensor* p : parts) {
      const int64_t w = p->dim(1);
      const float* src = p->data() + i * w;
      for (int64_t j = 0; j < w; ++j) *dst++ = src[j];
    }
  }
  return c;
}

Tensor concat_flat(const std::vector<const Tensor*>& parts) {
  int64_t total = 0;
  for (const Tensor* p : parts) total += p->numel();
  Tensor c({total});
  float* dst = c.data();
  for (const Tensor* p : parts) {
    const float* src = p->data();
    for (int64_t i = 0; i < p->numel(); ++i) *dst++ = src[i];
  }
  return c;
}

Tensor mean_rows(const Tensor& a) {
  require_rank2(a, "mean_rows");
  const int64_t m = a.dim(0), n = a.dim(1);
  if (m == 0) throw std::invalid_argument("mean_rows: no rows in " + a.shape_str());
  Tensor c({n});
  const float* pa = a.data();
  float* pc = c.data();
  for (int64_t i = 0; i < m; ++i) {
    const float* arow = pa + i * n;
    for (int64_t j = 0; j < n; ++j) pc[j] += arow[j];
  }
  const float inv = 1.0f / static_cast<float>(m);
  for (int64_t j = 0; j < n; ++j) pc[j] *= inv;
  return c;
}

Tensor normalize_columns(const Tensor& a, float eps) {
  require_rank2(a, "normalize_columns");
  const int64_t m = a.dim(0), n = a.dim(1);
  Tensor c = a;
  for (int64_t j = 0; j < n; ++j) {
    float ss = 0.0f;
    for (int64_t i = 0; i < m; ++i) {
      const float v = c.at(i, j);
      ss += v * v;
    }
    const float norm = std::sqrt(ss);
    const float inv = 1.0f / std::max(norm, eps);
    for (int64_t i = 0; i < m; ++i) c.at(i, j) *= inv;
  }
  return c;
}

Tensor rope(const Tensor& a, int64_t offset, float base) {
  require_rank2(a, "rope");
  const int64_t m = a.dim(0), n = a.dim(1);
  if (n % 2 != 0) throw std::invalid_argument("rope: feature dim must be even, got " + a.shape_str());
  Tensor c({m, n});
  const float* pa = a.data();
  float* pc = c.data();
  for (int64_t i = 0; i < m; ++i) {
    const float pos = static_cast<float>(i + offset);
    const float* arow = pa + i * n;
    float* crow = pc + i * n;
    for (int64_t j = 0; j < n / 2; ++j) {
      const float theta = std::pow(base, -2.0f * static_cast<float>(j) / static_cast<float>(n));
      const float ang = pos * theta;
      const float ca = std::cos(ang), sa = std::sin(ang);
      const float x = arow[2 * j], y = arow[2 * j + 1];
      crow[2 * j] = x * ca - y * sa;
      crow[2 * j + 1] = x * sa + y * ca;
    }
  }
  return c;
}

float l1_norm(const Tensor& a) {
  float s = 0.0f;
  for (int64_t i = 0; i < a.numel(); ++i) s += std::fabs(a[i]);
  return s;
}

float l2_norm_sq(const Tensor& a) {
  float s = 0.0f;
  for (int64_t i = 0; i < a.numel(); ++i) s += a[i] * a[i];
  return s;
}

float l2_norm(const Tensor& a) { return std::sqrt(l2_norm_sq(a)); }

float cross_entropy_logits(const Tensor& logits, const std::vector<int>& targets) {
  require_rank2(logits, "cross_entropy_logits");
  const int64_t m = logits.dim(0), n = logits.dim(1);
  if (static_cast<int64_t>(targets.size()) != m) {
    throw std::invalid_argument("cross_entropy_logits: " + std::to_string(targets.size()) +
                                " targets for logits " + logits.shape_str());
  }
  double total = 0.0;
  int64_t counted = 0;
  const float* pl = logits.data();
  for (int64_t i = 0; i < m; ++i) {
    const int t = targets[static_cast<size_t>(i)];
    if (t < 0) continue;
    if (t >= n) {
      throw std::out_of_range("cross_entropy_logits: target " + std::to_string(t) + " outside logits " +
                              logits.shape_str());
    }
    const float* row = pl + i * n;
    float mx = row[0];
    for (int64_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    float sum = 0.0f;
    for (int64_t j = 0; j < n; ++j) sum += std::exp(row[j] - mx);
    total += -static_cast<double>(row[t] - mx - std::log(sum));
    ++counted;
  }
  if (counted == 0) throw std::invalid_argument("cross_entropy_logits: every target masked");
  return static_cast<float>(total / static_cast<double>(counted));
}

}  // namespace kernels

}  // namespace ps::numkit
