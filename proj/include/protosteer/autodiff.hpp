#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "protosteer/tensor.hpp"

namespace ps::ad {

// Reverse-mode tape over Tensor values. Each op computes its forward value
// through the kernels in numkit::kernels, so a graph forward and a plain
// kernel forward produce identical bits.
struct Node {
  numkit::Tensor val;
  numkit::Tensor grad;  // allocated on first accumulation
  bool requires_grad = false;
  bool grad_ready = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void()> backprop;  // reads this->grad, accumulates into parents

  void accum(const numkit::Tensor& g);
};

using Var = std::shared_ptr<Node>;

Var leaf(numkit::Tensor val, bool requires_grad = true);
Var constant(numkit::Tensor val);

// Seeds d(root)/d(root) = 1 and runs the tape in reverse topological order.
// root must hold exactly one element.
void backward(const Var& root);

Var matmul(const Var& a, const Var& b);
Var matmul_nt(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var add_rowvec(const Var& a, const Var& v);
Var scale(const Var& a, float s);
Var relu(const Var& a);
Var softmax_rows(const Var& a);
Var layer_norm(const Var& a, const Var& gain, const Var& bias, float eps);
Var gather_rows(const Var& table, const std::vector<int>& ids);
Var concat_cols(const std::vector<Var>& parts);
Var mean_rows(const Var& a);
Var normalize_columns(const Var& a, float eps);
Var rope(const Var& a, int64_t offset, float base);
Var l1_norm(const Var& a);
Var l2_norm_sq(const Var& a);
Var l2_norm(const Var& a);
Var cross_entropy_logits(const Var& logits, const std::vector<int>& targets);

}  // namespace ps::ad
