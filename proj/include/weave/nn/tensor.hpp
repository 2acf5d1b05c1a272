// SPDX-License-Identifier: Apache-2.0
//
// Minimal reverse-mode autograd over dense float tensors. Row-major storage,
// dynamic shapes, tape built implicitly through parent links. Matmuls are
// Eigen-backed; everything else is plain loops. Small by intent: only the ops
// the models in this repo need.
#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace weave::nn {

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
  std::vector<int> shape;
  std::vector<float> value;
  std::vector<float> grad;  // lazily sized; empty until touched by backward
  bool requires_grad = false;
  std::vector<NodePtr> parents;
  std::function<void(Node&)> backward_fn;  // accumulates into parents' grads
  std::string name;                        // set for parameters only

  size_t numel() const { return value.size(); }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0f);
  }
};

// Value-semantics handle onto a graph node.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(NodePtr n) : node_(std::move(n)) {}

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor from(std::vector<int> shape, std::vector<float> data,
                     bool requires_grad = false);
  static Tensor scalar(float v);

  bool defined() const { return node_ != nullptr; }
  const std::vector<int>& shape() const { return node_->shape; }
  int dim(int i) const { return node_->shape[i]; }
  size_t numel() const { return node_->numel(); }
  std::vector<float>& data() { return node_->value; }
  const std::vector<float>& data() const { return node_->value; }
  std::vector<float>& grad() { node_->ensure_grad(); return node_->grad; }
  float item() const { return node_->value.at(0); }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool b) { node_->requires_grad = b; }
  NodePtr node() const { return node_; }

 private:
  NodePtr node_;
};

// Runs reverse-mode accumulation from a scalar loss.
void backward(const Tensor& loss);

// ---- elementwise / reductions ----
Tensor add(const Tensor& a, const Tensor& b);            // same shape
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);            // hadamard
Tensor scale(const Tensor& a, float s);
Tensor add_scaled(const Tensor& a, const Tensor& b, float s);  // a + s*b
Tensor silu(const Tensor& a);
Tensor mean_all(const Tensor& a);
Tensor sum_all(const Tensor& a);
Tensor mse(const Tensor& a, const Tensor& b);            // mean((a-b)^2)

// ---- 2-D ops (shape {rows, cols}) ----
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor matmul_nt(const Tensor& a, const Tensor& b);      // a * b^T
Tensor add_row_broadcast(const Tensor& x, const Tensor& bias);  // bias {cols}
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  float eps = 1e-5f);
// Row-wise softmax; row i attends to columns [0, valid[i]). Empty valid =>
// all columns.
Tensor softmax_rows(const Tensor& x, const std::vector<int>& valid = {});
// Mean cross-entropy of logits rows vs integer targets over mask==1 rows.
// All-zero mask returns 0 and bumps *starved if given.
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                     const std::vector<uint8_t>& mask, int* starved = nullptr);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& x, int r0, int r1);      // [r0, r1)
Tensor slice_cols(const Tensor& x, int c0, int c1);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor gather_rows(const Tensor& table, const std::vector<int>& ids);
Tensor transpose(const Tensor& x);
// Scale each row i of x by m[i] (no grad into m; masks are data, not params).
Tensor scale_rows(const Tensor& x, const std::vector<float>& m);

// ---- image ops (shape {C, H, W}) ----
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int kh,
              int kw, int stride, int pad);  // w {Cout, Cin*kh*kw}, b {Cout}
Tensor upsample2(const Tensor& x);           // nearest neighbour x2
Tensor add_channel_bias(const Tensor& x, const Tensor& b);  // b {C}
Tensor chw_to_nc(const Tensor& x);           // {C,H,W} -> {H*W, C}
Tensor nc_to_chw(const Tensor& x, int c, int h, int w);

}  // namespace weave::nn
