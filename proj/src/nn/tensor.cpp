// SPDX-License-Identifier: Apache-2.0
#include "weave/nn/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace weave::nn {

using MatMap =
    Eigen::Map<Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstMatMap = Eigen::Map<
    const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

namespace {

size_t shape_numel(const std::vector<int>& shape) {
  size_t n = 1;
  for (int d : shape) n *= static_cast<size_t>(d);
  return n;
}

NodePtr make_node(std::vector<int> shape, std::vector<NodePtr> parents) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value.assign(shape_numel(n->shape), 0.0f);
  n->parents = std::move(parents);
  for (const auto& p : n->parents)
    if (p->requires_grad) n->requires_grad = true;
  return n;
}

void check(bool cond, const char* msg) {
  if (!cond) throw std::invalid_argument(msg);
}

}  // namespace

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  auto n = make_node(std::move(shape), {});
  n->requires_grad = requires_grad;
  return Tensor(n);
}

Tensor Tensor::from(std::vector<int> shape, std::vector<float> data,
                    bool requires_grad) {
  check(shape_numel(shape) == data.size(), "Tensor::from: shape/data mismatch");
  auto n = make_node(std::move(shape), {});
  n->value = std::move(data);
  n->requires_grad = requires_grad;
  return Tensor(n);
}

Tensor Tensor::scalar(float v) { return from({1}, {v}); }

void backward(const Tensor& loss) {
  check(loss.numel() == 1, "backward: loss must be scalar");
  std::vector<Node*> topo;
  std::unordered_set<Node*> seen;
  // Iterative post-order DFS over parent links.
  std::vector<std::pair<Node*, size_t>> stack{{loss.node().get(), 0}};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      Node* p = n->parents[idx++].get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      topo.push_back(n);
      stack.pop_back();
    }
  }
  loss.node()->ensure_grad();
  loss.node()->grad[0] = 1.0f;
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn) {
      for (auto& p : n->parents)
        if (p->requires_grad) p->ensure_grad();
      n->backward_fn(*n);
    }
  }
}

// ---------------------------------------------------------------- elementwise

Tensor add(const Tensor& a, const Tensor& b) { return add_scaled(a, b, 1.0f); }
Tensor sub(const Tensor& a, const Tensor& b) { return add_scaled(a, b, -1.0f); }

Tensor add_scaled(const Tensor& a, const Tensor& b, float s) {
  check(a.numel() == b.numel(), "add: size mismatch");
  auto n = make_node(a.shape(), {a.node(), b.node()});
  for (size_t i = 0; i < n->numel(); ++i)
    n->value[i] = a.data()[i] + s * b.data()[i];
  n->backward_fn = [s](Node& out) {
    Node* pa = out.parents[0].get();
    Node* pb = out.parents[1].get();
    for (size_t i = 0; i < out.numel(); ++i) {
      if (pa->requires_grad) pa->grad[i] += out.grad[i];
      if (pb->requires_grad) pb->grad[i] += s * out.grad[i];
    }
  };
  return Tensor(n);
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check(a.numel() == b.numel(), "mul: size mismatch");
  auto n = make_node(a.shape(), {a.node(), b.node()});
  for (size_t i = 0; i < n->numel(); ++i)
    n->value[i] = a.data()[i] * b.data()[i];
  n->backward_fn = [](Node& out) {
    Node* pa = out.parents[0].get();
    Node* pb = out.parents[1].get();
    for (size_t i = 0; i < out.numel(); ++i) {
      if (pa->requires_grad) pa->grad[i] += pb->value[i] * out.grad[i];
      if (pb->requires_grad) pb->grad[i] += pa->value[i] * out.grad[i];
    }
  };
  return Tensor(n);
}

Tensor scale(const Tensor& a, float s) {
  auto n = make_node(a.shape(), {a.node()});
  for (size_t i = 0; i < n->numel(); ++i) n->value[i] = s * a.data()[i];
  n->backward_fn = [s](Node& out) {
    Node* pa = out.parents[0].get();
    for (size_t i = 0; i < out.numel(); ++i) pa->grad[i] += s * out.grad[i];
  };
  return Tensor(n);
}

Tensor silu(const Tensor& a) {
  auto n = make_node(a.shape(), {a.node()});
  for (size_t i = 0; i < n->numel(); ++i) {
    float x = a.data()[i];
    n->value[i] = x / (1.0f + std::exp(-x));
  }
  n->backward_fn = [](Node& out) {
    Node* pa = out.parents[0].get();
    for (size_t i = 0; i < out.numel(); ++i) {
      float x = pa->value[i];
      float sg = 1.0f / (1.0f + std::exp(-x));
      pa->grad[i] += sg * (1.0f + x * (1.0f - sg)) * out.grad[i];
    }
  };
  return Tensor(n);
}

Tensor sum_all(const Tensor& a) {
  auto n = make_node({1}, {a.node()});
  double acc = 0.0;
  for (float v : a.data()) acc += v;
  n->value[0] = static_cast<float>(acc);
  n->backward_fn = [](Node& out) {
    Node* pa = out.parents[0].get();
    for (size_t i = 0; i < pa->numel(); ++i) pa->grad[i] += out.grad[0];
  };
  return Tensor(n);
}

Tensor mean_all(const Tensor& a) {
  return scale(sum_all(a), 1.0f / static_cast<float>(a.numel()));
}

Tensor mse(const Tensor& a, const Tensor& b) {
  check(a.numel() == b.numel(), "mse: size mismatch");
  auto n = make_node({1}, {a.node(), b.node()});
  double acc = 0.0;
  for (size_t i = 0; i < a.numel(); ++i) {
    double d = static_cast<double>(a.data()[i]) - b.data()[i];
    acc += d * d;
  }
  const float inv = 1.0f / static_cast<float>(a.numel());
  n->value[0] = static_cast<float>(acc) * inv;
  n->backward_fn = [inv](Node& out) {
    Node* pa = out.parents[0].get();
    Node* pb = out.parents[1].get();
    for (size_t i = 0; i < pa->numel(); ++i) {
      float d = 2.0f * inv * (pa->value[i] - pb->value[i]) * out.grad[0];
      if (pa->requires_grad) pa->grad[i] += d;
      if (pb->requires_grad) pb->grad[i] -= d;
    }
  };
  return Tensor(n);
}

// ----------------------------------------------------------------------- 2-D

Tensor matmul(const Tensor& a, const Tensor& b) {
  check(a.shape().size() == 2 && b.shape().size() == 2, "matmul: need 2-D");
  const int m = a.dim(0), k = a.dim(1), n_ = b.dim(1);
  check(b.dim(0) == k, "matmul: inner dim mismatch");
  auto n = make_node({m, n_}, {a.node(), b.node()});
  MatMap(n->value.data(), m, n_) = ConstMatMap(a.data().data(), m, k) *
                                   ConstMatMap(b.data().data(), k, n_);
  n->backward_fn = [m, k, n_](Node& out) {
    Node* pa = out.parents[0].get();
    Node* pb = out.parents[1].get();
    ConstMatMap go(out.grad.data(), m, n_);
    if (pa->requires_grad)
      MatMap(pa->grad.data(), m, k) +=
          go * ConstMatMap(pb->value.data(), k, n_).transpose();
    if (pb->requires_grad)
      MatMap(pb->grad.data(), k, n_) +=
          ConstMatMap(pa->value.data(), m, k).transpose() * go;
  };
  return Tensor(n);
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  check(a.shape().size() == 2 && b.shape().size() == 2, "matmul_nt: need 2-D");
  const int m = a.dim(0), k = a.dim(1), n_ = b.dim(0);
  check(b.dim(1) == k, "matmul_nt: inner dim mismatch");
  auto n = make_node({m, n_}, {a.node(), b.node()});
  MatMap(n->value.data(), m, n_) =
      ConstMatMap(a.data().data(), m, k) *
      ConstMatMap(b.data().data(), n_, k).transpose();
  n->backward_fn = [m, k, n_](Node& out) {
    Node* pa = out.parents[0].get();
    Node* pb = out.parents[1].get();
    ConstMatMap go(out.grad.data(), m, n_);
    if (pa->requires_grad)
      MatMap(pa->grad.data(), m, k) += go * ConstMatMap(pb->value.data(), n_, k);
    if (pb->requires_grad)
      MatMap(pb->grad.data(), n_, k) +=
          go.transpose() * ConstMatMap(pa->value.data(), m, k);
  };
  return Tensor(n);
}

Tensor add_row_broadcast(const Tensor& x, const Tensor& bias) {
  check(x.shape().size() == 2, "add_row_broadcast: need 2-D");
  const int r = x.dim(0), c = x.dim(1);
  check(static_cast<int>(bias.numel()) == c, "add_row_broadcast: bias size");
  auto n = make_node(x.shape(), {x.node(), bias.node()});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j)
      n->value[i * c + j] = x.data()[i * c + j] + bias.data()[j];
  n->backward_fn = [r, c](Node& out) {
    Node* px = out.parents[0].get();
    Node* pb = out.parents[1].get();
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) {
        float g = out.grad[i * c + j];
        if (px->requires_grad) px->grad[i * c + j] += g;
        if (pb->requires_grad) pb->grad[j] += g;
      }
  };
  return Tensor(n);
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  float eps) {
  check(x.shape().size() == 2, "layer_norm: need 2-D");
  const int r = x.dim(0), c = x.dim(1);
  check(static_cast<int>(gain.numel()) == c && static_cast<int>(bias.numel()) == c,
        "layer_norm: param size");
  auto n = make_node(x.shape(), {x.node(), gain.node(), bias.node()});
  auto stats = std::make_shared<std::vector<float>>(2 * r);  // mu, inv_std
  for (int i = 0; i < r; ++i) {
    const float* row = x.data().data() + i * c;
    double mu = 0.0;
    for (int j = 0; j < c; ++j) mu += row[j];
    mu /= c;
    double var = 0.0;
    for (int j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= c;
    float inv = 1.0f / std::sqrt(static_cast<float>(var) + eps);
    (*stats)[2 * i] = static_cast<float>(mu);
    (*stats)[2 * i + 1] = inv;
    for (int j = 0; j < c; ++j)
      n->value[i * c + j] =
          gain.data()[j] * (row[j] - static_cast<float>(mu)) * inv +
          bias.data()[j];
  }
  n->backward_fn = [r, c, stats](Node& out) {
    Node* px = out.parents[0].get();
    Node* pg = out.parents[1].get();
    Node* pb = out.parents[2].get();
    for (int i = 0; i < r; ++i) {
      const float mu = (*stats)[2 * i], inv = (*stats)[2 * i + 1];
      const float* xrow = px->value.data() + i * c;
      const float* grow = out.grad.data() + i * c;
      if (pg->requires_grad || pb->requires_grad)
        for (int j = 0; j < c; ++j) {
          if (pg->requires_grad)
            pg->grad[j] += grow[j] * (xrow[j] - mu) * inv;
          if (pb->requires_grad) pb->grad[j] += grow[j];
        }
      if (px->requires_grad) {
        // d/dx of gain*(x-mu)*inv: project out mean and x_hat components.
        double sum_g = 0.0, sum_gx = 0.0;
        for (int j = 0; j < c; ++j) {
          float gh = grow[j] * pg->value[j];
          float xh = (xrow[j] - mu) * inv;
          sum_g += gh;
          sum_gx += gh * xh;
        }
        for (int j = 0; j < c; ++j) {
          float gh = grow[j] * pg->value[j];
          float xh = (xrow[j] - mu) * inv;
          px->grad[i * c + j] += inv * (gh - static_cast<float>(sum_g) / c -
                                        xh * static_cast<float>(sum_gx) / c);
        }
      }
    }
  };
  return Tensor(n);
}

Tensor softmax_rows(const Tensor& x, const std::vector<int>& valid) {
  check(x.shape().size() == 2, "softmax_rows: need 2-D");
  const int r = x.dim(0), c = x.dim(1);
  check(valid.empty() || static_cast<int>(valid.size()) == r,
        "softmax_rows: valid size");
  auto n = make_node(x.shape(), {x.node()});
  auto lens = std::make_shared<std::vector<int>>(r, c);
  if (!valid.empty()) *lens = valid;
  for (int i = 0; i < r; ++i) {
    int L = (*lens)[i];
    check(L >= 1 && L <= c, "softmax_rows: bad valid length");
    const float* row = x.data().data() + i * c;
    float mx = row[0];
    for (int j = 1; j < L; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (int j = 0; j < L; ++j) z += std::exp(static_cast<double>(row[j] - mx));
    for (int j = 0; j < L; ++j)
      n->value[i * c + j] =
          static_cast<float>(std::exp(static_cast<double>(row[j] - mx)) / z);
  }
  n->backward_fn = [r, c, lens](Node& out) {
    Node* px = out.parents[0].get();
    for (int i = 0; i < r; ++i) {
      int L = (*lens)[i];
      const float* p = out.value.data() + i * c;
      const float* g = out.grad.data() + i * c;
      double dot = 0.0;
      for (int j = 0; j < L; ++j) dot += static_cast<double>(p[j]) * g[j];
      for (int j = 0; j < L; ++j)
        px->grad[i * c + j] += p[j] * (g[j] - static_cast<float>(dot));
    }
  };
  return Tensor(n);
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                     const std::vector<uint8_t>& mask, int* starved) {
  check(logits.shape().size() == 2, "cross_entropy: need 2-D");
  const int r = logits.dim(0), v = logits.dim(1);
  check(static_cast<int>(targets.size()) == r &&
            static_cast<int>(mask.size()) == r,
        "cross_entropy: target/mask size");
  int count = 0;
  for (uint8_t m : mask) count += m ? 1 : 0;
  if (count == 0) {
    if (starved) ++*starved;
    return Tensor::scalar(0.0f);
  }
  auto n = make_node({1}, {logits.node()});
  auto probs = std::make_shared<std::vector<float>>(logits.data());
  double loss = 0.0;
  for (int i = 0; i < r; ++i) {
    float* row = probs->data() + i * v;
    float mx = *std::max_element(row, row + v);
    double z = 0.0;
    for (int j = 0; j < v; ++j) z += std::exp(static_cast<double>(row[j] - mx));
    for (int j = 0; j < v; ++j)
      row[j] = static_cast<float>(std::exp(static_cast<double>(row[j] - mx)) / z);
    if (mask[i]) {
      check(targets[i] >= 0 && targets[i] < v, "cross_entropy: target range");
      loss -= std::log(std::max(1e-30, static_cast<double>(row[targets[i]])));
    }
  }
  n->value[0] = static_cast<float>(loss / count);
  auto tgt = std::make_shared<std::vector<int>>(targets);
  auto msk = std::make_shared<std::vector<uint8_t>>(mask);
  n->backward_fn = [r, v, count, probs, tgt, msk](Node& out) {
    Node* pl = out.parents[0].get();
    const float w = out.grad[0] / count;
    for (int i = 0; i < r; ++i) {
      if (!(*msk)[i]) continue;
      const float* p = probs->data() + i * v;
      float* g = pl->grad.data() + i * v;
      for (int j = 0; j < v; ++j) g[j] += w * p[j];
      g[(*tgt)[i]] -= w;
    }
  };
  return Tensor(n);
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  check(!parts.empty(), "concat_rows: empty");
  const int c = parts[0].dim(1);
  int rows = 0;
  std::vector<NodePtr> parents;
  for (const auto& p : parts) {
    check(p.shape().size() == 2 && p.dim(1) == c, "concat_rows: col mismatch");
    rows += p.dim(0);
    parents.push_back(p.node());
  }
  auto n = make_node({rows, c}, std::move(parents));
  size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.data().begin(), p.data().end(), n->value.begin() + off);
    off += p.numel();
  }
  n->backward_fn = [](Node& out) {
    size_t off = 0;
    for (auto& p : out.parents) {
      if (p->requires_grad)
        for (size_t i = 0; i < p->numel(); ++i) p->grad[i] += out.grad[off + i];
      off += p->numel();
    }
  };
  return Tensor(n);
}

Tensor slice_rows(const Tensor& x, int r0, int r1) {
  check(x.shape().size() == 2, "slice_rows: need 2-D");
  const int c = x.dim(1);
  check(0 <= r0 && r0 < r1 && r1 <= x.dim(0), "slice_rows: range");
  auto n = make_node({r1 - r0, c}, {x.node()});
  std::copy(x.data().begin() + static_cast<size_t>(r0) * c,
            x.data().begin() + static_cast<size_t>(r1) * c, n->value.begin());
  n->backward_fn = [r0, c](Node& out) {
    Node* px = out.parents[0].get();
    size_t base = static_cast<size_t>(r0) * c;
    for (size_t i = 0; i < out.numel(); ++i) px->grad[base + i] += out.grad[i];
  };
  return Tensor(n);
}

Tensor slice_cols(const Tensor& x, int c0, int c1) {
  check(x.shape().size() == 2, "slice_cols: need 2-D");
  const int r = x.dim(0), c = x.dim(1);
  check(0 <= c0 && c0 < c1 && c1 <= c, "slice_cols: range");
  const int w = c1 - c0;
  auto n = make_node({r, w}, {x.node()});
  for (int i = 0; i < r; ++i)
    std::copy(x.data().begin() + i * c + c0, x.data().begin() + i * c + c1,
              n->value.begin() + static_cast<size_t>(i) * w);
  n->backward_fn = [r, c, c0, w](Node& out) {
    Node* px = out.parents[0].get();
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < w; ++j)
        px->grad[i * c + c0 + j] += out.grad[i * w + j];
  };
  return Tensor(n);
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  check(!parts.empty(), "concat_cols: empty");
  const int r = parts[0].dim(0);
  int cols = 0;
  std::vector<NodePtr> parents;
  for (const auto& p : parts) {
    check(p.shape().size() == 2 && p.dim(0) == r, "concat_cols: row mismatch");
    cols += p.dim(1);
    parents.push_back(p.node());
  }
  auto n = make_node({r, cols}, std::move(parents));
  int off = 0;
  for (const auto& p : parts) {
    const int w = p.dim(1);
    for (int i = 0; i < r; ++i)
      std::copy(p.data().begin() + static_cast<size_t>(i) * w,
                p.data().begin() + static_cast<size_t>(i + 1) * w,
                n->value.begin() + static_cast<size_t>(i) * cols + off);
    off += w;
  }
  n->backward_fn = [r, cols](Node& out) {
    int off = 0;
    for (auto& p : out.parents) {
      const int w = p->shape[1];
      if (p->requires_grad)
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < w; ++j)
            p->grad[static_cast<size_t>(i) * w + j] +=
                out.grad[static_cast<size_t>(i) * cols + off + j];
      off += w;
    }
  };
  return Tensor(n);
}

Tensor gather_rows(const Tensor& table, const std::vector<int>& ids) {
  check(table.shape().size() == 2, "gather_rows: need 2-D");
  const int c = table.dim(1);
  auto n = make_node({static_cast<int>(ids.size()), c}, {table.node()});
  for (size_t i = 0; i < ids.size(); ++i) {
    check(ids[i] >= 0 && ids[i] < table.dim(0), "gather_rows: id range");
    std::copy(table.data().begin() + static_cast<size_t>(ids[i]) * c,
              table.data().begin() + static_cast<size_t>(ids[i] + 1) * c,
              n->value.begin() + i * c);
  }
  auto idx = std::make_shared<std::vector<int>>(ids);
  n->backward_fn = [c, idx](Node& out) {
    Node* pt = out.parents[0].get();
    for (size_t i = 0; i < idx->size(); ++i)
      for (int j = 0; j < c; ++j)
        pt->grad[static_cast<size_t>((*idx)[i]) * c + j] += out.grad[i * c + j];
  };
  return Tensor(n);
}

Tensor transpose(const Tensor& x) {
  check(x.shape().size() == 2, "transpose: need 2-D");
  const int r = x.dim(0), c = x.dim(1);
  auto n = make_node({c, r}, {x.node()});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) n->value[j * r + i] = x.data()[i * c + j];
  n->backward_fn = [r, c](Node& out) {
    Node* px = out.parents[0].get();
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j)
        px->grad[i * c + j] += out.grad[j * r + i];
  };
  return Tensor(n);
}

Tensor scale_rows(const Tensor& x, const std::vector<float>& m) {
  check(x.shape().size() == 2, "scale_rows: need 2-D");
  const int r = x.dim(0), c = x.dim(1);
  check(static_cast<int>(m.size()) == r, "scale_rows: mask size");
  auto n = make_node(x.shape(), {x.node()});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j)
      n->value[i * c + j] = x.data()[i * c + j] * m[i];
  auto mm = std::make_shared<std::vector<float>>(m);
  n->backward_fn = [r, c, mm](Node& out) {
    Node* px = out.parents[0].get();
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j)
        px->grad[i * c + j] += out.grad[i * c + j] * (*mm)[i];
  };
  return Tensor(n);
}

// --------------------------------------------------------------------- image

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int kh,
              int kw, int stride, int pad) {
  check(x.shape().size() == 3, "conv2d: need {C,H,W}");
  const int cin = x.dim(0), h = x.dim(1), wdt = x.dim(2);
  const int cout = w.dim(0);
  check(w.dim(1) == cin * kh * kw, "conv2d: weight shape");
  check(static_cast<int>(b.numel()) == cout, "conv2d: bias shape");
  const int ho = (h + 2 * pad - kh) / stride + 1;
  const int wo = (wdt + 2 * pad - kw) / stride + 1;
  const int np = ho * wo, kk = cin * kh * kw;
  auto col = std::make_shared<std::vector<float>>(
      static_cast<size_t>(np) * kk, 0.0f);
  for (int oy = 0; oy < ho; ++oy)
    for (int ox = 0; ox < wo; ++ox) {
      float* crow = col->data() + static_cast<size_t>(oy * wo + ox) * kk;
      for (int ci = 0; ci < cin; ++ci)
        for (int ky = 0; ky < kh; ++ky)
          for (int kx = 0; kx < kw; ++kx) {
            int iy = oy * stride + ky - pad, ix = ox * stride + kx - pad;
            if (iy >= 0 && iy < h && ix >= 0 && ix < wdt)
              crow[(ci * kh + ky) * kw + kx] =
                  x.data()[(ci * h + iy) * wdt + ix];
          }
    }
  auto n = make_node({cout, ho, wo}, {x.node(), w.node(), b.node()});
  // out[np x cout] = col * w^T, then reorder to {Cout, Ho, Wo}.
  Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> om =
      ConstMatMap(col->data(), np, kk) *
      ConstMatMap(w.data().data(), cout, kk).transpose();
  for (int p = 0; p < np; ++p)
    for (int co = 0; co < cout; ++co)
      n->value[static_cast<size_t>(co) * np + p] = om(p, co) + b.data()[co];
  n->backward_fn = [=](Node& out) {
    Node* px = out.parents[0].get();
    Node* pw = out.parents[1].get();
    Node* pb = out.parents[2].get();
    // regroup grad to [np x cout]
    Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> go(
        np, cout);
    for (int p = 0; p < np; ++p)
      for (int co = 0; co < cout; ++co)
        go(p, co) = out.grad[static_cast<size_t>(co) * np + p];
    if (pb->requires_grad)
      for (int co = 0; co < cout; ++co) pb->grad[co] += go.col(co).sum();
    if (pw->requires_grad)
      MatMap(pw->grad.data(), cout, kk) +=
          go.transpose() * ConstMatMap(col->data(), np, kk);
    if (px->requires_grad) {
      Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>
          dcol = go * ConstMatMap(pw->value.data(), cout, kk);
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) {
          const float* crow = dcol.data() + static_cast<size_t>(oy * wo + ox) * kk;
          for (int ci = 0; ci < cin; ++ci)
            for (int ky = 0; ky < kh; ++ky)
              for (int kx = 0; kx < kw; ++kx) {
                int iy = oy * stride + ky - pad, ix = ox * stride + kx - pad;
                if (iy >= 0 && iy < h && ix >= 0 && ix < wdt)
                  px->grad[(ci * h + iy) * wdt + ix] +=
                      crow[(ci * kh + ky) * kw + kx];
              }
        }
    }
  };
  return Tensor(n);
}

Tensor upsample2(const Tensor& x) {
  check(x.shape().size() == 3, "upsample2: need {C,H,W}");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  auto n = make_node({c, 2 * h, 2 * w}, {x.node()});
  for (int ci = 0; ci < c; ++ci)
    for (int y = 0; y < 2 * h; ++y)
      for (int xx = 0; xx < 2 * w; ++xx)
        n->value[(ci * 2 * h + y) * 2 * w + xx] =
            x.data()[(ci * h + y / 2) * w + xx / 2];
  n->backward_fn = [c, h, w](Node& out) {
    Node* px = out.parents[0].get();
    for (int ci = 0; ci < c; ++ci)
      for (int y = 0; y < 2 * h; ++y)
        for (int xx = 0; xx < 2 * w; ++xx)
          px->grad[(ci * h + y / 2) * w + xx / 2] +=
              out.grad[(ci * 2 * h + y) * 2 * w + xx];
  };
  return Tensor(n);
}

Tensor add_channel_bias(const Tensor& x, const Tensor& b) {
  check(x.shape().size() == 3, "add_channel_bias: need {C,H,W}");
  const int c = x.dim(0);
  const int hw = x.dim(1) * x.dim(2);
  check(static_cast<int>(b.numel()) == c, "add_channel_bias: bias size");
  auto n = make_node(x.shape(), {x.node(), b.node()});
  for (int ci = 0; ci < c; ++ci)
    for (int p = 0; p < hw; ++p)
      n->value[ci * hw + p] = x.data()[ci * hw + p] + b.data()[ci];
  n->backward_fn = [c, hw](Node& out) {
    Node* px = out.parents[0].get();
    Node* pb = out.parents[1].get();
    for (int ci = 0; ci < c; ++ci)
      for (int p = 0; p < hw; ++p) {
        float g = out.grad[ci * hw + p];
        if (px->requires_grad) px->grad[ci * hw + p] += g;
        if (pb->requires_grad) pb->grad[ci] += g;
      }
  };
  return Tensor(n);
}

Tensor chw_to_nc(const Tensor& x) {
  check(x.shape().size() == 3, "chw_to_nc: need {C,H,W}");
  const int c = x.dim(0), hw = x.dim(1) * x.dim(2);
  auto n = make_node({hw, c}, {x.node()});
  for (int ci = 0; ci < c; ++ci)
    for (int p = 0; p < hw; ++p) n->value[p * c + ci] = x.data()[ci * hw + p];
  n->backward_fn = [c, hw](Node& out) {
    Node* px = out.parents[0].get();
    for (int ci = 0; ci < c; ++ci)
      for (int p = 0; p < hw; ++p)
        px->grad[ci * hw + p] += out.grad[p * c + ci];
  };
  return Tensor(n);
}

Tensor nc_to_chw(const Tensor& x, int c, int h, int w) {
  check(x.shape().size() == 2 && x.dim(0) == h * w && x.dim(1) == c,
        "nc_to_chw: shape mismatch");
  auto n = make_node({c, h, w}, {x.node()});
  const int hw = h * w;
  for (int ci = 0; ci < c; ++ci)
    for (int p = 0; p < hw; ++p) n->value[ci * hw + p] = x.data()[p * c + ci];
  n->backward_fn = [c, hw](Node& out) {
    Node* px = out.parents[0].get();
    for (int ci = 0; ci < c; ++ci)
      for (int p = 0; p < hw; ++p)
        px->grad[p * c + ci] += out.grad[ci * hw + p];
  };
  return Tensor(n);
}

}  // namespace weave::nn
