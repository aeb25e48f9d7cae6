#include "ucan/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace ucan::ops {

using detail::Node;

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(t.shape()));
  }
}

// Gradient buffer of input i, or nullptr when that input does not need one.
double* grad_of(Node& self, std::size_t i) {
  auto& in = *self.inputs[i];
  if (!in.requires_grad) return nullptr;
  return in.ensure_grad().data();
}

const double* value_of(Node& self, std::size_t i) { return self.inputs[i]->value.data(); }

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return Tensor::from_op(a.shape(), std::move(out), {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (double* g = grad_of(self, k)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      }
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return Tensor::from_op(a.shape(), std::move(out), {a, b}, [](Node& self) {
    if (double* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (double* g = grad_of(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return Tensor::from_op(a.shape(), std::move(out), {a, b}, [](Node& self) {
    const double* av = value_of(self, 0);
    const double* bv = value_of(self, 1);
    if (double* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bv[i];
    }
    if (double* g = grad_of(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * av[i];
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * factor;
  return Tensor::from_op(a.shape(), std::move(out), {a}, [factor](Node& self) {
    if (double* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * factor;
    }
  });
}

Tensor relu(const Tensor& a) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] > 0.0 ? a[i] : 0.0;
  return Tensor::from_op(a.shape(), std::move(out), {a}, [](Node& self) {
    if (double* g = grad_of(self, 0)) {
      const double* av = value_of(self, 0);
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        if (av[i] > 0.0) g[i] += self.grad[i];
      }
    }
  });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  if (!(lo <= hi)) throw ContractError("clamp: lo must not exceed hi");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(a[i], lo, hi);
  return Tensor::from_op(a.shape(), std::move(out), {a}, [lo, hi](Node& self) {
    if (double* g = grad_of(self, 0)) {
      const double* av = value_of(self, 0);
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        if (av[i] > lo && av[i] < hi) g[i] += self.grad[i];
      }
    }
  });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return Tensor::from_op(Shape{}, {s}, {a}, [](Node& self) {
    if (double* g = grad_of(self, 0)) {
      const std::size_t n = self.inputs[0]->value.size();
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[0];
    }
  });
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw DimensionError("mean of an empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor dot(const Tensor& a, const Tensor& b) {
  if (a.numel() != b.numel()) {
    throw DimensionError("dot: length mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += a[i] * b[i];
  return Tensor::from_op(Shape{}, {s}, {a, b}, [](Node& self) {
    const double* av = value_of(self, 0);
    const double* bv = value_of(self, 1);
    const std::size_t n = self.inputs[0]->value.size();
    const double go = self.grad[0];
    if (double* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < n; ++i) g[i] += go * bv[i];
    }
    if (double* g = grad_of(self, 1)) {
      for (std::size_t i = 0; i < n; ++i) g[i] += go * av[i];
    }
  });
}

Tensor squared_norm(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v * v;
  return Tensor::from_op(Shape{}, {s}, {a}, [](Node& self) {
    if (double* g = grad_of(self, 0)) {
      const double* av = value_of(self, 0);
      const std::size_t n = self.inputs[0]->value.size();
      for (std::size_t i = 0; i < n; ++i) g[i] += 2.0 * av[i] * self.grad[0];
    }
  });
}

Tensor mean_of(std::span<const Tensor> scalars) {
  if (scalars.empty()) throw ContractError("mean_of: empty list");
  double s = 0.0;
  for (const auto& t : scalars) {
    if (t.numel() != 1) throw DimensionError("mean_of: every entry must be a scalar");
    s += t[0];
  }
  const double inv = 1.0 / static_cast<double>(scalars.size());
  std::vector<Tensor> inputs(scalars.begin(), scalars.end());
  return Tensor::from_op(Shape{}, {s * inv}, inputs, [inv](Node& self) {
    for (std::size_t k = 0; k < self.inputs.size(); ++k) {
      if (double* g = grad_of(self, k)) g[0] += inv * self.grad[0];
    }
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions disagree " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += aip * bv[p * n + j];
    }
  }
  return Tensor::from_op(Shape{m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
    const double* av = value_of(self, 0);
    const double* bv = value_of(self, 1);
    const double* go = self.grad.data();
    // dA = G * B^T
    if (double* ga = grad_of(self, 0)) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += go[i * n + j] * bv[p * n + j];
          ga[i * k + p] += s;
        }
      }
    }
    // dB = A^T * G
    if (double* gb = grad_of(self, 1)) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = av[i * k + p];
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * go[i * n + j];
        }
      }
    }
  });
}

Tensor add_bias(const Tensor& x, const Tensor& b) {
  require_rank(b, 1, "add_bias");
  const std::size_t n = b.dim(0);
  if (x.numel() == 0 || x.shape().back() != n) {
    throw DimensionError("add_bias: " + shape_str(x.shape()) + " incompatible with bias " +
                         shape_str(b.shape()));
  }
  const std::size_t rows = x.numel() / n;
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = x[r * n + j] + b[j];
  }
  return Tensor::from_op(x.shape(), std::move(out), {x, b}, [rows, n](Node& self) {
    if (double* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (double* g = grad_of(self, 1)) {
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[r * n + j];
      }
    }
  });
}

Tensor dense(const Tensor& x, const Tensor& w, const Tensor& b) {
  require_rank(w, 2, "dense");
  require_rank(b, 1, "dense");
  const std::size_t out_dim = w.dim(0), in_dim = w.dim(1);
  if (x.numel() != in_dim || b.dim(0) != out_dim) {
    throw DimensionError("dense: input " + shape_str(x.shape()) + ", weight " + shape_str(w.shape()) +
                         ", bias " + shape_str(b.shape()));
  }
  std::vector<double> out(out_dim);
  auto xv = x.data();
  auto wv = w.data();
  for (std::size_t o = 0; o < out_dim; ++o) {
    double s = b[o];
    for (std::size_t i = 0; i < in_dim; ++i) s += wv[o * in_dim + i] * xv[i];
    out[o] = s;
  }
  return Tensor::from_op(Shape{out_dim}, std::move(out), {x, w, b}, [out_dim, in_dim](Node& self) {
    const double* xv = value_of(self, 0);
    const double* wv = value_of(self, 1);
    const double* go = self.grad.data();
    if (double* gx = grad_of(self, 0)) {
      for (std::size_t o = 0; o < out_dim; ++o) {
        for (std::size_t i = 0; i < in_dim; ++i) gx[i] += wv[o * in_dim + i] * go[o];
      }
    }
    if (double* gw = grad_of(self, 1)) {
      for (std::size_t o = 0; o < out_dim; ++o) {
        for (std::size_t i = 0; i < in_dim; ++i) gw[o * in_dim + i] += go[o] * xv[i];
      }
    }
    if (double* gb = grad_of(self, 2)) {
      for (std::size_t o = 0; o < out_dim; ++o) gb[o] += go[o];
    }
  });
}

Tensor conv1x1(const Tensor& z, const Tensor& w, const Tensor& b) {
  require_rank(z, 3, "conv1x1");
  require_rank(w, 2, "conv1x1");
  require_rank(b, 1, "conv1x1");
  const std::size_t c_in = z.dim(0), hw = z.dim(1) * z.dim(2), c_out = w.dim(0);
  if (w.dim(1) != c_in) {
    throw DimensionError("conv1x1: weight expects " + std::to_string(w.dim(1)) + " channels, input has " +
                         std::to_string(c_in));
  }
  if (b.dim(0) != c_out) throw DimensionError("conv1x1: bias length mismatch");
  std::vector<double> out(c_out * hw);
  auto zv = z.data();
  auto wv = w.data();
  for (std::size_t o = 0; o < c_out; ++o) {
    double* row = out.data() + o * hw;
    std::fill(row, row + hw, b[o]);
    for (std::size_t c = 0; c < c_in; ++c) {
      const double wc = wv[o * c_in + c];
      const double* src = zv.data() + c * hw;
      for (std::size_t p = 0; p < hw; ++p) row[p] += wc * src[p];
    }
  }
  Shape shape{c_out, z.dim(1), z.dim(2)};
  return Tensor::from_op(std::move(shape), std::move(out), {z, w, b}, [c_in, c_out, hw](Node& self) {
    const double* zv = value_of(self, 0);
    const double* wv = value_of(self, 1);
    const double* go = self.grad.data();
    double* gz = grad_of(self, 0);
    double* gw = grad_of(self, 1);
    double* gb = grad_of(self, 2);
    for (std::size_t o = 0; o < c_out; ++o) {
      const double* grow = go + o * hw;
      if (gb) {
        double s = 0.0;
        for (std::size_t p = 0; p < hw; ++p) s += grow[p];
        gb[o] += s;
      }
      for (std::size_t c = 0; c < c_in; ++c) {
        if (gw) {
          const double* src = zv + c * hw;
          double s = 0.0;
          for (std::size_t p = 0; p < hw; ++p) s += grow[p] * src[p];
          gw[o * c_in + c] += s;
        }
        if (gz) {
          const double wc = wv[o * c_in + c];
          double* dst = gz + c * hw;
          for (std::size_t p = 0; p < hw; ++p) dst[p] += wc * grow[p];
        }
      }
    }
  });
}

namespace {

// Valid output range along one axis for kernel offset `k` (0..2) with padding 1.
struct Span1D {
  std::size_t begin, end;
};
inline Span1D valid_range(std::size_t k, std::size_t n) {
  // output index y reads input y + k - 1, which must lie in [0, n).
  const std::size_t begin = k == 0 ? 1 : 0;
  const std::size_t end = k == 2 ? n - 1 : n;
  return {begin, end};
}

}  // namespace

Tensor conv3x3(const Tensor& z, const Tensor& w, const Tensor& b) {
  require_rank(z, 3, "conv3x3");
  require_rank(w, 4, "conv3x3");
  require_rank(b, 1, "conv3x3");
  const std::size_t c_in = z.dim(0), h = z.dim(1), wd = z.dim(2), c_out = w.dim(0);
  if (w.dim(1) != c_in || w.dim(2) != 3 || w.dim(3) != 3) {
    throw DimensionError("conv3x3: weight " + shape_str(w.shape()) + " incompatible with input " +
                         shape_str(z.shape()));
  }
  if (b.dim(0) != c_out) throw DimensionError("conv3x3: bias length mismatch");
  if (h < 2 || wd < 2) throw DimensionError("conv3x3: spatial size must be at least 2x2");
  const std::size_t hw = h * wd;
  std::vector<double> out(c_out * hw);
  auto zv = z.data();
  auto wv = w.data();
  for (std::size_t o = 0; o < c_out; ++o) {
    double* dst = out.data() + o * hw;
    std::fill(dst, dst + hw, b[o]);
    for (std::size_t c = 0; c < c_in; ++c) {
      const double* src = zv.data() + c * hw;
      const double* kern = wv.data() + (o * c_in + c) * 9;
      for (std::size_t ky = 0; ky < 3; ++ky) {
        const auto ry = valid_range(ky, h);
        for (std::size_t kx = 0; kx < 3; ++kx) {
          const auto rx = valid_range(kx, wd);
          const double kv = kern[ky * 3 + kx];
          for (std::size_t y = ry.begin; y < ry.end; ++y) {
            double* orow = dst + y * wd;
            const double* irow = src + (y + ky - 1) * wd;
            for (std::size_t x = rx.begin; x < rx.end; ++x) orow[x] += kv * irow[x + kx - 1];
          }
        }
      }
    }
  }
  Shape shape{c_out, h, wd};
  return Tensor::from_op(std::move(shape), std::move(out), {z, w, b}, [c_in, c_out, h, wd](Node& self) {
    const std::size_t hw = h * wd;
    const double* zv = value_of(self, 0);
    const double* wv = value_of(self, 1);
    const double* go = self.grad.data();
    double* gz = grad_of(self, 0);
    double* gw = grad_of(self, 1);
    double* gb = grad_of(self, 2);
    for (std::size_t o = 0; o < c_out; ++o) {
      const double* gout = go + o * hw;
      if (gb) {
        double s = 0.0;
        for (std::size_t p = 0; p < hw; ++p) s += gout[p];
        gb[o] += s;
      }
      for (std::size_t c = 0; c < c_in; ++c) {
        const double* src = zv + c * hw;
        const double* kern = wv + (o * c_in + c) * 9;
        double* gkern = gw ? gw + (o * c_in + c) * 9 : nullptr;
        double* gsrc = gz ? gz + c * hw : nullptr;
        for (std::size_t ky = 0; ky < 3; ++ky) {
          const auto ry = valid_range(ky, h);
          for (std::size_t kx = 0; kx < 3; ++kx) {
            const auto rx = valid_range(kx, wd);
            const double kv = kern[ky * 3 + kx];
            double acc = 0.0;
            for (std::size_t y = ry.begin; y < ry.end; ++y) {
              const double* grow = gout + y * wd;
              const std::size_t off = (y + ky - 1) * wd;
              if (gkern) {
                const double* irow = src + off;
                for (std::size_t x = rx.begin; x < rx.end; ++x) acc += grow[x] * irow[x + kx - 1];
              }
              if (gsrc) {
                double* girow = gsrc + off;
                for (std::size_t x = rx.begin; x < rx.end; ++x) girow[x + kx - 1] += kv * grow[x];
              }
            }
            if (gkern) gkern[ky * 3 + kx] += acc;
          }
        }
      }
    }
  });
}

Tensor avg_pool2(const Tensor& z) {
  require_rank(z, 3, "avg_pool2");
  const std::size_t c = z.dim(0), h = z.dim(1), w = z.dim(2), oh = h / 2, ow = w / 2;
  if (oh == 0 || ow == 0) throw DimensionError("avg_pool2: input smaller than 2x2");
  std::vector<double> out(c * oh * ow);
  auto zv = z.data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x) {
        const double* p = zv.data() + ch * h * w + 2 * y * w + 2 * x;
        out[(ch * oh + y) * ow + x] = 0.25 * (p[0] + p[1] + p[w] + p[w + 1]);
      }
    }
  }
  return Tensor::from_op(Shape{c, oh, ow}, std::move(out), {z}, [c, h, w, oh, ow](Node& self) {
    double* g = grad_of(self, 0);
    if (!g) return;
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t y = 0; y < oh; ++y) {
        for (std::size_t x = 0; x < ow; ++x) {
          const double go = 0.25 * self.grad[(ch * oh + y) * ow + x];
          double* p = g + ch * h * w + 2 * y * w + 2 * x;
          p[0] += go;
          p[1] += go;
          p[w] += go;
          p[w + 1] += go;
        }
      }
    }
  });
}

Tensor max_pool2(const Tensor& z) {
  require_rank(z, 3, "max_pool2");
  const std::size_t c = z.dim(0), h = z.dim(1), w = z.dim(2), oh = h / 2, ow = w / 2;
  if (oh == 0 || ow == 0) throw DimensionError("max_pool2: input smaller than 2x2");
  std::vector<double> out(c * oh * ow);
  std::vector<std::size_t> winner(out.size());
  auto zv = z.data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x) {
        const std::size_t base = ch * h * w + 2 * y * w + 2 * x;
        const std::size_t cand[4] = {base, base + 1, base + w, base + w + 1};
        std::size_t best = cand[0];
        for (auto idx : cand) {
          if (zv[idx] > zv[best]) best = idx;
        }
        const std::size_t o = (ch * oh + y) * ow + x;
        out[o] = zv[best];
        winner[o] = best;
      }
    }
  }
  return Tensor::from_op(Shape{c, oh, ow}, std::move(out), {z},
                         [winner = std::move(winner)](Node& self) {
                           double* g = grad_of(self, 0);
                           if (!g) return;
                           for (std::size_t o = 0; o < winner.size(); ++o) g[winner[o]] += self.grad[o];
                         });
}

Tensor global_avg_pool(const Tensor& z) {
  require_rank(z, 3, "global_avg_pool");
  const std::size_t c = z.dim(0), hw = z.dim(1) * z.dim(2);
  if (hw == 0) throw DimensionError("global_avg_pool: empty spatial extent");
  std::vector<double> out(c);
  auto zv = z.data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    double s = 0.0;
    for (std::size_t p = 0; p < hw; ++p) s += zv[ch * hw + p];
    out[ch] = s / static_cast<double>(hw);
  }
  return Tensor::from_op(Shape{c}, std::move(out), {z}, [c, hw](Node& self) {
    double* g = grad_of(self, 0);
    if (!g) return;
    const double inv = 1.0 / static_cast<double>(hw);
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double go = self.grad[ch] * inv;
      for (std::size_t p = 0; p < hw; ++p) g[ch * hw + p] += go;
    }
  });
}

Tensor l2_normalize(const Tensor& p) {
  require_rank(p, 1, "l2_normalize");
  double sq = 0.0;
  for (double v : p.data()) sq += v * v;
  const double norm = std::sqrt(sq);
  if (!(norm >= kNormEpsilon)) {
    throw DegenerateVectorError("l2_normalize: norm " + std::to_string(norm) + " below guard");
  }
  std::vector<double> out(p.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = p[i] / norm;
  return Tensor::from_op(p.shape(), std::move(out), {p}, [norm](Node& self) {
    double* g = grad_of(self, 0);
    if (!g) return;
    // (I - u u^T) / |p| applied to the upstream gradient.
    const auto& u = self.value;
    double proj = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) proj += u[i] * self.grad[i];
    for (std::size_t i = 0; i < u.size(); ++i) g[i] += (self.grad[i] - proj * u[i]) / norm;
  });
}

Tensor normalize_rows(const Tensor& w) {
  require_rank(w, 2, "normalize_rows");
  const std::size_t rows = w.dim(0), cols = w.dim(1);
  std::vector<double> out(w.numel());
  std::vector<double> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double sq = 0.0;
    for (std::size_t c = 0; c < cols; ++c) sq += w[r * cols + c] * w[r * cols + c];
    norms[r] = std::sqrt(sq);
    if (!(norms[r] >= kNormEpsilon)) {
      throw DegenerateVectorError("normalize_rows: row " + std::to_string(r) + " has vanishing norm");
    }
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = w[r * cols + c] / norms[r];
  }
  return Tensor::from_op(w.shape(), std::move(out), {w}, [rows, cols, norms = std::move(norms)](Node& self) {
    double* g = grad_of(self, 0);
    if (!g) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* u = self.value.data() + r * cols;
      const double* go = self.grad.data() + r * cols;
      double proj = 0.0;
      for (std::size_t c = 0; c < cols; ++c) proj += u[c] * go[c];
      for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += (go[c] - proj * u[c]) / norms[r];
    }
  });
}

std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> p(logits.begin(), logits.end());
  if (p.empty()) return p;
  const double mx = *std::max_element(p.begin(), p.end());
  double z = 0.0;
  for (auto& v : p) {
    v = std::exp(v - mx);
    z += v;
  }
  for (auto& v : p) v /= z;
  return p;
}

std::size_t argmax(std::span<const double> values) {
  if (values.empty()) throw DimensionError("argmax of an empty range");
  return static_cast<std::size_t>(std::max_element(values.begin(), values.end()) - values.begin());
}

Tensor softmax_xent(const Tensor& logits, std::size_t label) {
  require_rank(logits, 1, "softmax_xent");
  const std::size_t n = logits.numel();
  if (label >= n) {
    throw IndexError("softmax_xent: class " + std::to_string(label) + " outside [0, " + std::to_string(n) + ")");
  }
  auto lv = logits.data();
  const double mx = *std::max_element(lv.begin(), lv.end());
  double z = 0.0;
  for (double v : lv) z += std::exp(v - mx);
  const double loss = std::log(z) + mx - lv[label];
  auto probs = softmax(lv);
  return Tensor::from_op(Shape{}, {loss}, {logits}, [label, probs = std::move(probs)](Node& self) {
    double* g = grad_of(self, 0);
    if (!g) return;
    for (std::size_t j = 0; j < probs.size(); ++j) {
      g[j] += self.grad[0] * (probs[j] - (j == label ? 1.0 : 0.0));
    }
  });
}

}  // namespace ucan::ops
