// SPDX-License-Identifier: Apache-2.0
//
// Differentiable primitives. Every op computes its value eagerly; when any
// input is recorded on a tape, the result is recorded on the same tape with
// a closure that propagates adjoints to the recorded inputs.
//
// Reductions and matmul accumulate in a fixed row-major order, so results
// are bit-reproducible on one thread.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "muap/tensor.hpp"

namespace muap {
namespace detail {

inline void check_finite(const char* op, const std::vector<float>& v) {
  for (float x : v) {
    if (!std::isfinite(x)) throw NonFiniteError(std::string("non-finite result in ") + op);
  }
}

inline Tape* common_tape(std::initializer_list<const Tensor*> ins) {
  Tape* tape = nullptr;
  for (const Tensor* t : ins) {
    if (!t->recorded()) continue;
    if (tape != nullptr && tape != t->tape()) throw TapeError("op mixes tensors from two different tapes");
    tape = t->tape();
  }
  return tape;
}

/// Builds the output tensor and, if needed, records it.
inline Tensor finish(const char* op, Shape shape, std::vector<float> values,
                     std::initializer_list<const Tensor*> ins, BackwardFn fn) {
  check_finite(op, values);
  Tensor out(std::move(shape), std::move(values));
  Tape* tape = common_tape(ins);
  if (tape == nullptr) return out;
  return tape->record(std::move(out), std::span<const Tensor* const>(ins.begin(), ins.size()),
                      std::move(fn));
}

[[noreturn]] inline void shape_mismatch(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

/// True when `small` can be tiled over `big`: single element, or equal to a
/// trailing block of big's dimensions.
inline bool suffix_broadcastable(const Shape& big, const Shape& small) {
  if (shape_numel(small) == 1) return true;
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

enum class BinOp { kAdd, kSub, kMul };

inline Tensor binary(const char* name, BinOp op, const Tensor& a, const Tensor& b) {
  const bool a_big = a.shape() == b.shape() || suffix_broadcastable(a.shape(), b.shape());
  const bool b_big = !a_big && suffix_broadcastable(b.shape(), a.shape());
  if (!a_big && !b_big) shape_mismatch(name, a.shape(), b.shape());
  const Shape out_shape = a_big ? a.shape() : b.shape();
  const std::size_t n = shape_numel(out_shape);
  const std::size_t na = a.numel(), nb = b.numel();
  auto ad = a.data();
  auto bd = b.data();
  std::vector<float> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const float x = ad[i % na], y = bd[i % nb];
    out[i] = op == BinOp::kAdd ? x + y : op == BinOp::kSub ? x - y : x * y;
  }
  return finish(name, out_shape, std::move(out), {&a, &b},
                [a, b, op, n, na, nb](std::span<const float> g, std::span<float* const> gi) {
                  auto ad = a.data();
                  auto bd = b.data();
                  if (gi[0]) {
                    for (std::size_t i = 0; i < n; ++i) {
                      gi[0][i % na] += op == BinOp::kMul ? g[i] * bd[i % nb] : g[i];
                    }
                  }
                  if (gi[1]) {
                    for (std::size_t i = 0; i < n; ++i) {
                      const float d = op == BinOp::kAdd ? g[i] : op == BinOp::kSub ? -g[i] : g[i] * ad[i % na];
                      gi[1][i % nb] += d;
                    }
                  }
                });
}

template <class F, class DF>
Tensor unary(const char* name, const Tensor& a, F f, DF df) {
  auto ad = a.data();
  std::vector<float> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(ad[i]);
  // df receives (input, output) so ops like tanh/sigmoid can reuse the output.
  auto out_copy = std::make_shared<std::vector<float>>(out);
  return finish(name, a.shape(), std::move(out), {&a},
                [a, out_copy, df](std::span<const float> g, std::span<float* const> gi) {
                  if (!gi[0]) return;
                  auto ad = a.data();
                  for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i] * df(ad[i], (*out_copy)[i]);
                });
}

/// Splits a shape around `axis` into (outer, axis length, inner).
inline std::array<std::size_t, 3> around(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  return {outer, s[axis], inner};
}

inline void check_labels(const char* op, std::span<const int> labels, std::size_t batch, std::size_t classes) {
  if (labels.size() != batch) {
    throw ShapeError(std::string(op) + ": " + std::to_string(labels.size()) + " labels for batch of " +
                     std::to_string(batch));
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw InvalidArgument(std::string(op) + ": label " + std::to_string(y) + " out of range [0, " +
                            std::to_string(classes) + ")");
    }
  }
}

}  // namespace detail

// Elementwise arithmetic. The smaller operand may be a single element or
// match a trailing block of the larger operand's dimensions (bias rows,
// per-image perturbations over a batch).
inline Tensor add(const Tensor& a, const Tensor& b) { return detail::binary("add", detail::BinOp::kAdd, a, b); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return detail::binary("sub", detail::BinOp::kSub, a, b); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return detail::binary("mul", detail::BinOp::kMul, a, b); }

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

inline Tensor scale(const Tensor& a, float s) {
  return detail::unary("scale", a, [s](float x) { return s * x; }, [s](float, float) { return s; });
}

inline Tensor add_scalar(const Tensor& a, float s) {
  return detail::unary("add_scalar", a, [s](float x) { return x + s; }, [](float, float) { return 1.0f; });
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0f); }

inline Tensor relu(const Tensor& a) {
  return detail::unary("relu", a, [](float x) { return x > 0.0f ? x : 0.0f; },
                       [](float x, float) { return x > 0.0f ? 1.0f : 0.0f; });
}

inline Tensor tanh(const Tensor& a) {
  return detail::unary("tanh", a, [](float x) { return std::tanh(x); },
                       [](float, float y) { return 1.0f - y * y; });
}

inline Tensor sigmoid(const Tensor& a) {
  return detail::unary("sigmoid", a, [](float x) { return 1.0f / (1.0f + std::exp(-x)); },
                       [](float, float y) { return y * (1.0f - y); });
}

/// |x| with subgradient 0 at 0.
inline Tensor abs(const Tensor& a) {
  return detail::unary("abs", a, [](float x) { return std::fabs(x); },
                       [](float x, float) { return x > 0.0f ? 1.0f : (x < 0.0f ? -1.0f : 0.0f); });
}

/// Clamp to [lo, hi]; gradient passes where lo <= x <= hi.
inline Tensor clamp(const Tensor& a, float lo, float hi) {
  return detail::unary("clamp", a, [lo, hi](float x) { return std::clamp(x, lo, hi); },
                       [lo, hi](float x, float) { return (x >= lo && x <= hi) ? 1.0f : 0.0f; });
}

/// Adds a per-channel vector v (C) to x (B, C, ...).
inline Tensor add_channel(const Tensor& x, const Tensor& v) {
  if (x.dim() < 2 || v.dim() != 1 || v.size(0) != x.size(1)) detail::shape_mismatch("add_channel", x.shape(), v.shape());
  const auto [outer, channels, inner] = detail::around(x.shape(), 1);
  std::vector<float> out(x.vec());
  auto vd = v.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t i = 0; i < inner; ++i) out[(o * channels + c) * inner + i] += vd[c];
  return detail::finish("add_channel", x.shape(), std::move(out), {&x, &v},
                        [outer, channels, inner](std::span<const float> g, std::span<float* const> gi) {
                          for (std::size_t o = 0; o < outer; ++o)
                            for (std::size_t c = 0; c < channels; ++c)
                              for (std::size_t i = 0; i < inner; ++i) {
                                const float gv = g[(o * channels + c) * inner + i];
                                if (gi[0]) gi[0][(o * channels + c) * inner + i] += gv;
                                if (gi[1]) gi[1][c] += gv;
                              }
                        });
}

/// (M, K) x (K, N) -> (M, N).
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.dim() != 2 || b.dim() != 2 || a.size(1) != b.size(0)) detail::shape_mismatch("matmul", a.shape(), b.shape());
  const std::size_t m = a.size(0), k = a.size(1), n = b.size(1);
  auto ad = a.data();
  auto bd = b.data();
  std::vector<float> out(m * n, 0.0f);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const float av = ad[i * k + p];
      if (av == 0.0f) continue;
      const float* brow = bd.data() + p * n;
      float* orow = out.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  return detail::finish("matmul", {m, n}, std::move(out), {&a, &b},
                        [a, b, m, k, n](std::span<const float> g, std::span<float* const> gi) {
                          auto ad = a.data();
                          auto bd = b.data();
                          if (gi[0]) {
                            for (std::size_t i = 0; i < m; ++i)
                              for (std::size_t p = 0; p < k; ++p) {
                                float s = 0.0f;
                                for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * bd[p * n + j];
                                gi[0][i * k + p] += s;
                              }
                          }
                          if (gi[1]) {
                            for (std::size_t i = 0; i < m; ++i)
                              for (std::size_t p = 0; p < k; ++p) {
                                const float av = ad[i * k + p];
                                if (av == 0.0f) continue;
                                for (std::size_t j = 0; j < n; ++j) gi[1][p * n + j] += av * g[i * n + j];
                              }
                          }
                        });
}

inline Tensor transpose(const Tensor& a) {
  if (a.dim() != 2) throw ShapeError("transpose expects a matrix, got " + shape_str(a.shape()));
  const std::size_t r = a.size(0), c = a.size(1);
  auto ad = a.data();
  std::vector<float> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = ad[i * c + j];
  return detail::finish("transpose", {c, r}, std::move(out), {&a},
                        [r, c](std::span<const float> g, std::span<float* const> gi) {
                          if (!gi[0]) return;
                          for (std::size_t i = 0; i < r; ++i)
                            for (std::size_t j = 0; j < c; ++j) gi[0][i * c + j] += g[j * r + i];
                        });
}

/// Stride-1 2-D convolution (cross-correlation). x: (B, Cin, H, W),
/// w: (Cout, Cin, KH, KW); `pad` zeros on every border.
inline Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t pad = 0) {
  if (x.dim() != 4 || w.dim() != 4 || x.size(1) != w.size(1)) detail::shape_mismatch("conv2d", x.shape(), w.shape());
  const std::size_t B = x.size(0), Ci = x.size(1), H = x.size(2), W = x.size(3);
  const std::size_t Co = w.size(0), KH = w.size(2), KW = w.size(3);
  if (H + 2 * pad < KH || W + 2 * pad < KW) detail::shape_mismatch("conv2d", x.shape(), w.shape());
  const std::size_t Ho = H + 2 * pad - KH + 1, Wo = W + 2 * pad - KW + 1;
  auto xd = x.data();
  auto wd = w.data();
  std::vector<float> out(B * Co * Ho * Wo, 0.0f);
  const auto ip = static_cast<std::ptrdiff_t>(pad);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t co = 0; co < Co; ++co) {
      float* op = out.data() + (b * Co + co) * Ho * Wo;
      for (std::size_t ci = 0; ci < Ci; ++ci) {
        const float* xp = xd.data() + (b * Ci + ci) * H * W;
        const float* wp = wd.data() + (co * Ci + ci) * KH * KW;
        for (std::size_t ky = 0; ky < KH; ++ky)
          for (std::size_t kx = 0; kx < KW; ++kx) {
            const float wv = wp[ky * KW + kx];
            for (std::size_t oy = 0; oy < Ho; ++oy) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + ky) - ip;
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
              const std::ptrdiff_t x0 = static_cast<std::ptrdiff_t>(kx) - ip;
              const std::size_t ox_lo = x0 < 0 ? static_cast<std::size_t>(-x0) : 0;
              const std::size_t ox_hi = std::min<std::ptrdiff_t>(Wo, static_cast<std::ptrdiff_t>(W) - x0);
              const std::ptrdiff_t base = iy * static_cast<std::ptrdiff_t>(W) + x0;
              float* orow = op + oy * Wo;
              for (std::size_t ox = ox_lo; ox < ox_hi; ++ox) orow[ox] += wv * xp[base + static_cast<std::ptrdiff_t>(ox)];
            }
          }
      }
    }
  return detail::finish(
      "conv2d", {B, Co, Ho, Wo}, std::move(out), {&x, &w},
      [x, w, B, Ci, H, W, Co, KH, KW, Ho, Wo, ip](std::span<const float> g, std::span<float* const> gi) {
        auto xd = x.data();
        auto wd = w.data();
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t co = 0; co < Co; ++co) {
            const float* gp = g.data() + (b * Co + co) * Ho * Wo;
            for (std::size_t ci = 0; ci < Ci; ++ci) {
              const float* xp = xd.data() + (b * Ci + ci) * H * W;
              const float* wp = wd.data() + (co * Ci + ci) * KH * KW;
              float* gx = gi[0] ? gi[0] + (b * Ci + ci) * H * W : nullptr;
              float* gw = gi[1] ? gi[1] + (co * Ci + ci) * KH * KW : nullptr;
              for (std::size_t ky = 0; ky < KH; ++ky)
                for (std::size_t kx = 0; kx < KW; ++kx) {
                  const float wv = wp[ky * KW + kx];
                  float acc = 0.0f;
                  for (std::size_t oy = 0; oy < Ho; ++oy) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + ky) - ip;
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                    const std::ptrdiff_t x0 = static_cast<std::ptrdiff_t>(kx) - ip;
                    const std::size_t ox_lo = x0 < 0 ? static_cast<std::size_t>(-x0) : 0;
                    const std::size_t ox_hi = std::min<std::ptrdiff_t>(Wo, static_cast<std::ptrdiff_t>(W) - x0);
                    const std::ptrdiff_t base = iy * static_cast<std::ptrdiff_t>(W) + x0;
                    const float* grow = gp + oy * Wo;
                    for (std::size_t ox = ox_lo; ox < ox_hi; ++ox) {
                      acc += grow[ox] * xp[base + static_cast<std::ptrdiff_t>(ox)];
                      if (gx) gx[base + static_cast<std::ptrdiff_t>(ox)] += grow[ox] * wv;
                    }
                  }
                  if (gw) gw[ky * KW + kx] += acc;
                }
            }
          }
      });
}

/// 2x2 max pooling with stride 2 over (B, C, H, W); odd trailing rows and
/// columns are dropped.
inline Tensor maxpool2(const Tensor& x) {
  if (x.dim() != 4 || x.size(2) < 2 || x.size(3) < 2) throw ShapeError("maxpool2 expects (B,C,H>=2,W>=2), got " + shape_str(x.shape()));
  const std::size_t B = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
  const std::size_t Ho = H / 2, Wo = W / 2;
  auto xd = x.data();
  std::vector<float> out(B * C * Ho * Wo);
  auto arg = std::make_shared<std::vector<std::size_t>>(out.size());
  for (std::size_t bc = 0; bc < B * C; ++bc)
    for (std::size_t oy = 0; oy < Ho; ++oy)
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        std::size_t best = bc * H * W + (2 * oy) * W + 2 * ox;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = bc * H * W + (2 * oy + dy) * W + 2 * ox + dx;
            if (xd[idx] > xd[best]) best = idx;
          }
        const std::size_t o = (bc * Ho + oy) * Wo + ox;
        out[o] = xd[best];
        (*arg)[o] = best;
      }
  return detail::finish("maxpool2", {B, C, Ho, Wo}, std::move(out), {&x},
                        [arg](std::span<const float> g, std::span<float* const> gi) {
                          if (!gi[0]) return;
                          for (std::size_t o = 0; o < g.size(); ++o) gi[0][(*arg)[o]] += g[o];
                        });
}

/// Per-example softmax cross-entropy of logits (B, C) against labels.
inline Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  if (logits.dim() != 2) throw ShapeError("softmax_cross_entropy expects (B,C), got " + shape_str(logits.shape()));
  const std::size_t B = logits.size(0), C = logits.size(1);
  detail::check_labels("softmax_cross_entropy", labels, B, C);
  auto ld = logits.data();
  auto probs = std::make_shared<std::vector<float>>(B * C);
  std::vector<float> out(B);
  for (std::size_t b = 0; b < B; ++b) {
    const float* row = ld.data() + b * C;
    const float mx = *std::max_element(row, row + C);
    double z = 0.0;
    for (std::size_t c = 0; c < C; ++c) z += std::exp(static_cast<double>(row[c] - mx));
    for (std::size_t c = 0; c < C; ++c) (*probs)[b * C + c] = static_cast<float>(std::exp(static_cast<double>(row[c] - mx)) / z);
    out[b] = static_cast<float>(std::log(z) + mx - row[labels[b]]);
  }
  std::vector<int> ys(labels.begin(), labels.end());
  return detail::finish("softmax_cross_entropy", {B}, std::move(out), {&logits},
                        [probs, ys, B, C](std::span<const float> g, std::span<float* const> gi) {
                          if (!gi[0]) return;
                          for (std::size_t b = 0; b < B; ++b)
                            for (std::size_t c = 0; c < C; ++c) {
                              const float onehot = static_cast<int>(c) == ys[b] ? 1.0f : 0.0f;
                              gi[0][b * C + c] += g[b] * ((*probs)[b * C + c] - onehot);
                            }
                        });
}

/// Per-example classification margin z_y - max_{c != y} z_c of logits (B, C).
/// Ties among the competing classes resolve to the lowest index.
inline Tensor class_margin(const Tensor& logits, std::span<const int> labels) {
  if (logits.dim() != 2 || logits.size(1) < 2) throw ShapeError("class_margin expects (B,C>=2), got " + shape_str(logits.shape()));
  const std::size_t B = logits.size(0), C = logits.size(1);
  detail::check_labels("class_margin", labels, B, C);
  auto ld = logits.data();
  std::vector<float> out(B);
  std::vector<std::size_t> rival(B);
  std::vector<int> ys(labels.begin(), labels.end());
  for (std::size_t b = 0; b < B; ++b) {
    std::size_t best = ys[b] == 0 ? 1 : 0;
    for (std::size_t c = 0; c < C; ++c) {
      if (static_cast<int>(c) == ys[b]) continue;
      if (ld[b * C + c] > ld[b * C + best]) best = c;
    }
    rival[b] = best;
    out[b] = ld[b * C + static_cast<std::size_t>(ys[b])] - ld[b * C + best];
  }
  return detail::finish("class_margin", {B}, std::move(out), {&logits},
                        [ys, rival, C](std::span<const float> g, std::span<float* const> gi) {
                          if (!gi[0]) return;
                          for (std::size_t b = 0; b < g.size(); ++b) {
                            gi[0][b * C + static_cast<std::size_t>(ys[b])] += g[b];
                            gi[0][b * C + rival[b]] -= g[b];
                          }
                        });
}

/// Sum of all elements -> scalar.
inline Tensor sum(const Tensor& a) {
  float s = 0.0f;
  for (float v : a.data()) s += v;
  const std::size_t n = a.numel();
  return detail::finish("sum", {}, {s}, {&a}, [n](std::span<const float> g, std::span<float* const> gi) {
    if (!gi[0]) return;
    for (std::size_t i = 0; i < n; ++i) gi[0][i] += g[0];
  });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0f / static_cast<float>(a.numel())); }

inline Shape drop_axis(const Shape& s, std::size_t axis) {
  Shape out;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i != axis) out.push_back(s[i]);
  return out;
}

/// Sum over one axis, removing it.
inline Tensor sum(const Tensor& a, std::size_t axis) {
  const auto [outer, len, inner] = detail::around(a.shape(), axis);
  auto ad = a.data();
  std::vector<float> out(outer * inner, 0.0f);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t l = 0; l < len; ++l)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += ad[(o * len + l) * inner + i];
  return detail::finish("sum_axis", drop_axis(a.shape(), axis), std::move(out), {&a},
                        [outer, len, inner](std::span<const float> g, std::span<float* const> gi) {
                          if (!gi[0]) return;
                          for (std::size_t o = 0; o < outer; ++o)
                            for (std::size_t l = 0; l < len; ++l)
                              for (std::size_t i = 0; i < inner; ++i) gi[0][(o * len + l) * inner + i] += g[o * inner + i];
                        });
}

inline Tensor mean(const Tensor& a, std::size_t axis) {
  return scale(sum(a, axis), 1.0f / static_cast<float>(a.shape().at(axis)));
}

/// Max over one axis, removing it; the gradient goes to the first maximum.
inline Tensor max(const Tensor& a, std::size_t axis) {
  const auto [outer, len, inner] = detail::around(a.shape(), axis);
  auto ad = a.data();
  std::vector<float> out(outer * inner);
  auto arg = std::make_shared<std::vector<std::size_t>>(outer * inner);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      std::size_t best = o * len * inner + i;
      for (std::size_t l = 1; l < len; ++l) {
        const std::size_t idx = (o * len + l) * inner + i;
        if (ad[idx] > ad[best]) best = idx;
      }
      out[o * inner + i] = ad[best];
      (*arg)[o * inner + i] = best;
    }
  return detail::finish("max_axis", drop_axis(a.shape(), axis), std::move(out), {&a},
                        [arg](std::span<const float> g, std::span<float* const> gi) {
                          if (!gi[0]) return;
                          for (std::size_t j = 0; j < g.size(); ++j) gi[0][(*arg)[j]] += g[j];
                        });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) detail::shape_mismatch("reshape", a.shape(), shape);
  return detail::finish("reshape", std::move(shape), a.vec(), {&a},
                        [](std::span<const float> g, std::span<float* const> gi) {
                          if (!gi[0]) return;
                          for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i];
                        });
}

/// Elements [start, start + length) along `axis`.
inline Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length) {
  const auto [outer, len, inner] = detail::around(a.shape(), axis);
  if (length == 0 || start + length > len) {
    throw ShapeError("slice [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") out of range for axis of length " + std::to_string(len));
  }
  Shape s = a.shape();
  s[axis] = length;
  auto ad = a.data();
  std::vector<float> out;
  out.reserve(outer * length * inner);
  for (std::size_t o = 0; o < outer; ++o) {
    const float* p = ad.data() + (o * len + start) * inner;
    out.insert(out.end(), p, p + length * inner);
  }
  return detail::finish("slice", std::move(s), std::move(out), {&a},
                        [outer, len, inner, start, length](std::span<const float> g, std::span<float* const> gi) {
                          if (!gi[0]) return;
                          for (std::size_t o = 0; o < outer; ++o)
                            for (std::size_t j = 0; j < length * inner; ++j)
                              gi[0][(o * len + start) * inner + j] += g[o * length * inner + j];
                        });
}

/// Concatenates along `axis`; all other dimensions must agree.
inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  Shape s = parts[0].shape();
  if (axis >= s.size()) throw ShapeError("concat axis out of range for " + shape_str(s));
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    Shape q = p.shape();
    if (q.size() != s.size()) detail::shape_mismatch("concat", s, q);
    q[axis] = s[axis];
    if (q != s) detail::shape_mismatch("concat", parts[0].shape(), p.shape());
    total += p.size(axis);
  }
  const auto [outer, len0, inner] = detail::around(s, axis);
  (void)len0;
  s[axis] = total;
  std::vector<float> out(shape_numel(s));
  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  for (const Tensor& p : parts) {
    const std::size_t pl = p.size(axis);
    auto pd = p.data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(pd.data() + o * pl * inner, pl * inner, out.data() + (o * total + offset) * inner);
    offsets.push_back(offset);
    offset += pl;
  }
  std::vector<std::size_t> lens;
  for (const Tensor& p : parts) lens.push_back(p.size(axis));
  BackwardFn fn = [offsets, lens, outer, inner, total](std::span<const float> g, std::span<float* const> gi) {
    for (std::size_t k = 0; k < gi.size(); ++k) {
      if (!gi[k]) continue;
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t j = 0; j < lens[k] * inner; ++j)
          gi[k][o * lens[k] * inner + j] += g[(o * total + offsets[k]) * inner + j];
    }
  };
  detail::check_finite("concat", out);
  Tensor result(std::move(s), std::move(out));
  Tape* tape = nullptr;
  std::vector<const Tensor*> ins;
  for (const Tensor& p : parts) {
    ins.push_back(&p);
    if (p.recorded()) {
      if (tape != nullptr && tape != p.tape()) throw TapeError("op mixes tensors from two different tapes");
      tape = p.tape();
    }
  }
  if (tape == nullptr) return result;
  return tape->record(std::move(result), ins, std::move(fn));
}

}  // namespace muap
