#pragma once

// Reverse-mode autodiff over dense row-major f64 tensors.
//
// A Tape records primitive applications in execution order; insertion order is
// the topological order, and backward() walks it strictly in reverse. Tensors
// are plain values (shape + flat buffer); a tensor produced while the tape is
// recording carries the index of its tape node, constants carry -1. Gradients
// accumulate into flat per-node buffers, so metadata-only reshapes are sound.
//
// Shape rules, per primitive:
//   add/sub/mul   same shape, or b of shape (m) / (1,m) broadcast over the rows
//                 of a (n,m)
//   matmul        (n,k) x (k,m) -> (n,m)
//   concat_seq    (n1,d) ++ (n2,d) -> (n1+n2,d) along the sequence axis; either
//                 operand may have zero rows
//   slice         rows [begin,end) of a 2-D tensor, or elements of a 1-D one
//   transpose     (n,m) -> (m,n)
//   embed_lookup  ids + table (V,d) -> (len(ids), d)
//   softmax_masked rowwise softmax of (n,k) + additive mask (0 or -1e9); the
//                 mask is data, not a differentiable input
//   rmsnorm       (n,d) with gain (d); y = x * gain / sqrt(mean_row(x^2) + eps)
//   silu          elementwise x * sigmoid(x)
//   scale         elementwise multiply by a compile-time-known constant
//   mean/mse      full reduction to a (1,) scalar
//   cross_entropy logits (n,k) or (k,) + integer labels -> mean NLL scalar
//   stop_gradient identity forward, zero gradient through the edge

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "vlalab/errors.hpp"

namespace vlalab {

using Shape = std::vector<int>;

// Additive mask value for blocked attention entries. A finite surrogate for
// -inf keeps exp() at exactly +0 without NaN risk.
inline constexpr double kMaskBlocked = -1e9;

inline std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + ")";
}

struct Tensor {
    Shape shape;
    std::vector<double> values;
    int node = -1; // index into the active tape; -1 = constant

    Tensor() = default;
    Tensor(Shape s, std::vector<double> v) : shape(std::move(s)), values(std::move(v)) {}

    static std::int64_t numel_of(const Shape& s) {
        std::int64_t n = 1;
        for (int d : s) n *= d;
        return n;
    }

    std::int64_t numel() const { return numel_of(shape); }
    int rank() const { return static_cast<int>(shape.size()); }
    int rows() const { return rank() == 2 ? shape[0] : (rank() == 1 ? shape[0] : 1); }
    int cols() const { return rank() == 2 ? shape[1] : 1; }

    bool is_scalar() const { return numel() == 1; }
    double scalar() const {
        if (!is_scalar()) throw ShapeError("scalar() on tensor of shape " + shape_str(shape));
        return values[0];
    }

    double& at(int i, int j) { return values[static_cast<std::size_t>(i) * shape[1] + j]; }
    double at(int i, int j) const { return values[static_cast<std::size_t>(i) * shape[1] + j]; }

    static Tensor zeros(Shape s) {
        auto n = numel_of(s);
        return Tensor(std::move(s), std::vector<double>(static_cast<std::size_t>(n), 0.0));
    }

    static Tensor full(Shape s, double v) {
        auto n = numel_of(s);
        return Tensor(std::move(s), std::vector<double>(static_cast<std::size_t>(n), v));
    }

    static Tensor row(std::vector<double> v) {
        int n = static_cast<int>(v.size());
        return Tensor({1, n}, std::move(v));
    }

    static Tensor vec(std::vector<double> v) {
        int n = static_cast<int>(v.size());
        return Tensor({n}, std::move(v));
    }
};

// Metadata-only reshape: same buffer, same tape node. Valid because gradient
// buffers are flat and keyed by node, not by shape.
inline Tensor reshape(const Tensor& t, Shape s) {
    if (Tensor::numel_of(s) != t.numel())
        throw ShapeError("reshape: " + shape_str(t.shape) + " to incompatible " + shape_str(s));
    Tensor out = t;
    out.shape = std::move(s);
    return out;
}

enum class OpKind : std::uint8_t {
    leaf,
    add,
    sub,
    mul,
    matmul,
    concat_seq,
    slice,
    transpose,
    embed_lookup,
    softmax_masked,
    rmsnorm,
    silu,
    scale,
    mean,
    mse,
    cross_entropy,
    stop_gradient,
};

namespace detail {

// C(n,m) += A(n,k) * B(k,m). ikj order so the inner loop streams both C and B.
inline void gemm_nn_acc(const double* __restrict a, const double* __restrict b,
                        double* __restrict c, int n, int k, int m) {
    for (int i = 0; i < n; ++i) {
        const double* arow = a + static_cast<std::size_t>(i) * k;
        double* crow = c + static_cast<std::size_t>(i) * m;
        for (int l = 0; l < k; ++l) {
            const double av = arow[l];
            const double* brow = b + static_cast<std::size_t>(l) * m;
            for (int j = 0; j < m; ++j) crow[j] += av * brow[j];
        }
    }
}

// C(n,m) += A(n,k) * B(m,k)^T, i.e. dot products of contiguous rows.
inline void gemm_nt_acc(const double* __restrict a, const double* __restrict b,
                        double* __restrict c, int n, int k, int m) {
    for (int i = 0; i < n; ++i) {
        const double* arow = a + static_cast<std::size_t>(i) * k;
        double* crow = c + static_cast<std::size_t>(i) * m;
        for (int j = 0; j < m; ++j) {
            const double* brow = b + static_cast<std::size_t>(j) * k;
            double acc = 0.0;
            for (int l = 0; l < k; ++l) acc += arow[l] * brow[l];
            crow[j] += acc;
        }
    }
}

// C(k,m) += A(n,k)^T * B(n,m).
inline void gemm_tn_acc(const double* __restrict a, const double* __restrict b,
                        double* __restrict c, int n, int k, int m) {
    for (int i = 0; i < n; ++i) {
        const double* arow = a + static_cast<std::size_t>(i) * k;
        const double* brow = b + static_cast<std::size_t>(i) * m;
        for (int l = 0; l < k; ++l) {
            const double av = arow[l];
            double* crow = c + static_cast<std::size_t>(l) * m;
            for (int j = 0; j < m; ++j) crow[j] += av * brow[j];
        }
    }
}

} // namespace detail

class Tape {
public:
    explicit Tape(bool recording = true) : recording_(recording) {}

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool recording() const { return recording_; }
    std::size_t size() const { return nodes_.size(); }
    OpKind kind_of(int node) const { return nodes_[static_cast<std::size_t>(node)].kind; }

    // Registers an existing buffer as a leaf; gradients accumulate under the
    // returned node id. Used to bind trainable parameters for one step.
    int make_leaf(std::int64_t numel) {
        if (!recording_) return -1;
        nodes_.push_back(Node{OpKind::leaf, numel, {}});
        return static_cast<int>(nodes_.size()) - 1;
    }

    Tensor leaf(const Tensor& t) {
        Tensor out = t;
        out.node = make_leaf(t.numel());
        return out;
    }

    // ---- elementwise with row broadcast on b ------------------------------

    Tensor add(const Tensor& a, const Tensor& b) { return ew_binary(OpKind::add, a, b); }
    Tensor sub(const Tensor& a, const Tensor& b) { return ew_binary(OpKind::sub, a, b); }
    Tensor mul(const Tensor& a, const Tensor& b) { return ew_binary(OpKind::mul, a, b); }

    Tensor matmul(const Tensor& a, const Tensor& b) {
        if (a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0])
            throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape) + " x " +
                             shape_str(b.shape));
        const int n = a.shape[0], k = a.shape[1], m = b.shape[1];
        Tensor out = Tensor::zeros({n, m});
        detail::gemm_nn_acc(a.values.data(), b.values.data(), out.values.data(), n, k, m);
        if (!recording_) return out;
        auto av = a.values;
        auto bv = b.values;
        out.node = record(OpKind::matmul, out.numel(), {a.node, b.node},
                          [n, k, m, av = std::move(av), bv = std::move(bv), pa = a.node,
                           pb = b.node](Tape& t, const double* g) {
                              if (pa >= 0)
                                  detail::gemm_nt_acc(g, bv.data(),
                                                      t.grad_buf(pa, std::int64_t(n) * k), n, m, k);
                              if (pb >= 0)
                                  detail::gemm_tn_acc(av.data(), g,
                                                      t.grad_buf(pb, std::int64_t(k) * m), n, k, m);
                          });
        return out;
    }

    Tensor concat_seq(const Tensor& a, const Tensor& b) {
        if (a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[1])
            throw ShapeError("concat_seq: incompatible shapes " + shape_str(a.shape) + " ++ " +
                             shape_str(b.shape));
        const int n1 = a.shape[0], n2 = b.shape[0], d = a.shape[1];
        Tensor out = Tensor::zeros({n1 + n2, d});
        std::copy(a.values.begin(), a.values.end(), out.values.begin());
        std::copy(b.values.begin(), b.values.end(), out.values.begin() + a.values.size());
        if (!recording_) return out;
        const std::size_t na = a.values.size();
        out.node = record(OpKind::concat_seq, out.numel(), {a.node, b.node},
                          [na, n1, n2, d, pa = a.node, pb = b.node](Tape& t, const double* g) {
                              if (pa >= 0) {
                                  double* ga = t.grad_buf(pa, std::int64_t(n1) * d);
                                  for (std::size_t i = 0; i < na; ++i) ga[i] += g[i];
                              }
                              if (pb >= 0) {
                                  double* gb = t.grad_buf(pb, std::int64_t(n2) * d);
                                  const std::size_t nb = std::size_t(n2) * d;
                                  for (std::size_t i = 0; i < nb; ++i) gb[i] += g[na + i];
                              }
                          });
        return out;
    }

    // Rows [begin,end) of a 2-D tensor, or elements [begin,end) of a 1-D one.
    Tensor slice(const Tensor& a, int begin, int end) {
        if (a.rank() != 1 && a.rank() != 2)
            throw ShapeError("slice: rank must be 1 or 2, got " + shape_str(a.shape));
        const int n = a.shape[0];
        if (begin < 0 || end < begin || end > n)
            throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                             ") out of bounds for " + shape_str(a.shape));
        const int d = a.rank() == 2 ? a.shape[1] : 1;
        Shape oshape = a.rank() == 2 ? Shape{end - begin, d} : Shape{end - begin};
        Tensor out = Tensor::zeros(oshape);
        std::copy(a.values.begin() + std::size_t(begin) * d, a.values.begin() + std::size_t(end) * d,
                  out.values.begin());
        if (!recording_) return out;
        out.node = record(OpKind::slice, out.numel(), {a.node},
                          [begin, end, d, total = a.numel(), pa = a.node](Tape& t, const double* g) {
                              if (pa < 0) return;
                              double* ga = t.grad_buf(pa, total);
                              const std::size_t cnt = std::size_t(end - begin) * d;
                              for (std::size_t i = 0; i < cnt; ++i)
                                  ga[std::size_t(begin) * d + i] += g[i];
                          });
        return out;
    }

    Tensor transpose(const Tensor& a) {
        if (a.rank() != 2) throw ShapeError("transpose: rank-2 required, got " + shape_str(a.shape));
        const int n = a.shape[0], m = a.shape[1];
        Tensor out = Tensor::zeros({m, n});
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < m; ++j) out.values[std::size_t(j) * n + i] = a.at(i, j);
        if (!recording_) return out;
        out.node = record(OpKind::transpose, out.numel(), {a.node},
                          [n, m, pa = a.node](Tape& t, const double* g) {
                              if (pa < 0) return;
                              double* ga = t.grad_buf(pa, std::int64_t(n) * m);
                              for (int j = 0; j < m; ++j)
                                  for (int i = 0; i < n; ++i)
                                      ga[std::size_t(i) * m + j] += g[std::size_t(j) * n + i];
                          });
        return out;
    }

    Tensor embed_lookup(const std::vector<int>& ids, const Tensor& table) {
        if (table.rank() != 2)
            throw ShapeError("embed_lookup: table must be rank-2, got " + shape_str(table.shape));
        const int vocab = table.shape[0], d = table.shape[1];
        for (int id : ids)
            if (id < 0 || id >= vocab)
                throw ShapeError("embed_lookup: id " + std::to_string(id) + " out of range [0," +
                                 std::to_string(vocab) + ")");
        const int n = static_cast<int>(ids.size());
        Tensor out = Tensor::zeros({n, d});
        for (int i = 0; i < n; ++i)
            std::copy(table.values.begin() + std::size_t(ids[i]) * d,
                      table.values.begin() + std::size_t(ids[i] + 1) * d,
                      out.values.begin() + std::size_t(i) * d);
        if (!recording_) return out;
        out.node = record(OpKind::embed_lookup, out.numel(), {table.node},
                          [ids, d, total = table.numel(), pt = table.node](Tape& t, const double* g) {
                              if (pt < 0) return;
                              double* gt = t.grad_buf(pt, total);
                              for (std::size_t i = 0; i < ids.size(); ++i)
                                  for (int j = 0; j < d; ++j)
                                      gt[std::size_t(ids[i]) * d + j] += g[i * d + j];
                          });
        return out;
    }

    // Rowwise softmax of logits + mask. Mask entries must be 0 (visible) or
    // kMaskBlocked; blocked entries get exactly zero weight. The mask is a
    // constant: no gradient flows into it.
    Tensor softmax_masked(const Tensor& x, const Tensor& mask) {
        if (x.rank() != 2 || mask.shape != x.shape)
            throw ShapeError("softmax_masked: logits " + shape_str(x.shape) + " vs mask " +
                             shape_str(mask.shape));
        const int n = x.shape[0], k = x.shape[1];
        Tensor out = Tensor::zeros({n, k});
        for (int i = 0; i < n; ++i) {
            double mx = -std::numeric_limits<double>::infinity();
            bool any_visible = false;
            for (int j = 0; j < k; ++j) {
                if (mask.at(i, j) != kMaskBlocked) {
                    any_visible = true;
                    mx = std::max(mx, x.at(i, j));
                }
            }
            if (!any_visible)
                throw ShapeError("softmax_masked: fully blocked query row " + std::to_string(i));
            double sum = 0.0;
            for (int j = 0; j < k; ++j) {
                double e = mask.at(i, j) == kMaskBlocked ? 0.0 : std::exp(x.at(i, j) - mx);
                out.at(i, j) = e;
                sum += e;
            }
            const double inv = 1.0 / sum;
            for (int j = 0; j < k; ++j) out.at(i, j) *= inv;
        }
        if (!recording_) return out;
        auto yv = out.values;
        out.node = record(OpKind::softmax_masked, out.numel(), {x.node},
                          [n, k, yv = std::move(yv), px = x.node](Tape& t, const double* g) {
                              if (px < 0) return;
                              double* gx = t.grad_buf(px, std::int64_t(n) * k);
                              for (int i = 0; i < n; ++i) {
                                  const double* yrow = yv.data() + std::size_t(i) * k;
                                  const double* grow = g + std::size_t(i) * k;
                                  double dot = 0.0;
                                  for (int j = 0; j < k; ++j) dot += yrow[j] * grow[j];
                                  double* gxrow = gx + std::size_t(i) * k;
                                  for (int j = 0; j < k; ++j) gxrow[j] += yrow[j] * (grow[j] - dot);
                              }
                          });
        return out;
    }

    Tensor rmsnorm(const Tensor& x, const Tensor& gain, double eps = 1e-6) {
        if (x.rank() != 2 || gain.numel() != x.shape[1])
            throw ShapeError("rmsnorm: input " + shape_str(x.shape) + " vs gain " +
                             shape_str(gain.shape));
        const int n = x.shape[0], d = x.shape[1];
        Tensor out = Tensor::zeros({n, d});
        std::vector<double> inv_rms(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) {
            double ss = 0.0;
            for (int j = 0; j < d; ++j) ss += x.at(i, j) * x.at(i, j);
            inv_rms[static_cast<std::size_t>(i)] = 1.0 / std::sqrt(ss / d + eps);
            for (int j = 0; j < d; ++j)
                out.at(i, j) = x.at(i, j) * inv_rms[static_cast<std::size_t>(i)] * gain.values[j];
        }
        if (!recording_) return out;
        auto xv = x.values;
        auto gv = gain.values;
        out.node = record(
            OpKind::rmsnorm, out.numel(), {x.node, gain.node},
            [n, d, xv = std::move(xv), gv = std::move(gv), ir = std::move(inv_rms), px = x.node,
             pg = gain.node](Tape& t, const double* g) {
                double* gx = px >= 0 ? t.grad_buf(px, std::int64_t(n) * d) : nullptr;
                double* gg = pg >= 0 ? t.grad_buf(pg, d) : nullptr;
                for (int i = 0; i < n; ++i) {
                    const double* xr = xv.data() + std::size_t(i) * d;
                    const double* gr = g + std::size_t(i) * d;
                    const double r = ir[static_cast<std::size_t>(i)];
                    if (gx) {
                        // y = x*gain*r with r = (mean(x^2)+eps)^-1/2:
                        // dx = gain*r*dy - x * r^3/d * sum(dy*gain*x)
                        double dot = 0.0;
                        for (int j = 0; j < d; ++j) dot += gr[j] * gv[j] * xr[j];
                        const double c = dot * r * r * r / d;
                        double* gxr = gx + std::size_t(i) * d;
                        for (int j = 0; j < d; ++j) gxr[j] += gr[j] * gv[j] * r - xr[j] * c;
                    }
                    if (gg)
                        for (int j = 0; j < d; ++j) gg[j] += gr[j] * xr[j] * r;
                }
            });
        return out;
    }

    Tensor silu(const Tensor& x) {
        Tensor out = Tensor::zeros(x.shape);
        for (std::size_t i = 0; i < x.values.size(); ++i) {
            double v = x.values[i];
            out.values[i] = v / (1.0 + std::exp(-v));
        }
        if (!recording_) return out;
        auto xv = x.values;
        out.node = record(OpKind::silu, out.numel(), {x.node},
                          [xv = std::move(xv), px = x.node](Tape& t, const double* g) {
                              if (px < 0) return;
                              double* gx = t.grad_buf(px, static_cast<std::int64_t>(xv.size()));
                              for (std::size_t i = 0; i < xv.size(); ++i) {
                                  const double s = 1.0 / (1.0 + std::exp(-xv[i]));
                                  gx[i] += g[i] * s * (1.0 + xv[i] * (1.0 - s));
                              }
                          });
        return out;
    }

    Tensor scale(const Tensor& x, double c) {
        Tensor out = x;
        out.node = -1;
        for (auto& v : out.values) v *= c;
        if (!recording_) return out;
        out.node = record(OpKind::scale, out.numel(), {x.node},
                          [c, n = x.numel(), px = x.node](Tape& t, const double* g) {
                              if (px < 0) return;
                              double* gx = t.grad_buf(px, n);
                              for (std::int64_t i = 0; i < n; ++i) gx[i] += g[i] * c;
                          });
        return out;
    }

    Tensor mean(const Tensor& x) {
        if (x.numel() == 0) throw ShapeError("mean: empty tensor");
        double s = std::accumulate(x.values.begin(), x.values.end(), 0.0);
        Tensor out({1}, {s / static_cast<double>(x.numel())});
        if (!recording_) return out;
        out.node = record(OpKind::mean, 1, {x.node},
                          [n = x.numel(), px = x.node](Tape& t, const double* g) {
                              if (px < 0) return;
                              double* gx = t.grad_buf(px, n);
                              const double c = g[0] / static_cast<double>(n);
                              for (std::int64_t i = 0; i < n; ++i) gx[i] += c;
                          });
        return out;
    }

    Tensor mse(const Tensor& a, const Tensor& b) {
        if (a.shape != b.shape)
            throw ShapeError("mse: shape mismatch " + shape_str(a.shape) + " vs " +
                             shape_str(b.shape));
        if (a.numel() == 0) throw ShapeError("mse: empty tensor");
        double s = 0.0;
        for (std::size_t i = 0; i < a.values.size(); ++i) {
            const double d = a.values[i] - b.values[i];
            s += d * d;
        }
        Tensor out({1}, {s / static_cast<double>(a.numel())});
        if (!recording_) return out;
        auto av = a.values;
        auto bv = b.values;
        out.node = record(OpKind::mse, 1, {a.node, b.node},
                          [av = std::move(av), bv = std::move(bv), pa = a.node,
                           pb = b.node](Tape& t, const double* g) {
                              const std::int64_t n = static_cast<std::int64_t>(av.size());
                              const double c = 2.0 * g[0] / static_cast<double>(n);
                              if (pa >= 0) {
                                  double* ga = t.grad_buf(pa, n);
                                  for (std::int64_t i = 0; i < n; ++i)
                                      ga[i] += c * (av[static_cast<std::size_t>(i)] -
                                                    bv[static_cast<std::size_t>(i)]);
                              }
                              if (pb >= 0) {
                                  double* gb = t.grad_buf(pb, n);
                                  for (std::int64_t i = 0; i < n; ++i)
                                      gb[i] -= c * (av[static_cast<std::size_t>(i)] -
                                                    bv[static_cast<std::size_t>(i)]);
                              }
                          });
        return out;
    }

    Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
        Tensor lg = logits.rank() == 1 ? reshape(logits, {1, logits.shape[0]}) : logits;
        if (lg.rank() != 2)
            throw ShapeError("cross_entropy: logits must be rank 1 or 2, got " +
                             shape_str(logits.shape));
        const int n = lg.shape[0], k = lg.shape[1];
        if (static_cast<int>(labels.size()) != n)
            throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                             std::to_string(n) + " rows");
        for (int lb : labels)
            if (lb < 0 || lb >= k)
                throw ShapeError("cross_entropy: label " + std::to_string(lb) + " out of range [0," +
                                 std::to_string(k) + ")");
        // mean over rows of logsumexp(row) - row[label]
        std::vector<double> probs(static_cast<std::size_t>(n) * k);
        double loss = 0.0;
        for (int i = 0; i < n; ++i) {
            double mx = lg.at(i, 0);
            for (int j = 1; j < k; ++j) mx = std::max(mx, lg.at(i, j));
            double sum = 0.0;
            for (int j = 0; j < k; ++j) {
                const double e = std::exp(lg.at(i, j) - mx);
                probs[std::size_t(i) * k + j] = e;
                sum += e;
            }
            for (int j = 0; j < k; ++j) probs[std::size_t(i) * k + j] /= sum;
            loss += mx + std::log(sum) - lg.at(i, labels[static_cast<std::size_t>(i)]);
        }
        Tensor out({1}, {loss / n});
        if (!recording_) return out;
        out.node = record(OpKind::cross_entropy, 1, {lg.node},
                          [n, k, labels, probs = std::move(probs), px = lg.node](Tape& t,
                                                                                 const double* g) {
                              if (px < 0) return;
                              double* gx = t.grad_buf(px, std::int64_t(n) * k);
                              const double c = g[0] / n;
                              for (int i = 0; i < n; ++i) {
                                  for (int j = 0; j < k; ++j)
                                      gx[std::size_t(i) * k + j] += c * probs[std::size_t(i) * k + j];
                                  gx[std::size_t(i) * k + labels[static_cast<std::size_t>(i)]] -= c;
                              }
                          });
        return out;
    }

    Tensor cross_entropy(const Tensor& logits, int label) {
        return cross_entropy(logits, std::vector<int>{label});
    }

    // Identity forward; the tape node propagates nothing, so the whole subtree
    // behind x is treated as a constant by backward().
    Tensor stop_gradient(const Tensor& x) {
        Tensor out = x;
        if (!recording_ || x.node < 0) {
            out.node = -1;
            return out;
        }
        out.node = record(OpKind::stop_gradient, x.numel(), {x.node}, nullptr);
        return out;
    }

    // ---- backward ----------------------------------------------------------

    void backward(const Tensor& loss) {
        if (!loss.is_scalar())
            throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape));
        grads_.assign(nodes_.size(), {});
        if (loss.node < 0) return; // constant loss: nothing reachable
        grads_[static_cast<std::size_t>(loss.node)] = {1.0};
        for (int i = loss.node; i >= 0; --i) {
            auto& node = nodes_[static_cast<std::size_t>(i)];
            if (grads_[static_cast<std::size_t>(i)].empty() || !node.back) continue;
            node.back(*this, grads_[static_cast<std::size_t>(i)].data());
        }
    }

    // Gradient of the last backward() w.r.t. tensor t; empty if t was not
    // reached (treat as zero).
    std::span<const double> grad(const Tensor& t) const {
        if (t.node < 0 || static_cast<std::size_t>(t.node) >= grads_.size()) return {};
        return grads_[static_cast<std::size_t>(t.node)];
    }

    double* grad_buf(int node, std::int64_t numel) {
        auto& g = grads_[static_cast<std::size_t>(node)];
        if (g.empty()) g.assign(static_cast<std::size_t>(numel), 0.0);
        return g.data();
    }

private:
    using BackFn = std::function<void(Tape&, const double*)>;

    struct Node {
        OpKind kind;
        std::int64_t numel;
        BackFn back;
    };

    int record(OpKind kind, std::int64_t numel, std::initializer_list<int>, BackFn back) {
        nodes_.push_back(Node{kind, numel, std::move(back)});
        return static_cast<int>(nodes_.size()) - 1;
    }

    Tensor ew_binary(OpKind kind, const Tensor& a, const Tensor& b) {
        const bool same = a.shape == b.shape;
        const bool bcast = !same && a.rank() == 2 &&
                           ((b.rank() == 1 && b.shape[0] == a.shape[1]) ||
                            (b.rank() == 2 && b.shape[0] == 1 && b.shape[1] == a.shape[1]));
        if (!same && !bcast)
            throw ShapeError(std::string(kind == OpKind::add   ? "add"
                                         : kind == OpKind::sub ? "sub"
                                                               : "mul") +
                             ": incompatible shapes " + shape_str(a.shape) + " vs " +
                             shape_str(b.shape));
        const int n = a.rank() == 2 ? a.shape[0] : 1;
        const int m = a.rank() == 2 ? a.shape[1] : static_cast<int>(a.numel());
        Tensor out = Tensor::zeros(a.shape);
        for (int i = 0; i < n; ++i) {
            const double* ar = a.values.data() + std::size_t(i) * m;
            const double* br = same ? b.values.data() + std::size_t(i) * m : b.values.data();
            double* orow = out.values.data() + std::size_t(i) * m;
            switch (kind) {
                case OpKind::add:
                    for (int j = 0; j < m; ++j) orow[j] = ar[j] + br[j];
                    break;
                case OpKind::sub:
                    for (int j = 0; j < m; ++j) orow[j] = ar[j] - br[j];
                    break;
                default:
                    for (int j = 0; j < m; ++j) orow[j] = ar[j] * br[j];
                    break;
            }
        }
        if (!recording_) return out;
        BackFn back;
        if (kind == OpKind::mul) {
            auto av = a.values;
            auto bv = b.values;
            back = [n, m, same, av = std::move(av), bv = std::move(bv), pa = a.node, pb = b.node](
                       Tape& t, const double* g) {
                if (pa >= 0) {
                    double* ga = t.grad_buf(pa, std::int64_t(n) * m);
                    for (int i = 0; i < n; ++i) {
                        const double* br = same ? bv.data() + std::size_t(i) * m : bv.data();
                        for (int j = 0; j < m; ++j)
                            ga[std::size_t(i) * m + j] += g[std::size_t(i) * m + j] * br[j];
                    }
                }
                if (pb >= 0) {
                    double* gb = t.grad_buf(pb, same ? std::int64_t(n) * m : m);
                    for (int i = 0; i < n; ++i)
                        for (int j = 0; j < m; ++j) {
                            const double v = g[std::size_t(i) * m + j] * av[std::size_t(i) * m + j];
                            gb[same ? std::size_t(i) * m + j : std::size_t(j)] += v;
                        }
                }
            };
        } else {
            const double sgn = kind == OpKind::sub ? -1.0 : 1.0;
            back = [n, m, same, sgn, pa = a.node, pb = b.node](Tape& t, const double* g) {
                if (pa >= 0) {
                    double* ga = t.grad_buf(pa, std::int64_t(n) * m);
                    for (std::int64_t i = 0; i < std::int64_t(n) * m; ++i) ga[i] += g[i];
                }
                if (pb >= 0) {
                    double* gb = t.grad_buf(pb, same ? std::int64_t(n) * m : m);
                    for (int i = 0; i < n; ++i)
                        for (int j = 0; j < m; ++j)
                            gb[same ? std::size_t(i) * m + j : std::size_t(j)] +=
                                sgn * g[std::size_t(i) * m + j];
                }
            };
        }
        out.node = record(kind, out.numel(), {a.node, b.node}, std::move(back));
        return out;
    }

    bool recording_;
    std::vector<Node> nodes_;
    std::vector<std::vector<double>> grads_;
};

// A named model weight. trainable == false guarantees the value buffer is
// bit-identical before and after any optimizer step.
struct Parameter {
    std::string name;
    Tensor tensor;
    bool trainable = true;
};

// Binds trainable parameters to leaves of a tape for the duration of one
// training step; node ids are cleared on destruction.
class ParamBinding {
public:
    ParamBinding(Tape& tape, std::span<Parameter* const> params) : params_(params.begin(), params.end()) {
        for (Parameter* p : params_)
            if (p->trainable) p->tensor.node = tape.make_leaf(p->tensor.numel());
    }
    ~ParamBinding() {
        for (Parameter* p : params_) p->tensor.node = -1;
    }
    ParamBinding(const ParamBinding&) = delete;
    ParamBinding& operator=(const ParamBinding&) = delete;

private:
    std::vector<Parameter*> params_;
};

// ---- gradient checking -----------------------------------------------------

// Max over coordinates of |analytic - numeric| / max(1, |analytic|, |numeric|)
// where numeric is the central difference (f(x+eps e_i) - f(x-eps e_i)) / 2eps.
inline double grad_check(const std::function<Tensor(Tape&, const Tensor&)>& f, const Tensor& x,
                         double eps) {
    if (eps < 1e-7 || eps > 1e-3)
        throw ShapeError("grad_check: eps " + std::to_string(eps) + " outside [1e-7, 1e-3]");
    Tape tape;
    Tensor xt = tape.leaf(x);
    Tensor loss = f(tape, xt);
    if (!loss.is_scalar())
        throw ShapeError("grad_check: f must be scalar-valued, got " + shape_str(loss.shape));
    tape.backward(loss);
    auto g = tape.grad(xt);
    double worst = 0.0;
    for (std::size_t i = 0; i < x.values.size(); ++i) {
        Tensor xp = x, xm = x;
        xp.values[i] += eps;
        xm.values[i] -= eps;
        Tape tp(false), tm(false);
        const double fp = f(tp, xp).scalar();
        const double fm = f(tm, xm).scalar();
        const double numeric = (fp - fm) / (2.0 * eps);
        const double analytic = g.empty() ? 0.0 : g[i];
        const double denom = std::max({1.0, std::abs(analytic), std::abs(numeric)});
        worst = std::max(worst, std::abs(analytic - numeric) / denom);
    }
    return worst;
}

// Same check for a loss over bound model parameters: analytic gradients from
// one taped run, numeric from re-evaluating the loss with single coordinates
// nudged. Returns the max relative error across all coordinates of all params.
inline double grad_check_params(const std::function<Tensor(Tape&)>& loss_fn,
                                std::span<Parameter* const> params, double eps) {
    if (eps < 1e-7 || eps > 1e-3)
        throw ShapeError("grad_check_params: eps outside [1e-7, 1e-3]");
    Tape tape;
    ParamBinding bind(tape, params);
    Tensor loss = loss_fn(tape);
    if (!loss.is_scalar()) throw ShapeError("grad_check_params: loss must be scalar");
    tape.backward(loss);
    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (Parameter* p : params) {
        auto g = tape.grad(p->tensor);
        analytic.emplace_back(g.begin(), g.end());
    }
    double worst = 0.0;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Parameter* p = params[pi];
        if (!p->trainable) continue;
        for (std::size_t i = 0; i < p->tensor.values.size(); ++i) {
            const double saved = p->tensor.values[i];
            p->tensor.values[i] = saved + eps;
            Tape tp(false);
            const double fp = loss_fn(tp).scalar();
            p->tensor.values[i] = saved - eps;
            Tape tm(false);
            const double fm = loss_fn(tm).scalar();
            p->tensor.values[i] = saved;
            const double numeric = (fp - fm) / (2.0 * eps);
            const double a = analytic[pi].empty() ? 0.0 : analytic[pi][i];
            const double denom = std::max({1.0, std::abs(a), std::abs(numeric)});
            worst = std::max(worst, std::abs(a - numeric) / denom);
        }
    }
    return worst;
}

} // namespace vlalab
