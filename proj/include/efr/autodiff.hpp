#pragma once

/// @file autodiff.hpp
/// Minimal reverse-mode automatic differentiation over dense row-major
/// matrices. A Tape records every operation together with a closure that
/// propagates the output gradient to its inputs; `backward` replays the
/// closures in reverse order. Ops are written for batched routing models:
/// row blocks of equal height (one per instance) appear as "groups".

#include "efr/error.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <utility>
#include <vector>

namespace efr::ad {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Handle to a tape node.
struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

/// Row-major boolean mask, 1 = excluded.
using Mask = std::vector<std::uint8_t>;

template <class T>
class Tape {
  public:
    using Backward = std::function<void(Tape&, const Mat<T>&)>;

    explicit Tape(bool record = true) : record_(record) { nodes_.reserve(1024); }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool recording() const { return record_; }
    std::size_t size() const { return nodes_.size(); }

    Var constant(Mat<T> value) {
        Node node;
        node.value = std::move(value);
        return append(std::move(node));
    }

    /// Parameter leaf. `value` must outlive the tape; gradients accumulate into `sink`.
    Var leaf(const Mat<T>& value, Mat<T>* sink) {
        Node node;
        node.ref = &value;
        node.sink = sink;
        node.needs_grad = record_ && sink != nullptr;
        return append(std::move(node));
    }

    const Mat<T>& value(Var v) const {
        const Node& node = nodes_[v.id];
        return node.ref ? *node.ref : node.value;
    }

    bool needs_grad(Var v) const { return nodes_[v.id].needs_grad; }

    template <class... Vs>
    bool any_needs_grad(Vs... vs) const {
        return record_ && (needs_grad(vs) || ...);
    }

    /// Records an op output. `back` is dropped when no input needs a gradient.
    Var push(Mat<T> value, bool needs_grad, Backward back) {
        Node node;
        node.value = std::move(value);
        node.needs_grad = record_ && needs_grad;
        if (node.needs_grad) node.back = std::move(back);
        return append(std::move(node));
    }

    /// Adds `delta` into the gradient of `v` (no-op for constants).
    template <class Expr>
    void accumulate(Var v, const Expr& delta) {
        Node& node = nodes_[v.id];
        if (!node.needs_grad) return;
        grad_ref(node) += delta;
    }

    /// Gradient buffer of `v`, allocated as zeros on first use.
    Mat<T>& grad(Var v) { return grad_ref(nodes_[v.id]); }

    /// Seeds d(loss)/d(loss) = 1 and runs every recorded closure in reverse.
    void backward(Var loss) {
        const Mat<T>& lv = value(loss);
        if (lv.rows() != 1 || lv.cols() != 1) throw NumericError("backward needs a scalar loss");
        if (!nodes_[loss.id].needs_grad) return;
        grad(loss)(0, 0) += T(1);
        for (int id = loss.id; id >= 0; --id) {
            Node& node = nodes_[id];
            if (!node.back || !node.has_grad) continue;
            // closures never append nodes, so `node` stays valid
            node.back(*this, node.grad);
        }
    }

  private:
    struct Node {
        Mat<T> value;
        const Mat<T>* ref = nullptr;
        Mat<T>* sink = nullptr;
        Mat<T> grad;
        bool has_grad = false;
        bool needs_grad = false;
        Backward back;
    };

    Var append(Node&& node) {
        nodes_.push_back(std::move(node));
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    Mat<T>& grad_ref(Node& node) {
        if (node.sink) return *node.sink;
        if (!node.has_grad) {
            const Mat<T>& v = node.ref ? *node.ref : node.value;
            node.grad = Mat<T>::Zero(v.rows(), v.cols());
            node.has_grad = true;
        }
        return node.grad;
    }

    bool record_;
    std::vector<Node> nodes_;
};

namespace detail {

inline void require(bool ok, const char* what) {
    if (!ok) throw NumericError(what);
}

} // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and linear-algebra ops

template <class T>
Var matmul(Tape<T>& t, Var a, Var b) {
    const auto& A = t.value(a);
    const auto& B = t.value(b);
    detail::require(A.cols() == B.rows(), "matmul shape mismatch");
    Mat<T> out = A * B;
    return t.push(std::move(out), t.any_needs_grad(a, b), [a, b](Tape<T>& tp, const Mat<T>& g) {
        if (tp.needs_grad(a)) tp.grad(a).noalias() += g * tp.value(b).transpose();
        if (tp.needs_grad(b)) tp.grad(b).noalias() += tp.value(a).transpose() * g;
    });
}

template <class T>
Var add(Tape<T>& t, Var a, Var b) {
    detail::require(t.value(a).rows() == t.value(b).rows() && t.value(a).cols() == t.value(b).cols(),
                    "add shape mismatch");
    Mat<T> out = t.value(a) + t.value(b);
    return t.push(std::move(out), t.any_needs_grad(a, b), [a, b](Tape<T>& tp, const Mat<T>& g) {
        tp.accumulate(a, g);
        tp.accumulate(b, g);
    });
}

template <class T>
Var sub(Tape<T>& t, Var a, Var b) {
    Mat<T> out = t.value(a) - t.value(b);
    return t.push(std::move(out), t.any_needs_grad(a, b), [a, b](Tape<T>& tp, const Mat<T>& g) {
        tp.accumulate(a, g);
        tp.accumulate(b, -g);
    });
}

/// a + broadcast of the 1 x c row `bias` over every row.
template <class T>
Var add_row(Tape<T>& t, Var a, Var bias) {
    const auto& A = t.value(a);
    const auto& b = t.value(bias);
    detail::require(b.rows() == 1 && b.cols() == A.cols(), "add_row shape mismatch");
    Mat<T> out = A.rowwise() + b.row(0);
    return t.push(std::move(out), t.any_needs_grad(a, bias), [a, bias](Tape<T>& tp, const Mat<T>& g) {
        tp.accumulate(a, g);
        if (tp.needs_grad(bias)) tp.grad(bias) += g.colwise().sum();
    });
}

/// Repeats a 1 x c row `rows` times.
template <class T>
Var broadcast_row(Tape<T>& t, Var row, int rows) {
    const auto& r = t.value(row);
    detail::require(r.rows() == 1, "broadcast_row expects a row vector");
    Mat<T> out = r.replicate(rows, 1);
    return t.push(std::move(out), t.any_needs_grad(row), [row](Tape<T>& tp, const Mat<T>& g) {
        tp.grad(row) += g.colwise().sum();
    });
}

template <class T>
Var mul(Tape<T>& t, Var a, Var b) {
    Mat<T> out = t.value(a).cwiseProduct(t.value(b));
    return t.push(std::move(out), t.any_needs_grad(a, b), [a, b](Tape<T>& tp, const Mat<T>& g) {
        if (tp.needs_grad(a)) tp.grad(a) += g.cwiseProduct(tp.value(b));
        if (tp.needs_grad(b)) tp.grad(b) += g.cwiseProduct(tp.value(a));
    });
}

template <class T>
Var div(Tape<T>& t, Var a, Var b) {
    Mat<T> out = t.value(a).cwiseQuotient(t.value(b));
    const bool ng = t.any_needs_grad(a, b);
    Mat<T> saved = ng ? out : Mat<T>();
    return t.push(std::move(out), ng, [a, b, r = std::move(saved)](Tape<T>& tp, const Mat<T>& g) {
        const auto& B = tp.value(b);
        if (tp.needs_grad(a)) tp.grad(a) += g.cwiseQuotient(B);
        if (tp.needs_grad(b)) tp.grad(b) -= g.cwiseProduct(r).cwiseQuotient(B);
    });
}

template <class T>
Var scale(Tape<T>& t, Var a, T s) {
    Mat<T> out = t.value(a) * s;
    return t.push(std::move(out), t.any_needs_grad(a), [a, s](Tape<T>& tp, const Mat<T>& g) {
        tp.accumulate(a, g * s);
    });
}

template <class T>
Var add_const(Tape<T>& t, Var a, T c) {
    Mat<T> out = t.value(a).array() + c;
    return t.push(std::move(out), t.any_needs_grad(a), [a](Tape<T>& tp, const Mat<T>& g) {
        tp.accumulate(a, g);
    });
}

template <class T>
Var relu(Tape<T>& t, Var a) {
    Mat<T> out = t.value(a).cwiseMax(T(0));
    return t.push(std::move(out), t.any_needs_grad(a), [a](Tape<T>& tp, const Mat<T>& g) {
        tp.grad(a) += (tp.value(a).array() > T(0)).select(g, T(0));
    });
}

template <class T>
Var sigmoid(Tape<T>& t, Var a) {
    Mat<T> out = (T(1) + (-t.value(a).array()).exp()).inverse().matrix();
    const bool ng = t.any_needs_grad(a);
    Mat<T> saved = ng ? out : Mat<T>();
    return t.push(std::move(out), ng, [a, s = std::move(saved)](Tape<T>& tp, const Mat<T>& g) {
        tp.grad(a).array() += g.array() * s.array() * (T(1) - s.array());
    });
}

template <class T>
Var tanh(Tape<T>& t, Var a) {
    Mat<T> out = t.value(a).array().tanh().matrix();
    const bool ng = t.any_needs_grad(a);
    Mat<T> saved = ng ? out : Mat<T>();
    return t.push(std::move(out), ng, [a, s = std::move(saved)](Tape<T>& tp, const Mat<T>& g) {
        tp.grad(a).array() += g.array() * (T(1) - s.array().square());
    });
}

template <class T>
Var concat_cols(Tape<T>& t, Var a, Var b) {
    const auto& A = t.value(a);
    const auto& B = t.value(b);
    detail::require(A.rows() == B.rows(), "concat_cols row mismatch");
    Mat<T> out(A.rows(), A.cols() + B.cols());
    out << A, B;
    const auto ca = A.cols();
    const auto cb = B.cols();
    return t.push(std::move(out), t.any_needs_grad(a, b), [a, b, ca, cb](Tape<T>& tp, const Mat<T>& g) {
        if (tp.needs_grad(a)) tp.grad(a) += g.leftCols(ca);
        if (tp.needs_grad(b)) tp.grad(b) += g.rightCols(cb);
    });
}

template <class T>
Var concat_rows(Tape<T>& t, Var a, Var b) {
    const auto& A = t.value(a);
    const auto& B = t.value(b);
    detail::require(A.cols() == B.cols(), "concat_rows column mismatch");
    Mat<T> out(A.rows() + B.rows(), A.cols());
    out << A, B;
    const auto ra = A.rows();
    const auto rb = B.rows();
    return t.push(std::move(out), t.any_needs_grad(a, b), [a, b, ra, rb](Tape<T>& tp, const Mat<T>& g) {
        if (tp.needs_grad(a)) tp.grad(a) += g.topRows(ra);
        if (tp.needs_grad(b)) tp.grad(b) += g.bottomRows(rb);
    });
}

/// out[r] = a[idx[r]].
template <class T>
Var gather_rows(Tape<T>& t, Var a, std::vector<int> idx) {
    const auto& A = t.value(a);
    Mat<T> out(static_cast<Eigen::Index>(idx.size()), A.cols());
    for (std::size_t r = 0; r < idx.size(); ++r) out.row(r) = A.row(idx[r]);
    return t.push(std::move(out), t.any_needs_grad(a), [a, idx = std::move(idx)](Tape<T>& tp, const Mat<T>& g) {
        auto& ga = tp.grad(a);
        for (std::size_t r = 0; r < idx.size(); ++r) ga.row(idx[r]) += g.row(r);
    });
}

/// out[idx[r]] += a[r] with `rows` output rows.
template <class T>
Var scatter_add_rows(Tape<T>& t, Var a, std::vector<int> idx, int rows) {
    const auto& A = t.value(a);
    detail::require(static_cast<std::size_t>(A.rows()) == idx.size(), "scatter_add_rows size mismatch");
    Mat<T> out = Mat<T>::Zero(rows, A.cols());
    for (std::size_t r = 0; r < idx.size(); ++r) out.row(idx[r]) += A.row(r);
    return t.push(std::move(out), t.any_needs_grad(a), [a, idx = std::move(idx)](Tape<T>& tp, const Mat<T>& g) {
        auto& ga = tp.grad(a);
        for (std::size_t r = 0; r < idx.size(); ++r) ga.row(r) += g.row(idx[r]);
    });
}

/// Sum over rows of x (R x 1) weighted by constants; returns 1 x 1.
template <class T>
Var weighted_sum(Tape<T>& t, Var x, std::vector<T> w) {
    const auto& X = t.value(x);
    detail::require(X.cols() == 1 && static_cast<std::size_t>(X.rows()) == w.size(), "weighted_sum shape");
    T acc = 0;
    for (std::size_t r = 0; r < w.size(); ++r) acc += w[r] * X(r, 0);
    Mat<T> out(1, 1);
    out(0, 0) = acc;
    return t.push(std::move(out), t.any_needs_grad(x), [x, w = std::move(w)](Tape<T>& tp, const Mat<T>& g) {
        auto& gx = tp.grad(x);
        for (std::size_t r = 0; r < w.size(); ++r) gx(r, 0) += g(0, 0) * w[r];
    });
}

// ---------------------------------------------------------------------------
// Normalisation

/// Batch normalisation computed independently over each block of `seg`
/// consecutive rows (one block per instance), per column, with biased
/// variance. gamma and beta are 1 x c.
template <class T>
Var segment_norm(Tape<T>& t, Var x, Var gamma, Var beta, int seg, T eps = T(1e-5)) {
    const auto& X = t.value(x);
    const auto& G = t.value(gamma);
    const auto& Bt = t.value(beta);
    const Eigen::Index rows = X.rows();
    const Eigen::Index cols = X.cols();
    detail::require(seg > 0 && rows % seg == 0, "segment_norm: rows not divisible by segment");
    const Eigen::Index groups = rows / seg;
    Mat<T> xhat(rows, cols);
    Mat<T> invstd(groups, cols);
    for (Eigen::Index b = 0; b < groups; ++b) {
        auto blk = X.middleRows(b * seg, seg);
        Eigen::Matrix<T, 1, Eigen::Dynamic> mean = blk.colwise().mean();
        Mat<T> centered = blk.rowwise() - mean;
        Eigen::Matrix<T, 1, Eigen::Dynamic> var = centered.array().square().colwise().mean();
        invstd.row(b) = (var.array() + eps).rsqrt();
        xhat.middleRows(b * seg, seg) = centered.array().rowwise() * invstd.row(b).array();
    }
    Mat<T> out = (xhat.array().rowwise() * G.row(0).array()).rowwise() + Bt.row(0).array();
    const bool ng = t.any_needs_grad(x, gamma, beta);
    if (!ng) return t.push(std::move(out), false, {});
    return t.push(std::move(out), true,
                  [x, gamma, beta, seg, groups, xhat = std::move(xhat), invstd = std::move(invstd)](
                      Tape<T>& tp, const Mat<T>& g) {
                      if (tp.needs_grad(gamma)) tp.grad(gamma) += g.cwiseProduct(xhat).colwise().sum();
                      if (tp.needs_grad(beta)) tp.grad(beta) += g.colwise().sum();
                      if (!tp.needs_grad(x)) return;
                      const auto& G = tp.value(gamma);
                      auto& gx = tp.grad(x);
                      const T inv_n = T(1) / T(seg);
                      for (Eigen::Index b = 0; b < groups; ++b) {
                          Mat<T> dxhat = g.middleRows(b * seg, seg).array().rowwise() * G.row(0).array();
                          auto xh = xhat.middleRows(b * seg, seg);
                          Eigen::Matrix<T, 1, Eigen::Dynamic> s1 = dxhat.colwise().sum();
                          Eigen::Matrix<T, 1, Eigen::Dynamic> s2 = dxhat.cwiseProduct(xh).colwise().sum();
                          Mat<T> d = (dxhat * T(seg)).rowwise() - s1;
                          d -= (xh.array().rowwise() * s2.array()).matrix();
                          gx.middleRows(b * seg, seg) +=
                              (d.array().rowwise() * (invstd.row(b).array() * inv_n)).matrix();
                      }
                  });
}

// ---------------------------------------------------------------------------
// Attention

namespace detail {

/// Row softmax of `s` in place; masked entries (mask[r*cols+c]) become 0.
template <class T>
void masked_softmax_rows(Mat<T>& s, const std::uint8_t* mask) {
    for (Eigen::Index r = 0; r < s.rows(); ++r) {
        T mx = -std::numeric_limits<T>::infinity();
        for (Eigen::Index c = 0; c < s.cols(); ++c)
            if (!mask || !mask[r * s.cols() + c]) mx = std::max(mx, s(r, c));
        if (!(mx > -std::numeric_limits<T>::infinity()))
            throw DecodeError("attention row with every key masked");
        T sum = 0;
        for (Eigen::Index c = 0; c < s.cols(); ++c) {
            if (mask && mask[r * s.cols() + c]) {
                s(r, c) = T(0);
            } else {
                s(r, c) = std::exp(s(r, c) - mx);
                sum += s(r, c);
            }
        }
        s.row(r) /= sum;
    }
}

/// dS = P .* (dP - rowsum(dP .* P)).
template <class T>
Mat<T> softmax_backward(const Mat<T>& p, const Mat<T>& dp) {
    Eigen::Matrix<T, Eigen::Dynamic, 1> dot = p.cwiseProduct(dp).rowwise().sum();
    return p.cwiseProduct(dp.colwise() - dot);
}

} // namespace detail

/// Observed attention weights, one (q x k) matrix per (group, head) in
/// group-major order. Filled when a pointer is passed to an attention op.
template <class T>
using AttentionWeights = std::vector<Mat<T>>;

/// Multi-head scaled dot-product attention over `groups` independent blocks.
/// q: (groups*qp) x h, k and v: (groups*kp) x h. `mask` (optional) is
/// (groups*qp) x kp with 1 = excluded key.
template <class T>
Var attention(Tape<T>& t, Var q, Var k, Var v, int heads, int groups, const Mask* mask = nullptr,
              AttentionWeights<T>* observed = nullptr) {
    const auto& Q = t.value(q);
    const auto& K = t.value(k);
    const auto& V = t.value(v);
    const Eigen::Index h = Q.cols();
    detail::require(h % heads == 0 && K.cols() == h && V.cols() == h, "attention width mismatch");
    detail::require(Q.rows() % groups == 0 && K.rows() % groups == 0 && K.rows() == V.rows(),
                    "attention row mismatch");
    const Eigen::Index qp = Q.rows() / groups;
    const Eigen::Index kp = K.rows() / groups;
    const Eigen::Index dk = h / heads;
    const T sc = T(1) / std::sqrt(T(dk));
    if (mask) detail::require(mask->size() == static_cast<std::size_t>(Q.rows() * kp), "attention mask size");

    const bool ng = t.any_needs_grad(q, k, v);
    std::vector<Mat<T>> probs;
    if (ng || observed) probs.reserve(static_cast<std::size_t>(groups) * heads);
    Mat<T> out(Q.rows(), h);
    for (int b = 0; b < groups; ++b) {
        const std::uint8_t* mrow = mask ? mask->data() + b * qp * kp : nullptr;
        for (int hd = 0; hd < heads; ++hd) {
            Mat<T> s = (Q.block(b * qp, hd * dk, qp, dk) * K.block(b * kp, hd * dk, kp, dk).transpose()) * sc;
            detail::masked_softmax_rows(s, mrow);
            out.block(b * qp, hd * dk, qp, dk).noalias() = s * V.block(b * kp, hd * dk, kp, dk);
            if (ng || observed) probs.push_back(std::move(s));
        }
    }
    if (observed) *observed = probs;
    if (!ng) return t.push(std::move(out), false, {});
    return t.push(std::move(out), true,
                  [q, k, v, heads, groups, qp, kp, dk, sc, probs = std::move(probs)](Tape<T>& tp, const Mat<T>& g) {
                      const auto& Q = tp.value(q);
                      const auto& K = tp.value(k);
                      const auto& V = tp.value(v);
                      const bool gq = tp.needs_grad(q), gk = tp.needs_grad(k), gv = tp.needs_grad(v);
                      for (int b = 0; b < groups; ++b) {
                          for (int hd = 0; hd < heads; ++hd) {
                              const Mat<T>& p = probs[static_cast<std::size_t>(b) * heads + hd];
                              auto gout = g.block(b * qp, hd * dk, qp, dk);
                              auto vb = V.block(b * kp, hd * dk, kp, dk);
                              if (gv) tp.grad(v).block(b * kp, hd * dk, kp, dk).noalias() += p.transpose() * gout;
                              if (!gq && !gk) continue;
                              Mat<T> dp = gout * vb.transpose();
                              Mat<T> ds = detail::softmax_backward(p, dp) * sc;
                              if (gq)
                                  tp.grad(q).block(b * qp, hd * dk, qp, dk).noalias() +=
                                      ds * K.block(b * kp, hd * dk, kp, dk);
                              if (gk)
                                  tp.grad(k).block(b * kp, hd * dk, kp, dk).noalias() +=
                                      ds.transpose() * Q.block(b * qp, hd * dk, qp, dk);
                          }
                      }
                  });
}

/// Multi-head attention whose logits come from a per-head two-input MLP
/// applied to (scaled dot product, edge weight). `dist` holds one n x n
/// edge-weight block per group, stacked as (groups*n) x n. Mixing MLP
/// parameters: w1 heads x (2*m) laid out [dot coefs | edge coefs],
/// b1 heads x m, w2 heads x m, b2 heads x 1.
template <class T>
Var mixed_score_attention(Tape<T>& t, Var q, Var k, Var v, const Mat<T>& dist, Var w1, Var b1, Var w2,
                          Var b2, int heads, int groups, AttentionWeights<T>* observed = nullptr) {
    const auto& Q = t.value(q);
    const auto& K = t.value(k);
    const auto& V = t.value(v);
    const Eigen::Index h = Q.cols();
    const Eigen::Index n = Q.rows() / groups;
    detail::require(Q.rows() == K.rows() && K.rows() == V.rows() && h % heads == 0, "mixed attention shape");
    detail::require(dist.rows() == Q.rows() && dist.cols() == n, "mixed attention edge block shape");
    const Eigen::Index dk = h / heads;
    const T sc = T(1) / std::sqrt(T(dk));
    const Eigen::Index m = t.value(w2).cols();
    detail::require(t.value(w1).rows() == heads && t.value(w1).cols() == 2 * m, "mix w1 shape");

    const auto& W1 = t.value(w1);
    const auto& B1 = t.value(b1);
    const auto& W2 = t.value(w2);
    const auto& B2 = t.value(b2);

    const bool ng = t.any_needs_grad(q, k, v, w1, b1, w2, b2);
    std::vector<Mat<T>> dots, probs;
    if (ng) dots.reserve(static_cast<std::size_t>(groups) * heads);
    if (ng || observed) probs.reserve(static_cast<std::size_t>(groups) * heads);
    Mat<T> out(Q.rows(), h);
    for (int b = 0; b < groups; ++b) {
        auto D = dist.middleRows(b * n, n);
        for (int hd = 0; hd < heads; ++hd) {
            Mat<T> s = (Q.block(b * n, hd * dk, n, dk) * K.block(b * n, hd * dk, n, dk).transpose()) * sc;
            Mat<T> mixed = Mat<T>::Constant(n, n, B2(hd, 0));
            for (Eigen::Index j = 0; j < m; ++j) {
                mixed.array() += W2(hd, j) * (W1(hd, j) * s.array() + W1(hd, m + j) * D.array() + B1(hd, j))
                                                 .cwiseMax(T(0));
            }
            detail::masked_softmax_rows<T>(mixed, nullptr);
            out.block(b * n, hd * dk, n, dk).noalias() = mixed * V.block(b * n, hd * dk, n, dk);
            if (ng) dots.push_back(std::move(s));
            if (ng || observed) probs.push_back(std::move(mixed));
        }
    }
    if (observed) *observed = probs;
    if (!ng) return t.push(std::move(out), false, {});
    return t.push(
        std::move(out), true,
        [q, k, v, w1, b1, w2, b2, dist = Mat<T>(dist), heads, groups, n, dk, sc, m, dots = std::move(dots),
         probs = std::move(probs)](Tape<T>& tp, const Mat<T>& g) {
            const auto& Q = tp.value(q);
            const auto& K = tp.value(k);
            const auto& V = tp.value(v);
            const auto& W1 = tp.value(w1);
            const auto& B1 = tp.value(b1);
            const auto& W2 = tp.value(w2);
            const bool gw1 = tp.needs_grad(w1), gb1 = tp.needs_grad(b1), gw2 = tp.needs_grad(w2),
                       gb2 = tp.needs_grad(b2), gq = tp.needs_grad(q), gk = tp.needs_grad(k),
                       gv = tp.needs_grad(v);
            for (int b = 0; b < groups; ++b) {
                auto D = dist.middleRows(b * n, n);
                for (int hd = 0; hd < heads; ++hd) {
                    const std::size_t idx = static_cast<std::size_t>(b) * heads + hd;
                    const Mat<T>& s = dots[idx];
                    const Mat<T>& p = probs[idx];
                    auto gout = g.block(b * n, hd * dk, n, dk);
                    if (gv) tp.grad(v).block(b * n, hd * dk, n, dk).noalias() += p.transpose() * gout;
                    Mat<T> dp = gout * V.block(b * n, hd * dk, n, dk).transpose();
                    Mat<T> dm = detail::softmax_backward(p, dp);
                    if (gb2) tp.grad(b2)(hd, 0) += dm.sum();
                    Mat<T> ds = Mat<T>::Zero(n, n);
                    for (Eigen::Index j = 0; j < m; ++j) {
                        Mat<T> z = (W1(hd, j) * s.array() + W1(hd, m + j) * D.array() + B1(hd, j)).matrix();
                        if (gw2) tp.grad(w2)(hd, j) += dm.cwiseProduct(z.cwiseMax(T(0))).sum();
                        Mat<T> dz = (z.array() > T(0)).select(dm * W2(hd, j), T(0));
                        if (gw1) {
                            tp.grad(w1)(hd, j) += dz.cwiseProduct(s).sum();
                            tp.grad(w1)(hd, m + j) += dz.cwiseProduct(D).sum();
                        }
                        if (gb1) tp.grad(b1)(hd, j) += dz.sum();
                        ds += dz * W1(hd, j);
                    }
                    ds *= sc;
                    if (gq)
                        tp.grad(q).block(b * n, hd * dk, n, dk).noalias() += ds * K.block(b * n, hd * dk, n, dk);
                    if (gk)
                        tp.grad(k).block(b * n, hd * dk, n, dk).noalias() +=
                            ds.transpose() * Q.block(b * n, hd * dk, n, dk);
                }
            }
        });
}

/// Per-group products: out block b = g_b * keys_bᵀ, giving (groups*qp) x kp.
template <class T>
Var group_scores(Tape<T>& t, Var g, Var keys, int groups) {
    const auto& G = t.value(g);
    const auto& K = t.value(keys);
    detail::require(G.cols() == K.cols() && G.rows() % groups == 0 && K.rows() % groups == 0,
                    "group_scores shape");
    const Eigen::Index qp = G.rows() / groups;
    const Eigen::Index kp = K.rows() / groups;
    Mat<T> out(G.rows(), kp);
    for (int b = 0; b < groups; ++b)
        out.middleRows(b * qp, qp).noalias() = G.middleRows(b * qp, qp) * K.middleRows(b * kp, kp).transpose();
    return t.push(std::move(out), t.any_needs_grad(g, keys), [g, keys, groups, qp, kp](Tape<T>& tp, const Mat<T>& gr) {
        const auto& G = tp.value(g);
        const auto& K = tp.value(keys);
        for (int b = 0; b < groups; ++b) {
            auto gb = gr.middleRows(b * qp, qp);
            if (tp.needs_grad(g)) tp.grad(g).middleRows(b * qp, qp).noalias() += gb * K.middleRows(b * kp, kp);
            if (tp.needs_grad(keys))
                tp.grad(keys).middleRows(b * kp, kp).noalias() += gb.transpose() * G.middleRows(b * qp, qp);
        }
    });
}

/// Row softmax of `u` restricted to unmasked columns (values only).
template <class T>
Mat<T> masked_softmax(const Mat<T>& u, const Mask& mask) {
    Mat<T> p = u;
    detail::masked_softmax_rows(p, mask.data());
    return p;
}

/// log p(actions[r]) under the masked row softmax of `u`; returns R x 1.
template <class T>
Var masked_log_softmax_pick(Tape<T>& t, Var u, const Mask& mask, std::vector<int> actions) {
    const auto& U = t.value(u);
    const Eigen::Index rows = U.rows();
    const Eigen::Index cols = U.cols();
    detail::require(static_cast<std::size_t>(rows) == actions.size(), "pick: one action per row");
    Mat<T> p = masked_softmax(U, mask);
    Mat<T> out(rows, 1);
    for (Eigen::Index r = 0; r < rows; ++r) {
        const int a = actions[r];
        if (mask[r * cols + a]) throw DecodeError("selected a masked node");
        T mx = -std::numeric_limits<T>::infinity();
        for (Eigen::Index c = 0; c < cols; ++c)
            if (!mask[r * cols + c]) mx = std::max(mx, U(r, c));
        T sum = 0;
        for (Eigen::Index c = 0; c < cols; ++c)
            if (!mask[r * cols + c]) sum += std::exp(U(r, c) - mx);
        out(r, 0) = U(r, a) - mx - std::log(sum);
    }
    return t.push(std::move(out), t.any_needs_grad(u),
                  [u, actions = std::move(actions), p = std::move(p)](Tape<T>& tp, const Mat<T>& g) {
                      auto& gu = tp.grad(u);
                      for (Eigen::Index r = 0; r < p.rows(); ++r) {
                          gu.row(r) -= g(r, 0) * p.row(r);
                          gu(r, actions[r]) += g(r, 0);
                      }
                  });
}

} // namespace efr::ad
