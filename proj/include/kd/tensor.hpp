#pragma once
// Dense row-major float64 tensors with a define-by-run reverse-mode tape.
//
// A Tensor without a tape handle is a constant and never receives gradient.
// A Tape is rebuilt per forward pass and owned by exactly one training step;
// insertion order is a topological order (parents precede children), and the
// backward pass visits nodes exactly once in reverse insertion order.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "kd/errors.hpp"

namespace kd {

class Tape;

struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;
    Tape* tape = nullptr;  // nullptr: constant
    int node = -1;

    Tensor() = default;
    Tensor(std::vector<int> shp, std::vector<double> d) : shape(std::move(shp)), data(std::move(d)) {
        std::size_t n = 1;
        for (int s : shape) n *= static_cast<std::size_t>(s);
        if (n != data.size()) throw ShapeError("tensor: product(shape) != data length");
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }
    static Tensor zeros(std::vector<int> shp) {
        std::size_t n = 1;
        for (int s : shp) n *= static_cast<std::size_t>(s);
        return Tensor(std::move(shp), std::vector<double>(n, 0.0));
    }
    static Tensor full(std::vector<int> shp, double v) {
        Tensor t = zeros(std::move(shp));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }

    std::size_t size() const { return data.size(); }
    bool tracked() const { return tape != nullptr; }
    bool is_scalar() const { return data.size() == 1; }

    int rows() const {
        if (shape.size() != 2) throw ShapeError("rows(): tensor is not 2-d");
        return shape[0];
    }
    int cols() const {
        if (shape.size() != 2) throw ShapeError("cols(): tensor is not 2-d");
        return shape[1];
    }

    double item() const {
        if (!is_scalar()) throw ContractError("item(): tensor is not scalar");
        return data[0];
    }

    double& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols() + c]; }
    double at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols() + c]; }
};

class Tape {
public:
    using PullFn = std::function<void(Tape&, const std::vector<double>&)>;

    // Registers a tracked copy of `value` (a parameter or input for this step).
    Tensor leaf(const Tensor& value) {
        Tensor t(value.shape, value.data);
        t.tape = this;
        t.node = push(t.size(), {});
        return t;
    }

    int push(std::size_t size, PullFn pull) {
        nodes_.push_back(Node{size, std::move(pull)});
        return static_cast<int>(nodes_.size()) - 1;
    }

    // Seeds d(root)/d(root) = 1 and accumulates into every node, newest first.
    // Nodes the root does not depend on keep a zero gradient.
    void backward(const Tensor& root) {
        if (root.tape != this) throw ContractError("backward: root not on this tape");
        if (!root.is_scalar()) throw ContractError("backward: root must be scalar");
        if (root.node < 0 || static_cast<std::size_t>(root.node) >= nodes_.size())
            throw ContractError("backward: root is stale, tape was reset");
        grads_.assign(nodes_.size(), {});
        for (std::size_t i = 0; i < nodes_.size(); ++i) grads_[i].assign(nodes_[i].size, 0.0);
        grads_[static_cast<std::size_t>(root.node)][0] = 1.0;
        for (int i = root.node; i >= 0; --i) {
            if (nodes_[static_cast<std::size_t>(i)].pull)
                nodes_[static_cast<std::size_t>(i)].pull(*this, grads_[static_cast<std::size_t>(i)]);
        }
        ran_backward_ = true;
    }

    const std::vector<double>& grad(const Tensor& x) const {
        if (x.tape != this) throw ContractError("grad: tensor not on this tape");
        if (!ran_backward_) throw ContractError("grad: backward has not run");
        if (x.node < 0 || static_cast<std::size_t>(x.node) >= grads_.size())
            throw ContractError("grad: tensor is stale, tape was reset");
        return grads_[static_cast<std::size_t>(x.node)];
    }

    std::vector<double>& grad_buf(int node) { return grads_[static_cast<std::size_t>(node)]; }

    std::size_t node_count() const { return nodes_.size(); }

    void reset() {
        nodes_.clear();
        grads_.clear();
        ran_backward_ = false;
    }

private:
    struct Node {
        std::size_t size;
        PullFn pull;
    };
    std::vector<Node> nodes_;
    std::vector<std::vector<double>> grads_;
    bool ran_backward_ = false;
};

namespace detail {

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape != b.shape) throw ShapeError(std::string(op) + ": shape mismatch");
}

// Both operands tracked on different tapes is a usage bug.
inline Tape* result_tape(const Tensor& a, const Tensor& b) {
    if (a.tracked() && b.tracked() && a.tape != b.tape)
        throw ContractError("operands live on different tapes");
    return a.tracked() ? a.tape : b.tape;
}

inline void axpy(std::vector<double>& out, const std::vector<double>& g,
                 const std::vector<double>& scale) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += g[i] * scale[i];
}

// c[m x n] += a[m x k] * b[k x n]
inline void gemm_nn(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* ai = a + static_cast<std::size_t>(i) * k;
        double* ci = c + static_cast<std::size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const double aip = ai[p];
            if (aip == 0.0) continue;
            const double* bp = b + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) ci[j] += aip * bp[j];
        }
    }
}

// c[m x n] += a[m x k] * b[n x k]^T
inline void gemm_nt(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* ai = a + static_cast<std::size_t>(i) * k;
        double* ci = c + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const double* bj = b + static_cast<std::size_t>(j) * k;
            double acc = 0.0;
            for (int p = 0; p < k; ++p) acc += ai[p] * bj[p];
            ci[j] += acc;
        }
    }
}

// c[k x n] += a[m x k]^T * b[m x n]
inline void gemm_tn(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* ai = a + static_cast<std::size_t>(i) * k;
        const double* bi = b + static_cast<std::size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const double aip = ai[p];
            if (aip == 0.0) continue;
            double* cp = c + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) cp[j] += aip * bi[j];
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise binary ops
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "add");
    Tensor out(a.shape, a.data);
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += b.data[i];
    Tape* tp = detail::result_tape(a, b);
    if (!tp) return out;
    const int pa = a.tracked() ? a.node : -1;
    const int pb = b.tracked() ? b.node : -1;
    out.tape = tp;
    out.node = tp->push(out.size(), [pa, pb](Tape& t, const std::vector<double>& g) {
        if (pa >= 0) {
            auto& ga = t.grad_buf(pa);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (pb >= 0) {
            auto& gb = t.grad_buf(pb);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
        }
    });
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "sub");
    Tensor out(a.shape, a.data);
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] -= b.data[i];
    Tape* tp = detail::result_tape(a, b);
    if (!tp) return out;
    const int pa = a.tracked() ? a.node : -1;
    const int pb = b.tracked() ? b.node : -1;
    out.tape = tp;
    out.node = tp->push(out.size(), [pa, pb](Tape& t, const std::vector<double>& g) {
        if (pa >= 0) {
            auto& ga = t.grad_buf(pa);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (pb >= 0) {
            auto& gb = t.grad_buf(pb);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        }
    });
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "mul");
    Tensor out(a.shape, a.data);
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= b.data[i];
    Tape* tp = detail::result_tape(a, b);
    if (!tp) return out;
    const int pa = a.tracked() ? a.node : -1;
    const int pb = b.tracked() ? b.node : -1;
    out.tape = tp;
    out.node = tp->push(out.size(), [pa, pb, av = a.data, bv = b.data](
                                        Tape& t, const std::vector<double>& g) {
        if (pa >= 0) detail::axpy(t.grad_buf(pa), g, bv);
        if (pb >= 0) detail::axpy(t.grad_buf(pb), g, av);
    });
    return out;
}

// Denominators are expected to be clamped away from zero by the caller
// (probabilities pass through clamp() before any division).
inline Tensor div(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "div");
    Tensor out(a.shape, a.data);
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] /= b.data[i];
    Tape* tp = detail::result_tape(a, b);
    if (!tp) return out;
    const int pa = a.tracked() ? a.node : -1;
    const int pb = b.tracked() ? b.node : -1;
    out.tape = tp;
    out.node = tp->push(out.size(), [pa, pb, ov = out.data, bv = b.data](
                                        Tape& t, const std::vector<double>& g) {
        if (pa >= 0) {
            auto& ga = t.grad_buf(pa);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / bv[i];
        }
        if (pb >= 0) {
            auto& gb = t.grad_buf(pb);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i] * ov[i] / bv[i];
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// scalar broadcast ops (the only broadcasting supported)
// ---------------------------------------------------------------------------

namespace detail {

template <class Fwd, class Bwd>
Tensor scalar_op(const Tensor& a, Fwd fwd, Bwd bwd) {
    Tensor out(a.shape, a.data);
    for (double& v : out.data) v = fwd(v);
    if (!a.tracked()) return out;
    out.tape = a.tape;
    out.node = a.tape->push(out.size(), [pa = a.node, av = a.data, bwd](
                                            Tape& t, const std::vector<double>& g) {
        auto& ga = t.grad_buf(pa);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bwd(av[i]);
    });
    return out;
}

}  // namespace detail

inline Tensor add_scalar(const Tensor& a, double s) {
    return detail::scalar_op(a, [s](double v) { return v + s; }, [](double) { return 1.0; });
}
inline Tensor mul_scalar(const Tensor& a, double s) {
    return detail::scalar_op(a, [s](double v) { return v * s; }, [s](double) { return s; });
}
inline Tensor rsub_scalar(double s, const Tensor& a) {
    return detail::scalar_op(a, [s](double v) { return s - v; }, [](double) { return -1.0; });
}
inline Tensor rdiv_scalar(double s, const Tensor& a) {
    return detail::scalar_op(a, [s](double v) { return s / v; },
                             [s](double v) { return -s / (v * v); });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, double s) { return add_scalar(a, s); }
inline Tensor operator+(double s, const Tensor& a) { return add_scalar(a, s); }
inline Tensor operator-(const Tensor& a, double s) { return add_scalar(a, -s); }
inline Tensor operator-(double s, const Tensor& a) { return rsub_scalar(s, a); }
inline Tensor operator*(const Tensor& a, double s) { return mul_scalar(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return mul_scalar(a, s); }
inline Tensor operator/(const Tensor& a, double s) { return mul_scalar(a, 1.0 / s); }
inline Tensor operator/(double s, const Tensor& a) { return rdiv_scalar(s, a); }
inline Tensor operator-(const Tensor& a) { return mul_scalar(a, -1.0); }

// ---------------------------------------------------------------------------
// elementwise unary ops
// ---------------------------------------------------------------------------

inline Tensor log(const Tensor& a) {
    return detail::scalar_op(a, [](double v) { return std::log(v); },
                             [](double v) { return 1.0 / v; });
}

inline Tensor exp(const Tensor& a) {
    Tensor out(a.shape, a.data);
    for (double& v : out.data) v = std::exp(v);
    if (!a.tracked()) return out;
    out.tape = a.tape;
    out.node = a.tape->push(out.size(), [pa = a.node, ov = out.data](
                                            Tape& t, const std::vector<double>& g) {
        detail::axpy(t.grad_buf(pa), g, ov);
    });
    return out;
}

// 2^x, d/dx = ln(2) * 2^x
inline Tensor exp2(const Tensor& a) {
    Tensor out(a.shape, a.data);
    for (double& v : out.data) v = std::exp2(v);
    if (!a.tracked()) return out;
    out.tape = a.tape;
    out.node = a.tape->push(out.size(), [pa = a.node, ov = out.data](
                                            Tape& t, const std::vector<double>& g) {
        auto& ga = t.grad_buf(pa);
        constexpr double ln2 = 0.6931471805599453;
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * ln2 * ov[i];
    });
    return out;
}

inline Tensor relu(const Tensor& a) {
    return detail::scalar_op(a, [](double v) { return v > 0.0 ? v : 0.0; },
                             [](double v) { return v > 0.0 ? 1.0 : 0.0; });
}

// Fixed-slope PReLU.
inline Tensor prelu(const Tensor& a, double slope) {
    return detail::scalar_op(a, [slope](double v) { return v > 0.0 ? v : slope * v; },
                             [slope](double v) { return v > 0.0 ? 1.0 : slope; });
}

// Gradient is passed through inside [lo, hi] and zero where the clamp engages.
inline Tensor clamp(const Tensor& a, double lo, double hi) {
    return detail::scalar_op(
        a, [lo, hi](double v) { return std::min(std::max(v, lo), hi); },
        [lo, hi](double v) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

// Stop-gradient: same values, no tape node.
inline Tensor detach(const Tensor& a) { return Tensor(a.shape, a.data); }

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
    double acc = 0.0;
    for (double v : a.data) acc += v;
    Tensor out = Tensor::scalar(acc);
    if (!a.tracked()) return out;
    out.tape = a.tape;
    out.node = a.tape->push(1, [pa = a.node](Tape& t, const std::vector<double>& g) {
        auto& ga = t.grad_buf(pa);
        for (double& v : ga) v += g[0];
    });
    return out;
}

inline Tensor mean(const Tensor& a) {
    if (a.size() == 0) throw ContractError("mean: empty tensor");
    const double inv = 1.0 / static_cast<double>(a.size());
    double acc = 0.0;
    for (double v : a.data) acc += v;
    Tensor out = Tensor::scalar(acc * inv);
    if (!a.tracked()) return out;
    out.tape = a.tape;
    out.node = a.tape->push(1, [pa = a.node, inv](Tape& t, const std::vector<double>& g) {
        auto& ga = t.grad_buf(pa);
        for (double& v : ga) v += g[0] * inv;
    });
    return out;
}

// Per-row sum of a 2-d tensor: [N x M] -> [N].
inline Tensor row_sum(const Tensor& a) {
    const int n = a.rows(), m = a.cols();
    Tensor out = Tensor::zeros({n});
    for (int r = 0; r < n; ++r) {
        double acc = 0.0;
        for (int c = 0; c < m; ++c) acc += a.at(r, c);
        out.data[static_cast<std::size_t>(r)] = acc;
    }
    if (!a.tracked()) return out;
    out.tape = a.tape;
    out.node = a.tape->push(out.size(), [pa = a.node, n, m](Tape& t, const std::vector<double>& g) {
        auto& ga = t.grad_buf(pa);
        for (int r = 0; r < n; ++r)
            for (int c = 0; c < m; ++c) ga[static_cast<std::size_t>(r) * m + c] += g[static_cast<std::size_t>(r)];
    });
    return out;
}

// ---------------------------------------------------------------------------
// indexing
// ---------------------------------------------------------------------------

// x[N x C], idx[N] -> [N] picking x[n, idx[n]].
inline Tensor gather(const Tensor& a, const std::vector<int>& idx) {
    const int n = a.rows(), c = a.cols();
    if (static_cast<int>(idx.size()) != n) throw ShapeError("gather: index count != rows");
    Tensor out = Tensor::zeros({n});
    for (int r = 0; r < n; ++r) {
        if (idx[static_cast<std::size_t>(r)] < 0 || idx[static_cast<std::size_t>(r)] >= c)
            throw ContractError("gather: index out of range");
        out.data[static_cast<std::size_t>(r)] = a.at(r, idx[static_cast<std::size_t>(r)]);
    }
    if (!a.tracked()) return out;
    out.tape = a.tape;
    out.node = a.tape->push(out.size(), [pa = a.node, idx, c](Tape& t, const std::vector<double>& g) {
        auto& ga = t.grad_buf(pa);
        for (std::size_t r = 0; r < g.size(); ++r)
            ga[r * static_cast<std::size_t>(c) + static_cast<std::size_t>(idx[r])] += g[r];
    });
    return out;
}

// 1-d convenience: x[C], i -> scalar.
inline Tensor gather(const Tensor& a, int i) {
    if (a.shape.size() != 1) throw ShapeError("gather: expected 1-d tensor");
    if (i < 0 || i >= static_cast<int>(a.size())) throw ContractError("gather: index out of range");
    Tensor out = Tensor::scalar(a.data[static_cast<std::size_t>(i)]);
    if (!a.tracked()) return out;
    out.tape = a.tape;
    out.node = a.tape->push(1, [pa = a.node, i](Tape& t, const std::vector<double>& g) {
        t.grad_buf(pa)[static_cast<std::size_t>(i)] += g[0];
    });
    return out;
}

// Keeps entries where mask != 0. For 2-d input every row must keep the same
// number of entries so the result stays rectangular: [N x C] -> [N x K].
inline Tensor masked_select(const Tensor& a, const std::vector<std::uint8_t>& mask) {
    if (mask.size() != a.size()) throw ShapeError("masked_select: mask size mismatch");
    std::vector<std::size_t> keep;
    keep.reserve(a.size());
    std::vector<int> out_shape;
    if (a.shape.size() == 2) {
        const int n = a.rows(), c = a.cols();
        int k0 = -1;
        for (int r = 0; r < n; ++r) {
            int k = 0;
            for (int col = 0; col < c; ++col) {
                const std::size_t i = static_cast<std::size_t>(r) * c + col;
                if (mask[i]) {
                    keep.push_back(i);
                    ++k;
                }
            }
            if (k0 < 0) k0 = k;
            if (k != k0) throw ShapeError("masked_select: rows keep unequal counts");
        }
        out_shape = {n, k0 < 0 ? 0 : k0};
    } else if (a.shape.size() == 1) {
        for (std::size_t i = 0; i < a.size(); ++i)
            if (mask[i]) keep.push_back(i);
        out_shape = {static_cast<int>(keep.size())};
    } else {
        throw ShapeError("masked_select: expected 1-d or 2-d tensor");
    }
    Tensor out = Tensor::zeros(out_shape);
    for (std::size_t j = 0; j < keep.size(); ++j) out.data[j] = a.data[keep[j]];
    if (!a.tracked()) return out;
    out.tape = a.tape;
    out.node = a.tape->push(out.size(), [pa = a.node, keep](Tape& t, const std::vector<double>& g) {
        auto& ga = t.grad_buf(pa);
        for (std::size_t j = 0; j < g.size(); ++j) ga[keep[j]] += g[j];
    });
    return out;
}

// ---------------------------------------------------------------------------
// softmax family
// ---------------------------------------------------------------------------

// log softmax(z / T) over the last dimension, with max subtraction.
// d(log p_i)/d(z_j) = (delta_ij - p_j) / T per row.
inline Tensor log_softmax(const Tensor& a, double temperature) {
    if (temperature <= 0.0) throw ContractError("log_softmax: temperature must be positive");
    int n = 1, c = 0;
    if (a.shape.size() == 1) {
        c = a.shape[0];
    } else if (a.shape.size() == 2) {
        n = a.shape[0];
        c = a.shape[1];
    } else {
        throw ShapeError("log_softmax: expected 1-d or 2-d tensor");
    }
    if (c < 2) throw ContractError("log_softmax: needs at least 2 classes");
    for (double v : a.data)
        if (!std::isfinite(v)) throw NumericError("log_softmax: non-finite input");

    Tensor out(a.shape, a.data);
    std::vector<double> probs(a.size());
    for (int r = 0; r < n; ++r) {
        double* row = out.data.data() + static_cast<std::size_t>(r) * c;
        double mx = row[0];
        for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        double lse = 0.0;
        for (int j = 0; j < c; ++j) {
            row[j] = (row[j] - mx) / temperature;
            lse += std::exp(row[j]);
        }
        lse = std::log(lse);
        for (int j = 0; j < c; ++j) {
            row[j] -= lse;
            probs[static_cast<std::size_t>(r) * c + j] = std::exp(row[j]);
        }
    }
    if (!a.tracked()) return out;
    out.tape = a.tape;
    out.node = a.tape->push(
        out.size(), [pa = a.node, probs = std::move(probs), n, c, temperature](
                        Tape& t, const std::vector<double>& g) {
            auto& ga = t.grad_buf(pa);
            for (int r = 0; r < n; ++r) {
                const std::size_t off = static_cast<std::size_t>(r) * c;
                double gsum = 0.0;
                for (int j = 0; j < c; ++j) gsum += g[off + j];
                for (int j = 0; j < c; ++j)
                    ga[off + j] += (g[off + j] - probs[off + j] * gsum) / temperature;
            }
        });
    return out;
}

// log p_target per row at temperature T, fused so the target-row backward can
// be swapped out: normally d(log p_t)/d(z_t) = (1 - p_t)/T; with
// ablate_target_grad the (1 - p_t) factor is replaced by 1. Off-target
// components always use -p_j / T.
inline Tensor log_prob_target(const Tensor& a, const std::vector<int>& targets, double temperature,
                              bool ablate_target_grad = false) {
    if (temperature <= 0.0) throw ContractError("log_prob_target: temperature must be positive");
    const int n = a.rows(), c = a.cols();
    if (static_cast<int>(targets.size()) != n)
        throw ShapeError("log_prob_target: target count != rows");
    for (double v : a.data)
        if (!std::isfinite(v)) throw NumericError("log_prob_target: non-finite input");

    Tensor out = Tensor::zeros({n});
    std::vector<double> probs(a.size());
    for (int r = 0; r < n; ++r) {
        const int tgt = targets[static_cast<std::size_t>(r)];
        if (tgt < 0 || tgt >= c) throw ContractError("log_prob_target: target out of range");
        const double* row = a.data.data() + static_cast<std::size_t>(r) * c;
        double mx = row[0];
        for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        double lse = 0.0;
        for (int j = 0; j < c; ++j) lse += std::exp((row[j] - mx) / temperature);
        lse = std::log(lse);
        for (int j = 0; j < c; ++j)
            probs[static_cast<std::size_t>(r) * c + j] = std::exp((row[j] - mx) / temperature - lse);
        out.data[static_cast<std::size_t>(r)] = (row[tgt] - mx) / temperature - lse;
    }
    if (!a.tracked()) return out;
    out.tape = a.tape;
    out.node = a.tape->push(
        out.size(), [pa = a.node, probs = std::move(probs), targets, c, temperature,
                     ablate_target_grad](Tape& t, const std::vector<double>& g) {
            auto& ga = t.grad_buf(pa);
            for (std::size_t r = 0; r < g.size(); ++r) {
                const std::size_t off = r * static_cast<std::size_t>(c);
                const int tgt = targets[r];
                for (int j = 0; j < c; ++j) {
                    double local;
                    if (j == tgt)
                        local = ablate_target_grad ? 1.0 : 1.0 - probs[off + j];
                    else
                        local = -probs[off + j];
                    ga[off + j] += g[r] * local / temperature;
                }
            }
        });
    return out;
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    const int m = a.rows(), k = a.cols();
    if (b.rows() != k) throw ShapeError("matmul: inner dimensions disagree");
    const int n = b.cols();
    Tensor out = Tensor::zeros({m, n});
    detail::gemm_nn(a.data.data(), b.data.data(), out.data.data(), m, k, n);
    Tape* tp = detail::result_tape(a, b);
    if (!tp) return out;
    const int pa = a.tracked() ? a.node : -1;
    const int pb = b.tracked() ? b.node : -1;
    out.tape = tp;
    out.node = tp->push(out.size(), [pa, pb, av = a.data, bv = b.data, m, k, n](
                                        Tape& t, const std::vector<double>& g) {
        if (pa >= 0) detail::gemm_nt(g.data(), bv.data(), t.grad_buf(pa).data(), m, n, k);
        if (pb >= 0) detail::gemm_tn(av.data(), g.data(), t.grad_buf(pb).data(), m, k, n);
    });
    return out;
}

// x[N x M] + b[M], broadcast over rows (bias add).
inline Tensor add_rowvec(const Tensor& x, const Tensor& b) {
    const int n = x.rows(), m = x.cols();
    if (b.shape.size() != 1 || b.shape[0] != m) throw ShapeError("add_rowvec: bias length != cols");
    Tensor out(x.shape, x.data);
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < m; ++c) out.at(r, c) += b.data[static_cast<std::size_t>(c)];
    Tape* tp = detail::result_tape(x, b);
    if (!tp) return out;
    const int px = x.tracked() ? x.node : -1;
    const int pb = b.tracked() ? b.node : -1;
    out.tape = tp;
    out.node = tp->push(out.size(), [px, pb, n, m](Tape& t, const std::vector<double>& g) {
        if (px >= 0) {
            auto& gx = t.grad_buf(px);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        }
        if (pb >= 0) {
            auto& gb = t.grad_buf(pb);
            for (int r = 0; r < n; ++r)
                for (int c = 0; c < m; ++c) gb[static_cast<std::size_t>(c)] += g[static_cast<std::size_t>(r) * m + c];
        }
    });
    return out;
}

// Row slice of a constant tensor (dataset/batching helper, not differentiable).
inline Tensor take_rows(const Tensor& a, const std::vector<int>& idx) {
    if (a.tracked()) throw ContractError("take_rows: tracked input unsupported");
    const int c = a.cols();
    for (int r : idx)
        if (r < 0 || r >= a.rows()) throw ContractError("take_rows: row index out of range");
    Tensor out = Tensor::zeros({static_cast<int>(idx.size()), c});
    for (std::size_t r = 0; r < idx.size(); ++r)
        for (int j = 0; j < c; ++j) out.data[r * static_cast<std::size_t>(c) + j] = a.at(idx[r], j);
    return out;
}

}  // namespace kd
