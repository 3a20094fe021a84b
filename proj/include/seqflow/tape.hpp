#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "seqflow/errors.hpp"
#include "seqflow/tensor.hpp"

namespace seqflow {

// ---------------------------------------------------------------------------
// ParamStore / GradMap
// ---------------------------------------------------------------------------

// Named parameter tensors, registered up front and referenced from tapes by
// id. Keeping parameters outside the tape lets oracle code evaluate a model
// as a plain function of the store without recording anything.
class ParamStore {
public:
    int add(const std::string& name, Tensor init) {
        if (index_.count(name)) throw UsageError("ParamStore::add: duplicate name " + name);
        const int id = static_cast<int>(values_.size());
        index_[name] = id;
        names_.push_back(name);
        values_.push_back(std::move(init));
        return id;
    }

    int find(const std::string& name) const {
        auto it = index_.find(name);
        return it == index_.end() ? -1 : it->second;
    }

    int id_of(const std::string& name) const {
        const int id = find(name);
        if (id < 0) throw UsageError("ParamStore: unknown parameter " + name);
        return id;
    }

    int count() const { return static_cast<int>(values_.size()); }
    const std::string& name(int id) const { return names_.at(static_cast<size_t>(id)); }
    Tensor& value(int id) { return values_.at(static_cast<size_t>(id)); }
    const Tensor& value(int id) const { return values_.at(static_cast<size_t>(id)); }
    Tensor& value(const std::string& name) { return value(id_of(name)); }
    const Tensor& value(const std::string& name) const { return value(id_of(name)); }

    long long total_size() const {
        long long n = 0;
        for (const auto& v : values_) n += v.numel();
        return n;
    }

private:
    std::vector<std::string> names_;
    std::vector<Tensor> values_;
    std::unordered_map<std::string, int> index_;
};

// Adjoints per parameter id; zero-shaped entries for parameters the loss
// never touched.
class GradMap {
public:
    GradMap() = default;
    explicit GradMap(const ParamStore& ps) {
        grads_.reserve(static_cast<size_t>(ps.count()));
        for (int i = 0; i < ps.count(); ++i) grads_.push_back(Tensor::zeros(ps.value(i).shape()));
    }

    int count() const { return static_cast<int>(grads_.size()); }
    Tensor& at(int id) { return grads_.at(static_cast<size_t>(id)); }
    const Tensor& at(int id) const { return grads_.at(static_cast<size_t>(id)); }

    double global_norm() const {
        double s = 0.0;
        for (const auto& g : grads_)
            for (long long i = 0; i < g.numel(); ++i) s += g[i] * g[i];
        return std::sqrt(s);
    }

    void add_scaled(const GradMap& other, double scale) {
        if (other.count() != count()) throw UsageError("GradMap::add_scaled: size mismatch");
        for (int p = 0; p < count(); ++p)
            for (long long i = 0; i < grads_[p].numel(); ++i)
                grads_[static_cast<size_t>(p)][i] += scale * other.at(p)[i];
    }

    void scale(double s) {
        for (auto& g : grads_)
            for (long long i = 0; i < g.numel(); ++i) g[i] *= s;
    }

private:
    std::vector<Tensor> grads_;
};

// ---------------------------------------------------------------------------
// gemm kernels shared by forward and backward
// ---------------------------------------------------------------------------

namespace detail {

// C[m x n] += A[m x k] * B[k x n]
inline void gemm_acc(const double* A, const double* B, double* C, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* Ai = A + static_cast<size_t>(i) * k;
        double* Ci = C + static_cast<size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const double a = Ai[p];
            if (a == 0.0) continue;
            const double* Bp = B + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) Ci[j] += a * Bp[j];
        }
    }
}

// C[m x n] += A[m x k] * B[n x k]^T
inline void gemm_nt_acc(const double* A, const double* B, double* C, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* Ai = A + static_cast<size_t>(i) * k;
        double* Ci = C + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const double* Bj = B + static_cast<size_t>(j) * k;
            double s = 0.0;
            for (int p = 0; p < k; ++p) s += Ai[p] * Bj[p];
            Ci[j] += s;
        }
    }
}

// C[m x n] += A[k x m]^T * B[k x n]
inline void gemm_tn_acc(const double* A, const double* B, double* C, int m, int k, int n) {
    for (int p = 0; p < k; ++p) {
        const double* Ap = A + static_cast<size_t>(p) * m;
        const double* Bp = B + static_cast<size_t>(p) * n;
        for (int i = 0; i < m; ++i) {
            const double a = Ap[i];
            if (a == 0.0) continue;
            double* Ci = C + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) Ci[j] += a * Bp[j];
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

struct Value {
    int id = -1;
    bool valid() const { return id >= 0; }
};

// Reverse-mode tape over Tensor-valued nodes. Nodes are appended in
// evaluation order, so the creation order is already topological; backward
// walks it once in reverse. One tape serves one thread; batch parallelism
// gives each shard its own tape and sums the resulting GradMaps in a fixed
// order.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    void set_grad_enabled(bool on) { grad_enabled_ = on; }
    bool grad_enabled() const { return grad_enabled_; }

    size_t size() const { return nodes_.size(); }

    void reset() { nodes_.clear(); }

    // -- leaves ------------------------------------------------------------

    Value constant(Tensor v) { return push(std::move(v), false); }

    // Differentiable non-parameter leaf (e.g. a latent the prior term is
    // differentiated against).
    Value input(Tensor v) { return push(std::move(v), grad_enabled_); }

    Value param(const ParamStore& ps, int id) {
        Value v = push(ps.value(id), grad_enabled_);
        nodes_[static_cast<size_t>(v.id)].param_id = id;
        return v;
    }

    Value param(const ParamStore& ps, const std::string& name) { return param(ps, ps.id_of(name)); }

    // -- introspection -------------------------------------------------------

    const Tensor& val(Value v) const { return node(v).val; }

    // Adjoint of any node after backward(); zero tensor if never reached.
    Tensor grad(Value v) const {
        const Node& n = node(v);
        return n.grad.empty() ? Tensor::zeros(n.val.shape()) : n.grad;
    }

    // -- elementwise ops -----------------------------------------------------

    Value add(Value a, Value b) {
        return binary_ew(a, b, "add", [](double x, double y) { return x + y; },
                         [](Tape& t, int, const Tensor& g, Value a2, Value b2) {
                             t.acc(a2, g);
                             t.acc(b2, g);
                         });
    }

    Value sub(Value a, Value b) {
        return binary_ew(a, b, "sub", [](double x, double y) { return x - y; },
                         [](Tape& t, int, const Tensor& g, Value a2, Value b2) {
                             t.acc(a2, g);
                             t.acc_neg(b2, g);
                         });
    }

    Value mul(Value a, Value b) {
        return binary_ew(a, b, "mul", [](double x, double y) { return x * y; },
                         [](Tape& t, int, const Tensor& g, Value a2, Value b2) {
                             t.acc_mul(a2, g, t.val(b2));
                             t.acc_mul(b2, g, t.val(a2));
                         });
    }

    Value div(Value a, Value b) {
        const Tensor& x = val(a);
        const Tensor& y = val(b);
        require_same_shape(x, y, "div");
        Tensor out(x.shape());
        for (long long i = 0; i < x.numel(); ++i) out[i] = x[i] / y[i];
        check_finite(out, "div");
        Value v = push(std::move(out), needs(a) || needs(b));
        record(v, [a, b](Tape& t, int self) {
            const Tensor& g = t.nodes_[static_cast<size_t>(self)].grad;
            const Tensor& y2 = t.val(b);
            const Tensor& o = t.nodes_[static_cast<size_t>(self)].val;
            if (t.needs(a)) {
                Tensor d(g.shape());
                for (long long i = 0; i < g.numel(); ++i) d[i] = g[i] / y2[i];
                t.acc(a, d);
            }
            if (t.needs(b)) {
                Tensor d(g.shape());
                for (long long i = 0; i < g.numel(); ++i) d[i] = -g[i] * o[i] / y2[i];
                t.acc(b, d);
            }
        });
        return v;
    }

    Value neg(Value a) { return scale(a, -1.0); }

    Value scale(Value a, double c) {
        return unary_ew(a, "scale", [c](double x) { return c * x; },
                        [c](Tape& t, int self, const Tensor& g, Value a2) {
                            (void)self;
                            Tensor d(g.shape());
                            for (long long i = 0; i < g.numel(); ++i) d[i] = c * g[i];
                            t.acc(a2, d);
                        });
    }

    Value add_const(Value a, double c) {
        return unary_ew(a, "add_const", [c](double x) { return x + c; },
                        [](Tape& t, int, const Tensor& g, Value a2) { t.acc(a2, g); });
    }

    Value exp_(Value a) {
        return unary_ew(a, "exp", [](double x) { return std::exp(x); },
                        [](Tape& t, int self, const Tensor& g, Value a2) {
                            t.acc_mul(a2, g, t.nodes_[static_cast<size_t>(self)].val);
                        });
    }

    Value log_(Value a) {
        return unary_ew(a, "log", [](double x) { return std::log(x); },
                        [](Tape& t, int, const Tensor& g, Value a2) {
                            const Tensor& x = t.val(a2);
                            Tensor d(g.shape());
                            for (long long i = 0; i < g.numel(); ++i) d[i] = g[i] / x[i];
                            t.acc(a2, d);
                        });
    }

    Value tanh_(Value a) {
        return unary_ew(a, "tanh", [](double x) { return std::tanh(x); },
                        [](Tape& t, int self, const Tensor& g, Value a2) {
                            const Tensor& y = t.nodes_[static_cast<size_t>(self)].val;
                            Tensor d(g.shape());
                            for (long long i = 0; i < g.numel(); ++i) d[i] = g[i] * (1.0 - y[i] * y[i]);
                            t.acc(a2, d);
                        });
    }

    Value sigmoid(Value a) {
        return unary_ew(a, "sigmoid", [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
                        [](Tape& t, int self, const Tensor& g, Value a2) {
                            const Tensor& y = t.nodes_[static_cast<size_t>(self)].val;
                            Tensor d(g.shape());
                            for (long long i = 0; i < g.numel(); ++i) d[i] = g[i] * y[i] * (1.0 - y[i]);
                            t.acc(a2, d);
                        });
    }

    Value relu(Value a) {
        return unary_ew(a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
                        [](Tape& t, int, const Tensor& g, Value a2) {
                            const Tensor& x = t.val(a2);
                            Tensor d(g.shape());
                            for (long long i = 0; i < g.numel(); ++i) d[i] = x[i] > 0.0 ? g[i] : 0.0;
                            t.acc(a2, d);
                        });
    }

    // Hard clamp; gradient passes through strictly inside the interval.
    Value clamp(Value a, double lo, double hi) {
        return unary_ew(a, "clamp",
                        [lo, hi](double x) { return x < lo ? lo : (x > hi ? hi : x); },
                        [lo, hi](Tape& t, int, const Tensor& g, Value a2) {
                            const Tensor& x = t.val(a2);
                            Tensor d(g.shape());
                            for (long long i = 0; i < g.numel(); ++i)
                                d[i] = (x[i] > lo && x[i] < hi) ? g[i] : 0.0;
                            t.acc(a2, d);
                        });
    }

    // -- reductions ----------------------------------------------------------

    Value sum(Value a) {
        const Tensor& x = val(a);
        double s = 0.0;
        for (long long i = 0; i < x.numel(); ++i) s += x[i];
        Tensor out = Tensor::scalar(s);
        check_finite(out, "sum");
        Value v = push(std::move(out), needs(a));
        record(v, [a](Tape& t, int self) {
            const double g = t.nodes_[static_cast<size_t>(self)].grad[0];
            Tensor d = Tensor::full(t.val(a).shape(), g);
            t.acc(a, d);
        });
        return v;
    }

    Value mean(Value a) { return scale(sum(a), 1.0 / static_cast<double>(val(a).numel())); }

    // [n x c] -> [n x 1] row sums.
    Value rowsum(Value a) {
        const Tensor& x = val(a);
        const int n = x.rows(), c = x.cols();
        Tensor out({n, 1});
        for (int i = 0; i < n; ++i) {
            double s = 0.0;
            for (int j = 0; j < c; ++j) s += x.at(i, j);
            out.at(i, 0) = s;
        }
        check_finite(out, "rowsum");
        Value v = push(std::move(out), needs(a));
        record(v, [a, n, c](Tape& t, int self) {
            const Tensor& g = t.nodes_[static_cast<size_t>(self)].grad;
            Tensor d({n, c});
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < c; ++j) d.at(i, j) = g.at(i, 0);
            t.acc(a, d);
        });
        return v;
    }

    // -- linear algebra --------------------------------------------------------

    Value matmul(Value a, Value b) {
        const Tensor& A = val(a);
        const Tensor& B = val(b);
        if (A.cols() != B.rows()) throw UsageError("matmul: inner dims mismatch " + A.shape_str() + " x " + B.shape_str());
        const int m = A.rows(), k = A.cols(), n = B.cols();
        Tensor out({m, n});
        detail::gemm_acc(A.data(), B.data(), out.data(), m, k, n);
        check_finite(out, "matmul");
        Value v = push(std::move(out), needs(a) || needs(b));
        record(v, [a, b, m, k, n](Tape& t, int self) {
            const Tensor& g = t.nodes_[static_cast<size_t>(self)].grad;
            if (t.needs(a)) {
                Tensor dA({m, k});
                detail::gemm_nt_acc(g.data(), t.val(b).data(), dA.data(), m, n, k);
                t.acc(a, dA);
            }
            if (t.needs(b)) {
                Tensor dB({k, n});
                detail::gemm_tn_acc(t.val(a).data(), g.data(), dB.data(), k, m, n);
                t.acc(b, dB);
            }
        });
        return v;
    }

    // A[m x k] * B[n x k]^T -> [m x n]
    Value matmul_nt(Value a, Value b) {
        const Tensor& A = val(a);
        const Tensor& B = val(b);
        if (A.cols() != B.cols()) throw UsageError("matmul_nt: inner dims mismatch");
        const int m = A.rows(), k = A.cols(), n = B.rows();
        Tensor out({m, n});
        detail::gemm_nt_acc(A.data(), B.data(), out.data(), m, k, n);
        check_finite(out, "matmul_nt");
        Value v = push(std::move(out), needs(a) || needs(b));
        record(v, [a, b, m, k, n](Tape& t, int self) {
            const Tensor& g = t.nodes_[static_cast<size_t>(self)].grad;
            if (t.needs(a)) {
                Tensor dA({m, k});
                detail::gemm_acc(g.data(), t.val(b).data(), dA.data(), m, n, k);
                t.acc(a, dA);
            }
            if (t.needs(b)) {
                Tensor dB({n, k});
                detail::gemm_tn_acc(g.data(), t.val(a).data(), dB.data(), n, m, k);
                t.acc(b, dB);
            }
        });
        return v;
    }

    // y = x * W^T + b, x [n x in], W [out x in], b [out]. The masked variant
    // freezes the sparsity pattern of W; mask entries are 0/1 constants.
    Value linear(Value x, Value W, Value b) { return linear_impl(x, W, b, nullptr); }

    Value masked_linear(Value x, Value W, const Tensor& mask, Value b) {
        if (!mask.same_shape(val(W))) throw UsageError("masked_linear: mask shape mismatch");
        return linear_impl(x, W, b, &mask);
    }

    // -- shape ops ---------------------------------------------------------

    Value reshape(Value a, std::vector<int> shape) {
        Tensor out = val(a).reshaped(shape);
        Value v = push(std::move(out), needs(a));
        record(v, [a](Tape& t, int self) {
            const Tensor& g = t.nodes_[static_cast<size_t>(self)].grad;
            t.acc(a, g.reshaped(t.val(a).shape()));
        });
        return v;
    }

    Value concat_cols(Value a, Value b) {
        const Tensor& A = val(a);
        const Tensor& B = val(b);
        if (A.rows() != B.rows()) throw UsageError("concat_cols: row mismatch");
        const int n = A.rows(), ca = A.cols(), cb = B.cols();
        Tensor out({n, ca + cb});
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < ca; ++j) out.at(i, j) = A.at(i, j);
            for (int j = 0; j < cb; ++j) out.at(i, ca + j) = B.at(i, j);
        }
        Value v = push(std::move(out), needs(a) || needs(b));
        record(v, [a, b, n, ca, cb](Tape& t, int self) {
            const Tensor& g = t.nodes_[static_cast<size_t>(self)].grad;
            if (t.needs(a)) {
                Tensor da({n, ca});
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < ca; ++j) da.at(i, j) = g.at(i, j);
                t.acc(a, da);
            }
            if (t.needs(b)) {
                Tensor db({n, cb});
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < cb; ++j) db.at(i, j) = g.at(i, ca + j);
                t.acc(b, db);
            }
        });
        return v;
    }

    Value concat_rows(const std::vector<Value>& parts) {
        if (parts.empty()) throw UsageError("concat_rows: empty");
        int n = 0;
        const int c = val(parts[0]).cols();
        bool any_needs = false;
        for (Value p : parts) {
            if (val(p).cols() != c) throw UsageError("concat_rows: col mismatch");
            n += val(p).rows();
            any_needs = any_needs || needs(p);
        }
        Tensor out({n, c});
        int r = 0;
        for (Value p : parts) {
            const Tensor& P = val(p);
            for (int i = 0; i < P.rows(); ++i, ++r)
                for (int j = 0; j < c; ++j) out.at(r, j) = P.at(i, j);
        }
        Value v = push(std::move(out), any_needs);
        std::vector<Value> ps = parts;
        record(v, [ps, c](Tape& t, int self) {
            const Tensor& g = t.nodes_[static_cast<size_t>(self)].grad;
            int r = 0;
            for (Value p : ps) {
                const int pr = t.val(p).rows();
                if (t.needs(p)) {
                    Tensor d({pr, c});
                    for (int i = 0; i < pr; ++i)
                        for (int j = 0; j < c; ++j) d.at(i, j) = g.at(r + i, j);
                    t.acc(p, d);
                }
                r += pr;
            }
        });
        return v;
    }

    Value slice_cols(Value a, int c0, int c1) {
        const Tensor& A = val(a);
        if (c0 < 0 || c1 > A.cols() || c0 >= c1) throw UsageError("slice_cols: bad range");
        const int n = A.rows(), w = c1 - c0;
        Tensor out({n, w});
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < w; ++j) out.at(i, j) = A.at(i, c0 + j);
        Value v = push(std::move(out), needs(a));
        record(v, [a, c0, w](Tape& t, int self) {
            const Tensor& g = t.nodes_[static_cast<size_t>(self)].grad;
            const Tensor& A2 = t.val(a);
            Tensor d(A2.shape());
            for (int i = 0; i < A2.rows(); ++i)
                for (int j = 0; j < w; ++j) d.at(i, c0 + j) = g.at(i, j);
            t.acc(a, d);
        });
        return v;
    }

    Value slice_rows(Value a, int r0, int r1) {
        const Tensor& A = val(a);
        if (r0 < 0 || r1 > A.rows() || r0 >= r1) throw UsageError("slice_rows: bad range");
        const int c = A.cols(), h = r1 - r0;
        Tensor out({h, c});
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < c; ++j) out.at(i, j) = A.at(r0 + i, j);
        Value v = push(std::move(out), needs(a));
        record(v, [a, r0, h](Tape& t, int self) {
            const Tensor& g = t.nodes_[static_cast<size_t>(self)].grad;
            const Tensor& A2 = t.val(a);
            Tensor d(A2.shape());
            for (int i = 0; i < h; ++i)
                for (int j = 0; j < A2.cols(); ++j) d.at(r0 + i, j) = g.at(i, j);
            t.acc(a, d);
        });
        return v;
    }

    Value row(Value a, int r) { return slice_rows(a, r, r + 1); }

    Value reverse_rows(Value a) {
        const Tensor& A = val(a);
        const int n = A.rows(), c = A.cols();
        Tensor out({n, c});
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < c; ++j) out.at(i, j) = A.at(n - 1 - i, j);
        Value v = push(std::move(out), needs(a));
        record(v, [a, n, c](Tape& t, int self) {
            const Tensor& g = t.nodes_[static_cast<size_t>(self)].grad;
            Tensor d({n, c});
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < c; ++j) d.at(i, j) = g.at(n - 1 - i, j);
            t.acc(a, d);
        });
        return v;
    }

    // Embedding lookup: rows of W by id.
    Value gather_rows(Value W, std::vector<int> ids) {
        const Tensor& M = val(W);
        const int c = M.cols(), n = static_cast<int>(ids.size());
        for (int id : ids)
            if (id < 0 || id >= M.rows()) throw UsageError("gather_rows: id out of range");
        Tensor out({n, c});
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < c; ++j) out.at(i, j) = M.at(ids[static_cast<size_t>(i)], j);
        Value v = push(std::move(out), needs(W));
        record(v, [W, ids, c](Tape& t, int self) {
            const Tensor& g = t.nodes_[static_cast<size_t>(self)].grad;
            Tensor d(t.val(W).shape());
            for (size_t i = 0; i < ids.size(); ++i)
                for (int j = 0; j < c; ++j) d.at(ids[i], j) += g.at(static_cast<int>(i), j);
            t.acc(W, d);
        });
        return v;
    }

    // -- fused log-likelihood heads -----------------------------------------

    // Row-wise log p(target) under a categorical softmax: [n x V] logits and
    // n target ids -> [n x 1] log-probabilities.
    Value categorical_logprob(Value logits, std::vector<int> ids) {
        const Tensor& L = val(logits);
        const int n = L.rows(), V = L.cols();
        if (static_cast<int>(ids.size()) != n) throw UsageError("categorical_logprob: id count mismatch");
        Tensor out({n, 1});
        for (int i = 0; i < n; ++i) {
            if (ids[static_cast<size_t>(i)] < 0 || ids[static_cast<size_t>(i)] >= V)
                throw UsageError("categorical_logprob: target out of range");
            double mx = L.at(i, 0);
            for (int j = 1; j < V; ++j) mx = std::max(mx, L.at(i, j));
            double se = 0.0;
            for (int j = 0; j < V; ++j) se += std::exp(L.at(i, j) - mx);
            out.at(i, 0) = L.at(i, ids[static_cast<size_t>(i)]) - mx - std::log(se);
        }
        check_finite(out, "categorical_logprob");
        Value v = push(std::move(out), needs(logits));
        record(v, [logits, ids, n, V](Tape& t, int self) {
            const Tensor& g = t.nodes_[static_cast<size_t>(self)].grad;
            const Tensor& L2 = t.val(logits);
            Tensor d({n, V});
            for (int i = 0; i < n; ++i) {
                double mx = L2.at(i, 0);
                for (int j = 1; j < V; ++j) mx = std::max(mx, L2.at(i, j));
                double se = 0.0;
                for (int j = 0; j < V; ++j) se += std::exp(L2.at(i, j) - mx);
                for (int j = 0; j < V; ++j) {
                    const double p = std::exp(L2.at(i, j) - mx) / se;
                    d.at(i, j) = g.at(i, 0) * ((j == ids[static_cast<size_t>(i)] ? 1.0 : 0.0) - p);
                }
            }
            t.acc(logits, d);
        });
        return v;
    }

    // Row-wise sum of independent Bernoulli log-likelihoods: [n x K] logits
    // against observed 0/1 bits -> [n x 1].
    Value bernoulli_logprob(Value logits, const Tensor& bits) {
        const Tensor& L = val(logits);
        if (!L.same_shape(bits)) throw UsageError("bernoulli_logprob: shape mismatch");
        const int n = L.rows(), K = L.cols();
        auto softplus = [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); };
        Tensor out({n, 1});
        for (int i = 0; i < n; ++i) {
            double s = 0.0;
            for (int j = 0; j < K; ++j) {
                const double l = L.at(i, j);
                // bit*log(sig(l)) + (1-bit)*log(1-sig(l))
                s += bits.at(i, j) * l - softplus(l);
            }
            out.at(i, 0) = s;
        }
        check_finite(out, "bernoulli_logprob");
        Value v = push(std::move(out), needs(logits));
        record(v, [logits, bits, n, K](Tape& t, int self) {
            const Tensor& g = t.nodes_[static_cast<size_t>(self)].grad;
            const Tensor& L2 = t.val(logits);
            Tensor d({n, K});
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < K; ++j) {
                    const double s = 1.0 / (1.0 + std::exp(-L2.at(i, j)));
                    d.at(i, j) = g.at(i, 0) * (bits.at(i, j) - s);
                }
            t.acc(logits, d);
        });
        return v;
    }

    // -- backward ------------------------------------------------------------

    GradMap backward(Value loss, const ParamStore& ps) {
        if (!loss.valid() || node(loss).val.numel() != 1)
            throw UsageError("backward: loss must be a scalar node");
        for (auto& n : nodes_) n.grad = Tensor();
        nodes_[static_cast<size_t>(loss.id)].grad = Tensor::full(node(loss).val.shape(), 1.0);
        for (int i = loss.id; i >= 0; --i) {
            Node& n = nodes_[static_cast<size_t>(i)];
            if (!n.needs || n.grad.empty()) continue;
            if (!n.grad.all_finite())
                throw NumericError("backward: non-finite adjoint at node " + std::to_string(i));
            if (n.back) n.back(*this, i);
        }
        GradMap gm(ps);
        for (size_t i = 0; i < nodes_.size(); ++i) {
            const Node& n = nodes_[i];
            if (n.param_id >= 0 && !n.grad.empty()) {
                Tensor& dst = gm.at(n.param_id);
                for (long long k = 0; k < dst.numel(); ++k) dst[k] += n.grad[k];
            }
        }
        return gm;
    }

    bool needs(Value v) const { return node(v).needs; }

private:
    struct Node {
        Tensor val;
        Tensor grad;
        std::function<void(Tape&, int)> back;
        int param_id = -1;
        bool needs = false;
    };

    std::vector<Node> nodes_;
    bool grad_enabled_ = true;

    const Node& node(Value v) const {
        if (!v.valid() || v.id >= static_cast<int>(nodes_.size()))
            throw UsageError("Tape: invalid value handle");
        return nodes_[static_cast<size_t>(v.id)];
    }

    Value push(Tensor v, bool needs_grad) {
        Node n;
        n.val = std::move(v);
        n.needs = needs_grad && grad_enabled_;
        nodes_.push_back(std::move(n));
        return Value{static_cast<int>(nodes_.size()) - 1};
    }

    void record(Value v, std::function<void(Tape&, int)> back) {
        Node& n = nodes_[static_cast<size_t>(v.id)];
        if (n.needs) n.back = std::move(back);
    }

    static void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
        if (!a.same_shape(b))
            throw UsageError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    }

    static void check_finite(const Tensor& t, const char* op) {
        if (!t.all_finite()) throw NumericError(std::string("non-finite result in ") + op);
    }

    void acc(Value v, const Tensor& g) {
        Node& n = nodes_[static_cast<size_t>(v.id)];
        if (!n.needs) return;
        if (n.grad.empty()) n.grad = Tensor::zeros(n.val.shape());
        for (long long i = 0; i < g.numel(); ++i) n.grad[i] += g[i];
    }

    void acc_neg(Value v, const Tensor& g) {
        Node& n = nodes_[static_cast<size_t>(v.id)];
        if (!n.needs) return;
        if (n.grad.empty()) n.grad = Tensor::zeros(n.val.shape());
        for (long long i = 0; i < g.numel(); ++i) n.grad[i] -= g[i];
    }

    void acc_mul(Value v, const Tensor& g, const Tensor& w) {
        Node& n = nodes_[static_cast<size_t>(v.id)];
        if (!n.needs) return;
        if (n.grad.empty()) n.grad = Tensor::zeros(n.val.shape());
        for (long long i = 0; i < g.numel(); ++i) n.grad[i] += g[i] * w[i];
    }

    template <typename F, typename B>
    Value unary_ew(Value a, const char* name, F f, B back) {
        const Tensor& x = val(a);
        Tensor out(x.shape());
        for (long long i = 0; i < x.numel(); ++i) out[i] = f(x[i]);
        check_finite(out, name);
        Value v = push(std::move(out), needs(a));
        record(v, [a, back](Tape& t, int self) {
            back(t, self, t.nodes_[static_cast<size_t>(self)].grad, a);
        });
        return v;
    }

    template <typename F, typename B>
    Value binary_ew(Value a, Value b, const char* name, F f, B back) {
        const Tensor& x = val(a);
        const Tensor& y = val(b);
        require_same_shape(x, y, name);
        Tensor out(x.shape());
        for (long long i = 0; i < x.numel(); ++i) out[i] = f(x[i], y[i]);
        check_finite(out, name);
        Value v = push(std::move(out), needs(a) || needs(b));
        record(v, [a, b, back](Tape& t, int self) {
            back(t, self, t.nodes_[static_cast<size_t>(self)].grad, a, b);
        });
        return v;
    }

    Value linear_impl(Value x, Value W, Value b, const Tensor* mask) {
        const Tensor& X = val(x);
        const Tensor& Wm = val(W);
        const Tensor& bv = val(b);
        if (X.cols() != Wm.cols()) throw UsageError("linear: input width mismatch");
        if (bv.numel() != Wm.rows()) throw UsageError("linear: bias size mismatch");
        const int n = X.rows(), in = X.cols(), out_w = Wm.rows();
        Tensor Weff = Wm;
        if (mask) {
            for (long long i = 0; i < Weff.numel(); ++i) Weff[i] *= (*mask)[i];
        }
        Tensor out({n, out_w});
        detail::gemm_nt_acc(X.data(), Weff.data(), out.data(), n, in, out_w);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < out_w; ++j) out.at(i, j) += bv[j];
        check_finite(out, "linear");
        Value v = push(std::move(out), needs(x) || needs(W) || needs(b));
        Tensor mask_copy = mask ? *mask : Tensor();
        record(v, [x, W, b, mask_copy, n, in, out_w](Tape& t, int self) {
            const Tensor& g = t.nodes_[static_cast<size_t>(self)].grad;
            Tensor Weff = t.val(W);
            if (!mask_copy.empty())
                for (long long i = 0; i < Weff.numel(); ++i) Weff[i] *= mask_copy[i];
            if (t.needs(x)) {
                Tensor dx({n, in});
                detail::gemm_acc(g.data(), Weff.data(), dx.data(), n, out_w, in);
                t.acc(x, dx);
            }
            if (t.needs(W)) {
                Tensor dW({out_w, in});
                detail::gemm_tn_acc(g.data(), t.val(x).data(), dW.data(), out_w, n, in);
                if (!mask_copy.empty())
                    for (long long i = 0; i < dW.numel(); ++i) dW[i] *= mask_copy[i];
                t.acc(W, dW);
            }
            if (t.needs(b)) {
                Tensor db(t.val(b).shape());
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < out_w; ++j) db[j] += g.at(i, j);
                t.acc(b, db);
            }
        });
        return v;
    }
};

}  // namespace seqflow
