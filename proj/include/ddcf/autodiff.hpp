#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ddcf/sparse.hpp"
#include "ddcf/tensor.hpp"

namespace ddcf {

class UsageError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// Named trainable array with its accumulated gradient.
struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;

    Parameter() = default;
    Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

    void zero_grad() {
        if (grad.shape() != value.shape()) {
            grad = Tensor(value.shape());
        } else {
            grad.fill(0.0);
        }
    }
};

class Tape;

/// Handle to a node recorded on a Tape.
class Var {
public:
    Var() = default;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    std::size_t id() const { return id_; }
    Tape* tape() const { return tape_; }
    const Tensor& value() const;

private:
    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

/// Linear record of tensor operations. Nodes are appended in evaluation order,
/// so the reverse of insertion order is a valid reverse topological order.
class Tape {
public:
    using Backward = std::function<void(Tape&, const Tensor& grad_out)>;

    Var constant(Tensor value) { return push(std::move(value), false, nullptr, nullptr); }

    Var variable(Tensor value) { return push(std::move(value), true, nullptr, nullptr); }

    /// Binds a parameter as a leaf. Repeated binds of the same parameter on
    /// one tape return the same node.
    Var parameter(Parameter& p) {
        auto it = bound_.find(&p);
        if (it != bound_.end()) {
            return Var(this, it->second);
        }
        Var v = push(p.value, true, nullptr, &p);
        bound_.emplace(&p, v.id());
        return v;
    }

    /// Records a derived node. `fn` is dropped when no input needs a gradient.
    Var record(Tensor value, bool requires_grad, Backward fn) {
        if (!value.all_finite()) {
            throw std::runtime_error("non-finite value produced on tape (node " + std::to_string(nodes_.size())
                                     + ")");
        }
        return push(std::move(value), requires_grad, requires_grad ? std::move(fn) : nullptr, nullptr);
    }

    const Tensor& value(std::size_t id) const { return nodes_[id].value; }
    bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
    bool requires_grad(Var v) const { return nodes_[v.id()].requires_grad; }

    /// Gradient buffer of a node, zero-initialised on first access.
    Tensor& grad_buffer(std::size_t id) {
        Node& n = nodes_[id];
        if (!n.has_grad) {
            n.grad = Tensor(n.value.shape());
            n.has_grad = true;
        }
        return n.grad;
    }

    /// Gradient after backward(); nullptr if the node received none.
    const Tensor* grad(Var v) const {
        const Node& n = nodes_[v.id()];
        return n.has_grad ? &n.grad : nullptr;
    }

    std::size_t size() const { return nodes_.size(); }

    /// Reverse sweep from a scalar loss. Gradients of parameter leaves are
    /// added into the bound Parameter::grad.
    void backward(Var loss) {
        if (loss.tape() != this) {
            throw UsageError("backward: loss node belongs to a different tape");
        }
        if (nodes_[loss.id()].value.size() != 1) {
            throw UsageError("backward: loss must be a scalar, got shape "
                             + shape_string(nodes_[loss.id()].value.shape()));
        }
        grad_buffer(loss.id())[0] = 1.0;
        for (std::size_t id = loss.id() + 1; id-- > 0;) {
            Node& n = nodes_[id];
            if (!n.has_grad) {
                continue;
            }
            if (n.backward) {
                n.backward(*this, n.grad);
            }
            if (n.bound != nullptr) {
                Parameter& p = *n.bound;
                if (p.grad.shape() != p.value.shape()) {
                    p.grad = Tensor(p.value.shape());
                }
                auto& dst = p.grad.values();
                const auto& src = n.grad.values();
                for (std::size_t i = 0; i < dst.size(); i++) {
                    dst[i] += src[i];
                }
            }
        }
    }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool has_grad = false;
        bool requires_grad = false;
        Backward backward;
        Parameter* bound = nullptr;
    };

    Var push(Tensor value, bool requires_grad, Backward fn, Parameter* bound) {
        nodes_.push_back(Node{std::move(value), Tensor{}, false, requires_grad, std::move(fn), bound});
        return Var(this, nodes_.size() - 1);
    }

    std::vector<Node> nodes_;
    std::unordered_map<const Parameter*, std::size_t> bound_;
};

inline const Tensor& Var::value() const {
    return tape_->value(id_);
}

namespace op {

namespace detail {

inline void accumulate(Tape& t, std::size_t id, const Tensor& g) {
    if (!t.requires_grad(id)) {
        return;
    }
    auto& dst = t.grad_buffer(id).values();
    const auto& src = g.values();
    for (std::size_t i = 0; i < dst.size(); i++) {
        dst[i] += src[i];
    }
}

} // namespace detail

inline Var stop_gradient(Var a) {
    return a.tape()->constant(a.value());
}

inline Var matmul(Var a, Var b) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.cols() != bv.rows()) {
        throw ShapeError("matmul: " + shape_string(av.shape()) + " x " + shape_string(bv.shape()));
    }
    std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
    Tensor out(Shape{m, n});
    for (std::size_t i = 0; i < m; i++) {
        auto orow = out.row(i);
        for (std::size_t p = 0; p < k; p++) {
            double x = av.at(i, p);
            if (x == 0.0) {
                continue;
            }
            auto brow = bv.row(p);
            for (std::size_t j = 0; j < n; j++) {
                orow[j] += x * brow[j];
            }
        }
    }
    Tape& t = *a.tape();
    bool rg = t.requires_grad(a) || t.requires_grad(b);
    std::size_t ai = a.id(), bi = b.id();
    return t.record(std::move(out), rg, [ai, bi, m, k, n](Tape& t, const Tensor& g) {
        const Tensor& av = t.value(ai);
        const Tensor& bv = t.value(bi);
        if (t.requires_grad(ai)) {
            Tensor& ga = t.grad_buffer(ai);
            for (std::size_t i = 0; i < m; i++) {
                auto grow = g.row(i);
                for (std::size_t p = 0; p < k; p++) {
                    ga.at(i, p) += dot(grow, bv.row(p));
                }
            }
        }
        if (t.requires_grad(bi)) {
            Tensor& gb = t.grad_buffer(bi);
            for (std::size_t i = 0; i < m; i++) {
                auto grow = g.row(i);
                for (std::size_t p = 0; p < k; p++) {
                    double x = av.at(i, p);
                    if (x == 0.0) {
                        continue;
                    }
                    auto gbrow = gb.row(p);
                    for (std::size_t j = 0; j < n; j++) {
                        gbrow[j] += x * grow[j];
                    }
                }
            }
        }
    });
}

/// a * b^T for a [m x k], b [n x k].
inline Var matmul_nt(Var a, Var b) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.cols() != bv.cols()) {
        throw ShapeError("matmul_nt: " + shape_string(av.shape()) + " x " + shape_string(bv.shape()) + "^T");
    }
    std::size_t m = av.rows(), n = bv.rows();
    Tensor out(Shape{m, n});
    for (std::size_t i = 0; i < m; i++) {
        for (std::size_t j = 0; j < n; j++) {
            out.at(i, j) = dot(av.row(i), bv.row(j));
        }
    }
    Tape& t = *a.tape();
    bool rg = t.requires_grad(a) || t.requires_grad(b);
    std::size_t ai = a.id(), bi = b.id();
    return t.record(std::move(out), rg, [ai, bi, m, n](Tape& t, const Tensor& g) {
        const Tensor& av = t.value(ai);
        const Tensor& bv = t.value(bi);
        bool ga_on = t.requires_grad(ai);
        bool gb_on = t.requires_grad(bi);
        for (std::size_t i = 0; i < m; i++) {
            for (std::size_t j = 0; j < n; j++) {
                double gij = g.at(i, j);
                if (gij == 0.0) {
                    continue;
                }
                if (ga_on) {
                    auto dst = t.grad_buffer(ai).row(i);
                    auto src = bv.row(j);
                    for (std::size_t p = 0; p < dst.size(); p++) {
                        dst[p] += gij * src[p];
                    }
                }
                if (gb_on) {
                    auto dst = t.grad_buffer(bi).row(j);
                    auto src = av.row(i);
                    for (std::size_t p = 0; p < dst.size(); p++) {
                        dst[p] += gij * src[p];
                    }
                }
            }
        }
    });
}

/// rows [B sparse M-vectors] times w [M x h] -> [B x h]. The sparse operand
/// is a constant; only w receives gradient.
inline Var sparse_matmul(std::shared_ptr<const std::vector<SparseRow>> rows, Var w) {
    const Tensor& wv = w.value();
    std::size_t h = wv.cols();
    std::size_t b = rows->size();
    Tensor out(Shape{b, h});
    for (std::size_t r = 0; r < b; r++) {
        const SparseRow& row = (*rows)[r];
        auto orow = out.row(r);
        for (std::size_t e = 0; e < row.nnz(); e++) {
            if (row.indices[e] >= wv.rows()) {
                throw ShapeError("sparse_matmul: column " + std::to_string(row.indices[e])
                                 + " out of range for weight " + shape_string(wv.shape()));
            }
            auto wrow = wv.row(row.indices[e]);
            double x = row.values[e];
            for (std::size_t j = 0; j < h; j++) {
                orow[j] += x * wrow[j];
            }
        }
    }
    Tape& t = *w.tape();
    std::size_t wi = w.id();
    return t.record(std::move(out), t.requires_grad(w), [wi, rows](Tape& t, const Tensor& g) {
        Tensor& gw = t.grad_buffer(wi);
        for (std::size_t r = 0; r < rows->size(); r++) {
            const SparseRow& row = (*rows)[r];
            auto grow = g.row(r);
            for (std::size_t e = 0; e < row.nnz(); e++) {
                auto dst = gw.row(row.indices[e]);
                double x = row.values[e];
                for (std::size_t j = 0; j < dst.size(); j++) {
                    dst[j] += x * grow[j];
                }
            }
        }
    });
}

/// a [m x n] + bias broadcast over rows; bias is [n] or [1 x n].
inline Var add_row(Var a, Var bias) {
    const Tensor& av = a.value();
    const Tensor& bv = bias.value();
    if (bv.size() != av.cols()) {
        throw ShapeError("add_row: " + shape_string(av.shape()) + " + " + shape_string(bv.shape()));
    }
    Tensor out = av;
    for (std::size_t i = 0; i < out.rows(); i++) {
        auto r = out.row(i);
        for (std::size_t j = 0; j < r.size(); j++) {
            r[j] += bv[j];
        }
    }
    Tape& t = *a.tape();
    std::size_t ai = a.id(), bi = bias.id();
    return t.record(std::move(out), t.requires_grad(a) || t.requires_grad(bias), [ai, bi](Tape& t, const Tensor& g) {
        detail::accumulate(t, ai, g);
        if (t.requires_grad(bi)) {
            Tensor& gb = t.grad_buffer(bi);
            for (std::size_t i = 0; i < g.rows(); i++) {
                auto r = g.row(i);
                for (std::size_t j = 0; j < r.size(); j++) {
                    gb[j] += r[j];
                }
            }
        }
    });
}

inline Var add(Var a, Var b) {
    require_same_shape(a.value(), b.value(), "add");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); i++) {
        out[i] += b.value()[i];
    }
    Tape& t = *a.tape();
    std::size_t ai = a.id(), bi = b.id();
    return t.record(std::move(out), t.requires_grad(a) || t.requires_grad(b), [ai, bi](Tape& t, const Tensor& g) {
        detail::accumulate(t, ai, g);
        detail::accumulate(t, bi, g);
    });
}

inline Var sub(Var a, Var b) {
    require_same_shape(a.value(), b.value(), "sub");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); i++) {
        out[i] -= b.value()[i];
    }
    Tape& t = *a.tape();
    std::size_t ai = a.id(), bi = b.id();
    return t.record(std::move(out), t.requires_grad(a) || t.requires_grad(b), [ai, bi](Tape& t, const Tensor& g) {
        detail::accumulate(t, ai, g);
        if (t.requires_grad(bi)) {
            auto& dst = t.grad_buffer(bi).values();
            for (std::size_t i = 0; i < dst.size(); i++) {
                dst[i] -= g[i];
            }
        }
    });
}

inline Var mul(Var a, Var b) {
    require_same_shape(a.value(), b.value(), "mul");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); i++) {
        out[i] *= b.value()[i];
    }
    Tape& t = *a.tape();
    std::size_t ai = a.id(), bi = b.id();
    return t.record(std::move(out), t.requires_grad(a) || t.requires_grad(b), [ai, bi](Tape& t, const Tensor& g) {
        if (t.requires_grad(ai)) {
            auto& dst = t.grad_buffer(ai).values();
            const Tensor& bv = t.value(bi);
            for (std::size_t i = 0; i < dst.size(); i++) {
                dst[i] += g[i] * bv[i];
            }
        }
        if (t.requires_grad(bi)) {
            auto& dst = t.grad_buffer(bi).values();
            const Tensor& av = t.value(ai);
            for (std::size_t i = 0; i < dst.size(); i++) {
                dst[i] += g[i] * av[i];
            }
        }
    });
}

inline Var scale(Var a, double c) {
    Tensor out = a.value();
    for (auto& v : out.values()) {
        v *= c;
    }
    Tape& t = *a.tape();
    std::size_t ai = a.id();
    return t.record(std::move(out), t.requires_grad(a), [ai, c](Tape& t, const Tensor& g) {
        auto& dst = t.grad_buffer(ai).values();
        for (std::size_t i = 0; i < dst.size(); i++) {
            dst[i] += c * g[i];
        }
    });
}

inline Var tanh(Var a) {
    Tensor out = a.value();
    for (auto& v : out.values()) {
        v = std::tanh(v);
    }
    Tape& t = *a.tape();
    std::size_t ai = a.id();
    std::size_t oi = t.size();
    return t.record(std::move(out), t.requires_grad(a), [ai, oi](Tape& t, const Tensor& g) {
        auto& dst = t.grad_buffer(ai).values();
        const Tensor& y = t.value(oi);
        for (std::size_t i = 0; i < dst.size(); i++) {
            dst[i] += g[i] * (1.0 - y[i] * y[i]);
        }
    });
}

inline Var exp(Var a) {
    Tensor out = a.value();
    for (auto& v : out.values()) {
        v = std::exp(v);
    }
    Tape& t = *a.tape();
    std::size_t ai = a.id();
    std::size_t oi = t.size();
    return t.record(std::move(out), t.requires_grad(a), [ai, oi](Tape& t, const Tensor& g) {
        auto& dst = t.grad_buffer(ai).values();
        const Tensor& y = t.value(oi);
        for (std::size_t i = 0; i < dst.size(); i++) {
            dst[i] += g[i] * y[i];
        }
    });
}

/// Row-wise softmax of a / tau.
inline Var softmax_rows(Var a, double tau) {
    if (!(tau > 0.0)) {
        throw ParameterError("softmax temperature must be positive, got " + std::to_string(tau));
    }
    const Tensor& av = a.value();
    Tensor out(av.shape());
    for (std::size_t i = 0; i < av.rows(); i++) {
        auto in = av.row(i);
        auto o = out.row(i);
        double mx = *std::max_element(in.begin(), in.end());
        double z = 0.0;
        for (std::size_t j = 0; j < in.size(); j++) {
            o[j] = std::exp((in[j] - mx) / tau);
            z += o[j];
        }
        for (double& v : o) {
            v /= z;
        }
    }
    Tape& t = *a.tape();
    std::size_t ai = a.id();
    std::size_t oi = t.size();
    return t.record(std::move(out), t.requires_grad(a), [ai, oi, tau](Tape& t, const Tensor& g) {
        const Tensor& y = t.value(oi);
        Tensor& ga = t.grad_buffer(ai);
        for (std::size_t i = 0; i < y.rows(); i++) {
            auto yr = y.row(i);
            auto gr = g.row(i);
            double s = dot(yr, gr);
            auto dst = ga.row(i);
            for (std::size_t j = 0; j < yr.size(); j++) {
                dst[j] += yr[j] * (gr[j] - s) / tau;
            }
        }
    });
}

/// Column-wise softmax: every column of the result sums to one.
inline Var softmax_cols(Var a) {
    const Tensor& av = a.value();
    std::size_t m = av.rows(), k = av.cols();
    Tensor out(av.shape());
    for (std::size_t c = 0; c < k; c++) {
        double mx = av.at(0, c);
        for (std::size_t r = 1; r < m; r++) {
            mx = std::max(mx, av.at(r, c));
        }
        double z = 0.0;
        for (std::size_t r = 0; r < m; r++) {
            out.at(r, c) = std::exp(av.at(r, c) - mx);
            z += out.at(r, c);
        }
        for (std::size_t r = 0; r < m; r++) {
            out.at(r, c) /= z;
        }
    }
    Tape& t = *a.tape();
    std::size_t ai = a.id();
    std::size_t oi = t.size();
    return t.record(std::move(out), t.requires_grad(a), [ai, oi, m, k](Tape& t, const Tensor& g) {
        const Tensor& y = t.value(oi);
        Tensor& ga = t.grad_buffer(ai);
        for (std::size_t c = 0; c < k; c++) {
            double s = 0.0;
            for (std::size_t r = 0; r < m; r++) {
                s += y.at(r, c) * g.at(r, c);
            }
            for (std::size_t r = 0; r < m; r++) {
                ga.at(r, c) += y.at(r, c) * (g.at(r, c) - s);
            }
        }
    });
}

inline Var slice_cols(Var a, std::size_t begin, std::size_t end) {
    const Tensor& av = a.value();
    if (begin >= end || end > av.cols()) {
        throw ShapeError("slice_cols: [" + std::to_string(begin) + ", " + std::to_string(end) + ") of "
                         + shape_string(av.shape()));
    }
    std::size_t w = end - begin;
    Tensor out(Shape{av.rows(), w});
    for (std::size_t i = 0; i < av.rows(); i++) {
        for (std::size_t j = 0; j < w; j++) {
            out.at(i, j) = av.at(i, begin + j);
        }
    }
    Tape& t = *a.tape();
    std::size_t ai = a.id();
    return t.record(std::move(out), t.requires_grad(a), [ai, begin, w](Tape& t, const Tensor& g) {
        Tensor& ga = t.grad_buffer(ai);
        for (std::size_t i = 0; i < g.rows(); i++) {
            for (std::size_t j = 0; j < w; j++) {
                ga.at(i, begin + j) += g.at(i, j);
            }
        }
    });
}

inline Var gather_rows(Var a, std::vector<std::size_t> idx) {
    const Tensor& av = a.value();
    std::size_t c = av.cols();
    Tensor out(Shape{idx.size(), c});
    for (std::size_t i = 0; i < idx.size(); i++) {
        if (idx[i] >= av.rows()) {
            throw ShapeError("gather_rows: row " + std::to_string(idx[i]) + " out of range for "
                             + shape_string(av.shape()));
        }
        auto src = av.row(idx[i]);
        std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    Tape& t = *a.tape();
    std::size_t ai = a.id();
    return t.record(std::move(out), t.requires_grad(a), [ai, idx = std::move(idx)](Tape& t, const Tensor& g) {
        Tensor& ga = t.grad_buffer(ai);
        for (std::size_t i = 0; i < idx.size(); i++) {
            auto dst = ga.row(idx[i]);
            auto src = g.row(i);
            for (std::size_t j = 0; j < dst.size(); j++) {
                dst[j] += src[j];
            }
        }
    });
}

inline Var sum(Var a) {
    double s = 0.0;
    for (double v : a.value().values()) {
        s += v;
    }
    Tape& t = *a.tape();
    std::size_t ai = a.id();
    return t.record(Tensor::scalar(s), t.requires_grad(a), [ai](Tape& t, const Tensor& g) {
        for (auto& v : t.grad_buffer(ai).values()) {
            v += g[0];
        }
    });
}

/// sum_i coeffs[i] * terms[i] over scalar terms.
inline Var weighted_sum(const std::vector<Var>& terms, const std::vector<double>& coeffs) {
    if (terms.empty() || terms.size() != coeffs.size()) {
        throw ShapeError("weighted_sum: term/coefficient count mismatch");
    }
    Tape& t = *terms.front().tape();
    double s = 0.0;
    bool rg = false;
    std::vector<std::size_t> ids;
    for (std::size_t i = 0; i < terms.size(); i++) {
        s += coeffs[i] * terms[i].value().item();
        rg = rg || t.requires_grad(terms[i]);
        ids.push_back(terms[i].id());
    }
    return t.record(Tensor::scalar(s), rg, [ids, coeffs](Tape& t, const Tensor& g) {
        for (std::size_t i = 0; i < ids.size(); i++) {
            if (t.requires_grad(ids[i])) {
                t.grad_buffer(ids[i])[0] += coeffs[i] * g[0];
            }
        }
    });
}

/// mu + noise * exp(logvar / 2), elementwise.
inline Var reparameterize(Var mu, Var logvar, Tensor noise) {
    require_same_shape(mu.value(), logvar.value(), "reparameterize");
    require_same_shape(mu.value(), noise, "reparameterize");
    Tensor out = mu.value();
    for (std::size_t i = 0; i < out.size(); i++) {
        out[i] += noise[i] * std::exp(0.5 * logvar.value()[i]);
    }
    Tape& t = *mu.tape();
    std::size_t mi = mu.id(), li = logvar.id();
    return t.record(std::move(out), t.requires_grad(mu) || t.requires_grad(logvar),
                    [mi, li, noise = std::move(noise)](Tape& t, const Tensor& g) {
                        detail::accumulate(t, mi, g);
                        if (t.requires_grad(li)) {
                            auto& dst = t.grad_buffer(li).values();
                            const Tensor& lv = t.value(li);
                            for (std::size_t i = 0; i < dst.size(); i++) {
                                dst[i] += g[i] * noise[i] * 0.5 * std::exp(0.5 * lv[i]);
                            }
                        }
                    });
}

/// Sum over rows of KL( N(mu, diag(exp(logvar))) || N(prior_mu, diag(prior_var)) ).
inline Var gaussian_kl(Var mu, Var logvar, std::vector<double> prior_mu, std::vector<double> prior_var) {
    const Tensor& m = mu.value();
    const Tensor& lv = logvar.value();
    require_same_shape(m, lv, "gaussian_kl");
    if (prior_mu.size() != m.cols() || prior_var.size() != m.cols()) {
        throw ShapeError("gaussian_kl: prior dimension " + std::to_string(prior_mu.size()) + " vs posterior "
                         + shape_string(m.shape()));
    }
    double kl = 0.0;
    for (std::size_t i = 0; i < m.rows(); i++) {
        for (std::size_t k = 0; k < m.cols(); k++) {
            double diff = prior_mu[k] - m.at(i, k);
            kl += diff * diff / prior_var[k] + std::exp(lv.at(i, k)) / prior_var[k] + std::log(prior_var[k])
                  - lv.at(i, k) - 1.0;
        }
    }
    Tape& t = *mu.tape();
    std::size_t mi = mu.id(), li = logvar.id();
    return t.record(Tensor::scalar(0.5 * kl), t.requires_grad(mu) || t.requires_grad(logvar),
                    [mi, li, prior_mu = std::move(prior_mu), prior_var = std::move(prior_var)](Tape& t,
                                                                                              const Tensor& g) {
                        const Tensor& m = t.value(mi);
                        const Tensor& lv = t.value(li);
                        bool gm = t.requires_grad(mi);
                        bool gl = t.requires_grad(li);
                        for (std::size_t i = 0; i < m.rows(); i++) {
                            for (std::size_t k = 0; k < m.cols(); k++) {
                                if (gm) {
                                    t.grad_buffer(mi).at(i, k) += g[0] * (m.at(i, k) - prior_mu[k]) / prior_var[k];
                                }
                                if (gl) {
                                    t.grad_buffer(li).at(i, k) +=
                                        g[0] * 0.5 * (std::exp(lv.at(i, k)) / prior_var[k] - 1.0);
                                }
                            }
                        }
                    });
}

/// -sum_b sum_{j in rows[b]} x_bj * log max((beta gamma_b)_j, floor) for
/// gamma [B x K] and beta [M x K].
inline Var mixture_nll(Var gamma, Var beta, std::shared_ptr<const std::vector<SparseRow>> rows, double floor) {
    const Tensor& gv = gamma.value();
    const Tensor& bv = beta.value();
    if (gv.cols() != bv.cols() || rows->size() != gv.rows()) {
        throw ShapeError("mixture_nll: gamma " + shape_string(gv.shape()) + ", beta " + shape_string(bv.shape())
                         + ", rows " + std::to_string(rows->size()));
    }
    double loss = 0.0;
    for (std::size_t b = 0; b < rows->size(); b++) {
        const SparseRow& row = (*rows)[b];
        for (std::size_t e = 0; e < row.nnz(); e++) {
            double p = dot(gv.row(b), bv.row(row.indices[e]));
            loss -= row.values[e] * std::log(std::max(p, floor));
        }
    }
    Tape& t = *gamma.tape();
    std::size_t gi = gamma.id(), bi = beta.id();
    return t.record(Tensor::scalar(loss), t.requires_grad(gamma) || t.requires_grad(beta),
                    [gi, bi, rows, floor](Tape& t, const Tensor& g) {
                        const Tensor& gv = t.value(gi);
                        const Tensor& bv = t.value(bi);
                        bool gg = t.requires_grad(gi);
                        bool gb = t.requires_grad(bi);
                        for (std::size_t b = 0; b < rows->size(); b++) {
                            const SparseRow& row = (*rows)[b];
                            for (std::size_t e = 0; e < row.nnz(); e++) {
                                Index j = row.indices[e];
                                double p = dot(gv.row(b), bv.row(j));
                                if (p <= floor) {
                                    continue;
                                }
                                double dp = -g[0] * row.values[e] / p;
                                if (gg) {
                                    auto dst = t.grad_buffer(gi).row(b);
                                    auto src = bv.row(j);
                                    for (std::size_t k = 0; k < dst.size(); k++) {
                                        dst[k] += dp * src[k];
                                    }
                                }
                                if (gb) {
                                    auto dst = t.grad_buffer(bi).row(j);
                                    auto src = gv.row(b);
                                    for (std::size_t k = 0; k < dst.size(); k++) {
                                        dst[k] += dp * src[k];
                                    }
                                }
                            }
                        }
                    });
}

/// sum_b sum_{q in rows[b]} w_bq * KL(phi_q || gamma_b) with phi [Q x K] on the
/// tape and gamma [B x K] a plain tensor: the reference side never receives
/// gradient.
inline Var categorical_kl(Var phi, Tensor gamma, std::shared_ptr<const std::vector<SparseRow>> rows, double floor) {
    const Tensor& pv = phi.value();
    if (pv.cols() != gamma.cols() || rows->size() != gamma.rows()) {
        throw ShapeError("categorical_kl: phi " + shape_string(pv.shape()) + ", gamma " + shape_string(gamma.shape()));
    }
    double loss = 0.0;
    for (std::size_t b = 0; b < rows->size(); b++) {
        const SparseRow& row = (*rows)[b];
        for (std::size_t e = 0; e < row.nnz(); e++) {
            auto p = pv.row(row.indices[e]);
            double term = 0.0;
            for (std::size_t k = 0; k < p.size(); k++) {
                term += p[k] * (std::log(std::max(p[k], floor)) - std::log(std::max(gamma.at(b, k), floor)));
            }
            loss += row.values[e] * term;
        }
    }
    Tape& t = *phi.tape();
    std::size_t pi = phi.id();
    return t.record(Tensor::scalar(loss), t.requires_grad(phi),
                    [pi, rows, floor, gamma = std::move(gamma)](Tape& t, const Tensor& g) {
                        const Tensor& pv = t.value(pi);
                        Tensor& gp = t.grad_buffer(pi);
                        for (std::size_t b = 0; b < rows->size(); b++) {
                            const SparseRow& row = (*rows)[b];
                            for (std::size_t e = 0; e < row.nnz(); e++) {
                                Index q = row.indices[e];
                                auto p = pv.row(q);
                                auto dst = gp.row(q);
                                double w = g[0] * row.values[e];
                                for (std::size_t k = 0; k < p.size(); k++) {
                                    double d = p[k] > floor ? std::log(p[k]) + 1.0 : std::log(floor);
                                    dst[k] += w * (d - std::log(std::max(gamma.at(b, k), floor)));
                                }
                            }
                        }
                    });
}

/// For every row r of u [R x d] and every item j listed in pairs[r], emits
/// u_r . v_j where v is [d x M]; output is flattened in pair order.
inline Var pair_dot(Var u, Var v, std::shared_ptr<const std::vector<SparseRow>> pairs) {
    const Tensor& uv = u.value();
    const Tensor& vv = v.value();
    if (uv.cols() != vv.rows() || pairs->size() != uv.rows()) {
        throw ShapeError("pair_dot: u " + shape_string(uv.shape()) + ", v " + shape_string(vv.shape()));
    }
    std::size_t d = uv.cols();
    std::size_t total = 0;
    for (const auto& row : *pairs) {
        total += row.nnz();
    }
    Tensor out(Shape{total});
    std::size_t p = 0;
    for (std::size_t r = 0; r < pairs->size(); r++) {
        auto ur = uv.row(r);
        for (Index j : (*pairs)[r].indices) {
            double s = 0.0;
            for (std::size_t k = 0; k < d; k++) {
                s += ur[k] * vv.at(k, j);
            }
            out[p++] = s;
        }
    }
    Tape& t = *u.tape();
    std::size_t ui = u.id(), vi = v.id();
    return t.record(std::move(out), t.requires_grad(u) || t.requires_grad(v), [ui, vi, pairs, d](Tape& t,
                                                                                             const Tensor& g) {
        const Tensor& uv = t.value(ui);
        const Tensor& vv = t.value(vi);
        bool gu = t.requires_grad(ui);
        bool gv = t.requires_grad(vi);
        std::size_t p = 0;
        for (std::size_t r = 0; r < pairs->size(); r++) {
            auto ur = uv.row(r);
            for (Index j : (*pairs)[r].indices) {
                double gp = g[p++];
                if (gp == 0.0) {
                    continue;
                }
                for (std::size_t k = 0; k < d; k++) {
                    if (gu) {
                        t.grad_buffer(ui).at(r, k) += gp * vv.at(k, j);
                    }
                    if (gv) {
                        t.grad_buffer(vi).at(k, j) += gp * ur[k];
                    }
                }
            }
        }
    });
}

/// sum_i (pred_i - target_i)^2.
inline Var squared_error(Var pred, Tensor target) {
    if (pred.value().size() != target.size()) {
        throw ShapeError("squared_error: " + shape_string(pred.value().shape()) + " vs " + shape_string(target.shape()));
    }
    double loss = 0.0;
    for (std::size_t i = 0; i < target.size(); i++) {
        double r = pred.value()[i] - target[i];
        loss += r * r;
    }
    Tape& t = *pred.tape();
    std::size_t pi = pred.id();
    return t.record(Tensor::scalar(loss), t.requires_grad(pred), [pi, target = std::move(target)](Tape& t,
                                                                                               const Tensor& g) {
        auto& dst = t.grad_buffer(pi).values();
        const Tensor& p = t.value(pi);
        for (std::size_t i = 0; i < dst.size(); i++) {
            dst[i] += g[0] * 2.0 * (p[i] - target[i]);
        }
    });
}

/// Rows scaled to unit L2 norm; zero rows stay zero.
inline Var normalize_rows(Var a) {
    const Tensor& av = a.value();
    Tensor out = av;
    std::vector<double> norms(av.rows());
    for (std::size_t i = 0; i < av.rows(); i++) {
        norms[i] = norm(av.row(i));
        if (norms[i] > 0.0) {
            for (double& v : out.row(i)) {
                v /= norms[i];
            }
        }
    }
    Tape& t = *a.tape();
    std::size_t ai = a.id();
    std::size_t oi = t.size();
    return t.record(std::move(out), t.requires_grad(a), [ai, oi, norms = std::move(norms)](Tape& t, const Tensor& g) {
        const Tensor& y = t.value(oi);
        Tensor& ga = t.grad_buffer(ai);
        for (std::size_t i = 0; i < y.rows(); i++) {
            if (norms[i] == 0.0) {
                continue;
            }
            auto yr = y.row(i);
            auto gr = g.row(i);
            double s = dot(yr, gr);
            auto dst = ga.row(i);
            for (std::size_t j = 0; j < yr.size(); j++) {
                dst[j] += (gr[j] - yr[j] * s) / norms[i];
            }
        }
    });
}

/// Contrastive negative log-likelihood over a similarity matrix s [B x B]
/// whose diagonal holds the positive pairs:
///   sum_b [ -s_bb / tau + log sum_{b' in D(b)} exp(s_bb' / tau) ]
/// where D(b) is every b' != b, plus b itself when include_positive is set.
inline Var contrastive_nll(Var s, double tau, bool include_positive) {
    const Tensor& sv = s.value();
    std::size_t n = sv.rows();
    if (sv.cols() != n || n < 2) {
        throw ShapeError("contrastive_nll: need a square similarity matrix with at least 2 rows, got "
                         + shape_string(sv.shape()));
    }
    auto in_pool = [include_positive](std::size_t b, std::size_t c) { return include_positive || b != c; };
    double loss = 0.0;
    Tensor soft(Shape{n, n});
    for (std::size_t b = 0; b < n; b++) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < n; c++) {
            if (in_pool(b, c)) {
                mx = std::max(mx, sv.at(b, c) / tau);
            }
        }
        double z = 0.0;
        for (std::size_t c = 0; c < n; c++) {
            if (in_pool(b, c)) {
                soft.at(b, c) = std::exp(sv.at(b, c) / tau - mx);
                z += soft.at(b, c);
            }
        }
        for (std::size_t c = 0; c < n; c++) {
            soft.at(b, c) /= z;
        }
        loss += -sv.at(b, b) / tau + mx + std::log(z);
    }
    Tape& t = *s.tape();
    std::size_t si = s.id();
    return t.record(Tensor::scalar(loss), t.requires_grad(s), [si, n, tau, soft = std::move(soft)](Tape& t,
                                                                                                const Tensor& g) {
        Tensor& gs = t.grad_buffer(si);
        for (std::size_t b = 0; b < n; b++) {
            gs.at(b, b) -= g[0] / tau;
            for (std::size_t c = 0; c < n; c++) {
                gs.at(b, c) += g[0] * soft.at(b, c) / tau;
            }
        }
    });
}

} // namespace op

} // namespace ddcf
