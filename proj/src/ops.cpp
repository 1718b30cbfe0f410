#include "sdconet/ops.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <cstring>

namespace sdconet {

namespace {

using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<Mat>;
using CMatMap = Eigen::Map<const Mat>;

bool track(std::initializer_list<const Tensor*> ts) {
    if (!grad_enabled()) return false;
    for (const Tensor* t : ts)
        if (t->requires_grad()) return true;
    return false;
}

void attach(const NodePtr& out, std::vector<NodePtr> parents,
            std::function<void(TensorNode&)> bwd) {
    out->requires_grad = true;
    out->parents = std::move(parents);
    out->backward = std::move(bwd);
}

void same_shape(const Tensor& a, const Tensor& b, const char* op) {
    check_shape(a.shape() == b.shape(), std::string(op) + ": shape mismatch " +
                                            shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

// rows = product of all dims but the last, cols = last dim
std::pair<long long, long long> collapse_rows(const Tensor& x, const char* op) {
    check_shape(x.rank() >= 1, std::string(op) + ": rank >= 1 required");
    long long cols = x.dim(-1);
    long long rows = cols == 0 ? 0 : x.size() / cols;
    return {rows, cols};
}

// Generic elementwise unary: out = f(x), dx += g * dfdx(x, out)
template <typename F, typename DF>
Tensor unary(const Tensor& a, F f, DF dfdx) {
    auto out = make_node(a.shape());
    const auto& av = a.values();
    for (size_t i = 0; i < av.size(); ++i) out->value[i] = f(av[i]);
    if (track({&a})) {
        NodePtr an = a.node();
        attach(out, {an}, [an, dfdx](TensorNode& self) {
            an->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i)
                an->grad[i] += self.grad[i] * dfdx(an->value[i], self.value[i]);
        });
    }
    return Tensor(out);
}

} // namespace

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) { return add_scaled(a, b, Scalar(1)); }
Tensor sub(const Tensor& a, const Tensor& b) { return add_scaled(a, b, Scalar(-1)); }

Tensor add_scaled(const Tensor& a, const Tensor& b, Scalar cb) {
    same_shape(a, b, "add_scaled");
    auto out = make_node(a.shape());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (size_t i = 0; i < av.size(); ++i) out->value[i] = av[i] + cb * bv[i];
    if (track({&a, &b})) {
        NodePtr an = a.node(), bn = b.node();
        attach(out, {an, bn}, [an, bn, cb](TensorNode& self) {
            if (an->requires_grad) {
                an->ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += cb * self.grad[i];
            }
        });
    }
    return Tensor(out);
}

Tensor mul(const Tensor& a, const Tensor& b) {
    same_shape(a, b, "mul");
    auto out = make_node(a.shape());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (size_t i = 0; i < av.size(); ++i) out->value[i] = av[i] * bv[i];
    if (track({&a, &b})) {
        NodePtr an = a.node(), bn = b.node();
        attach(out, {an, bn}, [an, bn](TensorNode& self) {
            if (an->requires_grad) {
                an->ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i)
                    an->grad[i] += self.grad[i] * bn->value[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i)
                    bn->grad[i] += self.grad[i] * an->value[i];
            }
        });
    }
    return Tensor(out);
}

Tensor div_op(const Tensor& a, const Tensor& b) {
    same_shape(a, b, "div");
    auto out = make_node(a.shape());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (size_t i = 0; i < av.size(); ++i) {
        check_contract(bv[i] != Scalar(0), "div: zero denominator");
        out->value[i] = av[i] / bv[i];
    }
    if (track({&a, &b})) {
        NodePtr an = a.node(), bn = b.node();
        attach(out, {an, bn}, [an, bn](TensorNode& self) {
            if (an->requires_grad) {
                an->ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i)
                    an->grad[i] += self.grad[i] / bn->value[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i)
                    bn->grad[i] -= self.grad[i] * an->value[i] / (bn->value[i] * bn->value[i]);
            }
        });
    }
    return Tensor(out);
}

Tensor neg(const Tensor& a) {
    return unary(a, [](Scalar x) { return -x; }, [](Scalar, Scalar) { return Scalar(-1); });
}

Tensor scalar_mul(const Tensor& a, Scalar c) {
    return unary(a, [c](Scalar x) { return c * x; }, [c](Scalar, Scalar) { return c; });
}

Tensor scalar_add(const Tensor& a, Scalar c) {
    return unary(a, [c](Scalar x) { return x + c; }, [](Scalar, Scalar) { return Scalar(1); });
}

Tensor maximum(const Tensor& a, const Tensor& b) {
    same_shape(a, b, "maximum");
    auto out = make_node(a.shape());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (size_t i = 0; i < av.size(); ++i) out->value[i] = av[i] >= bv[i] ? av[i] : bv[i];
    if (track({&a, &b})) {
        NodePtr an = a.node(), bn = b.node();
        attach(out, {an, bn}, [an, bn](TensorNode& self) {
            for (size_t i = 0; i < self.grad.size(); ++i) {
                bool take_a = an->value[i] >= bn->value[i];
                const NodePtr& p = take_a ? an : bn;
                if (p->requires_grad) {
                    p->ensure_grad();
                    p->grad[i] += self.grad[i];
                }
            }
        });
    }
    return Tensor(out);
}

Tensor minimum(const Tensor& a, const Tensor& b) {
    same_shape(a, b, "minimum");
    auto out = make_node(a.shape());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (size_t i = 0; i < av.size(); ++i) out->value[i] = av[i] <= bv[i] ? av[i] : bv[i];
    if (track({&a, &b})) {
        NodePtr an = a.node(), bn = b.node();
        attach(out, {an, bn}, [an, bn](TensorNode& self) {
            for (size_t i = 0; i < self.grad.size(); ++i) {
                bool take_a = an->value[i] <= bn->value[i];
                const NodePtr& p = take_a ? an : bn;
                if (p->requires_grad) {
                    p->ensure_grad();
                    p->grad[i] += self.grad[i];
                }
            }
        });
    }
    return Tensor(out);
}

Tensor relu(const Tensor& a) {
    return unary(a, [](Scalar x) { return x > 0 ? x : Scalar(0); },
                 [](Scalar x, Scalar) { return x > 0 ? Scalar(1) : Scalar(0); });
}

Tensor leaky_relu(const Tensor& a, Scalar slope) {
    return unary(a, [slope](Scalar x) { return x > 0 ? x : slope * x; },
                 [slope](Scalar x, Scalar) { return x > 0 ? Scalar(1) : slope; });
}

Tensor abs_val(const Tensor& a) {
    return unary(a, [](Scalar x) { return std::abs(x); },
                 [](Scalar x, Scalar) { return x > 0 ? Scalar(1) : (x < 0 ? Scalar(-1) : Scalar(0)); });
}

Tensor sigmoid(const Tensor& a) {
    return unary(a,
                 [](Scalar x) {
                     return x >= 0 ? Scalar(1) / (Scalar(1) + std::exp(-x))
                                   : std::exp(x) / (Scalar(1) + std::exp(x));
                 },
                 [](Scalar, Scalar y) { return y * (Scalar(1) - y); });
}

Tensor logsigmoid(const Tensor& a) {
    return unary(a,
                 [](Scalar x) { return x >= 0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x)); },
                 [](Scalar x, Scalar) {
                     // d/dx log sigmoid(x) = sigmoid(-x)
                     return x >= 0 ? std::exp(-x) / (Scalar(1) + std::exp(-x))
                                   : Scalar(1) / (Scalar(1) + std::exp(x));
                 });
}

namespace {
constexpr Scalar inv_sqrt2 = 0.7071067811865475244;
constexpr Scalar inv_sqrt2pi = 0.3989422804014326779;
} // namespace

Tensor gelu(const Tensor& a) {
    return unary(a,
                 [](Scalar x) { return Scalar(0.5) * x * (Scalar(1) + std::erf(x * inv_sqrt2)); },
                 [](Scalar x, Scalar) {
                     Scalar cdf = Scalar(0.5) * (Scalar(1) + std::erf(x * inv_sqrt2));
                     Scalar pdf = inv_sqrt2pi * std::exp(Scalar(-0.5) * x * x);
                     return cdf + x * pdf;
                 });
}

Tensor pow_const(const Tensor& a, Scalar p) {
    for (Scalar v : a.values())
        check_contract(v >= Scalar(0), "pow_const: negative base");
    return unary(a, [p](Scalar x) { return std::pow(x, p); },
                 [p](Scalar x, Scalar) {
                     if (x == Scalar(0)) return Scalar(0);
                     return p * std::pow(x, p - Scalar(1));
                 });
}

Tensor log_val(const Tensor& a) {
    for (Scalar v : a.values())
        check_contract(v > Scalar(0), "log: non-positive input");
    return unary(a, [](Scalar x) { return std::log(x); },
                 [](Scalar x, Scalar) { return Scalar(1) / x; });
}

Tensor clamp(const Tensor& a, Scalar lo, Scalar hi) {
    check_shape(lo <= hi, "clamp: lo > hi");
    return unary(a, [lo, hi](Scalar x) { return x < lo ? lo : (x > hi ? hi : x); },
                 [lo, hi](Scalar x, Scalar) { return (x >= lo && x <= hi) ? Scalar(1) : Scalar(0); });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& x, const Tensor& w) {
    check_shape(x.rank() >= 2 && w.rank() == 2, "matmul: x rank >= 2 and w rank 2 required");
    auto [rows, k] = collapse_rows(x, "matmul");
    check_shape(w.dim(0) == k, "matmul: inner dims " + shape_str(x.shape()) + " x " +
                                   shape_str(w.shape()));
    long long n = w.dim(1);
    std::vector<int> out_shape = x.shape();
    out_shape.back() = static_cast<int>(n);
    auto out = make_node(out_shape);
    {
        CMatMap xm(x.data(), rows, k);
        CMatMap wm(w.data(), k, n);
        MatMap om(out->value.data(), rows, n);
        om.noalias() = xm * wm;
    }
    if (track({&x, &w})) {
        NodePtr xn = x.node(), wn = w.node();
        attach(out, {xn, wn}, [xn, wn, rows, k, n](TensorNode& self) {
            CMatMap g(self.grad.data(), rows, n);
            if (xn->requires_grad) {
                xn->ensure_grad();
                MatMap gx(xn->grad.data(), rows, k);
                CMatMap wm(wn->value.data(), k, n);
                gx.noalias() += g * wm.transpose();
            }
            if (wn->requires_grad) {
                wn->ensure_grad();
                MatMap gw(wn->grad.data(), k, n);
                CMatMap xm(xn->value.data(), rows, k);
                gw.noalias() += xm.transpose() * g;
            }
        });
    }
    return Tensor(out);
}

Tensor bmm(const Tensor& a, const Tensor& b) {
    check_shape(a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(1),
                "bmm: got " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    long long bs = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
    auto out = make_node({static_cast<int>(bs), static_cast<int>(m), static_cast<int>(n)});
    for (long long i = 0; i < bs; ++i) {
        CMatMap am(a.data() + i * m * k, m, k);
        CMatMap bmat(b.data() + i * k * n, k, n);
        MatMap om(out->value.data() + i * m * n, m, n);
        om.noalias() = am * bmat;
    }
    if (track({&a, &b})) {
        NodePtr an = a.node(), bn = b.node();
        attach(out, {an, bn}, [an, bn, bs, m, k, n](TensorNode& self) {
            for (long long i = 0; i < bs; ++i) {
                CMatMap g(self.grad.data() + i * m * n, m, n);
                if (an->requires_grad) {
                    an->ensure_grad();
                    MatMap ga(an->grad.data() + i * m * k, m, k);
                    CMatMap bmat(bn->value.data() + i * k * n, k, n);
                    ga.noalias() += g * bmat.transpose();
                }
                if (bn->requires_grad) {
                    bn->ensure_grad();
                    MatMap gb(bn->grad.data() + i * k * n, k, n);
                    CMatMap am(an->value.data() + i * m * k, m, k);
                    gb.noalias() += am.transpose() * g;
                }
            }
        });
    }
    return Tensor(out);
}

Tensor bmm_nt(const Tensor& a, const Tensor& b) {
    check_shape(a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2),
                "bmm_nt: got " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    long long bs = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(1);
    auto out = make_node({static_cast<int>(bs), static_cast<int>(m), static_cast<int>(n)});
    for (long long i = 0; i < bs; ++i) {
        CMatMap am(a.data() + i * m * k, m, k);
        CMatMap bmat(b.data() + i * n * k, n, k);
        MatMap om(out->value.data() + i * m * n, m, n);
        om.noalias() = am * bmat.transpose();
    }
    if (track({&a, &b})) {
        NodePtr an = a.node(), bn = b.node();
        attach(out, {an, bn}, [an, bn, bs, m, k, n](TensorNode& self) {
            for (long long i = 0; i < bs; ++i) {
                CMatMap g(self.grad.data() + i * m * n, m, n);
                if (an->requires_grad) {
                    an->ensure_grad();
                    MatMap ga(an->grad.data() + i * m * k, m, k);
                    CMatMap bmat(bn->value.data() + i * n * k, n, k);
                    ga.noalias() += g * bmat;
                }
                if (bn->requires_grad) {
                    bn->ensure_grad();
                    MatMap gb(bn->grad.data() + i * n * k, n, k);
                    CMatMap am(an->value.data() + i * m * k, m, k);
                    gb.noalias() += g.transpose() * am;
                }
            }
        });
    }
    return Tensor(out);
}

Tensor add_rowvec(const Tensor& x, const Tensor& v) {
    auto [rows, cols] = collapse_rows(x, "add_rowvec");
    check_shape(v.rank() == 1 && v.dim(0) == cols,
                "add_rowvec: vector " + shape_str(v.shape()) + " vs cols " + std::to_string(cols));
    auto out = make_node(x.shape());
    const Scalar* xv = x.data();
    const Scalar* vv = v.data();
    for (long long r = 0; r < rows; ++r)
        for (long long c = 0; c < cols; ++c) out->value[r * cols + c] = xv[r * cols + c] + vv[c];
    if (track({&x, &v})) {
        NodePtr xn = x.node(), vn = v.node();
        attach(out, {xn, vn}, [xn, vn, rows, cols](TensorNode& self) {
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i];
            }
            if (vn->requires_grad) {
                vn->ensure_grad();
                for (long long r = 0; r < rows; ++r)
                    for (long long c = 0; c < cols; ++c) vn->grad[c] += self.grad[r * cols + c];
            }
        });
    }
    return Tensor(out);
}

// ---------------------------------------------------------------------------
// Normalization / softmax / reductions
// ---------------------------------------------------------------------------

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Scalar eps) {
    auto [rows, cols] = collapse_rows(x, "layer_norm");
    check_shape(gamma.rank() == 1 && gamma.dim(0) == cols && beta.rank() == 1 && beta.dim(0) == cols,
                "layer_norm: affine params must be (" + std::to_string(cols) + ")");
    auto out = make_node(x.shape());
    auto mu = std::make_shared<std::vector<Scalar>>(rows);
    auto rstd = std::make_shared<std::vector<Scalar>>(rows);
    const Scalar* xv = x.data();
    const Scalar* gv = gamma.data();
    const Scalar* bv = beta.data();
    for (long long r = 0; r < rows; ++r) {
        Scalar m = 0;
        for (long long c = 0; c < cols; ++c) m += xv[r * cols + c];
        m /= Scalar(cols);
        Scalar var = 0;
        for (long long c = 0; c < cols; ++c) {
            Scalar d = xv[r * cols + c] - m;
            var += d * d;
        }
        var /= Scalar(cols);
        Scalar rs = Scalar(1) / std::sqrt(var + eps);
        (*mu)[r] = m;
        (*rstd)[r] = rs;
        for (long long c = 0; c < cols; ++c)
            out->value[r * cols + c] = gv[c] * (xv[r * cols + c] - m) * rs + bv[c];
    }
    if (track({&x, &gamma, &beta})) {
        NodePtr xn = x.node(), gn = gamma.node(), bn = beta.node();
        attach(out, {xn, gn, bn}, [xn, gn, bn, mu, rstd, rows, cols](TensorNode& self) {
            std::vector<Scalar> xhat(cols), dxhat(cols);
            for (long long r = 0; r < rows; ++r) {
                Scalar m = (*mu)[r], rs = (*rstd)[r];
                const Scalar* g = self.grad.data() + r * cols;
                for (long long c = 0; c < cols; ++c) {
                    xhat[c] = (xn->value[r * cols + c] - m) * rs;
                    dxhat[c] = g[c] * gn->value[c];
                }
                if (gn->requires_grad) {
                    gn->ensure_grad();
                    for (long long c = 0; c < cols; ++c) gn->grad[c] += g[c] * xhat[c];
                }
                if (bn->requires_grad) {
                    bn->ensure_grad();
                    for (long long c = 0; c < cols; ++c) bn->grad[c] += g[c];
                }
                if (xn->requires_grad) {
                    xn->ensure_grad();
                    Scalar mean_dx = 0, mean_dxx = 0;
                    for (long long c = 0; c < cols; ++c) {
                        mean_dx += dxhat[c];
                        mean_dxx += dxhat[c] * xhat[c];
                    }
                    mean_dx /= Scalar(cols);
                    mean_dxx /= Scalar(cols);
                    for (long long c = 0; c < cols; ++c)
                        xn->grad[r * cols + c] += rs * (dxhat[c] - mean_dx - xhat[c] * mean_dxx);
                }
            }
        });
    }
    return Tensor(out);
}

Tensor softmax_lastdim(const Tensor& x) {
    auto [rows, cols] = collapse_rows(x, "softmax");
    check_shape(cols > 0, "softmax: empty last dim");
    auto out = make_node(x.shape());
    const Scalar* xv = x.data();
    for (long long r = 0; r < rows; ++r) {
        Scalar mx = xv[r * cols];
        for (long long c = 1; c < cols; ++c) mx = std::max(mx, xv[r * cols + c]);
        Scalar sum = 0;
        for (long long c = 0; c < cols; ++c) {
            Scalar e = std::exp(xv[r * cols + c] - mx);
            out->value[r * cols + c] = e;
            sum += e;
        }
        for (long long c = 0; c < cols; ++c) out->value[r * cols + c] /= sum;
    }
    if (track({&x})) {
        NodePtr xn = x.node();
        attach(out, {xn}, [xn, rows, cols](TensorNode& self) {
            xn->ensure_grad();
            for (long long r = 0; r < rows; ++r) {
                const Scalar* y = self.value.data() + r * cols;
                const Scalar* g = self.grad.data() + r * cols;
                Scalar dot = 0;
                for (long long c = 0; c < cols; ++c) dot += g[c] * y[c];
                for (long long c = 0; c < cols; ++c)
                    xn->grad[r * cols + c] += y[c] * (g[c] - dot);
            }
        });
    }
    return Tensor(out);
}

Tensor sum_all(const Tensor& x) {
    auto out = make_node({1});
    Scalar s = 0;
    for (Scalar v : x.values()) s += v;
    out->value[0] = s;
    if (track({&x})) {
        NodePtr xn = x.node();
        attach(out, {xn}, [xn](TensorNode& self) {
            xn->ensure_grad();
            for (auto& g : xn->grad) g += self.grad[0];
        });
    }
    return Tensor(out);
}

Tensor mean_all(const Tensor& x) {
    check_shape(x.size() > 0, "mean_all: empty tensor");
    return scalar_mul(sum_all(x), Scalar(1) / Scalar(x.size()));
}

Tensor mean_rows(const Tensor& x) {
    check_shape(x.rank() == 2, "mean_rows: rank-2 required");
    long long rows = x.dim(0), cols = x.dim(1);
    check_shape(rows > 0, "mean_rows: zero rows");
    auto out = make_node({1, static_cast<int>(cols)});
    const Scalar* xv = x.data();
    for (long long r = 0; r < rows; ++r)
        for (long long c = 0; c < cols; ++c) out->value[c] += xv[r * cols + c];
    for (long long c = 0; c < cols; ++c) out->value[c] /= Scalar(rows);
    if (track({&x})) {
        NodePtr xn = x.node();
        attach(out, {xn}, [xn, rows, cols](TensorNode& self) {
            xn->ensure_grad();
            for (long long r = 0; r < rows; ++r)
                for (long long c = 0; c < cols; ++c)
                    xn->grad[r * cols + c] += self.grad[c] / Scalar(rows);
        });
    }
    return Tensor(out);
}

Tensor broadcast_rows(const Tensor& x, int rows) {
    check_shape(x.rank() == 2 && x.dim(0) == 1, "broadcast_rows: (1,C) required");
    long long cols = x.dim(1);
    auto out = make_node({rows, static_cast<int>(cols)});
    for (long long r = 0; r < rows; ++r)
        std::memcpy(out->value.data() + r * cols, x.data(), sizeof(Scalar) * cols);
    if (track({&x})) {
        NodePtr xn = x.node();
        attach(out, {xn}, [xn, rows, cols](TensorNode& self) {
            xn->ensure_grad();
            for (long long r = 0; r < rows; ++r)
                for (long long c = 0; c < cols; ++c) xn->grad[c] += self.grad[r * cols + c];
        });
    }
    return Tensor(out);
}

// ---------------------------------------------------------------------------
// Structure
// ---------------------------------------------------------------------------

Tensor reshape(const Tensor& x, std::vector<int> shape) {
    long long known = 1;
    int infer = -1;
    for (size_t i = 0; i < shape.size(); ++i) {
        if (shape[i] == -1) {
            check_shape(infer < 0, "reshape: multiple -1 dims");
            infer = static_cast<int>(i);
        } else {
            known *= shape[i];
        }
    }
    if (infer >= 0) {
        check_shape(known > 0 && x.size() % known == 0,
                    "reshape: cannot infer dim for " + shape_str(x.shape()));
        shape[infer] = static_cast<int>(x.size() / known);
    }
    check_shape(numel_of(shape) == x.size(),
                "reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
    auto out = make_node(shape);
    out->value = x.values();
    if (track({&x})) {
        NodePtr xn = x.node();
        attach(out, {xn}, [xn](TensorNode& self) {
            xn->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i];
        });
    }
    return Tensor(out);
}

Tensor permute(const Tensor& x, const std::vector<int>& axes) {
    int r = x.rank();
    check_shape(static_cast<int>(axes.size()) == r, "permute: axes size mismatch");
    std::vector<bool> used(r, false);
    std::vector<int> out_shape(r);
    for (int i = 0; i < r; ++i) {
        int a = axes[i];
        check_shape(a >= 0 && a < r && !used[a], "permute: invalid axes");
        used[a] = true;
        out_shape[i] = x.dim(a);
    }
    std::vector<long long> in_strides(r, 1), out_strides(r, 1);
    for (int i = r - 2; i >= 0; --i) {
        in_strides[i] = in_strides[i + 1] * x.dim(i + 1);
        out_strides[i] = out_strides[i + 1] * out_shape[i + 1];
    }
    auto map = std::make_shared<std::vector<long long>>(x.size());
    std::vector<long long> idx(r, 0);
    for (long long o = 0; o < x.size(); ++o) {
        long long rem = o, src = 0;
        for (int i = 0; i < r; ++i) {
            long long q = rem / out_strides[i];
            rem -= q * out_strides[i];
            src += q * in_strides[axes[i]];
        }
        (*map)[o] = src;
    }
    return gather_flat(x, map, out_shape);
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    check_shape(!parts.empty(), "concat: no inputs");
    int r = parts[0].rank();
    if (axis < 0) axis += r;
    check_shape(axis >= 0 && axis < r, "concat: axis out of range");
    std::vector<int> out_shape = parts[0].shape();
    long long axis_total = 0;
    for (const Tensor& p : parts) {
        check_shape(p.rank() == r, "concat: rank mismatch");
        for (int i = 0; i < r; ++i)
            check_shape(i == axis || p.dim(i) == out_shape[i], "concat: shape mismatch at axis " +
                                                                   std::to_string(i));
        axis_total += p.dim(axis);
    }
    out_shape[axis] = static_cast<int>(axis_total);
    long long outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= out_shape[i];
    for (int i = axis + 1; i < r; ++i) inner *= out_shape[i];

    auto out = make_node(out_shape);
    long long pos = 0;
    for (const Tensor& p : parts) {
        long long pa = p.dim(axis);
        for (long long o = 0; o < outer; ++o)
            std::memcpy(out->value.data() + (o * axis_total + pos) * inner,
                        p.data() + o * pa * inner, sizeof(Scalar) * pa * inner);
        pos += pa;
    }

    bool rg = false;
    for (const Tensor& p : parts)
        if (p.requires_grad()) rg = true;
    if (grad_enabled() && rg) {
        std::vector<NodePtr> parents;
        std::vector<long long> offs;
        long long off = 0;
        for (const Tensor& p : parts) {
            parents.push_back(p.node());
            offs.push_back(off);
            off += p.dim(axis);
        }
        attach(out, parents, [offs, outer, inner, axis_total](TensorNode& self) {
            for (size_t pi = 0; pi < self.parents.size(); ++pi) {
                NodePtr& p = self.parents[pi];
                if (!p->requires_grad) continue;
                p->ensure_grad();
                long long pa = (pi + 1 < offs.size() ? offs[pi + 1] : axis_total) - offs[pi];
                for (long long o = 0; o < outer; ++o) {
                    const Scalar* g = self.grad.data() + (o * axis_total + offs[pi]) * inner;
                    Scalar* pg = p->grad.data() + o * pa * inner;
                    for (long long i = 0; i < pa * inner; ++i) pg[i] += g[i];
                }
            }
        });
    }
    return Tensor(out);
}

Tensor slice(const Tensor& x, int axis, int start, int len) {
    int r = x.rank();
    if (axis < 0) axis += r;
    check_shape(axis >= 0 && axis < r, "slice: axis out of range");
    check_shape(start >= 0 && len >= 0 && start + len <= x.dim(axis),
                "slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                    ") out of bounds for dim " + std::to_string(x.dim(axis)));
    long long outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= x.dim(i);
    for (int i = axis + 1; i < r; ++i) inner *= x.dim(i);
    long long full = x.dim(axis);
    std::vector<int> out_shape = x.shape();
    out_shape[axis] = len;
    auto out = make_node(out_shape);
    for (long long o = 0; o < outer; ++o)
        std::memcpy(out->value.data() + o * len * inner,
                    x.data() + (o * full + start) * inner, sizeof(Scalar) * len * inner);
    if (track({&x})) {
        NodePtr xn = x.node();
        attach(out, {xn}, [xn, outer, inner, full, start, len](TensorNode& self) {
            xn->ensure_grad();
            for (long long o = 0; o < outer; ++o) {
                const Scalar* g = self.grad.data() + o * len * inner;
                Scalar* pg = xn->grad.data() + (o * full + start) * inner;
                for (long long i = 0; i < static_cast<long long>(len) * inner; ++i) pg[i] += g[i];
            }
        });
    }
    return Tensor(out);
}

Tensor gather_rows(const Tensor& x, std::vector<int> idx) {
    check_shape(x.rank() >= 1, "gather_rows: rank >= 1 required");
    long long rows = x.dim(0);
    long long inner = rows == 0 ? 0 : x.size() / rows;
    for (int i : idx)
        check_shape(i >= 0 && i < rows, "gather_rows: index " + std::to_string(i) + " out of " +
                                            std::to_string(rows));
    std::vector<int> out_shape = x.shape();
    out_shape[0] = static_cast<int>(idx.size());
    auto out = make_node(out_shape);
    for (size_t k = 0; k < idx.size(); ++k)
        std::memcpy(out->value.data() + k * inner, x.data() + static_cast<long long>(idx[k]) * inner,
                    sizeof(Scalar) * inner);
    if (track({&x})) {
        NodePtr xn = x.node();
        attach(out, {xn}, [xn, idx = std::move(idx), inner](TensorNode& self) {
            xn->ensure_grad();
            for (size_t k = 0; k < idx.size(); ++k) {
                const Scalar* g = self.grad.data() + k * inner;
                Scalar* pg = xn->grad.data() + static_cast<long long>(idx[k]) * inner;
                for (long long i = 0; i < inner; ++i) pg[i] += g[i];
            }
        });
    }
    return Tensor(out);
}

Tensor row_replace(const Tensor& base, std::vector<int> idx, const Tensor& rows) {
    check_shape(base.rank() >= 1 && rows.rank() == base.rank(), "row_replace: rank mismatch");
    long long n = base.dim(0);
    long long inner = n == 0 ? 0 : base.size() / n;
    check_shape(rows.dim(0) == static_cast<int>(idx.size()), "row_replace: idx/rows count mismatch");
    for (int i = 1; i < base.rank(); ++i)
        check_shape(base.dim(i) == rows.dim(i), "row_replace: inner shape mismatch");
    std::vector<bool> hit(n, false);
    for (int i : idx) {
        check_shape(i >= 0 && i < n, "row_replace: index out of range");
        check_contract(!hit[i], "row_replace: duplicate index");
        hit[i] = true;
    }
    auto out = make_node(base.shape());
    out->value = base.values();
    for (size_t k = 0; k < idx.size(); ++k)
        std::memcpy(out->value.data() + static_cast<long long>(idx[k]) * inner,
                    rows.data() + k * inner, sizeof(Scalar) * inner);
    if (track({&base, &rows})) {
        NodePtr bn = base.node(), rn = rows.node();
        attach(out, {bn, rn}, [bn, rn, idx = std::move(idx), hit = std::move(hit), n,
                               inner](TensorNode& self) {
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (long long r = 0; r < n; ++r) {
                    if (hit[r]) continue;
                    const Scalar* g = self.grad.data() + r * inner;
                    Scalar* pg = bn->grad.data() + r * inner;
                    for (long long i = 0; i < inner; ++i) pg[i] += g[i];
                }
            }
            if (rn->requires_grad) {
                rn->ensure_grad();
                for (size_t k = 0; k < idx.size(); ++k) {
                    const Scalar* g = self.grad.data() + static_cast<long long>(idx[k]) * inner;
                    Scalar* pg = rn->grad.data() + k * inner;
                    for (long long i = 0; i < inner; ++i) pg[i] += g[i];
                }
            }
        });
    }
    return Tensor(out);
}

Tensor gather_flat(const Tensor& x, std::shared_ptr<std::vector<long long>> map,
                   std::vector<int> out_shape) {
    check_shape(static_cast<long long>(map->size()) == numel_of(out_shape),
                "gather_flat: map size vs out shape");
    long long n = x.size();
    auto out = make_node(out_shape);
    const Scalar* xv = x.data();
    for (size_t i = 0; i < map->size(); ++i) {
        long long s = (*map)[i];
        check_shape(s < n, "gather_flat: source index out of range");
        out->value[i] = s < 0 ? Scalar(0) : xv[s];
    }
    if (track({&x})) {
        NodePtr xn = x.node();
        attach(out, {xn}, [xn, map](TensorNode& self) {
            xn->ensure_grad();
            for (size_t i = 0; i < map->size(); ++i) {
                long long s = (*map)[i];
                if (s >= 0) xn->grad[s] += self.grad[i];
            }
        });
    }
    return Tensor(out);
}

Tensor repeat_block(const Tensor& x, int times, std::vector<int> out_shape) {
    long long n = x.size();
    check_shape(numel_of(out_shape) == n * times, "repeat_block: size mismatch");
    auto map = std::make_shared<std::vector<long long>>(n * times);
    for (long long i = 0; i < n * times; ++i) (*map)[i] = i % n;
    return gather_flat(x, map, std::move(out_shape));
}

namespace {
// Shared map-builder for the (H,W,C) grid ops.
Tensor grid_gather(const Tensor& x, int oh, int ow, int oc,
                   const std::function<long long(int, int, int)>& src) {
    auto map = std::make_shared<std::vector<long long>>(
        static_cast<size_t>(oh) * ow * oc);
    size_t i = 0;
    for (int r = 0; r < oh; ++r)
        for (int c = 0; c < ow; ++c)
            for (int k = 0; k < oc; ++k) (*map)[i++] = src(r, c, k);
    return gather_flat(x, map, {oh, ow, oc});
}
} // namespace

Tensor upsample2x_nearest(const Tensor& x) {
    check_shape(x.rank() == 3, "upsample2x_nearest: (H,W,C) required");
    int h = x.dim(0), w = x.dim(1), ch = x.dim(2);
    return grid_gather(x, 2 * h, 2 * w, ch, [w, ch](int r, int c, int k) {
        return (static_cast<long long>(r / 2) * w + c / 2) * ch + k;
    });
}

Tensor crop2d(const Tensor& x, int h, int w) {
    check_shape(x.rank() == 3, "crop2d: (H,W,C) required");
    check_shape(h <= x.dim(0) && w <= x.dim(1), "crop2d: target exceeds source");
    int sw = x.dim(1), ch = x.dim(2);
    return grid_gather(x, h, w, ch, [sw, ch](int r, int c, int k) {
        return (static_cast<long long>(r) * sw + c) * ch + k;
    });
}

Tensor pad2d(const Tensor& x, int h, int w) {
    check_shape(x.rank() == 3, "pad2d: (H,W,C) required");
    check_shape(h >= x.dim(0) && w >= x.dim(1), "pad2d: target smaller than source");
    int sh = x.dim(0), sw = x.dim(1), ch = x.dim(2);
    return grid_gather(x, h, w, ch, [sh, sw, ch](int r, int c, int k) -> long long {
        if (r >= sh || c >= sw) return -1;
        return (static_cast<long long>(r) * sw + c) * ch + k;
    });
}

Tensor roll2d(const Tensor& x, int dy, int dx) {
    check_shape(x.rank() == 3, "roll2d: (H,W,C) required");
    int h = x.dim(0), w = x.dim(1), ch = x.dim(2);
    auto wrap = [](int v, int m) { return ((v % m) + m) % m; };
    return grid_gather(x, h, w, ch, [=](int r, int c, int k) {
        int sr = wrap(r - dy, h), sc = wrap(c - dx, w);
        return (static_cast<long long>(sr) * w + sc) * ch + k;
    });
}

Tensor pixel_shuffle2(const Tensor& x) {
    check_shape(x.rank() == 3 && x.dim(2) % 4 == 0, "pixel_shuffle2: (H,W,4k) required");
    int h = x.dim(0), w = x.dim(1), c4 = x.dim(2), c = c4 / 4;
    // channel layout (dy, dx, c): out(2r+dy, 2c+dx, k) = in(r, c, (dy*2+dx)*c + k)
    return grid_gather(x, 2 * h, 2 * w, c, [w, c4, c](int r, int cc, int k) {
        int dy = r & 1, dx = cc & 1;
        return (static_cast<long long>(r / 2) * w + cc / 2) * c4 + (dy * 2 + dx) * c + k;
    });
}

Tensor pixel_unshuffle2(const Tensor& x) {
    check_shape(x.rank() == 3 && x.dim(0) % 2 == 0 && x.dim(1) % 2 == 0,
                "pixel_unshuffle2: even (H,W) required");
    int h = x.dim(0), w = x.dim(1), c = x.dim(2);
    return grid_gather(x, h / 2, w / 2, 4 * c, [w, c](int r, int cc, int k) {
        int grp = k / c, kk = k % c;
        int dy = grp / 2, dx = grp % 2;
        return (static_cast<long long>(2 * r + dy) * w + (2 * cc + dx)) * c + kk;
    });
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
    check_shape(x.rank() == 3 && w.rank() == 4, "conv2d: x (H,W,Cin), w (KH,KW,Cin,Cout)");
    int h = x.dim(0), wd = x.dim(1), cin = x.dim(2);
    int kh = w.dim(0), kw = w.dim(1), cout = w.dim(3);
    check_shape(w.dim(2) == cin, "conv2d: channel mismatch");
    check_shape(stride >= 1 && pad >= 0, "conv2d: bad stride/pad");
    int oh = (h + 2 * pad - kh) / stride + 1;
    int ow = (wd + 2 * pad - kw) / stride + 1;
    check_shape(oh >= 1 && ow >= 1, "conv2d: empty output");

    auto map = std::make_shared<std::vector<long long>>(
        static_cast<size_t>(oh) * ow * kh * kw * cin);
    size_t i = 0;
    for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox)
            for (int ky = 0; ky < kh; ++ky)
                for (int kx = 0; kx < kw; ++kx) {
                    int iy = oy * stride - pad + ky;
                    int ix = ox * stride - pad + kx;
                    bool in = iy >= 0 && iy < h && ix >= 0 && ix < wd;
                    for (int c = 0; c < cin; ++c)
                        (*map)[i++] = in ? (static_cast<long long>(iy) * wd + ix) * cin + c : -1;
                }
    Tensor col = gather_flat(x, map, {oh * ow, kh * kw * cin});
    Tensor wm = reshape(w, {kh * kw * cin, cout});
    Tensor out = matmul(col, wm);
    if (b.defined()) out = add_rowvec(out, b);
    return reshape(out, {oh, ow, cout});
}

// ---------------------------------------------------------------------------
// Multi-scale deformable attention
// ---------------------------------------------------------------------------

Tensor ms_deform_attn(const Tensor& value, const std::vector<LevelShape>& shapes,
                      const Tensor& loc, const Tensor& att, int heads,
                      long long* site_counter) {
    check_shape(value.rank() == 2, "ms_deform_attn: value (N,C) required");
    long long n = value.dim(0), ch = value.dim(1);
    check_shape(heads > 0 && ch % heads == 0, "ms_deform_attn: C % heads != 0");
    long long dh = ch / heads;
    long long total = 0;
    for (const auto& s : shapes) {
        check_shape(s.h > 0 && s.w > 0, "ms_deform_attn: empty level");
        total += static_cast<long long>(s.h) * s.w;
    }
    check_shape(total == n, "ms_deform_attn: level shapes sum " + std::to_string(total) +
                                " != value rows " + std::to_string(n));
    int levels = static_cast<int>(shapes.size());
    check_shape(loc.rank() == 5 && loc.dim(1) == heads && loc.dim(2) == levels && loc.dim(4) == 2,
                "ms_deform_attn: loc (Q,H,L,P,2) required, got " + shape_str(loc.shape()));
    int q_count = loc.dim(0), pts = loc.dim(3);
    check_shape(att.rank() == 4 && att.dim(0) == q_count && att.dim(1) == heads &&
                    att.dim(2) == levels && att.dim(3) == pts,
                "ms_deform_attn: att (Q,H,L,P) required, got " + shape_str(att.shape()));

    std::vector<long long> offs(shapes.size());
    long long acc = 0;
    for (size_t l = 0; l < shapes.size(); ++l) {
        offs[l] = acc;
        acc += static_cast<long long>(shapes[l].h) * shapes[l].w;
    }

    auto out = make_node({q_count, static_cast<int>(ch)});
    const Scalar* vv = value.data();
    const Scalar* lv = loc.data();
    const Scalar* av = att.data();
    for (int q = 0; q < q_count; ++q) {
        for (int hd = 0; hd < heads; ++hd) {
            Scalar* ov = out->value.data() + q * ch + hd * dh;
            for (int l = 0; l < levels; ++l) {
                int lh = shapes[l].h, lw = shapes[l].w;
                long long off = offs[l];
                for (int p = 0; p < pts; ++p) {
                    long long base = ((static_cast<long long>(q) * heads + hd) * levels + l) * pts + p;
                    Scalar wa = av[base];
                    Scalar gx = lv[base * 2 + 0] * lw - Scalar(0.5);
                    Scalar gy = lv[base * 2 + 1] * lh - Scalar(0.5);
                    long long x0 = static_cast<long long>(std::floor(gx));
                    long long y0 = static_cast<long long>(std::floor(gy));
                    Scalar lx = gx - x0, ly = gy - y0;
                    const Scalar cw[4] = {(1 - lx) * (1 - ly), lx * (1 - ly), (1 - lx) * ly, lx * ly};
                    const long long cx[4] = {x0, x0 + 1, x0, x0 + 1};
                    const long long cy[4] = {y0, y0, y0 + 1, y0 + 1};
                    for (int k = 0; k < 4; ++k) {
                        if (cx[k] < 0 || cx[k] >= lw || cy[k] < 0 || cy[k] >= lh) continue;
                        const Scalar* src = vv + (off + cy[k] * lw + cx[k]) * ch + hd * dh;
                        Scalar wk = wa * cw[k];
                        for (long long c = 0; c < dh; ++c) ov[c] += wk * src[c];
                    }
                }
            }
        }
    }
    if (site_counter)
        *site_counter += static_cast<long long>(q_count) * heads * levels * pts;

    if (track({&value, &loc, &att})) {
        NodePtr vn = value.node(), ln = loc.node(), an = att.node();
        auto shp = shapes;
        attach(out, {vn, ln, an}, [vn, ln, an, shp, offs, q_count, heads, dh, ch,
                                   pts](TensorNode& self) {
            int levels = static_cast<int>(shp.size());
            if (vn->requires_grad) vn->ensure_grad();
            if (ln->requires_grad) ln->ensure_grad();
            if (an->requires_grad) an->ensure_grad();
            const Scalar* vv = vn->value.data();
            const Scalar* lv = ln->value.data();
            const Scalar* av = an->value.data();
            for (int q = 0; q < q_count; ++q) {
                for (int hd = 0; hd < heads; ++hd) {
                    const Scalar* g = self.grad.data() + q * ch + hd * dh;
                    for (int l = 0; l < levels; ++l) {
                        int lh = shp[l].h, lw = shp[l].w;
                        long long off = offs[l];
                        for (int p = 0; p < pts; ++p) {
                            long long base =
                                ((static_cast<long long>(q) * heads + hd) * levels + l) * pts + p;
                            Scalar wa = av[base];
                            Scalar gx = lv[base * 2 + 0] * lw - Scalar(0.5);
                            Scalar gy = lv[base * 2 + 1] * lh - Scalar(0.5);
                            long long x0 = static_cast<long long>(std::floor(gx));
                            long long y0 = static_cast<long long>(std::floor(gy));
                            Scalar lx = gx - x0, ly = gy - y0;
                            const Scalar cw[4] = {(1 - lx) * (1 - ly), lx * (1 - ly),
                                                  (1 - lx) * ly, lx * ly};
                            const long long cx[4] = {x0, x0 + 1, x0, x0 + 1};
                            const long long cy[4] = {y0, y0, y0 + 1, y0 + 1};
                            const Scalar* corner[4] = {nullptr, nullptr, nullptr, nullptr};
                            for (int k = 0; k < 4; ++k) {
                                if (cx[k] < 0 || cx[k] >= lw || cy[k] < 0 || cy[k] >= lh) continue;
                                corner[k] = vv + (off + cy[k] * lw + cx[k]) * ch + hd * dh;
                            }
                            Scalar d_att = 0, d_gx = 0, d_gy = 0;
                            for (long long c = 0; c < dh; ++c) {
                                Scalar v00 = corner[0] ? corner[0][c] : 0;
                                Scalar v10 = corner[1] ? corner[1][c] : 0;
                                Scalar v01 = corner[2] ? corner[2][c] : 0;
                                Scalar v11 = corner[3] ? corner[3][c] : 0;
                                Scalar sample = cw[0] * v00 + cw[1] * v10 + cw[2] * v01 + cw[3] * v11;
                                d_att += g[c] * sample;
                                d_gx += g[c] * ((1 - ly) * (v10 - v00) + ly * (v11 - v01));
                                d_gy += g[c] * ((1 - lx) * (v01 - v00) + lx * (v11 - v10));
                            }
                            if (an->requires_grad) an->grad[base] += d_att;
                            if (ln->requires_grad) {
                                ln->grad[base * 2 + 0] += wa * d_gx * lw;
                                ln->grad[base * 2 + 1] += wa * d_gy * lh;
                            }
                            if (vn->requires_grad) {
                                for (int k = 0; k < 4; ++k) {
                                    if (!corner[k]) continue;
                                    Scalar* pg = vn->grad.data() +
                                                 (off + cy[k] * lw + cx[k]) * ch + hd * dh;
                                    Scalar wk = wa * cw[k];
                                    for (long long c = 0; c < dh; ++c) pg[c] += wk * g[c];
                                }
                            }
                        }
                    }
                }
            }
        });
    }
    return Tensor(out);
}

// ---------------------------------------------------------------------------
// Loss building blocks
// ---------------------------------------------------------------------------

Tensor sigmoid_focal(const Tensor& logits, const Tensor& targets, Scalar gamma, Scalar alpha) {
    same_shape(logits, targets, "sigmoid_focal");
    check_contract(!targets.requires_grad(), "sigmoid_focal: targets must be constant");
    for (Scalar t : targets.values())
        check_contract(t >= Scalar(0) && t <= Scalar(1), "sigmoid_focal: target outside [0,1]");

    long long n = logits.size();
    std::vector<Scalar> tv = targets.values();
    std::vector<Scalar> one_minus_t(tv.size()), alpha_t(tv.size());
    for (size_t i = 0; i < tv.size(); ++i) {
        one_minus_t[i] = Scalar(1) - tv[i];
        alpha_t[i] = alpha * tv[i] + (Scalar(1) - alpha) * (Scalar(1) - tv[i]);
    }
    Tensor t = Tensor::from(std::move(tv), logits.shape());
    Tensor omt = Tensor::from(std::move(one_minus_t), logits.shape());
    Tensor at = Tensor::from(std::move(alpha_t), logits.shape());
    Tensor ones = Tensor::full(logits.shape(), Scalar(1));
    (void)n;

    Tensor p = sigmoid(logits);
    Tensor ce = neg(add(mul(logsigmoid(logits), t), mul(logsigmoid(neg(logits)), omt)));
    Tensor pt = add(mul(p, t), mul(sub(ones, p), omt));
    Tensor mod = pow_const(sub(ones, pt), gamma);
    return mul(at, mul(mod, ce));
}

Tensor l1_loss(const Tensor& a, const Tensor& b) { return mean_all(abs_val(sub(a, b))); }

Tensor inverse_sigmoid(const Tensor& x, Scalar eps) {
    Tensor y = clamp(x, eps, Scalar(1) - eps);
    Tensor one_minus = scalar_add(neg(y), Scalar(1));
    return sub(log_val(y), log_val(one_minus));
}

} // namespace sdconet
