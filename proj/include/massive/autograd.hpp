#pragma once

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <span>
#include <vector>

#include "rng.hpp"
#include "tensor.hpp"

namespace massive {

// Tape-based reverse-mode differentiation over Tensor values.
//
// Nodes are appended in evaluation order, so the tape is already a topological
// order and backward() is a single reverse sweep. A node keeps a backward
// closure only when at least one of its inputs requires a gradient; inference
// graphs therefore carry no closures and no saved activations beyond values.
//
// The graph holds pointers to leaf tensors registered with leaf(); those
// tensors must outlive the graph. Graphs are pinned (closures capture `this`).
template <Scalar T>
class Graph {
public:
    struct Var {
        std::size_t id = std::numeric_limits<std::size_t>::max();
    };

    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    std::size_t size() const noexcept { return nodes_.size(); }

    Var constant(Tensor<T> value) {
        Node n;
        n.owned = std::move(value);
        return append(std::move(n));
    }

    // References `value` without copying.
    Var leaf(const Tensor<T>& value, bool requires_grad) {
        Node n;
        n.ref = &value;
        n.requires_grad = requires_grad;
        return append(std::move(n));
    }

    Var leaf_owned(Tensor<T> value, bool requires_grad) {
        Node n;
        n.owned = std::move(value);
        n.requires_grad = requires_grad;
        return append(std::move(n));
    }

    const Tensor<T>& value(Var v) const { return node(v).value(); }
    bool requires_grad(Var v) const { return node(v).requires_grad; }

    // Accumulated gradient; zeros when nothing flowed into `v`.
    Tensor<T> grad(Var v) const {
        const Node& n = node(v);
        return n.grad.empty() && n.value().numel() != 0 ? Tensor<T>(n.value().shape()) : n.grad;
    }

    // Post-softmax attention probabilities [heads × T × T] of an attention node.
    const Tensor<T>& aux(Var v) const { return node(v).aux; }

    void backward(Var loss) {
        const Node& ln = node(loss);
        if (ln.value().numel() != 1) {
            throw ContractError("backward requires a scalar loss, got " + shape_string(ln.value().shape()));
        }
        if (!ln.requires_grad) {
            return;
        }
        grad_ref(loss.id)[0] = T{1};
        for (std::size_t i = loss.id + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (n.requires_grad && n.backward && !n.grad.empty()) {
                n.backward(n.grad);
            }
        }
    }

    // ---------------------------------------------------------------- ops

    Var matmul(Var a, Var b) {
        const Tensor<T>& av = value(a);
        const Tensor<T>& bv = value(b);
        Tensor<T> out = massive::matmul(av, bv);
        return push(std::move(out), {a, b}, [this, a, b](const Tensor<T>& g) {
            const Tensor<T>& av = value(a);
            const Tensor<T>& bv = value(b);
            const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
            if (wants(a)) {
                Tensor<T>& da = grad_ref(a.id);
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t t = 0; t < k; ++t) {
                        da.ptr()[i * k + t] += detail::dot(g.ptr() + i * n, bv.ptr() + t * n, n);
                    }
                }
            }
            if (wants(b)) {
                Tensor<T>& db = grad_ref(b.id);
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t t = 0; t < k; ++t) {
                        detail::axpy(av.ptr()[i * k + t], g.ptr() + i * n, db.ptr() + t * n, n);
                    }
                }
            }
        });
    }

    // x[m×in] · w[out×in]ᵀ
    Var linear(Var x, Var w) {
        Tensor<T> out = massive::matmul_transposed(value(x), value(w));
        return push(std::move(out), {x, w}, [this, x, w](const Tensor<T>& g) {
            const Tensor<T>& xv = value(x);
            const Tensor<T>& wv = value(w);
            const std::size_t m = xv.rows(), in = wv.dim(1), out = wv.dim(0);
            if (wants(x)) {
                Tensor<T>& dx = grad_ref(x.id);
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t o = 0; o < out; ++o) {
                        detail::axpy(g.ptr()[i * out + o], wv.ptr() + o * in, dx.ptr() + i * in, in);
                    }
                }
            }
            if (wants(w)) {
                Tensor<T>& dw = grad_ref(w.id);
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t o = 0; o < out; ++o) {
                        detail::axpy(g.ptr()[i * out + o], xv.ptr() + i * in, dw.ptr() + o * in, in);
                    }
                }
            }
        });
    }

    Var add(Var a, Var b) {
        Tensor<T> out = massive::add(value(a), value(b));
        return push(std::move(out), {a, b}, [this, a, b](const Tensor<T>& g) {
            if (wants(a)) {
                accumulate(a, g);
            }
            if (wants(b)) {
                accumulate_broadcast(b, g);
            }
        });
    }

    Var mul(Var a, Var b) {
        Tensor<T> out = massive::mul(value(a), value(b));
        return push(std::move(out), {a, b}, [this, a, b](const Tensor<T>& g) {
            const Tensor<T>& av = value(a);
            const Tensor<T>& bv = value(b);
            const std::size_t m = bv.numel();
            if (wants(a)) {
                Tensor<T>& da = grad_ref(a.id);
                for (std::size_t i = 0; i < g.numel(); ++i) {
                    da[i] += g[i] * bv[i % m];
                }
            }
            if (wants(b)) {
                Tensor<T>& db = grad_ref(b.id);
                for (std::size_t i = 0; i < g.numel(); ++i) {
                    db[i % m] += g[i] * av[i];
                }
            }
        });
    }

    Var scale(Var a, T s) {
        Tensor<T> out = value(a);
        for (T& v : out.data()) {
            v *= s;
        }
        return push(std::move(out), {a}, [this, a, s](const Tensor<T>& g) {
            Tensor<T>& da = grad_ref(a.id);
            detail::axpy(s, g.ptr(), da.ptr(), g.numel());
        });
    }

    Var silu(Var a) {
        Tensor<T> out = massive::silu(value(a));
        return push(std::move(out), {a}, [this, a](const Tensor<T>& g) {
            const Tensor<T>& x = value(a);
            Tensor<T>& da = grad_ref(a.id);
            for (std::size_t i = 0; i < g.numel(); ++i) {
                const T s = detail::sigmoid(x[i]);
                da[i] += g[i] * s * (T{1} + x[i] * (T{1} - s));
            }
        });
    }

    Var exp(Var a) {
        Tensor<T> out = massive::exp(value(a));
        const std::size_t self = nodes_.size();
        return push(std::move(out), {a}, [this, a, self](const Tensor<T>& g) {
            const Tensor<T>& y = nodes_[self].value();
            Tensor<T>& da = grad_ref(a.id);
            for (std::size_t i = 0; i < g.numel(); ++i) {
                da[i] += g[i] * y[i];
            }
        });
    }

    Var softmax_lastdim(Var a) {
        Tensor<T> out = massive::softmax_lastdim(value(a));
        const std::size_t self = nodes_.size();
        return push(std::move(out), {a}, [this, a, self](const Tensor<T>& g) {
            const Tensor<T>& y = nodes_[self].value();
            Tensor<T>& da = grad_ref(a.id);
            const std::size_t n = y.cols();
            for (std::size_t r = 0; r < y.rows(); ++r) {
                const T* yr = y.ptr() + r * n;
                const T* gr = g.ptr() + r * n;
                const T s = detail::dot(gr, yr, n);
                T* dr = da.ptr() + r * n;
                for (std::size_t i = 0; i < n; ++i) {
                    dr[i] += yr[i] * (gr[i] - s);
                }
            }
        });
    }

    Var rmsnorm(Var x, Var gain, double eps) {
        Tensor<T> out = massive::rmsnorm(value(x), value(gain), eps);
        return push(std::move(out), {x, gain}, [this, x, gain, eps](const Tensor<T>& g) {
            const Tensor<T>& xv = value(x);
            const Tensor<T>& gv = value(gain);
            const std::size_t n = xv.cols();
            for (std::size_t r = 0; r < xv.rows(); ++r) {
                const T* xr = xv.ptr() + r * n;
                const T* gr = g.ptr() + r * n;
                const T ms = detail::dot(xr, xr, n) / static_cast<T>(n);
                const T inv = T{1} / std::sqrt(ms + static_cast<T>(eps));
                if (wants(x)) {
                    T s = 0;
                    for (std::size_t i = 0; i < n; ++i) {
                        s += gr[i] * gv[i] * xr[i];
                    }
                    const T c = s * inv * inv * inv / static_cast<T>(n);
                    T* dr = grad_ref(x.id).ptr() + r * n;
                    for (std::size_t i = 0; i < n; ++i) {
                        dr[i] += gr[i] * gv[i] * inv - xr[i] * c;
                    }
                }
                if (wants(gain)) {
                    T* dg = grad_ref(gain.id).ptr();
                    for (std::size_t i = 0; i < n; ++i) {
                        dg[i] += gr[i] * xr[i] * inv;
                    }
                }
            }
        });
    }

    Var layernorm(Var x, Var gain, Var bias, double eps) {
        Tensor<T> out = massive::layernorm(value(x), value(gain), value(bias), eps);
        return push(std::move(out), {x, gain, bias}, [this, x, gain, bias, eps](const Tensor<T>& g) {
            const Tensor<T>& xv = value(x);
            const Tensor<T>& gv = value(gain);
            const std::size_t n = xv.cols();
            const T fn = static_cast<T>(n);
            std::vector<T> xhat(n), dxhat(n);
            for (std::size_t r = 0; r < xv.rows(); ++r) {
                const T* xr = xv.ptr() + r * n;
                const T* gr = g.ptr() + r * n;
                T mean = 0;
                for (std::size_t i = 0; i < n; ++i) {
                    mean += xr[i];
                }
                mean /= fn;
                T var = 0;
                for (std::size_t i = 0; i < n; ++i) {
                    var += (xr[i] - mean) * (xr[i] - mean);
                }
                var /= fn;
                const T inv = T{1} / std::sqrt(var + static_cast<T>(eps));
                T mean_d = 0, mean_dx = 0;
                for (std::size_t i = 0; i < n; ++i) {
                    xhat[i] = (xr[i] - mean) * inv;
                    dxhat[i] = gr[i] * gv[i];
                    mean_d += dxhat[i];
                    mean_dx += dxhat[i] * xhat[i];
                }
                mean_d /= fn;
                mean_dx /= fn;
                if (wants(x)) {
                    T* dr = grad_ref(x.id).ptr() + r * n;
                    for (std::size_t i = 0; i < n; ++i) {
                        dr[i] += inv * (dxhat[i] - mean_d - xhat[i] * mean_dx);
                    }
                }
                if (wants(gain)) {
                    T* dg = grad_ref(gain.id).ptr();
                    for (std::size_t i = 0; i < n; ++i) {
                        dg[i] += gr[i] * xhat[i];
                    }
                }
                if (wants(bias)) {
                    T* db = grad_ref(bias.id).ptr();
                    for (std::size_t i = 0; i < n; ++i) {
                        db[i] += gr[i];
                    }
                }
            }
        });
    }

    // Rows of `table` selected by `ids`.
    Var embedding(Var table, std::span<const std::uint32_t> ids) {
        const Tensor<T>& tv = value(table);
        detail::require_matrix(tv.shape(), "embedding");
        const std::size_t d = tv.dim(1);
        Tensor<T> out({ids.size(), d});
        for (std::size_t t = 0; t < ids.size(); ++t) {
            if (ids[t] >= tv.dim(0)) {
                throw InputError("token id " + std::to_string(ids[t]) + " at position " + std::to_string(t) +
                                 " is out of range for vocabulary " + std::to_string(tv.dim(0)));
            }
            std::copy_n(tv.ptr() + ids[t] * d, d, out.ptr() + t * d);
        }
        std::vector<std::uint32_t> saved(ids.begin(), ids.end());
        return push(std::move(out), {table}, [this, table, saved = std::move(saved), d](const Tensor<T>& g) {
            Tensor<T>& dt = grad_ref(table.id);
            for (std::size_t t = 0; t < saved.size(); ++t) {
                detail::axpy(T{1}, g.ptr() + t * d, dt.ptr() + saved[t] * d, d);
            }
        });
    }

    // Rotary position embedding over heads of width head_dim, rotating the
    // pair (i, i + head_dim/2); row t of `x` sits at position t.
    Var rope(Var x, std::size_t num_heads, std::size_t head_dim, double theta) {
        const Tensor<T>& xv = value(x);
        if (head_dim % 2 != 0 || xv.cols() != num_heads * head_dim) {
            throw DimensionError("rope expects width heads*head_dim with even head_dim, got " +
                                 shape_string(xv.shape()));
        }
        const std::size_t rows = xv.rows();
        const std::size_t half = head_dim / 2;
        std::vector<T> cos_t(rows * half), sin_t(rows * half);
        for (std::size_t t = 0; t < rows; ++t) {
            for (std::size_t i = 0; i < half; ++i) {
                const double freq = std::pow(theta, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
                const double angle = static_cast<double>(t) * freq;
                cos_t[t * half + i] = static_cast<T>(std::cos(angle));
                sin_t[t * half + i] = static_cast<T>(std::sin(angle));
            }
        }
        Tensor<T> out(xv.shape());
        rotate(xv, out, cos_t, sin_t, num_heads, head_dim, false);
        return push(std::move(out), {x},
                    [this, x, cos_t = std::move(cos_t), sin_t = std::move(sin_t), num_heads,
                     head_dim](const Tensor<T>& g) {
                        Tensor<T> back(g.shape());
                        rotate(g, back, cos_t, sin_t, num_heads, head_dim, true);
                        accumulate(x, back);
                    });
    }

    // Causal multi-head attention. q has num_heads*head_dim columns, k and v
    // have num_kv_heads*head_dim; query head h reads kv head h / (num_heads / num_kv_heads).
    // The post-softmax probabilities are kept in aux(): [num_heads × T × T].
    Var causal_attention(Var q, Var k, Var v, std::size_t num_heads, std::size_t num_kv_heads) {
        const Tensor<T>& qv = value(q);
        const Tensor<T>& kv = value(k);
        const Tensor<T>& vv = value(v);
        if (num_kv_heads == 0 || num_heads % num_kv_heads != 0 || qv.cols() % num_heads != 0) {
            throw DimensionError("attention head counts do not divide the projection widths");
        }
        const std::size_t n = qv.rows();
        const std::size_t hd = qv.cols() / num_heads;
        const std::size_t qw = qv.cols(), kw = num_kv_heads * hd;
        if (kv.cols() != kw || vv.cols() != kw || kv.rows() != n || vv.rows() != n) {
            throw DimensionError("attention q/k/v shapes differ: " + shape_string(qv.shape()) + ", " +
                                 shape_string(kv.shape()) + ", " + shape_string(vv.shape()));
        }
        const std::size_t group = num_heads / num_kv_heads;
        const T inv_sqrt = T{1} / std::sqrt(static_cast<T>(hd));
        Tensor<T> probs({num_heads, n, n});
        Tensor<T> out({n, qw});
        for (std::size_t h = 0; h < num_heads; ++h) {
            const std::size_t kh = h / group;
            for (std::size_t i = 0; i < n; ++i) {
                T* p = probs.ptr() + (h * n + i) * n;
                const T* qi = qv.ptr() + i * qw + h * hd;
                for (std::size_t j = 0; j <= i; ++j) {
                    p[j] = detail::dot(qi, kv.ptr() + j * kw + kh * hd, hd) * inv_sqrt;
                }
                softmax_inplace(std::span<T>(p, i + 1));
                T* oi = out.ptr() + i * qw + h * hd;
                for (std::size_t j = 0; j <= i; ++j) {
                    detail::axpy(p[j], vv.ptr() + j * kw + kh * hd, oi, hd);
                }
            }
        }
        const std::size_t self = nodes_.size();
        Var result = push(std::move(out), {q, k, v}, [this, q, k, v, self, num_heads, group, hd, inv_sqrt](
                                                            const Tensor<T>& g) {
            const Tensor<T>& qv = value(q);
            const Tensor<T>& kv = value(k);
            const Tensor<T>& vv = value(v);
            const Tensor<T>& probs = nodes_[self].aux;
            const std::size_t n = qv.rows();
            const std::size_t qw = qv.cols(), kw = kv.cols();
            Tensor<T>* dq = wants(q) ? &grad_ref(q.id) : nullptr;
            Tensor<T>* dk = wants(k) ? &grad_ref(k.id) : nullptr;
            Tensor<T>* dv = wants(v) ? &grad_ref(v.id) : nullptr;
            std::vector<T> dp(n);
            for (std::size_t h = 0; h < num_heads; ++h) {
                const std::size_t kh = h / group;
                for (std::size_t i = 0; i < n; ++i) {
                    const T* p = probs.ptr() + (h * n + i) * n;
                    const T* gi = g.ptr() + i * qw + h * hd;
                    T s = 0;
                    for (std::size_t j = 0; j <= i; ++j) {
                        dp[j] = detail::dot(gi, vv.ptr() + j * kw + kh * hd, hd);
                        s += p[j] * dp[j];
                        if (dv) {
                            detail::axpy(p[j], gi, dv->ptr() + j * kw + kh * hd, hd);
                        }
                    }
                    for (std::size_t j = 0; j <= i; ++j) {
                        const T ds = p[j] * (dp[j] - s) * inv_sqrt;
                        if (dq) {
                            detail::axpy(ds, kv.ptr() + j * kw + kh * hd, dq->ptr() + i * qw + h * hd, hd);
                        }
                        if (dk) {
                            detail::axpy(ds, qv.ptr() + i * qw + h * hd, dk->ptr() + j * kw + kh * hd, hd);
                        }
                    }
                }
            }
        });
        nodes_[result.id].aux = std::move(probs);
        return result;
    }

    // Mean next-token negative log-likelihood of `targets` under row-wise softmax(logits).
    Var cross_entropy(Var logits, std::span<const std::uint32_t> targets) {
        const Tensor<T>& lv = value(logits);
        if (lv.rows() != targets.size() || targets.empty()) {
            throw DimensionError("cross_entropy expects one target per logit row");
        }
        const std::size_t vocab = lv.cols();
        Tensor<T> probs = massive::softmax_lastdim(lv);
        double total = 0;
        for (std::size_t t = 0; t < targets.size(); ++t) {
            if (targets[t] >= vocab) {
                throw InputError("target id out of range at position " + std::to_string(t));
            }
            const T* row = lv.ptr() + t * vocab;
            const T mx = *std::max_element(row, row + vocab);
            double s = 0;
            for (std::size_t i = 0; i < vocab; ++i) {
                s += std::exp(static_cast<double>(row[i] - mx));
            }
            total += std::log(s) - static_cast<double>(row[targets[t]] - mx);
        }
        Tensor<T> out({1}, static_cast<T>(total / static_cast<double>(targets.size())));
        std::vector<std::uint32_t> saved(targets.begin(), targets.end());
        return push(std::move(out), {logits},
                    [this, logits, probs = std::move(probs), saved = std::move(saved), vocab](const Tensor<T>& g) {
                        Tensor<T>& dl = grad_ref(logits.id);
                        const T s = g[0] / static_cast<T>(saved.size());
                        for (std::size_t t = 0; t < saved.size(); ++t) {
                            const T* pr = probs.ptr() + t * vocab;
                            T* dr = dl.ptr() + t * vocab;
                            for (std::size_t i = 0; i < vocab; ++i) {
                                dr[i] += s * pr[i];
                            }
                            dr[saved[t]] -= s;
                        }
                    });
    }

    Var sum(Var a) {
        const Tensor<T>& av = value(a);
        T s = 0;
        for (T v : av.data()) {
            s += v;
        }
        return push(Tensor<T>({1}, s), {a}, [this, a](const Tensor<T>& g) {
            Tensor<T>& da = grad_ref(a.id);
            for (T& v : da.data()) {
                v += g[0];
            }
        });
    }

    // Inverted dropout; p = 0 returns `a` itself.
    Var dropout(Var a, double p, Rng& rng) {
        if (p < 0 || p >= 1) {
            throw ConfigError("dropout probability must lie in [0, 1)");
        }
        if (p == 0) {
            return a;
        }
        const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
        const Tensor<T>& av = value(a);
        Tensor<T> mask(av.shape());
        for (T& m : mask.data()) {
            m = rng.uniform_open() > p ? keep_scale : T{0};
        }
        Tensor<T> out = massive::mul(av, mask);
        return push(std::move(out), {a}, [this, a, mask = std::move(mask)](const Tensor<T>& g) {
            Tensor<T>& da = grad_ref(a.id);
            for (std::size_t i = 0; i < g.numel(); ++i) {
                da[i] += g[i] * mask[i];
            }
        });
    }

    // Mixture of expert outputs: per row, the top_t experts by `probs`
    // (ties to the lower index) are weighted by their probabilities
    // renormalized to sum to one; the rest contribute nothing.
    Var moe_combine(const std::vector<Var>& experts, Var probs, std::size_t top_t) {
        const Tensor<T>& pv = value(probs);
        if (experts.size() != pv.cols() || top_t == 0 || top_t > experts.size()) {
            throw DimensionError("moe_combine expert count does not match router width");
        }
        const std::size_t rows = pv.rows();
        const std::size_t d = value(experts[0]).cols();
        std::vector<std::size_t> chosen(rows * top_t);
        for (std::size_t r = 0; r < rows; ++r) {
            const auto sel = top_indices(pv.row(r), top_t);
            std::copy(sel.begin(), sel.end(), chosen.begin() + r * top_t);
        }
        Tensor<T> out({rows, d});
        for (std::size_t r = 0; r < rows; ++r) {
            T s = 0;
            for (std::size_t c = 0; c < top_t; ++c) {
                s += pv.at(r, chosen[r * top_t + c]);
            }
            for (std::size_t c = 0; c < top_t; ++c) {
                const std::size_t e = chosen[r * top_t + c];
                detail::axpy(pv.at(r, e) / s, value(experts[e]).ptr() + r * d, out.ptr() + r * d, d);
            }
        }
        std::vector<Var> inputs = experts;
        inputs.push_back(probs);
        const std::size_t self = nodes_.size();
        return push(std::move(out), inputs, [this, experts, probs, chosen = std::move(chosen), top_t, rows, d,
                                             self](const Tensor<T>& g) {
            const Tensor<T>& pv = value(probs);
            const Tensor<T>& ov = nodes_[self].value();
            for (std::size_t r = 0; r < rows; ++r) {
                T s = 0;
                for (std::size_t c = 0; c < top_t; ++c) {
                    s += pv.at(r, chosen[r * top_t + c]);
                }
                const T* gr = g.ptr() + r * d;
                for (std::size_t c = 0; c < top_t; ++c) {
                    const std::size_t e = chosen[r * top_t + c];
                    if (wants(experts[e])) {
                        detail::axpy(pv.at(r, e) / s, gr, grad_ref(experts[e].id).ptr() + r * d, d);
                    }
                    if (wants(probs)) {
                        const T* ye = value(experts[e]).ptr() + r * d;
                        const T* orow = ov.ptr() + r * d;
                        T acc = 0;
                        for (std::size_t i = 0; i < d; ++i) {
                            acc += gr[i] * (ye[i] - orow[i]);
                        }
                        grad_ref(probs.id).at(r, e) += acc / s;
                    }
                }
            }
        });
    }

    // Indices of the `count` largest entries, descending, ties to the lower index.
    static std::vector<std::size_t> top_indices(std::span<const T> values, std::size_t count) {
        std::vector<std::size_t> idx(values.size());
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return values[a] > values[b]; });
        idx.resize(std::min(count, idx.size()));
        return idx;
    }

private:
    struct Node {
        Tensor<T> owned;
        const Tensor<T>* ref = nullptr;
        Tensor<T> grad;
        Tensor<T> aux;
        bool requires_grad = false;
        std::function<void(const Tensor<T>&)> backward;

        const Tensor<T>& value() const { return ref ? *ref : owned; }
    };

    const Node& node(Var v) const {
        if (v.id >= nodes_.size()) {
            throw ContractError("variable does not belong to this graph");
        }
        return nodes_[v.id];
    }

    Var append(Node n) {
        nodes_.push_back(std::move(n));
        return Var{nodes_.size() - 1};
    }

    bool wants(Var v) const { return nodes_[v.id].requires_grad; }

    template <class Inputs, class F>
    Var push_impl(Tensor<T> value, const Inputs& inputs, F&& backward) {
#ifndef NDEBUG
        bool finite_inputs = true;
        for (Var in : inputs) {
            finite_inputs = finite_inputs && nodes_[in.id].value().all_finite();
        }
        if (finite_inputs && !value.all_finite()) {
            throw NumericFault("non-finite output from an op on finite inputs");
        }
#endif
        Node n;
        n.owned = std::move(value);
        for (Var in : inputs) {
            n.requires_grad = n.requires_grad || nodes_[in.id].requires_grad;
        }
        if (n.requires_grad) {
            n.backward = std::forward<F>(backward);
        }
        return append(std::move(n));
    }

    template <class F>
    Var push(Tensor<T> value, std::initializer_list<Var> inputs, F&& backward) {
        return push_impl(std::move(value), inputs, std::forward<F>(backward));
    }

    template <class F>
    Var push(Tensor<T> value, const std::vector<Var>& inputs, F&& backward) {
        return push_impl(std::move(value), inputs, std::forward<F>(backward));
    }

    Tensor<T>& grad_ref(std::size_t id) {
        Node& n = nodes_[id];
        if (n.grad.empty()) {
            n.grad = Tensor<T>(n.value().shape());
        }
        return n.grad;
    }

    void accumulate(Var v, const Tensor<T>& g) {
        Tensor<T>& d = grad_ref(v.id);
        detail::axpy(T{1}, g.ptr(), d.ptr(), g.numel());
    }

    // Reduces `g` onto a trailing-broadcast operand.
    void accumulate_broadcast(Var v, const Tensor<T>& g) {
        Tensor<T>& d = grad_ref(v.id);
        const std::size_t m = d.numel();
        for (std::size_t i = 0; i < g.numel(); ++i) {
            d[i % m] += g[i];
        }
    }

    static void rotate(const Tensor<T>& in, Tensor<T>& out, const std::vector<T>& cos_t, const std::vector<T>& sin_t,
                       std::size_t num_heads, std::size_t head_dim, bool inverse) {
        const std::size_t half = head_dim / 2;
        const std::size_t width = in.cols();
        const T sign = inverse ? T{-1} : T{1};
        for (std::size_t t = 0; t < in.rows(); ++t) {
            for (std::size_t h = 0; h < num_heads; ++h) {
                const T* x = in.ptr() + t * width + h * head_dim;
                T* y = out.ptr() + t * width + h * head_dim;
                for (std::size_t i = 0; i < half; ++i) {
                    const T c = cos_t[t * half + i];
                    const T s = sign * sin_t[t * half + i];
                    y[i] = x[i] * c - x[i + half] * s;
                    y[i + half] = x[i] * s + x[i + half] * c;
                }
            }
        }
    }

    std::deque<Node> nodes_;
};

} // namespace massive
