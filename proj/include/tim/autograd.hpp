#pragma once

// Tape-based reverse-mode differentiation over TensorT, restricted to the ops
// the transformer needs. Gradients are materialized only along paths that
// reach a flagged leaf; everything else computes values without recording,
// so frozen weights never get gradient buffers.

#include <cassert>
#include <functional>
#include <memory>
#include <stdexcept>
#include <vector>

#include "tensor.hpp"

namespace tim {

template <class R>
class TapeT {
   public:
    struct Node {
        TensorT<R> grad;
        std::function<void()> back;  // null for leaves
    };

    std::vector<Node> nodes;
    bool consumed = false;

    int push(const std::vector<int>& shape, std::function<void()> back) {
        nodes.push_back(Node{TensorT<R>::zeros(shape), std::move(back)});
        return static_cast<int>(nodes.size()) - 1;
    }

    TensorT<R>& grad(int id) { return nodes[static_cast<size_t>(id)].grad; }
};

template <class R>
struct VarT {
    std::shared_ptr<TensorT<R>> p;
    TapeT<R>* tape = nullptr;
    int id = -1;

    VarT() = default;
    const TensorT<R>& val() const { return *p; }
    bool tracked() const { return tape != nullptr && id >= 0; }
};

template <class R>
VarT<R> constant(TensorT<R> t) {
    VarT<R> v;
    v.p = std::make_shared<TensorT<R>>(std::move(t));
    return v;
}

template <class R>
VarT<R> leaf(TapeT<R>& tape, const TensorT<R>& t) {
    VarT<R> v;
    v.p = std::make_shared<TensorT<R>>(t);
    v.tape = &tape;
    v.id = tape.push(t.shape, nullptr);
    return v;
}

namespace detail {

template <class R>
TapeT<R>* tape_of(const VarT<R>& a, const VarT<R>& b) {
    return a.tracked() ? a.tape : (b.tracked() ? b.tape : nullptr);
}

template <class R>
VarT<R> wrap(TensorT<R> value, TapeT<R>* tape, std::function<void(int)> make_back) {
    VarT<R> out;
    out.p = std::make_shared<TensorT<R>>(std::move(value));
    if (tape != nullptr) {
        out.tape = tape;
        // Two-phase so the closure can reference its own node id.
        out.id = tape->push(out.p->shape, nullptr);
        make_back(out.id);
    }
    return out;
}

}  // namespace detail

// C = A @ B
template <class R>
VarT<R> matmul(const VarT<R>& a, const VarT<R>& b) {
    const int m = a.val().rows(), k = a.val().cols(), n = b.val().cols();
    if (b.val().rows() != k) throw std::invalid_argument("matmul: inner dims");
    TensorT<R> c({m, n});
    kern::matmul_acc(c.data.data(), a.val().data.data(), b.val().data.data(), m, k, n);
    TapeT<R>* tape = detail::tape_of(a, b);
    return detail::wrap<R>(std::move(c), tape, [=](int self) {
        tape->nodes[self].back = [=]() {
            const TensorT<R>& g = tape->grad(self);
            if (a.tracked())
                kern::matmul_nt_acc(tape->grad(a.id).data.data(), g.data.data(),
                                    b.val().data.data(), m, n, k);
            if (b.tracked())
                kern::matmul_tn_acc(tape->grad(b.id).data.data(), a.val().data.data(),
                                    g.data.data(), k, m, n);
        };
    });
}

// C = A @ B^T   (B is n x k)
template <class R>
VarT<R> matmul_nt(const VarT<R>& a, const VarT<R>& b) {
    const int m = a.val().rows(), k = a.val().cols(), n = b.val().rows();
    if (b.val().cols() != k) throw std::invalid_argument("matmul_nt: inner dims");
    TensorT<R> c({m, n});
    kern::matmul_nt_acc(c.data.data(), a.val().data.data(), b.val().data.data(), m, k, n);
    TapeT<R>* tape = detail::tape_of(a, b);
    return detail::wrap<R>(std::move(c), tape, [=](int self) {
        tape->nodes[self].back = [=]() {
            const TensorT<R>& g = tape->grad(self);
            if (a.tracked())
                kern::matmul_acc(tape->grad(a.id).data.data(), g.data.data(),
                                 b.val().data.data(), m, n, k);
            if (b.tracked())
                kern::matmul_tn_acc(tape->grad(b.id).data.data(), g.data.data(),
                                    a.val().data.data(), n, m, k);
        };
    });
}

template <class R>
VarT<R> add(const VarT<R>& a, const VarT<R>& b) {
    if (!a.val().same_shape(b.val())) throw std::invalid_argument("add: shape mismatch");
    TensorT<R> c = a.val();
    for (size_t i = 0; i < c.data.size(); ++i) c.data[i] += b.val().data[i];
    TapeT<R>* tape = detail::tape_of(a, b);
    return detail::wrap<R>(std::move(c), tape, [=](int self) {
        tape->nodes[self].back = [=]() {
            const TensorT<R>& g = tape->grad(self);
            if (a.tracked()) {
                TensorT<R>& ga = tape->grad(a.id);
                for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i];
            }
            if (b.tracked()) {
                TensorT<R>& gb = tape->grad(b.id);
                for (size_t i = 0; i < g.data.size(); ++i) gb.data[i] += g.data[i];
            }
        };
    });
}

// x [T,n] + bias [1,n] broadcast over rows
template <class R>
VarT<R> add_bias(const VarT<R>& x, const VarT<R>& bias) {
    const int t = x.val().rows(), n = x.val().cols();
    if (bias.val().numel() != n) throw std::invalid_argument("add_bias: width mismatch");
    TensorT<R> c = x.val();
    for (int i = 0; i < t; ++i)
        for (int j = 0; j < n; ++j) c.at(i, j) += bias.val().data[static_cast<size_t>(j)];
    TapeT<R>* tape = detail::tape_of(x, bias);
    return detail::wrap<R>(std::move(c), tape, [=](int self) {
        tape->nodes[self].back = [=]() {
            const TensorT<R>& g = tape->grad(self);
            if (x.tracked()) {
                TensorT<R>& gx = tape->grad(x.id);
                for (size_t i = 0; i < g.data.size(); ++i) gx.data[i] += g.data[i];
            }
            if (bias.tracked()) {
                TensorT<R>& gb = tape->grad(bias.id);
                for (int i = 0; i < t; ++i)
                    for (int j = 0; j < n; ++j) gb.data[static_cast<size_t>(j)] += g.at(i, j);
            }
        };
    });
}

template <class R>
VarT<R> scale(const VarT<R>& a, R c) {
    TensorT<R> out = a.val();
    for (R& x : out.data) x *= c;
    TapeT<R>* tape = a.tracked() ? a.tape : nullptr;
    return detail::wrap<R>(std::move(out), tape, [=](int self) {
        tape->nodes[self].back = [=]() {
            const TensorT<R>& g = tape->grad(self);
            TensorT<R>& ga = tape->grad(a.id);
            for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += c * g.data[i];
        };
    });
}

template <class R>
VarT<R> relu(const VarT<R>& a) {
    TensorT<R> out = a.val();
    for (R& x : out.data) x = x > R(0) ? x : R(0);
    TapeT<R>* tape = a.tracked() ? a.tape : nullptr;
    return detail::wrap<R>(std::move(out), tape, [=](int self) {
        tape->nodes[self].back = [=]() {
            const TensorT<R>& g = tape->grad(self);
            TensorT<R>& ga = tape->grad(a.id);
            for (size_t i = 0; i < g.data.size(); ++i)
                if (a.val().data[i] > R(0)) ga.data[i] += g.data[i];
        };
    });
}

template <class R>
VarT<R> layernorm(const VarT<R>& x, const VarT<R>& gamma, const VarT<R>& beta, R eps) {
    const int t = x.val().rows(), n = x.val().cols();
    TensorT<R> out({t, n});
    for (int i = 0; i < t; ++i)
        kern::layernorm_row(x.val().row_ptr(i), gamma.val().data.data(), beta.val().data.data(),
                            out.row_ptr(i), n, eps);
    TapeT<R>* tape = detail::tape_of(x, gamma);
    if (tape == nullptr && beta.tracked()) tape = beta.tape;
    return detail::wrap<R>(std::move(out), tape, [=](int self) {
        tape->nodes[self].back = [=]() {
            const TensorT<R>& g = tape->grad(self);
            for (int i = 0; i < t; ++i) {
                const R* xi = x.val().row_ptr(i);
                const R* gi = g.row_ptr(i);
                R mean = R(0), var = R(0);
                for (int j = 0; j < n; ++j) mean += xi[j];
                mean /= R(n);
                for (int j = 0; j < n; ++j) var += (xi[j] - mean) * (xi[j] - mean);
                var /= R(n);
                const R inv = R(1) / std::sqrt(var + eps);
                if (gamma.tracked() || beta.tracked()) {
                    TensorT<R>* gg = gamma.tracked() ? &tape->grad(gamma.id) : nullptr;
                    TensorT<R>* gb = beta.tracked() ? &tape->grad(beta.id) : nullptr;
                    for (int j = 0; j < n; ++j) {
                        const R xhat = (xi[j] - mean) * inv;
                        if (gg) gg->data[static_cast<size_t>(j)] += gi[j] * xhat;
                        if (gb) gb->data[static_cast<size_t>(j)] += gi[j];
                    }
                }
                if (x.tracked()) {
                    TensorT<R>& gx = tape->grad(x.id);
                    R sum_g = R(0), sum_gx = R(0);
                    std::vector<R> gh(static_cast<size_t>(n));
                    for (int j = 0; j < n; ++j) {
                        gh[static_cast<size_t>(j)] = gi[j] * gamma.val().data[static_cast<size_t>(j)];
                        const R xhat = (xi[j] - mean) * inv;
                        sum_g += gh[static_cast<size_t>(j)];
                        sum_gx += gh[static_cast<size_t>(j)] * xhat;
                    }
                    for (int j = 0; j < n; ++j) {
                        const R xhat = (xi[j] - mean) * inv;
                        gx.at(i, j) += inv * (gh[static_cast<size_t>(j)] - sum_g / R(n) -
                                              xhat * sum_gx / R(n));
                    }
                }
            }
        };
    });
}

// Row-wise softmax over scores [Tq, Tk]; query row i may attend keys
// j <= i + offset. offset = Tk - Tq for a suffix of a cached sequence.
template <class R>
VarT<R> softmax_causal(const VarT<R>& s, int offset) {
    const int tq = s.val().rows(), tk = s.val().cols();
    TensorT<R> out({tq, tk});
    for (int i = 0; i < tq; ++i) {
        const int lim = std::min(tk, i + offset + 1);
        if (lim <= 0) throw std::invalid_argument("softmax_causal: empty row");
        const R* si = s.val().row_ptr(i);
        R* oi = out.row_ptr(i);
        for (int j = 0; j < lim; ++j) oi[j] = si[j];
        kern::softmax_row(oi, lim);
        for (int j = lim; j < tk; ++j) oi[j] = R(0);
    }
    TapeT<R>* tape = s.tracked() ? s.tape : nullptr;
    auto pv = std::make_shared<TensorT<R>>(out);
    return detail::wrap<R>(std::move(out), tape, [=](int self) {
        tape->nodes[self].back = [=]() {
            const TensorT<R>& g = tape->grad(self);
            TensorT<R>& gs = tape->grad(s.id);
            for (int i = 0; i < tq; ++i) {
                const int lim = std::min(tk, i + offset + 1);
                const R* pi = pv->row_ptr(i);
                const R* gi = g.row_ptr(i);
                R dot = R(0);
                for (int j = 0; j < lim; ++j) dot += gi[j] * pi[j];
                for (int j = 0; j < lim; ++j) gs.at(i, j) += pi[j] * (gi[j] - dot);
            }
        };
    });
}

// Gather rows of an embedding table by id; grad scatter-adds into the table.
template <class R>
VarT<R> embed_rows(const VarT<R>& table, const std::vector<int>& ids) {
    const int n = table.val().cols();
    TensorT<R> out({static_cast<int>(ids.size()), n});
    for (size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= table.val().rows())
            throw std::invalid_argument("embed_rows: id out of range");
        std::copy_n(table.val().row_ptr(ids[i]), n, out.row_ptr(static_cast<int>(i)));
    }
    TapeT<R>* tape = table.tracked() ? table.tape : nullptr;
    return detail::wrap<R>(std::move(out), tape, [=](int self) {
        tape->nodes[self].back = [=]() {
            const TensorT<R>& g = tape->grad(self);
            TensorT<R>& gt = tape->grad(table.id);
            for (size_t i = 0; i < ids.size(); ++i)
                for (int j = 0; j < n; ++j) gt.at(ids[i], j) += g.at(static_cast<int>(i), j);
        };
    });
}

template <class R>
VarT<R> slice_rows(const VarT<R>& x, int r0, int nrows) {
    const int n = x.val().cols();
    if (r0 < 0 || r0 + nrows > x.val().rows()) throw std::invalid_argument("slice_rows: range");
    TensorT<R> out({nrows, n});
    std::copy_n(x.val().row_ptr(r0), static_cast<size_t>(nrows) * n, out.data.data());
    TapeT<R>* tape = x.tracked() ? x.tape : nullptr;
    return detail::wrap<R>(std::move(out), tape, [=](int self) {
        tape->nodes[self].back = [=]() {
            const TensorT<R>& g = tape->grad(self);
            TensorT<R>& gx = tape->grad(x.id);
            for (int i = 0; i < nrows; ++i)
                for (int j = 0; j < n; ++j) gx.at(r0 + i, j) += g.at(i, j);
        };
    });
}

template <class R>
VarT<R> slice_cols(const VarT<R>& x, int c0, int ncols) {
    const int t = x.val().rows();
    if (c0 < 0 || c0 + ncols > x.val().cols()) throw std::invalid_argument("slice_cols: range");
    TensorT<R> out({t, ncols});
    for (int i = 0; i < t; ++i) std::copy_n(x.val().row_ptr(i) + c0, ncols, out.row_ptr(i));
    TapeT<R>* tape = x.tracked() ? x.tape : nullptr;
    return detail::wrap<R>(std::move(out), tape, [=](int self) {
        tape->nodes[self].back = [=]() {
            const TensorT<R>& g = tape->grad(self);
            TensorT<R>& gx = tape->grad(x.id);
            for (int i = 0; i < t; ++i)
                for (int j = 0; j < ncols; ++j) gx.at(i, c0 + j) += g.at(i, j);
        };
    });
}

template <class R>
VarT<R> concat_cols(const std::vector<VarT<R>>& xs) {
    if (xs.empty()) throw std::invalid_argument("concat_cols: empty");
    const int t = xs[0].val().rows();
    int n = 0;
    TapeT<R>* tape = nullptr;
    for (const auto& x : xs) {
        if (x.val().rows() != t) throw std::invalid_argument("concat_cols: row mismatch");
        n += x.val().cols();
        if (x.tracked()) tape = x.tape;
    }
    TensorT<R> out({t, n});
    int off = 0;
    for (const auto& x : xs) {
        for (int i = 0; i < t; ++i)
            std::copy_n(x.val().row_ptr(i), x.val().cols(), out.row_ptr(i) + off);
        off += x.val().cols();
    }
    return detail::wrap<R>(std::move(out), tape, [=](int self) {
        tape->nodes[self].back = [=]() {
            const TensorT<R>& g = tape->grad(self);
            int c0 = 0;
            for (const auto& x : xs) {
                const int nc = x.val().cols();
                if (x.tracked()) {
                    TensorT<R>& gx = tape->grad(x.id);
                    for (int i = 0; i < t; ++i)
                        for (int j = 0; j < nc; ++j) gx.at(i, j) += g.at(i, c0 + j);
                }
                c0 += nc;
            }
        };
    });
}

template <class R>
VarT<R> concat_rows(const std::vector<VarT<R>>& xs) {
    if (xs.empty()) throw std::invalid_argument("concat_rows: empty");
    const int n = xs[0].val().cols();
    int t = 0;
    TapeT<R>* tape = nullptr;
    for (const auto& x : xs) {
        if (x.val().cols() != n) throw std::invalid_argument("concat_rows: col mismatch");
        t += x.val().rows();
        if (x.tracked()) tape = x.tape;
    }
    TensorT<R> out({t, n});
    int off = 0;
    for (const auto& x : xs) {
        std::copy_n(x.val().data.data(), x.val().data.size(), out.row_ptr(off));
        off += x.val().rows();
    }
    return detail::wrap<R>(std::move(out), tape, [=](int self) {
        tape->nodes[self].back = [=]() {
            const TensorT<R>& g = tape->grad(self);
            int r0 = 0;
            for (const auto& x : xs) {
                if (x.tracked()) {
                    TensorT<R>& gx = tape->grad(x.id);
                    for (int i = 0; i < x.val().rows(); ++i)
                        for (int j = 0; j < n; ++j) gx.at(i, j) += g.at(r0 + i, j);
                }
                r0 += x.val().rows();
            }
        };
    });
}

// Mean cross-entropy from logits over the rows where active[i] != 0.
// Value is a [1,1] tensor; gradient is (softmax - onehot) / n_active.
template <class R>
VarT<R> cross_entropy_logits(const VarT<R>& logits, const std::vector<int>& labels,
                             const std::vector<uint8_t>& active) {
    const int t = logits.val().rows(), v = logits.val().cols();
    if (static_cast<int>(labels.size()) != t || static_cast<int>(active.size()) != t)
        throw std::invalid_argument("cross_entropy_logits: label count");
    int n_active = 0;
    double total = 0.0;
    for (int i = 0; i < t; ++i) {
        if (!active[static_cast<size_t>(i)]) continue;
        ++n_active;
        const R* li = logits.val().row_ptr(i);
        R mx = li[0];
        for (int j = 1; j < v; ++j) mx = std::max(mx, li[j]);
        R lse = R(0);
        for (int j = 0; j < v; ++j) lse += std::exp(li[j] - mx);
        total += static_cast<double>(mx + std::log(lse) - li[labels[static_cast<size_t>(i)]]);
    }
    if (n_active == 0) throw std::invalid_argument("cross_entropy_logits: no active rows");
    TensorT<R> out({1, 1});
    out.data[0] = static_cast<R>(total / n_active);
    TapeT<R>* tape = logits.tracked() ? logits.tape : nullptr;
    return detail::wrap<R>(std::move(out), tape, [=](int self) {
        tape->nodes[self].back = [=]() {
            const R gscale = tape->grad(self).data[0] / static_cast<R>(n_active);
            TensorT<R>& gl = tape->grad(logits.id);
            for (int i = 0; i < t; ++i) {
                if (!active[static_cast<size_t>(i)]) continue;
                const R* li = logits.val().row_ptr(i);
                std::vector<R> p(li, li + v);
                kern::softmax_row(p.data(), v);
                for (int j = 0; j < v; ++j) {
                    R d = p[static_cast<size_t>(j)];
                    if (j == labels[static_cast<size_t>(i)]) d -= R(1);
                    gl.at(i, j) += gscale * d;
                }
            }
        };
    });
}

// Seed the scalar loss with grad 1 and sweep the tape once, newest first.
template <class R>
void backward(const VarT<R>& loss) {
    if (!loss.tracked()) throw std::invalid_argument("backward: loss is not on a tape");
    if (loss.val().numel() != 1) throw std::invalid_argument("backward: loss must be scalar");
    TapeT<R>& tape = *loss.tape;
    if (tape.consumed) throw std::logic_error("backward: tape already consumed");
    tape.consumed = true;
    tape.grad(loss.id).data[0] = R(1);
    for (int i = static_cast<int>(tape.nodes.size()) - 1; i >= 0; --i)
        if (tape.nodes[static_cast<size_t>(i)].back) tape.nodes[static_cast<size_t>(i)].back();
}

using Tape = TapeT<float>;
using Var = VarT<float>;

}  // namespace tim
