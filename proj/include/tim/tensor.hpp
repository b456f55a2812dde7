#pragma once

// Dense row-major tensor plus the handful of kernels the engine needs.
//
// The kernels are shared between the batched (whole-sequence) forward and the
// incremental (KV-cache) decode path. Every kernel accumulates each output
// element over k in ascending order, so the two paths produce bit-identical
// results for the same logical computation.

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace tim {

template <class R>
struct TensorT {
    std::vector<int> shape;
    std::vector<R> data;

    TensorT() = default;
    TensorT(std::vector<int> s) : shape(std::move(s)) {
        data.assign(static_cast<size_t>(numel_of(shape)), R(0));
    }
    TensorT(std::vector<int> s, std::vector<R> d) : shape(std::move(s)), data(std::move(d)) {
        if (data.size() != static_cast<size_t>(numel_of(shape)))
            throw std::invalid_argument("tensor: shape/data size mismatch");
    }

    static long numel_of(const std::vector<int>& s) {
        long n = 1;
        for (int d : s) {
            if (d < 0) throw std::invalid_argument("tensor: negative dimension");
            n *= d;
        }
        return n;
    }

    long numel() const { return static_cast<long>(data.size()); }
    int rows() const { return shape.empty() ? 1 : shape[0]; }
    int cols() const { return shape.size() < 2 ? static_cast<int>(data.size()) / rows() : shape[1]; }

    R& at(int i, int j) { return data[static_cast<size_t>(i) * cols() + j]; }
    const R& at(int i, int j) const { return data[static_cast<size_t>(i) * cols() + j]; }

    R* row_ptr(int i) { return data.data() + static_cast<size_t>(i) * cols(); }
    const R* row_ptr(int i) const { return data.data() + static_cast<size_t>(i) * cols(); }

    bool same_shape(const TensorT& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (R x : data)
            if (!std::isfinite(static_cast<double>(x))) return false;
        return true;
    }

    static TensorT zeros(std::vector<int> s) { return TensorT(std::move(s)); }

    static TensorT randn(std::vector<int> s, std::mt19937& rng, R stddev) {
        TensorT t(std::move(s));
        std::normal_distribution<double> dist(0.0, static_cast<double>(stddev));
        for (R& x : t.data) x = static_cast<R>(dist(rng));
        return t;
    }

    static TensorT full(std::vector<int> s, R v) {
        TensorT t(std::move(s));
        for (R& x : t.data) x = v;
        return t;
    }

    template <class R2>
    TensorT<R2> cast() const {
        TensorT<R2> t;
        t.shape = shape;
        t.data.resize(data.size());
        for (size_t i = 0; i < data.size(); ++i) t.data[i] = static_cast<R2>(data[i]);
        return t;
    }
};

namespace kern {

// C[i,j] += sum_k A[i,k] * B[k,j]; i-k-j order keeps per-element accumulation
// ascending in k and vectorizes over j.
template <class R>
void matmul_acc(R* c, const R* a, const R* b, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        R* ci = c + static_cast<size_t>(i) * n;
        const R* ai = a + static_cast<size_t>(i) * k;
        for (int kk = 0; kk < k; ++kk) {
            const R av = ai[kk];
            const R* bk = b + static_cast<size_t>(kk) * n;
            for (int j = 0; j < n; ++j) ci[j] += av * bk[j];
        }
    }
}

// C[i,j] += sum_k A[i,k] * B[j,k]  (B transposed; B is n x k row-major)
template <class R>
void matmul_nt_acc(R* c, const R* a, const R* b, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const R* ai = a + static_cast<size_t>(i) * k;
        R* ci = c + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const R* bj = b + static_cast<size_t>(j) * k;
            R acc = R(0);
            for (int kk = 0; kk < k; ++kk) acc += ai[kk] * bj[kk];
            ci[j] += acc;
        }
    }
}

// C[i,j] += sum_k A[k,i] * B[k,j]  (A transposed; A is k x m row-major)
template <class R>
void matmul_tn_acc(R* c, const R* a, const R* b, int m, int k, int n) {
    for (int kk = 0; kk < k; ++kk) {
        const R* ak = a + static_cast<size_t>(kk) * m;
        const R* bk = b + static_cast<size_t>(kk) * n;
        for (int i = 0; i < m; ++i) {
            const R av = ak[i];
            R* ci = c + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) ci[j] += av * bk[j];
        }
    }
}

// In-place stable softmax over x[0..n).
template <class R>
void softmax_row(R* x, int n) {
    R mx = x[0];
    for (int i = 1; i < n; ++i) mx = std::max(mx, x[i]);
    R sum = R(0);
    for (int i = 0; i < n; ++i) {
        x[i] = std::exp(x[i] - mx);
        sum += x[i];
    }
    const R inv = R(1) / sum;
    for (int i = 0; i < n; ++i) x[i] *= inv;
}

template <class R>
void layernorm_row(const R* x, const R* gamma, const R* beta, R* out, int n, R eps) {
    R mean = R(0);
    for (int i = 0; i < n; ++i) mean += x[i];
    mean /= R(n);
    R var = R(0);
    for (int i = 0; i < n; ++i) {
        const R d = x[i] - mean;
        var += d * d;
    }
    var /= R(n);
    const R inv = R(1) / std::sqrt(var + eps);
    for (int i = 0; i < n; ++i) out[i] = (x[i] - mean) * inv * gamma[i] + beta[i];
}

}  // namespace kern

// FNV-1a over the little-endian f32 image of a tensor list; used for the
// base-weight freeze audit and checkpoint integrity.
inline uint64_t fnv1a_bytes(uint64_t h, const void* p, size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (size_t i = 0; i < n; ++i) {
        h ^= b[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

template <class R>
uint64_t content_hash(const std::vector<const TensorT<R>*>& tensors) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const auto* t : tensors) {
        for (R v : t->data) {
            const float f = static_cast<float>(v);
            h = fnv1a_bytes(h, &f, sizeof(float));
        }
    }
    return h;
}

using Tensor = TensorT<float>;

}  // namespace tim
