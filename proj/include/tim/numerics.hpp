#pragma once

// Plain (untaped) numeric helpers plus the Adam optimizer.

#include <cmath>
#include <stdexcept>
#include <vector>

#include "tensor.hpp"

namespace tim {

template <class R>
std::vector<R> softmax(const std::vector<R>& v) {
    if (v.empty()) throw std::invalid_argument("softmax: empty input");
    std::vector<R> out = v;
    kern::softmax_row(out.data(), static_cast<int>(out.size()));
    return out;
}

template <class R>
struct CeResult {
    R loss;
    bool clamped;  // true when probs[label] hit the 1e-12 floor
};

template <class R>
CeResult<R> cross_entropy(const std::vector<R>& probs, int label) {
    if (label < 0 || label >= static_cast<int>(probs.size()))
        throw std::invalid_argument("cross_entropy: label out of range");
    double p = static_cast<double>(probs[static_cast<size_t>(label)]);
    bool clamped = false;
    if (p < 1e-12) {
        p = 1e-12;
        clamped = true;
    }
    return {static_cast<R>(-std::log(p)), clamped};
}

// Standard Adam with bias correction. Parameters are referenced by pointer;
// moment buffers live here. One AdamOpt instance per disjoint leaf group.
template <class R>
class AdamOptT {
   public:
    struct Hyper {
        R lr = R(1e-3);
        R beta1 = R(0.9);
        R beta2 = R(0.999);
        R eps = R(1e-8);
    };

    AdamOptT() = default;
    explicit AdamOptT(Hyper h) : hyper_(h) {
        if (!(hyper_.lr > R(0))) throw std::invalid_argument("adam: lr must be positive");
    }

    void attach(TensorT<R>* param) {
        slots_.push_back(Slot{param, TensorT<R>::zeros(param->shape), TensorT<R>::zeros(param->shape)});
    }

    size_t size() const { return slots_.size(); }
    long step_count() const { return t_; }
    const Hyper& hyper() const { return hyper_; }

    // grads[i] pairs with the i-th attached parameter.
    void step(const std::vector<const TensorT<R>*>& grads) {
        if (grads.size() != slots_.size()) throw std::invalid_argument("adam: grad count mismatch");
        ++t_;
        const R bc1 = R(1) - std::pow(hyper_.beta1, static_cast<R>(t_));
        const R bc2 = R(1) - std::pow(hyper_.beta2, static_cast<R>(t_));
        for (size_t s = 0; s < slots_.size(); ++s) {
            Slot& sl = slots_[s];
            const TensorT<R>& g = *grads[s];
            if (!g.same_shape(*sl.param)) throw std::invalid_argument("adam: grad shape mismatch");
            for (size_t i = 0; i < g.data.size(); ++i) {
                sl.m.data[i] = hyper_.beta1 * sl.m.data[i] + (R(1) - hyper_.beta1) * g.data[i];
                sl.v.data[i] = hyper_.beta2 * sl.v.data[i] + (R(1) - hyper_.beta2) * g.data[i] * g.data[i];
                const R mhat = sl.m.data[i] / bc1;
                const R vhat = sl.v.data[i] / bc2;
                sl.param->data[i] -= hyper_.lr * mhat / (std::sqrt(vhat) + hyper_.eps);
            }
            if (!sl.param->all_finite()) throw std::runtime_error("adam: non-finite parameter after update");
        }
    }

   private:
    struct Slot {
        TensorT<R>* param;
        TensorT<R> m, v;
    };
    Hyper hyper_;
    std::vector<Slot> slots_;
    long t_ = 0;
};

using AdamOpt = AdamOptT<float>;

}  // namespace tim
