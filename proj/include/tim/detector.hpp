#pragma once

// Gist-token jailbreak detector: append the gist token, classify its layer-d
// hidden state with an affine head, train head + gist embedding with
// cross-entropy. Detection never touches LoRA or base weights.

#include <array>
#include <chrono>
#include <random>
#include <vector>

#include "model.hpp"
#include "numerics.hpp"
#include "types.hpp"

namespace tim {

template <class R>
struct DetectorHeadT {
    TensorT<R> w;    // [2, m]
    TensorT<R> b;    // [1, 2]
    TensorT<R> t_g;  // [1, m], the reserved gist embedding row

    // Gist row starts at the mean base embedding plus small seeded noise so
    // the first forward stays in-distribution.
    void init(const TransformerT<R>& model, std::mt19937& rng) {
        const int m = model.cfg.d_model;
        w = TensorT<R>::zeros({2, m});
        b = TensorT<R>::zeros({1, 2});
        t_g = TensorT<R>::zeros({1, m});
        const auto& emb = model.base.tok_emb;
        for (int v = 0; v < emb.rows(); ++v)
            for (int j = 0; j < m; ++j) t_g.data[static_cast<size_t>(j)] += emb.at(v, j);
        for (R& x : t_g.data) x /= static_cast<R>(emb.rows());
        std::normal_distribution<double> noise(0.0, 0.02);
        for (R& x : t_g.data) x += static_cast<R>(noise(rng));
    }

    void collect(std::vector<std::pair<std::string, TensorT<R>*>>& out) {
        out.emplace_back("detector.w", &w);
        out.emplace_back("detector.b", &b);
        out.emplace_back("detector.t_g", &t_g);
    }
};

template <class R>
struct DetectionOutcomeT {
    std::array<R, 2> p{};     // probability over {not jailbroken, jailbroken}
    int label = 0;            // argmax, ties to 0
    double cost_s = 0.0;      // wall clock of the detection step alone
    bool slow_path = false;   // cache had to be rebuilt
    bool truncated = false;   // answer tail dropped to fit capacity
};

template <class R>
struct DetectorVarsT {
    VarT<R> w, b, t_g;
};

template <class R>
DetectorVarsT<R> bind_head(TapeT<R>* tape, const DetectorHeadT<R>& head, bool train) {
    DetectorVarsT<R> dv;
    dv.w = (train && tape) ? leaf(*tape, head.w) : constant(head.w);
    dv.b = (train && tape) ? leaf(*tape, head.b) : constant(head.b);
    dv.t_g = (train && tape) ? leaf(*tape, head.t_g) : constant(head.t_g);
    return dv;
}

// Context cache through layers <= detect_layer for one (instruction, answer).
template <class R>
KVCacheT<R> detection_context(const TransformerT<R>& model, const TokenSeq& instruction,
                              const TokenSeq& answer, bool* truncated = nullptr) {
    KVCacheT<R> cache = model.make_cache();
    TokenSeq seq = instruction;
    seq.insert(seq.end(), answer.begin(), answer.end());
    // Leave one slot for the gist position; drop the answer tail if needed.
    const int cap = model.cfg.max_seq_len - 1;
    if (static_cast<int>(seq.size()) > cap) {
        if (static_cast<int>(instruction.size()) > cap)
            throw CapacityError("detection_context: instruction alone exceeds capacity");
        seq.resize(static_cast<size_t>(cap));
        if (truncated) *truncated = true;
    }
    for (int id : seq) model.decode_step(cache, id, true, model.cfg.detect_layer);
    return cache;
}

// Cross-entropy of one labeled (q, a) pair against a prebuilt context cache.
template <class R>
VarT<R> detector_entry_loss(const TransformerT<R>& model, const DetectorVarsT<R>& dv,
                            const KVCacheT<R>& context, int label) {
    VarT<R> h = model.gist_hidden_var(context, dv.t_g);
    VarT<R> logits = add_bias(matmul_nt(h, dv.w), dv.b);
    return cross_entropy_logits(logits, {label}, {1});
}

// Fast path: one uncommitted decode step against the caller's cache.
// Slow path (no cache): rebuild the layer-d context first.
template <class R>
DetectionOutcomeT<R> detect(const TransformerT<R>& model, const DetectorHeadT<R>& head,
                            const TokenSeq& instruction, const TokenSeq& answer,
                            KVCacheT<R>* cache) {
    DetectionOutcomeT<R> out;
    const auto t0 = std::chrono::steady_clock::now();
    KVCacheT<R> rebuilt;
    if (cache == nullptr) {
        out.slow_path = true;
        rebuilt = detection_context(model, instruction, answer, &out.truncated);
        cache = &rebuilt;
    }
    std::vector<R> h = model.tap_detection_hidden(*cache, head.t_g);
    std::vector<R> logits(2, R(0));
    kern::matmul_nt_acc(logits.data(), h.data(), head.w.data.data(), 1, model.cfg.d_model, 2);
    logits[0] += head.b.data[0];
    logits[1] += head.b.data[1];
    std::vector<R> p = softmax(logits);
    out.p = {p[0], p[1]};
    out.label = p[1] > p[0] ? 1 : 0;  // exact tie stays "not jailbroken"
    out.cost_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return out;
}

template <class R>
struct TrainDetectorResult {
    R initial_loss = R(0);
    R final_loss = R(0);
    bool single_class_warning = false;
};

// Offline detector training on D_d (Appendix-style recipe: Adam, mean CE).
// Context caches are built once; only t_g, W_d, b_d receive gradients.
template <class R>
TrainDetectorResult<R> train_detector(const TransformerT<R>& model, DetectorHeadT<R>& head,
                                      const std::vector<MemoryEntry>& data, int epochs,
                                      int batch_size, R lr, unsigned seed) {
    if (data.empty()) throw std::invalid_argument("train_detector: empty data");
    if (batch_size < 1) throw std::invalid_argument("train_detector: batch_size < 1");
    TrainDetectorResult<R> res;
    bool saw0 = false, saw1 = false;
    for (const auto& e : data) {
        if (e.label == 0) saw0 = true;
        else if (e.label == 1) saw1 = true;
        else throw std::invalid_argument("train_detector: label must be 0 or 1");
    }
    res.single_class_warning = !(saw0 && saw1);

    std::vector<KVCacheT<R>> contexts;
    contexts.reserve(data.size());
    for (const auto& e : data) contexts.push_back(detection_context(model, e.instruction, e.answer));

    typename AdamOptT<R>::Hyper hp;
    hp.lr = lr;
    AdamOptT<R> opt(hp);
    opt.attach(&head.t_g);
    opt.attach(&head.w);
    opt.attach(&head.b);

    std::mt19937 rng(seed);
    std::vector<size_t> order(data.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 0; epoch < epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        for (size_t off = 0; off < order.size(); off += static_cast<size_t>(batch_size)) {
            const size_t end = std::min(order.size(), off + static_cast<size_t>(batch_size));
            TapeT<R> tape;
            DetectorVarsT<R> dv = bind_head(&tape, head, true);
            VarT<R> total;
            for (size_t i = off; i < end; ++i) {
                VarT<R> l = detector_entry_loss(model, dv, contexts[order[i]], data[order[i]].label);
                total = total.p ? add(total, l) : l;
            }
            VarT<R> loss = scale(total, R(1) / static_cast<R>(end - off));
            if (epoch == 0 && off == 0) res.initial_loss = loss.val().data[0];
            res.final_loss = loss.val().data[0];
            backward(loss);
            opt.step({&tape.grad(dv.t_g.id), &tape.grad(dv.w.id), &tape.grad(dv.b.id)});
        }
    }
    return res;
}

using DetectorHead = DetectorHeadT<float>;
using DetectionOutcome = DetectionOutcomeT<float>;

}  // namespace tim
