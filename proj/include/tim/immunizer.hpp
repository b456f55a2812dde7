#pragma once

// Test-time response to positive detections: append to the jailbreak and
// detection memories, fine-tune LoRA on refusals with QA regularization,
// and adapt the detector head with detection-dataset regularization.
// The two training paths touch disjoint parameter sets by construction.

#include <random>
#include <vector>

#include "detector.hpp"
#include "eval.hpp"
#include "training.hpp"

namespace tim {

struct ImmunizerConfig {
    float defense_lr = 0.02f;
    int refusal_batch = 8;   // drawn from M_j per defense step
    int reg_batch = 32;      // drawn from D_qa per defense step
    int defense_steps = 25;  // per positive detection
    float tta_lr = 1e-3f;
    int tta_batch = 5;       // drawn from M_d per TTA step, plus an equal D_d draw
    int tta_steps = 5;       // per positive detection
    unsigned seed = 23;
};

template <class R>
class ImmunizerT {
   public:
    ImmunizerT(TransformerT<R>& model, DetectorHeadT<R>& head, const std::vector<MemoryEntry>& d_qa,
               const std::vector<MemoryEntry>& d_d, TokenSeq refusal, ImmunizerConfig cfg,
               std::vector<TokenSeq> refusal_prefixes = {})
        : model_(model), head_(head), d_qa_(d_qa), d_d_(d_d), refusal_(std::move(refusal)),
          prefixes_(refusal_prefixes.empty() ? std::vector<TokenSeq>{{refusal_.front()}}
                                             : std::move(refusal_prefixes)),
          cfg_(cfg), rng_(cfg.seed) {
        typename AdamOptT<R>::Hyper dh;
        dh.lr = static_cast<R>(cfg_.defense_lr);
        defense_opt_ = AdamOptT<R>(dh);
        attach_lora(defense_opt_, model_);
        typename AdamOptT<R>::Hyper th;
        th.lr = static_cast<R>(cfg_.tta_lr);
        tta_opt_ = AdamOptT<R>(th);
        tta_opt_.attach(&head_.t_g);
        tta_opt_.attach(&head_.w);
        tta_opt_.attach(&head_.b);
    }

    const std::vector<MemoryEntry>& jailbreak_memory() const { return mj_; }
    const std::vector<MemoryEntry>& detection_memory() const { return md_; }
    const TokenSeq& refusal() const { return refusal_; }
    bool qa_empty_warned() const { return qa_empty_warned_; }

    // Alg.-1 reaction to a positive detection: grow both memories, then run
    // the configured defense and TTA step counts.
    void on_detection(const TokenSeq& t_ins, const TokenSeq& t_ans) {
        mj_.push_back({t_ins, refusal_, 0, 0});
        md_.push_back({t_ins, refusal_, 0, 0});
        // A flagged answer that itself matches a refusal prefix is a detector
        // false alarm; storing it as a jailbreak answer would poison M_d, so
        // it enters as a corrective negative instead.
        md_.push_back({t_ins, t_ans, prefixes_.is_reject(t_ans) ? 0 : 1, 0});
        for (int i = 0; i < cfg_.defense_steps; ++i) defense_step();
        for (int i = 0; i < cfg_.tta_steps; ++i) tta_step();
    }

    // One Adam step on LoRA: refusal draw from M_j plus QA regularization.
    // Returns the minibatch loss before the step.
    R defense_step() {
        if (mj_.empty()) throw std::logic_error("defense_step: jailbreak memory is empty");
        std::vector<const MemoryEntry*> batch;
        std::uniform_int_distribution<size_t> pick_mj(0, mj_.size() - 1);
        for (int i = 0; i < cfg_.refusal_batch; ++i) batch.push_back(&mj_[pick_mj(rng_)]);
        if (d_qa_.empty()) {
            qa_empty_warned_ = true;  // refusal-only training, per contract
        } else {
            std::uniform_int_distribution<size_t> pick_qa(0, d_qa_.size() - 1);
            for (int i = 0; i < cfg_.reg_batch; ++i) batch.push_back(&d_qa_[pick_qa(rng_)]);
        }
        TapeT<R> tape;
        ModelVarsT<R> mv = model_.bind(&tape, false, true);
        VarT<R> loss = batch_lm_loss(model_, mv, batch);
        const R out = loss.val().data[0];
        backward(loss);
        defense_opt_.step(lora_leaf_grads(mv, tape));
        return out;
    }

    // One Adam step on the detector head: M_d draw plus an equal-size D_d
    // regularization draw, mixed into a single minibatch.
    R tta_step() {
        if (md_.size() < 2) throw std::logic_error("tta_step: detection memory too small");
        std::vector<const MemoryEntry*> batch;
        std::uniform_int_distribution<size_t> pick_md(0, md_.size() - 1);
        for (int i = 0; i < cfg_.tta_batch; ++i) batch.push_back(&md_[pick_md(rng_)]);
        if (!d_d_.empty()) {
            std::uniform_int_distribution<size_t> pick_dd(0, d_d_.size() - 1);
            for (int i = 0; i < cfg_.tta_batch; ++i) batch.push_back(&d_d_[pick_dd(rng_)]);
        }
        TapeT<R> tape;
        DetectorVarsT<R> dv = bind_head(&tape, head_, true);
        VarT<R> total;
        for (const auto* e : batch) {
            KVCacheT<R> ctx = detection_context(model_, e->instruction, e->answer);
            VarT<R> l = detector_entry_loss(model_, dv, ctx, e->label);
            total = total.p ? add(total, l) : l;
        }
        VarT<R> loss = scale(total, R(1) / static_cast<R>(batch.size()));
        const R out = loss.val().data[0];
        backward(loss);
        tta_opt_.step({&tape.grad(dv.t_g.id), &tape.grad(dv.w.id), &tape.grad(dv.b.id)});
        return out;
    }

   private:
    TransformerT<R>& model_;
    DetectorHeadT<R>& head_;
    const std::vector<MemoryEntry>& d_qa_;
    const std::vector<MemoryEntry>& d_d_;
    std::vector<MemoryEntry> mj_, md_;
    TokenSeq refusal_;
    RefusalPrefixSet prefixes_;
    ImmunizerConfig cfg_;
    AdamOptT<R> defense_opt_, tta_opt_;
    std::mt19937 rng_;
    bool qa_empty_warned_ = false;
};

using Immunizer = ImmunizerT<float>;

}  // namespace tim
