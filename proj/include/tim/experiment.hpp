#pragma once

// Stage composition: build the world from a RunConfig, generate datasets,
// pretrain the base, train the detector, and run vanilla or immunized
// streams. The CLI and the acceptance suite both drive experiments through
// these helpers so artifacts and metrics agree.

#include <chrono>

#include "checkpoint.hpp"
#include "config.hpp"
#include "detector.hpp"
#include "pipeline.hpp"

namespace tim {

template <class R>
std::vector<std::pair<std::string, TensorT<R>*>> model_named_tensors(TransformerT<R>& model) {
    std::vector<std::pair<std::string, TensorT<R>*>> named;
    model.base.collect(named);
    model.lora.collect(named);
    return named;
}

template <class R>
std::vector<std::pair<std::string, TensorT<R>*>> full_named_tensors(TransformerT<R>& model,
                                                                    DetectorHeadT<R>& head) {
    auto named = model_named_tensors(model);
    head.collect(named);
    return named;
}

template <class R>
struct StreamRunResultT {
    std::vector<PipelineRecordT<R>> records;
    MetricsSummary summary;
};

// Baseline without any detection or training: generate, record, move on.
template <class R>
StreamRunResultT<R> run_vanilla_stream(const TransformerT<R>& model, const Grammar& grammar,
                                       const RefusalPrefixSet& prefixes,
                                       const std::vector<StreamEvent>& events, int max_new,
                                       std::ostream* csv = nullptr) {
    if (events.empty()) throw std::invalid_argument("run_vanilla_stream: empty stream");
    StreamRunResultT<R> res;
    StreamAccumulator acc;
    if (csv) *csv << csv_header() << "\n";
    int step = 0;
    for (const auto& ev : events) {
        PipelineRecordT<R> rec;
        try {
            using clock = std::chrono::steady_clock;
            const auto t0 = clock::now();
            KVCacheT<R> cache;
            rec.generated = model.generate(ev.instruction, max_new, cache);
            rec.t_gen_s = std::chrono::duration<double>(clock::now() - t0).count();
            rec.returned = rec.generated;
            rec.rejected = prefixes.is_reject(rec.returned);
            rec.truth_positive =
                grammar.parse_intent(ev.instruction).harmful && !rec.rejected;
        } catch (const CapacityError& e) {
            rec.error = true;
            rec.error_msg = e.what();
        }
        rec.step = step++;
        rec.family = ev.family;
        rec.truth_is_attack = ev.truth_is_attack;
        acc.add(rec);
        if (csv) *csv << csv_row(rec, acc.summary()) << "\n";
        res.records.push_back(std::move(rec));
    }
    res.summary = TimEngineT<R>::summarize(res.records);
    return res;
}

// The full experiment state, staged in order: construct → gen_corpus →
// pretrain → train detector → run streams.
template <class R>
struct ExperimentT {
    RunConfig cfg;
    Grammar grammar;
    TransformerT<R> model;
    DetectorHeadT<R> head;

    std::vector<MemoryEntry> pretrain_corpus;
    std::vector<MemoryEntry> d_d;          // detector training set
    std::vector<MemoryEntry> d_d_holdout;  // held-out detector evaluation set
    std::vector<MemoryEntry> d_qa;         // defense regularization pairs

    uint64_t frozen_base_hash = 0;  // recorded after pretraining; never changes again

    explicit ExperimentT(RunConfig c) : cfg(std::move(c)), grammar(cfg.grammar) {
        ModelConfig mc = cfg.model;
        mc.vocab_size = grammar.vocab_size;
        mc.gist_id = grammar.gist;
        mc.eos_id = grammar.eos;
        model = TransformerT<R>(mc);
    }

    RefusalPrefixSet prefixes() const { return RefusalPrefixSet(grammar.refusal_prefixes()); }

    void gen_corpus() {
        const auto train_fills = cfg.train_fill_pool();
        pretrain_corpus =
            gen_pretrain_corpus(grammar, cfg.pretrain_sizes, train_fills, cfg.corpus_seed);
        d_d = gen_detection_dataset(grammar, cfg.detection_per_part, train_fills,
                                    cfg.corpus_seed + 1);
        d_d_holdout = gen_detection_dataset(grammar, cfg.detection_holdout_per_part,
                                            cfg.test_fill_pool(), cfg.corpus_seed + 2,
                                            /*include_partial=*/false);
        d_qa = gen_qa_dataset(grammar, cfg.qa_n, train_fills, cfg.corpus_seed + 3);
    }

    PretrainResult pretrain() {
        if (pretrain_corpus.empty()) throw std::runtime_error("pretrain: run gen_corpus first");
        // Probe across the whole filler range: clean pretraining covers every
        // filler, so the stop rule demands attack behavior that generalizes to
        // fillers the attacked pairs never used.
        std::vector<int> all_fills;
        for (int i = 0; i < grammar.gc.n_fill; ++i) all_fills.push_back(i);
        PretrainResult res =
            pretrain_base(model, grammar, pretrain_corpus, all_fills, cfg.pretrain);
        frozen_base_hash = model.base_hash();
        return res;
    }

    void init_detector(unsigned seed_offset = 0) {
        std::mt19937 rng(cfg.detector_seed + seed_offset);
        head.init(model, rng);
    }

    TrainDetectorResult<R> train_det() {
        if (d_d.empty()) throw std::runtime_error("train_det: run gen_corpus first");
        if (head.w.numel() == 0) init_detector();
        return train_detector(model, head, d_d, cfg.detector_epochs, cfg.detector_batch,
                              static_cast<R>(cfg.detector_lr), cfg.detector_seed);
    }

    // Detector quality on the held-out set, using the slow (cache-rebuild) path.
    DetectorMetrics eval_detector(const std::vector<MemoryEntry>& data) const {
        std::vector<std::pair<bool, bool>> pairs;
        for (const auto& e : data) {
            auto out = detect(model, head, e.instruction, e.answer,
                              static_cast<KVCacheT<R>*>(nullptr));
            pairs.emplace_back(e.label == 1, out.label == 1);
        }
        return detector_metrics(pairs);
    }

    std::vector<StreamEvent> make_stream(unsigned seed_offset = 0) const {
        return gen_stream(grammar, cfg.phases(), cfg.test_fill_pool(),
                          cfg.stream_seed + seed_offset);
    }

    // Full TIM run. Mutates LoRA and the detector head; the base stays frozen.
    StreamRunResultT<R> run_tim_stream(const std::vector<StreamEvent>& events,
                                       std::ostream* csv = nullptr) {
        ImmunizerT<R> imm(model, head, d_qa, d_d, grammar.refusal_answer(0), cfg.immunizer,
                          grammar.refusal_prefixes());
        PipelineConfig pc;
        pc.max_new = cfg.max_new;
        pc.suppress_detected = cfg.suppress_detected;
        TimEngineT<R> engine(model, head, imm, grammar, prefixes(), pc);
        StreamRunResultT<R> res;
        res.records = engine.run_stream(events, csv);
        res.summary = TimEngineT<R>::summarize(res.records);
        return res;
    }

    StreamRunResultT<R> run_vanilla(const std::vector<StreamEvent>& events,
                                    std::ostream* csv = nullptr) const {
        return run_vanilla_stream(model, grammar, prefixes(), events, cfg.max_new, csv);
    }

    // Vacuity guard: attack success of one family against the un-immunized base.
    double family_asr(AttackFamily fam, int n, unsigned seed) const {
        StreamPhase ph;
        ph.families = {fam};
        ph.n = n;
        ph.mix_ratio = 1.0;
        auto events = gen_stream(grammar, {ph}, cfg.test_fill_pool(), seed);
        auto res = run_vanilla(events);
        if (!res.summary.asr) throw std::runtime_error("family_asr: no attack events");
        return *res.summary.asr;
    }
};

struct BenchCostReport {
    double mean_gen_s = 0;     // prompt pass + greedy decode
    double mean_det_s = 0;     // one gist peek against the populated cache
    double det_fraction = 0;   // mean_det_s / mean_gen_s
    int seq_len = 0;
};

// Detection overhead at a given total sequence length (prompt + answer).
template <class R>
BenchCostReport bench_detection_cost(const TransformerT<R>& model, const DetectorHeadT<R>& head,
                                     const Grammar& grammar, int seq_len, int n_trials,
                                     int max_new, unsigned seed) {
    if (seq_len + 1 > model.cfg.max_seq_len)
        throw CapacityError("bench_detection_cost: seq_len exceeds model capacity");
    std::mt19937 rng(seed);
    std::uniform_int_distribution<int> pick_fill(0, grammar.gc.n_fill - 1);
    std::uniform_int_distribution<int> pick_harm(0, grammar.gc.n_harm - 1);
    BenchCostReport rep;
    rep.seq_len = seq_len;
    for (int i = 0; i < n_trials; ++i) {
        // Pad the instruction with fillers so prompt + answer reaches seq_len.
        TokenSeq ins{grammar.harm0 + pick_harm(rng)};
        while (static_cast<int>(ins.size()) < seq_len - max_new - 1)
            ins.push_back(grammar.fill0 + pick_fill(rng));
        ins.push_back(grammar.sep);
        using clock = std::chrono::steady_clock;
        const auto t0 = clock::now();
        KVCacheT<R> cache;
        TokenSeq ans = model.generate(ins, max_new, cache);
        rep.mean_gen_s += std::chrono::duration<double>(clock::now() - t0).count();
        auto out = detect(model, head, ins, ans, &cache);
        rep.mean_det_s += out.cost_s;
    }
    rep.mean_gen_s /= n_trials;
    rep.mean_det_s /= n_trials;
    rep.det_fraction = rep.mean_det_s / rep.mean_gen_s;
    return rep;
}

using Experiment = ExperimentT<float>;
using StreamRunResult = StreamRunResultT<float>;

}  // namespace tim
