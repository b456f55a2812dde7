#pragma once

// The per-instruction TIM loop: generate, detect, conditionally immunize,
// emit the answer plus a metrics record. Strictly sequential per stream.

#include <chrono>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "corpus.hpp"
#include "detector.hpp"
#include "eval.hpp"
#include "immunizer.hpp"

namespace tim {

template <class R>
struct PipelineRecordT {
    int step = -1;
    std::string family = "clean";
    bool truth_is_attack = false;
    TokenSeq generated;   // the model's own answer, pre-suppression
    TokenSeq returned;    // what the caller receives
    DetectionOutcomeT<R> outcome;
    bool rejected = false;       // is_reject(returned)
    bool truth_positive = false; // harmful intent and non-refused generation
    size_t mj_size = 0, md_size = 0;
    double t_gen_s = 0, t_det_s = 0, t_train_s = 0;
    bool error = false;
    std::string error_msg;
};

struct PipelineConfig {
    int max_new = 16;
    bool suppress_detected = false;  // substitute t_ref for flagged answers
};

// Cumulative metric state over a stream, in event order.
struct StreamAccumulator {
    std::vector<bool> attack_rejected;  // truth-attack events, stream order
    std::vector<bool> normal_rejected;
    std::vector<std::pair<bool, bool>> det_pairs;  // (truth_positive, detected)

    template <class R>
    void add(const PipelineRecordT<R>& r) {
        if (r.error) return;
        if (r.truth_is_attack) attack_rejected.push_back(r.rejected);
        else normal_rejected.push_back(r.rejected);
        det_pairs.emplace_back(r.truth_positive, r.outcome.label == 1);
    }

    MetricsSummary summary() const {
        MetricsSummary s;
        s.n_jailbreak = static_cast<long>(attack_rejected.size());
        s.n_normal = static_cast<long>(normal_rejected.size());
        if (!attack_rejected.empty()) s.asr = compute_asr(attack_rejected);
        if (attack_rejected.size() >= 2) s.asr50 = compute_asr50(attack_rejected);
        if (!normal_rejected.empty()) s.odr = compute_odr(normal_rejected);
        s.detector = detector_metrics(det_pairs);
        return s;
    }
};

inline std::string csv_header() {
    return "step,family,truth_is_attack,detected,rejected,asr_cum,asr50,odr_cum,tpr_cum,"
           "fpr_cum,mj_size,md_size,t_gen_s,t_det_s,t_train_s,truth_positive";
}

inline std::string fmt_opt(const std::optional<double>& v) {
    if (!v) return "nan";
    std::ostringstream os;
    os << std::setprecision(9) << *v;
    return os.str();
}

template <class R>
std::string csv_row(const PipelineRecordT<R>& r, const MetricsSummary& cum) {
    std::ostringstream os;
    os << r.step << ',' << r.family << ',' << (r.truth_is_attack ? 1 : 0) << ','
       << (r.outcome.label == 1 ? 1 : 0) << ',' << (r.rejected ? 1 : 0) << ','
       << fmt_opt(cum.asr) << ',' << fmt_opt(cum.asr50) << ',' << fmt_opt(cum.odr) << ','
       << fmt_opt(cum.detector.tpr) << ',' << fmt_opt(cum.detector.fpr) << ',' << r.mj_size << ','
       << r.md_size << ',' << std::setprecision(9) << r.t_gen_s << ',' << r.t_det_s << ','
       << r.t_train_s << ',' << (r.truth_positive ? 1 : 0);
    return os.str();
}

template <class R>
class TimEngineT {
   public:
    TimEngineT(TransformerT<R>& model, DetectorHeadT<R>& head, ImmunizerT<R>& immunizer,
               const Grammar& grammar, RefusalPrefixSet prefixes, PipelineConfig cfg)
        : model_(model), head_(head), immunizer_(immunizer), grammar_(grammar),
          prefixes_(std::move(prefixes)), cfg_(cfg) {}

    const RefusalPrefixSet& prefixes() const { return prefixes_; }

    // Alg.-1 event handling: exactly one generation and one detection;
    // training iff the detector fires. The triggering answer is returned
    // unchanged unless suppress_detected is set.
    PipelineRecordT<R> handle_instruction(const TokenSeq& t_ins) {
        PipelineRecordT<R> rec;
        using clock = std::chrono::steady_clock;
        const auto t0 = clock::now();
        KVCacheT<R> cache;
        rec.generated = model_.generate(t_ins, cfg_.max_new, cache);
        rec.t_gen_s = std::chrono::duration<double>(clock::now() - t0).count();

        rec.outcome = detect(model_, head_, t_ins, rec.generated, &cache);
        rec.t_det_s = rec.outcome.cost_s;

        if (rec.outcome.label == 1) {
            const auto t1 = clock::now();
            immunizer_.on_detection(t_ins, rec.generated);
            rec.t_train_s = std::chrono::duration<double>(clock::now() - t1).count();
        }
        rec.mj_size = immunizer_.jailbreak_memory().size();
        rec.md_size = immunizer_.detection_memory().size();

        rec.returned = (cfg_.suppress_detected && rec.outcome.label == 1) ? immunizer_.refusal()
                                                                         : rec.generated;
        rec.rejected = prefixes_.is_reject(rec.returned);
        const auto intent = grammar_.parse_intent(t_ins);
        rec.truth_positive = intent.harmful && !prefixes_.is_reject(rec.generated);
        return rec;
    }

    // Sequential, order-preserving. Per-event capacity errors are recorded
    // and the stream continues; the failed event never reaches training.
    std::vector<PipelineRecordT<R>> run_stream(const std::vector<StreamEvent>& events,
                                           std::ostream* csv = nullptr) {
        if (events.empty()) throw std::invalid_argument("run_stream: empty stream");
        std::vector<PipelineRecordT<R>> records;
        StreamAccumulator acc;
        if (csv) *csv << csv_header() << "\n";
        int step = 0;
        for (const auto& ev : events) {
            PipelineRecordT<R> rec;
            try {
                rec = handle_instruction(ev.instruction);
            } catch (const CapacityError& e) {
                rec.error = true;
                rec.error_msg = e.what();
            }
            rec.step = step++;
            rec.family = ev.family;
            rec.truth_is_attack = ev.truth_is_attack;
            acc.add(rec);
            if (csv) *csv << csv_row(rec, acc.summary()) << "\n";
            records.push_back(std::move(rec));
        }
        return records;
    }

    static MetricsSummary summarize(const std::vector<PipelineRecordT<R>>& records) {
        StreamAccumulator acc;
        double gen = 0, det = 0, train = 0;
        long n = 0;
        for (const auto& r : records) {
            acc.add(r);
            if (!r.error) {
                gen += r.t_gen_s;
                det += r.t_det_s;
                train += r.t_train_s;
                ++n;
            }
        }
        MetricsSummary s = acc.summary();
        if (n > 0) {
            s.mean_gen_s = gen / n;
            s.mean_det_s = det / n;
            s.mean_train_s = train / n;
        }
        return s;
    }

   private:
    TransformerT<R>& model_;
    DetectorHeadT<R>& head_;
    ImmunizerT<R>& immunizer_;
    const Grammar& grammar_;
    RefusalPrefixSet prefixes_;
    PipelineConfig cfg_;
};

using PipelineRecord = PipelineRecordT<float>;
using TimEngine = TimEngineT<float>;

}  // namespace tim
