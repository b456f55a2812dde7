// Experiment driver: corpus generation, base pretraining, detector training,
// immunization stream runs, evaluation, and cost benchmarking, all staged
// from a single plain-text config. Every stage writes its artifacts plus a
// manifest line into the output directory, and later stages refuse to run
// until the artifacts they depend on exist.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "tim/tim.hpp"

namespace fs = std::filesystem;
using namespace tim;

namespace {

struct CliOptions {
    std::string config_path;
    std::string out_dir = "run";
    long seed_override = -1;  // applies to the stream seed when >= 0
};

RunConfig load_config(const CliOptions& opt) {
    RunConfig cfg;
    if (!opt.config_path.empty()) cfg = RunConfig::from_file(opt.config_path);
    if (opt.seed_override >= 0) cfg.stream_seed = static_cast<unsigned>(opt.seed_override);
    return cfg;
}

std::string art(const CliOptions& opt, const std::string& name) {
    return (fs::path(opt.out_dir) / name).string();
}

void require_artifact(const std::string& path, const std::string& producing_stage) {
    if (!fs::exists(path))
        throw std::runtime_error("missing artifact " + path + ": run `tim " + producing_stage +
                                 "` first");
}

uint64_t file_hash(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("manifest: cannot read " + path);
    std::vector<char> buf(1 << 16);
    uint64_t h = 0xcbf29ce484222325ull;
    while (f) {
        f.read(buf.data(), static_cast<std::streamsize>(buf.size()));
        h = fnv1a_bytes(h, buf.data(), static_cast<size_t>(f.gcount()));
    }
    return h;
}

// One line per artifact: stage, file name, byte size, FNV-1a content hash.
void manifest_add(const CliOptions& opt, const std::string& stage,
                  const std::vector<std::string>& files) {
    std::ofstream m(art(opt, "manifest.txt"), std::ios::app);
    if (!m) throw std::runtime_error("manifest: cannot open for append");
    for (const auto& f : files) {
        const std::string p = art(opt, f);
        m << stage << ' ' << f << ' ' << fs::file_size(p) << ' ' << file_hash(p) << '\n';
    }
}

// The run directory is self-describing: every stage re-saves the effective
// config so a run can be reproduced from the directory alone.
void prepare_out(const CliOptions& opt, const RunConfig& cfg) {
    fs::create_directories(opt.out_dir);
    cfg.save(art(opt, "config.ini"));
}

std::string fmt_rate(const std::optional<double>& v) {
    if (!v) return "n/a";
    std::ostringstream os;
    os << std::fixed << std::setprecision(4) << *v;
    return os.str();
}

void print_summary_table(const MetricsSummary& s) {
    std::cout << "  metric        value\n"
              << "  ------------  ---------\n"
              << "  ASR           " << fmt_rate(s.asr) << "\n"
              << "  ASR-50        " << fmt_rate(s.asr50) << "\n"
              << "  ODR           " << fmt_rate(s.odr) << "\n"
              << "  det ACC       " << fmt_rate(s.detector.acc) << "\n"
              << "  det TPR       " << fmt_rate(s.detector.tpr) << "\n"
              << "  det FPR       " << fmt_rate(s.detector.fpr) << "\n"
              << "  mean gen (s)  " << std::setprecision(6) << s.mean_gen_s << "\n"
              << "  mean det (s)  " << s.mean_det_s << "\n"
              << "  mean train(s) " << s.mean_train_s << "\n";
}

void write_summary_csv(const std::string& path, const MetricsSummary& s) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path);
    f << "asr,asr50,odr,acc,tpr,fpr,tp,fp,tn,fn,n_jailbreak,n_normal,"
         "mean_gen_s,mean_det_s,mean_train_s\n";
    auto opt_num = [](const std::optional<double>& v) {
        return v ? std::to_string(*v) : std::string("nan");
    };
    f << opt_num(s.asr) << ',' << opt_num(s.asr50) << ',' << opt_num(s.odr) << ','
      << opt_num(s.detector.acc) << ',' << opt_num(s.detector.tpr) << ','
      << opt_num(s.detector.fpr) << ',' << s.detector.counts.tp << ',' << s.detector.counts.fp
      << ',' << s.detector.counts.tn << ',' << s.detector.counts.fn << ',' << s.n_jailbreak << ','
      << s.n_normal << ',' << s.mean_gen_s << ',' << s.mean_det_s << ',' << s.mean_train_s << '\n';
}

// ---- stages -----------------------------------------------------------------

void cmd_gen_corpus(const CliOptions& opt) {
    RunConfig cfg = load_config(opt);
    prepare_out(opt, cfg);
    Experiment exp(cfg);
    exp.gen_corpus();
    write_jsonl(art(opt, "pretrain.jsonl"), exp.pretrain_corpus);
    write_jsonl(art(opt, "detection.jsonl"), exp.d_d);
    write_jsonl(art(opt, "detection_holdout.jsonl"), exp.d_d_holdout);
    write_jsonl(art(opt, "qa.jsonl"), exp.d_qa);
    manifest_add(opt, "gen-corpus",
                 {"pretrain.jsonl", "detection.jsonl", "detection_holdout.jsonl", "qa.jsonl"});
    std::cout << "gen-corpus: " << exp.pretrain_corpus.size() << " pretrain pairs, "
              << exp.d_d.size() << " detector records (" << exp.d_d_holdout.size()
              << " held out), " << exp.d_qa.size() << " QA pairs -> " << opt.out_dir << "\n";
}

void cmd_pretrain(const CliOptions& opt) {
    RunConfig cfg = load_config(opt);
    prepare_out(opt, cfg);
    require_artifact(art(opt, "pretrain.jsonl"), "gen-corpus");
    Experiment exp(cfg);
    exp.pretrain_corpus = read_jsonl(art(opt, "pretrain.jsonl"));
    const PretrainResult res = exp.pretrain();
    save_checkpoint(art(opt, "base.ckpt"), model_named_tensors(exp.model));
    {
        std::ofstream f(art(opt, "pretrain.csv"));
        f << "steps,final_loss,converged\n"
          << res.steps << ',' << res.final_loss << ',' << (res.converged ? 1 : 0) << '\n';
    }
    manifest_add(opt, "pretrain", {"base.ckpt", "pretrain.csv"});
    std::cout << "pretrain: " << res.steps << " steps, loss " << res.final_loss
              << (res.converged ? "" : " (probes never all passed)") << " -> base.ckpt\n";
    if (!res.converged)
        throw std::runtime_error("pretrain: base never reached jailbreakable alignment");
}

void cmd_train_detector(const CliOptions& opt) {
    RunConfig cfg = load_config(opt);
    prepare_out(opt, cfg);
    require_artifact(art(opt, "base.ckpt"), "pretrain");
    require_artifact(art(opt, "detection.jsonl"), "gen-corpus");
    Experiment exp(cfg);
    load_checkpoint(art(opt, "base.ckpt"), model_named_tensors(exp.model));
    exp.frozen_base_hash = exp.model.base_hash();
    exp.d_d = read_jsonl(art(opt, "detection.jsonl"));
    exp.init_detector();
    const auto res = exp.train_det();
    save_checkpoint(art(opt, "detector.ckpt"), full_named_tensors(exp.model, exp.head));

    exp.d_d_holdout = read_jsonl(art(opt, "detection_holdout.jsonl"));
    const DetectorMetrics m = exp.eval_detector(exp.d_d_holdout);
    {
        std::ofstream f(art(opt, "detector_eval.csv"));
        f << "initial_loss,final_loss,holdout_acc,holdout_tpr,holdout_fpr\n"
          << res.initial_loss << ',' << res.final_loss << ',' << m.acc.value_or(NAN) << ','
          << m.tpr.value_or(NAN) << ',' << m.fpr.value_or(NAN) << '\n';
    }
    manifest_add(opt, "train-detector", {"detector.ckpt", "detector_eval.csv"});
    std::cout << "train-detector: loss " << res.initial_loss << " -> " << res.final_loss
              << "; holdout ACC " << fmt_rate(m.acc) << ", TPR " << fmt_rate(m.tpr) << ", FPR "
              << fmt_rate(m.fpr) << "\n";
}

void cmd_run_stream(const CliOptions& opt, bool vanilla) {
    RunConfig cfg = load_config(opt);
    prepare_out(opt, cfg);
    require_artifact(art(opt, "detector.ckpt"), "train-detector");
    Experiment exp(cfg);
    exp.init_detector();
    load_checkpoint(art(opt, "detector.ckpt"), full_named_tensors(exp.model, exp.head));
    exp.frozen_base_hash = exp.model.base_hash();
    exp.d_d = read_jsonl(art(opt, "detection.jsonl"));
    exp.d_qa = read_jsonl(art(opt, "qa.jsonl"));

    const auto events = exp.make_stream();
    const std::string rec_name = vanilla ? "vanilla_records.csv" : "records.csv";
    const std::string sum_name = vanilla ? "vanilla_summary.csv" : "summary.csv";
    std::ofstream csv(art(opt, rec_name));
    if (!csv) throw std::runtime_error("cannot write " + art(opt, rec_name));
    const StreamRunResult res =
        vanilla ? exp.run_vanilla(events, &csv) : exp.run_tim_stream(events, &csv);
    csv.close();
    write_summary_csv(art(opt, sum_name), res.summary);
    manifest_add(opt, vanilla ? "run-stream-vanilla" : "run-stream", {rec_name, sum_name});
    std::cout << (vanilla ? "run-stream (vanilla baseline)" : "run-stream") << ": "
              << events.size() << " events, schedule " << cfg.schedule << "\n";
    print_summary_table(res.summary);
}

// Recompute the cumulative metrics from the stored per-event CSV and check
// them against the final in-run row; any drift means the record file and the
// engine disagree.
void cmd_eval(const CliOptions& opt) {
    const std::string rec_path = art(opt, "records.csv");
    require_artifact(rec_path, "run-stream");
    std::ifstream f(rec_path);
    std::string line;
    if (!std::getline(f, line) || line.rfind("step,", 0) != 0)
        throw std::runtime_error("eval: " + rec_path + " has no header row");
    std::vector<PipelineRecordT<float>> records;
    std::vector<std::string> last_fields;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::istringstream is(line);
        std::string item;
        while (std::getline(is, item, ',')) fields.push_back(item);
        if (fields.size() != 16)
            throw std::runtime_error("eval: malformed row with " +
                                     std::to_string(fields.size()) + " fields");
        PipelineRecordT<float> r;
        r.step = std::stoi(fields[0]);
        r.family = fields[1];
        r.truth_is_attack = fields[2] == "1";
        r.outcome.label = fields[3] == "1" ? 1 : 0;
        r.rejected = fields[4] == "1";
        r.t_gen_s = std::stod(fields[12]);
        r.t_det_s = std::stod(fields[13]);
        r.t_train_s = std::stod(fields[14]);
        r.truth_positive = fields[15] == "1";
        records.push_back(std::move(r));
        last_fields = std::move(fields);
    }
    if (records.empty()) throw std::runtime_error("eval: no event rows in " + rec_path);

    const MetricsSummary s = TimEngineT<float>::summarize(records);
    // The stored cumulative columns round to ostream default precision, so the
    // recomputed values must agree within that rounding.
    auto matches = [](const std::string& stored, const std::optional<double>& fresh) {
        if (stored == "nan") return !fresh.has_value();
        if (!fresh) return false;
        return std::abs(std::stod(stored) - *fresh) <= 1e-5;
    };
    struct Check { const char* name; int col; std::optional<double> fresh; };
    const std::vector<Check> checks = {{"asr_cum", 5, s.asr},
                                       {"asr50", 6, s.asr50},
                                       {"odr_cum", 7, s.odr},
                                       {"tpr_cum", 8, s.detector.tpr},
                                       {"fpr_cum", 9, s.detector.fpr}};
    bool ok = true;
    for (const auto& c : checks) {
        const bool m = matches(last_fields[static_cast<size_t>(c.col)], c.fresh);
        if (!m) {
            ok = false;
            std::cout << "eval: MISMATCH " << c.name << ": stored " << last_fields[static_cast<size_t>(c.col)]
                      << " vs recomputed " << fmt_rate(c.fresh) << "\n";
        }
    }
    write_summary_csv(art(opt, "eval_summary.csv"), s);
    manifest_add(opt, "eval", {"eval_summary.csv"});
    std::cout << "eval: " << records.size() << " events recomputed from " << rec_path
              << (ok ? "; final row matches\n" : "\n");
    print_summary_table(s);
    if (!ok) throw std::runtime_error("eval: stored cumulative metrics disagree with recomputation");
}

void cmd_bench_cost(const CliOptions& opt, int seq_len, int trials) {
    RunConfig cfg = load_config(opt);
    prepare_out(opt, cfg);
    require_artifact(art(opt, "detector.ckpt"), "train-detector");
    Experiment exp(cfg);
    exp.init_detector();
    load_checkpoint(art(opt, "detector.ckpt"), full_named_tensors(exp.model, exp.head));
    const BenchCostReport rep = bench_detection_cost(exp.model, exp.head, exp.grammar, seq_len,
                                                     trials, cfg.max_new, cfg.stream_seed);
    {
        std::ofstream f(art(opt, "bench_cost.csv"));
        f << "seq_len,mean_gen_s,mean_det_s,det_fraction\n"
          << rep.seq_len << ',' << rep.mean_gen_s << ',' << rep.mean_det_s << ','
          << rep.det_fraction << '\n';
    }
    manifest_add(opt, "bench-cost", {"bench_cost.csv"});
    std::cout << "bench-cost: seq " << rep.seq_len << ", generation "
              << rep.mean_gen_s * 1e3 << " ms, detection " << rep.mean_det_s * 1e3 << " ms ("
              << rep.det_fraction * 100 << "% of generation)\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"tim: streaming jailbreak-defense experiments"};
    app.require_subcommand(1);
    app.fallthrough();  // accept the global options after the subcommand too
    CliOptions opt;
    app.add_option("--config", opt.config_path, "INI run configuration")
        ->check(CLI::ExistingFile);
    app.add_option("--out", opt.out_dir, "output directory (default: run)");
    app.add_option("--seed", opt.seed_override, "override the stream seed");

    auto* gen = app.add_subcommand("gen-corpus", "generate all datasets");
    auto* pre = app.add_subcommand("pretrain", "pretrain the base model on the corpus");
    auto* det = app.add_subcommand("train-detector", "train the gist detector head");
    auto* run = app.add_subcommand("run-stream", "run the configured stream with immunization");
    bool vanilla = false;
    run->add_flag("--vanilla", vanilla, "run the undefended baseline instead");
    auto* ev = app.add_subcommand("eval", "recompute metrics from stored records");
    auto* bench = app.add_subcommand("bench-cost", "measure detection overhead");
    int seq_len = 128, trials = 20;
    bench->add_option("--seq-len", seq_len, "total sequence length (default 128)");
    bench->add_option("--trials", trials, "number of timed trials (default 20)");

    CLI11_PARSE(app, argc, argv);
    const std::string stage = app.get_subcommands().front()->get_name();
    try {
        if (gen->parsed()) cmd_gen_corpus(opt);
        else if (pre->parsed()) cmd_pretrain(opt);
        else if (det->parsed()) cmd_train_detector(opt);
        else if (run->parsed()) cmd_run_stream(opt, vanilla);
        else if (ev->parsed()) cmd_eval(opt);
        else if (bench->parsed()) cmd_bench_cost(opt, seq_len, trials);
    } catch (const std::exception& e) {
        std::cerr << "error [" << stage << "]: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
