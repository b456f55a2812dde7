#pragma once

// Plain-text run configuration: `key = value` pairs under [sections], written
// back into each run directory so an experiment is reproducible from its
// stored config and seeds alone.

#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "corpus.hpp"
#include "immunizer.hpp"
#include "model.hpp"
#include "pipeline.hpp"
#include "training.hpp"

namespace tim {

namespace detail {

inline std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream is(s);
    while (std::getline(is, item, sep)) out.push_back(trim(item));
    return out;
}

}  // namespace detail

// Minimal INI document: ordered sections of key/value strings.
struct IniFile {
    std::map<std::string, std::map<std::string, std::string>> sections;

    static IniFile parse_text(std::istream& in) {
        IniFile f;
        std::string line, section = "global";
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            std::string t = detail::trim(line);
            if (t.empty() || t[0] == '#' || t[0] == ';') continue;
            if (t.front() == '[') {
                if (t.back() != ']')
                    throw std::runtime_error("config: unterminated section at line " +
                                             std::to_string(lineno));
                section = detail::trim(t.substr(1, t.size() - 2));
                continue;
            }
            const size_t eq = t.find('=');
            if (eq == std::string::npos)
                throw std::runtime_error("config: missing '=' at line " + std::to_string(lineno));
            f.sections[section][detail::trim(t.substr(0, eq))] = detail::trim(t.substr(eq + 1));
        }
        return f;
    }

    static IniFile parse_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw std::runtime_error("config: cannot open " + path);
        return parse_text(in);
    }

    bool has(const std::string& sec, const std::string& key) const {
        auto s = sections.find(sec);
        return s != sections.end() && s->second.count(key) > 0;
    }

    std::string get_str(const std::string& sec, const std::string& key,
                        const std::string& dflt) const {
        auto s = sections.find(sec);
        if (s == sections.end()) return dflt;
        auto k = s->second.find(key);
        return k == s->second.end() ? dflt : k->second;
    }

    int get_int(const std::string& sec, const std::string& key, int dflt) const {
        return has(sec, key) ? std::stoi(get_str(sec, key, "")) : dflt;
    }
    unsigned get_uint(const std::string& sec, const std::string& key, unsigned dflt) const {
        return has(sec, key) ? static_cast<unsigned>(std::stoul(get_str(sec, key, ""))) : dflt;
    }
    double get_double(const std::string& sec, const std::string& key, double dflt) const {
        return has(sec, key) ? std::stod(get_str(sec, key, "")) : dflt;
    }
    bool get_bool(const std::string& sec, const std::string& key, bool dflt) const {
        if (!has(sec, key)) return dflt;
        const std::string v = get_str(sec, key, "");
        if (v == "true" || v == "1" || v == "yes") return true;
        if (v == "false" || v == "0" || v == "no") return false;
        throw std::runtime_error("config: bad boolean for " + sec + "." + key + ": " + v);
    }
};

// One stream phase, e.g. "suffix:150" or "suffix+wrapper:400:0.5". The third
// component overrides the stream-level mix ratio for that phase.
inline std::vector<StreamPhase> parse_schedule(const std::string& text, double default_mix) {
    std::vector<StreamPhase> out;
    for (const std::string& part : detail::split(text, ',')) {
        if (part.empty()) continue;
        const auto fields = detail::split(part, ':');
        if (fields.size() < 2 || fields.size() > 3)
            throw std::invalid_argument("schedule: expected family[+family]:count[:mix], got '" +
                                        part + "'");
        StreamPhase ph;
        for (const std::string& fam : detail::split(fields[0], '+'))
            ph.families.push_back(family_from_name(fam));
        ph.n = std::stoi(fields[1]);
        if (ph.n <= 0) throw std::invalid_argument("schedule: non-positive phase length in '" + part + "'");
        ph.mix_ratio = fields.size() == 3 ? std::stod(fields[2]) : default_mix;
        out.push_back(std::move(ph));
    }
    if (out.empty()) throw std::invalid_argument("schedule: empty");
    return out;
}

// Everything a full experiment needs, with Appendix-level defaults.
struct RunConfig {
    ModelConfig model;
    GrammarConfig grammar;

    // Corpus sizes and the filler split between training and test streams.
    PretrainSizes pretrain_sizes;
    int detection_per_part = 250;   // training D_d: 5 * this entries
    int detection_holdout_per_part = 125;
    int qa_n = 200;
    int attack_fill_count = 16;     // fillers 0..count-1 train; the rest test
    unsigned corpus_seed = 5;

    PretrainConfig pretrain;

    float detector_lr = 1e-3f;
    int detector_epochs = 30;
    int detector_batch = 32;
    unsigned detector_seed = 2;

    ImmunizerConfig immunizer;

    std::string schedule = "suffix:400";
    double mix_ratio = 0.5;
    unsigned stream_seed = 41;
    int max_new = 16;
    bool suppress_detected = false;

    static RunConfig from_ini(const IniFile& f) {
        RunConfig c;
        c.model.d_model = f.get_int("model", "d_model", c.model.d_model);
        c.model.n_layers = f.get_int("model", "n_layers", c.model.n_layers);
        c.model.n_heads = f.get_int("model", "n_heads", c.model.n_heads);
        c.model.d_ff = f.get_int("model", "d_ff", c.model.d_ff);
        c.model.max_seq_len = f.get_int("model", "max_seq_len", c.model.max_seq_len);
        c.model.detect_layer = f.get_int("model", "detect_layer", c.model.detect_layer);
        c.model.lora_rank = f.get_int("model", "lora_rank", c.model.lora_rank);
        c.model.seed = f.get_uint("model", "seed", c.model.seed);

        c.grammar.n_harm = f.get_int("grammar", "n_harm", c.grammar.n_harm);
        c.grammar.n_clean = f.get_int("grammar", "n_clean", c.grammar.n_clean);
        c.grammar.n_fill = f.get_int("grammar", "n_fill", c.grammar.n_fill);
        c.grammar.n_suffix = f.get_int("grammar", "n_suffix", c.grammar.n_suffix);
        c.grammar.n_refuse = f.get_int("grammar", "n_refuse", c.grammar.n_refuse);
        c.grammar.n_hans = f.get_int("grammar", "n_hans", c.grammar.n_hans);
        c.grammar.n_cans = f.get_int("grammar", "n_cans", c.grammar.n_cans);
        c.grammar.fills_min = f.get_int("grammar", "fills_min", c.grammar.fills_min);
        c.grammar.fills_max = f.get_int("grammar", "fills_max", c.grammar.fills_max);

        c.pretrain_sizes.clean = f.get_int("corpus", "clean", c.pretrain_sizes.clean);
        c.pretrain_sizes.plain_harm = f.get_int("corpus", "plain_harm", c.pretrain_sizes.plain_harm);
        c.pretrain_sizes.attacked_harm_per_family =
            f.get_int("corpus", "attacked_harm_per_family", c.pretrain_sizes.attacked_harm_per_family);
        c.pretrain_sizes.attacked_clean =
            f.get_int("corpus", "attacked_clean", c.pretrain_sizes.attacked_clean);
        c.detection_per_part = f.get_int("corpus", "detection_per_part", c.detection_per_part);
        c.detection_holdout_per_part =
            f.get_int("corpus", "detection_holdout_per_part", c.detection_holdout_per_part);
        c.qa_n = f.get_int("corpus", "qa_n", c.qa_n);
        c.attack_fill_count = f.get_int("corpus", "attack_fill_count", c.attack_fill_count);
        c.corpus_seed = f.get_uint("corpus", "seed", c.corpus_seed);

        c.pretrain.max_steps = f.get_int("pretrain", "max_steps", c.pretrain.max_steps);
        c.pretrain.batch = f.get_int("pretrain", "batch", c.pretrain.batch);
        c.pretrain.lr = static_cast<float>(f.get_double("pretrain", "lr", c.pretrain.lr));
        c.pretrain.eval_every = f.get_int("pretrain", "eval_every", c.pretrain.eval_every);
        c.pretrain.probe_n = f.get_int("pretrain", "probe_n", c.pretrain.probe_n);
        c.pretrain.extra_steps = f.get_int("pretrain", "extra_steps", c.pretrain.extra_steps);
        c.pretrain.seed = f.get_uint("pretrain", "seed", c.pretrain.seed);

        c.detector_lr = static_cast<float>(f.get_double("detector", "lr", c.detector_lr));
        c.detector_epochs = f.get_int("detector", "epochs", c.detector_epochs);
        c.detector_batch = f.get_int("detector", "batch", c.detector_batch);
        c.detector_seed = f.get_uint("detector", "seed", c.detector_seed);

        c.immunizer.defense_lr =
            static_cast<float>(f.get_double("immunizer", "defense_lr", c.immunizer.defense_lr));
        c.immunizer.refusal_batch = f.get_int("immunizer", "refusal_batch", c.immunizer.refusal_batch);
        c.immunizer.reg_batch = f.get_int("immunizer", "reg_batch", c.immunizer.reg_batch);
        c.immunizer.defense_steps = f.get_int("immunizer", "defense_steps", c.immunizer.defense_steps);
        c.immunizer.tta_lr = static_cast<float>(f.get_double("immunizer", "tta_lr", c.immunizer.tta_lr));
        c.immunizer.tta_batch = f.get_int("immunizer", "tta_batch", c.immunizer.tta_batch);
        c.immunizer.tta_steps = f.get_int("immunizer", "tta_steps", c.immunizer.tta_steps);
        c.immunizer.seed = f.get_uint("immunizer", "seed", c.immunizer.seed);

        c.schedule = f.get_str("stream", "schedule", c.schedule);
        c.mix_ratio = f.get_double("stream", "mix_ratio", c.mix_ratio);
        c.stream_seed = f.get_uint("stream", "seed", c.stream_seed);
        c.max_new = f.get_int("stream", "max_new", c.max_new);
        c.suppress_detected = f.get_bool("stream", "suppress_detected", c.suppress_detected);
        return c;
    }

    static RunConfig from_file(const std::string& path) {
        return from_ini(IniFile::parse_file(path));
    }

    void save(const std::string& path) const {
        std::ofstream f(path);
        if (!f) throw std::runtime_error("config: cannot write " + path);
        f << "[model]\n"
          << "d_model = " << model.d_model << "\nn_layers = " << model.n_layers
          << "\nn_heads = " << model.n_heads << "\nd_ff = " << model.d_ff
          << "\nmax_seq_len = " << model.max_seq_len << "\ndetect_layer = " << model.detect_layer
          << "\nlora_rank = " << model.lora_rank << "\nseed = " << model.seed << "\n\n";
        f << "[grammar]\n"
          << "n_harm = " << grammar.n_harm << "\nn_clean = " << grammar.n_clean
          << "\nn_fill = " << grammar.n_fill << "\nn_suffix = " << grammar.n_suffix
          << "\nn_refuse = " << grammar.n_refuse << "\nn_hans = " << grammar.n_hans
          << "\nn_cans = " << grammar.n_cans
          << "\nfills_min = " << grammar.fills_min
          << "\nfills_max = " << grammar.fills_max << "\n\n";
        f << "[corpus]\n"
          << "clean = " << pretrain_sizes.clean << "\nplain_harm = " << pretrain_sizes.plain_harm
          << "\nattacked_harm_per_family = " << pretrain_sizes.attacked_harm_per_family
          << "\nattacked_clean = " << pretrain_sizes.attacked_clean
          << "\ndetection_per_part = " << detection_per_part
          << "\ndetection_holdout_per_part = " << detection_holdout_per_part << "\nqa_n = " << qa_n
          << "\nattack_fill_count = " << attack_fill_count << "\nseed = " << corpus_seed << "\n\n";
        f << "[pretrain]\n"
          << "max_steps = " << pretrain.max_steps << "\nbatch = " << pretrain.batch
          << "\nlr = " << pretrain.lr << "\neval_every = " << pretrain.eval_every
          << "\nprobe_n = " << pretrain.probe_n << "\nextra_steps = " << pretrain.extra_steps
          << "\nseed = " << pretrain.seed << "\n\n";
        f << "[detector]\n"
          << "lr = " << detector_lr << "\nepochs = " << detector_epochs
          << "\nbatch = " << detector_batch << "\nseed = " << detector_seed << "\n\n";
        f << "[immunizer]\n"
          << "defense_lr = " << immunizer.defense_lr << "\nrefusal_batch = " << immunizer.refusal_batch
          << "\nreg_batch = " << immunizer.reg_batch << "\ndefense_steps = " << immunizer.defense_steps
          << "\ntta_lr = " << immunizer.tta_lr << "\ntta_batch = " << immunizer.tta_batch
          << "\ntta_steps = " << immunizer.tta_steps << "\nseed = " << immunizer.seed << "\n\n";
        f << "[stream]\n"
          << "schedule = " << schedule << "\nmix_ratio = " << mix_ratio
          << "\nseed = " << stream_seed << "\nmax_new = " << max_new
          << "\nsuppress_detected = " << (suppress_detected ? "true" : "false") << "\n";
        if (!f) throw std::runtime_error("config: write failed for " + path);
    }

    std::vector<StreamPhase> phases() const { return parse_schedule(schedule, mix_ratio); }

    std::vector<int> train_fill_pool() const {
        std::vector<int> out;
        for (int i = 0; i < attack_fill_count && i < grammar.n_fill; ++i) out.push_back(i);
        return out;
    }
    std::vector<int> test_fill_pool() const {
        std::vector<int> out;
        for (int i = attack_fill_count; i < grammar.n_fill; ++i) out.push_back(i);
        if (out.empty()) return train_fill_pool();  // degenerate split: reuse training fillers
        return out;
    }
};

}  // namespace tim
