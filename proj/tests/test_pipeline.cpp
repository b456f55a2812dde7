#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <sstream>

#include "tim/experiment.hpp"

using namespace tim;

// A small world around the default grammar: random weights are fine for
// mechanics; quality is covered by the acceptance suite.
struct World {
    Grammar grammar;
    TransformerT<float> model;
    DetectorHeadT<float> head;
    std::vector<MemoryEntry> d_qa, d_d;
    ImmunizerConfig icfg;

    World() {
        ModelConfig mc;
        mc.vocab_size = grammar.vocab_size;
        mc.gist_id = grammar.gist;
        mc.eos_id = grammar.eos;
        mc.d_model = 16;
        mc.n_layers = 4;
        mc.n_heads = 2;
        mc.d_ff = 24;
        mc.max_seq_len = 96;
        mc.detect_layer = 2;
        mc.lora_rank = 3;
        model = TransformerT<float>(mc);
        std::mt19937 rng(7);
        head.init(model, rng);
        std::vector<int> fills{0, 1, 2, 3};
        d_d = gen_detection_dataset(grammar, 3, fills, 11);
        d_qa = gen_qa_dataset(grammar, 10, fills, 12);
        icfg.defense_steps = 1;
        icfg.tta_steps = 1;
    }

    std::vector<StreamEvent> events(int n, double mix = 0.5) {
        StreamPhase ph{{AttackFamily::suffix}, n, mix};
        return gen_stream(grammar, {ph}, {4, 5, 6, 7}, 13);
    }
};

static void force_label(DetectorHeadT<float>& head, int label) {
    head.b.data[0] = label == 0 ? 50.0f : -50.0f;
    head.b.data[1] = -head.b.data[0];
}

TEST_CASE("forced-positive head trains on every event; suppression swaps the answer") {
    World w;
    force_label(w.head, 1);
    ImmunizerT<float> imm(w.model, w.head, w.d_qa, w.d_d, w.grammar.refusal_answer(0), w.icfg);
    PipelineConfig pc;
    pc.max_new = 8;
    pc.suppress_detected = true;
    TimEngineT<float> engine(w.model, w.head, imm, w.grammar, RefusalPrefixSet(w.grammar.refusal_prefixes()), pc);
    auto ev = w.events(4);
    size_t expected_mj = 0;
    for (const auto& e : ev) {
        auto rec = engine.handle_instruction(e.instruction);
        ++expected_mj;
        CHECK(rec.outcome.label == 1);
        CHECK(rec.mj_size == expected_mj);
        CHECK(rec.md_size == 2 * expected_mj);
        CHECK(rec.returned == imm.refusal());
        CHECK(rec.rejected);
        CHECK_FALSE(rec.generated == rec.returned);  // generated survives in the record
    }
}

TEST_CASE("forced-negative head never trains; the answer passes through") {
    World w;
    force_label(w.head, 0);
    ImmunizerT<float> imm(w.model, w.head, w.d_qa, w.d_d, w.grammar.refusal_answer(0), w.icfg);
    PipelineConfig pc;
    pc.max_new = 8;
    pc.suppress_detected = true;  // must be a no-op when nothing is detected
    TimEngineT<float> engine(w.model, w.head, imm, w.grammar, RefusalPrefixSet(w.grammar.refusal_prefixes()), pc);
    for (const auto& e : w.events(4)) {
        auto rec = engine.handle_instruction(e.instruction);
        CHECK(rec.outcome.label == 0);
        CHECK(rec.mj_size == 0);
        CHECK(rec.returned == rec.generated);
        CHECK(rec.t_train_s == 0.0);
    }
}

TEST_CASE("without suppression the triggering answer is returned unchanged") {
    World w;
    force_label(w.head, 1);
    ImmunizerT<float> imm(w.model, w.head, w.d_qa, w.d_d, w.grammar.refusal_answer(0), w.icfg);
    PipelineConfig pc;
    pc.max_new = 8;
    pc.suppress_detected = false;
    TimEngineT<float> engine(w.model, w.head, imm, w.grammar, RefusalPrefixSet(w.grammar.refusal_prefixes()), pc);
    auto rec = engine.handle_instruction(w.events(1)[0].instruction);
    CHECK(rec.outcome.label == 1);
    CHECK(rec.returned == rec.generated);
}

TEST_CASE("run_stream numbers events, copies metadata, and writes well-formed CSV") {
    World w;
    force_label(w.head, 0);
    ImmunizerT<float> imm(w.model, w.head, w.d_qa, w.d_d, w.grammar.refusal_answer(0), w.icfg);
    TimEngineT<float> engine(w.model, w.head, imm, w.grammar, RefusalPrefixSet(w.grammar.refusal_prefixes()), PipelineConfig{8, false});
    auto ev = w.events(10);
    std::ostringstream csv;
    auto records = engine.run_stream(ev, &csv);
    REQUIRE(records.size() == ev.size());
    for (size_t i = 0; i < records.size(); ++i) {
        CHECK(records[i].step == static_cast<int>(i));
        CHECK(records[i].family == ev[i].family);
        CHECK(records[i].truth_is_attack == ev[i].truth_is_attack);
    }
    std::istringstream lines(csv.str());
    std::string line;
    int n_lines = 0;
    const std::string header = csv_header();
    const long n_commas = std::count(header.begin(), header.end(), ',');
    while (std::getline(lines, line)) {
        if (n_lines == 0) CHECK(line == header);
        const long commas = std::count(line.begin(), line.end(), ',');
        CHECK(commas == n_commas);
        ++n_lines;
    }
    CHECK(n_lines == static_cast<int>(ev.size()) + 1);
    CHECK_THROWS_AS(engine.run_stream({}), std::invalid_argument);
}

TEST_CASE("summarize agrees with an accumulator over the same records") {
    World w;
    force_label(w.head, 1);
    ImmunizerT<float> imm(w.model, w.head, w.d_qa, w.d_d, w.grammar.refusal_answer(0), w.icfg);
    TimEngineT<float> engine(w.model, w.head, imm, w.grammar, RefusalPrefixSet(w.grammar.refusal_prefixes()), PipelineConfig{8, true});
    auto records = engine.run_stream(w.events(8));
    StreamAccumulator acc;
    for (const auto& r : records) acc.add(r);
    auto a = TimEngineT<float>::summarize(records);
    auto b = acc.summary();
    CHECK(a.asr == b.asr);
    CHECK(a.asr50 == b.asr50);
    CHECK(a.odr == b.odr);
    CHECK(a.detector.counts.tp == b.detector.counts.tp);
    CHECK(a.detector.counts.fp == b.detector.counts.fp);
    CHECK(a.n_jailbreak == b.n_jailbreak);
    // Suppression rejects every event, so ASR is zero and ODR is one.
    CHECK(*a.asr == 0.0);
    CHECK(*a.odr == 1.0);
}

TEST_CASE("a capacity error is recorded, skipped from metrics, and the stream continues") {
    World w;
    force_label(w.head, 0);
    ImmunizerT<float> imm(w.model, w.head, w.d_qa, w.d_d, w.grammar.refusal_answer(0), w.icfg);
    TimEngineT<float> engine(w.model, w.head, imm, w.grammar, RefusalPrefixSet(w.grammar.refusal_prefixes()), PipelineConfig{8, false});
    auto ev = w.events(3);
    StreamEvent huge;
    huge.instruction.assign(static_cast<size_t>(w.model.cfg.max_seq_len), w.grammar.fill0);
    huge.family = "clean";
    huge.truth_is_attack = false;
    ev.insert(ev.begin() + 1, huge);
    auto records = engine.run_stream(ev);
    REQUIRE(records.size() == 4);
    CHECK(records[1].error);
    CHECK_FALSE(records[1].error_msg.empty());
    CHECK_FALSE(records[0].error);
    CHECK_FALSE(records[2].error);
    auto s = TimEngineT<float>::summarize(records);
    CHECK(s.n_jailbreak + s.n_normal == 3);  // the failed event never counts
}

TEST_CASE("vanilla stream records match the engine record shape") {
    World w;
    auto ev = w.events(6);
    std::ostringstream csv;
    auto res = run_vanilla_stream(w.model, w.grammar, RefusalPrefixSet(w.grammar.refusal_prefixes()), ev, 8, &csv);
    REQUIRE(res.records.size() == ev.size());
    for (const auto& r : res.records) {
        CHECK(r.outcome.label == 0);  // no detector in the loop
        CHECK(r.mj_size == 0);
        CHECK(r.returned == r.generated);
    }
    CHECK(csv.str().substr(0, csv_header().size()) == csv_header());
}

TEST_CASE("checkpoint round trip restores every tensor exactly") {
    World w;
    const std::string path = "/tmp/tim_test_ckpt.bin";
    auto named = full_named_tensors(w.model, w.head);
    std::vector<std::vector<float>> before;
    for (auto& [n, t] : named) before.push_back(t->data);
    save_checkpoint(path, named);
    for (auto& [n, t] : named)
        for (float& x : t->data) x += 1.25f;
    load_checkpoint(path, named);
    for (size_t i = 0; i < named.size(); ++i) CHECK(named[i].second->data == before[i]);
    std::remove(path.c_str());
}

TEST_CASE("checkpoint loader rejects corruption and mismatches") {
    World w;
    const std::string path = "/tmp/tim_test_ckpt_bad.bin";
    auto named = model_named_tensors(w.model);
    save_checkpoint(path, named);
    // Flip one payload byte: the hash check must fire.
    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekg(0, std::ios::end);
        const auto end = f.tellg();
        f.seekp(static_cast<std::streamoff>(end) - 3);
        char b = 0x5a;
        f.write(&b, 1);
    }
    CHECK_THROWS_AS(load_checkpoint(path, named), std::runtime_error);
    save_checkpoint(path, named);
    load_checkpoint(path, named);  // pristine file loads fine
    // A different tensor list (extra head tensors) must be rejected.
    auto full = full_named_tensors(w.model, w.head);
    CHECK_THROWS_AS(load_checkpoint(path, full), std::runtime_error);
    CHECK_THROWS_AS(load_checkpoint("/nonexistent/ckpt.bin", named), std::runtime_error);
    std::remove(path.c_str());
}

TEST_CASE("run config round trips through its INI form") {
    RunConfig c;
    c.model.d_model = 48;
    c.model.detect_layer = 2;
    c.grammar.n_fill = 24;
    c.grammar.fills_max = 5;
    c.detection_per_part = 33;
    c.attack_fill_count = 12;
    c.pretrain.max_steps = 77;
    c.detector_epochs = 9;
    c.immunizer.tta_steps = 3;
    c.schedule = "suffix:100,suffix+wrapper:50:0.25";
    c.mix_ratio = 0.4;
    c.suppress_detected = true;
    const std::string path = "/tmp/tim_test_cfg.ini";
    c.save(path);
    RunConfig d = RunConfig::from_file(path);
    CHECK(d.model.d_model == 48);
    CHECK(d.model.detect_layer == 2);
    CHECK(d.grammar.n_fill == 24);
    CHECK(d.grammar.fills_max == 5);
    CHECK(d.detection_per_part == 33);
    CHECK(d.attack_fill_count == 12);
    CHECK(d.pretrain.max_steps == 77);
    CHECK(d.detector_epochs == 9);
    CHECK(d.immunizer.tta_steps == 3);
    CHECK(d.schedule == c.schedule);
    CHECK(d.mix_ratio == doctest::Approx(0.4));
    CHECK(d.suppress_detected);
    auto phases = d.phases();
    REQUIRE(phases.size() == 2);
    CHECK(phases[0].families.size() == 1);
    CHECK(phases[0].n == 100);
    CHECK(phases[0].mix_ratio == doctest::Approx(0.4));
    CHECK(phases[1].families.size() == 2);
    CHECK(phases[1].mix_ratio == doctest::Approx(0.25));
    std::remove(path.c_str());
}

TEST_CASE("schedule parsing errors") {
    CHECK_THROWS_AS(parse_schedule("", 0.5), std::invalid_argument);
    CHECK_THROWS_AS(parse_schedule("suffix", 0.5), std::invalid_argument);
    CHECK_THROWS_AS(parse_schedule("gcg:100", 0.5), std::invalid_argument);
    CHECK_THROWS_AS(parse_schedule("suffix:0", 0.5), std::invalid_argument);
    CHECK_THROWS_AS(parse_schedule("suffix:10:0.5:9", 0.5), std::invalid_argument);
}

TEST_CASE("fill pools split and degenerate sensibly") {
    RunConfig c;
    c.grammar.n_fill = 8;
    c.attack_fill_count = 5;
    CHECK(c.train_fill_pool() == std::vector<int>{0, 1, 2, 3, 4});
    CHECK(c.test_fill_pool() == std::vector<int>{5, 6, 7});
    c.attack_fill_count = 8;
    CHECK(c.test_fill_pool() == c.train_fill_pool());  // degenerate split falls back
}
