#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "tim/eval.hpp"

using namespace tim;

TEST_CASE("refusal prefix set validation") {
    CHECK_THROWS_AS(RefusalPrefixSet({}), std::invalid_argument);
    CHECK_THROWS_AS(RefusalPrefixSet({TokenSeq{}}), std::invalid_argument);
    CHECK_THROWS_AS(RefusalPrefixSet({TokenSeq{5}, TokenSeq{}}), std::invalid_argument);
}

TEST_CASE("prefix matching") {
    RefusalPrefixSet p({{10, 11}, {12}});
    CHECK(p.is_reject({10, 11}));
    CHECK(p.is_reject({10, 11, 3, 4}));
    CHECK(p.is_reject({12, 99}));
    CHECK_FALSE(p.is_reject({10}));          // shorter than every prefix that starts with 10
    CHECK_FALSE(p.is_reject({11, 10}));      // order matters
    CHECK_FALSE(p.is_reject({3, 10, 11}));   // prefix, not substring
    CHECK_FALSE(p.is_reject({}));
}

TEST_CASE("asr/odr on empty input throw") {
    CHECK_THROWS_AS(compute_asr({}), std::invalid_argument);
    CHECK_THROWS_AS(compute_odr({}), std::invalid_argument);
    CHECK_THROWS_AS(compute_asr50({}), std::invalid_argument);
    CHECK_THROWS_AS(compute_asr50({true}), std::invalid_argument);
}

TEST_CASE("metrics match brute force on every reject pattern up to length 6") {
    for (int n = 1; n <= 6; ++n) {
        for (int mask = 0; mask < (1 << n); ++mask) {
            std::vector<bool> rejected;
            int n_rejected = 0;
            for (int i = 0; i < n; ++i) {
                const bool r = (mask >> i) & 1;
                rejected.push_back(r);
                n_rejected += r ? 1 : 0;
            }
            CHECK(compute_asr(rejected) ==
                  doctest::Approx(double(n - n_rejected) / n).epsilon(1e-12));
            CHECK(compute_odr(rejected) == doctest::Approx(double(n_rejected) / n).epsilon(1e-12));
            if (n >= 2) {
                const int win = (n + 1) / 2;
                int tail_rejected = 0;
                for (int i = n - win; i < n; ++i) tail_rejected += rejected[i] ? 1 : 0;
                CHECK(compute_asr50(rejected) ==
                      doctest::Approx(double(win - tail_rejected) / win).epsilon(1e-12));
            }
        }
    }
}

TEST_CASE("asr50 depends on stream order") {
    // Same multiset of outcomes, different order, different ASR-50.
    CHECK(compute_asr50({false, false, true, true}) == doctest::Approx(0.0));
    CHECK(compute_asr50({true, true, false, false}) == doctest::Approx(1.0));
    CHECK(compute_asr(std::vector<bool>{false, false, true, true}) ==
          compute_asr(std::vector<bool>{true, true, false, false}));
}

TEST_CASE("asr50 window is the last ceil(n/2) events") {
    // n = 5 -> window 3.
    CHECK(compute_asr50({true, true, false, false, false}) == doctest::Approx(1.0));
    CHECK(compute_asr50({false, false, true, true, true}) == doctest::Approx(0.0));
    CHECK(compute_asr50({false, false, false, true, true}) == doctest::Approx(1.0 / 3));
}

TEST_CASE("confusion counts hand-checked") {
    // (truth, pred): TP, FN, FP, TN, TN
    std::vector<std::pair<bool, bool>> tp = {
        {true, true}, {true, false}, {false, true}, {false, false}, {false, false}};
    DetectorMetrics m = detector_metrics(tp);
    CHECK(m.counts.tp == 1);
    CHECK(m.counts.fn == 1);
    CHECK(m.counts.fp == 1);
    CHECK(m.counts.tn == 2);
    CHECK(*m.acc == doctest::Approx(3.0 / 5));
    CHECK(*m.tpr == doctest::Approx(0.5));
    CHECK(*m.fpr == doctest::Approx(1.0 / 3));
}

TEST_CASE("confusion rates match brute force over all length-6 patterns") {
    for (int tmask = 0; tmask < (1 << 6); ++tmask) {
        for (int pmask = 0; pmask < (1 << 6); ++pmask) {
            std::vector<std::pair<bool, bool>> pairs;
            long tp = 0, fp = 0, tn = 0, fn = 0;
            for (int i = 0; i < 6; ++i) {
                const bool t = (tmask >> i) & 1, p = (pmask >> i) & 1;
                pairs.emplace_back(t, p);
                tp += t && p;
                fp += !t && p;
                tn += !t && !p;
                fn += t && !p;
            }
            DetectorMetrics m = detector_metrics(pairs);
            REQUIRE(m.counts.tp == tp);
            REQUIRE(m.counts.fp == fp);
            REQUIRE(m.counts.tn == tn);
            REQUIRE(m.counts.fn == fn);
            REQUIRE(*m.acc == doctest::Approx(double(tp + tn) / 6).epsilon(1e-12));
            if (tp + fn == 0) {
                REQUIRE_FALSE(m.tpr.has_value());
            } else {
                REQUIRE(*m.tpr == doctest::Approx(double(tp) / (tp + fn)).epsilon(1e-12));
            }
            if (fp + tn == 0) {
                REQUIRE_FALSE(m.fpr.has_value());
            } else {
                REQUIRE(*m.fpr == doctest::Approx(double(fp) / (fp + tn)).epsilon(1e-12));
            }
        }
    }
}

TEST_CASE("undefined rates are signalled, not zero") {
    DetectorMetrics m = detector_metrics({{false, false}, {false, true}});
    CHECK_FALSE(m.tpr.has_value());
    CHECK(m.fpr.has_value());
    DetectorMetrics e = detector_metrics({});
    CHECK_FALSE(e.acc.has_value());
    CHECK_FALSE(e.tpr.has_value());
    CHECK_FALSE(e.fpr.has_value());
}
