#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "tim/detector.hpp"

using namespace tim;

static ModelConfig small_config(unsigned seed = 3) {
    ModelConfig c;
    c.vocab_size = 24;
    c.d_model = 16;
    c.n_layers = 4;
    c.n_heads = 2;
    c.d_ff = 24;
    c.max_seq_len = 64;
    c.detect_layer = 2;
    c.lora_rank = 3;
    c.seed = seed;
    return c;
}

static std::vector<int> random_seq(std::mt19937& rng, const ModelConfig& c, int len) {
    std::uniform_int_distribution<int> pick(3, c.vocab_size - 1);
    std::vector<int> out;
    for (int i = 0; i < len; ++i) out.push_back(pick(rng));
    return out;
}

// Two easily separable populations: label tracks which token range dominates
// the answer, so a linear head on the tapped hidden state can learn it.
static std::vector<MemoryEntry> toy_data(const ModelConfig& c, int n_per_class, unsigned seed) {
    std::mt19937 rng(seed);
    std::vector<MemoryEntry> data;
    for (int i = 0; i < n_per_class; ++i) {
        auto q = random_seq(rng, c, 4);
        data.push_back({q, {4, 5, 6, 7, 4, 5, 6, 7}, 0, 0});
        data.push_back({q, {20, 21, 22, 23, 20, 21, 22, 23}, 1, 0});
    }
    return data;
}

TEST_CASE("zero head gives the exact tie, which resolves to label 0") {
    TransformerT<float> model(small_config());
    DetectorHeadT<float> head;
    std::mt19937 rng(5);
    head.init(model, rng);  // w and b start at zero
    auto out = detect(model, head, {5, 6, 7}, {8, 9}, static_cast<KVCacheT<float>*>(nullptr));
    CHECK(out.p[0] == 0.5f);
    CHECK(out.p[1] == 0.5f);
    CHECK(out.label == 0);
    CHECK(out.slow_path);
    CHECK_FALSE(out.truncated);
}

TEST_CASE("fast path over a provided cache matches the slow rebuild bit for bit") {
    TransformerT<float> model(small_config());
    DetectorHeadT<float> head;
    std::mt19937 rng(7);
    head.init(model, rng);
    for (float& x : head.w.data) x = 0.1f * static_cast<float>(rng() % 7) - 0.3f;
    for (int trial = 0; trial < 10; ++trial) {
        auto q = random_seq(rng, model.cfg, 6);
        auto a = random_seq(rng, model.cfg, 5);
        KVCacheT<float> cache = detection_context(model, q, a);
        const int len_before = cache.len();
        auto fast = detect(model, head, q, a, &cache);
        auto slow = detect(model, head, q, a, static_cast<KVCacheT<float>*>(nullptr));
        CHECK_FALSE(fast.slow_path);
        CHECK(slow.slow_path);
        CHECK(fast.p[0] == slow.p[0]);
        CHECK(fast.p[1] == slow.p[1]);
        CHECK(fast.label == slow.label);
        CHECK(cache.len() == len_before);  // detection peeks, never commits
    }
}

TEST_CASE("detection never mutates model or head") {
    TransformerT<float> model(small_config());
    DetectorHeadT<float> head;
    std::mt19937 rng(9);
    head.init(model, rng);
    const auto base_before = model.base_hash();
    const auto w_before = head.w.data;
    const auto tg_before = head.t_g.data;
    (void)detect(model, head, {4, 5}, {6, 7, 8},
                 static_cast<KVCacheT<float>*>(nullptr));
    CHECK(model.base_hash() == base_before);
    CHECK(head.w.data == w_before);
    CHECK(head.t_g.data == tg_before);
}

TEST_CASE("truncation drops the answer tail and sets the flag") {
    ModelConfig c = small_config();
    TransformerT<float> model(c);
    DetectorHeadT<float> head;
    std::mt19937 rng(11);
    head.init(model, rng);
    std::vector<int> q(20, 5);
    std::vector<int> a(static_cast<size_t>(c.max_seq_len), 6);  // q + a > max_seq_len - 1
    auto out = detect(model, head, q, a, static_cast<KVCacheT<float>*>(nullptr));
    CHECK(out.truncated);
    // The truncated context equals the untruncated prefix of the same length.
    std::vector<int> a_cut(a.begin(), a.begin() + (c.max_seq_len - 1 - 20));
    auto ref = detect(model, head, q, a_cut, static_cast<KVCacheT<float>*>(nullptr));
    CHECK_FALSE(ref.truncated);
    CHECK(out.p[0] == ref.p[0]);
    // An instruction that alone exceeds capacity is an error, not a silent cut.
    std::vector<int> huge(static_cast<size_t>(c.max_seq_len), 5);
    CHECK_THROWS_AS(detection_context(model, huge, {}), CapacityError);
}

TEST_CASE("positive rescaling of the head preserves every label") {
    TransformerT<float> model(small_config());
    DetectorHeadT<float> head;
    std::mt19937 rng(13);
    head.init(model, rng);
    std::normal_distribution<float> n(0.0f, 1.0f);
    for (float& x : head.w.data) x = n(rng);
    std::vector<std::pair<TokenSeq, TokenSeq>> probes;
    for (int i = 0; i < 30; ++i)
        probes.emplace_back(random_seq(rng, model.cfg, 5), random_seq(rng, model.cfg, 4));
    // Center the decision boundary between the two middle margins so both
    // labels occur and no probe sits exactly on the boundary.
    std::vector<float> margins;
    for (const auto& [q, a] : probes) {
        auto out = detect(model, head, q, a, static_cast<KVCacheT<float>*>(nullptr));
        margins.push_back(std::log(out.p[1] / out.p[0]));
    }
    std::sort(margins.begin(), margins.end());
    head.b.data[1] = -(margins[14] + margins[15]) / 2;
    std::vector<int> labels;
    for (const auto& [q, a] : probes)
        labels.push_back(detect(model, head, q, a, static_cast<KVCacheT<float>*>(nullptr)).label);
    CHECK(*std::min_element(labels.begin(), labels.end()) !=
          *std::max_element(labels.begin(), labels.end()));  // both classes occur
    for (float& x : head.w.data) x *= 3.0f;
    for (float& x : head.b.data) x *= 3.0f;
    for (size_t i = 0; i < probes.size(); ++i)
        CHECK(detect(model, head, probes[i].first, probes[i].second,
                     static_cast<KVCacheT<float>*>(nullptr)).label == labels[i]);
}

TEST_CASE("zero epochs is a no-op") {
    TransformerT<float> model(small_config());
    DetectorHeadT<float> head;
    std::mt19937 rng(15);
    head.init(model, rng);
    const auto w = head.w.data, b = head.b.data, tg = head.t_g.data;
    (void)train_detector(model, head, toy_data(model.cfg, 4, 1), 0, 4, 1e-3f, 2);
    CHECK(head.w.data == w);
    CHECK(head.b.data == b);
    CHECK(head.t_g.data == tg);
}

TEST_CASE("training reduces the loss and only touches the head") {
    TransformerT<float> model(small_config());
    DetectorHeadT<float> head;
    std::mt19937 rng(17);
    head.init(model, rng);
    const auto base_before = model.base_hash();
    auto lora_before = model.lora.pairs[0].a_q.data;
    auto data = toy_data(model.cfg, 10, 3);
    auto res = train_detector(model, head, data, 300, 8, 1e-2f, 4);
    CHECK_FALSE(res.single_class_warning);
    CHECK(res.final_loss < res.initial_loss);
    CHECK(res.final_loss < 0.3f);
    CHECK(model.base_hash() == base_before);
    CHECK(model.lora.pairs[0].a_q.data == lora_before);
    // The trained head actually separates the two populations.
    int correct = 0;
    for (const auto& e : data) {
        auto out = detect(model, head, e.instruction, e.answer,
                          static_cast<KVCacheT<float>*>(nullptr));
        correct += out.label == e.label;
    }
    CHECK(correct == static_cast<int>(data.size()));
}

TEST_CASE("training is deterministic in the seed") {
    TransformerT<float> model(small_config());
    auto data = toy_data(model.cfg, 5, 6);
    DetectorHeadT<float> h1, h2;
    std::mt19937 r1(21), r2(21);
    h1.init(model, r1);
    h2.init(model, r2);
    (void)train_detector(model, h1, data, 3, 4, 1e-2f, 9);
    (void)train_detector(model, h2, data, 3, 4, 1e-2f, 9);
    CHECK(h1.w.data == h2.w.data);
    CHECK(h1.t_g.data == h2.t_g.data);
}

TEST_CASE("input validation") {
    TransformerT<float> model(small_config());
    DetectorHeadT<float> head;
    std::mt19937 rng(19);
    head.init(model, rng);
    CHECK_THROWS_AS(train_detector(model, head, {}, 1, 4, 1e-3f, 1), std::invalid_argument);
    CHECK_THROWS_AS(train_detector(model, head, toy_data(model.cfg, 2, 1), 1, 0, 1e-3f, 1),
                    std::invalid_argument);
    std::vector<MemoryEntry> bad = {{{4, 5}, {6}, 2, 0}};
    CHECK_THROWS_AS(train_detector(model, head, bad, 1, 1, 1e-3f, 1), std::invalid_argument);
    std::vector<MemoryEntry> one_class = {{{4, 5}, {6}, 1, 0}, {{4, 6}, {7}, 1, 0}};
    CHECK(train_detector(model, head, one_class, 1, 2, 1e-3f, 1).single_class_warning);
}
