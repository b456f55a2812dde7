#pragma once

// Tiny decoder-only transformer with a KV cache, greedy decoding, an
// intermediate-layer hidden-state tap, and LoRA adapters confined to the
// blocks strictly after the tap layer.
//
// Two forward paths share the same kernels:
//   * forward_full  — whole-sequence, Var-based, differentiable on demand
//   * decode_step   — single-position incremental against a KVCache
// Per output element both accumulate in the same order, so they agree
// bit-for-bit; tests still assert the 1e-5 contract rather than equality.

#include <algorithm>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "autograd.hpp"
#include "tensor.hpp"

namespace tim {

struct CapacityError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ModelConfig {
    int vocab_size = 96;
    int d_model = 64;
    int n_layers = 6;
    int n_heads = 4;
    int d_ff = 128;
    int max_seq_len = 384;
    int detect_layer = 3;           // 1-based; LoRA lives strictly after it
    int lora_rank = 16;
    std::vector<int> lora_layers;   // 1-based block indices; default d+1..L
    unsigned seed = 1;
    int gist_id = 2;                // reserved vocabulary row, masked from generation
    int eos_id = 0;

    void finalize() {
        if (lora_layers.empty())
            for (int l = detect_layer + 1; l <= n_layers; ++l) lora_layers.push_back(l);
        validate();
    }

    void validate() const {
        if (d_model % n_heads != 0) throw std::invalid_argument("config: d_model % n_heads");
        if (detect_layer < 1 || detect_layer >= n_layers)
            throw std::invalid_argument("config: detect_layer out of range");
        if (lora_rank < 1) throw std::invalid_argument("config: lora_rank < 1");
        for (int l : lora_layers)
            if (l <= detect_layer || l > n_layers)
                throw std::invalid_argument("config: lora layer must lie after detect_layer");
        if (gist_id < 0 || gist_id >= vocab_size || eos_id < 0 || eos_id >= vocab_size)
            throw std::invalid_argument("config: special token id out of range");
    }

    int head_dim() const { return d_model / n_heads; }
    bool has_lora(int layer1based) const {
        return std::find(lora_layers.begin(), lora_layers.end(), layer1based) != lora_layers.end();
    }
};

template <class R>
struct BlockWeightsT {
    TensorT<R> ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo;
    TensorT<R> ln2_g, ln2_b, w1, b1, w2, b2;
};

template <class R>
struct BaseWeightsT {
    TensorT<R> tok_emb;  // [V, m]; the gist row exists but is never read (t_g lives in the detector)
    TensorT<R> pos_emb;  // [max_seq, m]
    std::vector<BlockWeightsT<R>> blocks;
    TensorT<R> lnf_g, lnf_b;
    TensorT<R> w_out, b_out;  // [m, V], [1, V]; untied from tok_emb

    void init(const ModelConfig& c, std::mt19937& rng) {
        const int m = c.d_model;
        const R w_std = R(0.08);
        tok_emb = TensorT<R>::randn({c.vocab_size, m}, rng, R(0.06));
        pos_emb = TensorT<R>::randn({c.max_seq_len, m}, rng, R(0.06));
        blocks.clear();
        for (int l = 0; l < c.n_layers; ++l) {
            BlockWeightsT<R> b;
            b.ln1_g = TensorT<R>::full({1, m}, R(1));
            b.ln1_b = TensorT<R>::zeros({1, m});
            b.wq = TensorT<R>::randn({m, m}, rng, w_std);
            b.bq = TensorT<R>::zeros({1, m});
            b.wk = TensorT<R>::randn({m, m}, rng, w_std);
            b.bk = TensorT<R>::zeros({1, m});
            b.wv = TensorT<R>::randn({m, m}, rng, w_std);
            b.bv = TensorT<R>::zeros({1, m});
            b.wo = TensorT<R>::randn({m, m}, rng, w_std / std::sqrt(R(2 * c.n_layers)));
            b.bo = TensorT<R>::zeros({1, m});
            b.ln2_g = TensorT<R>::full({1, m}, R(1));
            b.ln2_b = TensorT<R>::zeros({1, m});
            b.w1 = TensorT<R>::randn({m, c.d_ff}, rng, w_std);
            b.b1 = TensorT<R>::zeros({1, c.d_ff});
            b.w2 = TensorT<R>::randn({c.d_ff, m}, rng, w_std / std::sqrt(R(2 * c.n_layers)));
            b.b2 = TensorT<R>::zeros({1, m});
            blocks.push_back(std::move(b));
        }
        lnf_g = TensorT<R>::full({1, m}, R(1));
        lnf_b = TensorT<R>::zeros({1, m});
        w_out = TensorT<R>::randn({m, c.vocab_size}, rng, w_std);
        b_out = TensorT<R>::zeros({1, c.vocab_size});
    }

    void collect(std::vector<std::pair<std::string, TensorT<R>*>>& out) {
        out.emplace_back("base.tok_emb", &tok_emb);
        out.emplace_back("base.pos_emb", &pos_emb);
        for (size_t l = 0; l < blocks.size(); ++l) {
            auto& b = blocks[l];
            const std::string p = "base.block" + std::to_string(l) + ".";
            out.emplace_back(p + "ln1_g", &b.ln1_g);
            out.emplace_back(p + "ln1_b", &b.ln1_b);
            out.emplace_back(p + "wq", &b.wq);
            out.emplace_back(p + "bq", &b.bq);
            out.emplace_back(p + "wk", &b.wk);
            out.emplace_back(p + "bk", &b.bk);
            out.emplace_back(p + "wv", &b.wv);
            out.emplace_back(p + "bv", &b.bv);
            out.emplace_back(p + "wo", &b.wo);
            out.emplace_back(p + "bo", &b.bo);
            out.emplace_back(p + "ln2_g", &b.ln2_g);
            out.emplace_back(p + "ln2_b", &b.ln2_b);
            out.emplace_back(p + "w1", &b.w1);
            out.emplace_back(p + "b1", &b.b1);
            out.emplace_back(p + "w2", &b.w2);
            out.emplace_back(p + "b2", &b.b2);
        }
        out.emplace_back("base.lnf_g", &lnf_g);
        out.emplace_back("base.lnf_b", &lnf_b);
        out.emplace_back("base.w_out", &w_out);
        out.emplace_back("base.b_out", &b_out);
    }
};

template <class R>
struct LoraPairT {
    int layer = 0;             // 1-based
    TensorT<R> a_q, b_q;       // A [r, m], B [m, r]; B zero-init so the delta starts at 0
    TensorT<R> a_v, b_v;
};

template <class R>
struct LoraAdapterT {
    std::vector<LoraPairT<R>> pairs;
    R scaling = R(1);  // alpha / r with alpha = r

    void init(const ModelConfig& c, std::mt19937& rng) {
        pairs.clear();
        for (int l : c.lora_layers) {
            LoraPairT<R> p;
            p.layer = l;
            p.a_q = TensorT<R>::randn({c.lora_rank, c.d_model}, rng, R(0.02));
            p.b_q = TensorT<R>::zeros({c.d_model, c.lora_rank});
            p.a_v = TensorT<R>::randn({c.lora_rank, c.d_model}, rng, R(0.02));
            p.b_v = TensorT<R>::zeros({c.d_model, c.lora_rank});
            pairs.push_back(std::move(p));
        }
    }

    const LoraPairT<R>* find(int layer1based) const {
        for (const auto& p : pairs)
            if (p.layer == layer1based) return &p;
        return nullptr;
    }

    void collect(std::vector<std::pair<std::string, TensorT<R>*>>& out) {
        for (auto& p : pairs) {
            const std::string pre = "lora.block" + std::to_string(p.layer) + ".";
            out.emplace_back(pre + "a_q", &p.a_q);
            out.emplace_back(pre + "b_q", &p.b_q);
            out.emplace_back(pre + "a_v", &p.a_v);
            out.emplace_back(pre + "b_v", &p.b_v);
        }
    }
};

// Per-layer key/value rows for all processed positions.
template <class R>
class KVCacheT {
   public:
    KVCacheT() = default;
    KVCacheT(int n_layers, int d_model, int max_len)
        : d_model_(d_model), max_len_(max_len), k_(static_cast<size_t>(n_layers)),
          v_(static_cast<size_t>(n_layers)) {}

    int len() const { return len_; }
    int max_len() const { return max_len_; }
    bool full() const { return len_ >= max_len_; }

    void append(int layer0, const R* k, const R* v) {
        k_[static_cast<size_t>(layer0)].insert(k_[static_cast<size_t>(layer0)].end(), k, k + d_model_);
        v_[static_cast<size_t>(layer0)].insert(v_[static_cast<size_t>(layer0)].end(), v, v + d_model_);
    }
    void commit_position() { ++len_; }

    const R* k_rows(int layer0) const { return k_[static_cast<size_t>(layer0)].data(); }
    const R* v_rows(int layer0) const { return v_[static_cast<size_t>(layer0)].data(); }

    TensorT<R> k_tensor(int layer0) const {
        return TensorT<R>({len_, d_model_}, k_[static_cast<size_t>(layer0)]);
    }
    TensorT<R> v_tensor(int layer0) const {
        return TensorT<R>({len_, d_model_}, v_[static_cast<size_t>(layer0)]);
    }

   private:
    int d_model_ = 0, max_len_ = 0, len_ = 0;
    std::vector<std::vector<R>> k_, v_;
};

// Leaf/constant bindings of every weight tensor for one tape (one training
// step). Constants are plain value snapshots; leaves accumulate gradients.
template <class R>
struct ModelVarsT {
    TapeT<R>* tape = nullptr;
    VarT<R> tok_emb, pos_emb;
    struct Block {
        VarT<R> ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
        VarT<R> a_q, b_q, a_v, b_v;
        bool has_lora = false;
    };
    std::vector<Block> blocks;
    VarT<R> lnf_g, lnf_b, w_out, b_out;
};

template <class R>
struct StepOutT {
    std::vector<R> logits;                 // empty when max_layer < n_layers
    std::vector<std::vector<R>> hidden;    // per computed layer, the block output at this position
};

template <class R>
struct FullForwardT {
    VarT<R> logits;                 // [T, V]; empty Var when max_layer < n_layers
    std::vector<VarT<R>> hidden;    // per computed layer, [T, m]
    KVCacheT<R> cache;
};

template <class R>
class TransformerT {
   public:
    ModelConfig cfg;
    BaseWeightsT<R> base;
    LoraAdapterT<R> lora;

    TransformerT() = default;
    explicit TransformerT(ModelConfig c) : cfg(std::move(c)) {
        cfg.finalize();
        std::mt19937 rng(cfg.seed);
        base.init(cfg, rng);
        lora.init(cfg, rng);
    }

    KVCacheT<R> make_cache() const {
        return KVCacheT<R>(cfg.n_layers, cfg.d_model, cfg.max_seq_len);
    }

    uint64_t base_hash() const {
        std::vector<std::pair<std::string, TensorT<R>*>> named;
        const_cast<BaseWeightsT<R>&>(base).collect(named);
        std::vector<const TensorT<R>*> ts;
        for (auto& [n, t] : named) ts.push_back(t);
        return content_hash<R>(ts);
    }

    ModelVarsT<R> bind(TapeT<R>* tape, bool train_base, bool train_lora) const {
        ModelVarsT<R> mv;
        mv.tape = tape;
        auto wrap = [&](const TensorT<R>& t, bool train) {
            return (train && tape) ? leaf(*tape, t) : constant(t);
        };
        mv.tok_emb = wrap(base.tok_emb, train_base);
        mv.pos_emb = wrap(base.pos_emb, train_base);
        for (int l = 0; l < cfg.n_layers; ++l) {
            const auto& b = base.blocks[static_cast<size_t>(l)];
            typename ModelVarsT<R>::Block bv;
            bv.ln1_g = wrap(b.ln1_g, train_base);
            bv.ln1_b = wrap(b.ln1_b, train_base);
            bv.wq = wrap(b.wq, train_base);
            bv.bq = wrap(b.bq, train_base);
            bv.wk = wrap(b.wk, train_base);
            bv.bk = wrap(b.bk, train_base);
            bv.wv = wrap(b.wv, train_base);
            bv.bv = wrap(b.bv, train_base);
            bv.wo = wrap(b.wo, train_base);
            bv.bo = wrap(b.bo, train_base);
            bv.ln2_g = wrap(b.ln2_g, train_base);
            bv.ln2_b = wrap(b.ln2_b, train_base);
            bv.w1 = wrap(b.w1, train_base);
            bv.b1 = wrap(b.b1, train_base);
            bv.w2 = wrap(b.w2, train_base);
            bv.b2 = wrap(b.b2, train_base);
            if (const auto* p = lora.find(l + 1)) {
                bv.has_lora = true;
                bv.a_q = wrap(p->a_q, train_lora);
                bv.b_q = wrap(p->b_q, train_lora);
                bv.a_v = wrap(p->a_v, train_lora);
                bv.b_v = wrap(p->b_v, train_lora);
            }
            mv.blocks.push_back(std::move(bv));
        }
        mv.lnf_g = wrap(base.lnf_g, train_base);
        mv.lnf_b = wrap(base.lnf_b, train_base);
        mv.w_out = wrap(base.w_out, train_base);
        mv.b_out = wrap(base.b_out, train_base);
        return mv;
    }

    // Whole-sequence forward. `gist` supplies the embedding for any gist_id
    // occurrence (legal only at the final position). max_layer < 1 means all.
    FullForwardT<R> forward_full(const std::vector<int>& ids, const ModelVarsT<R>& mv,
                                 int max_layer = -1,
                                 std::optional<VarT<R>> gist = std::nullopt) const {
        const int t = static_cast<int>(ids.size());
        if (t == 0) throw std::invalid_argument("forward_full: empty sequence");
        if (t > cfg.max_seq_len)
            throw CapacityError("forward_full: sequence length " + std::to_string(t) +
                                " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
        const int n_layers = max_layer < 1 ? cfg.n_layers : max_layer;
        const int hd = cfg.head_dim();
        const R att_scale = R(1) / std::sqrt(static_cast<R>(hd));

        bool has_gist = false;
        for (int i = 0; i < t; ++i) {
            if (ids[static_cast<size_t>(i)] == cfg.gist_id) {
                if (i != t - 1 || !gist)
                    throw std::invalid_argument("forward_full: gist token only valid at final position");
                has_gist = true;
            }
        }

        VarT<R> emb;
        if (has_gist) {
            std::vector<int> head_ids(ids.begin(), ids.end() - 1);
            if (head_ids.empty()) {
                emb = *gist;
            } else {
                emb = concat_rows<R>({embed_rows(mv.tok_emb, head_ids), *gist});
            }
        } else {
            emb = embed_rows(mv.tok_emb, ids);
        }
        VarT<R> x = add(emb, slice_rows(mv.pos_emb, 0, t));

        FullForwardT<R> out;
        out.cache = make_cache();
        for (int l = 0; l < n_layers; ++l) {
            const auto& b = mv.blocks[static_cast<size_t>(l)];
            VarT<R> h = layernorm(x, b.ln1_g, b.ln1_b, R(1e-5));
            VarT<R> q = add_bias(matmul(h, b.wq), b.bq);
            VarT<R> k = add_bias(matmul(h, b.wk), b.bk);
            VarT<R> v = add_bias(matmul(h, b.wv), b.bv);
            if (b.has_lora) {
                q = add(q, scale(matmul_nt(matmul_nt(h, b.a_q), b.b_q), lora.scaling));
                v = add(v, scale(matmul_nt(matmul_nt(h, b.a_v), b.b_v), lora.scaling));
            }
            for (int i = 0; i < t; ++i)
                out.cache.append(l, k.val().row_ptr(i), v.val().row_ptr(i));
            std::vector<VarT<R>> heads;
            for (int hh = 0; hh < cfg.n_heads; ++hh) {
                VarT<R> qh = slice_cols(q, hh * hd, hd);
                VarT<R> kh = slice_cols(k, hh * hd, hd);
                VarT<R> vh = slice_cols(v, hh * hd, hd);
                VarT<R> s = scale(matmul_nt(qh, kh), att_scale);
                VarT<R> p = softmax_causal(s, 0);
                heads.push_back(matmul(p, vh));
            }
            VarT<R> att = add_bias(matmul(concat_cols(heads), b.wo), b.bo);
            x = add(x, att);
            VarT<R> h2 = layernorm(x, b.ln2_g, b.ln2_b, R(1e-5));
            VarT<R> mlp =
                add_bias(matmul(relu(add_bias(matmul(h2, b.w1), b.b1)), b.w2), b.b2);
            x = add(x, mlp);
            out.hidden.push_back(x);
        }
        for (int i = 0; i < t; ++i) out.cache.commit_position();
        if (n_layers == cfg.n_layers)
            out.logits = add_bias(matmul(layernorm(x, mv.lnf_g, mv.lnf_b, R(1e-5)), mv.w_out),
                                  mv.b_out);
        return out;
    }

    // Convenience: untracked full forward with a cache rebuilt correctly.
    FullForwardT<R> forward_full(const std::vector<int>& ids,
                                 const TensorT<R>* gist_embedding = nullptr,
                                 int max_layer = -1) const {
        ModelVarsT<R> mv = bind(nullptr, false, false);
        std::optional<VarT<R>> g;
        if (gist_embedding) g = constant(*gist_embedding);
        FullForwardT<R> ff = forward_full(ids, mv, max_layer, g);
        // Rebuild the cache via the incremental path so lengths/commits match.
        ff.cache = make_cache();
        for (int id : ids) {
            if (id == cfg.gist_id) break;  // gist positions are peeked, never committed
            decode_step(ff.cache, id, true, max_layer);
        }
        return ff;
    }

    // One-position forward against a cache. commit=false computes without
    // extending the cache (used for the detection peek). max_layer < 1 = all.
    StepOutT<R> decode_step(KVCacheT<R>& cache, int token, bool commit = true,
                            int max_layer = -1, const TensorT<R>* gist_embedding = nullptr) const {
        if (cache.full())
            throw CapacityError("decode_step: cache at capacity " + std::to_string(cache.max_len()));
        const int n_layers = max_layer < 1 ? cfg.n_layers : max_layer;
        const int m = cfg.d_model, hd = cfg.head_dim();
        const R att_scale = R(1) / std::sqrt(static_cast<R>(hd));
        const int pos = cache.len();
        const int t_ctx = cache.len();

        std::vector<R> x(static_cast<size_t>(m));
        if (token == cfg.gist_id) {
            if (!gist_embedding)
                throw std::invalid_argument("decode_step: gist token requires an embedding");
            if (gist_embedding->numel() != m)
                throw std::invalid_argument("decode_step: gist embedding width");
            for (int j = 0; j < m; ++j) x[static_cast<size_t>(j)] = gist_embedding->data[static_cast<size_t>(j)];
        } else {
            if (token < 0 || token >= cfg.vocab_size)
                throw std::invalid_argument("decode_step: token id out of range");
            const R* e = base.tok_emb.row_ptr(token);
            for (int j = 0; j < m; ++j) x[static_cast<size_t>(j)] = e[j];
        }
        const R* pe = base.pos_emb.row_ptr(pos);
        for (int j = 0; j < m; ++j) x[static_cast<size_t>(j)] += pe[j];

        StepOutT<R> out;
        std::vector<R> h(static_cast<size_t>(m)), q(static_cast<size_t>(m)), k(static_cast<size_t>(m)),
            v(static_cast<size_t>(m));
        for (int l = 0; l < n_layers; ++l) {
            const auto& b = base.blocks[static_cast<size_t>(l)];
            kern::layernorm_row(x.data(), b.ln1_g.data.data(), b.ln1_b.data.data(), h.data(), m,
                                R(1e-5));
            project(h, b.wq, b.bq, q);
            project(h, b.wk, b.bk, k);
            project(h, b.wv, b.bv, v);
            if (const auto* p = lora.find(l + 1)) {
                lora_delta(h, p->a_q, p->b_q, q);
                lora_delta(h, p->a_v, p->b_v, v);
            }
            // Attention over cached positions plus this one.
            std::vector<R> att(static_cast<size_t>(m), R(0));
            std::vector<R> scores(static_cast<size_t>(t_ctx) + 1);
            for (int hh = 0; hh < cfg.n_heads; ++hh) {
                const int c0 = hh * hd;
                for (int tt = 0; tt < t_ctx; ++tt) {
                    const R* kr = cache.k_rows(l) + static_cast<size_t>(tt) * m + c0;
                    R acc = R(0);
                    for (int j = 0; j < hd; ++j) acc += q[static_cast<size_t>(c0 + j)] * kr[j];
                    scores[static_cast<size_t>(tt)] = acc * att_scale;
                }
                {
                    R acc = R(0);
                    for (int j = 0; j < hd; ++j)
                        acc += q[static_cast<size_t>(c0 + j)] * k[static_cast<size_t>(c0 + j)];
                    scores[static_cast<size_t>(t_ctx)] = acc * att_scale;
                }
                kern::softmax_row(scores.data(), t_ctx + 1);
                for (int tt = 0; tt < t_ctx; ++tt) {
                    const R p = scores[static_cast<size_t>(tt)];
                    const R* vr = cache.v_rows(l) + static_cast<size_t>(tt) * m + c0;
                    for (int j = 0; j < hd; ++j) att[static_cast<size_t>(c0 + j)] += p * vr[j];
                }
                const R pself = scores[static_cast<size_t>(t_ctx)];
                for (int j = 0; j < hd; ++j)
                    att[static_cast<size_t>(c0 + j)] += pself * v[static_cast<size_t>(c0 + j)];
            }
            std::vector<R> o(static_cast<size_t>(m));
            project(att, b.wo, b.bo, o);
            for (int j = 0; j < m; ++j) x[static_cast<size_t>(j)] += o[static_cast<size_t>(j)];
            kern::layernorm_row(x.data(), b.ln2_g.data.data(), b.ln2_b.data.data(), h.data(), m,
                                R(1e-5));
            std::vector<R> f(static_cast<size_t>(cfg.d_ff), R(0));
            kern::matmul_acc(f.data(), h.data(), b.w1.data.data(), 1, m, cfg.d_ff);
            for (int j = 0; j < cfg.d_ff; ++j) {
                f[static_cast<size_t>(j)] += b.b1.data[static_cast<size_t>(j)];
                if (f[static_cast<size_t>(j)] < R(0)) f[static_cast<size_t>(j)] = R(0);
            }
            std::vector<R> mo(static_cast<size_t>(m), R(0));
            kern::matmul_acc(mo.data(), f.data(), b.w2.data.data(), 1, cfg.d_ff, m);
            for (int j = 0; j < m; ++j)
                x[static_cast<size_t>(j)] += mo[static_cast<size_t>(j)] + b.b2.data[static_cast<size_t>(j)];
            // b2 must be added before the residual to mirror the batched path:
            // mlp = (f @ w2) + b2, then x += mlp. The line above fuses both.

            if (commit) cache.append(l, k.data(), v.data());
            out.hidden.push_back(x);
        }
        if (commit) cache.commit_position();

        if (n_layers == cfg.n_layers) {
            kern::layernorm_row(x.data(), base.lnf_g.data.data(), base.lnf_b.data.data(), h.data(),
                                m, R(1e-5));
            out.logits.assign(static_cast<size_t>(cfg.vocab_size), R(0));
            kern::matmul_acc(out.logits.data(), h.data(), base.w_out.data.data(), 1, m,
                             cfg.vocab_size);
            for (int j = 0; j < cfg.vocab_size; ++j)
                out.logits[static_cast<size_t>(j)] += base.b_out.data[static_cast<size_t>(j)];
        }
        return out;
    }

    // Greedy argmax with the gist row masked out; ties resolve to the lowest id.
    int argmax_token(const std::vector<R>& logits) const {
        int best = -1;
        R bv = R(0);
        for (int j = 0; j < cfg.vocab_size; ++j) {
            if (j == cfg.gist_id) continue;
            if (best < 0 || logits[static_cast<size_t>(j)] > bv) {
                best = j;
                bv = logits[static_cast<size_t>(j)];
            }
        }
        return best;
    }

    // Greedy decode. Returns only the new tokens (EOS included when emitted)
    // and leaves `cache` covering prompt + answer, ready for the detection peek.
    std::vector<int> generate(const std::vector<int>& prompt, int max_new,
                              KVCacheT<R>& cache) const {
        if (max_new < 0) throw std::invalid_argument("generate: max_new < 0");
        if (prompt.empty()) throw std::invalid_argument("generate: empty prompt");
        // One slot is reserved for the detection-time gist position.
        if (static_cast<int>(prompt.size()) + max_new + 1 > cfg.max_seq_len)
            throw CapacityError("generate: prompt + max_new exceeds capacity");
        cache = make_cache();
        std::vector<R> logits;
        for (int id : prompt) logits = decode_step(cache, id).logits;
        std::vector<int> out;
        for (int i = 0; i < max_new; ++i) {
            const int next = argmax_token(logits);
            out.push_back(next);
            logits = decode_step(cache, next).logits;
            if (next == cfg.eos_id) break;
        }
        return out;
    }

    // Layer-d hidden state of the gist position, via one uncommitted decode step.
    std::vector<R> tap_detection_hidden(KVCacheT<R>& cache, const TensorT<R>& gist_embedding) const {
        StepOutT<R> so = decode_step(cache, cfg.gist_id, false, cfg.detect_layer, &gist_embedding);
        return so.hidden.back();
    }

    // Tracked single-column forward of the gist position over a fixed context
    // cache, layers 1..detect_layer. Used by detector training so the context
    // costs forward-only while gradients flow through t_g.
    VarT<R> gist_hidden_var(const KVCacheT<R>& cache, const VarT<R>& gist_embedding) const {
        const int m = cfg.d_model, hd = cfg.head_dim();
        const int t_ctx = cache.len();
        const int pos = t_ctx;
        if (pos >= cfg.max_seq_len) throw CapacityError("gist_hidden_var: cache at capacity");
        const R att_scale = R(1) / std::sqrt(static_cast<R>(hd));
        VarT<R> x = add(gist_embedding,
                        constant(TensorT<R>({1, m}, std::vector<R>(
                                                        base.pos_emb.row_ptr(pos),
                                                        base.pos_emb.row_ptr(pos) + m))));
        for (int l = 0; l < cfg.detect_layer; ++l) {
            const auto& b = base.blocks[static_cast<size_t>(l)];
            VarT<R> ln1g = constant(b.ln1_g), ln1b = constant(b.ln1_b);
            VarT<R> h = layernorm(x, ln1g, ln1b, R(1e-5));
            VarT<R> q = add_bias(matmul(h, constant(b.wq)), constant(b.bq));
            VarT<R> k = add_bias(matmul(h, constant(b.wk)), constant(b.bk));
            VarT<R> v = add_bias(matmul(h, constant(b.wv)), constant(b.bv));
            // No LoRA at or before the detection layer, by construction.
            VarT<R> k_all = t_ctx > 0 ? concat_rows<R>({constant(cache.k_tensor(l)), k}) : k;
            VarT<R> v_all = t_ctx > 0 ? concat_rows<R>({constant(cache.v_tensor(l)), v}) : v;
            std::vector<VarT<R>> heads;
            for (int hh = 0; hh < cfg.n_heads; ++hh) {
                VarT<R> qh = slice_cols(q, hh * hd, hd);
                VarT<R> kh = slice_cols(k_all, hh * hd, hd);
                VarT<R> vh = slice_cols(v_all, hh * hd, hd);
                VarT<R> s = scale(matmul_nt(qh, kh), att_scale);
                VarT<R> p = softmax_causal(s, t_ctx);
                heads.push_back(matmul(p, vh));
            }
            VarT<R> att = add_bias(matmul(concat_cols(heads), constant(b.wo)), constant(b.bo));
            x = add(x, att);
            VarT<R> h2 = layernorm(x, constant(b.ln2_g), constant(b.ln2_b), R(1e-5));
            VarT<R> mlp = add_bias(
                matmul(relu(add_bias(matmul(h2, constant(b.w1)), constant(b.b1))), constant(b.w2)),
                constant(b.b2));
            x = add(x, mlp);
        }
        return x;
    }

   private:
    // y = h @ W + b for a single row.
    static void project(const std::vector<R>& h, const TensorT<R>& w, const TensorT<R>& b,
                        std::vector<R>& y) {
        const int in = w.rows(), out = w.cols();
        y.assign(static_cast<size_t>(out), R(0));
        kern::matmul_acc(y.data(), h.data(), w.data.data(), 1, in, out);
        for (int j = 0; j < out; ++j) y[static_cast<size_t>(j)] += b.data[static_cast<size_t>(j)];
    }

    // y += ((h @ A^T) @ B^T) * scaling
    void lora_delta(const std::vector<R>& h, const TensorT<R>& a, const TensorT<R>& b,
                    std::vector<R>& y) const {
        const int r = a.rows(), m = a.cols();
        std::vector<R> t(static_cast<size_t>(r), R(0));
        kern::matmul_nt_acc(t.data(), h.data(), a.data.data(), 1, m, r);
        std::vector<R> d(static_cast<size_t>(m), R(0));
        kern::matmul_nt_acc(d.data(), t.data(), b.data.data(), 1, r, m);
        for (int j = 0; j < m; ++j) y[static_cast<size_t>(j)] += d[static_cast<size_t>(j)] * lora.scaling;
    }
};

using Transformer = TransformerT<float>;
using KVCache = KVCacheT<float>;
using ModelVars = ModelVarsT<float>;
using FullForward = FullForwardT<float>;

}  // namespace tim
