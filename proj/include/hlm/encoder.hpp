#pragma once

// Tiny decoder-style transformer dual-encoder tower: causal grouped-query
// attention with rotary positions, SwiGLU FFN, pre-norm residual blocks,
// last-token pooling, an output projection to the retrieval embedding
// dimension, optional nested truncation, and optional low-rank adapters.
// The forward pass exposes every layer-boundary hidden state, which the
// structured-pruning importance scores consume.

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "hlm/common.hpp"
#include "hlm/tensor.hpp"

namespace hlm {

struct EncoderConfig {
    int vocab_size = 512;
    int hidden_dim = 64;
    int ffn_dim = 128;
    int n_layers = 6;
    int n_query_heads = 4;
    int n_kv_heads = 2;
    int head_dim = 16;
    int embed_dim = 32;
    int max_seq_len = 32;
    std::vector<int> prompt_prefix;  // empty = no prompt

    void validate() const {
        auto positive = [](int v, const char* name) {
            if (v <= 0)
                throw config_error(std::string(name) + " must be positive");
        };
        positive(vocab_size, "vocab_size");
        positive(hidden_dim, "hidden_dim");
        positive(ffn_dim, "ffn_dim");
        positive(n_layers, "n_layers");
        positive(n_query_heads, "n_query_heads");
        positive(n_kv_heads, "n_kv_heads");
        positive(head_dim, "head_dim");
        positive(embed_dim, "embed_dim");
        positive(max_seq_len, "max_seq_len");
        if (n_query_heads % n_kv_heads != 0)
            throw config_error("n_query_heads must be a multiple of n_kv_heads");
        if (n_query_heads * head_dim != hidden_dim)
            throw config_error("n_query_heads * head_dim must equal hidden_dim");
        if (embed_dim > hidden_dim)
            throw config_error("embed_dim must not exceed hidden_dim");
        if (head_dim % 2 != 0)
            throw config_error("head_dim must be even for rotary encoding");
        if (static_cast<int>(prompt_prefix.size()) >= max_seq_len)
            throw config_error("prompt_prefix leaves no room for tokens");
        for (int t : prompt_prefix)
            if (t < 0 || t >= vocab_size)
                throw config_error("prompt_prefix token outside vocabulary");
    }
};

template <typename S>
struct LayerWeights {
    Tensor<S> attn_norm;  // [H]
    Tensor<S> wq;         // [n_q*head_dim x H]
    Tensor<S> wk;         // [n_kv*head_dim x H]
    Tensor<S> wv;         // [n_kv*head_dim x H]
    Tensor<S> wo;         // [H x n_q*head_dim]
    Tensor<S> ffn_norm;   // [H]
    Tensor<S> wg;         // [F x H] gate
    Tensor<S> wu;         // [F x H] up
    Tensor<S> wd;         // [H x F] down
};

template <typename S>
struct EncoderWeights {
    Tensor<S> embed_tokens;  // [V x H]
    std::vector<LayerWeights<S>> layers;
    Tensor<S> final_norm;  // [H]
    Tensor<S> w_out;       // [embed_dim x H]
};

/// Enumerates weight tensors in the canonical (checkpoint) order.
template <typename S>
void visit_named(EncoderWeights<S>& w,
                 const std::function<void(const std::string&, Tensor<S>&)>& fn) {
    fn("embed_tokens", w.embed_tokens);
    for (std::size_t l = 0; l < w.layers.size(); ++l) {
        std::string p = "layers." + std::to_string(l) + ".";
        auto& lw = w.layers[l];
        fn(p + "attn_norm", lw.attn_norm);
        fn(p + "wq", lw.wq);
        fn(p + "wk", lw.wk);
        fn(p + "wv", lw.wv);
        fn(p + "wo", lw.wo);
        fn(p + "ffn_norm", lw.ffn_norm);
        fn(p + "wg", lw.wg);
        fn(p + "wu", lw.wu);
        fn(p + "wd", lw.wd);
    }
    fn("final_norm", w.final_norm);
    fn("w_out", w.w_out);
}

template <typename S>
struct LoraAdapter {
    Tensor<S> a;  // [r x in]
    Tensor<S> b;  // [out x r]
    int rank = 0;
    S alpha = S(0);  // effective delta = (alpha / rank) * b * a
};

// Keyed by the canonical weight-tensor name the adapter attaches to.
template <typename S>
using LoraSet = std::map<std::string, LoraAdapter<S>>;

/// Hidden states at layer boundaries: h_in(l) and h_out(l) alias the same
/// storage as h_in(l+1), so the boundary invariant holds exactly.
template <typename S>
struct LayerTrace {
    std::vector<Tensor<S>> boundaries;  // size n_layers + 1

    int layers() const { return static_cast<int>(boundaries.size()) - 1; }
    const Tensor<S>& h_in(int l) const {
        return boundaries.at(static_cast<std::size_t>(l));
    }
    const Tensor<S>& h_out(int l) const {
        return boundaries.at(static_cast<std::size_t>(l) + 1);
    }
};

template <typename S>
struct ForwardResult {
    LayerTrace<S> trace;
    Tensor<S> pooled;  // final-RMSNormed hidden state at the last position
    // FFN internals per layer (pre-product gate/up activations), consumed by
    // width-importance calibration. Handles only; no extra compute.
    std::vector<Tensor<S>> ffn_gate;
    std::vector<Tensor<S>> ffn_up;
};

template <typename S>
class Encoder {
public:
    EncoderConfig cfg;
    EncoderWeights<S> w;
    LoraSet<S> lora;

    Encoder() = default;
    Encoder(EncoderConfig c, EncoderWeights<S> weights)
        : cfg(std::move(c)), w(std::move(weights)) {
        cfg.validate();
    }

    /// Seeded initialization: N(0, 0.02) token embeddings, 1/sqrt(in) linear
    /// layers, unit norm gains.
    static Encoder init(const EncoderConfig& cfg, std::uint64_t seed) {
        cfg.validate();
        EncoderWeights<S> w;
        int qw = cfg.n_query_heads * cfg.head_dim;
        int kw = cfg.n_kv_heads * cfg.head_dim;
        std::uint64_t idx = 0;
        auto normal = [&](std::vector<int> shape, double scl) {
            auto rng = CounterRng::stream(seed, rng_tag::init, idx++);
            auto t = Tensor<S>::zeros(std::move(shape));
            for (std::size_t i = 0; i < t.numel(); ++i)
                t.data()[i] = static_cast<S>(rng.normal() * scl);
            return t;
        };
        auto fan_in = [&](int out, int in) {
            return normal({out, in}, 1.0 / std::sqrt(static_cast<double>(in)));
        };
        w.embed_tokens = normal({cfg.vocab_size, cfg.hidden_dim}, 0.02);
        w.layers.resize(static_cast<std::size_t>(cfg.n_layers));
        for (auto& lw : w.layers) {
            lw.attn_norm = Tensor<S>::full({cfg.hidden_dim}, S(1));
            lw.wq = fan_in(qw, cfg.hidden_dim);
            lw.wk = fan_in(kw, cfg.hidden_dim);
            lw.wv = fan_in(kw, cfg.hidden_dim);
            lw.wo = fan_in(cfg.hidden_dim, qw);
            lw.ffn_norm = Tensor<S>::full({cfg.hidden_dim}, S(1));
            lw.wg = fan_in(cfg.ffn_dim, cfg.hidden_dim);
            lw.wu = fan_in(cfg.ffn_dim, cfg.hidden_dim);
            lw.wd = fan_in(cfg.hidden_dim, cfg.ffn_dim);
        }
        w.final_norm = Tensor<S>::full({cfg.hidden_dim}, S(1));
        w.w_out = fan_in(cfg.embed_dim, cfg.hidden_dim);
        return Encoder(cfg, std::move(w));
    }

    std::vector<int> apply_prompt(const std::vector<int>& tokens) const {
        if (cfg.prompt_prefix.empty()) return tokens;
        if (cfg.prompt_prefix.size() + tokens.size() >
            static_cast<std::size_t>(cfg.max_seq_len))
            throw dimension_error("prompt plus tokens exceed max_seq_len");
        std::vector<int> out = cfg.prompt_prefix;
        out.insert(out.end(), tokens.begin(), tokens.end());
        return out;
    }

    ForwardResult<S> forward(const std::vector<int>& tokens) const {
        if (tokens.empty()) throw dimension_error("empty token sequence");
        if (tokens.size() > static_cast<std::size_t>(cfg.max_seq_len))
            throw dimension_error("sequence length " +
                                  std::to_string(tokens.size()) +
                                  " exceeds max_seq_len " +
                                  std::to_string(cfg.max_seq_len));
        ForwardResult<S> r;
        Tensor<S> x = embedding_rows(w.embed_tokens, tokens);
        r.trace.boundaries.push_back(x);
        for (std::size_t l = 0; l < w.layers.size(); ++l) {
            const auto& lw = w.layers[l];
            std::string p = "layers." + std::to_string(l) + ".";
            auto a_in = rms_norm(x, lw.attn_norm);
            auto q = rope(proj(a_in, p + "wq", lw.wq), cfg.head_dim);
            auto k = rope(proj(a_in, p + "wk", lw.wk), cfg.head_dim);
            auto v = proj(a_in, p + "wv", lw.wv);
            auto heads = causal_gqa_attention(q, k, v, cfg.n_query_heads,
                                              cfg.n_kv_heads, cfg.head_dim);
            x = add(x, proj(heads, p + "wo", lw.wo));
            auto f_in = rms_norm(x, lw.ffn_norm);
            auto gate = silu(proj(f_in, p + "wg", lw.wg));
            auto up = proj(f_in, p + "wu", lw.wu);
            x = add(x, proj(mul(gate, up), p + "wd", lw.wd));
            r.trace.boundaries.push_back(x);
            r.ffn_gate.push_back(gate);
            r.ffn_up.push_back(up);
        }
        r.pooled = rms_norm(last_row(x), w.final_norm);
        return r;
    }

    /// Unit-norm retrieval embedding; optional nested truncation keeps the
    /// FIRST truncate_dim coordinates before re-normalizing.
    Tensor<S> embed(const std::vector<int>& tokens,
                    std::optional<int> truncate_dim = std::nullopt) const {
        if (truncate_dim) {
            if (*truncate_dim == 0)
                throw config_error("truncate_dim must be positive");
            if (*truncate_dim < 0 || *truncate_dim > cfg.embed_dim)
                throw config_error("truncate_dim exceeds embed_dim");
        }
        auto fwd = forward(tokens);
        auto proj_out = proj(fwd.pooled, "w_out", w.w_out);
        if (truncate_dim && *truncate_dim < cfg.embed_dim)
            proj_out = take_front(proj_out, *truncate_dim);
        return l2_normalize(proj_out);
    }

    /// All base weight tensors, in canonical order.
    std::vector<Tensor<S>*> parameters() {
        std::vector<Tensor<S>*> out;
        visit_named<S>(w, [&](const std::string&, Tensor<S>& t) {
            out.push_back(&t);
        });
        return out;
    }

    std::vector<Tensor<S>*> lora_parameters() {
        std::vector<Tensor<S>*> out;
        for (auto& [name, ad] : lora) {
            out.push_back(&ad.a);
            out.push_back(&ad.b);
        }
        return out;
    }

    void set_trainable(bool v) {
        for (auto* p : parameters()) p->set_requires_grad(v);
    }
    void set_lora_trainable(bool v) {
        for (auto* p : lora_parameters()) p->set_requires_grad(v);
    }

    std::size_t param_count() const {
        std::size_t n = 0;
        visit_named<S>(const_cast<EncoderWeights<S>&>(w),
                       [&](const std::string&, Tensor<S>& t) { n += t.numel(); });
        return n;
    }

    std::uint64_t weight_checksum() const {
        std::uint64_t h = 0xcbf29ce484222325ull;
        visit_named<S>(const_cast<EncoderWeights<S>&>(w),
                       [&](const std::string&, Tensor<S>& t) {
                           h = mix64(h ^ byte_checksum(t.data(), t.numel()));
                       });
        return h;
    }

    /// Deep copy: training mutates weights in place, so forks must not share.
    Encoder clone() const {
        Encoder out;
        out.cfg = cfg;
        out.w.embed_tokens = clone_tensor(w.embed_tokens);
        for (const auto& lw : w.layers) {
            LayerWeights<S> c;
            c.attn_norm = clone_tensor(lw.attn_norm);
            c.wq = clone_tensor(lw.wq);
            c.wk = clone_tensor(lw.wk);
            c.wv = clone_tensor(lw.wv);
            c.wo = clone_tensor(lw.wo);
            c.ffn_norm = clone_tensor(lw.ffn_norm);
            c.wg = clone_tensor(lw.wg);
            c.wu = clone_tensor(lw.wu);
            c.wd = clone_tensor(lw.wd);
            out.w.layers.push_back(std::move(c));
        }
        out.w.final_norm = clone_tensor(w.final_norm);
        out.w.w_out = clone_tensor(w.w_out);
        for (const auto& [name, ad] : lora) {
            LoraAdapter<S> c;
            c.a = clone_tensor(ad.a);
            c.b = clone_tensor(ad.b);
            c.rank = ad.rank;
            c.alpha = ad.alpha;
            out.lora.emplace(name, std::move(c));
        }
        return out;
    }

    static Tensor<S> clone_tensor(const Tensor<S>& t) {
        return Tensor<S>::from(t.vec(), t.shape());
    }

private:
    // Linear projection with an optional low-rank adapter on this matrix:
    // y = x W^T + (alpha/r) * (x A^T) B^T.
    Tensor<S> proj(const Tensor<S>& x, const std::string& name,
                   const Tensor<S>& weight) const {
        auto base = linear(x, weight);
        auto it = lora.find(name);
        if (it == lora.end()) return base;
        const auto& ad = it->second;
        auto delta = linear(linear(x, ad.a), ad.b);
        return add(base, scale(delta, ad.alpha / static_cast<S>(ad.rank)));
    }
};

/// Attaches zero-initialized adapters (A random, B zero, so the initial
/// delta vanishes) to every linear projection of the encoder.
template <typename S>
void attach_lora(Encoder<S>& enc, int rank, std::uint64_t seed,
                 std::optional<S> alpha = std::nullopt) {
    if (rank <= 0) throw config_error("LoRA rank must be positive");
    S a = alpha.value_or(static_cast<S>(2 * rank));
    std::uint64_t idx = 0;
    visit_named<S>(enc.w, [&](const std::string& name, Tensor<S>& t) {
        if (t.rank() != 2 || name == "embed_tokens") return;
        int out = t.dim(0), in = t.dim(1);
        LoraAdapter<S> ad;
        ad.rank = rank;
        ad.alpha = a;
        auto rng = CounterRng::stream(seed, rng_tag::init, 0x10ac + idx++);
        ad.a = Tensor<S>::zeros({rank, in});
        for (std::size_t i = 0; i < ad.a.numel(); ++i)
            ad.a.data()[i] =
                static_cast<S>(rng.normal() / std::sqrt(static_cast<double>(in)));
        ad.b = Tensor<S>::zeros({out, rank});
        enc.lora.emplace(name, std::move(ad));
    });
}

/// Materializes W' = W + (alpha/r) B A for every adapted matrix.
template <typename S>
EncoderWeights<S>& merge_lora(EncoderWeights<S>& w, const LoraSet<S>& lora,
                              S sign = S(1)) {
    visit_named<S>(w, [&](const std::string& name, Tensor<S>& t) {
        auto it = lora.find(name);
        if (it == lora.end()) return;
        const auto& ad = it->second;
        if (ad.a.rank() != 2 || ad.b.rank() != 2 || ad.b.dim(0) != t.dim(0) ||
            ad.a.dim(1) != t.dim(1) || ad.a.dim(0) != ad.rank ||
            ad.b.dim(1) != ad.rank)
            throw config_error("adapter shapes do not match '" + name + "'");
        S c = sign * ad.alpha / static_cast<S>(ad.rank);
        auto delta = matmul(ad.b, ad.a);
        for (std::size_t i = 0; i < t.numel(); ++i)
            t.data()[i] += c * delta.data()[i];
    });
    return w;
}

template <typename S>
EncoderWeights<S>& unmerge_lora(EncoderWeights<S>& w, const LoraSet<S>& lora) {
    return merge_lora(w, lora, S(-1));
}

}  // namespace hlm
