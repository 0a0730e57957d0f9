#pragma once

// Three-phase training pipeline for compact dual-encoder retrievers, plus
// the one-shot asymmetric baseline: contrastive teacher training, l2
// alignment of a small query encoder to the frozen teacher, progressive
// prune-and-align, and contrastive refinement against a frozen document
// tower. Owns the Adam optimizer and the trapezoid learning-rate schedule.
//
// Conventions shared by every phase:
//   - Training is a pure function of (inputs, config, seed): batches come
//     from per-epoch Fisher-Yates shuffles of a counter-based stream, and a
//     fresh optimizer starts each phase.
//   - Each tower applies its OWN prompt prefix to its own inputs, except the
//     student query encoder, which never applies one: its deployment input
//     path is the raw query.
//   - loss_trajectory logs one per-item mean loss value per step.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <exception>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <ostream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "hlm/common.hpp"
#include "hlm/encoder.hpp"
#include "hlm/losses.hpp"
#include "hlm/pruning.hpp"
#include "hlm/synthgen.hpp"
#include "hlm/tensor.hpp"

namespace hlm {

enum class LossKind { qwen_cl, info_nce };
enum class TrainMode { full, lora };
enum class FeatureChannel { deployable, oracle };
enum class InitMode { pretrained, random };

struct TrainConfig {
    int batch_size = 64;
    double peak_lr = 3e-3;
    double warmup_fraction = 0.10;
    int total_steps = 2000;
    std::uint64_t seed = 0;
    LossKind loss = LossKind::qwen_cl;
    CLConfig cl{};
    bool freeze_query = false;
    bool freeze_doc = false;
    int lora_rank = 8;
    int snapshot_every = 0;  // probe cadence in steps; 0 disables snapshots
};

inline void validate_train(const TrainConfig& cfg) {
    if (cfg.batch_size < 1) throw config_error("batch size must be >= 1");
    if (!(cfg.warmup_fraction >= 0.0 && cfg.warmup_fraction < 1.0))
        throw config_error("warmup fraction must lie in [0, 1)");
    if (cfg.total_steps < 0) throw config_error("total steps must be >= 0");
    if (!(cfg.peak_lr >= 0.0))
        throw config_error("peak learning rate must be >= 0");
}

struct PretrainConfig {
    int batch_size = 32;
    double peak_lr = 1e-3;
    double warmup_fraction = 0.10;
    int total_steps = 500;
    std::uint64_t seed = 0;
    double mask_prob = 0.15;
};

struct EvalSnapshot {
    int step = 0;
    double value = 0.0;
};

struct PhaseOutput {
    std::vector<double> loss_trajectory;  // one entry per training step
    std::vector<EvalSnapshot> snapshots;
};

/// Linear warmup from zero to the peak over the first `warmup_fraction` of
/// the run, then linear decay back to zero at `total_steps`. Continuous and
/// piecewise linear; update k consumes lr_at(k + 1).
inline double lr_at(int step, const TrainConfig& cfg) {
    if (step < 0 || step > cfg.total_steps)
        throw config_error("schedule step outside [0, total_steps]");
    if (cfg.total_steps == 0) return 0.0;
    double total = static_cast<double>(cfg.total_steps);
    double warm = cfg.warmup_fraction * total;
    double s = static_cast<double>(step);
    if (warm > 0.0 && s <= warm) return cfg.peak_lr * s / warm;
    return cfg.peak_lr * (total - s) / (total - warm);
}

/// Adam over a fixed parameter list. Moments accumulate in double so update
/// order never depends on the worker count. A parameter whose gradient
/// buffer is empty counts as an exact zero gradient.
template <typename S>
class Adam {
public:
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    explicit Adam(std::vector<Tensor<S>*> params) : params_(std::move(params)) {
        slots_.resize(params_.size());
        for (std::size_t i = 0; i < params_.size(); ++i) {
            slots_[i].m.assign(params_[i]->numel(), 0.0);
            slots_[i].v.assign(params_[i]->numel(), 0.0);
        }
    }

    int steps_taken() const { return t_; }

    void step(double lr) {
        ++t_;
        double bc1 = 1.0 - std::pow(beta1, t_);
        double bc2 = 1.0 - std::pow(beta2, t_);
        for (std::size_t p = 0; p < params_.size(); ++p) {
            Tensor<S>& w = *params_[p];
            auto& sl = slots_[p];
            const auto& g = w.grad();
            if (!g.empty() && g.size() != w.numel())
                throw contract_error("gradient shaped unlike its parameter");
            for (std::size_t i = 0; i < w.numel(); ++i) {
                double gi = g.empty() ? 0.0 : static_cast<double>(g[i]);
                sl.m[i] = beta1 * sl.m[i] + (1.0 - beta1) * gi;
                sl.v[i] = beta2 * sl.v[i] + (1.0 - beta2) * gi * gi;
                w.data()[i] -= static_cast<S>(
                    lr * (sl.m[i] / bc1) / (std::sqrt(sl.v[i] / bc2) + eps));
            }
        }
    }

    void zero_grad() {
        for (auto* p : params_) p->zero_grad();
    }

private:
    struct Slot {
        std::vector<double> m, v;
    };
    std::vector<Tensor<S>*> params_;
    std::vector<Slot> slots_;
    int t_ = 0;
};

/// Query-side input tokens for one tower: optional oracle augmentation
/// (appending tokens drawn from the query's true mixture, capped so the
/// tower's prompt still fits), then the tower's own prompt prefix.
template <typename S>
std::vector<int> query_input(const Encoder<S>& enc, const CorpusItem& query,
                             FeatureChannel features, const TopicModel* model) {
    if (features == FeatureChannel::oracle) {
        int room = enc.cfg.max_seq_len -
                   static_cast<int>(enc.cfg.prompt_prefix.size()) -
                   static_cast<int>(query.tokens.size());
        int aug = std::min(2 * static_cast<int>(query.tokens.size()),
                           std::max(0, room));
        return enc.apply_prompt(oracle_features(*model, query, aug));
    }
    return enc.apply_prompt(query.tokens);
}

namespace detail {

inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed,
                                            std::uint64_t epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto rng = CounterRng::stream(seed, rng_tag::shuffle, epoch);
    for (std::size_t i = n; i > 1; --i)
        std::swap(order[i - 1], order[rng.next_u64() % i]);
    return order;
}

/// Deterministic batch source: one shuffle per epoch, full batches only
/// (a trailing remainder smaller than the batch is dropped).
class BatchCursor {
public:
    BatchCursor(std::size_t n, int batch, std::uint64_t seed)
        : n_(n), batch_(static_cast<std::size_t>(batch)), seed_(seed) {
        if (batch_ > n_)
            throw data_error("batch size " + std::to_string(batch_) +
                             " exceeds the dataset size " + std::to_string(n_));
        order_ = epoch_order(n_, seed_, epoch_);
    }

    std::vector<std::size_t> next() {
        if (pos_ + batch_ > n_) {
            order_ = epoch_order(n_, seed_, ++epoch_);
            pos_ = 0;
        }
        std::vector<std::size_t> out(order_.begin() + static_cast<std::ptrdiff_t>(pos_),
                                     order_.begin() +
                                         static_cast<std::ptrdiff_t>(pos_ + batch_));
        pos_ += batch_;
        return out;
    }

private:
    std::size_t n_, batch_;
    std::uint64_t seed_;
    std::uint64_t epoch_ = 0;
    std::size_t pos_ = 0;
    std::vector<std::size_t> order_;
};

/// Summed cross-entropy of tied-embedding token logits at the rows whose
/// target is >= 0 (targets of -1 are unmasked context). Logits, the shifted
/// softmax, and the loss accumulate in double; gradients flow to both the
/// hidden states and the embedding table.
template <typename S>
Tensor<S> masked_token_ce(const Tensor<S>& hidden, const Tensor<S>& embed,
                          const std::vector<int>& targets) {
    if (hidden.rank() != 2 || embed.rank() != 2)
        throw dimension_error("masked CE expects rank-2 hidden states and table");
    if (hidden.dim(1) != embed.dim(1))
        throw dimension_error("hidden width does not match embedding width");
    if (static_cast<int>(targets.size()) != hidden.dim(0))
        throw dimension_error("one target per hidden row required");
    const int vocab = embed.dim(0), width = hidden.dim(1);

    std::vector<int> rows;
    for (int t = 0; t < hidden.dim(0); ++t)
        if (targets[static_cast<std::size_t>(t)] >= 0) {
            if (targets[static_cast<std::size_t>(t)] >= vocab)
                throw data_error("target token outside the vocabulary");
            rows.push_back(t);
        }

    double loss_sum = 0.0;
    std::vector<double> coeff;  // per masked row: softmax - onehot(target)
    coeff.reserve(rows.size() * static_cast<std::size_t>(vocab));
    std::vector<double> logits(static_cast<std::size_t>(vocab));
    for (int t : rows) {
        const S* h = hidden.data() + static_cast<std::size_t>(t) * width;
        double mx = -std::numeric_limits<double>::infinity();
        for (int v = 0; v < vocab; ++v) {
            const S* e = embed.data() + static_cast<std::size_t>(v) * width;
            double s = 0.0;
            for (int c = 0; c < width; ++c)
                s += static_cast<double>(e[c]) * static_cast<double>(h[c]);
            logits[static_cast<std::size_t>(v)] = s;
            mx = std::max(mx, s);
        }
        double denom = 0.0;
        for (int v = 0; v < vocab; ++v)
            denom += std::exp(logits[static_cast<std::size_t>(v)] - mx);
        int want = targets[static_cast<std::size_t>(t)];
        loss_sum += std::log(denom) + mx - logits[static_cast<std::size_t>(want)];
        for (int v = 0; v < vocab; ++v)
            coeff.push_back(std::exp(logits[static_cast<std::size_t>(v)] - mx) / denom -
                            (v == want ? 1.0 : 0.0));
    }

    Tensor<S> out = Tensor<S>::scalar(static_cast<S>(loss_sum));
    if (!rows.empty() && detail::track<S>({&hidden, &embed})) {
        out.set_requires_grad(true);
        auto hn = hidden.node();
        auto en = embed.node();
        auto on = out.node();
        detail::record<S>([hn, en, on, rows = std::move(rows),
                           coeff = std::move(coeff), vocab, width] {
            if (on->grad.empty()) return;
            const S up = on->grad[0];
            const bool gh = hn->requires_grad, ge = en->requires_grad;
            if (!gh && !ge) return;
            if (gh) hn->ensure_grad();
            if (ge) en->ensure_grad();
            for (std::size_t r = 0; r < rows.size(); ++r) {
                const std::size_t t = static_cast<std::size_t>(rows[r]);
                const double* cf = coeff.data() + r * static_cast<std::size_t>(vocab);
                for (int v = 0; v < vocab; ++v) {
                    const S w = up * static_cast<S>(cf[v]);
                    const std::size_t vo = static_cast<std::size_t>(v) * width;
                    if (gh)
                        for (int c = 0; c < width; ++c)
                            hn->grad[t * width + c] += w * en->data[vo + c];
                    if (ge)
                        for (int c = 0; c < width; ++c)
                            en->grad[vo + c] += w * hn->data[t * width + c];
                }
            }
        });
    }
    return out;
}

inline void check_pair_ids(const SyntheticCorpus& corpus,
                           const std::vector<SupervisedPair>& pairs) {
    auto ok_query = [&](int id) {
        return id >= 0 && id < static_cast<int>(corpus.queries.size()) &&
               corpus.queries[static_cast<std::size_t>(id)].id == id;
    };
    auto ok_doc = [&](int id) {
        return id >= 0 && id < static_cast<int>(corpus.documents.size()) &&
               corpus.documents[static_cast<std::size_t>(id)].id == id;
    };
    for (const auto& p : pairs) {
        if (!ok_query(p.query_id) || !ok_doc(p.positive_id))
            throw data_error("supervised pair references a missing corpus item");
        for (int h : p.hard_negative_ids)
            if (!ok_doc(h))
                throw data_error("supervised pair references a missing corpus item");
    }
}

template <typename S>
Tensor<S> contrastive_loss(const Tensor<S>& q, const Tensor<S>& d,
                           const Tensor<S>* hard, const std::vector<int>* offsets,
                           const TrainConfig& cfg) {
    switch (cfg.loss) {
        case LossKind::info_nce:
            return info_nce_loss(q, d, cfg.cl.temperature);
        case LossKind::qwen_cl:
            if (hard != nullptr) return qwen_cl_loss(q, d, *hard, *offsets, cfg.cl);
            return qwen_cl_loss(q, d, cfg.cl);
    }
    throw config_error("unknown loss kind");
}

/// Embeds every listed document once, concurrently, into an id-keyed cache.
template <typename S>
struct DocCache {
    Tensor<S> rows;  // [n x d]
    std::unordered_map<int, std::size_t> slot;

    Tensor<S> gather(const std::vector<int>& ids) const {
        const int d = rows.dim(1);
        Tensor<S> out = Tensor<S>::zeros({static_cast<int>(ids.size()), d});
        for (std::size_t i = 0; i < ids.size(); ++i) {
            std::size_t s = slot.at(ids[i]);
            std::copy_n(rows.data() + s * static_cast<std::size_t>(d), d,
                        out.data() + i * static_cast<std::size_t>(d));
        }
        return out;
    }
};

template <typename S>
DocCache<S> build_doc_cache(const Encoder<S>& doc_enc,
                            const std::vector<CorpusItem>& documents,
                            const std::vector<int>& ids) {
    DocCache<S> cache;
    cache.rows = Tensor<S>::zeros({static_cast<int>(ids.size()), doc_enc.cfg.embed_dim});
    std::vector<std::exception_ptr> failures(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) cache.slot.emplace(ids[i], i);
    parallel_for(ids.size(), [&](std::size_t i) {
        try {
            const auto& doc = documents[static_cast<std::size_t>(ids[i])];
            auto emb = doc_enc.embed(doc_enc.apply_prompt(doc.tokens));
            std::copy_n(emb.data(), static_cast<std::size_t>(doc_enc.cfg.embed_dim),
                        cache.rows.data() +
                            i * static_cast<std::size_t>(doc_enc.cfg.embed_dim));
        } catch (...) {
            failures[i] = std::current_exception();
        }
    });
    for (const auto& f : failures)
        if (f) std::rethrow_exception(f);
    return cache;
}

inline void maybe_snapshot(PhaseOutput& out, const TrainConfig& cfg, int step,
                           const std::function<double()>& probe) {
    if (probe && cfg.snapshot_every > 0 && (step + 1) % cfg.snapshot_every == 0)
        out.snapshots.push_back({step + 1, probe()});
}

/// Joint dual-encoder contrastive training: the shared engine behind the
/// teacher phase and the one-shot asymmetric baseline.
template <typename S>
PhaseOutput train_dual(Encoder<S>& query_enc, Encoder<S>& doc_enc,
                       const SyntheticCorpus& corpus,
                       const std::vector<SupervisedPair>& pairs,
                       const TrainConfig& cfg, TrainMode mode,
                       FeatureChannel features, const TopicModel* oracle_model,
                       const std::function<double()>& probe) {
    validate_train(cfg);
    if (query_enc.cfg.embed_dim != doc_enc.cfg.embed_dim)
        throw config_error("towers disagree on embed_dim");
    if (features == FeatureChannel::oracle && oracle_model == nullptr)
        throw config_error("oracle features need the topic model");
    if (pairs.empty()) throw data_error("no supervised pairs to train on");
    check_pair_ids(corpus, pairs);

    std::vector<Tensor<S>*> params;
    if (mode == TrainMode::lora) {
        if (cfg.lora_rank < 1) throw config_error("LoRA rank must be positive");
        if (!query_enc.lora.empty() || !doc_enc.lora.empty())
            throw contract_error("a tower already carries adapters");
        if (!cfg.freeze_query) {
            attach_lora(query_enc, cfg.lora_rank, mix64(cfg.seed ^ 0x10aaull));
            query_enc.set_lora_trainable(true);
            auto qs = query_enc.lora_parameters();
            params.insert(params.end(), qs.begin(), qs.end());
        }
        if (!cfg.freeze_doc) {
            attach_lora(doc_enc, cfg.lora_rank, mix64(cfg.seed ^ 0x10abull));
            doc_enc.set_lora_trainable(true);
            auto ds = doc_enc.lora_parameters();
            params.insert(params.end(), ds.begin(), ds.end());
        }
    } else {
        if (!cfg.freeze_query) {
            query_enc.set_trainable(true);
            auto qs = query_enc.parameters();
            params.insert(params.end(), qs.begin(), qs.end());
        }
        if (!cfg.freeze_doc) {
            doc_enc.set_trainable(true);
            auto ds = doc_enc.parameters();
            params.insert(params.end(), ds.begin(), ds.end());
        }
    }
    if (cfg.total_steps > 0 && params.empty())
        throw config_error("both towers frozen: nothing to train");

    PhaseOutput out;
    Adam<S> opt(params);
    if (cfg.total_steps > 0) {
        BatchCursor cursor(pairs.size(), cfg.batch_size, cfg.seed);
        for (int step = 0; step < cfg.total_steps; ++step) {
            auto batch = cursor.next();
            Tape<S> tape;
            {
                typename Tape<S>::Scope scope(tape);
                std::vector<Tensor<S>> q_rows, d_rows, hard_rows;
                std::vector<int> offsets{0};
                for (std::size_t b : batch) {
                    const auto& pair = pairs[b];
                    const auto& query =
                        corpus.queries[static_cast<std::size_t>(pair.query_id)];
                    q_rows.push_back(query_enc.embed(
                        query_input(query_enc, query, features, oracle_model)));
                    const auto& pos =
                        corpus.documents[static_cast<std::size_t>(pair.positive_id)];
                    d_rows.push_back(doc_enc.embed(doc_enc.apply_prompt(pos.tokens)));
                    if (cfg.loss == LossKind::qwen_cl)
                        for (int h : pair.hard_negative_ids) {
                            const auto& neg =
                                corpus.documents[static_cast<std::size_t>(h)];
                            hard_rows.push_back(
                                doc_enc.embed(doc_enc.apply_prompt(neg.tokens)));
                        }
                    offsets.push_back(static_cast<int>(hard_rows.size()));
                }
                Tensor<S> q = stack_rows(q_rows);
                Tensor<S> d = stack_rows(d_rows);
                Tensor<S> loss;
                if (!hard_rows.empty() && cfg.loss == LossKind::qwen_cl) {
                    Tensor<S> hard = stack_rows(hard_rows);
                    loss = contrastive_loss(q, d, &hard, &offsets, cfg);
                } else {
                    loss = contrastive_loss<S>(q, d, nullptr, nullptr, cfg);
                }
                tape.backward(loss);
                out.loss_trajectory.push_back(static_cast<double>(loss.item()));
            }
            opt.step(lr_at(step + 1, cfg));
            opt.zero_grad();
            maybe_snapshot(out, cfg, step, probe);
        }
    }

    if (mode == TrainMode::lora) {
        if (!cfg.freeze_query) {
            merge_lora(query_enc.w, query_enc.lora);
            query_enc.lora.clear();
        }
        if (!cfg.freeze_doc) {
            merge_lora(doc_enc.w, doc_enc.lora);
            doc_enc.lora.clear();
        }
    }
    query_enc.set_trainable(false);
    doc_enc.set_trainable(false);
    return out;
}

}  // namespace detail

/// Phase 1: joint contrastive training of the teacher dual encoder on mined
/// pairs. Oracle mode routes query inputs through the feature channel.
template <typename S>
PhaseOutput train_teacher(Encoder<S>& teacher_q, Encoder<S>& teacher_d,
                          const SyntheticCorpus& corpus,
                          const std::vector<SupervisedPair>& pairs,
                          const TrainConfig& cfg,
                          TrainMode mode = TrainMode::full,
                          FeatureChannel features = FeatureChannel::deployable,
                          const TopicModel* oracle_model = nullptr,
                          const std::function<double()>& probe = {}) {
    return detail::train_dual(teacher_q, teacher_d, corpus, pairs, cfg, mode,
                              features, oracle_model, probe);
}

/// Baseline: both towers trained jointly from fresh initialization with the
/// contrastive objective — no alignment, no refinement.
template <typename S>
PhaseOutput one_shot_asymmetric(const EncoderConfig& query_cfg,
                                const EncoderConfig& doc_cfg,
                                const SyntheticCorpus& corpus,
                                const std::vector<SupervisedPair>& pairs,
                                const TrainConfig& cfg, Encoder<S>& out_query,
                                Encoder<S>& out_doc,
                                const std::function<double()>& probe = {}) {
    out_query = Encoder<S>::init(query_cfg, mix64(cfg.seed ^ 0x0a51d3a1ull));
    out_doc = Encoder<S>::init(doc_cfg, mix64(cfg.seed ^ 0x0a51d3a2ull));
    return detail::train_dual(out_query, out_doc, corpus, pairs, cfg,
                              TrainMode::full, FeatureChannel::deployable,
                              nullptr, probe);
}

/// Masked-token warm-up on the alignment corpus: every selected position is
/// replaced by a uniformly random token and predicted back through the tied
/// embedding table. Stands in for a pretrained starting checkpoint.
template <typename S>
PhaseOutput pretrain_student(Encoder<S>& student, const AlignmentCorpus& corpus,
                             const PretrainConfig& cfg) {
    if (cfg.batch_size < 1) throw config_error("batch size must be >= 1");
    if (cfg.total_steps < 0) throw config_error("total steps must be >= 0");
    if (!(cfg.mask_prob > 0.0 && cfg.mask_prob <= 1.0))
        throw config_error("mask probability must lie in (0, 1]");
    if (corpus.items.empty()) throw data_error("empty pretraining corpus");

    TrainConfig sched;
    sched.peak_lr = cfg.peak_lr;
    sched.warmup_fraction = cfg.warmup_fraction;
    sched.total_steps = cfg.total_steps;
    validate_train(sched);

    PhaseOutput out;
    if (cfg.total_steps == 0) return out;

    student.set_trainable(true);
    Adam<S> opt(student.parameters());
    detail::BatchCursor cursor(corpus.items.size(), cfg.batch_size, cfg.seed);
    const int vocab = student.cfg.vocab_size;
    const std::size_t max_len = static_cast<std::size_t>(student.cfg.max_seq_len);

    for (int step = 0; step < cfg.total_steps; ++step) {
        auto batch = cursor.next();
        auto rng = CounterRng::stream(cfg.seed, rng_tag::mask,
                                      static_cast<std::uint64_t>(step));
        Tape<S> tape;
        {
            typename Tape<S>::Scope scope(tape);
            Tensor<S> total = Tensor<S>::scalar(S(0));
            int masked = 0;
            for (std::size_t b : batch) {
                auto tokens = corpus.items[b].tokens;
                if (tokens.size() > max_len) tokens.resize(max_len);
                std::vector<int> targets(tokens.size(), -1);
                for (std::size_t t = 0; t < tokens.size(); ++t)
                    if (rng.uniform01() < cfg.mask_prob) {
                        targets[t] = tokens[t];
                        tokens[t] = static_cast<int>(rng.next_u64() %
                                                     static_cast<std::uint64_t>(vocab));
                    }
                if (std::count_if(targets.begin(), targets.end(),
                                  [](int t) { return t >= 0; }) == 0) {
                    std::size_t t = rng.next_u64() % tokens.size();
                    targets[t] = tokens[t];
                    tokens[t] = static_cast<int>(rng.next_u64() %
                                                 static_cast<std::uint64_t>(vocab));
                }
                auto fr = student.forward(tokens);
                total = add(total, detail::masked_token_ce(fr.trace.boundaries.back(),
                                                           student.w.embed_tokens,
                                                           targets));
                masked += static_cast<int>(std::count_if(
                    targets.begin(), targets.end(), [](int t) { return t >= 0; }));
            }
            Tensor<S> loss = scale(total, static_cast<S>(1.0 / masked));
            tape.backward(loss);
            out.loss_trajectory.push_back(static_cast<double>(loss.item()));
        }
        opt.step(lr_at(step + 1, sched));
        opt.zero_grad();
    }
    student.set_trainable(false);
    return out;
}

/// Backbone warm-up for a dual encoder: one masked-token pass over shared
/// text trains the document tower, whose weights are then copied into the
/// query tower. Both towers start from the same point, standing in for
/// initializing a dual encoder from a single pretrained backbone — which is
/// what makes score-relative false-negative masking meaningful from step 0.
template <typename S>
PhaseOutput warm_dual_towers(Encoder<S>& query_enc, Encoder<S>& doc_enc,
                             const AlignmentCorpus& text,
                             const PretrainConfig& cfg) {
    if (query_enc.cfg.hidden_dim != doc_enc.cfg.hidden_dim ||
        query_enc.cfg.n_layers != doc_enc.cfg.n_layers ||
        query_enc.cfg.ffn_dim != doc_enc.cfg.ffn_dim ||
        query_enc.cfg.vocab_size != doc_enc.cfg.vocab_size ||
        query_enc.cfg.embed_dim != doc_enc.cfg.embed_dim)
        throw config_error("towers must share an architecture to share a warm start");
    auto out = pretrain_student(doc_enc, text, cfg);
    std::map<std::string, const Tensor<S>*> named;
    visit_named<S>(doc_enc.w, [&](const std::string& n, Tensor<S>& t) {
        named.emplace(n, &t);
    });
    visit_named<S>(query_enc.w, [&](const std::string& n, Tensor<S>& t) {
        const auto& src = *named.at(n);
        t = Tensor<S>::from(src.vec(), src.shape());
    });
    return out;
}

/// Phase 2: minimize the summed squared distance between student and frozen
/// teacher query embeddings over the unlabeled corpus. Teacher embeddings
/// are precomputed once; the student sees raw tokens (no prompt).
template <typename S>
PhaseOutput align_student(Encoder<S>& student, const Encoder<S>& teacher_q,
                          const AlignmentCorpus& corpus, const TrainConfig& cfg,
                          const std::function<double()>& probe = {}) {
    validate_train(cfg);
    if (student.cfg.embed_dim != teacher_q.cfg.embed_dim)
        throw config_error("student and teacher disagree on embed_dim");
    if (corpus.items.empty()) throw data_error("empty alignment corpus");

    PhaseOutput out;
    if (cfg.total_steps == 0) return out;

    const int d = teacher_q.cfg.embed_dim;
    const std::size_t n = corpus.items.size();
    Tensor<S> teacher_rows = Tensor<S>::zeros({static_cast<int>(n), d});
    std::vector<std::exception_ptr> failures(n);
    parallel_for(n, [&](std::size_t i) {
        try {
            auto emb =
                teacher_q.embed(teacher_q.apply_prompt(corpus.items[i].tokens));
            std::copy_n(emb.data(), static_cast<std::size_t>(d),
                        teacher_rows.data() + i * static_cast<std::size_t>(d));
        } catch (...) {
            failures[i] = std::current_exception();
        }
    });
    for (const auto& f : failures)
        if (f) std::rethrow_exception(f);

    student.set_trainable(true);
    Adam<S> opt(student.parameters());
    detail::BatchCursor cursor(n, cfg.batch_size, cfg.seed);
    for (int step = 0; step < cfg.total_steps; ++step) {
        auto batch = cursor.next();
        Tape<S> tape;
        {
            typename Tape<S>::Scope scope(tape);
            std::vector<Tensor<S>> rows;
            Tensor<S> target = Tensor<S>::zeros({cfg.batch_size, d});
            for (std::size_t i = 0; i < batch.size(); ++i) {
                rows.push_back(student.embed(corpus.items[batch[i]].tokens));
                std::copy_n(teacher_rows.data() +
                                batch[i] * static_cast<std::size_t>(d),
                            static_cast<std::size_t>(d),
                            target.data() + i * static_cast<std::size_t>(d));
            }
            Tensor<S> loss = l2_align_loss(stack_rows(rows), target);
            tape.backward(loss);
            out.loss_trajectory.push_back(static_cast<double>(loss.item()) /
                                          cfg.batch_size);
        }
        opt.step(lr_at(step + 1, cfg));
        opt.zero_grad();
        detail::maybe_snapshot(out, cfg, step, probe);
    }
    student.set_trainable(false);
    return out;
}

/// Phase 3: contrastive refinement of the student query encoder against a
/// frozen document tower. Document (and hard-negative) embeddings come from
/// a cache built once up front, so no gradient can reach the document side;
/// a checksum guards the freeze contract end to end.
template <typename S>
PhaseOutput contrastive_refine(Encoder<S>& student_q, const Encoder<S>& frozen_doc,
                               const SyntheticCorpus& corpus,
                               const std::vector<SupervisedPair>& pairs,
                               const TrainConfig& cfg,
                               const std::function<double()>& probe = {}) {
    validate_train(cfg);
    if (student_q.cfg.embed_dim != frozen_doc.cfg.embed_dim)
        throw config_error("student and document tower disagree on embed_dim");
    if (pairs.empty()) throw data_error("no supervised pairs to refine on");
    detail::check_pair_ids(corpus, pairs);
    const std::uint64_t doc_sum_before = frozen_doc.weight_checksum();

    PhaseOutput out;
    if (cfg.total_steps > 0) {
        std::unordered_set<int> used;
        for (const auto& p : pairs) {
            used.insert(p.positive_id);
            used.insert(p.hard_negative_ids.begin(), p.hard_negative_ids.end());
        }
        std::vector<int> ids(used.begin(), used.end());
        std::sort(ids.begin(), ids.end());
        auto cache = detail::build_doc_cache(frozen_doc, corpus.documents, ids);

        student_q.set_trainable(true);
        Adam<S> opt(student_q.parameters());
        detail::BatchCursor cursor(pairs.size(), cfg.batch_size, cfg.seed);
        for (int step = 0; step < cfg.total_steps; ++step) {
            auto batch = cursor.next();
            Tape<S> tape;
            {
                typename Tape<S>::Scope scope(tape);
                std::vector<Tensor<S>> q_rows;
                std::vector<int> pos_ids, hard_ids, offsets{0};
                for (std::size_t b : batch) {
                    const auto& pair = pairs[b];
                    q_rows.push_back(student_q.embed(
                        corpus.queries[static_cast<std::size_t>(pair.query_id)]
                            .tokens));
                    pos_ids.push_back(pair.positive_id);
                    hard_ids.insert(hard_ids.end(), pair.hard_negative_ids.begin(),
                                    pair.hard_negative_ids.end());
                    offsets.push_back(static_cast<int>(hard_ids.size()));
                }
                Tensor<S> q = stack_rows(q_rows);
                Tensor<S> d = cache.gather(pos_ids);
                Tensor<S> loss;
                if (!hard_ids.empty() && cfg.loss == LossKind::qwen_cl) {
                    Tensor<S> hard = cache.gather(hard_ids);
                    loss = detail::contrastive_loss(q, d, &hard, &offsets, cfg);
                } else {
                    loss = detail::contrastive_loss<S>(q, d, nullptr, nullptr, cfg);
                }
                tape.backward(loss);
                out.loss_trajectory.push_back(static_cast<double>(loss.item()));
            }
            opt.step(lr_at(step + 1, cfg));
            opt.zero_grad();
            detail::maybe_snapshot(out, cfg, step, probe);
        }
        student_q.set_trainable(false);
    }

    if (frozen_doc.weight_checksum() != doc_sum_before)
        throw contract_error("frozen document tower changed during refinement");
    return out;
}

/// Per-stage record of the progressive prune-and-align loop.
struct StageReport {
    PruneTarget target{};
    double final_align_loss = std::numeric_limits<double>::quiet_NaN();
    double quality = std::numeric_limits<double>::quiet_NaN();
};

/// Alternates structured pruning with re-alignment: for each schedule stage,
/// calibrate importances, prune to the stage target, then re-align the
/// shrunken student to the frozen teacher for the stage budget. An empty
/// schedule returns the student unchanged.
template <typename S>
std::vector<StageReport> progressive_prune_align(
    Encoder<S>& student, const Encoder<S>& teacher_q,
    const AlignmentCorpus& corpus, const PruneSchedule& schedule,
    const TrainConfig& align_budget,
    const std::function<double(const Encoder<S>&)>& quality_probe = {},
    int calibration_items = 512, LayerRankMode mode = LayerRankMode::score) {
    validate_schedule(schedule, student.cfg.n_layers, student.cfg.ffn_dim);
    std::vector<StageReport> reports;
    if (schedule.stages.empty()) return reports;
    if (calibration_items < 1)
        throw config_error("calibration needs at least one item");
    if (corpus.items.empty()) throw data_error("empty alignment corpus");

    CalibrationCorpus calib;
    const std::size_t take =
        std::min<std::size_t>(corpus.items.size(),
                              static_cast<std::size_t>(calibration_items));
    for (std::size_t i = 0; i < take; ++i) calib.push_back(corpus.items[i].tokens);

    for (const auto& target : schedule.stages) {
        auto scores = compute_importance(student, calib, target, mode);
        student = prune(student, target, scores);
        auto phase = align_student(student, teacher_q, corpus, align_budget);
        StageReport r;
        r.target = target;
        if (!phase.loss_trajectory.empty())
            r.final_align_loss = phase.loss_trajectory.back();
        if (quality_probe) r.quality = quality_probe(student);
        reports.push_back(r);
    }
    return reports;
}

/// Fixed column order: step,lr,loss — one row per training step.
inline void write_loss_log(std::ostream& os, const PhaseOutput& out,
                           const TrainConfig& cfg) {
    os << "step,lr,loss\n";
    for (std::size_t i = 0; i < out.loss_trajectory.size(); ++i)
        os << i << ',' << lr_at(static_cast<int>(i) + 1, cfg) << ','
           << out.loss_trajectory[i] << '\n';
}

}  // namespace hlm
