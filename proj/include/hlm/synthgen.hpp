#pragma once

// Synthetic retrieval world: a seeded topic model emits token sequences for
// documents and queries, each carrying a latent sparse topic mixture that is
// hidden from the encoders but visible to the relevance oracle. The oracle
// (cosine of latent mixtures) replaces a learned relevance model, which makes
// positives/hard-negative bands and P@K ground truth exactly recomputable.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "hlm/common.hpp"

namespace hlm {

struct TopicModel {
    int n_topics = 16;
    int vocab_size = 512;
    int topic_mix_sparsity = 2;   // active topics per item
    double concentration = 8.0;   // token-distribution peakedness exponent
    std::uint64_t seed = 0;
    std::vector<std::vector<double>> topic_token_dist;  // [topic][vocab], sums to 1
    std::vector<std::vector<double>> topic_token_cdf;
};

/// Topic-token distributions are normalized powers of uniform draws: the
/// concentration exponent controls how peaked each topic is.
inline TopicModel make_topic_model(int n_topics, int vocab_size, int sparsity,
                                   std::uint64_t seed,
                                   double concentration = 8.0) {
    if (n_topics < 1) throw config_error("n_topics must be at least 1");
    if (vocab_size < 2) throw config_error("vocab_size must be at least 2");
    if (sparsity < 1 || sparsity > n_topics)
        throw config_error("topic_mix_sparsity must be in [1, n_topics]");
    TopicModel m;
    m.n_topics = n_topics;
    m.vocab_size = vocab_size;
    m.topic_mix_sparsity = sparsity;
    m.concentration = concentration;
    m.seed = seed;
    m.topic_token_dist.resize(static_cast<std::size_t>(n_topics));
    m.topic_token_cdf.resize(static_cast<std::size_t>(n_topics));
    for (int t = 0; t < n_topics; ++t) {
        auto rng = CounterRng::stream(seed, rng_tag::topic, static_cast<std::uint64_t>(t));
        auto& dist = m.topic_token_dist[static_cast<std::size_t>(t)];
        dist.resize(static_cast<std::size_t>(vocab_size));
        double total = 0.0;
        for (int v = 0; v < vocab_size; ++v) {
            double u = rng.uniform01();
            dist[static_cast<std::size_t>(v)] = std::pow(u + 1e-12, concentration);
            total += dist[static_cast<std::size_t>(v)];
        }
        auto& cdf = m.topic_token_cdf[static_cast<std::size_t>(t)];
        cdf.resize(static_cast<std::size_t>(vocab_size));
        double acc = 0.0;
        for (int v = 0; v < vocab_size; ++v) {
            dist[static_cast<std::size_t>(v)] /= total;
            acc += dist[static_cast<std::size_t>(v)];
            cdf[static_cast<std::size_t>(v)] = acc;
        }
        cdf.back() = 1.0;
    }
    return m;
}

struct CorpusItem {
    int id = 0;
    std::vector<int> tokens;
    std::vector<double> mixture;  // latent, oracle-only
};

struct SyntheticCorpus {
    std::vector<CorpusItem> documents;
    std::vector<CorpusItem> queries;
};

struct SupervisedPair {
    int query_id = 0;
    int positive_id = 0;
    std::vector<int> hard_negative_ids;
};

struct AlignmentItem {
    std::vector<int> tokens;
    bool general = false;  // drawn from the disjoint-topic distribution
};

struct AlignmentCorpus {
    std::vector<AlignmentItem> items;
};

namespace detail {

inline int sample_cdf(const std::vector<double>& cdf, double u) {
    auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
    if (it == cdf.end()) --it;
    return static_cast<int>(it - cdf.begin());
}

inline std::vector<double> sample_mixture(const TopicModel& m, CounterRng& rng) {
    std::vector<int> topics(static_cast<std::size_t>(m.n_topics));
    for (int t = 0; t < m.n_topics; ++t) topics[static_cast<std::size_t>(t)] = t;
    // Partial Fisher-Yates: first `sparsity` entries become the active set.
    for (int i = 0; i < m.topic_mix_sparsity; ++i) {
        auto j = i + static_cast<int>(rng.below(
                         static_cast<std::uint64_t>(m.n_topics - i)));
        std::swap(topics[static_cast<std::size_t>(i)], topics[static_cast<std::size_t>(j)]);
    }
    std::vector<double> mix(static_cast<std::size_t>(m.n_topics), 0.0);
    double total = 0.0;
    for (int i = 0; i < m.topic_mix_sparsity; ++i) {
        // weights bounded away from zero so every active topic matters
        double w = 0.2 + 0.8 * rng.uniform01();
        mix[static_cast<std::size_t>(topics[static_cast<std::size_t>(i)])] = w;
        total += w;
    }
    for (auto& v : mix) v /= total;
    return mix;
}

inline std::vector<int> sample_tokens(const TopicModel& m,
                                      const std::vector<double>& mixture,
                                      int len, CounterRng& rng) {
    std::vector<double> mix_cdf(mixture.size());
    double acc = 0.0;
    for (std::size_t t = 0; t < mixture.size(); ++t) {
        acc += mixture[t];
        mix_cdf[t] = acc;
    }
    mix_cdf.back() = std::max(mix_cdf.back(), 1.0);
    std::vector<int> toks(static_cast<std::size_t>(len));
    for (int i = 0; i < len; ++i) {
        int topic = sample_cdf(mix_cdf, rng.uniform01());
        toks[static_cast<std::size_t>(i)] = sample_cdf(
            m.topic_token_cdf[static_cast<std::size_t>(topic)], rng.uniform01());
    }
    return toks;
}

}  // namespace detail

/// Deterministic in (model, counts): every item derives its own RNG stream
/// from (seed, kind, index), so generation order is irrelevant.
inline SyntheticCorpus generate(const TopicModel& model, int n_docs,
                                int n_queries, int doc_len, int query_len) {
    if (n_docs < 1 || n_queries < 1)
        throw config_error("corpus needs at least one document and one query");
    if (doc_len < 1 || query_len < 1)
        throw config_error("item lengths must be positive");
    SyntheticCorpus c;
    c.documents.resize(static_cast<std::size_t>(n_docs));
    c.queries.resize(static_cast<std::size_t>(n_queries));
    parallel_for(static_cast<std::size_t>(n_docs), [&](std::size_t i) {
        auto rng = CounterRng::stream(model.seed, rng_tag::doc, i);
        auto& item = c.documents[i];
        item.id = static_cast<int>(i);
        item.mixture = detail::sample_mixture(model, rng);
        item.tokens = detail::sample_tokens(model, item.mixture, doc_len, rng);
    });
    parallel_for(static_cast<std::size_t>(n_queries), [&](std::size_t i) {
        auto rng = CounterRng::stream(model.seed, rng_tag::query, i);
        auto& item = c.queries[i];
        item.id = static_cast<int>(i);
        item.mixture = detail::sample_mixture(model, rng);
        item.tokens = detail::sample_tokens(model, item.mixture, query_len, rng);
    });
    return c;
}

/// Oracle relevance: cosine similarity of latent topic mixtures, clamped to
/// [0,1]. Symmetric, deterministic, 1 exactly when mixtures are parallel.
inline double relevance(const std::vector<double>& q_mix,
                        const std::vector<double>& d_mix) {
    if (q_mix.size() != d_mix.size() || q_mix.empty())
        throw dimension_error("mixture dimensions differ");
    double qq = 0, dd = 0, qd = 0;
    for (std::size_t i = 0; i < q_mix.size(); ++i) {
        qq += q_mix[i] * q_mix[i];
        dd += d_mix[i] * d_mix[i];
        qd += q_mix[i] * d_mix[i];
    }
    if (qq <= 0.0 || dd <= 0.0)
        throw numeric_error("mixture with zero mass");
    return std::clamp(qd / std::sqrt(qq * dd), 0.0, 1.0);
}

/// Positive = highest-scoring document above 0.5 (ties to the lower id);
/// hard negatives are a seeded uniform sample without replacement from the
/// (0.2, 0.5] band. Queries with no positive are skipped.
inline std::vector<SupervisedPair> mine_pairs(const SyntheticCorpus& corpus,
                                              int per_query_hard_negs,
                                              std::uint64_t seed) {
    if (corpus.documents.empty() || corpus.queries.empty())
        throw config_error("mine_pairs on an empty corpus");
    if (per_query_hard_negs < 0)
        throw config_error("per_query_hard_negs must be non-negative");
    std::vector<SupervisedPair> slots(corpus.queries.size());
    std::vector<char> has_pos(corpus.queries.size(), 0);
    parallel_for(corpus.queries.size(), [&](std::size_t qi) {
        const auto& q = corpus.queries[qi];
        int best = -1;
        double best_score = 0.5;  // strict threshold for positives
        std::vector<int> band;
        for (const auto& d : corpus.documents) {
            double s = relevance(q.mixture, d.mixture);
            if (s > best_score) {
                best_score = s;
                best = d.id;
            }
            if (s > 0.2 && s <= 0.5) band.push_back(d.id);
        }
        if (best < 0) return;
        has_pos[qi] = 1;
        auto& pair = slots[qi];
        pair.query_id = q.id;
        pair.positive_id = best;
        int take = std::min<int>(per_query_hard_negs,
                                 static_cast<int>(band.size()));
        auto rng = CounterRng::stream(seed, rng_tag::negs,
                                      static_cast<std::uint64_t>(q.id));
        for (int i = 0; i < take; ++i) {
            auto j = i + static_cast<int>(rng.below(
                             static_cast<std::uint64_t>(band.size() - static_cast<std::size_t>(i))));
            std::swap(band[static_cast<std::size_t>(i)], band[static_cast<std::size_t>(j)]);
            pair.hard_negative_ids.push_back(band[static_cast<std::size_t>(i)]);
        }
    });
    std::vector<SupervisedPair> out;
    out.reserve(corpus.queries.size());
    for (std::size_t i = 0; i < slots.size(); ++i)
        if (has_pos[i]) out.push_back(std::move(slots[i]));
    return out;
}

/// Appends tokens drawn from the query's TRUE latent mixture — strictly more
/// informative input than the query itself, standing in for offline
/// expansions. aug_len < 0 selects the default of twice the query length.
inline std::vector<int> oracle_features(const TopicModel& model,
                                        const CorpusItem& item,
                                        int aug_len = -1) {
    if (aug_len < 0) aug_len = 2 * static_cast<int>(item.tokens.size());
    auto out = item.tokens;
    if (aug_len == 0) return out;
    auto rng = CounterRng::stream(model.seed, rng_tag::feats,
                                  static_cast<std::uint64_t>(item.id));
    auto extra = detail::sample_tokens(model, item.mixture, aug_len, rng);
    out.insert(out.end(), extra.begin(), extra.end());
    return out;
}

/// Unlabeled query-like sequences: a deterministic interleave of task-topic
/// items and items from a disjoint "general" topic set (derived seed).
inline AlignmentCorpus alignment_corpus(const TopicModel& model, int n,
                                        double general_fraction,
                                        int query_len) {
    if (n < 0) throw config_error("alignment corpus size must be non-negative");
    if (general_fraction < 0.0 || general_fraction > 1.0)
        throw config_error("general_fraction must lie in [0,1]");
    TopicModel general = make_topic_model(
        model.n_topics, model.vocab_size, model.topic_mix_sparsity,
        mix64(model.seed ^ 0x67656e6572616cull), model.concentration);
    AlignmentCorpus c;
    c.items.resize(static_cast<std::size_t>(n));
    parallel_for(static_cast<std::size_t>(n), [&](std::size_t i) {
        bool is_general =
            static_cast<std::size_t>(static_cast<double>(i + 1) * general_fraction) >
            static_cast<std::size_t>(static_cast<double>(i) * general_fraction);
        const TopicModel& src = is_general ? general : model;
        auto rng = CounterRng::stream(model.seed, rng_tag::align, i);
        auto mix = detail::sample_mixture(src, rng);
        c.items[i].tokens = detail::sample_tokens(src, mix, query_len, rng);
        c.items[i].general = is_general;
    });
    return c;
}

struct OracleStats {
    double positive_rate = 0.0;   // fraction of (q,d) pairs with score > 0.5
    double hard_band_rate = 0.0;  // fraction in (0.2, 0.5]
    std::size_t queries_with_positive = 0;
    std::vector<std::size_t> histogram;  // scores binned over [0,1]
};

inline OracleStats compute_oracle_stats(const SyntheticCorpus& corpus,
                                        int bins = 10) {
    OracleStats s;
    s.histogram.assign(static_cast<std::size_t>(bins), 0);
    std::size_t total = 0, pos = 0, band = 0;
    for (const auto& q : corpus.queries) {
        bool any = false;
        for (const auto& d : corpus.documents) {
            double r = relevance(q.mixture, d.mixture);
            ++total;
            if (r > 0.5) {
                ++pos;
                any = true;
            } else if (r > 0.2) {
                ++band;
            }
            int b = std::min(bins - 1, static_cast<int>(r * bins));
            ++s.histogram[static_cast<std::size_t>(b)];
        }
        if (any) ++s.queries_with_positive;
    }
    s.positive_rate = total ? static_cast<double>(pos) / static_cast<double>(total) : 0.0;
    s.hard_band_rate = total ? static_cast<double>(band) / static_cast<double>(total) : 0.0;
    return s;
}

}  // namespace hlm
