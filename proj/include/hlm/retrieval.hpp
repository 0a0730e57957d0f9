#pragma once

// Exact inner-product retrieval over unit-norm document embeddings, oracle
// precision measurement, and a wall-clock latency / throughput microbenchmark.
// The index is immutable after build, so query evaluation may run fully
// concurrently; the benchmark's latency pass deliberately stays on one thread
// to model a single online query.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <exception>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <unordered_map>
#include <vector>

#include "hlm/common.hpp"
#include "hlm/encoder.hpp"
#include "hlm/synthgen.hpp"
#include "hlm/tensor.hpp"

namespace hlm {

/// Flat exact-search index: one unit-norm embedding row per document.
template <typename S>
struct DocIndex {
    Tensor<S> embeddings;  // [N x d]
    std::vector<int> ids;  // size N, parallel to the rows

    int size() const { return embeddings.rank() == 2 ? embeddings.dim(0) : 0; }
    int dim() const { return embeddings.rank() == 2 ? embeddings.dim(1) : 0; }
};

/// Top-K hits for one query: document ids and inner-product scores, best
/// first. Ties are broken toward the lower document id.
struct RetrievalResult {
    std::vector<int> doc_ids;
    std::vector<double> scores;
};

/// One row of the latency/quality frontier. bench_encoder fills the timing
/// and size fields; callers attach p_at_k before the report is written out.
struct BenchReport {
    std::string label;
    std::size_t params = 0;
    double p50_ms = 0.0;
    double p95_ms = 0.0;
    double qps = 0.0;
    double p_at_k = 0.0;
};

/// Embeds every document once (concurrently; weights are read-only) and
/// stacks the embeddings into a dense index. Deterministic for fixed weights.
template <typename S>
DocIndex<S> build_index(const Encoder<S>& doc_encoder,
                        const std::vector<CorpusItem>& documents,
                        std::optional<int> truncate_dim = std::nullopt) {
    if (documents.empty())
        throw data_error("cannot build an index over an empty corpus");
    if (truncate_dim &&
        (*truncate_dim < 1 || *truncate_dim > doc_encoder.cfg.embed_dim))
        throw config_error("truncate_dim " + std::to_string(*truncate_dim) +
                           " is outside [1, " +
                           std::to_string(doc_encoder.cfg.embed_dim) + "]");
    const int d = truncate_dim.value_or(doc_encoder.cfg.embed_dim);
    const std::size_t n = documents.size();

    DocIndex<S> index;
    index.embeddings = Tensor<S>::zeros({static_cast<int>(n), d});
    index.ids.resize(n);
    // Workers park failures instead of throwing: an exception escaping a
    // worker thread would terminate the process.
    std::vector<std::exception_ptr> failures(n);
    parallel_for(n, [&](std::size_t i) {
        try {
            auto emb = doc_encoder.embed(documents[i].tokens, truncate_dim);
            std::copy_n(emb.data(), static_cast<std::size_t>(d),
                        index.embeddings.data() + i * static_cast<std::size_t>(d));
            index.ids[i] = documents[i].id;
        } catch (...) {
            failures[i] = std::current_exception();
        }
    });
    for (const auto& f : failures)
        if (f) std::rethrow_exception(f);
    return index;
}

/// Exact top-K by inner product; K larger than the index returns every
/// document. Selection is heap-based, never a full sort.
template <typename S>
RetrievalResult top_k(const DocIndex<S>& index, const Tensor<S>& query_embedding,
                      int k) {
    if (k < 1) throw config_error("top_k needs k >= 1");
    if (query_embedding.rank() != 1 || query_embedding.dim(0) != index.dim())
        throw dimension_error("query embedding width does not match index width " +
                              std::to_string(index.dim()));
    const int n = index.size(), d = index.dim();
    const S* rows = index.embeddings.data();
    const S* q = query_embedding.data();
    std::vector<double> scores(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        double s = 0.0;
        const S* row = rows + static_cast<std::size_t>(i) * d;
        for (int c = 0; c < d; ++c)
            s += static_cast<double>(row[c]) * static_cast<double>(q[c]);
        scores[static_cast<std::size_t>(i)] = s;
    }

    const int keep = std::min(k, n);
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + keep, order.end(),
                      [&](int a, int b) {
                          double sa = scores[static_cast<std::size_t>(a)];
                          double sb = scores[static_cast<std::size_t>(b)];
                          if (sa != sb) return sa > sb;
                          return index.ids[static_cast<std::size_t>(a)] <
                                 index.ids[static_cast<std::size_t>(b)];
                      });
    RetrievalResult r;
    r.doc_ids.reserve(static_cast<std::size_t>(keep));
    r.scores.reserve(static_cast<std::size_t>(keep));
    for (int i = 0; i < keep; ++i) {
        r.doc_ids.push_back(index.ids[static_cast<std::size_t>(order[i])]);
        r.scores.push_back(scores[static_cast<std::size_t>(order[i])]);
    }
    return r;
}

/// Mean over queries of (retrieved documents whose oracle relevance to the
/// query exceeds `threshold`, within the first k hits) / k. Queries pair with
/// results by position; retrieved ids resolve against `documents`.
inline double precision_at_k(const std::vector<RetrievalResult>& results,
                             const std::vector<CorpusItem>& queries,
                             const std::vector<CorpusItem>& documents,
                             double threshold = 0.5, int k = 10) {
    if (k < 1) throw config_error("precision_at_k needs k >= 1");
    if (results.size() != queries.size())
        throw dimension_error("need exactly one retrieval result per query");
    if (results.empty())
        throw data_error("precision over zero queries is undefined");
    std::unordered_map<int, const CorpusItem*> by_id;
    by_id.reserve(documents.size());
    for (const auto& doc : documents) by_id.emplace(doc.id, &doc);

    double total = 0.0;
    for (std::size_t i = 0; i < results.size(); ++i) {
        const auto& hits = results[i].doc_ids;
        const std::size_t take =
            std::min<std::size_t>(static_cast<std::size_t>(k), hits.size());
        int relevant = 0;
        for (std::size_t j = 0; j < take; ++j) {
            auto it = by_id.find(hits[j]);
            if (it == by_id.end())
                throw data_error("retrieved id " + std::to_string(hits[j]) +
                                 " is not in the document set");
            if (relevance(queries[i].mixture, it->second->mixture) > threshold)
                ++relevant;
        }
        total += static_cast<double>(relevant) / static_cast<double>(k);
    }
    return total / static_cast<double>(results.size());
}

namespace detail {

/// Nearest-rank percentile of an ascending-sorted sample.
inline double percentile(const std::vector<double>& sorted, double p) {
    std::size_t rank = static_cast<std::size_t>(
        std::ceil(p * static_cast<double>(sorted.size())));
    if (rank > 0) --rank;
    return sorted[std::min(rank, sorted.size() - 1)];
}

}  // namespace detail

/// Times `repetitions` passes over the query sample: latency one query at a
/// time on the calling thread, throughput with the whole sample as one
/// concurrent batch. Five untimed warmup rounds precede measurement.
template <typename S>
BenchReport bench_encoder(const Encoder<S>& enc, const std::string& label,
                          const std::vector<std::vector<int>>& query_sample,
                          int repetitions = 30) {
    if (repetitions < 30)
        throw config_error("benchmark needs at least 30 repetitions");
    if (query_sample.empty())
        throw data_error("benchmark needs a nonempty query sample");
    using clock = std::chrono::steady_clock;

    double sink = 0.0;  // keeps the timed forwards observable
    for (int w = 0; w < 5; ++w)
        for (const auto& q : query_sample) sink += enc.embed(q).data()[0];

    std::vector<double> lat_ms;
    lat_ms.reserve(query_sample.size() * static_cast<std::size_t>(repetitions));
    for (int r = 0; r < repetitions; ++r)
        for (const auto& q : query_sample) {
            auto t0 = clock::now();
            sink += enc.embed(q).data()[0];
            auto t1 = clock::now();
            lat_ms.push_back(
                std::chrono::duration<double, std::milli>(t1 - t0).count());
        }
    std::sort(lat_ms.begin(), lat_ms.end());

    auto b0 = clock::now();
    for (int r = 0; r < repetitions; ++r)
        parallel_for(query_sample.size(),
                     [&](std::size_t i) { (void)enc.embed(query_sample[i]); });
    auto b1 = clock::now();
    double batch_secs = std::chrono::duration<double>(b1 - b0).count();

    volatile double guard = sink;
    (void)guard;

    BenchReport report;
    report.label = label;
    report.params = enc.param_count();
    report.p50_ms = detail::percentile(lat_ms, 0.50);
    report.p95_ms = detail::percentile(lat_ms, 0.95);
    report.qps = static_cast<double>(query_sample.size()) *
                 static_cast<double>(repetitions) / batch_secs;
    return report;
}

/// Fixed column order: label,params,p50_ms,p95_ms,qps,p_at_k.
inline void write_bench_csv(std::ostream& os,
                            const std::vector<BenchReport>& rows) {
    os << "label,params,p50_ms,p95_ms,qps,p_at_k\n";
    for (const auto& r : rows)
        os << r.label << ',' << r.params << ',' << r.p50_ms << ',' << r.p95_ms
           << ',' << r.qps << ',' << r.p_at_k << '\n';
}

}  // namespace hlm
