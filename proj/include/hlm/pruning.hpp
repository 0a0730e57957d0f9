#pragma once

// Two-stage structured pruning of a trained encoder: depth reduction (drop
// whole transformer layers ranked by how much each one moves the residual
// stream) followed by width reduction (drop FFN units ranked by mean
// activation magnitude). Surgery is dense: the pruned encoder carries no
// masks or zombie weights and its config validates like any other. The
// progressive prune-and-align loop lives in trainer.hpp, which builds on
// these primitives.

#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "hlm/encoder.hpp"

namespace hlm {

/// How retained layers are ranked. `score` keeps the top layers by raw
/// importance I(l) = mean ||h_out|| / ||h_in||; `deviation_from_identity`
/// keeps the layers whose ratio is farthest from 1, treating ratios near 1
/// as evidence the layer barely transforms its input.
enum class LayerRankMode { score, deviation_from_identity };

struct PruneTarget {
    int k_layers = 0;
    int k_ffn = 0;
};

struct PruneSchedule {
    std::vector<PruneTarget> stages;
};

/// Calibration statistics for one encoder: per-layer ratios from the
/// unpruned model, the retained-layer choice they imply, and per-unit FFN
/// scores measured on the layer-pruned intermediate (so width scores see
/// the hidden states the surviving layers actually produce).
struct ImportanceScores {
    std::vector<double> layer_scores;             // one per original layer
    std::vector<int> retained_layers;             // ascending original indices
    std::vector<std::vector<double>> ffn_scores;  // one vector per retained layer
};

using CalibrationCorpus = std::vector<std::vector<int>>;

inline void validate_target(const PruneTarget& t, int layers, int ffn_dim) {
    if (t.k_layers < 1 || t.k_layers > layers)
        throw config_error("prune target of " + std::to_string(t.k_layers) +
                           " layers is outside [1, " + std::to_string(layers) + "]");
    if (t.k_ffn < 1 || t.k_ffn > ffn_dim)
        throw config_error("prune target of " + std::to_string(t.k_ffn) +
                           " FFN units is outside [1, " + std::to_string(ffn_dim) + "]");
}

inline void validate_schedule(const PruneSchedule& schedule, int layers, int ffn_dim) {
    int prev_layers = layers, prev_ffn = ffn_dim;
    for (const auto& t : schedule.stages) {
        validate_target(t, layers, ffn_dim);
        if (t.k_layers > prev_layers || t.k_ffn > prev_ffn)
            throw config_error("prune schedule must be non-increasing in both fields");
        prev_layers = t.k_layers;
        prev_ffn = t.k_ffn;
    }
}

namespace detail {

/// Indices of the k largest values; equal values resolve to the lower index.
/// The result is sorted ascending so downstream surgery preserves order.
inline std::vector<int> top_k_indices(const std::vector<double>& values, int k) {
    std::vector<int> order(values.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return values[static_cast<std::size_t>(a)] > values[static_cast<std::size_t>(b)];
    });
    order.resize(static_cast<std::size_t>(k));
    std::sort(order.begin(), order.end());
    return order;
}

template <typename S>
Tensor<S> copy_tensor(const Tensor<S>& t) {
    return Tensor<S>::from(t.vec(), t.shape());
}

template <typename S>
Tensor<S> take_rows(const Tensor<S>& t, const std::vector<int>& rows) {
    int cols = t.dim(1);
    std::vector<S> data;
    data.reserve(rows.size() * static_cast<std::size_t>(cols));
    for (int r : rows)
        data.insert(data.end(), t.data() + static_cast<std::size_t>(r) * cols,
                    t.data() + static_cast<std::size_t>(r + 1) * cols);
    return Tensor<S>::from(std::move(data), {static_cast<int>(rows.size()), cols});
}

template <typename S>
Tensor<S> take_cols(const Tensor<S>& t, const std::vector<int>& cols) {
    int r = t.dim(0), c = t.dim(1);
    std::vector<S> data;
    data.reserve(static_cast<std::size_t>(r) * cols.size());
    for (int i = 0; i < r; ++i)
        for (int j : cols) data.push_back(t.data()[static_cast<std::size_t>(i) * c + j]);
    return Tensor<S>::from(std::move(data), {r, static_cast<int>(cols.size())});
}

template <typename S>
void check_no_adapters(const Encoder<S>& enc) {
    if (!enc.lora.empty())
        throw contract_error("merge or discard adapters before pruning");
}

/// Keeps the listed layers (ascending original indices) and copies every
/// other weight verbatim.
template <typename S>
Encoder<S> keep_layers(const Encoder<S>& enc, const std::vector<int>& retained) {
    EncoderConfig cfg = enc.cfg;
    cfg.n_layers = static_cast<int>(retained.size());
    EncoderWeights<S> w;
    w.embed_tokens = copy_tensor(enc.w.embed_tokens);
    for (int l : retained) {
        const auto& src = enc.w.layers[static_cast<std::size_t>(l)];
        LayerWeights<S> lw;
        lw.attn_norm = copy_tensor(src.attn_norm);
        lw.wq = copy_tensor(src.wq);
        lw.wk = copy_tensor(src.wk);
        lw.wv = copy_tensor(src.wv);
        lw.wo = copy_tensor(src.wo);
        lw.ffn_norm = copy_tensor(src.ffn_norm);
        lw.wg = copy_tensor(src.wg);
        lw.wu = copy_tensor(src.wu);
        lw.wd = copy_tensor(src.wd);
        w.layers.push_back(std::move(lw));
    }
    w.final_norm = copy_tensor(enc.w.final_norm);
    w.w_out = copy_tensor(enc.w.w_out);
    return Encoder<S>(cfg, std::move(w));
}

}  // namespace detail

/// Mean over calibration tokens of ||h_out|| / ||h_in|| at every layer
/// boundary of `enc`. The mean is accumulated in corpus order regardless of
/// worker count, so scores are bit-reproducible.
template <typename S>
std::vector<double> layer_importance(const Encoder<S>& enc, const CalibrationCorpus& calib) {
    if (calib.empty()) throw data_error("layer importance needs a calibration corpus");
    std::size_t items = calib.size();
    int layers = enc.cfg.n_layers, hidden = enc.cfg.hidden_dim;

    std::vector<std::vector<double>> partial(items);
    std::vector<std::size_t> tokens(items, 0);
    std::vector<std::uint8_t> degenerate(items, 0);  // workers must not throw
    parallel_for(items, [&](std::size_t it) {
        auto fr = enc.forward(calib[it]);
        int seq = fr.trace.h_in(0).dim(0);
        std::vector<double> sums(static_cast<std::size_t>(layers), 0.0);
        for (int l = 0; l < layers; ++l) {
            const S* hin = fr.trace.h_in(l).data();
            const S* hout = fr.trace.h_out(l).data();
            for (int t = 0; t < seq; ++t) {
                double nin = 0, nout = 0;
                for (int c = 0; c < hidden; ++c) {
                    double vi = hin[static_cast<std::size_t>(t) * hidden + c];
                    double vo = hout[static_cast<std::size_t>(t) * hidden + c];
                    nin += vi * vi;
                    nout += vo * vo;
                }
                if (nin <= 0.0) {
                    degenerate[it] = 1;
                    return;
                }
                sums[static_cast<std::size_t>(l)] += std::sqrt(nout) / std::sqrt(nin);
            }
        }
        partial[it] = std::move(sums);
        tokens[it] = static_cast<std::size_t>(seq);
    });
    for (std::size_t it = 0; it < items; ++it)
        if (degenerate[it])
            throw numeric_error("zero hidden state in calibration item " +
                                std::to_string(it));

    std::vector<double> scores(static_cast<std::size_t>(layers), 0.0);
    std::size_t total = 0;
    for (std::size_t it = 0; it < items; ++it) {
        for (int l = 0; l < layers; ++l)
            scores[static_cast<std::size_t>(l)] += partial[it][static_cast<std::size_t>(l)];
        total += tokens[it];
    }
    for (auto& s : scores) s /= static_cast<double>(total);
    return scores;
}

/// Mean over calibration tokens of |SiLU(W^g h)_j * (W^u h)_j| per layer and
/// FFN unit, where h is the normalized FFN input. Fixed-order mean as above.
template <typename S>
std::vector<std::vector<double>> ffn_importance(const Encoder<S>& enc,
                                                const CalibrationCorpus& calib) {
    if (calib.empty()) throw data_error("FFN importance needs a calibration corpus");
    std::size_t items = calib.size();
    int layers = enc.cfg.n_layers, ffn = enc.cfg.ffn_dim;

    std::vector<std::vector<double>> partial(items);
    std::vector<std::size_t> tokens(items, 0);
    parallel_for(items, [&](std::size_t it) {
        auto fr = enc.forward(calib[it]);
        int seq = fr.trace.h_in(0).dim(0);
        std::vector<double> sums(static_cast<std::size_t>(layers) * ffn, 0.0);
        for (int l = 0; l < layers; ++l) {
            const S* gate = fr.ffn_gate[static_cast<std::size_t>(l)].data();
            const S* up = fr.ffn_up[static_cast<std::size_t>(l)].data();
            double* dst = sums.data() + static_cast<std::size_t>(l) * ffn;
            for (int t = 0; t < seq; ++t)
                for (int j = 0; j < ffn; ++j) {
                    std::size_t at = static_cast<std::size_t>(t) * ffn + j;
                    dst[j] += std::abs(static_cast<double>(gate[at]) *
                                       static_cast<double>(up[at]));
                }
        }
        partial[it] = std::move(sums);
        tokens[it] = static_cast<std::size_t>(seq);
    });

    std::vector<std::vector<double>> scores(
        static_cast<std::size_t>(layers),
        std::vector<double>(static_cast<std::size_t>(ffn), 0.0));
    std::size_t total = 0;
    for (std::size_t it = 0; it < items; ++it) total += tokens[it];
    for (std::size_t it = 0; it < items; ++it)
        for (int l = 0; l < layers; ++l)
            for (int j = 0; j < ffn; ++j)
                scores[static_cast<std::size_t>(l)][static_cast<std::size_t>(j)] +=
                    partial[it][static_cast<std::size_t>(l) * ffn + j];
    for (auto& row : scores)
        for (auto& s : row) s /= static_cast<double>(total);
    return scores;
}

/// Full calibration for one prune target: layer ratios on the unpruned
/// model, the retained-layer set they imply under `mode`, and FFN scores
/// measured on the layer-pruned intermediate.
template <typename S>
ImportanceScores compute_importance(const Encoder<S>& enc, const CalibrationCorpus& calib,
                                    const PruneTarget& target,
                                    LayerRankMode mode = LayerRankMode::score) {
    detail::check_no_adapters(enc);
    validate_target(target, enc.cfg.n_layers, enc.cfg.ffn_dim);
    ImportanceScores scores;
    scores.layer_scores = layer_importance(enc, calib);
    std::vector<double> keys = scores.layer_scores;
    if (mode == LayerRankMode::deviation_from_identity)
        for (auto& k : keys) k = std::abs(k - 1.0);
    scores.retained_layers = detail::top_k_indices(keys, target.k_layers);
    Encoder<S> intermediate = detail::keep_layers(enc, scores.retained_layers);
    scores.ffn_scores = ffn_importance(intermediate, calib);
    return scores;
}

/// Dense surgery to the target shape: keeps `scores.retained_layers` in
/// their original order, then in each kept layer retains the top-k_ffn units
/// (rows of W^g and W^u, columns of W^d). Ties keep the lower index.
template <typename S>
Encoder<S> prune(const Encoder<S>& enc, const PruneTarget& target,
                 const ImportanceScores& scores) {
    detail::check_no_adapters(enc);
    validate_target(target, enc.cfg.n_layers, enc.cfg.ffn_dim);
    if (scores.layer_scores.size() != static_cast<std::size_t>(enc.cfg.n_layers))
        throw dimension_error("importance scores were computed for a different depth");
    if (scores.retained_layers.size() != static_cast<std::size_t>(target.k_layers))
        throw dimension_error("retained-layer set does not match the target depth");
    for (std::size_t i = 0; i < scores.retained_layers.size(); ++i) {
        int l = scores.retained_layers[i];
        if (l < 0 || l >= enc.cfg.n_layers ||
            (i > 0 && l <= scores.retained_layers[i - 1]))
            throw dimension_error("retained layers must be ascending original indices");
    }
    if (scores.ffn_scores.size() != static_cast<std::size_t>(target.k_layers))
        throw dimension_error("FFN scores must cover every retained layer");
    for (const auto& row : scores.ffn_scores)
        if (row.size() != static_cast<std::size_t>(enc.cfg.ffn_dim))
            throw dimension_error("FFN scores were computed for a different width");

    Encoder<S> out = detail::keep_layers(enc, scores.retained_layers);
    out.cfg.ffn_dim = target.k_ffn;
    for (int l = 0; l < target.k_layers; ++l) {
        auto units = detail::top_k_indices(scores.ffn_scores[static_cast<std::size_t>(l)],
                                           target.k_ffn);
        auto& lw = out.w.layers[static_cast<std::size_t>(l)];
        lw.wg = detail::take_rows(lw.wg, units);
        lw.wu = detail::take_rows(lw.wu, units);
        lw.wd = detail::take_cols(lw.wd, units);
    }
    out.cfg.validate();
    return out;
}

/// Human-readable calibration report: layer ratios with retain decisions and
/// the per-layer FFN score range that survived.
inline void write_prune_report(std::ostream& os, const ImportanceScores& scores,
                               const PruneTarget& target) {
    os << "layer,score,retained\n";
    for (std::size_t l = 0; l < scores.layer_scores.size(); ++l) {
        bool kept = std::find(scores.retained_layers.begin(), scores.retained_layers.end(),
                              static_cast<int>(l)) != scores.retained_layers.end();
        os << l << ',' << scores.layer_scores[l] << ',' << (kept ? 1 : 0) << '\n';
    }
    os << "retained_layer,ffn_kept,ffn_min_kept,ffn_max_kept\n";
    for (std::size_t i = 0; i < scores.ffn_scores.size(); ++i) {
        auto units = detail::top_k_indices(scores.ffn_scores[i], target.k_ffn);
        double lo = scores.ffn_scores[i][static_cast<std::size_t>(units.front())];
        double hi = lo;
        for (int u : units) {
            lo = std::min(lo, scores.ffn_scores[i][static_cast<std::size_t>(u)]);
            hi = std::max(hi, scores.ffn_scores[i][static_cast<std::size_t>(u)]);
        }
        os << scores.retained_layers[i] << ',' << target.k_ffn << ',' << lo << ',' << hi
           << '\n';
    }
}

}  // namespace hlm
