#pragma once

// Training objectives for the dual-encoder lab: a contrastive loss with
// mined hard negatives, optional same-tower negatives, and false-negative
// masking; plain InfoNCE; the l2 embedding-alignment objective; KL score
// distillation against a frozen teacher; kernel-space embedding alignment
// (KUEA); and the orthogonal Procrustes fit that maps one embedding space
// onto another. All differentiable losses record hand-derived gradients on
// the active tape and pass the finite-difference suite.

#include <cmath>
#include <cstdint>
#include <iostream>
#include <limits>
#include <string>
#include <vector>

#include "hlm/tensor.hpp"

namespace hlm {

/// Settings for the contrastive objective. A candidate u for query i is
/// dropped iff score(u) > score(positive_i) - false_negative_margin, i.e.
/// candidates that outscore the positive (minus a margin) are treated as
/// unlabeled positives. Ties are kept. `mask_false_negatives = false`
/// disables the rule entirely.
struct CLConfig {
    double temperature = 0.05;
    bool use_in_batch_negatives = true;
    bool use_same_tower_negatives = false;
    bool mask_false_negatives = true;
    double false_negative_margin = 0.0;
};

enum class CandidateKind : std::uint8_t {
    in_batch,          // q_i vs the positive document of another batch item
    mined_hard,        // q_i vs a mined hard-negative document
    same_tower_query,  // q_i vs another query embedding
    same_tower_doc,    // d_i vs another positive-document embedding
};

struct Candidate {
    CandidateKind kind;
    int other;  // batch row (in_batch / same-tower) or packed hard-negative row
    double score;
    bool masked;
};

/// The assembled denominator for one query: its positive score plus every
/// negative candidate with provenance and mask decision. The positive itself
/// is never masked.
struct CandidateSet {
    double positive_score = 0.0;
    std::vector<Candidate> negatives;
};

struct KLConfig {
    double teacher_temperature = 0.05;
    double student_temperature = 0.05;
};

struct KernelConfig {
    int degree = 3;
};

namespace detail {

template <typename S>
double dot_rows(const S* a, const S* b, int dim) {
    S acc = S(0);
    for (int t = 0; t < dim; ++t) acc += a[t] * b[t];
    return static_cast<double>(acc);
}

inline void check_cl_config(const CLConfig& cfg) {
    if (!(cfg.temperature > 0.0))
        throw config_error("contrastive temperature must be positive");
    if (cfg.false_negative_margin < 0.0)
        throw config_error("false-negative margin must be non-negative");
}

template <typename S>
void check_cl_inputs(const Tensor<S>& q, const Tensor<S>& d, const Tensor<S>* hard,
                     const std::vector<int>* hard_offsets) {
    if (q.rank() != 2 || d.rank() != 2)
        throw dimension_error("contrastive loss expects rank-2 embedding batches");
    if (q.dim(0) == 0) throw dimension_error("contrastive loss on an empty batch");
    if (q.dim(0) != d.dim(0) || q.dim(1) != d.dim(1))
        throw dimension_error("query and document batches disagree: " +
                              detail::shape_str(q.shape()) + " vs " + detail::shape_str(d.shape()));
    if (hard) {
        if (hard->rank() != 2 || hard->dim(1) != q.dim(1))
            throw dimension_error("hard-negative rows must match the embedding width");
        if (!hard_offsets || hard_offsets->size() != static_cast<std::size_t>(q.dim(0)) + 1)
            throw dimension_error("hard-negative offsets must have batch+1 entries");
        if (hard_offsets->front() != 0 || hard_offsets->back() != hard->dim(0))
            throw dimension_error("hard-negative offsets must span the packed rows");
        for (std::size_t i = 1; i < hard_offsets->size(); ++i)
            if ((*hard_offsets)[i] < (*hard_offsets)[i - 1])
                throw dimension_error("hard-negative offsets must be non-decreasing");
    }
}

template <typename S>
CandidateSet gather_candidates(int i, const Tensor<S>& q, const Tensor<S>& d,
                               const Tensor<S>* hard, const std::vector<int>* hard_offsets,
                               const CLConfig& cfg) {
    int batch = q.dim(0), dim = q.dim(1);
    const S* qi = q.data() + static_cast<std::size_t>(i) * dim;
    const S* di = d.data() + static_cast<std::size_t>(i) * dim;
    CandidateSet set;
    set.positive_score = dot_rows(qi, di, dim);
    auto push = [&](CandidateKind kind, int other, double score) {
        bool masked = cfg.mask_false_negatives &&
                      score > set.positive_score - cfg.false_negative_margin;
        set.negatives.push_back({kind, other, score, masked});
    };
    if (cfg.use_in_batch_negatives)
        for (int j = 0; j < batch; ++j) {
            if (j == i) continue;
            push(CandidateKind::in_batch, j,
                 dot_rows(qi, d.data() + static_cast<std::size_t>(j) * dim, dim));
        }
    if (hard)
        for (int k = (*hard_offsets)[static_cast<std::size_t>(i)];
             k < (*hard_offsets)[static_cast<std::size_t>(i) + 1]; ++k)
            push(CandidateKind::mined_hard, k,
                 dot_rows(qi, hard->data() + static_cast<std::size_t>(k) * dim, dim));
    if (cfg.use_same_tower_negatives)
        for (int j = 0; j < batch; ++j) {
            if (j == i) continue;
            push(CandidateKind::same_tower_query, j,
                 dot_rows(qi, q.data() + static_cast<std::size_t>(j) * dim, dim));
            push(CandidateKind::same_tower_doc, j,
                 dot_rows(di, d.data() + static_cast<std::size_t>(j) * dim, dim));
        }
    return set;
}

// One gradient contribution of the contrastive loss: d(loss)/d(score) for
// the candidate (or positive) pair of rows identified by (kind, i, other).
struct ClGradEntry {
    std::int8_t kind;  // 0 positive, 1 in_batch, 2 hard, 3 same-tower q, 4 same-tower d
    int i;
    int other;
    double coeff;
};

template <typename S>
Tensor<S> qwen_cl_core(const Tensor<S>& q, const Tensor<S>& d, const Tensor<S>* hard,
                       const std::vector<int>* hard_offsets, const CLConfig& cfg) {
    check_cl_config(cfg);
    check_cl_inputs(q, d, hard, hard_offsets);
    int batch = q.dim(0);
    double tau = cfg.temperature;
    double inv_bt = 1.0 / (tau * batch);

    double loss = 0.0;
    std::vector<ClGradEntry> grads;
    for (int i = 0; i < batch; ++i) {
        CandidateSet set = gather_candidates(i, q, d, hard, hard_offsets, cfg);
        double x_pos = set.positive_score / tau;
        double shift = x_pos;
        for (const auto& c : set.negatives)
            if (!c.masked) shift = std::max(shift, c.score / tau);
        double denom = std::exp(x_pos - shift);
        for (const auto& c : set.negatives)
            if (!c.masked) denom += std::exp(c.score / tau - shift);
        loss += (std::log(denom) + shift - x_pos) / batch;

        double p_pos = std::exp(x_pos - shift) / denom;
        grads.push_back({0, i, i, (p_pos - 1.0) * inv_bt});
        for (const auto& c : set.negatives) {
            if (c.masked) continue;
            double p = std::exp(c.score / tau - shift) / denom;
            grads.push_back({static_cast<std::int8_t>(static_cast<int>(c.kind) + 1), i,
                             c.other, p * inv_bt});
        }
    }

    Tensor<S> out = Tensor<S>::scalar(static_cast<S>(loss));
    bool track = hard ? detail::track<S>({&q, &d, hard}) : detail::track<S>({&q, &d});
    if (track) {
        out.set_requires_grad(true);
        auto qn = q.node(), dn = d.node(), on = out.node();
        auto hn = hard ? hard->node() : nullptr;
        int dim = q.dim(1);
        detail::record<S>([qn, dn, hn, on, dim, grads = std::move(grads)] {
            if (on->grad.empty()) return;
            S up = on->grad[0];
            if (qn->requires_grad) qn->ensure_grad();
            if (dn->requires_grad) dn->ensure_grad();
            if (hn && hn->requires_grad) hn->ensure_grad();
            auto axpy = [dim](std::vector<S>& dst, int row, S c, const std::vector<S>& src,
                              int src_row) {
                S* out_p = dst.data() + static_cast<std::size_t>(row) * dim;
                const S* in_p = src.data() + static_cast<std::size_t>(src_row) * dim;
                for (int t = 0; t < dim; ++t) out_p[t] += c * in_p[t];
            };
            for (const auto& g : grads) {
                S c = static_cast<S>(g.coeff) * up;
                switch (g.kind) {
                    case 0:  // score(q_i, d_i)
                        if (qn->requires_grad) axpy(qn->grad, g.i, c, dn->data, g.i);
                        if (dn->requires_grad) axpy(dn->grad, g.i, c, qn->data, g.i);
                        break;
                    case 1:  // score(q_i, d_j)
                        if (qn->requires_grad) axpy(qn->grad, g.i, c, dn->data, g.other);
                        if (dn->requires_grad) axpy(dn->grad, g.other, c, qn->data, g.i);
                        break;
                    case 2:  // score(q_i, hard_k)
                        if (qn->requires_grad) axpy(qn->grad, g.i, c, hn->data, g.other);
                        if (hn && hn->requires_grad) axpy(hn->grad, g.other, c, qn->data, g.i);
                        break;
                    case 3:  // score(q_i, q_j)
                        if (qn->requires_grad) {
                            axpy(qn->grad, g.i, c, qn->data, g.other);
                            axpy(qn->grad, g.other, c, qn->data, g.i);
                        }
                        break;
                    default:  // score(d_i, d_j)
                        if (dn->requires_grad) {
                            axpy(dn->grad, g.i, c, dn->data, g.other);
                            axpy(dn->grad, g.other, c, dn->data, g.i);
                        }
                        break;
                }
            }
        });
    }
    return out;
}

}  // namespace detail

/// Inner product of two unit embeddings; the retrieval score.
template <typename S>
double score(const Tensor<S>& q_emb, const Tensor<S>& d_emb) {
    if (q_emb.rank() != 1 || d_emb.rank() != 1 || q_emb.dim(0) != d_emb.dim(0))
        throw dimension_error("score expects two equal-length vectors");
    return detail::dot_rows(q_emb.data(), d_emb.data(), q_emb.dim(0));
}

/// Denominator contents for query `i` under `cfg`, for inspection and tests.
template <typename S>
CandidateSet assemble_candidates(int i, const Tensor<S>& q, const Tensor<S>& d,
                                 const CLConfig& cfg = {}) {
    detail::check_cl_config(cfg);
    detail::check_cl_inputs<S>(q, d, nullptr, nullptr);
    if (i < 0 || i >= q.dim(0)) throw dimension_error("candidate query index out of range");
    return detail::gather_candidates<S>(i, q, d, nullptr, nullptr, cfg);
}

template <typename S>
CandidateSet assemble_candidates(int i, const Tensor<S>& q, const Tensor<S>& d,
                                 const Tensor<S>& hard, const std::vector<int>& hard_offsets,
                                 const CLConfig& cfg = {}) {
    detail::check_cl_config(cfg);
    detail::check_cl_inputs(q, d, &hard, &hard_offsets);
    if (i < 0 || i >= q.dim(0)) throw dimension_error("candidate query index out of range");
    return detail::gather_candidates(i, q, d, &hard, &hard_offsets, cfg);
}

/// Contrastive loss: mean over the batch of
///   -log( e^{s+/tau} / (e^{s+/tau} + sum_{u in N_i} e^{s_u/tau}) )
/// where N_i holds the unmasked candidates assembled per `cfg`. Rows of `q`
/// and `d` are the paired query/positive-document embeddings (unit norm).
template <typename S>
Tensor<S> qwen_cl_loss(const Tensor<S>& q, const Tensor<S>& d, const CLConfig& cfg = {}) {
    return detail::qwen_cl_core<S>(q, d, nullptr, nullptr, cfg);
}

/// Variant with mined hard negatives: `hard` packs the negative document
/// embeddings of all queries row-contiguously; `hard_offsets` (size B+1) maps
/// query i to its rows [hard_offsets[i], hard_offsets[i+1]).
template <typename S>
Tensor<S> qwen_cl_loss(const Tensor<S>& q, const Tensor<S>& d, const Tensor<S>& hard,
                       const std::vector<int>& hard_offsets, const CLConfig& cfg = {}) {
    return detail::qwen_cl_core(q, d, &hard, &hard_offsets, cfg);
}

/// Plain InfoNCE: in-batch negatives only, no masking, no hard negatives,
/// no same-tower terms.
template <typename S>
Tensor<S> info_nce_loss(const Tensor<S>& q, const Tensor<S>& d, double temperature) {
    CLConfig cfg;
    cfg.temperature = temperature;
    cfg.use_in_batch_negatives = true;
    cfg.use_same_tower_negatives = false;
    cfg.mask_false_negatives = false;
    return detail::qwen_cl_core<S>(q, d, nullptr, nullptr, cfg);
}

/// Alignment objective: sum over the batch of squared Euclidean distances
/// between student and teacher query embeddings. The student head must emit
/// the teacher's embedding width.
template <typename S>
Tensor<S> l2_align_loss(const Tensor<S>& student_q, const Tensor<S>& teacher_q) {
    if (student_q.rank() != 2 || teacher_q.rank() != 2 ||
        student_q.dim(0) != teacher_q.dim(0) || student_q.dim(1) != teacher_q.dim(1))
        throw dimension_error("alignment needs matching [batch x embed] tensors, got " +
                              detail::shape_str(student_q.shape()) + " vs " +
                              detail::shape_str(teacher_q.shape()));
    Tensor<S> diff = sub(student_q, teacher_q);
    return sum(mul(diff, diff));
}

/// KL score distillation: candidates for every query are the batch's positive
/// documents. Teacher distribution p^T = softmax_j(score(t_i, d_j)/tau_T) is
/// a constant and the documents are a frozen index, so gradient reaches the
/// student query embeddings only.
template <typename S>
Tensor<S> kl_distill_loss(const Tensor<S>& student_q, const Tensor<S>& teacher_q,
                          const Tensor<S>& doc, const KLConfig& cfg = {}) {
    if (!(cfg.teacher_temperature > 0.0) || !(cfg.student_temperature > 0.0))
        throw config_error("distillation temperatures must be positive");
    if (student_q.rank() != 2 || teacher_q.rank() != 2 || doc.rank() != 2)
        throw dimension_error("distillation expects rank-2 embedding batches");
    if (student_q.dim(0) < 1) throw dimension_error("distillation on an empty batch");
    if (student_q.dim(0) != teacher_q.dim(0) || student_q.dim(0) != doc.dim(0) ||
        student_q.dim(1) != teacher_q.dim(1) || student_q.dim(1) != doc.dim(1))
        throw dimension_error("student/teacher/document batches disagree: " +
                              detail::shape_str(student_q.shape()) + ", " +
                              detail::shape_str(teacher_q.shape()) + ", " + detail::shape_str(doc.shape()));
    int batch = student_q.dim(0), dim = student_q.dim(1);
    double tau_t = cfg.teacher_temperature, tau_s = cfg.student_temperature;

    auto row_probs = [&](const Tensor<S>& src, int i, double tau, std::vector<double>& p) {
        const S* a = src.data() + static_cast<std::size_t>(i) * dim;
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < batch; ++j) {
            p[static_cast<std::size_t>(j)] =
                detail::dot_rows(a, doc.data() + static_cast<std::size_t>(j) * dim, dim) / tau;
            mx = std::max(mx, p[static_cast<std::size_t>(j)]);
        }
        double z = 0;
        for (int j = 0; j < batch; ++j) {
            auto& v = p[static_cast<std::size_t>(j)];
            v = std::exp(v - mx);
            z += v;
        }
        for (int j = 0; j < batch; ++j) p[static_cast<std::size_t>(j)] /= z;
    };

    double loss = 0.0;
    std::vector<double> coeff(static_cast<std::size_t>(batch) * batch);
    std::vector<double> pt(batch), ps(batch);
    for (int i = 0; i < batch; ++i) {
        row_probs(teacher_q, i, tau_t, pt);
        row_probs(student_q, i, tau_s, ps);
        for (int j = 0; j < batch; ++j) {
            if (pt[static_cast<std::size_t>(j)] > 0.0)
                loss += pt[static_cast<std::size_t>(j)] *
                        (std::log(pt[static_cast<std::size_t>(j)]) -
                         std::log(ps[static_cast<std::size_t>(j)])) /
                        batch;
            coeff[static_cast<std::size_t>(i) * batch + j] =
                (ps[static_cast<std::size_t>(j)] - pt[static_cast<std::size_t>(j)]) /
                (tau_s * batch);
        }
    }

    Tensor<S> out = Tensor<S>::scalar(static_cast<S>(loss));
    if (detail::track<S>({&student_q})) {
        out.set_requires_grad(true);
        auto sn = student_q.node(), dn = doc.node(), on = out.node();
        detail::record<S>([sn, dn, on, batch, dim, coeff = std::move(coeff)] {
            if (on->grad.empty() || !sn->requires_grad) return;
            S up = on->grad[0];
            sn->ensure_grad();
            for (int i = 0; i < batch; ++i)
                for (int j = 0; j < batch; ++j) {
                    S c = static_cast<S>(coeff[static_cast<std::size_t>(i) * batch + j]) * up;
                    if (c == S(0)) continue;
                    S* g = sn->grad.data() + static_cast<std::size_t>(i) * dim;
                    const S* r = dn->data.data() + static_cast<std::size_t>(j) * dim;
                    for (int t = 0; t < dim; ++t) g[t] += c * r[t];
                }
        });
    }
    return out;
}

/// Polynomial kernel (u.v + 1)^degree; bounded by [0, 2^degree] on unit inputs.
template <typename S>
double poly_kernel(const Tensor<S>& u, const Tensor<S>& v, const KernelConfig& cfg = {}) {
    if (cfg.degree < 1) throw config_error("kernel degree must be at least 1");
    if (u.rank() != 1 || v.rank() != 1 || u.dim(0) != v.dim(0))
        throw dimension_error("poly_kernel expects two equal-length vectors");
    double base = detail::dot_rows(u.data(), v.data(), u.dim(0)) + 1.0;
    double out = 1.0;
    for (int k = 0; k < cfg.degree; ++k) out *= base;
    return out;
}

/// Kernel-space alignment: mean over ordered pairs (i != j) of the squared
/// difference between student and teacher kernel entries. The teacher kernel
/// matrix is constant; invariant under any orthogonal map of the student
/// embeddings, which is what the Procrustes step exploits.
template <typename S>
Tensor<S> kuea_loss(const Tensor<S>& student_q, const Tensor<S>& teacher_q,
                    const KernelConfig& cfg = {}) {
    if (cfg.degree < 1) throw config_error("kernel degree must be at least 1");
    if (student_q.rank() != 2 || teacher_q.rank() != 2 ||
        student_q.dim(0) != teacher_q.dim(0))
        throw dimension_error("kernel alignment expects rank-2 batches of equal size");
    int batch = student_q.dim(0);
    if (batch < 2) throw dimension_error("kernel alignment needs at least two items");
    int sdim = student_q.dim(1), tdim = teacher_q.dim(1);
    double norm = 1.0 / (static_cast<double>(batch) * (batch - 1));

    auto kernel_at = [&](double g) {
        double out = 1.0;
        for (int k = 0; k < cfg.degree; ++k) out *= g + 1.0;
        return out;
    };

    double loss = 0.0;
    struct PairGrad {
        int i, j;
        double coeff;
    };
    std::vector<PairGrad> pairs;
    pairs.reserve(static_cast<std::size_t>(batch) * (batch - 1) / 2);
    for (int i = 0; i < batch; ++i)
        for (int j = i + 1; j < batch; ++j) {
            double gs = detail::dot_rows(student_q.data() + static_cast<std::size_t>(i) * sdim,
                                         student_q.data() + static_cast<std::size_t>(j) * sdim,
                                         sdim);
            double gt = detail::dot_rows(teacher_q.data() + static_cast<std::size_t>(i) * tdim,
                                         teacher_q.data() + static_cast<std::size_t>(j) * tdim,
                                         tdim);
            double delta = kernel_at(gs) - kernel_at(gt);
            loss += 2.0 * norm * delta * delta;  // ordered pairs (i,j) and (j,i)
            double dk = cfg.degree;
            double kprime = dk;
            for (int k = 0; k < cfg.degree - 1; ++k) kprime *= gs + 1.0;
            pairs.push_back({i, j, 4.0 * norm * delta * kprime});
        }

    Tensor<S> out = Tensor<S>::scalar(static_cast<S>(loss));
    if (detail::track<S>({&student_q})) {
        out.set_requires_grad(true);
        auto sn = student_q.node(), on = out.node();
        detail::record<S>([sn, on, sdim, pairs = std::move(pairs)] {
            if (on->grad.empty() || !sn->requires_grad) return;
            sn->ensure_grad();
            S up = on->grad[0];
            for (const auto& p : pairs) {
                S c = static_cast<S>(p.coeff) * up;
                S* gi = sn->grad.data() + static_cast<std::size_t>(p.i) * sdim;
                S* gj = sn->grad.data() + static_cast<std::size_t>(p.j) * sdim;
                const S* xi = sn->data.data() + static_cast<std::size_t>(p.i) * sdim;
                const S* xj = sn->data.data() + static_cast<std::size_t>(p.j) * sdim;
                for (int t = 0; t < sdim; ++t) {
                    gi[t] += c * xj[t];
                    gj[t] += c * xi[t];
                }
            }
        });
    }
    return out;
}

/// An orthogonal map of the embedding space, applied as y = R x.
template <typename S>
struct Rotation {
    int dim = 0;
    std::vector<S> m;  // row-major [dim x dim]

    std::vector<S> apply(const std::vector<S>& x) const {
        if (static_cast<int>(x.size()) != dim)
            throw dimension_error("rotation input has the wrong width");
        std::vector<S> y(static_cast<std::size_t>(dim), S(0));
        for (int r = 0; r < dim; ++r) {
            S acc = S(0);
            const S* row = m.data() + static_cast<std::size_t>(r) * dim;
            for (int c = 0; c < dim; ++c) acc += row[c] * x[static_cast<std::size_t>(c)];
            y[static_cast<std::size_t>(r)] = acc;
        }
        return y;
    }
};

/// Least-squares orthogonal map from student to teacher embeddings over N
/// validation pairs: R = U V^T from the SVD of sum_v t_v s_v^T. Reflections
/// (det = -1) are accepted as-is. Warns when N < dim (underdetermined fit).
template <typename S>
Rotation<S> procrustes_rotation(const Tensor<S>& student_val, const Tensor<S>& teacher_val) {
    if (student_val.rank() != 2 || teacher_val.rank() != 2 ||
        student_val.dim(0) != teacher_val.dim(0) || student_val.dim(1) != teacher_val.dim(1))
        throw dimension_error("procrustes expects matching [pairs x embed] tensors");
    int n = student_val.dim(0), dim = student_val.dim(1);
    if (n < 1) throw dimension_error("procrustes needs at least one pair");
    if (n < dim)
        std::cerr << "warning: procrustes fit from " << n << " pairs in " << dim
                  << " dimensions is underdetermined\n";

    Tensor<double> cross = Tensor<double>::zeros({dim, dim});
    for (int v = 0; v < n; ++v) {
        const S* s = student_val.data() + static_cast<std::size_t>(v) * dim;
        const S* t = teacher_val.data() + static_cast<std::size_t>(v) * dim;
        for (int a = 0; a < dim; ++a)
            for (int b = 0; b < dim; ++b)
                cross.data()[static_cast<std::size_t>(a) * dim + b] +=
                    static_cast<double>(t[a]) * static_cast<double>(s[b]);
    }

    SvdResult<double> svd = svd_square(cross);
    std::vector<double> r(static_cast<std::size_t>(dim) * dim, 0.0);
    for (int a = 0; a < dim; ++a)
        for (int b = 0; b < dim; ++b) {
            double acc = 0;
            for (int k = 0; k < dim; ++k)
                acc += svd.u.data()[static_cast<std::size_t>(a) * dim + k] *
                       svd.v.data()[static_cast<std::size_t>(b) * dim + k];
            r[static_cast<std::size_t>(a) * dim + b] = acc;
        }

    double worst = 0.0;
    for (int a = 0; a < dim; ++a)
        for (int b = 0; b < dim; ++b) {
            double acc = 0;
            for (int k = 0; k < dim; ++k)
                acc += r[static_cast<std::size_t>(k) * dim + a] *
                       r[static_cast<std::size_t>(k) * dim + b];
            worst = std::max(worst, std::abs(acc - (a == b ? 1.0 : 0.0)));
        }
    if (worst > 1e-6)
        throw numeric_error("procrustes rotation failed the orthogonality check");

    Rotation<S> rot;
    rot.dim = dim;
    rot.m.resize(r.size());
    for (std::size_t i = 0; i < r.size(); ++i) rot.m[i] = static_cast<S>(r[i]);
    return rot;
}

}  // namespace hlm
