#pragma once

#include <vector>

#include "array.hpp"
#include "autodiff.hpp"
#include "prototype.hpp"

namespace patchproto {

struct LossWeights {
    double lambda_a = 1.0;
    double lambda_t = 1.0;
    double lambda_koleo = 1.0;
    double lambda_c = 1.0;
    double eps = 1e-8;
    // fraction of pre-training over which lambda_a ramps linearly 0 -> target
    double warmup_fraction = 0.2;

    void validate() const {
        if (lambda_a < 0 || lambda_t < 0 || lambda_koleo < 0 || lambda_c < 0)
            throw ConfigError("loss weights must be non-negative");
        if (!(eps > 0)) throw ConfigError("eps must be positive");
        if (warmup_fraction < 0 || warmup_fraction > 1)
            throw ConfigError("warmup_fraction must lie in [0,1]");
    }

    double effective_lambda_a(double progress) const {
        if (warmup_fraction <= 0.0) return lambda_a;
        return lambda_a * std::min(1.0, progress / warmup_fraction);
    }
};

struct LossBreakdown {
    double alignment = 0.0;
    double tanh_term = 0.0;
    double koleo = 0.0;
    double classification = 0.0;
    double total = 0.0;
    double lambda_a_eff = 0.0;
};

// ---- graph builders -------------------------------------------------------

// Per-location agreement of two softmaxed views, both {N, D} nodes:
// -(1/N) sum log(z1 . z2 + eps)
inline NodeId build_alignment_loss(DiffGraph& g, NodeId z1, NodeId z2, double eps) {
    if (g.node(z1).shape != g.node(z2).shape)
        throw ShapeError("alignment views must share a shape");
    NodeId dots = g.sum_reduce(g.mul(z1, z2), 1);
    return g.scale(g.mean_all(g.log(g.add_scalar(dots, eps))), -1.0);
}

// P is a {B, D} presence matrix: -(1/D) sum_d log(tanh(sum_b P) + eps)
inline NodeId build_tanh_loss(DiffGraph& g, NodeId presence, double eps) {
    NodeId cols = g.sum_reduce(presence, 0);
    return g.scale(g.mean_all(g.log(g.add_scalar(g.tanh(cols), eps))), -1.0);
}

inline NodeId build_l2_normalize(DiffGraph& g, NodeId v) {
    NodeId inv = g.pow(g.l2_norm(v), -1.0);
    return g.mul(v, inv);
}

// Nearest-neighbor spreading penalty over per-sample vectors:
// -(1/n) sum_i log(min_{j!=i} ||v_i - v_j|| + eps). The argmin partner is
// selected from forward values; only the winning distance enters the tape.
inline NodeId build_koleo_loss(DiffGraph& g, const std::vector<NodeId>& vectors, double eps) {
    std::size_t n = vectors.size();
    if (n < 2) throw std::invalid_argument("koleo loss needs at least 2 vectors");
    std::vector<NodeId> terms;
    for (std::size_t i = 0; i < n; ++i) {
        int best_j = -1;
        double best_d = 0.0;
        const auto& vi = g.node(vectors[i]).value;
        for (std::size_t j = 0; j < n; ++j) {
            if (j == i) continue;
            const auto& vj = g.node(vectors[j]).value;
            double s = 0.0;
            for (std::size_t k = 0; k < vi.size(); ++k) {
                double d = vi[k] - vj[k];
                s += d * d;
            }
            if (best_j < 0 || s < best_d) { best_d = s; best_j = static_cast<int>(j); }
        }
        NodeId rho = g.l2_norm(g.sub(vectors[i], vectors[best_j]));
        terms.push_back(g.log(g.add_scalar(rho, eps)));
    }
    return g.scale(g.mean_all(g.concat(terms, 0)), -1.0);
}

// -log softmax(scores)[label] for one {K} score vector
inline NodeId build_nll(DiffGraph& g, NodeId scores, int label) {
    const Shape& s = g.node(scores).shape;
    if (s.size() != 1) throw ShapeError("build_nll expects a rank-1 score vector");
    int k = s[0];
    if (label < 0 || label >= k)
        throw DataError("label " + std::to_string(label) + " out of range for K=" +
                        std::to_string(k));
    NodeId shifted = g.sub(scores, g.max_reduce(scores, 0));
    NodeId lse = g.log(g.sum_all(g.exp(shifted)));
    Array onehot({k});
    onehot.data[label] = 1.0f;
    NodeId s_true = g.sum_all(g.mul(shifted, g.constant(onehot)));
    return g.sub(lse, s_true);
}

inline NodeId build_classification_loss(DiffGraph& g, const std::vector<NodeId>& scores,
                                        const std::vector<int>& labels) {
    if (scores.size() != labels.size() || scores.empty())
        throw DataError("scores/labels size mismatch");
    std::vector<NodeId> terms;
    for (std::size_t i = 0; i < scores.size(); ++i)
        terms.push_back(g.reshape(build_nll(g, scores[i], labels[i]), {1}));
    return g.mean_all(g.concat(terms, 0));
}

// ---- value-level wrappers -------------------------------------------------

inline double alignment_loss(const ProtoGrid& z1, const ProtoGrid& z2, double eps) {
    DiffGraph g;
    int n1 = z1.h * z1.w, n2 = z2.h * z2.w;
    if (n1 != n2 || z1.d != z2.d) throw ShapeError("alignment views must share a shape");
    NodeId a = g.constant(Array({n1, z1.d}, z1.values.data));
    NodeId b = g.constant(Array({n2, z2.d}, z2.values.data));
    return g.value_scalar(build_alignment_loss(g, a, b, eps));
}

inline double tanh_loss(const Array& presence, double eps) {
    DiffGraph g;
    return g.value_scalar(build_tanh_loss(g, g.constant(presence), eps));
}

// vectors: flattened, L2-normalized feature grids (one per sample)
inline double koleo_loss(const std::vector<Array>& vectors, double eps) {
    DiffGraph g;
    std::vector<NodeId> ids;
    for (const auto& v : vectors) ids.push_back(g.constant(v));
    return g.value_scalar(build_koleo_loss(g, ids, eps));
}

inline double classification_loss(const std::vector<Array>& scores,
                                  const std::vector<int>& labels) {
    DiffGraph g;
    std::vector<NodeId> ids;
    for (const auto& s : scores) ids.push_back(g.constant(s));
    return g.value_scalar(build_classification_loss(g, ids, labels));
}

/// Eq.-style weighted pre-training combination with the lambda_a warm-up.
/// progress is the global pre-training step fraction in [0,1].
inline LossBreakdown pretrain_objective(double align, double tanh_term, double koleo,
                                        const LossWeights& w, double progress) {
    w.validate();
    LossBreakdown b;
    b.alignment = align;
    b.tanh_term = tanh_term;
    b.koleo = koleo;
    b.lambda_a_eff = w.effective_lambda_a(progress);
    b.total = b.lambda_a_eff * align + w.lambda_t * tanh_term + w.lambda_koleo * koleo;
    return b;
}

/// Fine-tuning combination: pre-training terms plus lambda_c * NLL, no warm-up.
inline LossBreakdown finetune_objective(double align, double tanh_term, double koleo,
                                        double classification, const LossWeights& w) {
    w.validate();
    LossBreakdown b;
    b.alignment = align;
    b.tanh_term = tanh_term;
    b.koleo = koleo;
    b.classification = classification;
    b.lambda_a_eff = w.lambda_a;
    b.total = w.lambda_a * align + w.lambda_t * tanh_term + w.lambda_koleo * koleo +
              w.lambda_c * classification;
    return b;
}

}  // namespace patchproto
