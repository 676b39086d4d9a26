#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "array.hpp"
#include "autodiff.hpp"

namespace patchproto {

/// Non-negative linear scoring layer. Class evidence e_k = sum_d p_d * w_dk
/// passes through log(e^n + 1), which keeps the scoring-sheet decomposition
/// exact while rewarding strongly activated prototypes. No bias term.
struct SparseClassifier {
    Array weights;  // {D, K}, entries >= 0
    int reg_order = 2;
    std::vector<std::string> class_names;

    int num_prototypes() const { return weights.shape[0]; }
    int num_classes() const { return weights.shape[1]; }

    void validate() const {
        if (weights.rank() != 2) throw ConfigError("classifier weights must be D x K");
        if (reg_order < 2) throw ConfigError("reg_order must be >= 2");
        for (float w : weights.data)
            if (w < 0.0f) throw ConfigError("classifier weights must be non-negative");
        if (!class_names.empty() &&
            static_cast<int>(class_names.size()) != weights.shape[1])
            throw ConfigError("class_names size must match K");
    }
};

inline std::vector<double> class_evidence(const Array& presence, const SparseClassifier& c) {
    int d = c.num_prototypes(), k = c.num_classes();
    if (presence.shape != Shape{d})
        throw ShapeError("presence length " + shape_str(presence.shape) +
                         " does not match D=" + std::to_string(d));
    std::vector<double> e(k, 0.0);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < k; ++j)
            e[j] += static_cast<double>(presence.data[i]) * c.weights.data[i * k + j];
    return e;
}

inline std::vector<double> score(const Array& presence, const SparseClassifier& c) {
    auto e = class_evidence(presence, c);
    std::vector<double> s(e.size());
    for (std::size_t j = 0; j < e.size(); ++j)
        s[j] = std::log(std::pow(e[j], c.reg_order) + 1.0);
    return s;
}

/// Graph version: presence {1, D} node x weights {D, K} node -> {K} scores.
inline NodeId build_score(DiffGraph& g, NodeId presence_row, NodeId weights, int reg_order) {
    NodeId e = g.matmul(presence_row, weights);
    int k = g.node(e).shape[1];
    NodeId flat = g.reshape(e, {k});
    return g.log(g.add_scalar(g.pow(flat, static_cast<double>(reg_order)), 1.0));
}

inline void project_nonnegative(SparseClassifier& c) {
    for (auto& w : c.weights.data) w = std::max(w, 0.0f);
}

/// Prototypes with weight above tau_w for class k, heaviest first, ties by id.
inline std::vector<std::pair<int, float>> relevant_prototypes(const SparseClassifier& c,
                                                              int k, float tau_w) {
    if (k < 0 || k >= c.num_classes())
        throw std::out_of_range("class " + std::to_string(k) + " out of range");
    std::vector<std::pair<int, float>> out;
    for (int d = 0; d < c.num_prototypes(); ++d) {
        float w = c.weights.data[d * c.num_classes() + k];
        if (w > tau_w) out.emplace_back(d, w);
    }
    std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    return out;
}

}  // namespace patchproto
