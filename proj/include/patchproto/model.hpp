#pragma once

#include <vector>

#include "classifier.hpp"
#include "encoder.hpp"
#include "prototype.hpp"

namespace patchproto {

/// Full pipeline state: encoder weights plus the non-negative scoring layer.
struct Model {
    EncoderConfig config;
    Params encoder;
    SparseClassifier classifier;
};

inline FeatureGrid model_feature_grid(const Model& m, const Array& image) {
    return encode(m.encoder, m.config, image);
}

inline ProtoGrid model_proto_grid(const Model& m, const Array& image) {
    return channel_softmax(model_feature_grid(m, image));
}

inline PresenceVector model_presence(const Model& m, const Array& image) {
    return presence_pool(model_proto_grid(m, image));
}

inline std::vector<double> model_scores(const Model& m, const Array& image) {
    return score(model_presence(m, image).p, m.classifier);
}

inline std::vector<double> softmax_probs(const std::vector<double>& scores) {
    double mx = *std::max_element(scores.begin(), scores.end());
    std::vector<double> p(scores.size());
    double z = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        p[i] = std::exp(scores[i] - mx);
        z += p[i];
    }
    for (auto& v : p) v /= z;
    return p;
}

inline int argmax_index(const std::vector<double>& v) {
    return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

inline int model_predict(const Model& m, const Array& image) {
    return argmax_index(model_scores(m, image));
}

}  // namespace patchproto
