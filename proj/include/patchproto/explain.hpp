#pragma once

#include <json.hpp>

#include <string>
#include <vector>

#include "model.hpp"
#include "png_io.hpp"

namespace patchproto {

struct PrototypeActivation {
    int id = 0;
    double presence = 0.0;
    int x = 0, y = 0;  // argmax grid location
    std::vector<double> class_weights;
};

/// Top-k activated prototypes, restricted to prototypes the classifier
/// actually uses (max class weight above the eligibility threshold).
inline std::vector<PrototypeActivation> topk_prototypes(const Model& m, const Array& image,
                                                        int k, double eligibility = 1e-3) {
    if (k < 1) throw ConfigError("topk requires k >= 1");
    PresenceVector pv = model_presence(m, image);
    int d = m.classifier.num_prototypes(), nk = m.classifier.num_classes();
    std::vector<PrototypeActivation> all;
    for (int i = 0; i < d; ++i) {
        double wmax = 0.0;
        std::vector<double> weights(static_cast<std::size_t>(nk));
        for (int j = 0; j < nk; ++j) {
            weights[static_cast<std::size_t>(j)] = m.classifier.weights.data[i * nk + j];
            wmax = std::max(wmax, weights[static_cast<std::size_t>(j)]);
        }
        if (wmax <= eligibility) continue;
        PrototypeActivation pa;
        pa.id = i;
        pa.presence = pv.p.data[i];
        pa.x = pv.argmax[static_cast<std::size_t>(i)].first;
        pa.y = pv.argmax[static_cast<std::size_t>(i)].second;
        pa.class_weights = std::move(weights);
        all.push_back(std::move(pa));
    }
    std::stable_sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
        if (a.presence != b.presence) return a.presence > b.presence;
        return a.id < b.id;
    });
    if (static_cast<int>(all.size()) > k) all.resize(static_cast<std::size_t>(k));
    return all;
}

struct ScoringSheet {
    int prediction = 0;
    std::vector<std::string> class_names;
    std::vector<double> evidence;      // per class
    std::vector<double> scores;        // log(e^n + 1)
    struct Row {
        int id;
        double presence;
        int x, y;
        std::vector<double> contributions;  // per class: presence * weight
    };
    std::vector<Row> prototypes;
};

/// Exact additive decomposition of every class's evidence into
/// presence x weight contributions.
inline ScoringSheet scoring_sheet(const Model& m, const Array& image) {
    PresenceVector pv = model_presence(m, image);
    int d = m.classifier.num_prototypes(), k = m.classifier.num_classes();
    ScoringSheet sheet;
    sheet.class_names = m.classifier.class_names;
    if (sheet.class_names.empty())
        for (int j = 0; j < k; ++j) sheet.class_names.push_back("class" + std::to_string(j));
    sheet.evidence.assign(static_cast<std::size_t>(k), 0.0);
    for (int i = 0; i < d; ++i) {
        ScoringSheet::Row row;
        row.id = i;
        row.presence = pv.p.data[i];
        row.x = pv.argmax[static_cast<std::size_t>(i)].first;
        row.y = pv.argmax[static_cast<std::size_t>(i)].second;
        row.contributions.resize(static_cast<std::size_t>(k));
        for (int j = 0; j < k; ++j) {
            double c = row.presence * m.classifier.weights.data[i * k + j];
            row.contributions[static_cast<std::size_t>(j)] = c;
            sheet.evidence[static_cast<std::size_t>(j)] += c;
        }
        sheet.prototypes.push_back(std::move(row));
    }
    sheet.scores.resize(static_cast<std::size_t>(k));
    for (int j = 0; j < k; ++j)
        sheet.scores[static_cast<std::size_t>(j)] =
            std::log(std::pow(sheet.evidence[static_cast<std::size_t>(j)], m.classifier.reg_order) +
                     1.0);
    sheet.prediction = argmax_index(sheet.scores);
    return sheet;
}

inline nlohmann::json scoring_sheet_json(const ScoringSheet& s) {
    nlohmann::json j;
    j["prediction"] = s.prediction;
    nlohmann::json classes = nlohmann::json::array();
    for (std::size_t k = 0; k < s.evidence.size(); ++k)
        classes.push_back({{"name", s.class_names[k]},
                           {"evidence", s.evidence[k]},
                           {"score", s.scores[k]}});
    j["classes"] = classes;
    nlohmann::json protos = nlohmann::json::array();
    for (const auto& row : s.prototypes) {
        nlohmann::json contrib;
        for (std::size_t k = 0; k < row.contributions.size(); ++k)
            contrib[s.class_names[k]] = row.contributions[k];
        protos.push_back({{"id", row.id},
                          {"presence", row.presence},
                          {"location", {row.x, row.y}},
                          {"contributions", contrib}});
    }
    j["prototypes"] = protos;
    return j;
}

/// Grayscale base with a single-hue overlay whose opacity tracks the
/// activation value. Deterministic bytes for identical inputs.
inline void render_heatmap(const Array& image, const ActivationMap& map,
                           const std::string& out_path, double max_opacity = 0.7) {
    if (image.shape != map.raster.shape)
        throw ShapeError("heatmap raster " + shape_str(map.raster.shape) +
                         " does not match image " + shape_str(image.shape));
    int h = image.shape[0], w = image.shape[1];
    Array rgb({h, w, 3});
    for (int i = 0; i < h * w; ++i) {
        float gray = std::clamp(image.data[i], 0.0f, 1.0f);
        float a = static_cast<float>(max_opacity) * std::clamp(map.raster.data[i], 0.0f, 1.0f);
        // blend toward a warm red
        rgb.data[3 * i + 0] = gray * (1.0f - a) + a * 0.95f;
        rgb.data[3 * i + 1] = gray * (1.0f - a) + a * 0.25f;
        rgb.data[3 * i + 2] = gray * (1.0f - a) + a * 0.15f;
    }
    write_png_rgb8(out_path, rgb);
}

}  // namespace patchproto
