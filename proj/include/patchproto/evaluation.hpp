#pragma once

#include <algorithm>
#include <cstdint>
#include <deque>
#include <functional>
#include <random>
#include <vector>

#include "array.hpp"
#include "box.hpp"
#include "prototype.hpp"

namespace patchproto {

struct Region {
    Box box;          // tight bounding box of the component
    double cx = 0.0;  // centroid
    double cy = 0.0;
    int area = 0;
};

/// Binarize at tau * max(map), label 8-connected components, report tight
/// boxes and centroids, largest area first.
inline std::vector<Region> regions_from_activation(const Array& map, double tau) {
    if (map.rank() != 2) throw ShapeError("activation map must be rank-2");
    if (!(tau > 0.0) || tau > 1.0) throw ConfigError("tau must lie in (0,1]");
    int h = map.shape[0], w = map.shape[1];
    float mx = *std::max_element(map.data.begin(), map.data.end());
    if (!(mx > 0.0f)) return {};
    float thresh = static_cast<float>(tau * mx);
    std::vector<int> label(static_cast<std::size_t>(h) * w, -1);
    std::vector<Region> regions;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            std::size_t idx = static_cast<std::size_t>(y) * w + x;
            if (map.data[idx] < thresh || label[idx] >= 0) continue;
            int id = static_cast<int>(regions.size());
            Region r;
            r.box = Box{x, y, x + 1, y + 1};
            long sum_x = 0, sum_y = 0;
            std::deque<std::pair<int, int>> queue{{x, y}};
            label[idx] = id;
            while (!queue.empty()) {
                auto [cx, cy] = queue.front();
                queue.pop_front();
                ++r.area;
                sum_x += cx;
                sum_y += cy;
                r.box.x_min = std::min(r.box.x_min, cx);
                r.box.x_max = std::max(r.box.x_max, cx + 1);
                r.box.y_min = std::min(r.box.y_min, cy);
                r.box.y_max = std::max(r.box.y_max, cy + 1);
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        if (dx == 0 && dy == 0) continue;
                        int nx = cx + dx, ny = cy + dy;
                        if (nx < 0 || ny < 0 || nx >= w || ny >= h) continue;
                        std::size_t nidx = static_cast<std::size_t>(ny) * w + nx;
                        if (map.data[nidx] >= thresh && label[nidx] < 0) {
                            label[nidx] = id;
                            queue.emplace_back(nx, ny);
                        }
                    }
            }
            r.cx = static_cast<double>(sum_x) / r.area;
            r.cy = static_cast<double>(sum_y) / r.area;
            regions.push_back(r);
        }
    std::stable_sort(regions.begin(), regions.end(), [](const Region& a, const Region& b) {
        if (a.area != b.area) return a.area > b.area;
        if (a.box.y_min != b.box.y_min) return a.box.y_min < b.box.y_min;
        return a.box.x_min < b.box.x_min;
    });
    return regions;
}

/// Each region's tight box scaled about its center, rounded to pixels with
/// minimum size 1, clipped to the image.
inline std::vector<Box> boxes_at_scale(const std::vector<Region>& regions, double s,
                                       int img_w, int img_h) {
    if (!(s > 0.0)) throw ConfigError("scale factor must be positive");
    std::vector<Box> out;
    out.reserve(regions.size());
    for (const auto& r : regions) {
        double cx = 0.5 * (r.box.x_min + r.box.x_max);
        double cy = 0.5 * (r.box.y_min + r.box.y_max);
        int w = std::max(1, static_cast<int>(std::lround(s * r.box.width())));
        int h = std::max(1, static_cast<int>(std::lround(s * r.box.height())));
        int x0 = static_cast<int>(std::lround(cx - 0.5 * w));
        int y0 = static_cast<int>(std::lround(cy - 0.5 * h));
        Box b = Box{x0, y0, x0 + w, y0 + h}.clipped(img_w, img_h);
        if (b.valid()) out.push_back(b);
    }
    return out;
}

struct MatchCounts {
    int tp = 0, fp = 0, fn = 0;
};

/// TP: ground-truth boxes overlapped by any prediction; FN: the rest;
/// FP: predictions overlapping no ground truth. min_overlap is the optional
/// minimum intersection-over-GT fraction (default: any positive overlap).
inline MatchCounts match_boxes(const std::vector<Box>& pred, const std::vector<Box>& gt,
                               double min_overlap = 0.0) {
    MatchCounts m;
    for (const auto& g : gt) {
        bool hit = false;
        for (const auto& p : pred) {
            if (min_overlap > 0.0 ? g.overlap_fraction(p) >= min_overlap : g.intersects(p)) {
                hit = true;
                break;
            }
        }
        if (hit) ++m.tp; else ++m.fn;
    }
    for (const auto& p : pred) {
        bool hit = false;
        for (const auto& g : gt)
            if (min_overlap > 0.0 ? g.overlap_fraction(p) >= min_overlap : g.intersects(p)) {
                hit = true;
                break;
            }
        if (!hit) ++m.fp;
    }
    return m;
}

struct DetectionCase {
    std::vector<Region> regions;  // pre-binarized regions of one activation map
    std::vector<Box> gt;
    int img_w = 0, img_h = 0;
};

struct PRPoint {
    double scale = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    long tp = 0, fp = 0, fn = 0;
};

inline std::vector<double> default_scales() {
    std::vector<double> s;
    for (int i = 2; i <= 100; ++i) s.push_back(i / 10.0);
    return s;  // 0.2 .. 10.0 step 0.1, 99 points
}

/// Micro-averaged precision/recall per scale: counts aggregate over all
/// cases before the ratios are taken.
inline std::vector<PRPoint> pr_sweep(const std::vector<DetectionCase>& cases,
                                     const std::vector<double>& scales,
                                     double min_overlap = 0.0) {
    if (scales.empty()) throw ConfigError("scale list must be non-empty");
    std::vector<PRPoint> points;
    points.reserve(scales.size());
    for (double s : scales) {
        PRPoint pt;
        pt.scale = s;
        for (const auto& c : cases) {
            auto boxes = boxes_at_scale(c.regions, s, c.img_w, c.img_h);
            MatchCounts m = match_boxes(boxes, c.gt, min_overlap);
            pt.tp += m.tp;
            pt.fp += m.fp;
            pt.fn += m.fn;
        }
        long npred = pt.tp + pt.fp;  // matched gt + unmatched predictions
        pt.precision = npred > 0 ? static_cast<double>(pt.tp) / npred : 1.0;
        long ngt = pt.tp + pt.fn;
        pt.recall = ngt > 0 ? static_cast<double>(pt.tp) / ngt : 0.0;
        points.push_back(pt);
    }
    return points;
}

/// Trapezoidal area under the monotone precision envelope, from recall 0
/// (extended at the first envelope precision) to the maximum recall reached.
inline double average_precision(std::vector<PRPoint> points) {
    if (points.empty()) throw ConfigError("average_precision needs at least one point");
    std::sort(points.begin(), points.end(),
              [](const PRPoint& a, const PRPoint& b) { return a.recall < b.recall; });
    // envelope: precision at recall r = max precision over recall >= r
    std::vector<double> env(points.size());
    double running = 0.0;
    for (int i = static_cast<int>(points.size()) - 1; i >= 0; --i) {
        running = std::max(running, points[static_cast<std::size_t>(i)].precision);
        env[static_cast<std::size_t>(i)] = running;
    }
    double ap = points[0].recall * env[0];  // from recall 0 at the first envelope precision
    for (std::size_t i = 1; i < points.size(); ++i)
        ap += (points[i].recall - points[i - 1].recall) * 0.5 * (env[i] + env[i - 1]);
    return ap;
}

/// Chance-level comparator for localization: per case, the same number of
/// region hypotheses, but each reduced to a single-pixel region at a centroid
/// drawn uniformly over the image. Swept through the same scale range, this
/// measures how often blind placement happens to touch a lesion.
inline std::vector<DetectionCase> random_centroid_baseline(const std::vector<DetectionCase>& cases,
                                                           std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<DetectionCase> out = cases;
    for (auto& c : out)
        for (auto& r : c.regions) {
            std::uniform_int_distribution<int> px(0, c.img_w - 1);
            std::uniform_int_distribution<int> py(0, c.img_h - 1);
            int x0 = px(rng), y0 = py(rng);
            r.box = Box{x0, y0, x0 + 1, y0 + 1};
            r.cx = x0 + 0.5;
            r.cy = y0 + 0.5;
            r.area = 1;
        }
    return out;
}

struct ClassificationMetrics {
    double bacc = 0.0;
    double f1_macro = 0.0;
    double auc_ovr = 0.0;
    int auc_skipped_classes = 0;  // classes absent from y_true
};

/// BAcc = mean per-class recall; F1 macro-averaged; AUC one-vs-rest with
/// midrank tie handling, macro-averaged over classes present in y_true.
inline ClassificationMetrics classification_metrics(const std::vector<int>& y_true,
                                                    const std::vector<int>& y_pred,
                                                    const std::vector<std::vector<double>>& scores) {
    std::size_t n = y_true.size();
    if (n == 0 || y_pred.size() != n || scores.size() != n)
        throw DataError("metrics inputs must be non-empty and consistent");
    int k = static_cast<int>(scores[0].size());
    for (const auto& row : scores) {
        double s = 0.0;
        for (double v : row) s += v;
        if (std::abs(s - 1.0) > 1e-4)
            throw DataError("score rows must sum to 1");
    }
    std::vector<long> tp(k, 0), fp(k, 0), fn(k, 0), support(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
        int t = y_true[i], p = y_pred[i];
        if (t < 0 || t >= k || p < 0 || p >= k) throw DataError("label out of range");
        ++support[t];
        if (t == p) ++tp[t];
        else { ++fn[t]; ++fp[p]; }
    }
    ClassificationMetrics m;
    int present = 0;
    double recall_sum = 0.0, f1_sum = 0.0, auc_sum = 0.0;
    int auc_present = 0;
    for (int c = 0; c < k; ++c) {
        if (support[c] == 0) { ++m.auc_skipped_classes; continue; }
        ++present;
        double recall = static_cast<double>(tp[c]) / support[c];
        recall_sum += recall;
        double denom = 2.0 * tp[c] + fp[c] + fn[c];
        f1_sum += denom > 0 ? 2.0 * tp[c] / denom : 0.0;
        // rank-based AUC (Mann-Whitney) with midranks
        std::vector<std::pair<double, int>> ranked;  // (score, is_positive)
        ranked.reserve(n);
        for (std::size_t i = 0; i < n; ++i)
            ranked.emplace_back(scores[i][static_cast<std::size_t>(c)], y_true[i] == c ? 1 : 0);
        long npos = support[c], nneg = static_cast<long>(n) - npos;
        if (nneg == 0) continue;  // degenerate single-class data: AUC undefined
        std::sort(ranked.begin(), ranked.end());
        double rank_sum_pos = 0.0;
        std::size_t i = 0;
        while (i < n) {
            std::size_t j = i;
            while (j < n && ranked[j].first == ranked[i].first) ++j;
            double midrank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
            for (std::size_t q = i; q < j; ++q)
                if (ranked[q].second) rank_sum_pos += midrank;
            i = j;
        }
        auc_sum += (rank_sum_pos - npos * (npos + 1.0) / 2.0) /
                   (static_cast<double>(npos) * nneg);
        ++auc_present;
    }
    if (present == 0) throw DataError("no class present in y_true");
    m.bacc = recall_sum / present;
    m.f1_macro = f1_sum / present;
    m.auc_ovr = auc_present > 0 ? auc_sum / auc_present : 0.0;
    return m;
}

struct BootstrapResult {
    double low = 0.0, high = 0.0, point = 0.0;
    int redraws = 0;
};

/// Percentile bootstrap over sample indices. A replicate on which the metric
/// is undefined (throws) is redrawn; gives up after 10x replicates redraws.
inline BootstrapResult bootstrap_ci(
    const std::function<double(const std::vector<std::size_t>&)>& metric, std::size_t n,
    int replicates = 1000, std::uint64_t seed = 0, double level = 0.95) {
    if (n == 0) throw DataError("bootstrap over empty data");
    std::vector<std::size_t> identity(n);
    for (std::size_t i = 0; i < n; ++i) identity[i] = i;
    BootstrapResult r;
    r.point = metric(identity);
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    std::vector<double> values;
    values.reserve(static_cast<std::size_t>(replicates));
    int max_redraws = 10 * replicates;
    while (static_cast<int>(values.size()) < replicates) {
        std::vector<std::size_t> idx(n);
        for (auto& v : idx) v = pick(rng);
        try {
            values.push_back(metric(idx));
        } catch (const std::exception&) {
            if (++r.redraws > max_redraws)
                throw DataError("bootstrap exceeded redraw budget");
        }
    }
    std::sort(values.begin(), values.end());
    auto quantile = [&](double q) {
        double pos = q * (values.size() - 1);
        std::size_t lo = static_cast<std::size_t>(pos);
        std::size_t hi = std::min(lo + 1, values.size() - 1);
        double frac = pos - lo;
        return values[lo] * (1.0 - frac) + values[hi] * frac;
    };
    double alpha = (1.0 - level) / 2.0;
    r.low = quantile(alpha);
    r.high = quantile(1.0 - alpha);
    return r;
}

}  // namespace patchproto
