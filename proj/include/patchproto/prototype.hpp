#pragma once

#include <utility>
#include <vector>

#include "array.hpp"

namespace patchproto {

/// Encoder output: spatial grid of D feature channels, stored {h, w, d}.
/// Each channel is one candidate prototype.
struct FeatureGrid {
    int h = 0, w = 0, d = 0;
    Array values;  // shape {h, w, d}
};

/// Per-location distributions over the D channels (softmaxed FeatureGrid).
struct ProtoGrid {
    int h = 0, w = 0, d = 0;
    Array values;  // shape {h, w, d}, sums to 1 over d at each location
};

/// Max-pooled prototype activations with their spatial argmax, ties broken
/// by first occurrence in row-major order.
struct PresenceVector {
    Array p;  // shape {d}, values in [0,1]
    std::vector<std::pair<int, int>> argmax;  // per channel (x, y) grid coords
};

struct ActivationMap {
    int prototype = 0;
    Array raster;  // shape {H, W}, values in [0,1]
};

// Bilinear sample with corner alignment: src coordinates of dst pixel (i,j)
// are i*(sh-1)/(dh-1), j*(sw-1)/(dw-1). Exact identity at equal sizes and
// exactly constant-preserving.
inline Array bilinear_resize(const Array& src, int dst_h, int dst_w) {
    if (src.rank() != 2) throw ShapeError("bilinear_resize expects rank-2 raster");
    int sh = src.shape[0], sw = src.shape[1];
    if (dst_h <= 0 || dst_w <= 0) throw ShapeError("bilinear_resize target must be positive");
    Array out({dst_h, dst_w});
    double sy = dst_h > 1 ? static_cast<double>(sh - 1) / (dst_h - 1) : 0.0;
    double sx = dst_w > 1 ? static_cast<double>(sw - 1) / (dst_w - 1) : 0.0;
    for (int i = 0; i < dst_h; ++i) {
        double fy = i * sy;
        int y0 = static_cast<int>(fy);
        if (y0 >= sh - 1) y0 = sh > 1 ? sh - 2 : 0;
        double wy = sh > 1 ? fy - y0 : 0.0;
        for (int j = 0; j < dst_w; ++j) {
            double fx = j * sx;
            int x0 = static_cast<int>(fx);
            if (x0 >= sw - 1) x0 = sw > 1 ? sw - 2 : 0;
            double wx = sw > 1 ? fx - x0 : 0.0;
            int y1 = sh > 1 ? y0 + 1 : y0;
            int x1 = sw > 1 ? x0 + 1 : x0;
            double v = (1 - wy) * (1 - wx) * src.data[y0 * sw + x0] +
                       (1 - wy) * wx * src.data[y0 * sw + x1] +
                       wy * (1 - wx) * src.data[y1 * sw + x0] +
                       wy * wx * src.data[y1 * sw + x1];
            out.data[i * dst_w + j] = static_cast<float>(v);
        }
    }
    return out;
}

// Row r of the result holds the bilinear weights that produce dst pixel r
// from the flattened src grid; resize == matrix * flattened_src. Used to
// express positional-embedding resizing inside the autodiff graph.
inline Array bilinear_matrix(int src_h, int src_w, int dst_h, int dst_w) {
    Array m({dst_h * dst_w, src_h * src_w});
    double sy = dst_h > 1 ? static_cast<double>(src_h - 1) / (dst_h - 1) : 0.0;
    double sx = dst_w > 1 ? static_cast<double>(src_w - 1) / (dst_w - 1) : 0.0;
    for (int i = 0; i < dst_h; ++i) {
        double fy = i * sy;
        int y0 = static_cast<int>(fy);
        if (y0 >= src_h - 1) y0 = src_h > 1 ? src_h - 2 : 0;
        double wy = src_h > 1 ? fy - y0 : 0.0;
        for (int j = 0; j < dst_w; ++j) {
            double fx = j * sx;
            int x0 = static_cast<int>(fx);
            if (x0 >= src_w - 1) x0 = src_w > 1 ? src_w - 2 : 0;
            double wx = src_w > 1 ? fx - x0 : 0.0;
            int y1 = src_h > 1 ? y0 + 1 : y0;
            int x1 = src_w > 1 ? x0 + 1 : x0;
            float* row = &m.data[static_cast<std::size_t>(i * dst_w + j) * src_h * src_w];
            row[y0 * src_w + x0] += static_cast<float>((1 - wy) * (1 - wx));
            row[y0 * src_w + x1] += static_cast<float>((1 - wy) * wx);
            row[y1 * src_w + x0] += static_cast<float>(wy * (1 - wx));
            row[y1 * src_w + x1] += static_cast<float>(wy * wx);
        }
    }
    return m;
}

/// Softmax over the channel axis, applied independently at every location.
inline ProtoGrid channel_softmax(const FeatureGrid& z) {
    ProtoGrid g{z.h, z.w, z.d, Array(z.values.shape)};
    int d = z.d;
    std::size_t locs = static_cast<std::size_t>(z.h) * z.w;
    for (std::size_t l = 0; l < locs; ++l) {
        const float* in = &z.values.data[l * d];
        float* out = &g.values.data[l * d];
        double mx = in[0];
        for (int k = 1; k < d; ++k) mx = std::max(mx, static_cast<double>(in[k]));
        double sum = 0.0;
        std::vector<double> e(d);
        for (int k = 0; k < d; ++k) {
            e[k] = std::exp(in[k] - mx);
            sum += e[k];
        }
        for (int k = 0; k < d; ++k) out[k] = static_cast<float>(e[k] / sum);
    }
    return g;
}

inline PresenceVector presence_pool(const ProtoGrid& g) {
    PresenceVector pv;
    pv.p = Array({g.d});
    pv.argmax.assign(g.d, {0, 0});
    for (int k = 0; k < g.d; ++k) {
        float best = g.values.data[k];
        int by = 0, bx = 0;
        for (int y = 0; y < g.h; ++y)
            for (int x = 0; x < g.w; ++x) {
                float v = g.values.data[(static_cast<std::size_t>(y) * g.w + x) * g.d + k];
                if (v > best) { best = v; by = y; bx = x; }
            }
        pv.p.data[k] = best;
        pv.argmax[k] = {bx, by};
    }
    return pv;
}

/// Channel d upsampled to pixel space, clamped to [0,1].
inline ActivationMap activation_map(const ProtoGrid& g, int d, int target_w, int target_h) {
    if (d < 0 || d >= g.d)
        throw std::out_of_range("prototype id " + std::to_string(d) + " out of range 0.." +
                                std::to_string(g.d - 1));
    Array channel({g.h, g.w});
    for (int y = 0; y < g.h; ++y)
        for (int x = 0; x < g.w; ++x)
            channel.data[y * g.w + x] =
                g.values.data[(static_cast<std::size_t>(y) * g.w + x) * g.d + d];
    ActivationMap m;
    m.prototype = d;
    m.raster = bilinear_resize(channel, target_h, target_w);
    for (auto& v : m.raster.data) v = std::clamp(v, 0.0f, 1.0f);
    return m;
}

}  // namespace patchproto
