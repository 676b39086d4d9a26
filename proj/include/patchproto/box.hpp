#pragma once

#include <algorithm>

namespace patchproto {

/// Axis-aligned pixel box, half-open: covers columns [x_min, x_max) and
/// rows [y_min, y_max).
struct Box {
    int x_min = 0, y_min = 0, x_max = 0, y_max = 0;

    int width() const { return x_max - x_min; }
    int height() const { return y_max - y_min; }
    bool valid() const { return x_min < x_max && y_min < y_max; }

    bool intersects(const Box& o) const {
        int ix = std::min(x_max, o.x_max) - std::max(x_min, o.x_min);
        int iy = std::min(y_max, o.y_max) - std::max(y_min, o.y_min);
        return ix > 0 && iy > 0;
    }

    // intersection area / own area, for the optional minimum-overlap criterion
    double overlap_fraction(const Box& o) const {
        int ix = std::min(x_max, o.x_max) - std::max(x_min, o.x_min);
        int iy = std::min(y_max, o.y_max) - std::max(y_min, o.y_min);
        if (ix <= 0 || iy <= 0) return 0.0;
        return static_cast<double>(ix) * iy / (static_cast<double>(width()) * height());
    }

    Box clipped(int img_w, int img_h) const {
        Box b{std::max(x_min, 0), std::max(y_min, 0), std::min(x_max, img_w),
              std::min(y_max, img_h)};
        return b;
    }

    bool operator==(const Box& o) const = default;
};

inline Box flip_box_horizontal(const Box& b, int img_w) {
    return Box{img_w - b.x_max, b.y_min, img_w - b.x_min, b.y_max};
}

}  // namespace patchproto
