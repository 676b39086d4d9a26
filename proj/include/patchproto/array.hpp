#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace patchproto {

struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (int d : s) {
        if (d <= 0) throw ShapeError("non-positive dimension " + std::to_string(d));
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

/// Dense row-major float32 array. The raw storage type for images, feature
/// grids, presence vectors and model weights.
struct Array {
    Shape shape;
    std::vector<float> data;

    Array() = default;
    explicit Array(Shape s) : shape(std::move(s)), data(shape_numel(shape), 0.0f) {}
    Array(Shape s, std::vector<float> d) : shape(std::move(s)), data(std::move(d)) {
        if (data.size() != shape_numel(shape))
            throw ShapeError("data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
    }
    static Array scalar(float v) { return Array({1}, {v}); }

    std::size_t numel() const { return data.size(); }
    int rank() const { return static_cast<int>(shape.size()); }

    float& at(std::size_t i) { return data[i]; }
    float at(std::size_t i) const { return data[i]; }

    bool all_finite() const {
        return std::all_of(data.begin(), data.end(),
                           [](float v) { return std::isfinite(v); });
    }
};

inline bool same_shape(const Shape& a, const Shape& b) { return a == b; }

}  // namespace patchproto
