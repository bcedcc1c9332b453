#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "latentmark/errors.hpp"

namespace latentmark {

// Shape of a (channels, height, width) tensor.
struct Shape {
    int c = 0;
    int h = 0;
    int w = 0;

    std::size_t volume() const {
        return static_cast<std::size_t>(c) * static_cast<std::size_t>(h) *
               static_cast<std::size_t>(w);
    }
    bool operator==(const Shape&) const = default;
    std::string str() const {
        return "(" + std::to_string(c) + "," + std::to_string(h) + "," + std::to_string(w) + ")";
    }
};

inline void require_valid(const Shape& s, const char* what) {
    if (s.c <= 0 || s.h <= 0 || s.w <= 0)
        throw ShapeError(std::string(what) + ": non-positive shape " + s.str());
}

// Dense float64 tensor in row-major (c, h, w) layout.
struct LatentTensor {
    Shape shape;
    std::vector<double> data;

    LatentTensor() = default;
    explicit LatentTensor(Shape s) : shape(s), data(s.volume(), 0.0) { require_valid(s, "latent"); }

    double& at(int c, int y, int x) {
        return data[(static_cast<std::size_t>(c) * shape.h + y) * shape.w + x];
    }
    double at(int c, int y, int x) const {
        return data[(static_cast<std::size_t>(c) * shape.h + y) * shape.w + x];
    }
    std::size_t size() const { return data.size(); }
};

// Dense 8-bit image in row-major (c, h, w) layout, channel-planar.
struct ImageTensor {
    Shape shape;
    std::vector<std::uint8_t> data;

    ImageTensor() = default;
    explicit ImageTensor(Shape s) : shape(s), data(s.volume(), 0) { require_valid(s, "image"); }

    std::uint8_t& at(int c, int y, int x) {
        return data[(static_cast<std::size_t>(c) * shape.h + y) * shape.w + x];
    }
    std::uint8_t at(int c, int y, int x) const {
        return data[(static_cast<std::size_t>(c) * shape.h + y) * shape.w + x];
    }
    std::size_t size() const { return data.size(); }
};

inline void require_same_shape(const Shape& a, const Shape& b, const char* what) {
    if (!(a == b))
        throw ShapeError(std::string(what) + ": shape mismatch " + a.str() + " vs " + b.str());
}

}  // namespace latentmark
