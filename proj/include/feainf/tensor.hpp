#pragma once

#include <cmath>
#include <cstdint>
#include <iosfwd>
#include <vector>

#include "feainf/errors.hpp"

namespace feainf {

using Shape = std::vector<int>;

int64_t numel_of(const Shape& shape);

/// Dense row-major array of 64-bit reals. Rank-1 shape {1} is used for scalars.
struct Tensor {
    Shape shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(Shape s);
    Tensor(Shape s, double fill);

    static Tensor scalar(double v);
    static Tensor from(Shape s, std::vector<double> values);

    int rank() const { return static_cast<int>(shape.size()); }
    int numel() const { return static_cast<int>(data.size()); }

    double& operator[](int i) { return data[static_cast<size_t>(i)]; }
    double operator[](int i) const { return data[static_cast<size_t>(i)]; }

    // 2-D (rows, cols) and 3-D (h, w, c) access; no bounds checks in release.
    double& at2(int i, int j) { return data[static_cast<size_t>(i) * shape[1] + j]; }
    double at2(int i, int j) const { return data[static_cast<size_t>(i) * shape[1] + j]; }
    double& at3(int h, int w, int c) {
        return data[(static_cast<size_t>(h) * shape[1] + w) * shape[2] + c];
    }
    double at3(int h, int w, int c) const {
        return data[(static_cast<size_t>(h) * shape[1] + w) * shape[2] + c];
    }

    bool same_shape(const Tensor& other) const { return shape == other.shape; }
    bool all_finite() const;
    void fill(double v);
};

std::string shape_str(const Shape& shape);

// Checkpoint wire format: u32 rank, u32 extents, then raw little-endian f64 values.
void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);

} // namespace feainf
