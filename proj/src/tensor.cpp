#include "feainf/tensor.hpp"

#include <cstring>
#include <istream>
#include <ostream>
#include <sstream>

namespace feainf {

int64_t numel_of(const Shape& shape) {
    int64_t n = 1;
    for (int e : shape) {
        if (e <= 0) throw ShapeError("tensor extent must be positive, got " + std::to_string(e));
        n *= e;
    }
    return n;
}

Tensor::Tensor(Shape s) : shape(std::move(s)), data(static_cast<size_t>(numel_of(shape)), 0.0) {}

Tensor::Tensor(Shape s, double fill) : shape(std::move(s)), data(static_cast<size_t>(numel_of(shape)), fill) {}

Tensor Tensor::scalar(double v) {
    Tensor t({1});
    t.data[0] = v;
    return t;
}

Tensor Tensor::from(Shape s, std::vector<double> values) {
    if (numel_of(s) != static_cast<int64_t>(values.size()))
        throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " + shape_str(s));
    Tensor t;
    t.shape = std::move(s);
    t.data = std::move(values);
    return t;
}

bool Tensor::all_finite() const {
    for (double v : data)
        if (!std::isfinite(v)) return false;
    return true;
}

void Tensor::fill(double v) {
    for (double& x : data) x = v;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ")";
    return os.str();
}

// Raw little-endian writes; the build targets little-endian hosts only.
template <typename T>
static void put(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
static T get(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw DataError("unexpected end of stream while reading tensor");
    return v;
}

void write_tensor(std::ostream& os, const Tensor& t) {
    put<uint32_t>(os, static_cast<uint32_t>(t.shape.size()));
    for (int e : t.shape) put<uint32_t>(os, static_cast<uint32_t>(e));
    os.write(reinterpret_cast<const char*>(t.data.data()),
             static_cast<std::streamsize>(t.data.size() * sizeof(double)));
}

Tensor read_tensor(std::istream& is) {
    uint32_t rank = get<uint32_t>(is);
    if (rank > 8) throw DataError("tensor rank " + std::to_string(rank) + " out of range");
    Shape shape(rank);
    for (uint32_t i = 0; i < rank; ++i) shape[i] = static_cast<int>(get<uint32_t>(is));
    Tensor t(shape);
    is.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    if (!is) throw DataError("unexpected end of stream while reading tensor payload");
    return t;
}

} // namespace feainf
