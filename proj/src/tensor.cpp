#include "fourierage/tensor.hpp"

#include <cmath>
#include <sstream>

namespace fourierage {

std::int64_t Tensor::shape_size(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    return shape.empty() ? 0 : n;
}

std::int64_t Tensor::checked_size(const std::vector<int>& shape) {
    if (shape.empty()) throw DimensionError("tensor shape must have at least one axis");
    std::int64_t n = 1;
    for (int d : shape) {
        if (d < 1) throw DimensionError("tensor axis length must be >= 1");
        n *= d;
    }
    return n;
}

std::size_t Tensor::flat_index(std::initializer_list<int> idx) const {
    if (static_cast<int>(idx.size()) != rank()) {
        throw DimensionError("index rank " + std::to_string(idx.size()) + " != tensor rank " +
                             std::to_string(rank()));
    }
    std::int64_t flat = 0;
    int axis = 0;
    for (int i : idx) {
        const int d = shape_[static_cast<std::size_t>(axis)];
        if (i < 0 || i >= d) throw DimensionError("index out of bounds for axis " + std::to_string(axis));
        flat = flat * d + i;
        ++axis;
    }
    return static_cast<std::size_t>(flat);
}

bool Tensor::all_finite() const {
    for (float v : data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

std::string Tensor::shape_string() const {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape_.size(); ++i) {
        if (i) os << ',';
        os << shape_[i];
    }
    os << ']';
    return os.str();
}

Tensor randn(std::vector<int> shape, std::mt19937& rng, float stddev) {
    Tensor t(std::move(shape));
    std::normal_distribution<float> dist(0.0f, stddev);
    for (std::int64_t i = 0; i < t.size(); ++i) t[i] = dist(rng);
    return t;
}

Tensor rand_uniform(std::vector<int> shape, std::mt19937& rng, float lo, float hi) {
    Tensor t(std::move(shape));
    std::uniform_real_distribution<float> dist(lo, hi);
    for (std::int64_t i = 0; i < t.size(); ++i) t[i] = dist(rng);
    return t;
}

}  // namespace fourierage
