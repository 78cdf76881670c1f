#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string>
#include <vector>

#include "fourierage/errors.hpp"

namespace fourierage {

// Dense row-major float32 array with shape metadata. Values are treated as
// immutable once a tensor is handed to the autodiff tape.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape)
        : shape_(std::move(shape)), data_(checked_size(shape_), 0.0f) {}

    Tensor(std::vector<int> shape, std::vector<float> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (static_cast<std::int64_t>(data_.size()) != checked_size(shape_)) {
            throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                                 " does not match shape " + shape_string());
        }
    }

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<int> shape, float v) {
        Tensor t(std::move(shape));
        for (auto& x : t.data_) x = v;
        return t;
    }

    static Tensor scalar(float v) { return Tensor({1}, {v}); }

    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
    const std::vector<int>& shape() const { return shape_; }
    std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }

    float* data() { return data_.data(); }
    const float* data() const { return data_.data(); }
    float& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    float operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

    // Multi-index accessors; slow path, intended for tests and glue code.
    float at(std::initializer_list<int> idx) const { return data_[flat_index(idx)]; }
    float& at(std::initializer_list<int> idx) { return data_[flat_index(idx)]; }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    // Scalar value of a 1-element tensor.
    float item() const {
        if (size() != 1) throw ContractError("item() requires a 1-element tensor, got " + shape_string());
        return data_[0];
    }

    bool all_finite() const;

    // Logical reshape; element count must be preserved.
    Tensor reshaped(std::vector<int> new_shape) const {
        if (checked_size(new_shape) != size()) {
            throw DimensionError("reshape " + shape_string() + " -> incompatible element count");
        }
        return Tensor(std::move(new_shape), data_);
    }

    std::string shape_string() const;

    static std::int64_t shape_size(const std::vector<int>& shape);

private:
    static std::int64_t checked_size(const std::vector<int>& shape);
    std::size_t flat_index(std::initializer_list<int> idx) const;

    std::vector<int> shape_;
    std::vector<float> data_;
};

// Seeded helpers; all randomness in the project flows through std::mt19937
// instances so runs are reproducible on one machine.
Tensor randn(std::vector<int> shape, std::mt19937& rng, float stddev = 1.0f);
Tensor rand_uniform(std::vector<int> shape, std::mt19937& rng, float lo, float hi);

}  // namespace fourierage
