#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "uovn/common.hpp"

namespace uovn {

// Dense row-major f32 tensor. Model state is 32-bit; reductions that
// consume it accumulate in double.
class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape);
    Tensor(std::vector<int> shape, std::vector<float> data);

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
    static Tensor full(std::vector<int> shape, float v);
    static Tensor scalar(float v) { return Tensor({1}, {v}); }
    static Tensor from(std::vector<int> shape, std::initializer_list<float> vals);

    const std::vector<int>& shape() const { return shape_; }
    int dim(int axis) const { return shape_[static_cast<std::size_t>(axis)]; }
    int rank() const { return static_cast<int>(shape_.size()); }
    std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }

    float* data() { return data_.data(); }
    const float* data() const { return data_.data(); }
    std::vector<float>& vec() { return data_; }
    const std::vector<float>& vec() const { return data_; }

    float& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    float operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

    // 2-D / 3-D accessors for the common cases.
    float& at(int i, int j) { return data_[static_cast<std::size_t>(i) * shape_[1] + j]; }
    float at(int i, int j) const { return data_[static_cast<std::size_t>(i) * shape_[1] + j]; }
    float& at(int i, int j, int k) {
        return data_[(static_cast<std::size_t>(i) * shape_[1] + j) * shape_[2] + k];
    }
    float at(int i, int j, int k) const {
        return data_[(static_cast<std::size_t>(i) * shape_[1] + j) * shape_[2] + k];
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
    bool all_finite() const;

    // Optional gradient buffer (same shape); used on leaves/parameters.
    std::optional<std::vector<float>>& grad() { return grad_; }
    const std::optional<std::vector<float>>& grad() const { return grad_; }
    void ensure_grad();

  private:
    std::vector<int> shape_;
    std::vector<float> data_;
    std::optional<std::vector<float>> grad_;
};

std::int64_t shape_numel(const std::vector<int>& shape);
std::string shape_str(const std::vector<int>& shape);

// "UOVT" container: magic, u32 LE rank, u32 LE extents, f32 LE payload.
void write_tensor(const std::string& path, const Tensor& t);
Tensor read_tensor(const std::string& path);

}  // namespace uovn
