#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace phg {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major float32 array. The element count always equals the product
// of the shape.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> values);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<const float> data() const { return data_; }
  std::span<float> data() { return data_; }
  const std::vector<float>& values() const { return data_; }

  float operator[](std::size_t i) const { return data_[i]; }
  float& operator[](std::size_t i) { return data_[i]; }

  // Rank-3 [C,H,W] accessors.
  float at(std::size_t c, std::size_t y, std::size_t x) const {
    return data_[(c * shape_[1] + y) * shape_[2] + x];
  }
  float& at(std::size_t c, std::size_t y, std::size_t x) {
    return data_[(c * shape_[1] + y) * shape_[2] + x];
  }

  bool all_finite() const;
  Tensor reshaped(Shape shape) const;

  // Channels [begin, end) of a rank-3 tensor.
  Tensor channels(std::size_t begin, std::size_t end) const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<float> data_;
};

// Throws NumericError naming `what` when any element is NaN or infinite.
void ensure_finite(const Tensor& t, const char* what);

double max_abs_diff(const Tensor& a, const Tensor& b);

// Per-pixel class indices, row-major [H,W].
struct LabelMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> labels;

  LabelMap() = default;
  LabelMap(std::size_t h, std::size_t w, std::uint8_t fill = 0)
      : height(h), width(w), labels(h * w, fill) {}

  std::size_t size() const { return labels.size(); }
  std::uint8_t at(std::size_t y, std::size_t x) const { return labels[y * width + x]; }
  std::uint8_t& at(std::size_t y, std::size_t x) { return labels[y * width + x]; }

  friend bool operator==(const LabelMap&, const LabelMap&) = default;
};

// Argmax over the channel axis of a [K,H,W] tensor; ties go to the lowest
// class index.
LabelMap argmax_channels(const Tensor& scores);

// [K,H,W] one-hot encoding. Throws DataError for labels >= classes.
Tensor one_hot(const LabelMap& labels, std::size_t classes);

// Channel-wise softmax of [K,H,W] logits.
Tensor softmax_channels(const Tensor& logits);

}  // namespace phg
