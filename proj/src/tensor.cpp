#include "phg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

#include "phg/error.hpp"

namespace phg {

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

Tensor::Tensor(Shape shape, float fill) : shape_(std::move(shape)), data_(numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<float> values)
    : shape_(std::move(shape)), data_(std::move(values)) {
  if (numel(shape_) != data_.size()) {
    throw DataError("tensor shape " + shape_str(shape_) + " does not match " +
                    std::to_string(data_.size()) + " values");
  }
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

Tensor Tensor::reshaped(Shape shape) const {
  if (numel(shape) != data_.size()) {
    throw DataError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  return Tensor(std::move(shape), data_);
}

Tensor Tensor::channels(std::size_t begin, std::size_t end) const {
  if (rank() != 3 || begin > end || end > shape_[0]) {
    throw DataError("bad channel slice [" + std::to_string(begin) + "," + std::to_string(end) +
                    ") of " + shape_str(shape_));
  }
  const std::size_t plane = shape_[1] * shape_[2];
  std::vector<float> out(data_.begin() + static_cast<std::ptrdiff_t>(begin * plane),
                         data_.begin() + static_cast<std::ptrdiff_t>(end * plane));
  return Tensor({end - begin, shape_[1], shape_[2]}, std::move(out));
}

void ensure_finite(const Tensor& t, const char* what) {
  if (!t.all_finite()) throw NumericError(std::string("non-finite value produced by ") + what);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DataError("shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  }
  return m;
}

LabelMap argmax_channels(const Tensor& scores) {
  if (scores.rank() != 3) throw DataError("argmax expects [K,H,W], got " + shape_str(scores.shape()));
  const std::size_t k = scores.dim(0), h = scores.dim(1), w = scores.dim(2), plane = h * w;
  if (k > 256) throw DataError("too many classes for a label map");
  LabelMap out(h, w);
  const auto d = scores.data();
  for (std::size_t p = 0; p < plane; ++p) {
    std::size_t best = 0;
    float best_v = d[p];
    for (std::size_t c = 1; c < k; ++c) {
      const float v = d[c * plane + p];
      if (v > best_v) {
        best_v = v;
        best = c;
      }
    }
    out.labels[p] = static_cast<std::uint8_t>(best);
  }
  return out;
}

Tensor one_hot(const LabelMap& labels, std::size_t classes) {
  Tensor out({classes, labels.height, labels.width});
  const std::size_t plane = labels.size();
  for (std::size_t p = 0; p < plane; ++p) {
    const std::size_t c = labels.labels[p];
    if (c >= classes) {
      throw DataError("label " + std::to_string(c) + " out of range for " +
                      std::to_string(classes) + " classes");
    }
    out[c * plane + p] = 1.0f;
  }
  return out;
}

Tensor softmax_channels(const Tensor& logits) {
  if (logits.rank() != 3) throw DataError("softmax expects [K,H,W], got " + shape_str(logits.shape()));
  const std::size_t k = logits.dim(0), plane = logits.dim(1) * logits.dim(2);
  Tensor out(logits.shape());
  const auto in = logits.data();
  auto o = out.data();
  for (std::size_t p = 0; p < plane; ++p) {
    float m = in[p];
    for (std::size_t c = 1; c < k; ++c) m = std::max(m, in[c * plane + p]);
    double z = 0.0;
    for (std::size_t c = 0; c < k; ++c) z += std::exp(static_cast<double>(in[c * plane + p] - m));
    for (std::size_t c = 0; c < k; ++c) {
      o[c * plane + p] = static_cast<float>(std::exp(static_cast<double>(in[c * plane + p] - m)) / z);
    }
  }
  return out;
}

}  // namespace phg
