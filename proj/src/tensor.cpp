#include "ddep/tensor.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

#include "ddep/error.hpp"

namespace ddep {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidArgument: return "invalid-argument";
    case ErrorKind::InvalidData: return "invalid-data";
    case ErrorKind::ContractViolation: return "contract-violation";
    case ErrorKind::ConfigMismatch: return "config-mismatch";
    case ErrorKind::BadMagic: return "bad-magic";
    case ErrorKind::Truncated: return "truncated";
    case ErrorKind::VersionMismatch: return "version-mismatch";
    case ErrorKind::ShapeMismatch: return "shape-mismatch";
    case ErrorKind::Io: return "io-error";
    case ErrorKind::UndefinedMetric: return "undefined-metric";
    case ErrorKind::Diagnostic: return "diagnostic";
    case ErrorKind::InvalidConfig: return "invalid-config";
  }
  return "error";
}

Shape::Shape(std::initializer_list<int> dims) : Shape(std::vector<int>(dims)) {}

Shape::Shape(std::vector<int> dims) : dims_(std::move(dims)) {
  for (int d : dims_) {
    require(d > 0, ErrorKind::InvalidArgument, "tensor extents must be positive, got " + str());
  }
}

std::size_t Shape::numel() const {
  if (dims_.empty()) return 0;
  return std::accumulate(dims_.begin(), dims_.end(), std::size_t{1},
                         [](std::size_t acc, int d) { return acc * static_cast<std::size_t>(d); });
}

std::string Shape::str() const {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < dims_.size(); ++i) os << (i ? "x" : "") << dims_[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, float fill) : shape_(std::move(shape)), data_(shape_.numel(), fill) {}

Tensor::Tensor(Shape shape, std::vector<float> values) : shape_(std::move(shape)), data_(std::move(values)) {
  require(data_.size() == shape_.numel(), ErrorKind::ShapeMismatch,
          "buffer of " + std::to_string(data_.size()) + " floats does not fit shape " + shape_.str());
}

float& Tensor::at(int n, int c, int h, int w) {
  const std::size_t idx =
      ((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w;
  return data_[idx];
}

float Tensor::at(int n, int c, int h, int w) const {
  const std::size_t idx =
      ((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w;
  return data_[idx];
}

Tensor Tensor::reshaped(Shape shape) const {
  require(shape.numel() == data_.size(), ErrorKind::ShapeMismatch,
          "cannot reshape " + shape_.str() + " to " + shape.str());
  return Tensor(std::move(shape), data_);
}

void Tensor::fill(float value) { std::fill(data_.begin(), data_.end(), value); }

bool Tensor::all_finite() const {
  for (float v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* context) {
  if (a.shape() != b.shape()) {
    fail(ErrorKind::ShapeMismatch,
         std::string(context) + ": shapes " + a.shape().str() + " and " + b.shape().str() + " differ");
  }
}

}  // namespace ddep
