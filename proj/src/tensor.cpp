#include "ecgrobust/tensor.hpp"

#include <cmath>
#include <sstream>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "ecgrobust/errors.hpp"

namespace ecgrobust {

namespace {

// Large activation tensors are allocated and freed once per op; keeping them
// in the arena instead of per-allocation mmap avoids refaulting the pages.
struct AllocatorTuning {
  AllocatorTuning() {
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 256 * 1024 * 1024);
    mallopt(M_TRIM_THRESHOLD, 256 * 1024 * 1024);
#endif
  }
};
const AllocatorTuning g_allocator_tuning;

}  // namespace

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (std::int64_t d : shape) {
    if (d <= 0) throw ParameterError("shape dimensions must be positive, got " + shape_string(shape));
    n *= d;
  }
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
  data_.assign(static_cast<std::size_t>(shape_numel(shape_)), 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)) {
  if (shape_numel(shape_) != static_cast<std::int64_t>(data.size())) {
    throw ParameterError("tensor data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_string(shape_));
  }
  data_.assign(data.begin(), data.end());
}

Tensor Tensor::scalar(double v) { return Tensor({}, {v}); }

Tensor Tensor::full(Shape shape, double v) {
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_.assign(static_cast<std::size_t>(shape_numel(t.shape_)), v);
  return t;
}

Tensor Tensor::uninit(Shape shape) {
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_.resize(static_cast<std::size_t>(shape_numel(t.shape_)));
  return t;
}

Tensor Tensor::from(std::initializer_list<double> v) {
  return Tensor({static_cast<std::int64_t>(v.size())}, std::vector<double>(v));
}

std::int64_t Tensor::dim(int i) const {
  if (i < 0 || i >= rank()) throw ParameterError("tensor dim index out of range");
  return shape_[static_cast<std::size_t>(i)];
}

double Tensor::item() const {
  if (numel() != 1) {
    throw ParameterError("item() requires a single-element tensor, shape is " +
                         shape_string(shape_));
  }
  return data_[0];
}

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

double Tensor::max_abs() const {
  double m = 0.0;
  for (double v : data_) m = std::max(m, std::fabs(v));
  return m;
}

}  // namespace ecgrobust
