#pragma once

#include <cstdint>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace ecgrobust {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

// vector whose resize leaves doubles uninitialized; kernels that overwrite
// every element skip the zero-fill pass
template <class T, class A = std::allocator<T>>
struct default_init_allocator : A {
  template <class U>
  struct rebind {
    using other =
        default_init_allocator<U, typename std::allocator_traits<A>::template rebind_alloc<U>>;
  };
  using A::A;
  template <class U>
  void construct(U* ptr) noexcept(std::is_nothrow_default_constructible_v<U>) {
    ::new (static_cast<void*>(ptr)) U;
  }
  template <class U, class... Args>
  void construct(U* ptr, Args&&... args) {
    std::allocator_traits<A>::construct(static_cast<A&>(*this), ptr,
                                        std::forward<Args>(args)...);
  }
};

using RawVec = std::vector<double, default_init_allocator<double>>;

// Dense row-major array of 64-bit floats. A plain value type: ops never
// mutate an existing tensor, they build new ones.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);  // zero-filled
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v);
  static Tensor full(Shape shape, double v);
  static Tensor uninit(Shape shape);  // contents undefined until written
  static Tensor from(std::initializer_list<double> v);  // 1-D

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
  std::int64_t dim(int i) const;

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }
  const double* ptr() const { return data_.data(); }
  double* ptr() { return data_.data(); }

  double item() const;  // requires numel() == 1

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
  bool all_finite() const;
  double max_abs() const;

 private:
  Shape shape_;
  RawVec data_;
};

}  // namespace ecgrobust
