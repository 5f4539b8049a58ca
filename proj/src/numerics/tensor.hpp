#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace morl::numerics {

// Dense row-major tensor of rank 1 or 2. A rank-1 tensor of n elements is
// treated as a 1-by-n row wherever a matrix view is needed.
template <class S>
struct TensorDataT {
  std::vector<int> shape;
  std::vector<S> value;
  std::vector<S> grad;  // allocated iff needs_grad
  bool requires_grad = false;  // true only for user-declared leaves
  bool needs_grad = false;     // leaves with requires_grad, or any op output downstream of one
  std::uint64_t producer_tape = 0;  // nonzero iff produced by an op
};

template <class S>
class TensorT {
 public:
  TensorT() = default;

  static TensorT zeros(std::vector<int> shape, bool requires_grad = false) {
    TensorT t;
    t.d_ = std::make_shared<TensorDataT<S>>();
    t.d_->shape = std::move(shape);
    t.d_->value.assign(t.numel_of(t.d_->shape), S(0));
    t.d_->requires_grad = requires_grad;
    t.d_->needs_grad = requires_grad;
    if (requires_grad) t.d_->grad.assign(t.d_->value.size(), S(0));
    return t;
  }

  static TensorT from(std::vector<int> shape, std::vector<S> data,
                      bool requires_grad = false) {
    TensorT t = zeros(std::move(shape), requires_grad);
    if (data.size() != t.d_->value.size())
      throw std::invalid_argument("tensor: data length does not match shape");
    t.d_->value = std::move(data);
    return t;
  }

  static TensorT scalar(S v) { return from({1}, {v}); }

  bool defined() const { return d_ != nullptr; }
  const std::vector<int>& shape() const { return d_->shape; }
  std::size_t numel() const { return d_->value.size(); }
  bool is_scalar() const { return numel() == 1; }

  // Matrix view: rank-1 [n] reads as 1 x n.
  int rows() const { return d_->shape.size() == 1 ? 1 : d_->shape[0]; }
  int cols() const {
    return d_->shape.size() == 1 ? d_->shape[0] : d_->shape[1];
  }

  std::span<S> value() { return d_->value; }
  std::span<const S> value() const { return d_->value; }
  std::span<S> grad() { return d_->grad; }
  std::span<const S> grad() const { return d_->grad; }

  bool requires_grad() const { return d_->requires_grad; }
  bool needs_grad() const { return d_->needs_grad; }

  void zero_grad() {
    for (auto& g : d_->grad) g = S(0);
  }

  S item() const {
    if (!is_scalar()) throw std::invalid_argument("item(): tensor is not scalar");
    return d_->value[0];
  }

  TensorDataT<S>* data() { return d_.get(); }
  const TensorDataT<S>* data() const { return d_.get(); }
  std::shared_ptr<TensorDataT<S>> handle() const { return d_; }

  std::string shape_str() const {
    std::string s = "[";
    for (std::size_t i = 0; i < d_->shape.size(); ++i) {
      if (i) s += "x";
      s += std::to_string(d_->shape[i]);
    }
    return s + "]";
  }

 private:
  static std::size_t numel_of(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) {
      if (d <= 0) throw std::invalid_argument("tensor: nonpositive dimension");
      n *= static_cast<std::size_t>(d);
    }
    if (shape.empty() || shape.size() > 2)
      throw std::invalid_argument("tensor: rank must be 1 or 2");
    return n;
  }

  std::shared_ptr<TensorDataT<S>> d_;
};

using Tensor = TensorT<float>;

}  // namespace morl::numerics
