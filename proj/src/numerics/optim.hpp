#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "numerics/tape.hpp"
#include "numerics/tensor.hpp"

namespace morl::numerics {

// Flat, named storage of every trainable tensor for one model. Optimizer
// moments index into the same flattened order.
template <class S>
class ParameterStoreT {
 public:
  TensorT<S> add(const std::string& name, TensorT<S> t) {
    if (!t.requires_grad())
      throw std::invalid_argument("parameter '" + name + "' must require gradients");
    for (const auto& e : entries_)
      if (e.name == name)
        throw std::invalid_argument("duplicate parameter name '" + name + "'");
    entries_.push_back({name, t});
    return t;
  }

  struct Entry {
    std::string name;
    TensorT<S> tensor;
  };

  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }

  std::size_t tensor_count() const { return entries_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.tensor.numel();
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) e.tensor.zero_grad();
  }

  std::vector<S> flat_values() const {
    std::vector<S> out;
    out.reserve(scalar_count());
    for (const auto& e : entries_)
      out.insert(out.end(), e.tensor.value().begin(), e.tensor.value().end());
    return out;
  }

  std::vector<S> flat_grads() const {
    std::vector<S> out;
    out.reserve(scalar_count());
    for (const auto& e : entries_)
      out.insert(out.end(), e.tensor.grad().begin(), e.tensor.grad().end());
    return out;
  }

  void set_flat_values(const std::vector<S>& v) {
    if (v.size() != scalar_count())
      throw std::invalid_argument("set_flat_values: size mismatch");
    std::size_t off = 0;
    for (auto& e : entries_) {
      auto dst = e.tensor.value();
      std::copy(v.begin() + off, v.begin() + off + dst.size(), dst.begin());
      off += dst.size();
    }
  }

 private:
  std::vector<Entry> entries_;
};

template <class S>
struct AdamWConfigT {
  S lr = S(1e-3);
  S beta1 = S(0.9);
  S beta2 = S(0.99);
  S eps = S(1e-8);
  S weight_decay = S(0);
};

// Thrown when a gradient component is non-finite; the update is aborted
// without touching parameters or moments.
struct NonFiniteGradient : std::runtime_error {
  explicit NonFiniteGradient(std::size_t index)
      : std::runtime_error("non-finite gradient at flat parameter index " +
                           std::to_string(index)),
        flat_index(index) {}
  std::size_t flat_index;
};

template <class S>
class AdamWT {
 public:
  AdamWT(const ParameterStoreT<S>& params, AdamWConfigT<S> cfg)
      : cfg_(cfg), m_(params.scalar_count(), S(0)), v_(params.scalar_count(), S(0)) {}

  // One decoupled-weight-decay Adam update over all parameters. Zeroes the
  // gradients afterwards.
  void step(ParameterStoreT<S>& params);

  std::int64_t step_count() const { return step_; }
  const AdamWConfigT<S>& config() const { return cfg_; }

  std::vector<S>& first_moments() { return m_; }
  std::vector<S>& second_moments() { return v_; }
  void restore(std::vector<S> m, std::vector<S> v, std::int64_t step) {
    m_ = std::move(m);
    v_ = std::move(v);
    step_ = step;
  }

 private:
  AdamWConfigT<S> cfg_;
  std::vector<S> m_, v_;
  std::int64_t step_ = 0;
};

// Scales all gradients so their global L2 norm is at most max_norm.
// Returns the pre-clip norm.
template <class S>
double clip_grad_norm(ParameterStoreT<S>& params, double max_norm);

using ParameterStore = ParameterStoreT<float>;
using AdamW = AdamWT<float>;
using AdamWConfig = AdamWConfigT<float>;

extern template class AdamWT<float>;
extern template class AdamWT<double>;
extern template double clip_grad_norm<float>(ParameterStoreT<float>&, double);
extern template double clip_grad_norm<double>(ParameterStoreT<double>&, double);

// Max over parameters of |analytic - numeric| / max(|analytic|, |numeric|,
// 1e-8), with numeric gradients from central differences of loss_fn.
// loss_fn must build a scalar loss on the tape it is given.
template <class S>
double grad_check(const std::function<TensorT<S>(TapeT<S>&)>& loss_fn,
                  ParameterStoreT<S>& params, double eps);

extern template double grad_check<float>(
    const std::function<TensorT<float>(TapeT<float>&)>&, ParameterStoreT<float>&, double);
extern template double grad_check<double>(
    const std::function<TensorT<double>(TapeT<double>&)>&, ParameterStoreT<double>&,
    double);

}  // namespace morl::numerics
