#include "numerics/optim.hpp"

#include <cmath>

namespace morl::numerics {

template <class S>
void AdamWT<S>::step(ParameterStoreT<S>& params) {
  // Validate first: an aborted update must leave everything untouched.
  std::size_t flat = 0;
  for (const auto& e : params.entries())
    for (S g : e.tensor.grad()) {
      if (!std::isfinite(static_cast<double>(g))) throw NonFiniteGradient(flat);
      ++flat;
    }

  ++step_;
  const double bc1 = 1.0 - std::pow(static_cast<double>(cfg_.beta1), step_);
  const double bc2 = 1.0 - std::pow(static_cast<double>(cfg_.beta2), step_);

  flat = 0;
  for (auto& e : params.entries()) {
    auto w = e.tensor.value();
    auto g = e.tensor.grad();
    for (std::size_t i = 0; i < w.size(); ++i, ++flat) {
      m_[flat] = cfg_.beta1 * m_[flat] + (S(1) - cfg_.beta1) * g[i];
      v_[flat] = cfg_.beta2 * v_[flat] + (S(1) - cfg_.beta2) * g[i] * g[i];
      const double mhat = static_cast<double>(m_[flat]) / bc1;
      const double vhat = static_cast<double>(v_[flat]) / bc2;
      const double update =
          mhat / (std::sqrt(vhat) + static_cast<double>(cfg_.eps)) +
          static_cast<double>(cfg_.weight_decay) * static_cast<double>(w[i]);
      w[i] -= static_cast<S>(static_cast<double>(cfg_.lr) * update);
    }
  }
  params.zero_grad();
}

template <class S>
double clip_grad_norm(ParameterStoreT<S>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& e : params.entries())
    for (S g : e.tensor.grad()) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const S scale = static_cast<S>(max_norm / norm);
    for (auto& e : params.entries())
      for (auto& g : e.tensor.grad()) g *= scale;
  }
  return norm;
}

template <class S>
double grad_check(const std::function<TensorT<S>(TapeT<S>&)>& loss_fn,
                  ParameterStoreT<S>& params, double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("grad_check: eps must be > 0");

  params.zero_grad();
  {
    TapeT<S> tape;
    TensorT<S> loss = loss_fn(tape);
    tape.backward(loss);
  }
  const std::vector<S> analytic = params.flat_grads();
  params.zero_grad();

  const auto eval = [&]() -> double {
    TapeT<S> tape(/*recording=*/false);
    return static_cast<double>(loss_fn(tape).item());
  };

  double max_rel = 0.0;
  std::size_t flat = 0;
  for (auto& e : params.entries()) {
    auto w = e.tensor.value();
    for (std::size_t i = 0; i < w.size(); ++i, ++flat) {
      const S saved = w[i];
      w[i] = saved + static_cast<S>(eps);
      const double up = eval();
      w[i] = saved - static_cast<S>(eps);
      const double down = eval();
      w[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = static_cast<double>(analytic[flat]);
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      max_rel = std::max(max_rel, std::abs(a - numeric) / denom);
    }
  }
  return max_rel;
}

template class AdamWT<float>;
template class AdamWT<double>;
template double clip_grad_norm<float>(ParameterStoreT<float>&, double);
template double clip_grad_norm<double>(ParameterStoreT<double>&, double);
template double grad_check<float>(const std::function<TensorT<float>(TapeT<float>&)>&,
                                  ParameterStoreT<float>&, double);
template double grad_check<double>(const std::function<TensorT<double>(TapeT<double>&)>&,
                                   ParameterStoreT<double>&, double);

}  // namespace morl::numerics
