#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "numerics/tensor.hpp"

namespace morl::numerics {

// Op kinds accepted by the generic forward_op dispatcher.
enum class OpKind {
  matmul,
  add,
  multiply,
  tanh,
  relu,
  softmax_rows,
  log,
  gather_rows,
  layer_norm,
  mean,
  sum,
  squared_error,
  cross_entropy_from_logits,
};

std::string_view op_name(OpKind kind);

// Define-by-run reverse-mode tape. Ops compute their value immediately and,
// while recording, push a backward closure; backward() replays the closures
// in reverse (a valid reverse-topological order by construction) and then
// clears the tape. Values and gradients are stored in S; reductions
// accumulate in double.
template <class S>
class TapeT {
 public:
  using T = TensorT<S>;

  explicit TapeT(bool recording = true);

  bool recording() const { return recording_; }
  std::size_t size() const { return nodes_.size(); }

  // --- spec op set ---------------------------------------------------------
  T matmul(const T& a, const T& b);
  // Elementwise; also accepts a row vector rhs broadcast over the rows of a.
  T add(const T& a, const T& b);
  T multiply(const T& a, const T& b);
  T tanh(const T& x);
  T relu(const T& x);
  T softmax_rows(const T& x);
  T log(const T& x);
  // ids: integer-valued tensor, one table row index per output row.
  T gather_rows(const T& table, const T& ids);
  T layer_norm(const T& x, const T& gamma, const T& beta);
  T mean(const T& x);
  T sum(const T& x);
  T squared_error(const T& a, const T& b);
  T cross_entropy_from_logits(const T& logits, const T& targets);

  T forward_op(OpKind kind, std::span<const T> inputs);

  // --- additional ops used by the models (same tape contract) --------------
  T exp(const T& x);
  T sqrt(const T& x);
  T softplus(const T& x);
  T scale(const T& x, S c);
  T scale_by_scalar(const T& x, const T& s);
  T concat_rows(const T& a, const T& b);
  T slice_rows(const T& x, int row_begin, int row_end);
  T pick_per_row(const T& x, const T& ids);
  T log_softmax_rows(const T& x);
  T rows_l2_normalize(const T& x);
  T transpose(const T& x);
  T clamp(const T& x, S lo, S hi);
  T minimum(const T& a, const T& b);
  T causal_self_attention(const T& q, const T& k, const T& v, int n_heads);

  // Accumulates d(loss)/d(leaf) into every reachable grad buffer, then
  // clears the tape. loss must be a scalar produced by ops on this tape.
  void backward(const T& loss);

 private:
  T make_output(std::vector<int> shape, std::initializer_list<const T*> inputs);
  void record(std::function<void()> fn);

  std::vector<std::function<void()>> nodes_;
  bool recording_ = true;
  std::uint64_t id_ = 0;
};

using Tape = TapeT<float>;

extern template class TapeT<float>;
extern template class TapeT<double>;

}  // namespace morl::numerics
