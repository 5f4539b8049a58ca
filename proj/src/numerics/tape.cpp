#include "numerics/tape.hpp"

#include <Eigen/Core>

#include <atomic>
#include <cmath>
#include <stdexcept>
#include <string>

namespace morl::numerics {
namespace {

std::atomic<std::uint64_t> g_tape_serial{1};

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MatMap = Eigen::Map<Mat<S>>;
template <class S>
using CMatMap = Eigen::Map<const Mat<S>>;

template <class S>
MatMap<S> vmat(TensorDataT<S>* d, int r, int c) {
  return MatMap<S>(d->value.data(), r, c);
}
template <class S>
MatMap<S> gmat(TensorDataT<S>* d, int r, int c) {
  return MatMap<S>(d->grad.data(), r, c);
}

[[noreturn]] void fail(std::string_view op, const std::string& detail) {
  throw std::invalid_argument(std::string(op) + ": " + detail);
}

template <class S>
void check_same_shape(std::string_view op, const TensorT<S>& a, const TensorT<S>& b) {
  if (a.shape() != b.shape())
    fail(op, "shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}

template <class S>
std::vector<int> int_ids(std::string_view op, const TensorT<S>& ids, int limit) {
  if (ids.needs_grad()) fail(op, "index tensor must not require gradients");
  std::vector<int> out(ids.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = static_cast<double>(ids.value()[i]);
    const int iv = static_cast<int>(v);
    if (static_cast<double>(iv) != v)
      fail(op, "index tensor holds non-integer value at position " + std::to_string(i));
    if (iv < 0 || iv >= limit)
      fail(op, "index " + std::to_string(iv) + " out of range [0," +
               std::to_string(limit) + ") at position " + std::to_string(i));
    out[i] = iv;
  }
  return out;
}

template <class S>
S sigmoid_stable(S x) {
  if (x >= S(0)) {
    const S e = std::exp(-x);
    return S(1) / (S(1) + e);
  }
  const S e = std::exp(x);
  return e / (S(1) + e);
}

constexpr double kLayerNormEps = 1e-5;

}  // namespace

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::matmul: return "matmul";
    case OpKind::add: return "add";
    case OpKind::multiply: return "multiply";
    case OpKind::tanh: return "tanh";
    case OpKind::relu: return "relu";
    case OpKind::softmax_rows: return "softmax_rows";
    case OpKind::log: return "log";
    case OpKind::gather_rows: return "gather_rows";
    case OpKind::layer_norm: return "layer_norm";
    case OpKind::mean: return "mean";
    case OpKind::sum: return "sum";
    case OpKind::squared_error: return "squared_error";
    case OpKind::cross_entropy_from_logits: return "cross_entropy_from_logits";
  }
  return "unknown";
}

template <class S>
TapeT<S>::TapeT(bool recording)
    : recording_(recording), id_(g_tape_serial.fetch_add(1)) {}

template <class S>
TensorT<S> TapeT<S>::make_output(std::vector<int> shape,
                                 std::initializer_list<const T*> inputs) {
  bool needs = false;
  for (const T* in : inputs) needs = needs || (*in).needs_grad();
  T out = T::zeros(std::move(shape), false);
  out.data()->needs_grad = needs;
  if (needs) out.data()->grad.assign(out.numel(), S(0));
  out.data()->producer_tape = id_;
  return out;
}

template <class S>
void TapeT<S>::record(std::function<void()> fn) {
  nodes_.push_back(std::move(fn));
}

template <class S>
void TapeT<S>::backward(const T& loss) {
  if (!recording_) fail("backward", "tape is not recording");
  if (!loss.is_scalar())
    fail("backward", "loss must be scalar, got " + loss.shape_str());
  if (loss.data()->producer_tape != id_)
    fail("backward", "loss was not produced on this tape");
  if (loss.needs_grad()) loss.handle()->grad[0] = S(1);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  nodes_.clear();
}

// ---------------------------------------------------------------------------

template <class S>
TensorT<S> TapeT<S>::matmul(const T& a, const T& b) {
  if (a.cols() != b.rows())
    fail("matmul", "inner dimensions differ: " + a.shape_str() + " vs " + b.shape_str());
  const int m = a.rows(), k = a.cols(), n = b.cols();
  T out = make_output({m, n}, {&a, &b});
  vmat(out.data(), m, n).noalias() =
      vmat(a.handle().get(), m, k) * vmat(b.handle().get(), k, n);
  if (recording_ && out.needs_grad()) {
    record([ad = a.handle(), bd = b.handle(), od = out.handle(), m, k, n] {
      auto dout = gmat(od.get(), m, n);
      if (ad->needs_grad)
        gmat(ad.get(), m, k).noalias() += dout * vmat(bd.get(), k, n).transpose();
      if (bd->needs_grad)
        gmat(bd.get(), k, n).noalias() += vmat(ad.get(), m, k).transpose() * dout;
    });
  }
  return out;
}

template <class S>
TensorT<S> TapeT<S>::add(const T& a, const T& b) {
  const bool broadcast = (b.rows() == 1 && a.rows() > 1 && a.cols() == b.cols());
  if (!broadcast && a.shape() != b.shape())
    fail("add", "shape mismatch " + a.shape_str() + " vs " + b.shape_str());
  const int m = a.rows(), n = a.cols();
  T out = make_output(a.shape(), {&a, &b});
  if (broadcast) {
    vmat(out.data(), m, n) =
        vmat(a.handle().get(), m, n).rowwise() +
        Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>(b.value().data(), n);
  } else {
    for (std::size_t i = 0; i < out.numel(); ++i)
      out.value()[i] = a.value()[i] + b.value()[i];
  }
  if (recording_ && out.needs_grad()) {
    record([ad = a.handle(), bd = b.handle(), od = out.handle(), broadcast, m, n] {
      if (ad->needs_grad)
        for (std::size_t i = 0; i < od->grad.size(); ++i) ad->grad[i] += od->grad[i];
      if (bd->needs_grad) {
        if (broadcast) {
          for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int i = 0; i < m; ++i) acc += static_cast<double>(od->grad[i * n + j]);
            bd->grad[j] += static_cast<S>(acc);
          }
        } else {
          for (std::size_t i = 0; i < od->grad.size(); ++i) bd->grad[i] += od->grad[i];
        }
      }
    });
  }
  return out;
}

template <class S>
TensorT<S> TapeT<S>::multiply(const T& a, const T& b) {
  check_same_shape("multiply", a, b);
  T out = make_output(a.shape(), {&a, &b});
  for (std::size_t i = 0; i < out.numel(); ++i)
    out.value()[i] = a.value()[i] * b.value()[i];
  if (recording_ && out.needs_grad()) {
    record([ad = a.handle(), bd = b.handle(), od = out.handle()] {
      if (ad->needs_grad)
        for (std::size_t i = 0; i < od->grad.size(); ++i)
          ad->grad[i] += od->grad[i] * bd->value[i];
      if (bd->needs_grad)
        for (std::size_t i = 0; i < od->grad.size(); ++i)
          bd->grad[i] += od->grad[i] * ad->value[i];
    });
  }
  return out;
}

template <class S>
TensorT<S> TapeT<S>::tanh(const T& x) {
  T out = make_output(x.shape(), {&x});
  for (std::size_t i = 0; i < out.numel(); ++i)
    out.value()[i] = std::tanh(x.value()[i]);
  if (recording_ && out.needs_grad()) {
    record([xd = x.handle(), od = out.handle()] {
      for (std::size_t i = 0; i < od->grad.size(); ++i) {
        const S y = od->value[i];
        xd->grad[i] += od->grad[i] * (S(1) - y * y);
      }
    });
  }
  return out;
}

template <class S>
TensorT<S> TapeT<S>::relu(const T& x) {
  T out = make_output(x.shape(), {&x});
  for (std::size_t i = 0; i < out.numel(); ++i)
    out.value()[i] = x.value()[i] > S(0) ? x.value()[i] : S(0);
  if (recording_ && out.needs_grad()) {
    record([xd = x.handle(), od = out.handle()] {
      for (std::size_t i = 0; i < od->grad.size(); ++i)
        if (xd->value[i] > S(0)) xd->grad[i] += od->grad[i];
    });
  }
  return out;
}

template <class S>
TensorT<S> TapeT<S>::softmax_rows(const T& x) {
  const int m = x.rows(), n = x.cols();
  T out = make_output(x.shape(), {&x});
  for (int i = 0; i < m; ++i) {
    const S* row = x.value().data() + std::size_t(i) * n;
    S* yrow = out.value().data() + std::size_t(i) * n;
    double mx = row[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double denom = 0.0;
    for (int j = 0; j < n; ++j) denom += std::exp(static_cast<double>(row[j]) - mx);
    for (int j = 0; j < n; ++j)
      yrow[j] = static_cast<S>(std::exp(static_cast<double>(row[j]) - mx) / denom);
  }
  if (recording_ && out.needs_grad()) {
    record([xd = x.handle(), od = out.handle(), m, n] {
      for (int i = 0; i < m; ++i) {
        const S* y = od->value.data() + std::size_t(i) * n;
        const S* dy = od->grad.data() + std::size_t(i) * n;
        S* dx = xd->grad.data() + std::size_t(i) * n;
        double dot = 0.0;
        for (int j = 0; j < n; ++j) dot += static_cast<double>(dy[j]) * y[j];
        for (int j = 0; j < n; ++j)
          dx[j] += static_cast<S>(y[j] * (static_cast<double>(dy[j]) - dot));
      }
    });
  }
  return out;
}

template <class S>
TensorT<S> TapeT<S>::log(const T& x) {
  T out = make_output(x.shape(), {&x});
  for (std::size_t i = 0; i < out.numel(); ++i)
    out.value()[i] = std::log(x.value()[i]);
  if (recording_ && out.needs_grad()) {
    record([xd = x.handle(), od = out.handle()] {
      for (std::size_t i = 0; i < od->grad.size(); ++i)
        xd->grad[i] += od->grad[i] / xd->value[i];
    });
  }
  return out;
}

template <class S>
TensorT<S> TapeT<S>::gather_rows(const T& table, const T& ids) {
  if (table.shape().size() != 2) fail("gather_rows", "table must be rank 2");
  const int V = table.rows(), d = table.cols();
  auto idx = int_ids("gather_rows", ids, V);
  const int m = static_cast<int>(idx.size());
  T out = make_output({m, d}, {&table});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < d; ++j)
      out.value()[std::size_t(i) * d + j] = table.value()[std::size_t(idx[i]) * d + j];
  if (recording_ && out.needs_grad()) {
    record([td = table.handle(), od = out.handle(), idx = std::move(idx), d] {
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (int j = 0; j < d; ++j)
          td->grad[std::size_t(idx[i]) * d + j] += od->grad[i * d + j];
    });
  }
  return out;
}

template <class S>
TensorT<S> TapeT<S>::layer_norm(const T& x, const T& gamma, const T& beta) {
  const int m = x.rows(), n = x.cols();
  if (gamma.numel() != static_cast<std::size_t>(n) ||
      beta.numel() != static_cast<std::size_t>(n))
    fail("layer_norm", "scale/offset must have " + std::to_string(n) +
                           " elements, got " + gamma.shape_str() + " and " +
                           beta.shape_str());
  T out = make_output(x.shape(), {&x, &gamma, &beta});
  std::vector<S> xhat(std::size_t(m) * n);
  std::vector<S> inv_std(m);
  for (int i = 0; i < m; ++i) {
    const S* row = x.value().data() + std::size_t(i) * n;
    double mu = 0.0;
    for (int j = 0; j < n; ++j) mu += row[j];
    mu /= n;
    double var = 0.0;
    for (int j = 0; j < n; ++j) {
      const double c = row[j] - mu;
      var += c * c;
    }
    var /= n;
    const double istd = 1.0 / std::sqrt(var + kLayerNormEps);
    inv_std[i] = static_cast<S>(istd);
    for (int j = 0; j < n; ++j) {
      const S xh = static_cast<S>((row[j] - mu) * istd);
      xhat[std::size_t(i) * n + j] = xh;
      out.value()[std::size_t(i) * n + j] = gamma.value()[j] * xh + beta.value()[j];
    }
  }
  if (recording_ && out.needs_grad()) {
    record([xd = x.handle(), gd = gamma.handle(), bd = beta.handle(),
            od = out.handle(), xhat = std::move(xhat), inv_std = std::move(inv_std),
            m, n] {
      for (int i = 0; i < m; ++i) {
        const S* dy = od->grad.data() + std::size_t(i) * n;
        const S* xh = xhat.data() + std::size_t(i) * n;
        if (gd->needs_grad)
          for (int j = 0; j < n; ++j) gd->grad[j] += dy[j] * xh[j];
        if (bd->needs_grad)
          for (int j = 0; j < n; ++j) bd->grad[j] += dy[j];
        if (xd->needs_grad) {
          double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
          for (int j = 0; j < n; ++j) {
            const double dxh = static_cast<double>(dy[j]) * gd->value[j];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xh[j];
          }
          mean_dxhat /= n;
          mean_dxhat_xhat /= n;
          S* dx = xd->grad.data() + std::size_t(i) * n;
          for (int j = 0; j < n; ++j) {
            const double dxh = static_cast<double>(dy[j]) * gd->value[j];
            dx[j] += static_cast<S>((dxh - mean_dxhat - xh[j] * mean_dxhat_xhat) *
                                    inv_std[i]);
          }
        }
      }
    });
  }
  return out;
}

template <class S>
TensorT<S> TapeT<S>::mean(const T& x) {
  T out = make_output({1}, {&x});
  double acc = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) acc += x.value()[i];
  out.value()[0] = static_cast<S>(acc / static_cast<double>(x.numel()));
  if (recording_ && out.needs_grad()) {
    record([xd = x.handle(), od = out.handle()] {
      const S g = od->grad[0] / static_cast<S>(xd->value.size());
      for (auto& gi : xd->grad) gi += g;
    });
  }
  return out;
}

template <class S>
TensorT<S> TapeT<S>::sum(const T& x) {
  T out = make_output({1}, {&x});
  double acc = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) acc += x.value()[i];
  out.value()[0] = static_cast<S>(acc);
  if (recording_ && out.needs_grad()) {
    record([xd = x.handle(), od = out.handle()] {
      const S g = od->grad[0];
      for (auto& gi : xd->grad) gi += g;
    });
  }
  return out;
}

template <class S>
TensorT<S> TapeT<S>::squared_error(const T& a, const T& b) {
  check_same_shape("squared_error", a, b);
  T out = make_output({1}, {&a, &b});
  double acc = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double diff = static_cast<double>(a.value()[i]) - b.value()[i];
    acc += diff * diff;
  }
  out.value()[0] = static_cast<S>(acc);
  if (recording_ && out.needs_grad()) {
    record([ad = a.handle(), bd = b.handle(), od = out.handle()] {
      const S g = od->grad[0];
      for (std::size_t i = 0; i < ad->value.size(); ++i) {
        const S diff = ad->value[i] - bd->value[i];
        if (ad->needs_grad) ad->grad[i] += g * S(2) * diff;
        if (bd->needs_grad) bd->grad[i] -= g * S(2) * diff;
      }
    });
  }
  return out;
}

template <class S>
TensorT<S> TapeT<S>::cross_entropy_from_logits(const T& logits, const T& targets) {
  const int m = logits.rows(), n = logits.cols();
  auto tgt = int_ids("cross_entropy_from_logits", targets, n);
  if (static_cast<int>(tgt.size()) != m)
    fail("cross_entropy_from_logits",
         "expected " + std::to_string(m) + " targets, got " + std::to_string(tgt.size()));
  T out = make_output({1}, {&logits});
  std::vector<S> probs(std::size_t(m) * n);
  double loss = 0.0;
  for (int i = 0; i < m; ++i) {
    const S* row = logits.value().data() + std::size_t(i) * n;
    double mx = row[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double denom = 0.0;
    for (int j = 0; j < n; ++j) denom += std::exp(static_cast<double>(row[j]) - mx);
    const double log_denom = std::log(denom);
    for (int j = 0; j < n; ++j)
      probs[std::size_t(i) * n + j] =
          static_cast<S>(std::exp(static_cast<double>(row[j]) - mx) / denom);
    loss -= (static_cast<double>(row[tgt[i]]) - mx - log_denom);
  }
  out.value()[0] = static_cast<S>(loss / m);
  if (recording_ && out.needs_grad()) {
    record([ld = logits.handle(), od = out.handle(), probs = std::move(probs),
            tgt = std::move(tgt), m, n] {
      const S g = od->grad[0] / static_cast<S>(m);
      for (int i = 0; i < m; ++i) {
        S* dl = ld->grad.data() + std::size_t(i) * n;
        const S* p = probs.data() + std::size_t(i) * n;
        for (int j = 0; j < n; ++j)
          dl[j] += g * (p[j] - (j == tgt[i] ? S(1) : S(0)));
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------

template <class S>
TensorT<S> TapeT<S>::exp(const T& x) {
  T out = make_output(x.shape(), {&x});
  for (std::size_t i = 0; i < out.numel(); ++i)
    out.value()[i] = std::exp(x.value()[i]);
  if (recording_ && out.needs_grad()) {
    record([xd = x.handle(), od = out.handle()] {
      for (std::size_t i = 0; i < od->grad.size(); ++i)
        xd->grad[i] += od->grad[i] * od->value[i];
    });
  }
  return out;
}

template <class S>
TensorT<S> TapeT<S>::sqrt(const T& x) {
  T out = make_output(x.shape(), {&x});
  for (std::size_t i = 0; i < out.numel(); ++i)
    out.value()[i] = std::sqrt(x.value()[i]);
  if (recording_ && out.needs_grad()) {
    record([xd = x.handle(), od = out.handle()] {
      for (std::size_t i = 0; i < od->grad.size(); ++i)
        xd->grad[i] += od->grad[i] * S(0.5) / od->value[i];
    });
  }
  return out;
}

template <class S>
TensorT<S> TapeT<S>::softplus(const T& x) {
  T out = make_output(x.shape(), {&x});
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const S v = x.value()[i];
    out.value()[i] = std::max(v, S(0)) + std::log1p(std::exp(-std::abs(v)));
  }
  if (recording_ && out.needs_grad()) {
    record([xd = x.handle(), od = out.handle()] {
      for (std::size_t i = 0; i < od->grad.size(); ++i)
        xd->grad[i] += od->grad[i] * sigmoid_stable(xd->value[i]);
    });
  }
  return out;
}

template <class S>
TensorT<S> TapeT<S>::scale(const T& x, S c) {
  T out = make_output(x.shape(), {&x});
  for (std::size_t i = 0; i < out.numel(); ++i) out.value()[i] = c * x.value()[i];
  if (recording_ && out.needs_grad()) {
    record([xd = x.handle(), od = out.handle(), c] {
      for (std::size_t i = 0; i < od->grad.size(); ++i)
        xd->grad[i] += c * od->grad[i];
    });
  }
  return out;
}

template <class S>
TensorT<S> TapeT<S>::scale_by_scalar(const T& x, const T& s) {
  if (!s.is_scalar()) fail("scale_by_scalar", "scale must be scalar, got " + s.shape_str());
  T out = make_output(x.shape(), {&x, &s});
  const S c = s.value()[0];
  for (std::size_t i = 0; i < out.numel(); ++i) out.value()[i] = c * x.value()[i];
  if (recording_ && out.needs_grad()) {
    record([xd = x.handle(), sd = s.handle(), od = out.handle()] {
      const S c = sd->value[0];
      if (xd->needs_grad)
        for (std::size_t i = 0; i < od->grad.size(); ++i)
          xd->grad[i] += c * od->grad[i];
      if (sd->needs_grad) {
        double acc = 0.0;
        for (std::size_t i = 0; i < od->grad.size(); ++i)
          acc += static_cast<double>(od->grad[i]) * xd->value[i];
        sd->grad[0] += static_cast<S>(acc);
      }
    });
  }
  return out;
}

template <class S>
TensorT<S> TapeT<S>::concat_rows(const T& a, const T& b) {
  if (a.cols() != b.cols())
    fail("concat_rows", "column mismatch " + a.shape_str() + " vs " + b.shape_str());
  const int ma = a.rows(), mb = b.rows(), n = a.cols();
  T out = make_output({ma + mb, n}, {&a, &b});
  std::copy(a.value().begin(), a.value().end(), out.value().begin());
  std::copy(b.value().begin(), b.value().end(),
            out.value().begin() + std::size_t(ma) * n);
  if (recording_ && out.needs_grad()) {
    record([ad = a.handle(), bd = b.handle(), od = out.handle(), ma, n] {
      const std::size_t split = std::size_t(ma) * n;
      if (ad->needs_grad)
        for (std::size_t i = 0; i < split; ++i) ad->grad[i] += od->grad[i];
      if (bd->needs_grad)
        for (std::size_t i = split; i < od->grad.size(); ++i)
          bd->grad[i - split] += od->grad[i];
    });
  }
  return out;
}

template <class S>
TensorT<S> TapeT<S>::slice_rows(const T& x, int row_begin, int row_end) {
  const int m = x.rows(), n = x.cols();
  if (row_begin < 0 || row_end > m || row_begin >= row_end)
    fail("slice_rows", "bad range [" + std::to_string(row_begin) + "," +
                           std::to_string(row_end) + ") for " + x.shape_str());
  T out = make_output({row_end - row_begin, n}, {&x});
  std::copy(x.value().begin() + std::size_t(row_begin) * n,
            x.value().begin() + std::size_t(row_end) * n, out.value().begin());
  if (recording_ && out.needs_grad()) {
    record([xd = x.handle(), od = out.handle(), row_begin, n] {
      const std::size_t off = std::size_t(row_begin) * n;
      for (std::size_t i = 0; i < od->grad.size(); ++i)
        xd->grad[off + i] += od->grad[i];
    });
  }
  return out;
}

template <class S>
TensorT<S> TapeT<S>::pick_per_row(const T& x, const T& ids) {
  const int m = x.rows(), n = x.cols();
  auto idx = int_ids("pick_per_row", ids, n);
  if (static_cast<int>(idx.size()) != m)
    fail("pick_per_row", "expected " + std::to_string(m) + " ids, got " +
                             std::to_string(idx.size()));
  T out = make_output({m}, {&x});
  for (int i = 0; i < m; ++i)
    out.value()[i] = x.value()[std::size_t(i) * n + idx[i]];
  if (recording_ && out.needs_grad()) {
    record([xd = x.handle(), od = out.handle(), idx = std::move(idx), n] {
      for (std::size_t i = 0; i < od->grad.size(); ++i)
        xd->grad[i * n + idx[i]] += od->grad[i];
    });
  }
  return out;
}

template <class S>
TensorT<S> TapeT<S>::log_softmax_rows(const T& x) {
  const int m = x.rows(), n = x.cols();
  T out = make_output(x.shape(), {&x});
  for (int i = 0; i < m; ++i) {
    const S* row = x.value().data() + std::size_t(i) * n;
    S* yrow = out.value().data() + std::size_t(i) * n;
    double mx = row[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double denom = 0.0;
    for (int j = 0; j < n; ++j) denom += std::exp(static_cast<double>(row[j]) - mx);
    const double log_denom = std::log(denom);
    for (int j = 0; j < n; ++j)
      yrow[j] = static_cast<S>(static_cast<double>(row[j]) - mx - log_denom);
  }
  if (recording_ && out.needs_grad()) {
    record([xd = x.handle(), od = out.handle(), m, n] {
      for (int i = 0; i < m; ++i) {
        const S* y = od->value.data() + std::size_t(i) * n;
        const S* dy = od->grad.data() + std::size_t(i) * n;
        S* dx = xd->grad.data() + std::size_t(i) * n;
        double gsum = 0.0;
        for (int j = 0; j < n; ++j) gsum += dy[j];
        for (int j = 0; j < n; ++j)
          dx[j] += static_cast<S>(dy[j] - std::exp(static_cast<double>(y[j])) * gsum);
      }
    });
  }
  return out;
}

template <class S>
TensorT<S> TapeT<S>::rows_l2_normalize(const T& x) {
  const int m = x.rows(), n = x.cols();
  T out = make_output(x.shape(), {&x});
  std::vector<S> inv_norm(m);
  for (int i = 0; i < m; ++i) {
    const S* row = x.value().data() + std::size_t(i) * n;
    double sq = 0.0;
    for (int j = 0; j < n; ++j) sq += static_cast<double>(row[j]) * row[j];
    const double norm = std::sqrt(sq);
    if (norm < 1e-12) fail("rows_l2_normalize", "row " + std::to_string(i) + " has zero norm");
    inv_norm[i] = static_cast<S>(1.0 / norm);
    for (int j = 0; j < n; ++j)
      out.value()[std::size_t(i) * n + j] = static_cast<S>(row[j] / norm);
  }
  if (recording_ && out.needs_grad()) {
    record([xd = x.handle(), od = out.handle(), inv_norm = std::move(inv_norm), m, n] {
      for (int i = 0; i < m; ++i) {
        const S* y = od->value.data() + std::size_t(i) * n;
        const S* dy = od->grad.data() + std::size_t(i) * n;
        S* dx = xd->grad.data() + std::size_t(i) * n;
        double dot = 0.0;
        for (int j = 0; j < n; ++j) dot += static_cast<double>(dy[j]) * y[j];
        for (int j = 0; j < n; ++j)
          dx[j] += static_cast<S>((static_cast<double>(dy[j]) - dot * y[j]) * inv_norm[i]);
      }
    });
  }
  return out;
}

template <class S>
TensorT<S> TapeT<S>::transpose(const T& x) {
  const int m = x.rows(), n = x.cols();
  T out = make_output({n, m}, {&x});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out.value()[std::size_t(j) * m + i] = x.value()[std::size_t(i) * n + j];
  if (recording_ && out.needs_grad()) {
    record([xd = x.handle(), od = out.handle(), m, n] {
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
          xd->grad[std::size_t(i) * n + j] += od->grad[std::size_t(j) * m + i];
    });
  }
  return out;
}

template <class S>
TensorT<S> TapeT<S>::clamp(const T& x, S lo, S hi) {
  if (!(lo < hi)) fail("clamp", "lo must be < hi");
  T out = make_output(x.shape(), {&x});
  for (std::size_t i = 0; i < out.numel(); ++i)
    out.value()[i] = std::min(std::max(x.value()[i], lo), hi);
  if (recording_ && out.needs_grad()) {
    record([xd = x.handle(), od = out.handle(), lo, hi] {
      for (std::size_t i = 0; i < od->grad.size(); ++i)
        if (xd->value[i] > lo && xd->value[i] < hi)
          xd->grad[i] += od->grad[i];
    });
  }
  return out;
}

template <class S>
TensorT<S> TapeT<S>::minimum(const T& a, const T& b) {
  check_same_shape("minimum", a, b);
  T out = make_output(a.shape(), {&a, &b});
  for (std::size_t i = 0; i < out.numel(); ++i)
    out.value()[i] = std::min(a.value()[i], b.value()[i]);
  if (recording_ && out.needs_grad()) {
    record([ad = a.handle(), bd = b.handle(), od = out.handle()] {
      for (std::size_t i = 0; i < od->grad.size(); ++i) {
        if (ad->value[i] <= bd->value[i]) {
          if (ad->needs_grad) ad->grad[i] += od->grad[i];
        } else if (bd->needs_grad) {
          bd->grad[i] += od->grad[i];
        }
      }
    });
  }
  return out;
}

template <class S>
TensorT<S> TapeT<S>::causal_self_attention(const T& q, const T& k, const T& v,
                                           int n_heads) {
  check_same_shape("causal_self_attention", q, k);
  check_same_shape("causal_self_attention", q, v);
  const int L = q.rows(), d = q.cols();
  if (n_heads < 1 || d % n_heads != 0)
    fail("causal_self_attention",
         "width " + std::to_string(d) + " not divisible by " + std::to_string(n_heads) +
             " heads");
  const int dh = d / n_heads;
  const S inv_sqrt = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
  T out = make_output({L, d}, {&q, &k, &v});

  // Row-softmax attention weights per head, kept for the backward pass.
  std::vector<S> probs(std::size_t(n_heads) * L * L, S(0));
  for (int h = 0; h < n_heads; ++h) {
    const int off = h * dh;
    S* P = probs.data() + std::size_t(h) * L * L;
    for (int i = 0; i < L; ++i) {
      const S* qi = q.value().data() + std::size_t(i) * d + off;
      double mx = -1e300;
      std::vector<double> scores(i + 1);
      for (int j = 0; j <= i; ++j) {
        const S* kj = k.value().data() + std::size_t(j) * d + off;
        double s = 0.0;
        for (int c = 0; c < dh; ++c) s += static_cast<double>(qi[c]) * kj[c];
        s *= inv_sqrt;
        scores[j] = s;
        mx = std::max(mx, s);
      }
      double denom = 0.0;
      for (int j = 0; j <= i; ++j) denom += std::exp(scores[j] - mx);
      for (int j = 0; j <= i; ++j)
        P[std::size_t(i) * L + j] = static_cast<S>(std::exp(scores[j] - mx) / denom);
      S* oi = out.value().data() + std::size_t(i) * d + off;
      for (int c = 0; c < dh; ++c) {
        double acc = 0.0;
        for (int j = 0; j <= i; ++j)
          acc += static_cast<double>(P[std::size_t(i) * L + j]) *
                 v.value()[std::size_t(j) * d + off + c];
        oi[c] = static_cast<S>(acc);
      }
    }
  }

  if (recording_ && out.needs_grad()) {
    record([qd = q.handle(), kd = k.handle(), vd = v.handle(), od = out.handle(),
            probs = std::move(probs), L, d, dh, n_heads, inv_sqrt] {
      std::vector<S> dP(std::size_t(L) * L);
      std::vector<S> dS(std::size_t(L) * L);
      for (int h = 0; h < n_heads; ++h) {
        const int off = h * dh;
        const S* P = probs.data() + std::size_t(h) * L * L;
        // dV += P^T dO ; dP = dO V^T (causal entries only)
        for (int i = 0; i < L; ++i) {
          const S* doi = od->grad.data() + std::size_t(i) * d + off;
          for (int j = 0; j <= i; ++j) {
            const S* vj = vd->value.data() + std::size_t(j) * d + off;
            double acc = 0.0;
            for (int c = 0; c < dh; ++c) acc += static_cast<double>(doi[c]) * vj[c];
            dP[std::size_t(i) * L + j] = static_cast<S>(acc);
            if (vd->needs_grad) {
              S* dvj = vd->grad.data() + std::size_t(j) * d + off;
              const S p = P[std::size_t(i) * L + j];
              for (int c = 0; c < dh; ++c) dvj[c] += p * doi[c];
            }
          }
        }
        // softmax backward per row
        for (int i = 0; i < L; ++i) {
          double dot = 0.0;
          for (int j = 0; j <= i; ++j)
            dot += static_cast<double>(dP[std::size_t(i) * L + j]) *
                   P[std::size_t(i) * L + j];
          for (int j = 0; j <= i; ++j)
            dS[std::size_t(i) * L + j] =
                static_cast<S>(P[std::size_t(i) * L + j] *
                               (static_cast<double>(dP[std::size_t(i) * L + j]) - dot));
        }
        // dQ += dS K * inv_sqrt ; dK += dS^T Q * inv_sqrt
        for (int i = 0; i < L; ++i) {
          for (int j = 0; j <= i; ++j) {
            const S g = dS[std::size_t(i) * L + j] * inv_sqrt;
            if (g == S(0)) continue;
            const S* kj = kd->value.data() + std::size_t(j) * d + off;
            const S* qi = qd->value.data() + std::size_t(i) * d + off;
            if (qd->needs_grad) {
              S* dqi = qd->grad.data() + std::size_t(i) * d + off;
              for (int c = 0; c < dh; ++c) dqi[c] += g * kj[c];
            }
            if (kd->needs_grad) {
              S* dkj = kd->grad.data() + std::size_t(j) * d + off;
              for (int c = 0; c < dh; ++c) dkj[c] += g * qi[c];
            }
          }
        }
      }
    });
  }
  return out;
}

template <class S>
TensorT<S> TapeT<S>::forward_op(OpKind kind, std::span<const T> in) {
  const auto want = [&](std::size_t n) {
    if (in.size() != n)
      fail(op_name(kind), "expected " + std::to_string(n) + " inputs, got " +
                              std::to_string(in.size()));
  };
  switch (kind) {
    case OpKind::matmul: want(2); return matmul(in[0], in[1]);
    case OpKind::add: want(2); return add(in[0], in[1]);
    case OpKind::multiply: want(2); return multiply(in[0], in[1]);
    case OpKind::tanh: want(1); return tanh(in[0]);
    case OpKind::relu: want(1); return relu(in[0]);
    case OpKind::softmax_rows: want(1); return softmax_rows(in[0]);
    case OpKind::log: want(1); return log(in[0]);
    case OpKind::gather_rows: want(2); return gather_rows(in[0], in[1]);
    case OpKind::layer_norm: want(3); return layer_norm(in[0], in[1], in[2]);
    case OpKind::mean: want(1); return mean(in[0]);
    case OpKind::sum: want(1); return sum(in[0]);
    case OpKind::squared_error: want(2); return squared_error(in[0], in[1]);
    case OpKind::cross_entropy_from_logits:
      want(2);
      return cross_entropy_from_logits(in[0], in[1]);
  }
  fail("forward_op", "unknown op kind");
}

template class TapeT<float>;
template class TapeT<double>;

}  // namespace morl::numerics
