#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "numerics/optim.hpp"
#include "numerics/tape.hpp"
#include "util/rng.hpp"

using namespace morl;
using namespace morl::numerics;

namespace {

using DT = TensorT<double>;
using DTape = TapeT<double>;

DT random_tensor(Rng& rng, std::vector<int> shape, bool requires_grad = true,
                 double scale = 1.0) {
  DT t = DT::zeros(std::move(shape), requires_grad);
  for (auto& v : t.value()) v = rng.normal() * scale;
  return t;
}

// Finite-difference check of d(loss)/d(x) for a loss built by fn from a
// single distinguished input. Returns the max relative error.
double fd_check_input(const std::function<DT(DTape&, const DT&)>& fn, DT& x,
                      double eps = 1e-6) {
  ParameterStoreT<double> store;
  store.add("x", x);
  return grad_check<double>([&](DTape& tape) { return fn(tape, x); }, store, eps);
}

}  // namespace

TEST_CASE("elementwise op examples") {
  Tape tape;
  auto a = Tensor::from({2}, {1.f, 2.f});
  auto b = Tensor::from({2}, {3.f, 4.f});
  auto s = tape.add(a, b);
  CHECK(s.value()[0] == doctest::Approx(4.f));
  CHECK(s.value()[1] == doctest::Approx(6.f));

  auto sm = tape.softmax_rows(Tensor::from({2}, {0.f, 0.f}));
  CHECK(sm.value()[0] == doctest::Approx(0.5f));
  CHECK(sm.value()[1] == doctest::Approx(0.5f));

  auto z = tape.matmul(Tensor::zeros({2, 3}), Tensor::from({3, 4}, std::vector<float>(12, 1.f)));
  for (float v : z.value()) CHECK(v == 0.f);
  CHECK(z.shape() == std::vector<int>{2, 4});
}

TEST_CASE("shape mismatch diagnostics name the op") {
  Tape tape;
  auto a = Tensor::zeros({2, 3});
  auto b = Tensor::zeros({2, 2});
  CHECK_THROWS_WITH_AS(tape.matmul(a, b),
                       doctest::Contains("matmul"), std::invalid_argument);
  CHECK_THROWS_AS(tape.multiply(a, b), std::invalid_argument);
  CHECK_THROWS_AS(tape.squared_error(a, b), std::invalid_argument);
}

TEST_CASE("backward basics") {
  SUBCASE("sum gives ones") {
    Tape tape;
    auto x = Tensor::from({3}, {1.f, -2.f, 5.f}, true);
    auto loss = tape.sum(x);
    tape.backward(loss);
    for (float g : x.grad()) CHECK(g == doctest::Approx(1.f));
    CHECK(tape.size() == 0);  // cleared
  }
  SUBCASE("squared error against zero gives 2x") {
    Tape tape;
    auto x = Tensor::from({1}, {2.f}, true);
    auto loss = tape.squared_error(x, Tensor::from({1}, {0.f}));
    tape.backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(4.f));
  }
  SUBCASE("non-scalar loss rejected") {
    Tape tape;
    auto x = Tensor::from({2}, {1.f, 2.f}, true);
    auto y = tape.tanh(x);
    CHECK_THROWS_AS(tape.backward(y), std::invalid_argument);
  }
  SUBCASE("foreign loss rejected") {
    Tape t1, t2;
    auto x = Tensor::from({2}, {1.f, 2.f}, true);
    auto loss = t1.sum(x);
    CHECK_THROWS_AS(t2.backward(loss), std::invalid_argument);
  }
}

TEST_CASE("gradient linearity: backward of a sum equals sum of backwards") {
  Rng rng(7, "linearity");
  auto x = random_tensor(rng, {4, 3});

  // Combined pass.
  {
    DTape tape;
    auto l1 = tape.squared_error(tape.tanh(x), DT::zeros({4, 3}));
    auto l2 = tape.mean(tape.multiply(x, x));
    auto loss = tape.add(l1, l2);
    tape.backward(loss);
  }
  std::vector<double> combined(x.grad().begin(), x.grad().end());
  x.zero_grad();

  // Two separate passes accumulate into the same leaf.
  {
    DTape tape;
    auto l1 = tape.squared_error(tape.tanh(x), DT::zeros({4, 3}));
    tape.backward(l1);
  }
  {
    DTape tape;
    auto l2 = tape.mean(tape.multiply(x, x));
    tape.backward(l2);
  }
  for (std::size_t i = 0; i < combined.size(); ++i)
    CHECK(x.grad()[i] == doctest::Approx(combined[i]).epsilon(1e-12));
}

TEST_CASE("softmax rows: positive, sums to one") {
  Rng rng(11, "softmax");
  for (int trial = 0; trial < 50; ++trial) {
    const int m = 1 + static_cast<int>(rng.below(5));
    const int n = 2 + static_cast<int>(rng.below(7));
    auto x = random_tensor(rng, {m, n}, false, 3.0);
    DTape tape(false);
    auto y = tape.softmax_rows(x);
    for (int i = 0; i < m; ++i) {
      double row_sum = 0.0;
      for (int j = 0; j < n; ++j) {
        const double v = y.value()[static_cast<std::size_t>(i) * n + j];
        CHECK(v > 0.0);
        row_sum += v;
      }
      CHECK(row_sum == doctest::Approx(1.0).epsilon(1e-6));
    }
  }
}

TEST_CASE("cross entropy is nonnegative, zero only at certainty") {
  DTape tape(false);
  auto logits = DT::from({1, 3}, {0.3, -1.2, 2.0});
  auto tgt = DT::from({1}, {1.0});
  CHECK(tape.cross_entropy_from_logits(logits, tgt).item() > 0.0);

  // Softmax probability 1 on the target is approached as the gap grows.
  auto sharp = DT::from({1, 3}, {100.0, 0.0, 0.0});
  auto t0 = DT::from({1}, {0.0});
  CHECK(tape.cross_entropy_from_logits(sharp, t0).item() ==
        doctest::Approx(0.0).epsilon(1e-12));
}

// Every op's analytic gradient against central finite differences, on
// randomized shapes and values. Run in double so the differences are
// far from the rounding floor.
TEST_CASE("finite differences across all ops") {
  Rng rng(1234, "fd");
  int cases = 0;
  double worst = 0.0;

  auto check = [&](const char* /*name*/, const std::function<DT(DTape&, const DT&)>& fn,
                   DT x) {
    const double rel = fd_check_input(fn, x);
    worst = std::max(worst, rel);
    CHECK(rel < 1e-3);
    ++cases;
  };

  // Scalarize a matrix-valued op through a fixed random linear functional so
  // finite differences see every output coordinate.
  auto through = [&](DT w, const std::function<DT(DTape&, const DT&)>& op) {
    return std::function<DT(DTape&, const DT&)>(
        [w, op](DTape& tape, const DT& x) {
          return tape.sum(tape.multiply(op(tape, x), w));
        });
  };

  for (int trial = 0; trial < 12; ++trial) {
    const int m = 2 + static_cast<int>(rng.below(4));
    const int n = 2 + static_cast<int>(rng.below(4));
    const int k = 2 + static_cast<int>(rng.below(4));
    auto w_mn = random_tensor(rng, {m, n}, false);
    auto w_mk = random_tensor(rng, {m, k}, false);
    auto w_nm = random_tensor(rng, {n, m}, false);
    auto w_m = random_tensor(rng, {m}, false);

    auto rhs = random_tensor(rng, {k, n}, false);
    check("matmul", through(w_mn, [&](DTape& t, const DT& x) { return t.matmul(x, rhs); }),
          random_tensor(rng, {m, k}));

    auto addend = random_tensor(rng, {m, n}, false);
    check("add", through(w_mn, [&](DTape& t, const DT& x) { return t.add(x, addend); }),
          random_tensor(rng, {m, n}));
    auto row = random_tensor(rng, {1, n});
    check("add_broadcast",
          through(w_mn, [&](DTape& t, const DT& x) { return t.add(addend, x); }), row);

    auto factor = random_tensor(rng, {m, n}, false);
    check("multiply",
          through(w_mn, [&](DTape& t, const DT& x) { return t.multiply(x, factor); }),
          random_tensor(rng, {m, n}));

    check("tanh", through(w_mn, [&](DTape& t, const DT& x) { return t.tanh(x); }),
          random_tensor(rng, {m, n}));
    // Keep relu inputs away from the kink at zero.
    {
      auto x = random_tensor(rng, {m, n});
      for (auto& v : x.value())
        if (std::abs(v) < 0.05) v = 0.2;
      check("relu", through(w_mn, [&](DTape& t, const DT& x_) { return t.relu(x_); }), x);
    }
    check("softmax_rows",
          through(w_mn, [&](DTape& t, const DT& x) { return t.softmax_rows(x); }),
          random_tensor(rng, {m, n}, true, 2.0));
    check("log_softmax_rows",
          through(w_mn, [&](DTape& t, const DT& x) { return t.log_softmax_rows(x); }),
          random_tensor(rng, {m, n}, true, 2.0));
    {
      auto x = random_tensor(rng, {m, n});
      for (auto& v : x.value()) v = std::abs(v) + 0.5;
      check("log", through(w_mn, [&](DTape& t, const DT& x_) { return t.log(x_); }), x);
      check("sqrt", through(w_mn, [&](DTape& t, const DT& x_) { return t.sqrt(x_); }), x);
    }
    check("exp", through(w_mn, [&](DTape& t, const DT& x) { return t.exp(x); }),
          random_tensor(rng, {m, n}));
    check("softplus", through(w_mn, [&](DTape& t, const DT& x) { return t.softplus(x); }),
          random_tensor(rng, {m, n}, true, 2.0));

    auto ids = DT::zeros({m});
    for (auto& v : ids.value()) v = static_cast<double>(rng.below(static_cast<std::uint32_t>(k)));
    check("gather_rows",
          through(w_mk, [&](DTape& t, const DT& x) { return t.gather_rows(x, ids); }),
          random_tensor(rng, {k + 1, k}));

    {
      auto gamma = random_tensor(rng, {n}, false);
      auto beta = random_tensor(rng, {n}, false);
      check("layer_norm_x",
            through(w_mn,
                    [&](DTape& t, const DT& x) { return t.layer_norm(x, gamma, beta); }),
            random_tensor(rng, {m, n}));
      auto x_fixed = random_tensor(rng, {m, n}, false);
      check("layer_norm_gamma",
            through(w_mn,
                    [&](DTape& t, const DT& g) { return t.layer_norm(x_fixed, g, beta); }),
            random_tensor(rng, {n}));
      check("layer_norm_beta",
            through(w_mn,
                    [&](DTape& t, const DT& b) { return t.layer_norm(x_fixed, gamma, b); }),
            random_tensor(rng, {n}));
    }

    check("mean", [&](DTape& t, const DT& x) { return t.mean(x); },
          random_tensor(rng, {m, n}));
    check("sum", [&](DTape& t, const DT& x) { return t.sum(x); },
          random_tensor(rng, {m, n}));
    auto target = random_tensor(rng, {m, n}, false);
    check("squared_error",
          [&](DTape& t, const DT& x) { return t.squared_error(x, target); },
          random_tensor(rng, {m, n}));

    auto targets = DT::zeros({m});
    for (auto& v : targets.value())
      v = static_cast<double>(rng.below(static_cast<std::uint32_t>(n)));
    check("cross_entropy",
          [&](DTape& t, const DT& x) { return t.cross_entropy_from_logits(x, targets); },
          random_tensor(rng, {m, n}, true, 2.0));

    check("scale", through(w_mn, [&](DTape& t, const DT& x) { return t.scale(x, 0.7); }),
          random_tensor(rng, {m, n}));
    {
      auto x_fixed = random_tensor(rng, {m, n}, false);
      check("scale_by_scalar",
            through(w_mn,
                    [&](DTape& t, const DT& s) { return t.scale_by_scalar(x_fixed, s); }),
            random_tensor(rng, {1}));
    }
    auto other = random_tensor(rng, {k, n}, false);
    check("concat_rows",
          through(random_tensor(rng, {m + k, n}, false),
                  [&](DTape& t, const DT& x) { return t.concat_rows(x, other); }),
          random_tensor(rng, {m, n}));
    check("slice_rows",
          through(random_tensor(rng, {1, n}, false),
                  [&](DTape& t, const DT& x) { return t.slice_rows(x, m / 2, m / 2 + 1); }),
          random_tensor(rng, {m, n}));
    {
      auto ids2 = DT::zeros({m});
      for (auto& v : ids2.value())
        v = static_cast<double>(rng.below(static_cast<std::uint32_t>(n)));
      check("pick_per_row",
            through(w_m, [&](DTape& t, const DT& x) { return t.pick_per_row(x, ids2); }),
            random_tensor(rng, {m, n}));
    }
    check("rows_l2_normalize",
          through(w_mn, [&](DTape& t, const DT& x) { return t.rows_l2_normalize(x); }),
          random_tensor(rng, {m, n}));
    check("transpose",
          through(w_nm, [&](DTape& t, const DT& x) { return t.transpose(x); }),
          random_tensor(rng, {m, n}));
    {
      auto x = random_tensor(rng, {m, n}, true, 2.0);
      for (auto& v : x.value())  // keep away from clamp kinks at +-1
        if (std::abs(std::abs(v) - 1.0) < 0.05) v *= 1.2;
      check("clamp",
            through(w_mn, [&](DTape& t, const DT& x_) { return t.clamp(x_, -1.0, 1.0); }),
            x);
    }
    {
      auto b = random_tensor(rng, {m, n}, false);
      auto x = random_tensor(rng, {m, n});
      for (std::size_t i = 0; i < x.numel(); ++i)  // avoid ties
        if (std::abs(x.value()[i] - b.value()[i]) < 0.05) x.value()[i] += 0.2;
      check("minimum",
            through(w_mn, [&](DTape& t, const DT& x_) { return t.minimum(x_, b); }), x);
    }
    {
      const int L = 3 + static_cast<int>(rng.below(4));
      const int d = 8;
      auto wq = random_tensor(rng, {L, d}, false);
      auto kk = random_tensor(rng, {L, d}, false);
      auto vv = random_tensor(rng, {L, d}, false);
      check("attention_q",
            through(wq, [&](DTape& t, const DT& q) {
              return t.causal_self_attention(q, kk, vv, 2);
            }),
            random_tensor(rng, {L, d}));
      auto qq = random_tensor(rng, {L, d}, false);
      check("attention_k",
            through(wq, [&](DTape& t, const DT& k_) {
              return t.causal_self_attention(qq, k_, vv, 2);
            }),
            random_tensor(rng, {L, d}));
      check("attention_v",
            through(wq, [&](DTape& t, const DT& v_) {
              return t.causal_self_attention(qq, kk, v_, 2);
            }),
            random_tensor(rng, {L, d}));
    }
  }
  CHECK(cases >= 100);
  MESSAGE("fd cases: ", cases, ", worst rel err: ", worst);
}

TEST_CASE("forward_op dispatcher covers the spec op set") {
  DTape tape(false);
  auto a = DT::from({2}, {1.0, 2.0});
  auto b = DT::from({2}, {3.0, 4.0});
  std::vector<DT> in{a, b};
  auto out = tape.forward_op(OpKind::add, in);
  CHECK(out.value()[1] == doctest::Approx(6.0));
  std::vector<DT> one{a};
  CHECK_THROWS_AS(tape.forward_op(OpKind::matmul, one), std::invalid_argument);
}

TEST_CASE("adamw") {
  SUBCASE("zero gradient with zero weight decay is a fixed point") {
    ParameterStore store;
    auto w = store.add("w", Tensor::from({3}, {1.f, -2.f, 0.5f}, true));
    AdamW opt(store, {.lr = 0.1f, .weight_decay = 0.f});
    opt.step(store);
    CHECK(w.value()[0] == 1.f);
    CHECK(w.value()[1] == -2.f);
    CHECK(w.value()[2] == 0.5f);
  }
  SUBCASE("degenerate hyperparameters reduce to a sign step") {
    // beta1 = beta2 = 0, eps = 0: update = lr * g / |g|.
    ParameterStore store;
    auto w = store.add("w", Tensor::from({1}, {1.f}, true));
    w.grad()[0] = 1.f;
    AdamW opt(store, {.lr = 0.1f, .beta1 = 0.f, .beta2 = 0.f, .eps = 0.f,
                      .weight_decay = 0.f});
    opt.step(store);
    CHECK(w.value()[0] == doctest::Approx(0.9f));
    CHECK(w.grad()[0] == 0.f);  // zeroed after the step
    CHECK(opt.step_count() == 1);
  }
  SUBCASE("non-finite gradient aborts with the offending index") {
    ParameterStore store;
    auto w = store.add("w", Tensor::from({3}, {1.f, 1.f, 1.f}, true));
    w.grad()[0] = 0.f;
    w.grad()[1] = std::numeric_limits<float>::quiet_NaN();
    w.grad()[2] = 0.f;
    AdamW opt(store, {.lr = 0.1f});
    CHECK_THROWS_AS(opt.step(store), NonFiniteGradient);
    try {
      opt.step(store);
    } catch (const NonFiniteGradient& e) {
      CHECK(e.flat_index == 1);
    }
    CHECK(w.value()[0] == 1.f);  // untouched
    CHECK(opt.step_count() == 0);
  }
  SUBCASE("same seed, bit-identical parameters after 100 steps") {
    auto run = [](std::uint64_t seed) {
      Rng rng(seed, "adamw-det");
      ParameterStore store;
      auto w = store.add("w", Tensor::zeros({8, 4}, true));
      for (auto& v : w.value()) v = static_cast<float>(rng.normal());
      AdamW opt(store, {.lr = 1e-2f, .weight_decay = 1e-3f});
      for (int i = 0; i < 100; ++i) {
        Tape tape;
        auto target = Tensor::zeros({8, 4});
        for (auto& v : target.value()) v = static_cast<float>(rng.normal());
        auto loss = tape.squared_error(tape.tanh(w), target);
        tape.backward(loss);
        clip_grad_norm(store, 1.0);
        opt.step(store);
      }
      return store.flat_values();
    };
    auto a = run(42), b = run(42);
    CHECK(a == b);
  }
}

TEST_CASE("clip_grad_norm scales to the target norm") {
  ParameterStore store;
  auto w = store.add("w", Tensor::from({2}, {0.f, 0.f}, true));
  w.grad()[0] = 3.f;
  w.grad()[1] = 4.f;
  const double pre = clip_grad_norm(store, 1.0);
  CHECK(pre == doctest::Approx(5.0));
  CHECK(w.grad()[0] == doctest::Approx(0.6f));
  CHECK(w.grad()[1] == doctest::Approx(0.8f));
}

TEST_CASE("grad_check") {
  SUBCASE("linear model is exact to high precision") {
    Rng rng(3, "gc-linear");
    ParameterStoreT<double> store;
    auto w = store.add("w", DT::zeros({1, 8}, true));
    for (auto& v : w.value()) v = rng.normal();
    auto x = DT::zeros({8, 1});
    for (auto& v : x.value()) v = rng.normal();
    const double rel = grad_check<double>(
        [&](DTape& tape) { return tape.sum(tape.matmul(w, x)); }, store, 1e-5);
    CHECK(rel < 1e-6);
  }
  SUBCASE("two-layer tanh net, 200+ parameters") {
    Rng rng(5, "gc-mlp");
    ParameterStoreT<double> store;
    auto w1 = store.add("w1", DT::zeros({6, 20}, true));
    auto b1 = store.add("b1", DT::zeros({1, 20}, true));
    auto w2 = store.add("w2", DT::zeros({20, 4}, true));
    auto b2 = store.add("b2", DT::zeros({1, 4}, true));
    for (auto* t : {&w1, &b1, &w2, &b2})
      for (auto& v : t->value()) v = rng.normal() * 0.5;
    auto x = DT::zeros({3, 6});
    auto y = DT::zeros({3, 4});
    for (auto& v : x.value()) v = rng.normal();
    for (auto& v : y.value()) v = rng.normal();
    CHECK(store.scalar_count() >= 200);
    const double rel = grad_check<double>(
        [&](DTape& tape) {
          auto h = tape.tanh(tape.add(tape.matmul(x, w1), b1));
          auto out = tape.add(tape.matmul(h, w2), b2);
          return tape.squared_error(out, y);
        },
        store, 1e-4);
    CHECK(rel < 1e-3);
  }
  SUBCASE("constant loss has vanishing error") {
    ParameterStoreT<double> store;
    store.add("w", DT::zeros({4}, true));
    const double rel = grad_check<double>(
        [&](DTape& tape) { return tape.sum(DT::from({1}, {3.0})); }, store, 1e-4);
    CHECK(rel < 1e-6);
  }
}

TEST_CASE("small random net matches finite differences in double") {
  // The spec's 64-parameter two-layer example, eps 1e-4, rel err < 1e-3.
  Rng rng(17, "net64");
  ParameterStoreT<double> store;
  auto w1 = store.add("w1", DT::zeros({4, 8}, true));
  auto w2 = store.add("w2", DT::zeros({8, 4}, true));
  for (auto& v : w1.value()) v = rng.normal() * 0.7;
  for (auto& v : w2.value()) v = rng.normal() * 0.7;
  CHECK(store.scalar_count() == 64);
  auto x = DT::zeros({2, 4});
  for (auto& v : x.value()) v = rng.normal();
  const double rel = grad_check<double>(
      [&](DTape& tape) {
        auto h = tape.tanh(tape.matmul(x, w1));
        return tape.squared_error(tape.tanh(tape.matmul(h, w2)), DT::zeros({2, 4}));
      },
      store, 1e-4);
  CHECK(rel < 1e-3);
}
