#include <cmath>
#include <random>
#include <vector>

#include "cwcf/autodiff.hpp"
#include "doctest.h"

using namespace cwcf;

namespace {

Tensor random_tensor(int rows, int cols, std::mt19937_64& rng, double lo = -3.0,
                     double hi = 3.0) {
  std::uniform_real_distribution<double> pick(lo, hi);
  Tensor t(rows, cols);
  for (double& v : t.data) v = pick(rng);
  return t;
}

// Keeps relu inputs away from the kink so central differences stay clean.
Tensor random_tensor_offzero(int rows, int cols, std::mt19937_64& rng) {
  Tensor t = random_tensor(rows, cols, rng);
  for (double& v : t.data)
    if (std::abs(v) < 0.2) v += std::copysign(0.4, v == 0.0 ? 1.0 : v);
  return t;
}

// Projects a matrix node to a scalar through a fixed random weighting, so
// gradient checks see a non-degenerate downstream signal. The 1e-3 output
// scale keeps central-difference rounding noise below the checker's 1e-8
// absolute guard at coordinates whose true gradient cancels to ~0, without
// weakening the relative comparison anywhere the gradient is measurable.
NodeId weighted_scalar(Tape& tape, NodeId x, std::mt19937_64& rng) {
  const Tensor& xv = tape.value(x);
  NodeId w = tape.constant(random_tensor(xv.cols, 1, rng, 0.3, 1.7));
  NodeId b = tape.constant(Tensor(1, 1));
  return tape.affine(tape.mean_entries(tape.linear(x, w, b)), 1e-3, 0.0);
}

}  // namespace

TEST_CASE("forward primitives compute the advertised values") {
  Tape tape;

  NodeId r = tape.relu(tape.constant(Tensor(1, 3, {-1, 0, 2})));
  CHECK(tape.value(r).data == std::vector<double>{0, 0, 2});

  NodeId s = tape.softmax_row(tape.constant(Tensor(1, 2, {0, 0})));
  CHECK(tape.value(s).data == std::vector<double>{0.5, 0.5});

  // Identity weights leave the input unchanged.
  NodeId x = tape.constant(Tensor(2, 2, {1, 2, 3, 4}));
  NodeId eye = tape.constant(Tensor(2, 2, {1, 0, 0, 1}));
  NodeId zero = tape.constant(Tensor(1, 2));
  CHECK(tape.value(tape.linear(x, eye, zero)).data ==
        std::vector<double>{1, 2, 3, 4});

  NodeId m = tape.mean_rows(tape.constant(Tensor(2, 2, {1, 2, 3, 4})));
  CHECK(tape.value(m).data == std::vector<double>{2, 3});
  NodeId me = tape.mean_entries(tape.constant(Tensor(2, 2, {1, 2, 3, 4})));
  CHECK(tape.value(me).at(0, 0) == 2.5);
  NodeId mr = tape.mean_row_range(tape.constant(Tensor(3, 1, {1, 2, 4})), 1, 3);
  CHECK(tape.value(mr).at(0, 0) == 3.0);

  NodeId cc = tape.concat_cols(tape.constant(Tensor(1, 2, {1, 2})),
                               tape.constant(Tensor(1, 1, {9})));
  CHECK(tape.value(cc).data == std::vector<double>{1, 2, 9});

  NodeId ce = tape.cross_entropy(tape.constant(Tensor(1, 2, {0.25, 0.75})), 1);
  CHECK(tape.value(ce).at(0, 0) == doctest::Approx(-std::log(0.75)));

  CHECK(tape.value(tape.affine(tape.constant(Tensor(1, 1, {3})), 2, 1)).at(0, 0) == 7);
  CHECK(tape.value(tape.square(tape.constant(Tensor(1, 1, {-3})))).at(0, 0) == 9);

  NodeId ge = tape.gather_entries(tape.constant(Tensor(2, 2, {1, 2, 3, 4})),
                                  {{1, 0}, {0, 1}, {1, 0}});
  CHECK(tape.value(ge).data == std::vector<double>{3, 2, 3});
}

TEST_CASE("softmax rows sum to one and ignore constant shifts") {
  std::mt19937_64 rng(3);
  Tape tape;
  // Dyadic logits and shift stay exact under addition, so the two softmax
  // calls see bit-identical shifted inputs.
  Tensor logits(2, 3, {0.25, -1.5, 3.0, 0.5, 0.0, -2.75});
  Tensor shifted = logits;
  for (double& v : shifted.data) v += 4.0;
  NodeId p = tape.softmax_row(tape.constant(logits));
  NodeId q = tape.softmax_row(tape.constant(shifted));
  for (int r = 0; r < 2; ++r) {
    double sum = 0.0;
    for (int c = 0; c < 3; ++c) {
      sum += tape.value(p).at(r, c);
      CHECK(tape.value(p).at(r, c) == tape.value(q).at(r, c));
      CHECK(tape.value(p).at(r, c) > 0.0);
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  }

  // Large logits do not overflow.
  NodeId big = tape.softmax_row(tape.constant(Tensor(1, 2, {1000.0, 1001.0})));
  CHECK(std::isfinite(tape.value(big).at(0, 0)));
  CHECK(tape.value(big).at(0, 1) == doctest::Approx(1.0 / (1.0 + std::exp(-1.0))));

  // log_softmax agrees with log(softmax).
  Tensor z = random_tensor(2, 4, rng);
  NodeId ls = tape.log_softmax_row(tape.constant(z));
  NodeId sm = tape.softmax_row(tape.constant(z));
  for (int c = 0; c < 4; ++c)
    CHECK(tape.value(ls).at(1, c) ==
          doctest::Approx(std::log(tape.value(sm).at(1, c))));
}

TEST_CASE("backward of a parameter sum is all ones and accumulates") {
  Parameter w("w", Tensor(1, 4, {1, 2, 3, 4}));
  {
    Tape tape;
    NodeId x = tape.param(w);
    NodeId total = tape.affine(tape.mean_entries(x), 4.0, 0.0);  // = sum
    tape.backward(total);
  }
  CHECK(w.grad.data == std::vector<double>{1, 1, 1, 1});

  // A second backward without clearing doubles the accumulator.
  {
    Tape tape;
    NodeId x = tape.param(w);
    NodeId total = tape.affine(tape.mean_entries(x), 4.0, 0.0);
    tape.backward(total);
    tape.backward(total);
  }
  CHECK(w.grad.data == std::vector<double>{3, 3, 3, 3});

  zero_grads({&w});
  CHECK(w.grad.data == std::vector<double>{0, 0, 0, 0});
}

TEST_CASE("cross-entropy of a softmax has the classic closed-form gradient") {
  std::mt19937_64 rng(5);
  Parameter z("z", random_tensor(1, 5, rng));
  const int label = 3;
  Tape tape;
  NodeId zn = tape.param(z);
  NodeId p = tape.softmax_row(zn);
  tape.backward(tape.cross_entropy(p, label));
  for (int c = 0; c < 5; ++c) {
    const double want = tape.value(p).at(0, c) - (c == label ? 1.0 : 0.0);
    CHECK(z.grad.at(0, c) == doctest::Approx(want).epsilon(1e-12));
  }
}

TEST_CASE("every primitive passes a central-difference gradient check") {
  std::mt19937_64 rng(7);
  const double eps = 1e-5;
  const double tol = 1e-4;

  SUBCASE("linear") {
    Parameter x("x", random_tensor(3, 4, rng));
    Parameter w("w", random_tensor(4, 2, rng));
    Parameter b("b", random_tensor(1, 2, rng));
    auto f = [&](bool grad) {
      std::mt19937_64 local(99);  // identical projection weights every call
      Tape tape;
      NodeId y = tape.linear(tape.param(x), tape.param(w), tape.param(b));
      NodeId out = weighted_scalar(tape, tape.square(y), local);
      if (grad) tape.backward(out);
      return tape.value(out).at(0, 0);
    };
    CHECK(grad_check(f, {&x, &w, &b}, eps) < tol);
  }

  SUBCASE("relu") {
    Parameter x("x", random_tensor_offzero(3, 3, rng));
    auto f = [&](bool grad) {
      std::mt19937_64 local(11);
      Tape tape;
      NodeId out = weighted_scalar(tape, tape.relu(tape.param(x)), local);
      if (grad) tape.backward(out);
      return tape.value(out).at(0, 0);
    };
    CHECK(grad_check(f, {&x}, eps) < tol);
  }

  SUBCASE("softmax_row") {
    Parameter x("x", random_tensor(2, 4, rng));
    auto f = [&](bool grad) {
      std::mt19937_64 local(13);
      Tape tape;
      NodeId out = weighted_scalar(tape, tape.softmax_row(tape.param(x)), local);
      if (grad) tape.backward(out);
      return tape.value(out).at(0, 0);
    };
    CHECK(grad_check(f, {&x}, eps) < tol);
  }

  SUBCASE("log_softmax_row") {
    Parameter x("x", random_tensor(2, 4, rng));
    auto f = [&](bool grad) {
      std::mt19937_64 local(17);
      Tape tape;
      NodeId out = weighted_scalar(tape, tape.log_softmax_row(tape.param(x)), local);
      if (grad) tape.backward(out);
      return tape.value(out).at(0, 0);
    };
    CHECK(grad_check(f, {&x}, eps) < tol);
  }

  SUBCASE("log") {
    Parameter x("x", random_tensor(2, 3, rng, 0.5, 3.0));
    auto f = [&](bool grad) {
      std::mt19937_64 local(19);
      Tape tape;
      NodeId out = weighted_scalar(tape, tape.log(tape.param(x)), local);
      if (grad) tape.backward(out);
      return tape.value(out).at(0, 0);
    };
    CHECK(grad_check(f, {&x}, eps) < tol);
  }

  SUBCASE("means") {
    Parameter x("x", random_tensor(5, 3, rng));
    auto f = [&](bool grad) {
      std::mt19937_64 local(23);
      Tape tape;
      NodeId xn = tape.param(x);
      NodeId combined = tape.concat_cols(
          tape.concat_cols(tape.mean_rows(xn), tape.mean_row_range(xn, 1, 4)),
          tape.mean_entries(xn));
      NodeId out = weighted_scalar(tape, tape.square(combined), local);
      if (grad) tape.backward(out);
      return tape.value(out).at(0, 0);
    };
    CHECK(grad_check(f, {&x}, eps) < tol);
  }

  SUBCASE("batchnorm training") {
    Parameter x("x", random_tensor(6, 3, rng));
    Parameter gamma("gamma", random_tensor(1, 3, rng, 0.5, 1.5));
    Parameter beta("beta", random_tensor(1, 3, rng, -0.5, 0.5));
    BnState state(3);
    auto f = [&](bool grad) {
      std::mt19937_64 local(29);
      Tape tape;
      NodeId y = tape.batchnorm(tape.param(x), tape.param(gamma),
                                tape.param(beta), state, true);
      NodeId out = weighted_scalar(tape, tape.square(y), local);
      if (grad) tape.backward(out);
      return tape.value(out).at(0, 0);
    };
    CHECK(grad_check(f, {&x, &gamma, &beta}, eps) < tol);
  }

  SUBCASE("batchnorm inference") {
    Parameter x("x", random_tensor(4, 3, rng));
    Parameter gamma("gamma", random_tensor(1, 3, rng, 0.5, 1.5));
    Parameter beta("beta", random_tensor(1, 3, rng, -0.5, 0.5));
    BnState state(3);
    state.running_mean = {0.3, -0.2, 0.1};
    state.running_var = {1.2, 0.8, 2.0};
    auto f = [&](bool grad) {
      std::mt19937_64 local(31);
      Tape tape;
      NodeId y = tape.batchnorm(tape.param(x), tape.param(gamma),
                                tape.param(beta), state, false);
      NodeId out = weighted_scalar(tape, tape.square(y), local);
      if (grad) tape.backward(out);
      return tape.value(out).at(0, 0);
    };
    CHECK(grad_check(f, {&x, &gamma, &beta}, eps) < tol);
  }

  SUBCASE("cross_entropy through softmax") {
    Parameter z("z", random_tensor(1, 6, rng));
    auto f = [&](bool grad) {
      Tape tape;
      NodeId out = tape.cross_entropy(tape.softmax_row(tape.param(z)), 2);
      if (grad) tape.backward(out);
      return tape.value(out).at(0, 0);
    };
    CHECK(grad_check(f, {&z}, eps) < tol);
  }

  SUBCASE("selects, add, affine, square, compose") {
    Parameter x("x", random_tensor(3, 2, rng));
    Parameter y("y", random_tensor(2, 2, rng));
    auto f = [&](bool grad) {
      std::mt19937_64 local(37);
      Tape tape;
      NodeId xn = tape.param(x);
      NodeId yn = tape.param(y);
      // Interleave rows of x and y into a 4x2 matrix over a constant base.
      Tensor base(4, 2);
      base.data = {9, 9, 9, 9, 9, 9, 9, 9};
      NodeId c = tape.compose(base, {{xn, 0, 0}, {yn, 1, 1}, {xn, 2, 3}});
      NodeId row = tape.select_row(c, 1);
      NodeId entry = tape.select_entry(c, 3, 0);
      NodeId mixed = tape.add(tape.square(row),
                              tape.concat_cols(entry, tape.affine(entry, -2.0, 0.5)));
      NodeId out = weighted_scalar(tape, mixed, local);
      if (grad) tape.backward(out);
      return tape.value(out).at(0, 0);
    };
    CHECK(grad_check(f, {&x, &y}, eps) < tol);
  }

  SUBCASE("gather_entries") {
    Parameter x("x", random_tensor(3, 4, rng));
    auto f = [&](bool grad) {
      std::mt19937_64 local(41);
      Tape tape;
      NodeId xn = tape.param(x);
      // Repeats one position so its gradient is the sum of two path terms.
      NodeId g = tape.gather_entries(xn, {{2, 1}, {0, 0}, {2, 1}, {1, 3}});
      NodeId out = weighted_scalar(tape, tape.softmax_row(g), local);
      if (grad) tape.backward(out);
      return tape.value(out).at(0, 0);
    };
    CHECK(grad_check(f, {&x}, eps) < tol);
  }

  SUBCASE("constant function has zero gradient both ways") {
    Parameter x("x", random_tensor(2, 2, rng));
    auto f = [&](bool grad) {
      Tape tape;
      NodeId c = tape.constant(Tensor(1, 1, {2.5}));
      NodeId out = tape.affine(c, 2.0, 0.0);
      if (grad) {
        (void)tape.param(x);  // on the tape but unused by the output
        tape.backward(out);
      }
      return tape.value(out).at(0, 0);
    };
    CHECK(grad_check(f, {&x}, eps) == 0.0);
  }

  SUBCASE("square at w=3 differentiates to about 6") {
    Parameter w("w", Tensor(1, 1, {3.0}));
    auto f = [&](bool grad) {
      Tape tape;
      NodeId out = tape.square(tape.param(w));
      if (grad) tape.backward(out);
      return tape.value(out).at(0, 0);
    };
    CHECK(grad_check(f, {&w}, eps) < tol);
    CHECK(w.grad.at(0, 0) == doctest::Approx(6.0));
  }
}

TEST_CASE("batchnorm normalizes the batch and tracks running statistics") {
  std::mt19937_64 rng(43);
  // Wide inputs keep the eps term negligible next to the batch variance.
  Parameter x("x", random_tensor(32, 4, rng, -20.0, 20.0));
  Parameter gamma("gamma", Tensor(1, 4, {1, 1, 1, 1}));
  Parameter beta("beta", Tensor(1, 4));
  BnState state(4);

  Tape tape;
  NodeId y = tape.batchnorm(tape.param(x), tape.param(gamma), tape.param(beta),
                            state, true);
  const Tensor& yv = tape.value(y);
  for (int c = 0; c < 4; ++c) {
    double mean = 0.0;
    for (int r = 0; r < 32; ++r) mean += yv.at(r, c);
    mean /= 32;
    double var = 0.0;
    for (int r = 0; r < 32; ++r) var += (yv.at(r, c) - mean) * (yv.at(r, c) - mean);
    var /= 32;
    CHECK(std::abs(mean) < 1e-6);
    CHECK(std::abs(var - 1.0) < 1e-6);
  }

  // Running stats moved 1% of the way toward the batch stats.
  for (int c = 0; c < 4; ++c) {
    double bm = 0.0;
    for (int r = 0; r < 32; ++r) bm += x.value.at(r, c);
    bm /= 32;
    double bv = 0.0;
    for (int r = 0; r < 32; ++r) bv += (x.value.at(r, c) - bm) * (x.value.at(r, c) - bm);
    bv /= 32;
    CHECK(state.running_mean[c] == doctest::Approx(0.01 * bm).epsilon(1e-12));
    CHECK(state.running_var[c] == doctest::Approx(0.99 + 0.01 * bv).epsilon(1e-12));
  }

  // Inference mode normalizes by the running statistics.
  Tape tape2;
  NodeId y2 = tape2.batchnorm(tape2.param(x), tape2.param(gamma),
                              tape2.param(beta), state, false);
  const double want = (x.value.at(0, 0) - state.running_mean[0]) /
                      std::sqrt(state.running_var[0] + state.eps);
  CHECK(tape2.value(y2).at(0, 0) == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("adam takes the hand-computed first step") {
  Parameter w("w", Tensor(1, 1, {1.0}));
  AdamState state;

  // Zero gradients and no regularization leave the parameter alone.
  adam_step({&w}, state, 0.1, 0.0);
  CHECK(w.value.at(0, 0) == 1.0);

  // Bias-corrected first step with grad 1: w -= lr * 1/(1 + eps-ish).
  Parameter w2("w2", Tensor(1, 1, {1.0}));
  AdamState s2;
  w2.grad.at(0, 0) = 1.0;
  adam_step({&w2}, s2, 0.1, 0.0);
  CHECK(w2.value.at(0, 0) == doctest::Approx(0.9).epsilon(1e-6));
  CHECK(s2.t == 1);

  // Pure regularization pulls the weight toward zero.
  Parameter w3("w3", Tensor(1, 1, {1.0}));
  AdamState s3;
  adam_step({&w3}, s3, 0.01, 1e-4);
  CHECK(w3.value.at(0, 0) < 1.0);
  CHECK(w3.value.at(0, 0) > 0.9);
}

TEST_CASE("clip_global_norm scales proportionally across parameters") {
  Parameter a("a", Tensor(1, 2));
  Parameter b("b", Tensor(1, 1));
  // Global norm sqrt(0.12^2 + 0.12^2 + 0.09^2) = 0.1924...
  a.grad.data = {0.12, 0.12};
  b.grad.data = {0.09};
  const double before = std::sqrt(0.12 * 0.12 + 0.12 * 0.12 + 0.09 * 0.09);
  const double post = clip_global_norm({&a, &b}, 0.1);
  CHECK(post <= 0.1 + 1e-12);
  CHECK(a.grad.data[0] == doctest::Approx(0.12 * 0.1 / before));
  CHECK(b.grad.data[0] == doctest::Approx(0.09 * 0.1 / before));

  // Small gradients pass through untouched, and nothing ever grows.
  a.grad.data = {0.03, 0.02};
  b.grad.data = {0.01};
  const double small = clip_global_norm({&a, &b}, 0.1);
  CHECK(small == doctest::Approx(std::sqrt(0.03 * 0.03 + 0.02 * 0.02 + 0.01 * 0.01)));
  CHECK(a.grad.data[0] == 0.03);

  std::mt19937_64 rng(47);
  for (int trial = 0; trial < 100; ++trial) {
    Parameter p("p", Tensor(1, 8));
    std::uniform_real_distribution<double> pick(-1.0, 1.0);
    for (double& g : p.grad.data) g = pick(rng);
    std::vector<double> before_clip = p.grad.data;
    const double post_norm = clip_global_norm({&p}, 0.1);
    CHECK(post_norm <= 0.1 + 1e-12);
    for (size_t i = 0; i < before_clip.size(); ++i)
      CHECK(std::abs(p.grad.data[i]) <= std::abs(before_clip[i]) + 1e-15);
  }
}

TEST_CASE("shape and domain violations are rejected") {
  Tape tape;
  NodeId x = tape.constant(Tensor(2, 3, {1, 2, 3, 4, 5, 6}));
  NodeId w = tape.constant(Tensor(2, 2, {1, 0, 0, 1}));
  NodeId b = tape.constant(Tensor(1, 2));
  CHECK_THROWS_AS(tape.linear(x, w, b), AutodiffError);  // 3 vs 2 inner dim
  CHECK_THROWS_AS(tape.log(tape.constant(Tensor(1, 1, {-1.0}))), AutodiffError);
  CHECK_THROWS_AS(tape.backward(x), AutodiffError);  // not a scalar
  CHECK_THROWS_AS(tape.mean_row_range(x, 1, 1), AutodiffError);
  CHECK_THROWS_AS(tape.cross_entropy(tape.constant(Tensor(1, 2, {0.5, 0.5})), 2),
                  AutodiffError);
  CHECK_THROWS_AS(tape.gather_entries(x, {{2, 0}}), AutodiffError);  // row 2 of 2
  CHECK_THROWS_AS(tape.gather_entries(x, {}), AutodiffError);
}
