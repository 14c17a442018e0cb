#include <cmath>
#include <sstream>

#include "doctest.h"
#include "guard/errors.hpp"
#include "guard/gradcheck.hpp"
#include "guard/ops.hpp"
#include "guard/rng.hpp"

using namespace guard;
using ad::Var;

namespace {

// Direct-summation convolution used as an oracle.
Tensor naive_conv(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t pad) {
  auto n = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
  auto co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  auto ho = (h + 2 * pad - kh) / stride + 1, wo = (wd + 2 * pad - kw) / stride + 1;
  std::vector<double> out(n * co * ho * wo, 0.0);
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t o = 0; o < co; ++o)
      for (std::size_t i = 0; i < ho; ++i)
        for (std::size_t j = 0; j < wo; ++j) {
          double s = 0;
          for (std::size_t c = 0; c < ci; ++c)
            for (std::size_t p = 0; p < kh; ++p)
              for (std::size_t q = 0; q < kw; ++q) {
                long r = long(i * stride + p) - long(pad), t = long(j * stride + q) - long(pad);
                if (r < 0 || t < 0 || r >= long(h) || t >= long(wd)) continue;
                s += x[((a * ci + c) * h + r) * wd + t] * w[((o * ci + c) * kh + p) * kw + q];
              }
          out[((a * co + o) * ho + i) * wo + j] = s;
        }
  return Tensor({n, co, ho, wo}, out);
}

Var mlp_loss(const Var& x, const Var& w1, const Var& b1, const Var& w2, const Var& b2,
             const std::vector<int>& y) {
  Var h = ad::softplus(ad::add(ad::matmul(x, w1), ad::channel_broadcast(b1, {x.shape()[0], w1.shape()[1]})), 10.0);
  Var z = ad::add(ad::matmul(h, w2), ad::channel_broadcast(b2, {x.shape()[0], w2.shape()[1]}));
  return ad::scale(ad::cross_entropy_sum(z, y), 1.0 / double(y.size()));
}

}  // namespace

TEST_CASE("tensor invariants and serialization") {
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  CHECK_THROWS_AS(Tensor({2}, std::vector<double>{1, NAN}), NonFiniteError);
  {
    CheckedScope unchecked(false);
    CHECK_NOTHROW(Tensor({1}, std::vector<double>{INFINITY}));
  }
  Rng rng(3);
  Tensor t = rng.normal_tensor({2, 3, 4});
  std::stringstream ss;
  write_gten(ss, t);
  CHECK(ss.str().substr(0, 4) == "GTEN");
  CHECK(ss.str().size() == 4 + 4 + 4 + 3 * 4 + 24 * 8);
  Tensor back = read_gten(ss);
  CHECK(back.bit_equal(t));

  std::stringstream bad("GTEX\x01\x00\x00\x00");
  try {
    read_gten(bad);
    FAIL("expected parse error");
  } catch (const ParseError& e) {
    CHECK(e.offset() == 0);
  }
  std::stringstream truncated(ss.str().substr(0, 30));
  CHECK_THROWS_AS(read_gten(truncated), ParseError);
}

TEST_CASE("rng streams are reproducible and independent") {
  Rng a(42, 7), b(42, 7), c(42, 8);
  for (int i = 0; i < 10; ++i) {
    auto x = a.next_u64();
    CHECK(x == b.next_u64());
    CHECK(x != c.next_u64());
  }
  Rng base(1);
  Rng s1 = base.split(5), s2 = base.split(5);
  CHECK(s1.uniform() == s2.uniform());
  CHECK(base.counter() == 0);
  double m = 0;
  Rng n(9);
  for (int i = 0; i < 20000; ++i) m += n.normal();
  CHECK(std::abs(m / 20000) < 0.03);
}

TEST_CASE("forward op examples") {
  Rng rng(0);
  Tensor a = rng.normal_tensor({3, 5});
  Tensor eye = Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  CHECK(matmul(eye, a).bit_equal(a));

  for (int label = 0; label < 4; ++label) {
    Var z = ad::constant(Tensor::full({1, 4}, 0.7));
    CHECK(ad::cross_entropy_sum(z, {label}).item() == doctest::Approx(std::log(4.0)).epsilon(1e-14));
  }

  Var x = ad::constant(Tensor::full({1, 1, 3, 3}, 1.0));
  Var w = ad::constant(Tensor::full({1, 1, 2, 2}, 1.0));
  Tensor y = ad::conv2d(x, w).value();
  CHECK(y.shape() == Shape{1, 1, 2, 2});
  for (double v : y.data()) CHECK(v == 4.0);

  Tensor xr = rng.normal_tensor({2, 3, 5, 4});
  Tensor wr = rng.normal_tensor({4, 3, 3, 3});
  for (auto [s, p] : {std::pair{1, 0}, {1, 1}, {2, 1}}) {
    Tensor got = ad::conv2d(ad::constant(xr), ad::constant(wr), {std::size_t(s), std::size_t(p)}).value();
    Tensor want = naive_conv(xr, wr, s, p);
    REQUIRE(got.shape() == want.shape());
    CHECK(max_abs(sub(got, want)) < 1e-12);
  }

  CHECK_THROWS_AS(ad::add(ad::constant(Tensor::zeros({2})), ad::constant(Tensor::zeros({3}))), ShapeError);
  CHECK_THROWS_AS(ad::matmul(ad::constant(Tensor::zeros({2, 3})), ad::constant(Tensor::zeros({2, 3}))),
                  ShapeError);
  CHECK_THROWS_AS(ad::cross_entropy_sum(ad::constant(Tensor::zeros({1, 3})), {3}), Error);

  Tensor p = ad::avg_pool2d(ad::constant(Tensor::from({1, 1, 2, 2}, {1, 2, 3, 6})), 2, 2).value();
  CHECK(p.item() == 3.0);
  Tensor mp = ad::max_pool2d(ad::constant(Tensor::from({1, 1, 2, 2}, {1, 7, 3, 6})), 2, 2).value();
  CHECK(mp.item() == 7.0);
}

TEST_CASE("grad examples and errors") {
  {
    ad::Tape tape;
    Var x = tape.leaf(Tensor::from({2}, {3, 4}));
    Var f = ad::scale(ad::sum(ad::square(x)), 0.5);
    Tensor g = ad::grad(f, x).value();
    CHECK(g[0] == 3.0);
    CHECK(g[1] == 4.0);

    Var c = ad::constant(Tensor::scalar(2.5));
    Tensor gc = ad::grad(c, x).value();
    CHECK(gc.shape() == x.shape());
    CHECK(max_abs(gc) == 0.0);

    Var inner = ad::mul(x, x);
    CHECK_THROWS_AS(ad::grad(f, inner), GraphError);
    CHECK_THROWS_AS(ad::grad(inner, x), ShapeError);
    CHECK_THROWS_AS(ad::grad(f, x, true), GraphError);
  }
  Var stale;
  {
    ad::Tape other;
    Var z = other.leaf(Tensor::scalar(1.0));
    stale = ad::mul(z, z);
  }
  ad::Tape tape;
  Var x = tape.leaf(Tensor::scalar(1.0));
  CHECK_THROWS_AS(ad::grad(stale, x), GraphError);
}

TEST_CASE("grad of a seeded 2-8-2 MLP matches central differences") {
  Rng rng(0);
  Tensor x = rng.normal_tensor({6, 2});
  std::vector<int> y{0, 1, 1, 0, 1, 0};
  Tensor w1 = rng.normal_tensor({2, 8}, 0, 0.7), b1 = rng.normal_tensor({8}, 0, 0.1);
  Tensor w2 = rng.normal_tensor({8, 2}, 0, 0.4), b2 = rng.normal_tensor({2}, 0, 0.1);
  double e1 = grad_check([&](const Var& w) {
    return mlp_loss(ad::constant(x), w, ad::constant(b1), ad::constant(w2), ad::constant(b2), y);
  }, w1, 1e-5);
  double e2 = grad_check([&](const Var& w) {
    return mlp_loss(ad::constant(x), ad::constant(w1), ad::constant(b1), w, ad::constant(b2), y);
  }, w2, 1e-5);
  double e3 = grad_check([&](const Var& b) {
    return mlp_loss(ad::constant(x), ad::constant(w1), b, ad::constant(w2), ad::constant(b2), y);
  }, b1, 1e-5);
  CHECK(e1 < 1e-6);
  CHECK(e2 < 1e-6);
  CHECK(e3 < 1e-6);
}

TEST_CASE("grad_check examples") {
  Rng rng(11);
  Tensor x = rng.normal_tensor({8});
  auto half_sq = [](const Var& v) { return ad::scale(ad::sum(ad::square(v)), 0.5); };
  CHECK(grad_check(half_sq, x, 1e-5) < 1e-8);

  auto sp = [](const Var& v) { return ad::sum(ad::softplus(v, 10.0)); };
  CHECK(grad_check(sp, x, 1e-5) < 1e-6);

  // Central differences decay as O(step^2): a 10x smaller step shrinks the
  // absolute error by roughly 100x.
  Tensor analytic;
  {
    ad::Tape t;
    Var xv = t.leaf(x);
    analytic = ad::grad(sp(xv), xv).value();
  }
  double err_a = max_abs(sub(numeric_grad(sp, x, 1e-2), analytic));
  double err_b = max_abs(sub(numeric_grad(sp, x, 1e-3), analytic));
  CHECK(err_a / err_b > 50.0);
  CHECK(err_a / err_b < 200.0);

  Tensor w = rng.normal_tensor({8});
  auto linear = [w](const Var& v) { return ad::sum(ad::mul(v, ad::constant(w))); };
  CHECK(grad_check(linear, x, 1e-5) < 1e-10);

  auto bad = [](const Var& v) { return ad::sum(ad::log(v)); };
  CheckedScope unchecked(false);
  CHECK_THROWS_AS(grad_check(bad, Tensor::from({1}, {1e-6}), 1e-5), NonFiniteError);
}

TEST_CASE("double differentiation of a quadratic yields Au") {
  Rng rng(5);
  const std::size_t d = 6;
  Tensor m = rng.normal_tensor({d, d});
  Buffer sym(d * d);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) sym[i * d + j] = 0.5 * (m[i * d + j] + m[j * d + i]);
  Tensor a({d, d}, std::move(sym));
  for (int trial = 0; trial < 5; ++trial) {
    Tensor x = rng.normal_tensor({d, 1});
    Tensor u = rng.normal_tensor({d, 1});
    ad::Tape tape(2);
    Var xv = tape.leaf(x);
    Var f = ad::scale(ad::sum(ad::mul(xv, ad::matmul(ad::constant(a), xv))), 0.5);
    Var g = ad::grad(f, xv, true);
    Var gu = ad::sum(ad::mul(g, ad::constant(u)));
    Tensor hu = ad::grad(gu, xv).value();
    Tensor want = matmul(a, u);
    CHECK(max_abs(sub(hu, want)) < 1e-12);
  }
}

TEST_CASE("gradient linearity and determinism") {
  Rng rng(8);
  Tensor x = rng.normal_tensor({5});
  auto f = [](const Var& v) { return ad::sum(ad::softplus(ad::mul(v, v), 10.0)); };
  auto g = [](const Var& v) { return ad::sum(ad::tanh(v)); };
  const double alpha = 1.7, beta = -0.4;
  auto grad_of = [&](auto fn) {
    ad::Tape t;
    Var xv = t.leaf(x);
    return ad::grad(fn(xv), xv).value();
  };
  Tensor combo = grad_of([&](const Var& v) { return ad::add(ad::scale(f(v), alpha), ad::scale(g(v), beta)); });
  Tensor sep = add(scale(grad_of(f), alpha), scale(grad_of(g), beta));
  CHECK(max_abs(sub(combo, sep)) < 1e-12);
  CHECK(grad_of(f).bit_equal(grad_of(f)));
}

TEST_CASE("conv and pool gradients pass grad_check") {
  Rng rng(21);
  for (int trial = 0; trial < 4; ++trial) {
    std::size_t n = 1 + rng.below(2), ci = 1 + rng.below(3), co = 1 + rng.below(3);
    std::size_t h = 4 + rng.below(3), w = 4 + rng.below(3);
    ad::Conv2dParams p{1 + rng.below(2), rng.below(2)};
    Tensor x = rng.normal_tensor({n, ci, h, w});
    Tensor k = rng.normal_tensor({co, ci, 3, 3});
    Tensor proj = rng.normal_tensor(ad::conv2d_output_shape(x.shape(), k.shape(), p));
    auto fx = [&](const Var& v) { return ad::sum(ad::mul(ad::conv2d(v, ad::constant(k), p), ad::constant(proj))); };
    auto fk = [&](const Var& v) { return ad::sum(ad::mul(ad::conv2d(ad::constant(x), v, p), ad::constant(proj))); };
    CHECK(grad_check(fx, x, 1e-5) < 1e-5);
    CHECK(grad_check(fk, k, 1e-5) < 1e-5);
    auto fpool = [&](const Var& v) {
      Var pooled = ad::add(ad::avg_pool2d(v, 2, 2), ad::max_pool2d(v, 2, 2));
      return ad::sum(ad::mul(ad::square(pooled), ad::add_scalar(pooled, 3.0)));
    };
    CHECK(grad_check(fpool, x, 1e-5) < 1e-5);
  }
}

TEST_CASE("second-order gradients through conv, pooling and softmax") {
  // x -> ||d loss / d w||^2 requires differentiating conv2d_weight_grad and
  // the softmax-cross-entropy backward.
  Rng rng(4);
  Tensor x = rng.normal_tensor({2, 1, 5, 5});
  Tensor k = rng.normal_tensor({2, 1, 3, 3}, 0, 0.5);
  Tensor fc = rng.normal_tensor({8, 3}, 0, 0.5);
  std::vector<int> y{2, 0};
  auto f = [&](const Var& xv) {
    Var kv = ad::Tape::current()->leaf(k);
    Var h = ad::softplus(ad::conv2d(xv, kv, {1, 1}), 10.0);
    Var pooled = ad::reshape(ad::avg_pool2d(h, 2, 2), {2, 8});
    Var loss = ad::cross_entropy_sum(ad::matmul(pooled, ad::constant(fc)), y);
    Var gk = ad::grad(loss, kv, true);
    return ad::sum(ad::square(gk));
  };
  CHECK(grad_check(f, x, 1e-5) < 1e-5);
}
