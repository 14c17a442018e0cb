#include "guard/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "guard/errors.hpp"

namespace guard {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

bool is_scalar(const Tensor& t) { return t.rank() == 0; }

Shape binary_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return a.shape();
  if (is_scalar(a)) return b.shape();
  if (is_scalar(b)) return a.shape();
  throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                   shape_str(b.shape()));
}

template <class F>
Tensor map2(const Tensor& a, const Tensor& b, F f, const char* op) {
  Shape s = binary_shape(a, b, op);
  std::size_t n = shape_numel(s);
  Buffer out(n);
  auto da = a.data();
  auto db = b.data();
  if (a.numel() == n && b.numel() == n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = f(da[i], db[i]);
  } else if (a.numel() == n) {
    double bv = db[0];
    for (std::size_t i = 0; i < n; ++i) out[i] = f(da[i], bv);
  } else {
    double av = da[0];
    for (std::size_t i = 0; i < n; ++i) out[i] = f(av, db[i]);
  }
  return Tensor(std::move(s), std::move(out));
}

template <class F>
Tensor map1(const Tensor& a, F f) {
  Buffer out(a.numel());
  auto d = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(d[i]);
  return Tensor(a.shape(), std::move(out));
}

Tensor matmul_kernel(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Buffer out(m * n);
  MutMap(out.data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n)).noalias() =
      ConstMap(a.data().data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k)) *
      ConstMap(b.data().data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
  return Tensor({m, n}, std::move(out));
}

Tensor transpose_kernel(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose requires rank 2");
  std::size_t m = a.dim(0), n = a.dim(1);
  Buffer out(m * n);
  auto d = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = d[i * n + j];
  return Tensor({n, m}, std::move(out));
}

// ---- convolution ----------------------------------------------------------

struct ConvGeom {
  std::size_t n, ci, h, w, co, kh, kw, ho, wo, stride, pad;
  std::size_t k() const { return ci * kh * kw; }
  std::size_t p() const { return ho * wo; }
};

ConvGeom conv_geom(const Shape& x, const Shape& w, ad::Conv2dParams prm) {
  if (x.size() != 4 || w.size() != 4)
    throw ShapeError("conv2d expects rank-4 input and weight, got " + shape_str(x) + " and " +
                     shape_str(w));
  if (x[1] != w[1])
    throw ShapeError("conv2d channel mismatch " + shape_str(x) + " vs " + shape_str(w));
  if (prm.stride == 0) throw ShapeError("conv2d stride must be positive");
  std::size_t hp = x[2] + 2 * prm.pad, wp = x[3] + 2 * prm.pad;
  if (hp < w[2] || wp < w[3]) throw ShapeError("conv2d kernel larger than padded input");
  ConvGeom g{x[0], x[1], x[2], x[3], w[0], w[2], w[3], (hp - w[2]) / prm.stride + 1,
             (wp - w[3]) / prm.stride + 1, prm.stride, prm.pad};
  return g;
}

// cols: K x (N * P)
Buffer im2col(const double* x, const ConvGeom& g) {
  const std::size_t np = g.n * g.p();
  Buffer cols(g.k() * np, 0.0);
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t c = 0; c < g.ci; ++c)
      for (std::size_t ki = 0; ki < g.kh; ++ki)
        for (std::size_t kj = 0; kj < g.kw; ++kj) {
          std::size_t row = (c * g.kh + ki) * g.kw + kj;
          double* dst = cols.data() + row * np + n * g.p();
          const double* src = x + (n * g.ci + c) * g.h * g.w;
          for (std::size_t oh = 0; oh < g.ho; ++oh) {
            std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride + ki) -
                                static_cast<std::ptrdiff_t>(g.pad);
            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.h)) continue;
            for (std::size_t ow = 0; ow < g.wo; ++ow) {
              std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * g.stride + kj) -
                                  static_cast<std::ptrdiff_t>(g.pad);
              if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.w)) continue;
              dst[oh * g.wo + ow] = src[static_cast<std::size_t>(ih) * g.w + static_cast<std::size_t>(iw)];
            }
          }
        }
  return cols;
}

void col2im(const double* cols, const ConvGeom& g, double* x) {
  const std::size_t np = g.n * g.p();
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t c = 0; c < g.ci; ++c)
      for (std::size_t ki = 0; ki < g.kh; ++ki)
        for (std::size_t kj = 0; kj < g.kw; ++kj) {
          std::size_t row = (c * g.kh + ki) * g.kw + kj;
          const double* src = cols + row * np + n * g.p();
          double* dst = x + (n * g.ci + c) * g.h * g.w;
          for (std::size_t oh = 0; oh < g.ho; ++oh) {
            std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride + ki) -
                                static_cast<std::ptrdiff_t>(g.pad);
            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.h)) continue;
            for (std::size_t ow = 0; ow < g.wo; ++ow) {
              std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * g.stride + kj) -
                                  static_cast<std::ptrdiff_t>(g.pad);
              if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.w)) continue;
              dst[static_cast<std::size_t>(ih) * g.w + static_cast<std::size_t>(iw)] += src[oh * g.wo + ow];
            }
          }
        }
}

// (N, Co, P) <-> (Co, N * P)
Buffer nchw_to_cm(const double* g, const ConvGeom& geo) {
  Buffer out(geo.co * geo.n * geo.p());
  for (std::size_t n = 0; n < geo.n; ++n)
    for (std::size_t c = 0; c < geo.co; ++c)
      std::copy_n(g + (n * geo.co + c) * geo.p(), geo.p(),
                  out.data() + c * geo.n * geo.p() + n * geo.p());
  return out;
}

Tensor conv_forward(const Tensor& x, const Tensor& w, ad::Conv2dParams prm) {
  ConvGeom g = conv_geom(x.shape(), w.shape(), prm);
  Buffer cols = im2col(x.data().data(), g);
  const auto np = static_cast<Eigen::Index>(g.n * g.p());
  RowMat out = ConstMap(w.data().data(), static_cast<Eigen::Index>(g.co),
                        static_cast<Eigen::Index>(g.k())) *
               ConstMap(cols.data(), static_cast<Eigen::Index>(g.k()), np);
  Buffer y(g.n * g.co * g.p());
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t c = 0; c < g.co; ++c)
      std::copy_n(out.data() + c * g.n * g.p() + n * g.p(), g.p(), y.data() + (n * g.co + c) * g.p());
  return Tensor({g.n, g.co, g.ho, g.wo}, std::move(y));
}

Tensor conv_input_grad(const Tensor& gout, const Tensor& w, const Shape& xs, ad::Conv2dParams prm) {
  ConvGeom g = conv_geom(xs, w.shape(), prm);
  if (gout.shape() != Shape{g.n, g.co, g.ho, g.wo})
    throw ShapeError("conv2d_input_grad: gradient shape " + shape_str(gout.shape()));
  Buffer gm = nchw_to_cm(gout.data().data(), g);
  const auto np = static_cast<Eigen::Index>(g.n * g.p());
  RowMat cols = ConstMap(w.data().data(), static_cast<Eigen::Index>(g.co),
                         static_cast<Eigen::Index>(g.k()))
                    .transpose() *
                ConstMap(gm.data(), static_cast<Eigen::Index>(g.co), np);
  Buffer x(shape_numel(xs), 0.0);
  col2im(cols.data(), g, x.data());
  return Tensor(xs, std::move(x));
}

Tensor conv_weight_grad(const Tensor& x, const Tensor& gout, const Shape& ws, ad::Conv2dParams prm) {
  ConvGeom g = conv_geom(x.shape(), ws, prm);
  if (gout.shape() != Shape{g.n, g.co, g.ho, g.wo})
    throw ShapeError("conv2d_weight_grad: gradient shape " + shape_str(gout.shape()));
  Buffer cols = im2col(x.data().data(), g);
  Buffer gm = nchw_to_cm(gout.data().data(), g);
  const auto np = static_cast<Eigen::Index>(g.n * g.p());
  Buffer dw(g.co * g.k());
  MutMap(dw.data(), static_cast<Eigen::Index>(g.co), static_cast<Eigen::Index>(g.k())).noalias() =
      ConstMap(gm.data(), static_cast<Eigen::Index>(g.co), np) *
      ConstMap(cols.data(), static_cast<Eigen::Index>(g.k()), np).transpose();
  return Tensor(ws, std::move(dw));
}

// ---- pooling --------------------------------------------------------------

struct PoolGeom {
  std::size_t n, c, h, w, ho, wo, k, s;
};

PoolGeom pool_geom(const Shape& x, std::size_t k, std::size_t s) {
  if (x.size() != 4) throw ShapeError("pool2d expects rank-4 input, got " + shape_str(x));
  if (k == 0 || s == 0 || k > x[2] || k > x[3]) throw ShapeError("invalid pool2d window");
  return {x[0], x[1], x[2], x[3], (x[2] - k) / s + 1, (x[3] - k) / s + 1, k, s};
}

Tensor avg_pool_kernel(const Tensor& x, std::size_t k, std::size_t s) {
  PoolGeom g = pool_geom(x.shape(), k, s);
  Buffer out(g.n * g.c * g.ho * g.wo, 0.0);
  auto d = x.data();
  double inv = 1.0 / static_cast<double>(k * k);
  for (std::size_t nc = 0; nc < g.n * g.c; ++nc)
    for (std::size_t oh = 0; oh < g.ho; ++oh)
      for (std::size_t ow = 0; ow < g.wo; ++ow) {
        double acc = 0.0;
        for (std::size_t i = 0; i < k; ++i)
          for (std::size_t j = 0; j < k; ++j)
            acc += d[(nc * g.h + oh * s + i) * g.w + ow * s + j];
        out[(nc * g.ho + oh) * g.wo + ow] = acc * inv;
      }
  return Tensor({g.n, g.c, g.ho, g.wo}, std::move(out));
}

Tensor avg_pool_adjoint_kernel(const Tensor& gout, const Shape& xs, std::size_t k, std::size_t s) {
  PoolGeom g = pool_geom(xs, k, s);
  if (gout.shape() != Shape{g.n, g.c, g.ho, g.wo})
    throw ShapeError("avg_pool2d_adjoint: gradient shape " + shape_str(gout.shape()));
  Buffer out(shape_numel(xs), 0.0);
  auto d = gout.data();
  double inv = 1.0 / static_cast<double>(k * k);
  for (std::size_t nc = 0; nc < g.n * g.c; ++nc)
    for (std::size_t oh = 0; oh < g.ho; ++oh)
      for (std::size_t ow = 0; ow < g.wo; ++ow) {
        double v = d[(nc * g.ho + oh) * g.wo + ow] * inv;
        for (std::size_t i = 0; i < k; ++i)
          for (std::size_t j = 0; j < k; ++j) out[(nc * g.h + oh * s + i) * g.w + ow * s + j] += v;
      }
  return Tensor(xs, std::move(out));
}

Tensor softmax_kernel(const Tensor& z) {
  if (z.rank() != 2) throw ShapeError("softmax expects (N, C) logits, got " + shape_str(z.shape()));
  std::size_t n = z.dim(0), c = z.dim(1);
  Buffer out(n * c);
  auto d = z.data();
  for (std::size_t i = 0; i < n; ++i) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) m = std::max(m, d[i * c + j]);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += out[i * c + j] = std::exp(d[i * c + j] - m);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= s;
  }
  return Tensor(z.shape(), std::move(out));
}

// Row-wise log-sum-exp.
std::vector<double> logsumexp_rows(const Tensor& z) {
  std::size_t n = z.dim(0), c = z.dim(1);
  std::vector<double> out(n);
  auto d = z.data();
  for (std::size_t i = 0; i < n; ++i) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) m = std::max(m, d[i * c + j]);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(d[i * c + j] - m);
    out[i] = m + std::log(s);
  }
  return out;
}

std::size_t channel_count(const Shape& s) {
  if (s.size() != 2 && s.size() != 4)
    throw ShapeError("channel ops expect rank 2 or 4, got " + shape_str(s));
  return s[1];
}

std::size_t channel_inner(const Shape& s) { return s.size() == 4 ? s[2] * s[3] : 1; }

}  // namespace

Tensor softmax_rows(const Tensor& logits) { return softmax_kernel(logits); }

std::vector<int> argmax_rows(const Tensor& logits) {
  if (logits.rank() != 2) throw ShapeError("argmax_rows expects rank 2");
  std::size_t n = logits.dim(0), c = logits.dim(1);
  std::vector<int> out(n);
  auto d = logits.data();
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j)
      if (d[i * c + j] > d[i * c + best]) best = j;
    out[i] = static_cast<int>(best);
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  return map2(a, b, [](double x, double y) { return x + y; }, "add");
}
Tensor sub(const Tensor& a, const Tensor& b) {
  return map2(a, b, [](double x, double y) { return x - y; }, "sub");
}
Tensor scale(const Tensor& a, double s) {
  return map1(a, [s](double x) { return s * x; });
}
Tensor axpy(double alpha, const Tensor& x, const Tensor& y) {
  return map2(x, y, [alpha](double u, double v) { return alpha * u + v; }, "axpy");
}
double dot(const Tensor& a, const Tensor& b) {
  if (a.numel() != b.numel()) throw ShapeError("dot: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += a[i] * b[i];
  return s;
}
double norm2(const Tensor& a) { return std::sqrt(dot(a, a)); }
double max_abs(const Tensor& a) {
  double m = 0.0;
  for (double v : a.data()) m = std::max(m, std::abs(v));
  return m;
}
Tensor clamp(const Tensor& a, double lo, double hi) {
  return map1(a, [lo, hi](double x) { return std::clamp(x, lo, hi); });
}
Tensor matmul(const Tensor& a, const Tensor& b) { return matmul_kernel(a, b); }

}  // namespace guard

namespace guard::ad {

namespace {

Var reduce_to(const Var& g, const Shape& shape) {
  if (shape.empty() && g.rank() != 0) return sum(g);
  return g;
}

std::vector<Var> grads(std::initializer_list<Var> v) { return std::vector<Var>(v); }

}  // namespace

Var add(const Var& a, const Var& b) {
  Tensor v = guard::add(a.value(), b.value());
  Shape sa = a.shape(), sb = b.shape();
  return record(std::move(v), {a, b}, [sa, sb](const Var& g, const Var&, const Needs& n) {
    return grads({n[0] ? reduce_to(g, sa) : Var(), n[1] ? reduce_to(g, sb) : Var()});
  });
}

Var sub(const Var& a, const Var& b) {
  Tensor v = guard::sub(a.value(), b.value());
  Shape sa = a.shape(), sb = b.shape();
  return record(std::move(v), {a, b}, [sa, sb](const Var& g, const Var&, const Needs& n) {
    return grads({n[0] ? reduce_to(g, sa) : Var(), n[1] ? reduce_to(neg(g), sb) : Var()});
  });
}

Var mul(const Var& a, const Var& b) {
  Tensor v = map2(a.value(), b.value(), [](double x, double y) { return x * y; }, "mul");
  return record(std::move(v), {a, b}, [a, b](const Var& g, const Var&, const Needs& n) {
    return grads({n[0] ? reduce_to(mul(g, b), a.shape()) : Var(),
                  n[1] ? reduce_to(mul(g, a), b.shape()) : Var()});
  });
}

Var div(const Var& a, const Var& b) {
  Tensor v = map2(a.value(), b.value(), [](double x, double y) { return x / y; }, "div");
  return record(std::move(v), {a, b}, [a, b](const Var& g, const Var& out, const Needs& n) {
    return grads({n[0] ? reduce_to(div(g, b), a.shape()) : Var(),
                  n[1] ? reduce_to(neg(div(mul(g, out), b)), b.shape()) : Var()});
  });
}

Var neg(const Var& a) {
  return record(guard::scale(a.value(), -1.0), {a},
                [](const Var& g, const Var&, const Needs&) { return grads({neg(g)}); });
}

Var scale(const Var& a, double s) {
  return record(guard::scale(a.value(), s), {a},
                [s](const Var& g, const Var&, const Needs&) { return grads({scale(g, s)}); });
}

Var add_scalar(const Var& a, double s) {
  return record(map1(a.value(), [s](double x) { return x + s; }), {a},
                [](const Var& g, const Var&, const Needs&) { return grads({g}); });
}

Var square(const Var& a) { return mul(a, a); }

Var sqrt(const Var& a) {
  return record(map1(a.value(), [](double x) { return std::sqrt(x); }), {a},
                [](const Var& g, const Var& out, const Needs&) {
                  return grads({div(scale(g, 0.5), out)});
                });
}

Var exp(const Var& a) {
  return record(map1(a.value(), [](double x) { return std::exp(x); }), {a},
                [](const Var& g, const Var& out, const Needs&) { return grads({mul(g, out)}); });
}

Var log(const Var& a) {
  return record(map1(a.value(), [](double x) { return std::log(x); }), {a},
                [a](const Var& g, const Var&, const Needs&) { return grads({div(g, a)}); });
}

Var tanh(const Var& a) {
  return record(map1(a.value(), [](double x) { return std::tanh(x); }), {a},
                [](const Var& g, const Var& out, const Needs&) {
                  return grads({mul(g, add_scalar(neg(mul(out, out)), 1.0))});
                });
}

Var sigmoid(const Var& a) {
  auto f = [](double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
  };
  return record(map1(a.value(), f), {a}, [](const Var& g, const Var& out, const Needs&) {
    return grads({mul(g, mul(out, add_scalar(neg(out), 1.0)))});
  });
}

Var relu(const Var& a) {
  Tensor mask = map1(a.value(), [](double x) { return x > 0.0 ? 1.0 : 0.0; });
  Tensor v = map1(a.value(), [](double x) { return x > 0.0 ? x : 0.0; });
  // Second derivative is zero everywhere, including the kink.
  return record(std::move(v), {a}, [mask](const Var& g, const Var&, const Needs&) {
    return grads({mul(g, constant(mask))});
  });
}

Var softplus(const Var& a, double beta) {
  auto f = [beta](double x) {
    double t = beta * x;
    return (t > 30.0 ? t : std::log1p(std::exp(t))) / beta;
  };
  return record(map1(a.value(), f), {a}, [a, beta](const Var& g, const Var&, const Needs&) {
    return grads({mul(g, sigmoid(scale(a, beta)))});
  });
}

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  Shape sa = a.shape();
  return record(Tensor::scalar(s), {a}, [sa](const Var& g, const Var&, const Needs&) {
    return grads({expand(g, sa)});
  });
}

Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Var l2_norm(const Var& a) {
  double nrm = norm2(a.value());
  return record(Tensor::scalar(nrm), {a}, [a](const Var& g, const Var& out, const Needs&) {
    if (out.item() == 0.0) return grads({constant(Tensor::zeros(a.shape()))});
    return grads({mul(a, div(g, out))});
  });
}

Var expand(const Var& s, const Shape& shape) {
  if (s.rank() != 0) throw ShapeError("expand expects a rank-0 value");
  Tensor v = Tensor::full(shape, s.item());
  return record(std::move(v), {s}, [](const Var& g, const Var&, const Needs&) {
    return grads({sum(g)});
  });
}

Var reshape(const Var& a, Shape shape) {
  Shape sa = a.shape();
  return record(a.value().reshape(std::move(shape)), {a},
                [sa](const Var& g, const Var&, const Needs&) { return grads({reshape(g, sa)}); });
}

Var matmul(const Var& a, const Var& b) {
  return record(matmul_kernel(a.value(), b.value()), {a, b},
                [a, b](const Var& g, const Var&, const Needs& n) {
                  return grads({n[0] ? matmul(g, transpose(b)) : Var(),
                                n[1] ? matmul(transpose(a), g) : Var()});
                });
}

Var transpose(const Var& a) {
  return record(transpose_kernel(a.value()), {a},
                [](const Var& g, const Var&, const Needs&) { return grads({transpose(g)}); });
}

Var row_sum(const Var& a) {
  const Tensor& t = a.value();
  if (t.rank() == 0) throw ShapeError("row_sum of a scalar");
  std::size_t n = t.rows(), rs = t.row_size();
  Buffer out(n, 0.0);
  auto d = t.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < rs; ++j) out[i] += d[i * rs + j];
  Shape sa = t.shape();
  return record(Tensor({n}, std::move(out)), {a}, [sa](const Var& g, const Var&, const Needs&) {
    return grads({row_broadcast(g, sa)});
  });
}

Var row_broadcast(const Var& v, const Shape& shape) {
  if (v.rank() != 1 || shape.empty() || shape[0] != v.shape()[0])
    throw ShapeError("row_broadcast: " + shape_str(v.shape()) + " to " + shape_str(shape));
  std::size_t n = shape[0], rs = shape_numel(shape) / n;
  Buffer out(n * rs);
  auto d = v.value().data();
  for (std::size_t i = 0; i < n; ++i) std::fill_n(out.data() + i * rs, rs, d[i]);
  return record(Tensor(shape, std::move(out)), {v},
                [](const Var& g, const Var&, const Needs&) { return grads({row_sum(g)}); });
}

Var channel_sum(const Var& a) {
  const Shape& s = a.shape();
  std::size_t c = channel_count(s), inner = channel_inner(s), n = s[0];
  Buffer out(c, 0.0);
  auto d = a.value().data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < c; ++k)
      for (std::size_t j = 0; j < inner; ++j) out[k] += d[(i * c + k) * inner + j];
  Shape sa = s;
  return record(Tensor({c}, std::move(out)), {a}, [sa](const Var& g, const Var&, const Needs&) {
    return grads({channel_broadcast(g, sa)});
  });
}

Var channel_broadcast(const Var& v, const Shape& shape) {
  std::size_t c = channel_count(shape), inner = channel_inner(shape), n = shape[0];
  if (v.rank() != 1 || v.shape()[0] != c)
    throw ShapeError("channel_broadcast: " + shape_str(v.shape()) + " to " + shape_str(shape));
  Buffer out(shape_numel(shape));
  auto d = v.value().data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < c; ++k) std::fill_n(out.data() + (i * c + k) * inner, inner, d[k]);
  return record(Tensor(shape, std::move(out)), {v},
                [](const Var& g, const Var&, const Needs&) { return grads({channel_sum(g)}); });
}

Shape conv2d_output_shape(const Shape& x, const Shape& w, Conv2dParams p) {
  ConvGeom g = conv_geom(x, w, p);
  return {g.n, g.co, g.ho, g.wo};
}

Var conv2d(const Var& x, const Var& w, Conv2dParams p) {
  return record(conv_forward(x.value(), w.value(), p), {x, w},
                [x, w, p](const Var& g, const Var&, const Needs& n) {
                  return grads({n[0] ? conv2d_input_grad(g, w, x.shape(), p) : Var(),
                                n[1] ? conv2d_weight_grad(x, g, w.shape(), p) : Var()});
                });
}

Var conv2d_input_grad(const Var& g, const Var& w, const Shape& x_shape, Conv2dParams p) {
  return record(conv_input_grad(g.value(), w.value(), x_shape, p), {g, w},
                [g, w, p](const Var& up, const Var&, const Needs& n) {
                  return grads({n[0] ? conv2d(up, w, p) : Var(),
                                n[1] ? conv2d_weight_grad(up, g, w.shape(), p) : Var()});
                });
}

Var conv2d_weight_grad(const Var& x, const Var& g, const Shape& w_shape, Conv2dParams p) {
  return record(conv_weight_grad(x.value(), g.value(), w_shape, p), {x, g},
                [x, g, p](const Var& up, const Var&, const Needs& n) {
                  return grads({n[0] ? conv2d_input_grad(g, up, x.shape(), p) : Var(),
                                n[1] ? conv2d(x, up, p) : Var()});
                });
}

Var avg_pool2d(const Var& x, std::size_t kernel, std::size_t stride) {
  Shape xs = x.shape();
  return record(avg_pool_kernel(x.value(), kernel, stride), {x},
                [xs, kernel, stride](const Var& g, const Var&, const Needs&) {
                  return grads({avg_pool2d_adjoint(g, xs, kernel, stride)});
                });
}

Var avg_pool2d_adjoint(const Var& g, const Shape& x_shape, std::size_t kernel, std::size_t stride) {
  return record(avg_pool_adjoint_kernel(g.value(), x_shape, kernel, stride), {g},
                [kernel, stride](const Var& up, const Var&, const Needs&) {
                  return grads({avg_pool2d(up, kernel, stride)});
                });
}

Var max_pool2d(const Var& x, std::size_t kernel, std::size_t stride) {
  PoolGeom g = pool_geom(x.shape(), kernel, stride);
  auto idx = std::make_shared<std::vector<std::size_t>>(g.n * g.c * g.ho * g.wo);
  auto d = x.value().data();
  for (std::size_t nc = 0; nc < g.n * g.c; ++nc)
    for (std::size_t oh = 0; oh < g.ho; ++oh)
      for (std::size_t ow = 0; ow < g.wo; ++ow) {
        std::size_t best = (nc * g.h + oh * stride) * g.w + ow * stride;
        for (std::size_t i = 0; i < kernel; ++i)
          for (std::size_t j = 0; j < kernel; ++j) {
            std::size_t at = (nc * g.h + oh * stride + i) * g.w + ow * stride + j;
            if (d[at] > d[best]) best = at;
          }
        (*idx)[(nc * g.ho + oh) * g.wo + ow] = best;
      }
  return gather(x, idx, {g.n, g.c, g.ho, g.wo});
}

Var gather(const Var& x, IndexList idx, const Shape& out_shape) {
  if (idx->size() != shape_numel(out_shape)) throw ShapeError("gather: index count mismatch");
  Buffer out(idx->size());
  auto d = x.value().data();
  for (std::size_t i = 0; i < idx->size(); ++i) {
    if ((*idx)[i] >= d.size()) throw ShapeError("gather index out of range");
    out[i] = d[(*idx)[i]];
  }
  Shape xs = x.shape();
  return record(Tensor(out_shape, std::move(out)), {x},
                [idx, xs](const Var& g, const Var&, const Needs&) {
                  return grads({scatter_add(g, idx, xs)});
                });
}

Var scatter_add(const Var& g, IndexList idx, const Shape& x_shape) {
  if (idx->size() != g.numel()) throw ShapeError("scatter_add: index count mismatch");
  Buffer out(shape_numel(x_shape), 0.0);
  auto d = g.value().data();
  for (std::size_t i = 0; i < idx->size(); ++i) {
    if ((*idx)[i] >= out.size()) throw ShapeError("scatter_add index out of range");
    out[(*idx)[i]] += d[i];
  }
  Shape gs = g.shape();
  return record(Tensor(x_shape, std::move(out)), {g},
                [idx, gs](const Var& up, const Var&, const Needs&) {
                  return grads({gather(up, idx, gs)});
                });
}

namespace {

void check_labels(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2) throw ShapeError("expected (N, C) logits, got " + shape_str(logits.shape()));
  if (labels.size() != logits.dim(0))
    throw ShapeError("label count " + std::to_string(labels.size()) + " does not match batch " +
                     std::to_string(logits.dim(0)));
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= logits.dim(1))
      throw Error("label " + std::to_string(y) + " out of range for " +
                  std::to_string(logits.dim(1)) + " classes");
}

}  // namespace

Var pick(const Var& logits, const std::vector<int>& labels) {
  check_labels(logits.value(), labels);
  std::size_t c = logits.shape()[1];
  auto idx = std::make_shared<std::vector<std::size_t>>(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) (*idx)[i] = i * c + static_cast<std::size_t>(labels[i]);
  return gather(logits, idx, {labels.size()});
}

Var softmax(const Var& logits) {
  return record(softmax_kernel(logits.value()), {logits},
                [](const Var& g, const Var& out, const Needs&) {
                  Var inner = row_broadcast(row_sum(mul(g, out)), out.shape());
                  return grads({mul(out, sub(g, inner))});
                });
}

Var cross_entropy_sum(const Var& logits, const std::vector<int>& labels) {
  check_labels(logits.value(), labels);
  const Tensor& z = logits.value();
  std::size_t c = z.dim(1);
  auto lse = logsumexp_rows(z);
  double total = 0.0;
  Buffer onehot(z.numel(), 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    std::size_t y = static_cast<std::size_t>(labels[i]);
    total += lse[i] - z[i * c + y];
    onehot[i * c + y] = 1.0;
  }
  Tensor oh(z.shape(), std::move(onehot));
  return record(Tensor::scalar(total), {logits},
                [logits, oh](const Var& g, const Var&, const Needs&) {
                  return grads({mul(sub(softmax(logits), constant(oh)), g)});
                });
}

Var soft_cross_entropy_sum(const Var& logits, const Tensor& probs) {
  const Tensor& z = logits.value();
  if (z.rank() != 2 || probs.shape() != z.shape())
    throw ShapeError("soft_cross_entropy: logits " + shape_str(z.shape()) + " vs targets " +
                     shape_str(probs.shape()));
  std::size_t n = z.dim(0), c = z.dim(1);
  auto lse = logsumexp_rows(z);
  double total = 0.0;
  Buffer rs(z.numel());
  for (std::size_t i = 0; i < n; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      total -= probs[i * c + j] * (z[i * c + j] - lse[i]);
      row += probs[i * c + j];
    }
    std::fill_n(rs.data() + i * c, c, row);
  }
  Tensor row_mass(z.shape(), std::move(rs));
  return record(Tensor::scalar(total), {logits},
                [logits, probs, row_mass](const Var& g, const Var&, const Needs&) {
                  Var d = sub(mul(softmax(logits), constant(row_mass)), constant(probs));
                  return grads({mul(d, g)});
                });
}

}  // namespace guard::ad
