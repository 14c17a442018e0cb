#include "guard/curvature.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <ostream>

#include "guard/errors.hpp"
#include "guard/ops.hpp"

namespace guard {

using ad::Var;

namespace {

constexpr double kZeroGrad = 1e-12;

double row_dot(std::span<const double> a, std::span<const double> b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

ad::Tape& active_tape(const char* who) {
  ad::Tape* t = ad::Tape::current();
  if (!t || t->depth() < 2) throw GraphError(std::string(who) + " needs an active depth-2 record");
  return *t;
}

double batch_scale(const Var& x) { return 1.0 / static_cast<double>(x.shape()[0]); }

}  // namespace

void RegularizerConfig::validate() const {
  if (!(lambda >= 0)) throw ConfigError("reg.lambda must be >= 0");
  if (!(h > 0)) throw ConfigError("reg.h must be > 0");
  if (!(lambda_g >= 0)) throw ConfigError("reg.lambda_g must be >= 0");
  if (zero_grad != "zero") throw ConfigError("reg.zero_grad must be 'zero'");
}

nlohmann::json RegularizerConfig::to_json() const {
  return {{"lambda", lambda}, {"h", h}, {"lambda_g", lambda_g}, {"zero_grad", zero_grad}};
}

RegularizerConfig RegularizerConfig::from_json(const nlohmann::json& j) {
  RegularizerConfig c;
  c.lambda = j.value("lambda", c.lambda);
  c.h = j.value("h", c.h);
  c.lambda_g = j.value("lambda_g", c.lambda_g);
  c.zero_grad = j.value("zero_grad", c.zero_grad);
  return c;
}

InputObjective model_objective(const Model& model, std::vector<Var> params, Targets targets, Mode mode,
                               Forward* clean) {
  auto first = std::make_shared<bool>(true);
  return [&model, params = std::move(params), targets = std::move(targets), mode, clean,
          first](const Var& x) {
    Forward f = forward(model, params, x, mode);
    Var l = loss_sum(f.logits, targets);
    if (clean && *first) *clean = f;
    *first = false;
    return l;
  };
}

InputObjective model_objective(const Model& model, const Targets& targets, Mode mode) {
  return model_objective(model, constants(model), targets, mode);
}

Tensor input_grad(const InputObjective& f, const Tensor& x) {
  ad::Tape tape(1);
  Var xv = tape.leaf(x);
  return ad::grad(f(xv), xv).value();
}

Tensor normalize_rows(const Tensor& g) {
  Buffer out = g.to_buffer();
  std::size_t n = g.rows(), d = g.row_size();
  for (std::size_t i = 0; i < n; ++i) {
    std::span<double> r(out.data() + i * d, d);
    double norm = std::sqrt(row_dot(r, r));
    for (auto& v : r) v = norm < kZeroGrad ? 0.0 : v / norm;
  }
  return Tensor(g.shape(), std::move(out));
}

Tensor normalized_grad(const InputObjective& f, const Tensor& x) { return normalize_rows(input_grad(f, x)); }

namespace {

Var penalty_from(const InputObjective& f, const Var& x, const Var& loss, const RegularizerConfig& cfg,
                 const Tensor* fixed_z = nullptr) {
  ad::Tape& tape = active_tape("guard_penalty");
  Var g0 = ad::grad(loss, x, true);
  Tensor z = fixed_z ? *fixed_z : normalize_rows(g0.value());
  if (!z.same_shape(x.value())) throw ShapeError("guard penalty: direction shape does not match input");
  Var x1 = tape.leaf(axpy(cfg.h, z, x.value()));
  Var g1 = ad::grad(f(x1), x1, true);
  return ad::scale(ad::sum(ad::square(g1 - g0)), batch_scale(x));
}

}  // namespace

Var guard_penalty(const InputObjective& f, const Var& x, const RegularizerConfig& cfg) {
  cfg.validate();
  return penalty_from(f, x, f(x), cfg);
}

Var plain_loss(const InputObjective& f, const Var& x) { return ad::scale(f(x), batch_scale(x)); }

Var guard_loss(const InputObjective& f, const Var& x, const RegularizerConfig& cfg) {
  cfg.validate();
  Var l = f(x);
  Var base = ad::scale(l, batch_scale(x));
  if (cfg.lambda == 0.0) return base;
  return base + ad::scale(penalty_from(f, x, l, cfg), cfg.lambda);
}

Var guard_loss_along(const InputObjective& f, const Var& x, const Tensor& z, const RegularizerConfig& cfg) {
  cfg.validate();
  Var l = f(x);
  Var base = ad::scale(l, batch_scale(x));
  if (cfg.lambda == 0.0) return base;
  return base + ad::scale(penalty_from(f, x, l, cfg, &z), cfg.lambda);
}

Var grad_penalty(const InputObjective& f, const Var& x) {
  active_tape("grad_penalty");
  Var g = ad::grad(f(x), x, true);
  return ad::scale(ad::sum(ad::square(g)), batch_scale(x));
}

Var grad_penalty_loss(const InputObjective& f, const Var& x, const RegularizerConfig& cfg) {
  cfg.validate();
  Var l = f(x);
  Var base = ad::scale(l, batch_scale(x));
  if (cfg.lambda_g == 0.0) return base;
  active_tape("grad_penalty_loss");
  Var g = ad::grad(l, x, true);
  return base + ad::scale(ad::sum(ad::square(g)), cfg.lambda_g * batch_scale(x));
}

Tensor hvp_fd(const InputObjective& f, const Tensor& x, const Tensor& v, double h) {
  if (!(h > 0)) throw Error("hvp_fd: h must be positive");
  if (!v.same_shape(x)) throw ShapeError("hvp_fd: direction shape does not match input");
  if (norm2(v) == 0.0) throw Error("hvp_fd: direction must be nonzero");
  Tensor g0 = input_grad(f, x);
  Tensor g1 = input_grad(f, axpy(h, v, x));
  return scale(sub(g1, g0), 1.0 / h);
}

namespace {

// Batched power iteration state: one row per sample.
struct PowerRow {
  std::vector<double> v;
  double value = 0, residual = 0, max_norm = 0;
  bool converged = false;
  std::size_t iterations = 0;
};

class HvpOperator {
 public:
  HvpOperator(const InputObjective& f, const Tensor& x, double h) : f_(f), x_(x), h_(h) {
    g0_ = input_grad(f, x);
  }
  // V holds one direction per row; rows may be zero.
  Tensor apply(const Tensor& V) const {
    Tensor g1 = input_grad(f_, axpy(h_, V, x_));
    return scale(sub(g1, g0_), 1.0 / h_);
  }

 private:
  const InputObjective& f_;
  Tensor x_;
  Tensor g0_;
  double h_;
};

void project_out(std::span<double> w, const std::vector<std::vector<double>>& basis) {
  for (const auto& b : basis) {
    double c = row_dot(w, b);
    for (std::size_t j = 0; j < w.size(); ++j) w[j] -= c * b[j];
  }
}

double normalize(std::span<double> w) {
  double n = std::sqrt(row_dot(w, w));
  if (n > 0)
    for (auto& v : w) v /= n;
  return n;
}

// Runs power iteration on (H + mu_i I) restricted to the complement of each
// row's basis, for the rows flagged in `active`.
void power_phase(const HvpOperator& op, const Shape& shape, std::vector<PowerRow>& rows,
                 const std::vector<double>& mu, const std::vector<std::vector<std::vector<double>>>& basis,
                 std::vector<bool> active, const PowerConfig& cfg) {
  const std::size_t n = rows.size(), d = rows.empty() ? 0 : rows[0].v.size();
  for (std::size_t it = 0; it < cfg.iters; ++it) {
    if (std::none_of(active.begin(), active.end(), [](bool a) { return a; })) break;
    Buffer V(n * d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      if (active[i]) std::copy(rows[i].v.begin(), rows[i].v.end(), V.begin() + static_cast<long>(i * d));
    Tensor HV = op.apply(Tensor(shape, std::move(V)));
    auto hv = HV.data();
    for (std::size_t i = 0; i < n; ++i) {
      if (!active[i]) continue;
      PowerRow& r = rows[i];
      std::vector<double> w(hv.begin() + static_cast<long>(i * d), hv.begin() + static_cast<long>((i + 1) * d));
      project_out(w, basis[i]);
      double hnorm = std::sqrt(row_dot(w, w));
      r.max_norm = std::max(r.max_norm, hnorm);
      double lam = row_dot(w, r.v);  // Rayleigh quotient of H
      double res = 0;
      for (std::size_t j = 0; j < d; ++j) res += (w[j] - lam * r.v[j]) * (w[j] - lam * r.v[j]);
      res = std::sqrt(res);
      r.value = lam;
      r.residual = res;
      ++r.iterations;
      if (hnorm == 0.0 && mu[i] == 0.0) {
        r.converged = true;  // zero Hessian on this subspace
        active[i] = false;
        continue;
      }
      if (res <= cfg.tol * std::abs(lam)) {
        r.converged = true;
        active[i] = false;
        continue;
      }
      for (std::size_t j = 0; j < d; ++j) w[j] += mu[i] * r.v[j];
      project_out(w, basis[i]);
      if (normalize(w) == 0.0) {
        r.converged = false;
        active[i] = false;
        continue;
      }
      r.v = std::move(w);
    }
  }
}

}  // namespace

std::vector<std::vector<EigenEstimate>> top_eigenvalues(const InputObjective& f, const Tensor& x, std::size_t k,
                                                        const PowerConfig& cfg, Rng& rng) {
  if (cfg.iters < 1) throw ConfigError("power iteration needs iters >= 1");
  if (x.rank() < 2) throw ShapeError("top_eigenvalues expects a batch of samples");
  const std::size_t n = x.rows(), d = x.row_size();
  if (k < 1 || k > d) throw ConfigError("k must lie in [1, input dimension]");
  Shape sample(x.shape().begin() + 1, x.shape().end());
  HvpOperator op(f, x, cfg.h);
  std::vector<std::vector<std::vector<double>>> basis(n);
  std::vector<std::vector<EigenEstimate>> out(n);
  for (std::size_t rank = 0; rank < k; ++rank) {
    std::vector<PowerRow> rows(n);
    std::vector<std::vector<double>> start(n);
    for (std::size_t i = 0; i < n; ++i) {
      Rng r = rng.split(i * 1000 + rank);
      rows[i].v.resize(d);
      for (auto& v : rows[i].v) v = r.normal();
      project_out(rows[i].v, basis[i]);
      if (normalize(rows[i].v) == 0.0) rows[i].v[0] = 1.0;
      start[i] = rows[i].v;
    }
    std::vector<double> mu(n, 0.0);
    power_phase(op, x.shape(), rows, mu, basis, std::vector<bool>(n, true), cfg);
    // Accept converged positive estimates; shift the rest.
    std::vector<bool> again(n, false);
    std::vector<PowerRow> shifted = rows;
    for (std::size_t i = 0; i < n; ++i) {
      bool zero = rows[i].converged && rows[i].max_norm == 0.0;
      if (zero || (rows[i].converged && rows[i].value > 0)) continue;
      again[i] = true;
      mu[i] = 1.05 * std::max(rows[i].max_norm, std::abs(rows[i].value));
      shifted[i] = PowerRow{};
      shifted[i].v = start[i];
      shifted[i].iterations = rows[i].iterations;
    }
    if (std::any_of(again.begin(), again.end(), [](bool a) { return a; }))
      power_phase(op, x.shape(), shifted, mu, basis, again, cfg);
    for (std::size_t i = 0; i < n; ++i) {
      const PowerRow& r = again[i] ? shifted[i] : rows[i];
      EigenEstimate e;
      e.value = r.value;
      e.residual = r.residual;
      e.converged = r.converged;
      e.iterations = r.iterations;
      e.vector = Tensor(sample, r.v);
      out[i].push_back(e);
      basis[i].push_back(r.v);
    }
  }
  for (auto& row : out)
    std::stable_sort(row.begin(), row.end(),
                     [](const EigenEstimate& a, const EigenEstimate& b) { return a.value > b.value; });
  return out;
}

std::vector<EigenEstimate> lambda1_power(const InputObjective& f, const Tensor& x, const PowerConfig& cfg,
                                         Rng& rng) {
  auto all = top_eigenvalues(f, x, 1, cfg, rng);
  std::vector<EigenEstimate> out;
  for (auto& r : all) out.push_back(std::move(r[0]));
  return out;
}

double CurvatureProfile::median_lambda1() const {
  if (eigs.empty()) return 0.0;
  std::vector<double> v;
  for (const auto& r : eigs) v.push_back(r.front().value);
  std::sort(v.begin(), v.end());
  std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

std::size_t CurvatureProfile::unconverged() const {
  std::size_t n = 0;
  for (const auto& r : eigs)
    for (const auto& e : r) n += !e.converged;
  return n;
}

void CurvatureProfile::write_csv(std::ostream& out) const {
  out << "sample_id,rank,eigenvalue,residual,converged\n";
  char buf[160];
  for (std::size_t i = 0; i < eigs.size(); ++i)
    for (std::size_t r = 0; r < eigs[i].size(); ++r) {
      std::snprintf(buf, sizeof buf, "%zu,%zu,%.17g,%.17g,%d\n", sample_ids[i], r, eigs[i][r].value,
                    eigs[i][r].residual, eigs[i][r].converged ? 1 : 0);
      out << buf;
    }
}

CurvatureProfile profile(const InputObjective& f, const Tensor& x, std::vector<std::size_t> ids, std::size_t k,
                         const PowerConfig& cfg, Rng& rng) {
  if (ids.empty())
    for (std::size_t i = 0; i < x.rows(); ++i) ids.push_back(i);
  if (ids.size() != x.rows()) throw ShapeError("profile: one id per sample required");
  CurvatureProfile p;
  p.sample_ids = std::move(ids);
  p.eigs = top_eigenvalues(f, x, k, cfg, rng);
  p.config = cfg;
  return p;
}

AlignmentReport surrogate_alignment(const InputObjective& f, const Tensor& x, const PowerConfig& cfg, Rng& rng,
                                    double threshold) {
  Tensor z = normalized_grad(f, x);
  auto eig = lambda1_power(f, x, cfg, rng);
  AlignmentReport rep;
  rep.threshold = threshold;
  std::size_t d = x.row_size(), above = 0;
  for (std::size_t i = 0; i < eig.size(); ++i) {
    double c = std::abs(row_dot(z.data().subspan(i * d, d), eig[i].vector.data()));
    rep.cosines.push_back(c);
    above += c > threshold;
  }
  rep.fraction_above = eig.empty() ? 0.0 : static_cast<double>(above) / static_cast<double>(eig.size());
  return rep;
}

}  // namespace guard
