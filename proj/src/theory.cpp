#include "guard/theory.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>

#include "guard/errors.hpp"
#include "guard/ops.hpp"

namespace guard {

using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

constexpr double kBoundTol = 1e-12;

struct Spectrum {
  VectorXd values;  // ascending
  MatrixXd vectors;
};

Spectrum eig(const MatrixXd& H) {
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(H);
  if (es.info() != Eigen::Success) throw NonFiniteError("eigendecomposition failed");
  return {es.eigenvalues(), es.eigenvectors()};
}

double mean(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

double stderr_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  double m = mean(v), s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1) / static_cast<double>(v.size()));
}

VectorXd mean_of(const std::vector<VectorXd>& xs) {
  if (xs.empty()) throw ShapeError("no samples");
  VectorXd m = VectorXd::Zero(xs[0].size());
  for (const auto& x : xs) {
    if (x.size() != m.size()) throw ShapeError("samples differ in dimension");
    m += x;
  }
  return m / static_cast<double>(xs.size());
}

double sigmoid(double t) { return t >= 0 ? 1.0 / (1.0 + std::exp(-t)) : std::exp(t) / (1.0 + std::exp(t)); }
double softplus(double t) { return t > 0 ? t + std::log1p(std::exp(-t)) : std::log1p(std::exp(t)); }

// Largest |a_i - a_j| / ||h_i - h_j|| over all pairs.
double pair_lipschitz(const std::vector<double>& a, const std::vector<VectorXd>& h) {
  double L = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = i + 1; j < a.size(); ++j) {
      double dist = (h[i] - h[j]).norm();
      if (dist > 1e-12) L = std::max(L, std::abs(a[i] - a[j]) / dist);
    }
  return L;
}

class Quadratic final : public LossFamily {
 public:
  Quadratic(MatrixXd A, VectorXd c, VectorXd b) : A_(std::move(A)), c_(std::move(c)), b_(std::move(b)) {
    if (A_.rows() != A_.cols() || A_.rows() != c_.size() || c_.size() != b_.size())
      throw ShapeError("quadratic family: A, c, b dimensions differ");
    if ((A_ - A_.transpose()).cwiseAbs().maxCoeff() > 1e-10) throw ShapeError("quadratic family: A not symmetric");
    psd_ = eig(A_).values(0) >= -1e-12;
  }
  std::string name() const override { return "quadratic"; }
  bool convex(double) const override { return psd_; }
  std::size_t dim() const override { return static_cast<std::size_t>(c_.size()); }
  QuadModel local(const VectorXd& x, double rho) const override {
    VectorXd r = x - c_;
    return {0.5 * r.dot(A_ * r) + b_.dot(x), A_ * r + b_, A_, rho};
  }

 private:
  MatrixXd A_;
  VectorXd c_, b_;
  bool psd_ = false;
};

class Logistic final : public LossFamily {
 public:
  Logistic(VectorXd w, double bias, int y) : w_(std::move(w)), bias_(bias), y_(y) {
    if (y != 1 && y != -1) throw ConfigError("logistic family: label must be -1 or +1");
  }
  std::string name() const override { return "logistic"; }
  // The adversarial loss is phi(m) with m the margin; phi stays convex for
  // rho ||w|| <= 1 (checked on a dense grid).
  bool convex(double rho) const override { return rho * w_.norm() <= 1.0; }
  std::size_t dim() const override { return static_cast<std::size_t>(w_.size()); }
  QuadModel local(const VectorXd& x, double rho) const override {
    double m = y_ * (w_.dot(x) + bias_);
    double s = sigmoid(-m);
    return {softplus(-m), -y_ * s * w_, sigmoid(m) * s * (w_ * w_.transpose()), rho};
  }
  // The local gradient is parallel to w, so adversarial(x) = phi(m) with
  // phi(m) = softplus(-m) + a sigmoid(-m) + 0.5 a^2 sigmoid(m) sigmoid(-m),
  // a = rho ||w||, and L = ||w|| sup |phi'|.
  double lipschitz(double rho) const override {
    double a = rho * w_.norm();
    double sup = 1.0;  // |phi'(m)| -> 1 as m -> -inf
    for (int k = -400000; k <= 400000; ++k) {
      double m = k * 1e-4;
      double sp = sigmoid(m), sn = sigmoid(-m);
      double d1 = -sn - a * sp * sn + 0.5 * a * a * sp * sn * (sn - sp);
      sup = std::max(sup, std::abs(d1));
    }
    return w_.norm() * sup;
  }

 private:
  VectorXd w_;
  double bias_;
  int y_;
};

class Linear final : public LossFamily {
 public:
  Linear(VectorXd w, double bias) : w_(std::move(w)), bias_(bias) {}
  std::string name() const override { return "linear"; }
  bool convex(double) const override { return true; }
  std::size_t dim() const override { return static_cast<std::size_t>(w_.size()); }
  QuadModel local(const VectorXd& x, double rho) const override {
    auto d = w_.size();
    return {w_.dot(x) + bias_, w_, MatrixXd::Zero(d, d), rho};
  }
  double lipschitz(double) const override { return w_.norm(); }

 private:
  VectorXd w_;
  double bias_;
};

}  // namespace

void QuadModel::validate(std::size_t max_dim) const {
  auto d = static_cast<std::size_t>(g.size());
  if (d == 0) throw ShapeError("quadratic model: empty gradient");
  if (d > max_dim) throw ShapeError("quadratic model: dimension " + std::to_string(d) + " exceeds " + std::to_string(max_dim));
  if (static_cast<std::size_t>(H.rows()) != d || static_cast<std::size_t>(H.cols()) != d)
    throw ShapeError("quadratic model: Hessian is not d x d");
  if ((H - H.transpose()).cwiseAbs().maxCoeff() > 1e-10) throw ShapeError("quadratic model: Hessian not symmetric");
  if (!(rho >= 0)) throw ConfigError("quadratic model: rho must be >= 0");
  if (!std::isfinite(loss) || !g.allFinite() || !H.allFinite()) throw NonFiniteError("quadratic model: non-finite entries");
}

double quad_value(const QuadModel& q, const VectorXd& v) { return q.loss + q.g.dot(v) + 0.5 * v.dot(q.H * v); }

double lambda_max(const MatrixXd& H) { return eig(H).values(H.rows() - 1); }

TrustRegionResult trust_region_max(const QuadModel& q, std::size_t max_dim) {
  q.validate(max_dim);
  const auto d = q.g.size();
  TrustRegionResult r;
  if (q.rho == 0) {
    r.v = VectorXd::Zero(d);
    r.value = q.loss;
    r.interior = true;
    return r;
  }
  // Stationarity: (sigma I - H) v = g with sigma >= max(0, lambda1) and
  // sigma (rho - ||v||) = 0. In eigen coordinates v_i = gamma_i / (sigma - lambda_i).
  Spectrum s = eig(0.5 * (q.H + q.H.transpose()));
  const VectorXd& lam = s.values;
  VectorXd gam = s.vectors.transpose() * q.g;
  const double l1 = lam(d - 1);
  const double gnorm = q.g.norm();

  auto v_at = [&](double sigma) {
    VectorXd c(d);
    for (Eigen::Index i = 0; i < d; ++i) c(i) = gam(i) / (sigma - lam(i));
    return c;
  };

  if (l1 < 0) {
    VectorXd c = v_at(0.0);
    if (c.norm() <= q.rho) {
      r.v = s.vectors * c;
      r.interior = true;
      r.value = quad_value(q, r.v);
      return r;
    }
  }

  const double lo = std::max(0.0, l1);
  if (l1 >= 0) {
    const double ltol = 1e-10 * std::max(1.0, std::abs(l1));
    double top = 0, rest = 0;
    VectorXd c = VectorXd::Zero(d);
    for (Eigen::Index i = 0; i < d; ++i) {
      if (lam(i) >= l1 - ltol) {
        top += gam(i) * gam(i);
      } else {
        c(i) = gam(i) / (l1 - lam(i));
        rest += c(i) * c(i);
      }
    }
    if (std::sqrt(top) <= 1e-12 * std::max(1.0, gnorm) && std::sqrt(rest) <= q.rho) {
      // Hard case: g has no component on the leading eigenspace.
      c(d - 1) = std::sqrt(std::max(0.0, q.rho * q.rho - rest));
      r.v = s.vectors * c;
      r.sigma = l1;
      r.hard_case = true;
      r.value = quad_value(q, r.v);
      return r;
    }
  }

  // ||v(sigma)|| decreases on (lo, inf) and is <= rho at lo + ||g|| / rho.
  double a = lo, b = lo + gnorm / q.rho;
  for (int it = 0; it < 200 && b - a > 4 * std::numeric_limits<double>::epsilon() * std::max(1.0, b); ++it) {
    double m = 0.5 * (a + b);
    if (m <= a || m >= b) break;
    (v_at(m).norm() > q.rho ? a : b) = m;
  }
  VectorXd c = v_at(b);
  double n = c.norm();
  if (n > 0) c *= q.rho / n;
  r.v = s.vectors * c;
  r.sigma = b;
  r.value = quad_value(q, r.v);
  return r;
}

BoundCheck per_sample_bound(const QuadModel& q, std::size_t max_dim) {
  BoundCheck b;
  b.exact = trust_region_max(q, max_dim).value;
  b.lambda1 = lambda_max(q.H);
  b.grad_term = q.g.norm() * q.rho;
  b.curvature_term = 0.5 * b.lambda1 * q.rho * q.rho;
  b.bound = q.loss + b.grad_term + b.curvature_term;
  b.concave_regime = b.lambda1 < 0;
  b.violated = b.exact > b.bound + kBoundTol * std::max(1.0, std::abs(b.bound));
  return b;
}

double LossFamily::adversarial(const VectorXd& x, double rho) const {
  return trust_region_max(local(x, rho), dim()).value;
}

std::unique_ptr<LossFamily> quadratic_family(MatrixXd A, VectorXd c, VectorXd b) {
  return std::make_unique<Quadratic>(std::move(A), std::move(c), std::move(b));
}
std::unique_ptr<LossFamily> logistic_family(VectorXd w, double bias, int y) {
  return std::make_unique<Logistic>(std::move(w), bias, y);
}
std::unique_ptr<LossFamily> linear_family(VectorXd w, double bias) {
  return std::make_unique<Linear>(std::move(w), bias);
}

namespace {

ExpectationBound summarize(const std::vector<QuadModel>& qs, double rho, std::size_t max_dim,
                           std::vector<double>* lhs_out = nullptr) {
  ExpectationBound e;
  e.samples = qs.size();
  std::vector<double> lhs, rhs, diff, loss, gn, l1;
  for (const auto& q : qs) {
    BoundCheck b = per_sample_bound(q, max_dim);
    lhs.push_back(b.exact);
    rhs.push_back(b.bound);
    diff.push_back(b.bound - b.exact);
    loss.push_back(q.loss);
    gn.push_back(q.g.norm());
    l1.push_back(b.lambda1);
    if (b.violated) ++e.per_sample_violations;
  }
  e.lhs = mean(lhs);
  e.rhs = mean(rhs);
  e.lhs_stderr = stderr_of(lhs);
  e.rhs_stderr = stderr_of(rhs);
  e.mean_loss = mean(loss);
  e.mean_grad_norm = mean(gn);
  e.mean_lambda1 = mean(l1);
  double abs_l1 = 0;
  for (double v : l1) abs_l1 += std::abs(v);
  abs_l1 /= static_cast<double>(std::max<std::size_t>(1, l1.size()));
  double curv = 0.5 * rho * rho * abs_l1;
  e.grad_to_curvature = curv > 0 ? rho * e.mean_grad_norm / curv : std::numeric_limits<double>::infinity();
  e.violated = mean(diff) < -3.0 * stderr_of(diff) - kBoundTol * std::max(1.0, std::abs(e.rhs));
  if (lhs_out) *lhs_out = lhs;
  return e;
}

}  // namespace

ExpectationBound expectation_bound(const LossFamily& f, const std::vector<VectorXd>& samples, double rho) {
  if (samples.empty()) throw ShapeError("expectation_bound: no samples");
  std::vector<QuadModel> qs;
  qs.reserve(samples.size());
  for (const auto& x : samples) qs.push_back(f.local(x, rho));
  return summarize(qs, rho, f.dim());
}

double jensen_check(const LossFamily& f, const std::vector<VectorXd>& samples, double rho) {
  if (!f.convex(rho)) throw ConfigError("jensen_check: family '" + f.name() + "' is not convex at this radius");
  VectorXd m = mean_of(samples);
  double e = 0;
  for (const auto& x : samples) e += f.adversarial(x, rho);
  return e / static_cast<double>(samples.size()) - f.adversarial(m, rho);
}

double BoundReport::positivity_rate() const {
  if (records.empty()) return 0.0;
  std::size_t pos = 0;
  for (const auto& r : records) pos += r.slack >= 0;
  return static_cast<double>(pos) / static_cast<double>(records.size());
}

nlohmann::json BoundReport::to_json() const {
  nlohmann::json recs = nlohmann::json::array();
  for (const auto& r : records)
    recs.push_back({{"point", r.point}, {"lhs", r.lhs}, {"rhs", r.rhs}, {"slack", r.slack}, {"sigma", r.sigma}, {"L", r.L}});
  const auto& e = expectation;
  return {{"source", source},
          {"rho", rho},
          {"L", L},
          {"L_exact", L_exact},
          {"expectation",
           {{"lhs", e.lhs},
            {"rhs", e.rhs},
            {"lhs_stderr", e.lhs_stderr},
            {"rhs_stderr", e.rhs_stderr},
            {"mean_loss", e.mean_loss},
            {"mean_grad_norm", e.mean_grad_norm},
            {"mean_lambda1", e.mean_lambda1},
            {"grad_to_curvature", e.grad_to_curvature},
            {"samples", e.samples},
            {"violated", e.violated}}},
          {"per_sample_violations", per_sample_violations},
          {"concave_samples", concave_samples},
          {"slack_violations", slack_violations},
          {"positivity_rate", positivity_rate()},
          {"records", recs}};
}

void BoundReport::write_csv(std::ostream& out) const {
  out << "point,lhs,rhs,slack,sigma,L\n";
  out.precision(17);
  for (const auto& r : records)
    out << r.point << ',' << r.lhs << ',' << r.rhs << ',' << r.slack << ',' << r.sigma << ',' << r.L << '\n';
}

namespace {

void fill_records(BoundReport& rep, const std::vector<double>& lhs, const std::vector<VectorXd>& feats,
                  const VectorXd& mean_feat) {
  for (std::size_t i = 0; i < lhs.size(); ++i) {
    SlackRecord r;
    r.point = i;
    r.lhs = lhs[i];
    r.sigma = (feats[i] - mean_feat).norm();
    r.L = rep.L;
    r.rhs = rep.expectation.rhs + rep.L * r.sigma;
    r.slack = r.rhs - r.lhs;
    if (r.slack < -kBoundTol * std::max(1.0, std::abs(r.rhs))) ++rep.slack_violations;
    rep.records.push_back(r);
  }
}

std::size_t count_concave(const std::vector<QuadModel>& qs) {
  std::size_t n = 0;
  for (const auto& q : qs) n += lambda_max(q.H) < 0;
  return n;
}

}  // namespace

BoundReport distilled_bound_slack(const LossFamily& f, const std::vector<VectorXd>& real,
                                  const std::vector<VectorXd>& distilled, double rho) {
  if (real.empty()) throw ShapeError("distilled_bound_slack: no real samples");
  BoundReport rep;
  rep.source = f.name();
  rep.rho = rho;
  std::vector<QuadModel> qs;
  for (const auto& x : real) qs.push_back(f.local(x, rho));
  std::vector<double> real_lhs;
  rep.expectation = summarize(qs, rho, f.dim(), &real_lhs);
  rep.per_sample_violations = rep.expectation.per_sample_violations;
  rep.concave_samples = count_concave(qs);

  std::vector<double> lhs;
  for (const auto& x : distilled) lhs.push_back(f.adversarial(x, rho));
  double L = f.lipschitz(rho);
  rep.L_exact = L >= 0;
  if (!rep.L_exact) {
    std::vector<double> a = real_lhs;
    std::vector<VectorXd> h = real;
    a.insert(a.end(), lhs.begin(), lhs.end());
    h.insert(h.end(), distilled.begin(), distilled.end());
    L = pair_lipschitz(a, h);
  }
  rep.L = L;
  fill_records(rep, lhs, distilled, mean_of(real));
  return rep;
}

std::vector<MatrixXd> dense_input_hessians(const InputObjective& f, const Tensor& x, double eps) {
  if (!(eps > 0)) throw ConfigError("dense_input_hessians: eps must be > 0");
  const std::size_t n = x.rows(), d = x.row_size();
  std::vector<MatrixXd> H(n, MatrixXd::Zero(d, d));
  for (std::size_t j = 0; j < d; ++j) {
    Buffer e(x.numel(), 0.0);
    for (std::size_t i = 0; i < n; ++i) e[i * d + j] = eps;
    Tensor step(x.shape(), std::move(e));
    Tensor gp = input_grad(f, add(x, step));
    Tensor gm = input_grad(f, sub(x, step));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < d; ++k) H[i](k, j) = (gp[i * d + k] - gm[i * d + k]) / (2 * eps);
  }
  for (auto& h : H) h = 0.5 * (h + h.transpose()).eval();
  return H;
}

namespace {

// Local quadratic models of the teacher's loss at each row of x.
std::vector<QuadModel> network_models(const Model& teacher, const Tensor& x, int label, double rho) {
  std::vector<int> labels(x.rows(), label);
  InputObjective f = model_objective(teacher, Targets{labels, std::nullopt}, Mode::Eval);
  Tensor g = input_grad(f, x);
  std::vector<MatrixXd> H = dense_input_hessians(f, x);
  Tensor logits = predict_logits(teacher, x);
  const std::size_t c = logits.row_size(), d = x.row_size();
  std::vector<QuadModel> qs;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < c; ++k) mx = std::max(mx, logits[i * c + k]);
    double z = 0;
    for (std::size_t k = 0; k < c; ++k) z += std::exp(logits[i * c + k] - mx);
    QuadModel q;
    q.loss = mx + std::log(z) - logits[i * c + static_cast<std::size_t>(label)];
    q.g = Eigen::Map<const VectorXd>(g.data().data() + i * d, static_cast<Eigen::Index>(d));
    q.H = std::move(H[i]);
    q.rho = rho;
    qs.push_back(std::move(q));
  }
  return qs;
}

std::vector<VectorXd> feature_rows(const Model& teacher, const Tensor& x) {
  ad::NoGrad ng;
  Tensor h = forward(teacher, constants(teacher), ad::constant(x), Mode::Eval).features.value();
  std::vector<VectorXd> rows;
  const std::size_t d = h.row_size();
  for (std::size_t i = 0; i < h.rows(); ++i)
    rows.push_back(Eigen::Map<const VectorXd>(h.data().data() + i * d, static_cast<Eigen::Index>(d)));
  return rows;
}

}  // namespace

BoundReport distilled_bound_slack(const Model& teacher, const Tensor& real, const Tensor& distilled, int label,
                                  double rho, std::size_t max_dim) {
  if (real.rows() == 0) throw ShapeError("distilled_bound_slack: no real samples");
  if (label < 0 || static_cast<std::size_t>(label) >= teacher.spec.classes)
    throw ConfigError("distilled_bound_slack: label out of range");
  BoundReport rep;
  rep.source = teacher.spec.arch;
  rep.rho = rho;
  std::vector<QuadModel> qs = network_models(teacher, real, label, rho);
  std::vector<double> real_lhs;
  rep.expectation = summarize(qs, rho, max_dim, &real_lhs);
  rep.per_sample_violations = rep.expectation.per_sample_violations;
  rep.concave_samples = count_concave(qs);

  std::vector<double> lhs;
  for (const auto& q : network_models(teacher, distilled, label, rho)) lhs.push_back(trust_region_max(q, max_dim).value);
  std::vector<VectorXd> h_real = feature_rows(teacher, real);
  std::vector<VectorXd> h_dist = feature_rows(teacher, distilled);
  std::vector<double> a = real_lhs;
  std::vector<VectorXd> h = h_real;
  a.insert(a.end(), lhs.begin(), lhs.end());
  h.insert(h.end(), h_dist.begin(), h_dist.end());
  rep.L = pair_lipschitz(a, h);
  rep.L_exact = false;
  fill_records(rep, lhs, h_dist, mean_of(h_real));
  return rep;
}

}  // namespace guard
