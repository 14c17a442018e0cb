#pragma once

#include <Eigen/Dense>
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

#include "guard/curvature.hpp"
#include "guard/models.hpp"
#include "json.hpp"

namespace guard {

// Local quadratic model l + g^T v + 0.5 v^T H v on the ball ||v|| <= rho.
struct QuadModel {
  double loss = 0.0;
  Eigen::VectorXd g;
  Eigen::MatrixXd H;
  double rho = 0.0;

  // Dense-oracle regime: d <= max_dim and H symmetric to 1e-10.
  void validate(std::size_t max_dim = 32) const;
};

struct TrustRegionResult {
  double value = 0.0;  // max of the quadratic over the ball
  Eigen::VectorXd v;   // maximizer
  double sigma = 0.0;  // Lagrange multiplier
  bool interior = false;
  bool hard_case = false;
};

TrustRegionResult trust_region_max(const QuadModel& q, std::size_t max_dim = 32);
double quad_value(const QuadModel& q, const Eigen::VectorXd& v);
double lambda_max(const Eigen::MatrixXd& H);

struct BoundCheck {
  double exact = 0.0;    // trust_region_max value
  double bound = 0.0;    // l + ||g|| rho + 0.5 lambda1 rho^2
  double lambda1 = 0.0;
  double grad_term = 0.0;       // ||g|| rho
  double curvature_term = 0.0;  // 0.5 lambda1 rho^2
  bool concave_regime = false;  // lambda1 < 0: the bound is not guaranteed
  bool violated = false;        // exact > bound beyond round-off
};

BoundCheck per_sample_bound(const QuadModel& q, std::size_t max_dim = 32);

// Loss families with closed-form gradients and Hessians.
class LossFamily {
 public:
  virtual ~LossFamily() = default;
  virtual std::string name() const = 0;
  // Whether adversarial(., rho) is convex in x.
  virtual bool convex(double rho) const = 0;
  virtual std::size_t dim() const = 0;
  virtual QuadModel local(const Eigen::VectorXd& x, double rho) const = 0;
  // Quadratic adversarial loss max_{||v|| <= rho} of the local model at x.
  double adversarial(const Eigen::VectorXd& x, double rho) const;
  // Upper bound on the Lipschitz constant of adversarial(., rho); negative
  // when unknown.
  virtual double lipschitz(double rho) const { (void)rho; return -1.0; }
};

// 0.5 (x - c)^T A (x - c) + b^T x
std::unique_ptr<LossFamily> quadratic_family(Eigen::MatrixXd A, Eigen::VectorXd c, Eigen::VectorXd b);
// log(1 + exp(-y (w^T x + bias))) with label y in {-1, +1}
std::unique_ptr<LossFamily> logistic_family(Eigen::VectorXd w, double bias, int y);
// w^T x + bias
std::unique_ptr<LossFamily> linear_family(Eigen::VectorXd w, double bias);

struct ExpectationBound {
  double lhs = 0.0;         // mean adversarial loss
  double rhs = 0.0;         // E l + rho E||g|| + 0.5 rho^2 E lambda1
  double lhs_stderr = 0.0;
  double rhs_stderr = 0.0;
  double mean_loss = 0.0, mean_grad_norm = 0.0, mean_lambda1 = 0.0;
  double grad_to_curvature = 0.0;  // rho E||g|| / (0.5 rho^2 E|lambda1|)
  std::size_t samples = 0;
  bool violated = false;    // lhs > rhs beyond 3 standard errors of the difference
  std::size_t per_sample_violations = 0;
};

ExpectationBound expectation_bound(const LossFamily& f, const std::vector<Eigen::VectorXd>& samples, double rho);

// E adversarial(x) - adversarial(E x); nonnegative for convex families.
double jensen_check(const LossFamily& f, const std::vector<Eigen::VectorXd>& samples, double rho);

struct SlackRecord {
  std::size_t point = 0;
  double lhs = 0.0;      // adversarial loss at the distilled point
  double rhs = 0.0;      // E l + rho E||g|| + 0.5 rho^2 E lambda1 + L sigma
  double slack = 0.0;    // rhs - lhs
  double sigma = 0.0;    // ||h(x') - E h(x)||
  double L = 0.0;
};

struct BoundReport {
  std::string source;
  double rho = 0.0;
  ExpectationBound expectation;
  double L = 0.0;
  bool L_exact = false;  // false: empirical lower-bound estimate
  std::vector<SlackRecord> records;
  std::size_t per_sample_violations = 0;  // over the real samples
  std::size_t concave_samples = 0;        // lambda1 < 0 among them
  std::size_t slack_violations = 0;       // records with slack < 0

  double positivity_rate() const;
  nlohmann::json to_json() const;
  // point,lhs,rhs,slack,sigma,L
  void write_csv(std::ostream& out) const;
};

// Identity features over a closed-form family.
BoundReport distilled_bound_slack(const LossFamily& f, const std::vector<Eigen::VectorXd>& real,
                                  const std::vector<Eigen::VectorXd>& distilled, double rho);

// Teacher network with penultimate features; local models come from dense
// finite-difference input Hessians, and L is estimated from sampled pairs.
BoundReport distilled_bound_slack(const Model& teacher, const Tensor& real, const Tensor& distilled, int label,
                                  double rho, std::size_t max_dim = 1024);

// Dense per-sample input Hessians by central differences of input gradients.
std::vector<Eigen::MatrixXd> dense_input_hessians(const InputObjective& f, const Tensor& x, double eps = 1e-5);

}  // namespace guard
