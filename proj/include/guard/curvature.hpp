#pragma once

#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "guard/autodiff.hpp"
#include "guard/models.hpp"
#include "guard/rng.hpp"
#include "json.hpp"

namespace guard {

struct RegularizerConfig {
  double lambda = 1.0;    // curvature penalty weight
  double h = 0.1;         // finite-difference step along z, input units
  double lambda_g = 0.0;  // gradient-norm penalty weight (ablation arm)
  std::string zero_grad = "zero";

  void validate() const;
  nlohmann::json to_json() const;
  // Missing keys keep their defaults.
  static RegularizerConfig from_json(const nlohmann::json& j);
};

// Sum over the batch of per-sample losses as a function of the input batch.
// Per-sample input gradients are the rows of its gradient when samples do not
// interact (eval mode, or no batch norm).
using InputObjective = std::function<ad::Var(const ad::Var& x)>;

// Loss objective of a model at fixed parameters. When `clean` is set, the
// forward record of the first call is stored there (for BN running stats).
InputObjective model_objective(const Model& model, std::vector<ad::Var> params, Targets targets,
                               Mode mode, Forward* clean = nullptr);
InputObjective model_objective(const Model& model, const Targets& targets, Mode mode = Mode::Eval);

// Gradient with respect to x, evaluated on a private record.
Tensor input_grad(const InputObjective& f, const Tensor& x);
// Rows scaled to unit norm; rows with norm below 1e-12 become zero.
Tensor normalize_rows(const Tensor& g);
// z = grad / ||grad|| per sample, detached.
Tensor normalized_grad(const InputObjective& f, const Tensor& x);

// ||grad(x + h z) - grad(x)||^2 summed over coordinates, mean over the batch.
// `x` must be a leaf of the active depth-2 tape so that the result stays
// differentiable with respect to anything f depends on.
ad::Var guard_penalty(const InputObjective& f, const ad::Var& x, const RegularizerConfig& cfg);
// mean loss + lambda * guard_penalty; lambda = 0 returns exactly the mean loss.
ad::Var guard_loss(const InputObjective& f, const ad::Var& x, const RegularizerConfig& cfg);
// Same objective with the perturbation directions z supplied by the caller.
// guard_loss differentiates as if z were this constant.
ad::Var guard_loss_along(const InputObjective& f, const ad::Var& x, const Tensor& z, const RegularizerConfig& cfg);
// ||grad(x)||^2 mean over the batch.
ad::Var grad_penalty(const InputObjective& f, const ad::Var& x);
// mean loss + lambda_g * grad_penalty; lambda_g = 0 returns exactly the mean loss.
ad::Var grad_penalty_loss(const InputObjective& f, const ad::Var& x, const RegularizerConfig& cfg);
// Mean loss with the same record layout as the regularized variants.
ad::Var plain_loss(const InputObjective& f, const ad::Var& x);

// (grad(x + h v) - grad(x)) / h, row-wise when x is a batch.
Tensor hvp_fd(const InputObjective& f, const Tensor& x, const Tensor& v, double h);

struct PowerConfig {
  std::size_t iters = 500;
  double tol = 1e-4;  // relative residual ||Hv - lambda v|| / |lambda|
  double h = 1e-4;    // finite-difference step for the HVPs
};

struct EigenEstimate {
  double value = 0.0;
  Tensor vector;           // unit norm, per-sample shape
  double residual = 0.0;   // ||Hv - lambda v||
  bool converged = false;
  std::size_t iterations = 0;
};

// Largest eigenvalue of each sample's input Hessian by power iteration on the
// finite-difference HVP. Indefinite spectra are handled with a spectral shift.
std::vector<EigenEstimate> lambda1_power(const InputObjective& f, const Tensor& x, const PowerConfig& cfg,
                                         Rng& rng);
// Top-k eigenvalues per sample (descending) with deflation.
std::vector<std::vector<EigenEstimate>> top_eigenvalues(const InputObjective& f, const Tensor& x,
                                                        std::size_t k, const PowerConfig& cfg, Rng& rng);

struct CurvatureProfile {
  std::vector<std::size_t> sample_ids;
  std::vector<std::vector<EigenEstimate>> eigs;  // per sample, descending
  PowerConfig config;

  double median_lambda1() const;
  std::size_t unconverged() const;
  // sample_id,rank,eigenvalue,residual,converged
  void write_csv(std::ostream& out) const;
};

CurvatureProfile profile(const InputObjective& f, const Tensor& x, std::vector<std::size_t> ids,
                         std::size_t k, const PowerConfig& cfg, Rng& rng);

struct AlignmentReport {
  std::vector<double> cosines;  // |cos(z, v1)| per sample
  double fraction_above = 0.0;
  double threshold = 0.5;
};
// How well the normalized gradient tracks the top Hessian eigenvector.
AlignmentReport surrogate_alignment(const InputObjective& f, const Tensor& x, const PowerConfig& cfg,
                                    Rng& rng, double threshold = 0.5);

}  // namespace guard
