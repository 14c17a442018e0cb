#pragma once

#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "guard/attacks.hpp"
#include "guard/curvature.hpp"
#include "guard/data.hpp"
#include "guard/models.hpp"
#include "guard/train.hpp"
#include "json.hpp"

namespace guard {

struct SyntheticSet {
  Tensor inputs;                // (ipc * classes, sample shape), class-major
  std::vector<int> labels;      // hard labels used during optimization
  std::optional<Tensor> soft;   // set by relabel
  std::size_t ipc = 0;
  std::size_t classes = 0;
  nlohmann::json provenance = nlohmann::json::object();  // method, config_hash, seed, ...

  std::size_t size() const { return labels.size(); }
  Dataset as_dataset() const;
  void validate() const;
};

struct DistillConfig {
  // dc-guard | dc-plain | squeeze-recover-relabel | srl-plain | srl-grad-penalty | adv-squeeze
  std::string method = "dc-guard";
  std::size_t ipc = 10;

  // Gradient matching.
  std::size_t outer_steps = 20;    // K
  std::size_t inner_steps = 10;    // T
  std::size_t syn_steps = 1;       // updates of each S_c per inner step
  std::size_t theta_steps = 1;     // updates of theta per inner step
  double lr_syn = 0.1;
  double lr_theta = 0.01;
  double momentum_syn = 0.5;
  double momentum_theta = 0.5;
  std::size_t real_batch = 64;     // per class
  std::string distance = "layerwise-cosine";  // layerwise-cosine | euclidean
  std::string reg_space = "input";  // input | param
  std::string z_source = "real";    // real: each real sample's own gradient; synthetic: mean S_c gradient
  RegularizerConfig reg;

  // Squeeze (teacher training); the loss follows from the method.
  TrainConfig squeeze;
  AttackSpec adversary{.family = "pgd", .eps = 1.0 / 255.0, .steps = 10};

  // Recover.
  std::size_t recover_iters = 200;
  double recover_lr = 0.1;
  double alpha_tv = 1e-3;
  double alpha_l2 = 1e-4;
  double alpha_bn = 1.0;
  bool relabel = true;

  bool is_dc() const { return method == "dc-guard" || method == "dc-plain"; }
  // Training config of the squeeze step.
  TrainConfig squeeze_config() const;
  void validate() const;
  nlohmann::json to_json() const;
  // Missing keys keep their defaults.
  static DistillConfig from_json(const nlohmann::json& j);
  std::string hash() const;
};

// Parameter-indexed batch loss: sum over the batch of per-sample losses.
using BatchLoss = std::function<ad::Var(std::span<const ad::Var> params, const ad::Var& x, const Targets& t)>;
BatchLoss model_loss(const Model& model, Mode mode = Mode::Train);

// Distance between two parameter-gradient lists. Under layerwise-cosine a
// layer with a zero-norm side contributes 1 and increments `flagged`.
ad::Var matching_distance(std::span<const ad::Var> gs, std::span<const ad::Var> gt, const std::string& kind,
                          std::size_t* flagged = nullptr);

// Parameter gradient of the (regularized) real-data objective. Constant
// tensors; the regularizer follows cfg.method, cfg.reg_space and cfg.z_source.
std::vector<Tensor> real_gradient(const BatchLoss& loss, std::span<const Tensor> theta, const Tensor& x,
                                  const Targets& t, const DistillConfig& cfg, const Tensor* syn = nullptr);

// cfg.syn_steps momentum steps of S_c on the matching distance, each followed
// by clipping to [0, 1]. Returns the distance before the first step.
double match_class(const BatchLoss& loss, std::span<const Tensor> theta, const std::vector<Tensor>& target,
                   Tensor& syn, const Targets& syn_t, Tensor& velocity, const DistillConfig& cfg,
                   std::size_t* flagged = nullptr);

// cfg.theta_steps momentum steps of theta on the mean loss over S.
void theta_update(const BatchLoss& loss, std::vector<Tensor>& theta, const Tensor& syn, const Targets& syn_t,
                  std::vector<Tensor>& velocity, const DistillConfig& cfg);

// Gradient matching with the curvature term on the real side.
SyntheticSet dc_guard(const Dataset& real, const ModelSpec& spec, const DistillConfig& cfg, const Rng& rng);

// Teacher for the squeeze/recover/relabel pipeline.
Model squeeze(const Dataset& real, const ModelSpec& spec, const DistillConfig& cfg, const Rng& rng);

struct RecoverTrace {
  std::vector<std::vector<double>> objective;  // per class, per iteration (index 0 = init)
  std::vector<std::vector<double>> ce;
};

double total_variation(const Tensor& x);
SyntheticSet recover(const Model& teacher, const DistillConfig& cfg, const Rng& rng, RecoverTrace* trace = nullptr);
SyntheticSet relabel(const Model& teacher, SyntheticSet s);

// squeeze -> recover -> (relabel) or dc_guard, by cfg.method.
SyntheticSet distill(const Dataset& real, const ModelSpec& spec, const DistillConfig& cfg, const Rng& rng);

struct AttackRow {
  std::string family;
  std::string norm;
  double eps = 0.0;
  double robust_accuracy = 0.0;
  std::size_t ball_violations = 0;
  std::size_t range_violations = 0;
  std::size_t flagged = 0;
};

struct ExperimentReport {
  std::string method;
  std::string config_hash;
  std::uint64_t seed = 0;
  std::size_t synthetic_size = 0;
  double clean_accuracy = 0.0;
  std::vector<AttackRow> attacks;  // family "none" rows are not listed
  double train_seconds = 0.0;
  double eval_seconds = 0.0;

  // Timings are left out unless asked for, so reruns compare equal.
  nlohmann::json to_json(bool timings = false) const;
};

// Trains a fresh student on s with `student` and measures clean and
// per-attack robust accuracy on `test`.
ExperimentReport evaluate(const SyntheticSet& s, const ModelSpec& spec, const Dataset& test,
                          const std::vector<AttackSpec>& attacks, const TrainConfig& student, const Rng& rng,
                          Model* trained = nullptr);

// GSET container: magic, u32 version, u32 header length, JSON header, u32
// tensor count, GTEN inputs, optional GTEN soft labels.
void write_synthetic(std::ostream& out, const SyntheticSet& s);
SyntheticSet read_synthetic(std::istream& in);
void save_synthetic(const std::string& path, const SyntheticSet& s);
SyntheticSet load_synthetic(const std::string& path);
// One binary PPM per synthetic sample (grayscale replicated when 1 channel);
// returns the written paths.
std::vector<std::string> dump_ppm(const SyntheticSet& s, const std::string& dir);

}  // namespace guard
