#pragma once

#include <string>
#include <vector>

#include "guard/attacks.hpp"
#include "guard/curvature.hpp"
#include "guard/data.hpp"
#include "guard/models.hpp"
#include "json.hpp"

namespace guard {

struct TrainConfig {
  std::size_t epochs = 50;
  double lr = 0.025;
  double momentum = 0.9;
  double weight_decay = 0.0;
  std::size_t batch_size = 32;
  std::size_t decay_every = 0;  // 0 keeps the rate constant
  double decay_factor = 0.1;
  std::string loss = "plain";   // plain | guard | grad-penalty | adversarial
  RegularizerConfig reg;
  AttackSpec adversary{.family = "pgd", .eps = 1.0 / 255.0, .steps = 10};

  void validate() const;
  nlohmann::json to_json() const;
  // Missing keys keep their defaults.
  static TrainConfig from_json(const nlohmann::json& j);
};

struct TrainResult {
  std::vector<double> epoch_loss;  // mean training objective per epoch
};

// SGD with momentum on a private velocity; one instance per training run.
class Trainer {
 public:
  Trainer(Model& model, TrainConfig cfg);

  // One optimizer step on a batch; returns the objective value.
  double step(const Tensor& x, const Targets& t, const Rng& rng);
  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

 private:
  Model& model_;
  TrainConfig cfg_;
  double lr_;
  std::vector<Tensor> velocity_;
};

// Trains in place. Non-finite objectives raise DivergenceError naming the epoch.
TrainResult train(Model& model, const Dataset& data, const TrainConfig& cfg, const Rng& rng);

// Objective of `cfg.loss` on a batch, recorded on the active tape against the
// given parameter leaves. `x` must be a leaf of that tape.
ad::Var training_objective(const Model& model, std::span<const ad::Var> params, const ad::Var& x,
                           const Targets& t, const TrainConfig& cfg, Forward* clean = nullptr);

}  // namespace guard
