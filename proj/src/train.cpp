#include "guard/train.hpp"

#include <cmath>
#include <string>

#include "guard/errors.hpp"
#include "guard/ops.hpp"

namespace guard {

using ad::Var;

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
  if (!(lr >= 0)) throw ConfigError("train.lr must be >= 0");
  if (!(momentum >= 0 && momentum < 1)) throw ConfigError("train.momentum must lie in [0, 1)");
  if (!(weight_decay >= 0)) throw ConfigError("train.weight_decay must be >= 0");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (!(decay_factor > 0)) throw ConfigError("train.decay_factor must be > 0");
  if (loss != "plain" && loss != "guard" && loss != "grad-penalty" && loss != "adversarial")
    throw ConfigError("train.loss must be plain, guard, grad-penalty or adversarial, got '" + loss + "'");
  reg.validate();
  if (loss == "adversarial") adversary.validate();
}

nlohmann::json TrainConfig::to_json() const {
  return {{"epochs", epochs},
          {"lr", lr},
          {"momentum", momentum},
          {"weight_decay", weight_decay},
          {"batch_size", batch_size},
          {"decay_every", decay_every},
          {"decay_factor", decay_factor},
          {"loss", loss},
          {"reg", reg.to_json()},
          {"adversary", adversary.to_json()}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.lr = j.value("lr", c.lr);
  c.momentum = j.value("momentum", c.momentum);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.decay_every = j.value("decay_every", c.decay_every);
  c.decay_factor = j.value("decay_factor", c.decay_factor);
  c.loss = j.value("loss", c.loss);
  if (j.contains("reg")) c.reg = RegularizerConfig::from_json(j.at("reg"));
  if (j.contains("adversary")) c.adversary = AttackSpec::from_json(j.at("adversary"));
  return c;
}

Var training_objective(const Model& model, std::span<const Var> params, const Var& x, const Targets& t,
                       const TrainConfig& cfg, Forward* clean) {
  InputObjective f = model_objective(model, std::vector<Var>(params.begin(), params.end()), t, Mode::Train, clean);
  if (cfg.loss == "guard") return guard_loss(f, x, cfg.reg);
  if (cfg.loss == "grad-penalty") return grad_penalty_loss(f, x, cfg.reg);
  return plain_loss(f, x);
}

Trainer::Trainer(Model& model, TrainConfig cfg) : model_(model), cfg_(std::move(cfg)), lr_(cfg_.lr) {
  cfg_.validate();
  for (const auto& p : model_.params) velocity_.push_back(Tensor::zeros(p.shape()));
}

double Trainer::step(const Tensor& x, const Targets& t, const Rng& rng) {
  Tensor input = x;
  if (cfg_.loss == "adversarial") {
    std::vector<int> y = t.hard;
    if (t.soft) y = argmax_rows(*t.soft);
    input = perturb(model_, x, y, cfg_.adversary, rng).x_adv;
  }
  bool second_order = (cfg_.loss == "guard" && cfg_.reg.lambda > 0) ||
                      (cfg_.loss == "grad-penalty" && cfg_.reg.lambda_g > 0);
  ad::Tape tape(second_order ? 2 : 1);
  std::vector<Var> params = bind(model_, tape);
  Var xv = tape.leaf(input);
  Forward clean;
  Var obj = training_objective(model_, params, xv, t, cfg_, &clean);
  double value = obj.item();
  if (!std::isfinite(value)) throw NonFiniteError("non-finite training objective");
  std::vector<Var> grads = ad::grad(obj, params);
  update_running_stats(model_, clean);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor g = grads[i].value();
    if (cfg_.weight_decay > 0) g = axpy(cfg_.weight_decay, model_.params[i], g);
    velocity_[i] = axpy(cfg_.momentum, velocity_[i], g);
    model_.params[i] = axpy(-lr_, velocity_[i], model_.params[i]);
  }
  return value;
}

TrainResult train(Model& model, const Dataset& data, const TrainConfig& cfg, const Rng& rng) {
  if (data.size() == 0) throw Error("train: empty dataset");
  Trainer trainer(model, cfg);
  TrainResult out;
  const Targets all = data.targets();
  const std::size_t n = data.size();
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (cfg.decay_every > 0 && epoch > 0 && epoch % cfg.decay_every == 0)
      trainer.set_lr(trainer.lr() * cfg.decay_factor);
    Rng er = rng.split(epoch);
    auto perm = er.permutation(n);
    double total = 0;
    std::size_t batches = 0;
    for (std::size_t b = 0; b < n; b += cfg.batch_size) {
      std::size_t e = std::min(n, b + cfg.batch_size);
      std::span<const std::size_t> idx(perm.data() + b, e - b);
      try {
        total += trainer.step(gather_rows(data.inputs, idx), all.subset(idx), er.split(1000000 + batches));
      } catch (const NonFiniteError& err) {
        throw DivergenceError("training diverged at epoch " + std::to_string(epoch) + ", batch " +
                              std::to_string(batches) + ": " + err.what());
      }
      ++batches;
    }
    out.epoch_loss.push_back(total / static_cast<double>(batches));
  }
  return out;
}

}  // namespace guard
