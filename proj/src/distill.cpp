#include "guard/distill.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include "guard/binio.hpp"
#include "guard/errors.hpp"
#include "guard/hash.hpp"
#include "guard/ops.hpp"

namespace guard {

using ad::Var;

namespace {

constexpr std::uint32_t kGsetVersion = 1;
constexpr double kZeroNorm = 1e-12;

const char* kMethods[] = {"dc-guard", "dc-plain", "squeeze-recover-relabel", "srl-plain", "srl-grad-penalty",
                          "adv-squeeze"};

Shape sample_shape_of(const Tensor& x) { return Shape(x.shape().begin() + 1, x.shape().end()); }

Shape with_rows(std::size_t n, const Shape& inner) {
  Shape s{n};
  s.insert(s.end(), inner.begin(), inner.end());
  return s;
}

Shape model_input_shape(const ModelSpec& s) {
  if (!s.input_shape.empty()) return s.input_shape;
  if (s.arch == "mlp") return {s.layers.front()};
  throw ConfigError("model.input_shape is required for " + s.arch);
}

ModelSpec fit_spec(const ModelSpec& spec, const Dataset& real) {
  ModelSpec s = spec;
  if (s.input_shape.empty()) s.input_shape = real.sample_shape();
  if (s.input_shape != real.sample_shape())
    throw ConfigError("model.input_shape " + shape_str(s.input_shape) + " does not match the data " +
                      shape_str(real.sample_shape()));
  if (s.classes != real.classes)
    throw ConfigError("model.classes (" + std::to_string(s.classes) + ") does not match the data (" +
                      std::to_string(real.classes) + ")");
  s.validate();
  return s;
}

Targets hard_targets(std::size_t n, int c) { return Targets{std::vector<int>(n, c), std::nullopt}; }

double mean_scale(std::size_t n) { return 1.0 / static_cast<double>(n); }

// z broadcast from the mean normalized gradient of the synthetic batch.
Tensor synthetic_direction(const BatchLoss& loss, std::span<const Var> params, const Tensor& syn, int label,
                           const Tensor& like) {
  Targets st = hard_targets(syn.rows(), label);
  InputObjective fs = [&](const Var& in) { return loss(params, in, st); };
  Tensor g = input_grad(fs, syn);
  std::size_t d = g.row_size();
  Buffer m(d, 0.0);
  for (std::size_t i = 0; i < g.rows(); ++i)
    for (std::size_t j = 0; j < d; ++j) m[j] += g[i * d + j];
  Tensor dir = normalize_rows(Tensor({1, d}, std::move(m)));
  Buffer out(like.numel());
  for (std::size_t i = 0; i < like.rows(); ++i)
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = dir[j];
  return Tensor(like.shape(), std::move(out));
}

Var sum_squares(std::span<const Var> a, std::span<const Var> b) {
  Var total = ad::constant(Tensor::scalar(0.0));
  for (std::size_t i = 0; i < a.size(); ++i) total = total + ad::sum(ad::square(a[i] - b[i]));
  return total;
}

// Neighbor index pairs along the last two axes of each sample.
std::pair<ad::IndexList, ad::IndexList> tv_pairs(const Shape& shape) {
  auto a = std::make_shared<std::vector<std::size_t>>();
  auto b = std::make_shared<std::vector<std::size_t>>();
  if (shape.size() >= 3) {
    std::size_t H = shape[shape.size() - 2], W = shape.back();
    std::size_t planes = shape_numel(shape) / (H * W);
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j) {
          std::size_t at = (p * H + i) * W + j;
          if (j + 1 < W) a->push_back(at + 1), b->push_back(at);
          if (i + 1 < H) a->push_back(at + W), b->push_back(at);
        }
  }
  return {a, b};
}

// Mean over samples of the squared differences between spatial neighbors;
// zero for inputs without spatial axes.
Var tv_var(const Var& x) {
  auto [a, b] = tv_pairs(x.shape());
  if (a->empty()) return ad::constant(Tensor::scalar(0.0));
  Shape s{a->size()};
  Var diff = ad::gather(x, a, s) - ad::gather(x, b, s);
  return ad::scale(ad::sum(ad::square(diff)), mean_scale(x.shape()[0]));
}

std::string method_of(const nlohmann::json& p) { return p.is_object() ? p.value("method", std::string()) : ""; }

}  // namespace

Dataset SyntheticSet::as_dataset() const {
  Dataset d;
  d.inputs = inputs;
  d.labels = labels;
  d.soft = soft;
  d.classes = classes;
  d.split = "synthetic";
  return d;
}

void SyntheticSet::validate() const {
  if (ipc == 0 || classes == 0) throw ShapeError("synthetic set: ipc and classes must be positive");
  if (labels.size() != ipc * classes) throw ShapeError("synthetic set: expected ipc * classes labels");
  if (inputs.rank() < 2 || inputs.rows() != labels.size()) throw ShapeError("synthetic set: inputs do not match labels");
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= classes) throw ShapeError("synthetic set: label out of range");
  for (double v : inputs.data())
    if (!(v >= 0.0 && v <= 1.0)) throw ShapeError("synthetic set: inputs outside [0, 1]");
  as_dataset().validate();
}

TrainConfig DistillConfig::squeeze_config() const {
  TrainConfig t = squeeze;
  if (method == "squeeze-recover-relabel") t.loss = "guard";
  else if (method == "srl-grad-penalty") t.loss = "grad-penalty";
  else if (method == "adv-squeeze") t.loss = "adversarial";
  else t.loss = "plain";
  t.reg = reg;
  t.adversary = adversary;
  return t;
}

void DistillConfig::validate() const {
  if (std::find(std::begin(kMethods), std::end(kMethods), method) == std::end(kMethods))
    throw ConfigError("distill.method '" + method + "' is not one of dc-guard, dc-plain, squeeze-recover-relabel, "
                      "srl-plain, srl-grad-penalty, adv-squeeze");
  if (ipc == 0) throw ConfigError("distill.ipc must be >= 1");
  if (outer_steps == 0 || inner_steps == 0 || syn_steps == 0 || theta_steps == 0)
    throw ConfigError("distill step counts must be >= 1");
  if (!(lr_syn >= 0)) throw ConfigError("distill.lr_syn must be >= 0");
  if (!(lr_theta > 0)) throw ConfigError("distill.lr_theta must be > 0");
  if (!(momentum_syn >= 0 && momentum_syn < 1) || !(momentum_theta >= 0 && momentum_theta < 1))
    throw ConfigError("distill momenta must lie in [0, 1)");
  if (real_batch == 0) throw ConfigError("distill.real_batch must be >= 1");
  if (distance != "layerwise-cosine" && distance != "euclidean")
    throw ConfigError("distill.distance must be layerwise-cosine or euclidean");
  if (reg_space != "input" && reg_space != "param") throw ConfigError("distill.reg_space must be input or param");
  if (z_source != "real" && z_source != "synthetic") throw ConfigError("distill.z_source must be real or synthetic");
  if (!(recover_lr > 0)) throw ConfigError("distill.recover_lr must be > 0");
  if (!(alpha_tv >= 0 && alpha_l2 >= 0 && alpha_bn >= 0)) throw ConfigError("distill recover weights must be >= 0");
  reg.validate();
  adversary.validate();
  squeeze_config().validate();
}

nlohmann::json DistillConfig::to_json() const {
  return {{"method", method},
          {"ipc", ipc},
          {"outer_steps", outer_steps},
          {"inner_steps", inner_steps},
          {"syn_steps", syn_steps},
          {"theta_steps", theta_steps},
          {"lr_syn", lr_syn},
          {"lr_theta", lr_theta},
          {"momentum_syn", momentum_syn},
          {"momentum_theta", momentum_theta},
          {"real_batch", real_batch},
          {"distance", distance},
          {"reg_space", reg_space},
          {"z_source", z_source},
          {"reg", reg.to_json()},
          {"squeeze", squeeze.to_json()},
          {"adversary", adversary.to_json()},
          {"recover_iters", recover_iters},
          {"recover_lr", recover_lr},
          {"alpha_tv", alpha_tv},
          {"alpha_l2", alpha_l2},
          {"alpha_bn", alpha_bn},
          {"relabel", relabel}};
}

DistillConfig DistillConfig::from_json(const nlohmann::json& j) {
  DistillConfig c;
  c.method = j.value("method", c.method);
  c.ipc = j.value("ipc", c.ipc);
  c.outer_steps = j.value("outer_steps", c.outer_steps);
  c.inner_steps = j.value("inner_steps", c.inner_steps);
  c.syn_steps = j.value("syn_steps", c.syn_steps);
  c.theta_steps = j.value("theta_steps", c.theta_steps);
  c.lr_syn = j.value("lr_syn", c.lr_syn);
  c.lr_theta = j.value("lr_theta", c.lr_theta);
  c.momentum_syn = j.value("momentum_syn", c.momentum_syn);
  c.momentum_theta = j.value("momentum_theta", c.momentum_theta);
  c.real_batch = j.value("real_batch", c.real_batch);
  c.distance = j.value("distance", c.distance);
  c.reg_space = j.value("reg_space", c.reg_space);
  c.z_source = j.value("z_source", c.z_source);
  if (j.contains("reg")) c.reg = RegularizerConfig::from_json(j.at("reg"));
  if (j.contains("squeeze")) c.squeeze = TrainConfig::from_json(j.at("squeeze"));
  if (j.contains("adversary")) c.adversary = AttackSpec::from_json(j.at("adversary"));
  c.recover_iters = j.value("recover_iters", c.recover_iters);
  c.recover_lr = j.value("recover_lr", c.recover_lr);
  c.alpha_tv = j.value("alpha_tv", c.alpha_tv);
  c.alpha_l2 = j.value("alpha_l2", c.alpha_l2);
  c.alpha_bn = j.value("alpha_bn", c.alpha_bn);
  c.relabel = j.value("relabel", c.relabel);
  return c;
}

std::string DistillConfig::hash() const { return fnv1a_hex(to_json().dump()); }

BatchLoss model_loss(const Model& model, Mode mode) {
  return [&model, mode](std::span<const Var> params, const Var& x, const Targets& t) {
    return model_objective(model, std::vector<Var>(params.begin(), params.end()), t, mode)(x);
  };
}

Var matching_distance(std::span<const Var> gs, std::span<const Var> gt, const std::string& kind,
                      std::size_t* flagged) {
  if (gs.size() != gt.size()) throw ShapeError("matching_distance: gradient lists differ in length");
  for (std::size_t i = 0; i < gs.size(); ++i)
    if (gs[i].shape() != gt[i].shape()) throw ShapeError("matching_distance: layer " + std::to_string(i) + " shapes differ");
  if (kind == "euclidean") {
    Var sq = sum_squares(gs, gt);
    // sqrt has no derivative at 0; the distance is at its minimum there.
    if (sq.item() == 0.0) return ad::constant(Tensor::scalar(0.0));
    return ad::sqrt(sq);
  }
  if (kind != "layerwise-cosine") throw ConfigError("unknown matching distance '" + kind + "'");
  Var total = ad::constant(Tensor::scalar(0.0));
  for (std::size_t i = 0; i < gs.size(); ++i) {
    Var na = ad::l2_norm(gs[i]), nb = ad::l2_norm(gt[i]);
    if (na.item() < kZeroNorm || nb.item() < kZeroNorm) {
      total = ad::add_scalar(total, 1.0);
      if (flagged) ++*flagged;
      continue;
    }
    Var cos = ad::sum(gs[i] * gt[i]) / (na * nb);
    total = total + ad::add_scalar(ad::neg(cos), 1.0);
  }
  return total;
}

std::vector<Tensor> real_gradient(const BatchLoss& loss, std::span<const Tensor> theta, const Tensor& x,
                                  const Targets& t, const DistillConfig& cfg, const Tensor* syn) {
  const bool regularized = cfg.method == "dc-guard" && cfg.reg.lambda > 0;
  ad::Tape tape(regularized ? 2 : 1);
  std::vector<Var> params = tape.leaves(theta);
  Var xv = tape.leaf(x);
  InputObjective f = [&](const Var& in) { return loss(params, in, t); };
  Var obj;
  if (!regularized) {
    obj = plain_loss(f, xv);
  } else {
    Tensor z;
    if (cfg.z_source == "synthetic") {
      if (!syn) throw ConfigError("z_source = synthetic needs the synthetic batch");
      z = synthetic_direction(loss, params, *syn, t.hard.empty() ? 0 : t.hard[0], x);
    }
    if (cfg.reg_space == "input") {
      obj = cfg.z_source == "real" ? guard_loss(f, xv, cfg.reg) : guard_loss_along(f, xv, z, cfg.reg);
    } else {
      if (cfg.z_source == "real") z = normalized_grad(f, x);
      Var base = plain_loss(f, xv);
      std::vector<Var> g0 = ad::grad(base, params, true);
      Var moved = plain_loss(f, ad::constant(axpy(cfg.reg.h, z, x)));
      std::vector<Var> g1 = ad::grad(moved, params, true);
      obj = base + ad::scale(sum_squares(g1, g0), cfg.reg.lambda);
    }
  }
  if (!std::isfinite(obj.item())) throw NonFiniteError("non-finite real-data objective");
  std::vector<Tensor> out;
  for (const auto& g : ad::grad(obj, params)) out.push_back(g.value());
  return out;
}

double match_class(const BatchLoss& loss, std::span<const Tensor> theta, const std::vector<Tensor>& target,
                   Tensor& syn, const Targets& syn_t, Tensor& velocity, const DistillConfig& cfg,
                   std::size_t* flagged) {
  double first = std::numeric_limits<double>::quiet_NaN();
  std::vector<Var> gt;
  for (const auto& g : target) gt.push_back(ad::constant(g));
  for (std::size_t s = 0; s < cfg.syn_steps; ++s) {
    ad::Tape tape(2);
    std::vector<Var> params = tape.leaves(theta);
    Var xs = tape.leaf(syn);
    Var ls = ad::scale(loss(params, xs, syn_t), mean_scale(syn.rows()));
    std::vector<Var> gs = ad::grad(ls, params, true);
    Var d = matching_distance(gs, gt, cfg.distance, flagged);
    if (!std::isfinite(d.item())) throw NonFiniteError("non-finite matching distance");
    if (s == 0) first = d.item();
    Tensor g = ad::grad(d, xs).value();
    velocity = axpy(cfg.momentum_syn, velocity, g);
    syn = clamp(axpy(-cfg.lr_syn, velocity, syn), 0.0, 1.0);
  }
  return first;
}

void theta_update(const BatchLoss& loss, std::vector<Tensor>& theta, const Tensor& syn, const Targets& syn_t,
                  std::vector<Tensor>& velocity, const DistillConfig& cfg) {
  const Var xs = ad::constant(syn);
  for (std::size_t s = 0; s < cfg.theta_steps; ++s) {
    ad::Tape tape(1);
    std::vector<Var> params = tape.leaves(theta);
    Var obj = ad::scale(loss(params, xs, syn_t), mean_scale(syn.rows()));
    if (!std::isfinite(obj.item())) throw NonFiniteError("non-finite synthetic-data loss");
    std::vector<Var> g = ad::grad(obj, params);
    for (std::size_t i = 0; i < theta.size(); ++i) {
      velocity[i] = axpy(cfg.momentum_theta, velocity[i], g[i].value());
      theta[i] = axpy(-cfg.lr_theta, velocity[i], theta[i]);
    }
  }
}

SyntheticSet dc_guard(const Dataset& real, const ModelSpec& spec, const DistillConfig& cfg, const Rng& rng) {
  cfg.validate();
  if (!cfg.is_dc()) throw ConfigError("dc_guard needs method dc-guard or dc-plain, got '" + cfg.method + "'");
  real.validate();
  ModelSpec sp = fit_spec(spec, real);
  const std::size_t C = real.classes;
  std::vector<std::vector<std::size_t>> by_class(C);
  std::vector<Tensor> syn(C), syn_vel(C);
  Rng init_rng = rng.split(1);
  for (std::size_t c = 0; c < C; ++c) {
    by_class[c] = real.class_indices(static_cast<int>(c));
    if (by_class[c].size() < cfg.ipc)
      throw ConfigError("class " + std::to_string(c) + " has " + std::to_string(by_class[c].size()) +
                        " samples, fewer than ipc = " + std::to_string(cfg.ipc));
    Rng r = init_rng.split(c);
    std::vector<std::size_t> pick;
    for (auto j : r.sample_without_replacement(by_class[c].size(), cfg.ipc)) pick.push_back(by_class[c][j]);
    syn[c] = gather_rows(real.inputs, pick);
    syn_vel[c] = Tensor::zeros(syn[c].shape());
  }

  std::vector<int> syn_labels;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < cfg.ipc; ++i) syn_labels.push_back(static_cast<int>(c));
  const Targets all_syn{syn_labels, std::nullopt};
  const Targets all_real = real.targets();

  std::size_t flagged = 0;
  double last_distance = 0;
  for (std::size_t k = 0; k < cfg.outer_steps; ++k) {
    Rng theta_rng = rng.split(2).split(k);
    Model net = init(sp, theta_rng);
    BatchLoss loss = model_loss(net, Mode::Train);
    std::vector<Tensor> theta = net.params;
    std::vector<Tensor> theta_vel;
    for (const auto& p : theta) theta_vel.push_back(Tensor::zeros(p.shape()));
    for (std::size_t t = 0; t < cfg.inner_steps; ++t) {
      try {
        double dist = 0;
        for (std::size_t c = 0; c < C; ++c) {
          Rng br = rng.split(3).split(k).split(t).split(c);
          const auto& idx = by_class[c];
          std::vector<std::size_t> pick;
          for (auto j : br.sample_without_replacement(idx.size(), std::min(cfg.real_batch, idx.size())))
            pick.push_back(idx[j]);
          Tensor xr = gather_rows(real.inputs, pick);
          Targets tr = all_real.subset(pick);
          std::vector<Tensor> target = real_gradient(loss, theta, xr, tr, cfg, &syn[c]);
          dist += match_class(loss, theta, target, syn[c], hard_targets(cfg.ipc, static_cast<int>(c)), syn_vel[c],
                              cfg, &flagged);
        }
        last_distance = dist / static_cast<double>(C);
        theta_update(loss, theta, stack_rows(syn), all_syn, theta_vel, cfg);
      } catch (const NonFiniteError& e) {
        throw DivergenceError("distillation diverged at outer step " + std::to_string(k) + ", inner step " +
                              std::to_string(t) + ": " + e.what());
      }
    }
  }

  SyntheticSet s;
  s.inputs = stack_rows(syn);
  s.labels = syn_labels;
  s.ipc = cfg.ipc;
  s.classes = C;
  s.provenance = {{"method", cfg.method},   {"config_hash", cfg.hash()}, {"seed", rng.seed()},
                  {"zero_norm_layers", flagged}, {"final_distance", last_distance}, {"model", sp.to_json()}};
  return s;
}

Model squeeze(const Dataset& real, const ModelSpec& spec, const DistillConfig& cfg, const Rng& rng) {
  if (cfg.is_dc())
    throw ConfigError("squeeze accepts squeeze-recover-relabel, srl-plain, srl-grad-penalty or adv-squeeze, got '" +
                      cfg.method + "'");
  cfg.validate();
  ModelSpec sp = fit_spec(spec, real);
  Rng init_rng = rng.split(0);
  Model m = init(sp, init_rng);
  train(m, real, cfg.squeeze_config(), rng.split(1));
  return m;
}

double total_variation(const Tensor& x) {
  ad::NoGrad ng;
  return tv_var(ad::constant(x)).item();
}

SyntheticSet recover(const Model& teacher, const DistillConfig& cfg, const Rng& rng, RecoverTrace* trace) {
  cfg.validate();
  const std::size_t C = teacher.spec.classes;
  const Shape inner = model_input_shape(teacher.spec);
  const bool use_bn = cfg.alpha_bn > 0 && teacher.bn_layers() > 0;
  const std::vector<Var> params = constants(teacher);
  if (trace) *trace = RecoverTrace{std::vector<std::vector<double>>(C), std::vector<std::vector<double>>(C)};

  std::vector<Tensor> out(C);
  for (std::size_t c = 0; c < C; ++c) {
    const Targets tc = hard_targets(cfg.ipc, static_cast<int>(c));
    // Objective value, CE part, and optionally the input gradient.
    auto objective = [&](const Tensor& xin, Tensor* grad, double* ce_out) {
      ad::Tape tape(1);
      Var xv = tape.leaf(xin);
      Forward f = forward(teacher, params, xv, Mode::Eval, use_bn);
      Var ce = loss_mean(f.logits, tc);
      Var j = ce + ad::scale(tv_var(xv), cfg.alpha_tv) +
              ad::scale(ad::sum(ad::square(xv)), cfg.alpha_l2 * mean_scale(cfg.ipc));
      if (use_bn) {
        Var bn = ad::constant(Tensor::scalar(0.0));
        for (std::size_t l = 0; l < teacher.bn_layers(); ++l)
          bn = bn + ad::sum(ad::square(f.batch_mean[l] - ad::constant(teacher.bn_mean[l]))) +
               ad::sum(ad::square(f.batch_var[l] - ad::constant(teacher.bn_var[l])));
        j = j + ad::scale(bn, cfg.alpha_bn);
      }
      double v = j.item();
      if (!std::isfinite(v)) throw NonFiniteError("non-finite recover objective for class " + std::to_string(c));
      if (ce_out) *ce_out = ce.item();
      if (grad) *grad = ad::grad(j, xv).value();
      return v;
    };

    Rng rc = rng.split(c);
    Tensor x = rc.uniform_tensor(with_rows(cfg.ipc, inner), 0.0, 1.0);
    double lr = cfg.recover_lr;
    double ce = 0, value = objective(x, nullptr, &ce);
    if (trace) trace->objective[c].push_back(value), trace->ce[c].push_back(ce);
    for (std::size_t it = 0; it < cfg.recover_iters; ++it) {
      Tensor g;
      objective(x, &g, nullptr);
      // Backtracking: halve the step until the objective does not increase.
      for (int tries = 0; tries < 40; ++tries) {
        Tensor cand = clamp(axpy(-lr, g, x), 0.0, 1.0);
        double cand_ce = 0, cand_value = objective(cand, nullptr, &cand_ce);
        if (cand_value <= value) {
          x = std::move(cand);
          value = cand_value;
          ce = cand_ce;
          lr = std::min(cfg.recover_lr, 2 * lr);
          break;
        }
        lr *= 0.5;
      }
      if (trace) trace->objective[c].push_back(value), trace->ce[c].push_back(ce);
    }
    out[c] = std::move(x);
  }

  SyntheticSet s;
  s.inputs = stack_rows(out);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < cfg.ipc; ++i) s.labels.push_back(static_cast<int>(c));
  s.ipc = cfg.ipc;
  s.classes = C;
  s.provenance = {{"method", cfg.method}, {"config_hash", cfg.hash()}, {"seed", rng.seed()},
                  {"model", teacher.spec.to_json()}};
  return s;
}

SyntheticSet relabel(const Model& teacher, SyntheticSet s) {
  s.soft = softmax_rows(predict_logits(teacher, s.inputs));
  s.provenance["relabelled"] = true;
  return s;
}

SyntheticSet distill(const Dataset& real, const ModelSpec& spec, const DistillConfig& cfg, const Rng& rng) {
  if (cfg.is_dc()) return dc_guard(real, spec, cfg, rng);
  Model teacher = squeeze(real, spec, cfg, rng.split(10));
  SyntheticSet s = recover(teacher, cfg, rng.split(11));
  if (cfg.relabel) s = relabel(teacher, std::move(s));
  s.provenance["seed"] = rng.seed();
  return s;
}

nlohmann::json ExperimentReport::to_json(bool timings) const {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& a : attacks)
    rows.push_back({{"family", a.family},
                    {"norm", a.norm},
                    {"eps", a.eps},
                    {"robust_accuracy", a.robust_accuracy},
                    {"ball_violations", a.ball_violations},
                    {"range_violations", a.range_violations},
                    {"flagged", a.flagged}});
  nlohmann::json j = {{"method", method},
                      {"config_hash", config_hash},
                      {"seed", seed},
                      {"synthetic_size", synthetic_size},
                      {"clean_accuracy", clean_accuracy},
                      {"attacks", rows}};
  if (timings) j["timings"] = {{"train_seconds", train_seconds}, {"eval_seconds", eval_seconds}};
  return j;
}

ExperimentReport evaluate(const SyntheticSet& s, const ModelSpec& spec, const Dataset& test,
                          const std::vector<AttackSpec>& attacks, const TrainConfig& student, const Rng& rng,
                          Model* trained) {
  if (s.size() == 0) throw ShapeError("evaluate: empty synthetic set");
  s.validate();
  using clock = std::chrono::steady_clock;
  Dataset train_set = s.as_dataset();
  ModelSpec sp = fit_spec(spec, train_set);
  if (test.sample_shape() != sp.input_shape) throw ShapeError("evaluate: test data shape differs from the synthetic set");

  nlohmann::json key = {{"synthetic", s.provenance}, {"model", sp.to_json()}, {"student", student.to_json()}};
  for (const auto& a : attacks) key["attacks"].push_back(a.to_json());

  ExperimentReport rep;
  rep.method = method_of(s.provenance);
  rep.config_hash = fnv1a_hex(key.dump());
  rep.seed = rng.seed();
  rep.synthetic_size = s.size();

  auto t0 = clock::now();
  Rng init_rng = rng.split(0);
  Model m = init(sp, init_rng);
  train(m, train_set, student, rng.split(1));
  auto t1 = clock::now();
  rep.clean_accuracy = accuracy(m, test);
  for (const auto& a : attacks) {
    if (a.family == "none") continue;
    RobustEval r = evaluate_attack(m, test, a, rng.split(2));
    rep.attacks.push_back({a.family, a.norm, a.eps, r.robust_accuracy, r.ball_violations, r.range_violations, r.flagged});
  }
  auto t2 = clock::now();
  rep.train_seconds = std::chrono::duration<double>(t1 - t0).count();
  rep.eval_seconds = std::chrono::duration<double>(t2 - t1).count();
  if (trained) *trained = std::move(m);
  return rep;
}

void write_synthetic(std::ostream& out, const SyntheticSet& s) {
  s.validate();
  const nlohmann::json& p = s.provenance;
  nlohmann::json header = {{"ipc", s.ipc},
                           {"classes", s.classes},
                           {"method", method_of(p)},
                           {"config_hash", p.is_object() ? p.value("config_hash", std::string()) : ""},
                           {"seed", p.is_object() ? p.value("seed", std::uint64_t{0}) : 0},
                           {"labels", s.labels},
                           {"soft", s.soft.has_value()},
                           {"provenance", p}};
  std::string text = header.dump();
  binio::write_bytes(out, "GSET");
  binio::write_u32(out, kGsetVersion);
  binio::write_u32(out, static_cast<std::uint32_t>(text.size()));
  binio::write_bytes(out, text);
  binio::write_u32(out, s.soft ? 2 : 1);
  write_gten(out, s.inputs);
  if (s.soft) write_gten(out, *s.soft);
}

SyntheticSet read_synthetic(std::istream& in) {
  binio::Reader r(in, 0);
  r.expect_magic("GSET");
  std::size_t at = r.offset();
  if (r.u32("version") != kGsetVersion) throw ParseError("unsupported GSET version", at);
  at = r.offset();
  std::uint32_t len = r.u32("header length");
  if (len > (1u << 26)) throw ParseError("implausible GSET header length", at);
  std::size_t json_at = r.offset();
  std::string text = r.bytes(len, "header");
  SyntheticSet s;
  bool has_soft = false;
  try {
    nlohmann::json h = nlohmann::json::parse(text);
    s.ipc = h.at("ipc").get<std::size_t>();
    s.classes = h.at("classes").get<std::size_t>();
    s.labels = h.at("labels").get<std::vector<int>>();
    has_soft = h.at("soft").get<bool>();
    s.provenance = h.value("provenance", nlohmann::json::object());
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("GSET header is not valid JSON: ") + e.what(), json_at + e.byte);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("GSET header: ") + e.what(), json_at);
  }
  at = r.offset();
  std::uint32_t count = r.u32("tensor count");
  if (count != (has_soft ? 2u : 1u)) throw ParseError("GSET tensor count does not match the header", at);
  std::size_t offset = r.offset();
  s.inputs = read_gten(in, offset);
  offset += 12 + 4 * s.inputs.rank() + 8 * s.inputs.numel();
  if (has_soft) s.soft = read_gten(in, offset);
  try {
    s.validate();
  } catch (const Error& e) {
    throw ParseError(std::string("GSET content: ") + e.what(), offset);
  }
  return s;
}

void save_synthetic(const std::string& path, const SyntheticSet& s) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  write_synthetic(out, s);
  if (!out) throw Error("write failed: " + path);
}

SyntheticSet load_synthetic(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  return read_synthetic(in);
}

std::vector<std::string> dump_ppm(const SyntheticSet& s, const std::string& dir) {
  std::filesystem::create_directories(dir);
  Shape inner = sample_shape_of(s.inputs);
  std::size_t d = shape_numel(inner), channels = 1, H = 1, W = d;
  if (inner.size() >= 2) {
    H = inner[inner.size() - 2];
    W = inner.back();
    channels = d / (H * W);
  } else {
    auto side = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(d))));
    if (side * side == d) H = W = side;
  }
  if (channels != 1 && channels != 3) channels = 1, H = 1, W = d;
  std::vector<std::string> paths;
  for (std::size_t i = 0; i < s.size(); ++i) {
    char name[64];
    std::snprintf(name, sizeof name, "sample_%05zu_c%d.ppm", i, s.labels[i]);
    std::string path = (std::filesystem::path(dir) / name).string();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path);
    out << "P6\n" << W << ' ' << H << "\n255\n";
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x)
        for (std::size_t k = 0; k < 3; ++k) {
          std::size_t ch = channels == 3 ? k : 0;
          double v = s.inputs[i * d + (ch * H + y) * W + x];
          out.put(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255))));
        }
    paths.push_back(path);
  }
  return paths;
}

}  // namespace guard
