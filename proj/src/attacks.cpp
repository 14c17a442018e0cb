#include "guard/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include "guard/errors.hpp"
#include "guard/ops.hpp"
#include "guard/parallel.hpp"

namespace guard {

using ad::Var;

namespace {

constexpr double kBallSlack = 1e-12;

std::uint64_t family_code(const std::string& f) {
  static const char* names[] = {"none", "fgsm", "pgd", "mim", "cw-l2", "square", "auto-lite"};
  for (std::uint64_t i = 0; i < 7; ++i)
    if (f == names[i]) return i;
  throw ConfigError("attack.family '" + f + "' is not one of none, fgsm, pgd, mim, cw-l2, square, auto-lite");
}

struct Eval {
  std::vector<double> loss;  // per-sample cross-entropy
  std::vector<bool> wrong;   // argmax != label
  Tensor logits;
};

Eval evaluate(const Model& model, const Tensor& x, const std::vector<int>& y) {
  Eval e;
  e.logits = predict_logits(model, x);
  std::size_t n = x.rows(), c = e.logits.dim(1);
  auto z = e.logits.data();
  for (std::size_t i = 0; i < n; ++i) {
    double mx = *std::max_element(z.begin() + static_cast<long>(i * c), z.begin() + static_cast<long>((i + 1) * c));
    double s = 0;
    std::size_t arg = 0;
    for (std::size_t j = 0; j < c; ++j) {
      s += std::exp(z[i * c + j] - mx);
      if (z[i * c + j] > z[i * c + arg]) arg = j;
    }
    e.loss.push_back(mx + std::log(s) - z[i * c + static_cast<std::size_t>(y[i])]);
    e.wrong.push_back(static_cast<int>(arg) != y[i]);
  }
  return e;
}

// Per-sample input gradient of the cross-entropy.
Tensor ce_grad(const Model& model, const Tensor& x, const std::vector<int>& y) {
  ad::Tape tape(1);
  Var xv = tape.leaf(x);
  auto p = constants(model);
  Var l = ad::cross_entropy_sum(forward(model, p, xv, Mode::Eval).logits, y);
  return ad::grad(l, xv).value();
}

double row_norm(std::span<const double> v, bool l2) {
  double s = 0;
  for (double a : v) s = l2 ? s + a * a : std::max(s, std::abs(a));
  return l2 ? std::sqrt(s) : s;
}

// Projects each row of `adv` onto the eps-ball around `x`, then onto [0, 1].
Tensor project(const Tensor& adv, const Tensor& x, double eps, bool l2) {
  Buffer out = adv.to_buffer();
  auto xd = x.data();
  std::size_t n = x.rows(), d = x.row_size();
  for (std::size_t i = 0; i < n; ++i) {
    double* r = out.data() + i * d;
    if (l2) {
      double s = 0;
      for (std::size_t j = 0; j < d; ++j) s += (r[j] - xd[i * d + j]) * (r[j] - xd[i * d + j]);
      s = std::sqrt(s);
      if (s > eps) {
        double f = eps / s;
        for (std::size_t j = 0; j < d; ++j) r[j] = xd[i * d + j] + f * (r[j] - xd[i * d + j]);
      }
    } else {
      for (std::size_t j = 0; j < d; ++j) r[j] = std::clamp(r[j], xd[i * d + j] - eps, xd[i * d + j] + eps);
    }
    for (std::size_t j = 0; j < d; ++j) r[j] = std::clamp(r[j], 0.0, 1.0);
  }
  return Tensor(x.shape(), std::move(out));
}

// Sign step (linf) or normalized-gradient step (l2), row-wise.
Tensor ascent_direction(const Tensor& g, bool l2) {
  Buffer out(g.numel());
  std::size_t n = g.rows(), d = g.row_size();
  auto gd = g.data();
  for (std::size_t i = 0; i < n; ++i) {
    double nrm = l2 ? row_norm(gd.subspan(i * d, d), true) : 1.0;
    for (std::size_t j = 0; j < d; ++j) {
      double v = gd[i * d + j];
      out[i * d + j] = l2 ? (nrm > 0 ? v / nrm : 0.0) : (v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0));
    }
  }
  return Tensor(g.shape(), std::move(out));
}

// Best candidate per sample: misclassified first, then higher loss.
struct Best {
  Buffer x;
  std::vector<double> loss;
  std::vector<bool> wrong;
  std::size_t d = 0;

  Best(const Tensor& start, const Eval& e) : x(start.to_buffer()), loss(e.loss), wrong(e.wrong), d(start.row_size()) {}

  void offer(const Tensor& cand, const Eval& e) {
    auto c = cand.data();
    for (std::size_t i = 0; i < loss.size(); ++i) {
      bool better = (e.wrong[i] && !wrong[i]) || (e.wrong[i] == wrong[i] && e.loss[i] > loss[i]);
      if (!better) continue;
      std::copy(c.begin() + static_cast<long>(i * d), c.begin() + static_cast<long>((i + 1) * d),
                x.begin() + static_cast<long>(i * d));
      loss[i] = e.loss[i];
      wrong[i] = e.wrong[i];
    }
  }
};

Rng sample_rng(const Rng& base, const AttackSpec& spec, const std::string& family, std::size_t id) {
  return base.split(spec.stream).split(family_code(family)).split(id);
}

Tensor random_start(const Tensor& x, const AttackSpec& spec, const Rng& base, std::size_t first_id,
                    std::size_t restart, bool l2) {
  std::size_t n = x.rows(), d = x.row_size();
  Buffer out = x.to_buffer();
  for (std::size_t i = 0; i < n; ++i) {
    Rng r = sample_rng(base, spec, "pgd", first_id + i).split(restart);
    std::vector<double> u(d);
    if (l2) {
      for (auto& v : u) v = r.normal();
      double nrm = row_norm(u, true);
      double rad = spec.eps * std::pow(r.uniform(), 1.0 / static_cast<double>(d));
      for (auto& v : u) v = nrm > 0 ? v / nrm * rad : 0.0;
    } else {
      for (auto& v : u) v = r.uniform(-spec.eps, spec.eps);
    }
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] += u[j];
  }
  return project(Tensor(x.shape(), std::move(out)), x, spec.eps, l2);
}

Tensor fgsm(const Model& m, const Tensor& x, const std::vector<int>& y, const AttackSpec& s) {
  bool l2 = s.norm == "l2";
  Tensor g = ce_grad(m, x, y);
  return project(axpy(s.eps, ascent_direction(g, l2), x), x, s.eps, l2);
}

Tensor pgd(const Model& m, const Tensor& x, const std::vector<int>& y, const AttackSpec& s, const Rng& base,
           std::size_t first_id) {
  bool l2 = s.norm == "l2";
  double alpha = s.step_size();
  Best best(x, evaluate(m, x, y));
  for (std::size_t rs = 0; rs < s.restarts; ++rs) {
    Tensor cur = random_start(x, s, base, first_id, rs, l2);
    for (std::size_t t = 0;; ++t) {
      best.offer(cur, evaluate(m, cur, y));
      if (t == s.steps) break;
      Tensor g = ce_grad(m, cur, y);
      cur = project(axpy(alpha, ascent_direction(g, l2), cur), x, s.eps, l2);
    }
  }
  return Tensor(x.shape(), std::move(best.x));
}

Tensor mim(const Model& m, const Tensor& x, const std::vector<int>& y, const AttackSpec& s) {
  bool l2 = s.norm == "l2";
  double alpha = s.step_size();
  std::size_t n = x.rows(), d = x.row_size();
  Best best(x, evaluate(m, x, y));
  Buffer acc(x.numel(), 0.0);
  Tensor cur = x;
  for (std::size_t t = 0; t < s.steps; ++t) {
    Tensor g = ce_grad(m, cur, y);
    auto gd = g.data();
    for (std::size_t i = 0; i < n; ++i) {
      double l1 = 0;
      for (std::size_t j = 0; j < d; ++j) l1 += std::abs(gd[i * d + j]);
      for (std::size_t j = 0; j < d; ++j)
        acc[i * d + j] = s.momentum * acc[i * d + j] + (l1 > 0 ? gd[i * d + j] / l1 : 0.0);
    }
    Tensor dir = ascent_direction(Tensor(x.shape(), acc), l2);
    cur = project(axpy(alpha, dir, cur), x, s.eps, l2);
    best.offer(cur, evaluate(m, cur, y));
  }
  return Tensor(x.shape(), std::move(best.x));
}

Tensor cw_l2(const Model& m, const Tensor& x, const std::vector<int>& y, const AttackSpec& s) {
  bool l2 = s.norm == "l2";
  std::size_t n = x.rows();
  Buffer w0(x.numel());
  auto xd = x.data();
  for (std::size_t i = 0; i < w0.size(); ++i) w0[i] = std::atanh((2.0 * xd[i] - 1.0) * (1.0 - 1e-6));
  Tensor w(x.shape(), std::move(w0));
  auto params = constants(m);
  for (std::size_t it = 0; it < s.cw_iters; ++it) {
    ad::Tape tape(1);
    Var wv = tape.leaf(w);
    Var xa = ad::scale(ad::add_scalar(ad::tanh(wv), 1.0), 0.5);
    Var logits = forward(m, params, xa, Mode::Eval).logits;
    std::size_t c = logits.shape()[1];
    std::vector<int> runner(n);
    auto z = logits.value().data();
    for (std::size_t i = 0; i < n; ++i) {
      int best = -1;
      for (std::size_t j = 0; j < c; ++j)
        if (static_cast<int>(j) != y[i] && (best < 0 || z[i * c + j] > z[i * c + static_cast<std::size_t>(best)]))
          best = static_cast<int>(j);
      runner[i] = best;
    }
    Var margin = ad::relu(ad::pick(logits, y) - ad::pick(logits, runner));
    Var obj = ad::sum(ad::square(xa - ad::constant(x))) + ad::scale(ad::sum(margin), s.c);
    Tensor g = ad::grad(obj, wv).value();
    w = axpy(-s.cw_lr, g, w);
  }
  Buffer xa(w.numel());
  auto wd = w.data();
  for (std::size_t i = 0; i < xa.size(); ++i) xa[i] = 0.5 * (std::tanh(wd[i]) + 1.0);
  return project(Tensor(x.shape(), std::move(xa)), x, s.eps, l2);
}

// Margin (true logit minus best other); the square attack minimizes it.
std::vector<double> margins(const Tensor& logits, const std::vector<int>& y) {
  std::size_t n = logits.rows(), c = logits.dim(1);
  auto z = logits.data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    double other = -INFINITY;
    for (std::size_t j = 0; j < c; ++j)
      if (static_cast<int>(j) != y[i]) other = std::max(other, z[i * c + j]);
    out[i] = z[i * c + static_cast<std::size_t>(y[i])] - other;
  }
  return out;
}

double square_fraction(double p0, std::size_t q, std::size_t total) {
  // Piecewise halving schedule, rescaled to the query budget.
  static const double marks[] = {10, 50, 200, 500, 1000, 2000, 4000, 6000, 8000};
  double t = 10000.0 * static_cast<double>(q) / static_cast<double>(std::max<std::size_t>(total, 1));
  double p = p0;
  for (double mk : marks)
    if (t > mk) p /= 2.0;
  return p;
}

Tensor square(const Model& m, const Tensor& x, const std::vector<int>& y, const AttackSpec& s, const Rng& base,
              std::size_t first_id) {
  bool l2 = s.norm == "l2";
  std::size_t n = x.rows(), d = x.row_size();
  // View each sample as (C, H, W); vectors are a single row.
  std::size_t ch = 1, hh = 1, ww = d;
  if (x.rank() == 4) {
    ch = x.dim(1);
    hh = x.dim(2);
    ww = x.dim(3);
  }
  std::vector<Rng> rngs;
  for (std::size_t i = 0; i < n; ++i) rngs.push_back(sample_rng(base, s, "square", first_id + i));
  auto xd = x.data();
  // Vertical stripes of +-eps (linf) or a small random l2 start.
  Buffer cur = x.to_buffer();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < ch; ++c)
      for (std::size_t col = 0; col < ww; ++col) {
        double v = s.eps * rngs[i].sign();
        if (l2) v /= std::sqrt(static_cast<double>(d));
        for (std::size_t r = 0; r < hh; ++r) cur[i * d + (c * hh + r) * ww + col] += v;
      }
  Tensor curt = project(Tensor(x.shape(), std::move(cur)), x, s.eps, l2);
  Best best(x, evaluate(m, x, y));
  Eval ce = evaluate(m, curt, y);
  best.offer(curt, ce);
  std::vector<double> marg = margins(ce.logits, y);
  Buffer state = curt.to_buffer();
  for (std::size_t q = 0; q < s.queries; ++q) {
    double p = square_fraction(s.square_p, q, s.queries);
    std::size_t side = static_cast<std::size_t>(std::round(std::sqrt(p * static_cast<double>(hh * ww))));
    side = std::clamp<std::size_t>(side, 1, std::min(hh, ww));
    std::size_t wside = x.rank() == 4 ? side : std::clamp<std::size_t>(
        static_cast<std::size_t>(std::round(p * static_cast<double>(ww))), 1, ww);
    std::size_t hside = x.rank() == 4 ? side : 1;
    Buffer prop = state;
    std::vector<bool> live(n);
    for (std::size_t i = 0; i < n; ++i) {
      live[i] = marg[i] >= 0.0;  // stop once misclassified
      if (!live[i]) continue;
      Rng& r = rngs[i];
      std::size_t r0 = r.below(hh - hside + 1), c0 = r.below(ww - wside + 1);
      for (std::size_t c = 0; c < ch; ++c) {
        double v = r.sign() * s.eps;
        if (l2) v /= std::sqrt(static_cast<double>(hside * wside * ch));
        for (std::size_t a = 0; a < hside; ++a)
          for (std::size_t b = 0; b < wside; ++b) {
            std::size_t k = i * d + (c * hh + r0 + a) * ww + c0 + b;
            prop[k] = l2 ? prop[k] + v : xd[k] + v;
          }
      }
    }
    if (std::none_of(live.begin(), live.end(), [](bool b) { return b; })) break;
    Tensor pt = project(Tensor(x.shape(), prop), x, s.eps, l2);
    Eval pe = evaluate(m, pt, y);
    std::vector<double> pm = margins(pe.logits, y);
    auto pdat = pt.data();
    for (std::size_t i = 0; i < n; ++i) {
      if (!live[i] || !(pm[i] < marg[i])) continue;
      marg[i] = pm[i];
      std::copy(pdat.begin() + static_cast<long>(i * d), pdat.begin() + static_cast<long>((i + 1) * d),
                state.begin() + static_cast<long>(i * d));
    }
    best.offer(pt, pe);
  }
  return Tensor(x.shape(), std::move(best.x));
}

Tensor run_family(const Model& m, const Tensor& x, const std::vector<int>& y, const AttackSpec& s, const Rng& base,
                  std::size_t first_id) {
  if (s.eps == 0.0 || s.family == "none") return x;
  if (s.family == "fgsm") return fgsm(m, x, y, s);
  if (s.family == "pgd") return pgd(m, x, y, s, base, first_id);
  if (s.family == "mim") return mim(m, x, y, s);
  if (s.family == "cw-l2") return cw_l2(m, x, y, s);
  if (s.family == "square") return square(m, x, y, s, base, first_id);
  // auto-lite: per-sample worst case over its members, same streams as standalone runs.
  Best best(x, evaluate(m, x, y));
  for (const char* fam : {"pgd", "mim", "square"}) {
    AttackSpec sub = s;
    sub.family = fam;
    sub.alpha = 0.0;
    Tensor cand = run_family(m, x, y, sub, base, first_id);
    best.offer(cand, evaluate(m, cand, y));
  }
  return Tensor(x.shape(), std::move(best.x));
}

AttackResult finish(const Model& m, const Tensor& x, const Tensor& adv, const std::vector<int>& y, bool l2) {
  AttackResult r;
  r.x_adv = adv;
  Eval e = evaluate(m, adv, y);
  r.final_loss = e.loss;
  r.success = e.wrong;
  r.flagged.assign(x.rows(), false);
  std::size_t d = x.row_size();
  Tensor diff = sub(adv, x);
  for (std::size_t i = 0; i < x.rows(); ++i) r.norm.push_back(row_norm(diff.data().subspan(i * d, d), l2));
  return r;
}

}  // namespace

void AttackSpec::validate() const {
  family_code(family);
  if (norm != "linf" && norm != "l2") throw ConfigError("attack.norm must be linf or l2");
  if (!(eps >= 0)) throw ConfigError("attack.eps must be >= 0");
  bool iterative = family == "pgd" || family == "mim" || family == "auto-lite";
  if (iterative && steps < 1) throw ConfigError("attack.steps must be >= 1");
  if (!(alpha >= 0)) throw ConfigError("attack.alpha must be >= 0");
  if (restarts < 1) throw ConfigError("attack.restarts must be >= 1");
  if (family == "cw-l2" && (cw_iters < 1 || !(cw_lr > 0) || !(c >= 0)))
    throw ConfigError("cw-l2 needs cw_iters >= 1, cw_lr > 0 and c >= 0");
  if ((family == "square" || family == "auto-lite") && (queries < 1 || !(square_p > 0 && square_p <= 1)))
    throw ConfigError("square needs queries >= 1 and square_p in (0, 1]");
}

double AttackSpec::step_size() const {
  if (alpha > 0) return alpha;
  if (family == "fgsm") return eps;
  if (family == "mim") return eps / static_cast<double>(steps);
  return 2.5 * eps / static_cast<double>(steps);
}

std::string AttackSpec::label() const { return norm == "l2" && family != "cw-l2" ? family + "-l2" : family; }

nlohmann::json AttackSpec::to_json() const {
  return {{"family", family},     {"norm", norm},         {"eps", eps},       {"steps", steps},
          {"alpha", alpha},       {"restarts", restarts}, {"momentum", momentum}, {"c", c},
          {"cw_iters", cw_iters}, {"cw_lr", cw_lr},       {"queries", queries}, {"square_p", square_p},
          {"stream", stream}};
}

AttackSpec AttackSpec::from_json(const nlohmann::json& j) {
  AttackSpec s;
  s.family = j.value("family", s.family);
  s.norm = j.value("norm", s.norm);
  s.eps = j.value("eps", s.eps);
  s.steps = j.value("steps", s.steps);
  s.alpha = j.value("alpha", s.alpha);
  s.restarts = j.value("restarts", s.restarts);
  s.momentum = j.value("momentum", s.momentum);
  s.c = j.value("c", s.c);
  s.cw_iters = j.value("cw_iters", s.cw_iters);
  s.cw_lr = j.value("cw_lr", s.cw_lr);
  s.queries = j.value("queries", s.queries);
  s.square_p = j.value("square_p", s.square_p);
  s.stream = j.value("stream", s.stream);
  return s;
}

AttackResult perturb(const Model& model, const Tensor& x, const std::vector<int>& y, const AttackSpec& spec,
                     const Rng& rng, std::size_t first_id) {
  spec.validate();
  if (x.rows() != y.size()) throw ShapeError("perturb: label count does not match batch");
  bool l2 = spec.norm == "l2";
  try {
    return finish(model, x, run_family(model, x, y, spec, rng, first_id), y, l2);
  } catch (const NonFiniteError&) {
    // Retry sample by sample so that only the offending ones are flagged.
    AttackResult out;
    std::vector<Tensor> rows;
    for (std::size_t i = 0; i < x.rows(); ++i) {
      Tensor xi = x.slice_rows(i, i + 1);
      std::vector<int> yi{y[i]};
      try {
        AttackResult r = finish(model, xi, run_family(model, xi, yi, spec, rng, first_id + i), yi, l2);
        rows.push_back(r.x_adv.reshape(Shape(x.shape().begin() + 1, x.shape().end())));
        out.final_loss.push_back(r.final_loss[0]);
        out.norm.push_back(r.norm[0]);
        out.success.push_back(r.success[0]);
        out.flagged.push_back(false);
      } catch (const NonFiniteError&) {
        rows.push_back(xi.reshape(Shape(x.shape().begin() + 1, x.shape().end())));
        out.final_loss.push_back(NAN);
        out.norm.push_back(0.0);
        out.success.push_back(false);
        out.flagged.push_back(true);
      }
    }
    out.x_adv = stack_rows(rows);
    return out;
  }
}

RobustEval evaluate_attack(const Model& model, const Dataset& data, const AttackSpec& spec, const Rng& rng,
                           std::size_t batch) {
  spec.validate();
  if (data.size() == 0) throw Error("evaluate_attack: empty dataset");
  std::size_t n = data.size(), chunks = (n + batch - 1) / batch;
  std::vector<AttackResult> parts(chunks);
  parallel_for(chunks, [&](std::size_t c) {
    std::size_t b = c * batch, e = std::min(n, b + batch);
    std::vector<int> y(data.labels.begin() + static_cast<long>(b), data.labels.begin() + static_cast<long>(e));
    parts[c] = perturb(model, data.inputs.slice_rows(b, e), y, spec, rng, b);
  });
  RobustEval r;
  r.family = spec.label();
  r.eps = spec.eps;
  auto clean = predict(model, data.inputs);
  std::vector<Tensor> rows;
  std::size_t clean_ok = 0, robust_ok = 0;
  for (std::size_t c = 0; c < chunks; ++c) {
    const AttackResult& p = parts[c];
    for (std::size_t k = 0; k < p.success.size(); ++k) {
      std::size_t i = c * batch + k;
      bool ok = clean[i] == data.labels[i];
      clean_ok += ok;
      bool still = ok && !p.success[k] && !p.flagged[k];
      robust_ok += still;
      r.sample_id.push_back(i);
      r.correct.push_back(still);
      r.flagged += p.flagged[k];
      if (p.norm[k] > spec.eps + kBallSlack) ++r.ball_violations;
      r.detail.final_loss.push_back(p.final_loss[k]);
      r.detail.norm.push_back(p.norm[k]);
      r.detail.success.push_back(p.success[k]);
      r.detail.flagged.push_back(p.flagged[k]);
    }
    for (double v : p.x_adv.data())
      if (!(v >= 0.0 && v <= 1.0)) ++r.range_violations;
  }
  r.detail.x_adv = chunks == 1 ? parts[0].x_adv : [&] {
    Buffer all;
    for (const auto& p : parts) all.insert(all.end(), p.x_adv.data().begin(), p.x_adv.data().end());
    return Tensor(data.inputs.shape(), std::move(all));
  }();
  r.clean_accuracy = static_cast<double>(clean_ok) / static_cast<double>(n);
  r.robust_accuracy = static_cast<double>(robust_ok) / static_cast<double>(n);
  return r;
}

double robust_accuracy(const Model& model, const Dataset& data, const AttackSpec& spec, const Rng& rng) {
  return evaluate_attack(model, data, spec, rng).robust_accuracy;
}

void write_attack_csv(std::ostream& out, const RobustEval& r, bool header) {
  if (header) out << "sample_id,family,success,final_loss,perturbation_norm\n";
  char buf[200];
  for (std::size_t k = 0; k < r.sample_id.size(); ++k) {
    std::snprintf(buf, sizeof buf, "%zu,%s,%d,%.17g,%.17g\n", r.sample_id[k], r.family.c_str(),
                  r.detail.success[k] ? 1 : 0, r.detail.final_loss[k], r.detail.norm[k]);
    out << buf;
  }
}

}  // namespace guard
