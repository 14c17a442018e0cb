#include <algorithm>
#include <cmath>
#include <sstream>

#include "doctest.h"
#include "guard/attacks.hpp"
#include "guard/errors.hpp"
#include "guard/ops.hpp"
#include "guard/train.hpp"

using namespace guard;

namespace {

const char* kFamilies[] = {"none", "fgsm", "pgd", "mim", "cw-l2", "square", "auto-lite"};

ModelSpec spec(std::vector<std::size_t> layers, std::string act = "softplus") {
  ModelSpec s;
  s.layers = layers;
  s.activation = act;
  s.classes = layers.back();
  return s;
}

struct Toy {
  Model model;
  DatasetPair data;
};

Toy trained_moons() {
  Rng drng(7);
  Toy t{Model{}, make_two_moons(200, 120, 0.08, drng)};
  Rng r(1);
  t.model = init(spec({2, 16, 2}), r);
  TrainConfig cfg;
  cfg.epochs = 60;
  cfg.lr = 0.1;
  cfg.batch_size = 20;
  train(t.model, t.data.train, cfg, Rng(2));
  return t;
}

double ce(const Model& m, const Tensor& x, int y) {
  return loss_value(m, x, Targets{{y}, std::nullopt});
}

}  // namespace

TEST_CASE("eps = 0 returns the input for every family") {
  Rng r(0);
  Model m = init(spec({2, 4, 3}), r);
  Tensor x = r.uniform_tensor({5, 2}, 0, 1);
  std::vector<int> y{0, 1, 2, 0, 1};
  for (const char* fam : kFamilies) {
    AttackSpec s;
    s.family = fam;
    s.eps = 0.0;
    CHECK(perturb(m, x, y, s, Rng(3)).x_adv.bit_equal(x));
  }
  AttackSpec bad;
  bad.family = "fab";
  CHECK_THROWS_AS(perturb(m, x, y, bad, Rng(3)), ConfigError);
}

TEST_CASE("fgsm on a linear model is the exact linf maximizer") {
  Rng r(0);
  Model m = init(spec({2, 2}), r);
  m.params[0] = Tensor::from({2, 2}, {1.0, -0.5, 0.2, 0.7});  // columns are class weights
  Tensor x = Tensor::from({1, 2}, {0.5, 0.5});
  AttackSpec s;
  s.family = "fgsm";
  s.eps = 0.05;
  Tensor adv = perturb(m, x, {0}, s, Rng(1)).x_adv;
  // Loss grows along w1 - w0 = (-1.5, 0.5).
  CHECK(adv[0] == doctest::Approx(0.45).epsilon(1e-15));
  CHECK(adv[1] == doctest::Approx(0.55).epsilon(1e-15));
  double best = -1e300;
  for (double a : {-1.0, 1.0})
    for (double b : {-1.0, 1.0}) best = std::max(best, ce(m, Tensor::from({1, 2}, {0.5 + a * 0.05, 0.5 + b * 0.05}), 0));
  CHECK(ce(m, adv, 0) == doctest::Approx(best).epsilon(1e-14));
}

TEST_CASE("pgd reaches the grid-search maximum on a 2-d ball") {
  Rng r(3);
  Model m = init(spec({2, 6, 2}), r);
  Tensor x = Tensor::from({1, 2}, {0.4, 0.6});
  AttackSpec s;
  s.family = "pgd";
  s.eps = 0.1;
  s.steps = 50;
  Tensor adv = perturb(m, x, {1}, s, Rng(5)).x_adv;
  double got = ce(m, adv, 1);
  double grid = -1e300;
  for (int i = 0; i <= 100; ++i)
    for (int j = 0; j <= 100; ++j) {
      double a = 0.4 - 0.1 + 0.2 * i / 100.0, b = 0.6 - 0.1 + 0.2 * j / 100.0;
      grid = std::max(grid, ce(m, Tensor::from({1, 2}, {a, b}), 1));
    }
  CHECK(got >= 0.99 * grid);
}

TEST_CASE("attack invariants on a trained toy model") {
  Toy t = trained_moons();
  const Dataset& test = t.data.test;
  double clean = accuracy(t.model, test);
  CHECK(clean > 0.8);
  Rng base(42);
  for (std::string norm : {"linf", "l2"}) {
    for (const char* fam : kFamilies) {
      AttackSpec s;
      s.family = fam;
      s.norm = norm;
      s.eps = norm == "l2" ? 0.1 : 0.05;
      s.queries = 100;
      RobustEval e = evaluate_attack(t.model, test, s, base, 50);
      CHECK(e.ball_violations == 0);
      CHECK(e.range_violations == 0);
      CHECK(e.flagged == 0);
      CHECK(e.robust_accuracy <= e.clean_accuracy);
      if (std::string(fam) == "none") CHECK(e.robust_accuracy == clean);
      // Batching changes results only through GEMM round-off.
      RobustEval e2 = evaluate_attack(t.model, test, s, base, 17);
      CHECK(max_abs(sub(e2.detail.x_adv, e.detail.x_adv)) < 1e-12);
    }
  }
  AttackSpec pgd{.family = "pgd", .eps = 0.05};
  AttackSpec fgsm{.family = "fgsm", .eps = 0.05};
  CHECK(robust_accuracy(t.model, test, pgd, base) <= robust_accuracy(t.model, test, fgsm, base));

  double prev = 2.0;
  for (double eps : {0.0, 2.0 / 255, 4.0 / 255, 8.0 / 255}) {
    AttackSpec s{.family = "pgd", .eps = eps};
    double a = robust_accuracy(t.model, test, s, base);
    CHECK(a <= prev);
    prev = a;
  }

  AttackSpec al{.family = "auto-lite", .eps = 0.05};
  double worst = robust_accuracy(t.model, test, al, base);
  for (const char* fam : {"pgd", "mim", "square"}) {
    AttackSpec s = al;
    s.family = fam;
    CHECK(worst <= robust_accuracy(t.model, test, s, base));
  }

  RobustEval e = evaluate_attack(t.model, test, pgd, base);
  std::ostringstream csv;
  write_attack_csv(csv, e);
  std::string text = csv.str();
  CHECK(text.rfind("sample_id,family,success,final_loss,perturbation_norm\n", 0) == 0);
  CHECK(std::count(text.begin(), text.end(), '\n') == 121);
  // Same seed, same output.
  CHECK(evaluate_attack(t.model, test, pgd, base).detail.x_adv.bit_equal(e.detail.x_adv));
}
