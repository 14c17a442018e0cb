#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "guard/data.hpp"
#include "guard/models.hpp"
#include "guard/rng.hpp"
#include "json.hpp"

namespace guard {

struct AttackSpec {
  std::string family = "pgd";  // none | fgsm | pgd | mim | cw-l2 | square | auto-lite
  std::string norm = "linf";   // linf | l2
  double eps = 8.0 / 255.0;
  std::size_t steps = 20;
  double alpha = 0.0;          // 0 selects the family default
  std::size_t restarts = 1;
  double momentum = 1.0;       // mim
  double c = 1e-5;             // cw-l2 loss weight
  std::size_t cw_iters = 100;
  double cw_lr = 0.01;
  std::size_t queries = 300;   // square
  double square_p = 0.1;       // initial fraction of pixels changed per square query
  std::uint64_t stream = 0;

  void validate() const;
  double step_size() const;
  std::string label() const;  // e.g. "pgd" or "pgd-l2"
  nlohmann::json to_json() const;
  static AttackSpec from_json(const nlohmann::json& j);
};

struct AttackResult {
  Tensor x_adv;
  std::vector<double> final_loss;   // cross-entropy at x_adv
  std::vector<double> norm;         // ||x_adv - x|| in the attack norm
  std::vector<bool> success;        // misclassified at x_adv
  std::vector<bool> flagged;        // aborted on non-finite logits
};

// `first_id` is the dataset index of row 0; each sample draws from its own
// stream so results do not depend on batching.
AttackResult perturb(const Model& model, const Tensor& x, const std::vector<int>& y, const AttackSpec& spec,
                     const Rng& rng, std::size_t first_id = 0);

struct RobustEval {
  std::string family;
  double eps = 0.0;
  double clean_accuracy = 0.0;
  double robust_accuracy = 0.0;  // clean-correct and still correct after the attack
  std::size_t ball_violations = 0;
  std::size_t range_violations = 0;
  std::size_t flagged = 0;
  std::vector<std::size_t> sample_id;
  std::vector<bool> correct;
  AttackResult detail;
};

RobustEval evaluate_attack(const Model& model, const Dataset& data, const AttackSpec& spec, const Rng& rng,
                           std::size_t batch = 256);
double robust_accuracy(const Model& model, const Dataset& data, const AttackSpec& spec, const Rng& rng);

// sample_id,family,success,final_loss,perturbation_norm
void write_attack_csv(std::ostream& out, const RobustEval& r, bool header = true);

}  // namespace guard
