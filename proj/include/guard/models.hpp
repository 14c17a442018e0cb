#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "guard/autodiff.hpp"
#include "guard/data.hpp"
#include "guard/rng.hpp"
#include "json.hpp"

namespace guard {

struct ModelSpec {
  std::string arch = "mlp";          // mlp | convnet-s
  std::vector<std::size_t> layers;   // mlp: full widths, input first, classes last
  std::vector<std::size_t> channels{16, 32};  // convnet-s conv widths
  std::string activation = "relu";   // relu | softplus
  double softplus_beta = 10.0;
  bool batchnorm = false;
  std::string pool = "avg";          // avg | max
  Shape input_shape;                 // per-sample shape
  std::size_t classes = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static ModelSpec from_json(const nlohmann::json& j);
};

enum class Mode { Train, Eval };

struct Model {
  ModelSpec spec;
  std::vector<std::string> names;
  std::vector<Tensor> params;
  // Running batch-norm statistics, one (mean, var) pair per BN layer.
  std::vector<Tensor> bn_mean;
  std::vector<Tensor> bn_var;

  std::size_t num_params() const;
  std::size_t bn_layers() const { return bn_mean.size(); }
};

Model init(const ModelSpec& spec, Rng& rng);
// Parameter count from the spec alone.
std::size_t param_count(const ModelSpec& spec);

struct Forward {
  ad::Var logits;    // (N, C)
  ad::Var features;  // (N, F) penultimate activations
  // Batch statistics per BN layer (train mode, or eval with batch_stats).
  std::vector<ad::Var> batch_mean;
  std::vector<ad::Var> batch_var;
  std::vector<std::size_t> batch_count;  // elements per channel
};

// Functional forward pass. `params` lines up with model.params; train mode
// normalizes with batch statistics, eval mode with the running ones. With
// `batch_stats` eval mode also records the batch statistics of each BN input.
Forward forward(const Model& model, std::span<const ad::Var> params, const ad::Var& x, Mode mode,
                bool batch_stats = false);
// Parameters as untracked constants.
std::vector<ad::Var> constants(const Model& model);
// Parameters registered as leaves of the active tape.
std::vector<ad::Var> bind(const Model& model, ad::Tape& tape);

// Exponential running-average update (momentum 0.1, unbiased variance).
void update_running_stats(Model& model, const Forward& f);

// Sum over the batch of per-sample losses; soft targets use -sum p log softmax.
ad::Var loss_sum(const ad::Var& logits, const Targets& t);
// Mean over the batch.
ad::Var loss_mean(const ad::Var& logits, const Targets& t);

// Eager helpers.
Tensor predict_logits(const Model& model, const Tensor& x);
std::vector<int> predict(const Model& model, const Tensor& x);
double accuracy(const Model& model, const Dataset& d);
double loss_value(const Model& model, const Tensor& x, const Targets& t, Mode mode = Mode::Eval);

// GMDL container: magic, u32 version, u32 header length, JSON header, u32
// tensor count, then GTEN blocks (params, BN means, BN vars).
void write_model(std::ostream& out, const Model& m, const nlohmann::json& extra = {});
Model read_model(std::istream& in, nlohmann::json* header = nullptr);
void save_model(const std::string& path, const Model& m, const nlohmann::json& extra = {});
Model load_model(const std::string& path, nlohmann::json* header = nullptr);

}  // namespace guard
