#pragma once

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "guard/attacks.hpp"
#include "guard/data.hpp"
#include "guard/models.hpp"
#include "guard/rng.hpp"
#include "guard/train.hpp"
#include "json.hpp"

namespace guard::harness {

// Every recognised key with its default value.
nlohmann::json default_config();
// Merges `user` over the defaults. Unknown keys and mistyped values raise
// ConfigError naming the full key path (e.g. "distill.reg.lambda").
nlohmann::json resolve_config(const nlohmann::json& user);
// "a.b.c=value" on a resolved config. The value is parsed as JSON and taken
// as a plain string when that fails; the result is re-validated.
void apply_override(nlohmann::json& config, const std::string& assignment);
nlohmann::json load_config(const std::string& path);
// FNV-1a of the canonical dump, without the output directory.
std::string config_hash(const nlohmann::json& config);
std::string dataset_hash(const DatasetPair& d);

// name: two-moons | gauss-mix | tiny-digits | idx-file | csv-file.
DatasetPair load_dataset(const std::string& name, const nlohmann::json& params, Rng& rng);
// From the "dataset" section, seeded by its own "seed" key.
DatasetPair load_dataset(const nlohmann::json& config);
// The "model" section completed with the data's input shape and class count.
ModelSpec model_spec(const nlohmann::json& config, const DatasetPair& d);

std::vector<AttackSpec> attack_list(const nlohmann::json& config);

// CSV field with RFC-4180 quoting when needed.
std::string csv_field(const std::string& s);

// Stages files as <name>.partial and renames them on commit(). Anything not
// committed is removed when the set goes out of scope.
class ArtifactSet {
 public:
  explicit ArtifactSet(std::filesystem::path dir);
  ~ArtifactSet();
  ArtifactSet(const ArtifactSet&) = delete;
  ArtifactSet& operator=(const ArtifactSet&) = delete;

  void write(const std::string& name, const std::function<void(std::ostream&)>& body);
  void write_text(const std::string& name, const std::string& text);
  void write_json(const std::string& name, const nlohmann::json& j);
  void commit();
  const std::filesystem::path& dir() const { return dir_; }
  // Final paths, in write order.
  std::vector<std::string> paths() const;

 private:
  std::filesystem::path dir_;
  std::vector<std::filesystem::path> staged_;
  bool committed_ = false;
};

struct BenchRow {
  std::string method;  // plain | guard | adversarial
  double mean_seconds = 0.0;
  double std_seconds = 0.0;
  std::size_t iterations = 0;
  std::size_t repeats = 1;  // steps per timed iteration
  std::size_t peak_bytes = 0;
};

struct BenchReport {
  std::vector<BenchRow> rows;
  double guard_to_plain = 0.0;
  double guard_to_adv = 0.0;
  std::size_t adv_steps = 0;
  bool adv_check_enabled = false;  // adv steps >= 5
  bool guard_below_adv = true;
  bool ratio_below_5 = true;

  const BenchRow& row(const std::string& method) const;
  nlohmann::json to_json() const;
};

// Per-iteration time of one optimizer step for plain, GUARD and adversarial
// training on the same model, data and batch. Steps shorter than
// `min_seconds` are repeated until a timed iteration reaches it.
BenchReport bench_overhead(const Dataset& data, const ModelSpec& spec, const TrainConfig& base,
                           std::size_t batch, std::size_t warmup, std::size_t iters, std::size_t adv_steps,
                           double min_seconds, const Rng& rng);

struct RunResult {
  std::vector<std::string> artifacts;
  nlohmann::json summary;
};

const std::vector<std::string>& subcommands();
// Resolves config + overrides, runs the subcommand and writes its artifacts
// (and config.json) into the output directory. `out` overrides config "out"
// when non-empty. Throws on failure after removing partial outputs.
RunResult run(const std::string& subcommand, const nlohmann::json& user_config,
              const std::vector<std::string>& overrides, const std::string& out = "");
// Same, reporting errors on `err`: 0 on success, 2 for configuration errors,
// 1 otherwise.
int run_main(const std::string& subcommand, const nlohmann::json& user_config,
             const std::vector<std::string>& overrides, const std::string& out, std::ostream& err);

}  // namespace guard::harness
