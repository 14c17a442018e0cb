#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "guard/errors.hpp"
#include "guard/harness.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Robust dataset distillation with curvature regularization"};
  app.require_subcommand(1, 1);
  std::string config_path, out;
  std::vector<std::string> overrides;
  const std::map<std::string, std::string> about{
      {"squeeze", "Train the teacher (loss follows distill.method)"},
      {"recover", "Optimize synthetic inputs against the teacher"},
      {"relabel", "Attach teacher soft labels to the recovered set"},
      {"distill-dc", "Gradient-matching distillation (dc-guard | dc-plain)"},
      {"train", "Train a model on the real training split"},
      {"attack", "Run the attack list against a trained model"},
      {"eval", "Train a student on the synthetic set; clean and robust accuracy"},
      {"profile", "Top Hessian eigenvalues on test samples"},
      {"verify-theory", "Bound, Jensen and slack checks"},
      {"bench-overhead", "Per-step time of plain, GUARD and adversarial training"},
      {"report", "Aggregate eval runs into table CSVs"}};
  for (const auto& name : guard::harness::subcommands()) {
    auto it = about.find(name);
    CLI::App* sub = app.add_subcommand(name, it == about.end() ? "" : it->second);
    sub->add_option("--config", config_path, "JSON config file; defaults apply to missing keys");
    sub->add_option("--set", overrides, "Override as dotted.key=value (value parsed as JSON, else string)")
        ->take_all();
    sub->add_option("--out", out, "Output directory (overrides the config's \"out\")");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }
  const std::string name = app.get_subcommands().front()->get_name();
  nlohmann::json user = nlohmann::json::object();
  if (!config_path.empty()) {
    try {
      user = guard::harness::load_config(config_path);
    } catch (const guard::ConfigError& e) {
      std::cerr << "config error: " << e.what() << "\n";
      return 2;
    }
  }
  return guard::harness::run_main(name, user, overrides, out, std::cerr);
}
