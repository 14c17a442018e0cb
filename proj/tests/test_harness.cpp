#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "guard/errors.hpp"
#include "guard/harness.hpp"
#include "guard/train.hpp"

using namespace guard;
using namespace guard::harness;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("guard_harness_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::size_t lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

// Small enough for the full pipeline to run in seconds.
json tiny_config() {
  return json::parse(R"({
    "dataset": {"n_train": 100, "n_test": 40},
    "distill": {"ipc": 1, "recover_iters": 5, "squeeze": {"epochs": 1}},
    "student": {"epochs": 2},
    "attacks": [{"family": "none"}, {"family": "pgd", "eps": 0.05, "steps": 3}],
    "profile": {"samples": 5, "iters": 10}
  })");
}

void write_be32(std::ofstream& o, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) o.put(static_cast<char>((v >> s) & 0xff));
}

}  // namespace

TEST_CASE("config resolution and key paths") {
  json cfg = resolve_config(json::object());
  CHECK(cfg == default_config());
  CHECK(cfg["distill"]["reg"]["lambda"] == 10.0);

  auto message = [](const json& user) {
    try {
      resolve_config(user);
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  CHECK(message({{"bogus", 1}}).find("unknown config key: bogus") != std::string::npos);
  CHECK(message({{"distill", {{"reg", {{"lamda", 1}}}}}}).find("distill.reg.lamda") != std::string::npos);
  CHECK(message({{"attacks", {{{"family", "pgd"}, {"epz", 1}}}}}).find("attacks.0.epz") != std::string::npos);
  CHECK(message({{"seed", -1}}).find("seed: expected a non-negative integer") != std::string::npos);
  CHECK(message({{"distill", {{"ipc", 2.5}}}}).find("distill.ipc") != std::string::npos);

  // Attack entries are completed from the attack defaults.
  json a = resolve_config({{"attacks", {{{"family", "fgsm"}}}}});
  CHECK(a["attacks"].size() == 1);
  CHECK(a["attacks"][0]["norm"] == "linf");
  // Integers are accepted where reals are expected and stored as reals.
  CHECK(resolve_config({{"distill", {{"lr_syn", 1}}}})["distill"]["lr_syn"].is_number_float());
}

TEST_CASE("overrides") {
  json cfg = resolve_config(json::object());
  apply_override(cfg, "distill.reg.lambda=0.25");
  CHECK(cfg["distill"]["reg"]["lambda"] == 0.25);
  apply_override(cfg, "distill.method=dc-plain");
  CHECK(cfg["distill"]["method"] == "dc-plain");
  apply_override(cfg, "attacks.1.eps=0.1");
  CHECK(cfg["attacks"][1]["eps"] == 0.1);
  apply_override(cfg, R"(attacks=[{"family":"none"}])");
  CHECK(cfg["attacks"].size() == 1);
  CHECK_THROWS_WITH_AS(apply_override(cfg, "distill.nope=1"), doctest::Contains("distill.nope"), ConfigError);
  CHECK_THROWS_WITH_AS(apply_override(cfg, "attacks.9.eps=1"), doctest::Contains("attacks.9"), ConfigError);
  CHECK_THROWS_AS(apply_override(cfg, "distill.ipc"), ConfigError);
  CHECK_THROWS_WITH_AS(apply_override(cfg, "distill.ipc=ten"), doctest::Contains("distill.ipc"), ConfigError);
}

TEST_CASE("config hash") {
  json a = resolve_config(json::object());
  json b = a;
  b["out"] = "elsewhere";
  CHECK(config_hash(a) == config_hash(b));
  b["seed"] = 1u;
  CHECK(config_hash(a) != config_hash(b));
  CHECK(config_hash(a).size() == 16);
}

TEST_CASE("csv quoting") {
  CHECK(csv_field("plain") == "plain");
  CHECK(csv_field("a,b") == "\"a,b\"");
  CHECK(csv_field("say \"hi\"") == "\"say \"\"hi\"\"\"");
  CHECK(csv_field("two\nlines") == "\"two\nlines\"");
}

TEST_CASE("datasets") {
  Rng r1(7), r2(7);
  json p = {{"n_train", 1000}, {"n_test", 100}, {"noise", 0.1}};
  DatasetPair a = load_dataset("two-moons", p, r1), b = load_dataset("two-moons", p, r2);
  CHECK(a.train.inputs.bit_equal(b.train.inputs));
  CHECK(a.train.labels == b.train.labels);
  CHECK(dataset_hash(a) == dataset_hash(b));
  for (double v : a.train.inputs.data()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  Rng r3(8);
  CHECK(dataset_hash(load_dataset("two-moons", p, r3)) != dataset_hash(a));

  // Noise-free Gaussian mixture: a linear model separates the training set.
  Rng rg(3);
  DatasetPair g = load_dataset("gauss-mix", {{"n_train", 150}, {"n_test", 30}, {"classes", 3}, {"dim", 2}, {"noise", 0.0}}, rg);
  ModelSpec lin;
  lin.layers = {2, 3};
  lin.input_shape = {2};
  lin.classes = 3;
  Rng ri(0);
  Model m = init(lin, ri);
  TrainConfig tc;
  tc.epochs = 200;
  tc.lr = 0.1;
  train(m, g.train, tc, Rng(1));
  CHECK(accuracy(m, g.train) == 1.0);

  Rng rt(1);
  CHECK_THROWS_WITH_AS(load_dataset("mnist", json::object(), rt), doctest::Contains("dataset.name"), ConfigError);
  CHECK_THROWS_WITH_AS(load_dataset("two-moons", {{"n_tests", 1}}, rt), doctest::Contains("dataset.n_tests"),
                       ConfigError);
  CHECK_THROWS_WITH_AS(load_dataset("csv-file", json::object(), rt), doctest::Contains("dataset.path"), ConfigError);
}

TEST_CASE("file datasets") {
  fs::path dir = scratch("files");
  {
    std::ofstream img(dir / "img.idx", std::ios::binary), lab(dir / "lab.idx", std::ios::binary);
    write_be32(img, 0x803);
    write_be32(img, 20);
    write_be32(img, 4);
    write_be32(img, 4);
    for (int i = 0; i < 20 * 16; ++i) img.put(static_cast<char>(i % 256));
    write_be32(lab, 0x801);
    write_be32(lab, 20);
    for (int i = 0; i < 20; ++i) lab.put(static_cast<char>(i % 2));
  }
  Rng r(1);
  json p = {{"images", (dir / "img.idx").string()}, {"labels", (dir / "lab.idx").string()}, {"classes", 2},
            {"test_fraction", 0.25}};
  DatasetPair d = load_dataset("idx-file", p, r);
  CHECK(d.train.size() + d.test.size() == 20);
  CHECK(d.train.sample_shape() == Shape{1, 4, 4});

  {
    std::ofstream bad(dir / "bad.idx", std::ios::binary);
    write_be32(bad, 0x804);
    write_be32(bad, 1);
  }
  p["images"] = (dir / "bad.idx").string();
  try {
    load_dataset("idx-file", p, r);
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.offset() == 0);
    CHECK(std::string(e.what()).find("offset 0") != std::string::npos);
  }

  {
    std::ofstream csv(dir / "d.csv");
    for (int i = 0; i < 30; ++i) csv << (i % 10) / 10.0 << "," << 0.5 << "," << i % 3 << "\n";
  }
  DatasetPair c = load_dataset("csv-file", {{"path", (dir / "d.csv").string()}, {"classes", 3}}, r);
  CHECK(c.train.classes == 3);
  CHECK(c.train.sample_shape() == Shape{2});
  CHECK_THROWS_AS(load_dataset("csv-file", {{"path", (dir / "d.csv").string()}, {"classes", 2}}, r), ParseError);

  // Model class count that disagrees with the data.
  json cfg = resolve_config({{"model", {{"arch", "mlp"}, {"classes", 5}}}});
  CHECK_THROWS_WITH_AS(model_spec(cfg, c), doctest::Contains("class-count mismatch"), ConfigError);
  ModelSpec ok = model_spec(resolve_config({{"model", {{"arch", "mlp"}}}}), c);
  CHECK(ok.layers == std::vector<std::size_t>{2, 64, 3});
}

TEST_CASE("artifact staging") {
  fs::path dir = scratch("stage");
  {
    ArtifactSet a(dir);
    a.write_text("x.csv", "a\n");
    CHECK(fs::exists(dir / "x.csv.partial"));
  }
  CHECK_FALSE(fs::exists(dir / "x.csv.partial"));
  CHECK_FALSE(fs::exists(dir / "x.csv"));
  {
    ArtifactSet a(dir);
    a.write_text("x.csv", "a\n");
    a.commit();
  }
  CHECK(slurp(dir / "x.csv") == "a\n");
}

TEST_CASE("pipeline subcommands") {
  fs::path dir = scratch("pipeline");
  json cfg = tiny_config();
  std::ostringstream err;
  for (const char* sub : {"squeeze", "recover", "relabel", "eval"}) CHECK(run_main(sub, cfg, {}, dir, err) == 0);
  CHECK(err.str().empty());

  // [none, pgd] gives a header and two rows.
  std::string eval = slurp(dir / "eval.csv");
  CHECK(lines(eval) == 3);
  json ej = json::parse(slurp(dir / "eval.json"));
  CHECK(ej["config_hash"] == config_hash(resolve_config(cfg)));
  CHECK(eval.find(ej["config_hash"].get<std::string>()) != std::string::npos);
  CHECK(fs::exists(dir / "eval.timing.json"));
  CHECK(fs::exists(dir / "eval.config.json"));
  for (const auto& e : fs::directory_iterator(dir)) CHECK(e.path().extension() != ".partial");

  // Same config, same bytes.
  std::string first = slurp(dir / "eval.json");
  CHECK(run_main("eval", cfg, {}, dir, err) == 0);
  CHECK(slurp(dir / "eval.json") == first);
  CHECK(slurp(dir / "eval.csv") == eval);

  // Unknown key: exit 2 naming the key, nothing written.
  std::ostringstream e2;
  fs::path other = scratch("badkey");
  CHECK(run_main("eval", cfg, {"student.epoch=3"}, other, e2) == 2);
  CHECK(e2.str().find("student.epoch") != std::string::npos);
  CHECK(fs::is_empty(other));

  // Failure mid-run removes staged files.
  std::ostringstream e3;
  CHECK(run_main("recover", cfg, {"inputs.teacher=" + (other / "missing.gmdl").string()}, other, e3) == 1);
  CHECK(fs::is_empty(other));

  CHECK(run_main("frobnicate", cfg, {}, other, e3) == 2);
}

TEST_CASE("train, attack, profile and theory subcommands") {
  fs::path dir = scratch("model");
  json cfg = tiny_config();
  cfg["train"] = {{"epochs", 1}};
  std::ostringstream err;
  CHECK(run_main("train", cfg, {}, dir, err) == 0);
  CHECK(run_main("attack", cfg, {}, dir, err) == 0);
  CHECK(run_main("profile", cfg, {}, dir, err) == 0);
  CHECK(run_main("verify-theory", cfg, {"theory.instances=50", "theory.trials=50"}, dir, err) == 0);
  INFO(err.str());
  CHECK(lines(slurp(dir / "attack.csv")) == 3);
  CHECK(fs::exists(dir / "attack_1_pgd.csv"));
  CHECK(lines(slurp(dir / "profile.csv")) == 6);
  json th = json::parse(slurp(dir / "theory.json"));
  CHECK(th["per_sample"]["violations"] == 0);
  CHECK(th["jensen"]["violations"] == 0);
  CHECK(th["logistic_slack"]["slack_violations"] == 0);
  json at = json::parse(slurp(dir / "attack.json"));
  for (const auto& row : at["rows"]) {
    CHECK(row["ball_violations"] == 0);
    CHECK(row["range_violations"] == 0);
  }
}

TEST_CASE("report aggregation") {
  fs::path a = scratch("rep_a"), b = scratch("rep_b"), c = scratch("rep_c"), out = scratch("rep_out");
  json cfg = tiny_config();
  std::ostringstream err;
  for (const char* sub : {"squeeze", "recover", "relabel", "eval"}) {
    REQUIRE(run_main(sub, cfg, {}, a, err) == 0);
    REQUIRE(run_main(sub, cfg, {"distill.method=srl-plain"}, b, err) == 0);
    REQUIRE(run_main(sub, cfg, {"dataset.seed=5"}, c, err) == 0);
  }
  json rep = cfg;
  rep["report"] = {{"runs", {a.string(), b.string()}}};
  REQUIRE(run_main("report", rep, {}, out, err) == 0);
  std::string t2 = slurp(out / "table2.csv");
  CHECK(t2.rfind("attack,squeeze-recover-relabel,srl-plain,config_hash\n", 0) == 0);
  CHECK(lines(t2) == 3);
  CHECK(lines(slurp(out / "table3.csv")) == 3);

  rep["report"] = {{"runs", {a.string(), c.string()}}};
  std::ostringstream e2;
  fs::path out2 = scratch("rep_out2");
  CHECK(run_main("report", rep, {}, out2, e2) == 1);
  CHECK(e2.str().find("dataset hash") != std::string::npos);
  CHECK(fs::is_empty(out2));
}

TEST_CASE("overhead benchmark") {
  Rng r(1);
  DatasetPair d = load_dataset("tiny-digits", {{"n_train", 64}, {"n_test", 10}}, r);
  ModelSpec spec = model_spec(resolve_config(json::object()), d);
  BenchReport rep = bench_overhead(d.train, spec, TrainConfig{}, 16, 1, 5, 0, 1e-3, Rng(2));
  CHECK(rep.rows.size() == 3);
  CHECK_FALSE(rep.adv_check_enabled);
  for (const auto& row : rep.rows) {
    CHECK(row.iterations == 5);
    CHECK(row.mean_seconds > 0);
    CHECK(row.std_seconds >= 0);
    CHECK(row.mean_seconds * static_cast<double>(row.repeats) >= 0.5e-3);
  }
  CHECK(rep.to_json()["rows"].size() == 3);
  CHECK_THROWS_AS(bench_overhead(d.train, spec, TrainConfig{}, 16, 1, 4, 0, 1e-3, Rng(2)), ConfigError);
}
