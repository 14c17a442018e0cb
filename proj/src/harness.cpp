#include "guard/harness.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>

#include "guard/curvature.hpp"
#include "guard/distill.hpp"
#include "guard/errors.hpp"
#include "guard/hash.hpp"
#include "guard/ops.hpp"
#include "guard/theory.hpp"

namespace guard::harness {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string join(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

// Templates for array elements, by key path.
const json* element_template(const std::string& path) {
  static const json attack = AttackSpec{}.to_json();
  static const json count = std::size_t{0};
  static const json text = std::string();
  if (path == "attacks") return &attack;
  if (path == "model.layers" || path == "model.channels" || path == "model.input_shape") return &count;
  if (path == "report.runs") return &text;
  return nullptr;
}

std::string type_name(const json& t) {
  if (t.is_object()) return "an object";
  if (t.is_array()) return "an array";
  if (t.is_string()) return "a string";
  if (t.is_boolean()) return "a boolean";
  if (t.is_number_unsigned()) return "a non-negative integer";
  if (t.is_number_integer()) return "an integer";
  return "a number";
}

json merge(const json& tmpl, const json& user, const std::string& path) {
  const std::string where = path.empty() ? "config" : path;
  if (tmpl.is_object()) {
    if (!user.is_object()) throw ConfigError(where + ": expected an object");
    json out = tmpl;
    for (const auto& [k, v] : user.items()) {
      std::string p = join(path, k);
      if (!tmpl.contains(k)) throw ConfigError("unknown config key: " + p);
      out[k] = merge(tmpl.at(k), v, p);
    }
    return out;
  }
  if (tmpl.is_array()) {
    if (!user.is_array()) throw ConfigError(where + ": expected an array");
    const json* elem = element_template(path);
    if (!elem) throw ConfigError(where + ": array has no element template");
    json out = json::array();
    for (std::size_t i = 0; i < user.size(); ++i) out.push_back(merge(*elem, user[i], join(path, std::to_string(i))));
    return out;
  }
  bool ok = false;
  if (tmpl.is_string()) ok = user.is_string();
  else if (tmpl.is_boolean()) ok = user.is_boolean();
  else if (tmpl.is_number_unsigned()) ok = user.is_number_integer() && user.get<std::int64_t>() >= 0;
  else if (tmpl.is_number_integer()) ok = user.is_number_integer();
  else if (tmpl.is_number_float()) ok = user.is_number();
  if (!ok) throw ConfigError(where + ": expected " + type_name(tmpl) + ", got " + user.dump());
  if (tmpl.is_number_float()) return json(user.get<double>());
  if (tmpl.is_number_unsigned()) return json(user.get<std::uint64_t>());
  return user;
}

std::size_t count_of(const json& j, const char* key) { return j.at(key).get<std::size_t>(); }
double real_of(const json& j, const char* key) { return j.at(key).get<double>(); }
std::string text_of(const json& j, const char* key) { return j.at(key).get<std::string>(); }

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

std::string timestamp() {
  std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Appends a constant column to every line of a CSV document.
std::string with_column(const std::string& csv, const std::string& name, const std::string& value) {
  std::istringstream in(csv);
  std::string line, out;
  bool first = true;
  while (std::getline(in, line)) {
    out += line + "," + (first ? name : csv_field(value)) + "\n";
    first = false;
  }
  return out;
}

void check_semantics(const json& cfg) {
  DistillConfig::from_json(cfg.at("distill")).validate();
  TrainConfig::from_json(cfg.at("train")).validate();
  TrainConfig::from_json(cfg.at("student")).validate();
  for (const auto& a : attack_list(cfg)) a.validate();
  const json& ds = cfg.at("dataset");
  static const std::vector<std::string> names{"two-moons", "gauss-mix", "tiny-digits", "idx-file", "csv-file"};
  if (std::find(names.begin(), names.end(), text_of(ds, "name")) == names.end())
    throw ConfigError("dataset.name: unknown dataset '" + text_of(ds, "name") + "'");
  const json& pr = cfg.at("profile");
  if (count_of(pr, "samples") == 0) throw ConfigError("profile.samples must be >= 1");
  if (count_of(pr, "k") == 0) throw ConfigError("profile.k must be >= 1");
  const json& b = cfg.at("bench");
  if (count_of(b, "iters") < 5) throw ConfigError("bench.iters must be >= 5");
  if (count_of(b, "batch") == 0) throw ConfigError("bench.batch must be >= 1");
  const json& th = cfg.at("theory");
  if (count_of(th, "max_dim") == 0 || count_of(th, "max_dim") > 32)
    throw ConfigError("theory.max_dim must lie in [1, 32]");
  if (!(real_of(th, "rho") > 0)) throw ConfigError("theory.rho must be > 0");
}

Eigen::VectorXd randn(Rng& r, Eigen::Index d, double s = 1.0) {
  Eigen::VectorXd v(d);
  for (Eigen::Index i = 0; i < d; ++i) v(i) = s * r.normal();
  return v;
}

Eigen::MatrixXd rand_sym(Rng& r, Eigen::Index d) {
  Eigen::MatrixXd A(d, d);
  for (Eigen::Index i = 0; i < d; ++i)
    for (Eigen::Index j = 0; j < d; ++j) A(i, j) = r.normal();
  return 0.5 * (A + A.transpose());
}

Eigen::MatrixXd rand_psd(Rng& r, Eigen::Index d) {
  Eigen::MatrixXd B = rand_sym(r, d);
  return B * B.transpose() / static_cast<double>(d);
}

std::vector<std::size_t> first_n(std::size_t n) {
  std::vector<std::size_t> ids(n);
  for (std::size_t i = 0; i < n; ++i) ids[i] = i;
  return ids;
}

// State shared by the subcommands of one run.
class Context {
 public:
  Context(json cfg, ArtifactSet& art)
      : cfg_(std::move(cfg)), hash_(config_hash(cfg_)), root_(cfg_.at("seed").get<std::uint64_t>()), art_(art) {}

  const json& cfg() const { return cfg_; }
  const std::string& hash() const { return hash_; }
  const Rng& root() const { return root_; }
  ArtifactSet& art() { return art_; }

  const DatasetPair& data() {
    if (!data_) {
      data_ = load_dataset(cfg_);
      data_hash_ = dataset_hash(*data_);
    }
    return *data_;
  }
  const std::string& data_hash() {
    data();
    return data_hash_;
  }
  ModelSpec spec() { return model_spec(cfg_, data()); }
  DistillConfig distill_config() const { return DistillConfig::from_json(cfg_.at("distill")); }

  // Input artifact path: the configured one, or `fallback` inside the output directory.
  std::string input(const char* key, const std::string& fallback) const {
    std::string p = text_of(cfg_.at("inputs"), key);
    return p.empty() ? (art_.dir() / fallback).string() : p;
  }

  json stamp(json j) {
    j["config_hash"] = hash_;
    j["dataset_hash"] = data_hash();
    return j;
  }

  void timing(const std::string& sub, json extra) {
    extra["finished_at"] = timestamp();
    art_.write_json(sub + ".timing.json", extra);
  }

  Model load_checked_model(const std::string& path) {
    json header;
    Model m = load_model(path, &header);
    const json extra = header.value("meta", json::object());
    if (extra.contains("dataset_hash") && extra.at("dataset_hash") != data_hash())
      throw Error("model " + path + " was trained on a different dataset");
    return m;
  }

  SyntheticSet load_checked_synthetic(const std::string& path) {
    SyntheticSet s = load_synthetic(path);
    if (s.provenance.contains("dataset_hash") && s.provenance.at("dataset_hash") != data_hash())
      throw Error("synthetic set " + path + " was distilled from a different dataset");
    return s;
  }

 private:
  json cfg_;
  std::string hash_;
  Rng root_;
  ArtifactSet& art_;
  std::optional<DatasetPair> data_;
  std::string data_hash_;
};

json model_extra(Context& ctx, const std::string& role) {
  return {{"config_hash", ctx.hash()}, {"dataset_hash", ctx.data_hash()}, {"role", role}};
}

void tag(Context& ctx, SyntheticSet& s) {
  s.provenance["run_config_hash"] = ctx.hash();
  s.provenance["dataset_hash"] = ctx.data_hash();
}

json run_squeeze(Context& ctx) {
  auto t0 = std::chrono::steady_clock::now();
  const DatasetPair& d = ctx.data();
  DistillConfig dc = ctx.distill_config();
  Model teacher = squeeze(d.train, ctx.spec(), dc, ctx.root().split(10));
  json extra = model_extra(ctx, "teacher");
  extra["method"] = dc.method;
  ctx.art().write("teacher.gmdl", [&](std::ostream& o) { write_model(o, teacher, extra); });
  json j = ctx.stamp({{"subcommand", "squeeze"},
                      {"method", dc.method},
                      {"params", teacher.num_params()},
                      {"train_accuracy", accuracy(teacher, d.train)},
                      {"test_accuracy", accuracy(teacher, d.test)}});
  ctx.art().write_json("squeeze.json", j);
  ctx.timing("squeeze", {{"seconds", seconds_since(t0)}});
  return j;
}

json run_recover(Context& ctx) {
  auto t0 = std::chrono::steady_clock::now();
  Model teacher = ctx.load_checked_model(ctx.input("teacher", "teacher.gmdl"));
  DistillConfig dc = ctx.distill_config();
  RecoverTrace trace;
  SyntheticSet s = recover(teacher, dc, ctx.root().split(11), &trace);
  tag(ctx, s);
  ctx.art().write("recovered.gset", [&](std::ostream& o) { write_synthetic(o, s); });
  json first = json::array(), last = json::array();
  for (const auto& ce : trace.ce) {
    first.push_back(ce.front());
    last.push_back(ce.back());
  }
  json j = ctx.stamp({{"subcommand", "recover"},
                      {"method", dc.method},
                      {"size", s.size()},
                      {"iterations", dc.recover_iters},
                      {"ce_initial", first},
                      {"ce_final", last}});
  ctx.art().write_json("recover.json", j);
  ctx.timing("recover", {{"seconds", seconds_since(t0)}});
  return j;
}

json run_relabel(Context& ctx) {
  auto t0 = std::chrono::steady_clock::now();
  Model teacher = ctx.load_checked_model(ctx.input("teacher", "teacher.gmdl"));
  SyntheticSet s = relabel(teacher, ctx.load_checked_synthetic(ctx.input("synthetic", "recovered.gset")));
  tag(ctx, s);
  ctx.art().write("synthetic.gset", [&](std::ostream& o) { write_synthetic(o, s); });
  std::vector<int> top = argmax_rows(*s.soft);
  std::size_t agree = 0;
  double conf = 0.0;
  const std::size_t C = s.soft->dim(1);
  for (std::size_t i = 0; i < s.size(); ++i) {
    agree += top[i] == s.labels[i];
    conf += (*s.soft)[i * C + static_cast<std::size_t>(top[i])];
  }
  json j = ctx.stamp({{"subcommand", "relabel"},
                      {"size", s.size()},
                      {"label_agreement", static_cast<double>(agree) / static_cast<double>(s.size())},
                      {"mean_confidence", conf / static_cast<double>(s.size())}});
  ctx.art().write_json("relabel.json", j);
  ctx.timing("relabel", {{"seconds", seconds_since(t0)}});
  return j;
}

json run_distill_dc(Context& ctx) {
  auto t0 = std::chrono::steady_clock::now();
  DistillConfig dc = ctx.distill_config();
  if (!dc.is_dc()) throw ConfigError("distill.method: distill-dc needs dc-guard or dc-plain, got '" + dc.method + "'");
  SyntheticSet s = dc_guard(ctx.data().train, ctx.spec(), dc, ctx.root());
  tag(ctx, s);
  ctx.art().write("synthetic.gset", [&](std::ostream& o) { write_synthetic(o, s); });
  json j = ctx.stamp({{"subcommand", "distill-dc"}, {"size", s.size()}, {"provenance", s.provenance}});
  ctx.art().write_json("distill.json", j);
  ctx.timing("distill-dc", {{"seconds", seconds_since(t0)}});
  return j;
}

json run_train(Context& ctx) {
  auto t0 = std::chrono::steady_clock::now();
  const DatasetPair& d = ctx.data();
  TrainConfig tc = TrainConfig::from_json(ctx.cfg().at("train"));
  Rng init_rng = ctx.root().split(20);
  Model m = init(ctx.spec(), init_rng);
  TrainResult r = train(m, d.train, tc, ctx.root().split(21));
  json extra = model_extra(ctx, "model");
  extra["loss"] = tc.loss;
  ctx.art().write("model.gmdl", [&](std::ostream& o) { write_model(o, m, extra); });
  json j = ctx.stamp({{"subcommand", "train"},
                      {"loss", tc.loss},
                      {"epoch_loss", r.epoch_loss},
                      {"train_accuracy", accuracy(m, d.train)},
                      {"test_accuracy", accuracy(m, d.test)}});
  ctx.art().write_json("train.json", j);
  ctx.timing("train", {{"seconds", seconds_since(t0)}});
  return j;
}

json run_attack(Context& ctx) {
  auto t0 = std::chrono::steady_clock::now();
  const DatasetPair& d = ctx.data();
  Model m = ctx.load_checked_model(ctx.input("model", "model.gmdl"));
  std::vector<AttackSpec> attacks = attack_list(ctx.cfg());
  std::string summary =
      "attack,family,norm,eps,clean_accuracy,robust_accuracy,ball_violations,range_violations,flagged,config_hash\n";
  json rows = json::array();
  for (std::size_t i = 0; i < attacks.size(); ++i) {
    const AttackSpec& a = attacks[i];
    RobustEval r = evaluate_attack(m, d.test, a, ctx.root().split(30).split(i));
    summary += csv_field(a.label()) + "," + csv_field(a.family) + "," + csv_field(a.norm) + "," + num(a.eps) + "," +
               num(r.clean_accuracy) + "," + num(r.robust_accuracy) + "," + std::to_string(r.ball_violations) + "," +
               std::to_string(r.range_violations) + "," + std::to_string(r.flagged) + "," + ctx.hash() + "\n";
    rows.push_back({{"attack", a.label()},
                    {"eps", a.eps},
                    {"clean_accuracy", r.clean_accuracy},
                    {"robust_accuracy", r.robust_accuracy},
                    {"ball_violations", r.ball_violations},
                    {"range_violations", r.range_violations},
                    {"flagged", r.flagged}});
    std::ostringstream per;
    write_attack_csv(per, r);
    ctx.art().write_text("attack_" + std::to_string(i) + "_" + a.label() + ".csv",
                         with_column(per.str(), "config_hash", ctx.hash()));
  }
  ctx.art().write_text("attack.csv", summary);
  json j = ctx.stamp({{"subcommand", "attack"}, {"rows", rows}});
  ctx.art().write_json("attack.json", j);
  ctx.timing("attack", {{"seconds", seconds_since(t0)}});
  return j;
}

PowerConfig power_config(const json& pr) {
  PowerConfig pc;
  pc.iters = count_of(pr, "iters");
  pc.tol = real_of(pr, "tol");
  pc.h = real_of(pr, "h");
  return pc;
}

CurvatureProfile test_profile(Context& ctx, const Model& m, std::size_t k) {
  const DatasetPair& d = ctx.data();
  const json& pr = ctx.cfg().at("profile");
  std::size_t n = std::min(count_of(pr, "samples"), d.test.size());
  std::vector<std::size_t> ids = first_n(n);
  Dataset sub = d.test.subset(ids);
  Rng r = ctx.root().split(60);
  return profile(model_objective(m, sub.targets()), sub.inputs, ids, k, power_config(pr), r);
}

std::string arm_name(const DistillConfig& dc, bool relabelled) {
  std::string name = dc.method;
  if (dc.method == "srl-grad-penalty") name += "@lambda_g=" + num(dc.reg.lambda_g);
  if (!dc.is_dc() && !relabelled) name += "@hard";
  return name;
}

json run_eval(Context& ctx) {
  auto t0 = std::chrono::steady_clock::now();
  const DatasetPair& d = ctx.data();
  SyntheticSet s = ctx.load_checked_synthetic(ctx.input("synthetic", "synthetic.gset"));
  std::vector<AttackSpec> attacks = attack_list(ctx.cfg());
  TrainConfig student = TrainConfig::from_json(ctx.cfg().at("student"));
  Model stu;
  ExperimentReport rep = evaluate(s, ctx.spec(), d.test, attacks, student, ctx.root().split(40), &stu);
  double lam1 = test_profile(ctx, stu, 1).median_lambda1();
  DistillConfig dc = ctx.distill_config();
  const std::string arm = arm_name(dc, s.soft.has_value());

  std::string csv = "method,attack,norm,eps,accuracy,ball_violations,range_violations,config_hash,dataset_hash\n";
  json rows = json::array();
  std::size_t next = 0;
  for (const auto& a : attacks) {
    double acc = rep.clean_accuracy;
    std::size_t ball = 0, range = 0;
    if (a.family != "none") {
      const AttackRow& r = rep.attacks.at(next++);
      acc = r.robust_accuracy;
      ball = r.ball_violations;
      range = r.range_violations;
    }
    csv += csv_field(arm) + "," + csv_field(a.label()) + "," + csv_field(a.norm) + "," + num(a.eps) + "," + num(acc) +
           "," + std::to_string(ball) + "," + std::to_string(range) + "," + ctx.hash() + "," + ctx.data_hash() + "\n";
    rows.push_back({{"attack", a.label()}, {"eps", a.eps}, {"accuracy", acc}, {"ball_violations", ball},
                    {"range_violations", range}});
  }
  ctx.art().write_text("eval.csv", csv);
  json j = rep.to_json();
  j["experiment_hash"] = j["config_hash"];
  j = ctx.stamp(j);
  j["subcommand"] = "eval";
  j["arm"] = arm;
  j["rows"] = rows;
  j["median_lambda1"] = lam1;
  j["reg"] = dc.reg.to_json();
  j["seed"] = ctx.cfg().at("seed");
  ctx.art().write_json("eval.json", j);
  ctx.timing("eval", {{"seconds", seconds_since(t0)},
                      {"train_seconds", rep.train_seconds},
                      {"attack_seconds", rep.eval_seconds}});
  return j;
}

json run_profile(Context& ctx) {
  auto t0 = std::chrono::steady_clock::now();
  Model m = ctx.load_checked_model(ctx.input("model", "model.gmdl"));
  CurvatureProfile p = test_profile(ctx, m, count_of(ctx.cfg().at("profile"), "k"));
  std::ostringstream csv;
  p.write_csv(csv);
  ctx.art().write_text("profile.csv", with_column(csv.str(), "config_hash", ctx.hash()));
  json j = ctx.stamp({{"subcommand", "profile"},
                      {"samples", p.sample_ids.size()},
                      {"k", count_of(ctx.cfg().at("profile"), "k")},
                      {"median_lambda1", p.median_lambda1()},
                      {"unconverged", p.unconverged()}});
  ctx.art().write_json("profile.json", j);
  ctx.timing("profile", {{"seconds", seconds_since(t0)}});
  return j;
}

json run_verify_theory(Context& ctx) {
  auto t0 = std::chrono::steady_clock::now();
  const json& th = ctx.cfg().at("theory");
  Rng r = ctx.root().split(50);
  const std::size_t max_dim = count_of(th, "max_dim");

  // Per-sample bound on random local models with lambda1 >= 0.
  std::size_t bound_viol = 0, shifted = 0;
  double min_gap = 1e300;
  for (std::size_t t = 0; t < count_of(th, "instances"); ++t) {
    auto d = static_cast<Eigen::Index>(1 + r.below(max_dim));
    QuadModel q{r.normal(), randn(r, d), rand_sym(r, d), r.uniform(0.01, 1.0)};
    double l1 = lambda_max(q.H);
    if (l1 < 0) {
      q.H += (0.1 - l1) * Eigen::MatrixXd::Identity(d, d);
      ++shifted;
    }
    BoundCheck b = per_sample_bound(q);
    bound_viol += b.violated;
    min_gap = std::min(min_gap, b.bound - b.exact);
  }
  QuadModel concave{1.0, Eigen::VectorXd::Zero(2), Eigen::MatrixXd::Zero(2, 2), 0.5};
  concave.H.diagonal() << -1, -2;
  BoundCheck cb = per_sample_bound(concave);

  // Jensen step on convex families.
  std::size_t trials = 0, jensen_viol = 0;
  double worst = 1e300;
  for (std::size_t t = 0; t < count_of(th, "trials"); ++t) {
    auto d = static_cast<Eigen::Index>(1 + r.below(5));
    std::vector<Eigen::VectorXd> s;
    for (int i = 0; i < 5; ++i) s.push_back(randn(r, d));
    double rho = r.uniform(0.01, 0.5);
    auto fam = t % 2 ? quadratic_family(rand_psd(r, d), randn(r, d), randn(r, d))
                     : logistic_family(randn(r, d), r.normal(), r.sign() > 0 ? 1 : -1);
    if (!fam->convex(rho)) continue;
    double gap = jensen_check(*fam, s, rho);
    ++trials;
    jensen_viol += gap < -1e-10;
    worst = std::min(worst, gap);
  }

  // Distilled-point slack with identity features on logistic regression.
  const double rho = real_of(th, "rho");
  Eigen::VectorXd w(2);
  w << 2.0, 1.0;
  auto logit = logistic_family(w, -1.5, 1);
  std::vector<Eigen::VectorXd> real, dist;
  for (std::size_t i = 0; i < count_of(th, "real_samples"); ++i)
    real.push_back(Eigen::VectorXd::Constant(2, 0.7) + randn(r, 2, 0.2));
  for (std::size_t i = 0; i < count_of(th, "slack_points"); ++i)
    dist.push_back(Eigen::VectorXd::Constant(2, 0.7) + randn(r, 2, 0.4));
  BoundReport slack = distilled_bound_slack(*logit, real, dist, rho);
  std::ostringstream csv;
  slack.write_csv(csv);
  ctx.art().write_text("theory_slack.csv", with_column(csv.str(), "config_hash", ctx.hash()));

  json j = {{"subcommand", "verify-theory"},
            {"config_hash", ctx.hash()},
            {"per_sample", {{"instances", count_of(th, "instances")},
                            {"violations", bound_viol},
                            {"shifted_to_nonnegative_lambda1", shifted},
                            {"min_slack", min_gap},
                            {"concave_example_violated", cb.violated}}},
            {"jensen", {{"trials", trials}, {"violations", jensen_viol}, {"min_gap", worst}}},
            {"logistic_slack", {{"points", slack.records.size()},
                                {"slack_violations", slack.slack_violations},
                                {"per_sample_violations", slack.per_sample_violations},
                                {"positivity_rate", slack.positivity_rate()},
                                {"L", slack.L},
                                {"L_exact", slack.L_exact},
                                {"grad_to_curvature", slack.expectation.grad_to_curvature}}}};

  if (th.at("network").get<bool>()) {
    Model teacher = ctx.load_checked_model(ctx.input("teacher", "teacher.gmdl"));
    SyntheticSet s = ctx.load_checked_synthetic(ctx.input("synthetic", "synthetic.gset"));
    const int c = static_cast<int>(count_of(th, "network_class"));
    const Dataset& test = ctx.data().test;
    std::vector<std::size_t> ids = test.class_indices(c);
    ids.resize(std::min(ids.size(), count_of(th, "real_samples")));
    std::vector<std::size_t> sids;
    for (std::size_t i = 0; i < s.size(); ++i)
      if (s.labels[i] == c) sids.push_back(i);
    BoundReport net = distilled_bound_slack(teacher, gather_rows(test.inputs, ids), gather_rows(s.inputs, sids), c, rho);
    std::ostringstream ncsv;
    net.write_csv(ncsv);
    ctx.art().write_text("theory_network_slack.csv", with_column(ncsv.str(), "config_hash", ctx.hash()));
    json n = net.to_json();
    n.erase("records");
    j["network_slack"] = n;
    j["dataset_hash"] = ctx.data_hash();
  }
  ctx.art().write_json("theory.json", j);
  ctx.timing("verify-theory", {{"seconds", seconds_since(t0)}});
  return j;
}

json run_bench(Context& ctx) {
  auto t0 = std::chrono::steady_clock::now();
  const json& b = ctx.cfg().at("bench");
  DistillConfig dc = ctx.distill_config();
  TrainConfig base = dc.squeeze;
  base.reg = dc.reg;
  BenchReport rep = bench_overhead(ctx.data().train, ctx.spec(), base, count_of(b, "batch"), count_of(b, "warmup"),
                                   count_of(b, "iters"), count_of(b, "adv_steps"), real_of(b, "min_seconds"),
                                   ctx.root().split(70));
  // Everything measured goes to the sidecar; the JSON artifact keeps what the
  // config determines.
  json j = ctx.stamp({{"subcommand", "bench-overhead"},
                      {"methods", {"plain", "guard", "adversarial"}},
                      {"batch", std::min(count_of(b, "batch"), ctx.data().train.size())},
                      {"warmup", count_of(b, "warmup")},
                      {"iterations", count_of(b, "iters")},
                      {"adv_steps", count_of(b, "adv_steps")},
                      {"adv_check_enabled", rep.adv_check_enabled}});
  ctx.art().write_json("bench.json", j);
  json timing = rep.to_json();
  timing["seconds"] = seconds_since(t0);
  ctx.timing("bench", timing);
  if (rep.adv_check_enabled && !rep.guard_below_adv)
    throw Error("bench-overhead: GUARD step (" + num(rep.row("guard").mean_seconds) +
                " s) is not faster than adversarial training (" + num(rep.row("adversarial").mean_seconds) + " s)");
  return j;
}

json run_report(Context& ctx) {
  auto t0 = std::chrono::steady_clock::now();
  std::vector<std::string> runs = ctx.cfg().at("report").at("runs").get<std::vector<std::string>>();
  if (runs.empty()) throw ConfigError("report.runs: list at least one run directory");
  std::vector<json> evals;
  for (const auto& dir : runs) {
    fs::path p = fs::path(dir) / "eval.json";
    std::ifstream in(p);
    if (!in) throw Error("report: cannot read " + p.string());
    evals.push_back(json::parse(in));
  }
  const std::string dhash = evals[0].at("dataset_hash").get<std::string>();
  for (std::size_t i = 1; i < evals.size(); ++i)
    if (evals[i].at("dataset_hash") != dhash)
      throw Error("report: run " + runs[i] + " has dataset hash " + evals[i].at("dataset_hash").get<std::string>() +
                  ", expected " + dhash);

  std::vector<std::string> arms, attacks;
  std::map<std::pair<std::string, std::string>, std::pair<double, int>> cell;
  for (const auto& e : evals) {
    std::string arm = e.at("arm").get<std::string>();
    if (std::find(arms.begin(), arms.end(), arm) == arms.end()) arms.push_back(arm);
    for (const auto& row : e.at("rows")) {
      std::string a = row.at("attack").get<std::string>();
      if (std::find(attacks.begin(), attacks.end(), a) == attacks.end()) attacks.push_back(a);
      auto& c = cell[{a, arm}];
      c.first += row.at("accuracy").get<double>();
      c.second += 1;
    }
  }
  std::string t2 = "attack";
  for (const auto& a : arms) t2 += "," + csv_field(a);
  t2 += ",config_hash\n";
  for (const auto& a : attacks) {
    t2 += csv_field(a == "none" ? "clean" : a);
    for (const auto& m : arms) {
      auto it = cell.find({a, m});
      t2 += "," + (it == cell.end() ? std::string() : num(it->second.first / it->second.second));
    }
    t2 += "," + ctx.hash() + "\n";
  }
  ctx.art().write_text("table2.csv", t2);

  std::string t3 = "run,arm,lambda,h,lambda_g,seed";
  for (const auto& a : attacks) t3 += "," + csv_field(a == "none" ? "clean" : a);
  t3 += ",median_lambda1,source_config_hash,config_hash\n";
  for (std::size_t i = 0; i < evals.size(); ++i) {
    const json& e = evals[i];
    const json& reg = e.at("reg");
    t3 += csv_field(fs::path(runs[i]).filename().string()) + "," + csv_field(e.at("arm").get<std::string>()) + "," +
          num(reg.at("lambda").get<double>()) + "," + num(reg.at("h").get<double>()) + "," +
          num(reg.at("lambda_g").get<double>()) + "," + std::to_string(e.at("seed").get<std::uint64_t>());
    for (const auto& a : attacks) {
      std::string v;
      for (const auto& row : e.at("rows"))
        if (row.at("attack") == a) v = num(row.at("accuracy").get<double>());
      t3 += "," + v;
    }
    t3 += "," + num(e.at("median_lambda1").get<double>()) + "," + e.at("config_hash").get<std::string>() + "," +
          ctx.hash() + "\n";
  }
  ctx.art().write_text("table3.csv", t3);
  json j = {{"subcommand", "report"}, {"config_hash", ctx.hash()}, {"dataset_hash", dhash},
            {"runs", evals.size()}, {"arms", arms}, {"attacks", attacks}};
  ctx.art().write_json("report.json", j);
  ctx.timing("report", {{"seconds", seconds_since(t0)}});
  return j;
}

}  // namespace

json default_config() {
  DistillConfig distill;
  distill.method = "squeeze-recover-relabel";
  distill.squeeze.epochs = 20;
  distill.reg.lambda = 10.0;
  TrainConfig student;
  student.epochs = 100;
  student.batch_size = 20;
  ModelSpec model;
  model.arch = "convnet-s";
  model.batchnorm = true;
  AttackSpec none{.family = "none"};
  AttackSpec pgd{.family = "pgd", .eps = 0.05};
  return {
      {"seed", std::uint64_t{0}},
      {"out", "runs/default"},
      {"dataset",
       {{"name", "tiny-digits"},
        {"seed", std::uint64_t{100}},
        {"n_train", std::size_t{1000}},
        {"n_test", std::size_t{300}},
        {"size", std::size_t{8}},
        {"noise", 0.1},
        {"classes", std::size_t{3}},
        {"dim", std::size_t{2}},
        {"images", ""},
        {"labels", ""},
        {"test_images", ""},
        {"test_labels", ""},
        {"path", ""},
        {"test_path", ""},
        {"test_fraction", 0.2}}},
      {"model", model.to_json()},
      {"distill", distill.to_json()},
      {"train", TrainConfig{}.to_json()},
      {"student", student.to_json()},
      {"attacks", json::array({none.to_json(), pgd.to_json()})},
      {"profile",
       {{"samples", std::size_t{200}}, {"k", std::size_t{1}}, {"iters", std::size_t{100}}, {"tol", 1e-3}, {"h", 1e-4}}},
      {"theory",
       {{"instances", std::size_t{1000}},
        {"max_dim", std::size_t{10}},
        {"trials", std::size_t{1000}},
        {"rho", 0.1},
        {"real_samples", std::size_t{500}},
        {"slack_points", std::size_t{40}},
        {"network", false},
        {"network_class", std::size_t{0}}}},
      {"bench",
       {{"batch", std::size_t{64}},
        {"warmup", std::size_t{2}},
        {"iters", std::size_t{5}},
        {"adv_steps", std::size_t{10}},
        {"min_seconds", 1e-3}}},
      {"inputs", {{"teacher", ""}, {"synthetic", ""}, {"model", ""}}},
      {"report", {{"runs", json::array()}}},
  };
}

json resolve_config(const json& user) { return merge(default_config(), user, ""); }

void apply_override(json& config, const std::string& assignment) {
  auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not of the form key=value");
  std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;

  json* node = &config;
  std::string path;
  std::size_t start = 0;
  while (true) {
    auto dot = key.find('.', start);
    std::string seg = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    path = join(path, seg);
    if (node->is_object()) {
      if (!node->contains(seg)) throw ConfigError("unknown config key: " + path);
      node = &(*node)[seg];
    } else if (node->is_array()) {
      std::size_t idx = 0;
      auto [p, ec] = std::from_chars(seg.data(), seg.data() + seg.size(), idx);
      if (ec != std::errc() || p != seg.data() + seg.size() || idx >= node->size())
        throw ConfigError("unknown config key: " + path);
      node = &(*node)[idx];
    } else {
      throw ConfigError("unknown config key: " + path);
    }
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  *node = value;
  config = resolve_config(config);
}

json load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path);
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ConfigError("config file " + path + " is not valid JSON");
  return j;
}

std::string config_hash(const json& config) {
  json c = config;
  c.erase("out");
  return fnv1a_hex(c.dump());
}

std::string dataset_hash(const DatasetPair& d) {
  std::string buf;
  for (const Dataset* s : {&d.train, &d.test}) {
    buf += shape_str(s->inputs.shape()) + ";" + std::to_string(s->classes) + ";";
    auto data = s->inputs.data();
    buf.append(reinterpret_cast<const char*>(data.data()), data.size() * sizeof(double));
    buf.append(reinterpret_cast<const char*>(s->labels.data()), s->labels.size() * sizeof(int));
    if (s->soft) {
      auto soft = s->soft->data();
      buf.append(reinterpret_cast<const char*>(soft.data()), soft.size() * sizeof(double));
    }
  }
  return fnv1a_hex(buf);
}

DatasetPair load_dataset(const std::string& name, const json& params, Rng& rng) {
  json p = merge(default_config().at("dataset"), params, "dataset");
  DatasetPair out;
  const std::size_t classes = count_of(p, "classes");
  auto require = [&](const char* key) {
    if (text_of(p, key).empty()) throw ConfigError(std::string("dataset.") + key + ": required for " + name);
    return text_of(p, key);
  };
  // A separate test file when given, else a stratified split of the training file.
  auto pair = [&](Dataset all, const std::function<Dataset()>& test) {
    if (!test) return split_dataset(all, real_of(p, "test_fraction"), rng);
    DatasetPair r{std::move(all), test()};
    r.test.split = "test";
    return r;
  };
  if (name == "two-moons") {
    out = make_two_moons(count_of(p, "n_train"), count_of(p, "n_test"), real_of(p, "noise"), rng);
  } else if (name == "gauss-mix") {
    out = make_gauss_mix(count_of(p, "n_train"), count_of(p, "n_test"), classes, count_of(p, "dim"),
                         real_of(p, "noise"), rng);
  } else if (name == "tiny-digits") {
    out = make_tiny_digits(count_of(p, "n_train"), count_of(p, "n_test"), count_of(p, "size"), real_of(p, "noise"),
                           rng);
  } else if (name == "idx-file") {
    Dataset all = load_idx(require("images"), require("labels"), classes);
    std::function<Dataset()> test;
    if (!text_of(p, "test_images").empty())
      test = [&] { return load_idx(text_of(p, "test_images"), require("test_labels"), classes); };
    out = pair(std::move(all), test);
  } else if (name == "csv-file") {
    Dataset all = load_csv(require("path"), classes);
    std::function<Dataset()> test;
    if (!text_of(p, "test_path").empty()) test = [&] { return load_csv(text_of(p, "test_path"), classes); };
    out = pair(std::move(all), test);
  } else {
    throw ConfigError("dataset.name: unknown dataset '" + name + "'");
  }
  if (out.train.classes != out.test.classes) throw ConfigError("dataset: train and test class counts differ");
  out.train.validate();
  out.test.validate();
  return out;
}

DatasetPair load_dataset(const json& config) {
  const json& ds = config.at("dataset");
  Rng rng(ds.at("seed").get<std::uint64_t>());
  return load_dataset(text_of(ds, "name"), ds, rng);
}

ModelSpec model_spec(const json& config, const DatasetPair& d) {
  ModelSpec s = ModelSpec::from_json(config.at("model"));
  Shape shape = d.train.sample_shape();
  if (s.input_shape.empty()) s.input_shape = shape;
  else if (s.input_shape != shape)
    throw ConfigError("model.input_shape: " + shape_str(s.input_shape) + " does not match the data " + shape_str(shape));
  if (s.classes == 0) s.classes = d.train.classes;
  else if (s.classes != d.train.classes)
    throw ConfigError("model.classes: class-count mismatch (" + std::to_string(s.classes) + " configured, data has " +
                      std::to_string(d.train.classes) + ")");
  if (s.arch == "mlp" && s.layers.empty()) s.layers = {shape_numel(shape), 64, s.classes};
  s.validate();
  return s;
}

std::vector<AttackSpec> attack_list(const json& config) {
  std::vector<AttackSpec> out;
  for (const auto& a : config.at("attacks")) out.push_back(AttackSpec::from_json(a));
  return out;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

ArtifactSet::ArtifactSet(fs::path dir) : dir_(std::move(dir)) {}

ArtifactSet::~ArtifactSet() {
  if (committed_) return;
  std::error_code ec;
  for (const auto& p : staged_) fs::remove(fs::path(p.string() + ".partial"), ec);
}

void ArtifactSet::write(const std::string& name, const std::function<void(std::ostream&)>& body) {
  fs::path final_path = dir_ / name;
  fs::path partial = final_path.string() + ".partial";
  staged_.push_back(final_path);
  std::ofstream out(partial, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot create " + partial.string());
  body(out);
  out.flush();
  if (!out) throw Error("failed writing " + partial.string());
}

void ArtifactSet::write_text(const std::string& name, const std::string& text) {
  write(name, [&](std::ostream& o) { o << text; });
}

void ArtifactSet::write_json(const std::string& name, const json& j) {
  write(name, [&](std::ostream& o) { o << j.dump(2) << "\n"; });
}

void ArtifactSet::commit() {
  for (const auto& p : staged_) fs::rename(fs::path(p.string() + ".partial"), p);
  committed_ = true;
}

std::vector<std::string> ArtifactSet::paths() const {
  std::vector<std::string> out;
  for (const auto& p : staged_) out.push_back(p.string());
  return out;
}

const BenchRow& BenchReport::row(const std::string& method) const {
  for (const auto& r : rows)
    if (r.method == method) return r;
  throw Error("bench: no row for " + method);
}

json BenchReport::to_json() const {
  json rs = json::array();
  for (const auto& r : rows)
    rs.push_back({{"method", r.method},
                  {"mean_seconds", r.mean_seconds},
                  {"std_seconds", r.std_seconds},
                  {"iterations", r.iterations},
                  {"repeats", r.repeats},
                  {"peak_bytes", r.peak_bytes}});
  return {{"rows", rs},
          {"guard_to_plain", guard_to_plain},
          {"guard_to_adv", guard_to_adv},
          {"adv_steps", adv_steps},
          {"adv_check_enabled", adv_check_enabled},
          {"guard_below_adv", guard_below_adv},
          {"ratio_below_5", ratio_below_5}};
}

BenchReport bench_overhead(const Dataset& data, const ModelSpec& spec, const TrainConfig& base, std::size_t batch,
                           std::size_t warmup, std::size_t iters, std::size_t adv_steps, double min_seconds,
                           const Rng& rng) {
  using clock = std::chrono::steady_clock;
  if (iters < 5) throw ConfigError("bench.iters must be >= 5");
  batch = std::min(batch, data.size());
  if (batch == 0) throw ConfigError("bench: empty dataset");
  Dataset b = data.subset(first_n(batch));
  Targets t = b.targets();
  Rng init_rng = rng.split(0);
  const Model start = init(spec, init_rng);

  BenchReport rep;
  rep.adv_steps = adv_steps;
  rep.adv_check_enabled = adv_steps >= 5;
  const std::vector<std::string> methods{"plain", "guard", "adversarial"};
  const std::size_t nm = methods.size();
  std::vector<Model> models(nm, start);
  std::vector<std::unique_ptr<Trainer>> trainers;
  std::vector<Rng> step_rngs;
  std::vector<std::size_t> repeats(nm, 1);
  std::vector<std::size_t> peaks(nm, 0);
  for (std::size_t k = 0; k < nm; ++k) {
    TrainConfig cfg = base;
    cfg.loss = methods[k];
    if (methods[k] == "adversarial") {
      // Zero steps degenerates to plain training.
      if (adv_steps == 0) cfg.loss = "plain";
      else cfg.adversary.steps = adv_steps;
    }
    cfg.validate();
    trainers.push_back(std::make_unique<Trainer>(models[k], cfg));
    step_rngs.push_back(rng.split(1 + k));
    Trainer& tr = *trainers.back();
    for (std::size_t w = 0; w < warmup; ++w) tr.step(b.inputs, t, step_rngs[k]);

    MemoryStats::reset_peak();
    const std::size_t resident = MemoryStats::current_bytes();
    auto c0 = clock::now();
    tr.step(b.inputs, t, step_rngs[k]);
    double once = std::chrono::duration<double>(clock::now() - c0).count();
    peaks[k] = MemoryStats::peak_bytes() - resident;
    if (once < min_seconds) repeats[k] = static_cast<std::size_t>(std::ceil(min_seconds / std::max(once, 1e-9)));
  }

  // Round-robin timing so load drift hits every method alike. The untimed step
  // before each block brings caches and the allocator back to that method.
  std::vector<std::vector<double>> per(nm);
  for (std::size_t i = 0; i < iters; ++i)
    for (std::size_t k = 0; k < nm; ++k) {
      trainers[k]->step(b.inputs, t, step_rngs[k]);
      auto s0 = clock::now();
      for (std::size_t r = 0; r < repeats[k]; ++r) trainers[k]->step(b.inputs, t, step_rngs[k]);
      per[k].push_back(std::chrono::duration<double>(clock::now() - s0).count() / static_cast<double>(repeats[k]));
    }

  for (std::size_t k = 0; k < nm; ++k) {
    BenchRow row;
    row.method = methods[k];
    row.iterations = iters;
    row.repeats = repeats[k];
    row.peak_bytes = peaks[k];
    double mean = 0.0;
    for (double v : per[k]) mean += v;
    mean /= static_cast<double>(iters);
    double var = 0.0;
    for (double v : per[k]) var += (v - mean) * (v - mean);
    row.mean_seconds = mean;
    row.std_seconds = std::sqrt(var / static_cast<double>(iters - 1));
    rep.rows.push_back(row);
  }
  rep.guard_to_plain = rep.row("guard").mean_seconds / rep.row("plain").mean_seconds;
  rep.guard_to_adv = rep.row("guard").mean_seconds / rep.row("adversarial").mean_seconds;
  rep.ratio_below_5 = rep.guard_to_plain < 5.0;
  rep.guard_below_adv = rep.row("guard").mean_seconds < rep.row("adversarial").mean_seconds;
  return rep;
}

const std::vector<std::string>& subcommands() {
  static const std::vector<std::string> names{"squeeze", "recover", "relabel", "distill-dc",   "train", "attack",
                                              "eval",    "profile", "verify-theory", "bench-overhead", "report"};
  return names;
}

RunResult run(const std::string& subcommand, const json& user_config, const std::vector<std::string>& overrides,
              const std::string& out) {
  const auto& names = subcommands();
  if (std::find(names.begin(), names.end(), subcommand) == names.end())
    throw ConfigError("unknown subcommand '" + subcommand + "'");
  json cfg = resolve_config(user_config);
  for (const auto& o : overrides) apply_override(cfg, o);
  if (!out.empty()) cfg["out"] = out;
  check_semantics(cfg);

  fs::path dir = text_of(cfg, "out");
  fs::create_directories(dir);
  ArtifactSet art(dir);
  Context ctx(cfg, art);
  RunResult res;
  if (subcommand == "squeeze") res.summary = run_squeeze(ctx);
  else if (subcommand == "recover") res.summary = run_recover(ctx);
  else if (subcommand == "relabel") res.summary = run_relabel(ctx);
  else if (subcommand == "distill-dc") res.summary = run_distill_dc(ctx);
  else if (subcommand == "train") res.summary = run_train(ctx);
  else if (subcommand == "attack") res.summary = run_attack(ctx);
  else if (subcommand == "eval") res.summary = run_eval(ctx);
  else if (subcommand == "profile") res.summary = run_profile(ctx);
  else if (subcommand == "verify-theory") res.summary = run_verify_theory(ctx);
  else if (subcommand == "bench-overhead") res.summary = run_bench(ctx);
  else res.summary = run_report(ctx);
  json effective = cfg;
  effective["config_hash"] = ctx.hash();
  art.write_json(subcommand + ".config.json", effective);
  art.commit();
  res.artifacts = art.paths();
  return res;
}

int run_main(const std::string& subcommand, const json& user_config, const std::vector<std::string>& overrides,
             const std::string& out, std::ostream& err) {
  try {
    run(subcommand, user_config, overrides, out);
    return 0;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return 2;
  } catch (const json::exception& e) {
    err << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace guard::harness
