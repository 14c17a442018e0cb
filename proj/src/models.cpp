#include "guard/models.hpp"

#include <cmath>
#include <fstream>

#include "guard/binio.hpp"
#include "guard/errors.hpp"
#include "guard/ops.hpp"

namespace guard {

using ad::Var;

namespace {

constexpr std::uint32_t kGmdlVersion = 1;
constexpr double kBnEps = 1e-5;
constexpr double kBnMomentum = 0.1;

struct ConvGeom {
  std::size_t in_c, h, w;           // input
  std::size_t h1, w1, h2, w2;       // after each pool
  std::size_t flat;
};

std::size_t pooled(std::size_t n) { return n < 2 ? 0 : (n - 2) / 2 + 1; }

ConvGeom conv_geom(const ModelSpec& s) {
  ConvGeom g{};
  g.in_c = s.input_shape[0];
  g.h = s.input_shape[1];
  g.w = s.input_shape[2];
  g.h1 = pooled(g.h);
  g.w1 = pooled(g.w);
  g.h2 = pooled(g.h1);
  g.w2 = pooled(g.w1);
  g.flat = s.channels[1] * g.h2 * g.w2;
  return g;
}

// (name, shape, fan_in); fan_in 0 marks a bias/BN shift, -1 a BN scale.
struct ParamDecl {
  std::string name;
  Shape shape;
  long fan_in;
};

std::vector<ParamDecl> declare(const ModelSpec& s) {
  std::vector<ParamDecl> out;
  auto bn = [&](const std::string& prefix, std::size_t c) {
    out.push_back({prefix + ".gamma", {c}, -1});
    out.push_back({prefix + ".beta", {c}, 0});
  };
  if (s.arch == "mlp") {
    for (std::size_t i = 0; i + 1 < s.layers.size(); ++i) {
      std::string p = "fc" + std::to_string(i);
      bool hidden = i + 2 < s.layers.size();
      out.push_back({p + ".weight", {s.layers[i], s.layers[i + 1]}, static_cast<long>(s.layers[i])});
      if (!(hidden && s.batchnorm)) out.push_back({p + ".bias", {s.layers[i + 1]}, 0});
      if (hidden && s.batchnorm) bn("bn" + std::to_string(i), s.layers[i + 1]);
    }
  } else {
    ConvGeom g = conv_geom(s);
    std::size_t in = g.in_c;
    for (std::size_t i = 0; i < 2; ++i) {
      std::string p = "conv" + std::to_string(i);
      std::size_t c = s.channels[i];
      out.push_back({p + ".weight", {c, in, 3, 3}, static_cast<long>(in * 9)});
      if (s.batchnorm)
        bn("bn" + std::to_string(i), c);
      else
        out.push_back({p + ".bias", {c}, 0});
      in = c;
    }
    out.push_back({"fc.weight", {g.flat, s.classes}, static_cast<long>(g.flat)});
    out.push_back({"fc.bias", {s.classes}, 0});
  }
  return out;
}

std::vector<std::size_t> bn_widths(const ModelSpec& s) {
  std::vector<std::size_t> w;
  if (!s.batchnorm) return w;
  if (s.arch == "mlp") {
    for (std::size_t i = 1; i + 1 < s.layers.size(); ++i) w.push_back(s.layers[i]);
  } else {
    w = {s.channels[0], s.channels[1]};
  }
  return w;
}

Var activate(const ModelSpec& s, const Var& x) {
  return s.activation == "relu" ? ad::relu(x) : ad::softplus(x, s.softplus_beta);
}

Var pool(const ModelSpec& s, const Var& x) {
  return s.pool == "max" ? ad::max_pool2d(x, 2, 2) : ad::avg_pool2d(x, 2, 2);
}

Var batchnorm(const Model& m, std::size_t layer, const Var& x, const Var& gamma, const Var& beta,
              Mode mode, bool stats, Forward& f) {
  const Shape& shape = x.shape();
  Var inv, centered;
  if (mode == Mode::Train || stats) {
    std::size_t count = shape_numel(shape) / shape[1];
    Var mean = ad::scale(ad::channel_sum(x), 1.0 / static_cast<double>(count));
    Var c = x - ad::channel_broadcast(mean, shape);
    Var var = ad::scale(ad::channel_sum(ad::square(c)), 1.0 / static_cast<double>(count));
    f.batch_mean.push_back(mean);
    f.batch_var.push_back(var);
    f.batch_count.push_back(count);
    if (mode == Mode::Train) {
      centered = c;
      inv = ad::constant(Tensor::scalar(1.0)) / ad::sqrt(ad::add_scalar(var, kBnEps));
    }
  }
  if (mode == Mode::Eval) {
    centered = x - ad::channel_broadcast(ad::constant(m.bn_mean[layer]), shape);
    inv = ad::constant(Tensor::scalar(1.0)) /
          ad::sqrt(ad::add_scalar(ad::constant(m.bn_var[layer]), kBnEps));
  }
  return centered * ad::channel_broadcast(inv * gamma, shape) + ad::channel_broadcast(beta, shape);
}

}  // namespace

void ModelSpec::validate() const {
  if (classes < 2) throw ConfigError("model.classes must be at least 2");
  if (activation != "relu" && activation != "softplus")
    throw ConfigError("model.activation must be relu or softplus, got '" + activation + "'");
  if (!(softplus_beta > 0)) throw ConfigError("model.softplus_beta must be positive");
  if (pool != "avg" && pool != "max") throw ConfigError("model.pool must be avg or max");
  if (arch == "mlp") {
    if (layers.size() < 2) throw ConfigError("model.layers needs at least input and output widths");
    for (auto w : layers)
      if (w == 0) throw ConfigError("model.layers entries must be positive");
    if (layers.back() != classes) throw ConfigError("model.layers must end with the class count");
    if (!input_shape.empty() && shape_numel(input_shape) != layers.front())
      throw ConfigError("model.layers[0] does not match the input shape " + shape_str(input_shape));
  } else if (arch == "convnet-s") {
    if (input_shape.size() != 3) throw ConfigError("convnet-s needs a (C, H, W) input shape");
    if (channels.size() != 2 || channels[0] == 0 || channels[1] == 0)
      throw ConfigError("model.channels must list two positive widths");
    if (input_shape[1] < 4 || input_shape[2] < 4) throw ConfigError("convnet-s input must be at least 4x4");
    if (input_shape[1] > 32 || input_shape[2] > 32) throw ConfigError("convnet-s input must be at most 32x32");
  } else {
    throw ConfigError("model.arch must be mlp or convnet-s, got '" + arch + "'");
  }
}

nlohmann::json ModelSpec::to_json() const {
  return {{"arch", arch},         {"layers", layers},         {"channels", channels},
          {"activation", activation}, {"softplus_beta", softplus_beta}, {"batchnorm", batchnorm},
          {"pool", pool},         {"input_shape", input_shape}, {"classes", classes}};
}

ModelSpec ModelSpec::from_json(const nlohmann::json& j) {
  ModelSpec s;
  s.arch = j.at("arch").get<std::string>();
  s.layers = j.at("layers").get<std::vector<std::size_t>>();
  s.channels = j.at("channels").get<std::vector<std::size_t>>();
  s.activation = j.at("activation").get<std::string>();
  s.softplus_beta = j.at("softplus_beta").get<double>();
  s.batchnorm = j.at("batchnorm").get<bool>();
  s.pool = j.at("pool").get<std::string>();
  s.input_shape = j.at("input_shape").get<Shape>();
  s.classes = j.at("classes").get<std::size_t>();
  return s;
}

std::size_t Model::num_params() const {
  std::size_t n = 0;
  for (const auto& p : params) n += p.numel();
  return n;
}

std::size_t param_count(const ModelSpec& spec) {
  spec.validate();
  std::size_t n = 0;
  for (const auto& d : declare(spec)) n += shape_numel(d.shape);
  return n;
}

Model init(const ModelSpec& spec, Rng& rng) {
  spec.validate();
  Model m;
  m.spec = spec;
  if (m.spec.arch == "mlp" && m.spec.input_shape.empty()) m.spec.input_shape = {spec.layers.front()};
  for (const auto& d : declare(m.spec)) {
    m.names.push_back(d.name);
    if (d.fan_in > 0) {
      double bound = 1.0 / std::sqrt(static_cast<double>(d.fan_in));
      m.params.push_back(rng.uniform_tensor(d.shape, -bound, bound));
    } else {
      m.params.push_back(Tensor::full(d.shape, d.fan_in < 0 ? 1.0 : 0.0));
    }
  }
  for (auto w : bn_widths(m.spec)) {
    m.bn_mean.push_back(Tensor::zeros({w}));
    m.bn_var.push_back(Tensor::full({w}, 1.0));
  }
  return m;
}

std::vector<Var> constants(const Model& model) {
  std::vector<Var> out;
  for (const auto& p : model.params) out.push_back(ad::constant(p));
  return out;
}

std::vector<Var> bind(const Model& model, ad::Tape& tape) { return tape.leaves(model.params); }

Forward forward(const Model& model, std::span<const Var> params, const Var& x, Mode mode, bool batch_stats) {
  const ModelSpec& s = model.spec;
  if (params.size() != model.params.size()) throw ShapeError("forward: parameter count mismatch");
  Shape expect{x.shape().empty() ? 0 : x.shape()[0]};
  expect.insert(expect.end(), s.input_shape.begin(), s.input_shape.end());
  if (x.shape() != expect)
    throw ShapeError("forward: input " + shape_str(x.shape()) + " does not match model input " +
                     shape_str(s.input_shape));
  const std::size_t n = x.shape()[0];
  Forward f;
  std::size_t pi = 0, bn = 0;
  if (s.arch == "mlp") {
    Var h = ad::reshape(x, {n, s.layers.front()});
    for (std::size_t i = 0; i + 1 < s.layers.size(); ++i) {
      bool hidden = i + 2 < s.layers.size();
      h = ad::matmul(h, params[pi++]);
      if (hidden && s.batchnorm) {
        h = batchnorm(model, bn++, h, params[pi], params[pi + 1], mode, batch_stats, f);
        pi += 2;
      } else {
        h = h + ad::channel_broadcast(params[pi++], h.shape());
      }
      if (hidden) {
        h = activate(s, h);
        if (i + 3 == s.layers.size()) f.features = h;
      }
    }
    if (!f.features.defined()) f.features = ad::reshape(x, {n, s.layers.front()});
    f.logits = h;
  } else {
    Var h = x;
    for (int i = 0; i < 2; ++i) {
      h = ad::conv2d(h, params[pi++], {1, 1});
      if (s.batchnorm) {
        h = batchnorm(model, bn++, h, params[pi], params[pi + 1], mode, batch_stats, f);
        pi += 2;
      } else {
        h = h + ad::channel_broadcast(params[pi++], h.shape());
      }
      h = pool(s, activate(s, h));
    }
    h = ad::reshape(h, {n, h.numel() / n});
    f.features = h;
    Var logits = ad::matmul(h, params[pi++]);
    f.logits = logits + ad::channel_broadcast(params[pi++], logits.shape());
  }
  return f;
}

void update_running_stats(Model& model, const Forward& f) {
  if (f.batch_mean.size() != model.bn_mean.size()) return;
  for (std::size_t l = 0; l < f.batch_mean.size(); ++l) {
    double m = static_cast<double>(f.batch_count[l]);
    double unbias = m > 1 ? m / (m - 1) : 1.0;
    model.bn_mean[l] =
        axpy(kBnMomentum, f.batch_mean[l].value(), scale(model.bn_mean[l], 1.0 - kBnMomentum));
    model.bn_var[l] =
        axpy(kBnMomentum * unbias, f.batch_var[l].value(), scale(model.bn_var[l], 1.0 - kBnMomentum));
  }
}

Var loss_sum(const Var& logits, const Targets& t) {
  if (t.size() != logits.shape()[0]) throw ShapeError("loss: target count does not match batch");
  return t.soft ? ad::soft_cross_entropy_sum(logits, *t.soft) : ad::cross_entropy_sum(logits, t.hard);
}

Var loss_mean(const Var& logits, const Targets& t) {
  return ad::scale(loss_sum(logits, t), 1.0 / static_cast<double>(logits.shape()[0]));
}

Tensor predict_logits(const Model& model, const Tensor& x) {
  ad::NoGrad ng;
  auto p = constants(model);
  return forward(model, p, ad::constant(x), Mode::Eval).logits.value();
}

std::vector<int> predict(const Model& model, const Tensor& x) { return argmax_rows(predict_logits(model, x)); }

double accuracy(const Model& model, const Dataset& d) {
  auto pred = predict(model, d.inputs);
  std::size_t ok = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) ok += pred[i] == d.labels[i];
  return static_cast<double>(ok) / static_cast<double>(pred.size());
}

double loss_value(const Model& model, const Tensor& x, const Targets& t, Mode mode) {
  ad::NoGrad ng;
  auto p = constants(model);
  return loss_mean(forward(model, p, ad::constant(x), mode).logits, t).item();
}

void write_model(std::ostream& out, const Model& m, const nlohmann::json& extra) {
  nlohmann::json header = {{"spec", m.spec.to_json()}, {"names", m.names}, {"bn_layers", m.bn_layers()}};
  if (!extra.is_null()) header["meta"] = extra;
  std::string text = header.dump();
  binio::write_bytes(out, "GMDL");
  binio::write_u32(out, kGmdlVersion);
  binio::write_u32(out, static_cast<std::uint32_t>(text.size()));
  binio::write_bytes(out, text);
  binio::write_u32(out, static_cast<std::uint32_t>(m.params.size() + 2 * m.bn_layers()));
  for (const auto& p : m.params) write_gten(out, p);
  for (const auto& t : m.bn_mean) write_gten(out, t);
  for (const auto& t : m.bn_var) write_gten(out, t);
}

Model read_model(std::istream& in, nlohmann::json* header_out) {
  binio::Reader r(in, 0);
  r.expect_magic("GMDL");
  std::size_t at = r.offset();
  if (r.u32("version") != kGmdlVersion) throw ParseError("unsupported GMDL version", at);
  at = r.offset();
  std::uint32_t len = r.u32("header length");
  if (len > (1u << 24)) throw ParseError("implausible GMDL header length", at);
  std::size_t json_at = r.offset();
  std::string text = r.bytes(len, "header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("GMDL header is not valid JSON: ") + e.what(), json_at + e.byte);
  }
  Model m;
  try {
    m.spec = ModelSpec::from_json(header.at("spec"));
    m.names = header.at("names").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("GMDL header: ") + e.what(), json_at);
  }
  Rng dummy(0);
  Model ref = init(m.spec, dummy);
  at = r.offset();
  std::uint32_t count = r.u32("tensor count");
  if (count != ref.params.size() + 2 * ref.bn_layers())
    throw ParseError("GMDL tensor count does not match the spec", at);
  std::size_t offset = r.offset();
  auto next = [&](const Tensor& like) {
    Tensor t = read_gten(in, offset);
    if (t.shape() != like.shape()) throw ParseError("GMDL tensor shape does not match the spec", offset);
    offset += 12 + 4 * t.rank() + 8 * t.numel();
    return t;
  };
  for (const auto& p : ref.params) m.params.push_back(next(p));
  for (const auto& t : ref.bn_mean) m.bn_mean.push_back(next(t));
  for (const auto& t : ref.bn_var) m.bn_var.push_back(next(t));
  if (header_out) *header_out = header;
  return m;
}

void save_model(const std::string& path, const Model& m, const nlohmann::json& extra) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  write_model(out, m, extra);
  if (!out) throw Error("write failed: " + path);
}

Model load_model(const std::string& path, nlohmann::json* header) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  return read_model(in, header);
}

}  // namespace guard
