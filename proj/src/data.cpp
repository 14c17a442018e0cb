#include "guard/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "guard/binio.hpp"
#include "guard/errors.hpp"

namespace guard {

Targets Targets::subset(std::span<const std::size_t> idx) const {
  Targets t;
  for (auto i : idx) t.hard.push_back(hard.at(i));
  if (soft) t.soft = gather_rows(*soft, idx);
  return t;
}

Shape Dataset::sample_shape() const {
  return Shape(inputs.shape().begin() + 1, inputs.shape().end());
}

Dataset Dataset::subset(std::span<const std::size_t> idx) const {
  Dataset d;
  d.inputs = gather_rows(inputs, idx);
  for (auto i : idx) d.labels.push_back(labels.at(i));
  if (soft) d.soft = gather_rows(*soft, idx);
  d.classes = classes;
  d.split = split;
  return d;
}

std::vector<std::size_t> Dataset::class_indices(int c) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] == c) out.push_back(i);
  return out;
}

void Dataset::validate() const {
  if (classes < 2) throw Error("dataset needs at least 2 classes");
  if (inputs.rank() < 2 || inputs.dim(0) != labels.size())
    throw ShapeError("dataset inputs " + shape_str(inputs.shape()) + " do not match " +
                     std::to_string(labels.size()) + " labels");
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= classes)
      throw Error("label " + std::to_string(y) + " outside [0, " + std::to_string(classes) + ")");
  if (soft) {
    if (soft->shape() != Shape{labels.size(), classes}) throw ShapeError("soft label shape mismatch");
    for (std::size_t i = 0; i < labels.size(); ++i) {
      double s = 0;
      for (std::size_t c = 0; c < classes; ++c) s += (*soft)[i * classes + c];
      if (std::abs(s - 1.0) > 1e-9) throw Error("soft label row does not sum to 1");
    }
  }
}

namespace {

// Balanced labels in shuffled order.
std::vector<int> balanced_labels(std::size_t n, std::size_t classes, Rng& rng) {
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i % classes);
  auto perm = rng.permutation(n);
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = labels[perm[i]];
  return out;
}

template <class Sampler>
Dataset generate(std::size_t n, std::size_t classes, Shape sample_shape, Rng& rng, Sampler&& sample,
                 const std::string& split) {
  Dataset d;
  d.labels = balanced_labels(n, classes, rng);
  std::size_t dim = shape_numel(sample_shape);
  Buffer buf(n * dim);
  for (std::size_t i = 0; i < n; ++i) {
    sample(d.labels[i], std::span<double>(buf.data() + i * dim, dim));
    for (std::size_t j = 0; j < dim; ++j) buf[i * dim + j] = std::clamp(buf[i * dim + j], 0.0, 1.0);
  }
  Shape s{n};
  s.insert(s.end(), sample_shape.begin(), sample_shape.end());
  d.inputs = Tensor(std::move(s), std::move(buf));
  d.classes = classes;
  d.split = split;
  return d;
}

// 5x7 bitmap glyphs for the digits 0-9; one string per row.
constexpr std::array<std::array<const char*, 7>, 10> kGlyphs{{
    {".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."},
    {"..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."},
    {".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"},
    {"####.", "....#", "....#", ".###.", "....#", "....#", "####."},
    {"...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."},
    {"#####", "#....", "####.", "....#", "....#", "#...#", ".###."},
    {"..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."},
    {"#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."},
    {".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."},
    {".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."},
}};

}  // namespace

DatasetPair make_two_moons(std::size_t n_train, std::size_t n_test, double noise, Rng& rng) {
  auto sample = [noise](Rng& rng) {
    return [noise, &rng](int label, std::span<double> out) {
    double t = rng.uniform(0.0, std::numbers::pi);
    double x = label == 0 ? std::cos(t) : 1.0 - std::cos(t);
    double y = label == 0 ? std::sin(t) : 0.5 - std::sin(t);
    x += noise * rng.normal();
    y += noise * rng.normal();
    out[0] = (x + 1.5) / 4.0;
    out[1] = (y + 1.25) / 3.0;
    };
  };
  DatasetPair p;
  Rng tr = rng.split(1), te = rng.split(2);
  p.train = generate(n_train, 2, {2}, tr, sample(tr), "train");
  p.test = generate(n_test, 2, {2}, te, sample(te), "test");
  return p;
}

DatasetPair make_gauss_mix(std::size_t n_train, std::size_t n_test, std::size_t classes,
                           std::size_t dim, double noise, Rng& rng) {
  Rng mean_rng = rng.split(0);
  std::vector<std::vector<double>> means(classes, std::vector<double>(dim));
  for (auto& m : means)
    for (auto& v : m) v = mean_rng.uniform(0.2, 0.8);
  DatasetPair p;
  for (int part = 0; part < 2; ++part) {
    Rng r = rng.split(1 + static_cast<std::uint64_t>(part));
    auto sample = [&](int label, std::span<double> out) {
      for (std::size_t j = 0; j < dim; ++j) out[j] = means[static_cast<std::size_t>(label)][j] + noise * r.normal();
    };
    Dataset d = generate(part == 0 ? n_train : n_test, classes, {dim}, r, sample,
                         part == 0 ? "train" : "test");
    (part == 0 ? p.train : p.test) = std::move(d);
  }
  return p;
}

DatasetPair make_tiny_digits(std::size_t n_train, std::size_t n_test, std::size_t size, double noise,
                             Rng& rng) {
  if (size != 8 && size != 16) throw ConfigError("tiny-digits size must be 8 or 16");
  const std::size_t cell = size / 8;  // glyph pixel footprint
  DatasetPair p;
  for (int part = 0; part < 2; ++part) {
    Rng r = rng.split(1 + static_cast<std::uint64_t>(part));
    auto sample = [&](int label, std::span<double> out) {
      std::fill(out.begin(), out.end(), 0.0);
      const auto& glyph = kGlyphs[static_cast<std::size_t>(label)];
      // 5x7 glyph inside an 8x8 canvas: offsets 0..3 horizontally, 0..1 vertically.
      std::size_t ox = r.below(4), oy = r.below(2);
      double ink = r.uniform(0.6, 1.0);
      for (std::size_t gy = 0; gy < 7; ++gy)
        for (std::size_t gx = 0; gx < 5; ++gx) {
          if (glyph[gy][gx] != '#') continue;
          if (r.uniform() < 0.08) continue;  // broken stroke
          for (std::size_t a = 0; a < cell; ++a)
            for (std::size_t b = 0; b < cell; ++b)
              out[((oy + gy) * cell + a) * size + (ox + gx) * cell + b] = ink;
        }
      for (auto& v : out) v += noise * r.normal();
    };
    Dataset d = generate(part == 0 ? n_train : n_test, 10, {1, size, size}, r, sample,
                         part == 0 ? "train" : "test");
    (part == 0 ? p.train : p.test) = std::move(d);
  }
  return p;
}

namespace {

std::uint32_t read_be32(binio::Reader& r, const char* what) {
  std::string b = r.bytes(4, what);
  std::uint32_t v = 0;
  for (unsigned char c : b) v = (v << 8) | c;
  return v;
}

}  // namespace

Dataset load_idx(const std::string& images_path, const std::string& labels_path, std::size_t classes) {
  std::ifstream img(images_path, std::ios::binary), lab(labels_path, std::ios::binary);
  if (!img) throw Error("cannot open " + images_path);
  if (!lab) throw Error("cannot open " + labels_path);
  binio::Reader ri(img, 0), rl(lab, 0);
  if (read_be32(ri, "magic") != 0x00000803)
    throw ParseError(images_path + ": bad IDX image magic", 0);
  std::uint32_t n = read_be32(ri, "count"), rows = read_be32(ri, "rows"), cols = read_be32(ri, "cols");
  if (read_be32(rl, "magic") != 0x00000801)
    throw ParseError(labels_path + ": bad IDX label magic", 0);
  std::uint32_t nl = read_be32(rl, "count");
  if (nl != n) throw ParseError(labels_path + ": label count does not match image count", 4);
  if (n == 0 || rows == 0 || cols == 0) throw ParseError(images_path + ": empty IDX file", 4);
  std::string pix = ri.bytes(std::size_t{n} * rows * cols, "pixels");
  std::string lbl = rl.bytes(n, "labels");
  Dataset d;
  Buffer buf(pix.size());
  for (std::size_t i = 0; i < pix.size(); ++i) buf[i] = static_cast<unsigned char>(pix[i]) / 255.0;
  d.inputs = Tensor({n, 1, rows, cols}, std::move(buf));
  for (std::size_t i = 0; i < n; ++i) {
    int y = static_cast<unsigned char>(lbl[i]);
    if (static_cast<std::size_t>(y) >= classes)
      throw ParseError(labels_path + ": label " + std::to_string(y) + " exceeds class count", 8 + i);
    d.labels.push_back(y);
  }
  d.classes = classes;
  return d;
}

Dataset load_csv(const std::string& path, std::size_t classes) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  std::string line;
  std::size_t offset = 0, width = 0;
  Buffer values;
  Dataset d;
  while (std::getline(in, line)) {
    std::size_t line_start = offset;
    offset += line.size() + 1;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<double> row;
    std::size_t pos = 0;
    while (pos <= line.size()) {
      std::size_t comma = line.find(',', pos);
      std::string field = line.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
      char* end = nullptr;
      double v = std::strtod(field.c_str(), &end);
      if (field.empty() || end != field.c_str() + field.size() || !std::isfinite(v))
        throw ParseError(path + ": cannot parse field '" + field + "'", line_start + pos);
      row.push_back(v);
      if (comma == std::string::npos) break;
      pos = comma + 1;
    }
    if (row.size() < 2) throw ParseError(path + ": row needs features and a label", line_start);
    if (width == 0) width = row.size();
    if (row.size() != width) throw ParseError(path + ": inconsistent column count", line_start);
    double label = row.back();
    if (label != std::floor(label) || label < 0 || label >= static_cast<double>(classes))
      throw ParseError(path + ": label outside [0, classes)", line_start);
    for (std::size_t j = 0; j + 1 < row.size(); ++j) {
      if (row[j] < 0.0 || row[j] > 1.0) throw ParseError(path + ": feature outside [0, 1]", line_start);
      values.push_back(row[j]);
    }
    d.labels.push_back(static_cast<int>(label));
  }
  if (d.labels.empty()) throw ParseError(path + ": no rows", 0);
  d.inputs = Tensor({d.labels.size(), width - 1}, std::move(values));
  d.classes = classes;
  return d;
}

DatasetPair split_dataset(const Dataset& all, double test_fraction, Rng& rng) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw ConfigError("test_fraction must be in (0, 1)");
  std::vector<std::size_t> tr, te;
  for (std::size_t c = 0; c < all.classes; ++c) {
    auto idx = all.class_indices(static_cast<int>(c));
    auto perm = rng.permutation(idx.size());
    std::size_t n_test = static_cast<std::size_t>(std::round(test_fraction * static_cast<double>(idx.size())));
    for (std::size_t i = 0; i < idx.size(); ++i) (i < n_test ? te : tr).push_back(idx[perm[i]]);
  }
  std::sort(tr.begin(), tr.end());
  std::sort(te.begin(), te.end());
  if (tr.empty() || te.empty()) throw ConfigError("split produced an empty partition");
  DatasetPair p{all.subset(tr), all.subset(te)};
  p.train.split = "train";
  p.test.split = "test";
  return p;
}

}  // namespace guard
