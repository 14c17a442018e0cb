#include "guard/tensor.hpp"

#include <atomic>
#include <cmath>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include <Eigen/Core>

#include "guard/binio.hpp"
#include "guard/errors.hpp"

namespace guard {

namespace {

std::atomic<std::size_t> g_current_bytes{0};
std::atomic<std::size_t> g_peak_bytes{0};
std::atomic<bool> g_checked{true};

constexpr std::uint32_t kGtenVersion = 1;

void check_finite(const Buffer& data) {
  // x - x is 0 for finite x and NaN otherwise; Eigen's packet sum keeps this a fast scan.
  Eigen::Map<const Eigen::ArrayXd> v(data.data(), static_cast<Eigen::Index>(data.size()));
  if ((v - v).sum() == 0.0) return;
  for (std::size_t i = 0; i < data.size(); ++i)
    if (!std::isfinite(data[i]))
      throw NonFiniteError("non-finite tensor element at index " + std::to_string(i));
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

std::size_t MemoryStats::current_bytes() { return g_current_bytes.load(); }
std::size_t MemoryStats::peak_bytes() { return g_peak_bytes.load(); }
void MemoryStats::reset_peak() { g_peak_bytes.store(g_current_bytes.load()); }

void MemoryStats::on_alloc(std::size_t bytes) {
  std::size_t now = g_current_bytes.fetch_add(bytes) + bytes;
  std::size_t peak = g_peak_bytes.load();
  while (now > peak && !g_peak_bytes.compare_exchange_weak(peak, now)) {
  }
}

void MemoryStats::on_free(std::size_t bytes) { g_current_bytes.fetch_sub(bytes); }

namespace {

constexpr std::size_t kPoolMinBytes = 1024;
constexpr std::size_t kPoolCapBytes = std::size_t{256} << 20;

struct BlockPool {
  std::unordered_map<std::size_t, std::vector<void*>> free;
  std::size_t cached = 0;
  ~BlockPool() {
    for (auto& [bytes, blocks] : free)
      for (void* p : blocks) ::operator delete(p);
  }
};

BlockPool& pool() {
  thread_local BlockPool p;
  return p;
}

}  // namespace

void* pool_allocate(std::size_t bytes) {
  if (bytes >= kPoolMinBytes) {
    BlockPool& p = pool();
    auto it = p.free.find(bytes);
    if (it != p.free.end() && !it->second.empty()) {
      void* b = it->second.back();
      it->second.pop_back();
      p.cached -= bytes;
      return b;
    }
  }
  return ::operator new(bytes);
}

void pool_release(void* ptr, std::size_t bytes) noexcept {
  if (bytes >= kPoolMinBytes) {
    BlockPool& p = pool();
    if (p.cached + bytes <= kPoolCapBytes) {
      try {
        p.free[bytes].push_back(ptr);
        p.cached += bytes;
        return;
      } catch (...) {
      }
    }
  }
  ::operator delete(ptr);
}

void set_checked(bool on) { g_checked.store(on); }
bool checked() { return g_checked.load(); }

Tensor::Tensor() : Tensor(Shape{}, Buffer{0.0}) {}

Tensor::Tensor(Shape shape, Buffer data) : shape_(std::move(shape)) {
  for (auto d : shape_)
    if (d == 0) throw ShapeError("zero-sized dimension in shape " + shape_str(shape_));
  if (data.size() != shape_numel(shape_))
    throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                     shape_str(shape_));
  if (checked()) check_finite(data);
  data_ = std::make_shared<const Buffer>(std::move(data));
}

Tensor::Tensor(Shape shape, const std::vector<double>& data)
    : Tensor(std::move(shape), Buffer(data.begin(), data.end())) {}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), Buffer(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, Buffer{value}); }

Tensor Tensor::from(Shape shape, std::initializer_list<double> values) {
  return Tensor(std::move(shape), Buffer(values.begin(), values.end()));
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
  return (*data_)[0];
}

Tensor Tensor::reshape(Shape shape) const {
  if (shape_numel(shape) != numel())
    throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  Tensor out = *this;
  out.shape_ = std::move(shape);
  return out;
}

Tensor Tensor::row(std::size_t i) const { return slice_rows(i, i + 1); }

Tensor Tensor::slice_rows(std::size_t begin, std::size_t end) const {
  if (rank() == 0 || begin >= end || end > rows())
    throw ShapeError("row slice [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") out of range for " + shape_str(shape_));
  std::size_t rs = row_size();
  Shape s = shape_;
  s[0] = end - begin;
  return Tensor(std::move(s), Buffer(data_->begin() + static_cast<std::ptrdiff_t>(begin * rs),
                                     data_->begin() + static_cast<std::ptrdiff_t>(end * rs)));
}

bool Tensor::bit_equal(const Tensor& other) const {
  if (shape_ != other.shape_) return false;
  for (std::size_t i = 0; i < numel(); ++i)
    if (std::bit_cast<std::uint64_t>((*data_)[i]) !=
        std::bit_cast<std::uint64_t>((*other.data_)[i]))
      return false;
  return true;
}

Tensor stack_rows(std::span<const Tensor> rows) {
  if (rows.empty()) throw ShapeError("stack_rows of empty list");
  Shape inner(rows[0].shape().begin() + (rows[0].rank() ? 1 : 0), rows[0].shape().end());
  Buffer out;
  std::size_t count = 0;
  for (const auto& r : rows) {
    Shape ri(r.shape().begin() + (r.rank() ? 1 : 0), r.shape().end());
    if (ri != inner) throw ShapeError("stack_rows: inconsistent row shapes");
    out.insert(out.end(), r.data().begin(), r.data().end());
    count += r.rank() ? r.dim(0) : 1;
  }
  Shape s{count};
  s.insert(s.end(), inner.begin(), inner.end());
  return Tensor(std::move(s), std::move(out));
}

Tensor gather_rows(const Tensor& t, std::span<const std::size_t> indices) {
  if (t.rank() == 0) throw ShapeError("gather_rows on a scalar");
  std::size_t rs = t.row_size();
  Buffer out;
  out.reserve(indices.size() * rs);
  auto d = t.data();
  for (auto i : indices) {
    if (i >= t.rows()) throw ShapeError("gather_rows index out of range");
    out.insert(out.end(), d.begin() + static_cast<std::ptrdiff_t>(i * rs),
               d.begin() + static_cast<std::ptrdiff_t>((i + 1) * rs));
  }
  Shape s = t.shape();
  s[0] = indices.size();
  return Tensor(std::move(s), std::move(out));
}

void write_gten(std::ostream& out, const Tensor& t) {
  binio::write_bytes(out, "GTEN");
  binio::write_u32(out, kGtenVersion);
  binio::write_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) binio::write_u32(out, static_cast<std::uint32_t>(d));
  for (double v : t.data()) binio::write_f64(out, v);
}

Tensor read_gten(std::istream& in, std::size_t base_offset) {
  binio::Reader r(in, base_offset);
  r.expect_magic("GTEN");
  std::size_t at = r.offset();
  std::uint32_t version = r.u32("version");
  if (version != kGtenVersion) throw ParseError("unsupported GTEN version", at);
  at = r.offset();
  std::uint32_t rank = r.u32("rank");
  if (rank > 16) throw ParseError("implausible GTEN rank", at);
  Shape shape;
  for (std::uint32_t i = 0; i < rank; ++i) {
    at = r.offset();
    std::uint32_t d = r.u32("dimension");
    if (d == 0) throw ParseError("zero GTEN dimension", at);
    shape.push_back(d);
  }
  Buffer data(shape_numel(shape));
  for (auto& v : data) v = r.f64("payload");
  return Tensor(std::move(shape), std::move(data));
}

void save_tensor(const std::string& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path + " for writing");
  write_gten(out, t);
}

Tensor load_tensor(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  return read_gten(in);
}

}  // namespace guard
