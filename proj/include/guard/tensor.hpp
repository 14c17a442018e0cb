#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace guard {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// High-water-mark accounting for every tensor buffer allocated in the process.
struct MemoryStats {
  static std::size_t current_bytes();
  static std::size_t peak_bytes();
  static void reset_peak();
  static void on_alloc(std::size_t bytes);
  static void on_free(std::size_t bytes);
};

// Per-thread cache of freed blocks keyed by exact size, so the same tensor
// shapes allocated every training step skip malloc and fresh page faults.
void* pool_allocate(std::size_t bytes);
void pool_release(void* p, std::size_t bytes) noexcept;

template <class T>
struct TrackingAllocator {
  using value_type = T;

  TrackingAllocator() noexcept = default;
  template <class U>
  TrackingAllocator(const TrackingAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    MemoryStats::on_alloc(n * sizeof(T));
    return static_cast<T*>(pool_allocate(n * sizeof(T)));
  }
  void deallocate(T* p, std::size_t n) noexcept {
    MemoryStats::on_free(n * sizeof(T));
    pool_release(p, n * sizeof(T));
  }
  // Buffer(n) leaves doubles uninitialized; callers that need zeros pass 0.0.
  template <class U>
  void construct(U* p) noexcept {
    ::new (static_cast<void*>(p)) U;
  }
  template <class U, class... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }
  template <class U>
  bool operator==(const TrackingAllocator<U>&) const noexcept {
    return true;
  }
};

using Buffer = std::vector<double, TrackingAllocator<double>>;

// Non-finite values are rejected at construction while checked mode is on
// (the default).
void set_checked(bool on);
bool checked();

class CheckedScope {
 public:
  explicit CheckedScope(bool on) : previous_(checked()) { set_checked(on); }
  ~CheckedScope() { set_checked(previous_); }
  CheckedScope(const CheckedScope&) = delete;
  CheckedScope& operator=(const CheckedScope&) = delete;

 private:
  bool previous_;
};

// Immutable dense row-major array of doubles. Copies share storage.
class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, Buffer data);
  Tensor(Shape shape, const std::vector<double>& data);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor from(Shape shape, std::initializer_list<double> values);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t numel() const noexcept { return data_->size(); }

  std::span<const double> data() const noexcept { return {data_->data(), data_->size()}; }
  double operator[](std::size_t i) const { return (*data_)[i]; }
  double item() const;

  Tensor reshape(Shape shape) const;
  Buffer to_buffer() const { return Buffer(data_->begin(), data_->end()); }
  std::vector<double> to_vector() const { return {data_->begin(), data_->end()}; }

  // Rows along the leading dimension.
  std::size_t rows() const { return shape_.empty() ? 1 : shape_[0]; }
  std::size_t row_size() const { return rows() == 0 ? 0 : numel() / rows(); }
  Tensor row(std::size_t i) const;
  Tensor slice_rows(std::size_t begin, std::size_t end) const;

  bool bit_equal(const Tensor& other) const;
  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

 private:
  Shape shape_;
  std::shared_ptr<const Buffer> data_;
};

Tensor stack_rows(std::span<const Tensor> rows);
Tensor gather_rows(const Tensor& t, std::span<const std::size_t> indices);

// GTEN container: magic "GTEN", u32 version, u32 rank, u32 dims, f64 LE payload.
void write_gten(std::ostream& out, const Tensor& t);
Tensor read_gten(std::istream& in, std::size_t base_offset = 0);
void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

}  // namespace guard
