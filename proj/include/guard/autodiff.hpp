#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "guard/tensor.hpp"

namespace guard::ad {

struct Node {
  Tensor value;
  std::uint64_t tape_uid = 0;  // 0 for constants
  std::size_t id = 0;
};

// Handle to a value, optionally recorded on a Tape.
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  bool defined() const noexcept { return node_ != nullptr; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t numel() const { return value().numel(); }
  std::size_t rank() const { return value().rank(); }
  double item() const { return value().item(); }

  // True when recorded on the currently active tape.
  bool tracked() const noexcept;
  std::size_t id() const { return node_->id; }
  const std::shared_ptr<Node>& node() const noexcept { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

using Needs = std::vector<bool>;
// Receives the upstream gradient and the op's own output; returns one gradient
// per input (undefined where needs[i] is false). Must be written in terms of
// differentiable ops so that a depth-2 tape can differentiate it again.
using BackwardFn =
    std::function<std::vector<Var>(const Var& grad_out, const Var& out, const Needs& needs)>;

// ComputationRecord. Constructing a Tape makes it the active record of this
// thread until it is destroyed; tapes nest. A depth-2 tape additionally
// records the gradient computations themselves (grad(..., keep_graph=true)).
class Tape {
 public:
  explicit Tape(int depth = 1);
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  int depth() const noexcept { return depth_; }
  std::size_t size() const noexcept { return entries_.size(); }
  std::uint64_t uid() const noexcept { return uid_; }

  static Tape* current() noexcept;

  // Registers an input of the record.
  Var leaf(Tensor value);
  std::vector<Var> leaves(std::span<const Tensor> values);

 private:
  struct Entry {
    std::shared_ptr<Node> out;
    std::vector<std::shared_ptr<Node>> inputs;
    BackwardFn backward;  // empty for leaves
  };

  Var push(Tensor value, std::vector<std::shared_ptr<Node>> inputs, BackwardFn fn);

  friend Var record(Tensor value, const std::vector<Var>& inputs, BackwardFn fn);
  friend std::vector<Var> grad(const Var& y, std::span<const Var> wrt, bool keep_graph);

  int depth_;
  std::uint64_t uid_;
  Tape* previous_;
  std::deque<Entry> entries_;
};

// Whether ops currently record onto the active tape.
bool is_recording() noexcept;

class NoGrad {
 public:
  NoGrad();
  ~NoGrad();
  NoGrad(const NoGrad&) = delete;
  NoGrad& operator=(const NoGrad&) = delete;

 private:
  bool previous_;
};

Var constant(Tensor value);
inline Var detach(const Var& v) { return constant(v.value()); }

// Creates the op's output. Records it when recording is on and any input is
// tracked; inputs from other tapes are treated as constants.
Var record(Tensor value, const std::vector<Var>& inputs, BackwardFn fn);

// Reverse-mode gradients of the scalar `y` with respect to the leaves `wrt`.
// With keep_graph (depth-2 tapes only) the returned gradients are themselves
// recorded and can be differentiated again.
std::vector<Var> grad(const Var& y, std::span<const Var> wrt, bool keep_graph = false);
Var grad(const Var& y, const Var& wrt, bool keep_graph = false);

}  // namespace guard::ad
