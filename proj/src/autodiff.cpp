#include "guard/autodiff.hpp"

#include <atomic>

#include "guard/errors.hpp"
#include "guard/ops.hpp"

namespace guard::ad {

namespace {

thread_local Tape* t_current = nullptr;
thread_local bool t_recording = true;
std::atomic<std::uint64_t> g_next_uid{1};

}  // namespace

const Tensor& Var::value() const {
  if (!node_) throw GraphError("use of an undefined Var");
  return node_->value;
}

bool Var::tracked() const noexcept {
  return node_ && node_->tape_uid != 0 && t_current && t_current->uid() == node_->tape_uid;
}

Tape::Tape(int depth) : depth_(depth), uid_(g_next_uid.fetch_add(1)), previous_(t_current) {
  if (depth != 1 && depth != 2) throw GraphError("tape depth must be 1 or 2");
  t_current = this;
}

Tape::~Tape() { t_current = previous_; }

Tape* Tape::current() noexcept { return t_current; }

Var Tape::leaf(Tensor value) { return push(std::move(value), {}, BackwardFn{}); }

std::vector<Var> Tape::leaves(std::span<const Tensor> values) {
  std::vector<Var> out;
  out.reserve(values.size());
  for (const auto& v : values) out.push_back(leaf(v));
  return out;
}

Var Tape::push(Tensor value, std::vector<std::shared_ptr<Node>> inputs, BackwardFn fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->tape_uid = uid_;
  node->id = entries_.size();
  entries_.push_back(Entry{node, std::move(inputs), std::move(fn)});
  return Var(node);
}

bool is_recording() noexcept { return t_recording && t_current != nullptr; }

NoGrad::NoGrad() : previous_(t_recording) { t_recording = false; }
NoGrad::~NoGrad() { t_recording = previous_; }

Var constant(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return Var(node);
}

Var record(Tensor value, const std::vector<Var>& inputs, BackwardFn fn) {
  if (!is_recording()) return constant(std::move(value));
  bool any = false;
  for (const auto& in : inputs) any = any || in.tracked();
  if (!any) return constant(std::move(value));
  std::vector<std::shared_ptr<Node>> nodes;
  nodes.reserve(inputs.size());
  for (const auto& in : inputs) nodes.push_back(in.node());
  return t_current->push(std::move(value), std::move(nodes), std::move(fn));
}

namespace {

// Temporarily forces the recording flag.
class RecordingScope {
 public:
  explicit RecordingScope(bool on) : previous_(t_recording) { t_recording = on; }
  ~RecordingScope() { t_recording = previous_; }

 private:
  bool previous_;
};

}  // namespace

std::vector<Var> grad(const Var& y, std::span<const Var> wrt, bool keep_graph) {
  Tape* tape = t_current;
  if (!tape) throw GraphError("grad called without an active record");
  if (!y.defined()) throw GraphError("grad of an undefined value");
  if (y.numel() != 1) throw ShapeError("grad requires a scalar, got shape " + shape_str(y.shape()));
  if (keep_graph && tape->depth() < 2)
    throw GraphError("keep_graph requires a depth-2 record");

  for (const auto& w : wrt) {
    if (!w.tracked() || tape->entries_[w.id()].backward)
      throw GraphError("wrt tensor is not an input of the record");
  }

  auto zeros_for_wrt = [&] {
    std::vector<Var> out;
    for (const auto& w : wrt) out.push_back(constant(Tensor::zeros(w.shape())));
    return out;
  };

  if (!y.tracked()) {
    if (y.node()->tape_uid != 0) throw GraphError("scalar is not part of the active record");
    return zeros_for_wrt();
  }

  const std::uint64_t uid = tape->uid();
  const std::size_t n = y.id() + 1;
  auto input_id = [&](const std::shared_ptr<Node>& in, std::size_t& out) {
    if (in->tape_uid != uid || in->id >= n) return false;
    out = in->id;
    return true;
  };

  std::vector<char> needed(n, 0);
  for (const auto& w : wrt)
    if (w.id() < n) needed[w.id()] = 1;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& e = tape->entries_[i];
    if (!e.backward) continue;
    for (const auto& in : e.inputs) {
      std::size_t j;
      if (input_id(in, j) && needed[j]) {
        needed[i] = 1;
        break;
      }
    }
  }
  if (!needed[y.id()]) return zeros_for_wrt();

  std::vector<Var> grads(n);
  grads[y.id()] = constant(Tensor::full(y.shape(), 1.0));

  RecordingScope scope(keep_graph);
  for (std::size_t k = n; k-- > 0;) {
    if (!needed[k] || !grads[k].defined()) continue;
    const auto& e = tape->entries_[k];
    if (!e.backward) continue;
    Needs needs(e.inputs.size(), false);
    bool any = false;
    for (std::size_t j = 0; j < e.inputs.size(); ++j) {
      std::size_t id;
      needs[j] = input_id(e.inputs[j], id) && needed[id];
      any = any || needs[j];
    }
    if (!any) continue;
    // Entries live in a deque, so `e` stays valid while the backward call
    // appends new entries.
    std::vector<Var> outs = e.backward(grads[k], Var(e.out), needs);
    if (outs.size() != e.inputs.size()) throw GraphError("backward returned wrong arity");
    for (std::size_t j = 0; j < e.inputs.size(); ++j) {
      if (!needs[j]) continue;
      if (!outs[j].defined()) throw GraphError("backward omitted a required gradient");
      if (outs[j].shape() != e.inputs[j]->value.shape())
        throw ShapeError("backward gradient shape " + shape_str(outs[j].shape()) +
                         " does not match input " + shape_str(e.inputs[j]->value.shape()));
      std::size_t id = e.inputs[j]->id;
      grads[id] = grads[id].defined() ? add(grads[id], outs[j]) : outs[j];
    }
    grads[k] = Var();
  }

  std::vector<Var> out;
  out.reserve(wrt.size());
  for (const auto& w : wrt) {
    const Var& g = grads[w.id() < n ? w.id() : 0];
    if (w.id() < n && g.defined())
      out.push_back(g);
    else
      out.push_back(constant(Tensor::zeros(w.shape())));
  }
  return out;
}

Var grad(const Var& y, const Var& wrt, bool keep_graph) {
  return grad(y, std::span<const Var>(&wrt, 1), keep_graph)[0];
}

}  // namespace guard::ad
