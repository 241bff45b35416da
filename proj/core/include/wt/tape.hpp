#pragma once

#include <functional>
#include <stdexcept>
#include <vector>

#include "wt/tensor.hpp"

namespace wt {

// Reverse-mode tape. Ops append their backward closure in execution order,
// which is a topological order by construction; backward replays the record
// once, in reverse. The tape is confined to a single training thread.
template <class T>
class Tape {
 public:
  void record(std::function<void()> backward_fn) { ops_.push_back(std::move(backward_fn)); }

  size_t size() const { return ops_.size(); }

  void backward(Tensor<T>& loss) {
    if (loss.numel() != 1) throw std::invalid_argument("backward: loss must be a scalar");
    if (!loss.requires_grad || !loss.grad) {
      throw std::invalid_argument("backward: loss is not part of the traced graph");
    }
    (*loss.grad)[0] = T(1);
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
  }

  void clear() { ops_.clear(); }

 private:
  std::vector<std::function<void()>> ops_;
};

template <class T>
inline thread_local Tape<T>* tl_current_tape = nullptr;

template <class T>
Tape<T>* current_tape() {
  return tl_current_tape<T>;
}

// RAII activation of a tape on the current thread.
template <class T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : prev_(tl_current_tape<T>) { tl_current_tape<T> = &tape; }
  ~TapeScope() { tl_current_tape<T> = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* prev_;
};

}  // namespace wt
