#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace uwseg::flops {

/// Collects analytic FLOP counts reported by ops while it is active.
/// Counts are attributed to the innermost open Scope path.
///
/// Counting rules: 2 FLOPs per multiply-accumulate for conv/linear/matmul,
/// one FLOP per output element for elementwise, normalization, softmax and
/// resampling.
class Counter {
 public:
  Counter();
  ~Counter();
  Counter(const Counter&) = delete;
  Counter& operator=(const Counter&) = delete;

  int64_t total() const;
  /// Totals keyed by full scope path ("" for ops outside any scope).
  const std::map<std::string, int64_t>& by_scope() const { return by_scope_; }
  /// Totals aggregated to the first `depth` path components.
  std::map<std::string, int64_t> aggregated(int depth) const;

  void add(int64_t n);

 private:
  std::map<std::string, int64_t> by_scope_;
  Counter* previous_;
};

/// RAII scope naming the module that subsequent ops belong to.
class Scope {
 public:
  explicit Scope(const std::string& name);
  ~Scope();
  Scope(const Scope&) = delete;
  Scope& operator=(const Scope&) = delete;
};

/// Reports `n` FLOPs to the active counter, if any.
void add(int64_t n);
bool active();
std::string current_scope();

}  // namespace uwseg::flops
