#pragma once

#include <string>
#include <utility>
#include <vector>

#include "uwseg/tensor.hpp"

// Lets tests observe intermediate tensors (attention maps, gates) without
// widening module interfaces. Emission is a no-op unless a Recorder is live.
namespace uwseg::probe {

class Recorder {
 public:
  Recorder();
  ~Recorder();
  Recorder(const Recorder&) = delete;
  Recorder& operator=(const Recorder&) = delete;

  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  /// Entries whose name starts with `prefix`.
  std::vector<Tensor> find(const std::string& prefix) const;

  void add(std::string name, Tensor t) { entries_.emplace_back(std::move(name), std::move(t)); }

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
  Recorder* previous_;
};

bool active();
/// Stores a detached copy of `t` under `name`.
void emit(const std::string& name, const Tensor& t);

}  // namespace uwseg::probe
