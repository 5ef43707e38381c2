#include "uwseg/probe.hpp"

namespace uwseg::probe {

namespace {
thread_local Recorder* active_recorder = nullptr;
}

Recorder::Recorder() : previous_(active_recorder) { active_recorder = this; }

Recorder::~Recorder() { active_recorder = previous_; }

std::vector<Tensor> Recorder::find(const std::string& prefix) const {
  std::vector<Tensor> out;
  for (const auto& [name, t] : entries_) {
    if (name.rfind(prefix, 0) == 0) out.push_back(t);
  }
  return out;
}

bool active() { return active_recorder != nullptr; }

void emit(const std::string& name, const Tensor& t) {
  if (active_recorder) active_recorder->add(name, t.detach());
}

}  // namespace uwseg::probe
