#include "uwseg/flops.hpp"

namespace uwseg::flops {

namespace {

thread_local Counter* active_counter = nullptr;
thread_local std::vector<std::string> scope_stack;
thread_local std::string scope_path;

void rebuild_path() {
  scope_path.clear();
  for (const auto& s : scope_stack) {
    if (!scope_path.empty()) scope_path += '.';
    scope_path += s;
  }
}

}  // namespace

Counter::Counter() : previous_(active_counter) { active_counter = this; }

Counter::~Counter() { active_counter = previous_; }

int64_t Counter::total() const {
  int64_t t = 0;
  for (const auto& [_, n] : by_scope_) t += n;
  return t;
}

std::map<std::string, int64_t> Counter::aggregated(int depth) const {
  std::map<std::string, int64_t> out;
  for (const auto& [path, n] : by_scope_) {
    size_t end = 0;
    for (int level = 0; level < depth && end != std::string::npos; ++level) {
      end = path.find('.', level == 0 ? 0 : end + 1);
    }
    out[end == std::string::npos ? path : path.substr(0, end)] += n;
  }
  return out;
}

void Counter::add(int64_t n) { by_scope_[scope_path] += n; }

Scope::Scope(const std::string& name) {
  scope_stack.push_back(name);
  rebuild_path();
}

Scope::~Scope() {
  scope_stack.pop_back();
  rebuild_path();
}

void add(int64_t n) {
  if (active_counter) active_counter->add(n);
}

bool active() { return active_counter != nullptr; }

std::string current_scope() { return scope_path; }

}  // namespace uwseg::flops
