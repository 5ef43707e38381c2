#include "uwseg/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <vector>

#include "uwseg/errors.hpp"

namespace uwseg {

static_assert(std::endian::native == std::endian::little, "checkpoint payload assumes a little-endian host");

namespace {

constexpr const char* kMagic = "uwseg-checkpoint 1";

struct Entry {
  Shape shape;
  int64_t offset = 0;  // in floats
};

std::string shape_field(const Shape& s) {
  std::string out;
  for (size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out.empty() ? "scalar" : out;
}

Shape parse_shape(const std::string& field, const std::string& name) {
  if (field == "scalar") return {};
  Shape s;
  std::stringstream ss(field);
  std::string part;
  while (std::getline(ss, part, 'x')) {
    try {
      size_t used = 0;
      const long long d = std::stoll(part, &used);
      if (used != part.size() || d <= 0) throw std::invalid_argument(part);
      s.push_back(d);
    } catch (const std::exception&) {
      throw CheckpointError("checkpoint manifest: bad shape '" + field + "' for " + name);
    }
  }
  return s;
}

std::vector<std::pair<std::string, Tensor>> collect(const nn::ParameterStore& store, const AdamW* optim) {
  std::vector<std::pair<std::string, Tensor>> out;
  for (const auto& [name, t] : store.state()) out.emplace_back(name, t);
  if (optim) {
    for (const auto& [name, t] : optim->first_moments()) out.emplace_back("optim.m." + name, t);
    for (const auto& [name, t] : optim->second_moments()) out.emplace_back("optim.v." + name, t);
  }
  return out;
}

}  // namespace

void save_checkpoint(const std::string& path, const nn::ParameterStore& store, const AdamW* optim) {
  std::ofstream payload(path, std::ios::binary);
  std::ofstream manifest(path + ".manifest");
  if (!payload || !manifest) throw CheckpointError("cannot write checkpoint " + path);
  manifest << kMagic << "\n";
  manifest << "step " << (optim ? optim->steps() : 0) << "\n";
  int64_t offset = 0;
  for (const auto& [name, t] : collect(store, optim)) {
    manifest << name << " " << shape_field(t.shape()) << " " << offset << "\n";
    payload.write(reinterpret_cast<const char*>(t.ptr()), static_cast<std::streamsize>(t.numel() * sizeof(float)));
    offset += t.numel();
  }
  if (!payload || !manifest) throw CheckpointError("failed while writing checkpoint " + path);
}

void load_checkpoint(const std::string& path, nn::ParameterStore& store, AdamW* optim, const std::string& prefix) {
  std::ifstream manifest(path + ".manifest");
  if (!manifest) throw CheckpointError("cannot open checkpoint manifest " + path + ".manifest");
  std::string line;
  if (!std::getline(manifest, line) || line != kMagic) {
    throw CheckpointError("checkpoint manifest " + path + ".manifest has no valid header");
  }
  int64_t step = 0;
  {
    std::string key;
    if (!std::getline(manifest, line) || !(std::istringstream(line) >> key >> step) || key != "step" || step < 0) {
      throw CheckpointError("checkpoint manifest " + path + ".manifest has no valid step line");
    }
  }

  std::map<std::string, Entry> entries;
  std::vector<std::string> order;
  int64_t expected_offset = 0;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string name, shape_text, offset_text, extra;
    if (!(ls >> name >> shape_text >> offset_text) || (ls >> extra)) {
      throw CheckpointError("checkpoint manifest: malformed line for " + (name.empty() ? "<unnamed>" : name));
    }
    Entry e;
    e.shape = parse_shape(shape_text, name);
    try {
      size_t used = 0;
      e.offset = std::stoll(offset_text, &used);
      if (used != offset_text.size()) throw std::invalid_argument(offset_text);
    } catch (const std::exception&) {
      throw CheckpointError("checkpoint manifest: bad offset '" + offset_text + "' for " + name);
    }
    if (e.offset != expected_offset) {
      throw CheckpointError("checkpoint manifest: offset of " + name + " is " + std::to_string(e.offset) +
                            ", expected " + std::to_string(expected_offset));
    }
    expected_offset += shape_numel(e.shape);
    if (!entries.emplace(name, e).second) throw CheckpointError("checkpoint manifest: duplicate entry " + name);
    order.push_back(name);
  }

  std::ifstream payload(path, std::ios::binary | std::ios::ate);
  if (!payload) throw CheckpointError("cannot open checkpoint payload " + path);
  const auto bytes = static_cast<int64_t>(payload.tellg());
  if (bytes != expected_offset * static_cast<int64_t>(sizeof(float))) {
    throw CheckpointError("checkpoint payload " + path + " has " + std::to_string(bytes) + " bytes, manifest expects " +
                          std::to_string(expected_offset * static_cast<int64_t>(sizeof(float))));
  }

  const bool full = prefix.empty();
  const auto wanted = [&](const std::string& name) { return name.rfind(prefix, 0) == 0; };

  // Validate everything before touching the model so a failed load leaves it intact.
  std::vector<std::pair<std::string, Tensor>> targets;
  for (const auto& [name, t] : collect(store, full ? optim : nullptr)) {
    if (!wanted(name)) continue;
    auto it = entries.find(name);
    if (it == entries.end()) throw CheckpointError("checkpoint " + path + " has no entry for " + name);
    if (it->second.shape != t.shape()) {
      throw CheckpointError("checkpoint entry " + name + " has shape " + shape_str(it->second.shape) +
                            " but the model expects " + shape_str(t.shape()));
    }
    targets.emplace_back(name, t);
  }
  if (full) {
    for (const std::string& name : order) {
      if (name.starts_with("optim.") && !optim) continue;
      if (!store.contains(name) && !name.starts_with("optim.")) {
        throw CheckpointError("checkpoint entry " + name + " does not exist in the model");
      }
    }
  }

  for (auto& [name, t] : targets) {
    const Entry& e = entries.at(name);
    payload.seekg(e.offset * static_cast<int64_t>(sizeof(float)));
    Tensor dst = t;
    payload.read(reinterpret_cast<char*>(dst.ptr()), static_cast<std::streamsize>(dst.numel() * sizeof(float)));
    if (!payload) throw CheckpointError("failed reading " + name + " from " + path);
  }
  if (full && optim) optim->set_steps(step);
}

}  // namespace uwseg
