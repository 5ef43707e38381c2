#include "uwseg/config.hpp"

#include <charconv>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <set>

#include "uwseg/errors.hpp"

#ifndef UWSEG_VERSION
#define UWSEG_VERSION "dev"
#endif

namespace uwseg {

using nlohmann::json;

namespace {

// Typed field access over one config section. Every key read is remembered so
// leftovers can be reported as unknown.
class Section {
 public:
  Section(const json& root, const std::string& name) : name_(name) {
    if (!root.contains(name)) return;
    node_ = &root.at(name);
    if (!node_->is_object()) throw ConfigError("config key '" + name + "' must be an object");
  }

  // `assign` returns false when the value has the wrong type.
  template <typename Fn>
  void read(const std::string& key, const char* type, Fn&& assign) {
    seen_.insert(key);
    if (!node_ || !node_->contains(key)) return;
    if (!assign(node_->at(key))) throw ConfigError("config key '" + path(key) + "' must be " + type);
  }

  void number(const std::string& key, double& out) {
    read(key, "a number", [&](const json& v) { return v.is_number() && (out = v.get<double>(), true); });
  }
  void number(const std::string& key, float& out) {
    read(key, "a number", [&](const json& v) { return v.is_number() && (out = v.get<float>(), true); });
  }
  template <typename Int>
  void integer(const std::string& key, Int& out) {
    read(key, "an integer", [&](const json& v) {
      if (!v.is_number_integer()) return false;
      if constexpr (std::is_unsigned_v<Int>) {
        if (v.get<int64_t>() < 0) return false;
      }
      out = v.get<Int>();
      return true;
    });
  }
  void boolean(const std::string& key, bool& out) {
    read(key, "a boolean", [&](const json& v) { return v.is_boolean() && (out = v.get<bool>(), true); });
  }
  void string(const std::string& key, std::string& out) {
    read(key, "a string", [&](const json& v) { return v.is_string() && (out = v.get<std::string>(), true); });
  }
  void pair(const std::string& key, double& a, double& b) {
    read(key, "an array of two numbers", [&](const json& v) {
      if (!v.is_array() || v.size() != 2 || !v[0].is_number() || !v[1].is_number()) return false;
      a = v[0].get<double>();
      b = v[1].get<double>();
      return true;
    });
  }

  void reject_unknown() const {
    if (!node_) return;
    for (const auto& [k, _] : node_->items()) {
      if (!seen_.count(k)) throw ConfigError("unknown config key '" + path(k) + "'");
    }
  }

 private:
  std::string path(const std::string& key) const { return name_ + "." + key; }

  std::string name_;
  const json* node_ = nullptr;
  std::set<std::string> seen_;
};

}  // namespace

void RunConfig::apply_seed(uint64_t s) {
  seed = s;
  model.seed = s;
  train.seed = s;
}

void RunConfig::validate() const {
  model.validate();
  if (train.max_iters < 1) throw ConfigError("schedule.max_iters must be >= 1");
  if (train.batch_size < 1) throw ConfigError("schedule.batch_size must be >= 1");
  if (train.optim.lr < 0.0f) throw ConfigError("optim.lr must be >= 0");
  if (data.crop < 1 || data.crop % model.size_multiple() != 0) {
    throw ConfigError("data.crop " + std::to_string(data.crop) + " must be a positive multiple of " +
                      std::to_string(model.size_multiple()));
  }
  if (data.scale_lo <= 0.0 || data.scale_hi < data.scale_lo) throw ConfigError("data.scale_range must satisfy 0 < lo <= hi");
  if (data.hflip < 0.0 || data.hflip > 1.0) throw ConfigError("data.hflip must be in [0, 1]");
  if (data.root.empty() && data.synthetic_count < 1) throw ConfigError("data.synthetic_count must be >= 1");
}

RunConfig config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  static const std::set<std::string> kSections{"model", "optim", "schedule", "data", "loss", "seed"};
  for (const auto& [k, _] : j.items()) {
    if (!kSections.count(k)) throw ConfigError("unknown config key '" + k + "'");
  }
  RunConfig cfg;
  if (j.contains("seed")) {
    if (!j.at("seed").is_number_unsigned()) throw ConfigError("config key 'seed' must be a nonnegative integer");
    cfg.apply_seed(j.at("seed").get<uint64_t>());
  }

  Section model(j, "model");
  model.integer("P", cfg.model.uiqa.P);
  model.integer("N_M", cfg.model.uiqa.n_layers);
  model.integer("N_C", cfg.model.uiqa.n_heads);
  model.integer("C_embed", cfg.model.decoder_embed);
  model.integer("C_uiqa", cfg.model.uiqa.embed);
  model.integer("n_cls", cfg.model.n_cls);
  model.boolean("use_uiqa", cfg.model.use_uiqa);
  model.number("dropout", cfg.model.dropout);
  std::string decoder = to_string(cfg.model.decoder);
  model.string("decoder", decoder);
  cfg.model.decoder = parse_decoder(decoder);
  model.reject_unknown();

  Section optim(j, "optim");
  optim.number("lr", cfg.train.optim.lr);
  optim.number("wd", cfg.train.optim.weight_decay);
  double b1 = cfg.train.optim.beta1, b2 = cfg.train.optim.beta2;
  optim.pair("betas", b1, b2);
  cfg.train.optim.beta1 = static_cast<float>(b1);
  cfg.train.optim.beta2 = static_cast<float>(b2);
  optim.number("eps", cfg.train.optim.eps);
  optim.number("grad_clip", cfg.train.optim.grad_clip);
  optim.reject_unknown();

  Section schedule(j, "schedule");
  schedule.integer("max_iters", cfg.train.max_iters);
  schedule.number("power", cfg.train.power);
  schedule.integer("batch_size", cfg.train.batch_size);
  schedule.integer("checkpoint_every", cfg.train.checkpoint_every);
  schedule.reject_unknown();

  Section data(j, "data");
  data.string("root", cfg.data.root);
  data.string("val_root", cfg.data.val_root);
  data.string("palette", cfg.data.palette);
  data.integer("crop", cfg.data.crop);
  data.pair("scale_range", cfg.data.scale_lo, cfg.data.scale_hi);
  data.number("hflip", cfg.data.hflip);
  data.boolean("augment", cfg.data.augment);
  data.integer("seed", cfg.data.seed);
  data.integer("synthetic_count", cfg.data.synthetic_count);
  data.integer("synthetic_size", cfg.data.synthetic_size);
  data.reject_unknown();

  Section loss(j, "loss");
  loss.number("lambda1", cfg.train.loss.lambda1);
  loss.number("lambda2", cfg.train.loss.lambda2);
  loss.integer("edge_radius", cfg.train.edge_radius);
  loss.reject_unknown();

  cfg.validate();
  return cfg;
}

namespace {

// Shortest decimal that reads back as the same float, so 0.1f prints as 0.1.
double tidy(float v) {
  char buf[32];
  const auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return ec == std::errc{} ? std::strtod(std::string(buf, end).c_str(), nullptr) : v;
}

}  // namespace

json config_to_json(const RunConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["model"] = {{"P", c.model.uiqa.P},
                {"N_M", c.model.uiqa.n_layers},
                {"N_C", c.model.uiqa.n_heads},
                {"C_embed", c.model.decoder_embed},
                {"C_uiqa", c.model.uiqa.embed},
                {"n_cls", c.model.n_cls},
                {"use_uiqa", c.model.use_uiqa},
                {"dropout", tidy(c.model.dropout)},
                {"decoder", to_string(c.model.decoder)}};
  j["optim"] = {{"lr", tidy(c.train.optim.lr)},
                {"wd", tidy(c.train.optim.weight_decay)},
                {"betas", {tidy(c.train.optim.beta1), tidy(c.train.optim.beta2)}},
                {"eps", tidy(c.train.optim.eps)},
                {"grad_clip", tidy(c.train.optim.grad_clip)}};
  j["schedule"] = {{"max_iters", c.train.max_iters},
                   {"power", tidy(c.train.power)},
                   {"batch_size", c.train.batch_size},
                   {"checkpoint_every", c.train.checkpoint_every}};
  j["data"] = {{"root", c.data.root},
               {"val_root", c.data.val_root},
               {"palette", c.data.palette},
               {"crop", c.data.crop},
               {"scale_range", {tidy(c.data.scale_lo), tidy(c.data.scale_hi)}},
               {"hflip", tidy(c.data.hflip)},
               {"augment", c.data.augment},
               {"seed", c.data.seed},
               {"synthetic_count", c.data.synthetic_count},
               {"synthetic_size", c.data.synthetic_size}};
  j["loss"] = {{"lambda1", tidy(c.train.loss.lambda1)}, {"lambda2", tidy(c.train.loss.lambda2)}, {"edge_radius", c.train.edge_radius}};
  return j;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IngestionError("cannot open config " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw IngestionError("config " + path + " is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

void save_config(const std::string& path, const RunConfig& cfg) {
  std::ofstream out(path);
  if (!out) throw IngestionError("cannot write config " + path);
  out << config_to_json(cfg).dump(2) << "\n";
}

std::string version_string() { return UWSEG_VERSION; }

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

json RunManifest::to_json() const {
  return {{"version", version}, {"seed", seed}, {"started", started}, {"outputs", outputs}, {"config", config}};
}

void RunManifest::write(const std::string& path) const {
  if (std::filesystem::exists(path)) throw IngestionError("run manifest " + path + " already exists");
  std::ofstream out(path);
  if (!out) throw IngestionError("cannot write run manifest " + path);
  out << to_json().dump(2) << "\n";
}

}  // namespace uwseg
