#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>

#include "uwseg/cli.hpp"
#include "uwseg/config.hpp"
#include "uwseg/data.hpp"
#include "uwseg/errors.hpp"

using namespace uwseg;
namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code;
  std::string out;
  std::string err;
};

CliResult cli(std::vector<std::string> args) {
  args.insert(args.begin(), "uwseg");
  std::vector<const char*> argv;
  for (const std::string& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("uwseg_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// Small, fast run: 4 synthetic 64x64 scenes, 2 iterations.
void write_quick_config(const fs::path& path) {
  std::ofstream(path) << R"({
  "seed": 3,
  "model": {"n_cls": 3, "N_M": 1, "N_C": 1},
  "optim": {"lr": 0.001},
  "schedule": {"max_iters": 2, "batch_size": 2},
  "data": {"crop": 64, "synthetic_count": 4, "synthetic_size": 64, "augment": false}
})";
}

int64_t csv_value(const fs::path& csv, const std::string& key) {
  std::ifstream in(csv);
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind(key + ",", 0) == 0) return std::stoll(line.substr(key.size() + 1));
  }
  ADD_FAILURE() << key << " missing from " << csv;
  return -1;
}

}  // namespace

// ---- config ------------------------------------------------------------------------------------------

TEST(Config, JsonRoundTrip) {
  RunConfig cfg;
  cfg.apply_seed(9);
  cfg.model.n_cls = 6;
  cfg.model.decoder = DecoderKind::allmlp;
  cfg.train.optim.beta2 = 0.99f;
  cfg.data.scale_lo = 0.75;
  const nlohmann::json j = config_to_json(cfg);
  EXPECT_EQ(config_to_json(config_from_json(j)), j);
  EXPECT_EQ(config_from_json(j).model.seed, 9u);
}

TEST(Config, EmptyObjectGivesDefaults) {
  const RunConfig cfg = config_from_json(nlohmann::json::object());
  EXPECT_EQ(cfg.model.uiqa.n_layers, 4);
  EXPECT_EQ(cfg.model.uiqa.n_heads, 4);
  EXPECT_FLOAT_EQ(cfg.train.optim.lr, 6e-6f);
  EXPECT_FLOAT_EQ(cfg.train.loss.lambda1, 1.0f);
  EXPECT_FLOAT_EQ(cfg.train.loss.lambda2, 3.0f);
}

TEST(Config, ErrorsNameKeyAndExpectedType) {
  auto message = [](const char* text) {
    try {
      config_from_json(nlohmann::json::parse(text));
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  EXPECT_EQ(message(R"({"optim": {"lr": "high"}})"), "config key 'optim.lr' must be a number");
  EXPECT_EQ(message(R"({"model": {"N_C": 1.5}})"), "config key 'model.N_C' must be an integer");
  EXPECT_EQ(message(R"({"data": {"scale_range": [1]}})"), "config key 'data.scale_range' must be an array of two numbers");
  EXPECT_EQ(message(R"({"loss": {"lambda3": 1}})"), "unknown config key 'loss.lambda3'");
  EXPECT_EQ(message(R"({"extras": {}})"), "unknown config key 'extras'");
  EXPECT_NE(message(R"({"data": {"crop": 96}})").find("multiple of 64"), std::string::npos);
  EXPECT_NE(message(R"({"model": {"decoder": "fpn"}})").find("fpn"), std::string::npos);
}

TEST(Config, UnreadableFileIsIngestionError) {
  const fs::path dir = temp_dir("config_io");
  EXPECT_THROW(load_config((dir / "none.json").string()), IngestionError);
  std::ofstream(dir / "broken.json") << "{ not json";
  EXPECT_THROW(load_config((dir / "broken.json").string()), IngestionError);
}

TEST(Manifest, WrittenOnceWithAllFields) {
  const fs::path dir = temp_dir("manifest");
  RunManifest m;
  m.config = config_to_json(RunConfig{});
  m.seed = 4;
  m.version = version_string();
  m.started = utc_timestamp();
  m.outputs = {{"checkpoint", "a.ckpt"}};
  m.write((dir / "run.json").string());
  const nlohmann::json j = nlohmann::json::parse(read_file(dir / "run.json"));
  for (const char* key : {"version", "seed", "started", "outputs", "config"}) EXPECT_TRUE(j.contains(key)) << key;
  EXPECT_TRUE(std::regex_match(j["started"].get<std::string>(), std::regex(R"(\d{4}-\d\d-\d\dT\d\d:\d\d:\d\dZ)")));
  EXPECT_THROW(m.write((dir / "run.json").string()), IngestionError);
}

// ---- commands -------------------------------------------------------------------------------------------

TEST(Cli, HelpAndUsageErrors) {
  EXPECT_EQ(cli({"--help"}).code, kExitOk);
  EXPECT_EQ(cli({}).code, kExitConfig);
  EXPECT_EQ(cli({"train", "--bogus"}).code, kExitConfig);
  const CliResult r = cli({"inspect", "--flops-at", "12by12"});
  EXPECT_EQ(r.code, kExitConfig);
  EXPECT_NE(r.err.find("HxW"), std::string::npos) << r.err;
}

TEST(Cli, InspectListsDefaultArchitecture) {
  const CliResult r = cli({"inspect", "--flops-at", "128x128"});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  for (const char* line : {"stage1 channels 32", "stage2 channels 64", "stage3 channels 160", "stage4 channels 256",
                           "uiqa N_M=4 N_C=4"}) {
    EXPECT_NE(r.out.find(line), std::string::npos) << line;
  }
  // The FLOPs breakdown rows sum to the reported total.
  const std::regex total_re(R"(flops at 128x128 (\d+))"), row_re(R"(\n  ([a-z0-9_.]+) +(\d+))");
  std::smatch m;
  ASSERT_TRUE(std::regex_search(r.out, m, total_re));
  const int64_t total = std::stoll(m[1]);
  const std::string flops_part = r.out.substr(static_cast<size_t>(m.position(0)));
  int64_t sum = 0;
  for (auto it = std::sregex_iterator(flops_part.begin(), flops_part.end(), row_re); it != std::sregex_iterator(); ++it) {
    sum += std::stoll((*it)[2]);
  }
  EXPECT_EQ(sum, total);
}

TEST(Cli, TrainWritesArtifactsAndIsSeedDeterministic) {
  const fs::path a = temp_dir("train_a"), b = temp_dir("train_b");
  write_quick_config(a / "run.json");
  write_quick_config(b / "run.json");
  for (const fs::path& dir : {a, b}) {
    const CliResult r = cli({"train", "--workdir", dir.string(), "--config", "run.json", "--seed", "11"});
    ASSERT_EQ(r.code, kExitOk) << r.err;
  }
  for (const char* f : {"model.ckpt", "model.ckpt.manifest", "model.ckpt.config.json", "model.ckpt.run.json",
                        "model.ckpt.done.json", "train_log.csv"}) {
    EXPECT_TRUE(fs::exists(a / f)) << f;
  }
  EXPECT_EQ(read_file(a / "model.ckpt"), read_file(b / "model.ckpt"));
  EXPECT_EQ(read_file(a / "train_log.csv"), read_file(b / "train_log.csv"));
  // A second run into the same paths must not overwrite the manifest.
  EXPECT_EQ(cli({"train", "--workdir", a.string(), "--config", "run.json"}).code, kExitIngestion);
}

TEST(Cli, SyntheticTrainNeedsNoDataset) {
  const fs::path dir = temp_dir("synthetic");
  write_quick_config(dir / "run.json");
  const CliResult r = cli({"train", "--workdir", dir.string(), "--config", "run.json", "--synthetic", "--n-cls", "4",
                           "--iters", "1", "--out", "runs/a/model.ckpt", "--log", "logs/train.csv"});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  EXPECT_EQ(load_config((dir / "runs/a/model.ckpt.config.json").string()).model.n_cls, 4);
  EXPECT_TRUE(fs::exists(dir / "logs/train.csv"));
}

TEST(Cli, MissingPaletteIsIngestionError) {
  const fs::path dir = temp_dir("palette");
  fs::create_directories(dir / "data" / "images");
  fs::create_directories(dir / "data" / "masks");
  std::ofstream(dir / "run.json") << R"({"data": {"root": "data", "palette": "missing.json"}})";
  const CliResult r = cli({"train", "--workdir", dir.string(), "--config", "run.json", "--iters", "1"});
  EXPECT_EQ(r.code, kExitIngestion);
  EXPECT_NE(r.err.find("missing.json"), std::string::npos) << r.err;
}

TEST(Cli, EvalIsRepeatableAndChecksClassCount) {
  const fs::path dir = temp_dir("eval");
  write_quick_config(dir / "run.json");
  ASSERT_EQ(cli({"train", "--workdir", dir.string(), "--config", "run.json"}).code, kExitOk);
  const CliResult first = cli({"eval", "--workdir", dir.string(), "--checkpoint", "model.ckpt", "--band", "2"});
  const CliResult second = cli({"eval", "--workdir", dir.string(), "--checkpoint", "model.ckpt", "--band", "2"});
  ASSERT_EQ(first.code, kExitOk) << first.err;
  EXPECT_EQ(first.out, second.out);
  EXPECT_NE(first.out.find("mIoU"), std::string::npos);
  const CliResult mismatch = cli({"eval", "--workdir", dir.string(), "--checkpoint", "model.ckpt", "--n-cls", "5"});
  EXPECT_EQ(mismatch.code, kExitConfig);
  EXPECT_NE(mismatch.err.find("n_cls"), std::string::npos) << mismatch.err;
}

TEST(Cli, EvalReportsLowerFlopsForMaa) {
  const fs::path dir = temp_dir("eval_costs");
  write_quick_config(dir / "run.json");
  for (const char* d : {"maa", "allmlp"}) {
    const CliResult r = cli({"eval", "--workdir", dir.string(), "--config", "run.json", "--decoder", d, "--csv",
                       std::string(d) + ".csv", "--flops-at", "128x128"});
    ASSERT_EQ(r.code, kExitOk) << r.err;
  }
  EXPECT_LT(csv_value(dir / "maa.csv", "flops"), csv_value(dir / "allmlp.csv", "flops"));
  EXPECT_LT(csv_value(dir / "maa.csv", "params"), csv_value(dir / "allmlp.csv", "params"));
}

TEST(Cli, InferPadsOnRequestAndWritesEdgeMaps) {
  const fs::path dir = temp_dir("infer");
  write_quick_config(dir / "run.json");
  ASSERT_EQ(cli({"train", "--workdir", dir.string(), "--config", "run.json"}).code, kExitOk);
  Image img = tensor_to_image(synth_scene(1, 3, 128).image);
  Image odd;
  odd.height = 100;
  odd.width = 90;
  for (int64_t y = 0; y < 100; ++y)
    for (int64_t x = 0; x < 90; ++x) odd.pixels.insert(odd.pixels.end(), img.px(y, x), img.px(y, x) + 3);
  write_png((dir / "odd.png").string(), odd);

  const CliResult refused = cli({"infer", "--workdir", dir.string(), "--checkpoint", "model.ckpt", "odd.png"});
  EXPECT_EQ(refused.code, kExitConfig);
  EXPECT_NE(refused.err.find("--pad"), std::string::npos) << refused.err;

  const CliResult r = cli({"infer", "--workdir", dir.string(), "--checkpoint", "model.ckpt", "odd.png", "--pad", "--edges"});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  const Image mask = read_png((dir / "pred" / "odd_mask.png").string());
  EXPECT_EQ(mask.height, 100);
  EXPECT_EQ(mask.width, 90);
  EXPECT_NO_THROW(decode_mask(mask, Palette::synthetic(3)));
  const Image edges = read_png((dir / "pred" / "odd_edges.png").string());
  EXPECT_EQ(edges.height, 100);
  EXPECT_EQ(edges.width, 90);
  // Gray expands to equal RGB channels on read.
  for (int64_t i = 0; i < 100 * 90; ++i) {
    ASSERT_EQ(edges.pixels[static_cast<size_t>(3 * i)], edges.pixels[static_cast<size_t>(3 * i + 1)]);
  }
}
