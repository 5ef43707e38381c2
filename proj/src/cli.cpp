#include "uwseg/cli.hpp"

#include <CLI11.hpp>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>

#include "uwseg/checkpoint.hpp"
#include "uwseg/config.hpp"
#include "uwseg/errors.hpp"
#include "uwseg/eval.hpp"
#include "uwseg/loss.hpp"
#include "uwseg/ops.hpp"

namespace uwseg {

namespace fs = std::filesystem;

namespace {

// Options shared by every subcommand.
struct Common {
  std::string workdir = ".";
  std::optional<uint64_t> seed;
  std::string config;
  std::string checkpoint;
  std::optional<int64_t> n_cls;
  std::string decoder;
  bool no_uiqa = false;
  bool synthetic = false;
  std::string data;

  fs::path resolve(const std::string& p) const {
    const fs::path path(p);
    return path.is_absolute() ? path : fs::path(workdir) / path;
  }
};

void add_common(CLI::App* cmd, Common& c, bool with_checkpoint) {
  cmd->add_option("--workdir", c.workdir, "Directory all relative paths resolve against")->capture_default_str();
  cmd->add_option("--seed", c.seed, "Seed for weights, batch order and dropout");
  cmd->add_option("--config", c.config, "Run config (JSON)");
  if (with_checkpoint) {
    cmd->add_option("--checkpoint", c.checkpoint, "Checkpoint; its .config.json sidecar is used when --config is absent");
  }
  cmd->add_option("--n-cls", c.n_cls, "Number of classes")->check(CLI::Range(2, 1 << 16));
  cmd->add_option("--decoder", c.decoder, "Decoder head: maa or allmlp");
  cmd->add_flag("--no-uiqa", c.no_uiqa, "Disable the channel-attention block");
  cmd->add_flag("--synthetic", c.synthetic, "Use generated scenes instead of a dataset");
  cmd->add_option("--data", c.data, "Dataset root with images/ and masks/");
}

RunConfig resolve_config(const Common& c) {
  RunConfig cfg;
  if (!c.config.empty()) {
    cfg = load_config(c.resolve(c.config).string());
  } else if (!c.checkpoint.empty() && fs::exists(c.resolve(c.checkpoint + ".config.json"))) {
    cfg = load_config(c.resolve(c.checkpoint + ".config.json").string());
  }
  if (c.seed) cfg.apply_seed(*c.seed);
  if (c.n_cls) cfg.model.n_cls = *c.n_cls;
  if (!c.decoder.empty()) {
    cfg.model.decoder = parse_decoder(c.decoder);
    cfg.model.decoder_embed = 0;
  }
  if (c.no_uiqa) cfg.model.use_uiqa = false;
  if (c.synthetic) cfg.data.root.clear();
  if (!c.data.empty()) cfg.data.root = c.data;
  cfg.validate();
  const fs::path sidecar = c.resolve(c.checkpoint + ".config.json");
  if (!c.checkpoint.empty() && fs::exists(sidecar)) {
    const ModelConfig trained = load_config(sidecar.string()).model;
    auto mismatch = [&](const std::string& key, const std::string& got, const std::string& want) {
      if (got != want) {
        throw ConfigError("model." + key + " is " + got + " but checkpoint " + c.checkpoint + " was trained with " + want);
      }
    };
    mismatch("n_cls", std::to_string(cfg.model.n_cls), std::to_string(trained.n_cls));
    mismatch("decoder", to_string(cfg.model.decoder), to_string(trained.decoder));
    mismatch("use_uiqa", cfg.model.use_uiqa ? "true" : "false", trained.use_uiqa ? "true" : "false");
  }
  return cfg;
}

Palette resolve_palette(const Common& c, const RunConfig& cfg) {
  if (!cfg.data.palette.empty()) return Palette::load(c.resolve(cfg.data.palette).string());
  if (!cfg.data.root.empty()) throw ConfigError("data.palette is required with a dataset root");
  return Palette::synthetic(cfg.model.n_cls);
}

Dataset resolve_dataset(const Common& c, const RunConfig& cfg, bool held_out) {
  if (cfg.data.root.empty()) {
    // The held-out synthetic split uses a different scene seed.
    const uint64_t seed = held_out ? cfg.data.seed ^ 0x5eed5eedULL : cfg.data.seed;
    return Dataset::synthetic(cfg.data.synthetic_count, cfg.model.n_cls, cfg.data.synthetic_size, seed);
  }
  const std::string root = held_out && !cfg.data.val_root.empty() ? cfg.data.val_root : cfg.data.root;
  return Dataset::load_dir(c.resolve(root).string(), resolve_palette(c, cfg));
}

std::pair<int64_t, int64_t> parse_size(const std::string& s) {
  const size_t x = s.find('x');
  try {
    if (x == std::string::npos) throw std::invalid_argument(s);
    size_t used = 0;
    const int64_t h = std::stoll(s.substr(0, x), &used);
    if (used != x) throw std::invalid_argument(s);
    const int64_t w = std::stoll(s.substr(x + 1), &used);
    if (used != s.size() - x - 1 || h < 1 || w < 1) throw std::invalid_argument(s);
    return {h, w};
  } catch (const std::logic_error&) {
    throw ConfigError("size '" + s + "' must look like HxW, e.g. 128x128");
  }
}

void print_costs(std::ostream& out, const CostReport& params, const CostReport& flops) {
  out << "params " << params.params << " (" << std::fixed << std::setprecision(3) << params.params / 1e6 << " M)\n";
  for (const auto& [name, n] : params.params_by_module) out << "  " << std::left << std::setw(28) << name << n << "\n";
  out << "flops at " << flops.height << "x" << flops.width << " " << flops.flops << " (" << std::setprecision(3)
      << flops.flops / 1e9 << " GFLOPs)\n";
  for (const auto& [name, n] : flops.flops_by_module) out << "  " << std::left << std::setw(28) << name << n << "\n";
  out << std::defaultfloat << std::right;
}

// ---- train -------------------------------------------------------------------------------------------

struct TrainOptions {
  Common common;
  std::optional<int64_t> iters;
  std::optional<float> lr;
  std::string out = "model.ckpt";
  std::string log = "train_log.csv";
  int64_t log_every = 50;
};

int cmd_train(const TrainOptions& o, std::ostream& out) {
  RunConfig cfg = resolve_config(o.common);
  if (o.iters) cfg.train.max_iters = *o.iters;
  if (o.lr) cfg.train.optim.lr = *o.lr;
  cfg.validate();
  const Dataset data = resolve_dataset(o.common, cfg, false);

  const fs::path ckpt_path = o.common.resolve(o.out), log_path = o.common.resolve(o.log);
  for (const fs::path& p : {ckpt_path, log_path}) fs::create_directories(p.parent_path());
  const std::string ckpt = ckpt_path.string();
  cfg.train.log_path = log_path.string();
  if (cfg.train.checkpoint_every > 0) cfg.train.checkpoint_path = ckpt;
  if (cfg.data.augment) {
    cfg.train.augment = AugmentPolicy{cfg.data.scale_lo, cfg.data.scale_hi, cfg.data.crop, cfg.data.crop, cfg.data.hflip};
  }

  RunManifest manifest;
  manifest.config = config_to_json(cfg);
  manifest.seed = cfg.seed;
  manifest.version = version_string();
  manifest.started = utc_timestamp();
  manifest.outputs = {{"checkpoint", ckpt}, {"config", ckpt + ".config.json"}, {"log", cfg.train.log_path}};
  manifest.write(ckpt + ".run.json");

  Model model(cfg.model);
  Trainer trainer(model, data, cfg.train);
  out << "training " << to_string(cfg.model.decoder) << " on " << data.size() << " images, " << cfg.train.max_iters
      << " iterations\n";
  const TrainResult result = trainer.run([&](const LossRecord& r) {
    if (r.iter % o.log_every == 0 || r.iter + 1 == cfg.train.max_iters) {
      out << "iter " << r.iter << " lr " << r.lr << " loss " << r.total << " (edge " << r.edge << ", mask " << r.mask
          << ")\n";
    }
    return true;
  });
  save_checkpoint(ckpt, model.store(), &trainer.optimizer());
  save_config(ckpt + ".config.json", cfg);

  nlohmann::json done{{"finished", utc_timestamp()},
                      {"iters", result.iters_run},
                      {"seconds", result.seconds},
                      {"final_loss", result.trace.empty() ? 0.0f : result.trace.back().total}};
  std::ofstream(ckpt + ".done.json") << done.dump(2) << "\n";
  out << "wrote " << ckpt << "\n";
  return kExitOk;
}

// ---- eval ------------------------------------------------------------------------------------------------

struct EvalOptions {
  Common common;
  int band = 0;
  std::string csv;
  std::string flops_at;
  bool fps = false;
  int64_t batch = 4;
};

int cmd_eval(const EvalOptions& o, std::ostream& out) {
  const RunConfig cfg = resolve_config(o.common);
  const Dataset data = resolve_dataset(o.common, cfg, true);
  if (data.n_cls() != cfg.model.n_cls) {
    throw ConfigError("dataset has " + std::to_string(data.n_cls()) + " classes but model.n_cls is " +
                      std::to_string(cfg.model.n_cls));
  }
  Model model(cfg.model);
  if (o.common.checkpoint.empty()) {
    out << "note: no --checkpoint, reporting untrained weights\n";
  } else {
    load_checkpoint(o.common.resolve(o.common.checkpoint).string(), model.store());
  }
  const IouReport iou = miou(evaluate(model, data, o.batch));
  std::optional<IouReport> band;
  if (o.band > 0) band = miou(evaluate(model, data, o.batch, o.band));

  const auto [fh, fw] = o.flops_at.empty() ? std::pair{cfg.data.crop, cfg.data.crop} : parse_size(o.flops_at);
  const CostReport params = count_params(model.store());
  const CostReport flops = count_flops(model, fh, fw);

  const Palette palette = resolve_palette(o.common, cfg);
  out << "decoder " << to_string(cfg.model.decoder) << ", " << data.size() << " images\n";
  out << std::fixed << std::setprecision(4);
  for (size_t c = 0; c < iou.per_class.size(); ++c) {
    out << "  IoU " << std::left << std::setw(12) << palette.entries()[c].name << std::right << iou.per_class[c] << "\n";
  }
  out << "mIoU " << iou.mean << "\n";
  if (band) out << "band mIoU (radius " << o.band << ") " << band->mean << "\n";
  out << std::defaultfloat;
  print_costs(out, params, flops);
  std::optional<FpsReport> fps;
  if (o.fps) {
    fps = measure_fps(model, fh, fw);
    out << "fps " << fps->images_per_second << " at " << fh << "x" << fw << " on " << fps->hardware << "\n";
  }

  if (!o.csv.empty()) {
    const fs::path csv_path = o.common.resolve(o.csv);
    fs::create_directories(csv_path.parent_path());
    std::ofstream csv(csv_path);
    if (!csv) throw IngestionError("cannot write " + o.csv);
    csv << "metric,value\n";
    csv.precision(9);
    for (size_t c = 0; c < iou.per_class.size(); ++c) csv << "iou_" << palette.entries()[c].name << "," << iou.per_class[c] << "\n";
    csv << "miou," << iou.mean << "\n";
    if (band) csv << "band_miou," << band->mean << "\n";
    csv << "params," << params.params << "\nflops," << flops.flops << "\nflops_size," << fh << "x" << fw << "\n";
    if (fps) csv << "fps," << fps->images_per_second << "\n";
  }
  return kExitOk;
}

// ---- infer -----------------------------------------------------------------------------------------------

struct InferOptions {
  Common common;
  std::vector<std::string> images;
  std::string out_dir = "pred";
  bool edges = false;
  bool pad = false;
};

int cmd_infer(const InferOptions& o, std::ostream& out) {
  if (o.common.checkpoint.empty()) throw ConfigError("infer needs --checkpoint");
  const RunConfig cfg = resolve_config(o.common);
  const Palette palette = resolve_palette(o.common, cfg);
  if (palette.n_cls() != cfg.model.n_cls) {
    throw ConfigError("palette has " + std::to_string(palette.n_cls()) + " classes but model.n_cls is " +
                      std::to_string(cfg.model.n_cls));
  }
  Model model(cfg.model);
  load_checkpoint(o.common.resolve(o.common.checkpoint).string(), model.store());
  const fs::path dir = o.common.resolve(o.out_dir);
  fs::create_directories(dir);
  for (const std::string& name : o.images) {
    const fs::path path = o.common.resolve(name);
    const Image img = read_png(path.string());
    Sample s;
    s.image = image_to_tensor(img);
    s.label = LabelMap(img.height, img.width, 0);
    const Batch batch = make_batch({s});
    if (!o.pad) {
      try {
        cfg.model.check_input(img.height, img.width);
      } catch (const ShapeError& e) {
        throw ShapeError(path.filename().string() + ": " + e.what() + "; rerun with --pad");
      }
    }
    const Tensor logits = predict_padded(model, batch.images);
    const std::string stem = path.stem().string();
    write_png((dir / (stem + "_mask.png")).string(), encode_mask(argmax(logits)[0], palette));
    if (o.edges) {
      NoGradGuard guard;
      const Tensor e = scharr_edges(ops::sigmoid(logits));
      const int64_t k = e.dim(1), hw = img.height * img.width;
      Image gray;
      gray.height = img.height;
      gray.width = img.width;
      gray.channels = 1;
      gray.pixels.resize(static_cast<size_t>(hw));
      // Strongest class edge per pixel; E lies in [0, 1).
      for (int64_t i = 0; i < hw; ++i) {
        float v = 0.0f;
        for (int64_t c = 0; c < k; ++c) v = std::max(v, e.at(c * hw + i));
        gray.pixels[static_cast<size_t>(i)] = static_cast<uint8_t>(std::lround(v * 255.0f));
      }
      write_png((dir / (stem + "_edges.png")).string(), gray);
    }
    out << "wrote " << (dir / (stem + "_mask.png")).string() << "\n";
  }
  return kExitOk;
}

// ---- inspect ---------------------------------------------------------------------------------------------

struct InspectOptions {
  Common common;
  std::string flops_at = "128x128";
};

int cmd_inspect(const InspectOptions& o, std::ostream& out) {
  const RunConfig cfg = resolve_config(o.common);
  Model model(cfg.model);
  if (!o.common.checkpoint.empty()) load_checkpoint(o.common.resolve(o.common.checkpoint).string(), model.store());
  const ModelConfig& m = cfg.model;
  out << "uwseg " << version_string() << "\n";
  out << "encoder\n";
  for (size_t i = 0; i < 4; ++i) {
    out << "  stage" << i + 1 << " channels " << m.encoder.channels[i] << " depth " << m.encoder.depths[i] << " heads "
        << m.encoder.heads[i] << " sr " << m.encoder.sr_ratios[i] << "\n";
  }
  if (m.use_uiqa) {
    out << "uiqa N_M=" << m.uiqa.n_layers << " N_C=" << m.uiqa.n_heads << " P=" << m.uiqa.P
        << " C=" << m.uiqa.resolved_embed(m.encoder.channels) << "\n";
  } else {
    out << "uiqa disabled\n";
  }
  out << "decoder " << to_string(m.decoder) << " C=" << m.resolved_decoder_embed() << " n_cls=" << m.n_cls
      << " dropout=" << m.dropout << "\n";
  const auto [h, w] = parse_size(o.flops_at);
  print_costs(out, count_params(model.store()), count_flops(model, h, w, 1, 2));
  out << "config\n" << config_to_json(cfg).dump(2) << "\n";
  return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Underwater semantic segmentation: train, evaluate, run and inspect models"};
  app.require_subcommand(1);

  TrainOptions train;
  CLI::App* t = app.add_subcommand("train", "Train a model and write checkpoint, CSV log and run manifest");
  add_common(t, train.common, false);
  t->add_option("--iters", train.iters, "Override schedule.max_iters")->check(CLI::PositiveNumber);
  t->add_option("--lr", train.lr, "Override optim.lr")->check(CLI::NonNegativeNumber);
  t->add_option("--out", train.out, "Checkpoint path")->capture_default_str();
  t->add_option("--log", train.log, "CSV metric log (appended)")->capture_default_str();
  t->add_option("--log-every", train.log_every, "Print every N iterations")->check(CLI::PositiveNumber);

  EvalOptions ev;
  CLI::App* e = app.add_subcommand("eval", "Report per-class IoU, mIoU, params, FLOPs and optionally FPS");
  add_common(e, ev.common, true);
  e->add_option("--band", ev.band, "Also report mIoU inside the boundary band of this radius")->check(CLI::NonNegativeNumber);
  e->add_option("--csv", ev.csv, "Write the report as CSV");
  e->add_option("--flops-at", ev.flops_at, "Input size HxW for FLOPs and FPS (default: data.crop)");
  e->add_flag("--fps", ev.fps, "Measure throughput");
  e->add_option("--batch", ev.batch, "Evaluation batch size")->check(CLI::PositiveNumber);

  InferOptions inf;
  CLI::App* i = app.add_subcommand("infer", "Write palette-coloured masks (and edge maps) for images");
  add_common(i, inf.common, true);
  i->add_option("images", inf.images, "PNG images")->required();
  i->add_option("--out", inf.out_dir, "Output directory")->capture_default_str();
  i->add_flag("--edges", inf.edges, "Also write grayscale edge maps");
  i->add_flag("--pad", inf.pad, "Reflect-pad inputs whose sides are not a valid multiple");

  InspectOptions ins;
  CLI::App* s = app.add_subcommand("inspect", "Print the module tree, costs and resolved config");
  add_common(s, ins.common, true);
  s->add_option("--flops-at", ins.flops_at, "Input size HxW for FLOPs")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& pe) {
    return app.exit(pe, out, err) == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*t) return cmd_train(train, out);
    if (*e) return cmd_eval(ev, out);
    if (*i) return cmd_infer(inf, out);
    return cmd_inspect(ins, out);
  } catch (const ConfigError& ex) {
    err << "config error: " << ex.what() << "\n";
    return kExitConfig;
  } catch (const ShapeError& ex) {
    err << "shape error: " << ex.what() << "\n";
    return kExitConfig;
  } catch (const TrainingError& ex) {
    err << "training error: " << ex.what() << "\n";
    return kExitTraining;
  } catch (const IngestionError& ex) {
    err << "ingestion error: " << ex.what() << "\n";
    return kExitIngestion;
  } catch (const CheckpointError& ex) {
    err << "checkpoint error: " << ex.what() << "\n";
    return kExitIngestion;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << "\n";
    return kExitFailure;
  }
}

}  // namespace uwseg
