#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "uwseg/data.hpp"
#include "uwseg/loss.hpp"
#include "uwseg/model.hpp"
#include "uwseg/optim.hpp"

namespace uwseg {

struct TrainConfig {
  int64_t max_iters = 2000;
  float power = 1.0f;
  int64_t batch_size = 4;
  AdamWConfig optim;
  LossWeights loss;
  int edge_radius = 1;
  /// Unset disables augmentation.
  std::optional<AugmentPolicy> augment;
  uint64_t seed = 0;
  /// Produce batches on a background thread.
  bool prefetch = false;
  /// Append-only CSV metric log; empty disables logging.
  std::string log_path;
  /// Periodic checkpoint every N iterations (0 disables) written to checkpoint_path.
  int64_t checkpoint_every = 0;
  std::string checkpoint_path;
};

struct LossRecord {
  int64_t iter = 0;
  float lr = 0.0f;
  float total = 0.0f;
  float edge = 0.0f;
  float mask = 0.0f;
};

struct TrainResult {
  std::vector<LossRecord> trace;
  int64_t iters_run = 0;
  double seconds = 0.0;
  bool stopped_early = false;
};

/// Called after every iteration; returning false stops training. Evaluation
/// hooks may run the model in eval mode; the trainer restores training mode.
using TrainCallback = std::function<bool(const LossRecord&)>;

/// Owns the optimizer and the batch stream for one run over a model.
class Trainer {
 public:
  Trainer(Model& model, const Dataset& data, const TrainConfig& cfg);

  /// Runs iterations [first, max_iters). Each: batch, forward, total loss,
  /// backward, AdamW step at poly_lr(iter). Throws TrainingError naming the
  /// iteration and learning rate when the loss is not finite.
  TrainResult run(const TrainCallback& callback = {});

  /// One iteration; returns its record.
  LossRecord step();

  AdamW& optimizer() { return optim_; }
  int64_t iteration() const { return iter_; }
  void set_iteration(int64_t iter) { iter_ = iter; }

 private:
  void log(const LossRecord& r);

  Model& model_;
  TrainConfig cfg_;
  AdamW optim_;
  BatchStream stream_;
  int64_t iter_ = 0;
  bool log_header_written_ = false;
};

}  // namespace uwseg
