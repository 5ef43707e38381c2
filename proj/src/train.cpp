#include "uwseg/train.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "uwseg/checkpoint.hpp"
#include "uwseg/errors.hpp"
#include "uwseg/ops.hpp"

namespace uwseg {

Trainer::Trainer(Model& model, const Dataset& data, const TrainConfig& cfg)
    : model_(model),
      cfg_(cfg),
      optim_(model.store(), cfg.optim),
      stream_(data, cfg.batch_size, cfg.seed, cfg.augment ? &*cfg.augment : nullptr, cfg.prefetch) {
  if (cfg_.max_iters < 1) throw ConfigError("schedule.max_iters must be >= 1");
  if (data.n_cls() != model.config().n_cls) {
    throw ConfigError("dataset has " + std::to_string(data.n_cls()) + " classes but model.n_cls is " +
                      std::to_string(model.config().n_cls));
  }
  if (cfg_.checkpoint_every > 0 && cfg_.checkpoint_path.empty()) {
    throw ConfigError("checkpoint_every is set but checkpoint_path is empty");
  }
}

LossRecord Trainer::step() {
  const float lr = poly_lr(iter_, cfg_.optim.lr, cfg_.max_iters, cfg_.power);
  const Batch batch = stream_.next();
  model_.set_training(true);
  model_.store().zero_grad();
  const Tensor logits = model_.forward(batch.images);
  const LossParts loss = total_loss(logits, one_hot(batch.labels, model_.config().n_cls), cfg_.loss, cfg_.edge_radius);
  LossRecord r{iter_, lr, loss.total.item(), loss.edge.item(), loss.mask.item()};
  if (!std::isfinite(r.total)) {
    std::ostringstream msg;
    msg << "non-finite loss at iteration " << iter_ << " (lr " << lr << ")";
    throw TrainingError(msg.str());
  }
  backward(loss.total);
  optim_.step(lr);
  ++iter_;
  log(r);
  if (cfg_.checkpoint_every > 0 && iter_ % cfg_.checkpoint_every == 0) {
    save_checkpoint(cfg_.checkpoint_path, model_.store(), &optim_);
  }
  return r;
}

TrainResult Trainer::run(const TrainCallback& callback) {
  TrainResult result;
  const auto t0 = std::chrono::steady_clock::now();
  while (iter_ < cfg_.max_iters) {
    const LossRecord r = step();
    result.trace.push_back(r);
    ++result.iters_run;
    if (callback) {
      const bool keep_going = callback(r);
      model_.set_training(true);
      if (!keep_going) {
        result.stopped_early = iter_ < cfg_.max_iters;
        break;
      }
    }
  }
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

void Trainer::log(const LossRecord& r) {
  if (cfg_.log_path.empty()) return;
  const bool fresh = !log_header_written_ && !std::filesystem::exists(cfg_.log_path);
  std::ofstream out(cfg_.log_path, std::ios::app);
  if (!out) throw TrainingError("cannot append to metric log " + cfg_.log_path);
  if (fresh) out << "iter,lr,loss_total,loss_edge,loss_mask\n";
  log_header_written_ = true;
  out.precision(9);
  out << r.iter << "," << r.lr << "," << r.total << "," << r.edge << "," << r.mask << "\n";
}

}  // namespace uwseg
