#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "hat/checkpoint.h"
#include "hat/data.h"
#include "hat/model.h"
#include "hat/optim.h"

namespace hat {

enum class Phase { Pretrain, Scratch, Finetune };

Phase parse_phase(const std::string& name);
std::string phase_name(Phase p);
// 2e-4 for pretrain and scratch, 1e-5 for finetune.
double default_lr(Phase p);

struct TrainOptions {
  Phase phase = Phase::Scratch;
  std::int64_t steps = 1000;
  int batch = 4;
  int patch_lq = 64;
  std::uint64_t seed = 0;
  // Zero selects default_lr(phase).
  double lr = 0;
  // Empty selects Schedule::proportional.
  std::vector<std::int64_t> milestones;
  bool augment = true;
  std::int64_t val_every = 0;
  std::int64_t checkpoint_every = 0;
  std::filesystem::path checkpoint_path;

  Schedule schedule() const;
};

struct TrainResult {
  // One entry per optimizer step run by this call, in order.
  std::vector<double> losses;
  std::vector<std::string> log;
  std::optional<double> last_val_psnr;
  std::int64_t final_step = 0;
};

template <typename T>
class Trainer {
 public:
  Trainer(HatModel<T>& model, TrainOptions opts);

  // Weights only; optimizer and step counter start fresh. Required before a
  // finetune run.
  void load_weights(const CheckpointData& ckpt);
  // Weights, optimizer moments, step counter and sampling RNG, for
  // continuing an interrupted run of the same phase.
  void resume(const CheckpointData& ckpt);

  // Runs from the current step up to opts.steps. `on_log` receives each
  // `step=<n> lr=<v> loss=<v> [val_psnr=<v>]` line as it is produced.
  TrainResult run(const std::vector<ImagePair>& train, const std::vector<ImagePair>& val = {},
                  const std::function<void(const std::string&)>& on_log = {});

  // Model, config, optimizer state, step, seed and RNG state.
  CheckpointData checkpoint() const;
  void save(const std::filesystem::path& path) const;

  std::int64_t step() const { return step_; }
  const AdamState<T>& optimizer() const { return adam_; }

 private:
  HatModel<T>& model_;
  TrainOptions opts_;
  AdamState<T> adam_;
  std::mt19937_64 rng_;
  std::int64_t step_ = 0;
  bool weights_loaded_ = false;
};

// Mean PSNR over full images of model outputs against the HQ targets, on
// all channels in [0,1] without cropping.
template <typename T>
double fit_psnr(const HatModel<T>& model, const std::vector<ImagePair>& pairs);

// Mean Y-channel PSNR with a scale-sized border crop.
template <typename T>
double validation_psnr(const HatModel<T>& model, const std::vector<ImagePair>& pairs);

extern template class Trainer<float>;
extern template class Trainer<double>;

}  // namespace hat
