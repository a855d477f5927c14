#include "hat/trainer.h"

#include <cmath>
#include <sstream>

#include "hat/config.h"
#include "hat/errors.h"
#include "hat/image.h"
#include "hat/metrics.h"
#include "hat/ops.h"

namespace hat {

Phase parse_phase(const std::string& name) {
  if (name == "pretrain") return Phase::Pretrain;
  if (name == "scratch") return Phase::Scratch;
  if (name == "finetune") return Phase::Finetune;
  throw ConfigError("unknown phase '" + name + "' (expected pretrain, finetune or scratch)");
}

std::string phase_name(Phase p) {
  switch (p) {
    case Phase::Pretrain: return "pretrain";
    case Phase::Finetune: return "finetune";
    case Phase::Scratch: break;
  }
  return "scratch";
}

double default_lr(Phase p) { return p == Phase::Finetune ? 1e-5 : 2e-4; }

Schedule TrainOptions::schedule() const {
  const double lr0 = lr > 0 ? lr : default_lr(phase);
  Schedule s = Schedule::proportional(lr0, steps);
  if (!milestones.empty()) s.milestones = milestones;
  s.validate();
  return s;
}

namespace {

std::string join(const std::vector<std::int64_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

// Stacks equally sized images into [N, C, H, W].
template <typename T>
Tensor<T> stack(const std::vector<ImageF>& imgs) {
  const ImageF& f = imgs.front();
  Tensor<T> out(Shape{static_cast<std::int64_t>(imgs.size()), f.channels, f.height, f.width});
  auto d = out.mutable_data();
  const std::size_t plane = static_cast<std::size_t>(f.height) * f.width, per = plane * f.channels;
  for (std::size_t n = 0; n < imgs.size(); ++n) {
    for (int c = 0; c < f.channels; ++c) {
      for (std::size_t p = 0; p < plane; ++p) d[n * per + c * plane + p] = static_cast<T>(imgs[n].data[p * f.channels + c]);
    }
  }
  return out;
}

}  // namespace

template <typename T>
Trainer<T>::Trainer(HatModel<T>& model, TrainOptions opts) : model_(model), opts_(std::move(opts)), rng_(opts_.seed) {
  if (opts_.steps < 0) throw ConfigError("steps must be >= 0");
  if (opts_.batch < 1) throw ConfigError("batch must be >= 1");
  if (opts_.patch_lq < 1) throw ConfigError("patch size must be >= 1");
  if (opts_.val_every < 0 || opts_.checkpoint_every < 0) throw ConfigError("intervals must be >= 0");
  opts_.schedule();
}

template <typename T>
void Trainer<T>::load_weights(const CheckpointData& ckpt) {
  load_parameters(model_, ckpt);
  adam_ = AdamState<T>{};
  step_ = 0;
  weights_loaded_ = true;
}

template <typename T>
void Trainer<T>::resume(const CheckpointData& ckpt) {
  load_parameters(model_, ckpt);
  const std::string phase = ckpt.get("train.phase");
  if (phase != phase_name(opts_.phase)) {
    throw ConfigError("checkpoint was written by phase '" + phase + "', cannot resume as '" + phase_name(opts_.phase) + "'");
  }
  AdamState<T> adam;
  try {
    step_ = std::stoll(ckpt.get("train.step"));
    adam.step = std::stoll(ckpt.get("adam.step"));
    adam.lr = parse_real(ckpt.get("adam.lr"), "adam.lr");
  } catch (const std::logic_error&) {
    throw DataError("checkpoint has malformed training counters");
  }
  std::istringstream rs(ckpt.get("train.rng"));
  rs >> rng_;
  if (!rs) throw DataError("checkpoint has malformed RNG state");
  if (adam.step > 0) {
    for (const auto& [name, t] : model_.parameters()) {
      const NamedArray* m = ckpt.find("adam.m." + name);
      const NamedArray* v = ckpt.find("adam.v." + name);
      if (!m || !v) throw DataError("checkpoint is missing optimizer state for '" + name + "'");
      if (m->shape != t.shape() || v->shape != t.shape()) throw DataError("optimizer state for '" + name + "' has wrong shape");
      adam.m.emplace_back(m->values.begin(), m->values.end());
      adam.v.emplace_back(v->values.begin(), v->values.end());
    }
  }
  adam_ = std::move(adam);
  weights_loaded_ = true;
}

template <typename T>
CheckpointData Trainer<T>::checkpoint() const {
  CheckpointData ckpt = model_checkpoint(model_);
  const Schedule s = opts_.schedule();
  ckpt.meta["train.phase"] = phase_name(opts_.phase);
  ckpt.meta["train.step"] = std::to_string(step_);
  ckpt.meta["train.steps"] = std::to_string(opts_.steps);
  ckpt.meta["train.seed"] = std::to_string(opts_.seed);
  ckpt.meta["train.lr"] = format_real(s.initial_lr);
  ckpt.meta["train.milestones"] = join(s.milestones);
  std::ostringstream rs;
  rs << rng_;
  ckpt.meta["train.rng"] = rs.str();
  ckpt.meta["adam.step"] = std::to_string(adam_.step);
  ckpt.meta["adam.lr"] = format_real(adam_.lr);
  if (!adam_.m.empty()) {
    const auto& params = model_.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& [name, t] = params[i];
      ckpt.arrays.push_back({"adam.m." + name, t.shape(), std::vector<double>(adam_.m[i].begin(), adam_.m[i].end())});
      ckpt.arrays.push_back({"adam.v." + name, t.shape(), std::vector<double>(adam_.v[i].begin(), adam_.v[i].end())});
    }
  }
  return ckpt;
}

template <typename T>
void Trainer<T>::save(const std::filesystem::path& path) const {
  write_checkpoint(path, checkpoint());
}

template <typename T>
TrainResult Trainer<T>::run(const std::vector<ImagePair>& train, const std::vector<ImagePair>& val,
                            const std::function<void(const std::string&)>& on_log) {
  if (opts_.phase == Phase::Finetune && !weights_loaded_) {
    throw ConfigError("finetune phase requires a loaded checkpoint");
  }
  if (train.empty()) throw DataError("training set is empty");
  const Schedule schedule = opts_.schedule();
  std::vector<Tensor<T>> params;
  for (const auto& [name, t] : model_.parameters()) params.push_back(t);

  TrainResult result;
  while (step_ < opts_.steps) {
    const double lr = lr_at(schedule, step_);
    std::vector<ImageF> lq, hq;
    for (int b = 0; b < opts_.batch; ++b) {
      const auto& pair = train[static_cast<std::size_t>(rng_() % train.size())];
      ImagePair patch = sample_patch(pair, opts_.patch_lq, rng_);
      if (opts_.augment) patch = augment(patch, static_cast<int>(rng_() % 8));
      lq.push_back(std::move(patch.lq));
      hq.push_back(std::move(patch.hq));
    }
    const Tensor<T> input = stack<T>(lq), target = stack<T>(hq);

    model_.zero_grad();
    GradTape<T> tape;
    double loss_value = 0;
    {
      TapeScope<T> scope(tape);
      auto loss = l1_loss(model_.forward(input), target);
      loss_value = static_cast<double>(loss.item());
      if (!std::isfinite(loss_value)) {
        throw NumericError("non-finite loss at step " + std::to_string(step_) + "; last checkpoint kept");
      }
      tape.backward(loss);
    }
    adam_step(params, adam_, lr);
    const std::int64_t done = step_;
    ++step_;

    std::string line = "step=" + std::to_string(done) + " lr=" + format_real(lr) + " loss=" + format_real(loss_value);
    if (opts_.val_every > 0 && !val.empty() && (step_ % opts_.val_every == 0 || step_ == opts_.steps)) {
      result.last_val_psnr = validation_psnr(model_, val);
      line += " val_psnr=" + format_real(*result.last_val_psnr);
    }
    result.losses.push_back(loss_value);
    result.log.push_back(line);
    if (on_log) on_log(line);
    if (!opts_.checkpoint_path.empty() && opts_.checkpoint_every > 0 && step_ % opts_.checkpoint_every == 0) {
      save(opts_.checkpoint_path);
    }
  }
  if (!opts_.checkpoint_path.empty()) save(opts_.checkpoint_path);
  result.final_step = step_;
  return result;
}

template <typename T>
double fit_psnr(const HatModel<T>& model, const std::vector<ImagePair>& pairs) {
  if (pairs.empty()) throw DataError("no pairs to evaluate");
  double total = 0;
  for (const auto& p : pairs) {
    const ImageF out = tensor_to_image(model.forward(image_to_tensor<T>(p.lq)));
    total += psnr(out.data, p.hq.data);
  }
  return total / static_cast<double>(pairs.size());
}

template <typename T>
double validation_psnr(const HatModel<T>& model, const std::vector<ImagePair>& pairs) {
  if (pairs.empty()) throw DataError("no pairs to evaluate");
  double total = 0;
  for (const auto& p : pairs) {
    ImageF out = tensor_to_image(model.forward(image_to_tensor<T>(p.lq)));
    for (auto& v : out.data) v = std::clamp(v, 0.0, 1.0);
    total += psnr_y(out, p.hq, p.scale);
  }
  return total / static_cast<double>(pairs.size());
}

template class Trainer<float>;
template class Trainer<double>;
template double fit_psnr(const HatModel<float>&, const std::vector<ImagePair>&);
template double fit_psnr(const HatModel<double>&, const std::vector<ImagePair>&);
template double validation_psnr(const HatModel<float>&, const std::vector<ImagePair>&);
template double validation_psnr(const HatModel<double>&, const std::vector<ImagePair>&);

}  // namespace hat
