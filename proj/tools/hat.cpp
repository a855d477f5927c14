// Command-line front end: train, sr, lam, complexity, degrade.

#include <CLI11.hpp>
#include <Eigen/Core>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "hat/checkpoint.h"
#include "hat/complexity.h"
#include "hat/config.h"
#include "hat/data.h"
#include "hat/errors.h"
#include "hat/image.h"
#include "hat/lam.h"
#include "hat/metrics.h"
#include "hat/model.h"
#include "hat/trainer.h"

namespace fs = std::filesystem;
using namespace hat;

namespace {

enum ExitCode { kOk = 0, kUsage = 2, kData = 3, kNumeric = 4 };

struct ModelFlags {
  std::string preset;
  std::string config_file;
  std::vector<std::string> settings;
  std::optional<double> alpha, gamma;
  std::optional<int> beta, window, heads, channels, rhag, hab, scale;
  bool no_cab = false;
  bool no_ocab = false;

  void add_to(CLI::App* app, const std::string& default_preset) {
    preset = default_preset;
    app->add_option("--preset", preset, "Model preset")
        ->check(CLI::IsMember(ModelConfig::preset_names()))
        ->capture_default_str();
    app->add_option("--config", config_file, "File of key=value model settings (overrides the preset)")
        ->check(CLI::ExistingFile);
    app->add_option("--set", settings, "Extra key=value model setting; repeatable");
    app->add_option("--alpha", alpha, "CAB fusion weight");
    app->add_option("--beta", beta, "CAB squeeze factor");
    app->add_option("--gamma", gamma, "OCA overlap ratio");
    app->add_option("--window", window, "Window size M");
    app->add_option("--heads", heads, "Attention heads");
    app->add_option("--channels", channels, "Feature channels C");
    app->add_option("--rhag", rhag, "Residual hybrid attention groups");
    app->add_option("--hab", hab, "Hybrid attention blocks per group");
    app->add_option("--scale", scale, "Upscaling factor");
    app->add_flag("--no-cab", no_cab, "Drop the channel attention branch");
    app->add_flag("--no-ocab", no_ocab, "Drop the overlapping cross-attention block");
  }

  ModelConfig build() const {
    ModelConfig cfg = ModelConfig::preset(preset);
    if (!config_file.empty()) {
      std::ifstream in(config_file);
      std::string line;
      while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        apply(cfg, line);
      }
    }
    for (const auto& s : settings) apply(cfg, s);
    if (alpha) cfg.alpha = *alpha;
    if (beta) cfg.beta = *beta;
    if (gamma) cfg.gamma = *gamma;
    if (window) cfg.window = *window;
    if (heads) cfg.heads = *heads;
    if (channels) cfg.channels = *channels;
    if (rhag) cfg.rhag_count = *rhag;
    if (hab) cfg.hab_per_rhag = *hab;
    if (scale) {
      cfg.scale = *scale;
      if (*scale == 1) cfg.head = HeadKind::SameResolution;
    }
    if (no_cab) cfg.use_cab = false;
    if (no_ocab) cfg.use_ocab = false;
    cfg.validate();
    return cfg;
  }

  static void apply(ModelConfig& cfg, const std::string& kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("expected key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
};

std::vector<fs::path> list_pngs(const fs::path& p) {
  if (!fs::exists(p)) throw DataError("no such file or directory: " + p.string());
  if (!fs::is_directory(p)) return {p};
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(p)) {
    if (e.is_regular_file() && e.path().extension() == ".png") out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  if (out.empty()) throw DataError("no PNG files in " + p.string());
  return out;
}

std::vector<ImagePair> load_manifest_pairs(const fs::path& manifest, int scale) {
  std::vector<ImagePair> pairs;
  for (const auto& rec : read_manifest(manifest).records) {
    if (rec.scale != scale) {
      throw DataError(manifest.string() + ": pair " + rec.lq.string() + " has scale " + std::to_string(rec.scale) +
                      " but the model upscales by " + std::to_string(scale));
    }
    pairs.push_back(load_pair(rec));
  }
  return pairs;
}

std::vector<std::int64_t> parse_milestones(const std::string& text) {
  std::vector<std::int64_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(parse_int(item, "milestones"));
  }
  return out;
}

template <typename T>
HatModel<T> model_from(const std::string& checkpoint, const ModelFlags& flags, std::uint64_t seed) {
  if (!checkpoint.empty()) return load_model<T>(checkpoint);
  return HatModel<T>(flags.build(), seed);
}

// ---- train ---------------------------------------------------------------

struct TrainArgs {
  ModelFlags model;
  std::string manifest, val_manifest, out = "run", phase = "scratch", init, resume, milestones;
  std::int64_t steps = 1000, val_every = 0, checkpoint_every = 0;
  std::uint64_t seed = 0;
  int batch = 4, patch = 64;
  double lr = 0;
  bool no_augment = false;
};

template <typename T>
int run_train(const TrainArgs& a) {
  TrainOptions o;
  o.phase = parse_phase(a.phase);
  o.steps = a.steps;
  o.batch = a.batch;
  o.patch_lq = a.patch;
  o.seed = a.seed;
  o.lr = a.lr;
  o.milestones = parse_milestones(a.milestones);
  o.augment = !a.no_augment;
  o.val_every = a.val_every;
  o.checkpoint_every = a.checkpoint_every;
  fs::create_directories(a.out);
  o.checkpoint_path = fs::path(a.out) / "checkpoint.bin";

  if (!a.init.empty() && !a.resume.empty()) throw ConfigError("--init and --resume are mutually exclusive");
  if (o.phase == Phase::Finetune && a.init.empty() && a.resume.empty()) {
    throw ConfigError("finetune phase requires --init or --resume with a checkpoint");
  }
  std::optional<CheckpointData> ckpt;
  if (!a.init.empty()) ckpt = read_checkpoint(a.init);
  if (!a.resume.empty()) ckpt = read_checkpoint(a.resume);
  HatModel<T> model(ckpt ? config_from_checkpoint(*ckpt) : a.model.build(), a.seed);
  Trainer<T> trainer(model, o);
  if (!a.init.empty()) trainer.load_weights(*ckpt);
  if (!a.resume.empty()) trainer.resume(*ckpt);

  const int scale = model.config().head == HeadKind::SameResolution ? 1 : model.config().scale;
  const auto train = load_manifest_pairs(a.manifest, scale);
  const auto val = a.val_manifest.empty() ? std::vector<ImagePair>{} : load_manifest_pairs(a.val_manifest, scale);

  std::ofstream log(fs::path(a.out) / "train.log", std::ios::app);
  trainer.run(train, val, [&](const std::string& line) {
    std::cout << line << "\n";
    log << line << "\n" << std::flush;
  });
  std::cout << "checkpoint=" << o.checkpoint_path.string() << "\n";
  return kOk;
}

// ---- sr ------------------------------------------------------------------

struct SrArgs {
  ModelFlags model;
  std::string checkpoint, input, output, gt;
  std::uint64_t seed = 0;
};

template <typename T>
int run_sr(const SrArgs& a) {
  const HatModel<T> model = model_from<T>(a.checkpoint, a.model, a.seed);
  const auto inputs = list_pngs(a.input);
  const bool to_dir = fs::is_directory(a.input);
  if (to_dir) fs::create_directories(a.output);
  const int scale = model.config().head == HeadKind::SameResolution ? 1 : model.config().scale;
  for (const auto& in : inputs) {
    const ImageBuffer img = read_png(in);
    if (img.channels != model.config().in_channels) {
      throw DataError(in.string() + " has " + std::to_string(img.channels) + " channels, model expects " +
                      std::to_string(model.config().in_channels));
    }
    const ImageF sr = tensor_to_image(model.forward(image_to_tensor<T>(to_real(img))));
    const fs::path out = to_dir ? fs::path(a.output) / in.filename() : fs::path(a.output);
    write_png(out, quantize(sr));
    std::cout << "input=" << in.string() << " output=" << out.string() << " size=" << sr.width << "x" << sr.height;
    if (!a.gt.empty()) {
      const fs::path gt_path = fs::is_directory(a.gt) ? fs::path(a.gt) / in.filename() : fs::path(a.gt);
      const ImageF gt = to_real(read_png(gt_path));
      const ImageF restored = to_real(quantize(sr));
      if (!gt.same_extent(restored)) throw DataError("ground truth " + gt_path.string() + " differs in extent from output");
      std::cout << " psnr_y=" << format_real(psnr_y(restored, gt, scale)) << " ssim_y=" << format_real(ssim_y(restored, gt, scale));
    }
    std::cout << "\n";
  }
  return kOk;
}

// ---- lam -----------------------------------------------------------------

struct LamArgs {
  ModelFlags model;
  std::string checkpoint, input, out = "lam", detector = "gradient";
  std::uint64_t seed = 0;
  LamConfig cfg;
};

template <typename T>
int run_lam(const LamArgs& a) {
  HatModel<T> model = model_from<T>(a.checkpoint, a.model, a.seed);
  model.set_requires_grad(false);
  LamConfig cfg = a.cfg;
  cfg.detector = a.detector == "patchsum" ? DetectorKind::PatchSum : DetectorKind::GradientMagnitude;
  cfg.parallel = true;
  const ImageBuffer img = read_png(a.input);
  if (img.channels != model.config().in_channels) throw DataError(a.input + " has the wrong channel count for the model");
  const ModelFn<T> fn = [&model](const Tensor<T>& x) { return model.forward(x); };
  const LamResult r = lam(fn, image_to_tensor<T>(to_real(img)), cfg);

  fs::create_directories(a.out);
  double peak = 0;
  for (double v : r.attribution) peak = std::max(peak, std::abs(v));
  std::vector<double> heat(r.attribution.size(), 0.0);
  if (peak > 0) {
    for (std::size_t i = 0; i < heat.size(); ++i) heat[i] = std::abs(r.attribution[i]) / peak;
  }
  write_png16_gray(fs::path(a.out) / "heatmap.png", heat, static_cast<int>(r.height), static_cast<int>(r.width));
  write_raw_map(fs::path(a.out) / "attribution.raw", r.attribution, r.height, r.width);

  std::ostringstream m;
  m << "gini=" << format_real(r.gini) << "\n"
    << "di=" << format_real(r.di) << "\n"
    << "completeness_residual=" << format_real(r.completeness_residual) << "\n"
    << "detector_input=" << format_real(r.detector_input) << "\n"
    << "detector_baseline=" << format_real(r.detector_baseline) << "\n"
    << "zero_map=" << (r.zero_map ? "true" : "false") << "\n"
    << "sigma=" << format_real(cfg.sigma) << "\n"
    << "steps=" << cfg.steps << "\n"
    << "x=" << cfg.x << "\ny=" << cfg.y << "\nl=" << cfg.l << "\n";
  std::ofstream(fs::path(a.out) / "metrics.txt") << m.str();
  std::cout << m.str();
  return kOk;
}

// ---- degrade -------------------------------------------------------------

struct DegradeArgs {
  std::string hq_dir, out_dir;
  int scale = 0;
  double noise = -1;
  std::uint64_t seed = 0;
};

int run_degrade(const DegradeArgs& a) {
  if ((a.scale > 0) == (a.noise >= 0)) throw ConfigError("give exactly one of --scale or --noise");
  const auto inputs = list_pngs(a.hq_dir);
  const fs::path out(a.out_dir);
  fs::create_directories(out / "lq");
  fs::create_directories(out / "hq");
  PairManifest m;
  m.degradation = a.scale > 0 ? "bicubic x" + std::to_string(a.scale) : "noise " + format_real(a.noise);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const ImageBuffer src = read_png(inputs[i]);
    ImageBuffer hq, lq;
    if (a.scale > 0) {
      hq = quantize(mod_crop(to_real(src), a.scale));
      lq = bicubic_resize(hq, a.scale);
    } else {
      hq = src;
      lq = add_gaussian_noise(src, a.noise, a.seed + i);
    }
    const fs::path name = inputs[i].filename();
    write_png(out / "lq" / name, lq);
    write_png(out / "hq" / name, hq);
    m.records.push_back({fs::path("lq") / name, fs::path("hq") / name, a.scale > 0 ? a.scale : 1});
  }
  write_manifest(out / "manifest.txt", m);
  std::cout << "pairs=" << m.records.size() << " manifest=" << (out / "manifest.txt").string() << "\n";
  return kOk;
}

void configure_threads() {
  if (const char* env = std::getenv("HAT_NUM_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) {
      Eigen::setNbThreads(n);
#ifdef _OPENMP
      omp_set_num_threads(n);
#endif
    }
  }
}

}  // namespace

int main(int argc, char** argv) {
  configure_threads();
  CLI::App app{"Hybrid attention transformer for image restoration"};
  app.require_subcommand(1);
  bool f64 = false;
  app.add_flag("--f64", f64, "Compute in 64-bit floating point");

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train a model on a manifest of LQ/HQ pairs");
  ta.model.add_to(train, "tiny");
  train->add_option("--manifest", ta.manifest, "Training manifest")->required()->check(CLI::ExistingFile);
  train->add_option("--val-manifest", ta.val_manifest, "Validation manifest")->check(CLI::ExistingFile);
  train->add_option("--phase", ta.phase, "pretrain, finetune or scratch")
      ->check(CLI::IsMember({"pretrain", "finetune", "scratch"}))
      ->capture_default_str();
  train->add_option("--steps", ta.steps, "Total optimizer steps")->capture_default_str()->check(CLI::NonNegativeNumber);
  train->add_option("--seed", ta.seed, "Seed for initialization and sampling")->capture_default_str();
  train->add_option("--out", ta.out, "Output directory")->capture_default_str();
  train->add_option("--batch", ta.batch, "Patches per step")->capture_default_str()->check(CLI::PositiveNumber);
  train->add_option("--patch", ta.patch, "LQ patch size")->capture_default_str()->check(CLI::PositiveNumber);
  train->add_option("--lr", ta.lr, "Initial learning rate (default by phase)")->check(CLI::PositiveNumber);
  train->add_option("--milestones", ta.milestones, "Comma-separated halving steps");
  train->add_flag("--no-augment", ta.no_augment, "Disable dihedral augmentation");
  train->add_option("--val-every", ta.val_every, "Validate every n steps")->check(CLI::NonNegativeNumber);
  train->add_option("--checkpoint-every", ta.checkpoint_every, "Save every n steps")->check(CLI::NonNegativeNumber);
  train->add_option("--init", ta.init, "Checkpoint whose weights start a finetune")->check(CLI::ExistingFile);
  train->add_option("--resume", ta.resume, "Checkpoint to continue")->check(CLI::ExistingFile);

  SrArgs sa;
  auto* sr = app.add_subcommand("sr", "Restore a PNG or a directory of PNGs");
  sa.model.add_to(sr, "tiny");
  sr->add_option("--checkpoint", sa.checkpoint, "Trained checkpoint (random weights from --preset otherwise)")
      ->check(CLI::ExistingFile);
  sr->add_option("--input", sa.input, "Input PNG or directory")->required();
  sr->add_option("--output", sa.output, "Output PNG or directory")->required();
  sr->add_option("--gt", sa.gt, "Ground truth PNG or directory for PSNR/SSIM");
  sr->add_option("--seed", sa.seed, "Seed for random weights")->capture_default_str();

  LamArgs la;
  auto* lamc = app.add_subcommand("lam", "Local attribution map for an output patch");
  la.model.add_to(lamc, "tiny");
  lamc->add_option("--checkpoint", la.checkpoint, "Trained checkpoint (random weights from --preset otherwise)")
      ->check(CLI::ExistingFile);
  lamc->add_option("--input", la.input, "Input PNG")->required()->check(CLI::ExistingFile);
  lamc->add_option("--out", la.out, "Output directory")->capture_default_str();
  lamc->add_option("--x", la.cfg.x, "Patch column in output coordinates")->capture_default_str();
  lamc->add_option("--y", la.cfg.y, "Patch row in output coordinates")->capture_default_str();
  lamc->add_option("--l", la.cfg.l, "Patch side")->capture_default_str();
  lamc->add_option("--sigma", la.cfg.sigma, "Blur width of the baseline")->capture_default_str();
  lamc->add_option("--steps", la.cfg.steps, "Integration steps")->capture_default_str();
  lamc->add_option("--detector", la.detector, "gradient or patchsum")
      ->check(CLI::IsMember({"gradient", "patchsum"}))
      ->capture_default_str();
  lamc->add_option("--seed", la.seed, "Seed for random weights")->capture_default_str();

  ModelFlags cf;
  std::string hw = "64x64";
  auto* comp = app.add_subcommand("complexity", "Parameter count and Multi-Adds");
  cf.add_to(comp, "hat");
  comp->add_option("--hw", hw, "Input extent WxH")->capture_default_str();

  DegradeArgs da;
  auto* deg = app.add_subcommand("degrade", "Build LQ images and a manifest from HQ PNGs");
  deg->add_option("--hq-dir", da.hq_dir, "Directory (or file) of HQ PNGs")->required();
  deg->add_option("--out-dir", da.out_dir, "Output directory")->required();
  deg->add_option("--scale", da.scale, "Bicubic downsampling factor")->check(CLI::IsMember({2, 3, 4}));
  deg->add_option("--noise", da.noise, "Gaussian noise sigma on the 0-255 scale")->check(CLI::NonNegativeNumber);
  deg->add_option("--seed", da.seed, "Noise seed")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    std::cerr << "error: " << msg << "\n";
    return kUsage;
  }

  try {
    if (*train) return f64 ? run_train<double>(ta) : run_train<float>(ta);
    if (*sr) return f64 ? run_sr<double>(sa) : run_sr<float>(sa);
    if (*lamc) return f64 ? run_lam<double>(la) : run_lam<float>(la);
    if (*deg) return run_degrade(da);
    if (*comp) {
      int w = 0, h = 0;
      char sep = 0;
      std::istringstream is(hw);
      if (!(is >> w >> sep >> h) || sep != 'x' || w < 1 || h < 1 || !is.eof()) {
        throw ConfigError("--hw expects WxH, got '" + hw + "'");
      }
      const auto t0 = std::chrono::steady_clock::now();
      const ModelConfig cfg = cf.build();
      const ComplexityReport r = complexity(cfg, h, w);
      const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      std::printf("model=%s %s time_ms=%.3f\n", cfg.name.c_str(), format_report(r).c_str(), ms);
      return kOk;
    }
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kNumeric;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  }
  return kUsage;
}
