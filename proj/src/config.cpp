#include "hat/config.h"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <sstream>

#include "hat/attention.h"

namespace hat {

std::string format_real(double v) {
  std::array<char, 64> buf{};
  auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), res.ptr);
}

double parse_real(std::string_view text, std::string_view what) {
  double v = 0;
  auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size() || !std::isfinite(v)) {
    throw ConfigError("invalid number for " + std::string(what) + ": '" + std::string(text) + "'");
  }
  return v;
}

int parse_int(std::string_view text, std::string_view what) {
  int v = 0;
  auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size()) {
    throw ConfigError("invalid integer for " + std::string(what) + ": '" + std::string(text) + "'");
  }
  return v;
}

namespace {

bool parse_bool(std::string_view text, std::string_view what) {
  if (text == "1" || text == "true") return true;
  if (text == "0" || text == "false") return false;
  throw ConfigError("invalid boolean for " + std::string(what) + ": '" + std::string(text) + "'");
}

void require(bool ok, const std::string& message) {
  if (!ok) throw ConfigError(message);
}

}  // namespace

int ModelConfig::ca_channels() const { return std::max(1, channels / ca_reduction); }

int ModelConfig::overlapped_window() const { return WindowSpec::overlapping(window, gamma).overlapped(); }

std::vector<int> ModelConfig::upsample_factors() const {
  if (head == HeadKind::SameResolution) return {};
  switch (scale) {
    case 2: return {2};
    case 3: return {3};
    case 4: return {2, 2};
    default: throw ConfigError("pixel-shuffle head supports scale 2, 3 or 4, got " + std::to_string(scale));
  }
}

void ModelConfig::validate() const {
  require(in_channels >= 1 && out_channels >= 1, "in/out channels must be >= 1");
  require(channels >= 1 && rhag_count >= 1 && hab_per_rhag >= 1, "channels, rhag_count and hab_per_rhag must be >= 1");
  require(heads >= 1 && channels % heads == 0,
          "channels " + std::to_string(channels) + " not divisible by heads " + std::to_string(heads));
  require(window >= 1, "window must be >= 1");
  require(beta >= 1 && channels % beta == 0,
          "channels " + std::to_string(channels) + " not divisible by beta " + std::to_string(beta));
  require(ca_reduction >= 1, "ca_reduction must be >= 1");
  require(mlp_ratio > 0 && mlp_hidden() >= 1, "mlp_ratio must give at least one hidden unit");
  require(std::isfinite(alpha), "alpha must be finite");
  require(head_features >= 1, "head_features must be >= 1");
  WindowSpec::overlapping(window, gamma).validate();
  if (head == HeadKind::SameResolution) {
    require(scale == 1, "same-resolution head requires scale 1");
  } else {
    upsample_factors();
  }
}

std::string ModelConfig::to_text() const {
  std::ostringstream os;
  os << "alpha=" << format_real(alpha) << '\n'
     << "beta=" << beta << '\n'
     << "ca_reduction=" << ca_reduction << '\n'
     << "channels=" << channels << '\n'
     << "gamma=" << format_real(gamma) << '\n'
     << "hab_per_rhag=" << hab_per_rhag << '\n'
     << "head=" << (head == HeadKind::PixelShuffle ? "pixelshuffle" : "same") << '\n'
     << "head_features=" << head_features << '\n'
     << "heads=" << heads << '\n'
     << "in_channels=" << in_channels << '\n'
     << "mlp_ratio=" << format_real(mlp_ratio) << '\n'
     << "name=" << name << '\n'
     << "out_channels=" << out_channels << '\n'
     << "rhag_count=" << rhag_count << '\n'
     << "scale=" << scale << '\n'
     << "use_cab=" << (use_cab ? 1 : 0) << '\n'
     << "use_ocab=" << (use_ocab ? 1 : 0) << '\n'
     << "window=" << window << '\n';
  return os.str();
}

void ModelConfig::set(std::string_view key, std::string_view value) {
  if (key == "alpha") alpha = parse_real(value, key);
  else if (key == "beta") beta = parse_int(value, key);
  else if (key == "ca_reduction") ca_reduction = parse_int(value, key);
  else if (key == "channels") channels = parse_int(value, key);
  else if (key == "gamma") gamma = parse_real(value, key);
  else if (key == "hab_per_rhag") hab_per_rhag = parse_int(value, key);
  else if (key == "head") {
    if (value == "pixelshuffle") head = HeadKind::PixelShuffle;
    else if (value == "same") head = HeadKind::SameResolution;
    else throw ConfigError("unknown head kind '" + std::string(value) + "'");
  } else if (key == "head_features") head_features = parse_int(value, key);
  else if (key == "heads") heads = parse_int(value, key);
  else if (key == "in_channels") in_channels = parse_int(value, key);
  else if (key == "mlp_ratio") mlp_ratio = parse_real(value, key);
  else if (key == "name") name = std::string(value);
  else if (key == "out_channels") out_channels = parse_int(value, key);
  else if (key == "rhag_count") rhag_count = parse_int(value, key);
  else if (key == "scale") scale = parse_int(value, key);
  else if (key == "use_cab") use_cab = parse_bool(value, key);
  else if (key == "use_ocab") use_ocab = parse_bool(value, key);
  else if (key == "window") window = parse_int(value, key);
  else throw ConfigError("unknown config key '" + std::string(key) + "'");
}

ModelConfig ModelConfig::from_text(std::string_view text) {
  ModelConfig cfg;
  std::istringstream is{std::string(text)};
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("malformed config line '" + line + "'");
    cfg.set(std::string_view(line).substr(0, eq), std::string_view(line).substr(eq + 1));
  }
  cfg.validate();
  return cfg;
}

ModelConfig ModelConfig::preset(std::string_view name) {
  ModelConfig cfg;
  if (name == "hat") {
    // defaults
  } else if (name == "hat-s") {
    cfg.channels = 144;
    cfg.beta = 24;
  } else if (name == "hat-l") {
    cfg.rhag_count = 12;
  } else if (name == "baseline-w8" || name == "baseline-w16") {
    // Plain window-attention backbone without CAB or OCAB.
    cfg.use_cab = false;
    cfg.use_ocab = false;
    cfg.window = name == "baseline-w8" ? 8 : 16;
  } else if (name == "tiny") {
    cfg.channels = 16;
    cfg.rhag_count = 1;
    cfg.hab_per_rhag = 2;
    cfg.heads = 2;
    cfg.window = 4;
    cfg.beta = 2;
    cfg.ca_reduction = 4;
    cfg.scale = 2;
    cfg.head_features = 16;
  } else {
    throw ConfigError("unknown preset '" + std::string(name) + "'");
  }
  cfg.name = std::string(name);
  cfg.validate();
  return cfg;
}

std::vector<std::string> ModelConfig::preset_names() {
  return {"hat-s", "hat", "hat-l", "tiny", "baseline-w8", "baseline-w16"};
}

}  // namespace hat
