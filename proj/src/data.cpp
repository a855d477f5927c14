#include "hat/data.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "hat/errors.h"

namespace hat {

double cubic_kernel(double x) {
  const double a = std::abs(x), a2 = a * a, a3 = a2 * a;
  if (a <= 1) return 1.5 * a3 - 2.5 * a2 + 1;
  if (a <= 2) return -0.5 * a3 + 2.5 * a2 - 4 * a + 2;
  return 0;
}

namespace {

struct Taps {
  std::vector<int> index;
  std::vector<double> weight;
};

// Per-output contributions along one axis of length n reduced by s.
std::vector<Taps> resize_taps(int n, int s) {
  std::vector<Taps> out(static_cast<std::size_t>(n / s));
  const double width = 4.0 * s;
  for (int o = 0; o < n / s; ++o) {
    // Input-space centre of output sample o, zero-based.
    const double u = s * o + 0.5 * (s - 1);
    const int first = static_cast<int>(std::floor(u - width / 2));
    const int last = static_cast<int>(std::ceil(u + width / 2));
    Taps& t = out[static_cast<std::size_t>(o)];
    double total = 0;
    for (int j = first; j <= last; ++j) {
      const double w = cubic_kernel((u - j) / s);
      if (w == 0) continue;
      // Half-sample symmetric extension: ... 1 0 | 0 1 ... n-1 | n-1 n-2 ...
      int k = j % (2 * n);
      if (k < 0) k += 2 * n;
      if (k >= n) k = 2 * n - 1 - k;
      t.index.push_back(k);
      t.weight.push_back(w);
      total += w;
    }
    for (auto& w : t.weight) w /= total;
  }
  return out;
}

}  // namespace

ImageF bicubic_downsample(const ImageF& img, int s) {
  if (s != 2 && s != 3 && s != 4) throw ConfigError("bicubic scale must be 2, 3 or 4, got " + std::to_string(s));
  if (img.height % s != 0 || img.width % s != 0) {
    throw ShapeError("image " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                     " is not divisible by " + std::to_string(s));
  }
  const int oh = img.height / s, ow = img.width / s, c = img.channels;
  const auto cols = resize_taps(img.width, s);
  const auto rows = resize_taps(img.height, s);
  ImageF tmp(img.height, ow, c);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < ow; ++x) {
      const Taps& t = cols[static_cast<std::size_t>(x)];
      for (int ch = 0; ch < c; ++ch) {
        double acc = 0;
        for (std::size_t k = 0; k < t.index.size(); ++k) acc += t.weight[k] * img.at(y, t.index[k], ch);
        tmp.at(y, x, ch) = acc;
      }
    }
  }
  ImageF out(oh, ow, c);
  for (int y = 0; y < oh; ++y) {
    const Taps& t = rows[static_cast<std::size_t>(y)];
    for (int x = 0; x < ow; ++x) {
      for (int ch = 0; ch < c; ++ch) {
        double acc = 0;
        for (std::size_t k = 0; k < t.index.size(); ++k) acc += t.weight[k] * tmp.at(t.index[k], x, ch);
        out.at(y, x, ch) = acc;
      }
    }
  }
  return out;
}

ImageBuffer bicubic_resize(const ImageBuffer& img, int s) { return quantize(bicubic_downsample(to_real(img), s)); }

ImageF mod_crop(const ImageF& img, int s) {
  return crop(img, 0, 0, img.height - img.height % s, img.width - img.width % s);
}

std::vector<double> gaussian_noise(std::size_t n, double sigma, std::uint64_t seed) {
  std::vector<double> out(n, 0.0);
  if (sigma == 0) return out;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, sigma / 255.0);
  for (auto& v : out) v = dist(rng);
  return out;
}

ImageF add_gaussian_noise(const ImageF& img, double sigma, std::uint64_t seed) {
  if (sigma < 0) throw ConfigError("noise sigma must be >= 0");
  const auto noise = gaussian_noise(img.data.size(), sigma, seed);
  ImageF out = img;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = std::clamp(img.data[i] + noise[i], 0.0, 1.0);
  return out;
}

ImageBuffer add_gaussian_noise(const ImageBuffer& img, double sigma, std::uint64_t seed) {
  if (sigma == 0) return img;
  return quantize(add_gaussian_noise(to_real(img), sigma, seed));
}

PairManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path.string());
  const auto base = path.parent_path();
  auto resolve = [&](const std::string& p) {
    std::filesystem::path q(p);
    return q.is_absolute() ? q : base / q;
  };
  PairManifest m;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') {
      const std::string key = "# degradation=";
      if (line.rfind(key, 0) == 0) m.degradation = line.substr(key.size());
      continue;
    }
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, '\t')) fields.push_back(f);
    int scale = 0;
    if (fields.size() == 3) {
      try {
        std::size_t used = 0;
        scale = std::stoi(fields[2], &used);
        if (used != fields[2].size()) scale = 0;
      } catch (const std::exception&) {
        scale = 0;
      }
    }
    if (fields.size() != 3 || scale < 1) {
      throw DataError("manifest " + path.string() + " line " + std::to_string(lineno) + ": expected lq<TAB>hq<TAB>scale");
    }
    m.records.push_back({resolve(fields[0]), resolve(fields[1]), scale});
  }
  if (m.records.empty()) throw DataError("manifest " + path.string() + " lists no pairs");
  return m;
}

void write_manifest(const std::filesystem::path& path, const PairManifest& m) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write manifest " + path.string());
  if (!m.degradation.empty()) out << "# degradation=" << m.degradation << "\n";
  for (const auto& r : m.records) out << r.lq.string() << '\t' << r.hq.string() << '\t' << r.scale << "\n";
}

void check_pair(const ImagePair& p) {
  if (p.hq.height != p.scale * p.lq.height || p.hq.width != p.scale * p.lq.width || p.hq.channels != p.lq.channels) {
    throw DataError("pair extents " + std::to_string(p.lq.height) + "x" + std::to_string(p.lq.width) + " -> " +
                    std::to_string(p.hq.height) + "x" + std::to_string(p.hq.width) + " violate scale " +
                    std::to_string(p.scale));
  }
}

ImagePair load_pair(const PairRecord& rec) {
  ImagePair p{to_real(read_png(rec.lq)), to_real(read_png(rec.hq)), rec.scale};
  try {
    check_pair(p);
  } catch (const DataError& e) {
    throw DataError(rec.lq.string() + ": " + e.what());
  }
  return p;
}

ImagePair crop_pair(const ImagePair& pair, int top, int left, int patch_lq) {
  const int s = pair.scale;
  return {crop(pair.lq, top, left, patch_lq, patch_lq), crop(pair.hq, s * top, s * left, s * patch_lq, s * patch_lq), s};
}

ImagePair sample_patch(const ImagePair& pair, int patch_lq, std::mt19937_64& rng) {
  check_pair(pair);
  if (patch_lq < 1 || patch_lq > pair.lq.height || patch_lq > pair.lq.width) {
    throw DataError("patch " + std::to_string(patch_lq) + " larger than image " + std::to_string(pair.lq.height) + "x" +
                    std::to_string(pair.lq.width));
  }
  // Modulo draw keeps the sequence independent of library distributions.
  const auto top = static_cast<int>(rng() % static_cast<std::uint64_t>(pair.lq.height - patch_lq + 1));
  const auto left = static_cast<int>(rng() % static_cast<std::uint64_t>(pair.lq.width - patch_lq + 1));
  return crop_pair(pair, top, left, patch_lq);
}

ImageF augment(const ImageF& img, int code) {
  if (code < 0 || code > 7) throw ConfigError("augment code must be 0..7, got " + std::to_string(code));
  const bool hflip = code & 1, vflip = code & 2, trans = code & 4;
  const int oh = trans ? img.width : img.height, ow = trans ? img.height : img.width;
  ImageF out(oh, ow, img.channels);
  for (int y = 0; y < oh; ++y) {
    for (int x = 0; x < ow; ++x) {
      const int ty = vflip ? oh - 1 - y : y;
      const int tx = hflip ? ow - 1 - x : x;
      const int sy = trans ? tx : ty, sx = trans ? ty : tx;
      for (int c = 0; c < img.channels; ++c) out.at(y, x, c) = img.at(sy, sx, c);
    }
  }
  return out;
}

ImagePair augment(const ImagePair& pair, int code) { return {augment(pair.lq, code), augment(pair.hq, code), pair.scale}; }

int inverse_augment_code(int code) {
  if (!(code & 4)) return code;
  return 4 | ((code & 1) << 1) | ((code & 2) >> 1);
}

}  // namespace hat
