#include "hat/model.h"

#include <cmath>
#include <random>

#include "hat/ops.h"

namespace hat {
namespace {

template <typename T>
Tensor<T> to_nchw(const Tensor<T>& x) {
  return permute(x, {0, 3, 1, 2});
}

template <typename T>
Tensor<T> to_nhwc(const Tensor<T>& x) {
  return permute(x, {0, 2, 3, 1});
}

template <typename T>
Tensor<T> as_batched(const Tensor<T>& x) {
  if (x.rank() == 4) return x;
  if (x.rank() == 3) return reshape(x, Shape{1, x.dim(0), x.dim(1), x.dim(2)});
  throw ShapeError("expected [H,W,C] or [N,H,W,C], got " + to_string(x.shape()));
}

template <typename T>
Tensor<T> conv3x3(const Tensor<T>& x, const ConvParams<T>& p) {
  return conv2d(x, p.weight, p.bias, 1, 1);
}

// Creates and registers parameters in enumeration order.
template <typename T>
class ParamBuilder {
 public:
  ParamBuilder(std::uint64_t seed, std::vector<std::pair<std::string, Tensor<T>>>& out) : rng_(seed), out_(out) {}

  Tensor<T> trunc_normal(const std::string& path, Shape shape, double std) {
    std::normal_distribution<double> dist(0.0, std);
    std::vector<T> v(static_cast<std::size_t>(numel(shape)));
    for (auto& e : v) {
      double s;
      do s = dist(rng_);
      while (std::abs(s) > 2.0 * std);
      e = static_cast<T>(s);
    }
    return add(path, Tensor<T>(std::move(shape), std::move(v)));
  }

  // Uniform in +-1/sqrt(fan_in), the usual default for convolutions.
  Tensor<T> fan_in_uniform(const std::string& path, Shape shape, std::int64_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<T> v(static_cast<std::size_t>(numel(shape)));
    for (auto& e : v) e = static_cast<T>(dist(rng_));
    return add(path, Tensor<T>(std::move(shape), std::move(v)));
  }

  Tensor<T> constant(const std::string& path, Shape shape, T value) {
    return add(path, Tensor<T>(std::move(shape), value));
  }

  LinearParams<T> linear(const std::string& path, std::int64_t in, std::int64_t out) {
    return {trunc_normal(path + ".weight", {out, in}, 0.02), constant(path + ".bias", {out}, T(0))};
  }

  LinearParams<T> pointwise_conv(const std::string& path, std::int64_t in, std::int64_t out) {
    return {fan_in_uniform(path + ".weight", {out, in}, in), fan_in_uniform(path + ".bias", {out}, in)};
  }

  ConvParams<T> conv(const std::string& path, std::int64_t in, std::int64_t out, std::int64_t k = 3) {
    const std::int64_t fan_in = in * k * k;
    return {fan_in_uniform(path + ".weight", {out, in, k, k}, fan_in), fan_in_uniform(path + ".bias", {out}, fan_in)};
  }

  NormParams<T> norm(const std::string& path, std::int64_t c) {
    return {constant(path + ".weight", {c}, T(1)), constant(path + ".bias", {c}, T(0))};
  }

  MlpParams<T> mlp(const std::string& path, std::int64_t c, std::int64_t hidden) {
    return {linear(path + ".fc1", c, hidden), linear(path + ".fc2", hidden, c)};
  }

  AttentionParams<T> attention(const std::string& path, int c, int heads, int window, int overlapped) {
    AttentionParams<T> p;
    p.heads = heads;
    p.dim = c;
    const std::int64_t span = window + overlapped - 1;
    auto qkv = linear(path + ".qkv", c, 3 * c);
    p.qkv_weight = qkv.weight;
    p.qkv_bias = qkv.bias;
    p.bias_table = trunc_normal(path + ".relative_position_bias_table", {span * span, heads}, 0.02);
    auto proj = linear(path + ".proj", c, c);
    p.proj_weight = proj.weight;
    p.proj_bias = proj.bias;
    return p;
  }

 private:
  Tensor<T> add(const std::string& path, Tensor<T> t) {
    t.set_requires_grad(true);
    out_.emplace_back(path, t);
    return t;
  }

  std::mt19937_64 rng_;
  std::vector<std::pair<std::string, Tensor<T>>>& out_;
};

}  // namespace

int block_shift(int index, int window) { return index % 2 == 0 ? 0 : window / 2; }

template <typename T>
Tensor<T> mlp_forward(const Tensor<T>& x, const MlpParams<T>& p) {
  return linear(gelu(linear(x, p.fc1.weight, p.fc1.bias)), p.fc2.weight, p.fc2.bias);
}

template <typename T>
Tensor<T> cab_forward(const Tensor<T>& x, const CabParams<T>& p) {
  const Tensor<T> xb = as_batched(x);
  const Tensor<T> feat = conv3x3(gelu(conv3x3(to_nchw(xb), p.conv1)), p.conv2);
  // Channel attention: pooled statistics gate each output channel.
  const Tensor<T> pooled = global_avg_pool(feat);
  const Tensor<T> gate = sigmoid(linear(relu(linear(pooled, p.ca_down.weight, p.ca_down.bias)), p.ca_up.weight, p.ca_up.bias));
  const Tensor<T> scaled = mul(feat, reshape(gate, Shape{gate.dim(0), gate.dim(1), 1, 1}));
  const Tensor<T> out = to_nhwc(scaled);
  return x.rank() == 4 ? out : reshape(out, x.shape());
}

template <typename T>
Tensor<T> hab_forward(const Tensor<T>& x, const HabParams<T>& p, const WindowSpec& spec, T alpha) {
  const Tensor<T> xn = layernorm(x, p.norm1.gamma, p.norm1.beta);
  Tensor<T> branch = wmsa(xn, p.attn, spec);
  if (p.has_cab) branch = add(branch, scale(cab_forward(xn, p.cab), alpha));
  const Tensor<T> xm = add(branch, x);
  return add(mlp_forward(layernorm(xm, p.norm2.gamma, p.norm2.beta), p.mlp), xm);
}

template <typename T>
Tensor<T> ocab_forward(const Tensor<T>& x, const OcabParams<T>& p, const WindowSpec& spec) {
  const Tensor<T> xm = add(oca(layernorm(x, p.norm1.gamma, p.norm1.beta), p.attn, spec), x);
  return add(mlp_forward(layernorm(xm, p.norm2.gamma, p.norm2.beta), p.mlp), xm);
}

template <typename T>
Tensor<T> rhag_forward(const Tensor<T>& x, const RhagParams<T>& p, const ModelConfig& cfg) {
  const Tensor<T> xb = as_batched(x);
  Tensor<T> t = xb;
  for (std::size_t j = 0; j < p.blocks.size(); ++j) {
    const auto spec = WindowSpec::self_attention(cfg.window, block_shift(static_cast<int>(j), cfg.window));
    t = hab_forward(t, p.blocks[j], spec, static_cast<T>(cfg.alpha));
  }
  if (p.has_ocab) t = ocab_forward(t, p.ocab, WindowSpec::overlapping(cfg.window, cfg.gamma));
  const Tensor<T> out = add(to_nhwc(conv3x3(to_nchw(t), p.conv)), xb);
  return x.rank() == 4 ? out : reshape(out, x.shape());
}

template <typename T>
Tensor<T> head_forward(const Tensor<T>& features, const HeadParams<T>& p) {
  Tensor<T> y = leaky_relu(conv3x3(features, p.conv_before), T(0.01));
  for (std::size_t i = 0; i < p.up.size(); ++i) y = pixel_shuffle(conv3x3(y, p.up[i]), p.factors[i]);
  return conv3x3(y, p.conv_last);
}

template <typename T>
HatModel<T>::HatModel(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  const auto& c = config_;
  ParamBuilder<T> b(seed, params_);
  const int mo = c.overlapped_window();

  conv_first = b.conv("conv_first", c.in_channels, c.channels);
  for (int i = 0; i < c.rhag_count; ++i) {
    const std::string g = "groups." + std::to_string(i);
    RhagParams<T> group;
    for (int j = 0; j < c.hab_per_rhag; ++j) {
      const std::string p = g + ".blocks." + std::to_string(j);
      HabParams<T> hab;
      hab.norm1 = b.norm(p + ".norm1", c.channels);
      hab.attn = b.attention(p + ".attn", c.channels, c.heads, c.window, c.window);
      hab.has_cab = c.use_cab;
      if (c.use_cab) {
        hab.cab.conv1 = b.conv(p + ".cab.conv1", c.channels, c.squeezed_channels());
        hab.cab.conv2 = b.conv(p + ".cab.conv2", c.squeezed_channels(), c.channels);
        hab.cab.ca_down = b.pointwise_conv(p + ".cab.ca_down", c.channels, c.ca_channels());
        hab.cab.ca_up = b.pointwise_conv(p + ".cab.ca_up", c.ca_channels(), c.channels);
      }
      hab.norm2 = b.norm(p + ".norm2", c.channels);
      hab.mlp = b.mlp(p + ".mlp", c.channels, c.mlp_hidden());
      group.blocks.push_back(std::move(hab));
    }
    group.has_ocab = c.use_ocab;
    if (c.use_ocab) {
      group.ocab.norm1 = b.norm(g + ".ocab.norm1", c.channels);
      group.ocab.attn = b.attention(g + ".ocab.attn", c.channels, c.heads, c.window, mo);
      group.ocab.norm2 = b.norm(g + ".ocab.norm2", c.channels);
      group.ocab.mlp = b.mlp(g + ".ocab.mlp", c.channels, c.mlp_hidden());
    }
    group.conv = b.conv(g + ".conv", c.channels, c.channels);
    groups.push_back(std::move(group));
  }
  conv_after_body = b.conv("conv_after_body", c.channels, c.channels);

  head.conv_before = b.conv("head.conv_before", c.channels, c.head_features);
  head.factors = c.upsample_factors();
  for (std::size_t i = 0; i < head.factors.size(); ++i) {
    const int f = head.factors[i];
    head.up.push_back(b.conv("head.up." + std::to_string(i), c.head_features, c.head_features * f * f));
  }
  head.conv_last = b.conv("head.conv_last", c.head_features, c.out_channels);
}

template <typename T>
const Tensor<T>& HatModel<T>::parameter(std::string_view path) const {
  for (const auto& [name, t] : params_) {
    if (name == path) return t;
  }
  throw ConfigError("no parameter named '" + std::string(path) + "'");
}

template <typename T>
std::int64_t HatModel<T>::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& [name, t] : params_) n += t.numel();
  return n;
}

template <typename T>
void HatModel<T>::set_requires_grad(bool flag) {
  for (auto& [name, t] : params_) t.set_requires_grad(flag);
}

template <typename T>
void HatModel<T>::zero_grad() {
  for (auto& [name, t] : params_) t.zero_grad();
}

template <typename T>
Tensor<T> HatModel<T>::forward(const Tensor<T>& img) const {
  return hat_forward(img, *this);
}

template <typename T>
Tensor<T> hat_forward(const Tensor<T>& img, const HatModel<T>& model) {
  const auto& cfg = model.config();
  if (img.rank() != 4 || img.dim(1) != cfg.in_channels) {
    throw ShapeError("model expects [N," + std::to_string(cfg.in_channels) + ",H,W], got " + to_string(img.shape()));
  }
  const std::int64_t h = img.dim(2), w = img.dim(3);
  const int m = cfg.window;
  const int pad_h = static_cast<int>((m - h % m) % m), pad_w = static_cast<int>((m - w % m) % m);
  const Tensor<T> x = (pad_h || pad_w) ? pad2d(img, 0, pad_h, 0, pad_w, PadMode::Reflect) : img;

  const Tensor<T> shallow = conv3x3(x, model.conv_first);
  Tensor<T> t = to_nhwc(shallow);
  for (const auto& g : model.groups) t = rhag_forward(t, g, cfg);
  const Tensor<T> deep = conv3x3(to_nchw(t), model.conv_after_body);
  const Tensor<T> out = head_forward(add(deep, shallow), model.head);

  const int s = cfg.head == HeadKind::SameResolution ? 1 : cfg.scale;
  if (!pad_h && !pad_w) return out;
  return crop2d(out, 0, 0, static_cast<int>(h * s), static_cast<int>(w * s));
}

template class HatModel<float>;
template class HatModel<double>;

#define HAT_INSTANTIATE_MODEL(T)                                                              \
  template Tensor<T> mlp_forward(const Tensor<T>&, const MlpParams<T>&);                      \
  template Tensor<T> cab_forward(const Tensor<T>&, const CabParams<T>&);                      \
  template Tensor<T> hab_forward(const Tensor<T>&, const HabParams<T>&, const WindowSpec&, T); \
  template Tensor<T> ocab_forward(const Tensor<T>&, const OcabParams<T>&, const WindowSpec&); \
  template Tensor<T> rhag_forward(const Tensor<T>&, const RhagParams<T>&, const ModelConfig&); \
  template Tensor<T> head_forward(const Tensor<T>&, const HeadParams<T>&);                    \
  template Tensor<T> hat_forward(const Tensor<T>&, const HatModel<T>&);

HAT_INSTANTIATE_MODEL(float)
HAT_INSTANTIATE_MODEL(double)

}  // namespace hat
