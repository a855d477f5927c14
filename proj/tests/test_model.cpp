#include <doctest.h>

#include <cmath>
#include <set>

#include "hat/complexity.h"
#include "hat/model.h"
#include "hat/ops.h"
#include "support.h"

using namespace hat;
using testing::cab_tensors;
using testing::check_gradients;
using testing::hab_tensors;
using testing::make_rng;
using testing::max_abs_diff;
using testing::ocab_tensors;
using testing::random_tensor;

namespace {

ModelConfig block_config() {
  ModelConfig c = ModelConfig::preset("tiny");
  c.channels = 8;
  c.heads = 2;
  c.beta = 2;
  c.ca_reduction = 4;
  return c;
}

double gelu_scalar(double v) { return 0.5 * v * (1 + std::erf(v / std::sqrt(2.0))); }

// Same-padded 3x3 convolution on an [H, W, C] array, one output at a time.
std::vector<double> conv_hwc(const std::vector<double>& x, int h, int w, int cin, const Tensor<double>& wt,
                             const Tensor<double>& b) {
  const int cout = static_cast<int>(wt.dim(0));
  std::vector<double> y(static_cast<std::size_t>(h) * w * cout);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j)
      for (int o = 0; o < cout; ++o) {
        double s = b.data()[o];
        for (int di = -1; di <= 1; ++di)
          for (int dj = -1; dj <= 1; ++dj) {
            const int r = i + di, c = j + dj;
            if (r < 0 || r >= h || c < 0 || c >= w) continue;
            for (int k = 0; k < cin; ++k) s += wt.at({o, k, di + 1, dj + 1}) * x[(static_cast<std::size_t>(r) * w + c) * cin + k];
          }
        y[(static_cast<std::size_t>(i) * w + j) * cout + o] = s;
      }
  return y;
}

}  // namespace

TEST_CASE("channel attention block matches a scalar pipeline") {
  auto cfg = block_config();
  HatModel<double> model(cfg, 3);
  testing::randomize(model, 4);
  const auto& p = model.groups[0].blocks[0].cab;
  auto rng = make_rng(5);
  const int h = 5, w = 6, c = cfg.channels;
  auto x = random_tensor<double>({h, w, c}, rng);
  auto y = cab_forward(x, p);
  REQUIRE(y.shape() == Shape{h, w, c});

  std::vector<double> xv(x.data().begin(), x.data().end());
  auto mid = conv_hwc(xv, h, w, c, p.conv1.weight, p.conv1.bias);
  for (auto& v : mid) v = gelu_scalar(v);
  auto feat = conv_hwc(mid, h, w, cfg.squeezed_channels(), p.conv2.weight, p.conv2.bias);
  std::vector<double> pooled(c, 0.0);
  for (int i = 0; i < h * w; ++i)
    for (int k = 0; k < c; ++k) pooled[k] += feat[static_cast<std::size_t>(i) * c + k] / (h * w);
  const int r = cfg.ca_channels();
  std::vector<double> hidden(r);
  for (int o = 0; o < r; ++o) {
    double s = p.ca_down.bias.data()[o];
    for (int k = 0; k < c; ++k) s += p.ca_down.weight.at({o, k}) * pooled[k];
    hidden[o] = std::max(0.0, s);
  }
  double worst = 0;
  for (int k = 0; k < c; ++k) {
    double s = p.ca_up.bias.data()[k];
    for (int o = 0; o < r; ++o) s += p.ca_up.weight.at({k, o}) * hidden[o];
    const double gate = 1 / (1 + std::exp(-s));
    for (int i = 0; i < h * w; ++i) {
      worst = std::max(worst, std::abs(y.data()[static_cast<std::size_t>(i) * c + k] - gate * feat[static_cast<std::size_t>(i) * c + k]));
    }
  }
  CHECK(worst < 1e-5);
}

TEST_CASE("channel attention block is zero for zero convolutions") {
  HatModel<double> model(block_config(), 1);
  auto p = model.groups[0].blocks[0].cab;
  for (auto t : {p.conv1.weight, p.conv1.bias, p.conv2.weight, p.conv2.bias, p.ca_down.bias, p.ca_up.bias}) {
    for (auto& v : t.mutable_data()) v = 0;
  }
  auto rng = make_rng(2);
  auto y = cab_forward(random_tensor<double>({4, 4, 8}, rng), p);
  for (double v : y.data()) CHECK(v == 0.0);
}

TEST_CASE("squeezed width of the default model") {
  const auto c = ModelConfig::preset("hat");
  CHECK(c.squeezed_channels() == 60);
  CHECK(c.alpha == 0.01);
  CHECK(c.beta == 3);
  CHECK(c.gamma == 0.5);
  CHECK(c.hab_per_rhag == 6);
}

TEST_CASE("alpha zero removes the convolution branch exactly") {
  auto cfg = block_config();
  double worst = 0;
  for (int draw = 0; draw < 50; ++draw) {
    HatModel<double> model(cfg, draw);
    testing::randomize(model, 1000 + draw);
    HabParams<double> with = model.groups[0].blocks[draw % 2];
    HabParams<double> without = with;
    without.has_cab = false;
    auto rng = make_rng(draw);
    auto x = random_tensor<double>({8, 8, cfg.channels}, rng);
    const auto spec = WindowSpec::self_attention(cfg.window, block_shift(draw, cfg.window));
    worst = std::max(worst, max_abs_diff(hab_forward(x, with, spec, 0.0), hab_forward(x, without, spec, 0.0)));
  }
  CHECK(worst <= 1e-6);
}

TEST_CASE("alpha-free block equals explicit window attention plus MLP") {
  auto cfg = block_config();
  HatModel<double> model(cfg, 7);
  testing::randomize(model, 8);
  auto p = model.groups[0].blocks[1];
  p.has_cab = false;
  auto rng = make_rng(9);
  auto x = random_tensor<double>({8, 8, cfg.channels}, rng);
  const auto spec = WindowSpec::self_attention(cfg.window, 2);
  auto xm = add(wmsa(layernorm(x, p.norm1.gamma, p.norm1.beta), p.attn, spec), x);
  auto fc = gelu(linear(layernorm(xm, p.norm2.gamma, p.norm2.beta), p.mlp.fc1.weight, p.mlp.fc1.bias));
  auto ref = add(linear(fc, p.mlp.fc2.weight, p.mlp.fc2.bias), xm);
  CHECK(max_abs_diff(hab_forward(x, p, spec, 0.0), ref) == 0.0);
}

TEST_CASE("zero overlap turns the overlapping block into an unshifted window block") {
  auto cfg = block_config();
  double worst = 0;
  for (int draw = 0; draw < 50; ++draw) {
    HatModel<double> model(cfg, 100 + draw);
    testing::randomize(model, 2000 + draw);
    const auto& o = model.groups[0].ocab;
    auto rng = make_rng(draw);
    auto attn = testing::random_attention(cfg.channels, cfg.heads, cfg.window, 0.0, rng);
    OcabParams<double> ocab{o.norm1, attn, o.norm2, o.mlp};
    HabParams<double> plain;
    plain.norm1 = o.norm1;
    plain.attn = attn;
    plain.has_cab = false;
    plain.norm2 = o.norm2;
    plain.mlp = o.mlp;
    auto x = random_tensor<double>({8, 12, cfg.channels}, rng);
    auto a = ocab_forward(x, ocab, WindowSpec::overlapping(cfg.window, 0.0));
    auto b = hab_forward(x, plain, WindowSpec::self_attention(cfg.window, 0), 0.0);
    worst = std::max(worst, max_abs_diff(a, b));
  }
  CHECK(worst <= 1e-6);
}

TEST_CASE("overlapping block preserves shape") {
  auto cfg = block_config();
  HatModel<double> model(cfg, 1);
  auto rng = make_rng(1);
  auto x = random_tensor<double>({32, 32, cfg.channels}, rng);
  CHECK(ocab_forward(x, model.groups[0].ocab, WindowSpec::overlapping(cfg.window, cfg.gamma)).shape() == x.shape());
}

TEST_CASE("block gradients match finite differences") {
  auto cfg = block_config();
  for (int inst = 0; inst < 3; ++inst) {
    HatModel<double> model(cfg, 50 + inst);
    testing::randomize(model, 60 + inst);
    auto rng = make_rng(70 + inst);
    auto x = random_tensor<double>({8, 8, cfg.channels}, rng);
    auto x4 = random_tensor<double>({4, 4, cfg.channels}, rng);
    const auto& hab0 = model.groups[0].blocks[0];
    const auto& hab1 = model.groups[0].blocks[1];
    const auto& ocab = model.groups[0].ocab;

    auto in_cab = cab_tensors(hab0.cab);
    in_cab.push_back(x4);
    auto g = check_gradients([&] { return cab_forward(x4, hab0.cab); }, in_cab, inst);
    CHECK_MESSAGE(g.max_rel < 1e-4, "cab " << g.worst);

    auto in_hab = hab_tensors(hab0);
    in_hab.push_back(x4);
    g = check_gradients([&] { return hab_forward(x4, hab0, WindowSpec::self_attention(4, 0), 0.3); }, in_hab, inst);
    CHECK_MESSAGE(g.max_rel < 1e-4, "hab " << g.worst);

    auto in_shift = hab_tensors(hab1);
    in_shift.push_back(x);
    g = check_gradients([&] { return hab_forward(x, hab1, WindowSpec::self_attention(4, 2), 0.3); }, in_shift, inst);
    CHECK_MESSAGE(g.max_rel < 1e-4, "shifted hab " << g.worst);

    auto in_ocab = ocab_tensors(ocab);
    in_ocab.push_back(x);
    g = check_gradients([&] { return ocab_forward(x, ocab, WindowSpec::overlapping(4, cfg.gamma)); }, in_ocab, inst);
    CHECK_MESSAGE(g.max_rel < 1e-4, "ocab " << g.worst);
  }
}

TEST_CASE("full tiny model gradient matches finite differences") {
  const auto cfg = ModelConfig::preset("tiny");
  for (int inst = 0; inst < 3; ++inst) {
    HatModel<double> model(cfg, 80 + inst);
    testing::randomize(model, 90 + inst, 0.2);
    auto rng = make_rng(100 + inst);
    auto img = random_tensor<double>({1, 3, 6, 7}, rng, 0, 1);
    std::vector<Tensor<double>> inputs;
    for (const auto& [name, t] : model.parameters()) inputs.push_back(t);
    inputs.push_back(img);
    auto g = check_gradients([&] { return model.forward(img); }, inputs, inst, 4, 1e-4);
    CHECK_MESSAGE(g.max_rel < 1e-4, g.worst);
  }
}

TEST_CASE("group equals explicitly chained blocks") {
  const auto cfg = ModelConfig::preset("tiny");
  HatModel<double> model(cfg, 11);
  testing::randomize(model, 12);
  auto rng = make_rng(13);
  auto x = random_tensor<double>({2, 8, 8, cfg.channels}, rng);
  const auto& g = model.groups[0];
  Tensor<double> t = x;
  t = hab_forward(t, g.blocks[0], WindowSpec::self_attention(4, 0), 0.01);
  t = hab_forward(t, g.blocks[1], WindowSpec::self_attention(4, 2), 0.01);
  t = ocab_forward(t, g.ocab, WindowSpec::overlapping(4, 0.5));
  auto ref = add(permute(conv2d(permute(t, {0, 3, 1, 2}), g.conv.weight, g.conv.bias, 1, 1), {0, 2, 3, 1}), x);
  CHECK(max_abs_diff(rhag_forward(x, g, cfg), ref) == 0.0);
}

TEST_CASE("group with silent blocks reduces to the convolution residual") {
  const auto cfg = ModelConfig::preset("tiny");
  HatModel<double> model(cfg, 14);
  testing::randomize(model, 15);
  auto g = model.groups[0];
  for (auto& b : g.blocks) {
    for (auto t : {b.attn.proj_weight, b.attn.proj_bias, b.mlp.fc2.weight, b.mlp.fc2.bias, b.cab.ca_up.weight}) {
      for (auto& v : t.mutable_data()) v = 0;
    }
    for (auto& v : b.cab.conv2.weight.mutable_data()) v = 0;
    for (auto& v : b.cab.conv2.bias.mutable_data()) v = 0;
  }
  for (auto t : {g.ocab.attn.proj_weight, g.ocab.attn.proj_bias, g.ocab.mlp.fc2.weight, g.ocab.mlp.fc2.bias}) {
    for (auto& v : t.mutable_data()) v = 0;
  }
  auto rng = make_rng(16);
  auto x = random_tensor<double>({1, 8, 8, cfg.channels}, rng);
  auto ref = add(permute(conv2d(permute(x, {0, 3, 1, 2}), g.conv.weight, g.conv.bias, 1, 1), {0, 2, 3, 1}), x);
  CHECK(max_abs_diff(rhag_forward(x, g, cfg), ref) == 0.0);
}

TEST_CASE("tiny model equals a composition of its modules") {
  const auto cfg = ModelConfig::preset("tiny");
  HatModel<double> model(cfg, 21);
  testing::randomize(model, 22);
  auto rng = make_rng(23);
  auto img = random_tensor<double>({1, 3, 8, 12}, rng, 0, 1);
  auto shallow = conv2d(img, model.conv_first.weight, model.conv_first.bias, 1, 1);
  auto t = permute(shallow, {0, 2, 3, 1});
  for (const auto& g : model.groups) t = rhag_forward(t, g, cfg);
  auto deep = add(conv2d(permute(t, {0, 3, 1, 2}), model.conv_after_body.weight, model.conv_after_body.bias, 1, 1), shallow);
  const auto& h = model.head;
  auto y = leaky_relu(conv2d(deep, h.conv_before.weight, h.conv_before.bias, 1, 1), 0.01);
  y = pixel_shuffle(conv2d(y, h.up[0].weight, h.up[0].bias, 1, 1), 2);
  y = conv2d(y, h.conv_last.weight, h.conv_last.bias, 1, 1);
  CHECK(max_abs_diff(model.forward(img), y) == 0.0);
}

TEST_CASE("output shapes follow the scale") {
  auto rng = make_rng(1);
  auto img = random_tensor<double>({1, 3, 24, 24}, rng, 0, 1);
  for (int s : {2, 3, 4}) {
    auto cfg = ModelConfig::preset("tiny");
    cfg.scale = s;
    HatModel<double> model(cfg, 1);
    CHECK(model.forward(img).shape() == Shape{1, 3, 24 * s, 24 * s});
  }
  auto cfg = ModelConfig::preset("tiny");
  cfg.head = HeadKind::SameResolution;
  cfg.scale = 1;
  HatModel<double> same(cfg, 1);
  CHECK(same.forward(img).shape() == img.shape());
  CHECK_THROWS_AS(same.forward(random_tensor<double>({1, 1, 8, 8}, rng)), ShapeError);
}

TEST_CASE("inputs off the window grid are padded and cropped") {
  const auto cfg = ModelConfig::preset("tiny");
  HatModel<double> model(cfg, 31);
  testing::randomize(model, 32);
  auto rng = make_rng(33);
  auto img = random_tensor<double>({2, 3, 9, 6}, rng, 0, 1);
  auto out = model.forward(img);
  REQUIRE(out.shape() == Shape{2, 3, 18, 12});
  auto padded = pad2d(img, 0, 3, 0, 2, PadMode::Reflect);
  auto ref = crop2d(model.forward(padded), 0, 0, 18, 12);
  CHECK(max_abs_diff(out, ref) == 0.0);
  CHECK(max_abs_diff(model.forward(img), out) == 0.0);
}

TEST_CASE("batch entries are processed independently") {
  const auto cfg = ModelConfig::preset("tiny");
  HatModel<double> model(cfg, 41);
  testing::randomize(model, 42);
  auto rng = make_rng(43);
  auto a = random_tensor<double>({1, 3, 8, 8}, rng, 0, 1);
  auto b = random_tensor<double>({1, 3, 8, 8}, rng, 0, 1);
  Tensor<double> both({2, 3, 8, 8});
  std::copy(a.data().begin(), a.data().end(), both.mutable_data().begin());
  std::copy(b.data().begin(), b.data().end(), both.mutable_data().begin() + a.numel());
  auto y = model.forward(both);
  auto ya = model.forward(a), yb = model.forward(b);
  double worst = 0;
  for (std::int64_t i = 0; i < ya.numel(); ++i) {
    worst = std::max(worst, std::abs(y.data()[i] - ya.data()[i]));
    worst = std::max(worst, std::abs(y.data()[ya.numel() + i] - yb.data()[i]));
  }
  CHECK(worst < 1e-12);
}

TEST_CASE("initialization follows the stated scheme") {
  HatModel<double> model(ModelConfig::preset("tiny"), 5);
  for (const auto& [name, t] : model.parameters()) {
    if (name.find("norm") != std::string::npos) {
      for (double v : t.data()) CHECK(v == (name.ends_with(".weight") ? 1.0 : 0.0));
    } else if (name.find(".qkv.") != std::string::npos || name.find(".proj.") != std::string::npos ||
               name.find(".fc") != std::string::npos || name.find("bias_table") != std::string::npos) {
      const bool is_bias = name.ends_with(".bias");
      for (double v : t.data()) CHECK(is_bias ? v == 0.0 : std::abs(v) <= 0.04);
    } else if (t.rank() == 4) {
      const double bound = 1 / std::sqrt(static_cast<double>(t.dim(1) * t.dim(2) * t.dim(3)));
      for (double v : t.data()) CHECK(std::abs(v) <= bound);
    }
  }
  HatModel<double> again(ModelConfig::preset("tiny"), 5);
  for (std::size_t i = 0; i < model.parameters().size(); ++i) {
    CHECK(model.parameters()[i].first == again.parameters()[i].first);
    CHECK(max_abs_diff(model.parameters()[i].second, again.parameters()[i].second) == 0.0);
  }
}

TEST_CASE("parameter paths are unique and addressable") {
  HatModel<float> model(ModelConfig::preset("tiny"), 1);
  std::set<std::string> seen;
  for (const auto& [name, t] : model.parameters()) CHECK(seen.insert(name).second);
  CHECK(model.parameter("conv_first.weight").shape() == Shape{16, 3, 3, 3});
  CHECK_THROWS_AS(model.parameter("nope"), ConfigError);
}

TEST_CASE("block shifts alternate") {
  CHECK(block_shift(0, 16) == 0);
  CHECK(block_shift(1, 16) == 8);
  CHECK(block_shift(4, 16) == 0);
  CHECK(block_shift(5, 8) == 4);
}
