#include <doctest.h>

#include "hat/errors.h"
#include "hat/ops.h"
#include "support.h"

using namespace hat;
using testing::check_gradients;
using testing::make_rng;
using testing::random_tensor;

TEST_CASE("tensor basics") {
  Tensor<double> t({2, 3}, 1.5);
  CHECK(t.numel() == 6);
  CHECK(t.dim(-1) == 3);
  CHECK(t.at({1, 2}) == 1.5);
  auto c = t.clone();
  c.mutable_data()[0] = 4;
  CHECK(t.data()[0] == 1.5);
  CHECK(Tensor<double>::scalar(2.0).item() == 2.0);
  CHECK_THROWS_AS(Tensor<double>({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
}

TEST_CASE("backward requires a scalar") {
  GradTape<double> tape;
  auto x = Tensor<double>({2}, 1.0).set_requires_grad(true);
  Tensor<double> y;
  {
    TapeScope<double> s(tape);
    y = scale(x, 2.0);
  }
  CHECK_THROWS_AS(tape.backward(y), ShapeError);
}

TEST_CASE("ops do not record without an active tape") {
  auto x = Tensor<double>({3}, 1.0).set_requires_grad(true);
  auto y = sum(mul(x, x));
  CHECK(y.item() == doctest::Approx(3.0));
  CHECK_FALSE(x.has_grad());
}

TEST_CASE("matmul matches nested loops with batch broadcast") {
  auto rng = make_rng(1);
  auto a = random_tensor<double>({2, 3, 4, 5}, rng);
  auto b = random_tensor<double>({5, 6}, rng);
  auto c = matmul(a, b);
  REQUIRE(c.shape() == Shape{2, 3, 4, 6});
  std::vector<double> bv(b.data().begin(), b.data().end());
  for (int s = 0; s < 6; ++s) {
    std::vector<double> av(a.data().begin() + s * 20, a.data().begin() + (s + 1) * 20);
    auto ref = testing::naive_matmul(av, bv, 4, 5, 6);
    for (int i = 0; i < 24; ++i) CHECK(c.data()[s * 24 + i] == doctest::Approx(ref[i]).epsilon(1e-12));
  }
  CHECK_THROWS_AS(matmul(a, random_tensor<double>({4, 6}, rng)), ShapeError);
}

TEST_CASE("conv2d matches direct summation") {
  auto rng = make_rng(2);
  for (auto [stride, pad] : {std::pair{1, 1}, std::pair{1, 0}, std::pair{2, 1}}) {
    auto x = random_tensor<double>({2, 3, 7, 7}, rng);
    auto w = random_tensor<double>({4, 3, 3, 3}, rng);
    auto b = random_tensor<double>({4}, rng);
    auto y = conv2d(x, w, b, stride, pad);
    auto ref = testing::naive_conv2d(x, w, b, stride, pad);
    REQUIRE(static_cast<std::size_t>(y.numel()) == ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(y.data()[i] == doctest::Approx(ref[i]).epsilon(1e-12));
  }
  auto x = random_tensor<double>({1, 3, 6, 6}, rng);
  CHECK_THROWS_AS(conv2d(x, random_tensor<double>({4, 3, 3, 3}, rng), Tensor<double>(), 2, 0), ShapeError);
}

TEST_CASE("elementwise and reduction gradients") {
  auto rng = make_rng(3);
  auto a = random_tensor<double>({3, 4}, rng);
  auto b = random_tensor<double>({4}, rng);
  auto pos = random_tensor<double>({3, 4}, rng, 0.5, 2.0);
  CHECK(check_gradients([&] { return add(a, b); }, {a, b}, 1).max_rel < 1e-6);
  CHECK(check_gradients([&] { return sub(b, a); }, {a, b}, 2).max_rel < 1e-6);
  CHECK(check_gradients([&] { return mul(a, b); }, {a, b}, 3).max_rel < 1e-6);
  CHECK(check_gradients([&] { return gelu(a); }, {a}, 4).max_rel < 1e-6);
  CHECK(check_gradients([&] { return sigmoid(a); }, {a}, 5).max_rel < 1e-6);
  CHECK(check_gradients([&] { return hat::sqrt(pos); }, {pos}, 6).max_rel < 1e-6);
  CHECK(check_gradients([&] { return softmax(a, 1); }, {a}, 7).max_rel < 1e-6);
  CHECK(check_gradients([&] { return softmax(a, 0); }, {a}, 8).max_rel < 1e-6);
  CHECK(check_gradients([&] { return mean(mul(a, a)); }, {a}, 9).max_rel < 1e-6);
  CHECK(check_gradients([&] { return leaky_relu(a, 0.1); }, {a}, 10).max_rel < 1e-6);
}

TEST_CASE("linear, layernorm and matmul gradients") {
  auto rng = make_rng(4);
  auto x = random_tensor<double>({2, 3, 5}, rng);
  auto w = random_tensor<double>({4, 5}, rng);
  auto b = random_tensor<double>({4}, rng);
  CHECK(check_gradients([&] { return linear(x, w, b); }, {x, w, b}, 1).max_rel < 1e-6);
  auto g = random_tensor<double>({5}, rng);
  auto be = random_tensor<double>({5}, rng);
  CHECK(check_gradients([&] { return layernorm(x, g, be); }, {x, g, be}, 2).max_rel < 1e-6);
  auto p = random_tensor<double>({2, 4, 3}, rng);
  auto q = random_tensor<double>({3, 5}, rng);
  CHECK(check_gradients([&] { return matmul(p, q); }, {p, q}, 3).max_rel < 1e-6);
}

TEST_CASE("conv2d gradient") {
  auto rng = make_rng(5);
  auto x = random_tensor<double>({2, 2, 5, 5}, rng);
  auto w = random_tensor<double>({3, 2, 3, 3}, rng);
  auto b = random_tensor<double>({3}, rng);
  CHECK(check_gradients([&] { return conv2d(x, w, b, 1, 1); }, {x, w, b}, 1, 20).max_rel < 1e-6);
  CHECK(check_gradients([&] { return conv2d(x, w, b, 2, 1); }, {x, w, b}, 2, 20).max_rel < 1e-6);
}

TEST_CASE("sqrt and abs use zero subgradient at zero") {
  GradTape<double> tape;
  auto x = Tensor<double>({3}, std::vector<double>{0.0, 4.0, -2.0}).set_requires_grad(true);
  {
    TapeScope<double> s(tape);
    tape.backward(add(sum(hat::sqrt(mul(x, x))), sum(hat::abs(x))));
  }
  const auto g = x.grad();
  CHECK(g.data()[0] == 0.0);
  CHECK(g.data()[1] == doctest::Approx(2.0));
  CHECK(g.data()[2] == doctest::Approx(-2.0));
}

TEST_CASE("l1 loss matches a scalar loop") {
  auto rng = make_rng(6);
  auto a = random_tensor<double>({2, 3, 4, 4}, rng);
  auto b = random_tensor<double>({2, 3, 4, 4}, rng);
  double ref = 0;
  for (std::size_t i = 0; i < a.data().size(); ++i) ref += std::abs(a.data()[i] - b.data()[i]);
  ref /= static_cast<double>(a.numel());
  CHECK(std::abs(l1_loss(a, b).item() - ref) < 1e-7);
  CHECK(l1_loss(a, a).item() == 0.0);
  auto shifted = add_scalar(a, 0.25);
  CHECK(l1_loss(shifted, a).item() == doctest::Approx(0.25).epsilon(1e-12));
  CHECK_THROWS_AS(l1_loss(a, random_tensor<double>({2, 3, 4, 5}, rng)), ShapeError);

  GradTape<double> tape;
  auto p = Tensor<double>({2}, std::vector<double>{1.0, 3.0}).set_requires_grad(true);
  auto t = Tensor<double>({2}, std::vector<double>{1.0, 2.0});
  {
    TapeScope<double> s(tape);
    tape.backward(l1_loss(p, t));
  }
  CHECK(p.grad().data()[0] == 0.0);
  CHECK(p.grad().data()[1] == doctest::Approx(0.5));
}

TEST_CASE("layout ops are exact inverses") {
  auto rng = make_rng(7);
  auto x = random_tensor<double>({2, 8, 6, 4}, rng);
  CHECK(testing::max_abs_diff(pixel_unshuffle(pixel_shuffle(x, 2), 2), x) == 0.0);
  auto y = random_tensor<double>({1, 3, 6, 9}, rng);
  CHECK(testing::max_abs_diff(pixel_shuffle(pixel_unshuffle(y, 3), 3), y) == 0.0);
  CHECK(testing::max_abs_diff(roll2d(roll2d(y, 2, -4), -2, 4), y) == 0.0);
  CHECK(testing::max_abs_diff(permute(permute(x, {0, 2, 3, 1}), {0, 3, 1, 2}), x) == 0.0);
  CHECK(testing::max_abs_diff(crop2d(pad2d(y, 1, 2, 3, 4, PadMode::Reflect), 1, 3, 6, 9), y) == 0.0);
}

TEST_CASE("pixel shuffle follows the depth-to-space index law") {
  Tensor<double> x({1, 8, 2, 3});
  for (std::int64_t i = 0; i < x.numel(); ++i) x.mutable_data()[i] = static_cast<double>(i);
  const int s = 2;
  auto y = pixel_shuffle(x, s);
  REQUIRE(y.shape() == Shape{1, 2, 4, 6});
  for (int c = 0; c < 2; ++c)
    for (int h = 0; h < 4; ++h)
      for (int w = 0; w < 6; ++w) CHECK(y.at({0, c, h, w}) == x.at({0, c * s * s + (h % s) * s + (w % s), h / s, w / s}));
}

TEST_CASE("roll2d moves content forward") {
  Tensor<double> x({1, 1, 3, 4});
  for (std::int64_t i = 0; i < 12; ++i) x.mutable_data()[i] = static_cast<double>(i);
  auto y = roll2d(x, 1, 2);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 4; ++c) CHECK(y.at({0, 0, r, c}) == x.at({0, 0, (r + 2) % 3, (c + 2) % 4}));
}

TEST_CASE("reflect padding folds repeatedly") {
  CHECK(reflect_index(-1, 4) == 1);
  CHECK(reflect_index(4, 4) == 2);
  CHECK(reflect_index(-7, 4) == 1);
  CHECK(reflect_index(9, 4) == 3);
  CHECK(reflect_index(5, 1) == 0);
  Tensor<double> x({1, 1, 1, 3}, std::vector<double>{1, 2, 3});
  auto y = pad2d(x, 0, 0, 2, 2, PadMode::Reflect);
  const std::vector<double> want{3, 2, 1, 2, 3, 2, 1};
  for (int i = 0; i < 7; ++i) CHECK(y.data()[i] == want[i]);
  auto z = pad2d(x, 0, 0, 1, 0, PadMode::Zero);
  CHECK(z.data()[0] == 0.0);
  CHECK_THROWS_AS(pad2d(x, -1, 0, 0, 0, PadMode::Zero), ShapeError);
}

TEST_CASE("layout op gradients") {
  auto rng = make_rng(8);
  auto x = random_tensor<double>({1, 8, 3, 3}, rng);
  CHECK(check_gradients([&] { return pixel_shuffle(x, 2); }, {x}, 1).max_rel < 1e-8);
  CHECK(check_gradients([&] { return pad2d(x, 2, 1, 0, 2, PadMode::Reflect); }, {x}, 2, 30).max_rel < 1e-8);
  CHECK(check_gradients([&] { return roll2d(x, 1, -1); }, {x}, 3).max_rel < 1e-8);
  CHECK(check_gradients([&] { return global_avg_pool(x); }, {x}, 4).max_rel < 1e-8);
}

TEST_CASE("float and double agree") {
  auto rng = make_rng(9);
  auto a = random_tensor<double>({4, 6}, rng);
  auto b = random_tensor<double>({6, 3}, rng);
  auto d = softmax(matmul(a, b));
  auto f = softmax(matmul(a.cast<float>(), b.cast<float>()));
  CHECK(testing::max_abs_diff(f.cast<double>(), d) < 1e-6);
}
