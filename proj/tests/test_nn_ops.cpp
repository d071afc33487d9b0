#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "advseg/gradcheck.hpp"
#include "advseg/nn_ops.hpp"

using namespace advseg;

using DTensor = TensorT<double>;
using DTape = TapeT<double>;

namespace {

DTensor random_tensor(const Shape& shape, std::mt19937_64& rng, bool requires_grad = true,
                      double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = dist(rng);
  return DTensor::from(shape, std::move(v), requires_grad);
}

DTensor random_projection(const Shape& shape, std::mt19937_64& rng) {
  return random_tensor(shape, rng, false);
}

}  // namespace

TEST_CASE("conv2d 1x1 unit kernel is identity") {
  std::mt19937_64 rng(1);
  auto x = random_tensor({1, 1, 4, 4}, rng, false);
  auto w = tensor_from<double>({1, 1, 1, 1}, {1.0});
  auto b = TensorT<double>::zeros({1});
  auto y = conv2d<double>(nullptr, x, w, b, 1, 0);
  CHECK(y.shape() == x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == x.data()[i]);
}

TEST_CASE("conv2d centered delta kernel is identity") {
  std::mt19937_64 rng(2);
  auto x = random_tensor({1, 1, 5, 5}, rng, false);
  std::vector<double> wv(9, 0.0);
  wv[4] = 1.0;  // center of the 3x3 kernel
  auto w = tensor_from<double>({1, 1, 3, 3}, wv);
  auto b = TensorT<double>::zeros({1});
  auto y = conv2d<double>(nullptr, x, w, b, 1, 1);
  CHECK(y.shape() == x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == x.data()[i]);
}

TEST_CASE("conv2d output extents use floor semantics") {
  std::mt19937_64 rng(3);
  auto x = random_tensor({1, 1, 64, 64}, rng, false);
  auto w = random_tensor({2, 1, 3, 3}, rng, false);
  auto b = TensorT<double>::zeros({2});
  auto y = conv2d<double>(nullptr, x, w, b, 2, 1);
  CHECK(y.shape() == Shape{1, 2, 32, 32});

  auto x13 = random_tensor({1, 1, 13, 13}, rng, false);
  auto y13 = conv2d<double>(nullptr, x13, w, b, 2, 1);
  CHECK(y13.shape() == Shape{1, 2, 7, 7});
}

TEST_CASE("conv2d rejects invalid geometry") {
  std::mt19937_64 rng(4);
  auto x = random_tensor({1, 1, 2, 2}, rng, false);
  auto w5 = random_tensor({1, 1, 3, 3}, rng, false);
  auto b = TensorT<double>::zeros({1});
  CHECK_THROWS_AS(conv2d<double>(nullptr, x, w5, b, 1, 0), ShapeError);  // window too large

  auto wbad = random_tensor({1, 2, 3, 3}, rng, false);
  CHECK_THROWS_AS(conv2d<double>(nullptr, x, wbad, b, 1, 1), ShapeError);  // channel mismatch
}

TEST_CASE("conv2d all gradients vs finite differences") {
  std::mt19937_64 rng(5);
  auto x = random_tensor({1, 2, 5, 5}, rng);
  auto w = random_tensor({3, 2, 3, 3}, rng);
  auto b = random_tensor({3}, rng);
  auto proj = random_projection({1, 3, 5, 5}, rng);
  GradCheckFn<double> f = [&](DTape* tape, std::vector<DTensor>& ps) {
    return reduce_sum_all(tape, mul(tape, conv2d(tape, ps[0], ps[1], ps[2], 1, 1), proj));
  };
  auto res = grad_check<double>(f, {x, w, b});
  CHECK(res.max_rel_err < 1e-3);
}

TEST_CASE("conv2d stride-2 and 1x1 gradients vs finite differences") {
  std::mt19937_64 rng(6);
  auto x = random_tensor({2, 2, 6, 6}, rng);
  auto w = random_tensor({2, 2, 3, 3}, rng);
  auto b = random_tensor({2}, rng);
  auto proj = random_projection({2, 2, 3, 3}, rng);
  GradCheckFn<double> f = [&](DTape* tape, std::vector<DTensor>& ps) {
    return reduce_sum_all(tape, mul(tape, conv2d(tape, ps[0], ps[1], ps[2], 2, 1), proj));
  };
  CHECK(grad_check<double>(f, {x, w, b}).max_rel_err < 1e-3);

  auto w1 = random_tensor({3, 2, 1, 1}, rng);
  auto b1 = random_tensor({3}, rng);
  auto proj1 = random_projection({2, 3, 6, 6}, rng);
  GradCheckFn<double> g = [&](DTape* tape, std::vector<DTensor>& ps) {
    return reduce_sum_all(tape, mul(tape, conv2d(tape, ps[0], ps[1], ps[2], 1, 0), proj1));
  };
  CHECK(grad_check<double>(g, {x, w1, b1}).max_rel_err < 1e-3);
}

TEST_CASE("instance_norm constant channel collapses to beta") {
  auto x = TensorT<double>::full({1, 2, 4, 4}, 3.7);
  auto gamma = TensorT<double>::full({2}, 1.0);
  auto beta = tensor_from<double>({2}, {0.25, -1.0});
  auto y = instance_norm<double>(nullptr, x, gamma, beta);
  for (int c = 0; c < 2; ++c)
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j)
        CHECK(y.at({0, c, i, j}) == Catch::Approx(beta.data()[c]).margin(1e-4));
}

TEST_CASE("instance_norm standardizes each plane") {
  std::mt19937_64 rng(7);
  auto x = random_tensor({2, 3, 4, 4}, rng, false, -2.0, 5.0);
  auto gamma = TensorT<double>::full({3}, 1.0);
  auto beta = TensorT<double>::zeros({3});
  auto y = instance_norm<double>(nullptr, x, gamma, beta);
  for (int b = 0; b < 2; ++b)
    for (int c = 0; c < 3; ++c) {
      double mu = 0, var = 0;
      for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) mu += y.at({b, c, i, j});
      mu /= 16.0;
      for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) {
          double d = y.at({b, c, i, j}) - mu;
          var += d * d;
        }
      var /= 16.0;
      CHECK(std::fabs(mu) < 1e-5);
      CHECK(std::fabs(var - 1.0) < 1e-3);
    }
}

TEST_CASE("instance_norm gradients vs finite differences") {
  std::mt19937_64 rng(8);
  auto x = random_tensor({2, 3, 4, 4}, rng);
  auto gamma = random_tensor({3}, rng, true, 0.5, 1.5);
  auto beta = random_tensor({3}, rng);
  auto proj = random_projection({2, 3, 4, 4}, rng);
  GradCheckFn<double> f = [&](DTape* tape, std::vector<DTensor>& ps) {
    return reduce_sum_all(tape, mul(tape, instance_norm(tape, ps[0], ps[1], ps[2]), proj));
  };
  auto res = grad_check<double>(f, {x, gamma, beta});
  CHECK(res.max_rel_err < 1e-3);
}

TEST_CASE("maxpool2 values and tie handling") {
  auto x = tensor_from<float>({1, 1, 2, 2}, {1, 2, 3, 4});
  auto y = maxpool2<float>(nullptr, x);
  CHECK(y.value() == Catch::Approx(4.0));

  // constant window: gradient lands on the first element in scan order
  Tape tape;
  auto c = TensorT<float>::full({1, 1, 2, 2}, 5.0f, true);
  auto p = maxpool2(&tape, c);
  tape.backward(p);
  CHECK(c.grad()[0] == 1.0f);
  CHECK(c.grad()[1] == 0.0f);
  CHECK(c.grad()[2] == 0.0f);
  CHECK(c.grad()[3] == 0.0f);

  auto odd = TensorT<float>::zeros({1, 1, 3, 4});
  CHECK_THROWS_AS(maxpool2<float>(nullptr, odd), ShapeError);
}

TEST_CASE("maxpool2 backward vs finite differences on tie-free input") {
  // distinct values per window keep the argmax stable under +-h
  std::mt19937_64 rng(9);
  std::vector<double> v(64);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(i % 7) + 0.05 * i;
  std::shuffle(v.begin(), v.end(), rng);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] += 1e-3 * static_cast<double>(i);
  auto x = DTensor::from({1, 4, 4, 4}, v, true);
  auto proj = random_projection({1, 4, 2, 2}, rng);
  GradCheckFn<double> f = [&](DTape* tape, std::vector<DTensor>& ps) {
    return reduce_sum_all(tape, mul(tape, maxpool2(tape, ps[0]), proj));
  };
  auto res = grad_check<double>(f, {x});
  CHECK(res.max_rel_err < 1e-3);
}

TEST_CASE("upsample_nn2 replicates and inverts maxpool on its output") {
  auto x = tensor_from<float>({1, 1, 1, 1}, {1.0f});
  auto y = upsample_nn2<float>(nullptr, x);
  CHECK(y.shape() == Shape{1, 1, 2, 2});
  for (int i = 0; i < 4; ++i) CHECK(y.data()[i] == 1.0f);

  std::mt19937_64 rng(10);
  auto z = random_tensor({2, 3, 3, 3}, rng, false);
  auto up = upsample_nn2<double>(nullptr, z);
  auto down = maxpool2<double>(nullptr, up);
  for (std::int64_t i = 0; i < z.numel(); ++i) CHECK(down.data()[i] == z.data()[i]);
}

TEST_CASE("upsample_nn2 backward vs finite differences") {
  std::mt19937_64 rng(11);
  auto x = random_tensor({1, 2, 3, 3}, rng);
  auto proj = random_projection({1, 2, 6, 6}, rng);
  GradCheckFn<double> f = [&](DTape* tape, std::vector<DTensor>& ps) {
    return reduce_sum_all(tape, mul(tape, upsample_nn2(tape, ps[0]), proj));
  };
  CHECK(grad_check<double>(f, {x}).max_rel_err < 1e-3);
}

TEST_CASE("global_avg_pool values and backward") {
  auto c = TensorT<float>::full({1, 3, 4, 4}, 2.5f);
  auto y = global_avg_pool<float>(nullptr, c);
  CHECK(y.shape() == Shape{1, 3});
  for (int i = 0; i < 3; ++i) CHECK(y.data()[i] == Catch::Approx(2.5));

  auto x = tensor_from<float>({1, 1, 2, 2}, {1, 3, 5, 7});
  CHECK(global_avg_pool<float>(nullptr, x).value() == Catch::Approx(4.0));

  std::mt19937_64 rng(12);
  auto z = random_tensor({2, 3, 4, 4}, rng);
  auto proj = random_projection({2, 3}, rng);
  GradCheckFn<double> f = [&](DTape* tape, std::vector<DTensor>& ps) {
    return reduce_sum_all(tape, mul(tape, global_avg_pool(tape, ps[0]), proj));
  };
  CHECK(grad_check<double>(f, {z}).max_rel_err < 1e-3);
}

TEST_CASE("grad_check flags a corrupted conv backward") {
  // Custom op: correct forward, backward computed with the pad off by one.
  std::mt19937_64 rng(13);
  auto x = random_tensor({1, 1, 5, 5}, rng);
  auto w = random_tensor({1, 1, 3, 3}, rng, false);
  auto b = TensorT<double>::zeros({1});
  auto proj = random_projection({1, 1, 5, 5}, rng);

  auto corrupted_conv = [&](DTape* tape, const DTensor& in) {
    const int B = 1, Cin = 1, H = 5, W = 5, Cout = 1, kh = 3, kw = 3;
    auto out = DTensor::zeros({B, Cout, H, W});
    detail::conv2d_forward(in.data(), B, Cin, H, W, w.data(), Cout, kh, kw, b.data(), 1, 1, H, W,
                           out.data());
    if (tape && in.tracked()) {
      out.storage()->tracked = true;
      auto is = in.storage();
      auto os = out.storage();
      auto ws = w.storage();
      tape->record(os, [is, os, ws]() {
        if (os->grad.empty()) return;
        is->ensure_grad();
        // wrong pad (0 instead of 1) with a cropped 3x3 output grid
        detail::conv2d_backward(is->data.data(), os->grad.data(), 1, 1, 5, 5, ws->data.data(), 1,
                                3, 3, 1, 0, 3, 3, is->grad.data(), static_cast<double*>(nullptr),
                                static_cast<double*>(nullptr));
      });
    }
    return out;
  };

  GradCheckFn<double> f = [&](DTape* tape, std::vector<DTensor>& ps) {
    return reduce_sum_all(tape, mul(tape, corrupted_conv(tape, ps[0]), proj));
  };
  auto res = grad_check<double>(f, {x});
  CHECK(res.max_rel_err > 1e-1);
}
