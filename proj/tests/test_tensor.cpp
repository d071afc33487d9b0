#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "advseg/gradcheck.hpp"
#include "advseg/tensor.hpp"

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

}  // namespace

TEST_CASE("tensor_from basic construction") {
  auto t = tensor_from<float>({2, 2}, {1, 2, 3, 4}, false);
  CHECK(t.shape() == Shape{2, 2});
  CHECK(t.data_vec() == std::vector<float>{1, 2, 3, 4});
  CHECK_FALSE(t.requires_grad());

  auto s = tensor_from<float>({1}, {0}, true);
  CHECK(s.numel() == 1);
  CHECK(s.requires_grad());
}

TEST_CASE("tensor_from rejects bad shapes") {
  CHECK_THROWS_AS(tensor_from<float>({3, 0}, {}, false), ShapeError);
  CHECK_THROWS_AS(tensor_from<float>({2, 2}, {1, 2, 3}, false), ShapeError);
}

TEST_CASE("unary forward values") {
  auto x = tensor_from<float>({4}, {-1.0f, 2.5f, 0.0f, -0.5f});
  auto r = relu<float>(nullptr, x);
  CHECK(r.data_vec() == std::vector<float>{0.0f, 2.5f, 0.0f, 0.0f});

  auto l = leaky_relu<float>(nullptr, x, 0.2f);
  CHECK(l.at({0}) == Catch::Approx(-0.2));
  CHECK(l.at({1}) == Catch::Approx(2.5));

  auto sg = sigmoid<float>(nullptr, tensor_from<float>({1}, {0.0f}));
  CHECK(sg.value() == Catch::Approx(0.5));
}

TEST_CASE("log backward gives 1/x") {
  DTape tape;
  auto x = DTensor::from({1}, {2.0}, true);
  auto y = log(&tape, x);
  tape.backward(y);
  CHECK(x.grad()[0] == Catch::Approx(0.5));
}

TEST_CASE("log rejects non-positive input") {
  auto x = tensor_from<float>({2}, {1.0f, -3.0f});
  CHECK_THROWS_AS(log<float>(nullptr, x), NumericError);
}

TEST_CASE("binary add and identities") {
  auto a = tensor_from<float>({2}, {1, 2});
  auto b = tensor_from<float>({2}, {3, 4});
  CHECK(add<float>(nullptr, a, b).data_vec() == std::vector<float>{4, 6});

  auto ones = TensorT<float>::full({2}, 1.0f);
  CHECK(mul<float>(nullptr, a, ones).data_vec() == a.data_vec());
}

TEST_CASE("binary shape errors and zero division") {
  auto a = tensor_from<float>({2}, {1, 2});
  auto b = tensor_from<float>({3}, {1, 2, 3});
  CHECK_THROWS_AS(add<float>(nullptr, a, b), ShapeError);
  auto z = tensor_from<float>({2}, {1, 0});
  CHECK_THROWS_AS(div<float>(nullptr, a, z), NumericError);
}

TEST_CASE("product gradient matches finite differences") {
  std::mt19937_64 rng(7);
  auto a = random_tensor({2, 3}, rng);
  auto b = random_tensor({2, 3}, rng);
  GradCheckFn<double> f = [&](DTape* tape, std::vector<DTensor>& ps) {
    return reduce_sum_all(tape, mul(tape, ps[0], ps[1]));
  };
  auto res = grad_check<double>(f, {a, b});
  CHECK(res.max_rel_err < 1e-3);

  // grad of sum(a*b) w.r.t. a equals b
  DTape tape;
  std::vector<DTensor> ps{a, b};
  a.zero_grad();
  b.zero_grad();
  auto y = reduce_sum_all(&tape, mul(&tape, a, b));
  tape.backward(y);
  for (std::int64_t i = 0; i < a.numel(); ++i)
    CHECK(a.grad()[i] == Catch::Approx(b.data()[i]));
}

TEST_CASE("broadcast over singleton dims sums gradient") {
  std::mt19937_64 rng(9);
  auto a = random_tensor({2, 3}, rng);
  auto b = random_tensor({2, 1}, rng);
  GradCheckFn<double> f = [&](DTape* tape, std::vector<DTensor>& ps) {
    return reduce_sum_all(tape, mul(tape, ps[0], ps[1]));
  };
  auto res = grad_check<double>(f, {a, b});
  CHECK(res.max_rel_err < 1e-3);

  auto c = random_tensor({1, 3}, rng);
  GradCheckFn<double> g = [&](DTape* tape, std::vector<DTensor>& ps) {
    return reduce_sum_all(tape, div(tape, ps[0], ps[1]));
  };
  auto res2 = grad_check<double>(g, {a, c});
  CHECK(res2.max_rel_err < 1e-3);
}

TEST_CASE("softmax_channels values") {
  auto zeros = TensorT<float>::zeros({1, 4, 2, 2});
  auto p = softmax_channels<float>(nullptr, zeros);
  for (std::int64_t i = 0; i < p.numel(); ++i) CHECK(p.data()[i] == Catch::Approx(0.25));

  std::vector<float> logits = {std::log(1.0f), std::log(2.0f), std::log(3.0f), std::log(4.0f)};
  auto x = tensor_from<float>({1, 4, 1, 1}, logits);
  auto q = softmax_channels<float>(nullptr, x);
  CHECK(q.at({0, 0, 0, 0}) == Catch::Approx(0.1));
  CHECK(q.at({0, 1, 0, 0}) == Catch::Approx(0.2));
  CHECK(q.at({0, 2, 0, 0}) == Catch::Approx(0.3));
  CHECK(q.at({0, 3, 0, 0}) == Catch::Approx(0.4));
}

TEST_CASE("softmax_channels normalization and range") {
  std::mt19937_64 rng(21);
  auto x = random_tensor({2, 4, 3, 3}, rng, false, -5.0, 5.0);
  auto p = softmax_channels<double>(nullptr, x);
  for (int b = 0; b < 2; ++b)
    for (int y = 0; y < 3; ++y)
      for (int xx = 0; xx < 3; ++xx) {
        double s = 0;
        for (int c = 0; c < 4; ++c) {
          double v = p.at({b, c, y, xx});
          CHECK(v > 0.0);
          CHECK(v < 1.0);
          s += v;
        }
        CHECK(std::fabs(s - 1.0) < 1e-6);
      }
}

TEST_CASE("softmax_channels jacobian vs finite differences") {
  std::mt19937_64 rng(33);
  auto x = random_tensor({2, 4, 2, 2}, rng);
  auto w = random_tensor({2, 4, 2, 2}, rng, false);
  GradCheckFn<double> f = [&](DTape* tape, std::vector<DTensor>& ps) {
    return reduce_sum_all(tape, mul(tape, softmax_channels(tape, ps[0]), w));
  };
  auto res = grad_check<double>(f, {x});
  CHECK(res.max_rel_err < 1e-3);
}

TEST_CASE("matmul forward") {
  auto eye = tensor_from<float>({2, 2}, {1, 0, 0, 1});
  auto m = tensor_from<float>({2, 2}, {5, 6, 7, 8});
  CHECK(matmul<float>(nullptr, eye, m).data_vec() == m.data_vec());

  auto a = tensor_from<float>({1, 2}, {1, 2});
  auto b = tensor_from<float>({2, 1}, {3, 4});
  CHECK(matmul<float>(nullptr, a, b).value() == Catch::Approx(11.0));

  auto bad = tensor_from<float>({3, 1}, {1, 2, 3});
  CHECK_THROWS_AS(matmul<float>(nullptr, a, bad), ShapeError);
}

TEST_CASE("matmul backward vs finite differences") {
  std::mt19937_64 rng(5);
  auto a = random_tensor({3, 4}, rng);
  auto b = random_tensor({4, 2}, rng);
  auto w = random_tensor({3, 2}, rng, false);
  GradCheckFn<double> f = [&](DTape* tape, std::vector<DTensor>& ps) {
    return reduce_sum_all(tape, mul(tape, matmul(tape, ps[0], ps[1]), w));
  };
  auto res = grad_check<double>(f, {a, b});
  CHECK(res.max_rel_err < 1e-3);
}

TEST_CASE("reduce values and gradient") {
  auto x = tensor_from<float>({4}, {1, 2, 3, 4});
  CHECK(reduce_mean_all<float>(nullptr, x).value() == Catch::Approx(2.5));

  // empty axis set acts as identity
  auto idt = reduce<float>(nullptr, x, ReduceKind::Sum, {});
  CHECK(idt.data_vec() == x.data_vec());

  Tape tape;
  auto xr = tensor_from<float>({4}, {1, 2, 3, 4}, true);
  auto m = reduce_mean_all(&tape, xr);
  tape.backward(m);
  for (int i = 0; i < 4; ++i) CHECK(xr.grad()[i] == Catch::Approx(0.25));

  CHECK_THROWS_AS(reduce<float>(nullptr, x, ReduceKind::Sum, {5}), ShapeError);
}

TEST_CASE("reduce over a subset of axes") {
  auto x = tensor_from<float>({2, 3}, {1, 2, 3, 4, 5, 6});
  auto rows = reduce<float>(nullptr, x, ReduceKind::Sum, {1});
  CHECK(rows.shape() == Shape{2});
  CHECK(rows.data_vec() == std::vector<float>{6, 15});
  auto cols = reduce<float>(nullptr, x, ReduceKind::Mean, {0}, true);
  CHECK(cols.shape() == Shape{1, 3});
  CHECK(cols.data_vec() == std::vector<float>{2.5, 3.5, 4.5});
}

TEST_CASE("backward seeds and accumulates") {
  Tape tape;
  auto x = tensor_from<float>({1}, {3.0f}, true);
  tape.backward(x);
  CHECK(x.grad()[0] == Catch::Approx(1.0));

  Tape tape2;
  auto w = tensor_from<float>({3}, {1, 2, 3}, true);
  auto v = tensor_from<float>({3}, {4, 5, 6});
  auto y = reduce_sum_all(&tape2, mul(&tape2, w, v));
  tape2.backward(y);
  for (int i = 0; i < 3; ++i) CHECK(w.grad()[i] == Catch::Approx(v.data()[i]));
  // second pass without reset accumulates
  tape2.backward(y);
  for (int i = 0; i < 3; ++i) CHECK(w.grad()[i] == Catch::Approx(2 * v.data()[i]));

  auto vec = tensor_from<float>({2}, {1, 2}, true);
  Tape tape3;
  CHECK_THROWS_AS(tape3.backward(vec), ContractError);
}

TEST_CASE("backward is linear in the loss") {
  std::mt19937_64 rng(11);
  auto w = random_tensor({3, 3}, rng);
  auto x = random_tensor({3, 3}, rng, false);

  auto grads_for = [&](double a) {
    w.zero_grad();
    DTape tape;
    auto y = scale(&tape, reduce_sum_all(&tape, mul(&tape, sigmoid(&tape, w), x)), a);
    tape.backward(y);
    return w.grad_vec();
  };
  auto g1 = grads_for(1.0);
  auto g3 = grads_for(3.0);
  for (std::size_t i = 0; i < g1.size(); ++i)
    CHECK(g3[i] == Catch::Approx(3.0 * g1[i]).epsilon(1e-6));
}

TEST_CASE("grad_check analytic example x^2") {
  auto x = DTensor::from({1}, {3.0}, true);
  GradCheckFn<double> f = [](DTape* tape, std::vector<DTensor>& ps) {
    return mul(tape, ps[0], ps[0]);
  };
  auto res = grad_check<double>(f, {x});
  CHECK(res.max_rel_err < 1e-9);
}

TEST_CASE("grad_check rejects non-deterministic closures") {
  auto x = DTensor::from({1}, {1.0}, true);
  int calls = 0;
  GradCheckFn<double> f = [&calls](DTape* tape, std::vector<DTensor>& ps) {
    ++calls;
    auto noise = DTensor::scalar(static_cast<double>(calls));
    return mul(tape, ps[0], noise);
  };
  CHECK_THROWS_AS(grad_check<double>(f, {x}), ContractError);
}

TEST_CASE("grad_check validates step size") {
  auto x = DTensor::from({1}, {1.0}, true);
  GradCheckFn<double> f = [](DTape* tape, std::vector<DTensor>& ps) {
    return mul(tape, ps[0], ps[0]);
  };
  GradCheckOptions opt;
  opt.h = 0.5;
  CHECK_THROWS_AS(grad_check<double>(f, {x}, opt), ContractError);
}

TEST_CASE("clamp passes gradient only inside the range") {
  DTape tape;
  auto x = DTensor::from({3}, {-0.5, 0.5, 1.5}, true);
  auto y = reduce_sum_all(&tape, clamp(&tape, x, 0.0, 1.0));
  tape.backward(y);
  CHECK(x.grad()[0] == 0.0);
  CHECK(x.grad()[1] == 1.0);
  CHECK(x.grad()[2] == 0.0);
}

TEST_CASE("concat_channels forward and split backward") {
  std::mt19937_64 rng(42);
  auto a = random_tensor({2, 3, 4, 4}, rng);
  auto b = random_tensor({2, 4, 4, 4}, rng);
  auto c = concat_channels<double>(nullptr, a, b);
  CHECK(c.shape() == Shape{2, 7, 4, 4});
  CHECK(c.at({1, 2, 3, 3}) == a.at({1, 2, 3, 3}));
  CHECK(c.at({1, 5, 0, 0}) == b.at({1, 2, 0, 0}));

  auto w = random_tensor({2, 7, 4, 4}, rng, false);
  GradCheckFn<double> f = [&](DTape* tape, std::vector<DTensor>& ps) {
    return reduce_sum_all(tape, mul(tape, concat_channels(tape, ps[0], ps[1]), w));
  };
  auto res = grad_check<double>(f, {a, b});
  CHECK(res.max_rel_err < 1e-3);

  auto bad = random_tensor({2, 3, 5, 4}, rng);
  CHECK_THROWS_AS(concat_channels<double>(nullptr, a, bad), ShapeError);
}
