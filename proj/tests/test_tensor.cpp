#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "rlcore/tensor.hpp"
#include "support/gradcheck.hpp"

using namespace rlcore;

namespace {

std::vector<float> vec(const Tensor& t) {
  return std::vector<float>(t.data().begin(), t.data().end());
}

}  // namespace

TEST_CASE("matmul basics") {
  auto eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  auto m = Tensor::from({2, 2}, {1, 2, 3, 4});
  CHECK(vec(matmul(eye, m)) == std::vector<float>{1, 2, 3, 4});

  auto row = Tensor::from({1, 2}, {1, 2});
  auto col = Tensor::from({2, 1}, {3, 4});
  CHECK(matmul(row, col).item() == doctest::Approx(11.0f));

  CHECK_THROWS_WITH_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})),
                       doctest::Contains("[2,3]"), ShapeError);
}

TEST_CASE("matmul gradient: d sum(A*B)/dA = ones * B^T") {
  auto a = Tensor::from({2, 3}, {0.1f, -0.4f, 0.7f, 0.3f, 0.2f, -0.9f}, true);
  auto b = Tensor::from({3, 2}, {1.0f, -2.0f, 0.5f, 0.25f, -1.5f, 3.0f});
  {
    Tape tape;
    tape.backward(sum(matmul(a, b)));
  }
  // row sums of B, replicated per row of A
  const std::vector<float> expect = {-1.0f, 0.75f, 1.5f, -1.0f, 0.75f, 1.5f};
  for (int i = 0; i < 6; ++i) CHECK(a.grad()[i] == doctest::Approx(expect[i]));

  // cross-check against finite differences on the forward pass
  auto fd = gradcheck::fd_gradient([&]() { return sum(matmul(a, b)).item(); }, a);
  for (int i = 0; i < 6; ++i) CHECK(a.grad()[i] == doctest::Approx(fd[i]).epsilon(1e-2));
}

TEST_CASE("unary op values") {
  CHECK(tanh(Tensor::scalar(0.0f)).item() == 0.0f);
  CHECK(exp(Tensor::scalar(0.0f)).item() == 1.0f);
  CHECK(softplus(Tensor::scalar(0.0f)).item() == doctest::Approx(std::log(2.0)));
  CHECK_THROWS_AS(log(Tensor::from({2}, {1.0f, 0.0f})), DomainError);
}

TEST_CASE("softplus derivative at 0 is 0.5") {
  auto x = Tensor::from({1}, {0.0f}, true);
  {
    Tape tape;
    tape.backward(sum(softplus(x)));
  }
  CHECK(x.grad()[0] == doctest::Approx(0.5f));
  auto fd = gradcheck::fd_gradient([&]() { return softplus(x).data()[0]; }, x);
  CHECK(x.grad()[0] == doctest::Approx(fd[0]).epsilon(1e-3));
}

TEST_CASE("elementwise with broadcasting") {
  auto v = Tensor::from({3}, {1, 2, 3});
  CHECK(vec(v + 1.0f) == std::vector<float>{2, 3, 4});
  CHECK(vec(maximum(Tensor::from({2}, {1, 5}), Tensor::from({2}, {4, 2}))) ==
        std::vector<float>{4, 5});
  CHECK_THROWS_AS(add(Tensor::zeros({2, 3}), Tensor::zeros({4})), ShapeError);

  // matrix + row vector
  auto m = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  auto r = Tensor::from({3}, {10, 20, 30});
  CHECK(vec(add(m, r)) == std::vector<float>{11, 22, 33, 14, 25, 36});
}

TEST_CASE("broadcast mul gradient matches finite differences") {
  auto m = Tensor::from({2, 3}, {0.3f, -0.8f, 0.5f, 1.2f, -0.1f, 0.9f}, true);
  auto r = Tensor::from({3}, {0.7f, -1.1f, 0.4f}, true);
  {
    Tape tape;
    tape.backward(mean(mul(m, r)));
  }
  auto eval = [&]() { return mean(mul(m, r)).item(); };
  auto fd_m = gradcheck::fd_gradient(eval, m);
  auto fd_r = gradcheck::fd_gradient(eval, r);
  for (int i = 0; i < 6; ++i) CHECK(m.grad()[i] == doctest::Approx(fd_m[i]).epsilon(1e-2));
  for (int i = 0; i < 3; ++i) CHECK(r.grad()[i] == doctest::Approx(fd_r[i]).epsilon(1e-2));
}

TEST_CASE("reduce") {
  auto m = Tensor::from({2, 2}, {1, 2, 3, 4});
  CHECK(sum(m).item() == 10.0f);
  CHECK(vec(mean(m, {0})) == std::vector<float>{2, 3});
  CHECK_THROWS_AS(sum(m, {2}), ShapeError);

  auto w = Tensor::from({2, 2}, {1, 2, 3, 4}, true);
  {
    Tape tape;
    tape.backward(sum(w));
  }
  CHECK(std::vector<float>(w.grad().begin(), w.grad().end()) ==
        std::vector<float>{1, 1, 1, 1});
}

TEST_CASE("clamp") {
  auto x = Tensor::from({2}, {0.5f, 1.5f});
  CHECK(vec(clamp(x, 0.8f, 1.2f)) == std::vector<float>{0.8f, 1.2f});
  const float big = std::numeric_limits<float>::max();
  CHECK(vec(clamp(x, -big, big)) == vec(x));
  CHECK_THROWS_AS(clamp(x, 2.0f, 1.0f), ArgumentError);

  // gradient mask is the interior indicator, boundary inclusive
  auto y = Tensor::from({4}, {-1.0f, 0.0f, 0.5f, 2.0f}, true);
  {
    Tape tape;
    tape.backward(sum(clamp(y, 0.0f, 1.0f)));
  }
  CHECK(std::vector<float>(y.grad().begin(), y.grad().end()) ==
        std::vector<float>{0, 1, 1, 0});
}

TEST_CASE("backward basics and errors") {
  auto w = Tensor::from({2}, {1, 2}, true);
  {
    Tape tape;
    tape.backward(sum(square(w)));
  }
  CHECK(w.grad()[0] == doctest::Approx(2.0f));
  CHECK(w.grad()[1] == doctest::Approx(4.0f));

  {
    Tape tape;
    CHECK_THROWS_AS(tape.backward(square(w)), ShapeError);
  }
  {
    Tape tape;
    auto loss = sum(square(w));
    tape.backward(loss);
    CHECK_THROWS_AS(tape.backward(loss), StateError);
  }
}

TEST_CASE("gradients accumulate until zeroed") {
  auto w = Tensor::from({2}, {1, 2}, true);
  for (int rep = 0; rep < 2; ++rep) {
    Tape tape;
    tape.backward(sum(w));
  }
  CHECK(w.grad()[0] == doctest::Approx(2.0f));
  w.zero_grad();
  CHECK(w.grad()[0] == 0.0f);
}

TEST_CASE("backward is linear in the loss") {
  const uint64_t seed = 7;
  auto plan = gradcheck::plan_composition(seed);
  auto values = gradcheck::leaf_values(plan);

  auto grads_for = [&](float a, float b) {
    std::vector<Tensor> leaves;
    for (size_t i = 0; i < plan.leaf_shapes.size(); ++i) {
      std::vector<float> v(values[i].begin(), values[i].end());
      leaves.push_back(Tensor::from(plan.leaf_shapes[i], std::move(v), true));
    }
    Tape tape;
    auto l1 = mean(square(leaves[0]));
    auto l2 = sum(leaves[0]) * 0.25f;
    tape.backward(l1 * a + l2 * b);
    return std::vector<float>(leaves[0].grad().begin(), leaves[0].grad().end());
  };

  auto g1 = grads_for(1.0f, 0.0f);
  auto g2 = grads_for(0.0f, 1.0f);
  auto gc = grads_for(2.0f, -3.0f);
  for (size_t i = 0; i < gc.size(); ++i) {
    CHECK(gc[i] == doctest::Approx(2.0f * g1[i] - 3.0f * g2[i]).epsilon(1e-4));
  }
}

TEST_CASE("no spurious grads without an active tape") {
  auto w = Tensor::from({2}, {1, 2}, true);
  auto y = square(w);
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("reshape and concat_rows carry gradients") {
  auto x = Tensor::from({2, 2}, {1, 2, 3, 4}, true);
  auto y = Tensor::from({1, 2}, {5, 6}, true);
  {
    Tape tape;
    auto flat = reshape(x, {4});
    auto joined = concat_rows({x, y});
    tape.backward(sum(square(flat)) + sum(joined));
  }
  CHECK(x.grad()[0] == doctest::Approx(2.0f * 1 + 1));
  CHECK(x.grad()[3] == doctest::Approx(2.0f * 4 + 1));
  CHECK(y.grad()[1] == doctest::Approx(1.0f));
  CHECK_THROWS_AS(reshape(x, {3}), ShapeError);
  CHECK_THROWS_AS(concat_rows({x, Tensor::zeros({1, 3})}), ShapeError);
}

TEST_CASE("random compositions match the double-precision oracle") {
  double worst32 = 0.0;
  double worst64 = 0.0;
  for (uint64_t seed = 0; seed < 30; ++seed) {
    auto r = gradcheck::check_composition(seed);
    worst32 = std::max(worst32, r.err32);
    worst64 = std::max(worst64, r.err64);
  }
  CHECK(worst32 < 1e-2);
  CHECK(worst64 < 1e-4);
}

TEST_CASE("finite inputs in domain never produce NaN or Inf") {
  RngStream rng(99, StreamTag::kTest, {3});
  for (int rep = 0; rep < 50; ++rep) {
    auto a = Tensor::uniform({3, 4}, rng, -3.0f, 3.0f);
    auto b = Tensor::uniform({3, 4}, rng, -3.0f, 3.0f);
    auto pos = add(softplus(b), Tensor::scalar(0.1f));
    for (const Tensor& t :
         {add(a, b), mul(a, b), div(a, pos), tanh(a), sigmoid(a), softplus(a), exp(a), log(pos),
          clamp(a, -1.0f, 1.0f), minimum(a, b), maximum(a, b), mean(a), sum(square(a))}) {
      for (float v : t.data()) CHECK(std::isfinite(v));
    }
  }
}
