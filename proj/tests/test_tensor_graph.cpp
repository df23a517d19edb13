#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <thread>
#include <vector>

#include "drm/grad_check.hpp"
#include "drm/graph.hpp"
#include "drm/rng.hpp"
#include "drm/soft_conformal.hpp"
#include "drm/tensor.hpp"

using namespace drm;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

}  // namespace

TEST_CASE("tensor basics") {
  Tensor s = Tensor::scalar(3.5);
  CHECK(s.is_scalar());
  CHECK(s.item() == 3.5);
  CHECK(shape_numel({}) == 1);

  Tensor m({2, 3});
  CHECK(m.size() == 6);
  CHECK(m.shape_str() == "[2, 3]");
  CHECK_THROWS_AS(Tensor({2, 2}, {1.0, 2.0}), std::invalid_argument);
}

TEST_CASE("relu forward") {
  Graph g;
  Node* x = g.constant(Tensor({3}, {-1.0, 0.0, 2.0}));
  Node* y = relu(x);
  CHECK(y->value[0] == 0.0);
  CHECK(y->value[1] == 0.0);
  CHECK(y->value[2] == 2.0);
}

TEST_CASE("l2_normalize 3-4-5") {
  Graph g;
  Node* x = g.constant(Tensor({2}, {3.0, 4.0}));
  Node* y = l2_normalize(x);
  CHECK(y->value[0] == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(y->value[1] == doctest::Approx(0.8).epsilon(1e-15));
}

TEST_CASE("matmul identity") {
  Graph g;
  Rng rng(7, 0);
  Tensor a = random_tensor({3, 3}, rng);
  Tensor eye({3, 3});
  for (int i = 0; i < 3; ++i) eye.at(i, i) = 1.0;
  Node* y = matmul(g.constant(eye), g.constant(a));
  for (std::size_t i = 0; i < 9; ++i) CHECK(y->value[i] == a[i]);
}

TEST_CASE("backward of sum(w*w)") {
  Graph g;
  Node* w = g.leaf(Tensor({2}, {1.0, 2.0}));
  Node* root = sum(mul(w, w));
  g.backward(root);
  CHECK(w->grad[0] == doctest::Approx(2.0));
  CHECK(w->grad[1] == doctest::Approx(4.0));
}

TEST_CASE("sigmoid gradient at zero") {
  Graph g;
  Node* x = g.leaf(Tensor::scalar(0.0));
  Node* root = sigmoid(x);
  CHECK(root->value.item() == doctest::Approx(0.5));
  g.backward(root);
  CHECK(x->grad[0] == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("shared subgraph accumulates (x + x)") {
  Graph g;
  Node* x = g.leaf(Tensor::scalar(1.5));
  Node* root = add(x, x);
  g.backward(root);
  CHECK(x->grad[0] == 2.0);
}

TEST_CASE("repeated backward accumulates; zero_grad resets") {
  Graph g;
  Node* x = g.leaf(Tensor::scalar(2.0));
  Node* root = mul(x, x);
  g.backward(root);
  g.backward(root);
  CHECK(x->grad[0] == doctest::Approx(8.0));
  g.zero_grad();
  g.backward(root);
  CHECK(x->grad[0] == doctest::Approx(4.0));
}

TEST_CASE("non-scalar backward root rejected") {
  Graph g;
  Node* x = g.leaf(Tensor({2}, {1.0, 2.0}));
  CHECK_THROWS_AS(g.backward(x), GraphError);
}

TEST_CASE("shape mismatch errors name both shapes") {
  Graph g;
  Node* a = g.constant(Tensor({2, 3}));
  Node* b = g.constant(Tensor({4, 5}));
  CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("[2, 3]"), GraphError);
  CHECK_THROWS_WITH_AS(add(a, b), doctest::Contains("[4, 5]"), GraphError);
}

TEST_CASE("non-finite op output is an error") {
  Graph g;
  Node* x = g.constant(Tensor::scalar(-1.0));
  CHECK_THROWS_AS(drm::log(x), NonFiniteError);
}

TEST_CASE("softmax cross entropy is stable for huge logits") {
  Graph g;
  Node* logits = g.leaf(Tensor({2, 3}, {1e4, -1e4, 0.0, -1e4, 1e4, 5.0}));
  Node* loss = softmax_cross_entropy(logits, {0, 1});
  CHECK(std::isfinite(loss->value.item()));
  g.backward(loss);
  CHECK(logits->grad.all_finite());
}

TEST_CASE("grad_check quadratic") {
  auto build = [](Graph& g, const std::vector<Node*>& p) { return mul(p[0], p[0]); };
  const double err = grad_check(build, {Tensor::scalar(3.0)}, 1e-5);
  CHECK(err < 1e-6);
}

TEST_CASE("grad_check soft-min of five random distances") {
  Rng rng(11, 0);
  Tensor d = random_tensor({5}, rng, 0.0, 2.0);
  auto build = [](Graph& g, const std::vector<Node*>& p) {
    std::vector<Node*> parts;
    for (std::size_t i = 0; i < 5; ++i) parts.push_back(index_scalar(p[0], i));
    return soft_min(parts, 0.3);
  };
  CHECK(grad_check(build, {d}, 1e-5) < 1e-4);
}

TEST_CASE("grad_check full soft martingale on 20-point sequence") {
  Rng rng(13, 0);
  Tensor f = random_tensor({20, 4}, rng, -1.0, 1.0);
  SoftConfig cfg = SoftConfig::from_sigma(0.05, 1.0, DetectMode::Covariate);
  auto build = [&](Graph& g, const std::vector<Node*>& p) {
    return soft_martingale_matrix(p[0], std::nullopt, cfg).mean_penalty;
  };
  CHECK(grad_check(build, {f}, 1e-5) < 1e-3);
}

TEST_CASE("random two-layer mlp loss matches finite differences") {
  Rng rng(17, 0);
  Tensor x = random_tensor({4, 3}, rng);
  Tensor w1 = random_tensor({3, 5}, rng, -0.5, 0.5);
  Tensor b1 = random_tensor({5}, rng, -0.1, 0.1);
  Tensor w2 = random_tensor({5, 2}, rng, -0.5, 0.5);
  Tensor b2 = random_tensor({2}, rng, -0.1, 0.1);
  const std::vector<int> labels{0, 1, 1, 0};
  auto build = [&](Graph& g, const std::vector<Node*>& p) {
    Node* h = drm::tanh(add_rows(matmul(g.constant(x), p[0]), p[1]));
    Node* logits = add_rows(matmul(h, p[2]), p[3]);
    return softmax_cross_entropy(logits, labels);
  };
  CHECK(grad_check(build, {w1, b1, w2, b2}, 1e-5) < 1e-4);
}

// Gradient of every registered op against central differences on random
// inputs. Inputs are kept away from kinks (relu/abs/sign/maxpool/clamp) so
// the finite-difference oracle is valid.
TEST_CASE("per-op gradients match finite differences on 100 random inputs") {
  Rng rng(23, 0);
  const double tol = 1e-4;
  const double eps = 1e-5;
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    Tensor a = random_tensor({2, 3}, rng, 0.2, 2.0);
    Tensor b = random_tensor({2, 3}, rng, 0.2, 2.0);
    if (trial % 2 == 0) {
      for (std::size_t i = 0; i < a.size(); ++i) a[i] = -a[i];  // negative branch
    }
    Tensor v = random_tensor({3}, rng, -1.5, -0.2);
    Tensor m2 = random_tensor({3, 2}, rng, -1.0, 1.0);
    Tensor s = Tensor::scalar(rng.uniform(0.3, 1.7));
    const double gamma = trial % 3 == 0 ? 1.0 : 2.0;

    auto check = [&](const NodeBuilder& build, std::vector<Tensor> params) {
      worst = std::max(worst, grad_check(build, std::move(params), eps));
    };

    check([](Graph& g, const std::vector<Node*>& p) { return sum(add(p[0], p[1])); }, {a, b});
    check([](Graph& g, const std::vector<Node*>& p) { return sum(sub(p[0], p[1])); }, {a, b});
    check([](Graph& g, const std::vector<Node*>& p) { return sum(mul(p[0], p[1])); }, {a, b});
    check([](Graph& g, const std::vector<Node*>& p) { return sum(div(p[0], p[1])); }, {a, b});
    check([](Graph& g, const std::vector<Node*>& p) { return mean(mul(p[0], p[0])); }, {a});
    check([](Graph& g, const std::vector<Node*>& p) { return sum(scale(p[0], -2.5)); }, {a});
    check([](Graph& g, const std::vector<Node*>& p) { return sum(add_const(p[0], 0.7)); }, {a});
    check([](Graph& g, const std::vector<Node*>& p) { return sum(matmul(p[0], p[1])); }, {a, m2});
    check([](Graph& g, const std::vector<Node*>& p) { return sum(transpose(p[0])); }, {a});
    check([](Graph& g, const std::vector<Node*>& p) { return sum(mul(relu(p[0]), p[0])); }, {a});
    check([](Graph& g, const std::vector<Node*>& p) { return sum(drm::tanh(p[0])); }, {a});
    check([](Graph& g, const std::vector<Node*>& p) { return sum(sigmoid(p[0])); }, {a});
    check([](Graph& g, const std::vector<Node*>& p) { return sum(drm::exp(scale(p[0], 0.3))); }, {a});
    check([](Graph& g, const std::vector<Node*>& p) { return sum(drm::log(pow_abs(p[0], 2.0))); },
          {a});
    check([](Graph& g, const std::vector<Node*>& p) { return sum(mul(drm::abs(p[0]), p[0])); }, {a});
    check([](Graph& g, const std::vector<Node*>& p) { return sum(mul(sign(p[0]), p[0])); }, {a});
    check([gamma](Graph& g, const std::vector<Node*>& p) { return sum(pow_abs(p[0], gamma)); }, {a});
    check([](Graph& g, const std::vector<Node*>& p) { return sum(clamp(p[0], -0.9, 0.9)); }, {a});
    check([](Graph& g, const std::vector<Node*>& p) { return sum(l2_normalize(p[0])); }, {a});
    check([](Graph& g, const std::vector<Node*>& p) { return dot(p[0], p[0]); }, {v});
    check([](Graph& g, const std::vector<Node*>& p) { return sum(add_rows(p[0], p[1])); }, {a, v});
    check([](Graph& g, const std::vector<Node*>& p) {
      return sum(concat({p[0], p[1]}, 1));
    }, {a, b});
    check([](Graph& g, const std::vector<Node*>& p) {
      return sum(mul(stack({p[0], p[1]}), stack({p[1], p[0]})));
    }, {v, v});
    check([](Graph& g, const std::vector<Node*>& p) {
      return sum(reshape(mul(p[0], p[0]), {3, 2}));
    }, {a});
    check([](Graph& g, const std::vector<Node*>& p) { return index_scalar(mul(p[0], p[0]), 4); },
          {a});
    check([](Graph& g, const std::vector<Node*>& p) { return mul(p[0], p[1]); },
          {s, Tensor::scalar(rng.uniform(-2.0, -0.5))});
    check([](Graph& g, const std::vector<Node*>& p) {
      return softmax_cross_entropy(p[0], {1, 0});
    }, {random_tensor({2, 4}, rng, -2.0, 2.0)});
  }
  CHECK(worst < tol);
}

TEST_CASE("conv2d matches finite differences") {
  Rng rng(29, 0);
  Tensor x = random_tensor({2, 2, 5, 5}, rng);
  Tensor w = random_tensor({3, 2, 3, 3}, rng, -0.5, 0.5);
  Tensor b = random_tensor({3}, rng, -0.2, 0.2);
  for (int stride : {1, 2}) {
    for (int pad : {0, 1}) {
      auto build = [stride, pad](Graph& g, const std::vector<Node*>& p) {
        Node* y = conv2d(p[0], p[1], p[2], stride, pad);
        return sum(mul(y, y));
      };
      CHECK(grad_check(build, {x, w, b}, 1e-5) < 1e-4);
    }
  }
}

TEST_CASE("maxpool2d matches finite differences away from ties") {
  Rng rng(31, 0);
  Tensor x({1, 2, 4, 4});
  // Distinct, well-separated entries so eps never flips an argmax.
  for (std::size_t i = 0; i < x.size(); ++i) {
    x[i] = static_cast<double>(i) * 0.37 + rng.uniform(0.0, 0.1);
  }
  auto build = [](Graph& g, const std::vector<Node*>& p) {
    Node* y = maxpool2d(p[0], 2, 2);
    return sum(mul(y, y));
  };
  CHECK(grad_check(build, {x}, 1e-6) < 1e-4);
}

TEST_CASE("conv2d rejects too-small inputs") {
  Graph g;
  Node* x = g.constant(Tensor({1, 1, 2, 2}));
  Node* w = g.constant(Tensor({1, 1, 3, 3}));
  CHECK_THROWS_AS(conv2d(x, w, nullptr, 1, 0), GraphError);
}

TEST_CASE("independent graphs run in parallel safely") {
  // Tensors are immutable after construction; independent graphs share them.
  Tensor shared = Tensor({64}, std::vector<double>(64, 0.5));
  std::vector<double> results(4);
  std::vector<std::thread> threads;
  for (int k = 0; k < 4; ++k) {
    threads.emplace_back([&, k]() {
      Graph g;
      Node* x = g.leaf(shared);
      Node* root = sum(mul(x, x));
      g.backward(root);
      results[static_cast<std::size_t>(k)] = root->value.item();
    });
  }
  for (auto& t : threads) t.join();
  for (double r : results) CHECK(r == doctest::Approx(16.0));
}
