#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "mltr/tensor.hpp"
#include "oracles.hpp"

using namespace mltr;

namespace {

double loss_value(const Tensor& t) { return t.item(); }

// Runs f under a fresh tape, backpropagates, and returns the analytic grad of
// `param`, then checks it against central finite differences.
template <class F>
void check_grad(F build_loss, std::vector<Tensor> params, double tol = 1e-4) {
  for (auto& p : params) p.zero_grad();
  Tape tape;
  {
    TapeScope scope(tape);
    Tensor loss = build_loss();
    tape.backward(loss);
  }
  for (auto& p : params) {
    std::vector<double> analytic(p.grad().begin(), p.grad().end());
    auto fd = oracles::fd_grad([&]() { return loss_value(build_loss()); }, p);
    INFO("param of shape " << shape_str(p.shape()));
    REQUIRE(oracles::max_rel_err(analytic, fd) < tol);
  }
}

Tensor leaf(Shape shape, std::vector<double> v) {
  Tensor t(std::move(shape), std::move(v));
  t.set_requires_grad(true);
  return t;
}

Tensor random_leaf(Shape shape, Rng& rng, double lo = -2.0, double hi = 2.0) {
  Tensor t = rand_uniform<double>(shape, rng, lo, hi);
  t.set_requires_grad(true);
  return t;
}

}  // namespace

TEST_CASE("matmul forward hand cases") {
  Tensor eye({2, 2}, {1, 0, 0, 1});
  Tensor m({2, 2}, {3, 4, 5, 6});
  auto prod = matmul(eye, m);
  REQUIRE(prod.data() == std::vector<double>{3, 4, 5, 6});

  Tensor a({1, 2}, {1, 2});
  Tensor b({2, 1}, {3, 4});
  REQUIRE(matmul(a, b).item() == 11.0);
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tensor a({2, 3});
  Tensor b({2, 2});
  try {
    matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    REQUIRE(msg.find("[2,3]") != std::string::npos);
    REQUIRE(msg.find("[2,2]") != std::string::npos);
  }
}

TEST_CASE("matmul gradient matches the stated rule and finite differences") {
  Tensor a = leaf({1, 2}, {1, 2});
  Tensor b = leaf({2, 1}, {3, 4});
  Tape tape;
  {
    TapeScope scope(tape);
    tape.backward(sum(matmul(a, b)));
  }
  REQUIRE(a.grad() == std::vector<double>{3, 4});
  REQUIRE(b.grad() == std::vector<double>{1, 2});

  Tensor a2 = leaf({1, 2}, {1, 2});
  Tensor b2 = leaf({2, 1}, {3, 4});
  check_grad([&]() { return sum(matmul(a2, b2)); }, {a2, b2});
}

TEST_CASE("batched matmul shapes and gradients") {
  Rng rng(7);
  Tensor a = random_leaf({3, 2, 4}, rng);
  Tensor b = random_leaf({3, 4, 2}, rng);
  Tensor w = random_leaf({4, 5}, rng);

  REQUIRE(matmul(a, b).shape() == Shape{3, 2, 2});
  REQUIRE(matmul(a, w).shape() == Shape{3, 2, 5});

  check_grad([&]() { return sum(mul(matmul(a, b), matmul(a, b))); }, {a, b});
  check_grad([&]() { return sum(mul(matmul(a, w), matmul(a, w))); }, {a, w});
}

TEST_CASE("softmax values") {
  Tensor z({3}, {0, 0, 0});
  auto u = softmax(z, 0);
  for (double v : u.data()) REQUIRE(v == Catch::Approx(1.0 / 3.0).margin(1e-15));

  Tensor x({3}, {1, 2, 3});
  auto s = softmax(x, 0);
  REQUIRE(s.data()[0] == Catch::Approx(0.09003057317038046).margin(1e-12));
  REQUIRE(s.data()[1] == Catch::Approx(0.24472847105479767).margin(1e-12));
  REQUIRE(s.data()[2] == Catch::Approx(0.66524095577482183).margin(1e-12));
}

TEST_CASE("softmax shift invariance and row sums") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = rand_uniform<double>({4, 6}, rng, -3, 3);
    Tensor shifted = add_scalar(x, 17.25);
    auto s0 = softmax(x, 1);
    auto s1 = softmax(shifted, 1);
    for (std::size_t i = 0; i < s0.size(); ++i)
      REQUIRE(s0.data()[i] == Catch::Approx(s1.data()[i]).margin(1e-14));
    for (std::size_t r = 0; r < 4; ++r) {
      double rowsum = 0;
      for (std::size_t c = 0; c < 6; ++c) rowsum += s0.data()[r * 6 + c];
      REQUIRE(std::abs(rowsum - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("elementwise hand cases") {
  Tensor x({3}, {2, 4, 6});
  REQUIRE(mean(x).item() == 4.0);

  Tensor y({2, 3}, {1, 2, 3, 4, 5, 6});
  auto r = reshape(reshape(y, {3, 2}), {2, 3});
  REQUIRE(r.data() == y.data());

  Tensor one = leaf({1}, {1.0});
  Tape tape;
  {
    TapeScope scope(tape);
    tape.backward(sum(exp(one)));
  }
  auto fd = oracles::fd_grad([&]() { return sum(exp(one)).item(); }, one);
  REQUIRE(oracles::rel_err(one.grad()[0], std::exp(1.0)) < 1e-12);
  REQUIRE(oracles::rel_err(one.grad()[0], fd[0]) < 1e-6);
}

TEST_CASE("domain guards") {
  Tensor neg({2}, {1.0, -0.5});
  REQUIRE_THROWS_AS(log(neg), DomainError);
  Tensor z({2}, {1.0, 0.0});
  Tensor a({2}, {1.0, 1.0});
  REQUIRE_THROWS_AS(divide(a, z), DomainError);
  REQUIRE_THROWS_AS(pow_scalar(neg, 0.5), DomainError);
}

TEST_CASE("backward populates leaf gradients") {
  Rng rng(3);
  Tensor x = random_leaf({2, 3}, rng);
  Tape tape;
  {
    TapeScope scope(tape);
    tape.backward(sum(x));
  }
  for (double g : x.grad()) REQUIRE(g == 1.0);

  Tensor v = leaf({3}, {1, 2, 3});
  Tape tape2;
  {
    TapeScope scope(tape2);
    tape2.backward(sum(mul(v, v)));
  }
  REQUIRE(v.grad() == std::vector<double>{2, 4, 6});
}

TEST_CASE("backward contract errors") {
  Tensor x = leaf({2}, {1, 2});
  Tape tape;
  {
    TapeScope scope(tape);
    Tensor y = mul(x, x);
    REQUIRE_THROWS_AS(tape.backward(y), ContractError);  // non-scalar loss
    Tensor l = sum(y);
    tape.backward(l);
    REQUIRE_THROWS_AS(tape.backward(l), ContractError);  // consumed tape
  }
  Tape empty;
  REQUIRE_THROWS_AS(empty.backward(Tensor::scalar(0.0)), ContractError);
}

TEST_CASE("gradient accumulation equals sum of single-use gradients") {
  Rng rng(5);
  Tensor base = rand_uniform<double>({4}, rng, -2, 2);

  auto grad_of = [&](bool twice) {
    Tensor x(base.shape(), base.data());
    x.set_requires_grad(true);
    Tape tape;
    TapeScope scope(tape);
    Tensor loss = twice ? add(sum(mul(x, x)), sum(exp(x))) : sum(mul(x, x));
    tape.backward(loss);
    return std::vector<double>(x.grad().begin(), x.grad().end());
  };
  auto grad_exp_of = [&]() {
    Tensor x(base.shape(), base.data());
    x.set_requires_grad(true);
    Tape tape;
    TapeScope scope(tape);
    tape.backward(sum(exp(x)));
    return std::vector<double>(x.grad().begin(), x.grad().end());
  };

  auto combined = grad_of(true);
  auto first = grad_of(false);
  auto second = grad_exp_of();
  for (std::size_t i = 0; i < combined.size(); ++i)
    REQUIRE(combined[i] == Catch::Approx(first[i] + second[i]).margin(1e-14));
}

TEST_CASE("layer_norm hand cases") {
  Tensor gamma({4}, {1, 1, 1, 1});
  Tensor beta({4}, {0, 0, 0, 0});
  Tensor constant({1, 4}, {5, 5, 5, 5});
  auto out = layer_norm(constant, gamma, beta, 1e-5);
  for (double v : out.data()) REQUIRE(v == Catch::Approx(0.0).margin(1e-12));

  Tensor g2({2}, {1, 1});
  Tensor b2({2}, {0, 0});
  Tensor x({1, 2}, {1, 3});
  auto o2 = layer_norm(x, g2, b2, 0.0);
  REQUIRE(o2.data()[0] == Catch::Approx(-1.0).margin(1e-12));
  REQUIRE(o2.data()[1] == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("layer_norm gradients match finite differences") {
  Rng rng(9);
  Tensor x = random_leaf({3, 5}, rng);
  Tensor gamma = random_leaf({5}, rng, 0.5, 1.5);
  Tensor beta = random_leaf({5}, rng, -0.5, 0.5);
  check_grad(
      [&]() {
        auto o = layer_norm(x, gamma, beta, 1e-5);
        return sum(mul(o, o));
      },
      {x, gamma, beta});
}

TEST_CASE("every primitive matches finite differences on random inputs") {
  Rng rng(42);
  Tensor a = random_leaf({2, 3}, rng);
  Tensor b = random_leaf({2, 3}, rng);
  Tensor pos = random_leaf({2, 3}, rng, 0.2, 2.0);
  Tensor denom = random_leaf({2, 3}, rng, 0.5, 2.0);
  Tensor bias = random_leaf({3}, rng);
  Tensor col = random_leaf({2, 1}, rng, 0.5, 2.0);

  check_grad([&]() { return sum(mul(add(a, b), add(a, b))); }, {a, b});
  check_grad([&]() { return sum(mul(sub(a, b), sub(a, b))); }, {a, b});
  check_grad([&]() { return sum(mul(mul(a, b), mul(a, b))); }, {a, b});
  check_grad([&]() { return sum(mul(divide(a, denom), divide(a, denom))); }, {a, denom});
  check_grad([&]() { return sum(mul(add(a, bias), add(a, bias))); }, {a, bias});
  check_grad([&]() { return sum(divide(a, col)); }, {a, col});
  check_grad([&]() { return sum(exp(mul_scalar(a, 0.5))); }, {a});
  check_grad([&]() { return sum(log(pos)); }, {pos});
  check_grad([&]() { return sum(sqrt(pos)); }, {pos});
  check_grad([&]() { return sum(mul(gelu(a), gelu(a))); }, {a});
  check_grad([&]() { return sum(sigmoid(a)); }, {a});
  check_grad([&]() { return sum(pow_scalar(pos, 2.5)); }, {pos});
  check_grad([&]() { return mean(mul(a, a)); }, {a});
  check_grad([&]() { return sum(mul(sum(a, 0), sum(a, 0))); }, {a});
  check_grad([&]() { return sum(mul(mean(a, 1), mean(a, 1))); }, {a});
  check_grad([&]() { return sum(mul(softmax(a, 1), b)); }, {a});
  check_grad([&]() { return sum(mul(log_softmax(a, 1), b)); }, {a});
  check_grad([&]() { return sum(mul(transpose(a, 0, 1), transpose(a, 0, 1))); }, {a});
  check_grad([&]() { return sum(mul(reshape(a, {6}), reshape(a, {6}))); }, {a});
  check_grad([&]() { return sum(mul(concat<double>({a, b}, 1), concat<double>({a, b}, 1))); },
             {a, b});
  check_grad([&]() { return sum(mul(slice(a, 1, 1, 2), slice(a, 1, 1, 2))); }, {a});
  check_grad([&]() { return sum(neg(a)); }, {a});
  check_grad([&]() { return sum(rsub_scalar(1.0, sigmoid(a))); }, {a});

  // Kinked primitives, checked away from their kinks.
  Tensor off({2, 2}, {-1.5, -0.3, 0.4, 1.2});
  off.set_requires_grad(true);
  check_grad([&]() { return sum(mul(relu(off), relu(off))); }, {off});
  check_grad([&]() { return sum(clamp(off, -1.0, 1.0)); }, {off});

  std::vector<std::size_t> perm{5, 3, 1, 0, 4, 2};
  check_grad([&]() { return sum(mul(reindex(a, perm, {6}), reindex(a, perm, {6}))); }, {a});

  Tensor table = random_leaf({2, 4}, rng);
  std::vector<std::size_t> gidx{3, 0, 0, 2};
  check_grad([&]() { return sum(mul(gather_last(table, gidx, 4), gather_last(table, gidx, 4))); },
             {table});

  std::vector<std::size_t> rows{2, 0};
  check_grad([&]() { return sum(mul(pick(a, rows), pick(a, rows))); }, {a});

  Tensor small = random_leaf({3}, rng);
  check_grad([&]() { return sum(mul(expand_lead(small, 4), expand_lead(small, 4))); }, {small});
}

TEST_CASE("reshape and transpose roundtrips are bit-exact") {
  Rng rng(13);
  Tensor x = rand_uniform<double>({3, 4, 5}, rng, -10, 10);
  auto rt = reshape(reshape(x, {60}), {3, 4, 5});
  REQUIRE(rt.data() == x.data());
  auto tt = transpose(transpose(x, 0, 2), 0, 2);
  REQUIRE(tt.data() == x.data());
  auto tm = transpose(transpose(x, 1, 2), 1, 2);
  REQUIRE(tm.data() == x.data());
}

TEST_CASE("no-tape forward does not record or require grad") {
  Tensor x = leaf({2}, {1, 2});
  Tensor y = mul(x, x);  // no active tape
  REQUIRE_FALSE(y.requires_grad());
  Tape tape;
  REQUIRE(tape.size() == 0);
}

TEST_CASE("float scalar type instantiates and differentiates") {
  TensorT<float> x({2, 2}, {1.f, 2.f, 3.f, 4.f});
  x.set_requires_grad(true);
  TapeT<float> tape;
  {
    TapeScopeT<float> scope(tape);
    auto y = sum(mul(x, x));
    tape.backward(y);
  }
  REQUIRE(x.grad()[3] == Catch::Approx(8.0f));
}
