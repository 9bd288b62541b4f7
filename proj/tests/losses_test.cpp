#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "mltr/losses.hpp"
#include "oracles.hpp"

using namespace mltr;

TEST_CASE("arc sigmoid maps orthogonal features to one half exactly") {
  Tensor x({1, 2}, {1.0, 0.0});
  Tensor w({2, 1}, {0.0, 1.0});
  REQUIRE(arc_sigmoid(x, w, 8.0).item() == 0.5);
  REQUIRE(arc_sigmoid(x, w, 123.0).item() == 0.5);
}

TEST_CASE("arc sigmoid at perfect alignment") {
  Tensor x({1, 2}, {2.0, 0.0});
  Tensor w({2, 1}, {0.5, 0.0});
  REQUIRE(arc_sigmoid(x, w, 8.0).item() ==
          Catch::Approx(1.0 / (1.0 + std::exp(-8.0))).margin(1e-12));
  REQUIRE(arc_sigmoid(x, w, 8.0).item() == Catch::Approx(0.999665).margin(1e-6));
}

TEST_CASE("arc sigmoid is invariant to positive rescaling") {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = rand_uniform<double>({2, 5}, rng, -1, 1);
    Tensor w = rand_uniform<double>({5, 4}, rng, -1, 1);
    Tensor xs = mul_scalar(x, 37.5);
    Tensor w_scaled = mul_scalar(w, 0.004);
    auto p0 = arc_sigmoid(x, w, 8.0);
    auto p1 = arc_sigmoid(xs, w_scaled, 8.0);
    for (std::size_t i = 0; i < p0.size(); ++i)
      REQUIRE(p0.data()[i] == Catch::Approx(p1.data()[i]).margin(1e-12));
  }
}

TEST_CASE("arc sigmoid is strictly monotone in the cosine") {
  Tensor w({2, 1}, {1.0, 0.0});
  double prev = -1;
  for (double angle : {3.0, 2.0, 1.0, 0.5, 0.1}) {
    Tensor x({1, 2}, {std::cos(angle), std::sin(angle)});
    double p = arc_sigmoid(x, w, 8.0).item();
    REQUIRE(p > prev);
    prev = p;
  }
}

TEST_CASE("zero-norm vectors are rejected") {
  Tensor x({1, 2}, {0.0, 0.0});
  Tensor w({2, 1}, {1.0, 0.0});
  REQUIRE_THROWS_AS(arc_sigmoid(x, w, 8.0), DomainError);
  Tensor x2({1, 2}, {1.0, 0.0});
  Tensor w2({2, 1}, {0.0, 0.0});
  REQUIRE_THROWS_AS(arc_sigmoid(x2, w2, 8.0), DomainError);
}

TEST_CASE("paper sign convention flips the probability") {
  Rng rng(5);
  Tensor x = rand_uniform<double>({3, 4}, rng, -1, 1);
  Tensor w = rand_uniform<double>({4, 2}, rng, -1, 1);
  auto conv = arc_sigmoid(x, w, 8.0, false);
  auto paper = arc_sigmoid(x, w, 8.0, true);
  for (std::size_t i = 0; i < conv.size(); ++i)
    REQUIRE(conv.data()[i] + paper.data()[i] == Catch::Approx(1.0).margin(1e-14));
}

TEST_CASE("asymmetric loss scalar cases") {
  LossConfig cfg;  // s=8, m=0.05, g+=0, g-=4

  Tensor p({1}, {0.5});
  Tensor ypos({1}, {1.0});
  REQUIRE(asymmetric_loss(p, ypos, cfg).item() ==
          Catch::Approx(-std::log(0.5)).margin(1e-12));

  Tensor easy({1}, {0.05});
  Tensor yneg({1}, {0.0});
  REQUIRE(asymmetric_loss(easy, yneg, cfg).item() == 0.0);

  Tensor hard({1}, {0.5});
  double expected = std::pow(0.45, 4.0) * (-std::log(0.55));
  REQUIRE(asymmetric_loss(hard, yneg, cfg).item() ==
          Catch::Approx(expected).margin(1e-12));
  REQUIRE(asymmetric_loss(hard, yneg, cfg).item() == Catch::Approx(0.02452).margin(1e-5));
}

TEST_CASE("negative term vanishes whenever p <= m") {
  LossConfig cfg;
  Tensor y({4}, {0.0, 0.0, 0.0, 0.0});
  Tensor p({4}, {0.01, 0.049, 0.05, 0.0499999});
  REQUIRE(asymmetric_loss(p, y, cfg).item() == 0.0);
}

TEST_CASE("bce hand cases and the ASL identity") {
  std::size_t n = 7;
  Tensor p({1, n}, 0.5);
  Tensor y({1, n}, 0.0);
  REQUIRE(bce_loss(p, y).item() == Catch::Approx(n * std::log(2.0)).margin(1e-12));

  // p matching y exactly at eps drives the loss to zero.
  double eps = 1e-9;
  Tensor pm({1, 2}, {1.0 - eps, eps});
  Tensor ym({1, 2}, {1.0, 0.0});
  REQUIRE(bce_loss(pm, ym).item() < 1e-8);

  LossConfig degenerate;
  degenerate.margin = 0.0;
  degenerate.gamma_pos = 0.0;
  degenerate.gamma_neg = 0.0;
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor pr = rand_uniform<double>({2, 5}, rng, 0.01, 0.99);
    Tensor yr({2, 5});
    for (auto& v : yr.data()) v = rng.uniform() < 0.5 ? 0.0 : 1.0;
    double diff = std::abs(asymmetric_loss(pr, yr, degenerate).item() -
                           bce_loss(pr, yr).item());
    REQUIRE(diff < 1e-12);
  }
}

TEST_CASE("object token loss values") {
  // Perfectly confident prediction at the true count.
  Tensor confident({1, 5}, {0.0, 50.0, 0.0, 0.0, 0.0});
  REQUIRE(object_token_loss(confident, {1}).item() < 1e-12);

  // Uniform logits over n+1 = 81 count classes.
  Tensor uniform({1, 81}, 0.0);
  REQUIRE(object_token_loss(uniform, {17}).item() ==
          Catch::Approx(std::log(81.0)).margin(1e-9));

  Tensor bad({1, 3}, 0.0);
  REQUIRE_THROWS_AS(object_token_loss(bad, {3}), ContractError);
}

TEST_CASE("object token loss gradient is softmax minus one-hot") {
  Rng rng(13);
  Tensor logits = rand_uniform<double>({1, 6}, rng, -2, 2);
  logits.set_requires_grad(true);
  std::vector<std::size_t> z{4};

  Tape tape;
  {
    TapeScope scope(tape);
    tape.backward(object_token_loss(logits, z));
  }
  Tensor sm = softmax(logits, 1);
  for (std::size_t j = 0; j < 6; ++j) {
    double expected = sm.data()[j] - (j == z[0] ? 1.0 : 0.0);
    REQUIRE(logits.grad()[j] == Catch::Approx(expected).margin(1e-12));
  }

  std::vector<double> analytic(logits.grad().begin(), logits.grad().end());
  auto fd = oracles::fd_grad([&]() { return object_token_loss(logits, z).item(); }, logits);
  REQUIRE(oracles::max_rel_err(analytic, fd) < 1e-4);
}

TEST_CASE("combined loss decomposes into ASL plus OTL") {
  Rng rng(17);
  LossConfig cfg;
  Tensor label_logits = rand_uniform<double>({2, 4}, rng, -8, 8);
  Tensor count_logits = rand_uniform<double>({2, 5}, rng, -2, 2);
  Tensor y({2, 4}, {1, 0, 0, 1, 0, 1, 0, 0});

  double combined = combined_loss(label_logits, count_logits, y, cfg).item();
  Tensor p = sigmoid(label_logits);
  double asl = asymmetric_loss(p, y, cfg).item();
  double otl = object_token_loss(count_logits, class_counts(y)).item();
  REQUIRE(combined == Catch::Approx(asl + otl).margin(1e-14));
}

TEST_CASE("combined loss approaches zero at both minima") {
  LossConfig cfg;
  Tensor y({1, 3}, {1, 1, 1});
  Tensor label_logits({1, 3}, {8, 8, 8});       // cos = 1 for every positive
  Tensor count_logits({1, 4}, {0, 0, 0, 200});  // certain of z = 3
  REQUIRE(combined_loss(label_logits, count_logits, y, cfg).item() < 0.01);
}

TEST_CASE("combined loss over a batch is the mean of per-sample losses") {
  Rng rng(19);
  LossConfig cfg;
  Tensor ll = rand_uniform<double>({2, 3}, rng, -8, 8);
  Tensor cl = rand_uniform<double>({2, 4}, rng, -1, 1);
  Tensor y({2, 3}, {1, 0, 1, 0, 0, 1});

  auto row = [&](const Tensor& t, std::size_t i, std::size_t n) {
    return Tensor({1, n}, std::vector<double>(t.data().begin() + i * n,
                                              t.data().begin() + (i + 1) * n));
  };
  double l0 = combined_loss(row(ll, 0, 3), row(cl, 0, 4), row(y, 0, 3), cfg).item();
  double l1 = combined_loss(row(ll, 1, 3), row(cl, 1, 4), row(y, 1, 3), cfg).item();
  double batch = combined_loss(ll, cl, y, cfg).item();
  REQUIRE(batch == Catch::Approx((l0 + l1) / 2.0).margin(1e-13));
}

TEST_CASE("combined loss gradients match finite differences") {
  Rng rng(23);
  LossConfig cfg;
  Tensor ll = rand_uniform<double>({2, 4}, rng, -6, 6);
  Tensor cl = rand_uniform<double>({2, 5}, rng, -2, 2);
  ll.set_requires_grad(true);
  cl.set_requires_grad(true);
  Tensor y({2, 4}, {1, 0, 0, 1, 0, 1, 1, 0});

  Tape tape;
  {
    TapeScope scope(tape);
    tape.backward(combined_loss(ll, cl, y, cfg));
  }
  for (Tensor* t : {&ll, &cl}) {
    std::vector<double> analytic(t->grad().begin(), t->grad().end());
    auto fd = oracles::fd_grad(
        [&]() { return combined_loss(ll, cl, y, cfg).item(); }, *t);
    REQUIRE(oracles::max_rel_err(analytic, fd) < 1e-4);
  }
}
