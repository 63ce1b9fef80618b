#include <catch2/catch_amalgamated.hpp>

#include "test_util.hpp"
#include "uniperc/core/autodiff.hpp"
#include "uniperc/core/rng.hpp"
#include "uniperc/core/tensor.hpp"

using namespace uniperc;
using ad::Var;
using testutil::numeric_grad;
using testutil::random_tensor;
using testutil::rel_err;

TEST_CASE("tensor basics") {
  Tensor t({2, 3});
  REQUIRE(t.numel() == 6);
  t.at(1, 2) = 5.0;
  REQUIRE(t.reshaped({3, 2}).at(2, 1) == 5.0);
  REQUIRE_THROWS(t.reshaped({4, 2}));
  REQUIRE(Tensor::full({2}, 3.0)[1] == 3.0);
}

TEST_CASE("rng streams are independent and deterministic") {
  RngStream a(42, "data"), b(42, "data"), c(42, "scheduler");
  for (int i = 0; i < 100; ++i) REQUIRE(a.next_u64() == b.next_u64());
  bool any_diff = false;
  RngStream a2(42, "data");
  for (int i = 0; i < 100; ++i) any_diff |= (a2.next_u64() != c.next_u64());
  REQUIRE(any_diff);

  RngStream s(7, "x");
  auto state = s.save_state();
  std::vector<std::uint64_t> seq;
  for (int i = 0; i < 10; ++i) seq.push_back(s.next_u64());
  s.load_state(state);
  for (int i = 0; i < 10; ++i) REQUIRE(s.next_u64() == seq[static_cast<std::size_t>(i)]);
}

namespace {

// Gradient check harness: builds scalar = sum(weights * op(x)) and compares
// the analytic input gradient against central differences.
void check_unary(const std::function<Var(const Var&)>& op, const Tensor& x0,
                 double tol = 1e-6) {
  RngStream rng(99, "weights");
  Tensor w = random_tensor({1}, rng);
  auto eval = [&](const Tensor& x) {
    Var in = Var::leaf(x, true);
    Var out = op(in);
    Var loss = ad::sum_all(ad::mul(out, Var::constant(random_tensor(out.shape(), rng))));
    return loss;
  };
  // fixed random weighting: rebuild with same stream each call
  auto run = [&](const Tensor& x) {
    RngStream local(123, "w2");
    Var in = Var::leaf(x, true);
    Var out = op(in);
    Tensor w2 = random_tensor(out.val().shape(), local);
    Var loss = ad::sum_all(ad::mul(out, Var::constant(w2)));
    return loss;
  };
  (void)eval;
  Var loss = run(x0);
  ad::backward(loss);
  Var in_probe = Var::leaf(x0, true);
  // recompute with the graph we can reach: rebuild and keep handle
  RngStream local(123, "w2");
  Var out = op(in_probe);
  Tensor w2 = random_tensor(out.val().shape(), local);
  Var l2 = ad::sum_all(ad::mul(out, Var::constant(w2)));
  ad::backward(l2);
  Tensor g = in_probe.grad();
  for (std::int64_t i = 0; i < x0.numel(); ++i) {
    double num = numeric_grad([&](const Tensor& x) { return run(x).val()[0]; }, x0,
                              static_cast<std::size_t>(i));
    REQUIRE(rel_err(g[i], num, 1e-6) < tol);
  }
}

}  // namespace

TEST_CASE("elementwise op gradients match finite differences") {
  RngStream rng(5, "init");
  Tensor x = random_tensor({3, 4}, rng);
  check_unary([](const Var& v) { return ad::relu(ad::add_const(v, 0.3)); }, x);
  check_unary([](const Var& v) { return ad::sigmoid(v); }, x);
  check_unary([](const Var& v) { return ad::exp_op(ad::scale(v, 0.5)); }, x);
  check_unary([](const Var& v) { return ad::softmax_rows(v); }, x);
  check_unary([](const Var& v) { return ad::log_softmax_rows(v); }, x);
  Tensor xp = random_tensor({3, 4}, rng);
  for (std::int64_t i = 0; i < xp.numel(); ++i) xp[i] = std::abs(xp[i]) + 0.5;
  check_unary([](const Var& v) { return ad::log_op(v); }, xp);
  check_unary([](const Var& v) { return ad::abs_op(v); }, x);
}

TEST_CASE("binary op gradients match finite differences") {
  RngStream rng(6, "init");
  Tensor a0 = random_tensor({2, 3}, rng);
  Tensor b0 = random_tensor({2, 3}, rng);
  for (std::int64_t i = 0; i < b0.numel(); ++i) b0[i] += (b0[i] >= 0 ? 1.0 : -1.0);  // keep away from 0

  auto run = [&](const Tensor& a, const Tensor& b, int which) {
    Var va = Var::leaf(a, true), vb = Var::leaf(b, true);
    Var out;
    switch (which) {
      case 0: out = ad::mul(va, vb); break;
      case 1: out = ad::div(va, vb); break;
      case 2: out = ad::minimum(va, vb); break;
      default: out = ad::maximum(va, vb); break;
    }
    return std::tuple<Var, Var, Var>(ad::sum_all(out), va, vb);
  };
  for (int which = 0; which < 4; ++which) {
    auto [loss, va, vb] = run(a0, b0, which);
    ad::backward(loss);
    Tensor ga = va.grad(), gb = vb.grad();
    for (std::int64_t i = 0; i < a0.numel(); ++i) {
      double na = numeric_grad(
          [&](const Tensor& t) { return std::get<0>(run(t, b0, which)).val()[0]; }, a0,
          static_cast<std::size_t>(i));
      double nb = numeric_grad(
          [&](const Tensor& t) { return std::get<0>(run(a0, t, which)).val()[0]; }, b0,
          static_cast<std::size_t>(i));
      REQUIRE(rel_err(ga[i], na) < 1e-6);
      REQUIRE(rel_err(gb[i], nb) < 1e-6);
    }
  }
}

TEST_CASE("matmul gradients (all transpose combinations)") {
  RngStream rng(7, "init");
  for (int ta = 0; ta < 2; ++ta)
    for (int tb = 0; tb < 2; ++tb) {
      Tensor a0 = random_tensor(ta ? std::vector<int>{4, 3} : std::vector<int>{3, 4}, rng);
      Tensor b0 = random_tensor(tb ? std::vector<int>{2, 4} : std::vector<int>{4, 2}, rng);
      auto run = [&](const Tensor& a, const Tensor& b) {
        Var va = Var::leaf(a, true), vb = Var::leaf(b, true);
        Var out = ad::matmul(va, vb, ta != 0, tb != 0);
        return std::tuple<Var, Var, Var>(ad::sum_all(out), va, vb);
      };
      auto [loss, va, vb] = run(a0, b0);
      ad::backward(loss);
      for (std::int64_t i = 0; i < a0.numel(); ++i) {
        double n = numeric_grad([&](const Tensor& t) { return std::get<0>(run(t, b0)).val()[0]; },
                                a0, static_cast<std::size_t>(i));
        REQUIRE(rel_err(va.grad()[i], n) < 1e-6);
      }
      for (std::int64_t i = 0; i < b0.numel(); ++i) {
        double n = numeric_grad([&](const Tensor& t) { return std::get<0>(run(a0, t)).val()[0]; },
                                b0, static_cast<std::size_t>(i));
        REQUIRE(rel_err(vb.grad()[i], n) < 1e-6);
      }
    }
}

TEST_CASE("shape op gradients and exact round trips") {
  RngStream rng(8, "init");
  Tensor x0 = random_tensor({4, 3}, rng);

  SECTION("reshape round trip is exact") {
    Var v = Var::leaf(x0, true);
    Var r = ad::reshape(ad::reshape(v, {2, 6}), {4, 3});
    REQUIRE(r.val() == x0);
    ad::backward(ad::sum_all(r));
    for (std::int64_t i = 0; i < x0.numel(); ++i) REQUIRE(v.grad()[i] == 1.0);
  }

  SECTION("concat/slice/gather/cols") {
    auto run = [&](const Tensor& x) {
      Var v = Var::leaf(x, true);
      Var top = ad::slice_rows(v, 0, 2);
      Var bot = ad::slice_rows(v, 2, 4);
      Var cat = ad::concat_rows({bot, top});
      Var g = ad::gather_rows(cat, {0, 0, 3});
      Var c = ad::cols(g, 1, 3);
      Var t = ad::transpose(c);
      Var p = ad::pick_cols(t, {0, 2});
      return std::tuple<Var, Var>(ad::sum_all(ad::mul(p, p)), v);
    };
    auto [loss, v] = run(x0);
    ad::backward(loss);
    for (std::int64_t i = 0; i < x0.numel(); ++i) {
      double n = numeric_grad([&](const Tensor& t) { return std::get<0>(run(t)).val()[0]; }, x0,
                              static_cast<std::size_t>(i));
      REQUIRE(rel_err(v.grad()[i], n) < 1e-6);
    }
  }

  SECTION("add_rowvec broadcast gradient") {
    Tensor b0 = random_tensor({3}, rng);
    auto run = [&](const Tensor& a, const Tensor& b) {
      Var va = Var::leaf(a, true), vb = Var::leaf(b, true);
      return std::tuple<Var, Var, Var>(ad::sum_all(ad::mul(ad::add_rowvec(va, vb),
                                                           ad::add_rowvec(va, vb))),
                                       va, vb);
    };
    auto [loss, va, vb] = run(x0, b0);
    ad::backward(loss);
    for (std::int64_t i = 0; i < b0.numel(); ++i) {
      double n = numeric_grad([&](const Tensor& t) { return std::get<0>(run(x0, t)).val()[0]; },
                              b0, static_cast<std::size_t>(i));
      REQUIRE(rel_err(vb.grad()[i], n) < 1e-6);
    }
  }
}

TEST_CASE("layer norm gradient") {
  RngStream rng(9, "init");
  Tensor x0 = random_tensor({3, 5}, rng);
  Tensor g0 = random_tensor({5}, rng);
  Tensor b0 = random_tensor({5}, rng);
  auto run = [&](const Tensor& x, const Tensor& g, const Tensor& b) {
    Var vx = Var::leaf(x, true), vg = Var::leaf(g, true), vb = Var::leaf(b, true);
    Var out = ad::layer_norm_rows(vx, vg, vb);
    RngStream local(55, "w");
    Var loss = ad::sum_all(ad::mul(out, Var::constant(random_tensor(out.val().shape(), local))));
    return std::tuple<Var, Var, Var, Var>(loss, vx, vg, vb);
  };
  auto [loss, vx, vg, vb] = run(x0, g0, b0);
  ad::backward(loss);
  for (std::int64_t i = 0; i < x0.numel(); ++i) {
    double n = numeric_grad(
        [&](const Tensor& t) { return std::get<0>(run(t, g0, b0)).val()[0]; }, x0,
        static_cast<std::size_t>(i));
    REQUIRE(rel_err(vx.grad()[i], n) < 1e-5);
  }
  for (std::int64_t i = 0; i < g0.numel(); ++i) {
    double n = numeric_grad(
        [&](const Tensor& t) { return std::get<0>(run(x0, t, b0)).val()[0]; }, g0,
        static_cast<std::size_t>(i));
    REQUIRE(rel_err(vg.grad()[i], n) < 1e-5);
  }
}

TEST_CASE("conv2d forward and gradient") {
  RngStream rng(10, "init");
  Tensor x0 = random_tensor({2, 6, 6}, rng);
  Tensor w0 = random_tensor({3, 2, 3, 3}, rng, 0.5);
  Tensor b0 = random_tensor({3}, rng, 0.1);

  SECTION("stride-2 output shape") {
    Var out = ad::conv2d(Var::constant(x0), Var::constant(w0), Var::constant(b0), 2, 1);
    REQUIRE(out.shape() == std::vector<int>{3, 3, 3});
  }

  SECTION("gradients") {
    auto run = [&](const Tensor& x, const Tensor& w, const Tensor& b) {
      Var vx = Var::leaf(x, true), vw = Var::leaf(w, true), vb = Var::leaf(b, true);
      Var out = ad::conv2d(vx, vw, vb, 2, 1);
      RngStream local(77, "w");
      Var loss = ad::sum_all(ad::mul(out, Var::constant(random_tensor(out.val().shape(), local))));
      return std::tuple<Var, Var, Var, Var>(loss, vx, vw, vb);
    };
    auto [loss, vx, vw, vb] = run(x0, w0, b0);
    ad::backward(loss);
    RngStream pick(3, "probe");
    for (int probe = 0; probe < 20; ++probe) {
      std::size_t i = static_cast<std::size_t>(pick.next_below(static_cast<std::uint64_t>(x0.numel())));
      double n = numeric_grad(
          [&](const Tensor& t) { return std::get<0>(run(t, w0, b0)).val()[0]; }, x0, i);
      REQUIRE(rel_err(vx.grad()[i], n) < 1e-5);
      std::size_t j = static_cast<std::size_t>(pick.next_below(static_cast<std::uint64_t>(w0.numel())));
      double nw = numeric_grad(
          [&](const Tensor& t) { return std::get<0>(run(x0, t, b0)).val()[0]; }, w0, j);
      REQUIRE(rel_err(vw.grad()[j], nw) < 1e-5);
    }
    double nb = numeric_grad(
        [&](const Tensor& t) { return std::get<0>(run(x0, w0, t)).val()[0]; }, b0, 1);
    REQUIRE(rel_err(vb.grad()[1], nb) < 1e-5);
  }
}

TEST_CASE("resize op gradients") {
  RngStream rng(11, "init");
  Tensor x0 = random_tensor({2, 4, 4}, rng);
  auto run = [&](const Tensor& x, int mode) {
    Var vx = Var::leaf(x, true);
    Var out;
    if (mode == 0) out = ad::upsample_bilinear(vx, 7, 5);
    else if (mode == 1) out = ad::upsample_nearest2(vx);
    else out = ad::avg_pool2(vx);
    RngStream local(88, "w");
    Var loss = ad::sum_all(ad::mul(out, Var::constant(random_tensor(out.val().shape(), local))));
    return std::tuple<Var, Var>(loss, vx);
  };
  for (int mode = 0; mode < 3; ++mode) {
    auto [loss, vx] = run(x0, mode);
    ad::backward(loss);
    for (std::int64_t i = 0; i < x0.numel(); ++i) {
      double n = numeric_grad([&](const Tensor& t) { return std::get<0>(run(t, mode)).val()[0]; },
                              x0, static_cast<std::size_t>(i));
      REQUIRE(rel_err(vx.grad()[i], n) < 1e-5);
    }
  }
}

TEST_CASE("unreached leaves report exactly zero gradient") {
  Tensor a = Tensor::full({2, 2}, 1.0);
  Var used = Var::leaf(a, true);
  Var unused = Var::leaf(a, true);
  ad::backward(ad::sum_all(used));
  REQUIRE(unused.grad() == Tensor::zeros({2, 2}));
  REQUIRE(used.grad() == Tensor::full({2, 2}, 1.0));
}

TEST_CASE("shared subexpression accumulates gradient once per path") {
  Tensor a0 = Tensor::full({1}, 3.0);
  Var a = Var::leaf(a0, true);
  Var y = ad::add(ad::mul(a, a), a);  // y = a^2 + a, dy/da = 2a + 1 = 7
  ad::backward(ad::sum_all(y));
  REQUIRE(a.grad()[0] == Catch::Approx(7.0).epsilon(1e-12));
}
