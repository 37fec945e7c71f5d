#include <gtest/gtest.h>

#include <filesystem>

#include "../support/oracles.hpp"
#include "gufu/numerics/checkpoint.hpp"
#include "gufu/numerics/matrix.hpp"
#include "gufu/numerics/params.hpp"
#include "gufu/numerics/tape.hpp"

using namespace gufu;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Matrix m(r, c);
  for (double& v : m.values()) v = rng.uniform(lo, hi);
  return m;
}

}  // namespace

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  const Matrix m = Matrix::from_rows({{1, 2, 3}, {4, 5, 6}});
  EXPECT_EQ(matmul(Matrix::identity(2), m), m);
}

TEST(Matmul, HandArithmetic) {
  const Matrix a = Matrix::from_rows({{1, 2}, {3, 4}});
  const Matrix b = Matrix::from_rows({{0}, {1}});
  EXPECT_EQ(matmul(a, b), Matrix::from_rows({{2}, {4}}));
}

TEST(Matmul, MatchesTripleLoop) {
  Rng rng(3);
  const Matrix a = random_matrix(5, 7, rng);
  const Matrix b = random_matrix(7, 3, rng);
  const Matrix c = matmul(a, b);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < 7; ++k) s += a(i, k) * b(k, j);
      EXPECT_NEAR(c(i, j), s, 1e-14);
    }
}

TEST(Matmul, ShapeMismatchThrows) {
  EXPECT_THROW(matmul(Matrix(2, 3), Matrix(2, 3)), DimensionError);
  EXPECT_THROW(Matrix(2, 2, std::vector<double>{1, 2, 3}), DimensionError);
}

TEST(Tape, IdentityLossHasZeroValueAndGradient) {
  ParamSet p;
  p.add("w", Matrix::identity(3));
  Rng rng(1);
  const Matrix x = random_matrix(4, 3, rng);
  Tape t;
  Var loss = t.frobenius_diff(t.matmul(t.constant(x), t.param(p, "w")), t.constant(x));
  t.backward(loss);
  EXPECT_EQ(t.scalar(loss), 0.0);
  for (double g : p.at("w").grad.values()) EXPECT_EQ(g, 0.0);
}

TEST(Tape, AffineGradientMatchesFiniteDifferences) {
  Rng rng(5);
  ParamSet p;
  p.add("w", random_matrix(3, 3, rng));
  p.add("b", random_matrix(1, 3, rng));
  const Matrix x = random_matrix(3, 3, rng);
  const Matrix y = random_matrix(3, 3, rng);
  auto res = oracle::grad_check(p, [&](Tape& t) {
    return t.frobenius_diff(t.affine(t.constant(x), t.param(p, "w"), t.param(p, "b")), t.constant(y));
  });
  EXPECT_EQ(res.checked, 12u);
  EXPECT_LT(res.max_rel, 1e-4);
}

TEST(Tape, EveryPrimitiveGradientMatchesFiniteDifferences) {
  Rng rng(11);
  ParamSet p;
  p.add("a", random_matrix(4, 3, rng));
  p.add("b", random_matrix(3, 3, rng, 0.2, 1.0));
  p.add("c", random_matrix(1, 3, rng));
  Rng mask_seed(99);
  auto res = oracle::grad_check(p, [&](Tape& t) {
    Rng mask = mask_seed;
    Var a = t.param(p, "a");
    Var b = t.param(p, "b");
    Var c = t.param(p, "c");
    Var h = t.relu(t.affine(a, b, c));
    Var s = t.sigmoid(t.dropout(h, 0.3, mask, true));
    Var n = t.row_normalize(t.concat_cols({s, a}));
    Var agg = t.mean_aggregate(t.gather_rows(n, {0, 1, 2, 3, 1}), {0, 0, 1, 2, 2}, 3);
    Var d = t.row_dot(t.slice_cols(agg, 0, 3), t.slice_cols(agg, 3, 6));
    Var l1 = t.sum(t.log_sigmoid(t.scale(d, 2.0)));
    Var l2 = t.sum(t.log(t.add(t.sigmoid(t.slice_rows(a, 0, 2)), t.constant(Matrix(2, 3, 0.5)))));
    Var rows = t.concat_rows({t.slice_rows(a, 1, 3), b});
    Var l3 = t.frobenius(t.sub(rows, t.constant(Matrix(5, 3, 0.1))));
    return t.add(t.add(l1, l2), l3);
  });
  EXPECT_LT(res.max_rel, 1e-4);
}

TEST(Tape, EvalModeDropoutIsIdentity) {
  Rng rng(2);
  const Matrix x = random_matrix(3, 4, rng);
  Tape t;
  Var v = t.constant(x);
  EXPECT_EQ(t.value(t.dropout(v, 0.5, rng, false)), x);
}

TEST(Tape, NonFiniteLossNamesTerm) {
  Tape t;
  Var bad = t.log(t.constant(Matrix(1, 1, -1.0)));
  try {
    t.require_finite(bad, "my_term");
    FAIL();
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("my_term"), std::string::npos);
  }
}

TEST(Tape, RowNormalizeGivesUnitRowsAndZeroRowsStayZero) {
  Rng rng(4);
  Matrix x = random_matrix(6, 5, rng, -10, 10);
  for (double& v : x.row(2)) v = 0.0;
  Tape t;
  const Matrix y = t.value(t.row_normalize(t.constant(x)));
  for (std::size_t i = 0; i < y.rows(); ++i) {
    double s = 0.0;
    for (double v : y.row(i)) s += v * v;
    if (i == 2) {
      EXPECT_EQ(s, 0.0);
    } else {
      EXPECT_NEAR(std::sqrt(s), 1.0, 1e-12);
    }
  }
}

TEST(Optimizer, ZeroGradientLeavesParamsUnchanged) {
  Rng rng(1);
  ParamSet p;
  p.add("w", random_matrix(2, 2, rng));
  const Matrix before = p.value("w");
  optimizer_step(p, 0.01);
  EXPECT_EQ(p.value("w"), before);
  Optimizer adam;
  adam.step(p);
  EXPECT_EQ(p.value("w"), before);
}

TEST(Optimizer, SgdStepIsLrTimesGradient) {
  ParamSet p;
  p.add("w", Matrix(1, 1, 1.0));
  p.at("w").grad(0, 0) = 2.0;
  optimizer_step(p, 0.01, OptimizerKind::sgd);
  EXPECT_NEAR(p.value("w")(0, 0), 1.0 - 0.02, 1e-15);
  EXPECT_EQ(p.at("w").grad(0, 0), 0.0);
}

TEST(Optimizer, ConvexQuadraticDecreasesMonotonically) {
  ParamSet p;
  p.add("w", Matrix::from_rows({{3.0, -2.0, 1.5}}));
  const Matrix target = Matrix::from_rows({{0.5, 0.5, 0.5}});
  for (OptimizerKind kind : {OptimizerKind::sgd, OptimizerKind::adam}) {
    p.set("w", Matrix::from_rows({{3.0, -2.0, 1.5}}));
    Optimizer opt({.kind = kind, .lr = 0.05});
    double prev = std::numeric_limits<double>::infinity();
    for (int k = 0; k < 20; ++k) {
      Tape t;
      Var d = t.sub(t.param(p, "w"), t.constant(target));
      Var loss = t.sum(t.row_dot(d, d));
      const double v = t.scalar(loss);
      EXPECT_LT(v, prev);
      prev = v;
      t.backward(loss);
      opt.step(p);
    }
  }
}

TEST(ParamSet, DuplicateNameRejected) {
  ParamSet p;
  p.add("w", Matrix(1, 1));
  EXPECT_THROW(p.add("w", Matrix(1, 1)), ContractError);
  EXPECT_THROW(p.at("missing"), ContractError);
}

TEST(Rng, SerializeRoundTripContinuesStream) {
  Rng a(42);
  a.normal();  // leaves a spare
  Rng b = Rng::deserialize(a.serialize());
  for (int i = 0; i < 10; ++i) EXPECT_EQ(a.normal(), b.normal());
  EXPECT_EQ(a.next_u64(), b.next_u64());
}

TEST(Rng, SameSeedSameStream) {
  Rng a(7), b(7);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.uniform(), b.uniform());
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const auto dir = std::filesystem::temp_directory_path() / "gufu_test_ckpt";
  std::filesystem::create_directories(dir);
  Rng rng(8);
  NamedMatrices in{{"a", random_matrix(3, 4, rng, -1e3, 1e3)}, {"b", Matrix(1, 1, -0.0)},
                   {"c", Matrix(0, 5)}};
  save_checkpoint(dir / "m", in);
  const NamedMatrices out = load_checkpoint(dir / "m");
  ASSERT_EQ(out.size(), in.size());
  for (std::size_t k = 0; k < in.size(); ++k) {
    EXPECT_EQ(out[k].first, in[k].first);
    EXPECT_EQ(out[k].second, in[k].second);
  }
  ParamSet p;
  p.add("b", Matrix(1, 1, 5.0));
  restore_params(p, out);
  EXPECT_EQ(p.value("b")(0, 0), 0.0);
  ParamSet q;
  q.add("zzz", Matrix(1, 1));
  EXPECT_THROW(restore_params(q, out), ValidationError);
  std::filesystem::remove_all(dir);
}
