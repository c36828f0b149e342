#include <gtest/gtest.h>

#include <random>

#include "bridge/autodiff.hpp"
#include "oracles.hpp"

using namespace bridge;
namespace ad = bridge::ad;

namespace {

struct Fixture : ::testing::Test {
  std::mt19937_64 rng{11};
  Param a{"a", oracle::random_matrix(3, 4, rng)};
  Param b{"b", oracle::random_matrix(4, 2, rng)};
  Param c{"c", oracle::random_matrix(3, 4, rng)};
  Param row{"row", oracle::random_matrix(1, 4, rng)};
  // Fixed weights turn a matrix output into a scalar with non-uniform adjoints.
  Matrix weights(std::size_t r, std::size_t cols) {
    std::mt19937_64 w(r * 31 + cols);
    return oracle::random_matrix(r, cols, w);
  }
  // sum_ij w_ij x_ij, built from row_dots against a constant.
  ad::Var contract(ad::Tape& t, ad::Var x) {
    const Matrix& v = t.value(x);
    Matrix w = weights(v.rows, v.cols);
    std::vector<std::size_t> idx(v.rows);
    for (std::size_t i = 0; i < v.rows; ++i) idx[i] = i;
    return ad::sum_all(t, ad::row_dots(t, x, t.constant(std::move(w)), idx, idx));
  }
};

}  // namespace

TEST_F(Fixture, MatmulGradients) {
  EXPECT_LT(oracle::max_fd_error({&a, &b}, [&](ad::Tape& t) { return contract(t, ad::matmul(t, t.param(a), t.param(b))); }),
            1e-7);
  EXPECT_LT(oracle::max_fd_error({&a, &c}, [&](ad::Tape& t) { return contract(t, ad::matmul_nt(t, t.param(a), t.param(c))); }),
            1e-7);
}

TEST_F(Fixture, ElementwiseGradients) {
  EXPECT_LT(oracle::max_fd_error({&a, &c},
                                 [&](ad::Tape& t) {
                                   auto s = ad::sub(t, ad::add(t, t.param(a), t.param(c)), ad::scale(t, t.param(c), 3.0));
                                   return contract(t, ad::add_row(t, s, t.param(row)));
                                 }),
            1e-7);
  EXPECT_LT(oracle::max_fd_error({&a, &row}, [&](ad::Tape& t) { return contract(t, ad::relu(t, ad::add_row(t, t.param(a), t.param(row)))); }),
            1e-6);
  EXPECT_LT(oracle::max_fd_error({&a}, [&](ad::Tape& t) { return ad::mean_all(t, ad::neg_log_sigmoid(t, t.param(a))); }), 1e-7);
  EXPECT_LT(oracle::max_fd_error({&a}, [&](ad::Tape& t) { return ad::sum_squares(t, t.param(a)); }), 1e-7);
}

TEST_F(Fixture, SoftmaxAndLayerNormGradients) {
  Param sq("sq", oracle::random_matrix(4, 4, rng));
  for (bool causal : {false, true})
    EXPECT_LT(oracle::max_fd_error({&sq}, [&](ad::Tape& t) { return contract(t, ad::softmax_rows(t, t.param(sq), causal)); }),
              1e-6);
  Param gain("g", oracle::random_matrix(1, 4, rng)), bias("b", oracle::random_matrix(1, 4, rng));
  EXPECT_LT(oracle::max_fd_error({&a, &gain, &bias},
                                 [&](ad::Tape& t) { return contract(t, ad::layer_norm(t, t.param(a), t.param(gain), t.param(bias))); }),
            1e-6);
}

TEST_F(Fixture, CausalSoftmaxZeroesTheFuture) {
  ad::Tape t;
  const Matrix& p = t.value(ad::softmax_rows(t, t.constant(oracle::random_matrix(4, 4, rng)), true));
  for (std::size_t i = 0; i < 4; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 4; ++j) {
      if (j > i) {
        EXPECT_EQ(p(i, j), 0.0);
      }
      s += p(i, j);
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST_F(Fixture, IndexingGradients) {
  EXPECT_LT(oracle::max_fd_error({&a}, [&](ad::Tape& t) { return contract(t, ad::gather_rows(t, t.param(a), {2, 0, 2, 1})); }),
            1e-7);
  EXPECT_LT(oracle::max_fd_error({&a, &c},
                                 [&](ad::Tape& t) {
                                   auto left = ad::slice_cols(t, t.param(a), 1, 2);
                                   auto right = ad::slice_cols(t, t.param(c), 0, 3);
                                   return contract(t, ad::concat_cols(t, {left, right}));
                                 }),
            1e-7);
}

TEST_F(Fixture, CrossEntropyGradientAndValue) {
  for (double beta : {1.0, 0.5, 3.0})
    EXPECT_LT(oracle::max_fd_error({&a}, [&](ad::Tape& t) { return ad::cross_entropy(t, t.param(a), {3, 0, 1}, beta); }), 1e-7);
  ad::Tape t;
  const double ln4 = std::log(4.0);
  EXPECT_NEAR(t.scalar(ad::cross_entropy(t, t.constant(Matrix(2, 4)), {0, 3})), ln4, 1e-15);
  EXPECT_THROW(ad::cross_entropy(t, t.constant(Matrix(2, 4)), {0}), std::invalid_argument);
}

TEST_F(Fixture, GraphOpsGradients) {
  const auto op = Csr<double>::from_triplets(3, 3, {{0, 1, 0.5}, {1, 0, 0.5}, {1, 2, 0.25}, {2, 2, 1.0}});
  EXPECT_LT(oracle::max_fd_error({&a}, [&](ad::Tape& t) { return contract(t, ad::spmm(t, op, t.param(a))); }), 1e-7);
  EXPECT_LT(oracle::max_fd_error({&a}, [&](ad::Tape& t) { return contract(t, ad::row_normalize(t, t.param(a))); }), 1e-6);
  EXPECT_LT(oracle::max_fd_error({&a, &c},
                                 [&](ad::Tape& t) {
                                   return ad::sum_all(t, ad::row_dots(t, t.param(a), t.param(c), {0, 1, 2, 2}, {1, 1, 0, 2}));
                                 }),
            1e-7);
  EXPECT_LT(oracle::max_fd_error({&a, &c},
                                 [&](ad::Tape& t) {
                                   auto cs = ad::row_cosines(t, t.param(a), t.param(c), {0, 1, 2, 0}, {1, 1, 0, 0});
                                   return ad::mean_all(t, ad::neg_log_sigmoid(t, cs));
                                 }),
            1e-6);
}

TEST_F(Fixture, ParamUsedTwiceAccumulates) {
  ad::Tape t;
  auto x = t.param(a);
  auto y = t.param(a);
  t.backward(ad::sum_all(t, ad::add(t, x, ad::scale(t, y, 2.0))));
  const Matrix g = t.param_grad(a);
  for (double v : g.data) EXPECT_DOUBLE_EQ(v, 3.0);
  a.zero_grad();
  Param* ps[] = {&a};
  t.add_grads_to(ps);
  for (double v : a.grad.data) EXPECT_DOUBLE_EQ(v, 3.0);
}

TEST_F(Fixture, BackwardRequiresRecordingTapeAndScalar) {
  ad::Tape off(false);
  auto v = ad::sum_all(off, off.param(a));
  EXPECT_THROW(off.backward(v), std::logic_error);
  ad::Tape on;
  EXPECT_THROW(on.backward(on.param(a)), std::logic_error);
}

TEST_F(Fixture, HeldObjectsOutliveTheirScope) {
  ad::Tape t;
  ad::Var out;
  {
    auto op = Csr<double>::from_triplets(3, 3, {{0, 0, 2.0}, {1, 1, 2.0}, {2, 2, 2.0}});
    const auto& kept = t.hold(std::move(op));
    out = ad::sum_all(t, ad::spmm(t, kept, t.param(a)));
  }
  t.backward(out);
  for (double v : t.param_grad(a).data) EXPECT_DOUBLE_EQ(v, 2.0);
}
