#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>

#include "support.hpp"

using namespace mloss;
using testing_support::arch_of;
using testing_support::brute_force_ties;
using testing_support::perturb;
using testing_support::random_batch;
using testing_support::random_model;

namespace {

MergeConfig config(MergeMethod method, double keep = 0.2, double evar = 0.1) {
  MergeConfig c;
  c.method = method;
  c.keep = keep;
  c.evar = evar;
  return c;
}

void expect_models_near(const ModelParams& a, const ModelParams& b, double tol) {
  ASSERT_EQ(a.arch, b.arch);
  for (std::size_t l = 0; l < a.num_layers(); ++l) {
    for (std::size_t c = 0; c < a.weights[l].size(); ++c) {
      EXPECT_NEAR(a.weights[l].flat()[c], b.weights[l].flat()[c], tol) << "layer " << l << " w" << c;
    }
    for (std::size_t c = 0; c < a.biases[l].size(); ++c) {
      EXPECT_NEAR(a.biases[l][c], b.biases[l][c], tol) << "layer " << l << " b" << c;
    }
  }
}

/// 2-2-1 net whose first layer holds `w` (row-major) and whose other parameters are zero.
ModelParams two_by_two(std::initializer_list<double> w) {
  ModelParams m = ModelParams::zeros(arch_of(2, {2}, 1));
  m.weights[0] = Matrix(2, 2, Vector(w));
  return m;
}

/// Permutes the units of hidden layer `l` (rows of W_l, b_l and columns of W_{l+1}).
ModelParams permute_hidden(const ModelParams& m, std::size_t l, const std::vector<std::size_t>& perm) {
  ModelParams out = m;
  for (std::size_t i = 0; i < perm.size(); ++i) {
    std::copy(m.weights[l].row(perm[i]).begin(), m.weights[l].row(perm[i]).end(), out.weights[l].row(i).begin());
    out.biases[l][i] = m.biases[l][perm[i]];
    for (std::size_t r = 0; r < m.weights[l + 1].rows(); ++r) out.weights[l + 1](r, i) = m.weights[l + 1](r, perm[i]);
  }
  return out;
}

}  // namespace

// --- primitives -------------------------------------------------------------

TEST(SimpleAverage, Examples) {
  const Architecture arch = arch_of(1, {1}, 1);
  ModelParams a = ModelParams::zeros(arch), b = ModelParams::zeros(arch);
  a.weights[0](0, 0) = 1.0;
  b.weights[0](0, 0) = 3.0;
  const std::vector<ModelParams> ab{a, b};
  const Vector half{0.5, 0.5};
  const Vector first{1.0, 0.0};
  EXPECT_EQ(simple_average(ab, half).weights[0](0, 0), 2.0);
  EXPECT_EQ(simple_average(ab, first), a);
  const std::vector<ModelParams> same{a, a};
  expect_models_near(simple_average(same, half), a, 1e-12);
}

TEST(SimpleAverage, IncompatibleShapes) {
  const std::vector<ModelParams> models{ModelParams::zeros(arch_of(1, {2}, 1)), ModelParams::zeros(arch_of(1, {3}, 1))};
  const Vector half{0.5, 0.5};
  EXPECT_THROW(simple_average(models, half), ShapeError);
}

TEST(TaskArithmetic, Examples) {
  const Architecture arch = arch_of(1, {1}, 1);
  ModelParams base = ModelParams::zeros(arch);
  base.weights[0](0, 0) = 1.0;
  ModelParams a = base, b = base;
  a.weights[0](0, 0) = 1.2;
  b.weights[0](0, 0) = 0.9;
  const std::vector<ModelParams> ab{a, b};
  EXPECT_NEAR(task_arithmetic(base, ab, 1.5).weights[0](0, 0), 1.075, 1e-15);
  EXPECT_EQ(task_arithmetic(base, ab, 0.0), base);
  const std::vector<ModelParams> same{base, base};
  EXPECT_EQ(task_arithmetic(base, same, 1.3), base);
}

TEST(TrimTopk, Examples) {
  EXPECT_EQ(trim_topk(Vector{0.5, -0.1, 0.2, -0.7}, 0.5), (Vector{0.5, 0, 0, -0.7}));
  EXPECT_EQ(trim_topk(Vector{0.5, -0.1, 0.2, -0.7}, 1.0), (Vector{0.5, -0.1, 0.2, -0.7}));
  EXPECT_EQ(trim_topk(Vector{0.3, -0.3}, 0.5), (Vector{0.3, 0}));
  EXPECT_EQ(trim_topk(Vector{0.1, 0.2, 0.3}, 0.01), (Vector{0, 0, 0.3}));
  EXPECT_THROW(trim_topk(Vector{1.0}, 0.0), ParameterError);
}

TEST(TrimTopk, KeepCount) {
  EXPECT_EQ(keep_count(10, 0.3), 3u);
  EXPECT_EQ(keep_count(10, 0.7), 7u);
  EXPECT_EQ(keep_count(10, 0.25), 3u);
  EXPECT_EQ(keep_count(5, 0.01), 1u);
  EXPECT_EQ(keep_count(0, 0.5), 0u);
}

TEST(ElectAndMerge, Examples) {
  const Vector half{0.5, 0.5};
  EXPECT_EQ(elect_and_merge(Vector{0.5, -0.2}, half), 0.5);
  EXPECT_DOUBLE_EQ(elect_and_merge(Vector{0.4, 0.2}, half), 0.3);
  EXPECT_EQ(elect_and_merge(Vector{0.3, -0.3}, half), 0.0);
  EXPECT_EQ(elect_and_merge(Vector{0.0, 0.0}, half), 0.0);
  EXPECT_DOUBLE_EQ(elect_and_merge(Vector{0.4, 0.2}, half, ElectMerge::kWeightedSum), 0.3);
  EXPECT_DOUBLE_EQ(elect_and_merge(Vector{0.5, -0.2}, half, ElectMerge::kWeightedSum), 0.25);
}

TEST(Dare, Examples) {
  Rng rng(1);
  // With keep 0.5 every entry is either dropped or doubled.
  const Vector v(64, 0.4);
  for (double x : dare_prune(v, 0.5, rng)) EXPECT_TRUE(x == 0.0 || x == 0.8);
  const Vector w{0.1, -0.2, 0.3};
  EXPECT_EQ(dare_prune(w, 1.0, rng), w);
}

TEST(Dare, KeptFractionIsBinomial) {
  Rng rng(2);
  const std::size_t n = 1'000'000;
  Vector v(n);
  for (double& x : v) x = rng.normal();
  for (double keep : {0.3, 0.8}) {
    const Vector out = dare_prune(v, keep, rng);
    std::size_t kept = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (out[i] != 0.0) {
        ++kept;
        ASSERT_EQ(out[i], v[i] * (1.0 / keep));
      }
    }
    const double sd = std::sqrt(keep * (1 - keep) / static_cast<double>(n));
    EXPECT_NEAR(static_cast<double>(kept) / static_cast<double>(n), keep, 3 * sd);
  }
}

TEST(RankNorm, Examples) {
  const Vector r = rank_norm(Vector{0.5, 0.1, 0.3}, 0.2, 0.1);
  EXPECT_DOUBLE_EQ(r[0], 0.1);
  EXPECT_DOUBLE_EQ(r[1], 0.2);
  EXPECT_DOUBLE_EQ(r[2], 0.15);
  EXPECT_EQ(rank_norm(Vector{0.5, 0.1, 0.3}, 0.2, 0.0), Vector(3, 0.2));
  EXPECT_EQ(rank_norm(Vector{7.0}, 0.4, 0.1), Vector{0.4});
  const Vector ties = rank_norm(Vector{1.0, 1.0, 1.0}, 0.5, 0.2);
  EXPECT_DOUBLE_EQ(ties[0], 0.5);
  EXPECT_DOUBLE_EQ(ties[2], 0.3);
  EXPECT_THROW(rank_norm(Vector{1.0}, 0.2, 0.2), ParameterError);
}

TEST(PruneLcpRow, Examples) {
  const Matrix w(1, 4, Vector{0.5, -0.1, 0.2, -0.7});
  const Vector b{0.0};
  auto [row, bias] = prune_lcp_row(w, b, 0, 0.4);
  EXPECT_EQ(row, (Vector{0.5, 0, 0, -0.7}));
  EXPECT_EQ(bias, 0.0);
  auto [full, fb] = prune_lcp_row(w, Vector{0.3}, 0, 1.0);
  EXPECT_EQ(full, (Vector{0.5, -0.1, 0.2, -0.7}));
  EXPECT_EQ(fb, 0.3);
  auto [zero, zb] = prune_lcp_row(Matrix(1, 3), Vector{0.0}, 0, 0.5);
  EXPECT_EQ(zero, Vector(3, 0.0));
  EXPECT_EQ(zb, 0.0);
  EXPECT_THROW(prune_lcp_row(w, b, 1, 0.5), DomainError);
}

// --- TIES -------------------------------------------------------------------

TEST(Ties, ZeroTaskVectorsGiveBase) {
  Rng rng(3);
  const ModelParams base = random_model(arch_of(3, {4}, 2), rng);
  const std::vector<ModelParams> same{base, base, base};
  EXPECT_EQ(ties_merge(base, same, config(MergeMethod::kTies)), base);
}

TEST(Ties, SingleSourceFullKeepIsThatSource) {
  Rng rng(4);
  const ModelParams base = random_model(arch_of(3, {4}, 2), rng);
  const ModelParams src = perturb(base, 0.1, rng);
  const std::vector<ModelParams> one{src};
  MergeConfig c = config(MergeMethod::kTies, 1.0, 0.0);
  // base + (src - base) is src up to rounding of the subtraction.
  expect_models_near(ties_merge(base, one, c), src, 1e-15);
}

TEST(Ties, HandTwoByTwoAgainstBruteForce) {
  const ModelParams base = two_by_two({0, 0, 0, 0});
  const std::vector<ModelParams> models{two_by_two({0.5, -0.1, 0.2, -0.7}), two_by_two({0.4, 0.3, -0.2, -0.5})};
  MergeConfig c = config(MergeMethod::kTies, 0.5, 0.0);
  const ModelParams merged = ties_merge(base, models, c);
  const ModelParams oracle = brute_force_ties(base, models, 0.5, {0.5, 0.5});
  EXPECT_EQ(merged, oracle);
  // Layer 1 holds 6 entries (4 weights + 2 zero biases); top 3 of each survive:
  // T1 keeps 0.5, 0.2, -0.7 and T2 keeps 0.4, 0.3, -0.5.
  EXPECT_DOUBLE_EQ(merged.weights[0](0, 0), 0.45);
  EXPECT_DOUBLE_EQ(merged.weights[0](0, 1), 0.3);
  EXPECT_DOUBLE_EQ(merged.weights[0](1, 0), 0.2);
  EXPECT_DOUBLE_EQ(merged.weights[0](1, 1), -0.6);
}

TEST(Ties, RandomInstancesAgainstBruteForce) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const Architecture arch = arch_of(1 + rng.below(4), {1 + rng.below(5)}, 1 + rng.below(3));
    const ModelParams base = random_model(arch, rng);
    std::vector<ModelParams> models;
    const std::size_t q = 2 + rng.below(3);
    for (std::size_t i = 0; i < q; ++i) models.push_back(perturb(base, 0.2, rng));
    for (double keep : {0.2, 0.5, 1.0}) {
      const ModelParams merged = ties_merge(base, models, config(MergeMethod::kTies, keep, 0.0));
      expect_models_near(merged, brute_force_ties(base, models, keep, Vector(q, 1.0 / static_cast<double>(q))), 1e-15);
    }
  }
}

// --- M-TIES -----------------------------------------------------------------

TEST(MTies, ZeroVariationReducesToTiesBitwise) {
  Rng rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    const Architecture arch = arch_of(1 + rng.below(8), {1 + rng.below(8), 1 + rng.below(8)}, 1 + rng.below(8));
    const ModelParams base = random_model(arch, rng);
    const std::size_t q = 2 + rng.below(2);
    std::vector<ModelParams> models;
    for (std::size_t i = 0; i < q; ++i) models.push_back(perturb(base, 0.3, rng));
    const Matrix batch = random_batch(16, arch.input_dim, rng);
    for (double keep : {0.2, 0.5, 1.0}) {
      EXPECT_EQ(mties_merge(base, models, config(MergeMethod::kMTies, keep, 0.0), batch),
                ties_merge(base, models, config(MergeMethod::kTies, keep, 0.0)));
    }
  }
}

TEST(MTies, FixedPointAndSingleSource) {
  Rng rng(7);
  const Architecture arch = arch_of(4, {5, 3}, 2);
  const ModelParams base = random_model(arch, rng);
  const Matrix batch = random_batch(8, 4, rng);
  const std::vector<ModelParams> same{base, base};
  expect_models_near(mties_merge(base, same, config(MergeMethod::kMTies), batch), base, 1e-12);

  const ModelParams src = perturb(base, 0.2, rng);
  const std::vector<ModelParams> one{src};
  expect_models_near(mties_merge(base, one, config(MergeMethod::kMTies, 1.0, 0.0), batch), src, 1e-15);
}

TEST(MTies, KeepRatiosWithinBounds) {
  Rng rng(8);
  const Architecture arch = arch_of(6, {7, 5}, 3, Activation::gelu());
  const ModelParams base = random_model(arch, rng);
  const std::vector<ModelParams> models{perturb(base, 0.3, rng), perturb(base, 0.3, rng), perturb(base, 0.3, rng)};
  const Matrix batch = random_batch(16, 6, rng);
  const MergeConfig c = config(MergeMethod::kMTies, 0.4, 0.2);
  MergeTrace trace;
  mties_merge(base, models, c, batch, &trace);
  ASSERT_EQ(trace.keep_ratios.size(), 3u);
  EXPECT_TRUE(trace.keep_ratios[2].empty());  // output layer trimmed flat
  for (std::size_t l = 0; l < 2; ++l) {
    ASSERT_EQ(trace.keep_ratios[l].size(), arch.hidden_dims[l]);
    ASSERT_EQ(trace.node_scores[l].size(), arch.hidden_dims[l]);
    for (std::size_t j = 0; j < trace.keep_ratios[l].size(); ++j) {
      EXPECT_GE(trace.keep_ratios[l][j], 0.2);
      EXPECT_LE(trace.keep_ratios[l][j], 0.4);
      for (std::size_t o = 0; o < trace.keep_ratios[l].size(); ++o) {
        if (trace.node_scores[l][o] > trace.node_scores[l][j]) {
          EXPECT_LE(trace.keep_ratios[l][o], trace.keep_ratios[l][j]);
        }
      }
    }
  }
}

TEST(MTies, LcpNonzeroFractionWithinKeepBounds) {
  Rng rng(9);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t d = 1 + rng.below(8);
    const std::size_t n = 2 + rng.below(9);  // inputs per node; LCP size n + 1
    LayerDelta delta{Matrix(d, n), Vector(d)};
    for (double& x : delta.w.flat()) x = rng.normal();
    for (double& x : delta.b) x = rng.normal();
    Vector scores(d);
    for (double& s : scores) s = rng.uniform();
    const double k = 0.2 + 0.6 * rng.uniform();
    const double e = 0.9 * k * rng.uniform() + 1e-3;
    detail::trim_layer_rows(delta, rank_norm(scores, k, e), false);
    const double len = static_cast<double>(n + 1);
    for (std::size_t j = 0; j < d; ++j) {
      std::size_t nz = delta.b[j] != 0.0;
      for (double x : delta.w.row(j)) nz += x != 0.0;
      EXPECT_GE(static_cast<double>(nz), static_cast<double>(keep_count(n + 1, k - e)));
      EXPECT_LE(static_cast<double>(nz), std::ceil(k * len));
    }
  }
}

TEST(FewLayerMTies, AllLayersMatchesMTies) {
  Rng rng(10);
  const Architecture arch = arch_of(4, {6, 5}, 3);
  const ModelParams base = random_model(arch, rng);
  const std::vector<ModelParams> models{perturb(base, 0.3, rng), perturb(base, 0.3, rng)};
  const Matrix batch = random_batch(12, 4, rng);
  MergeConfig c = config(MergeMethod::kMTiesFew, 0.3, 0.1);
  c.dynamic_layers = {0, 1, 2};
  EXPECT_EQ(few_layer_mties(base, models, c, batch), mties_merge(base, models, c, batch));
}

TEST(FewLayerMTies, EmptyDynamicSetRejected) {
  Rng rng(11);
  const ModelParams base = random_model(arch_of(2, {3}, 1), rng);
  const std::vector<ModelParams> models{base, base};
  EXPECT_THROW(few_layer_mties(base, models, config(MergeMethod::kMTiesFew), random_batch(2, 2, rng)), ParameterError);
}

TEST(FewLayerMTies, FirstLayerOnlyComposesMTiesAndTies) {
  Rng rng(12);
  const Architecture arch = arch_of(5, {6, 4}, 3);
  const ModelParams base = random_model(arch, rng);
  const std::vector<ModelParams> models{perturb(base, 0.3, rng), perturb(base, 0.3, rng), perturb(base, 0.3, rng)};
  const Matrix batch = random_batch(16, 5, rng);
  MergeConfig c = config(MergeMethod::kMTiesFew, 0.3, 0.2);
  c.dynamic_layers = {0};
  const ModelParams few = few_layer_mties(base, models, c, batch);
  const ModelParams full = mties_merge(base, models, c, batch);
  const ModelParams ties = ties_merge(base, models, c);
  EXPECT_TRUE(layer_equal(few, full, 0));
  EXPECT_FALSE(layer_equal(few, ties, 0));
  EXPECT_TRUE(layer_equal(few, ties, 1));
  EXPECT_TRUE(layer_equal(few, ties, 2));
}

TEST(MTies, NeedsBatch) {
  Rng rng(13);
  const ModelParams base = random_model(arch_of(2, {3}, 1), rng);
  const std::vector<ModelParams> models{base, base};
  EXPECT_THROW(mties_merge(base, models, config(MergeMethod::kMTies), Matrix(0, 2)), DomainError);
}

// --- ensemble and cross-method properties ----------------------------------

TEST(Ensemble, Examples) {
  const Architecture arch = arch_of(1, {1}, 1);
  ModelParams a = ModelParams::zeros(arch), b = ModelParams::zeros(arch);
  a.biases[1][0] = 0.2;
  b.biases[1][0] = 0.4;
  const std::vector<ModelParams> ab{a, b};
  const Vector x{1.7};
  EXPECT_NEAR(ensemble_predict(ab, Vector{0.5, 0.5}, x)[0], 0.3, 1e-15);

  Rng rng(14);
  const ModelParams m = random_model(arch_of(3, {4}, 2), rng);
  const Vector y{0.1, -0.4, 2.0};
  const std::vector<ModelParams> one{m};
  EXPECT_EQ(ensemble_predict(one, Vector{1.0}, y), forward(m, y));
  const std::vector<ModelParams> copies(3, m);
  const Vector f = forward(m, y);
  const Vector e = ensemble_predict(copies, Vector(3, 1.0 / 3.0), y);
  for (std::size_t i = 0; i < f.size(); ++i) EXPECT_NEAR(e[i], f[i], 1e-12);
}

TEST(AllMethods, SourcesEqualToBaseReturnBase) {
  Rng rng(15);
  const ModelParams base = random_model(arch_of(4, {5, 3}, 2), rng);
  const std::vector<ModelParams> same(3, base);
  const Matrix batch = random_batch(8, 4, rng);
  for (MergeMethod m : {MergeMethod::kAverage, MergeMethod::kTaskArithmetic, MergeMethod::kTies, MergeMethod::kDare,
                        MergeMethod::kMTies, MergeMethod::kMTiesFew}) {
    MergeConfig c = config(m, 0.3, 0.1);
    c.dynamic_layers = {0};
    expect_models_near(merge(base, same, c, batch), base, 1e-12);
  }
}

TEST(AllMethods, DeterministicGivenSeed) {
  Rng rng(16);
  const ModelParams base = random_model(arch_of(4, {5, 3}, 2), rng);
  const std::vector<ModelParams> models{perturb(base, 0.2, rng), perturb(base, 0.2, rng)};
  const Matrix batch = random_batch(8, 4, rng);
  for (MergeMethod m : {MergeMethod::kAverage, MergeMethod::kTaskArithmetic, MergeMethod::kTies, MergeMethod::kDare,
                        MergeMethod::kMTies, MergeMethod::kMTiesFew}) {
    MergeConfig c = config(m, 0.5, 0.2);
    c.seed = 77;
    c.dynamic_layers = {1};
    EXPECT_EQ(merge(base, models, c, batch), merge(base, models, c, batch)) << method_name(m);
  }
  MergeConfig a = config(MergeMethod::kDare, 0.5);
  MergeConfig b = a;
  b.seed = 78;
  EXPECT_NE(merge(base, models, a), merge(base, models, b));
}

TEST(AllMethods, HiddenUnitPermutationEquivariance) {
  Rng rng(17);
  const Architecture arch = arch_of(3, {6, 5}, 2);
  const ModelParams base = random_model(arch, rng);
  const std::vector<ModelParams> models{perturb(base, 0.3, rng), perturb(base, 0.3, rng), perturb(base, 0.3, rng)};
  const Matrix batch = random_batch(10, 3, rng);
  std::vector<std::size_t> perm(6);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);

  const ModelParams pbase = permute_hidden(base, 0, perm);
  std::vector<ModelParams> pmodels;
  for (const auto& m : models) pmodels.push_back(permute_hidden(m, 0, perm));

  // DARE draws its masks by flat position, so it is equivariant only in distribution.
  for (MergeMethod m : {MergeMethod::kAverage, MergeMethod::kTaskArithmetic, MergeMethod::kTies, MergeMethod::kMTies,
                        MergeMethod::kMTiesFew}) {
    MergeConfig c = config(m, 0.4, 0.2);
    c.dynamic_layers = {0, 1};
    const ModelParams expected = permute_hidden(merge(base, models, c, batch), 0, perm);
    expect_models_near(merge(pbase, pmodels, c, batch), expected, 1e-12);
  }
}

TEST(OutputDiscrepancy, BoundedBySpectralNormTimesLayerMLoss) {
  Rng rng(18);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t in = 1 + rng.below(6), hid = 1 + rng.below(8), out = 1 + rng.below(5);
    const Architecture arch = arch_of(in, {hid}, out, trial % 3 == 0 ? Activation::gelu() : Activation::relu());
    const ModelParams base = random_model(arch, rng);
    const std::size_t q = 2 + rng.below(3);
    std::vector<ModelParams> sources;
    for (std::size_t i = 0; i < q; ++i) {
      ModelParams s = perturb(base, 0.5, rng);
      s.weights[1] = base.weights[1];
      s.biases[1] = base.biases[1];
      sources.push_back(s);
    }
    const Vector alphas(q, 1.0 / static_cast<double>(q));
    Vector x(in);
    for (double& v : x) v = rng.normal();

    const Vector merged = forward(simple_average(sources, alphas), x);
    const Vector ens = ensemble_predict(sources, alphas, x);
    Vector diff(out);
    for (std::size_t i = 0; i < out; ++i) diff[i] = merged[i] - ens[i];

    std::vector<Vector> h;
    for (const auto& s : sources) h.push_back(forward_trace(s, x).pre[0]);
    const double layer = layer_mloss_direct(h, MLossConfig{alphas, false, 1e-4}, arch.activation);

    Eigen::MatrixXd w2(out, hid);
    for (std::size_t r = 0; r < out; ++r) {
      for (std::size_t c = 0; c < hid; ++c) w2(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = base.weights[1](r, c);
    }
    const double opnorm = Eigen::JacobiSVD<Eigen::MatrixXd>(w2).singularValues()(0);
    EXPECT_LE(l2_norm(diff), opnorm * layer + 1e-9);
  }
}

TEST(MergeConfig, Validation) {
  MergeConfig c;
  EXPECT_NO_THROW(c.validate(2, 3));
  c.keep = 0.0;
  EXPECT_THROW(c.validate(2, 3), ParameterError);
  c = MergeConfig{};
  c.evar = c.keep;
  EXPECT_THROW(c.validate(2, 3), ParameterError);
  c = MergeConfig{};
  c.lambda = 0.0;
  EXPECT_THROW(c.validate(2, 3), ParameterError);
  c = MergeConfig{};
  c.dynamic_layers = {3};
  EXPECT_THROW(c.validate(2, 3), ParameterError);
  c = MergeConfig{};
  c.alphas = {1.0};
  EXPECT_THROW(c.validate(2, 3), ShapeError);
  EXPECT_EQ(parse_method(method_name(MergeMethod::kMTiesFew)), MergeMethod::kMTiesFew);
  EXPECT_THROW(parse_method("soup"), ParameterError);
}
