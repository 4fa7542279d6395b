#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "support.hpp"

using namespace mloss;
using testing_support::arch_of;
using testing_support::random_model;

namespace {

SyntheticTaskSpec small_spec() {
  SyntheticTaskSpec s;
  s.num_tasks = 3;
  s.classes = 3;
  s.input_dim = 4;
  s.train_samples = 60;
  s.val_samples = 30;
  s.test_samples = 30;
  s.unlabeled_samples = 24;
  s.seed = 5;
  return s;
}

ExperimentConfig small_experiment() {
  ExperimentConfig c;
  c.data = small_spec();
  c.hidden = {8, 6};
  c.pretrain.epochs = 5;
  c.finetune.epochs = 2;
  c.keep_grid = {0.3, 0.5};
  c.lambda_grid = {0.5, 1.0};
  c.dare_grid = {0.5};
  c.stability_seeds = {1, 2};
  c.sample_sizes = {12, 24};
  return c;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST(Synthetic, DeterministicGivenSeed) {
  const SyntheticSuite a = gen_synthetic(small_spec());
  const SyntheticSuite b = gen_synthetic(small_spec());
  ASSERT_EQ(a.tasks.size(), 3u);
  for (std::size_t t = 0; t < 3; ++t) {
    EXPECT_EQ(a.tasks[t].train, b.tasks[t].train);
    EXPECT_EQ(a.tasks[t].test, b.tasks[t].test);
  }
  EXPECT_EQ(a.unlabeled, b.unlabeled);
  EXPECT_FALSE(a.unlabeled.labels.has_value());
}

TEST(Synthetic, ZeroSeparationMakesTasksAlike) {
  SyntheticTaskSpec s = small_spec();
  s.separation = 0.0;
  s.train_samples = 4000;
  const SyntheticSuite suite = gen_synthetic(s);
  // Column means of two tasks agree within a few standard errors.
  for (std::size_t j = 0; j < s.input_dim; ++j) {
    double m0 = 0.0, m1 = 0.0, v0 = 0.0;
    for (std::size_t i = 0; i < s.train_samples; ++i) {
      m0 += suite.tasks[0].train.features(i, j);
      m1 += suite.tasks[1].train.features(i, j);
    }
    m0 /= s.train_samples;
    m1 /= s.train_samples;
    for (std::size_t i = 0; i < s.train_samples; ++i) v0 += std::pow(suite.tasks[0].train.features(i, j) - m0, 2);
    const double se = std::sqrt(2.0 * v0 / s.train_samples / s.train_samples);
    EXPECT_LT(std::abs(m0 - m1), 5.0 * se) << "dim " << j;
  }
}

TEST(Synthetic, UnlabeledBatchSplitsEvenlyAcrossTasks) {
  EXPECT_EQ(unlabeled_counts(8, 128), std::vector<std::size_t>(8, 16));
  EXPECT_EQ(unlabeled_counts(3, 8), (std::vector<std::size_t>{3, 3, 2}));
  SyntheticTaskSpec s;
  s.num_tasks = 8;
  s.unlabeled_samples = 128;
  s.train_samples = s.val_samples = s.test_samples = 4;
  const DatasetMatrix pooled = gen_synthetic(s).unlabeled;
  EXPECT_EQ(pooled.size(), 128u);
  EXPECT_EQ(pooled, gen_unlabeled(s, 128, 0));
  EXPECT_NE(gen_unlabeled(s, 128, 1), pooled);
}

TEST(Synthetic, InvalidSpecRejected) {
  SyntheticTaskSpec s = small_spec();
  s.num_tasks = 1;
  EXPECT_THROW(gen_synthetic(s), ParameterError);
  s = small_spec();
  s.train_samples = 0;
  EXPECT_THROW(gen_synthetic(s), ParameterError);
}

TEST(Train, ZeroLearningRateReturnsInit) {
  const SyntheticSuite suite = gen_synthetic(small_spec());
  Rng rng(1);
  const ModelParams init = random_model(arch_of(4, {5}, 3), rng);
  TrainSpec spec;
  spec.learning_rate = 0.0;
  EXPECT_EQ(train_mlp(init, suite.tasks[0].train, spec), init);
}

TEST(Train, OneEpochImprovesSeparableToy) {
  // Two well separated blobs on a line.
  DatasetMatrix d;
  d.features = Matrix(200, 2);
  d.labels = std::vector<int>(200);
  d.num_classes = 2;
  Rng rng(2);
  for (std::size_t i = 0; i < 200; ++i) {
    const int y = static_cast<int>(i % 2);
    d.features(i, 0) = (y ? 2.0 : -2.0) + 0.3 * rng.normal();
    d.features(i, 1) = 0.3 * rng.normal();
    (*d.labels)[i] = y;
  }
  const ModelParams init = init_model(arch_of(2, {4}, 2), 3, 0.1);
  TrainSpec spec;
  spec.epochs = 1;
  spec.learning_rate = 0.1;
  spec.batch_size = 10;
  const ModelParams trained = train_mlp(init, d, spec);
  EXPECT_GT(evaluate(trained, d), evaluate(init, d));
  EXPECT_EQ(train_mlp(init, d, spec), trained);
}

TEST(Train, DimensionMismatch) {
  const SyntheticSuite suite = gen_synthetic(small_spec());
  const ModelParams init = ModelParams::zeros(arch_of(5, {3}, 3));
  EXPECT_THROW(train_mlp(init, suite.tasks[0].train, TrainSpec{}), ShapeError);
}

TEST(Evaluate, ConstantLogitsPickClassZero) {
  DatasetMatrix d;
  d.features = Matrix(5, 2);
  d.labels = std::vector<int>{0, 1, 0, 2, 1};
  d.num_classes = 3;
  const ModelParams flat = ModelParams::zeros(arch_of(2, {2}, 3));
  EXPECT_DOUBLE_EQ(evaluate(flat, d), 0.4);
}

TEST(Evaluate, MemorizingNetScoresOne) {
  // Four points on the axes; the identity first layer and a matching readout classify each.
  DatasetMatrix d;
  d.features = Matrix(4, 2, Vector{1, 0, 0, 1, -1, 0, 0, -1});
  d.labels = std::vector<int>{0, 1, 2, 3};
  d.num_classes = 4;
  ModelParams m = ModelParams::zeros(arch_of(2, {4}, 4));
  m.weights[0] = Matrix(4, 2, Vector{1, 0, 0, 1, -1, 0, 0, -1});
  m.weights[1] = Matrix(4, 4, Vector{1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1});
  EXPECT_EQ(evaluate(m, d), 1.0);
}

TEST(Evaluate, EnsembleOfCopiesMatchesModel) {
  const SyntheticSuite suite = gen_synthetic(small_spec());
  Rng rng(4);
  const ModelParams m = random_model(arch_of(4, {6}, 3), rng);
  const std::vector<ModelParams> copies(3, m);
  EXPECT_EQ(ensemble_evaluate(copies, Vector(3, 1.0 / 3.0), suite.tasks[1].test), evaluate(m, suite.tasks[1].test));
}

TEST(Evaluate, MissingLabelsIsDomainError) {
  const SyntheticSuite suite = gen_synthetic(small_spec());
  const ModelParams m = ModelParams::zeros(arch_of(4, {2}, 3));
  EXPECT_THROW(evaluate(m, suite.unlabeled), DomainError);
}

TEST(Config, MergeConfigRoundTrip) {
  MergeConfig c;
  c.method = MergeMethod::kMTiesFew;
  c.alphas = {0.25, 0.75};
  c.keep = 0.3;
  c.evar = 0.1;
  c.lambda = 1.2;
  c.seed = 99;
  c.dynamic_layers = {0, 2};
  c.normalized = true;
  c.epsilon = 1e-5;
  c.elect = ElectMerge::kWeightedSum;
  c.rescale_kept = true;
  const std::string text = format_key_values(to_key_values(c));
  const MergeConfig back = apply_key_values(MergeConfig{}, parse_key_values(text));
  EXPECT_EQ(to_key_values(back), to_key_values(c));
  EXPECT_EQ(back.dynamic_layers, c.dynamic_layers);
  EXPECT_EQ(back.keep, c.keep);
  EXPECT_EQ(back.alphas, c.alphas);
}

TEST(Config, ParsingErrors) {
  EXPECT_THROW(parse_key_values("keep 0.3\n"), ParameterError);
  EXPECT_THROW(apply_key_values(MergeConfig{}, parse_key_values("colour=red\n")), ParameterError);
  EXPECT_THROW(apply_key_values(MergeConfig{}, parse_key_values("keep=abc\n")), ParameterError);
  EXPECT_THROW(apply_key_values(MergeConfig{}, parse_key_values("layers=0\n")), ParameterError);
  const KeyValues kv = parse_key_values("# comment\n keep = 0.4 # trailing\n\nmethod=ties\n");
  EXPECT_EQ(kv.at("keep"), "0.4");
  EXPECT_EQ(apply_key_values(MergeConfig{}, kv).keep, 0.4);
}

TEST(Experiment, ZeroFineTuningLeavesEveryMethodAtBase) {
  ExperimentConfig c = small_experiment();
  c.finetune.learning_rate = 0.0;
  const ExperimentReport r = run_experiment(c);
  ASSERT_EQ(r.methods.size(), 7u);
  for (const auto& m : r.methods) {
    EXPECT_EQ(m.test_accuracy, r.base_accuracy) << m.method;
  }
}

TEST(Experiment, ReportShapeAndDeterminism) {
  const ExperimentConfig c = small_experiment();
  const ExperimentReport r = run_experiment(c);
  ASSERT_EQ(r.methods.size(), 7u);
  const std::vector<std::string> names{"avg", "task_arith", "ties", "dare", "mties", "mties_few", "ensemble"};
  for (std::size_t i = 0; i < 7; ++i) {
    EXPECT_EQ(r.methods[i].method, names[i]);
    ASSERT_EQ(r.methods[i].test_accuracy.size(), 3u);
    for (double a : r.methods[i].test_accuracy) {
      EXPECT_GE(a, 0.0);
      EXPECT_LE(a, 1.0);
    }
    EXPECT_GE(r.methods[i].variance, 0.0);
  }
  ASSERT_EQ(r.stability.size(), 3u);
  for (double s : r.stability.back().accuracy) EXPECT_TRUE(std::isfinite(s));
  EXPECT_EQ(r.sample_size.size(), 2u);

  const auto root = std::filesystem::temp_directory_path() / "mloss_harness_test";
  std::filesystem::remove_all(root);
  write_experiment(r, (root / "a").string());
  write_experiment(run_experiment(c), (root / "b").string());
  for (const char* f : {"accuracy.csv", "variance.csv", "heatmap.csv", "mloss_layers.csv", "stability.csv",
                        "sample_size.csv"}) {
    const std::string a = slurp((root / "a" / f).string());
    EXPECT_FALSE(a.empty()) << f;
    EXPECT_EQ(a, slurp((root / "b" / f).string())) << f;
  }
  std::filesystem::remove_all(root);
}

TEST(Experiment, StageLabelOnFailure) {
  ExperimentConfig c = small_experiment();
  c.keep_grid = {1.5};
  try {
    run_experiment(c);
    FAIL() << "expected ParameterError";
  } catch (const ParameterError& e) {
    EXPECT_EQ(std::string(e.what()).rfind("ties: ", 0), 0u) << e.what();
  }
}

TEST(Experiment, ConfigKeys) {
  const ExperimentConfig c = parse_experiment_config(
      parse_key_values("tasks=4\nhidden=16,8\nactivation=gelu\nkeep_grid=0.2,0.4\nfew_layers=1\nnormalized=0\n"));
  EXPECT_EQ(c.data.num_tasks, 4u);
  EXPECT_EQ(c.hidden, (std::vector<std::size_t>{16, 8}));
  EXPECT_EQ(c.activation, Activation::gelu());
  EXPECT_EQ(c.keep_grid, (std::vector<double>{0.2, 0.4}));
  EXPECT_EQ(c.few_layers, std::vector<std::size_t>{0});
  EXPECT_FALSE(c.normalized);
  EXPECT_THROW(parse_experiment_config(parse_key_values("bogus=1\n")), ParameterError);
}
