#pragma once

// Desk-scale experiment harness: synthetic multi-task data, a small SGD
// trainer, accuracy evaluation and the method comparison.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "mloss/config.hpp"
#include "mloss/csv.hpp"
#include "mloss/errors.hpp"
#include "mloss/merging.hpp"
#include "mloss/metric.hpp"
#include "mloss/model_io.hpp"
#include "mloss/network.hpp"
#include "mloss/random.hpp"

namespace mloss {

// ---------------------------------------------------------------------------
// Synthetic tasks

/// Gaussian-mixture classification tasks over one shared set of clusters. Task t
/// shifts every cluster by `separation` times a task-specific standard normal
/// offset and assigns labels to clusters through its own random permutation, so
/// overlapping tasks disagree.
struct SyntheticTaskSpec {
  std::size_t num_tasks = 8;
  std::size_t classes = 4;
  std::size_t input_dim = 16;
  std::size_t train_samples = 256;
  std::size_t val_samples = 128;
  std::size_t test_samples = 256;
  std::size_t unlabeled_samples = 128;
  double separation = 1.0;
  double class_spread = 2.0;  ///< std of the shared class means
  double noise = 1.0;
  std::uint64_t seed = 1;

  void validate() const {
    if (num_tasks < 2) throw ParameterError("need at least 2 tasks");
    if (classes < 1 || input_dim < 1 || train_samples < 1 || val_samples < 1 || test_samples < 1 ||
        unlabeled_samples < 1) {
      throw ParameterError("synthetic task counts must be >= 1");
    }
    if (!(separation >= 0.0) || !(class_spread >= 0.0) || !(noise > 0.0)) {
      throw ParameterError("synthetic task scales must be non-negative (noise > 0)");
    }
  }
};

struct TaskData {
  DatasetMatrix train;
  DatasetMatrix val;
  DatasetMatrix test;
};

struct SyntheticSuite {
  std::vector<TaskData> tasks;
  DatasetMatrix unlabeled;
};

namespace detail {

/// means[t][c] is the mean of the cluster carrying label c in task t.
inline std::vector<std::vector<Vector>> task_means(const SyntheticTaskSpec& s) {
  Rng shared(derive_seed(s.seed, {0}));
  std::vector<Vector> base(s.classes, Vector(s.input_dim));
  for (auto& m : base) {
    for (double& x : m) x = s.class_spread * shared.normal();
  }
  std::vector<std::vector<Vector>> means(s.num_tasks);
  for (std::size_t t = 0; t < s.num_tasks; ++t) {
    Rng rng(derive_seed(s.seed, {1, t}));
    Vector shift(s.input_dim);
    for (double& x : shift) x = s.separation * rng.normal();
    std::vector<std::size_t> perm(s.classes);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    for (std::size_t i = s.classes; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
    for (std::size_t c = 0; c < s.classes; ++c) {
      Vector m = base[perm[c]];
      for (std::size_t j = 0; j < s.input_dim; ++j) m[j] += shift[j];
      means[t].push_back(std::move(m));
    }
  }
  return means;
}

inline DatasetMatrix sample_task(const SyntheticTaskSpec& s, const std::vector<Vector>& means, std::size_t n,
                                 std::uint64_t seed, bool labeled) {
  Rng rng(seed);
  DatasetMatrix d;
  d.features = Matrix(n, s.input_dim);
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = static_cast<std::size_t>(rng.below(s.classes));
    labels[i] = static_cast<int>(c);
    auto row = d.features.row(i);
    for (std::size_t j = 0; j < s.input_dim; ++j) row[j] = means[c][j] + s.noise * rng.normal();
  }
  if (labeled) {
    d.labels = std::move(labels);
    d.num_classes = s.classes;
  }
  return d;
}

}  // namespace detail

/// Rows each task contributes to a pooled batch of `size`; the remainder goes to the first tasks.
inline std::vector<std::size_t> unlabeled_counts(std::size_t num_tasks, std::size_t size) {
  std::vector<std::size_t> counts(num_tasks, size / num_tasks);
  for (std::size_t t = 0; t < size % num_tasks; ++t) ++counts[t];
  return counts;
}

/// Unlabeled rows pooled over all tasks, task by task, with the counts of
/// unlabeled_counts. `batch_seed` only varies this draw.
inline DatasetMatrix gen_unlabeled(const SyntheticTaskSpec& spec, std::size_t size, std::uint64_t batch_seed) {
  spec.validate();
  if (size == 0) throw ParameterError("unlabeled batch size must be >= 1");
  const auto means = detail::task_means(spec);
  DatasetMatrix out;
  out.features = Matrix(size, spec.input_dim);
  std::size_t row = 0;
  const auto counts = unlabeled_counts(spec.num_tasks, size);
  for (std::size_t t = 0; t < spec.num_tasks; ++t) {
    const std::size_t n = counts[t];
    if (n == 0) continue;
    const DatasetMatrix part = detail::sample_task(spec, means[t], n, derive_seed(spec.seed, {3, t, batch_seed}), false);
    for (std::size_t i = 0; i < n; ++i, ++row) {
      std::copy(part.features.row(i).begin(), part.features.row(i).end(), out.features.row(row).begin());
    }
  }
  return out;
}

inline SyntheticSuite gen_synthetic(const SyntheticTaskSpec& spec) {
  spec.validate();
  const auto means = detail::task_means(spec);
  SyntheticSuite suite;
  for (std::size_t t = 0; t < spec.num_tasks; ++t) {
    TaskData td;
    td.train = detail::sample_task(spec, means[t], spec.train_samples, derive_seed(spec.seed, {2, t, 0}), true);
    td.val = detail::sample_task(spec, means[t], spec.val_samples, derive_seed(spec.seed, {2, t, 1}), true);
    td.test = detail::sample_task(spec, means[t], spec.test_samples, derive_seed(spec.seed, {2, t, 2}), true);
    suite.tasks.push_back(std::move(td));
  }
  suite.unlabeled = gen_unlabeled(spec, spec.unlabeled_samples, 0);
  return suite;
}

/// Row-wise concatenation of labeled datasets with the same width and class count.
inline DatasetMatrix concat_datasets(std::span<const DatasetMatrix* const> parts) {
  if (parts.empty()) throw DomainError("nothing to concatenate");
  std::size_t rows = 0;
  for (const auto* p : parts) rows += p->size();
  DatasetMatrix out;
  out.features = Matrix(rows, parts[0]->features.cols());
  out.num_classes = parts[0]->num_classes;
  std::vector<int> labels;
  std::size_t r = 0;
  for (const auto* p : parts) {
    if (p->features.cols() != out.features.cols()) throw ShapeError("datasets differ in width");
    for (std::size_t i = 0; i < p->size(); ++i, ++r) {
      std::copy(p->features.row(i).begin(), p->features.row(i).end(), out.features.row(r).begin());
    }
    if (p->labels) labels.insert(labels.end(), p->labels->begin(), p->labels->end());
  }
  if (labels.size() == rows) out.labels = std::move(labels);
  return out;
}

// ---------------------------------------------------------------------------
// Training and evaluation

struct TrainSpec {
  std::size_t epochs = 10;
  double learning_rate = 0.05;
  std::size_t batch_size = 32;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (batch_size == 0) throw ParameterError("batch size must be >= 1");
    if (!(learning_rate >= 0.0) || !(weight_decay >= 0.0)) {
      throw ParameterError("learning rate and weight decay must be >= 0");
    }
  }
};

inline std::size_t argmax(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

namespace detail {

inline void require_labels(const DatasetMatrix& data, const ModelParams& model) {
  if (!data.labels) throw DomainError("dataset has no labels");
  if (data.features.cols() != model.arch.input_dim) {
    throw ShapeError("dataset width " + std::to_string(data.features.cols()) + " does not match input dim " +
                     std::to_string(model.arch.input_dim));
  }
  for (int y : *data.labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= model.arch.output_dim) {
      throw DomainError("label " + std::to_string(y) + " outside the model's output range");
    }
  }
}

/// Adds the softmax cross-entropy gradient of one example to `grad`.
inline void accumulate_gradient(const ModelParams& m, std::span<const double> x, int label, ModelParams& grad) {
  const ActivationTrace t = forward_trace(m, x);
  const std::size_t n = m.num_layers();
  Vector delta = t.pre.back();
  const double mx = *std::max_element(delta.begin(), delta.end());
  double z = 0.0;
  for (double& v : delta) z += (v = std::exp(v - mx));
  for (double& v : delta) v /= z;
  delta[static_cast<std::size_t>(label)] -= 1.0;

  for (std::size_t l = n; l-- > 0;) {
    std::span<const double> in = l == 0 ? std::span<const double>(t.input) : std::span<const double>(t.post[l - 1]);
    Matrix& gw = grad.weights[l];
    for (std::size_t i = 0; i < gw.rows(); ++i) {
      auto row = gw.row(i);
      for (std::size_t j = 0; j < row.size(); ++j) row[j] += delta[i] * in[j];
      grad.biases[l][i] += delta[i];
    }
    if (l == 0) break;
    Vector prev(m.weights[l].cols(), 0.0);
    for (std::size_t i = 0; i < m.weights[l].rows(); ++i) {
      auto row = m.weights[l].row(i);
      for (std::size_t j = 0; j < prev.size(); ++j) prev[j] += row[j] * delta[i];
    }
    for (std::size_t j = 0; j < prev.size(); ++j) {
      prev[j] *= activation_derivative(m.arch.activation, t.pre[l - 1][j]);
    }
    delta = std::move(prev);
  }
}

}  // namespace detail

/// Minibatch SGD on softmax cross-entropy; L2 weight decay on weights only.
inline ModelParams train_mlp(const ModelParams& init, const DatasetMatrix& data, const TrainSpec& spec) {
  spec.validate();
  init.validate();
  detail::require_labels(data, init);
  ModelParams m = init;
  if (spec.learning_rate == 0.0) return m;
  Rng rng(spec.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  ModelParams grad = ModelParams::zeros(init.arch);
  for (std::size_t epoch = 0; epoch < spec.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    for (std::size_t start = 0; start < order.size(); start += spec.batch_size) {
      const std::size_t end = std::min(order.size(), start + spec.batch_size);
      for (auto& w : grad.weights) std::fill(w.flat().begin(), w.flat().end(), 0.0);
      for (auto& b : grad.biases) std::fill(b.begin(), b.end(), 0.0);
      for (std::size_t k = start; k < end; ++k) {
        detail::accumulate_gradient(m, data.features.row(order[k]), (*data.labels)[order[k]], grad);
      }
      const double step = spec.learning_rate / static_cast<double>(end - start);
      for (std::size_t l = 0; l < m.num_layers(); ++l) {
        auto w = m.weights[l].flat();
        auto g = grad.weights[l].flat();
        for (std::size_t c = 0; c < w.size(); ++c) {
          w[c] -= step * g[c] + spec.learning_rate * spec.weight_decay * w[c];
        }
        for (std::size_t c = 0; c < m.biases[l].size(); ++c) m.biases[l][c] -= step * grad.biases[l][c];
      }
    }
  }
  return m;
}

/// Fraction of rows whose argmax output (ties to the lowest class) matches the label.
inline double evaluate(const ModelParams& model, const DatasetMatrix& data) {
  detail::require_labels(data, model);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Vector y = forward(model, data.features.row(i));
    if (argmax(y) == static_cast<std::size_t>((*data.labels)[i])) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

inline double ensemble_evaluate(std::span<const ModelParams> models, std::span<const double> alphas,
                                const DatasetMatrix& data) {
  if (models.empty()) throw ParameterError("need at least one model to ensemble");
  detail::require_labels(data, models[0]);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Vector y = ensemble_predict(models, alphas, data.features.row(i));
    if (argmax(y) == static_cast<std::size_t>((*data.labels)[i])) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

// ---------------------------------------------------------------------------
// Experiment

struct ExperimentConfig {
  SyntheticTaskSpec data;
  std::vector<std::size_t> hidden = {32, 32, 32};
  Activation activation = Activation::relu();
  TrainSpec pretrain{5, 0.05, 32, 0.0, 11};
  TrainSpec finetune{10, 0.02, 32, 0.0, 13};
  bool normalized = true;
  double epsilon = 1e-4;
  std::size_t group_size = 50;
  std::vector<double> keep_grid = {0.2, 0.3, 0.4, 0.5};
  double evar = 0.1;
  std::vector<double> lambda_grid = {0.5, 0.8, 1.0, 1.2, 1.5, 2.0};
  std::vector<double> dare_grid = {0.3, 0.5, 0.7, 0.8};
  std::uint64_t dare_seed = 5;
  std::vector<std::size_t> few_layers;  ///< 0-based; empty = first and last hidden layer
  std::vector<std::uint64_t> stability_seeds = {1, 2, 42};
  std::vector<std::size_t> sample_sizes = {128, 256, 512};
};

inline ExperimentConfig parse_experiment_config(const KeyValues& kv) {
  ExperimentConfig c;
  for (const auto& [k, v] : kv) {
    if (k == "tasks") c.data.num_tasks = parse_uint(k, v);
    else if (k == "classes") c.data.classes = parse_uint(k, v);
    else if (k == "dim") c.data.input_dim = parse_uint(k, v);
    else if (k == "train_samples") c.data.train_samples = parse_uint(k, v);
    else if (k == "val_samples") c.data.val_samples = parse_uint(k, v);
    else if (k == "test_samples") c.data.test_samples = parse_uint(k, v);
    else if (k == "unlabeled") c.data.unlabeled_samples = parse_uint(k, v);
    else if (k == "sep") c.data.separation = parse_double(k, v);
    else if (k == "spread") c.data.class_spread = parse_double(k, v);
    else if (k == "noise") c.data.noise = parse_double(k, v);
    else if (k == "seed") c.data.seed = parse_uint(k, v);
    else if (k == "hidden") {
      c.hidden.clear();
      for (auto d : parse_uint_list(k, v)) c.hidden.push_back(d);
    } else if (k == "activation") c.activation = parse_activation(v, c.activation.slope);
    else if (k == "slope") c.activation = Activation::leaky_relu(parse_double(k, v));
    else if (k == "pretrain_epochs") c.pretrain.epochs = parse_uint(k, v);
    else if (k == "pretrain_lr") c.pretrain.learning_rate = parse_double(k, v);
    else if (k == "finetune_epochs") c.finetune.epochs = parse_uint(k, v);
    else if (k == "finetune_lr") c.finetune.learning_rate = parse_double(k, v);
    else if (k == "batch") c.pretrain.batch_size = c.finetune.batch_size = parse_uint(k, v);
    else if (k == "weight_decay") c.pretrain.weight_decay = c.finetune.weight_decay = parse_double(k, v);
    else if (k == "normalized") c.normalized = parse_bool(k, v);
    else if (k == "epsilon") c.epsilon = parse_double(k, v);
    else if (k == "group_size") c.group_size = parse_uint(k, v);
    else if (k == "keep_grid") c.keep_grid = parse_double_list(k, v);
    else if (k == "evar") c.evar = parse_double(k, v);
    else if (k == "lambda_grid") c.lambda_grid = parse_double_list(k, v);
    else if (k == "dare_grid") c.dare_grid = parse_double_list(k, v);
    else if (k == "dare_seed") c.dare_seed = parse_uint(k, v);
    else if (k == "few_layers") c.few_layers = parse_layer_list(k, v);
    else if (k == "stability_seeds") c.stability_seeds = parse_uint_list(k, v);
    else if (k == "sample_sizes") {
      c.sample_sizes.clear();
      for (auto s : parse_uint_list(k, v)) c.sample_sizes.push_back(s);
    } else throw ParameterError("unknown experiment config key '" + k + "'");
  }
  return c;
}

struct MethodResult {
  std::string method;
  std::string hyperparameters;  ///< selected on validation, "" when there is nothing to tune
  std::vector<double> test_accuracy;  ///< per task
  double val_mean = 0.0;
  double mean = 0.0;
  double variance = 0.0;  ///< population variance over tasks
};

struct StudyRow {
  std::string label;
  std::vector<double> accuracy;
  double mean = 0.0;
};

struct ExperimentReport {
  std::size_t num_tasks = 0;
  std::vector<MethodResult> methods;
  std::vector<double> base_accuracy;
  MLossReport source_mloss;          ///< fine-tuned sources, no synchronization
  std::vector<Vector> heatmap;       ///< grouped node scores seen by the selected M-TIES run
  std::vector<std::size_t> heatmap_layers;  ///< 0-based layer of each heatmap row
  std::size_t heatmap_group_size = 1;
  std::vector<StudyRow> stability;   ///< one row per batch seed plus a "std" row
  std::vector<StudyRow> sample_size;
  double seconds = 0.0;
};

namespace detail {

/// Runs `fn`, prefixing any library error with the experiment stage it came from.
template <typename F>
auto with_stage(const std::string& stage, F&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const FormatError& e) {
    throw FormatError(e.kind(), e.offset(), stage + ": " + e.what());
  } catch (const ShapeError& e) {
    throw ShapeError(stage + ": " + e.what());
  } catch (const DomainError& e) {
    throw DomainError(stage + ": " + e.what());
  } catch (const ParameterError& e) {
    throw ParameterError(stage + ": " + e.what());
  } catch (const Error& e) {
    throw Error(stage + ": " + e.what());
  }
}

inline std::vector<double> task_accuracies(const ModelParams& m, const std::vector<TaskData>& tasks, bool test) {
  std::vector<double> acc;
  for (const auto& t : tasks) acc.push_back(evaluate(m, test ? t.test : t.val));
  return acc;
}

inline double mean_of(std::span<const double> v) {
  return v.empty() ? 0.0 : pairwise_sum(v) / static_cast<double>(v.size());
}

inline double population_variance(std::span<const double> v) {
  const double mu = mean_of(v);
  Vector sq;
  for (double x : v) sq.push_back((x - mu) * (x - mu));
  return mean_of(sq);
}

inline double sample_std(std::span<const double> v) {
  if (v.size() < 2) return 0.0;
  const double mu = mean_of(v);
  Vector sq;
  for (double x : v) sq.push_back((x - mu) * (x - mu));
  return std::sqrt(pairwise_sum(sq) / static_cast<double>(v.size() - 1));
}

}  // namespace detail

/// Pretrains a base on the pooled training splits, fine-tunes one model per task,
/// tunes every merging method on the validation splits and reports test accuracy.
inline ExperimentReport run_experiment(const ExperimentConfig& cfg) {
  const auto started = std::chrono::steady_clock::now();
  const SyntheticSuite suite = detail::with_stage("generate", [&] { return gen_synthetic(cfg.data); });
  const std::size_t q = cfg.data.num_tasks;

  const ModelParams base = detail::with_stage("pretrain", [&] {
    Architecture arch{cfg.data.input_dim, cfg.hidden, cfg.data.classes, cfg.activation};
    arch.validate();
    const ModelParams init = init_model(arch, derive_seed(cfg.data.seed, {10}));
    std::vector<const DatasetMatrix*> train_parts;
    for (const auto& t : suite.tasks) train_parts.push_back(&t.train);
    return train_mlp(init, concat_datasets(train_parts), cfg.pretrain);
  });

  std::vector<ModelParams> sources;
  for (std::size_t t = 0; t < q; ++t) {
    TrainSpec ft = cfg.finetune;
    ft.seed = derive_seed(cfg.finetune.seed, {t});
    sources.push_back(detail::with_stage("finetune task " + std::to_string(t + 1),
                                         [&] { return train_mlp(base, suite.tasks[t].train, ft); }));
  }

  const std::vector<double> alphas(q, 1.0 / static_cast<double>(q));
  const Matrix& batch = suite.unlabeled.features;

  MergeConfig common;
  common.normalized = cfg.normalized;
  common.epsilon = cfg.epsilon;
  common.evar = 0.0;
  common.seed = cfg.dare_seed;

  std::vector<std::size_t> few = cfg.few_layers;
  if (few.empty()) {
    few.push_back(0);
    if (cfg.hidden.size() > 1) few.push_back(cfg.hidden.size() - 1);
  }

  ExperimentReport report;
  report.num_tasks = q;
  report.base_accuracy = detail::task_accuracies(base, suite.tasks, true);

  // Evaluates each candidate on validation, keeps the first best, reports test.
  auto tune = [&](const std::string& name, const std::vector<std::pair<std::string, MergeConfig>>& grid) {
    double best_val = -1.0;
    std::size_t best = 0;
    std::vector<ModelParams> merged;
    for (std::size_t g = 0; g < grid.size(); ++g) {
      merged.push_back(detail::with_stage(name, [&] { return merge(base, sources, grid[g].second, batch); }));
      const auto val = detail::task_accuracies(merged.back(), suite.tasks, false);
      const double m = detail::mean_of(val);
      if (m > best_val) {
        best_val = m;
        best = g;
      }
    }
    MethodResult r;
    r.method = name;
    r.hyperparameters = grid[best].first;
    r.val_mean = best_val;
    r.test_accuracy = detail::task_accuracies(merged[best], suite.tasks, true);
    r.mean = detail::mean_of(r.test_accuracy);
    r.variance = detail::population_variance(r.test_accuracy);
    report.methods.push_back(std::move(r));
    return grid[best].second;
  };

  {
    MergeConfig c = common;
    c.method = MergeMethod::kAverage;
    tune("avg", {{"", c}});
  }
  {
    std::vector<std::pair<std::string, MergeConfig>> grid;
    for (double lam : cfg.lambda_grid) {
      MergeConfig c = common;
      c.method = MergeMethod::kTaskArithmetic;
      c.lambda = lam;
      grid.push_back({"lambda=" + format_double(lam), c});
    }
    tune("task_arith", grid);
  }
  auto keep_grid = [&](MergeMethod method, const std::vector<double>& keeps, double evar) {
    std::vector<std::pair<std::string, MergeConfig>> grid;
    for (double k : keeps) {
      MergeConfig c = common;
      c.method = method;
      c.keep = k;
      c.evar = evar;
      if (method == MergeMethod::kMTiesFew) c.dynamic_layers = few;
      std::string label = "k=" + format_double(k);
      if (evar > 0.0) label += ";e=" + format_double(evar);
      grid.push_back({label, c});
    }
    return grid;
  };
  tune("ties", keep_grid(MergeMethod::kTies, cfg.keep_grid, 0.0));
  tune("dare", keep_grid(MergeMethod::kDare, cfg.dare_grid, 0.0));
  const MergeConfig mties_cfg = tune("mties", keep_grid(MergeMethod::kMTies, cfg.keep_grid, cfg.evar));
  tune("mties_few", keep_grid(MergeMethod::kMTiesFew, cfg.keep_grid, cfg.evar));
  {
    MethodResult r;
    r.method = "ensemble";
    std::vector<double> val;
    for (const auto& t : suite.tasks) {
      r.test_accuracy.push_back(ensemble_evaluate(sources, alphas, t.test));
      val.push_back(ensemble_evaluate(sources, alphas, t.val));
    }
    r.val_mean = detail::mean_of(val);
    r.mean = detail::mean_of(r.test_accuracy);
    r.variance = detail::population_variance(r.test_accuracy);
    report.methods.push_back(std::move(r));
  }

  report.source_mloss = detail::with_stage(
      "mloss", [&] { return compute_report(sources, batch, MLossConfig{alphas, cfg.normalized, cfg.epsilon}); });

  // Node scores seen while merging with the selected M-TIES setting.
  MergeTrace trace;
  detail::with_stage("heatmap", [&] { return mties_merge(base, sources, mties_cfg, batch, &trace); });
  std::size_t widest = 1;
  std::vector<Vector> scored;
  for (std::size_t l = 0; l < trace.node_scores.size(); ++l) {
    if (trace.node_scores[l].empty()) continue;
    scored.push_back(trace.node_scores[l]);
    report.heatmap_layers.push_back(l);
    widest = std::max(widest, trace.node_scores[l].size());
  }
  report.heatmap_group_size = std::max<std::size_t>(1, std::min(cfg.group_size, widest));
  report.heatmap = heatmap_groups(std::span<const Vector>(scored), report.heatmap_group_size);

  // Stability over the unlabeled draw and over its size.
  std::vector<std::vector<double>> per_seed;
  for (std::uint64_t s : cfg.stability_seeds) {
    StudyRow row{"seed=" + std::to_string(s), detail::with_stage("stability", [&] {
                   const DatasetMatrix b = gen_unlabeled(cfg.data, cfg.data.unlabeled_samples, s + 1);
                   return detail::task_accuracies(mties_merge(base, sources, mties_cfg, b.features), suite.tasks, true);
                 }),
                 0.0};
    row.mean = detail::mean_of(row.accuracy);
    per_seed.push_back(row.accuracy);
    report.stability.push_back(std::move(row));
  }
  if (!per_seed.empty()) {
    StudyRow std_row{"std", {}, 0.0};
    std::vector<double> means;
    for (const auto& r : report.stability) means.push_back(r.mean);
    for (std::size_t t = 0; t < q; ++t) {
      std::vector<double> col;
      for (const auto& acc : per_seed) col.push_back(acc[t]);
      std_row.accuracy.push_back(detail::sample_std(col));
    }
    std_row.mean = detail::sample_std(means);
    report.stability.push_back(std::move(std_row));
  }
  for (std::size_t n : cfg.sample_sizes) {
    StudyRow row{"samples=" + std::to_string(n), detail::with_stage("sample size", [&] {
                   const DatasetMatrix b = gen_unlabeled(cfg.data, n, 0);
                   return detail::task_accuracies(mties_merge(base, sources, mties_cfg, b.features), suite.tasks, true);
                 }),
                 0.0};
    row.mean = detail::mean_of(row.accuracy);
    report.sample_size.push_back(std::move(row));
  }

  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return report;
}

namespace detail {
inline std::vector<std::string> task_header(const char* first, std::size_t q) {
  std::vector<std::string> h{first};
  for (std::size_t t = 0; t < q; ++t) h.push_back("task_" + std::to_string(t + 1));
  h.push_back("mean");
  return h;
}

inline std::string study_csv(const std::vector<StudyRow>& rows, const char* first, std::size_t q) {
  const auto header = task_header(first, q);
  std::string text;
  for (std::size_t i = 0; i < header.size(); ++i) text += (i ? "," : "") + header[i];
  text += '\n';
  for (const auto& r : rows) {
    text += r.label;
    for (double a : r.accuracy) text += "," + format_double(a);
    text += "," + format_double(r.mean) + "\n";
  }
  return text;
}
}  // namespace detail

/// Writes accuracy.csv, variance.csv, heatmap.csv, mloss_layers.csv,
/// stability.csv and sample_size.csv into `dir`. Timing is not written so the
/// files are byte-identical for a fixed configuration.
inline void write_experiment(const ExperimentReport& r, const std::string& dir) {
  std::filesystem::create_directories(dir);
  const std::string root = dir + "/";
  {
    std::string text = "method,hyperparameters";
    for (std::size_t t = 0; t < r.num_tasks; ++t) text += ",task_" + std::to_string(t + 1);
    text += ",mean,variance\n";
    for (const auto& m : r.methods) {
      text += m.method + "," + m.hyperparameters;
      for (double a : m.test_accuracy) text += "," + format_double(a);
      text += "," + format_double(m.mean) + "," + format_double(m.variance) + "\n";
    }
    detail::write_file(root + "accuracy.csv", text);
  }
  {
    std::string header, row;
    for (std::size_t i = 0; i < r.methods.size(); ++i) {
      header += (i ? "," : "") + r.methods[i].method;
      row += (i ? "," : "") + format_double(r.methods[i].variance);
    }
    detail::write_file(root + "variance.csv", header + "\n" + row + "\n");
  }
  {
    CsvWriter w({"layer_index", "group_index", "score", "normalized_flag", "sample_count"});
    const std::string flag = r.source_mloss.normalized ? "1" : "0";
    for (std::size_t i = 0; i < r.heatmap.size(); ++i) {
      for (std::size_t g = 0; g < r.heatmap[i].size(); ++g) {
        w.row({std::to_string(r.heatmap_layers[i] + 1), std::to_string(g), format_double(r.heatmap[i][g]), flag,
               std::to_string(r.source_mloss.sample_count)});
      }
    }
    detail::write_file(root + "heatmap.csv", w.str());
  }
  detail::write_file(root + "mloss_layers.csv", report_csv(r.source_mloss, ReportLevel::kLayer));
  detail::write_file(root + "stability.csv", detail::study_csv(r.stability, "batch", r.num_tasks));
  detail::write_file(root + "sample_size.csv", detail::study_csv(r.sample_size, "batch", r.num_tasks));
}

}  // namespace mloss
