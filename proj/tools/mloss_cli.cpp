// mloss: merging, M-Loss reports, theory checks and the toy experiment harness.
//
// Exit codes: 0 success, 1 error while running, 2 bad command line.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <functional>
#include <iostream>
#include <memory>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>

#include "mloss.hpp"

namespace {

using namespace mloss;

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

std::vector<ModelParams> read_models(const std::vector<std::string>& paths) {
  std::vector<ModelParams> out;
  out.reserve(paths.size());
  for (const auto& p : paths) out.push_back(read_model(p));
  return out;
}

void emit(const std::string& text, const std::string& out) {
  if (out.empty() || out == "-") {
    std::cout << text;
  } else {
    detail::write_file(out, text);
  }
}

// --- merge -----------------------------------------------------------------

struct MergeArgs {
  std::string method;
  std::string base;
  std::vector<std::string> models;
  std::string data;
  double keep = 0.2;
  double evar = 0.1;
  double lambda = 1.0;
  std::uint64_t seed = 0;
  std::string layers;
  bool normalized = false;
  double epsilon = 1e-4;
  std::vector<double> alphas;
  std::string config;
  std::string out;
};

void add_merge(CLI::App& app, std::function<void()>& run) {
  auto a = std::make_shared<MergeArgs>();
  auto* sub = app.add_subcommand("merge", "Merge fine-tuned models sharing a base");
  auto* method = sub->add_option("--method", a->method, "avg|task_arith|ties|dare|mties|mties_few");
  sub->add_option("--base", a->base, "Base model (MTM1)")->required();
  sub->add_option("--model", a->models, "Fine-tuned model (repeat or list)")->required();
  sub->add_option("--data", a->data, "Unlabeled batch for mties/mties_few");
  auto* keep = sub->add_option("--keep", a->keep, "Keep rate k");
  auto* evar = sub->add_option("--evar", a->evar, "Keep-rate variation e");
  auto* lambda = sub->add_option("--lambda", a->lambda, "Task-vector scale");
  auto* seed = sub->add_option("--seed", a->seed, "DARE seed");
  auto* layers = sub->add_option("--layers", a->layers, "1-based dynamic layers for mties_few, e.g. 1,3");
  auto* normalized = sub->add_flag("--normalized", a->normalized, "Use normalized node scores");
  auto* epsilon = sub->add_option("--epsilon", a->epsilon, "Normalization epsilon");
  auto* alphas = sub->add_option("--alpha", a->alphas, "Merging weights, one per model")->delimiter(',');
  sub->add_option("--config", a->config, "key=value merge config; flags override it");
  sub->add_option("--out", a->out, "Output model")->required();
  sub->callback([&run, a, method, keep, evar, lambda, seed, layers, normalized, epsilon, alphas] {
    run = [a, method, keep, evar, lambda, seed, layers, normalized, epsilon, alphas] {
      MergeConfig cfg;
      if (!a->config.empty()) cfg = apply_key_values(cfg, read_key_values(a->config));
      if (method->count()) cfg.method = parse_method(a->method);
      if (keep->count()) cfg.keep = a->keep;
      if (evar->count()) cfg.evar = a->evar;
      if (lambda->count()) cfg.lambda = a->lambda;
      if (seed->count()) cfg.seed = a->seed;
      if (layers->count()) cfg.dynamic_layers = parse_layer_list("--layers", a->layers);
      if (normalized->count()) cfg.normalized = a->normalized;
      if (epsilon->count()) cfg.epsilon = a->epsilon;
      if (alphas->count()) cfg.alphas = a->alphas;
      if (a->config.empty() && !method->count()) throw ParameterError("--method is required without --config");

      const ModelParams base = read_model(a->base);
      const auto models = read_models(a->models);
      Matrix batch;
      if (!a->data.empty()) batch = read_dataset(a->data).features;
      write_model(merge(base, models, cfg, batch), a->out);
    };
  });
}

// --- mloss -----------------------------------------------------------------

void add_mloss(CLI::App& app, std::function<void()>& run) {
  struct Args {
    std::string base;
    std::vector<std::string> models;
    std::string data;
    std::string level = "node";
    bool normalized = false;
    double epsilon = 1e-4;
    std::size_t group_size = 0;
    std::vector<double> alphas;
    std::string out;
  };
  auto a = std::make_shared<Args>();
  auto* sub = app.add_subcommand("mloss", "Per-node / per-layer M-Loss of the sources on a batch");
  sub->add_option("--base", a->base, "Base model, checked for compatibility");
  sub->add_option("--model", a->models, "Source model (repeat or list)")->required();
  sub->add_option("--data", a->data, "Unlabeled batch (MTM1 dataset)")->required();
  sub->add_option("--level", a->level, "node|layer")->check(CLI::IsMember({"node", "layer"}));
  sub->add_flag("--normalized", a->normalized, "Normalized discrepancy");
  sub->add_option("--epsilon", a->epsilon, "Normalization epsilon");
  auto* group = sub->add_option("--group-size", a->group_size, "Average node scores in groups of N");
  sub->add_option("--alpha", a->alphas, "Merging weights, one per model")->delimiter(',');
  sub->add_option("--out", a->out, "Output CSV (default stdout)");
  sub->callback([&run, a, group] {
    run = [a, group] {
      const auto models = read_models(a->models);
      if (!a->base.empty()) {
        const ModelParams base = read_model(a->base);
        for (const auto& m : models) require_compatible(base, m);
      }
      const Matrix batch = read_dataset(a->data).features;
      MLossConfig cfg = MLossConfig::uniform(models.size());
      if (!a->alphas.empty()) cfg.weights = a->alphas;
      cfg.normalized = a->normalized;
      cfg.epsilon = a->epsilon;
      const MLossReport report = compute_report(models, batch, cfg);
      if (group->count()) {
        if (a->group_size == 0) throw ParameterError("--group-size must be >= 1");
        if (a->level != "node") throw ParameterError("--group-size applies to --level node");
        emit(report_csv(report, ReportLevel::kGroup, a->group_size), a->out);
      } else {
        emit(report_csv(report, a->level == "layer" ? ReportLevel::kLayer : ReportLevel::kNode), a->out);
      }
    };
  });
}

// --- theory ----------------------------------------------------------------

void add_expect(CLI::App& app, std::function<void()>& run) {
  struct Args {
    std::string activation = "relu";
    double slope = 0.01;
    double sigma = 0.1;
    double k = 10.0;
    std::uint64_t samples = 1'000'000;
    bool importance = true;
    double window = 8.0;
    std::uint64_t seed = 42;
  };
  auto a = std::make_shared<Args>();
  auto* sub = app.add_subcommand("expect", "Closed-form expected M-Loss against a Monte-Carlo estimate");
  sub->add_option("--activation", a->activation, "relu|gelu|gelu-standard|leaky")
      ->check(CLI::IsMember({"relu", "gelu", "gelu-standard", "leaky"}));
  sub->add_option("--slope", a->slope, "LeakyReLU negative slope");
  sub->add_option("--sigma", a->sigma, "Fine-tune perturbation std");
  sub->add_option("--k", a->k, "Pre-activation half-range");
  sub->add_option("--mc-samples", a->samples, "Monte-Carlo samples");
  sub->add_flag("--importance,!--no-importance", a->importance,
                "Sample x only where the discrepancy lives (default on)");
  sub->add_option("--window", a->window, "Importance window multiplier");
  sub->add_option("--seed", a->seed, "Monte-Carlo seed");
  sub->callback([&run, a] {
    run = [a] {
      const auto t0 = std::chrono::steady_clock::now();
      const TheoryParams p{parse_activation(a->activation, a->slope), a->sigma, a->k};
      const MCSettings s{a->samples, a->seed, a->window, a->importance};
      const double analytic = expected_mloss_analytic(p);
      const MCResult mc = mc_expected_mloss(p, s);
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::printf("activation %s\n", activation_name(p.activation).c_str());
      std::printf("sigma %s\nk %s\nk_over_sigma %s\n", format_double(p.sigma).c_str(), format_double(p.k).c_str(),
                  format_double(p.ratio()).c_str());
      std::printf("analytic %.6e\n", analytic);
      std::printf("mc %.6e\n", mc.estimate);
      std::printf("std_error %.3e\n", mc.std_error);
      std::printf("rel_err %.6f\n", relative_error(mc.estimate, analytic));
      std::printf("importance %d half_width %s\n", mc.importance ? 1 : 0, format_double(mc.half_width).c_str());
      std::fprintf(stderr, "seconds %.3f\n", secs);
    };
  });
}

void add_sweep(CLI::App& app, std::function<void()>& run) {
  struct Args {
    std::string activation = "relu";
    double slope = 0.01;
    double sigma = 0.1;
    std::vector<double> ratios = {2, 50, 100, 200};
    std::uint64_t samples = 1'000'000;
    std::uint64_t seed = 42;
    double window = 8.0;
    std::string out;
  };
  auto a = std::make_shared<Args>();
  auto* sub = app.add_subcommand("sweep", "Analytic vs Monte-Carlo over k/sigma ratios (CSV)");
  sub->add_option("--activation", a->activation, "relu|gelu|gelu-standard|leaky")
      ->check(CLI::IsMember({"relu", "gelu", "gelu-standard", "leaky"}));
  sub->add_option("--slope", a->slope, "LeakyReLU negative slope");
  sub->add_option("--sigma", a->sigma, "Fine-tune perturbation std");
  sub->add_option("--ratios", a->ratios, "k/sigma values")->delimiter(',');
  sub->add_option("--mc-samples", a->samples, "Monte-Carlo samples per cell");
  sub->add_option("--window", a->window, "Importance window multiplier");
  sub->add_option("--seed", a->seed, "Monte-Carlo seed");
  sub->add_option("--out", a->out, "Output CSV (default stdout)");
  sub->callback([&run, a] {
    run = [a] {
      std::vector<std::pair<double, double>> grid;
      for (double r : a->ratios) grid.emplace_back(a->sigma, r * a->sigma);
      const Activation act = parse_activation(a->activation, a->slope);
      const auto rows = theory_sweep(grid, act, MCSettings{a->samples, a->seed, a->window, true});
      emit(sweep_csv(rows, activation_name(act)), a->out);
    };
  });
}

void add_lemma(CLI::App& app, std::function<void()>& run) {
  auto points = std::make_shared<std::size_t>(100000);
  auto* sub = app.add_subcommand("lemma", "Quadrature of the integral of Phi(u) Phi(-u)");
  sub->add_option("--points", *points, "Simpson subintervals");
  sub->callback([&run, points] {
    run = [points] {
      const double v = phi_product_integral(*points);
      const double exact = 1.0 / std::sqrt(std::numbers::pi);
      std::printf("integral %.10f\n", v);
      std::printf("inv_sqrt_pi %.10f\n", exact);
      std::printf("abs_err %.3e\n", std::abs(v - exact));
    };
  });
}

// --- evaluation ------------------------------------------------------------

void add_eval(CLI::App& app, std::function<void()>& run) {
  auto model = std::make_shared<std::string>();
  auto data = std::make_shared<std::string>();
  auto* sub = app.add_subcommand("eval", "Accuracy of one model on a labeled dataset");
  sub->add_option("--model", *model, "Model")->required();
  sub->add_option("--data", *data, "Labeled dataset")->required();
  sub->callback([&run, model, data] {
    run = [model, data] {
      std::printf("accuracy %s\n", format_double(evaluate(read_model(*model), read_dataset(*data))).c_str());
    };
  });
}

void add_ensemble_eval(CLI::App& app, std::function<void()>& run) {
  auto models = std::make_shared<std::vector<std::string>>();
  auto data = std::make_shared<std::string>();
  auto alphas = std::make_shared<std::vector<double>>();
  auto* sub = app.add_subcommand("ensemble-eval", "Accuracy of the output ensemble");
  sub->add_option("--model", *models, "Model (repeat or list)")->required();
  sub->add_option("--data", *data, "Labeled dataset")->required();
  sub->add_option("--alpha", *alphas, "Ensemble weights, one per model")->delimiter(',');
  sub->callback([&run, models, data, alphas] {
    run = [models, data, alphas] {
      const auto ms = read_models(*models);
      std::vector<double> w = *alphas;
      if (w.empty()) w.assign(ms.size(), 1.0 / static_cast<double>(ms.size()));
      std::printf("accuracy %s\n", format_double(ensemble_evaluate(ms, w, read_dataset(*data))).c_str());
    };
  });
}

// --- data and training -----------------------------------------------------

void add_gen(CLI::App& app, std::function<void()>& run) {
  auto s = std::make_shared<SyntheticTaskSpec>();
  auto dir = std::make_shared<std::string>();
  auto* sub = app.add_subcommand("gen", "Generate synthetic multi-task datasets");
  sub->add_option("--tasks", s->num_tasks, "Number of tasks");
  sub->add_option("--dim", s->input_dim, "Input dimension");
  sub->add_option("--classes", s->classes, "Classes per task");
  sub->add_option("--sep", s->separation, "Task separation");
  sub->add_option("--seed", s->seed, "Master seed");
  sub->add_option("--train", s->train_samples, "Training rows per task");
  sub->add_option("--val", s->val_samples, "Validation rows per task");
  sub->add_option("--test", s->test_samples, "Test rows per task");
  sub->add_option("--unlabeled", s->unlabeled_samples, "Pooled unlabeled rows");
  sub->add_option("--out-dir", *dir, "Output directory")->required();
  sub->callback([&run, s, dir] {
    run = [s, dir] {
      const SyntheticSuite suite = gen_synthetic(*s);
      std::filesystem::create_directories(*dir);
      for (std::size_t t = 0; t < suite.tasks.size(); ++t) {
        const std::string stem = *dir + "/task" + std::to_string(t + 1) + "_";
        write_dataset(suite.tasks[t].train, stem + "train.mtm");
        write_dataset(suite.tasks[t].val, stem + "val.mtm");
        write_dataset(suite.tasks[t].test, stem + "test.mtm");
      }
      write_dataset(suite.unlabeled, *dir + "/unlabeled.mtm");
    };
  });
}

void add_init(CLI::App& app, std::function<void()>& run) {
  struct Args {
    std::size_t input_dim = 0;
    std::vector<std::size_t> hidden;
    std::size_t output_dim = 0;
    std::string activation = "relu";
    double slope = 0.01;
    double gain = 1.0;
    std::uint64_t seed = 0;
    std::string out;
  };
  auto a = std::make_shared<Args>();
  auto* sub = app.add_subcommand("init", "Write a randomly initialized model");
  sub->add_option("--input-dim", a->input_dim, "Input dimension")->required();
  sub->add_option("--hidden", a->hidden, "Hidden widths, e.g. 32,32")->delimiter(',');
  sub->add_option("--output-dim", a->output_dim, "Output dimension")->required();
  sub->add_option("--activation", a->activation, "relu|gelu|gelu-standard|leaky|identity");
  sub->add_option("--slope", a->slope, "LeakyReLU negative slope");
  sub->add_option("--gain", a->gain, "Initialization gain");
  sub->add_option("--seed", a->seed, "Seed");
  sub->add_option("--out", a->out, "Output model")->required();
  sub->callback([&run, a] {
    run = [a] {
      const Architecture arch{a->input_dim, a->hidden, a->output_dim, parse_activation(a->activation, a->slope)};
      write_model(init_model(arch, a->seed, a->gain), a->out);
    };
  });
}

void add_train(CLI::App& app, std::function<void()>& run) {
  struct Args {
    std::string init;
    std::string data;
    TrainSpec spec;
    std::string out;
  };
  auto a = std::make_shared<Args>();
  auto* sub = app.add_subcommand("train", "SGD with softmax cross-entropy");
  sub->add_option("--init", a->init, "Initial model")->required();
  sub->add_option("--data", a->data, "Labeled dataset")->required();
  sub->add_option("--epochs", a->spec.epochs, "Epochs");
  sub->add_option("--lr", a->spec.learning_rate, "Learning rate");
  sub->add_option("--batch", a->spec.batch_size, "Minibatch size");
  sub->add_option("--weight-decay", a->spec.weight_decay, "L2 weight decay");
  sub->add_option("--seed", a->spec.seed, "Shuffle seed");
  sub->add_option("--out", a->out, "Output model")->required();
  sub->callback([&run, a] {
    run = [a] { write_model(train_mlp(read_model(a->init), read_dataset(a->data), a->spec), a->out); };
  });
}

void add_experiment(CLI::App& app, std::function<void()>& run) {
  auto config = std::make_shared<std::string>();
  auto dir = std::make_shared<std::string>();
  auto* sub = app.add_subcommand("experiment", "Compare all merging methods on synthetic tasks");
  sub->add_option("--config", *config, "key=value experiment config")->required();
  sub->add_option("--out-dir", *dir, "Output directory")->required();
  sub->callback([&run, config, dir] {
    run = [config, dir] {
      const ExperimentConfig cfg = parse_experiment_config(read_key_values(*config));
      const ExperimentReport r = run_experiment(cfg);
      write_experiment(r, *dir);
      for (const auto& m : r.methods) {
        std::printf("%-10s mean %.4f variance %.6f %s\n", m.method.c_str(), m.mean, m.variance,
                    m.hyperparameters.c_str());
      }
      std::printf("seconds %.2f\n", r.seconds);
    };
  });
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"M-Loss model merging toolkit"};
  app.require_subcommand(1);
  std::function<void()> run;
  add_merge(app, run);
  add_mloss(app, run);
  add_expect(app, run);
  add_sweep(app, run);
  add_lemma(app, run);
  add_eval(app, run);
  add_ensemble_eval(app, run);
  add_gen(app, run);
  add_init(app, run);
  add_train(app, run);
  add_experiment(app, run);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (run) run();
  } catch (const std::exception& e) {
    std::cerr << "error: " << one_line(e.what()) << '\n';
    return 1;
  }
  return 0;
}
