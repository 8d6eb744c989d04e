// csim: command-line front end for dataset generation, training, evaluation,
// heatmaps, ablations and gradient checks.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "csim/checkpoint.hpp"
#include "csim/data.hpp"
#include "csim/errors.hpp"
#include "csim/experiments.hpp"
#include "csim/report.hpp"
#include "csim/trainer.hpp"

namespace fs = std::filesystem;
using namespace csim;

namespace {

constexpr int kOk = 0;
constexpr int kRuntime = 1;
constexpr int kUsage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

fs::path dataset_file(const fs::path& p, const char* split) {
  if (fs::is_directory(p)) return p / (std::string(split) + ".csim");
  return p;
}

void ensure_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw IoError("cannot create directory " + p.string() + ": " + ec.message());
}

std::string file_digest(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return hex_digest(fnv1a64(bytes));
}

// ---- gen-data ----

struct GenArgs {
  DatasetSpec spec;
  std::optional<std::size_t> m;
  std::string out = "data";
};

int run_gen(GenArgs a) {
  a.spec.confounds = a.m.value_or(a.spec.classes);
  std::cout << "# gen-data\n"
            << "seed = " << a.spec.seed << "\nk = " << a.spec.classes << "\nm = " << a.spec.confounds
            << "\nn_train = " << a.spec.n_train << "\nn_test = " << a.spec.n_test << "\nrho_train = " << a.spec.rho_train
            << "\nrho_test = " << a.spec.rho_test << "\nnoise = " << a.spec.noise_sigma << "\ngrid = " << a.spec.grid
            << "\npatch = " << a.spec.patch << "\nimbalance = " << a.spec.imbalance << "\nout = " << a.out << '\n';
  const DatasetSplits s = generate_dataset(a.spec);
  ensure_dir(a.out);
  for (auto [name, data] : {std::pair{"train", &s.train}, std::pair{"test", &s.test}}) {
    const fs::path file = fs::path(a.out) / (std::string(name) + ".csim");
    write_dataset(*data, file);
    const std::string manifest = manifest_text(*data);
    const auto mdigest = fnv1a64(std::span(reinterpret_cast<const std::uint8_t*>(manifest.data()), manifest.size()));
    std::cout << name << ": " << file.string() << " images=" << data->size() << " file_digest=" << file_digest(file)
              << " manifest_digest=" << hex_digest(mdigest) << '\n';
  }
  return kOk;
}

// ---- train ----

struct TrainArgs {
  std::string data = "data";
  std::string config;
  std::string out = "run";
  std::vector<std::pair<std::string, std::string>> overrides;
  bool desk = false;
};

int run_train(const TrainArgs& a) {
  TrainConfig cfg = a.desk ? desk_train_config() : TrainConfig{};
  if (!a.config.empty()) cfg = load_train_config(a.config);
  for (const auto& [k, v] : a.overrides) set_config_value(cfg, k, v);
  cfg.validate();
  const fs::path train_file = dataset_file(a.data, "train");
  if (!fs::exists(train_file)) throw IoError("dataset not found: " + train_file.string());
  std::cout << "# train\n" << format_train_config(cfg) << "data = " << train_file.string() << "\nout = " << a.out
            << '\n';
  const Dataset train_split = read_dataset(train_file);
  TrainResult r = train(cfg, train_split);
  ensure_dir(a.out);
  const fs::path out(a.out);
  write_train_log(r.log, out / "train_log.csv");
  {
    std::ofstream c(out / "config.txt");
    c << format_train_config(cfg);
  }
  if (r.diverged) {
    std::cerr << "error: training diverged: " << r.diagnostic << '\n';
    return kRuntime;
  }
  save_checkpoint(r.model, out / "checkpoint.json");
  std::cout << "epochs_run = " << r.epochs_run << "\nbest_epoch = " << r.best_epoch
            << "\nbest_val_accuracy = " << r.best_val_accuracy << "\ncheckpoint = " << (out / "checkpoint.json").string()
            << "\nlog = " << (out / "train_log.csv").string() << '\n';
  if (const fs::path test_file = dataset_file(a.data, "test"); fs::is_directory(a.data) && fs::exists(test_file)) {
    std::cout << "test_accuracy = " << evaluate(r.model, read_dataset(test_file)).accuracy << '\n';
  }
  return kOk;
}

// ---- eval ----

struct EvalArgs {
  std::string checkpoint;
  std::string data = "data";
  std::string out;
};

int run_eval(const EvalArgs& a) {
  const fs::path file = dataset_file(a.data, "test");
  std::cout << "# eval\ncheckpoint = " << a.checkpoint << "\ndata = " << file.string() << '\n';
  const Model model = load_checkpoint(a.checkpoint);
  const Metrics m = evaluate(model, read_dataset(file));
  write_metrics(std::cout, m);
  if (!a.out.empty()) {
    ensure_dir(a.out);
    std::ofstream mf(fs::path(a.out) / "metrics.txt");
    write_metrics(mf, m);
    std::ofstream cf(fs::path(a.out) / "confusion.csv");
    write_confusion_csv(cf, m);
  }
  return kOk;
}

// ---- heatmap ----

struct HeatmapArgs {
  std::string checkpoint;
  std::string data = "data";
  std::vector<std::size_t> images;
  std::size_t level = 2;
  bool grid = false;
  std::string out = "heatmaps";
};

int run_heatmap(const HeatmapArgs& a) {
  if (a.images.size() < 2 && !a.grid) throw UsageError("heatmap needs at least two --images (or --grid)");
  const fs::path file = dataset_file(a.data, "test");
  std::cout << "# heatmap\ncheckpoint = " << a.checkpoint << "\ndata = " << file.string() << "\nlevel = " << a.level
            << "\nnormalization = per-map-minmax\nout = " << a.out << '\n';
  const Model model = load_checkpoint(a.checkpoint);
  if (!model.has_cross_module()) throw ConfigError("heatmaps need a checkpoint with a cross module");
  if (a.level >= kLevels) throw ConfigError("level must be 0, 1 or 2");
  const Dataset data = read_dataset(file);
  ensure_dir(a.out);
  const std::size_t g = model.config().grid;
  for (std::size_t i = 1; i < a.images.size(); ++i) {
    const std::size_t key = a.images[0], query = a.images[i];
    const PairHeatmaps h = pair_heatmaps(model, data.image(key), data.image(query), a.level);
    const std::string stem = "pair_" + std::to_string(key) + "_" + std::to_string(query);
    write_heatmap(a.out, stem + "_s_key", h.s_key, g, g);
    write_heatmap(a.out, stem + "_s_query", h.s_query, g, g);
    write_heatmap(a.out, stem + "_d_key", h.d_key, g, g);
    write_heatmap(a.out, stem + "_d_query", h.d_query, g, g);
    std::cout << "wrote " << stem << "_{s,d}_{key,query}.{csv,pgm}\n";
  }
  if (a.grid) {
    write_heatmap_grid(a.out, build_heatmap_grid(model, data, a.level));
    std::cout << "wrote grid.csv grid.pgm grid_meta.txt\n";
  }
  return kOk;
}

// ---- ablate ----

struct AblateArgs {
  std::string data = "data";
  std::string config;
  std::vector<std::string> rows{"component", "matrix"};
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::string out = "ablation";
  bool desk = false;
};

int run_ablate(const AblateArgs& a) {
  TrainConfig base = a.desk ? desk_train_config() : TrainConfig{};
  if (!a.config.empty()) base = load_train_config(a.config);
  const auto rows = select_rows(a.rows);
  DatasetSplits data;
  data.train = read_dataset(dataset_file(a.data, "train"));
  data.test = read_dataset(dataset_file(a.data, "test"));
  AblationOptions opts;
  opts.seeds = a.seeds;
  opts.threads = ablation_threads(rows.size() * a.seeds.size());
  opts.on_result = [](const RunResult& r) {
    std::cout << r.row << " seed=" << r.seed << ' ' << (r.ok ? "ok" : "failed") << " val=" << r.val_accuracy
              << " test=" << r.test_accuracy << " (" << r.seconds << "s)" << (r.ok ? "" : " " + r.error) << std::endl;
  };
  std::cout << "# ablate\n" << format_train_config(base) << "threads = " << opts.threads << "\nrows =";
  for (const auto& r : rows) std::cout << ' ' << r.id;
  std::cout << "\nseeds =";
  for (auto s : a.seeds) std::cout << ' ' << s;
  std::cout << '\n';
  const auto results = ablate(base, rows, data, opts);
  const auto summary = summarize(rows, results);
  ensure_dir(a.out);
  std::ofstream runs(fs::path(a.out) / "runs.csv");
  write_ablation_runs(runs, results);
  std::ofstream sum(fs::path(a.out) / "summary.csv");
  write_ablation_summary(sum, summary);
  write_ablation_summary(std::cout, summary);
  return kOk;
}

// ---- gradcheck ----

int run_gradcheck(const GradcheckSuiteOptions& opts) {
  std::cout << "# gradcheck\nseed = " << opts.seed << "\nrepeats = " << opts.repeats << "\nstep = " << opts.check.step
            << "\ntolerance = " << opts.check.tolerance << "\ninject_fault = " << (opts.inject_fault ? "true" : "false")
            << '\n';
  const auto report = run_gradcheck_suite(opts);
  for (const auto& c : report.cases) {
    std::cout << (c.report.pass ? "PASS " : "FAIL ") << c.name << " max_rel_err=" << c.report.max_rel_error << '\n';
  }
  std::cout << "mode_s_theta_grad = " << report.mode_s_theta_grad << '\n';
  if (!report.pass) {
    std::cerr << "gradcheck failed for:";
    for (const auto& f : report.failing()) std::cerr << ' ' << f;
    std::cerr << '\n';
    return kRuntime;
  }
  std::cout << "all PASS\n";
  return kOk;
}

// ---- compare-gap ----

int run_gap(const std::string& log, const std::string& out) {
  std::cout << "# compare-gap\nlog = " << log << "\nout = " << (out.empty() ? "-" : out) << '\n';
  const auto rows = compare_cls_gap(read_train_log(log));
  if (out.empty()) {
    write_gap_csv(rows, std::cout);
  } else {
    std::ofstream f(out);
    if (!f) throw IoError("cannot write " + out);
    write_gap_csv(rows, f);
  }
  return kOk;
}

void add_override(CLI::App* cmd, std::vector<std::pair<std::string, std::string>>& overrides, const std::string& flag,
                  const std::string& key, const std::string& help) {
  cmd->add_option_function<std::string>(flag, [&overrides, key](const std::string& v) { overrides.emplace_back(key, v); },
                                        help);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-similarity attention training toolkit"};
  app.require_subcommand(1);
  std::function<int()> action;

  GenArgs gen;
  auto* g = app.add_subcommand("gen-data", "Generate the synthetic confound dataset");
  g->add_option("--seed", gen.spec.seed, "Generator seed");
  g->add_option("--k", gen.spec.classes, "Number of classes");
  g->add_option("--m", gen.m, "Number of confound ids (default: k)");
  g->add_option("--n-train", gen.spec.n_train, "Training images");
  g->add_option("--n-test", gen.spec.n_test, "Test images");
  g->add_option("--rho-train", gen.spec.rho_train, "Label-confound link probability, train");
  g->add_option("--rho-test", gen.spec.rho_test, "Label-confound link probability, test");
  g->add_option("--noise", gen.spec.noise_sigma, "Background noise sigma");
  g->add_option("--grid", gen.spec.grid, "Cells per side");
  g->add_option("--patch", gen.spec.patch, "Pixels per cell side");
  g->add_option("--imbalance", gen.spec.imbalance, "Most/least frequent class ratio");
  g->add_option("--out", gen.out, "Output directory");
  g->callback([&] { action = [&] { return run_gen(gen); }; });

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a model");
  t->add_option("--data", tr.data, "Dataset directory or train file");
  t->add_option("--config", tr.config, "Key-value config file");
  t->add_option("--out", tr.out, "Output directory");
  t->add_flag("--desk", tr.desk, "Start from the small desk configuration");
  add_override(t, tr.overrides, "--topology", "topology", "baseline|dcs|qcs|triplet-control");
  add_override(t, tr.overrides, "--matrix", "matrix", "s|d|sd");
  add_override(t, tr.overrides, "--residual", "residual", "none|gap|bp|vit");
  add_override(t, tr.overrides, "--distill", "distill", "none|kl|l2");
  add_override(t, tr.overrides, "--attention", "attention", "csa|sdpa");
  add_override(t, tr.overrides, "--gamma", "gamma", "Fusion gate gamma");
  add_override(t, tr.overrides, "--dropout", "dropout", "Cross block dropout");
  add_override(t, tr.overrides, "--epochs", "epochs", "Epochs");
  add_override(t, tr.overrides, "--batch", "batch", "Batch size");
  add_override(t, tr.overrides, "--lr", "lr", "Learning rate");
  add_override(t, tr.overrides, "--seed", "seed", "Seed");
  add_override(t, tr.overrides, "--steps-per-epoch", "steps_per_epoch", "Steps per epoch (0: one pass)");
  add_override(t, tr.overrides, "--frozen-neg", "frozen_neg", "Triplet control: freeze the neg branch");
  add_override(t, tr.overrides, "--augment", "augment", "Data augmentation");
  t->add_option_function<std::vector<std::string>>(
      "--set",
      [&tr](const std::vector<std::string>& kvs) {
        for (const auto& kv : kvs) {
          const auto eq = kv.find('=');
          if (eq == std::string::npos) throw CLI::ValidationError("--set", "expects key=value");
          tr.overrides.emplace_back(kv.substr(0, eq), kv.substr(eq + 1));
        }
      },
      "Any config key as key=value");
  t->callback([&] { action = [&] { return run_train(tr); }; });

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint with the single base branch");
  e->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")->required();
  e->add_option("--data", ev.data, "Dataset directory or file");
  e->add_option("--out", ev.out, "Directory for metrics.txt and confusion.csv");
  e->callback([&] { action = [&] { return run_eval(ev); }; });

  HeatmapArgs hm;
  auto* h = app.add_subcommand("heatmap", "Export S and D heatmaps");
  h->add_option("--checkpoint", hm.checkpoint, "Checkpoint file")->required();
  h->add_option("--data", hm.data, "Dataset directory or file");
  h->add_option("--images", hm.images, "Image indices; the first is the key of every pair");
  h->add_option("--level", hm.level, "Feature level 0-2");
  h->add_flag("--grid", hm.grid, "Also emit the K x K class grid");
  h->add_option("--out", hm.out, "Output directory");
  h->callback([&] { action = [&] { return run_heatmap(hm); }; });

  AblateArgs ab;
  auto* a = app.add_subcommand("ablate", "Run an experiment matrix over seeds");
  a->add_option("--data", ab.data, "Dataset directory");
  a->add_option("--config", ab.config, "Base key-value config");
  a->add_option("--rows", ab.rows, "Row ids or component|matrix|confound");
  a->add_option("--seeds", ab.seeds, "Seeds");
  a->add_option("--out", ab.out, "Output directory");
  a->add_flag("--desk", ab.desk, "Use the small desk configuration as the base");
  a->callback([&] { action = [&] { return run_ablate(ab); }; });

  GradcheckSuiteOptions gc;
  auto* c = app.add_subcommand("gradcheck", "Finite-difference check of every primitive and the full model");
  c->add_option("--seed", gc.seed, "Seed");
  c->add_option("--repeats", gc.repeats, "Random instances per primitive");
  c->add_flag("--inject-fault", gc.inject_fault, "Include a primitive with a broken backward rule");
  c->callback([&] { action = [&] { return run_gradcheck(gc); }; });

  std::string gap_log, gap_out;
  auto* cg = app.add_subcommand("compare-gap", "Per-epoch base minus cross loss from a train log");
  cg->add_option("--log", gap_log, "train_log.csv")->required();
  cg->add_option("--out", gap_out, "Output CSV (default stdout)");
  cg->callback([&] { action = [&] { return run_gap(gap_log, gap_out); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& s) {
    return app.exit(s);
  } catch (const CLI::ParseError& err) {
    app.exit(err);
    return kUsage;
  }
  try {
    return action();
  } catch (const UsageError& err) {
    std::cerr << "usage error: " << err.what() << '\n';
    return kUsage;
  } catch (const ConfigError& err) {
    std::cerr << "config error: " << err.what() << '\n';
    return kUsage;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kRuntime;
  }
}
