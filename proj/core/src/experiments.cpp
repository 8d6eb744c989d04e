#include "csim/experiments.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <mutex>
#include <ostream>
#include <random>
#include <thread>

#include "csim/attention.hpp"
#include "csim/errors.hpp"
#include "csim/fusion.hpp"
#include "csim/ops.hpp"

namespace csim {

std::vector<ExperimentRow> component_rows() {
  return {
      {"c1-baseline", "single base branch", {{"topology", "baseline"}}},
      {"c2-csa", "dcs csa, no residual", {{"topology", "dcs"}, {"attention", "csa"}, {"residual", "none"}}},
      {"c3-sdpa-gap", "dcs sdpa + gap", {{"topology", "dcs"}, {"attention", "sdpa"}, {"residual", "gap"}}},
      {"c4-csa-gap", "dcs csa + gap", {{"topology", "dcs"}, {"attention", "csa"}, {"residual", "gap"}}},
      {"c5-csa-bp", "dcs csa + bp", {{"topology", "dcs"}, {"attention", "csa"}, {"residual", "bp"}}},
      {"c6-csa-vit", "dcs csa + vit", {{"topology", "dcs"}, {"attention", "csa"}, {"residual", "vit"}}},
      {"c7-csa-bp-kl",
       "dcs csa + bp + kl",
       {{"topology", "dcs"}, {"attention", "csa"}, {"residual", "bp"}, {"distill", "kl"}}},
  };
}

std::vector<ExperimentRow> matrix_rows() {
  return {
      {"m-s", "qcs, S only", {{"topology", "qcs"}, {"matrix", "s"}}},
      {"m-d", "qcs, D only", {{"topology", "qcs"}, {"matrix", "d"}}},
      {"m-sd", "qcs, fused SD", {{"topology", "qcs"}, {"matrix", "sd"}}},
  };
}

std::vector<ExperimentRow> confound_rows() {
  auto rows = matrix_rows();
  const auto comp = component_rows();
  rows.push_back(comp[0]);
  rows.push_back(comp[2]);
  rows.push_back(comp[3]);
  rows.push_back({"triplet", "triplet control", {{"topology", "triplet-control"}, {"matrix", "sd"}}});
  return rows;
}

std::vector<ExperimentRow> select_rows(std::span<const std::string> names) {
  std::vector<ExperimentRow> all = component_rows();
  for (auto& r : confound_rows())
    if (std::none_of(all.begin(), all.end(), [&](const ExperimentRow& a) { return a.id == r.id; })) all.push_back(r);
  std::vector<ExperimentRow> out;
  for (const auto& name : names) {
    if (name == "component") {
      auto rows = component_rows();
      out.insert(out.end(), rows.begin(), rows.end());
      continue;
    }
    if (name == "matrix") {
      auto rows = matrix_rows();
      out.insert(out.end(), rows.begin(), rows.end());
      continue;
    }
    if (name == "confound") {
      auto rows = confound_rows();
      out.insert(out.end(), rows.begin(), rows.end());
      continue;
    }
    auto it = std::find_if(all.begin(), all.end(), [&](const ExperimentRow& r) { return r.id == name; });
    if (it == all.end()) throw ConfigError("unknown experiment row '" + name + "'");
    out.push_back(*it);
  }
  return out;
}

TrainConfig apply_row(const TrainConfig& base, const ExperimentRow& row) {
  TrainConfig c = base;
  for (const auto& [k, v] : row.deltas) set_config_value(c, k, v);
  if (c.model.topology != Topology::TripletControl) c.model.frozen_neg = false;
  c.validate();
  return c;
}

std::string describe_deltas(const ExperimentRow& row) {
  std::string s;
  for (const auto& [k, v] : row.deltas) {
    if (!s.empty()) s += ';';
    s += k + '=' + v;
  }
  return s;
}

TrainConfig desk_train_config() {
  TrainConfig c;
  c.model.grid = 4;
  c.model.patch = 8;
  c.model.channels = 16;
  c.model.qk_dim = 16;
  c.model.mlp_hidden = 32;
  c.model.classes = 7;
  c.lr = 1e-3;
  c.batch = 8;
  c.epochs = 12;
  c.patience = 10;
  c.steps_per_epoch = 40;
  return c;
}

DatasetSpec desk_dataset_spec(std::uint64_t seed) {
  DatasetSpec s;
  s.grid = 4;
  s.patch = 8;
  s.classes = 7;
  s.confounds = 7;
  s.n_train = 560;
  s.n_test = 280;
  s.rho_train = 1.0;
  s.rho_test = 1.0 / 7.0;
  s.seed = seed;
  return s;
}

std::size_t ablation_threads(std::size_t jobs) {
  std::size_t cap = std::max<unsigned>(1, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("CSIM_THREADS"); env && *env) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (*end != '\0' || v < 1) throw ConfigError("CSIM_THREADS must be a positive integer");
    cap = static_cast<std::size_t>(v);
  }
  return std::max<std::size_t>(1, std::min(cap, jobs));
}

std::vector<RunResult> ablate(const TrainConfig& base, std::span<const ExperimentRow> rows,
                              const DatasetSplits& data, const AblationOptions& options) {
  struct Job {
    std::size_t row;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (auto s : options.seeds) jobs.push_back({r, s});
  std::vector<RunResult> results(jobs.size());
  std::atomic<std::size_t> next{0};
  std::mutex report_lock;

  auto worker = [&] {
    for (std::size_t j = next++; j < jobs.size(); j = next++) {
      const ExperimentRow& row = rows[jobs[j].row];
      RunResult& res = results[j];
      res.row = row.id;
      res.seed = jobs[j].seed;
      res.config = describe_deltas(row);
      const auto t0 = std::chrono::steady_clock::now();
      try {
        TrainConfig cfg = apply_row(base, row);
        cfg.seed = jobs[j].seed;
        TrainResult tr = train(cfg, data.train);
        res.best_epoch = tr.best_epoch;
        res.epochs_run = tr.epochs_run;
        res.val_accuracy = tr.best_val_accuracy;
        if (tr.diverged) {
          res.error = tr.diagnostic;
        } else {
          res.test_accuracy = evaluate(tr.model, data.test).accuracy;
          res.ok = true;
        }
      } catch (const std::exception& e) {
        res.error = e.what();
      }
      res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      if (options.on_result) {
        std::lock_guard lock(report_lock);
        options.on_result(res);
      }
    }
  };

  const std::size_t n = std::min(std::max<std::size_t>(1, options.threads), std::max<std::size_t>(1, jobs.size()));
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < n; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  return results;
}

std::vector<AblationSummary> summarize(std::span<const ExperimentRow> rows, std::span<const RunResult> results) {
  std::vector<AblationSummary> out;
  for (const auto& row : rows) {
    AblationSummary s;
    s.row = row.id;
    s.description = row.description;
    std::vector<double> test, val;
    for (const auto& r : results) {
      if (r.row != row.id) continue;
      ++s.runs;
      if (!r.ok) {
        ++s.failed;
        continue;
      }
      test.push_back(r.test_accuracy);
      val.push_back(r.val_accuracy);
    }
    if (!test.empty()) {
      const double n = static_cast<double>(test.size());
      for (double x : test) s.mean_test += x / n;
      for (double x : val) s.mean_val += x / n;
      double ss = 0.0;
      for (double x : test) ss += (x - s.mean_test) * (x - s.mean_test);
      s.sd_test = test.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
      std::sort(val.begin(), val.end());
      const std::size_t m = val.size();
      s.median_val = m % 2 ? val[m / 2] : 0.5 * (val[m / 2 - 1] + val[m / 2]);
    }
    out.push_back(s);
  }
  return out;
}

void write_ablation_runs(std::ostream& out, std::span<const RunResult> results) {
  out << "row,seed,status,val_acc,test_acc,best_epoch,epochs_run,seconds,config,error\n";
  for (const auto& r : results) {
    std::string err = r.error;
    std::replace(err.begin(), err.end(), ',', ';');
    std::replace(err.begin(), err.end(), '\n', ' ');
    out << r.row << ',' << r.seed << ',' << (r.ok ? "ok" : "failed") << ',' << r.val_accuracy << ','
        << r.test_accuracy << ',' << r.best_epoch << ',' << r.epochs_run << ',' << r.seconds << ',' << r.config
        << ',' << err << '\n';
  }
}

void write_ablation_summary(std::ostream& out, std::span<const AblationSummary> rows) {
  out << "row,description,runs,failed,mean_test_acc,sd_test_acc,mean_val_acc,median_val_acc\n";
  for (const auto& s : rows) {
    out << s.row << ',' << s.description << ',' << s.runs << ',' << s.failed << ',';
    if (s.runs > s.failed) {
      out << s.mean_test << ',' << s.sd_test << ',' << s.mean_val << ',' << s.median_val << '\n';
    } else {
      out << ",,,\n";  // gap: no successful run
    }
  }
}

double sign_test_p(std::size_t wins, std::size_t n) {
  double p = 0.0;
  for (std::size_t k = wins; k <= n; ++k) {
    p += std::exp(std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0) - n * std::log(2.0));
  }
  return std::min(1.0, p);
}

std::vector<std::string> GradcheckSuiteReport::failing() const {
  std::vector<std::string> out;
  for (const auto& c : cases)
    for (const auto& name : c.report.failing()) out.push_back(c.name + ":" + name);
  return out;
}

ModelConfig gradcheck_model_config() {
  ModelConfig m;
  m.grid = 4;
  m.patch = 2;
  m.channels = 8;
  m.qk_dim = 8;
  m.mlp_hidden = 16;
  m.classes = 3;
  m.topology = Topology::Qcs;
  m.matrix_mode = sd::MatrixMode::SD;
  m.residual = ResidualKind::VitAdd;
  return m;
}

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = n(rng);
  return Tensor(std::move(shape), std::move(v), true);
}

// tanh with a backward rule that is off by a factor of two.
Tensor faulty_tanh(const Tensor& a) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(a[i]);
  Tensor y(a.shape(), std::move(out));
  detail::count_op();
  Tensor in = a;
  detail::maybe_record("faulty_tanh", {a}, y, [in, y](std::span<const double> g) mutable {
    auto gs = in.grad_storage();
    for (std::size_t i = 0; i < g.size(); ++i) gs[i] += 0.5 * g[i] * (1.0 - y[i] * y[i]);
  });
  return y;
}

using CaseBuilder = std::function<std::pair<std::function<Tensor()>, std::vector<NamedTensor>>(std::mt19937_64&)>;

std::vector<std::pair<std::string, CaseBuilder>> primitive_cases() {
  std::vector<std::pair<std::string, CaseBuilder>> cases;
  auto unary = [&](const std::string& name, std::function<Tensor(const Tensor&)> op, Shape shape) {
    cases.emplace_back(name, [op, shape](std::mt19937_64& rng) {
      Tensor x = random_tensor(shape, rng);
      Tensor w = random_tensor(op(x).shape(), rng);
      w.set_requires_grad(false);
      std::function<Tensor()> f = [op, x, w] { return sum(mul(op(x), w)); };
      return std::make_pair(f, std::vector<NamedTensor>{{"x", x}});
    });
  };
  auto binary = [&](const std::string& name, std::function<Tensor(const Tensor&, const Tensor&)> op, Shape sa,
                    Shape sb) {
    cases.emplace_back(name, [op, sa, sb](std::mt19937_64& rng) {
      Tensor a = random_tensor(sa, rng);
      Tensor b = random_tensor(sb, rng);
      Tensor w = random_tensor(op(a, b).shape(), rng);
      w.set_requires_grad(false);
      std::function<Tensor()> f = [op, a, b, w] { return sum(mul(op(a, b), w)); };
      return std::make_pair(f, std::vector<NamedTensor>{{"a", a}, {"b", b}});
    });
  };

  binary("matmul", [](const Tensor& a, const Tensor& b) { return matmul(a, b); }, {3, 4}, {4, 2});
  unary("transpose", [](const Tensor& a) { return transpose(a); }, {3, 4});
  binary("add", [](const Tensor& a, const Tensor& b) { return add(a, b); }, {3, 3}, {3, 3});
  binary("sub", [](const Tensor& a, const Tensor& b) { return sub(a, b); }, {3, 3}, {3, 3});
  binary("mul", [](const Tensor& a, const Tensor& b) { return mul(a, b); }, {3, 3}, {3, 3});
  unary("scale", [](const Tensor& a) { return scale(a, -1.7); }, {2, 5});
  binary("add_scalar_tensor", [](const Tensor& a, const Tensor& s) { return add_scalar_tensor(a, s); }, {3, 3}, {1});
  binary("mul_scalar_tensor", [](const Tensor& a, const Tensor& s) { return mul_scalar_tensor(a, s); }, {3, 3}, {1});
  unary("tanh", [](const Tensor& a) { return tanh(a); }, {4, 4});
  unary("scalar_tanh", [](const Tensor& a) { return scalar_tanh(a); }, {1});
  unary("gelu", [](const Tensor& a) { return gelu(a); }, {4, 4});
  unary("relu", [](const Tensor& a) { return relu(a); }, {4, 4});
  binary("add_row_vector", [](const Tensor& m, const Tensor& v) { return add_row_vector(m, v); }, {4, 3}, {3});
  binary("row_scale", [](const Tensor& m, const Tensor& v) { return row_scale(m, v); }, {4, 3}, {4});
  unary("sum", [](const Tensor& a) { return sum(a); }, {3, 4});
  unary("mean", [](const Tensor& a) { return mean(a); }, {3, 4});
  unary("sum_rows", [](const Tensor& a) { return sum_rows(a); }, {5, 3});
  unary("mean_rows", [](const Tensor& a) { return mean_rows(a); }, {5, 3});
  unary("max_all", [](const Tensor& a) { return max_all(a); }, {4, 4});
  unary("min_all", [](const Tensor& a) { return min_all(a); }, {4, 4});
  binary("concat_rows", [](const Tensor& a, const Tensor& b) { const Tensor p[] = {a, b}; return concat_rows(p); },
         {2, 3}, {3, 3});
  unary("slice_rows", [](const Tensor& a) { return slice_rows(a, 1, 2); }, {4, 3});
  unary("softmax_vec", [](const Tensor& a) { return softmax_vec(a); }, {9});
  unary("softmax_rows", [](const Tensor& a) { return softmax_rows(a); }, {3, 5});
  unary("l2_normalize_rows", [](const Tensor& a) { return l2_normalize_rows(a); }, {4, 4});
  cases.emplace_back("layer_norm_rows", [](std::mt19937_64& rng) {
    Tensor x = random_tensor({3, 5}, rng), g = random_tensor({5}, rng), b = random_tensor({5}, rng);
    Tensor w = random_tensor({3, 5}, rng);
    w.set_requires_grad(false);
    std::function<Tensor()> f = [=] { return sum(mul(layer_norm_rows(x, g, b), w)); };
    return std::make_pair(f, std::vector<NamedTensor>{{"x", x}, {"gamma", g}, {"beta", b}});
  });
  binary("pairwise_euclidean", [](const Tensor& q, const Tensor& k) { return pairwise_euclidean(q, k); }, {5, 3},
         {5, 3});
  binary("bilinear_pool", [](const Tensor& a, const Tensor& b) { return bilinear_pool(a, b); }, {4, 3}, {4, 2});
  cases.emplace_back("cross_entropy", [](std::mt19937_64& rng) {
    Tensor x = random_tensor({4, 7}, rng);
    std::function<Tensor()> f = [x] {
      const int labels[] = {0, 3, 6, 2};
      return cross_entropy(x, labels);
    };
    return std::make_pair(f, std::vector<NamedTensor>{{"logits", x}});
  });
  cases.emplace_back("kl_divergence", [](std::mt19937_64& rng) {
    Tensor s = random_tensor({3, 7}, rng), t = random_tensor({3, 7}, rng);
    t.set_requires_grad(false);
    std::function<Tensor()> f = [s, t] { return kl_divergence(s, t); };
    return std::make_pair(f, std::vector<NamedTensor>{{"student", s}});
  });
  binary("mse_loss", [](const Tensor& a, const Tensor& b) { return mse_loss(a, b); }, {3, 4}, {3, 4});
  unary("aggregate_key_side", [](const Tensor& a) { return csa::aggregate_key_side(a); }, {5, 5});
  unary("aggregate_query_side", [](const Tensor& a) { return csa::aggregate_query_side(a); }, {5, 5});
  binary("apply_spatial_attention", [](const Tensor& r, const Tensor& v) { return csa::apply_spatial_attention(r, v); },
         {4}, {4, 3});
  cases.emplace_back("sdpa_cross_attention", [](std::mt19937_64& rng) {
    Tensor q = random_tensor({4, 3}, rng), k = random_tensor({4, 3}, rng), v = random_tensor({4, 2}, rng);
    Tensor w = random_tensor({4, 2}, rng);
    w.set_requires_grad(false);
    std::function<Tensor()> f = [=] { return sum(mul(csa::sdpa_cross_attention(q, k, v), w)); };
    return std::make_pair(f, std::vector<NamedTensor>{{"q", q}, {"k", k}, {"v", v}});
  });
  cases.emplace_back("csa_sd_module", [](std::mt19937_64& rng) {
    // Two levels of 4x4 maps with 3 channels, S and D pairings, fused and applied.
    std::vector<NamedTensor> params;
    std::vector<Tensor> qa, qb, qn, va;
    for (int lv = 0; lv < 2; ++lv) {
      qa.push_back(random_tensor({16, 3}, rng));
      qb.push_back(random_tensor({16, 3}, rng));
      qn.push_back(random_tensor({16, 3}, rng));
      va.push_back(random_tensor({16, 3}, rng));
      const std::string p = "level" + std::to_string(lv);
      params.push_back({p + ".q_anchor", qa.back()});
      params.push_back({p + ".q_pos", qb.back()});
      params.push_back({p + ".q_neg", qn.back()});
      params.push_back({p + ".v_anchor", va.back()});
    }
    sd::FusionParams fp = sd::FusionParams::make(1.0, 0.3);
    params.push_back({"theta", fp.theta});
    Tensor w = random_tensor({32, 3}, rng);
    w.set_requires_grad(false);
    std::function<Tensor()> f = [=] {
      std::vector<Tensor> outs;
      for (std::size_t lv = 0; lv < 2; ++lv) {
        Tensor s = csa::similarity_matrix(qb[lv], qa[lv]).data;
        Tensor d = sd::min_shift_distance(pairwise_euclidean(qn[lv], qa[lv]));
        Tensor raw = sd::fuse_sd(csa::aggregate_key_side(s), sd::aggregate_distance_key_side(d), fp);
        outs.push_back(csa::apply_spatial_attention(raw, va[lv]));
      }
      return sum(mul(concat_rows(outs), w));
    };
    return std::make_pair(f, params);
  });
  return cases;
}

std::array<ImageInput, 4> random_quad(const ModelConfig& m, std::mt19937_64& rng) {
  std::array<ImageInput, 4> quad;
  const int labels[] = {0, 0, 1, 1};
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  for (std::size_t b = 0; b < 4; ++b) {
    std::vector<double> px(m.positions() * m.patch * m.patch);
    for (auto& x : px) x = u(rng);
    quad[b] = {Tensor::matrix(m.positions(), m.patch * m.patch, std::move(px)), labels[b]};
  }
  return quad;
}

Tensor model_loss(const Model& model, const std::array<ImageInput, 4>& quad, const LossWeights& w) {
  GraphOutput g = model.forward_qcs(quad);
  BatchOutputs bo;
  for (std::size_t b = 0; b < 4; ++b) {
    bo.base_logits.push_back(g.base_logits[b]);
    bo.cross_logits.push_back(g.cross_logits[b]);
    bo.labels.push_back({quad[b].label});
  }
  return total_loss(bo, w, 4).total;
}

}  // namespace

GradcheckSuiteReport run_gradcheck_suite(const GradcheckSuiteOptions& options) {
  GradcheckSuiteReport report;
  std::mt19937_64 rng(options.seed);
  auto cases = primitive_cases();
  if (options.inject_fault) {
    cases.emplace_back("faulty_tanh", [](std::mt19937_64& r) {
      Tensor x = random_tensor({3, 3}, r);
      std::function<Tensor()> f = [x] { return sum(faulty_tanh(x)); };
      return std::make_pair(f, std::vector<NamedTensor>{{"fault.x", x}});
    });
  }
  for (const auto& [name, build] : cases) {
    for (std::size_t rep = 0; rep < std::max<std::size_t>(1, options.repeats); ++rep) {
      auto [f, params] = build(rng);
      GradcheckCase c{name, gradcheck(f, params, options.check)};
      report.pass = report.pass && c.report.pass;
      report.cases.push_back(std::move(c));
    }
  }

  // Full four-branch model, every parameter. Distillation stays off: its
  // detached teacher makes the analytic gradient differ from the numeric one
  // by construction.
  const ModelConfig mc = gradcheck_model_config();
  const Model model(mc, options.seed);
  const auto quad = random_quad(mc, rng);
  const LossWeights w;
  std::vector<NamedTensor> params(model.parameters().entries().begin(), model.parameters().entries().end());
  GradcheckCase full{"qcs_model", gradcheck([&] { return model_loss(model, quad, w); }, params, options.check)};
  report.pass = report.pass && full.report.pass;
  report.cases.push_back(std::move(full));

  // Mode S never reads theta, so its gradient must vanish.
  ModelConfig ms = mc;
  ms.matrix_mode = sd::MatrixMode::S;
  Model s_model(ms, options.seed);
  s_model.parameters().zero_grad();
  {
    Tape tape;
    TapeScope scope(tape);
    tape.backward(model_loss(s_model, quad, LossWeights{}));
  }
  for (const auto& e : s_model.parameters().entries()) {
    if (e.name.ends_with(".theta") && e.tensor.has_grad()) report.mode_s_theta_grad += std::abs(e.tensor.grad()[0]);
  }
  return report;
}

}  // namespace csim
