#include "csim/trainer.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "csim/errors.hpp"
#include "csim/ops.hpp"

namespace csim {

LossBreakdown total_loss(const BatchOutputs& outputs, const LossWeights& weights,
                         std::size_t expected_branches) {
  const std::size_t c = outputs.base_logits.size();
  if (c != expected_branches || outputs.labels.size() != c) {
    throw ContractError("total_loss: expected " + std::to_string(expected_branches) +
                        " supervised branches, got " + std::to_string(c));
  }
  const bool has_cross = !outputs.cross_logits.empty();
  if (has_cross && outputs.cross_logits.size() != c) {
    throw ContractError("total_loss: base and cross branch counts differ");
  }
  weights.validate();
  LossBreakdown out;
  Tensor total;
  for (std::size_t i = 0; i < c; ++i) {
    Tensor base = cross_entropy(outputs.base_logits[i], outputs.labels[i]);
    out.base.push_back(base.item());
    Tensor branch = base;
    if (has_cross) {
      Tensor cross = cross_entropy(outputs.cross_logits[i], outputs.labels[i]);
      out.cross.push_back(cross.item());
      branch = add(branch, scale(cross, weights.lambda1));
      const Tensor teacher = outputs.cross_logits[i].detach();
      if (weights.lambda2 > 0.0) {
        Tensor kl = kl_divergence(outputs.base_logits[i], teacher);
        out.distill += kl.item();
        branch = add(branch, scale(kl, weights.lambda2));
      } else if (weights.lambda3 > 0.0) {
        Tensor l2 = mse_loss(outputs.base_logits[i], teacher);
        out.distill += l2.item();
        branch = add(branch, scale(l2, weights.lambda3));
      }
    }
    total = total.defined() ? add(total, branch) : branch;
  }
  out.total = total;
  return out;
}

TrainValSplit split_train_val(const Dataset& data, double val_fraction, std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0x5DEECE66DULL);
  TrainValSplit split;
  for (auto& members : data.by_class()) {
    std::shuffle(members.begin(), members.end(), rng);
    auto n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(members.size())));
    // keep at least two training images per class so pairs stay drawable
    n_val = std::min(n_val, members.size() >= 2 ? members.size() - 2 : 0);
    split.val.insert(split.val.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(n_val));
    split.train.insert(split.train.end(), members.begin() + static_cast<std::ptrdiff_t>(n_val), members.end());
  }
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.val.begin(), split.val.end());
  return split;
}

std::vector<float> augment_image(std::span<const float> pixels, std::size_t side, std::mt19937_64& rng) {
  constexpr int kPad = 2;
  constexpr double kMaxAngle = 10.0 * std::numbers::pi / 180.0;
  std::uniform_int_distribution<int> shift(-kPad, kPad);
  std::uniform_real_distribution<double> angle(-kMaxAngle, kMaxAngle);
  std::uniform_real_distribution<double> jitter(-0.05, 0.05);
  const int sx = shift(rng), sy = shift(rng);
  const double a = angle(rng), b = jitter(rng);
  const double ca = std::cos(a), sa = std::sin(a);
  const double mid = (static_cast<double>(side) - 1.0) / 2.0;
  const int n = static_cast<int>(side);
  std::vector<float> out(side * side);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      const double dx = x - mid, dy = y - mid;
      const int srcx = static_cast<int>(std::lround(ca * dx + sa * dy + mid)) + sx;
      const int srcy = static_cast<int>(std::lround(-sa * dx + ca * dy + mid)) + sy;
      double v = 0.5;  // padded field
      if (srcx >= 0 && srcx < n && srcy >= 0 && srcy < n) v = pixels[static_cast<std::size_t>(srcy * n + srcx)];
      out[static_cast<std::size_t>(y * n + x)] = static_cast<float>(std::clamp(v + b, 0.0, 1.0));
    }
  return out;
}

namespace {

Dataset subset(const Dataset& data, std::span<const std::size_t> indices) {
  Dataset d;
  d.height = data.height;
  d.width = data.width;
  d.classes = data.classes;
  d.confounds = data.confounds;
  const std::size_t px = data.height * data.width;
  d.pixels.reserve(indices.size() * px);
  for (std::size_t i : indices) {
    auto img = data.image(i);
    d.pixels.insert(d.pixels.end(), img.begin(), img.end());
    d.meta.push_back(data.meta[i]);
  }
  return d;
}

std::size_t supervised_branches(Topology t) {
  return t == Topology::TripletControl ? 2 : branch_count(t);
}

std::pair<int, int> expected_matrix_counts(const ModelConfig& m) {
  if (m.topology == Topology::Baseline || m.attention == AttentionKind::Sdpa) return {0, 0};
  const bool s = m.topology == Topology::Dcs || m.matrix_mode != sd::MatrixMode::D;
  const bool d = m.topology != Topology::Dcs && m.matrix_mode != sd::MatrixMode::S;
  switch (m.topology) {
    case Topology::Dcs: return {1, 0};
    case Topology::Qcs: return {s ? 2 : 0, d ? 2 : 0};
    case Topology::TripletControl: return {s ? 1 : 0, d ? 1 : 0};
    case Topology::Baseline: break;
  }
  return {0, 0};
}

bool is_theta(const std::string& name) {
  return name.size() > 6 && name.compare(name.size() - 6, 6, ".theta") == 0;
}

struct Adam {
  std::vector<std::vector<double>> m, v;
  std::size_t t = 0;

  explicit Adam(const ParameterStore& store) {
    for (const auto& e : store.entries()) {
      m.emplace_back(e.tensor.numel(), 0.0);
      v.emplace_back(e.tensor.numel(), 0.0);
    }
  }

  void step(ParameterStore& store, double lr, const TrainConfig& c) {
    ++t;
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(t));
    auto& entries = store.entries();
    for (std::size_t p = 0; p < entries.size(); ++p) {
      Tensor& w = entries[p].tensor;
      if (!w.has_grad()) continue;
      auto g = w.grad();
      auto val = w.mutable_values();
      for (std::size_t i = 0; i < val.size(); ++i) {
        m[p][i] = c.beta1 * m[p][i] + (1.0 - c.beta1) * g[i];
        v[p][i] = c.beta2 * v[p][i] + (1.0 - c.beta2) * g[i] * g[i];
        const double mh = m[p][i] / bc1, vh = v[p][i] / bc2;
        val[i] -= lr * mh / (std::sqrt(vh) + c.adam_eps);
      }
    }
  }
};

}  // namespace

TrainResult train(const TrainConfig& config, const Dataset& train_split) {
  config.validate();
  if (train_split.height != config.model.image_side() || train_split.width != config.model.image_side()) {
    throw ConfigError("dataset images are " + std::to_string(train_split.height) + "x" +
                      std::to_string(train_split.width) + ", model expects side " +
                      std::to_string(config.model.image_side()));
  }
  if (train_split.classes != config.model.classes) {
    throw ConfigError("dataset has " + std::to_string(train_split.classes) + " classes, model expects " +
                      std::to_string(config.model.classes));
  }
  const ModelConfig& mc = config.model;
  const Topology topo = mc.topology;
  const TrainValSplit split = split_train_val(train_split, config.val_fraction, config.seed);
  const Dataset data = subset(train_split, split.train);
  const Sampler sampler(data);
  const std::size_t side = mc.image_side();

  std::vector<Tensor> cached;
  if (!config.augment) {
    for (std::size_t i = 0; i < data.size(); ++i) cached.push_back(patchify(data.image(i), side, mc.patch));
  }

  Model model(mc, config.seed);
  Adam adam(model.parameters());
  std::mt19937_64 sample_rng(config.seed * 0x9E3779B97F4A7C15ULL + 1);
  std::mt19937_64 dropout_rng(config.seed * 0x9E3779B97F4A7C15ULL + 2);
  std::mt19937_64 augment_rng(config.seed * 0x9E3779B97F4A7C15ULL + 3);
  const bool use_dropout = mc.dropout > 0.0;

  auto input = [&](std::size_t i) {
    ImageInput in;
    in.label = data.meta[i].label;
    if (config.augment) {
      in.patches = patchify(augment_image(data.image(i), side, augment_rng), side, mc.patch);
    } else {
      in.patches = cached[i];
    }
    return in;
  };
  const auto classes = data.by_class();
  std::vector<std::size_t> present;
  for (std::size_t k = 0; k < classes.size(); ++k)
    if (!classes[k].empty()) present.push_back(k);
  auto draw_single = [&]() -> std::size_t {
    if (config.balance) {
      std::uniform_int_distribution<std::size_t> pk(0, present.size() - 1);
      const auto& pool = classes[present[pk(sample_rng)]];
      std::uniform_int_distribution<std::size_t> pi(0, pool.size() - 1);
      return pool[pi(sample_rng)];
    }
    std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
    return pick(sample_rng);
  };

  const std::size_t n_branches = branch_count(topo);
  const std::size_t n_supervised = supervised_branches(topo);
  const auto [want_s, want_d] = expected_matrix_counts(mc);
  const std::size_t steps =
      config.steps_per_epoch ? config.steps_per_epoch : std::max<std::size_t>(1, data.size() / config.batch);

  std::optional<Model> best;
  TrainResult result{model.clone(), {}, 0, -1.0, 0.0, 0, false, {}, {}};
  std::size_t since_best = 0;
  std::size_t global_step = 0;

  for (std::size_t epoch = 0; epoch < config.epochs && !result.diverged; ++epoch) {
    const double lr = config.lr * std::pow(config.lr_decay, static_cast<double>(epoch));
    for (std::size_t s = 0; s < steps; ++s, ++global_step) {
      Tape tape;
      TapeScope scope(tape);
      std::vector<std::vector<Tensor>> base(n_supervised), cross(n_supervised);
      BatchOutputs bo;
      bo.labels.assign(n_supervised, {});
      for (std::size_t b = 0; b < config.batch; ++b) {
        std::vector<std::size_t> idx;
        switch (topo) {
          case Topology::Baseline: idx = {draw_single()}; break;
          case Topology::Dcs: {
            const auto p = sampler.sample_pair(sample_rng);
            idx.assign(p.begin(), p.end());
            break;
          }
          case Topology::Qcs: {
            const auto q = sampler.sample_quadruplet(sample_rng, config.balance);
            idx.assign(q.begin(), q.end());
            break;
          }
          case Topology::TripletControl: {
            const auto t = sampler.sample_triplet(sample_rng, config.balance);
            idx.assign(t.begin(), t.end());
            break;
          }
        }
        std::vector<ImageInput> inputs;
        for (std::size_t i : idx) inputs.push_back(input(i));
        for (std::size_t br = 0; br < n_supervised; ++br) bo.labels[br].push_back(inputs[br].label);

        if (topo == Topology::Baseline) {
          base[0].push_back(model.forward_baseline(inputs[0]));
          continue;
        }
        ForwardOptions opts;
        opts.rng = use_dropout ? &dropout_rng : nullptr;
        opts.audit = config.audit;
        GraphOutput g = model.forward(std::span<const ImageInput>(inputs.data(), n_branches), opts);
        for (std::size_t br = 0; br < n_supervised; ++br) {
          base[br].push_back(g.base_logits[br]);
          cross[br].push_back(g.cross_logits[br]);
        }
        AuditSummary& a = result.audit;
        ++a.forwards;
        a.max_transpose_error = std::max(a.max_transpose_error, g.stats.max_transpose_error);
        a.max_weight_sum_error = std::max(a.max_weight_sum_error, g.stats.max_weight_sum_error);
        a.last_s = g.stats.s_matrices;
        a.last_d = g.stats.d_matrices;
        for (std::size_t lv = 0; lv < kLevels; ++lv) {
          if (g.stats.s_matrices[lv] != want_s || g.stats.d_matrices[lv] != want_d) a.counts_ok = false;
        }
      }
      for (std::size_t br = 0; br < n_supervised; ++br) {
        bo.base_logits.push_back(concat_rows(base[br]));
        if (topo != Topology::Baseline) bo.cross_logits.push_back(concat_rows(cross[br]));
      }
      LossBreakdown lb = total_loss(bo, config.loss, n_supervised);

      StepRecord rec;
      rec.epoch = epoch;
      rec.step = global_step;
      rec.lr = lr;
      rec.total = lb.total.item();
      rec.base = lb.base;
      rec.cross = lb.cross;
      rec.distill = lb.distill;
      if (!std::isfinite(rec.total)) {
        result.diverged = true;
        std::ostringstream msg;
        msg << "non-finite loss at epoch " << epoch << " step " << global_step << " (total=" << rec.total << ")";
        result.diagnostic = msg.str();
        result.log.steps.push_back(rec);
        break;
      }

      model.parameters().zero_grad();
      tape.backward(lb.total);
      for (const auto& e : model.parameters().entries()) {
        if (!is_theta(e.name) || !e.tensor.has_grad()) continue;
        result.audit.max_abs_theta_grad = std::max(result.audit.max_abs_theta_grad, std::abs(e.tensor.grad()[0]));
      }
      adam.step(model.parameters(), lr, config);
      if (model.has_cross_module()) {
        for (std::size_t lv = 0; lv < kLevels; ++lv) {
          rec.theta[lv] = model.parameters().get("cross.level" + std::to_string(lv) + ".theta").item();
        }
      }
      result.log.steps.push_back(rec);
    }
    if (result.diverged) break;

    const Metrics val = evaluate(model, train_split, split.val);
    result.log.steps.back().val_accuracy = val.accuracy;
    result.log.steps.back().val_loss = val.loss;
    result.epochs_run = epoch + 1;
    const bool better = val.accuracy > result.best_val_accuracy ||
                        (val.accuracy == result.best_val_accuracy && val.loss < result.best_val_loss);
    if (better) {
      result.best_val_accuracy = val.accuracy;
      result.best_val_loss = val.loss;
      result.best_epoch = epoch;
      best.emplace(model.clone());
      since_best = 0;
    } else if (++since_best >= config.patience) {
      break;
    }
  }
  if (best) result.model = std::move(*best);
  return result;
}

Metrics evaluate(const Model& model, const Dataset& data) {
  std::vector<std::size_t> all(data.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return evaluate(model, data, all);
}

Metrics evaluate(const Model& model, const Dataset& data, std::span<const std::size_t> indices) {
  const ModelConfig& mc = model.config();
  const std::size_t k = mc.classes;
  if (data.classes != k) throw ConfigError("dataset and model disagree on the class count");
  Metrics m;
  m.confusion.assign(k, std::vector<std::size_t>(k, 0));
  NoGradScope no_grad;
  double loss = 0.0;
  std::size_t correct = 0;
  for (std::size_t i : indices) {
    const Tensor logits = model.forward_inference(patchify(data.image(i), mc.image_side(), mc.patch));
    const int label = data.meta[i].label;
    const int labels[] = {label};
    loss += cross_entropy(logits, labels).item();
    const auto v = logits.values();
    const auto pred = static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
    ++m.confusion[static_cast<std::size_t>(label)][pred];
    if (pred == static_cast<std::size_t>(label)) ++correct;
  }
  m.count = indices.size();
  if (m.count > 0) {
    m.accuracy = static_cast<double>(correct) / static_cast<double>(m.count);
    m.loss = loss / static_cast<double>(m.count);
  }
  m.per_class_accuracy.assign(k, 0.0);
  for (std::size_t c = 0; c < k; ++c) {
    std::size_t row = 0;
    for (std::size_t x : m.confusion[c]) row += x;
    if (row > 0) m.per_class_accuracy[c] = static_cast<double>(m.confusion[c][c]) / static_cast<double>(row);
  }
  return m;
}

std::string train_log_header() {
  std::string h = "epoch,step,lr,total";
  for (std::size_t i = 0; i < kLogBranches; ++i) h += ",base" + std::to_string(i);
  for (std::size_t i = 0; i < kLogBranches; ++i) h += ",cross" + std::to_string(i);
  h += ",distill";
  for (std::size_t i = 0; i < kLevels; ++i) h += ",theta" + std::to_string(i);
  h += ",val_acc,val_loss";
  return h;
}

namespace {

std::string num(double v) {
  char buf[32];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

double parse_num(const std::string& s) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) throw IoError("bad number '" + s + "' in train log");
  return v;
}

}  // namespace

void write_train_log(const TrainLog& log, std::ostream& out) {
  out << train_log_header() << '\n';
  for (const auto& r : log.steps) {
    out << r.epoch << ',' << r.step << ',' << num(r.lr) << ',' << num(r.total);
    for (std::size_t i = 0; i < kLogBranches; ++i) out << ',' << (i < r.base.size() ? num(r.base[i]) : "");
    for (std::size_t i = 0; i < kLogBranches; ++i) out << ',' << (i < r.cross.size() ? num(r.cross[i]) : "");
    out << ',' << num(r.distill);
    for (double t : r.theta) out << ',' << num(t);
    out << ',' << (r.val_accuracy ? num(*r.val_accuracy) : "") << ',' << (r.val_loss ? num(*r.val_loss) : "")
        << '\n';
  }
}

void write_train_log(const TrainLog& log, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write train log " + path.string());
  write_train_log(log, out);
}

TrainLog parse_train_log(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != train_log_header()) throw IoError("train log has an unexpected header");
  TrainLog log;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::size_t start = 0;
    for (;;) {
      const auto comma = line.find(',', start);
      f.push_back(line.substr(start, comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    if (f.size() != 4 + 2 * kLogBranches + 1 + kLevels + 2) throw IoError("train log row has the wrong field count");
    StepRecord r;
    r.epoch = static_cast<std::size_t>(parse_num(f[0]));
    r.step = static_cast<std::size_t>(parse_num(f[1]));
    r.lr = parse_num(f[2]);
    r.total = parse_num(f[3]);
    std::size_t at = 4;
    for (std::size_t i = 0; i < kLogBranches; ++i, ++at)
      if (!f[at].empty()) r.base.push_back(parse_num(f[at]));
    for (std::size_t i = 0; i < kLogBranches; ++i, ++at)
      if (!f[at].empty()) r.cross.push_back(parse_num(f[at]));
    r.distill = parse_num(f[at++]);
    for (std::size_t i = 0; i < kLevels; ++i) r.theta[i] = parse_num(f[at++]);
    if (!f[at].empty()) r.val_accuracy = parse_num(f[at]);
    ++at;
    if (!f[at].empty()) r.val_loss = parse_num(f[at]);
    log.steps.push_back(std::move(r));
  }
  return log;
}

TrainLog read_train_log(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read train log " + path.string());
  return parse_train_log(in);
}

std::vector<GapRow> compare_cls_gap(const TrainLog& log) {
  std::vector<GapRow> rows;
  std::vector<std::size_t> counts;
  for (const auto& r : log.steps) {
    if (r.base.empty() || r.cross.size() != r.base.size()) continue;
    if (rows.empty() || rows.back().epoch != r.epoch) {
      rows.push_back({r.epoch, 0.0, 0.0, 0.0});
      counts.push_back(0);
    }
    double b = 0.0, c = 0.0;
    for (double x : r.base) b += x;
    for (double x : r.cross) c += x;
    rows.back().base += b / static_cast<double>(r.base.size());
    rows.back().cross += c / static_cast<double>(r.cross.size());
    ++counts.back();
  }
  for (std::size_t i = 0; i < rows.size(); ++i) {
    rows[i].base /= static_cast<double>(counts[i]);
    rows[i].cross /= static_cast<double>(counts[i]);
    rows[i].gap = rows[i].base - rows[i].cross;
  }
  return rows;
}

void write_gap_csv(const std::vector<GapRow>& rows, std::ostream& out) {
  out << "epoch,base_loss,cross_loss,gap\n";
  for (const auto& r : rows) out << r.epoch << ',' << num(r.base) << ',' << num(r.cross) << ',' << num(r.gap) << '\n';
}

}  // namespace csim
