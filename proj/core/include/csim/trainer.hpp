#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "csim/data.hpp"
#include "csim/model.hpp"

namespace csim {

enum class Distill { None, Kl, L2 };
std::string_view to_string(Distill d);
Distill parse_distill(std::string_view text);

struct LossWeights {
  double lambda1 = 1.0;
  double lambda2 = 0.0;  // KL(cross || base), cross detached
  double lambda3 = 0.0;  // MSE(base logits, cross logits), cross detached
  void validate() const;
  Distill distill() const;
};

struct TrainConfig {
  ModelConfig model;
  LossWeights loss;
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double lr_decay = 0.98;  // per epoch
  std::size_t batch = 16;
  std::size_t epochs = 30;
  std::size_t patience = 10;
  /// 0 means one pass worth of samples over the training part of the split.
  std::size_t steps_per_epoch = 0;
  double val_fraction = 0.15;
  bool balance = true;
  bool augment = false;
  /// Recompute every interaction matrix in both orientations each step.
  bool audit = false;
  std::uint64_t seed = 1;

  void validate() const;
};

/// Key-value text, one `key = value` per line, '#' comments.
TrainConfig parse_train_config(const std::string& text);
TrainConfig load_train_config(const std::filesystem::path& path);
std::string format_train_config(const TrainConfig& config);
/// Applies one key-value assignment; throws ConfigError on unknown keys or
/// malformed values.
void set_config_value(TrainConfig& config, const std::string& key, const std::string& value);

struct LossBreakdown {
  Tensor total;
  std::vector<double> base;   // CE per supervised branch
  std::vector<double> cross;  // CE per supervised branch
  double distill = 0.0;       // summed unweighted distillation term
};

/// Per-branch logits stacked over the batch (b x K each) and labels per branch.
struct BatchOutputs {
  std::vector<Tensor> base_logits;
  std::vector<Tensor> cross_logits;  // empty for the baseline topology
  std::vector<std::vector<int>> labels;
};

/// Sum over supervised branches of CE(base) + l1 CE(cross) + l2 KL + l3 MSE.
LossBreakdown total_loss(const BatchOutputs& outputs, const LossWeights& weights,
                         std::size_t expected_branches);

struct StepRecord {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double lr = 0.0;
  double total = 0.0;
  std::vector<double> base;
  std::vector<double> cross;
  double distill = 0.0;
  std::array<double, kLevels> theta{};
  std::optional<double> val_accuracy;  // set on the last step of an epoch
  std::optional<double> val_loss;
};

struct TrainLog {
  std::vector<StepRecord> steps;
};

inline constexpr std::size_t kLogBranches = 4;
std::string train_log_header();
void write_train_log(const TrainLog& log, std::ostream& out);
void write_train_log(const TrainLog& log, const std::filesystem::path& path);
TrainLog read_train_log(const std::filesystem::path& path);
TrainLog parse_train_log(std::istream& in);

struct AuditSummary {
  std::size_t forwards = 0;
  double max_transpose_error = 0.0;
  double max_weight_sum_error = 0.0;
  /// Every audited forward built the expected per-level S and D counts.
  bool counts_ok = true;
  std::array<int, kLevels> last_s{};
  std::array<int, kLevels> last_d{};
  double max_abs_theta_grad = 0.0;
};

struct TrainResult {
  Model model;  // best validation checkpoint
  TrainLog log;
  std::size_t best_epoch = 0;
  double best_val_accuracy = 0.0;
  double best_val_loss = 0.0;
  std::size_t epochs_run = 0;
  bool diverged = false;
  std::string diagnostic;
  AuditSummary audit;
};

/// Deterministic train/validation split of a training set.
struct TrainValSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};
TrainValSplit split_train_val(const Dataset& data, double val_fraction, std::uint64_t seed);

/// Random shift within a padded field, small rotation and brightness jitter.
std::vector<float> augment_image(std::span<const float> pixels, std::size_t side, std::mt19937_64& rng);

TrainResult train(const TrainConfig& config, const Dataset& train_split);

struct Metrics {
  double accuracy = 0.0;
  double loss = 0.0;
  std::vector<double> per_class_accuracy;
  std::vector<std::vector<std::size_t>> confusion;  // rows: true class
  std::size_t count = 0;
};

/// Base-branch inference only.
Metrics evaluate(const Model& model, const Dataset& data);
Metrics evaluate(const Model& model, const Dataset& data, std::span<const std::size_t> indices);

struct GapRow {
  std::size_t epoch = 0;
  double base = 0.0;
  double cross = 0.0;
  double gap = 0.0;  // base - cross
};
std::vector<GapRow> compare_cls_gap(const TrainLog& log);
void write_gap_csv(const std::vector<GapRow>& rows, std::ostream& out);

}  // namespace csim
