#include <charconv>
#include <fstream>
#include <sstream>

#include "csim/errors.hpp"
#include "csim/trainer.hpp"

namespace csim {

std::string_view to_string(Distill d) {
  switch (d) {
    case Distill::None: return "none";
    case Distill::Kl: return "kl";
    case Distill::L2: return "l2";
  }
  return "?";
}

Distill parse_distill(std::string_view text) {
  if (text == "none") return Distill::None;
  if (text == "kl") return Distill::Kl;
  if (text == "l2" || text == "mse") return Distill::L2;
  throw ConfigError("unknown distill '" + std::string(text) + "' (expected none, kl or l2)");
}

void LossWeights::validate() const {
  if (lambda1 < 0.0 || lambda2 < 0.0 || lambda3 < 0.0) throw ConfigError("loss weights must be non-negative");
  if (lambda2 > 0.0 && lambda3 > 0.0) throw ConfigError("at most one of lambda2 and lambda3 may be nonzero");
}

Distill LossWeights::distill() const {
  if (lambda2 > 0.0) return Distill::Kl;
  if (lambda3 > 0.0) return Distill::L2;
  return Distill::None;
}

void TrainConfig::validate() const {
  model.validate();
  loss.validate();
  if (lr < 0.0) throw ConfigError("lr must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("Adam betas must be in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
  if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw ConfigError("lr_decay must be in (0, 1]");
  if (batch == 0) throw ConfigError("batch must be positive");
  if (epochs == 0) throw ConfigError("epochs must be positive");
  if (patience == 0) throw ConfigError("patience must be positive");
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ConfigError("val_fraction must be in (0, 1)");
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError("'" + key + "' expects a number, got '" + v + "'");
  }
  return out;
}

std::uint64_t to_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError("'" + key + "' expects a non-negative integer, got '" + v + "'");
  }
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("'" + key + "' expects true or false, got '" + v + "'");
}

}  // namespace

void set_config_value(TrainConfig& c, const std::string& key, const std::string& v) {
  ModelConfig& m = c.model;
  if (key == "topology") m.topology = parse_topology(v);
  else if (key == "attention") m.attention = parse_attention(v);
  else if (key == "matrix") m.matrix_mode = sd::parse_matrix_mode(v);
  else if (key == "residual") m.residual = parse_residual(v);
  else if (key == "gamma") m.gamma = to_double(key, v);
  else if (key == "dropout") m.dropout = to_double(key, v);
  else if (key == "frozen_neg") m.frozen_neg = to_bool(key, v);
  else if (key == "grid") m.grid = to_uint(key, v);
  else if (key == "patch") m.patch = to_uint(key, v);
  else if (key == "channels") m.channels = to_uint(key, v);
  else if (key == "qk_dim") m.qk_dim = to_uint(key, v);
  else if (key == "mlp_hidden") m.mlp_hidden = to_uint(key, v);
  else if (key == "classes") m.classes = to_uint(key, v);
  else if (key == "distill") {
    switch (parse_distill(v)) {
      case Distill::None: c.loss.lambda2 = c.loss.lambda3 = 0.0; break;
      case Distill::Kl: c.loss.lambda2 = 1.0; c.loss.lambda3 = 0.0; break;
      case Distill::L2: c.loss.lambda2 = 0.0; c.loss.lambda3 = 1.0; break;
    }
  }
  else if (key == "lambda1") c.loss.lambda1 = to_double(key, v);
  else if (key == "lambda2") c.loss.lambda2 = to_double(key, v);
  else if (key == "lambda3") c.loss.lambda3 = to_double(key, v);
  else if (key == "lr") c.lr = to_double(key, v);
  else if (key == "beta1") c.beta1 = to_double(key, v);
  else if (key == "beta2") c.beta2 = to_double(key, v);
  else if (key == "adam_eps") c.adam_eps = to_double(key, v);
  else if (key == "lr_decay") c.lr_decay = to_double(key, v);
  else if (key == "batch") c.batch = to_uint(key, v);
  else if (key == "epochs") c.epochs = to_uint(key, v);
  else if (key == "patience") c.patience = to_uint(key, v);
  else if (key == "steps_per_epoch") c.steps_per_epoch = to_uint(key, v);
  else if (key == "val_fraction") c.val_fraction = to_double(key, v);
  else if (key == "balance") c.balance = to_bool(key, v);
  else if (key == "augment") c.augment = to_bool(key, v);
  else if (key == "audit") c.audit = to_bool(key, v);
  else if (key == "seed") c.seed = to_uint(key, v);
  else throw ConfigError("unknown config key '" + key + "'");
}

TrainConfig parse_train_config(const std::string& text) {
  TrainConfig c;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value'");
    }
    try {
      set_config_value(c, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  c.validate();
  return c;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_train_config(buf.str());
}

std::string format_train_config(const TrainConfig& c) {
  std::ostringstream out;
  out.precision(17);
  const ModelConfig& m = c.model;
  out << "topology = " << to_string(m.topology) << '\n'
      << "attention = " << to_string(m.attention) << '\n'
      << "matrix = " << sd::to_string(m.matrix_mode) << '\n'
      << "residual = " << to_string(m.residual) << '\n'
      << "gamma = " << m.gamma << '\n'
      << "dropout = " << m.dropout << '\n'
      << "frozen_neg = " << (m.frozen_neg ? "true" : "false") << '\n'
      << "grid = " << m.grid << '\n'
      << "patch = " << m.patch << '\n'
      << "channels = " << m.channels << '\n'
      << "qk_dim = " << m.qk_dim << '\n'
      << "mlp_hidden = " << m.mlp_hidden << '\n'
      << "classes = " << m.classes << '\n'
      << "lambda1 = " << c.loss.lambda1 << '\n'
      << "lambda2 = " << c.loss.lambda2 << '\n'
      << "lambda3 = " << c.loss.lambda3 << '\n'
      << "lr = " << c.lr << '\n'
      << "beta1 = " << c.beta1 << '\n'
      << "beta2 = " << c.beta2 << '\n'
      << "adam_eps = " << c.adam_eps << '\n'
      << "lr_decay = " << c.lr_decay << '\n'
      << "batch = " << c.batch << '\n'
      << "epochs = " << c.epochs << '\n'
      << "patience = " << c.patience << '\n'
      << "steps_per_epoch = " << c.steps_per_epoch << '\n'
      << "val_fraction = " << c.val_fraction << '\n'
      << "balance = " << (c.balance ? "true" : "false") << '\n'
      << "augment = " << (c.augment ? "true" : "false") << '\n'
      << "audit = " << (c.audit ? "true" : "false") << '\n'
      << "seed = " << c.seed << '\n';
  return out.str();
}

}  // namespace csim
