#include "csim/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "csim/errors.hpp"

namespace csim {

void DatasetSpec::validate() const {
  auto in_unit = [](double r) { return r >= 0.0 && r <= 1.0; };
  if (!in_unit(rho_train)) throw ConfigError("rho_train must be in [0, 1]");
  if (!in_unit(rho_test)) throw ConfigError("rho_test must be in [0, 1]");
  if (classes < 2) throw ConfigError("need at least 2 classes");
  if (confounds < 2) throw ConfigError("need at least 2 confound ids");
  if (grid < 3) throw ConfigError("grid must be at least 3 so glyph regions do not overlap");
  if (patch < 2) throw ConfigError("patch must be at least 2");
  if (!(noise_sigma >= 0.0)) throw ConfigError("noise_sigma must be non-negative");
  if (!(imbalance >= 1.0)) throw ConfigError("imbalance must be >= 1");
  if (n_train == 0 || n_test == 0) throw ConfigError("split sizes must be positive");
}

std::span<const float> Dataset::image(std::size_t i) const {
  if (i >= size()) throw IndexError("image index out of range");
  return {pixels.data() + i * height * width, height * width};
}

std::vector<int> Dataset::labels() const {
  std::vector<int> out;
  out.reserve(meta.size());
  for (const auto& m : meta) out.push_back(m.label);
  return out;
}

std::vector<std::vector<std::size_t>> Dataset::by_class() const {
  std::vector<std::vector<std::size_t>> out(classes);
  for (std::size_t i = 0; i < meta.size(); ++i) out[static_cast<std::size_t>(meta[i].label)].push_back(i);
  return out;
}

std::vector<float> glyph(std::size_t id, bool confound, std::size_t patch) {
  // Fixed stream per (kind, id) so glyphs do not depend on the dataset seed.
  std::mt19937_64 rng(0x9E3779B97F4A7C15ULL ^ (id * 2 + (confound ? 1 : 0)) * 0xBF58476D1CE4E5B9ULL);
  std::vector<float> g(patch * patch);
  // Half the pixels on, so every glyph has the same mean brightness.
  std::vector<std::size_t> order(g.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  for (std::size_t i = 0; i < order.size() / 2; ++i) g[order[i]] = 1.0f;
  return g;
}

namespace {

Dataset generate_split(const DatasetSpec& spec, std::size_t n, double rho, std::mt19937_64& rng) {
  Dataset d;
  d.height = d.width = spec.side();
  d.classes = spec.classes;
  d.confounds = spec.confounds;
  d.pixels.resize(n * d.height * d.width);
  d.meta.resize(n);

  std::vector<double> class_weight(spec.classes);
  for (std::size_t k = 0; k < spec.classes; ++k) {
    class_weight[k] = std::pow(spec.imbalance, -static_cast<double>(k) / static_cast<double>(spec.classes - 1));
  }
  std::discrete_distribution<std::size_t> class_draw(class_weight.begin(), class_weight.end());
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, spec.noise_sigma);
  std::uniform_int_distribution<std::uint32_t> interior(1, static_cast<std::uint32_t>(spec.grid - 2));
  std::uniform_int_distribution<int> corner(0, 3);
  std::uniform_int_distribution<std::size_t> other_confound(0, spec.confounds - 2);

  const std::uint32_t last = static_cast<std::uint32_t>(spec.grid - 1);
  for (std::size_t i = 0; i < n; ++i) {
    SampleMeta& m = d.meta[i];
    const std::size_t label = spec.imbalance == 1.0 ? i % spec.classes : class_draw(rng);
    const std::size_t linked = label % spec.confounds;
    std::size_t conf = linked;
    // Off-link ids are uniform over the remaining M-1 values, so rho = 1/M
    // makes the nuisance independent of the label.
    if (unit(rng) >= rho) {
      conf = other_confound(rng);
      if (conf >= linked) ++conf;
    }
    m.label = static_cast<int>(label);
    m.confound = static_cast<int>(conf);
    m.dx = interior(rng);
    m.dy = interior(rng);
    const int c = corner(rng);
    m.cx = (c & 1) ? last : 0;
    m.cy = (c & 2) ? last : 0;

    float* img = d.pixels.data() + i * d.height * d.width;
    for (std::size_t p = 0; p < d.height * d.width; ++p) {
      img[p] = static_cast<float>(std::clamp(0.5 + noise(rng), 0.0, 1.0));
    }
    auto stamp = [&](const std::vector<float>& g, std::uint32_t gx, std::uint32_t gy) {
      for (std::size_t y = 0; y < spec.patch; ++y)
        for (std::size_t x = 0; x < spec.patch; ++x) {
          const std::size_t px = gx * spec.patch + x, py = gy * spec.patch + y;
          const double v = g[y * spec.patch + x] + noise(rng);
          img[py * d.width + px] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
    };
    stamp(glyph(label, false, spec.patch), m.dx, m.dy);
    stamp(glyph(conf, true, spec.patch), m.cx, m.cy);
  }
  return d;
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<std::uint8_t>(v >> (8 * b)));
}

std::uint32_t get_u32(std::span<const std::uint8_t> bytes, std::size_t at) {
  std::uint32_t v = 0;
  for (int b = 0; b < 4; ++b) v |= static_cast<std::uint32_t>(bytes[at + b]) << (8 * b);
  return v;
}

std::uint32_t checked_u32(std::size_t v, const char* what) {
  if (v > 0xFFFFFFFFu) throw ConfigError(std::string(what) + " does not fit in 32 bits");
  return static_cast<std::uint32_t>(v);
}

}  // namespace

DatasetSplits generate_dataset(const DatasetSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  DatasetSplits s;
  s.train = generate_split(spec, spec.n_train, spec.rho_train, rng);
  s.test = generate_split(spec, spec.n_test, spec.rho_test, rng);
  return s;
}

std::string manifest_text(const Dataset& data) {
  std::ostringstream out;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& m = data.meta[i];
    out << i << ',' << m.label << ',' << m.confound << ',' << m.dx << ',' << m.dy << ',' << m.cx
        << ',' << m.cy << '\n';
  }
  return out.str();
}

std::vector<std::uint8_t> encode_dataset(const Dataset& data) {
  std::vector<std::uint8_t> out{'C', 'S', 'I', 'M'};
  put_u32(out, kDatasetVersion);
  put_u32(out, checked_u32(data.size(), "image count"));
  put_u32(out, checked_u32(data.height, "height"));
  put_u32(out, checked_u32(data.width, "width"));
  put_u32(out, checked_u32(data.classes, "class count"));
  put_u32(out, checked_u32(data.confounds, "confound count"));
  out.reserve(out.size() + data.pixels.size() * 4);
  for (float f : data.pixels) put_u32(out, std::bit_cast<std::uint32_t>(f));
  const std::string manifest = manifest_text(data);
  out.insert(out.end(), manifest.begin(), manifest.end());
  return out;
}

Dataset decode_dataset(std::span<const std::uint8_t> bytes) {
  constexpr std::size_t header = 28;
  if (bytes.size() < header || std::memcmp(bytes.data(), "CSIM", 4) != 0) {
    throw IoError("not a CSIM dataset (bad magic)");
  }
  const std::uint32_t version = get_u32(bytes, 4);
  if (version != kDatasetVersion) {
    throw IoError("dataset version " + std::to_string(version) + " unsupported");
  }
  Dataset d;
  const std::size_t n = get_u32(bytes, 8);
  d.height = get_u32(bytes, 12);
  d.width = get_u32(bytes, 16);
  d.classes = get_u32(bytes, 20);
  d.confounds = get_u32(bytes, 24);
  const std::size_t count = n * d.height * d.width;
  if (bytes.size() < header + count * 4) throw IoError("dataset truncated in image block");
  d.pixels.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    d.pixels[i] = std::bit_cast<float>(get_u32(bytes, header + i * 4));
  }
  const std::size_t manifest_at = header + count * 4;
  std::istringstream lines(
      std::string(reinterpret_cast<const char*>(bytes.data()) + manifest_at, bytes.size() - manifest_at));
  std::string line;
  d.meta.resize(n);
  std::size_t seen = 0;
  while (std::getline(lines, line)) {
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::size_t index;
    SampleMeta m;
    char c1, c2, c3, c4, c5, c6;
    if (!(fields >> index >> c1 >> m.label >> c2 >> m.confound >> c3 >> m.dx >> c4 >> m.dy >> c5 >>
          m.cx >> c6 >> m.cy) ||
        index != seen || index >= n) {
      throw IoError("malformed manifest line " + std::to_string(seen) + ": '" + line + "'");
    }
    if (m.label < 0 || static_cast<std::size_t>(m.label) >= d.classes || m.confound < 0 ||
        static_cast<std::size_t>(m.confound) >= d.confounds) {
      throw IoError("manifest line " + std::to_string(seen) + " has an out-of-range id");
    }
    d.meta[index] = m;
    ++seen;
  }
  if (seen != n) throw IoError("manifest lists " + std::to_string(seen) + " of " + std::to_string(n) + " images");
  return d;
}

void write_dataset(const Dataset& data, const std::filesystem::path& path) {
  const auto bytes = encode_dataset(data);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write dataset " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing dataset " + path.string());
}

Dataset read_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read dataset " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_dataset(bytes);
}

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex_digest(std::uint64_t digest) {
  static const char* hex = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, digest >>= 4) s[static_cast<std::size_t>(i)] = hex[digest & 0xF];
  return s;
}

Sampler::Sampler(const Dataset& data) : data_(&data), by_class_(data.by_class()) {
  for (std::size_t k = 0; k < by_class_.size(); ++k) {
    if (by_class_[k].size() >= 2) {
      viable_.push_back(k);
      viable_images_.insert(viable_images_.end(), by_class_[k].begin(), by_class_[k].end());
    }
  }
  std::sort(viable_images_.begin(), viable_images_.end());
}

std::size_t Sampler::draw_from(const std::vector<std::size_t>& pool, std::mt19937_64& rng) const {
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
  return pool[pick(rng)];
}

std::size_t Sampler::other_in_class(std::size_t cls, std::size_t exclude, std::mt19937_64& rng) const {
  const auto& pool = by_class_[cls];
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 2);
  std::size_t j = pick(rng);
  const auto pos = static_cast<std::size_t>(std::find(pool.begin(), pool.end(), exclude) - pool.begin());
  if (j >= pos) ++j;
  return pool[j];
}

std::array<std::size_t, 2> Sampler::sample_pair(std::mt19937_64& rng) const {
  if (viable_.empty()) throw ConfigError("no class has two images to pair");
  const std::size_t a = draw_from(viable_images_, rng);
  const auto cls = static_cast<std::size_t>(data_->meta[a].label);
  return {a, other_in_class(cls, a, rng)};
}

std::array<std::size_t, 4> Sampler::sample_quadruplet(std::mt19937_64& rng, bool balance) const {
  if (viable_.size() < 2) throw ConfigError("quadruplets need two classes with at least two images each");
  std::size_t a = 0, n = 0;
  if (balance) {
    const std::size_t ka = draw_from(viable_, rng);
    std::uniform_int_distribution<std::size_t> pick(0, viable_.size() - 2);
    std::size_t j = pick(rng);
    const auto pos = static_cast<std::size_t>(std::find(viable_.begin(), viable_.end(), ka) - viable_.begin());
    if (j >= pos) ++j;
    a = draw_from(by_class_[ka], rng);
    n = draw_from(by_class_[viable_[j]], rng);
  } else {
    a = draw_from(viable_images_, rng);
    const int la = data_->meta[a].label;
    const std::size_t others = viable_images_.size() - by_class_[static_cast<std::size_t>(la)].size();
    std::uniform_int_distribution<std::size_t> pick(0, others - 1);
    std::size_t j = pick(rng);
    // j-th viable image outside the anchor's class
    for (std::size_t idx : viable_images_) {
      if (data_->meta[idx].label == la) continue;
      if (j-- == 0) {
        n = idx;
        break;
      }
    }
  }
  const auto ka = static_cast<std::size_t>(data_->meta[a].label);
  const auto kn = static_cast<std::size_t>(data_->meta[n].label);
  std::array<std::size_t, 4> q{a, other_in_class(ka, a, rng), n, other_in_class(kn, n, rng)};
  const int la = data_->meta[q[0]].label, lp = data_->meta[q[1]].label;
  const int ln = data_->meta[q[2]].label, ln2 = data_->meta[q[3]].label;
  if (la != lp || ln != ln2 || la == ln || q[0] == q[1] || q[2] == q[3]) {
    throw ContractError("sampler produced a quadruplet violating the label constraints");
  }
  return q;
}

std::array<std::size_t, 3> Sampler::sample_triplet(std::mt19937_64& rng, bool balance) const {
  const auto q = sample_quadruplet(rng, balance);
  return {q[0], q[1], q[2]};
}

}  // namespace csim
