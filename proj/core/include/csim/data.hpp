#pragma once

// Synthetic confound dataset. Each image holds a class glyph in an interior
// grid cell and a nuisance glyph in one of the four corner cells, on a noisy
// grey field. The nuisance id follows the label with probability rho.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace csim {

inline constexpr std::uint32_t kDatasetVersion = 1;

struct DatasetSpec {
  std::size_t n_train = 700;
  std::size_t n_test = 350;
  std::size_t classes = 7;     // K
  std::size_t confounds = 7;   // M
  double rho_train = 1.0;
  double rho_test = 1.0 / 7.0;
  double noise_sigma = 0.1;
  std::size_t grid = 7;
  std::size_t patch = 8;
  /// Ratio between the most and least frequent class; 1 gives exact balance.
  double imbalance = 1.0;
  std::uint64_t seed = 1;

  std::size_t side() const { return grid * patch; }
  void validate() const;
};

struct SampleMeta {
  int label = 0;
  int confound = 0;
  std::uint32_t dx = 0, dy = 0;  // class glyph cell
  std::uint32_t cx = 0, cy = 0;  // nuisance glyph cell
};

struct Dataset {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t classes = 0;
  std::size_t confounds = 0;
  std::vector<float> pixels;  // n * height * width, row-major per image
  std::vector<SampleMeta> meta;

  std::size_t size() const { return meta.size(); }
  std::span<const float> image(std::size_t i) const;
  std::vector<int> labels() const;
  /// Images indexed by class.
  std::vector<std::vector<std::size_t>> by_class() const;
};

struct DatasetSplits {
  Dataset train;
  Dataset test;
};

/// Deterministic binary glyph for a class (`confound == false`) or a
/// nuisance id; patch x patch values in {0, 1}.
std::vector<float> glyph(std::size_t id, bool confound, std::size_t patch);

DatasetSplits generate_dataset(const DatasetSpec& spec);

/// Bit-exact container: "CSIM", version, n, H, W, K, M as u32 LE, the images
/// as f32 LE, then one manifest line per image.
std::vector<std::uint8_t> encode_dataset(const Dataset& data);
Dataset decode_dataset(std::span<const std::uint8_t> bytes);
std::string manifest_text(const Dataset& data);

void write_dataset(const Dataset& data, const std::filesystem::path& path);
Dataset read_dataset(const std::filesystem::path& path);

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes);
std::string hex_digest(std::uint64_t digest);

/// Pair and quadruplet draws that honour the branch label constraints.
class Sampler {
 public:
  explicit Sampler(const Dataset& data);

  /// Same-class distinct pair; classes with fewer than two images are never
  /// drawn. Throws ConfigError if no class has two images.
  std::array<std::size_t, 2> sample_pair(std::mt19937_64& rng) const;
  /// (anchor, pos, neg, neg2). With `balance`, the anchor class is uniform
  /// over viable classes and the negative class uniform over the rest;
  /// otherwise both follow image frequency.
  std::array<std::size_t, 4> sample_quadruplet(std::mt19937_64& rng, bool balance) const;
  /// (anchor, pos, neg) for the triplet control.
  std::array<std::size_t, 3> sample_triplet(std::mt19937_64& rng, bool balance) const;
  std::size_t viable_classes() const { return viable_.size(); }

 private:
  std::size_t draw_from(const std::vector<std::size_t>& pool, std::mt19937_64& rng) const;
  std::size_t other_in_class(std::size_t cls, std::size_t exclude, std::mt19937_64& rng) const;

  const Dataset* data_;
  std::vector<std::vector<std::size_t>> by_class_;
  std::vector<std::size_t> viable_;         // classes with >= 2 images
  std::vector<std::size_t> viable_images_;  // images of viable classes
};

}  // namespace csim
