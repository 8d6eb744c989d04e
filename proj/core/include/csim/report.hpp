#pragma once

// Heatmap and metric artifacts: CSV with fixed headers and binary P5 PGM.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "csim/data.hpp"
#include "csim/model.hpp"
#include "csim/trainer.hpp"

namespace csim {

/// Per-map min-max scaling to [0, 1]; a constant map becomes all zeros.
std::vector<double> normalize_minmax(std::span<const double> values);

/// Header "y,x,value", one row per cell in row-major order.
void write_heatmap_csv(std::ostream& out, std::span<const double> values, std::size_t h, std::size_t w);
/// Binary greyscale; values are clamped to [0, 1] and every cell is drawn as
/// a `zoom` x `zoom` block.
std::vector<std::uint8_t> encode_pgm(std::span<const double> values, std::size_t h, std::size_t w,
                                     std::size_t zoom = 1);
void write_pgm(const std::filesystem::path& path, std::span<const double> values, std::size_t h,
               std::size_t w, std::size_t zoom = 8);

/// Writes `<stem>.csv` and `<stem>.pgm` for one normalized map.
void write_heatmap(const std::filesystem::path& dir, const std::string& stem, std::span<const double> values,
                   std::size_t h, std::size_t w);

/// K x K grid of key-side S weight maps: cell (i, j) uses a class-i image as
/// the key and a class-j image as the query.
struct HeatmapGrid {
  std::size_t classes = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t level = 0;
  std::vector<std::size_t> representatives;  // image index per class
  std::vector<std::vector<double>> cells;    // row-major K*K, each normalized
  std::string normalization = "per-map-minmax";
};

HeatmapGrid build_heatmap_grid(const Model& model, const Dataset& data, std::size_t level);
/// grid.csv ("row,col,y,x,value"), grid.pgm (tiled, 1-cell gutters) and
/// grid_meta.txt.
void write_heatmap_grid(const std::filesystem::path& dir, const HeatmapGrid& grid);

/// Softmaxed, then normalized, S and D maps of one key/query pair at one level.
struct PairHeatmaps {
  std::vector<double> s_key, s_query, d_key, d_query;
};
PairHeatmaps pair_heatmaps(const Model& model, std::span<const float> key_image,
                           std::span<const float> query_image, std::size_t level);

void write_metrics(std::ostream& out, const Metrics& metrics);
/// Header "true,pred,count".
void write_confusion_csv(std::ostream& out, const Metrics& metrics);

}  // namespace csim
