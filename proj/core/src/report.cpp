#include "csim/report.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <ostream>

#include "csim/errors.hpp"
#include "csim/ops.hpp"

namespace csim {

namespace {

std::string num(double v) {
  char buf[32];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

std::vector<double> softmax_of(const std::vector<double>& raw) {
  const Tensor w = softmax_vec(Tensor::vector(raw));
  return {w.values().begin(), w.values().end()};
}

void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

std::vector<double> normalize_minmax(std::span<const double> values) {
  std::vector<double> out(values.begin(), values.end());
  if (out.empty()) return out;
  const auto [lo, hi] = std::minmax_element(out.begin(), out.end());
  const double a = *lo, span = *hi - *lo;
  for (auto& v : out) v = span > 0.0 ? (v - a) / span : 0.0;
  return out;
}

void write_heatmap_csv(std::ostream& out, std::span<const double> values, std::size_t h, std::size_t w) {
  if (values.size() != h * w) throw DimensionError("heatmap size does not match h x w");
  out << "y,x,value\n";
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) out << y << ',' << x << ',' << num(values[y * w + x]) << '\n';
}

std::vector<std::uint8_t> encode_pgm(std::span<const double> values, std::size_t h, std::size_t w,
                                     std::size_t zoom) {
  if (values.size() != h * w) throw DimensionError("heatmap size does not match h x w");
  if (zoom == 0) throw ConfigError("pgm zoom must be positive");
  const std::string header = "P5\n" + std::to_string(w * zoom) + " " + std::to_string(h * zoom) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  for (std::size_t y = 0; y < h * zoom; ++y)
    for (std::size_t x = 0; x < w * zoom; ++x) {
      const double v = std::clamp(values[(y / zoom) * w + x / zoom], 0.0, 1.0);
      out.push_back(static_cast<std::uint8_t>(std::lround(v * 255.0)));
    }
  return out;
}

void write_pgm(const std::filesystem::path& path, std::span<const double> values, std::size_t h,
               std::size_t w, std::size_t zoom) {
  write_bytes(path, encode_pgm(values, h, w, zoom));
}

void write_heatmap(const std::filesystem::path& dir, const std::string& stem, std::span<const double> values,
                   std::size_t h, std::size_t w) {
  std::ofstream csv(dir / (stem + ".csv"));
  if (!csv) throw IoError("cannot write " + (dir / (stem + ".csv")).string());
  write_heatmap_csv(csv, values, h, w);
  write_pgm(dir / (stem + ".pgm"), values, h, w);
}

PairHeatmaps pair_heatmaps(const Model& model, std::span<const float> key_image,
                           std::span<const float> query_image, std::size_t level) {
  const ModelConfig& mc = model.config();
  const PairSignals sig = model.pair_signals(patchify(key_image, mc.image_side(), mc.patch),
                                             patchify(query_image, mc.image_side(), mc.patch), level);
  PairHeatmaps h;
  h.s_key = normalize_minmax(softmax_of(sig.s_key));
  h.s_query = normalize_minmax(softmax_of(sig.s_query));
  h.d_key = normalize_minmax(softmax_of(sig.d_key));
  h.d_query = normalize_minmax(softmax_of(sig.d_query));
  return h;
}

HeatmapGrid build_heatmap_grid(const Model& model, const Dataset& data, std::size_t level) {
  const ModelConfig& mc = model.config();
  HeatmapGrid g;
  g.classes = mc.classes;
  g.height = g.width = mc.grid;
  g.level = level;
  const auto members = data.by_class();
  for (std::size_t k = 0; k < g.classes; ++k) {
    if (k >= members.size() || members[k].empty()) {
      throw ConfigError("heatmap grid needs at least one image of class " + std::to_string(k));
    }
    g.representatives.push_back(members[k].front());
  }
  for (std::size_t i = 0; i < g.classes; ++i)
    for (std::size_t j = 0; j < g.classes; ++j) {
      const auto sig = model.pair_signals(
          patchify(data.image(g.representatives[i]), mc.image_side(), mc.patch),
          patchify(data.image(g.representatives[j]), mc.image_side(), mc.patch), level);
      g.cells.push_back(normalize_minmax(sig.s_key_weights));
    }
  return g;
}

void write_heatmap_grid(const std::filesystem::path& dir, const HeatmapGrid& g) {
  std::ofstream csv(dir / "grid.csv");
  if (!csv) throw IoError("cannot write " + (dir / "grid.csv").string());
  csv << "row,col,y,x,value\n";
  for (std::size_t i = 0; i < g.classes; ++i)
    for (std::size_t j = 0; j < g.classes; ++j) {
      const auto& cell = g.cells[i * g.classes + j];
      for (std::size_t y = 0; y < g.height; ++y)
        for (std::size_t x = 0; x < g.width; ++x)
          csv << i << ',' << j << ',' << y << ',' << x << ',' << num(cell[y * g.width + x]) << '\n';
    }

  // Tiles separated by one-cell white gutters.
  const std::size_t th = g.height + 1, tw = g.width + 1;
  const std::size_t H = g.classes * th - 1, W = g.classes * tw - 1;
  std::vector<double> canvas(H * W, 1.0);
  for (std::size_t i = 0; i < g.classes; ++i)
    for (std::size_t j = 0; j < g.classes; ++j)
      for (std::size_t y = 0; y < g.height; ++y)
        for (std::size_t x = 0; x < g.width; ++x)
          canvas[(i * th + y) * W + j * tw + x] = g.cells[i * g.classes + j][y * g.width + x];
  write_pgm(dir / "grid.pgm", canvas, H, W, 8);

  std::ofstream meta(dir / "grid_meta.txt");
  meta << "classes = " << g.classes << "\nheight = " << g.height << "\nwidth = " << g.width
       << "\nlevel = " << g.level << "\nnormalization = " << g.normalization << "\nrepresentatives =";
  for (auto r : g.representatives) meta << ' ' << r;
  meta << "\nrows = key class\ncols = query class\n";
}

void write_metrics(std::ostream& out, const Metrics& m) {
  out << "accuracy = " << num(m.accuracy) << "\nloss = " << num(m.loss) << "\ncount = " << m.count << '\n';
  for (std::size_t k = 0; k < m.per_class_accuracy.size(); ++k) {
    out << "class_" << k << "_accuracy = " << num(m.per_class_accuracy[k]) << '\n';
  }
}

void write_confusion_csv(std::ostream& out, const Metrics& m) {
  out << "true,pred,count\n";
  for (std::size_t t = 0; t < m.confusion.size(); ++t)
    for (std::size_t p = 0; p < m.confusion[t].size(); ++p) out << t << ',' << p << ',' << m.confusion[t][p] << '\n';
}

}  // namespace csim
