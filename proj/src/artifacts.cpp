#include "pahi/artifacts.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace pahi {

namespace fs = std::filesystem;

void atomic_write(const fs::path& path, std::string_view content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    out.flush();
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string format_number(double value) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", value);
  return buf;
}

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

template <class T>
std::string optional_field(const std::optional<T>& v) {
  if (!v) return "";
  if constexpr (std::is_floating_point_v<T>) {
    return format_number(*v);
  } else {
    return std::to_string(*v);
  }
}

}  // namespace

std::string render_csv(std::span<const std::string> columns, std::span<const std::vector<std::string>> rows) {
  std::string out;
  auto line = [&](std::span<const std::string> fields) {
    for (std::size_t i = 0; i < fields.size(); ++i) {
      if (i > 0) out += ',';
      out += csv_field(fields[i]);
    }
    out += '\n';
  };
  line(columns);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != columns.size()) {
      throw std::invalid_argument("csv row " + std::to_string(r) + " has " + std::to_string(rows[r].size()) +
                                  " fields, header has " + std::to_string(columns.size()));
    }
    line(rows[r]);
  }
  return out;
}

std::string render_metrics(std::span<const MetricsRow> rows) {
  std::vector<std::string> columns(kMetricsColumns.begin(), kMetricsColumns.end());
  std::vector<std::vector<std::string>> fields;
  fields.reserve(rows.size());
  for (const auto& r : rows) {
    fields.push_back({optional_field(r.step), r.split, r.scorer, optional_field(r.loss), optional_field(r.win_rate),
                      optional_field(r.lr), optional_field(r.wall_clock_ms)});
  }
  return render_csv(columns, fields);
}

void write_metrics(const fs::path& path, std::span<const MetricsRow> rows) { atomic_write(path, render_metrics(rows)); }

std::size_t square_side(std::size_t dim) {
  const auto k = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(dim))));
  if (k * k == dim && dim > 0) return k;
  const auto lo = static_cast<std::size_t>(std::floor(std::sqrt(static_cast<double>(dim))));
  const std::size_t below = lo * lo;
  const std::size_t above = (lo + 1) * (lo + 1);
  const std::size_t nearest = (below > 0 && dim - below <= above - dim) ? below : above;
  throw std::invalid_argument("image dimension " + std::to_string(dim) +
                              " is not a perfect square; nearest valid dimension is " + std::to_string(nearest));
}

std::uint8_t quantize(double value, double lo, double hi) {
  if (!(hi > lo)) return 128;
  const double t = std::clamp((value - lo) / (hi - lo), 0.0, 1.0);
  return static_cast<std::uint8_t>(std::lround(t * 255.0));
}

GrayImage to_gray(std::span<const double> image, std::span<const double> range) {
  const std::size_t k = square_side(image.size());
  if (range.empty()) range = image;
  const auto [lo, hi] = std::minmax_element(range.begin(), range.end());
  GrayImage g{k, k, {}};
  g.pixels.reserve(image.size());
  for (double v : image) g.pixels.push_back(quantize(v, *lo, *hi));
  return g;
}

GrayImage side_by_side(const GrayImage& left, const GrayImage& right) {
  if (left.height != right.height) throw std::invalid_argument("side_by_side: heights differ");
  GrayImage g{left.width + right.width, left.height, {}};
  g.pixels.reserve(g.width * g.height);
  for (std::size_t r = 0; r < g.height; ++r) {
    g.pixels.insert(g.pixels.end(), left.pixels.begin() + static_cast<long>(r * left.width),
                    left.pixels.begin() + static_cast<long>((r + 1) * left.width));
    g.pixels.insert(g.pixels.end(), right.pixels.begin() + static_cast<long>(r * right.width),
                    right.pixels.begin() + static_cast<long>((r + 1) * right.width));
  }
  return g;
}

std::string encode_pgm(const GrayImage& image) {
  if (image.pixels.size() != image.width * image.height) throw std::invalid_argument("encode_pgm: pixel count");
  std::string out = "P5\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  out.append(image.pixels.begin(), image.pixels.end());
  return out;
}

void dump_image(std::span<const double> image, const fs::path& path) { atomic_write(path, encode_pgm(to_gray(image))); }

void dump_image_pair(std::span<const double> baseline, std::span<const double> candidate, const fs::path& path) {
  std::vector<double> both(baseline.begin(), baseline.end());
  both.insert(both.end(), candidate.begin(), candidate.end());
  atomic_write(path, encode_pgm(side_by_side(to_gray(baseline, both), to_gray(candidate, both))));
}

}  // namespace pahi
