#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace pahi {

/// Writes to a sibling temp file, then renames over `path`.
void atomic_write(const std::filesystem::path& path, std::string_view content);

/// %.9g
std::string format_number(double value);

// ---------------------------------------------------------------------------
// Metrics CSV
// ---------------------------------------------------------------------------

inline constexpr std::array<std::string_view, 7> kMetricsColumns = {"step", "split", "scorer", "loss",
                                                                    "win_rate", "lr", "wall_clock_ms"};

/// One metrics line. Absent values are written as empty fields.
struct MetricsRow {
  std::optional<long long> step;
  std::string split;
  std::string scorer;
  std::optional<double> loss;
  std::optional<double> win_rate;
  std::optional<double> lr;
  std::optional<double> wall_clock_ms;
};

/// Header plus rows; every row must have one field per column.
std::string render_csv(std::span<const std::string> columns, std::span<const std::vector<std::string>> rows);
std::string render_metrics(std::span<const MetricsRow> rows);
void write_metrics(const std::filesystem::path& path, std::span<const MetricsRow> rows);

// ---------------------------------------------------------------------------
// PGM images
// ---------------------------------------------------------------------------

struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;  // row-major
};

/// Side length for a square image of `dim` pixels; throws with the nearest
/// perfect square when there is none.
std::size_t square_side(std::size_t dim);

/// Affine map of [lo, hi] onto [0, 255], rounded. A degenerate range maps
/// every pixel to 128.
std::uint8_t quantize(double value, double lo, double hi);

/// Reshapes a d_y vector to k x k, normalized over [min, max] of `range`
/// (the image itself when empty).
GrayImage to_gray(std::span<const double> image, std::span<const double> range = {});
/// Concatenates horizontally; heights must match.
GrayImage side_by_side(const GrayImage& left, const GrayImage& right);

/// Binary P5, 8-bit.
std::string encode_pgm(const GrayImage& image);
void dump_image(std::span<const double> image, const std::filesystem::path& path);
/// Baseline on the left, candidate on the right, on a shared intensity scale.
void dump_image_pair(std::span<const double> baseline, std::span<const double> candidate,
                     const std::filesystem::path& path);

}  // namespace pahi
