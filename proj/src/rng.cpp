#include "pahi/rng.hpp"

#include <cmath>
#include <numbers>

namespace pahi {

std::uint64_t fnv1a(std::span<const unsigned char> bytes, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t fnv1a(std::string_view text, std::uint64_t seed) {
  return fnv1a(std::span(reinterpret_cast<const unsigned char*>(text.data()), text.size()), seed);
}

std::uint64_t hash_doubles(std::span<const double> values, std::uint64_t seed) {
  return fnv1a(std::span(reinterpret_cast<const unsigned char*>(values.data()), values.size_bytes()), seed);
}

std::string hex64(std::uint64_t value) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[value & 0xf];
    value >>= 4;
  }
  return out;
}

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t master, std::string_view component) {
  return splitmix64(splitmix64(master) ^ fnv1a(component));
}

Rng::Rng(std::uint64_t seed) : engine_(seed) {}

double Rng::uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  spare_ = radius * std::sin(angle);
  has_spare_ = true;
  return radius * std::cos(angle);
}

std::size_t Rng::index(std::size_t n) { return static_cast<std::size_t>(uniform() * static_cast<double>(n)); }

std::vector<double> Rng::normals(std::size_t n) {
  std::vector<double> out(n);
  for (auto& v : out) v = normal();
  return out;
}

Tensor Rng::normal_tensor(Shape shape) {
  const auto n = shape_numel(shape);
  return Tensor::from(std::move(shape), normals(n));
}

}  // namespace pahi
