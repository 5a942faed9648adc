#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string_view>
#include <vector>

#include "pahi/tensor.hpp"

namespace pahi {

/// 64-bit FNV-1a.
std::uint64_t fnv1a(std::span<const unsigned char> bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::uint64_t fnv1a(std::string_view text, std::uint64_t seed = 0xcbf29ce484222325ULL);
/// Hash of the raw bytes of a double array.
std::uint64_t hash_doubles(std::span<const double> values, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t value);

/// Stable per-component seed: mixes the master seed with the component name,
/// so adding a component never shifts another component's stream.
std::uint64_t derive_seed(std::uint64_t master, std::string_view component);

/// Seeded generator. Normal draws use Box-Muller over mt19937_64 so streams
/// are identical across standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  double uniform();  // [0, 1)
  double normal();
  std::size_t index(std::size_t n);  // uniform in [0, n)

  std::vector<double> normals(std::size_t n);
  Tensor normal_tensor(Shape shape);

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace pahi
