#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace morl::io {

// Versioned binary checkpoint container: fixed header (magic, version,
// config hash) followed by named sections. Parameter sections hold raw
// little-endian 32-bit reals; auxiliary run state uses the other dtypes.
enum class Dtype : std::uint32_t { f32 = 0, f64 = 1, u64 = 2, i64 = 3 };

struct Section {
  std::string name;
  Dtype dtype = Dtype::f32;
  std::vector<std::int64_t> dims;
  std::vector<std::uint8_t> raw;

  static Section f32(std::string name, std::vector<std::int64_t> dims,
                     const float* data, std::size_t n);
  static Section f64(std::string name, std::vector<std::int64_t> dims,
                     const double* data, std::size_t n);
  static Section u64(std::string name, const std::uint64_t* data, std::size_t n);

  std::size_t count() const;
  std::vector<float> as_f32() const;
  std::vector<double> as_f64() const;
  std::vector<std::uint64_t> as_u64() const;
};

struct Blob {
  std::uint64_t config_hash = 0;
  std::vector<Section> sections;

  const Section& find(const std::string& name) const;  // throws if absent
  bool has(const std::string& name) const;
};

void save_blob(const std::string& path, const Blob& blob);

// Loads and validates magic/version. When expected_hash is nonzero the
// blob's config hash must match or loading is rejected.
Blob load_blob(const std::string& path, std::uint64_t expected_hash = 0);

}  // namespace morl::io
