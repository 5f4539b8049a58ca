#include "util/blob.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

static_assert(std::endian::native == std::endian::little,
              "checkpoint format is little-endian");

namespace morl::io {
namespace {

constexpr char kMagic[8] = {'M', 'O', 'R', 'L', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

template <class T>
void put(std::ofstream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::ifstream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("checkpoint truncated");
  return v;
}

std::size_t dtype_size(Dtype d) {
  switch (d) {
    case Dtype::f32: return 4;
    case Dtype::f64: return 8;
    case Dtype::u64: return 8;
    case Dtype::i64: return 8;
  }
  throw std::runtime_error("checkpoint: unknown dtype");
}

}  // namespace

Section Section::f32(std::string name, std::vector<std::int64_t> dims,
                     const float* data, std::size_t n) {
  Section s;
  s.name = std::move(name);
  s.dtype = Dtype::f32;
  s.dims = std::move(dims);
  s.raw.resize(n * 4);
  std::memcpy(s.raw.data(), data, n * 4);
  return s;
}

Section Section::f64(std::string name, std::vector<std::int64_t> dims,
                     const double* data, std::size_t n) {
  Section s;
  s.name = std::move(name);
  s.dtype = Dtype::f64;
  s.dims = std::move(dims);
  s.raw.resize(n * 8);
  std::memcpy(s.raw.data(), data, n * 8);
  return s;
}

Section Section::u64(std::string name, const std::uint64_t* data, std::size_t n) {
  Section s;
  s.name = std::move(name);
  s.dtype = Dtype::u64;
  s.dims = {static_cast<std::int64_t>(n)};
  s.raw.resize(n * 8);
  std::memcpy(s.raw.data(), data, n * 8);
  return s;
}

std::size_t Section::count() const { return raw.size() / dtype_size(dtype); }

std::vector<float> Section::as_f32() const {
  if (dtype != Dtype::f32) throw std::runtime_error("section " + name + ": not f32");
  std::vector<float> out(count());
  std::memcpy(out.data(), raw.data(), raw.size());
  return out;
}

std::vector<double> Section::as_f64() const {
  if (dtype != Dtype::f64) throw std::runtime_error("section " + name + ": not f64");
  std::vector<double> out(count());
  std::memcpy(out.data(), raw.data(), raw.size());
  return out;
}

std::vector<std::uint64_t> Section::as_u64() const {
  if (dtype != Dtype::u64) throw std::runtime_error("section " + name + ": not u64");
  std::vector<std::uint64_t> out(count());
  std::memcpy(out.data(), raw.data(), raw.size());
  return out;
}

const Section& Blob::find(const std::string& name) const {
  for (const auto& s : sections)
    if (s.name == name) return s;
  throw std::runtime_error("checkpoint: missing section '" + name + "'");
}

bool Blob::has(const std::string& name) const {
  for (const auto& s : sections)
    if (s.name == name) return true;
  return false;
}

void save_blob(const std::string& path, const Blob& blob) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + tmp);
    os.write(kMagic, sizeof(kMagic));
    put(os, kVersion);
    put(os, blob.config_hash);
    put(os, static_cast<std::uint32_t>(blob.sections.size()));
    for (const auto& s : blob.sections) {
      put(os, static_cast<std::uint32_t>(s.name.size()));
      os.write(s.name.data(), static_cast<std::streamsize>(s.name.size()));
      put(os, static_cast<std::uint32_t>(s.dtype));
      put(os, static_cast<std::uint32_t>(s.dims.size()));
      for (std::int64_t d : s.dims) put(os, d);
      put(os, static_cast<std::uint64_t>(s.raw.size()));
      os.write(reinterpret_cast<const char*>(s.raw.data()),
               static_cast<std::streamsize>(s.raw.size()));
    }
    os.flush();
    if (!os) throw std::runtime_error("write failed for " + tmp);
  }
  // Rename-into-place so an interrupted write never corrupts an existing
  // checkpoint at `path`.
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw std::runtime_error("cannot move " + tmp + " to " + path);
}

Blob load_blob(const std::string& path, std::uint64_t expected_hash) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kMagic, 8) != 0)
    throw std::runtime_error(path + ": not a checkpoint (bad magic)");
  const auto version = get<std::uint32_t>(is);
  if (version != kVersion)
    throw std::runtime_error(path + ": unsupported checkpoint version " +
                             std::to_string(version));
  Blob blob;
  blob.config_hash = get<std::uint64_t>(is);
  if (expected_hash != 0 && blob.config_hash != expected_hash)
    throw std::runtime_error(path + ": config hash mismatch (checkpoint was written "
                             "under a different configuration)");
  const auto n = get<std::uint32_t>(is);
  blob.sections.resize(n);
  for (auto& s : blob.sections) {
    const auto name_len = get<std::uint32_t>(is);
    s.name.resize(name_len);
    is.read(s.name.data(), name_len);
    s.dtype = static_cast<Dtype>(get<std::uint32_t>(is));
    const auto ndims = get<std::uint32_t>(is);
    s.dims.resize(ndims);
    for (auto& d : s.dims) d = get<std::int64_t>(is);
    const auto bytes = get<std::uint64_t>(is);
    s.raw.resize(bytes);
    is.read(reinterpret_cast<char*>(s.raw.data()), static_cast<std::streamsize>(bytes));
    if (!is) throw std::runtime_error(path + ": truncated section " + s.name);
  }
  return blob;
}

}  // namespace morl::io
