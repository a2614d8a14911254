#include "mdseg/grid.hpp"

#include <cstring>
#include <fstream>

#include "mdseg/errors.hpp"

namespace mdseg {

namespace {

constexpr char kMagic[4] = {'M', 'T', 'V', 'L'};
constexpr uint32_t kVersion = 1;

template <class T>
void put(std::ofstream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::ifstream& is, const char* what) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw InputError(std::string("mtvol: truncated while reading ") + what);
  return v;
}

template <class T>
void write_impl(const Grid3<T>& g, const std::filesystem::path& path, uint32_t dtype) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw InputError("mtvol: cannot open for writing: " + path.string());
  os.write(kMagic, 4);
  put(os, kVersion);
  put(os, dtype);
  for (int i = 0; i < 3; ++i) put(os, static_cast<uint64_t>(g.dims[i]));
  for (int i = 0; i < 3; ++i) put(os, g.spacing[i]);
  os.write(reinterpret_cast<const char*>(g.data.data()),
           static_cast<std::streamsize>(g.data.size() * sizeof(T)));
  if (!os) throw InputError("mtvol: write failed: " + path.string());
}

struct Header {
  uint32_t dtype;
  std::array<int64_t, 3> dims;
  std::array<double, 3> spacing;
};

Header read_header(std::ifstream& is, const std::filesystem::path& path) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw InputError("mtvol: bad magic in " + path.string());
  const auto version = get<uint32_t>(is, "version");
  if (version != kVersion)
    throw InputError("mtvol: unsupported version " + std::to_string(version));
  Header h;
  h.dtype = get<uint32_t>(is, "dtype");
  if (h.dtype > 1) throw InputError("mtvol: unknown dtype code " + std::to_string(h.dtype));
  for (int i = 0; i < 3; ++i) {
    const auto d = get<uint64_t>(is, "shape");
    if (d == 0 || d > (1ull << 40))
      throw InputError("mtvol: non-positive or absurd dimension in " + path.string());
    h.dims[i] = static_cast<int64_t>(d);
  }
  for (int i = 0; i < 3; ++i) h.spacing[i] = get<double>(is, "spacing");
  return h;
}

template <class T>
Grid3<T> read_payload(std::ifstream& is, const Header& h, const std::filesystem::path& path) {
  Grid3<T> g(h.dims[0], h.dims[1], h.dims[2]);
  g.spacing = h.spacing;
  is.read(reinterpret_cast<char*>(g.data.data()),
          static_cast<std::streamsize>(g.data.size() * sizeof(T)));
  if (is.gcount() != static_cast<std::streamsize>(g.data.size() * sizeof(T)))
    throw InputError("mtvol: truncated payload in " + path.string());
  return g;
}

}  // namespace

void write_volume(const GridF& g, const std::filesystem::path& path) { write_impl(g, path, 0); }
void write_volume(const GridU8& g, const std::filesystem::path& path) { write_impl(g, path, 1); }

AnyGrid read_volume(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("mtvol: cannot open " + path.string());
  const Header h = read_header(is, path);
  if (h.dtype == 0) return read_payload<float>(is, h, path);
  return read_payload<uint8_t>(is, h, path);
}

GridF read_volume_f32(const std::filesystem::path& path) {
  auto any = read_volume(path);
  if (auto* g = std::get_if<GridF>(&any)) return std::move(*g);
  throw InputError("mtvol: expected float32 volume in " + path.string());
}

GridU8 read_volume_u8(const std::filesystem::path& path) {
  auto any = read_volume(path);
  if (auto* g = std::get_if<GridU8>(&any)) return std::move(*g);
  throw InputError("mtvol: expected uint8 volume in " + path.string());
}

}  // namespace mdseg
