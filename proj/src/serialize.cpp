#include "stormlatent/serialize.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace stormlatent {

namespace {

constexpr std::array<char, 4> kMagic{'L', 'P', 'T', 'F'};
constexpr std::uint8_t kVersion = 0x01;
constexpr std::uint8_t kDtypeF64 = 0x01;

void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(b, 4);
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw std::runtime_error("tensor stream truncated");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void put_f64(std::ostream& os, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((bits >> (8 * i)) & 0xFF);
  os.write(b, 8);
}

}  // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
  os.write(kMagic.data(), 4);
  os.put(static_cast<char>(kVersion));
  os.put(static_cast<char>(kDtypeF64));
  put_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (Index e : t.shape()) put_u32(os, static_cast<std::uint32_t>(e));
  const Array& v = t.value();
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
  } else {
    for (Index i = 0; i < v.size(); ++i) put_f64(os, v[i]);
  }
  if (!os) throw std::runtime_error("failed writing tensor");
}

Tensor read_tensor(std::istream& is) {
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), 4) || magic != kMagic) throw std::runtime_error("bad tensor magic (expected LPTF)");
  const int version = is.get();
  const int dtype = is.get();
  if (version != kVersion) throw std::runtime_error("unsupported tensor container version " + std::to_string(version));
  if (dtype != kDtypeF64) throw std::runtime_error("unsupported tensor dtype " + std::to_string(dtype));
  const std::uint32_t rank = get_u32(is);
  if (rank > 16) throw std::runtime_error("implausible tensor rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& e : shape) {
    e = get_u32(is);
    if (e == 0) throw std::runtime_error("zero tensor extent");
  }
  Array v(numel(shape));
  unsigned char buf[8];
  for (Index i = 0; i < v.size(); ++i) {
    if (!is.read(reinterpret_cast<char*>(buf), 8)) throw std::runtime_error("tensor payload truncated");
    std::uint64_t bits = 0;
    for (int k = 0; k < 8; ++k) bits |= static_cast<std::uint64_t>(buf[k]) << (8 * k);
    v[i] = std::bit_cast<double>(bits);
  }
  return Tensor::from(std::move(shape), std::move(v));
}

void write_archive(std::ostream& os, const NamedTensors& tensors) {
  put_u32(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    put_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_tensor(os, t);
  }
}

NamedTensors read_archive(std::istream& is) {
  const std::uint32_t count = get_u32(is);
  NamedTensors out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t len = get_u32(is);
    if (len > (1u << 20)) throw std::runtime_error("implausible tensor name length");
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw std::runtime_error("archive truncated in tensor name");
    out.emplace_back(std::move(name), read_tensor(is));
  }
  return out;
}

void save_archive(const std::filesystem::path& path, const NamedTensors& tensors) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open for writing: " + path.string());
  write_archive(os, tensors);
}

NamedTensors load_archive(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open: " + path.string());
  return read_archive(is);
}

const Tensor& find_tensor(const NamedTensors& tensors, const std::string& name) {
  for (const auto& [n, t] : tensors)
    if (n == name) return t;
  throw std::out_of_range("no tensor named '" + name + "'");
}

bool has_tensor(const NamedTensors& tensors, const std::string& name) {
  for (const auto& [n, t] : tensors)
    if (n == name) return true;
  return false;
}

std::string file_digest(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open: " + path.string());
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[65536];
  while (is) {
    is.read(buf, sizeof buf);
    for (std::streamsize i = 0; i < is.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ULL;
    }
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

}  // namespace stormlatent
