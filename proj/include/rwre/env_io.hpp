#pragma once

// Binary environment files.
//
// Layout (little-endian):
//   "RWRE" | u16 version | u8 d | u8 family | u8 axis | f64 eps | u64 seed
//   | d x i32 lo | d x i32 hi | u32 count | count x (d x i32, 2d x f64)
//   | u32 crc32 of everything before it

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "rwre/environment.hpp"
#include "rwre/lattice.hpp"

namespace rwre {

inline constexpr std::uint16_t kEnvFormatVersion = 1;

struct EnvRecord {
  FamilySpec spec;
  std::uint64_t seed = 0;
  std::uint16_t version = kEnvFormatVersion;
  std::array<std::int32_t, kMaxDim> lo{}, hi{};
  std::vector<std::pair<Point, SiteLaw>> laws;

  // Environment that reproduces the stored laws exactly on the region.
  Environment environment() const {
    Environment env(spec, seed);
    for (const auto& [x, q] : laws)
      if (!(env.law(x) == q)) env.set_override(x, q);
    return env;
  }
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "big-endian hosts are not supported");

class ByteWriter {
 public:
  template <class T>
  void put(T v) {
    const auto* b = reinterpret_cast<const std::uint8_t*>(&v);
    buf.insert(buf.end(), b, b + sizeof(T));
  }
  std::vector<std::uint8_t> buf;
};

class ByteReader {
 public:
  ByteReader(const std::vector<std::uint8_t>& b, std::size_t end) : buf_(b), end_(end) {}
  template <class T>
  T get() {
    if (pos_ + sizeof(T) > end_) throw Error(ErrorCode::corrupt_payload, "truncated environment file");
    T v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::size_t pos() const { return pos_; }

 private:
  const std::vector<std::uint8_t>& buf_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

inline std::uint32_t crc(const std::uint8_t* p, std::size_t n) {
  return static_cast<std::uint32_t>(::crc32(0L, p, static_cast<uInt>(n)));
}

}  // namespace detail

// Serialize the laws on the interior of `region`.
inline std::vector<std::uint8_t> serialize(const Environment& env, const Domain& region) {
  const int d = env.dim();
  if (region.n_interior() > 0 && region.dim() != d)
    throw Error(ErrorCode::domain_violation, "region dimension does not match environment");
  detail::ByteWriter w;
  for (char c : std::string("RWRE")) w.put(static_cast<std::uint8_t>(c));
  w.put<std::uint16_t>(kEnvFormatVersion);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(d));
  w.put<std::uint8_t>(static_cast<std::uint8_t>(env.spec().family));
  w.put<std::uint8_t>(static_cast<std::uint8_t>(env.spec().axis));
  w.put<double>(env.epsilon());
  w.put<std::uint64_t>(env.seed());
  std::array<std::int32_t, kMaxDim> lo{}, hi{};
  auto pts = region.interior();
  for (int i = 0; i < d; ++i) {
    lo[i] = pts.empty() ? 0 : std::numeric_limits<std::int32_t>::max();
    hi[i] = pts.empty() ? -1 : std::numeric_limits<std::int32_t>::min();
  }
  for (const auto& p : pts)
    for (int i = 0; i < d; ++i) {
      lo[i] = std::min(lo[i], p.c[i]);
      hi[i] = std::max(hi[i], p.c[i]);
    }
  for (int i = 0; i < d; ++i) w.put<std::int32_t>(lo[i]);
  for (int i = 0; i < d; ++i) w.put<std::int32_t>(hi[i]);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(pts.size()));
  for (const auto& p : pts) {
    for (int i = 0; i < d; ++i) w.put<std::int32_t>(p.c[i]);
    const SiteLaw q = env.law(p);
    for (int k = 0; k < 2 * d; ++k) w.put<double>(q.p[k]);
  }
  w.put<std::uint32_t>(detail::crc(w.buf.data(), w.buf.size()));
  return std::move(w.buf);
}

inline EnvRecord deserialize(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 + 2 + 4)
    throw Error(ErrorCode::corrupt_payload, "environment file too short");
  const std::size_t body = bytes.size() - 4;
  std::uint32_t stored;
  std::memcpy(&stored, bytes.data() + body, 4);
  if (std::memcmp(bytes.data(), "RWRE", 4) != 0) throw Error(ErrorCode::corrupt_payload, "bad magic");
  std::uint16_t version;
  std::memcpy(&version, bytes.data() + 4, 2);
  if (version != kEnvFormatVersion)
    throw Error(ErrorCode::version_mismatch,
                "environment format version " + std::to_string(version) + ", expected " +
                    std::to_string(kEnvFormatVersion));
  if (detail::crc(bytes.data(), body) != stored) throw Error(ErrorCode::corrupt_payload, "checksum mismatch");

  detail::ByteReader r(bytes, body);
  for (int i = 0; i < 4; ++i) r.get<std::uint8_t>();
  EnvRecord rec;
  rec.version = r.get<std::uint16_t>();
  const int d = r.get<std::uint8_t>();
  const auto fam = r.get<std::uint8_t>();
  if (fam > 3) throw Error(ErrorCode::corrupt_payload, "unknown family tag");
  rec.spec.family = static_cast<Family>(fam);
  rec.spec.axis = r.get<std::uint8_t>();
  rec.spec.dim = d;
  rec.spec.epsilon = r.get<double>();
  rec.seed = r.get<std::uint64_t>();
  try {
    rec.spec.validate();
  } catch (const Error& e) {
    throw Error(ErrorCode::corrupt_payload, e.what());
  }
  for (int i = 0; i < d; ++i) rec.lo[i] = r.get<std::int32_t>();
  for (int i = 0; i < d; ++i) rec.hi[i] = r.get<std::int32_t>();
  const auto count = r.get<std::uint32_t>();
  const std::size_t per = static_cast<std::size_t>(d) * 4 + static_cast<std::size_t>(2 * d) * 8;
  if (body - r.pos() != static_cast<std::size_t>(count) * per)
    throw Error(ErrorCode::corrupt_payload, "payload length does not match point count");
  rec.laws.reserve(count);
  for (std::uint32_t n = 0; n < count; ++n) {
    Point p(d);
    for (int i = 0; i < d; ++i) p.c[i] = r.get<std::int32_t>();
    SiteLaw q;
    q.dim = d;
    for (int k = 0; k < 2 * d; ++k) q.p[k] = r.get<double>();
    rec.laws.emplace_back(p, q);
  }
  return rec;
}

inline void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorCode::config_invalid, "cannot open '" + path + "' for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorCode::config_invalid, "cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

}  // namespace rwre
