#include "lenc/binary_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>

#include "lenc/error.hpp"

namespace lenc {
namespace {

template <typename T>
void put_le(Bytes& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<std::byte>((value >> (8 * i)) & 0xff));
  }
}

template <typename T>
T get_le(std::span<const std::byte> in) {
  T value = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    value |= static_cast<T>(std::to_integer<std::uint8_t>(in[i])) << (8 * i);
  }
  return value;
}

}  // namespace

void ByteWriter::u8(std::uint8_t v) { buffer_.push_back(static_cast<std::byte>(v)); }
void ByteWriter::u16(std::uint16_t v) { put_le(buffer_, v); }
void ByteWriter::u32(std::uint32_t v) { put_le(buffer_, v); }
void ByteWriter::u64(std::uint64_t v) { put_le(buffer_, v); }
void ByteWriter::f64(double v) { put_le(buffer_, std::bit_cast<std::uint64_t>(v)); }

void ByteWriter::f64s(std::span<const double> v) {
  u64(v.size());
  buffer_.reserve(buffer_.size() + 8 * v.size());
  for (double x : v) f64(x);
}

void ByteWriter::bytes(std::span<const std::byte> v) {
  u64(v.size());
  buffer_.insert(buffer_.end(), v.begin(), v.end());
}

void ByteWriter::str(std::string_view s) {
  u64(s.size());
  for (char c : s) buffer_.push_back(static_cast<std::byte>(c));
}

ByteReader::ByteReader(std::span<const std::byte> data, std::string context)
    : data_(data), context_(std::move(context)) {}

std::span<const std::byte> ByteReader::take(std::size_t n, std::string_view field) {
  if (n > data_.size() - pos_) {
    throw ValidationError(context_ + "." + std::string(field), "truncated");
  }
  auto out = data_.subspan(pos_, n);
  pos_ += n;
  return out;
}

std::uint8_t ByteReader::u8(std::string_view field) {
  return std::to_integer<std::uint8_t>(take(1, field)[0]);
}
std::uint16_t ByteReader::u16(std::string_view field) { return get_le<std::uint16_t>(take(2, field)); }
std::uint32_t ByteReader::u32(std::string_view field) { return get_le<std::uint32_t>(take(4, field)); }
std::uint64_t ByteReader::u64(std::string_view field) { return get_le<std::uint64_t>(take(8, field)); }
double ByteReader::f64(std::string_view field) {
  return std::bit_cast<double>(get_le<std::uint64_t>(take(8, field)));
}

std::vector<double> ByteReader::f64s(std::string_view field) {
  const std::uint64_t n = u64(field);
  if (n > (data_.size() - pos_) / 8) {
    throw ValidationError(context_ + "." + std::string(field), "length exceeds remaining bytes");
  }
  std::vector<double> out(n);
  for (auto& x : out) x = f64(field);
  return out;
}

Bytes ByteReader::bytes(std::string_view field) {
  const std::uint64_t n = u64(field);
  auto raw = take(n, field);
  return Bytes(raw.begin(), raw.end());
}

std::string ByteReader::str(std::string_view field) {
  const std::uint64_t n = u64(field);
  auto raw = take(n, field);
  std::string out(n, '\0');
  std::memcpy(out.data(), raw.data(), n);
  return out;
}

void ByteReader::expect_end() {
  if (!at_end()) throw ValidationError(context_, "trailing bytes");
}

const Section& Envelope::section(std::uint8_t tag, std::string_view name) const {
  for (const auto& s : sections) {
    if (s.tag == tag) return s;
  }
  throw ValidationError("envelope." + std::string(name), "missing section");
}

Bytes encode_envelope(const Envelope& env) {
  ByteWriter w;
  for (char c : kMagic) w.u8(static_cast<std::uint8_t>(c));
  w.u16(env.version);
  w.u8(static_cast<std::uint8_t>(env.kind));
  w.u32(static_cast<std::uint32_t>(env.sections.size()));
  for (const auto& s : env.sections) {
    w.u8(s.tag);
    w.bytes(s.body);
  }
  return std::move(w).take();
}

Envelope decode_envelope(std::span<const std::byte> data, EnvelopeKind expected) {
  ByteReader r(data, "envelope");
  for (char c : kMagic) {
    if (r.u8("magic") != static_cast<std::uint8_t>(c)) {
      throw ValidationError("envelope.magic", "expected \"LENC\"");
    }
  }
  Envelope env;
  env.version = r.u16("version");
  if (env.version != kFormatVersion) {
    throw ValidationError("envelope.version", "unsupported version " + std::to_string(env.version));
  }
  env.kind = static_cast<EnvelopeKind>(r.u8("kind"));
  if (env.kind != expected) {
    throw ValidationError("envelope.kind",
                          "expected " + std::to_string(static_cast<int>(expected)) + ", got " +
                              std::to_string(static_cast<int>(env.kind)));
  }
  const std::uint32_t count = r.u32("section_count");
  for (std::uint32_t i = 0; i < count; ++i) {
    Section s;
    s.tag = r.u8("section.tag");
    s.body = r.bytes("section.body");
    env.sections.push_back(std::move(s));
  }
  r.expect_end();
  return env;
}

void write_file(const std::filesystem::path& path, std::span<const std::byte> data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
  if (!out) throw Error("write failed: " + path.string());
}

Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Bytes out(raw.size());
  std::memcpy(out.data(), raw.data(), raw.size());
  return out;
}

}  // namespace lenc
