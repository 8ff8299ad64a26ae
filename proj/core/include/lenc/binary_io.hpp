#pragma once

// Versioned, length-prefixed little-endian container shared by every binary
// artifact (learner and VAE snapshots, transfer payloads, node checkpoints,
// wire messages).
//
//   offset  size  field
//   0       4     magic "LENC"
//   4       2     format version (u16)
//   6       1     envelope kind (u8)
//   7       4     section count (u32)
//   11      ...   sections: tag (u8), length (u64), body
//
// All integers and IEEE-754 doubles are little-endian regardless of host.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace lenc {

using Bytes = std::vector<std::byte>;

inline constexpr std::array<char, 4> kMagic = {'L', 'E', 'N', 'C'};
inline constexpr std::uint16_t kFormatVersion = 1;

enum class EnvelopeKind : std::uint8_t {
  Learner = 1,
  Vae = 2,
  Payload = 3,
  NodeCheckpoint = 4,
  Stream = 5,
  QueryResponse = 6,
  Control = 7,
};

class ByteWriter {
public:
  void u8(std::uint8_t v);
  void u16(std::uint16_t v);
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f64(double v);
  void f64s(std::span<const double> v);  // count (u64) + values
  void bytes(std::span<const std::byte> v);  // length (u64) + raw
  void str(std::string_view s);

  const Bytes& data() const& noexcept { return buffer_; }
  Bytes take() && noexcept { return std::move(buffer_); }

private:
  Bytes buffer_;
};

class ByteReader {
public:
  // `context` prefixes field names in validation errors.
  ByteReader(std::span<const std::byte> data, std::string context);

  std::uint8_t u8(std::string_view field);
  std::uint16_t u16(std::string_view field);
  std::uint32_t u32(std::string_view field);
  std::uint64_t u64(std::string_view field);
  double f64(std::string_view field);
  std::vector<double> f64s(std::string_view field);
  Bytes bytes(std::string_view field);
  std::string str(std::string_view field);

  bool at_end() const noexcept { return pos_ == data_.size(); }
  void expect_end();

private:
  std::span<const std::byte> take(std::size_t n, std::string_view field);

  std::span<const std::byte> data_;
  std::size_t pos_ = 0;
  std::string context_;
};

struct Section {
  std::uint8_t tag = 0;
  Bytes body;
};

struct Envelope {
  EnvelopeKind kind{};
  std::uint16_t version = kFormatVersion;
  std::vector<Section> sections;

  const Section& section(std::uint8_t tag, std::string_view name) const;
};

Bytes encode_envelope(const Envelope& env);
Envelope decode_envelope(std::span<const std::byte> data, EnvelopeKind expected);

void write_file(const std::filesystem::path& path, std::span<const std::byte> data);
Bytes read_file(const std::filesystem::path& path);

}  // namespace lenc
