#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ucan/tensor.hpp"

namespace ucan {

/// Versioned, section-tagged binary artifact shared by every persisted object.
///
/// Layout (all integers little-endian):
///   "UCAN" | u8 version | u32 section count
///   section table: { u16 name length | name | u64 offset | u64 length }*
///   section payload: u32 meta length | "key=value\n"* | u32 tensor count |
///                    { u8 rank | u32 dims[rank] | f32 payload }*
///   u32 CRC32 of every preceding byte
inline constexpr std::uint8_t kContainerVersion = 1;
inline constexpr char kContainerMagic[4] = {'U', 'C', 'A', 'N'};

struct Section {
  std::string name;
  std::map<std::string, std::string> meta;
  std::vector<Tensor> tensors;

  void set(const std::string& key, const std::string& value) { meta[key] = value; }
  void set(const std::string& key, double value);
  void set(const std::string& key, std::int64_t value);
  void set(const std::string& key, std::size_t value) { set(key, static_cast<std::int64_t>(value)); }
  void set(const std::string& key, int value) { set(key, static_cast<std::int64_t>(value)); }

  const std::string& get(const std::string& key) const;
  double get_double(const std::string& key) const;
  std::int64_t get_int(const std::string& key) const;
  bool has(const std::string& key) const { return meta.count(key) != 0; }
  const Tensor& tensor(std::size_t i) const;
};

class Container {
 public:
  Section& add(std::string name);
  bool has(std::string_view name) const;
  const Section& at(std::string_view name) const;
  const std::vector<Section>& sections() const { return sections_; }

  std::vector<std::uint8_t> encode() const;
  static Container decode(std::span<const std::uint8_t> bytes);

  void save(const std::filesystem::path& path) const;
  static Container load(const std::filesystem::path& path);

 private:
  std::vector<Section> sections_;
};

/// Encodes a double so that parsing it back yields the identical value.
std::string exact_double(double value);

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes);

/// Stable checksum over tensor values, for frozen-weight checks.
std::uint32_t checksum(const std::vector<Tensor>& tensors);

}  // namespace ucan
