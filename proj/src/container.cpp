#include "ucan/container.hpp"

#include <zlib.h>

#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

namespace ucan {

namespace {

static_assert(std::endian::native == std::endian::little, "container codec assumes a little-endian host");

class Writer {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) { raw(&v, sizeof v); }
  void u32(std::uint32_t v) { raw(&v, sizeof v); }
  void u64(std::uint64_t v) { raw(&v, sizeof v); }
  void f32(float v) { raw(&v, sizeof v); }
  void bytes(std::string_view s) { raw(s.data(), s.size()); }
  void raw(const void* p, std::size_t n) {
    auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  void patch_u64(std::size_t at, std::uint64_t v) { std::memcpy(buf_.data() + at, &v, sizeof v); }
  std::size_t size() const { return buf_.size(); }
  std::vector<std::uint8_t>& buffer() { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class Reader {
 public:
  Reader(std::span<const std::uint8_t> bytes, std::size_t begin, std::size_t end)
      : bytes_(bytes), pos_(begin), end_(end) {}

  template <typename T>
  T read() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > end_) throw TruncatedFileError("container: unexpected end of data");
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_;
  std::size_t end_;
};

void encode_section(Writer& w, const Section& s) {
  std::string meta;
  for (const auto& [k, v] : s.meta) {
    if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos) {
      throw ContractError("container: meta key/value may not contain '=' or newlines: " + k);
    }
    meta += k + "=" + v + "\n";
  }
  w.u32(static_cast<std::uint32_t>(meta.size()));
  w.bytes(meta);
  w.u32(static_cast<std::uint32_t>(s.tensors.size()));
  for (const auto& t : s.tensors) {
    if (t.rank() > 255) throw ContractError("container: tensor rank exceeds 255");
    w.u8(static_cast<std::uint8_t>(t.rank()));
    for (auto d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (double v : t.data()) w.f32(static_cast<float>(v));
  }
}

Section decode_section(Reader& r, std::string name) {
  Section s;
  s.name = std::move(name);
  const auto meta_len = r.read<std::uint32_t>();
  std::istringstream meta(r.str(meta_len));
  for (std::string line; std::getline(meta, line);) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("container: malformed meta line in section " + s.name);
    s.meta[line.substr(0, eq)] = line.substr(eq + 1);
  }
  const auto count = r.read<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto rank = r.read<std::uint8_t>();
    Shape shape(rank);
    for (auto& d : shape) d = r.read<std::uint32_t>();
    std::vector<double> values(shape_numel(shape));
    for (auto& v : values) v = static_cast<double>(r.read<float>());
    s.tensors.emplace_back(std::move(shape), std::move(values));
  }
  return s;
}

}  // namespace

void Section::set(const std::string& key, double value) { meta[key] = exact_double(value); }

void Section::set(const std::string& key, std::int64_t value) { meta[key] = std::to_string(value); }

const std::string& Section::get(const std::string& key) const {
  auto it = meta.find(key);
  if (it == meta.end()) throw FormatError("section '" + name + "' has no key '" + key + "'");
  return it->second;
}

double Section::get_double(const std::string& key) const {
  const auto& s = get(key);
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) {
    throw FormatError("section '" + name + "': key '" + key + "' is not a number");
  }
  return v;
}

std::int64_t Section::get_int(const std::string& key) const {
  const auto& s = get(key);
  std::int64_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) {
    throw FormatError("section '" + name + "': key '" + key + "' is not an integer");
  }
  return v;
}

const Tensor& Section::tensor(std::size_t i) const {
  if (i >= tensors.size()) {
    throw FormatError("section '" + name + "' has " + std::to_string(tensors.size()) + " tensors, wanted #" +
                      std::to_string(i));
  }
  return tensors[i];
}

Section& Container::add(std::string name) {
  if (has(name)) throw ContractError("container: duplicate section " + name);
  sections_.push_back(Section{std::move(name), {}, {}});
  return sections_.back();
}

bool Container::has(std::string_view name) const {
  for (const auto& s : sections_) {
    if (s.name == name) return true;
  }
  return false;
}

const Section& Container::at(std::string_view name) const {
  for (const auto& s : sections_) {
    if (s.name == name) return s;
  }
  throw FormatError("container: missing section '" + std::string(name) + "'");
}

std::vector<std::uint8_t> Container::encode() const {
  Writer w;
  w.raw(kContainerMagic, 4);
  w.u8(kContainerVersion);
  w.u32(static_cast<std::uint32_t>(sections_.size()));
  std::vector<std::size_t> slots;
  for (const auto& s : sections_) {
    if (s.name.size() > 0xFFFF) throw ContractError("container: section name too long");
    w.u16(static_cast<std::uint16_t>(s.name.size()));
    w.bytes(s.name);
    slots.push_back(w.size());
    w.u64(0);
    w.u64(0);
  }
  for (std::size_t i = 0; i < sections_.size(); ++i) {
    const auto begin = w.size();
    encode_section(w, sections_[i]);
    w.patch_u64(slots[i], begin);
    w.patch_u64(slots[i] + 8, w.size() - begin);
  }
  const auto crc = crc32_of(w.buffer());
  w.u32(crc);
  return std::move(w.buffer());
}

Container Container::decode(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kContainerMagic, 4) != 0) {
    throw BadMagicError("container: bad magic bytes");
  }
  if (bytes.size() < 5) throw TruncatedFileError("container: missing version byte");
  if (bytes[4] != kContainerVersion) {
    throw VersionMismatchError("container: version " + std::to_string(bytes[4]) + ", expected " +
                               std::to_string(kContainerVersion));
  }
  if (bytes.size() < 9 + 4) throw TruncatedFileError("container: header truncated");
  const std::size_t body_end = bytes.size() - 4;
  Reader header(bytes, 5, body_end);
  const auto count = header.read<std::uint32_t>();
  struct Entry {
    std::string name;
    std::uint64_t offset, length;
  };
  std::vector<Entry> table;
  for (std::uint32_t i = 0; i < count; ++i) {
    Entry e;
    e.name = header.str(header.read<std::uint16_t>());
    e.offset = header.read<std::uint64_t>();
    e.length = header.read<std::uint64_t>();
    if (e.offset < header.pos() || e.offset + e.length > body_end) {
      throw TruncatedFileError("container: section '" + e.name + "' extends past end of file");
    }
    table.push_back(std::move(e));
  }
  std::uint32_t stored = 0;
  std::memcpy(&stored, bytes.data() + body_end, 4);
  if (stored != crc32_of(bytes.first(body_end))) throw ChecksumError("container: CRC32 mismatch");

  Container c;
  for (auto& e : table) {
    Reader r(bytes, e.offset, e.offset + e.length);
    c.sections_.push_back(decode_section(r, std::move(e.name)));
  }
  return c;
}

void Container::save(const std::filesystem::path& path) const {
  const auto bytes = encode();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed for " + path.string());
}

Container Container::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ResolutionError("cannot open artifact " + path.string(), path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode(bytes);
}

std::string exact_double(double value) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, value);
  return std::string(buf, ptr);
}

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  std::size_t pos = 0;
  while (pos < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - pos, 1u << 30));
    crc = crc32(crc, bytes.data() + pos, chunk);
    pos += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

std::uint32_t checksum(const std::vector<Tensor>& tensors) {
  uLong crc = crc32(0L, Z_NULL, 0);
  for (const auto& t : tensors) {
    auto d = t.data();
    crc = crc32(crc, reinterpret_cast<const Bytef*>(d.data()), static_cast<uInt>(d.size() * sizeof(double)));
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace ucan
