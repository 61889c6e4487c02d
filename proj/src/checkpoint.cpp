#include "gavatar/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace gavatar::checkpoint {

namespace {

template <class T>
void put_le(std::string& out, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::string_view s) : s_(s) {}
  template <class T>
  T take() {
    need(sizeof(T));
    char buf[sizeof(T)];
    std::memcpy(buf, s_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
    pos_ += sizeof(T);
    T v;
    std::memcpy(&v, buf, sizeof(T));
    return v;
  }
  std::string_view bytes(std::uint64_t n) {
    need(n);
    std::string_view v = s_.substr(pos_, n);
    pos_ += n;
    return v;
  }
  bool done() const { return pos_ == s_.size(); }

 private:
  void need(std::uint64_t n) const {
    if (n > s_.size() - pos_) throw FormatError("checkpoint: truncated data");
  }
  std::string_view s_;
  size_t pos_ = 0;
};

}  // namespace

void Container::put(const std::string& name, MatX value) {
  for (auto& [n, v] : blobs)
    if (n == name) {
      v = std::move(value);
      return;
    }
  blobs.emplace_back(name, std::move(value));
}

bool Container::has(const std::string& name) const {
  for (const auto& b : blobs)
    if (b.first == name) return true;
  return false;
}

const MatX& Container::get(const std::string& name) const {
  for (const auto& b : blobs)
    if (b.first == name) return b.second;
  throw FormatError("checkpoint: missing blob '" + name + "'");
}

std::string encode(const Container& c) {
  std::string out(kMagic);
  put_le<std::uint32_t>(out, kSchemaVersion);
  const std::string meta = c.meta.dump();
  put_le<std::uint64_t>(out, meta.size());
  out += meta;
  put_le<std::uint64_t>(out, c.blobs.size());
  for (const auto& [name, m] : c.blobs) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_le<std::uint64_t>(out, static_cast<std::uint64_t>(m.rows()));
    put_le<std::uint64_t>(out, static_cast<std::uint64_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.size(); ++i) put_le<double>(out, m.data()[i]);
  }
  return out;
}

Container decode(std::string_view bytes) {
  Reader r(bytes);
  if (r.bytes(kMagic.size()) != kMagic) throw FormatError("checkpoint: bad magic");
  const auto version = r.take<std::uint32_t>();
  if (version != kSchemaVersion)
    throw FormatError("checkpoint: unsupported schema version " + std::to_string(version) + " (expected " +
                      std::to_string(kSchemaVersion) + ")");
  Container c;
  const auto meta_len = r.take<std::uint64_t>();
  try {
    c.meta = nlohmann::json::parse(r.bytes(meta_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: bad metadata: ") + e.what());
  }
  const auto count = r.take<std::uint64_t>();
  for (std::uint64_t b = 0; b < count; ++b) {
    std::string name(r.bytes(r.take<std::uint32_t>()));
    const auto rows = r.take<std::uint64_t>(), cols = r.take<std::uint64_t>();
    if (cols != 0 && rows > (bytes.size() / 8) / cols) throw FormatError("checkpoint: blob '" + name + "' too large");
    MatX m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = r.take<double>();
    c.blobs.emplace_back(std::move(name), std::move(m));
  }
  if (!r.done()) throw FormatError("checkpoint: trailing bytes");
  return c;
}

void write(const std::filesystem::path& path, const Container& c) {
  const std::string bytes = encode(c);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing " + path.string());
}

Container read(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint " + path.string());
  const std::string bytes{std::istreambuf_iterator<char>(in), {}};
  return decode(bytes);
}

}  // namespace gavatar::checkpoint
