#include "coar/persistence.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace coar {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

namespace {

template <class T>
void put(std::vector<std::uint8_t>& out, T v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

template <class T>
T get(std::span<const std::uint8_t> bytes, std::size_t& off) {
  if (off + sizeof(T) > bytes.size()) throw CorruptCheckpoint("checkpoint truncated");
  T v;
  std::memcpy(&v, bytes.data() + off, sizeof(T));
  off += sizeof(T);
  return v;
}

}  // namespace

std::int64_t Tensor::numel() const {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

const Tensor& Checkpoint::tensor(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return t;
  }
  throw CorruptCheckpoint("checkpoint has no tensor '" + name + "'");
}

std::uint64_t payload_checksum(std::span<const std::uint8_t> payload) {
  return fnv1a64(std::string_view(reinterpret_cast<const char*>(payload.data()), payload.size()));
}

std::string hex64(std::uint64_t v) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = kDigits[v & 0xF];
    v >>= 4;
  }
  return s;
}

std::vector<std::uint8_t> serialize(const Checkpoint& ckpt) {
  nlohmann::json manifest;
  manifest["kind"] = ckpt.kind;
  manifest["meta"] = ckpt.meta;
  auto list = nlohmann::json::array();
  for (const auto& t : ckpt.tensors) {
    if (static_cast<std::int64_t>(t.data.size()) != t.numel()) {
      throw InvalidArgument("tensor '" + t.name + "' data does not match its shape");
    }
    list.push_back({{"name", t.name}, {"shape", t.shape}, {"dtype", "f64"}});
  }
  manifest["tensors"] = std::move(list);
  const std::string text = manifest.dump();

  std::vector<std::uint8_t> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint64_t>(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  const std::size_t payload_begin = out.size();
  for (const auto& t : ckpt.tensors) {
    for (double v : t.data) put<double>(out, v);
  }
  const auto checksum =
      payload_checksum(std::span<const std::uint8_t>(out).subspan(payload_begin));
  put<std::uint64_t>(out, checksum);
  return out;
}

Checkpoint deserialize(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < sizeof(kCheckpointMagic) ||
      std::memcmp(bytes.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
    throw CorruptCheckpoint("bad checkpoint magic");
  }
  std::size_t off = sizeof(kCheckpointMagic);
  const auto version = get<std::uint32_t>(bytes, off);
  if (version != kCheckpointVersion) {
    throw UnsupportedVersion("unsupported checkpoint version " + std::to_string(version));
  }
  const auto mlen = get<std::uint64_t>(bytes, off);
  if (mlen > bytes.size() - off) throw CorruptCheckpoint("checkpoint truncated in manifest");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(off),
                                     bytes.begin() + static_cast<std::ptrdiff_t>(off + mlen));
  } catch (const nlohmann::json::exception& e) {
    throw CorruptCheckpoint(std::string("unreadable checkpoint manifest: ") + e.what());
  }
  off += mlen;

  Checkpoint ckpt;
  std::size_t payload_len = 0;
  try {
    ckpt.kind = manifest.at("kind").get<std::string>();
    ckpt.meta = manifest.at("meta");
    for (const auto& tj : manifest.at("tensors")) {
      Tensor t;
      t.name = tj.at("name").get<std::string>();
      t.shape = tj.at("shape").get<std::vector<std::int64_t>>();
      if (tj.at("dtype").get<std::string>() != "f64") throw CorruptCheckpoint("unknown dtype");
      for (auto d : t.shape) {
        if (d < 0) throw CorruptCheckpoint("negative tensor dimension");
      }
      payload_len += static_cast<std::size_t>(t.numel()) * sizeof(double);
      ckpt.tensors.push_back(std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw CorruptCheckpoint(std::string("malformed checkpoint manifest: ") + e.what());
  }
  if (bytes.size() - off != payload_len + sizeof(std::uint64_t)) {
    throw CorruptCheckpoint("checkpoint payload size mismatch");
  }
  const auto payload = bytes.subspan(off, payload_len);
  std::size_t tail = off + payload_len;
  const auto stored = get<std::uint64_t>(bytes, tail);
  if (stored != payload_checksum(payload)) throw CorruptCheckpoint("checkpoint checksum mismatch");
  for (auto& t : ckpt.tensors) {
    t.data.resize(static_cast<std::size_t>(t.numel()));
    std::memcpy(t.data.data(), bytes.data() + off, t.data.size() * sizeof(double));
    off += t.data.size() * sizeof(double);
  }
  return ckpt;
}

std::uint64_t save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const auto bytes = serialize(ckpt);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw InvalidArgument("cannot open '" + path.string() + "' for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw InvalidArgument("failed writing '" + path.string() + "'");
  std::uint64_t checksum;
  std::memcpy(&checksum, bytes.data() + bytes.size() - sizeof(checksum), sizeof(checksum));
  return checksum;
}

namespace {
std::vector<std::uint8_t> read_all(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InvalidArgument("cannot open '" + path.string() + "'");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(f), {});
}
}  // namespace

Checkpoint load_checkpoint(const std::filesystem::path& path) { return deserialize(read_all(path)); }

std::uint64_t file_hash(const std::filesystem::path& path) {
  const auto bytes = read_all(path);
  return fnv1a64(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

Tensor tensor_from(const std::string& name, const Mat& m) {
  Tensor t;
  t.name = name;
  t.shape = {m.rows(), m.cols()};
  t.data.assign(m.data(), m.data() + m.size());
  return t;
}

Mat matrix_from(const Tensor& t) {
  if (t.shape.size() != 2) throw CorruptCheckpoint("tensor '" + t.name + "' is not 2-D");
  Mat m(t.shape[0], t.shape[1]);
  std::copy(t.data.begin(), t.data.end(), m.data());
  return m;
}

}  // namespace coar
