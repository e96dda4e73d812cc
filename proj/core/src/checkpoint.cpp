#include "caselab/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <unordered_map>
#include <unordered_set>

#include "caselab/errors.hpp"

namespace caselab {

namespace {

constexpr char kMagic[8] = {'C', 'A', 'S', 'E', 'L', 'A', 'B', '1'};
constexpr int kMaxRank = 8;

void put_u16(std::string& out, uint16_t v) {
  out.push_back(static_cast<char>(v & 0xFF));
  out.push_back(static_cast<char>((v >> 8) & 0xFF));
}

void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i)
    out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_f32(std::string& out, float f) {
  uint32_t bits;
  std::memcpy(&bits, &f, sizeof bits);
  put_u32(out, bits);
}

struct Reader {
  const uint8_t* data;
  size_t size;
  size_t pos = 0;

  void need(size_t n) const {
    if (pos + n > size) throw IoError("checkpoint truncated");
  }
  uint8_t u8() {
    need(1);
    return data[pos++];
  }
  uint16_t u16() {
    need(2);
    uint16_t v = static_cast<uint16_t>(data[pos] | (data[pos + 1] << 8));
    pos += 2;
    return v;
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(data[pos + i]) << (8 * i);
    pos += 4;
    return v;
  }
  float f32() {
    uint32_t bits = u32();
    float f;
    std::memcpy(&f, &bits, sizeof f);
    return f;
  }
  std::string text(size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(data + pos), n);
    pos += n;
    return s;
  }
};

std::string serialize(
    const std::vector<std::pair<std::string, Tensor>>& entries) {
  std::unordered_set<std::string> seen;
  std::string out(kMagic, sizeof kMagic);
  put_u16(out, kCheckpointVersion);
  if (entries.size() > 0xFFFFFFFFull)
    throw IoError("checkpoint: too many entries");
  put_u32(out, static_cast<uint32_t>(entries.size()));
  for (const auto& [name, tensor] : entries) {
    if (!seen.insert(name).second)
      throw IoError("checkpoint: duplicate entry " + name);
    if (name.size() > 0xFFFF)
      throw IoError("checkpoint: entry name longer than 65535 bytes");
    if (tensor.rank() > kMaxRank)
      throw IoError("checkpoint: " + name + " has rank above 8");
    put_u16(out, static_cast<uint16_t>(name.size()));
    out += name;
    out.push_back(static_cast<char>(tensor.rank()));
    for (int d = 0; d < tensor.rank(); ++d) {
      if (tensor.dim(d) < 0)
        throw IoError("checkpoint: " + name + " has a negative dim");
      put_u32(out, static_cast<uint32_t>(tensor.dim(d)));
    }
    for (float v : tensor.data) put_f32(out, v);
  }
  put_u32(out, crc32(out.data(), out.size()));
  return out;
}

}  // namespace

uint32_t crc32(const void* data, size_t n) {
  static uint32_t table[256];
  static bool ready = false;
  if (!ready) {
    for (uint32_t i = 0; i < 256; ++i) {
      uint32_t c = i;
      for (int k = 0; k < 8; ++k)
        c = (c & 1u) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      table[i] = c;
    }
    ready = true;
  }
  uint32_t crc = 0xFFFFFFFFu;
  const uint8_t* p = static_cast<const uint8_t*>(data);
  for (size_t i = 0; i < n; ++i) crc = table[(crc ^ p[i]) & 0xFF] ^ (crc >> 8);
  return crc ^ 0xFFFFFFFFu;
}

void save_checkpoint(
    const std::string& path,
    const std::vector<std::pair<std::string, Tensor>>& entries) {
  std::string bytes = serialize(entries);
  std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write " + tmp);
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os.good()) {
      os.close();
      std::remove(tmp.c_str());
      throw IoError("write failed for " + tmp);
    }
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    std::remove(tmp.c_str());
    throw IoError("cannot rename " + tmp + " to " + path);
  }
}

void save_checkpoint(const std::string& path, const NamedTensors& params) {
  std::vector<std::pair<std::string, Tensor>> entries;
  entries.reserve(params.size());
  for (const auto& [name, tensor] : params) entries.emplace_back(name, *tensor);
  save_checkpoint(path, entries);
}

std::vector<std::pair<std::string, Tensor>> load_checkpoint(
    const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(is)),
                    std::istreambuf_iterator<char>());

  Reader r{reinterpret_cast<const uint8_t*>(bytes.data()), bytes.size()};
  if (bytes.size() < sizeof kMagic + 2 + 4 + 4)
    throw IoError("checkpoint truncated");
  if (r.text(sizeof kMagic) != std::string(kMagic, sizeof kMagic))
    throw IoError(path + " is not a checkpoint (bad magic)");
  uint16_t version = r.u16();
  if (version != kCheckpointVersion)
    throw IoError("unsupported checkpoint version " + std::to_string(version));

  uint32_t count = r.u32();
  std::vector<std::pair<std::string, Tensor>> entries;
  std::unordered_set<std::string> seen;
  for (uint32_t e = 0; e < count; ++e) {
    std::string name = r.text(r.u16());
    if (!seen.insert(name).second)
      throw IoError("checkpoint: duplicate entry " + name);
    int rank = r.u8();
    if (rank > kMaxRank)
      throw IoError("checkpoint: " + name + " has rank above 8");
    std::vector<int> shape;
    int64_t numel = 1;
    for (int d = 0; d < rank; ++d) {
      uint32_t dim = r.u32();
      if (dim > 0x7FFFFFFFu)
        throw IoError("checkpoint: " + name + " has an oversized dim");
      shape.push_back(static_cast<int>(dim));
      numel *= dim;
    }
    if (numel > static_cast<int64_t>(bytes.size()))
      throw IoError("checkpoint truncated");
    Tensor t = Tensor::zeros(shape);
    for (int64_t i = 0; i < numel; ++i)
      t.data[static_cast<size_t>(i)] = r.f32();
    entries.emplace_back(std::move(name), std::move(t));
  }
  if (bytes.size() - r.pos < 4) throw IoError("checkpoint truncated");
  if (bytes.size() - r.pos > 4)
    throw IoError("checkpoint has trailing bytes");
  uint32_t stored = r.u32();
  if (stored != crc32(bytes.data(), bytes.size() - 4))
    throw IoError("checkpoint crc mismatch");
  return entries;
}

void load_checkpoint_into(const std::string& path, const NamedTensors& params) {
  std::vector<std::pair<std::string, Tensor>> entries = load_checkpoint(path);
  std::unordered_map<std::string, const Tensor*> by_name;
  for (const auto& [name, tensor] : entries) by_name.emplace(name, &tensor);
  if (by_name.size() != params.size())
    throw IoError("checkpoint holds " + std::to_string(by_name.size()) +
                  " entries, expected " + std::to_string(params.size()));
  for (const auto& [name, target] : params) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw IoError("checkpoint missing " + name);
    if (it->second->shape != target->shape)
      throw IoError("checkpoint entry " + name + " has shape " +
                    shape_str(it->second->shape) + ", expected " +
                    shape_str(target->shape));
    target->data = it->second->data;
  }
}

}  // namespace caselab
