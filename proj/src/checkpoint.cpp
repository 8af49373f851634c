#include "pdtb/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <set>
#include <stdexcept>
#include <vector>

namespace pdtb {

namespace {

constexpr char kMagic[8] = {'P', 'D', 'T', 'B', 'C', 'K', '0', '1'};

uint64_t fnv1a(const std::vector<char>& bytes) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : bytes) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

void put_u32(std::vector<char>& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::vector<char>& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(std::vector<char> bytes) : bytes_(std::move(bytes)) {}

  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }

  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }

  std::string str(size_t n) {
    need(n);
    std::string s(bytes_.data() + pos_, n);
    pos_ += n;
    return s;
  }

  void doubles(double* dst, size_t n) {
    need(n * 8);
    std::memcpy(dst, bytes_.data() + pos_, n * 8);
    pos_ += n * 8;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(size_t n) {
    if (pos_ + n > bytes_.size()) throw std::runtime_error("checkpoint: truncated payload");
  }
  std::vector<char> bytes_;
  size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const ParamStore& store, const std::filesystem::path& path) {
  std::vector<char> payload;
  put_u32(payload, static_cast<uint32_t>(store.all().size()));
  for (const auto& p : store.all()) {
    put_u32(payload, static_cast<uint32_t>(p->name.size()));
    payload.insert(payload.end(), p->name.begin(), p->name.end());
    put_u32(payload, static_cast<uint32_t>(p->value.ndim()));
    for (int d : p->value.shape()) put_u64(payload, static_cast<uint64_t>(d));
    const size_t at = payload.size();
    payload.resize(at + static_cast<size_t>(p->value.size()) * 8);
    std::memcpy(payload.data() + at, p->value.data(), static_cast<size_t>(p->value.size()) * 8);
  }

  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("save_checkpoint: cannot open " + tmp.string());
    out.write(kMagic, sizeof(kMagic));
    std::vector<char> head;
    put_u64(head, fnv1a(payload));
    out.write(head.data(), static_cast<std::streamsize>(head.size()));
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  }
  std::filesystem::rename(tmp, path);
}

void load_checkpoint(ParamStore& store, const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path.string());

  char magic[8];
  in.read(magic, 8);
  if (in.gcount() != 8 || std::memcmp(magic, kMagic, 8) != 0) {
    throw std::runtime_error("load_checkpoint: bad magic in " + path.string());
  }
  char sumbytes[8];
  in.read(sumbytes, 8);
  if (in.gcount() != 8) throw std::runtime_error("load_checkpoint: truncated header");
  uint64_t want = 0;
  for (int i = 0; i < 8; ++i) want |= static_cast<uint64_t>(static_cast<unsigned char>(sumbytes[i])) << (8 * i);

  std::vector<char> payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (fnv1a(payload) != want) {
    throw std::runtime_error("load_checkpoint: checksum mismatch in " + path.string());
  }

  Reader r(std::move(payload));
  const uint32_t count = r.u32();
  std::set<std::string> seen;
  for (uint32_t i = 0; i < count; ++i) {
    const uint32_t name_len = r.u32();
    const std::string name = r.str(name_len);
    const uint32_t ndim = r.u32();
    std::vector<int> shape;
    std::int64_t n = 1;
    for (uint32_t d = 0; d < ndim; ++d) {
      shape.push_back(static_cast<int>(r.u64()));
      n *= shape.back();
    }
    Parameter* p = store.find(name);
    if (!p) throw std::runtime_error("load_checkpoint: unknown parameter " + name);
    if (p->value.shape() != shape) {
      throw std::runtime_error("load_checkpoint: shape mismatch for " + name);
    }
    r.doubles(p->value.data(), static_cast<size_t>(n));
    seen.insert(name);
  }
  if (!r.done()) throw std::runtime_error("load_checkpoint: trailing bytes in " + path.string());
  if (seen.size() != store.all().size()) {
    throw std::runtime_error("load_checkpoint: file does not cover every parameter");
  }
}

}  // namespace pdtb
