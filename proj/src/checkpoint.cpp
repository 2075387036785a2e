#include "crest/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace crest {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O writes raw little-endian words");

namespace {

constexpr char kMagic[4] = {'C', 'R', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

void put_bytes(std::string& buf, const void* p, std::size_t n) {
  buf.append(static_cast<const char*>(p), n);
}

void put_u32(std::string& buf, std::uint32_t v) { put_bytes(buf, &v, sizeof v); }
void put_u64(std::string& buf, std::uint64_t v) { put_bytes(buf, &v, sizeof v); }
void put_f64(std::string& buf, double v) { put_bytes(buf, &v, sizeof v); }

void put_str(std::string& buf, const std::string& s) {
  put_u32(buf, static_cast<std::uint32_t>(s.size()));
  put_bytes(buf, s.data(), s.size());
}

struct Reader {
  const std::string& buf;
  std::size_t pos{0};
  const std::string& path;

  void need(std::size_t n) const {
    if (pos + n > buf.size()) throw std::runtime_error("truncated checkpoint: " + path);
  }
  void raw(void* out, std::size_t n) {
    need(n);
    std::memcpy(out, buf.data() + pos, n);
    pos += n;
  }
  std::uint32_t u32() {
    std::uint32_t v;
    raw(&v, sizeof v);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v;
    raw(&v, sizeof v);
    return v;
  }
  double f64() {
    double v;
    raw(&v, sizeof v);
    return v;
  }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s(buf.data() + pos, n);
    pos += n;
    return s;
  }
};

}  // namespace

void Checkpoint::set_number(const std::string& key, double value) {
  for (auto& [k, v] : numbers) {
    if (k == key) {
      v = value;
      return;
    }
  }
  numbers.emplace_back(key, value);
}

void Checkpoint::set_string(const std::string& key, std::string value) {
  for (auto& [k, v] : strings) {
    if (k == key) {
      v = std::move(value);
      return;
    }
  }
  strings.emplace_back(key, std::move(value));
}

double Checkpoint::number(const std::string& key) const {
  for (const auto& [k, v] : numbers) {
    if (k == key) return v;
  }
  throw std::runtime_error("checkpoint has no number '" + key + "'");
}

std::optional<double> Checkpoint::maybe_number(const std::string& key) const {
  for (const auto& [k, v] : numbers) {
    if (k == key) return v;
  }
  return std::nullopt;
}

const std::string& Checkpoint::str(const std::string& key) const {
  for (const auto& [k, v] : strings) {
    if (k == key) return v;
  }
  throw std::runtime_error("checkpoint has no string '" + key + "'");
}

const grad::Tensor& Checkpoint::tensor(const std::string& name) const {
  for (const auto& [k, v] : tensors) {
    if (k == name) return v;
  }
  throw std::runtime_error("checkpoint has no tensor '" + name + "'");
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::string buf;
  put_bytes(buf, kMagic, 4);
  put_u32(buf, kVersion);
  put_u64(buf, ckpt.vocab_hash);
  put_u32(buf, static_cast<std::uint32_t>(ckpt.numbers.size()));
  for (const auto& [k, v] : ckpt.numbers) {
    put_str(buf, k);
    put_f64(buf, v);
  }
  put_u32(buf, static_cast<std::uint32_t>(ckpt.strings.size()));
  for (const auto& [k, v] : ckpt.strings) {
    put_str(buf, k);
    put_str(buf, v);
  }
  put_u32(buf, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, t] : ckpt.tensors) {
    put_str(buf, name);
    put_u32(buf, static_cast<std::uint32_t>(t.shape.size()));
    for (int d : t.shape) put_u32(buf, static_cast<std::uint32_t>(d));
    put_bytes(buf, t.data.data(), t.data.size() * sizeof(float));
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw std::runtime_error("write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path,
                           std::optional<std::uint64_t> expected_vocab_hash) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Reader r{buf, 0, path};

  char magic[4];
  r.raw(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) {
    throw std::runtime_error("not a checkpoint file: " + path);
  }
  const std::uint32_t version = r.u32();
  if (version != kVersion) {
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version) +
                             " in " + path);
  }
  Checkpoint ckpt;
  ckpt.vocab_hash = r.u64();
  if (expected_vocab_hash && ckpt.vocab_hash != *expected_vocab_hash) {
    throw std::runtime_error("vocabulary hash mismatch for " + path + ": checkpoint " +
                             std::to_string(ckpt.vocab_hash) + ", current " +
                             std::to_string(*expected_vocab_hash));
  }
  const std::uint32_t n_num = r.u32();
  for (std::uint32_t i = 0; i < n_num; ++i) {
    std::string key = r.str();
    const double v = r.f64();
    ckpt.numbers.emplace_back(std::move(key), v);
  }
  const std::uint32_t n_str = r.u32();
  for (std::uint32_t i = 0; i < n_str; ++i) {
    std::string key = r.str();
    std::string val = r.str();
    ckpt.strings.emplace_back(std::move(key), std::move(val));
  }
  const std::uint32_t n_tensors = r.u32();
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    std::string name = r.str();
    const std::uint32_t rank = r.u32();
    std::vector<int> shape(rank);
    for (auto& d : shape) d = static_cast<int>(r.u32());
    grad::Tensor t(shape);
    r.raw(t.data.data(), t.data.size() * sizeof(float));
    ckpt.tensors.emplace_back(std::move(name), std::move(t));
  }
  if (r.pos != buf.size()) {
    throw std::runtime_error("trailing bytes in checkpoint: " + path);
  }
  return ckpt;
}

}  // namespace crest
