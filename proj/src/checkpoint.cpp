#include "lirf/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace lirf {

namespace {

constexpr char kMagic[4] = {'L', 'I', 'R', 'F'};
constexpr std::uint32_t kVersion = 1;

class Writer {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void raw(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes_.insert(bytes_.end(), p, p + n);
  }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
  void storage(const Storage& s) {
    // Values are held in little-endian vectors on every supported platform;
    // the canonical form is the raw buffer.
    raw(s.raw(), s.size() * dtype_size(s.dtype()));
  }
  const std::vector<std::uint8_t>& bytes() const { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

class Reader {
 public:
  Reader(std::vector<std::uint8_t> bytes, std::string path)
      : bytes_(std::move(bytes)), path_(std::move(path)) {}

  std::size_t offset() const { return at_; }
  std::size_t remaining() const { return bytes_.size() - at_; }

  void need(std::size_t n, const char* what) {
    if (at_ + n > bytes_.size())
      throw UserError("checkpoint: '" + path_ + "' truncated while reading " + what +
                      " at offset " + std::to_string(at_));
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return bytes_[at_++];
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(bytes_[at_++]) << (8 * i);
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(bytes_[at_++]) << (8 * i);
    return v;
  }
  std::string str(const char* what) {
    std::uint32_t n = u32(what);
    if (n > (1u << 20))
      throw UserError("checkpoint: '" + path_ + "' has an implausible name length " +
                      std::to_string(n) + " at offset " + std::to_string(at_ - 4));
    need(n, what);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + at_), n);
    at_ += n;
    return s;
  }
  void raw(void* dst, std::size_t n, const char* what) {
    need(n, what);
    std::memcpy(dst, bytes_.data() + at_, n);
    at_ += n;
  }
  const std::vector<std::uint8_t>& bytes() const { return bytes_; }
  const std::string& path() const { return path_; }

 private:
  std::vector<std::uint8_t> bytes_;
  std::string path_;
  std::size_t at_ = 0;
};

Storage read_storage(Reader& r, Dtype dt, std::size_t count, const char* what) {
  Storage s(dt, count);
  r.raw(s.raw(), count * dtype_size(dt), what);
  return s;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ParamStore& params,
                     std::uint64_t config_digest, std::uint64_t step, const Adam* optimizer) {
  Writer w;
  w.raw(kMagic, 4);
  w.u32(kVersion);
  w.u64(config_digest);
  w.u64(step);
  w.u8(optimizer ? 1 : 0);
  w.u32(static_cast<std::uint32_t>(params.all().size()));
  for (const Tensor& p : params.all()) {
    w.str(p.name());
    w.u8(static_cast<std::uint8_t>(p.dtype()));
    w.u32(static_cast<std::uint32_t>(p.rank()));
    for (auto d : p.shape()) w.u64(static_cast<std::uint64_t>(d));
    w.storage(p.values());
  }
  if (optimizer) {
    w.u64(static_cast<std::uint64_t>(optimizer->step_count()));
    const auto& params_list = params.all();
    for (std::size_t i = 0; i < params_list.size(); ++i) {
      w.storage(optimizer->first_moments()[i]);
      w.storage(optimizer->second_moments()[i]);
    }
  }
  std::uint64_t checksum = fnv1a(w.bytes().data(), w.bytes().size());

  std::ofstream f(path, std::ios::binary);
  if (!f) throw UserError("checkpoint: cannot open '" + path.string() + "' for writing");
  f.write(reinterpret_cast<const char*>(w.bytes().data()),
          static_cast<std::streamsize>(w.bytes().size()));
  f.write(reinterpret_cast<const char*>(&checksum), 8);
  if (!f) throw UserError("checkpoint: write failed for '" + path.string() + "'");
}

CheckpointData load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw UserError("checkpoint: cannot open '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
  if (bytes.size() < 12)
    throw UserError("checkpoint: '" + path.string() + "' is too small to be valid");

  std::uint64_t stored_checksum;
  std::memcpy(&stored_checksum, bytes.data() + bytes.size() - 8, 8);
  std::uint64_t actual = fnv1a(bytes.data(), bytes.size() - 8);
  if (stored_checksum != actual)
    throw UserError("checkpoint: '" + path.string() +
                    "' failed its checksum (payload corrupt near offset 0.." +
                    std::to_string(bytes.size() - 8) + ")");
  bytes.resize(bytes.size() - 8);

  Reader r(std::move(bytes), path.string());
  char magic[4];
  r.raw(magic, 4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0)
    throw UserError("checkpoint: '" + path.string() + "' has wrong magic bytes at offset 0");

  CheckpointData data;
  data.version = r.u32("version");
  if (data.version != kVersion)
    throw UserError("checkpoint: '" + path.string() + "' has unsupported format version " +
                    std::to_string(data.version) + " (expected " + std::to_string(kVersion) +
                    ")");
  data.config_digest = r.u64("config digest");
  data.step = r.u64("step");
  data.has_optimizer = r.u8("optimizer flag") != 0;
  std::uint32_t count = r.u32("parameter count");

  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str("parameter name");
    std::uint8_t dt_tag = r.u8("dtype tag");
    if (dt_tag > 1)
      throw UserError("checkpoint: '" + path.string() + "' has unknown dtype tag at offset " +
                      std::to_string(r.offset() - 1));
    Dtype dt = static_cast<Dtype>(dt_tag);
    std::uint32_t rank = r.u32("rank");
    if (rank > 8)
      throw UserError("checkpoint: '" + path.string() + "' has implausible rank " +
                      std::to_string(rank) + " at offset " + std::to_string(r.offset() - 4));
    std::vector<std::int64_t> shape;
    std::int64_t numel = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      shape.push_back(static_cast<std::int64_t>(r.u64("shape extent")));
      numel *= shape.back();
    }
    Tensor t = Tensor::zeros(dt, shape);
    r.raw(t.values().raw(), static_cast<std::size_t>(numel) * dtype_size(dt),
          "parameter values");
    data.params.emplace_back(std::move(name), std::move(t));
  }

  if (data.has_optimizer) {
    data.opt_step = static_cast<std::int64_t>(r.u64("optimizer step"));
    for (const auto& [name, t] : data.params) {
      (void)name;
      data.opt_m.push_back(
          read_storage(r, t.dtype(), static_cast<std::size_t>(t.numel()), "adam m"));
      data.opt_v.push_back(
          read_storage(r, t.dtype(), static_cast<std::size_t>(t.numel()), "adam v"));
    }
  }
  if (r.remaining() != 0)
    throw UserError("checkpoint: '" + path.string() + "' has " +
                    std::to_string(r.remaining()) + " unexpected trailing bytes at offset " +
                    std::to_string(r.offset()));
  return data;
}

void apply_checkpoint(const CheckpointData& data, ParamStore& params, Adam* optimizer) {
  if (data.params.size() != params.all().size())
    throw UserError("checkpoint: parameter count " + std::to_string(data.params.size()) +
                    " does not match the model's " + std::to_string(params.all().size()));
  for (const auto& [name, value] : data.params) {
    if (!params.has(name)) throw UserError("checkpoint: model has no parameter '" + name + "'");
    Tensor dst = params.get(name);
    if (dst.shape() != value.shape())
      throw UserError("checkpoint: shape mismatch for '" + name + "'");
    if (dst.dtype() == value.dtype()) {
      dst.values() = value.values();
    } else {
      for (std::int64_t i = 0; i < dst.numel(); ++i) dst.values().set(i, value.value_at(i));
    }
  }
  if (optimizer && data.has_optimizer) {
    std::vector<Storage> m = data.opt_m, v = data.opt_v;
    optimizer->restore(std::move(m), std::move(v), data.opt_step);
  }
}

}  // namespace lirf
