#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <type_traits>

#include "json.hpp"

#include "mrc/errors.hpp"
#include "mrc/nn.hpp"

namespace mrc {

// Versioned binary container:
//   "MRCCKPT\0" | u32 version | u32 n_sections | sections...
// Section: u32 name_len | name | u8 kind (0 = json, 1 = params) | u64 len | payload
// Params payload: u32 dtype_size | u32 count | per param: u32 name_len | name |
//   u32 ndim | i32 dims[ndim] | raw values.
// All integers little-endian (the only supported host order).
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  nlohmann::json meta;
  std::map<std::string, nn::ParamSet<float>> tensors;
};

namespace detail {

template <typename I>
void put(std::string& buf, I v) {
  static_assert(std::is_trivially_copyable_v<I>);
  const auto* p = reinterpret_cast<const char*>(&v);
  buf.append(p, sizeof v);
}

inline void put_str(std::string& buf, const std::string& s) {
  put<std::uint32_t>(buf, static_cast<std::uint32_t>(s.size()));
  buf += s;
}

class Reader {
public:
  Reader(const std::string& data, std::string what) : d_(data), what_(std::move(what)) {}
  template <typename I>
  I get() {
    need(sizeof(I));
    I v;
    std::memcpy(&v, d_.data() + pos_, sizeof v);
    pos_ += sizeof v;
    return v;
  }
  std::string str() {
    const auto n = get<std::uint32_t>();
    return bytes(n);
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = d_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == d_.size(); }

private:
  void need(std::size_t n) const {
    if (pos_ + n > d_.size()) throw MalformedRecord(what_ + ": truncated checkpoint");
  }
  const std::string& d_;
  std::string what_;
  std::size_t pos_ = 0;
};

inline std::string encode_params(const nn::ParamSet<float>& ps) {
  std::string buf;
  put<std::uint32_t>(buf, sizeof(float));
  put<std::uint32_t>(buf, static_cast<std::uint32_t>(ps.size()));
  for (const auto& p : ps) {
    put_str(buf, p.name);
    put<std::uint32_t>(buf, static_cast<std::uint32_t>(p.shape.size()));
    for (int d : p.shape) put<std::int32_t>(buf, d);
    buf.append(reinterpret_cast<const char*>(p.value.data()), p.value.size() * sizeof(float));
  }
  return buf;
}

inline nn::ParamSet<float> decode_params(const std::string& payload, const std::string& what) {
  Reader r(payload, what);
  if (r.get<std::uint32_t>() != sizeof(float)) throw MalformedRecord(what + ": unsupported dtype");
  const auto n = r.get<std::uint32_t>();
  nn::ParamSet<float> ps;
  for (std::uint32_t i = 0; i < n; ++i) {
    auto name = r.str();
    const auto nd = r.get<std::uint32_t>();
    std::vector<int> shape(nd);
    for (auto& d : shape) d = r.get<std::int32_t>();
    const int idx = ps.add(name, shape);
    auto& v = ps[idx].value;
    const auto raw = r.bytes(v.size() * sizeof(float));
    std::memcpy(v.data(), raw.data(), raw.size());
  }
  return ps;
}

} // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  std::string buf("MRCCKPT\0", 8);
  detail::put<std::uint32_t>(buf, Checkpoint::kVersion);
  detail::put<std::uint32_t>(buf, static_cast<std::uint32_t>(1 + ck.tensors.size()));
  auto section = [&](const std::string& name, std::uint8_t kind, const std::string& payload) {
    detail::put_str(buf, name);
    detail::put<std::uint8_t>(buf, kind);
    detail::put<std::uint64_t>(buf, payload.size());
    buf += payload;
  };
  section("meta", 0, ck.meta.dump());
  for (const auto& [name, ps] : ck.tensors) section(name, 1, detail::encode_params(ps));

  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write " + tmp);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw IoError("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingFile(path.string());
  const std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  detail::Reader r(data, path.string());
  if (r.bytes(8) != std::string("MRCCKPT\0", 8)) throw MalformedRecord(path.string() + ": bad magic");
  const auto version = r.get<std::uint32_t>();
  if (version != Checkpoint::kVersion)
    throw MalformedRecord(path.string() + ": unsupported version " + std::to_string(version));
  const auto n = r.get<std::uint32_t>();
  Checkpoint ck;
  for (std::uint32_t i = 0; i < n; ++i) {
    const auto name = r.str();
    const auto kind = r.get<std::uint8_t>();
    const auto len = r.get<std::uint64_t>();
    const auto payload = r.bytes(len);
    if (kind == 0) ck.meta = nlohmann::json::parse(payload);
    else ck.tensors[name] = detail::decode_params(payload, path.string() + ":" + name);
  }
  if (!r.done()) throw MalformedRecord(path.string() + ": trailing bytes");
  return ck;
}

} // namespace mrc
