#pragma once

// Checkpoint container:
//
//   bytes 0..7   "SATKIT01"
//   u64 LE       manifest length N
//   N bytes      manifest text:
//                  [config]   model config, "key = value" lines
//                  [run]      run config, same form
//                  [meta]     training state, same form
//                  [tensors]  "name dtype ndim d0 .. d{ndim-1} offset nbytes"
//   payload      raw little-endian tensor data; offsets are relative to the
//                first payload byte
//
// dtype is f64 or f32.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <span>
#include <type_traits>
#include <iterator>
#include <vector>

#include "satkit/config.hpp"
#include "satkit/model.hpp"
#include "satkit/optim.hpp"

namespace satkit {

inline constexpr char kCheckpointMagic[9] = "SATKIT01";

struct CheckpointTensor {
  Shape shape;
  std::string dtype;
  std::vector<double> values;
};

struct Checkpoint {
  KeyValues model_config;
  KeyValues run_config;
  KeyValues meta;
  std::vector<std::string> order;
  std::map<std::string, CheckpointTensor> tensors;

  template <class Real>
  void add(const std::string& name, const Shape& shape, std::span<const Real> v) {
    CheckpointTensor t;
    t.shape = shape;
    t.dtype = sizeof(Real) == 8 ? "f64" : "f32";
    t.values.assign(v.begin(), v.end());
    if (!tensors.count(name)) order.push_back(name);
    tensors[name] = std::move(t);
  }
};

namespace detail {

template <class T>
void put_le(std::string& out, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  out.append(buf, sizeof(T));
}

template <class T>
T get_le(const char* p) {
  char buf[sizeof(T)];
  std::memcpy(buf, p, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

inline void write_section(std::ostringstream& os, const char* name, const KeyValues& kv) {
  os << '[' << name << "]\n" << kv.str();
}

}  // namespace detail

inline void write_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::string payload;
  std::ostringstream man;
  detail::write_section(man, "config", ck.model_config);
  detail::write_section(man, "run", ck.run_config);
  detail::write_section(man, "meta", ck.meta);
  man << "[tensors]\n";
  for (const auto& name : ck.order) {
    const auto& t = ck.tensors.at(name);
    const std::size_t offset = payload.size();
    for (double v : t.values) {
      if (t.dtype == "f64")
        detail::put_le<double>(payload, v);
      else
        detail::put_le<float>(payload, static_cast<float>(v));
    }
    man << name << ' ' << t.dtype << ' ' << t.shape.size();
    for (auto d : t.shape) man << ' ' << d;
    man << ' ' << offset << ' ' << payload.size() - offset << '\n';
  }
  const std::string manifest = man.str();
  std::string head(kCheckpointMagic, 8);
  detail::put_le<std::uint64_t>(head, manifest.size());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot write checkpoint: " + path);
  f << head << manifest << payload;
  if (!f) throw Error("failed writing checkpoint: " + path);
}

inline Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot read checkpoint: " + path);
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (bytes.size() < 16 || bytes.compare(0, 8, kCheckpointMagic) != 0)
    throw Error("checkpoint: bad magic in " + path);
  const auto mlen = detail::get_le<std::uint64_t>(bytes.data() + 8);
  if (16 + mlen > bytes.size()) throw Error("checkpoint: truncated manifest in " + path);
  const std::string manifest = bytes.substr(16, mlen);
  const char* payload = bytes.data() + 16 + mlen;
  const std::size_t payload_len = bytes.size() - 16 - mlen;

  Checkpoint ck;
  std::istringstream ms(manifest);
  std::string line, section;
  std::map<std::string, std::ostringstream> sections;
  while (std::getline(ms, line)) {
    if (!line.empty() && line.front() == '[' && line.back() == ']') {
      section = line.substr(1, line.size() - 2);
      continue;
    }
    if (section != "tensors") {
      sections[section] << line << '\n';
      continue;
    }
    std::istringstream ls(line);
    std::string name, dtype;
    std::size_t ndim = 0, offset = 0, nbytes = 0;
    if (!(ls >> name >> dtype >> ndim)) continue;
    CheckpointTensor t;
    t.dtype = dtype;
    t.shape.resize(ndim);
    for (auto& d : t.shape) ls >> d;
    if (!(ls >> offset >> nbytes)) throw Error("checkpoint: malformed tensor entry: " + line);
    const std::size_t width = dtype == "f64" ? 8 : dtype == "f32" ? 4 : 0;
    if (width == 0) throw Error("checkpoint: unknown dtype " + dtype);
    const std::size_t n = shape_numel(t.shape);
    if (nbytes != n * width || offset + nbytes > payload_len)
      throw Error("checkpoint: tensor " + name + " has inconsistent size");
    t.values.resize(n);
    for (std::size_t i = 0; i < n; ++i)
      t.values[i] = width == 8 ? detail::get_le<double>(payload + offset + 8 * i)
                               : static_cast<double>(detail::get_le<float>(payload + offset + 4 * i));
    ck.order.push_back(name);
    ck.tensors[name] = std::move(t);
  }
  auto kv = [&](const char* s) {
    std::istringstream is(sections[s].str());
    return KeyValues::parse(is, path);
  };
  ck.model_config = kv("config");
  ck.run_config = kv("run");
  ck.meta = kv("meta");
  return ck;
}

template <class Real>
void store_model(Checkpoint& ck, const SatModel<Real>& model) {
  ck.model_config = model.config().to_kv();
  for (const auto& e : model.params().entries()) ck.add<Real>(e.name, e.tensor.shape(), e.tensor.data());
}

// Copies checkpoint parameters into `model`. The stored model config must
// match the model's, and every parameter must be present with its shape.
template <class Real>
void load_model(const Checkpoint& ck, SatModel<Real>& model) {
  const auto stored = ModelConfig::from_kv(ck.model_config);
  if (!(stored == model.config()))
    throw Error("checkpoint: model config conflicts with the requested one");
  for (auto& e : model.params().entries()) {
    auto it = ck.tensors.find(e.name);
    if (it == ck.tensors.end()) throw Error("checkpoint: missing parameter " + e.name);
    if (it->second.shape != e.tensor.shape())
      throw ShapeError("checkpoint: parameter " + e.name + " has shape " + shape_str(it->second.shape) +
                       ", model expects " + shape_str(e.tensor.shape()));
    auto d = e.tensor.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<Real>(it->second.values[i]);
  }
}

template <class Real>
void store_optimizer(Checkpoint& ck, const SatModel<Real>& model, Optimizer<Real>& opt) {
  opt.ensure_state(model.params());
  const auto& entries = model.params().entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    ck.add<Real>("opt.m." + entries[i].name, entries[i].tensor.shape(), std::span<const Real>(opt.first_moments()[i]));
    ck.add<Real>("opt.v." + entries[i].name, entries[i].tensor.shape(), std::span<const Real>(opt.second_moments()[i]));
  }
}

template <class Real>
void load_optimizer(const Checkpoint& ck, const SatModel<Real>& model, Optimizer<Real>& opt) {
  opt.ensure_state(model.params());
  const auto& entries = model.params().entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    for (auto [prefix, buf] : {std::pair{"opt.m.", &opt.first_moments()[i]}, std::pair{"opt.v.", &opt.second_moments()[i]}}) {
      auto it = ck.tensors.find(prefix + entries[i].name);
      if (it == ck.tensors.end()) throw Error("checkpoint: missing optimizer state for " + entries[i].name);
      if (it->second.values.size() != buf->size()) throw Error("checkpoint: optimizer state size mismatch");
      for (std::size_t j = 0; j < buf->size(); ++j) (*buf)[j] = static_cast<Real>(it->second.values[j]);
    }
  }
}

}  // namespace satkit
