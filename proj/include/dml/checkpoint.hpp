#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <type_traits>
#include <vector>

#include "dml/keyvalue.hpp"
#include "dml/model.hpp"

namespace dml {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

enum class DType : std::uint8_t { f32 = 0, f64 = 1, u8 = 2 };

inline std::size_t dtype_size(DType t) {
  switch (t) {
    case DType::f32: return 4;
    case DType::f64: return 8;
    case DType::u8: return 1;
  }
  throw DataError("unknown dtype tag");
}

template <typename T>
constexpr DType dtype_of() {
  if constexpr (std::is_same_v<T, float>) return DType::f32;
  else if constexpr (std::is_same_v<T, double>) return DType::f64;
  else {
    static_assert(std::is_same_v<T, std::uint8_t>);
    return DType::u8;
  }
}

/// Versioned binary container:
///   "DMLS" | u32 version | u32 meta length | meta (key = value text)
///   | u32 entry count | entries
/// Each entry: u32 name length | name | u8 dtype | 4 x u32 dims | raw values.
/// All integers and values are little-endian.
struct Container {
  static constexpr std::uint32_t kVersion = 1;

  struct Entry {
    std::string name;
    DType dtype = DType::f32;
    Shape shape;
    std::vector<std::uint8_t> bytes;

    template <typename T>
    std::vector<T> values() const {
      if (dtype != dtype_of<T>()) throw DataError("entry '" + name + "' has a different dtype");
      std::vector<T> out(shape.numel());
      std::memcpy(out.data(), bytes.data(), bytes.size());
      return out;
    }
  };

  KeyValues meta;
  std::vector<Entry> entries;

  template <typename T>
  void add(const std::string& name, Shape shape, const T* values) {
    Entry e{name, dtype_of<T>(), shape, std::vector<std::uint8_t>(shape.numel() * sizeof(T))};
    std::memcpy(e.bytes.data(), values, e.bytes.size());
    entries.push_back(std::move(e));
  }

  const Entry* find(const std::string& name) const {
    for (const auto& e : entries)
      if (e.name == name) return &e;
    return nullptr;
  }

  const Entry& get(const std::string& name) const {
    if (const Entry* e = find(name)) return *e;
    throw DataError("container has no entry '" + name + "'");
  }

  std::vector<std::uint8_t> serialize() const {
    std::vector<std::uint8_t> out;
    auto put32 = [&](std::uint32_t v) {
      for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    };
    auto put = [&](const void* p, std::size_t n) {
      const auto* b = static_cast<const std::uint8_t*>(p);
      out.insert(out.end(), b, b + n);
    };
    put("DMLS", 4);
    put32(kVersion);
    const std::string text = meta.to_text();
    put32(static_cast<std::uint32_t>(text.size()));
    put(text.data(), text.size());
    put32(static_cast<std::uint32_t>(entries.size()));
    for (const auto& e : entries) {
      put32(static_cast<std::uint32_t>(e.name.size()));
      put(e.name.data(), e.name.size());
      out.push_back(static_cast<std::uint8_t>(e.dtype));
      for (std::size_t d : {e.shape.n, e.shape.c, e.shape.h, e.shape.w}) put32(static_cast<std::uint32_t>(d));
      put(e.bytes.data(), e.bytes.size());
    }
    return out;
  }

  static Container deserialize(const std::vector<std::uint8_t>& buf, const std::string& origin = "<buffer>") {
    std::size_t pos = 0;
    auto need = [&](std::size_t n) {
      if (buf.size() - pos < n) throw DataError("truncated container '" + origin + "'");
    };
    auto get32 = [&]() {
      need(4);
      std::uint32_t v = 0;
      for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf[pos + i]) << (8 * i);
      pos += 4;
      return v;
    };
    auto get_string = [&](std::size_t n) {
      need(n);
      std::string s(reinterpret_cast<const char*>(buf.data() + pos), n);
      pos += n;
      return s;
    };
    if (get_string(4) != "DMLS") throw DataError("'" + origin + "' is not a DMLS container");
    const std::uint32_t version = get32();
    if (version != kVersion)
      throw DataError(detail::concat("'", origin, "' has container version ", version, ", this build reads ", kVersion));
    Container c;
    try {
      c.meta = KeyValues::parse(get_string(get32()), origin);
    } catch (const ConfigError& e) {
      throw DataError(std::string("corrupt container metadata: ") + e.what());
    }
    const std::uint32_t count = get32();
    for (std::uint32_t i = 0; i < count; ++i) {
      Entry e;
      e.name = get_string(get32());
      need(1);
      const std::uint8_t tag = buf[pos++];
      if (tag > 2) throw DataError(detail::concat("entry '", e.name, "' has unknown dtype tag ", int(tag)));
      e.dtype = static_cast<DType>(tag);
      e.shape.n = get32();
      e.shape.c = get32();
      e.shape.h = get32();
      e.shape.w = get32();
      const std::size_t n = e.shape.numel() * dtype_size(e.dtype);
      need(n);
      e.bytes.assign(buf.begin() + static_cast<std::ptrdiff_t>(pos), buf.begin() + static_cast<std::ptrdiff_t>(pos + n));
      pos += n;
      c.entries.push_back(std::move(e));
    }
    if (pos != buf.size()) throw DataError("trailing bytes in container '" + origin + "'");
    return c;
  }

  void save(const std::string& path) const {
    const auto bytes = serialize();
    const std::string tmp = path + ".tmp";
    {
      std::ofstream out(tmp, std::ios::binary);
      if (!out) throw DataError("cannot write '" + tmp + "'");
      out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
      if (!out) throw DataError("short write to '" + tmp + "'");
    }
    std::filesystem::rename(tmp, path);
  }

  static Container load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open '" + path + "'");
    std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize(buf, path);
  }
};

/// Parameters under their own names, momentum buffers under "opt/<name>",
/// the model configuration in the metadata.
template <typename T>
Container make_checkpoint(const Model<T>& model, const KeyValues& extra = {}) {
  Container c;
  c.meta = model.config().to_kv();
  c.meta.merge(extra);
  for (const auto& p : model.params().all()) c.add<T>(p.name, p.tensor.shape(), p.tensor.data().data());
  for (const auto& p : model.params().all()) c.add<T>("opt/" + p.name, p.tensor.shape(), p.momentum.data());
  return c;
}

template <typename T>
void save_checkpoint(const std::string& path, const Model<T>& model, const KeyValues& extra = {}) {
  make_checkpoint(model, extra).save(path);
}

inline ModelConfig checkpoint_config(const Container& c) {
  try {
    return ModelConfig::from_kv(c.meta);
  } catch (const ConfigError& e) {
    throw DataError(std::string("checkpoint carries an invalid model configuration: ") + e.what());
  }
}

/// Copies parameters (and momentum, when present) into a model whose
/// configuration matches the checkpoint.
template <typename T>
void restore_checkpoint(const Container& c, Model<T>& model) {
  if (!(checkpoint_config(c) == model.config())) throw ConfigError("checkpoint configuration does not match the model");
  for (auto& p : model.params().all()) {
    const auto& e = c.get(p.name);
    if (!(e.shape == p.tensor.shape()))
      throw ConfigError(detail::concat("parameter '", p.name, "' has shape ", e.shape, " in checkpoint, model expects ",
                                       p.tensor.shape()));
    const auto values = e.template values<T>();
    std::copy(values.begin(), values.end(), p.tensor.data().begin());
    if (const auto* m = c.find("opt/" + p.name)) p.momentum = m->template values<T>();
  }
}

template <typename T>
Model<T> load_model(const Container& c) {
  Model<T> model(checkpoint_config(c), 0);
  restore_checkpoint(c, model);
  return model;
}

}  // namespace dml
