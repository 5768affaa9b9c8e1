#pragma once

// Binary checkpoint: "CDPO", u32 version, u32 tensor count, then per tensor
// u32 name length, name, u32 rank, u64 dims, f64 payload; then u32-prefixed
// config JSON and RNG state text. All integers and floats little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cdpo/diffcore.hpp"
#include "cdpo/error.hpp"

namespace cdpo {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::map<std::string, diff::Tensor> tensors;  // serialized in name order
  nlohmann::ordered_json config = nlohmann::ordered_json::object();
  std::string rng_state;

  void put(const std::string& name, const diff::Tensor& t) { tensors[name] = t; }

  const diff::Tensor& get(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw LookupError("checkpoint: missing tensor '" + name + "'");
    return it->second;
  }

  bool has(const std::string& name) const { return tensors.contains(name); }

  void put_parameters(const std::vector<diff::Parameter*>& ps) {
    for (const auto* p : ps) put(p->name, p->value);
  }

  void load_parameters(const std::vector<diff::Parameter*>& ps) const {
    for (auto* p : ps) {
      const auto& t = get(p->name);
      if (t.shape() != p->value.shape()) {
        throw ShapeError("checkpoint: tensor '" + p->name + "' has shape " + t.shape_string() + ", model expects " +
                         p->value.shape_string());
      }
      p->value = t;
      p->zero_grad();
    }
  }

  std::string to_bytes() const {
    std::string out = "CDPO";
    put_u32(out, kCheckpointVersion);
    put_u32(out, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
      put_u32(out, static_cast<std::uint32_t>(name.size()));
      out += name;
      put_u32(out, 2);
      put_u64(out, t.rows());
      put_u64(out, t.cols());
      for (double x : t.data()) put_u64(out, std::bit_cast<std::uint64_t>(x));
    }
    const std::string cfg = config.dump();
    put_u32(out, static_cast<std::uint32_t>(cfg.size()));
    out += cfg;
    put_u32(out, static_cast<std::uint32_t>(rng_state.size()));
    out += rng_state;
    return out;
  }

  static Checkpoint from_bytes(const std::string& bytes) {
    Reader r{bytes};
    if (bytes.size() < 4 || bytes.compare(0, 4, "CDPO") != 0) throw FormatError("checkpoint: bad magic (not a CDPO file)");
    r.pos = 4;
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion) {
      throw FormatError("checkpoint: unsupported version " + std::to_string(version) + " (this reader handles " +
                        std::to_string(kCheckpointVersion) + ")");
    }
    Checkpoint c;
    const std::uint32_t n = r.u32();
    for (std::uint32_t i = 0; i < n; ++i) {
      std::string name = r.str(r.u32());
      const std::uint32_t rank = r.u32();
      if (rank != 2) throw FormatError("checkpoint: tensor '" + name + "' has rank " + std::to_string(rank));
      const std::uint64_t rows = r.u64(), cols = r.u64();
      if (rows == 0 || cols == 0 || rows * cols > (bytes.size() - r.pos) / 8) {
        throw FormatError("checkpoint: tensor '" + name + "' has bad dimensions");
      }
      std::vector<double> data(rows * cols);
      for (auto& x : data) x = std::bit_cast<double>(r.u64());
      if (!c.tensors.emplace(name, diff::Tensor(rows, cols, std::move(data))).second) {
        throw FormatError("checkpoint: duplicate tensor '" + name + "'");
      }
    }
    try {
      c.config = nlohmann::ordered_json::parse(r.str(r.u32()));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("checkpoint: bad config JSON: ") + e.what());
    }
    c.rng_state = r.str(r.u32());
    if (r.pos != bytes.size()) throw FormatError("checkpoint: trailing bytes");
    return c;
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path);
    const auto b = to_bytes();
    out.write(b.data(), static_cast<std::streamsize>(b.size()));
  }

  static Checkpoint load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot read checkpoint " + path);
    std::ostringstream s;
    s << in.rdbuf();
    return from_bytes(s.str());
  }

 private:
  static void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out += static_cast<char>((v >> (8 * i)) & 0xff);
  }
  static void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out += static_cast<char>((v >> (8 * i)) & 0xff);
  }

  struct Reader {
    const std::string& b;
    std::size_t pos = 0;

    void need(std::size_t n) const {
      if (b.size() - pos < n) throw FormatError("checkpoint: truncated file");
    }
    std::uint64_t uint(int bytes) {
      need(static_cast<std::size_t>(bytes));
      std::uint64_t v = 0;
      for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b[pos++])) << (8 * i);
      return v;
    }
    std::uint32_t u32() { return static_cast<std::uint32_t>(uint(4)); }
    std::uint64_t u64() { return uint(8); }
    std::string str(std::size_t n) {
      need(n);
      std::string s = b.substr(pos, n);
      pos += n;
      return s;
    }
  };
};

}  // namespace cdpo
