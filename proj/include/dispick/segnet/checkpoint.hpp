#pragma once

// Checkpoint layout (all integers and floats little-endian):
//   8 bytes  magic "DSPKNET1"
//   u32      depth, base_channels, in_channels, classes
//   u64      Adam step counter t
//   u32      tensor count N (kernel, bias per layer in layer_specs order)
//   N blocks of f32 parameters, then N blocks of Adam m, then N of Adam v

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>

#include "adam.hpp"
#include "unet.hpp"

namespace dispick::segnet {

inline constexpr std::array<char, 8> kCheckpointMagic{'D', 'S', 'P', 'K', 'N', 'E', 'T', '1'};

struct Checkpoint {
  UNetParams<float> params;
  AdamState<float> adam;
};

namespace detail {

template <class U>
void put(std::ofstream& out, U v) {
  static_assert(std::endian::native == std::endian::little);
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class U>
U get(std::ifstream& in, const std::filesystem::path& p) {
  U v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw DataError(p.string() + ": truncated checkpoint");
  return v;
}

inline void put_block(std::ofstream& out, const Tensor<float>& t) {
  out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
}

inline void get_block(std::ifstream& in, Tensor<float>& t, const std::filesystem::path& p) {
  if (!in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float))))
    throw DataError(p.string() + ": truncated checkpoint");
  if (!t.all_finite()) throw DataError(p.string() + ": checkpoint holds non-finite values");
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& p, const UNetParams<float>& params,
                            const AdamState<float>* adam = nullptr) {
  validate_params(params);
  if (!p.parent_path().empty()) std::filesystem::create_directories(p.parent_path());
  const auto tmp = std::filesystem::path(p.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write checkpoint " + p.string());
    out.write(kCheckpointMagic.data(), kCheckpointMagic.size());
    const auto& c = params.config;
    for (auto v : {c.depth, c.base_channels, c.in_channels, c.classes}) detail::put(out, static_cast<std::uint32_t>(v));
    detail::put(out, static_cast<std::uint64_t>(adam ? adam->t : 0));
    detail::put(out, static_cast<std::uint32_t>(params.tensors.size()));
    for (const auto& t : params.tensors) detail::put_block(out, t);
    const auto zeros = zeros_like(params.tensors);
    for (std::size_t i = 0; i < zeros.size(); ++i) detail::put_block(out, adam ? adam->m.at(i) : zeros[i]);
    for (std::size_t i = 0; i < zeros.size(); ++i) detail::put_block(out, adam ? adam->v.at(i) : zeros[i]);
    if (!out) throw DataError("failed writing checkpoint " + p.string());
  }
  std::filesystem::rename(tmp, p);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("checkpoint not found: " + p.string());
  std::array<char, 8> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kCheckpointMagic)
    throw DataError(p.string() + ": not a checkpoint (bad magic)");
  UNetConfig c;
  c.depth = detail::get<std::uint32_t>(in, p);
  c.base_channels = detail::get<std::uint32_t>(in, p);
  c.in_channels = detail::get<std::uint32_t>(in, p);
  c.classes = detail::get<std::uint32_t>(in, p);
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw DataError(p.string() + ": bad architecture block: " + e.what());
  }
  const auto t = detail::get<std::uint64_t>(in, p);
  const auto n = detail::get<std::uint32_t>(in, p);
  const auto specs = layer_specs(c);
  if (n != 2 * specs.size())
    throw DataError(p.string() + ": tensor count " + std::to_string(n) + " does not match architecture");
  Checkpoint ck{{c, {}}, {}};
  for (const auto& s : specs) {
    ck.params.tensors.emplace_back(s.kernel);
    ck.params.tensors.emplace_back(Tensor<float>::Shape{s.kernel.back()});
  }
  for (auto& x : ck.params.tensors) detail::get_block(in, x, p);
  ck.adam = AdamState<float>::zeros_for(ck.params.tensors);
  ck.adam.t = static_cast<std::int64_t>(t);
  for (auto& x : ck.adam.m) detail::get_block(in, x, p);
  for (auto& x : ck.adam.v) detail::get_block(in, x, p);
  if (in.peek() != std::char_traits<char>::eof()) throw DataError(p.string() + ": trailing bytes after checkpoint");
  return ck;
}

}  // namespace dispick::segnet
