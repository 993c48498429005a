#pragma once

// Checkpoint container: tensor name -> shape + row-major values.
//
// JSON mode:   {"format":"elearnfit-checkpoint","version":1,"config":{...},
//               "lora":{"rank":p,"targets":["Wq","Wv"]} (optional),
//               "tensors":{name:{"shape":[r,c],"data":[...]}}}
// Binary mode: magic "ELFTCKPT", u64 header length, header JSON (same as
//               above with "offset" in place of "data"), then raw doubles.
// Doubles are written in shortest round-trip form, so both modes reload
// bit-exactly (JSON cannot carry NaN or infinity).

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "elearnfit/common.hpp"
#include "elearnfit/parameters.hpp"
#include "elearnfit/peft.hpp"

namespace elearnfit {

enum class CheckpointFormat { Json, Binary };

struct Checkpoint {
  Parameters params;
  std::optional<LoraAdapters> adapters;
};

namespace detail {

inline constexpr char kCheckpointMagic[8] = {'E', 'L', 'F', 'T', 'C', 'K', 'P', 'T'};
inline constexpr const char* kCheckpointFormat = "elearnfit-checkpoint";
inline constexpr int kCheckpointVersion = 1;

inline nlohmann::json checkpoint_header(const Parameters& params, const LoraAdapters* adapters) {
  nlohmann::json h;
  h["format"] = kCheckpointFormat;
  h["version"] = kCheckpointVersion;
  h["config"] = params.config;
  if (adapters) {
    nlohmann::json targets = nlohmann::json::array();
    for (auto t : adapters->targets) targets.push_back(std::string(proj_name(t)));
    h["lora"] = {{"rank", adapters->rank}, {"targets", targets}};
  }
  h["tensors"] = nlohmann::json::object();
  return h;
}

/// Visits every tensor of the checkpoint, base tensors first.
template <class F>
void each_checkpoint_tensor(const Parameters& params, const LoraAdapters* adapters, F&& f) {
  for_each_tensor([&](const std::string& n, const Mat& m) { f(n, m); }, params);
  if (adapters) for_each_lora_tensor([&](const std::string& n, const Mat& m) { f(n, m); }, *adapters);
}

template <class F>
void each_checkpoint_tensor(Parameters& params, LoraAdapters* adapters, F&& f) {
  for_each_tensor([&](const std::string& n, Mat& m) { f(n, m); }, params);
  if (adapters) for_each_lora_tensor([&](const std::string& n, Mat& m) { f(n, m); }, *adapters);
}

/// Allocates an empty model (and adapters) with the shapes the header
/// declares.
inline Checkpoint checkpoint_skeleton(const nlohmann::json& h) {
  if (!h.is_object() || h.value("format", std::string()) != kCheckpointFormat)
    throw Error("not an elearnfit checkpoint");
  if (h.value("version", 0) != kCheckpointVersion)
    throw Error("unsupported checkpoint version " + h.value("version", nlohmann::json()).dump());
  Checkpoint ck;
  ck.params = init_parameters(h.at("config").get<ModelConfig>(), 0);
  if (h.contains("lora")) {
    std::vector<AttnProj> targets;
    for (const auto& t : h["lora"].at("targets")) targets.push_back(parse_proj(t.get<std::string>()));
    ck.adapters = attach_lora(ck.params, h["lora"].at("rank").get<std::size_t>(), targets, 0);
  }
  return ck;
}

inline void check_shape(const std::string& name, const nlohmann::json& entry, const Mat& m) {
  const auto& shape = entry.at("shape");
  if (!shape.is_array() || shape.size() != 2 || shape[0].get<long long>() != m.rows() ||
      shape[1].get<long long>() != m.cols())
    throw Error("checkpoint tensor " + name + " has shape " + shape.dump() + ", expected [" +
                std::to_string(m.rows()) + "," + std::to_string(m.cols()) + "]");
}

inline void check_no_extra_tensors(const nlohmann::json& tensors, const Checkpoint& ck) {
  std::size_t expected = 0;
  each_checkpoint_tensor(ck.params, ck.adapters ? &*ck.adapters : nullptr,
                         [&](const std::string&, const Mat&) { ++expected; });
  if (tensors.size() != expected)
    throw Error("checkpoint holds " + std::to_string(tensors.size()) + " tensors, expected " +
                std::to_string(expected));
}

}  // namespace detail

inline nlohmann::json checkpoint_to_json(const Parameters& params, const LoraAdapters* adapters = nullptr) {
  auto h = detail::checkpoint_header(params, adapters);
  detail::each_checkpoint_tensor(params, adapters, [&](const std::string& name, const Mat& m) {
    nlohmann::json data = nlohmann::json::array();
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      if (!std::isfinite(m.data()[i])) throw Error("tensor " + name + " holds a non-finite value");
      data.push_back(m.data()[i]);
    }
    h["tensors"][name] = {{"shape", {m.rows(), m.cols()}}, {"data", std::move(data)}};
  });
  return h;
}

inline Checkpoint checkpoint_from_json(const nlohmann::json& j) {
  auto ck = detail::checkpoint_skeleton(j);
  const auto& tensors = j.at("tensors");
  detail::each_checkpoint_tensor(ck.params, ck.adapters ? &*ck.adapters : nullptr,
                                 [&](const std::string& name, Mat& m) {
                                   if (!tensors.contains(name)) throw Error("checkpoint is missing tensor " + name);
                                   const auto& e = tensors[name];
                                   detail::check_shape(name, e, m);
                                   const auto& data = e.at("data");
                                   if (!data.is_array() || data.size() != static_cast<std::size_t>(m.size()))
                                     throw Error("checkpoint tensor " + name + " has the wrong number of values");
                                   for (Eigen::Index i = 0; i < m.size(); ++i)
                                     m.data()[i] = data[static_cast<std::size_t>(i)].get<double>();
                                 });
  detail::check_no_extra_tensors(tensors, ck);
  return ck;
}

inline void write_checkpoint(std::ostream& out, const Parameters& params, const LoraAdapters* adapters,
                             CheckpointFormat format) {
  if (format == CheckpointFormat::Json) {
    out << checkpoint_to_json(params, adapters).dump() << '\n';
    return;
  }
  auto h = detail::checkpoint_header(params, adapters);
  std::uint64_t offset = 0;
  detail::each_checkpoint_tensor(params, adapters, [&](const std::string& name, const Mat& m) {
    h["tensors"][name] = {{"shape", {m.rows(), m.cols()}}, {"offset", offset}};
    offset += static_cast<std::uint64_t>(m.size());
  });
  const auto header = h.dump();
  out.write(detail::kCheckpointMagic, sizeof detail::kCheckpointMagic);
  const auto len = static_cast<std::uint64_t>(header.size());
  static_assert(std::endian::native == std::endian::little, "binary checkpoints assume little-endian hosts");
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  detail::each_checkpoint_tensor(params, adapters, [&](const std::string&, const Mat& m) {
    out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(sizeof(double) * m.size()));
  });
}

inline Checkpoint read_checkpoint(std::istream& in) {
  char magic[sizeof detail::kCheckpointMagic];
  in.read(magic, sizeof magic);
  if (in.gcount() == sizeof magic && std::memcmp(magic, detail::kCheckpointMagic, sizeof magic) == 0) {
    std::uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof len);
    if (!in || len > (std::uint64_t{1} << 32)) throw Error("corrupt checkpoint header");
    std::string header(len, '\0');
    in.read(header.data(), static_cast<std::streamsize>(len));
    if (!in) throw Error("truncated checkpoint header");
    nlohmann::json h;
    try {
      h = nlohmann::json::parse(header);
    } catch (const nlohmann::json::exception&) {
      throw Error("corrupt checkpoint header");
    }
    auto ck = detail::checkpoint_skeleton(h);
    const auto& tensors = h.at("tensors");
    std::vector<double> payload;
    std::uint64_t total = 0;
    detail::each_checkpoint_tensor(ck.params, ck.adapters ? &*ck.adapters : nullptr,
                                   [&](const std::string&, const Mat& m) { total += m.size(); });
    payload.resize(total);
    in.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(sizeof(double) * total));
    if (static_cast<std::uint64_t>(in.gcount()) != sizeof(double) * total) throw Error("truncated checkpoint data");
    detail::each_checkpoint_tensor(ck.params, ck.adapters ? &*ck.adapters : nullptr,
                                   [&](const std::string& name, Mat& m) {
                                     if (!tensors.contains(name)) throw Error("checkpoint is missing tensor " + name);
                                     const auto& e = tensors[name];
                                     detail::check_shape(name, e, m);
                                     const auto off = e.at("offset").get<std::uint64_t>();
                                     if (off + static_cast<std::uint64_t>(m.size()) > total)
                                       throw Error("checkpoint tensor " + name + " lies outside the data block");
                                     std::memcpy(m.data(), payload.data() + off, sizeof(double) * m.size());
                                   });
    detail::check_no_extra_tensors(tensors, ck);
    return ck;
  }
  in.clear();
  in.seekg(0);
  std::stringstream ss;
  ss << in.rdbuf();
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(ss.str());
  } catch (const nlohmann::json::exception&) {
    throw Error("not an elearnfit checkpoint");
  }
  return checkpoint_from_json(j);
}

inline void save_checkpoint(const std::filesystem::path& path, const Parameters& params,
                            const LoraAdapters* adapters = nullptr, CheckpointFormat format = CheckpointFormat::Binary) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  write_checkpoint(out, params, adapters, format);
  if (!out) throw Error("failed writing " + path.string());
}

/// Writes W0 + A B^T in place of each adapted W0, with no adapter tensors.
inline void save_merged_checkpoint(const std::filesystem::path& path, const Parameters& params,
                                   const LoraAdapters& adapters, CheckpointFormat format = CheckpointFormat::Binary) {
  save_checkpoint(path, merge_lora(params, adapters), nullptr, format);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint " + path.string());
  try {
    return read_checkpoint(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(path.string() + ": malformed checkpoint (" + e.what() + ")");
  } catch (const Error& e) {
    throw Error(path.string() + ": " + e.what());
  }
}

}  // namespace elearnfit
