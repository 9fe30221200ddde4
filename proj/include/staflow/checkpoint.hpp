#pragma once

#include <zlib.h>

#include <filesystem>
#include <fstream>

#include "staflow/config_json.hpp"
#include "staflow/model.hpp"

namespace staflow {

// SFNC checkpoint: magic "SFNC", u32 version=1, u32 config length, the
// JSON-encoded ArchConfig, then every learnable tensor followed by every
// batch-norm running buffer as little-endian f32 in declaration order, and a
// trailing CRC32 over all preceding bytes.

template <typename T>
void save_checkpoint(StaFlowParams<T>& params,
                     const std::filesystem::path& path) {
  const std::string config = arch_to_json(params.config).dump();

  std::vector<std::uint8_t> buf;
  buf.insert(buf.end(), {'S', 'F', 'N', 'C'});
  put_u32(buf, 1);
  put_u32(buf, static_cast<std::uint32_t>(config.size()));
  buf.insert(buf.end(), config.begin(), config.end());
  for (auto& np : params.named_parameters())
    for (const T v : np.tensor.values()) put_f32(buf, static_cast<float>(v));
  for (auto& nb : params.named_buffers())
    for (const T v : *nb.data) put_f32(buf, static_cast<float>(v));

  const auto crc = static_cast<std::uint32_t>(
      crc32(0L, buf.data(), static_cast<uInt>(buf.size())));
  put_u32(buf, crc);

  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size()));
  if (!out) throw DataError("write failure on " + path.string());
}

template <typename T>
StaFlowParams<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(in)),
                                std::istreambuf_iterator<char>());

  ByteReader r(buf.data(), buf.size(), path.string());
  char magic[4];
  r.raw(magic, 4);
  if (std::string(magic, 4) != "SFNC")
    throw DataError(path.string() + ": bad magic, not an SFNC checkpoint");
  const std::uint32_t version = r.u32();
  if (version != 1)
    throw DataError(path.string() + ": unsupported SFNC version " +
                    std::to_string(version));
  const std::uint32_t config_len = r.u32();
  r.need(config_len);
  std::string config_text(config_len, '\0');
  r.raw(config_text.data(), config_len);

  ArchConfig cfg;
  try {
    cfg = arch_from_json(nlohmann::json::parse(config_text));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": corrupt embedded config: " + e.what());
  }
  cfg.validate();

  // structure from the config, then overwrite with the stored payload
  Rng rng(0);
  auto params = init_params<T>(cfg, rng);
  std::size_t payload = 0;
  for (auto& np : params.named_parameters()) payload += np.tensor.size();
  for (auto& nb : params.named_buffers()) payload += nb.data->size();

  const std::size_t expected = r.offset() + payload * 4 + 4;
  if (buf.size() != expected)
    throw DataError(path.string() + ": truncated or oversized file, expected " +
                    std::to_string(expected) + " bytes but got " +
                    std::to_string(buf.size()));

  const auto computed = static_cast<std::uint32_t>(
      crc32(0L, buf.data(), static_cast<uInt>(buf.size() - 4)));
  ByteReader tail(buf.data() + buf.size() - 4, 4, path.string());
  if (computed != tail.u32())
    throw DataError(path.string() + ": CRC32 mismatch, checkpoint corrupted");

  for (auto& np : params.named_parameters())
    for (auto& v : np.tensor.values()) v = static_cast<T>(r.f32());
  for (auto& nb : params.named_buffers())
    for (auto& v : *nb.data) v = static_cast<T>(r.f32());
  return params;
}

}  // namespace staflow
