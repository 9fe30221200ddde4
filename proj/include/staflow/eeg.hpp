#pragma once

#include <zlib.h>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "staflow/common.hpp"
#include "staflow/csv_io.hpp"
#include "staflow/filter.hpp"

namespace staflow {

/// A set of EEG trials: per-trial channel-by-time samples in microvolts,
/// trial-major layout, one integer label per trial.
struct TrialSet {
  std::size_t n_trials = 0;
  std::size_t n_channels = 0;
  std::size_t n_samples = 0;
  float sample_rate_hz = 0.0f;
  std::size_t n_classes = 0;
  std::vector<int> labels;
  std::vector<float> data;  // [trial][channel][sample]
  std::vector<std::string> channel_names;  // optional; empty or n_channels

  float* trial(std::size_t t) { return data.data() + t * n_channels * n_samples; }
  const float* trial(std::size_t t) const {
    return data.data() + t * n_channels * n_samples;
  }
  float* channel(std::size_t t, std::size_t c) {
    return trial(t) + c * n_samples;
  }
  const float* channel(std::size_t t, std::size_t c) const {
    return trial(t) + c * n_samples;
  }

  void validate() const {
    if (n_samples == 0) throw DataError("trial set has n_samples == 0");
    if (!(sample_rate_hz > 0))
      throw DataError("trial set has non-positive sample rate");
    if (labels.size() != n_trials)
      throw DataError("trial set has " + std::to_string(labels.size()) +
                      " labels for " + std::to_string(n_trials) + " trials");
    if (data.size() != n_trials * n_channels * n_samples)
      throw DataError("trial set data length mismatch");
    if (!channel_names.empty() && channel_names.size() != n_channels)
      throw DataError("trial set channel name count mismatch");
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= n_classes)
        throw DataError("label " + std::to_string(labels[i]) + " of trial " +
                        std::to_string(i) + " outside [0," +
                        std::to_string(n_classes) + ")");
    }
  }
};

// ---------------------------------------------------------------------------
// EEGB binary format
// ---------------------------------------------------------------------------
// little-endian: magic "EEGB", u32 version=1, u32 n_trials, u32 n_channels,
// u32 n_samples, f32 sample_rate_hz, u32 n_classes, u8 has_channel_names,
// per channel (u32 length + utf-8 bytes) when flagged, u16 labels[n_trials],
// f32 data[n_trials][n_channels][n_samples], u32 crc32 of all prior bytes.

inline void save_eegb(const TrialSet& set, const std::filesystem::path& path) {
  set.validate();
  if (set.n_classes > 0xFFFF)
    throw DataError("EEGB stores labels as u16; n_classes too large");

  std::vector<std::uint8_t> buf;
  buf.reserve(64 + set.data.size() * 4 + set.labels.size() * 2);
  buf.insert(buf.end(), {'E', 'E', 'G', 'B'});
  put_u32(buf, 1);
  put_u32(buf, static_cast<std::uint32_t>(set.n_trials));
  put_u32(buf, static_cast<std::uint32_t>(set.n_channels));
  put_u32(buf, static_cast<std::uint32_t>(set.n_samples));
  put_f32(buf, set.sample_rate_hz);
  put_u32(buf, static_cast<std::uint32_t>(set.n_classes));
  buf.push_back(set.channel_names.empty() ? 0 : 1);
  if (!set.channel_names.empty()) {
    for (const auto& name : set.channel_names) {
      put_u32(buf, static_cast<std::uint32_t>(name.size()));
      buf.insert(buf.end(), name.begin(), name.end());
    }
  }
  for (int label : set.labels) put_u16(buf, static_cast<std::uint16_t>(label));
  for (float v : set.data) put_f32(buf, v);

  const auto crc =
      static_cast<std::uint32_t>(crc32(0L, buf.data(), static_cast<uInt>(buf.size())));
  put_u32(buf, crc);

  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size()));
  if (!out) throw DataError("write failure on " + path.string());
}

inline TrialSet load_eegb(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(in)),
                                std::istreambuf_iterator<char>());

  ByteReader r(buf.data(), buf.size(), path.string());
  char magic[4];
  r.raw(magic, 4);
  if (std::string(magic, 4) != "EEGB")
    throw DataError(path.string() + ": bad magic, not an EEGB file");
  const std::uint32_t version = r.u32();
  if (version != 1)
    throw DataError(path.string() + ": unsupported EEGB version " +
                    std::to_string(version));

  TrialSet set;
  set.n_trials = r.u32();
  set.n_channels = r.u32();
  set.n_samples = r.u32();
  set.sample_rate_hz = r.f32();
  set.n_classes = r.u32();
  const bool has_names = r.u8() != 0;

  // allocation-free scan of the name block so the total size check (and the
  // CRC) run before any length field is trusted
  const std::size_t names_at = r.offset();
  if (has_names) {
    for (std::size_t c = 0; c < set.n_channels; ++c) r.skip(r.u32());
  }
  const unsigned __int128 wide = static_cast<unsigned __int128>(set.n_trials) *
                                 set.n_channels * set.n_samples;
  if (wide > buf.size() / 4)
    throw DataError(path.string() + ": header counts exceed the file size");
  const std::size_t values = static_cast<std::size_t>(wide);
  const std::size_t expected = r.offset() + 2 * set.n_trials + values * 4 + 4;
  if (buf.size() != expected)
    throw DataError(path.string() + ": truncated or oversized file, expected " +
                    std::to_string(expected) + " bytes but got " +
                    std::to_string(buf.size()));

  const auto computed = static_cast<std::uint32_t>(
      crc32(0L, buf.data(), static_cast<uInt>(buf.size() - 4)));
  ByteReader tail(buf.data() + buf.size() - 4, 4, path.string());
  if (computed != tail.u32())
    throw DataError(path.string() + ": CRC32 mismatch, file is corrupted");

  ByteReader body(buf.data(), buf.size(), path.string());
  body.skip(names_at);
  if (has_names) {
    set.channel_names.reserve(set.n_channels);
    for (std::size_t c = 0; c < set.n_channels; ++c) {
      const std::uint32_t len = body.u32();
      std::string name(len, '\0');
      body.raw(name.data(), len);
      set.channel_names.push_back(std::move(name));
    }
  }
  set.labels.reserve(set.n_trials);
  for (std::size_t t = 0; t < set.n_trials; ++t)
    set.labels.push_back(static_cast<int>(body.u16()));
  set.data.resize(values);
  for (std::size_t i = 0; i < values; ++i) set.data[i] = body.f32();
  set.validate();
  return set;
}

// ---------------------------------------------------------------------------
// CSV import
// ---------------------------------------------------------------------------

/// Imports trials from per-trial CSV files (rows = channels, cols = samples)
/// listed in a JSON manifest:
///   {"sample_rate_hz": 250, "n_classes": 2, "channel_names": [...],
///    "trials": [{"file": "t0.csv", "label": 0}, ...]}
inline TrialSet import_csv(const std::filesystem::path& dir,
                           const std::filesystem::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw DataError("cannot open manifest " + manifest_path.string());
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("manifest " + manifest_path.string() + ": " + e.what());
  }
  if (!manifest.contains("sample_rate_hz"))
    throw DataError("manifest " + manifest_path.string() +
                    " lacks sample_rate_hz");
  if (!manifest.contains("trials") || !manifest["trials"].is_array() ||
      manifest["trials"].empty())
    throw DataError("manifest " + manifest_path.string() +
                    " lacks a non-empty trials array");

  TrialSet set;
  set.sample_rate_hz = manifest["sample_rate_hz"].get<float>();
  if (manifest.contains("channel_names"))
    set.channel_names =
        manifest["channel_names"].get<std::vector<std::string>>();

  int max_label = -1;
  for (const auto& entry : manifest["trials"]) {
    if (!entry.contains("file") || !entry.contains("label"))
      throw DataError("manifest trial entries need {file, label}");
    const auto file = dir / entry["file"].get<std::string>();
    const int label = entry["label"].get<int>();
    if (label < 0)
      throw DataError("trial " + file.string() + " has negative label");
    if (!std::filesystem::exists(file))
      throw DataError("trial file missing: " + file.string());
    auto csv = read_matrix_csv(file);
    if (!csv.header.empty())
      throw DataError(file.string() + ": trial CSVs must be all-numeric");
    if (csv.rows == 0)
      throw DataError(file.string() + ": empty trial file");
    if (set.n_trials == 0) {
      set.n_channels = csv.rows;
      set.n_samples = csv.cols;
    } else if (csv.rows != set.n_channels || csv.cols != set.n_samples) {
      throw DataError(file.string() + ": trial is " + std::to_string(csv.rows) +
                      "x" + std::to_string(csv.cols) + ", expected " +
                      std::to_string(set.n_channels) + "x" +
                      std::to_string(set.n_samples));
    }
    for (double v : csv.data) set.data.push_back(static_cast<float>(v));
    set.labels.push_back(label);
    ++set.n_trials;
    max_label = std::max(max_label, label);
  }
  set.n_classes = manifest.contains("n_classes")
                      ? manifest["n_classes"].get<std::size_t>()
                      : static_cast<std::size_t>(max_label + 1);
  set.validate();
  return set;
}

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

/// Bandpass-filters every channel of every trial. zero_phase applies
/// forward-backward passes (zero phase distortion, squared magnitude
/// response).
inline TrialSet bandpass_filter(const TrialSet& set, const FilterSpec& spec,
                                bool zero_phase = true) {
  set.validate();
  const auto sos = design_butterworth_bandpass(spec, set.sample_rate_hz);
  TrialSet out = set;
  std::vector<double> work(set.n_samples);
  for (std::size_t t = 0; t < set.n_trials; ++t) {
    for (std::size_t c = 0; c < set.n_channels; ++c) {
      const float* src = set.channel(t, c);
      for (std::size_t i = 0; i < set.n_samples; ++i) work[i] = src[i];
      if (zero_phase) {
        sosfiltfilt_inplace(sos, work.data(), work.size());
      } else {
        sosfilt_inplace(sos, work.data(), work.size());
      }
      float* dst = out.channel(t, c);
      for (std::size_t i = 0; i < set.n_samples; ++i)
        dst[i] = static_cast<float>(work[i]);
    }
  }
  return out;
}

/// Keeps every factor-th sample of every trial. No anti-alias filtering is
/// applied here; bandpass below the new Nyquist first.
inline TrialSet decimate(const TrialSet& set, std::size_t factor) {
  set.validate();
  if (factor < 1) throw ConfigError("decimation factor must be >= 1");
  if (factor == 1) return set;
  TrialSet out = set;
  out.n_samples = (set.n_samples + factor - 1) / factor;
  out.sample_rate_hz = set.sample_rate_hz / static_cast<float>(factor);
  out.data.resize(set.n_trials * set.n_channels * out.n_samples);
  for (std::size_t t = 0; t < set.n_trials; ++t)
    for (std::size_t c = 0; c < set.n_channels; ++c) {
      const float* src = set.channel(t, c);
      float* dst = out.channel(t, c);
      for (std::size_t i = 0; i < out.n_samples; ++i) dst[i] = src[i * factor];
    }
  return out;
}

/// Cuts fixed windows [t0, t1) seconds around each cue out of a continuous
/// multichannel recording (pure gather, no resampling).
inline TrialSet epoch_extract(const std::vector<float>& continuous,
                              std::size_t n_channels, std::size_t n_samples,
                              const std::vector<std::size_t>& cue_samples,
                              float fs, double t0, double t1,
                              const std::vector<int>& labels,
                              std::size_t n_classes) {
  if (continuous.size() != n_channels * n_samples)
    throw DataError("continuous buffer length does not match channels*samples");
  if (labels.size() != cue_samples.size())
    throw DataError("cue and label counts differ");
  if (!(t1 > t0)) throw ConfigError("epoch window requires t1 > t0");

  const auto offset = static_cast<long long>(std::llround(t0 * fs));
  const auto count = static_cast<std::size_t>(std::llround((t1 - t0) * fs));
  if (count == 0) throw ConfigError("epoch window is empty at this rate");

  TrialSet set;
  set.n_trials = cue_samples.size();
  set.n_channels = n_channels;
  set.n_samples = count;
  set.sample_rate_hz = fs;
  set.n_classes = n_classes;
  set.labels = labels;
  set.data.resize(set.n_trials * n_channels * count);
  for (std::size_t t = 0; t < cue_samples.size(); ++t) {
    const long long start = static_cast<long long>(cue_samples[t]) + offset;
    if (start < 0 ||
        static_cast<std::size_t>(start) + count > n_samples)
      throw DataError("cue " + std::to_string(t) + " at sample " +
                      std::to_string(cue_samples[t]) +
                      " does not fit the recording with window [" +
                      std::to_string(t0) + "," + std::to_string(t1) + ")");
    for (std::size_t c = 0; c < n_channels; ++c) {
      const float* src = continuous.data() + c * n_samples + start;
      std::copy(src, src + count, set.channel(t, c));
    }
  }
  set.validate();
  return set;
}

}  // namespace staflow
