#pragma once

#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "granage/common.hpp"
#include "granage/granularity.hpp"
#include "granage/image_io.hpp"
#include "granage/tensor.hpp"

namespace granage::data {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Manifests
//
// One record per line: `relative_path,apparent_age[,annotator_stddev]`, with
// a required header line. Paths are relative to the images root.
// ---------------------------------------------------------------------------

struct SampleRecord {
  std::string image_path;
  double apparent_age = 0.0;
  std::optional<double> annotator_stddev;
};

struct ManifestLoad {
  std::vector<SampleRecord> records;      // rows whose image file exists, in file order
  std::vector<std::string> failures;      // rows skipped because the image is missing
  int clamped_age_rows = 0;               // rows whose age fell outside [1,100]
  fs::path images_root;
};

inline constexpr const char* kManifestHeader = "image_path,apparent_age";

namespace detail {

inline std::string strip(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  size_t start = 0;
  while (true) {
    const size_t pos = line.find(',', start);
    if (pos == std::string::npos) {
      out.push_back(strip(line.substr(start)));
      return out;
    }
    out.push_back(strip(line.substr(start, pos - start)));
    start = pos + 1;
  }
}

inline double parse_double(const std::string& s, const std::string& what, int line_no) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v))
    throw ValueError("manifest: line " + std::to_string(line_no) + ": bad " + what + " '" + s + "'");
  return v;
}

}  // namespace detail

inline ManifestLoad load_manifest(const std::string& manifest_path,
                                  const std::string& images_root = "") {
  std::ifstream in(manifest_path);
  if (!in) throw RuntimeError("manifest: cannot open: " + manifest_path);

  ManifestLoad out;
  out.images_root = images_root.empty() ? fs::path(manifest_path).parent_path()
                                        : fs::path(images_root);

  std::string line;
  if (!std::getline(in, line)) throw ValueError("manifest: empty file: " + manifest_path);
  const std::string header = detail::strip(line);
  if (header != kManifestHeader &&
      header != std::string(kManifestHeader) + ",annotator_stddev")
    throw ValueError("manifest: line 1: expected header '" + std::string(kManifestHeader) +
                     "[,annotator_stddev]', got '" + header + "'");

  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::strip(line).empty()) continue;
    const auto fields = detail::split_csv(line);
    if (fields.size() != 2 && fields.size() != 3)
      throw ValueError("manifest: line " + std::to_string(line_no) + ": expected 2 or 3 fields, got " +
                       std::to_string(fields.size()));
    SampleRecord rec;
    rec.image_path = fields[0];
    if (rec.image_path.empty())
      throw ValueError("manifest: line " + std::to_string(line_no) + ": empty image path");
    rec.apparent_age = detail::parse_double(fields[1], "apparent_age", line_no);
    if (fields.size() == 3 && !fields[2].empty())
      rec.annotator_stddev = detail::parse_double(fields[2], "annotator_stddev", line_no);

    const fs::path p = fs::path(rec.image_path);
    if (p.is_absolute() || rec.image_path.find("..") != std::string::npos)
      throw ValueError("manifest: line " + std::to_string(line_no) +
                       ": image path must be relative to the dataset root: " + rec.image_path);
    if (!fs::exists(out.images_root / p)) {
      out.failures.push_back("line " + std::to_string(line_no) + ": missing image file: " +
                             (out.images_root / p).string());
      continue;
    }
    const double rounded = std::round(rec.apparent_age);
    if (rounded < 1.0 || rounded > 100.0) ++out.clamped_age_rows;
    out.records.push_back(std::move(rec));
  }
  if (out.records.empty() && out.failures.empty())
    throw ValueError("manifest: no records in " + manifest_path);
  return out;
}

inline void write_manifest(const std::string& path, const std::vector<SampleRecord>& records) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw RuntimeError("manifest: cannot write: " + path);
  os << kManifestHeader << "\n";
  char buf[64];
  for (const auto& r : records) {
    std::snprintf(buf, sizeof buf, "%.10g", r.apparent_age);
    os << r.image_path << "," << buf << "\n";
  }
}

// ---------------------------------------------------------------------------
// Augmentation: zero-pad, random crop back to size, random horizontal flip.
// ---------------------------------------------------------------------------

struct AugmentConfig {
  int pad_pixels = 4;
  double horizontal_flip_probability = 0.5;
  bool enabled = true;
};

inline void validate(const AugmentConfig& cfg) {
  if (cfg.pad_pixels < 0) throw ValueError("augment: pad_pixels must be >= 0");
  if (cfg.horizontal_flip_probability < 0.0 || cfg.horizontal_flip_probability > 1.0)
    throw ValueError("augment: horizontal_flip_probability must be in [0,1]");
}

// Draw order is fixed (row offset, column offset, flip) so a given rng state
// always produces the same transform.
inline Tensor augment(const Tensor& image, const AugmentConfig& cfg, Rng& rng) {
  validate(cfg);
  if (image.shape.size() != 3 || image.dim(0) != 3 || image.dim(1) != image.dim(2))
    throw ValueError("augment: expected square {3,S,S} image, got " + image.shape_str());
  if (!cfg.enabled) return image;

  const int s = static_cast<int>(image.dim(1));
  const int p = cfg.pad_pixels;
  const int oy = static_cast<int>(rng.uniform_int(0, 2 * p));
  const int ox = static_cast<int>(rng.uniform_int(0, 2 * p));
  const bool flip = rng.uniform() < cfg.horizontal_flip_probability;

  Tensor out(image.shape);
  const size_t plane = static_cast<size_t>(s) * s;
  for (int c = 0; c < 3; ++c) {
    const double* src = image.data.data() + c * plane;
    double* dst = out.data.data() + c * plane;
    for (int i = 0; i < s; ++i) {
      const int si = i + oy - p;
      for (int j = 0; j < s; ++j) {
        const int sj = j + ox - p;
        const double v = (si >= 0 && si < s && sj >= 0 && sj < s)
                             ? src[static_cast<size_t>(si) * s + sj]
                             : 0.0;
        dst[static_cast<size_t>(i) * s + (flip ? s - 1 - j : j)] = v;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic desk-scale dataset. Each image encodes its age twice: as the
// area fraction of a bright disk and as the background intensity, plus
// per-pixel noise. Both encodings are linear in the age, so a closed-form
// decoder (kept in the tests) can invert the generator.
// ---------------------------------------------------------------------------

namespace synth {
inline constexpr double kBgLo = 20.0;
inline constexpr double kBgSpan = 60.0;    // background: 20..80
inline constexpr double kFg = 235.0;       // disk intensity
inline constexpr double kFracLo = 0.06;
inline constexpr double kFracSpan = 0.48;  // disk area fraction: 0.06..0.54
inline constexpr int kNoise = 6;           // uniform per-pixel noise in [-6,6]
inline constexpr uint64_t kStream = 0x73796e7468ULL;
}  // namespace synth

inline ImageU8 synth_image(int age, int size, Rng& rng) {
  const double t = (age - 1) / 99.0;
  const double bg = synth::kBgLo + synth::kBgSpan * t;
  const double frac = synth::kFracLo + synth::kFracSpan * t;
  const double radius = size * std::sqrt(frac / M_PI);
  const int max_jitter = size / 16;
  const double cy = size / 2.0 + static_cast<double>(rng.uniform_int(-max_jitter, max_jitter));
  const double cx = size / 2.0 + static_cast<double>(rng.uniform_int(-max_jitter, max_jitter));

  ImageU8 img;
  img.width = size;
  img.height = size;
  img.pixels.resize(img.expected_bytes());
  for (int i = 0; i < size; ++i) {
    for (int j = 0; j < size; ++j) {
      const double dy = i + 0.5 - cy;
      const double dx = j + 0.5 - cx;
      const double d = std::sqrt(dy * dy + dx * dx);
      double cover;
      if (d <= radius - 0.8) {
        cover = 1.0;
      } else if (d >= radius + 0.8) {
        cover = 0.0;
      } else {
        // 4x4 supersampling along the disk boundary.
        int inside = 0;
        for (int a = 0; a < 4; ++a)
          for (int b = 0; b < 4; ++b) {
            const double sy = i + (a + 0.5) / 4.0 - cy;
            const double sx = j + (b + 0.5) / 4.0 - cx;
            if (sy * sy + sx * sx <= radius * radius) ++inside;
          }
        cover = inside / 16.0;
      }
      const double base = bg + cover * (synth::kFg - bg);
      for (int c = 0; c < 3; ++c) {
        const double noisy =
            base + static_cast<double>(rng.uniform_int(-synth::kNoise, synth::kNoise));
        const double clamped = noisy < 0.0 ? 0.0 : (noisy > 255.0 ? 255.0 : noisy);
        img.pixels[(static_cast<size_t>(i) * size + j) * 3 + c] =
            static_cast<uint8_t>(std::lround(clamped));
      }
    }
  }
  return img;
}

struct SynthSample {
  ImageU8 image;
  double apparent_age = 0.0;
};

// Label of synthetic sample `index`; uniform over the integer ages 1..100.
inline int synth_label(uint64_t seed, int index) {
  Rng rng = Rng::derive(seed, {synth::kStream, static_cast<uint64_t>(index)});
  return static_cast<int>(rng.uniform_int(1, 100));
}

// Deterministic per (seed, index); sample i does not depend on n.
inline SynthSample synth_sample(uint64_t seed, int index, int input_size) {
  Rng rng = Rng::derive(seed, {synth::kStream, static_cast<uint64_t>(index)});
  const int age = static_cast<int>(rng.uniform_int(1, 100));
  SynthSample s;
  s.apparent_age = static_cast<double>(age);
  s.image = synth_image(age, input_size, rng);
  return s;
}

inline std::vector<SynthSample> synth_dataset(int n, uint64_t seed, int input_size) {
  if (n < 1) throw ValueError("synth: n must be >= 1, got " + std::to_string(n));
  if (input_size < 32) throw ValueError("synth: input_size must be >= 32");
  std::vector<SynthSample> out;
  out.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) out.push_back(synth_sample(seed, i, input_size));
  return out;
}

// Writes images/ + manifest.csv so the file-based pipeline can run on
// synthetic data. Returns the manifest path.
inline std::string export_synth_dataset(int n, uint64_t seed, int input_size,
                                        const std::string& out_dir) {
  const auto samples = synth_dataset(n, seed, input_size);
  const fs::path root(out_dir);
  std::error_code ec;
  fs::create_directories(root / "images", ec);
  if (ec) throw RuntimeError("synth: cannot create output directory: " + (root / "images").string());
  std::vector<SampleRecord> records;
  records.reserve(samples.size());
  char name[64];
  for (size_t i = 0; i < samples.size(); ++i) {
    std::snprintf(name, sizeof name, "images/img_%05zu.png", i);
    encode_png((root / name).string(), samples[i].image);
    records.push_back({name, samples[i].apparent_age, std::nullopt});
  }
  const std::string manifest = (root / "manifest.csv").string();
  write_manifest(manifest, records);
  return manifest;
}

// ---------------------------------------------------------------------------
// Datasets consumed by the trainer/evaluator: size() + sample(i).
// ---------------------------------------------------------------------------

struct Sample {
  Tensor image;  // {3,S,S}, normalized
  double age = 0.0;
};

class MemoryDataset {
public:
  MemoryDataset() = default;

  static MemoryDataset from_synth(int n, uint64_t seed, int input_size, Normalization norm = {}) {
    MemoryDataset ds;
    for (const auto& s : synth_dataset(n, seed, input_size)) {
      ds.images_.push_back(preprocess(s.image, input_size, norm));
      ds.ages_.push_back(s.apparent_age);
    }
    return ds;
  }

  void add(Tensor image, double age) {
    images_.push_back(std::move(image));
    ages_.push_back(age);
  }

  size_t size() const { return images_.size(); }
  Sample sample(size_t i) const { return {images_.at(i), ages_.at(i)}; }
  const std::vector<double>& ages() const { return ages_; }

private:
  std::vector<Tensor> images_;
  std::vector<double> ages_;
};

// File-backed dataset over a manifest. With `preload` every image is decoded
// and normalized once up front (desk-scale sizes); otherwise each sample(i)
// decodes on demand and stays stateless, so concurrent reads are safe.
class ManifestDataset {
public:
  ManifestDataset(const std::string& manifest_path, int input_size,
                  Normalization norm = {}, bool preload = true,
                  const std::string& images_root = "")
      : input_size_(input_size), norm_(norm) {
    auto loaded = load_manifest(manifest_path, images_root);
    records_ = std::move(loaded.records);
    failures_ = std::move(loaded.failures);
    clamped_age_rows_ = loaded.clamped_age_rows;
    root_ = loaded.images_root;
    if (records_.empty()) throw RuntimeError("dataset: no usable records in " + manifest_path);
    if (preload) {
      cache_.reserve(records_.size());
      for (const auto& r : records_) cache_.push_back(load(r));
    }
  }

  size_t size() const { return records_.size(); }

  Sample sample(size_t i) const {
    const auto& r = records_.at(i);
    return {cache_.empty() ? load(r) : cache_[i], r.apparent_age};
  }

  const std::vector<SampleRecord>& records() const { return records_; }
  const std::vector<std::string>& failures() const { return failures_; }
  int clamped_age_rows() const { return clamped_age_rows_; }

private:
  Tensor load(const SampleRecord& r) const {
    return preprocess(decode_image((root_ / r.image_path).string()), input_size_, norm_);
  }

  std::vector<SampleRecord> records_;
  std::vector<std::string> failures_;
  std::vector<Tensor> cache_;
  fs::path root_;
  int clamped_age_rows_ = 0;
  int input_size_ = 0;
  Normalization norm_;
};

}  // namespace granage::data
