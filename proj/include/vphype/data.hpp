#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "vphype/config.hpp"
#include "vphype/errors.hpp"
#include "vphype/rng.hpp"
#include "vphype/tensor.hpp"

namespace vphype {

// Per-band standardization statistics, computed from training pixels only.
struct BandStats {
  std::vector<double> mean;
  std::vector<double> stddev;
};

// Hyperspectral cube with an integer label map. Label 0 = unlabeled; classes
// are 1..N. The cube keeps its on-disk float32 values so save/load round
// trips are bit-exact.
struct HsiScene {
  std::int64_t bands = 0, height = 0, width = 0, num_classes = 0;
  std::vector<float> cube;           // band-major [C, H, W]
  std::vector<std::uint16_t> labels; // [H, W]
  std::vector<std::string> class_names;

  float value(std::int64_t band, std::int64_t row, std::int64_t col) const {
    return cube[(band * height + row) * width + col];
  }

  std::uint16_t label(std::int64_t row, std::int64_t col) const {
    return labels[row * width + col];
  }
};

struct PixelRef {
  std::int64_t row = 0, col = 0;
  std::int64_t cls = 0;  // 1..N
};

struct SceneSplit {
  std::vector<PixelRef> train;
  std::vector<PixelRef> test;
  BandStats stats;
};

// --- container format -----------------------------------------------------------
// meta.json   {"version":1,"bands":C,"height":H,"width":W,"num_classes":N,
//              "class_names":[...]}
// cube.f32    C*H*W little-endian float32, band-major row-major
// labels.u16  H*W little-endian uint16 row-major, 0 = unlabeled

inline HsiScene load_scene(const std::string& dir) {
  namespace fs = std::filesystem;
  fs::path meta_path = fs::path(dir) / "meta.json";
  std::ifstream meta_in(meta_path);
  if (!meta_in) throw FormatError("scene: cannot open " + meta_path.string());
  json meta;
  try {
    meta_in >> meta;
  } catch (const json::exception& e) {
    throw FormatError("scene meta.json: " + std::string(e.what()));
  }
  for (const char* field : {"version", "bands", "height", "width", "num_classes"}) {
    if (!meta.contains(field) || !meta[field].is_number_integer()) {
      throw FormatError(std::string("scene meta.json: missing integer field '") + field + "'");
    }
  }
  std::int64_t version = meta["version"].get<std::int64_t>();
  if (version != 1) throw FormatError("scene meta.json: unknown version " + std::to_string(version));

  HsiScene scene;
  scene.bands = meta["bands"].get<std::int64_t>();
  scene.height = meta["height"].get<std::int64_t>();
  scene.width = meta["width"].get<std::int64_t>();
  scene.num_classes = meta["num_classes"].get<std::int64_t>();
  if (scene.bands < 1 || scene.height < 1 || scene.width < 1 || scene.num_classes < 1) {
    throw FormatError("scene meta.json: non-positive dimension field");
  }
  if (meta.contains("class_names")) {
    scene.class_names = meta["class_names"].get<std::vector<std::string>>();
    if (static_cast<std::int64_t>(scene.class_names.size()) != scene.num_classes) {
      throw FormatError("scene meta.json: class_names length " +
                        std::to_string(scene.class_names.size()) + " does not match num_classes " +
                        std::to_string(scene.num_classes));
    }
  } else {
    for (std::int64_t i = 1; i <= scene.num_classes; ++i) {
      scene.class_names.push_back("class" + std::to_string(i));
    }
  }

  fs::path cube_path = fs::path(dir) / "cube.f32";
  std::ifstream cube_in(cube_path, std::ios::binary);
  if (!cube_in) throw FormatError("scene: cannot open " + cube_path.string());
  std::int64_t cube_expected = scene.bands * scene.height * scene.width * 4;
  cube_in.seekg(0, std::ios::end);
  std::int64_t cube_actual = static_cast<std::int64_t>(cube_in.tellg());
  if (cube_actual != cube_expected) {
    throw FormatError("scene cube.f32: expected " + std::to_string(cube_expected) + " bytes (" +
                      std::to_string(scene.bands) + "*" + std::to_string(scene.height) + "*" +
                      std::to_string(scene.width) + "*4), got " + std::to_string(cube_actual));
  }
  cube_in.seekg(0);
  scene.cube.resize(static_cast<std::size_t>(cube_expected / 4));
  cube_in.read(reinterpret_cast<char*>(scene.cube.data()), cube_expected);
  if (!cube_in) throw FormatError("scene cube.f32: short read");
  for (std::size_t i = 0; i < scene.cube.size(); ++i) {
    if (!std::isfinite(scene.cube[i])) {
      throw FormatError("scene cube.f32: non-finite value at element " + std::to_string(i));
    }
  }

  fs::path labels_path = fs::path(dir) / "labels.u16";
  std::ifstream labels_in(labels_path, std::ios::binary);
  if (!labels_in) throw FormatError("scene: cannot open " + labels_path.string());
  std::int64_t labels_expected = scene.height * scene.width * 2;
  labels_in.seekg(0, std::ios::end);
  std::int64_t labels_actual = static_cast<std::int64_t>(labels_in.tellg());
  if (labels_actual != labels_expected) {
    throw FormatError("scene labels.u16: expected " + std::to_string(labels_expected) +
                      " bytes (2*" + std::to_string(scene.height) + "*" + std::to_string(scene.width) +
                      "), got " + std::to_string(labels_actual));
  }
  labels_in.seekg(0);
  scene.labels.resize(static_cast<std::size_t>(scene.height * scene.width));
  labels_in.read(reinterpret_cast<char*>(scene.labels.data()), labels_expected);
  if (!labels_in) throw FormatError("scene labels.u16: short read");
  for (std::size_t i = 0; i < scene.labels.size(); ++i) {
    if (scene.labels[i] > scene.num_classes) {
      throw FormatError("scene labels.u16: label " + std::to_string(scene.labels[i]) +
                        " at pixel " + std::to_string(i) + " exceeds num_classes " +
                        std::to_string(scene.num_classes));
    }
  }
  return scene;
}

inline void save_scene(const std::string& dir, const HsiScene& scene) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  json meta;
  meta["version"] = 1;
  meta["bands"] = scene.bands;
  meta["height"] = scene.height;
  meta["width"] = scene.width;
  meta["num_classes"] = scene.num_classes;
  meta["class_names"] = scene.class_names;
  std::ofstream meta_out(fs::path(dir) / "meta.json");
  meta_out << meta.dump(2) << "\n";

  std::ofstream cube_out(fs::path(dir) / "cube.f32", std::ios::binary);
  cube_out.write(reinterpret_cast<const char*>(scene.cube.data()),
                 static_cast<std::streamsize>(scene.cube.size() * 4));
  std::ofstream labels_out(fs::path(dir) / "labels.u16", std::ios::binary);
  labels_out.write(reinterpret_cast<const char*>(scene.labels.data()),
                   static_cast<std::streamsize>(scene.labels.size() * 2));
}

// --- splitting ----------------------------------------------------------------

inline std::int64_t round_half_away(double x) {
  return static_cast<std::int64_t>(x >= 0.0 ? std::floor(x + 0.5) : std::ceil(x - 0.5));
}

namespace detail {

// Portable Fisher-Yates; std::shuffle is implementation-defined.
template <typename T>
void deterministic_shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    std::size_t j = static_cast<std::size_t>(rng.uniform_int(i));
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace detail

inline BandStats compute_band_stats(const HsiScene& scene, const std::vector<PixelRef>& train) {
  BandStats stats;
  stats.mean.assign(static_cast<std::size_t>(scene.bands), 0.0);
  stats.stddev.assign(static_cast<std::size_t>(scene.bands), 1.0);
  if (train.empty()) throw SplitError("cannot compute band stats from an empty training set");
  for (std::int64_t b = 0; b < scene.bands; ++b) {
    double m = 0.0;
    for (const auto& p : train) m += scene.value(b, p.row, p.col);
    m /= static_cast<double>(train.size());
    double v = 0.0;
    for (const auto& p : train) {
      double d = scene.value(b, p.row, p.col) - m;
      v += d * d;
    }
    v /= static_cast<double>(train.size());
    stats.mean[b] = m;
    stats.stddev[b] = std::max(std::sqrt(v), 1e-12);
  }
  return stats;
}

// Per-class stratified split: train count = max(per_class_min,
// round(train_fraction * n_c)) chosen by a seeded shuffle of that class's
// pixels (scan order). Same (scene, spec) always produces the same split.
inline SceneSplit stratified_split(const HsiScene& scene, const SplitSpec& spec) {
  spec.validate();
  std::vector<std::vector<PixelRef>> per_class(static_cast<std::size_t>(scene.num_classes));
  for (std::int64_t r = 0; r < scene.height; ++r) {
    for (std::int64_t c = 0; c < scene.width; ++c) {
      std::uint16_t lbl = scene.label(r, c);
      if (lbl == 0) continue;
      per_class[lbl - 1].push_back({r, c, static_cast<std::int64_t>(lbl)});
    }
  }
  SceneSplit split;
  bool any = false;
  for (std::int64_t cls = 0; cls < scene.num_classes; ++cls) {
    auto& pixels = per_class[cls];
    if (pixels.empty()) continue;  // empty classes are absent from both sides
    any = true;
    std::int64_t n = static_cast<std::int64_t>(pixels.size());
    std::int64_t want =
        std::max<std::int64_t>(spec.per_class_min, round_half_away(spec.train_fraction * n));
    if (want >= n) {
      throw SplitError("class '" + scene.class_names[cls] + "' has " + std::to_string(n) +
                       " pixels; train count " + std::to_string(want) + " leaves no test pixels");
    }
    Rng rng(derive_seed(spec.seed, static_cast<std::uint64_t>(cls)));
    detail::deterministic_shuffle(pixels, rng);
    for (std::int64_t i = 0; i < n; ++i) {
      (i < want ? split.train : split.test).push_back(pixels[i]);
    }
  }
  if (!any) throw SplitError("scene has no labeled pixels");
  split.stats = compute_band_stats(scene, split.train);
  return split;
}

// --- patch extraction ------------------------------------------------------------

inline std::int64_t mirror_fold(std::int64_t i, std::int64_t n) {
  if (n == 1) return 0;
  std::int64_t period = 2 * (n - 1);
  std::int64_t m = i % period;
  if (m < 0) m += period;
  return m < n ? m : period - m;
}

// Standardized [C, p, p] patch centered on the pixel; borders mirror-padded.
inline Tensor extract_patch(const HsiScene& scene, const PixelRef& pixel, std::int64_t patch_size,
                            const BandStats& stats) {
  if (patch_size % 2 == 0 || patch_size < 1) {
    throw ContractError("patch size must be odd and positive, got " + std::to_string(patch_size));
  }
  std::int64_t half = patch_size / 2;
  std::vector<double> out(static_cast<std::size_t>(scene.bands * patch_size * patch_size));
  std::size_t p = 0;
  for (std::int64_t b = 0; b < scene.bands; ++b) {
    double m = stats.mean[b], s = stats.stddev[b];
    for (std::int64_t dr = -half; dr <= half; ++dr) {
      std::int64_t r = mirror_fold(pixel.row + dr, scene.height);
      for (std::int64_t dc = -half; dc <= half; ++dc) {
        std::int64_t c = mirror_fold(pixel.col + dc, scene.width);
        out[p++] = (static_cast<double>(scene.value(b, r, c)) - m) / s;
      }
    }
  }
  return Tensor::from_data(std::move(out), {scene.bands, patch_size, patch_size});
}

// Batch of patches: [B, C, p, p] plus 0-based labels.
inline std::pair<Tensor, std::vector<std::int64_t>> extract_batch(
    const HsiScene& scene, const std::vector<PixelRef>& pixels, std::int64_t patch_size,
    const BandStats& stats) {
  std::int64_t B = static_cast<std::int64_t>(pixels.size());
  std::vector<double> data;
  data.reserve(static_cast<std::size_t>(B * scene.bands * patch_size * patch_size));
  std::vector<std::int64_t> labels;
  labels.reserve(pixels.size());
  for (const auto& px : pixels) {
    Tensor patch = extract_patch(scene, px, patch_size, stats);
    data.insert(data.end(), patch.data().begin(), patch.data().end());
    labels.push_back(px.cls - 1);
  }
  return {Tensor::from_data(std::move(data), {B, scene.bands, patch_size, patch_size}),
          std::move(labels)};
}

// --- synthetic scenes ---------------------------------------------------------------

// Rectangular class regions, one Gaussian spectral signature per class with
// means `separation` noise-sigmas apart, unit per-band noise, fully labeled.
inline HsiScene make_synthetic_scene(std::int64_t num_classes, std::int64_t bands, std::int64_t h,
                                     std::int64_t w, double separation, std::uint64_t seed) {
  if (num_classes < 1 || bands < 1 || h < 1 || w < 1) {
    throw ConfigError("synthetic scene dimensions must be positive");
  }
  if (separation < 0.0) throw ConfigError("separation must be >= 0");
  std::int64_t grid_rows = static_cast<std::int64_t>(std::floor(std::sqrt(static_cast<double>(num_classes))));
  grid_rows = std::max<std::int64_t>(grid_rows, 1);
  std::int64_t grid_cols = (num_classes + grid_rows - 1) / grid_rows;
  if (h < grid_rows || w < grid_cols) {
    throw ConfigError("grid too small: " + std::to_string(h) + "x" + std::to_string(w) +
                      " cannot hold " + std::to_string(num_classes) + " class regions");
  }

  Rng sig_rng(derive_seed(seed, 101));
  std::vector<double> signatures(static_cast<std::size_t>(num_classes * bands));
  for (auto& v : signatures) v = separation * sig_rng.normal();

  HsiScene scene;
  scene.bands = bands;
  scene.height = h;
  scene.width = w;
  scene.num_classes = num_classes;
  for (std::int64_t i = 1; i <= num_classes; ++i) scene.class_names.push_back("synth" + std::to_string(i));
  scene.cube.assign(static_cast<std::size_t>(bands * h * w), 0.0f);
  scene.labels.assign(static_cast<std::size_t>(h * w), 0);

  Rng noise_rng(derive_seed(seed, 202));
  for (std::int64_t r = 0; r < h; ++r) {
    for (std::int64_t c = 0; c < w; ++c) {
      std::int64_t gr = std::min(r * grid_rows / h, grid_rows - 1);
      std::int64_t gc = std::min(c * grid_cols / w, grid_cols - 1);
      std::int64_t cls = (gr * grid_cols + gc) % num_classes;  // wrap spare cells
      scene.labels[r * w + c] = static_cast<std::uint16_t>(cls + 1);
      for (std::int64_t b = 0; b < bands; ++b) {
        double v = signatures[cls * bands + b] + noise_rng.normal();
        scene.cube[(b * h + r) * w + c] = static_cast<float>(v);
      }
    }
  }
  return scene;
}

}  // namespace vphype
