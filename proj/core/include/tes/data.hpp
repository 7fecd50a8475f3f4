#pragma once

// Procedural glyph domains: one source domain and several shifted target
// domains whose label spaces differ from the source's.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tes/io.hpp"
#include "tes/rng.hpp"

namespace tes::data {

inline constexpr std::size_t kSide = 16;

enum class Background { plain, noise, inverted };

std::string_view to_string(Background b);
Background background_from_string(std::string_view name);

struct Style {
  double thickness_min = 1.2;   // stroke width in pixels
  double thickness_max = 2.2;
  Background background = Background::plain;
  double rotation_jitter_deg = 12.0;
  double pixel_noise_sigma = 0.03;
  double background_level = 0.4;
  double stroke_level = 0.6;
  double texture_amplitude = 0.05;  // only for Background::noise
  double scale_min = 0.75;          // glyph half-extent as a fraction of the half canvas
  double scale_max = 0.95;
  double shift_max = 1.0;           // pixels
};

struct ImageSample {
  std::vector<double> pixels;  // row-major H*W, each in [0,1]
  std::uint16_t label = 0;

  friend bool operator==(const ImageSample&, const ImageSample&) = default;
};

struct DomainSpec {
  std::string domain_id;
  std::vector<std::string> class_glyphs;
  Style style;
  std::uint64_t seed = 0;
  std::size_t train_per_class = 40;
  std::size_t test_per_class = 10;
};

struct Dataset {
  DomainSpec spec;  // only class count survives a save/load round trip
  std::size_t class_count = 0;
  std::size_t height = kSide;
  std::size_t width = kSide;
  std::vector<ImageSample> train;
  std::vector<ImageSample> test;

  /// Compares the persisted content (dimensions and samples).
  bool same_content(const Dataset& other) const;
};

enum class Split : std::uint64_t { train = 1, test = 2 };

std::span<const std::string_view> glyph_vocabulary();
bool is_known_glyph(std::string_view glyph);

/// Stroke coverage in [0,1] per pixel for one random draw of the glyph's
/// placement (rotation, scale, shift, thickness). Consumes exactly the draws
/// render_glyph makes before texturing.
std::vector<double> render_coverage(std::string_view glyph, const Style& style, Rng& rng,
                                    std::size_t height = kSide, std::size_t width = kSide);

/// Deterministic in (glyph, style, rng state). Values in [0,1].
std::vector<double> render_glyph(std::string_view glyph, const Style& style, Rng& rng,
                                 std::size_t height = kSide, std::size_t width = kSide);

/// Fraction of the canvas covered by the bounding box of pixels whose
/// coverage exceeds one half.
double occupancy(std::span<const double> coverage, std::size_t height, std::size_t width);

/// Pixels are quantised to float precision so the f32 file format is lossless.
Dataset generate_domain(const DomainSpec& spec);

std::vector<std::uint8_t> encode_dataset(const Dataset& dataset);
Dataset decode_dataset(std::span<const std::uint8_t> bytes);
void save_dataset(const Dataset& dataset, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

/// Header bytes of the version-1 layout.
inline constexpr std::size_t kDatasetHeaderBytes = 24;

/// Stable digest of a spec, used to key cached stages.
Digest spec_digest(const DomainSpec& spec);

DomainSpec default_source_spec(std::uint64_t seed);
std::vector<DomainSpec> default_target_specs(std::uint64_t seed);

/// Per-class mean images of the train split, indexed by class.
std::vector<std::vector<double>> class_means(const Dataset& dataset);

}  // namespace tes::data
