#include "tes/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <numbers>
#include <stdexcept>

namespace tes::data {

namespace {

struct Point {
  double x, y;
};
using Polyline = std::vector<Point>;

Polyline regular_polygon(int sides, double radius, double phase = 0.0) {
  Polyline p;
  for (int i = 0; i <= sides; ++i) {
    const double a = phase + 2.0 * std::numbers::pi * i / sides;
    p.push_back({radius * std::cos(a), radius * std::sin(a)});
  }
  return p;
}

// Glyph strokes in [-1,1]^2, y pointing down.
const std::map<std::string_view, std::vector<Polyline>>& glyph_table() {
  static const std::map<std::string_view, std::vector<Polyline>> table = {
      {"square", {{{-0.7, -0.7}, {0.7, -0.7}, {0.7, 0.7}, {-0.7, 0.7}, {-0.7, -0.7}}}},
      {"circle", {regular_polygon(20, 0.75)}},
      {"triangle", {{{0.0, -0.8}, {0.75, 0.65}, {-0.75, 0.65}, {0.0, -0.8}}}},
      {"cross", {{{0.0, -0.85}, {0.0, 0.85}}, {{-0.85, 0.0}, {0.85, 0.0}}}},
      {"x", {{{-0.7, -0.7}, {0.7, 0.7}}, {{-0.7, 0.7}, {0.7, -0.7}}}},
      {"L", {{{-0.5, -0.85}, {-0.5, 0.8}, {0.6, 0.8}}}},
      {"T", {{{-0.75, -0.75}, {0.75, -0.75}}, {{0.0, -0.75}, {0.0, 0.85}}}},
      {"zigzag", {{{-0.8, -0.6}, {-0.3, 0.6}, {0.2, -0.6}, {0.75, 0.6}}}},
      {"H", {{{-0.6, -0.8}, {-0.6, 0.8}}, {{0.6, -0.8}, {0.6, 0.8}}, {{-0.6, 0.0}, {0.6, 0.0}}}},
      {"chevron", {{{-0.75, -0.45}, {0.0, 0.5}, {0.75, -0.45}}}},
      {"diamond", {{{0.0, -0.85}, {0.75, 0.0}, {0.0, 0.85}, {-0.75, 0.0}, {0.0, -0.85}}}},
      {"arrow", {{{-0.8, 0.0}, {0.8, 0.0}}, {{0.3, -0.5}, {0.8, 0.0}, {0.3, 0.5}}}},
      {"hourglass", {{{-0.6, -0.8}, {0.6, -0.8}, {-0.6, 0.8}, {0.6, 0.8}, {-0.6, -0.8}}}},
      {"E",
       {{{0.6, -0.8}, {-0.5, -0.8}, {-0.5, 0.8}, {0.6, 0.8}}, {{-0.5, 0.0}, {0.4, 0.0}}}},
      {"ring_dot", {regular_polygon(16, 0.75), regular_polygon(8, 0.18)}},
      {"pi", {{{-0.8, -0.6}, {0.8, -0.6}}, {{-0.4, -0.6}, {-0.4, 0.8}}, {{0.4, -0.6}, {0.4, 0.8}}}},
  };
  return table;
}

const std::vector<std::string_view>& vocabulary_list() {
  static const std::vector<std::string_view> names = [] {
    std::vector<std::string_view> v;
    for (const auto& [name, _] : glyph_table()) v.push_back(name);
    return v;
  }();
  return names;
}

double segment_distance(Point p, Point a, Point b) {
  const double dx = b.x - a.x, dy = b.y - a.y;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0 ? ((p.x - a.x) * dx + (p.y - a.y) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double cx = a.x + t * dx - p.x, cy = a.y + t * dy - p.y;
  return std::sqrt(cx * cx + cy * cy);
}

double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

}  // namespace

std::string_view to_string(Background b) {
  switch (b) {
    case Background::plain: return "plain";
    case Background::noise: return "noise";
    case Background::inverted: return "inverted";
  }
  return "plain";
}

Background background_from_string(std::string_view name) {
  if (name == "plain") return Background::plain;
  if (name == "noise") return Background::noise;
  if (name == "inverted") return Background::inverted;
  throw std::invalid_argument("unknown background type '" + std::string(name) + "'");
}

bool Dataset::same_content(const Dataset& other) const {
  return class_count == other.class_count && height == other.height && width == other.width &&
         train == other.train && test == other.test;
}

std::span<const std::string_view> glyph_vocabulary() { return vocabulary_list(); }

bool is_known_glyph(std::string_view glyph) { return glyph_table().contains(glyph); }

std::vector<double> render_coverage(std::string_view glyph, const Style& style, Rng& rng,
                                    std::size_t height, std::size_t width) {
  auto it = glyph_table().find(glyph);
  if (it == glyph_table().end())
    throw std::invalid_argument("unknown glyph '" + std::string(glyph) + "'");

  const double angle = uniform(rng, -style.rotation_jitter_deg, style.rotation_jitter_deg) *
                       std::numbers::pi / 180.0;
  const double scale = uniform(rng, style.scale_min, style.scale_max);
  const double shift_x = uniform(rng, -style.shift_max, style.shift_max);
  const double shift_y = uniform(rng, -style.shift_max, style.shift_max);
  const double thickness = uniform(rng, style.thickness_min, style.thickness_max);

  const double half = 0.5 * static_cast<double>(std::min(height, width)) - 1.0;
  const double cx = 0.5 * static_cast<double>(width) + shift_x;
  const double cy = 0.5 * static_cast<double>(height) + shift_y;
  const double c = std::cos(angle), s = std::sin(angle);
  auto place = [&](Point p) {
    const double x = p.x * c - p.y * s, y = p.x * s + p.y * c;
    return Point{cx + x * scale * half, cy + y * scale * half};
  };

  std::vector<std::pair<Point, Point>> segments;
  for (const Polyline& line : it->second)
    for (std::size_t i = 1; i < line.size(); ++i)
      segments.emplace_back(place(line[i - 1]), place(line[i]));

  std::vector<double> coverage(height * width, 0.0);
  for (std::size_t r = 0; r < height; ++r)
    for (std::size_t col = 0; col < width; ++col) {
      const Point p{static_cast<double>(col) + 0.5, static_cast<double>(r) + 0.5};
      double best = 1e9;
      for (const auto& [a, b] : segments) best = std::min(best, segment_distance(p, a, b));
      coverage[r * width + col] = std::clamp(0.5 * thickness + 0.5 - best, 0.0, 1.0);
    }
  return coverage;
}

std::vector<double> render_glyph(std::string_view glyph, const Style& style, Rng& rng,
                                 std::size_t height, std::size_t width) {
  std::vector<double> px = render_coverage(glyph, style, rng, height, width);
  const double bg = style.background_level, fg = style.stroke_level;
  for (double& v : px) v = bg + (fg - bg) * v;
  switch (style.background) {
    case Background::plain: break;
    case Background::inverted:
      for (double& v : px) v = 1.0 - v;
      break;
    case Background::noise: {
      // Low-frequency texture: two random plane waves.
      const double f1 = uniform(rng, 0.3, 0.9), f2 = uniform(rng, 0.3, 0.9);
      const double p1 = uniform(rng, 0.0, 2 * std::numbers::pi);
      const double p2 = uniform(rng, 0.0, 2 * std::numbers::pi);
      for (std::size_t r = 0; r < height; ++r)
        for (std::size_t c = 0; c < width; ++c)
          px[r * width + c] += style.texture_amplitude * 0.5 *
                               (std::sin(f1 * static_cast<double>(c) + p1) +
                                std::sin(f2 * static_cast<double>(r) + p2));
      break;
    }
  }
  if (style.pixel_noise_sigma > 0.0) {
    std::normal_distribution<double> noise(0.0, style.pixel_noise_sigma);
    for (double& v : px) v += noise(rng);
  }
  for (double& v : px) v = std::clamp(v, 0.0, 1.0);
  return px;
}

double occupancy(std::span<const double> coverage, std::size_t height, std::size_t width) {
  std::size_t r0 = height, r1 = 0, c0 = width, c1 = 0;
  bool any = false;
  for (std::size_t r = 0; r < height; ++r)
    for (std::size_t c = 0; c < width; ++c)
      if (coverage[r * width + c] > 0.5) {
        any = true;
        r0 = std::min(r0, r);
        r1 = std::max(r1, r);
        c0 = std::min(c0, c);
        c1 = std::max(c1, c);
      }
  if (!any) return 0.0;
  return static_cast<double>((r1 - r0 + 1) * (c1 - c0 + 1)) /
         static_cast<double>(height * width);
}

Dataset generate_domain(const DomainSpec& spec) {
  if (spec.class_glyphs.empty()) throw std::invalid_argument("domain has no classes");
  if (spec.class_glyphs.size() > 0xffff) throw std::invalid_argument("too many classes");
  for (const auto& g : spec.class_glyphs)
    if (!is_known_glyph(g)) throw std::invalid_argument("unknown glyph '" + g + "'");

  Dataset ds;
  ds.spec = spec;
  ds.class_count = spec.class_glyphs.size();
  auto fill = [&](Split split, std::size_t per_class, std::vector<ImageSample>& out) {
    out.reserve(per_class * ds.class_count);
    for (std::size_t k = 0; k < ds.class_count; ++k)
      for (std::size_t i = 0; i < per_class; ++i) {
        Rng rng = keyed_rng({spec.seed, static_cast<std::uint64_t>(split), k, i});
        ImageSample s;
        s.pixels = render_glyph(spec.class_glyphs[k], spec.style, rng);
        for (double& v : s.pixels) v = static_cast<double>(static_cast<float>(v));
        s.label = static_cast<std::uint16_t>(k);
        out.push_back(std::move(s));
      }
  };
  fill(Split::train, spec.train_per_class, ds.train);
  fill(Split::test, spec.test_per_class, ds.test);
  return ds;
}

// ---- persistence -----------------------------------------------------------------

namespace {
constexpr std::string_view kDatasetMagic = "TESD";
constexpr std::uint32_t kDatasetVersion = 1;
}  // namespace

std::vector<std::uint8_t> encode_dataset(const Dataset& ds) {
  ByteWriter w;
  w.raw(kDatasetMagic);
  w.u32(kDatasetVersion);
  w.u32(static_cast<std::uint32_t>(ds.class_count));
  w.u16(static_cast<std::uint16_t>(ds.height));
  w.u16(static_cast<std::uint16_t>(ds.width));
  w.u32(static_cast<std::uint32_t>(ds.train.size()));
  w.u32(static_cast<std::uint32_t>(ds.test.size()));
  for (const auto* split : {&ds.train, &ds.test})
    for (const ImageSample& s : *split) {
      w.u16(s.label);
      for (double v : s.pixels) w.f32(static_cast<float>(v));
    }
  return w.take();
}

Dataset decode_dataset(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  r.need(kDatasetHeaderBytes, "dataset header");
  if (r.raw(4) != kDatasetMagic) throw FormatError("bad dataset magic, expected TESD", 0);
  const std::uint32_t version = r.u32();
  if (version != kDatasetVersion)
    throw FormatError("unsupported dataset version " + std::to_string(version), 4);
  Dataset ds;
  ds.class_count = r.u32();
  ds.height = r.u16();
  ds.width = r.u16();
  const std::size_t n_train = r.u32();
  const std::size_t n_test = r.u32();
  const std::size_t pixels = ds.height * ds.width;
  r.need((n_train + n_test) * (2 + 4 * pixels), "dataset samples");
  auto read_split = [&](std::size_t n, std::vector<ImageSample>& out) {
    out.resize(n);
    for (ImageSample& s : out) {
      const std::size_t at = r.position();
      s.label = r.u16();
      if (s.label >= ds.class_count)
        throw FormatError("label " + std::to_string(s.label) + " outside class count", at);
      s.pixels.resize(pixels);
      for (double& v : s.pixels) v = r.f32();
    }
  };
  read_split(n_train, ds.train);
  read_split(n_test, ds.test);
  if (r.remaining() != 0)
    throw FormatError("trailing bytes after dataset: " + std::to_string(r.remaining()),
                      r.position());
  ds.spec.class_glyphs.assign(ds.class_count, std::string());
  return ds;
}

void save_dataset(const Dataset& dataset, const std::filesystem::path& path) {
  write_file(path, encode_dataset(dataset));
}

Dataset load_dataset(const std::filesystem::path& path) {
  auto bytes = read_file(path);
  return decode_dataset(bytes);
}

Digest spec_digest(const DomainSpec& spec) {
  DigestBuilder b;
  b.add("domain-v1").add(spec.domain_id).add(spec.seed);
  b.add(static_cast<std::uint64_t>(spec.train_per_class))
      .add(static_cast<std::uint64_t>(spec.test_per_class));
  for (const auto& g : spec.class_glyphs) b.add(g);
  const Style& s = spec.style;
  b.add(s.thickness_min).add(s.thickness_max).add(to_string(s.background));
  b.add(s.rotation_jitter_deg).add(s.pixel_noise_sigma).add(s.background_level);
  b.add(s.stroke_level).add(s.texture_amplitude).add(s.scale_min).add(s.scale_max);
  b.add(s.shift_max);
  return b.finish();
}

DomainSpec default_source_spec(std::uint64_t seed) {
  DomainSpec spec;
  spec.domain_id = "source";
  spec.class_glyphs = {"square", "circle", "triangle", "cross", "x",
                       "L",      "T",      "zigzag",   "H",     "chevron"};
  spec.seed = stream_key({seed, 0x50});
  spec.train_per_class = 200;
  spec.test_per_class = 50;
  return spec;
}

std::vector<DomainSpec> default_target_specs(std::uint64_t seed) {
  DomainSpec a;
  a.domain_id = "textured";
  a.class_glyphs = {"cross", "circle", "square", "diamond", "arrow"};
  a.style.background = Background::noise;
  a.style.rotation_jitter_deg = 18.0;
  a.style.thickness_min = 1.4;
  a.style.thickness_max = 2.6;
  a.seed = stream_key({seed, 0x7a});
  a.train_per_class = 40;
  a.test_per_class = 50;

  DomainSpec b;
  b.domain_id = "inverted";
  b.class_glyphs = {"triangle", "x", "T", "hourglass", "E"};
  b.style.background = Background::inverted;
  b.style.scale_min = 0.65;
  b.style.scale_max = 0.9;
  b.seed = stream_key({seed, 0x7b});
  b.train_per_class = 40;
  b.test_per_class = 50;
  return {a, b};
}

std::vector<std::vector<double>> class_means(const Dataset& ds) {
  const std::size_t n = ds.height * ds.width;
  std::vector<std::vector<double>> means(ds.class_count, std::vector<double>(n, 0.0));
  std::vector<std::size_t> counts(ds.class_count, 0);
  for (const ImageSample& s : ds.train) {
    ++counts[s.label];
    for (std::size_t i = 0; i < n; ++i) means[s.label][i] += s.pixels[i];
  }
  for (std::size_t k = 0; k < ds.class_count; ++k)
    if (counts[k])
      for (double& v : means[k]) v /= static_cast<double>(counts[k]);
  return means;
}

}  // namespace tes::data
