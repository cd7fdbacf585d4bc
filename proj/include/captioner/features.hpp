#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "captioner/binary_io.hpp"
#include "captioner/errors.hpp"
#include "captioner/numeric/matrix.hpp"
#include "captioner/numeric/rng.hpp"

namespace captioner {

enum class Backbone { efficientnet_b0, efficientnet_b4, inceptionv3, vgg16 };

/// Input resolution and final convolutional map shape (P positions × C channels).
struct BackboneSpec {
  Backbone id;
  std::string_view name;
  std::size_t input_side;
  std::size_t positions;
  std::size_t channels;
};

inline constexpr std::array<BackboneSpec, 4> kBackbones{{
    {Backbone::efficientnet_b0, "efficientnet-b0", 224, 49, 1280},
    {Backbone::efficientnet_b4, "efficientnet-b4", 380, 121, 1792},
    {Backbone::inceptionv3, "inceptionv3", 299, 64, 2048},
    {Backbone::vgg16, "vgg16", 224, 49, 512},
}};

inline const BackboneSpec& spec_of(Backbone b) {
  for (const auto& s : kBackbones) {
    if (s.id == b) return s;
  }
  throw InvalidArgument("unknown backbone enum value");
}

inline std::string backbone_names() {
  std::string out;
  for (const auto& s : kBackbones) {
    if (!out.empty()) out += ", ";
    out += s.name;
  }
  return out;
}

inline const BackboneSpec& backbone_by_name(std::string_view name) {
  for (const auto& s : kBackbones) {
    if (s.name == name) return s;
  }
  throw UnsupportedBackbone("unsupported backbone \"" + std::string(name) + "\"; expected one of " + backbone_names());
}

/// Spatial features of one image. Values are held in 64-bit but the file
/// format stores 32-bit floats.
struct FeatureGrid {
  std::string image_id;
  Backbone backbone = Backbone::efficientnet_b0;
  Matrix<double> values;

  friend bool operator==(const FeatureGrid&, const FeatureGrid&) = default;
};

struct GridViolation {
  enum class Kind { shape, non_finite };
  Kind kind;
  std::size_t index;  // flat row-major index for non_finite; 0 for shape
  std::string message;
};

/// Every invariant violation of `grid`; empty when valid.
inline std::vector<GridViolation> validate(const FeatureGrid& grid) {
  std::vector<GridViolation> out;
  const auto& spec = spec_of(grid.backbone);
  if (grid.values.rows() != spec.positions || grid.values.cols() != spec.channels) {
    out.push_back({GridViolation::Kind::shape, 0,
                   std::string(spec.name) + " expects " + std::to_string(spec.positions) + "x" +
                       std::to_string(spec.channels) + ", got " + grid.values.shape_string()});
  }
  const auto data = grid.values.data();
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (!std::isfinite(data[i])) {
      out.push_back({GridViolation::Kind::non_finite, i, "non-finite value at index " + std::to_string(i)});
    }
  }
  return out;
}

namespace fgrd {
inline constexpr std::array<char, 4> kMagic{'F', 'G', 'R', 'D'};
inline constexpr std::uint16_t kVersion = 1;

inline std::size_t header_bytes(std::string_view backbone_name, std::string_view image_id) {
  return 4 + 2 + 2 + backbone_name.size() + 2 + image_id.size() + 4 + 4;
}
}  // namespace fgrd

/// Serializes `grid` in the FGRD layout; returns bytes written.
inline std::size_t write_grid(const FeatureGrid& grid, std::ostream& sink) {
  const auto& spec = spec_of(grid.backbone);
  if (grid.values.rows() != spec.positions || grid.values.cols() != spec.channels) {
    throw InvalidArgument("write_grid: " + std::string(spec.name) + " expects " + std::to_string(spec.positions) +
                          "x" + std::to_string(spec.channels) + ", got " + grid.values.shape_string());
  }
  binary::Writer w(sink);
  w.bytes(fgrd::kMagic.data(), fgrd::kMagic.size());
  w.u16(fgrd::kVersion);
  w.str16(spec.name);
  w.str16(grid.image_id);
  w.u32(static_cast<std::uint32_t>(spec.positions));
  w.u32(static_cast<std::uint32_t>(spec.channels));
  for (double v : grid.values.data()) w.f32(static_cast<float>(v));
  return w.count();
}

inline FeatureGrid read_grid(std::istream& source) {
  binary::Reader r(source);
  std::array<char, 4> magic{};
  r.bytes(magic.data(), magic.size());
  if (magic != fgrd::kMagic) throw BadMagic("not an FGRD stream (bad magic)");
  const auto version = r.u16();
  if (version != fgrd::kVersion) {
    throw UnsupportedVersion("FGRD version " + std::to_string(version) + " not supported (expected " +
                             std::to_string(fgrd::kVersion) + ")");
  }
  const auto& spec = backbone_by_name(r.str16());
  FeatureGrid grid;
  grid.backbone = spec.id;
  grid.image_id = r.str16();
  const auto positions = r.u32();
  const auto channels = r.u32();
  if (positions != spec.positions || channels != spec.channels) {
    throw ShapeMismatch("FGRD declares " + std::to_string(positions) + "x" + std::to_string(channels) + " but " +
                        std::string(spec.name) + " is " + std::to_string(spec.positions) + "x" +
                        std::to_string(spec.channels));
  }
  const std::size_t payload = std::size_t{positions} * channels * sizeof(float);
  std::vector<unsigned char> raw(payload);
  source.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(payload));
  const auto got = static_cast<std::size_t>(source.gcount());
  if (got != payload) throw Truncated(payload, got);

  grid.values = Matrix<double>(positions, channels);
  auto out = grid.values.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint32_t bits = 0;
    for (std::size_t b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(raw[4 * i + b]) << (8 * b);
    out[i] = static_cast<double>(std::bit_cast<float>(bits));
  }
  if (!grid.values.all_finite()) throw FormatError("FGRD payload contains non-finite values");
  return grid;
}

/// Deterministic non-negative pseudo-features. Roughly half the entries are
/// zero, like a post-ReLU activation map; values are float-representable so
/// a write/read round trip is exact.
inline FeatureGrid synth_grid(Backbone backbone, std::string image_id, Rng& rng) {
  const auto& spec = spec_of(backbone);
  FeatureGrid grid{std::move(image_id), backbone, Matrix<double>(spec.positions, spec.channels)};
  for (auto& v : grid.values.data()) {
    const double u = rng.uniform(-1.0, 1.0);
    v = static_cast<double>(static_cast<float>(u > 0.0 ? u : 0.0));
  }
  return grid;
}

/// Per-image seed so synthetic features do not depend on manifest order.
inline std::uint64_t synth_seed(std::uint64_t seed, std::string_view image_id) {
  const auto hash = fnv1a64({reinterpret_cast<const unsigned char*>(image_id.data()), image_id.size()});
  return mix_seed(seed, hash);
}

inline std::string grid_filename(std::string_view image_id) { return std::string(image_id) + ".fgrd"; }

}  // namespace captioner
