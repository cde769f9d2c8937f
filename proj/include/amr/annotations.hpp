#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

namespace amr {

struct Point {
  double x = 0.0;
  double y = 0.0;

  friend bool operator==(const Point&, const Point&) = default;
};

/// Axis-aligned box in pixels: (x, y) is the top-left corner.
struct BBox {
  double x = 0.0;
  double y = 0.0;
  double w = 0.0;
  double h = 0.0;

  double right() const { return x + w; }
  double bottom() const { return y + h; }
  double area() const { return w * h; }
  Point center() const { return {x + w / 2.0, y + h / 2.0}; }

  bool is_valid() const;
  /// Throws ValidationError when w <= 0, h <= 0 or a coordinate is not finite.
  void validate() const;

  friend bool operator==(const BBox&, const BBox&) = default;
};

/// Counter outline. Corner order is top-left, top-right, bottom-right,
/// bottom-left (clockwise in image coordinates).
struct Quad {
  std::array<Point, 4> corners{};

  const Point& tl() const { return corners[0]; }
  const Point& tr() const { return corners[1]; }
  const Point& br() const { return corners[2]; }
  const Point& bl() const { return corners[3]; }

  bool is_finite() const;
  /// True when no two non-adjacent edges cross and no edge has zero length.
  bool is_simple() const;
  void validate() const;

  friend bool operator==(const Quad&, const Quad&) = default;
};

enum class Legibility { legible_operational, illegible_faulty };

struct DigitAnnotation {
  BBox bbox;
  int digit_class = 0;

  friend bool operator==(const DigitAnnotation&, const DigitAnnotation&) = default;
};

struct MeterSample {
  std::string image_ref;
  int width = 0;
  int height = 0;
  Legibility legibility = Legibility::legible_operational;
  std::string reading;
  std::optional<Quad> counter_quad;
  std::vector<DigitAnnotation> digits;

  bool legible() const { return legibility == Legibility::legible_operational; }

  friend bool operator==(const MeterSample&, const MeterSample&) = default;
};

/// Throws ValidationError describing the first violated invariant.
void validate_sample(const MeterSample& sample);

/// Digits ordered left to right by box x-center (stable for ties).
std::vector<DigitAnnotation> digits_left_to_right(std::vector<DigitAnnotation> digits);

struct DatasetSplit {
  std::vector<MeterSample> train;
  std::vector<MeterSample> validation;
  std::vector<MeterSample> test;
};

std::string to_string(Legibility value);
Legibility legibility_from_string(const std::string& text);

nlohmann::json quad_to_json(const Quad& quad);
Quad quad_from_json(const nlohmann::json& value);
nlohmann::json sample_to_json(const MeterSample& sample);
/// Parses one record; structural problems raise ParseError, invariant
/// problems ValidationError.
MeterSample sample_from_json(const nlohmann::json& record);

std::vector<MeterSample> load_annotations(const std::filesystem::path& file);
void save_annotations(const std::vector<MeterSample>& samples, const std::filesystem::path& file);

/// Stratified 40/40/20 split into train/test/validation. Deterministic for a
/// given seed; requires at least five samples.
DatasetSplit split_dataset(const std::vector<MeterSample>& samples, std::uint64_t seed);

/// Resolves a sample's image_ref against the directory of its annotation file.
std::filesystem::path resolve_image(const std::filesystem::path& annotation_file,
                                    const MeterSample& sample);

}  // namespace amr
