#include "amr/annotations.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "amr/errors.hpp"

namespace amr {

namespace {

using nlohmann::json;

bool finite(double v) { return std::isfinite(v); }

double cross(const Point& o, const Point& a, const Point& b) {
  return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
}

int orientation(const Point& a, const Point& b, const Point& c) {
  const double v = cross(a, b, c);
  if (v > 0) return 1;
  if (v < 0) return -1;
  return 0;
}

bool on_segment(const Point& p, const Point& a, const Point& b) {
  return std::min(a.x, b.x) <= p.x && p.x <= std::max(a.x, b.x) &&
         std::min(a.y, b.y) <= p.y && p.y <= std::max(a.y, b.y);
}

bool segments_intersect(const Point& p1, const Point& p2, const Point& q1, const Point& q2) {
  const int o1 = orientation(p1, p2, q1);
  const int o2 = orientation(p1, p2, q2);
  const int o3 = orientation(q1, q2, p1);
  const int o4 = orientation(q1, q2, p2);
  if (o1 != o2 && o3 != o4) return true;
  if (o1 == 0 && on_segment(q1, p1, p2)) return true;
  if (o2 == 0 && on_segment(q2, p1, p2)) return true;
  if (o3 == 0 && on_segment(p1, q1, q2)) return true;
  if (o4 == 0 && on_segment(p2, q1, q2)) return true;
  return false;
}

template <typename T>
T required(const json& record, const char* key, std::size_t index) {
  if (!record.contains(key)) {
    throw ParseError("record " + std::to_string(index) + ": missing field '" + key + "'");
  }
  try {
    return record.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ParseError("record " + std::to_string(index) + ": field '" + key + "': " + e.what());
  }
}

}  // namespace

bool BBox::is_valid() const {
  return finite(x) && finite(y) && finite(w) && finite(h) && w > 0.0 && h > 0.0;
}

void BBox::validate() const {
  if (!finite(x) || !finite(y) || !finite(w) || !finite(h)) {
    throw ValidationError("bbox has a non-finite coordinate");
  }
  if (w <= 0.0 || h <= 0.0) {
    throw ValidationError("bbox must have positive width and height");
  }
}

bool Quad::is_finite() const {
  return std::all_of(corners.begin(), corners.end(),
                     [](const Point& p) { return finite(p.x) && finite(p.y); });
}

bool Quad::is_simple() const {
  if (!is_finite()) return false;
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = i + 1; j < 4; ++j) {
      if (corners[i] == corners[j]) return false;
    }
  }
  // Only the two pairs of opposite edges can cross in a 4-gon.
  return !segments_intersect(corners[0], corners[1], corners[2], corners[3]) &&
         !segments_intersect(corners[1], corners[2], corners[3], corners[0]);
}

void Quad::validate() const {
  if (!is_finite()) throw ValidationError("quad has a non-finite coordinate");
  if (!is_simple()) throw ValidationError("quad is not a simple polygon");
}

std::vector<DigitAnnotation> digits_left_to_right(std::vector<DigitAnnotation> digits) {
  std::stable_sort(digits.begin(), digits.end(), [](const auto& a, const auto& b) {
    return a.bbox.center().x < b.bbox.center().x;
  });
  return digits;
}

void validate_sample(const MeterSample& s) {
  if (s.width <= 0 || s.height <= 0) throw ValidationError("image dimensions must be positive");
  if (s.counter_quad) s.counter_quad->validate();
  for (const auto& d : s.digits) {
    d.bbox.validate();
    if (d.digit_class < 0 || d.digit_class > 9) {
      throw ValidationError("digit class " + std::to_string(d.digit_class) + " outside 0-9");
    }
  }
  for (char c : s.reading) {
    if (c < '0' || c > '9') throw ValidationError("reading contains a non-digit character");
  }
  if (s.legible()) {
    if (s.reading.empty()) throw ValidationError("legible sample has an empty reading");
    if (!s.counter_quad) throw ValidationError("legible sample has no counter corners");
    if (s.digits.size() != s.reading.size()) {
      throw ValidationError("reading '" + s.reading + "' has " + std::to_string(s.reading.size()) +
                            " digits but " + std::to_string(s.digits.size()) + " digit boxes");
    }
    const auto ordered = digits_left_to_right(s.digits);
    for (std::size_t i = 0; i < ordered.size(); ++i) {
      if (ordered[i].digit_class != s.reading[i] - '0') {
        throw ValidationError("digit boxes ordered by x-center do not spell reading '" +
                              s.reading + "'");
      }
    }
  } else if (!s.reading.empty()) {
    throw ValidationError("illegible sample must have an empty reading");
  }
}

std::string to_string(Legibility value) {
  return value == Legibility::legible_operational ? "legible" : "illegible";
}

Legibility legibility_from_string(const std::string& text) {
  if (text == "legible") return Legibility::legible_operational;
  if (text == "illegible") return Legibility::illegible_faulty;
  throw ParseError("unknown legibility '" + text + "'");
}

json quad_to_json(const Quad& quad) {
  json out = json::array();
  for (const auto& p : quad.corners) out.push_back({p.x, p.y});
  return out;
}

Quad quad_from_json(const json& value) {
  if (!value.is_array() || value.size() != 4) {
    throw ParseError("corners must be a list of four [x, y] pairs");
  }
  Quad q;
  for (std::size_t i = 0; i < 4; ++i) {
    const auto& p = value[i];
    if (!p.is_array() || p.size() != 2 || !p[0].is_number() || !p[1].is_number()) {
      throw ParseError("corner " + std::to_string(i) + " must be [x, y]");
    }
    q.corners[i] = {p[0].get<double>(), p[1].get<double>()};
  }
  return q;
}

json sample_to_json(const MeterSample& s) {
  json digits = json::array();
  for (const auto& d : s.digits) {
    digits.push_back({{"bbox", {d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h}}, {"class", d.digit_class}});
  }
  return json{{"image", s.image_ref},
              {"width", s.width},
              {"height", s.height},
              {"legibility", to_string(s.legibility)},
              {"reading", s.reading},
              {"corners", s.counter_quad ? quad_to_json(*s.counter_quad) : json(nullptr)},
              {"digits", digits}};
}

namespace {

MeterSample parse_record(const json& r, std::size_t index) {
  if (!r.is_object()) throw ParseError("record " + std::to_string(index) + " is not an object");
  MeterSample s;
  s.image_ref = required<std::string>(r, "image", index);
  s.width = required<int>(r, "width", index);
  s.height = required<int>(r, "height", index);
  try {
    s.legibility = legibility_from_string(required<std::string>(r, "legibility", index));
  } catch (const ParseError& e) {
    throw ParseError("record " + std::to_string(index) + ": " + e.what());
  }
  s.reading = r.value("reading", std::string{});
  if (r.contains("corners") && !r.at("corners").is_null()) {
    try {
      s.counter_quad = quad_from_json(r.at("corners"));
    } catch (const ParseError& e) {
      throw ParseError("record " + std::to_string(index) + ": " + e.what());
    }
  }
  if (r.contains("digits")) {
    const auto& digits = r.at("digits");
    if (!digits.is_array()) throw ParseError("record " + std::to_string(index) + ": digits must be a list");
    for (const auto& d : digits) {
      const auto& box = d.value("bbox", json());
      if (!box.is_array() || box.size() != 4 || !d.contains("class") || !d.at("class").is_number_integer()) {
        throw ParseError("record " + std::to_string(index) + ": malformed digit entry");
      }
      s.digits.push_back({BBox{box[0].get<double>(), box[1].get<double>(), box[2].get<double>(),
                               box[3].get<double>()},
                          d.at("class").get<int>()});
    }
  }
  return s;
}

}  // namespace

MeterSample sample_from_json(const json& record) {
  MeterSample s = parse_record(record, 0);
  validate_sample(s);
  return s;
}

std::vector<MeterSample> load_annotations(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw IoError("cannot open annotation file " + file.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError("malformed annotation file " + file.string() + ": " + e.what());
  }
  if (!doc.is_array()) throw ParseError("annotation file must hold a top-level list of records");
  std::vector<MeterSample> samples;
  samples.reserve(doc.size());
  for (std::size_t i = 0; i < doc.size(); ++i) {
    MeterSample s = parse_record(doc[i], i);
    try {
      validate_sample(s);
    } catch (const ValidationError& e) {
      throw ValidationError("sample " + std::to_string(i) + ": " + e.what());
    }
    samples.push_back(std::move(s));
  }
  return samples;
}

void save_annotations(const std::vector<MeterSample>& samples, const std::filesystem::path& file) {
  json doc = json::array();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    try {
      validate_sample(samples[i]);
    } catch (const ValidationError& e) {
      throw ValidationError("sample " + std::to_string(i) + ": " + e.what());
    }
    doc.push_back(sample_to_json(samples[i]));
  }
  const auto tmp = file.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw IoError("cannot write annotation file " + file.string());
    out << doc.dump(1) << '\n';
    if (!out) throw IoError("write failed for " + file.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, file, ec);
  if (ec) throw IoError("cannot move annotation file into place: " + ec.message());
}

DatasetSplit split_dataset(const std::vector<MeterSample>& samples, std::uint64_t seed) {
  const std::size_t n = samples.size();
  if (n < 5) throw SizeError("split_dataset needs at least 5 samples, got " + std::to_string(n));

  // Subset sizes by largest remainder over 40/40/20 (train, test, validation).
  const std::array<double, 3> share{0.4, 0.4, 0.2};
  std::array<std::size_t, 3> target{};
  std::array<double, 3> remainder{};
  std::size_t assigned = 0;
  for (std::size_t s = 0; s < 3; ++s) {
    const double ideal = share[s] * static_cast<double>(n);
    target[s] = static_cast<std::size_t>(std::floor(ideal + 1e-9));
    remainder[s] = ideal - static_cast<double>(target[s]);
    assigned += target[s];
  }
  while (assigned < n) {
    const auto s = static_cast<std::size_t>(
        std::max_element(remainder.begin(), remainder.end()) - remainder.begin());
    ++target[s];
    remainder[s] = -1.0;
    ++assigned;
  }

  // Class-contiguous order with a seeded shuffle inside each class, then deal
  // positions to the subset with the largest quota deficit. Dealing a class
  // block proportionally keeps every subset within one sample of exact
  // stratification.
  std::vector<std::size_t> legible;
  std::vector<std::size_t> illegible;
  for (std::size_t i = 0; i < n; ++i) {
    (samples[i].legible() ? legible : illegible).push_back(i);
  }
  std::mt19937_64 rng(seed);
  std::shuffle(legible.begin(), legible.end(), rng);
  std::shuffle(illegible.begin(), illegible.end(), rng);
  std::vector<std::size_t> order = legible;
  order.insert(order.end(), illegible.begin(), illegible.end());

  DatasetSplit split;
  std::array<std::vector<MeterSample>*, 3> out{&split.train, &split.test, &split.validation};
  std::array<std::size_t, 3> count{};
  for (std::size_t pos = 0; pos < n; ++pos) {
    std::size_t best = 0;
    double best_deficit = -1e300;
    for (std::size_t s = 0; s < 3; ++s) {
      if (count[s] >= target[s]) continue;
      const double deficit = static_cast<double>((pos + 1) * target[s]) / static_cast<double>(n) -
                             static_cast<double>(count[s]);
      if (deficit > best_deficit + 1e-12) {
        best_deficit = deficit;
        best = s;
      }
    }
    ++count[best];
    out[best]->push_back(samples[order[pos]]);
  }
  return split;
}

std::filesystem::path resolve_image(const std::filesystem::path& annotation_file,
                                    const MeterSample& sample) {
  std::filesystem::path p(sample.image_ref);
  if (p.is_absolute()) return p;
  return annotation_file.parent_path() / p;
}

}  // namespace amr
