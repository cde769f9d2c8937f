#include "amr/synthgen.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <numeric>
#include <random>
#include <thread>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "amr/errors.hpp"
#include "amr/geometry.hpp"

namespace amr {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

struct Rng {
  std::mt19937_64 eng;

  explicit Rng(std::uint64_t seed) : eng(seed) {}
  double uni(double a, double b) { return std::uniform_real_distribution<double>(a, b)(eng); }
  int integer(int a, int b) { return std::uniform_int_distribution<int>(a, b)(eng); }
  bool chance(double p) { return p > 0.0 && uni(0.0, 1.0) < p; }
  cv::Scalar color(int lo, int hi) { return cv::Scalar(integer(lo, hi), integer(lo, hi), integer(lo, hi)); }
  cv::Scalar grey(int lo, int hi) {
    const int base = integer(lo, hi);
    return cv::Scalar(std::clamp(base + integer(-12, 12), 0, 255), std::clamp(base + integer(-12, 12), 0, 255),
                      std::clamp(base + integer(-12, 12), 0, 255));
  }
};

constexpr int kHersheyFonts[] = {cv::FONT_HERSHEY_SIMPLEX, cv::FONT_HERSHEY_DUPLEX, cv::FONT_HERSHEY_COMPLEX,
                                 cv::FONT_HERSHEY_TRIPLEX};
constexpr int kFontCount = 5;  // four Hershey faces plus seven-segment
constexpr int kSevenSegment = 4;

// Segments a..g of a seven-segment display per digit.
constexpr const char* kSegments[] = {"abcdef", "bc",    "abged",   "abgcd", "fgbc",
                                     "afgcd",  "afgedc", "abc", "abcdefg", "abcdfg"};

struct GlyphStyle {
  int font_id = 0;
  double glyph_h = 20.0;
  int thickness = 2;
  cv::Scalar ink;
};

void draw_seven_segment(cv::Mat& img, int digit, cv::Point2d origin, double gw, double gh, int thickness,
                        const cv::Scalar& color) {
  const double x0 = origin.x, x1 = origin.x + gw;
  const double y0 = origin.y, ym = origin.y + gh / 2.0, y1 = origin.y + gh;
  const double inset = thickness * 0.6;
  auto seg = [&](double ax, double ay, double bx, double by) {
    cv::line(img, cv::Point(cvRound(ax * 16), cvRound(ay * 16)), cv::Point(cvRound(bx * 16), cvRound(by * 16)), color,
             thickness, cv::LINE_AA, 4);
  };
  for (const char* s = kSegments[digit]; *s; ++s) {
    switch (*s) {
      case 'a': seg(x0 + inset, y0, x1 - inset, y0); break;
      case 'b': seg(x1, y0 + inset, x1, ym - inset); break;
      case 'c': seg(x1, ym + inset, x1, y1 - inset); break;
      case 'd': seg(x0 + inset, y1, x1 - inset, y1); break;
      case 'e': seg(x0, ym + inset, x0, y1 - inset); break;
      case 'f': seg(x0, y0 + inset, x0, ym - inset); break;
      case 'g': seg(x0 + inset, ym, x1 - inset, ym); break;
      default: break;
    }
  }
}

// Draws `digit` centred in the cell, shifted down by dy pixels, into both the
// cell image and its ink mask.
void draw_glyph(cv::Mat& cell, cv::Mat& mask, int digit, double dy, const GlyphStyle& st) {
  if (st.font_id == kSevenSegment) {
    const double gh = st.glyph_h;
    const double gw = gh * 0.5;
    const cv::Point2d origin((cell.cols - gw) / 2.0, (cell.rows - gh) / 2.0 + dy);
    draw_seven_segment(cell, digit, origin, gw, gh, st.thickness, st.ink);
    draw_seven_segment(mask, digit, origin, gw, gh, st.thickness, cv::Scalar(255));
    return;
  }
  const int font = kHersheyFonts[st.font_id];
  const double base_h = cv::getTextSize("0", font, 1.0, st.thickness, nullptr).height;
  const double scale = st.glyph_h / std::max(1.0, base_h);
  const std::string text(1, static_cast<char>('0' + digit));
  int baseline = 0;
  const cv::Size size = cv::getTextSize(text, font, scale, st.thickness, &baseline);
  const cv::Point org(cvRound((cell.cols - size.width) / 2.0), cvRound((cell.rows + size.height) / 2.0 + dy));
  cv::putText(cell, text, org, font, scale, st.ink, st.thickness, cv::LINE_AA);
  cv::putText(mask, text, org, font, scale, cv::Scalar(255), st.thickness, cv::LINE_AA);
}

std::string random_word(Rng& rng, int len, bool digits) {
  static const char* letters = "ABCDEFGHKLMNPRSTVWXZ";
  std::string s;
  for (int i = 0; i < len; ++i) {
    s.push_back(digits ? static_cast<char>('0' + rng.integer(0, 9)) : letters[rng.integer(0, 19)]);
  }
  return s;
}

void draw_random_text(cv::Mat& img, Rng& rng, cv::Point org, double height, const cv::Scalar& color) {
  const int font = kHersheyFonts[rng.integer(0, 3)];
  const double scale = height / 22.0;
  const int kind = rng.integer(0, 3);
  std::string text;
  if (kind == 0) text = random_word(rng, rng.integer(2, 5), false);
  else if (kind == 1) text = "N " + random_word(rng, rng.integer(5, 9), true);
  else if (kind == 2) text = random_word(rng, 3, true) + "V " + random_word(rng, 2, true) + "Hz";
  else text = "kWh";
  cv::putText(img, text, org, font, scale, color, std::max(1, cvRound(height / 12.0)), cv::LINE_AA);
}

cv::Mat procedural_background(Rng& rng, int w, int h) {
  cv::Mat bg(h, w, CV_8UC3);
  const cv::Scalar a = rng.color(30, 230);
  const cv::Scalar b = rng.color(30, 230);
  const bool vertical = rng.chance(0.5);
  for (int y = 0; y < h; ++y) {
    auto* row = bg.ptr<cv::Vec3b>(y);
    for (int x = 0; x < w; ++x) {
      const double t = vertical ? static_cast<double>(y) / h : static_cast<double>(x) / w;
      for (int c = 0; c < 3; ++c) row[x][c] = cv::saturate_cast<uchar>(a[c] * (1.0 - t) + b[c] * t);
    }
  }
  const int clutter = rng.integer(6, 18);
  for (int i = 0; i < clutter; ++i) {
    const cv::Scalar col = rng.color(0, 255);
    const cv::Point p(rng.integer(0, w - 1), rng.integer(0, h - 1));
    const int size = rng.integer(8, std::max(9, std::min(w, h) / 3));
    switch (rng.integer(0, 4)) {
      case 0:
        cv::rectangle(bg, p, p + cv::Point(size, rng.integer(4, size)), col, rng.chance(0.5) ? -1 : rng.integer(1, 4));
        break;
      case 1:
        cv::circle(bg, p, size / 2, col, rng.chance(0.5) ? -1 : rng.integer(1, 4), cv::LINE_AA);
        break;
      case 2:
        cv::line(bg, p, cv::Point(rng.integer(0, w - 1), rng.integer(0, h - 1)), col, rng.integer(1, 6), cv::LINE_AA);
        break;
      case 3:
        cv::ellipse(bg, p, cv::Size(size / 2, std::max(2, size / 4)), rng.uni(0, 180), 0, 360, col, -1, cv::LINE_AA);
        break;
      default:
        // Stray text and numbers so the detector has to learn what a counter is.
        draw_random_text(bg, rng, p, rng.uni(8.0, 30.0), col);
        break;
    }
  }
  cv::GaussianBlur(bg, bg, cv::Size(0, 0), rng.uni(0.5, 2.0));
  return bg;
}

cv::Mat background_from_pool(Rng& rng, const std::vector<cv::Mat>& pool, int w, int h) {
  const cv::Mat& src = pool[static_cast<std::size_t>(rng.integer(0, static_cast<int>(pool.size()) - 1))];
  const double s = std::max(static_cast<double>(w) / src.cols, static_cast<double>(h) / src.rows);
  cv::Mat scaled;
  cv::resize(src, scaled, cv::Size(std::max(w, cvRound(src.cols * s)), std::max(h, cvRound(src.rows * s))));
  const int x = rng.integer(0, scaled.cols - w);
  const int y = rng.integer(0, scaled.rows - h);
  cv::Mat out = scaled(cv::Rect(x, y, w, h)).clone();
  if (out.channels() == 1) cv::cvtColor(out, out, cv::COLOR_GRAY2BGR);
  if (out.channels() == 4) cv::cvtColor(out, out, cv::COLOR_BGRA2BGR);
  return out;
}

std::string random_reading(Rng& rng, int n) {
  // Leading zeros make '0' the most frequent class, as on real meters.
  const double r = rng.uni(0.0, 1.0);
  int zeros = r < 0.4 ? 0 : r < 0.7 ? 1 : r < 0.85 ? 2 : r < 0.95 ? 3 : 4;
  zeros = std::min(zeros, n - 1);
  std::string s(static_cast<std::size_t>(zeros), '0');
  s.push_back(static_cast<char>('0' + rng.integer(1, 9)));
  while (static_cast<int>(s.size()) < n) s.push_back(static_cast<char>('0' + rng.integer(0, 9)));
  return s;
}

// Edge-convention homography (pixel i spans [i, i+1]) to the pixel-centre
// matrix OpenCV warps with.
cv::Mat to_center_convention(const PerspectiveMatrix& m) {
  const PerspectiveMatrix shift_in({1, 0, 0.5, 0, 1, 0.5, 0, 0, 1});
  const PerspectiveMatrix shift_out({1, 0, -0.5, 0, 1, -0.5, 0, 0, 1});
  const PerspectiveMatrix c = shift_out * m * shift_in;
  cv::Mat out(3, 3, CV_64F);
  for (int r = 0; r < 3; ++r)
    for (int k = 0; k < 3; ++k) out.at<double>(r, k) = c(r, k);
  return out;
}

BBox bbox_of(std::span<const Point> pts) {
  double x0 = pts[0].x, y0 = pts[0].y, x1 = pts[0].x, y1 = pts[0].y;
  for (const auto& p : pts) {
    x0 = std::min(x0, p.x);
    y0 = std::min(y0, p.y);
    x1 = std::max(x1, p.x);
    y1 = std::max(y1, p.y);
  }
  return {x0, y0, x1 - x0, y1 - y0};
}

BBox transform_box(const BBox& b, const PerspectiveMatrix& m) {
  const std::array<Point, 4> pts{Point{b.x, b.y}, Point{b.right(), b.y}, Point{b.right(), b.bottom()},
                                 Point{b.x, b.bottom()}};
  return bbox_of(transform_points(pts, m));
}

void add_photometric_noise(cv::Mat& img, Rng& rng) {
  // Uneven illumination.
  const double g0 = rng.uni(0.65, 1.15);
  const double g1 = rng.uni(0.65, 1.15);
  const bool vertical = rng.chance(0.5);
  cv::Mat f;
  img.convertTo(f, CV_32FC3);
  for (int y = 0; y < f.rows; ++y) {
    auto* row = f.ptr<cv::Vec3f>(y);
    for (int x = 0; x < f.cols; ++x) {
      const double t = vertical ? static_cast<double>(y) / f.rows : static_cast<double>(x) / f.cols;
      row[x] *= static_cast<float>(g0 * (1.0 - t) + g1 * t);
    }
  }
  const double sigma = rng.uni(0.0, 6.0);
  if (sigma > 0.5) {
    cv::Mat noise(f.size(), CV_32FC3);
    cv::RNG cvrng(rng.eng());
    cvrng.fill(noise, cv::RNG::NORMAL, 0.0, sigma);
    f += noise;
  }
  f.convertTo(img, CV_8UC3);
  if (rng.chance(0.5)) cv::GaussianBlur(img, img, cv::Size(0, 0), rng.uni(0.3, 0.8));
}

struct FaceLayout {
  int counter_x = 0, counter_y = 0, counter_w = 0, counter_h = 0;
  int face_w = 0, face_h = 0;
  std::vector<BBox> digit_boxes;  // face coordinates, left to right
};

}  // namespace

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  return splitmix64(seed ^ splitmix64(stream + 0x632BE59BD9B4E019ULL));
}

void GenConfig::validate() const {
  auto fail = [](const std::string& m) { throw ParameterError("generator: " + m); };
  if (count < 1) fail("count must be at least 1");
  if (image_w < 64 || image_h < 64) fail("image size must be at least 64x64");
  if (!(illegible_fraction >= 0.0 && illegible_fraction <= 1.0)) fail("illegible_fraction must lie in [0, 1]");
  if (!(rotating_digit_prob >= 0.0 && rotating_digit_prob <= 1.0)) fail("rotating_digit_prob must lie in [0, 1]");
  if (!(portrait_prob >= 0.0 && portrait_prob <= 1.0)) fail("portrait_prob must lie in [0, 1]");
  if (!(max_perspective_jitter >= 0.0 && max_perspective_jitter <= 0.5)) fail("max_perspective_jitter must lie in [0, 0.5]");
  if (!(max_rotation_deg >= 0.0 && max_rotation_deg <= 30.0)) fail("max_rotation_deg must lie in [0, 30]");
  if (min_digits < 1 || max_digits > 10 || min_digits > max_digits) fail("digit count range must lie within 1-10");
  if (min_counter_height < 12 || max_counter_height < min_counter_height) fail("counter height range is invalid");
  if (max_counter_height * 3 > std::min(image_w, image_h)) fail("counter height too large for the image");
  if (workers < 1) fail("workers must be at least 1");
}

json to_json(const GenConfig& c) {
  json j = {{"count", c.count},
            {"image_w", c.image_w},
            {"image_h", c.image_h},
            {"illegible_fraction", c.illegible_fraction},
            {"rotating_digit_prob", c.rotating_digit_prob},
            {"max_perspective_jitter", c.max_perspective_jitter},
            {"max_rotation_deg", c.max_rotation_deg},
            {"min_digits", c.min_digits},
            {"max_digits", c.max_digits},
            {"min_counter_height", c.min_counter_height},
            {"max_counter_height", c.max_counter_height},
            {"portrait_prob", c.portrait_prob},
            {"seed", c.seed},
            {"workers", c.workers}};
  if (c.background_dir) j["background_dir"] = c.background_dir->string();
  return j;
}

GenConfig gen_config_from_json(const json& j, GenConfig c) {
  if (!j.is_object()) throw ParseError("generator config must be a JSON object");
  try {
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("count", c.count);
    get("image_w", c.image_w);
    get("image_h", c.image_h);
    get("illegible_fraction", c.illegible_fraction);
    get("rotating_digit_prob", c.rotating_digit_prob);
    get("max_perspective_jitter", c.max_perspective_jitter);
    get("max_rotation_deg", c.max_rotation_deg);
    get("min_digits", c.min_digits);
    get("max_digits", c.max_digits);
    get("min_counter_height", c.min_counter_height);
    get("max_counter_height", c.max_counter_height);
    get("portrait_prob", c.portrait_prob);
    get("seed", c.seed);
    get("workers", c.workers);
    if (j.contains("background_dir")) c.background_dir = fs::path(j.at("background_dir").get<std::string>());
  } catch (const json::exception& e) {
    throw ParseError(std::string("generator config: ") + e.what());
  }
  return c;
}

int label_rotating_digit(int lower, int upper) {
  if (lower < 0 || lower > 9 || upper < 0 || upper > 9 || (lower + 1) % 10 != upper) {
    throw ParameterError("rotating digit pair (" + std::to_string(lower) + ", " + std::to_string(upper) +
                         ") is not adjacent");
  }
  return lower;
}

std::vector<std::size_t> illegible_indices(int count, double fraction, std::uint64_t seed) {
  if (count < 0 || !(fraction >= 0.0 && fraction <= 1.0)) throw ParameterError("invalid illegible split");
  std::vector<std::size_t> idx(static_cast<std::size_t>(count));
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 eng(mix_seed(seed, 0xFA17ULL));
  std::shuffle(idx.begin(), idx.end(), eng);
  idx.resize(static_cast<std::size_t>(std::llround(count * fraction)));
  std::sort(idx.begin(), idx.end());
  return idx;
}

AnnotatedImage render_sample(const GenConfig& cfg, std::size_t index, bool illegible,
                             const std::vector<cv::Mat>* backgrounds) {
  Rng rng(mix_seed(cfg.seed, index));
  const bool portrait = rng.chance(cfg.portrait_prob);
  const int W = portrait ? cfg.image_h : cfg.image_w;
  const int H = portrait ? cfg.image_w : cfg.image_h;
  cv::Mat scene = (backgrounds && !backgrounds->empty()) ? background_from_pool(rng, *backgrounds, W, H)
                                                         : procedural_background(rng, W, H);

  // Counter layout in face coordinates.
  CounterStyle style;
  style.digit_count = rng.integer(cfg.min_digits, cfg.max_digits);
  style.palette = rng.chance(0.6) ? Palette::dark_on_light : Palette::light_on_dark;
  style.font_id = rng.integer(0, kFontCount - 1);
  const int n = style.digit_count;
  FaceLayout L;
  L.counter_h = rng.integer(cfg.min_counter_height, cfg.max_counter_height);
  const int margin_y = std::max(2, cvRound(L.counter_h * rng.uni(0.06, 0.14)));
  const int cell_h = L.counter_h - 2 * margin_y;
  const int cell_w = std::max(6, cvRound(cell_h * rng.uni(0.55, 0.72)));
  style.cell_gap = std::max(1, cvRound(cell_w * rng.uni(0.08, 0.3)));
  const int margin_x = std::max(2, cvRound(L.counter_h * rng.uni(0.1, 0.3)));
  L.counter_w = 2 * margin_x + n * cell_w + (n - 1) * style.cell_gap;
  const int face_mx = cvRound(L.counter_h * rng.uni(0.3, 1.2));
  const int face_top = cvRound(L.counter_h * rng.uni(0.4, 1.5));
  const int face_bottom = cvRound(L.counter_h * rng.uni(0.6, 2.2));
  L.face_w = L.counter_w + 2 * face_mx;
  L.face_h = L.counter_h + face_top + face_bottom;
  L.counter_x = face_mx;
  L.counter_y = face_top;

  const bool dark_digits = style.palette == Palette::dark_on_light;
  const cv::Scalar counter_bg = dark_digits ? rng.grey(185, 250) : rng.grey(5, 55);
  const cv::Scalar ink = dark_digits ? rng.grey(0, 50) : rng.grey(200, 255);
  const cv::Scalar face_col = dark_digits ? rng.color(30, 140) : rng.color(120, 230);

  // Meter face.
  cv::Mat face(L.face_h, L.face_w, CV_8UC3, face_col);
  cv::rectangle(face, cv::Rect(0, 0, L.face_w, L.face_h), face_col * 0.6, std::max(1, L.counter_h / 12));
  if (rng.chance(0.7)) {
    draw_random_text(face, rng, cv::Point(face_mx, std::max(8, face_top - L.counter_h / 6)),
                     std::min(face_top * 0.6, L.counter_h * 0.5), rng.chance(0.5) ? ink : face_col * 0.4);
  }
  if (face_bottom > L.counter_h / 2) {
    draw_random_text(face, rng, cv::Point(face_mx, L.counter_y + L.counter_h + cvRound(face_bottom * 0.6)),
                     std::min(face_bottom * 0.4, L.counter_h * 0.4), face_col * 0.35);
  }
  if (rng.chance(0.5)) {
    const int r = std::max(2, L.counter_h / 10);
    for (const cv::Point& p : {cv::Point(r * 2, r * 2), cv::Point(L.face_w - r * 2, r * 2),
                              cv::Point(r * 2, L.face_h - r * 2), cv::Point(L.face_w - r * 2, L.face_h - r * 2)}) {
      cv::circle(face, p, r, face_col * 0.5, -1, cv::LINE_AA);
    }
  }

  // Counter window with one drum cell per digit.
  const cv::Rect counter_rect(L.counter_x, L.counter_y, L.counter_w, L.counter_h);
  face(counter_rect).setTo(counter_bg);
  const std::string reading = random_reading(rng, n);
  const bool rotating = !illegible && rng.chance(cfg.rotating_digit_prob);
  const double fault_pick = rng.uni(0.0, 1.0);
  const FaultMode fault = !illegible            ? FaultMode::none
                          : fault_pick < 0.3    ? FaultMode::blank_display
                          : fault_pick < 0.7    ? FaultMode::occluded
                                                : FaultMode::heavy_blur;
  GlyphStyle glyph;
  glyph.font_id = style.font_id;
  glyph.glyph_h = cell_h * rng.uni(0.6, 0.78);
  glyph.thickness = std::max(1, cvRound(glyph.glyph_h / rng.uni(7.0, 11.0)));
  glyph.ink = ink;
  std::string labels = reading;
  for (int i = 0; i < n; ++i) {
    const cv::Rect cell(L.counter_x + margin_x + i * (cell_w + style.cell_gap), L.counter_y + margin_y, cell_w, cell_h);
    cv::Mat cell_img(cell.size(), CV_8UC3, counter_bg + cv::Scalar::all(rng.integer(-10, 10)));
    cv::Mat mask(cell.size(), CV_8UC1, cv::Scalar(0));
    const int d = reading[static_cast<std::size_t>(i)] - '0';
    if (fault != FaultMode::blank_display) {
      if (rotating && i == n - 1) {
        const int upper = (d + 1) % 10;
        const double f = rng.uni(0.15, 0.55);
        draw_glyph(cell_img, mask, d, -f * cell_h, glyph);
        draw_glyph(cell_img, mask, upper, (1.0 - f) * cell_h, glyph);
        labels[static_cast<std::size_t>(i)] = static_cast<char>('0' + label_rotating_digit(d, upper));
      } else {
        draw_glyph(cell_img, mask, d, 0.0, glyph);
      }
    }
    cell_img.copyTo(face(cell));
    cv::Mat ink_px;
    cv::threshold(mask, ink_px, 64, 255, cv::THRESH_BINARY);
    cv::Rect tight = cv::boundingRect(ink_px);
    if (tight.area() == 0) tight = cv::Rect(0, 0, cell_w, cell_h);
    L.digit_boxes.push_back({static_cast<double>(cell.x + tight.x), static_cast<double>(cell.y + tight.y),
                             static_cast<double>(tight.width), static_cast<double>(tight.height)});
    if (i + 1 < n) {
      const int sep_x = cell.x + cell_w + style.cell_gap / 2;
      cv::line(face, cv::Point(sep_x, L.counter_y), cv::Point(sep_x, L.counter_y + L.counter_h - 1),
               counter_bg * 0.5, std::max(1, style.cell_gap / 2));
    }
  }

  // Faults that make the counter unreadable.
  if (fault == FaultMode::occluded) {
    const int covered = static_cast<int>(std::ceil(0.6 * n)) + rng.integer(0, n - static_cast<int>(std::ceil(0.6 * n)));
    const int first = rng.integer(0, n - covered);
    const BBox& a = L.digit_boxes[static_cast<std::size_t>(first)];
    const BBox& b = L.digit_boxes[static_cast<std::size_t>(first + covered - 1)];
    const cv::Scalar dirt = rng.chance(0.3) ? rng.grey(215, 255) : rng.color(40, 150);
    const int pad = std::max(2, cell_w / 4);
    cv::rectangle(face, cv::Point(cvRound(a.x) - pad, L.counter_y + margin_y / 2),
                  cv::Point(cvRound(b.right()) + pad, L.counter_y + L.counter_h - margin_y / 2), dirt, -1);
    for (int k = 0; k < covered; ++k) {
      const BBox& c = L.digit_boxes[static_cast<std::size_t>(first + k)];
      cv::ellipse(face, cv::Point(cvRound(c.center().x), cvRound(c.center().y)),
                  cv::Size(cell_w, cvRound(cell_h * rng.uni(0.5, 0.8))), rng.uni(0, 180), 0, 360, dirt, -1,
                  cv::LINE_AA);
    }
  } else if (fault == FaultMode::heavy_blur) {
    cv::Mat roi = face(counter_rect);
    cv::GaussianBlur(roi, roi, cv::Size(0, 0), cell_h * rng.uni(0.25, 0.4));
  } else if (fault == FaultMode::blank_display && rng.chance(0.5)) {
    cv::Mat roi = face(counter_rect);
    cv::Mat noise(roi.size(), CV_8UC3);
    cv::RNG cvrng(rng.eng());
    cvrng.fill(noise, cv::RNG::UNIFORM, 0, 40);
    if (dark_digits) cv::subtract(roi, noise, roi);
    else cv::add(roi, noise, roi);
  }

  // Pose: rotation about a random centre plus per-corner perspective jitter.
  const std::array<Point, 4> face_corners{Point{0, 0}, Point{static_cast<double>(L.face_w), 0},
                                          Point{static_cast<double>(L.face_w), static_cast<double>(L.face_h)},
                                          Point{0, static_cast<double>(L.face_h)}};
  const std::array<Point, 4> counter_corners{
      Point{static_cast<double>(L.counter_x), static_cast<double>(L.counter_y)},
      Point{static_cast<double>(L.counter_x + L.counter_w), static_cast<double>(L.counter_y)},
      Point{static_cast<double>(L.counter_x + L.counter_w), static_cast<double>(L.counter_y + L.counter_h)},
      Point{static_cast<double>(L.counter_x), static_cast<double>(L.counter_y + L.counter_h)}};
  const double jitter = cfg.max_perspective_jitter * L.counter_h / std::sqrt(2.0);
  std::optional<PerspectiveMatrix> pose;
  Quad quad;
  for (int attempt = 0; attempt < 200 && !pose; ++attempt) {
    const double theta = rng.uni(-cfg.max_rotation_deg, cfg.max_rotation_deg) * CV_PI / 180.0;
    const double cx = rng.uni(0.0, W), cy = rng.uni(0.0, H);
    std::array<Point, 4> dst{};
    for (std::size_t k = 0; k < 4; ++k) {
      const double px = face_corners[k].x - L.face_w / 2.0, py = face_corners[k].y - L.face_h / 2.0;
      dst[k] = {cx + std::cos(theta) * px - std::sin(theta) * py + rng.uni(-jitter, jitter),
                cy + std::sin(theta) * px + std::cos(theta) * py + rng.uni(-jitter, jitter)};
    }
    PerspectiveMatrix m = solve_perspective(face_corners, dst);
    const auto q = transform_points(counter_corners, m);
    const bool face_inside = attempt < 100;
    const auto& check = face_inside ? std::span<const Point>(dst) : std::span<const Point>(q);
    const double margin = 4.0;
    const bool inside = std::all_of(check.begin(), check.end(), [&](const Point& p) {
      return p.x >= margin && p.y >= margin && p.x <= W - margin && p.y <= H - margin;
    });
    if (!inside) continue;
    std::copy(q.begin(), q.end(), quad.corners.begin());
    pose = m;
  }
  if (!pose) throw DataError("could not place the meter inside the image");

  cv::Mat warped;
  cv::Mat alpha;
  const cv::Mat hc = to_center_convention(*pose);
  cv::warpPerspective(face, warped, hc, scene.size(), cv::INTER_LINEAR, cv::BORDER_CONSTANT);
  cv::warpPerspective(cv::Mat(face.size(), CV_32FC1, cv::Scalar(1.0f)), alpha, hc, scene.size(), cv::INTER_LINEAR,
                      cv::BORDER_CONSTANT);
  for (int y = 0; y < H; ++y) {
    auto* s = scene.ptr<cv::Vec3b>(y);
    const auto* w = warped.ptr<cv::Vec3b>(y);
    const auto* a = alpha.ptr<float>(y);
    for (int x = 0; x < W; ++x) {
      if (a[x] <= 0.0f) continue;
      for (int c = 0; c < 3; ++c) s[x][c] = cv::saturate_cast<uchar>(a[x] * w[x][c] + (1.0f - a[x]) * s[x][c]);
    }
  }
  add_photometric_noise(scene, rng);

  AnnotatedImage out;
  out.image = scene;
  char name[32];
  std::snprintf(name, sizeof name, "images/meter_%06zu.png", index);
  out.sample.image_ref = name;
  out.sample.width = W;
  out.sample.height = H;
  out.sample.counter_quad = quad;
  if (illegible) {
    out.sample.legibility = Legibility::illegible_faulty;
  } else {
    out.sample.legibility = Legibility::legible_operational;
    out.sample.reading = labels;
    for (int i = 0; i < n; ++i) {
      out.sample.digits.push_back(
          {transform_box(L.digit_boxes[static_cast<std::size_t>(i)], *pose), labels[static_cast<std::size_t>(i)] - '0'});
    }
  }
  validate_sample(out.sample);
  return out;
}

std::vector<MeterSample> generate_dataset(const GenConfig& cfg, const fs::path& out_dir) {
  cfg.validate();
  std::error_code ec;
  fs::create_directories(out_dir / "images", ec);
  if (ec) throw IoError("cannot create " + (out_dir / "images").string() + ": " + ec.message());

  std::vector<cv::Mat> backgrounds;
  if (cfg.background_dir) {
    if (!fs::is_directory(*cfg.background_dir)) throw IoError("background directory not found: " + cfg.background_dir->string());
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(*cfg.background_dir)) {
      const auto ext = e.path().extension().string();
      if (ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      cv::Mat img = cv::imread(f.string(), cv::IMREAD_COLOR);
      if (!img.empty()) backgrounds.push_back(img);
    }
    if (backgrounds.empty()) throw IoError("no readable images in " + cfg.background_dir->string());
  }

  const auto ill = illegible_indices(cfg.count, cfg.illegible_fraction, cfg.seed);
  std::vector<char> is_ill(static_cast<std::size_t>(cfg.count), 0);
  for (auto i : ill) is_ill[i] = 1;

  std::vector<MeterSample> samples(static_cast<std::size_t>(cfg.count));
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto work = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= samples.size()) return;
      try {
        AnnotatedImage a = render_sample(cfg, i, is_ill[i] != 0, &backgrounds);
        const fs::path file = out_dir / a.sample.image_ref;
        if (!cv::imwrite(file.string(), a.image)) throw IoError("cannot write " + file.string());
        samples[i] = std::move(a.sample);
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next = samples.size();
        return;
      }
    }
  };
  const int nthreads = std::min<int>(cfg.workers, cfg.count);
  std::vector<std::thread> pool;
  for (int t = 1; t < nthreads; ++t) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);

  save_annotations(samples, out_dir / "annotations.json");
  return samples;
}

// --- Augmentation -----------------------------------------------------------

cv::Mat jitter_hsv(const cv::Mat& bgr, double hue_shift, double saturation_factor, double value_factor) {
  if (hue_shift == 0.0 && saturation_factor == 1.0 && value_factor == 1.0) return bgr.clone();
  if (bgr.channels() == 1) {
    cv::Mat out;
    bgr.convertTo(out, -1, value_factor, 0.0);
    return out;
  }
  cv::Mat hsv;
  cv::cvtColor(bgr, hsv, cv::COLOR_BGR2HSV);
  const int shift = static_cast<int>(std::lround(hue_shift));
  for (int y = 0; y < hsv.rows; ++y) {
    auto* row = hsv.ptr<cv::Vec3b>(y);
    for (int x = 0; x < hsv.cols; ++x) {
      row[x][0] = static_cast<uchar>(((row[x][0] + shift) % 180 + 180) % 180);
      row[x][1] = cv::saturate_cast<uchar>(row[x][1] * saturation_factor);
      row[x][2] = cv::saturate_cast<uchar>(row[x][2] * value_factor);
    }
  }
  cv::Mat out;
  cv::cvtColor(hsv, out, cv::COLOR_HSV2BGR);
  return out;
}

namespace {

// Applies a 2x3 pixel-centre affine map to the image and, in edge
// convention, to every annotation.
AnnotatedImage affine_annotated(const AnnotatedImage& in, const cv::Matx23d& m, cv::Size out_size) {
  AnnotatedImage out;
  cv::warpAffine(in.image, out.image, cv::Mat(m), out_size, cv::INTER_LINEAR, cv::BORDER_CONSTANT);
  const PerspectiveMatrix centre({m(0, 0), m(0, 1), m(0, 2), m(1, 0), m(1, 1), m(1, 2), 0, 0, 1});
  const PerspectiveMatrix edge = PerspectiveMatrix({1, 0, 0.5, 0, 1, 0.5, 0, 0, 1}) * centre *
                                 PerspectiveMatrix({1, 0, -0.5, 0, 1, -0.5, 0, 0, 1});
  out.sample = in.sample;
  out.sample.width = out_size.width;
  out.sample.height = out_size.height;
  if (in.sample.counter_quad) {
    Quad q;
    for (std::size_t k = 0; k < 4; ++k) q.corners[k] = transform_point(in.sample.counter_quad->corners[k], edge);
    out.sample.counter_quad = q;
  }
  for (auto& d : out.sample.digits) d.bbox = transform_box(d.bbox, edge);
  return out;
}

}  // namespace

AnnotatedImage crop_annotated(const AnnotatedImage& in, cv::Rect r) {
  r &= cv::Rect(0, 0, in.image.cols, in.image.rows);
  if (r.area() == 0) throw ParameterError("crop rectangle lies outside the image");
  AnnotatedImage out;
  out.image = in.image(r).clone();
  out.sample = in.sample;
  out.sample.width = r.width;
  out.sample.height = r.height;
  if (out.sample.counter_quad) {
    for (auto& p : out.sample.counter_quad->corners) {
      p.x -= r.x;
      p.y -= r.y;
    }
  }
  for (auto& d : out.sample.digits) {
    d.bbox.x -= r.x;
    d.bbox.y -= r.y;
  }
  return out;
}

namespace {

cv::Rect integer_rect(const BBox& b, cv::Size bounds) {
  const int x0 = std::clamp(static_cast<int>(std::floor(b.x)), 0, bounds.width);
  const int y0 = std::clamp(static_cast<int>(std::floor(b.y)), 0, bounds.height);
  const int x1 = std::clamp(static_cast<int>(std::ceil(b.right())), 0, bounds.width);
  const int y1 = std::clamp(static_cast<int>(std::ceil(b.bottom())), 0, bounds.height);
  return {x0, y0, x1 - x0, y1 - y0};
}

}  // namespace

AnnotatedImage rotate_annotated(const AnnotatedImage& in, double degrees, bool expand_canvas) {
  double c = std::cos(degrees * CV_PI / 180.0);
  double s = std::sin(degrees * CV_PI / 180.0);
  if (std::fmod(degrees, 90.0) == 0.0) {
    c = std::round(c);
    s = std::round(s);
  }
  const double W = in.image.cols, H = in.image.rows;
  const double cx = (W - 1.0) / 2.0, cy = (H - 1.0) / 2.0;
  cv::Size out_size = in.image.size();
  if (expand_canvas) {
    out_size = cv::Size(static_cast<int>(std::lround(std::abs(W * c) + std::abs(H * s))),
                        static_cast<int>(std::lround(std::abs(W * s) + std::abs(H * c))));
  }
  const double ox = (out_size.width - 1.0) / 2.0, oy = (out_size.height - 1.0) / 2.0;
  // Counter-clockwise on screen (y points down).
  const cv::Matx23d m(c, s, ox - c * cx - s * cy, -s, c, oy + s * cx - c * cy);
  return affine_annotated(in, m, out_size);
}

AnnotatedImage augment_hsv_geom(const AnnotatedImage& in, std::uint64_t seed, const HsvGeomConfig& cfg) {
  Rng rng(seed);
  const double hue = rng.uni(-cfg.hue_shift, cfg.hue_shift);
  const double sat = rng.uni(1.0 - cfg.saturation_scale, 1.0 + cfg.saturation_scale);
  const double val = rng.uni(1.0 - cfg.value_scale, 1.0 + cfg.value_scale);
  const double angle = rng.uni(-cfg.max_rotation_deg, cfg.max_rotation_deg);
  AnnotatedImage out{jitter_hsv(in.image, hue, sat, val), in.sample};

  if (angle != 0.0) {
    Point centre{out.image.cols / 2.0, out.image.rows / 2.0};
    if (in.sample.counter_quad) centre = quad_to_bbox(*in.sample.counter_quad).center();
    const double c = std::cos(angle * CV_PI / 180.0), s = std::sin(angle * CV_PI / 180.0);
    const double px = centre.x - 0.5, py = centre.y - 0.5;
    const cv::Matx23d m(c, s, px - c * px - s * py, -s, c, py + s * px - c * py);
    out = affine_annotated(out, m, out.image.size());
  }

  if (cfg.crop_fraction > 0.0 && out.sample.counter_quad) {
    std::vector<Point> keep(out.sample.counter_quad->corners.begin(), out.sample.counter_quad->corners.end());
    for (const auto& d : out.sample.digits) {
      keep.push_back({d.bbox.x, d.bbox.y});
      keep.push_back({d.bbox.right(), d.bbox.bottom()});
    }
    const BBox k = bbox_of(keep);
    const int W = out.image.cols, H = out.image.rows;
    const double left = std::clamp(std::floor(k.x), 0.0, static_cast<double>(W));
    const double top = std::clamp(std::floor(k.y), 0.0, static_cast<double>(H));
    const double right = std::clamp(W - std::ceil(k.right()), 0.0, static_cast<double>(W));
    const double bottom = std::clamp(H - std::ceil(k.bottom()), 0.0, static_cast<double>(H));
    const int l = static_cast<int>(left * rng.uni(0.0, cfg.crop_fraction));
    const int t = static_cast<int>(top * rng.uni(0.0, cfg.crop_fraction));
    const int r = static_cast<int>(right * rng.uni(0.0, cfg.crop_fraction));
    const int b = static_cast<int>(bottom * rng.uni(0.0, cfg.crop_fraction));
    if (W - l - r >= 2 && H - t - b >= 2 && (l | t | r | b) != 0) {
      out = crop_annotated(out, cv::Rect(l, t, W - l - r, H - t - b));
    }
  }
  return out;
}

PermuteResult permute_digits_with(const AnnotatedImage& in, std::span<const int> permutation) {
  PermuteResult res;
  res.sample = {in.image.clone(), in.sample};
  const auto ordered = digits_left_to_right(in.sample.digits);
  const std::size_t n = ordered.size();
  std::vector<int> check(permutation.begin(), permutation.end());
  std::sort(check.begin(), check.end());
  for (std::size_t i = 0; i < check.size(); ++i) {
    if (check.size() != n || check[i] != static_cast<int>(i)) {
      throw ParameterError("permutation does not match the " + std::to_string(n) + " digit boxes");
    }
  }
  res.permutation.assign(permutation.begin(), permutation.end());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      if (iou(ordered[i].bbox, ordered[j].bbox) > 0.2) {
        res.notice = "digit boxes overlap (IoU > 0.2); permutation skipped";
        return res;
      }
    }
  }
  std::vector<DigitAnnotation> digits = ordered;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t src = static_cast<std::size_t>(permutation[i]);
    const cv::Rect from = integer_rect(ordered[src].bbox, in.image.size());
    const cv::Rect to = integer_rect(ordered[i].bbox, in.image.size());
    if (from.area() == 0 || to.area() == 0) continue;
    cv::Mat patch;
    cv::resize(in.image(from), patch, to.size(), 0, 0, cv::INTER_LINEAR);
    patch.copyTo(res.sample.image(to));
    digits[i].digit_class = ordered[src].digit_class;
  }
  res.sample.sample.digits = digits;
  res.sample.sample.reading.clear();
  for (const auto& d : digits) res.sample.sample.reading.push_back(static_cast<char>('0' + d.digit_class));
  res.applied = true;
  return res;
}

PermuteResult permute_digits(const AnnotatedImage& in, std::uint64_t seed) {
  std::vector<int> perm(in.sample.digits.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 eng(seed);
  std::shuffle(perm.begin(), perm.end(), eng);
  return permute_digits_with(in, perm);
}

DetectorAugmentConfig DetectorAugmentConfig::disabled() {
  DetectorAugmentConfig c;
  c.crop_prob = c.shear_prob = c.grayscale_prob = c.hsv_prob = 0.0;
  return c;
}

namespace {

std::optional<BBox> clip_box(const BBox& b, double w, double h, double original_area, double min_area_kept) {
  const double x0 = std::clamp(b.x, 0.0, w), y0 = std::clamp(b.y, 0.0, h);
  const double x1 = std::clamp(b.right(), 0.0, w), y1 = std::clamp(b.bottom(), 0.0, h);
  const BBox c{x0, y0, x1 - x0, y1 - y0};
  if (c.w <= 0.0 || c.h <= 0.0 || c.area() < min_area_kept * original_area) return std::nullopt;
  return c;
}

}  // namespace

LabeledImage crop_labeled(const LabeledImage& in, cv::Rect rect, double min_area_kept) {
  rect &= cv::Rect(0, 0, in.image.cols, in.image.rows);
  if (rect.area() == 0) throw ParameterError("crop rectangle lies outside the image");
  LabeledImage out;
  out.image = in.image(rect).clone();
  for (const auto& b : in.boxes) {
    const BBox shifted{b.x - rect.x, b.y - rect.y, b.w, b.h};
    if (auto c = clip_box(shifted, rect.width, rect.height, b.area(), min_area_kept)) out.boxes.push_back(*c);
  }
  return out;
}

LabeledImage augment_detector(const LabeledImage& in, std::uint64_t seed, const DetectorAugmentConfig& cfg) {
  Rng rng(seed);
  LabeledImage out{in.image.clone(), in.boxes};
  if (rng.chance(cfg.crop_prob)) {
    const int w = std::max(2, cvRound(out.image.cols * rng.uni(cfg.min_crop_keep, 1.0)));
    const int h = std::max(2, cvRound(out.image.rows * rng.uni(cfg.min_crop_keep, 1.0)));
    const cv::Rect r(rng.integer(0, out.image.cols - w), rng.integer(0, out.image.rows - h), w, h);
    out = crop_labeled(out, r, cfg.min_box_area_kept);
  }
  if (rng.chance(cfg.shear_prob)) {
    const double k = rng.uni(-cfg.max_shear, cfg.max_shear);
    const double cy = (out.image.rows - 1) / 2.0;
    const cv::Matx23d m(1.0, k, -k * cy, 0.0, 1.0, 0.0);
    cv::Mat sheared;
    cv::warpAffine(out.image, sheared, cv::Mat(m), out.image.size(), cv::INTER_LINEAR, cv::BORDER_CONSTANT);
    const PerspectiveMatrix edge({1.0, k, -k * cy - 0.5 * k, 0, 1, 0, 0, 0, 1});
    std::vector<BBox> boxes;
    for (const auto& b : out.boxes) {
      const BBox t = transform_box(b, edge);
      if (auto c = clip_box(t, sheared.cols, sheared.rows, t.area(), cfg.min_box_area_kept)) boxes.push_back(*c);
    }
    out = {sheared, boxes};
  }
  if (rng.chance(cfg.grayscale_prob) && out.image.channels() == 3) {
    cv::Mat g;
    cv::cvtColor(out.image, g, cv::COLOR_BGR2GRAY);
    cv::cvtColor(g, out.image, cv::COLOR_GRAY2BGR);
  }
  if (rng.chance(cfg.hsv_prob)) {
    out.image = jitter_hsv(out.image, rng.uni(-cfg.hue_shift, cfg.hue_shift),
                           rng.uni(1.0 - cfg.saturation_scale, 1.0 + cfg.saturation_scale),
                           rng.uni(1.0 - cfg.value_scale, 1.0 + cfg.value_scale));
  }
  return out;
}

}  // namespace amr
