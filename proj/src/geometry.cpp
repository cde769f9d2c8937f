#include "amr/geometry.hpp"

#include <algorithm>
#include <cmath>

#include "amr/errors.hpp"

namespace amr {

double iou(const BBox& a, const BBox& b) {
  const double iw = std::min(a.right(), b.right()) - std::max(a.x, b.x);
  const double ih = std::min(a.bottom(), b.bottom()) - std::max(a.y, b.y);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  if (uni <= 0.0) return 0.0;
  return std::clamp(inter / uni, 0.0, 1.0);
}

BBox quad_to_bbox(const Quad& q) {
  double x0 = q.corners[0].x, x1 = x0, y0 = q.corners[0].y, y1 = y0;
  for (const auto& p : q.corners) {
    x0 = std::min(x0, p.x);
    x1 = std::max(x1, p.x);
    y0 = std::min(y0, p.y);
    y1 = std::max(y1, p.y);
  }
  BBox b{x0, y0, x1 - x0, y1 - y0};
  b.validate();
  return b;
}

Quad bbox_to_quad(const BBox& b) {
  return Quad{{Point{b.x, b.y}, Point{b.right(), b.y}, Point{b.right(), b.bottom()},
               Point{b.x, b.bottom()}}};
}

Quad inflate_quad(const Quad& q, double margin) {
  if (!(margin >= 0.0)) throw ParameterError("quad margin must be non-negative");
  auto unit = [](double x, double y) {
    const double n = std::hypot(x, y);
    return n > 0.0 ? Point{x / n, y / n} : Point{0.0, 0.0};
  };
  const Point u = unit(q.tr().x - q.tl().x + q.br().x - q.bl().x, q.tr().y - q.tl().y + q.br().y - q.bl().y);
  const Point v = unit(q.bl().x - q.tl().x + q.br().x - q.tr().x, q.bl().y - q.tl().y + q.br().y - q.tr().y);
  const double h = 0.5 * (std::hypot(q.bl().x - q.tl().x, q.bl().y - q.tl().y) +
                          std::hypot(q.br().x - q.tr().x, q.br().y - q.tr().y));
  const double m = margin * h;
  const std::array<std::pair<double, double>, 4> signs{{{-1, -1}, {1, -1}, {1, 1}, {-1, 1}}};
  Quad out = q;
  for (std::size_t k = 0; k < 4; ++k) {
    out.corners[k].x += m * (signs[k].first * u.x + signs[k].second * v.x);
    out.corners[k].y += m * (signs[k].first * u.y + signs[k].second * v.y);
  }
  return out;
}

BBox expand_box(const BBox& b, double factor, int image_w, int image_h) {
  if (factor < 0.0) throw ParameterError("expand factor must be non-negative");
  const double dx = factor * b.w;
  const double dy = factor * b.h;
  const double x0 = std::max(0.0, b.x - dx);
  const double y0 = std::max(0.0, b.y - dy);
  const double x1 = std::min(static_cast<double>(image_w), b.right() + dx);
  const double y1 = std::min(static_cast<double>(image_h), b.bottom() + dy);
  return BBox{x0, y0, std::max(0.0, x1 - x0), std::max(0.0, y1 - y0)};
}

AspectPadding pad_to_aspect(int image_w, int image_h, double target_ratio) {
  if (!(target_ratio > 0.0)) throw ParameterError("target aspect ratio must be positive");
  AspectPadding p{image_w, image_h, 0, 0};
  const auto wide = static_cast<int>(std::lround(image_h * target_ratio));
  if (wide > image_w) {
    p.canvas_w = wide;
  } else {
    p.canvas_h = std::max(image_h, static_cast<int>(std::lround(image_w / target_ratio)));
  }
  p.offset_x = (p.canvas_w - image_w) / 2;
  p.offset_y = (p.canvas_h - image_h) / 2;
  return p;
}

cv::Mat pad_image_to_aspect(const cv::Mat& image, double target_ratio, AspectPadding* padding) {
  const auto p = pad_to_aspect(image.cols, image.rows, target_ratio);
  if (padding) *padding = p;
  cv::Mat canvas(p.canvas_h, p.canvas_w, image.type(), cv::Scalar::all(0));
  image.copyTo(canvas(cv::Rect(p.offset_x, p.offset_y, image.cols, image.rows)));
  return canvas;
}

// ---------------------------------------------------------------------------

PerspectiveMatrix::PerspectiveMatrix(const std::array<double, 9>& m) : m_(m) {
  if (!(std::abs(determinant()) > 1e-12)) throw DegenerateQuadError("perspective matrix is singular");
}

PerspectiveMatrix PerspectiveMatrix::identity() { return PerspectiveMatrix(); }

double PerspectiveMatrix::determinant() const {
  const auto& a = m_;
  return a[0] * (a[4] * a[8] - a[5] * a[7]) - a[1] * (a[3] * a[8] - a[5] * a[6]) +
         a[2] * (a[3] * a[7] - a[4] * a[6]);
}

PerspectiveMatrix PerspectiveMatrix::inverse() const {
  const auto& a = m_;
  const double det = determinant();
  if (!(std::abs(det) > 1e-300)) throw DegenerateQuadError("perspective matrix is not invertible");
  std::array<double, 9> inv{
      (a[4] * a[8] - a[5] * a[7]) / det, (a[2] * a[7] - a[1] * a[8]) / det,
      (a[1] * a[5] - a[2] * a[4]) / det, (a[5] * a[6] - a[3] * a[8]) / det,
      (a[0] * a[8] - a[2] * a[6]) / det, (a[2] * a[3] - a[0] * a[5]) / det,
      (a[3] * a[7] - a[4] * a[6]) / det, (a[1] * a[6] - a[0] * a[7]) / det,
      (a[0] * a[4] - a[1] * a[3]) / det};
  PerspectiveMatrix out;
  out.m_ = inv;
  return out;
}

PerspectiveMatrix PerspectiveMatrix::operator*(const PerspectiveMatrix& rhs) const {
  std::array<double, 9> r{};
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      double s = 0.0;
      for (int k = 0; k < 3; ++k) s += (*this)(i, k) * rhs(k, j);
      r[static_cast<std::size_t>(i * 3 + j)] = s;
    }
  }
  PerspectiveMatrix out;
  out.m_ = r;
  return out;
}

namespace {

// Similarity that moves the centroid to the origin and the mean distance to
// sqrt(2); conditions the linear system for pixel-scale coordinates.
std::array<double, 9> normalizer(const std::array<Point, 4>& pts) {
  double cx = 0, cy = 0;
  for (const auto& p : pts) {
    cx += p.x;
    cy += p.y;
  }
  cx /= 4.0;
  cy /= 4.0;
  double mean = 0;
  for (const auto& p : pts) mean += std::hypot(p.x - cx, p.y - cy);
  mean /= 4.0;
  const double s = mean > 0 ? std::sqrt(2.0) / mean : 1.0;
  return {s, 0, -s * cx, 0, s, -s * cy, 0, 0, 1};
}

Point apply_affine(const std::array<double, 9>& t, const Point& p) {
  return {t[0] * p.x + t[1] * p.y + t[2], t[3] * p.x + t[4] * p.y + t[5]};
}

// Gaussian elimination with partial pivoting; returns false when singular.
bool solve8(std::array<std::array<double, 9>, 8>& a, std::array<double, 8>& x) {
  double scale = 0.0;
  for (const auto& row : a) {
    for (std::size_t j = 0; j < 8; ++j) scale = std::max(scale, std::abs(row[j]));
  }
  if (scale == 0.0) return false;
  for (std::size_t col = 0; col < 8; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < 8; ++r) {
      if (std::abs(a[r][col]) > std::abs(a[piv][col])) piv = r;
    }
    if (std::abs(a[piv][col]) <= 1e-12 * scale) return false;
    std::swap(a[piv], a[col]);
    for (std::size_t r = col + 1; r < 8; ++r) {
      const double f = a[r][col] / a[col][col];
      for (std::size_t c = col; c < 9; ++c) a[r][c] -= f * a[col][c];
    }
  }
  for (std::size_t i = 8; i-- > 0;) {
    double s = a[i][8];
    for (std::size_t j = i + 1; j < 8; ++j) s -= a[i][j] * x[j];
    x[i] = s / a[i][i];
  }
  return true;
}

bool collinear(const Point& a, const Point& b, const Point& c, double scale) {
  const double cr = (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
  return std::abs(cr) <= 1e-9 * scale * scale;
}

double dist(const Point& a, const Point& b) { return std::hypot(a.x - b.x, a.y - b.y); }

int round_half_up(double v) { return static_cast<int>(std::floor(v + 0.5)); }

}  // namespace

PerspectiveMatrix solve_perspective(const std::array<Point, 4>& src, const std::array<Point, 4>& dst) {
  const auto ts = normalizer(src);
  const auto td = normalizer(dst);
  std::array<std::array<double, 9>, 8> a{};
  for (std::size_t i = 0; i < 4; ++i) {
    const Point s = apply_affine(ts, src[i]);
    const Point d = apply_affine(td, dst[i]);
    a[2 * i] = {s.x, s.y, 1, 0, 0, 0, -s.x * d.x, -s.y * d.x, d.x};
    a[2 * i + 1] = {0, 0, 0, s.x, s.y, 1, -s.x * d.y, -s.y * d.y, d.y};
  }
  std::array<double, 8> h{};
  if (!solve8(a, h)) throw DegenerateQuadError("point correspondence is degenerate");
  // H = Td^-1 * Hn * Ts, then renormalised so the bottom-right element is 1.
  const std::array<double, 9> td_inv{1.0 / td[0], 0, -td[2] / td[0], 0, 1.0 / td[4], -td[5] / td[4], 0, 0, 1};
  std::array<double, 9> hn{h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0};
  auto mul = [](const std::array<double, 9>& x, const std::array<double, 9>& y) {
    std::array<double, 9> r{};
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        for (int k = 0; k < 3; ++k) r[i * 3 + j] += x[i * 3 + k] * y[k * 3 + j];
    return r;
  };
  auto m = mul(mul(td_inv, hn), ts);
  double norm = 0.0;
  for (double v : m) norm = std::max(norm, std::abs(v));
  if (!(std::abs(m[8]) > 1e-12 * norm)) {
    throw DegenerateQuadError("perspective solution has a vanishing bottom-right element");
  }
  const double m33 = m[8];
  for (double& v : m) v /= m33;
  return PerspectiveMatrix(m);
}

std::array<Point, 4> RectifiedFrame::destination() const {
  const double w = max_w - 1.0;
  const double h = max_h - 1.0;
  return {Point{0, 0}, Point{w, 0}, Point{w, h}, Point{0, h}};
}

RectifiedFrame rectified_frame(const Quad& src) {
  if (!src.is_finite()) throw DegenerateQuadError("quad has non-finite corners");
  const auto& c = src.corners;
  double scale = 0.0;
  for (std::size_t i = 0; i < 4; ++i) scale = std::max(scale, dist(c[i], c[(i + 1) % 4]));
  for (std::size_t i = 0; i < 4; ++i) {
    if (scale == 0.0 || collinear(c[i], c[(i + 1) % 4], c[(i + 2) % 4], scale)) {
      throw DegenerateQuadError("three or more quad corners are collinear");
    }
  }
  if (!src.is_simple()) throw DegenerateQuadError("quad is self-intersecting");

  RectifiedFrame f;
  f.max_w = std::max(1, round_half_up(std::max(dist(src.br(), src.bl()), dist(src.tr(), src.tl()))) + 1);
  f.max_h = std::max(1, round_half_up(std::max(dist(src.tr(), src.br()), dist(src.tl(), src.bl()))) + 1);
  f.matrix = solve_perspective(src.corners, f.destination());
  return f;
}

Point transform_point(const Point& p, const PerspectiveMatrix& m) {
  const double w = m(2, 0) * p.x + m(2, 1) * p.y + m(2, 2);
  if (!(std::abs(w) > 1e-12)) throw HorizonError("point maps to the horizon line");
  return {(m(0, 0) * p.x + m(0, 1) * p.y + m(0, 2)) / w, (m(1, 0) * p.x + m(1, 1) * p.y + m(1, 2)) / w};
}

std::vector<Point> transform_points(std::span<const Point> pts, const PerspectiveMatrix& m) {
  std::vector<Point> out;
  out.reserve(pts.size());
  for (const auto& p : pts) out.push_back(transform_point(p, m));
  return out;
}

namespace {

template <int Channels>
void warp_kernel(const cv::Mat& src, cv::Mat& dst, const PerspectiveMatrix& inv) {
  using Pixel = cv::Vec<uchar, Channels>;
  const int w = src.cols;
  const int h = src.rows;
  auto at = [&](int x, int y, int ch) -> double {
    if (x < 0 || y < 0 || x >= w || y >= h) return 0.0;
    return src.ptr<Pixel>(y)[x][ch];
  };
  for (int y = 0; y < dst.rows; ++y) {
    auto* row = dst.ptr<Pixel>(y);
    for (int x = 0; x < dst.cols; ++x) {
      const double den = inv(2, 0) * x + inv(2, 1) * y + inv(2, 2);
      Pixel out = Pixel::all(0);
      if (std::abs(den) > 1e-12) {
        const double sx = (inv(0, 0) * x + inv(0, 1) * y + inv(0, 2)) / den;
        const double sy = (inv(1, 0) * x + inv(1, 1) * y + inv(1, 2)) / den;
        if (sx > -1.0 && sy > -1.0 && sx < w && sy < h) {
          const int x0 = static_cast<int>(std::floor(sx));
          const int y0 = static_cast<int>(std::floor(sy));
          const double fx = sx - x0;
          const double fy = sy - y0;
          for (int ch = 0; ch < Channels; ++ch) {
            const double v = (1 - fx) * (1 - fy) * at(x0, y0, ch) + fx * (1 - fy) * at(x0 + 1, y0, ch) +
                             (1 - fx) * fy * at(x0, y0 + 1, ch) + fx * fy * at(x0 + 1, y0 + 1, ch);
            out[ch] = cv::saturate_cast<uchar>(v);
          }
        }
      }
      row[x] = out;
    }
  }
}

}  // namespace

cv::Mat warp_perspective(const cv::Mat& image, const PerspectiveMatrix& src_to_dst, int out_w, int out_h) {
  if (image.depth() != CV_8U) throw ParameterError("warp expects an 8-bit image");
  cv::Mat dst(std::max(1, out_h), std::max(1, out_w), image.type(), cv::Scalar::all(0));
  const auto inv = src_to_dst.inverse();
  switch (image.channels()) {
    case 1: warp_kernel<1>(image, dst, inv); break;
    case 2: warp_kernel<2>(image, dst, inv); break;
    case 3: warp_kernel<3>(image, dst, inv); break;
    case 4: warp_kernel<4>(image, dst, inv); break;
    default: throw ParameterError("warp supports 1 to 4 channels");
  }
  return dst;
}

cv::Mat warp_image(const cv::Mat& image, const RectifiedFrame& frame) {
  return warp_perspective(image, frame.matrix, frame.max_w, frame.max_h);
}

}  // namespace amr
