#pragma once

#include <array>
#include <span>
#include <vector>

#include <opencv2/core.hpp>

#include "amr/annotations.hpp"

namespace amr {

/// Intersection over union of two boxes, in [0, 1].
double iou(const BBox& a, const BBox& b);

/// Smallest axis-aligned box containing the four corners. A zero-area result
/// raises ValidationError.
BBox quad_to_bbox(const Quad& q);

/// The box's corners in TL, TR, BR, BL order.
Quad bbox_to_quad(const BBox& b);

/// Pushes every edge of the quad outward by margin * (mean left/right edge
/// length), along the quad's own horizontal and vertical directions.
Quad inflate_quad(const Quad& q, double margin);

/// Grows each side by factor * (side length) and clips to the image.
BBox expand_box(const BBox& b, double factor, int image_w, int image_h);

/// Canvas that pads an image with borders up to a target w/h ratio. Only one
/// dimension grows and the image sits centred at (offset_x, offset_y).
struct AspectPadding {
  int canvas_w = 0;
  int canvas_h = 0;
  int offset_x = 0;
  int offset_y = 0;

  friend bool operator==(const AspectPadding&, const AspectPadding&) = default;
};

AspectPadding pad_to_aspect(int image_w, int image_h, double target_ratio);

/// Applies pad_to_aspect with black borders.
cv::Mat pad_image_to_aspect(const cv::Mat& image, double target_ratio, AspectPadding* padding = nullptr);

/// Row-major 3x3 projective transform mapping source pixels to destination
/// pixels in homogeneous coordinates.
class PerspectiveMatrix {
 public:
  PerspectiveMatrix() = default;
  /// Throws DegenerateQuadError when |det| <= 1e-12.
  explicit PerspectiveMatrix(const std::array<double, 9>& m);

  static PerspectiveMatrix identity();

  double operator()(int row, int col) const { return m_[static_cast<std::size_t>(row * 3 + col)]; }
  const std::array<double, 9>& values() const { return m_; }
  double determinant() const;
  PerspectiveMatrix inverse() const;
  PerspectiveMatrix operator*(const PerspectiveMatrix& rhs) const;

 private:
  std::array<double, 9> m_{1, 0, 0, 0, 1, 0, 0, 0, 1};
};

/// Exact four-point correspondence with the bottom-right element fixed to 1,
/// solved as an 8x8 linear system. Raises DegenerateQuadError when the system
/// is singular (including correspondences whose canonical solution has a zero
/// bottom-right element).
PerspectiveMatrix solve_perspective(const std::array<Point, 4>& src, const std::array<Point, 4>& dst);

struct RectifiedFrame {
  int max_w = 1;
  int max_h = 1;
  PerspectiveMatrix matrix;

  /// Destination vertices (0,0), (max_w-1,0), (max_w-1,max_h-1), (0,max_h-1).
  std::array<Point, 4> destination() const;
};

/// Output size and transform that unwarp a counter quad into an upright
/// rectangle. Width/height are the longer of the two opposite edges (Euclidean
/// length, rounded half-up) plus one, so that an already-upright quad maps with
/// the identity. Collinear corners or a self-intersecting quad raise
/// DegenerateQuadError.
RectifiedFrame rectified_frame(const Quad& src);

/// Projects points through the matrix. A vanishing projective denominator
/// raises HorizonError.
std::vector<Point> transform_points(std::span<const Point> pts, const PerspectiveMatrix& m);
Point transform_point(const Point& p, const PerspectiveMatrix& m);

/// Samples a max_w x max_h image where each output pixel is read from the source
/// position given by the inverse transform, with bilinear interpolation and a
/// black fill outside the source. Accepts 8-bit images with 1-4 channels.
cv::Mat warp_image(const cv::Mat& image, const RectifiedFrame& frame);

/// Same sampling rule for an arbitrary destination size and matrix.
cv::Mat warp_perspective(const cv::Mat& image, const PerspectiveMatrix& src_to_dst, int out_w, int out_h);

}  // namespace amr
