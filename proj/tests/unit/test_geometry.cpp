#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include <Eigen/Dense>
#include <opencv2/imgproc.hpp>

#include "amr/errors.hpp"
#include "amr/geometry.hpp"

using namespace amr;

namespace {

// Random convex-ish simple quad in TL, TR, BR, BL order.
Quad random_quad(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> pos(0.0, 800.0), size(20.0, 300.0), jit(-0.2, 0.2);
  const double x = pos(rng), y = pos(rng), w = size(rng), h = size(rng) / 3.0 + 5.0;
  Quad q{{Point{x, y}, Point{x + w, y}, Point{x + w, y + h}, Point{x, y + h}}};
  for (auto& p : q.corners) {
    p.x += jit(rng) * h;
    p.y += jit(rng) * h;
  }
  return q;
}

// Independent oracle: the 8x8 system of the four correspondences with the
// bottom-right element fixed to 1.
std::array<double, 9> oracle_matrix(const std::array<Point, 4>& s, const std::array<Point, 4>& d) {
  Eigen::Matrix<double, 8, 8> A;
  Eigen::Matrix<double, 8, 1> b;
  for (int i = 0; i < 4; ++i) {
    const double x = s[static_cast<std::size_t>(i)].x, y = s[static_cast<std::size_t>(i)].y;
    const double u = d[static_cast<std::size_t>(i)].x, v = d[static_cast<std::size_t>(i)].y;
    A.row(2 * i) << x, y, 1, 0, 0, 0, -u * x, -u * y;
    A.row(2 * i + 1) << 0, 0, 0, x, y, 1, -v * x, -v * y;
    b(2 * i) = u;
    b(2 * i + 1) = v;
  }
  const Eigen::Matrix<double, 8, 1> h = A.colPivHouseholderQr().solve(b);
  return {h(0), h(1), h(2), h(3), h(4), h(5), h(6), h(7), 1.0};
}

double dist(const Point& a, const Point& b) { return std::hypot(a.x - b.x, a.y - b.y); }

}  // namespace

TEST(Iou, HandExamples) {
  const BBox a{0, 0, 2, 2}, b{1, 1, 2, 2};
  EXPECT_NEAR(iou(a, b), 1.0 / 7.0, 1e-12);
  EXPECT_DOUBLE_EQ(iou(a, a), 1.0);
  EXPECT_DOUBLE_EQ(iou(a, BBox{5, 5, 1, 1}), 0.0);
  EXPECT_DOUBLE_EQ(iou(a, BBox{2, 0, 2, 2}), 0.0);
}

TEST(Iou, SymmetryAndBoundsProperty) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> p(-50, 50), s(0.1, 40);
  for (int i = 0; i < 5000; ++i) {
    const BBox a{p(rng), p(rng), s(rng), s(rng)}, b{p(rng), p(rng), s(rng), s(rng)};
    const double v = iou(a, b);
    ASSERT_DOUBLE_EQ(v, iou(b, a));
    ASSERT_GE(v, 0.0);
    ASSERT_LE(v, 1.0);
    ASSERT_NEAR(iou(a, a), 1.0, 1e-12);
  }
}

TEST(QuadToBbox, Examples) {
  const Quad q{{Point{10, 10}, Point{50, 12}, Point{48, 40}, Point{8, 38}}};
  EXPECT_EQ(quad_to_bbox(q), (BBox{8, 10, 42, 30}));
  const BBox r{3, 4, 20, 10};
  EXPECT_EQ(quad_to_bbox(bbox_to_quad(r)), r);
  const Quad degenerate{{Point{5, 5}, Point{5, 5}, Point{5, 5}, Point{5, 5}}};
  EXPECT_THROW(quad_to_bbox(degenerate), ValidationError);
}

TEST(ExpandBox, Examples) {
  const BBox b{10, 10, 100, 40};
  EXPECT_EQ(expand_box(b, 0.0, 640, 480), b);
  EXPECT_EQ(expand_box(b, 0.1, 640, 480), (BBox{0, 6, 120, 48}));
  const BBox corner{600, 450, 40, 30};
  const BBox e = expand_box(corner, 0.5, 640, 480);
  EXPECT_GE(e.x, 0.0);
  EXPECT_GE(e.y, 0.0);
  EXPECT_LE(e.right(), 640.0);
  EXPECT_LE(e.bottom(), 480.0);
  EXPECT_LE(e.x, corner.x);
  EXPECT_LE(e.y, corner.y);
}

TEST(InflateQuad, UprightAndRotated) {
  const Quad q{{Point{10, 20}, Point{110, 20}, Point{110, 60}, Point{10, 60}}};
  const Quad g = inflate_quad(q, 0.25);
  EXPECT_NEAR(g.tl().x, 0.0, 1e-9);
  EXPECT_NEAR(g.tl().y, 10.0, 1e-9);
  EXPECT_NEAR(g.br().x, 120.0, 1e-9);
  EXPECT_NEAR(g.br().y, 70.0, 1e-9);
  EXPECT_EQ(inflate_quad(q, 0.0), q);
  EXPECT_THROW(inflate_quad(q, -0.1), ParameterError);
  // Rotating the quad rotates the margin with it.
  const Quad r{{Point{0, 0}, Point{0, 100}, Point{-40, 100}, Point{-40, 0}}};
  const Quad gr = inflate_quad(r, 0.25);
  EXPECT_NEAR(gr.tl().x, 10.0, 1e-9);
  EXPECT_NEAR(gr.tl().y, -10.0, 1e-9);
  EXPECT_NEAR(gr.br().x, -50.0, 1e-9);
  EXPECT_NEAR(gr.br().y, 110.0, 1e-9);
}

TEST(InflateQuad, ContainsOriginalProperty) {
  std::mt19937_64 rng(12);
  for (int t = 0; t < 200; ++t) {
    const Quad q = random_quad(rng);
    const BBox inner = quad_to_bbox(q), outer = quad_to_bbox(inflate_quad(q, 0.2));
    EXPECT_LT(outer.x, inner.x);
    EXPECT_LT(outer.y, inner.y);
    EXPECT_GT(outer.right(), inner.right());
    EXPECT_GT(outer.bottom(), inner.bottom());
  }
}

TEST(PadToAspect, Examples) {
  EXPECT_EQ(pad_to_aspect(300, 100, 3.0), (AspectPadding{300, 100, 0, 0}));
  EXPECT_EQ(pad_to_aspect(300, 150, 3.0), (AspectPadding{450, 150, 75, 0}));
  EXPECT_EQ(pad_to_aspect(600, 100, 3.0), (AspectPadding{600, 200, 0, 50}));
}

TEST(PadToAspect, NeverShrinksProperty) {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 2000; ++i) {
    const int w = 1 + static_cast<int>(rng() % 900), h = 1 + static_cast<int>(rng() % 900);
    const double r = 0.2 + static_cast<double>(rng() % 1000) / 200.0;
    const auto p = pad_to_aspect(w, h, r);
    ASSERT_GE(p.canvas_w, w);
    ASSERT_GE(p.canvas_h, h);
    ASSERT_TRUE(p.canvas_w == w || p.canvas_h == h);
    ASSERT_LE(std::abs(p.canvas_w - r * p.canvas_h), r + 1.0);
    ASSERT_LE(p.offset_x + w, p.canvas_w);
    ASSERT_LE(p.offset_y + h, p.canvas_h);
  }
}

TEST(PadImage, BlackBordersAroundCentredImage) {
  cv::Mat img(10, 10, CV_8UC3, cv::Scalar(200, 100, 50));
  AspectPadding pad;
  const cv::Mat out = pad_image_to_aspect(img, 3.0, &pad);
  EXPECT_EQ(out.cols, 30);
  EXPECT_EQ(out.rows, 10);
  EXPECT_EQ(pad.offset_x, 10);
  EXPECT_EQ(out.at<cv::Vec3b>(5, 0), cv::Vec3b(0, 0, 0));
  EXPECT_EQ(out.at<cv::Vec3b>(5, 15), cv::Vec3b(200, 100, 50));
}

TEST(Rectify, UprightQuadIsIdentity) {
  const Quad q{{Point{0, 0}, Point{299, 0}, Point{299, 99}, Point{0, 99}}};
  const auto f = rectified_frame(q);
  EXPECT_EQ(f.max_w, 300);
  EXPECT_EQ(f.max_h, 100);
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) EXPECT_NEAR(f.matrix(r, c), r == c ? 1.0 : 0.0, 1e-12);
  }
}

TEST(Rectify, SkewedQuadMatchesOracle) {
  const Quad q{{Point{10, 20}, Point{310, 10}, Point{320, 120}, Point{5, 115}}};
  const auto f = rectified_frame(q);
  const int expect_w = static_cast<int>(std::floor(std::max(dist(q.br(), q.bl()), dist(q.tr(), q.tl())) + 0.5)) + 1;
  const int expect_h = static_cast<int>(std::floor(std::max(dist(q.tr(), q.br()), dist(q.tl(), q.bl())) + 0.5)) + 1;
  EXPECT_EQ(f.max_w, expect_w);
  EXPECT_EQ(f.max_h, expect_h);
  const auto dst = f.destination();
  const auto mapped = transform_points(q.corners, f.matrix);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_LT(dist(mapped[i], dst[i]), 1e-6);
  const auto o = oracle_matrix(q.corners, dst);
  for (std::size_t k = 0; k < 9; ++k) EXPECT_NEAR(f.matrix.values()[k], o[k], 1e-8 * std::max(1.0, std::abs(o[k])));
}

TEST(Rectify, DegenerateQuads) {
  const Quad same{{Point{0, 0}, Point{0, 0}, Point{50, 30}, Point{0, 30}}};
  EXPECT_THROW(rectified_frame(same), DegenerateQuadError);
  const Quad collinear{{Point{0, 0}, Point{10, 0}, Point{20, 0}, Point{0, 30}}};
  EXPECT_THROW(rectified_frame(collinear), DegenerateQuadError);
  const Quad bowtie{{Point{0, 0}, Point{100, 30}, Point{100, 0}, Point{0, 30}}};
  EXPECT_THROW(rectified_frame(bowtie), DegenerateQuadError);
}

TEST(Rectify, HitsDestinationForRandomQuadsProperty) {
  std::mt19937_64 rng(7);
  for (int i = 0; i < 500; ++i) {
    const Quad q = random_quad(rng);
    if (!q.is_simple()) continue;
    const auto f = rectified_frame(q);
    const auto mapped = transform_points(q.corners, f.matrix);
    const auto dst = f.destination();
    for (std::size_t k = 0; k < 4; ++k) ASSERT_LT(dist(mapped[k], dst[k]), 1e-6);
  }
}

TEST(Rectify, TranslationInvariantAndScalesLinearly) {
  std::mt19937_64 rng(8);
  for (int i = 0; i < 300; ++i) {
    const Quad q = random_quad(rng);
    if (!q.is_simple()) continue;
    const auto f = rectified_frame(q);
    Quad moved = q, scaled = q;
    for (auto& p : moved.corners) {
      p.x += 123.25;
      p.y -= 77.5;
    }
    for (auto& p : scaled.corners) {
      p.x *= 2.0;
      p.y *= 2.0;
    }
    const auto fm = rectified_frame(moved);
    EXPECT_EQ(fm.max_w, f.max_w);
    EXPECT_EQ(fm.max_h, f.max_h);
    const auto fs = rectified_frame(scaled);
    EXPECT_LE(std::abs((fs.max_w - 1) - 2 * (f.max_w - 1)), 1);
    EXPECT_LE(std::abs((fs.max_h - 1) - 2 * (f.max_h - 1)), 1);
  }
}

TEST(TransformPoints, MatchesHomogeneousMultiply) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(-1.0, 1.0), p(0.0, 500.0);
  for (int i = 0; i < 200; ++i) {
    const std::array<double, 9> m{1 + 0.3 * u(rng), 0.3 * u(rng), 50 * u(rng), 0.3 * u(rng), 1 + 0.3 * u(rng),
                                  50 * u(rng), 1e-4 * u(rng), 1e-4 * u(rng), 1.0};
    const PerspectiveMatrix M(m);
    const Point pt{p(rng), p(rng)};
    const double X = m[0] * pt.x + m[1] * pt.y + m[2];
    const double Y = m[3] * pt.x + m[4] * pt.y + m[5];
    const double W = m[6] * pt.x + m[7] * pt.y + m[8];
    const Point got = transform_point(pt, M);
    EXPECT_NEAR(got.x, X / W, 1e-9 * std::max(1.0, std::abs(X / W)));
    EXPECT_NEAR(got.y, Y / W, 1e-9 * std::max(1.0, std::abs(Y / W)));
  }
  const std::vector<Point> pts{{1, 2}, {3, 4}};
  const auto same = transform_points(pts, PerspectiveMatrix::identity());
  EXPECT_EQ(same, pts);
}

TEST(TransformPoints, HorizonPointRaises) {
  const PerspectiveMatrix m({1, 0, 0, 0, 1, 0, 1, 0, 0.5});
  EXPECT_THROW(transform_point(Point{-0.5, 3}, m), HorizonError);
}

TEST(PerspectiveMatrix, SingularRejectedAndInverseComposes) {
  EXPECT_THROW(PerspectiveMatrix({1, 2, 3, 2, 4, 6, 0, 0, 1}), DegenerateQuadError);
  const PerspectiveMatrix m({1.2, 0.1, 5, -0.05, 0.9, 3, 1e-4, 2e-4, 1});
  const auto id = m * m.inverse();
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) EXPECT_NEAR(id(r, c) / id(2, 2), r == c ? 1.0 : 0.0, 1e-12);
  }
}

TEST(Warp, IdentityFrameCopiesCrop) {
  cv::Mat img(100, 300, CV_8UC3);
  cv::randu(img, 0, 255);
  const auto f = rectified_frame(Quad{{Point{0, 0}, Point{299, 0}, Point{299, 99}, Point{0, 99}}});
  const cv::Mat out = warp_image(img, f);
  ASSERT_EQ(out.size(), img.size());
  EXPECT_EQ(cv::norm(out, img, cv::NORM_INF), 0.0);

  cv::Mat big(200, 400, CV_8UC3);
  cv::randu(big, 0, 255);
  const auto g = rectified_frame(Quad{{Point{50, 30}, Point{149, 30}, Point{149, 69}, Point{50, 69}}});
  EXPECT_EQ(cv::norm(warp_image(big, g), big(cv::Rect(50, 30, 100, 40)), cv::NORM_INF), 0.0);
}

TEST(Warp, ConstantColourStaysConstant) {
  cv::Mat img(240, 320, CV_8UC3, cv::Scalar(17, 130, 240));
  const Quad q{{Point{40, 50}, Point{260, 40}, Point{270, 120}, Point{35, 115}}};
  const cv::Mat out = warp_image(img, rectified_frame(q));
  const cv::Rect interior(1, 1, out.cols - 2, out.rows - 2);
  cv::Mat diff;
  cv::absdiff(out(interior), cv::Scalar(17, 130, 240), diff);
  EXPECT_EQ(cv::norm(diff, cv::NORM_INF), 0.0);
}

TEST(Warp, OutsideSourceIsBlack) {
  cv::Mat img(50, 50, CV_8UC1, cv::Scalar(255));
  const PerspectiveMatrix shift({1, 0, 100, 0, 1, 100, 0, 0, 1});
  const cv::Mat out = warp_perspective(img, shift, 60, 60);
  EXPECT_EQ(cv::countNonZero(out), 0);
}

TEST(Warp, CheckerboardForwardThenBack) {
  // Smooth checkerboard so that two bilinear resamplings stay close.
  cv::Mat src(121, 241, CV_8UC1);
  for (int y = 0; y < src.rows; ++y) {
    for (int x = 0; x < src.cols; ++x) {
      src.at<uchar>(y, x) = cv::saturate_cast<uchar>(127.5 + 100.0 * std::sin(x * CV_PI / 20.0) * std::sin(y * CV_PI / 20.0));
    }
  }
  const std::array<Point, 4> rect{Point{0, 0}, Point{240, 0}, Point{240, 120}, Point{0, 120}};
  const std::array<Point, 4> quad{Point{40, 30}, Point{330, 45}, Point{320, 200}, Point{30, 190}};
  const PerspectiveMatrix fwd = solve_perspective(rect, quad);
  const cv::Mat warped = warp_perspective(src, fwd, 400, 260);
  const cv::Mat back = warp_perspective(warped, fwd.inverse(), src.cols, src.rows);
  const cv::Rect interior(6, 6, src.cols - 12, src.rows - 12);
  EXPECT_LE(cv::norm(back(interior), src(interior), cv::NORM_INF), 2.0);
}
