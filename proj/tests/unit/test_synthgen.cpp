#include <gtest/gtest.h>

#include <array>
#include <fstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "amr/errors.hpp"
#include "amr/geometry.hpp"
#include "amr/synthgen.hpp"
#include "test_util.hpp"

using namespace amr;
using amr::test::TempDir;

namespace {

// Deterministic synthetic image with a 5-digit counter: each digit cell is
// filled with a distinct grey level so patch moves are observable.
AnnotatedImage striped_sample() {
  AnnotatedImage a{cv::Mat(480, 640, CV_8UC3, cv::Scalar(30, 30, 30)), amr::test::legible_sample("s.png", "12345")};
  for (std::size_t i = 0; i < a.sample.digits.size(); ++i) {
    const auto& b = a.sample.digits[i].bbox;
    const int v = 50 + 40 * static_cast<int>(i);
    cv::rectangle(a.image, cv::Rect(static_cast<int>(b.x), static_cast<int>(b.y), static_cast<int>(b.w), static_cast<int>(b.h)),
                  cv::Scalar(v, v, v), cv::FILLED);
  }
  return a;
}

GenConfig small_config(int count) {
  GenConfig c;
  c.count = count;
  c.image_w = 320;
  c.image_h = 240;
  c.min_counter_height = 20;
  c.max_counter_height = 40;
  c.seed = 17;
  return c;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST(SynthGen, IllegibleShareIsRounded) {
  EXPECT_EQ(illegible_indices(10, 0.2, 1).size(), 2u);
  EXPECT_EQ(illegible_indices(2000, 0.2, 1).size(), 400u);
  EXPECT_EQ(illegible_indices(7, 0.5, 1).size(), 4u);
  EXPECT_EQ(illegible_indices(10, 0.2, 1), illegible_indices(10, 0.2, 1));
  EXPECT_THROW(illegible_indices(10, 1.5, 1), ParameterError);
}

TEST(SynthGen, RenderedSamplesAreValid) {
  const auto cfg = small_config(12);
  for (std::size_t i = 0; i < 12; ++i) {
    const bool ill = i % 4 == 0;
    const auto a = render_sample(cfg, i, ill);
    EXPECT_EQ(a.image.cols, 320);
    EXPECT_EQ(a.image.rows, 240);
    EXPECT_NO_THROW(validate_sample(a.sample));
    EXPECT_EQ(a.sample.legible(), !ill);
    if (!ill) {
      ASSERT_TRUE(a.sample.counter_quad.has_value());
      EXPECT_TRUE(a.sample.counter_quad->is_simple());
      EXPECT_EQ(a.sample.reading.size(), 5u);
    }
  }
}

TEST(SynthGen, DatasetDeterministicAcrossWorkerCounts) {
  TempDir one("gen1"), four("gen4");
  auto cfg = small_config(10);
  const auto a = generate_dataset(cfg, one.path());
  cfg.workers = 4;
  const auto b = generate_dataset(cfg, four.path());
  EXPECT_EQ(a, b);
  EXPECT_EQ(std::count_if(a.begin(), a.end(), [](const auto& s) { return s.legible(); }), 8);
  for (const auto& s : a) EXPECT_EQ(slurp(one.path() / s.image_ref), slurp(four.path() / s.image_ref));
  EXPECT_EQ(load_annotations(one.path() / "annotations.json"), a);
}

TEST(SynthGen, BadConfigRejected) {
  auto cfg = small_config(5);
  cfg.illegible_fraction = -0.1;
  EXPECT_THROW(cfg.validate(), ParameterError);
  cfg = small_config(5);
  cfg.background_dir = "/nonexistent/backgrounds";
  TempDir d("gen");
  EXPECT_THROW(generate_dataset(cfg, d.path()), IoError);
}

TEST(SynthGen, ConfigJsonRoundTrip) {
  auto cfg = small_config(33);
  cfg.rotating_digit_prob = 0.2;
  const auto back = gen_config_from_json(to_json(cfg));
  EXPECT_EQ(back.count, 33);
  EXPECT_EQ(back.rotating_digit_prob, 0.2);
  EXPECT_EQ(back.seed, cfg.seed);
}

TEST(SynthGen, TrailingDigitClassesRoughlyBalanced) {
  // Leading positions are zero-heavy by design; the last two wheels are not.
  const auto cfg = small_config(80);
  std::array<int, 10> freq{};
  int total = 0;
  for (std::size_t i = 0; i < 80; ++i) {
    const auto s = render_sample(cfg, i, false).sample;
    for (std::size_t k = s.reading.size() - 2; k < s.reading.size(); ++k) {
      ++freq[static_cast<std::size_t>(s.reading[k] - '0')];
      ++total;
    }
  }
  for (int f : freq) EXPECT_LT(static_cast<double>(f) / total, 0.3);
}

TEST(RotatingDigit, LowerDigitExceptNineToZero) {
  EXPECT_EQ(label_rotating_digit(3, 4), 3);
  EXPECT_EQ(label_rotating_digit(0, 1), 0);
  EXPECT_EQ(label_rotating_digit(9, 0), 9);
  EXPECT_THROW(label_rotating_digit(3, 5), ParameterError);
  EXPECT_THROW(label_rotating_digit(4, 3), ParameterError);
}

TEST(Augment, QuarterTurnIsPixelExact) {
  const auto a = striped_sample();
  const auto r = rotate_annotated(a, 90.0, true);
  ASSERT_EQ(r.image.size(), cv::Size(480, 640));
  cv::Mat expect;
  cv::rotate(a.image, expect, cv::ROTATE_90_COUNTERCLOCKWISE);
  EXPECT_EQ(cv::norm(r.image, expect, cv::NORM_INF), 0.0);
  const auto back = rotate_annotated(rotate_annotated(rotate_annotated(r, 90.0, true), 90.0, true), 90.0, true);
  EXPECT_EQ(cv::norm(back.image, a.image, cv::NORM_INF), 0.0);
  for (std::size_t k = 0; k < 4; ++k) {
    EXPECT_NEAR(back.sample.counter_quad->corners[k].x, a.sample.counter_quad->corners[k].x, 1e-9);
    EXPECT_NEAR(back.sample.counter_quad->corners[k].y, a.sample.counter_quad->corners[k].y, 1e-9);
  }
}

TEST(Augment, NeutralHsvGeomIsIdentity) {
  const auto a = striped_sample();
  HsvGeomConfig none;
  none.hue_shift = none.saturation_scale = none.value_scale = none.max_rotation_deg = none.crop_fraction = 0.0;
  const auto out = augment_hsv_geom(a, 5, none);
  EXPECT_EQ(cv::norm(out.image, a.image, cv::NORM_INF), 0.0);
  EXPECT_EQ(out.sample, a.sample);
  EXPECT_EQ(cv::norm(jitter_hsv(a.image, 0, 1, 1), a.image, cv::NORM_INF), 0.0);
}

TEST(Augment, HsvGeomKeepsCounterInsideProperty) {
  const auto a = striped_sample();
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    const auto out = augment_hsv_geom(a, seed);
    ASSERT_TRUE(out.sample.counter_quad.has_value());
    for (const auto& p : out.sample.counter_quad->corners) {
      EXPECT_GE(p.x, -1e-6);
      EXPECT_GE(p.y, -1e-6);
      EXPECT_LE(p.x, out.image.cols + 1e-6);
      EXPECT_LE(p.y, out.image.rows + 1e-6);
    }
    EXPECT_EQ(out.sample.reading, "12345");
  }
}

TEST(Augment, ReversePermutation) {
  const auto a = striped_sample();
  const std::vector<int> rev{4, 3, 2, 1, 0};
  const auto p = permute_digits_with(a, rev);
  ASSERT_TRUE(p.applied);
  EXPECT_EQ(p.sample.sample.reading, "54321");
  EXPECT_NO_THROW(validate_sample(p.sample.sample));
  // The first cell now shows the grey level of the last one.
  const auto& b0 = a.sample.digits[0].bbox;
  EXPECT_EQ(p.sample.image.at<cv::Vec3b>(static_cast<int>(b0.y + 5), static_cast<int>(b0.x + 5))[0], 50 + 40 * 4);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(p.sample.sample.digits[i].bbox, a.sample.digits[i].bbox);
  EXPECT_THROW(permute_digits_with(a, std::vector<int>{0, 1, 2}), ParameterError);
}

TEST(Augment, PermutationSkippedOnOverlap) {
  auto a = striped_sample();
  a.sample.digits[1].bbox.x = a.sample.digits[0].bbox.x + 2;
  const auto p = permute_digits_with(a, std::vector<int>{1, 0, 2, 3, 4});
  EXPECT_FALSE(p.applied);
  EXPECT_FALSE(p.notice.empty());
  EXPECT_EQ(p.sample.sample, a.sample);
}

TEST(Augment, PermutationPreservesMultisetProperty) {
  const auto a = striped_sample();
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const auto p = permute_digits(a, seed);
    ASSERT_TRUE(p.applied);
    auto r = p.sample.sample.reading;
    std::sort(r.begin(), r.end());
    EXPECT_EQ(r, "12345");
    for (std::size_t i = 0; i < 5; ++i) {
      EXPECT_EQ(p.sample.sample.reading[i], "12345"[static_cast<std::size_t>(p.permutation[i])]);
    }
  }
}

TEST(Augment, CropWithoutCounterLeavesNoBoxes) {
  const auto a = striped_sample();
  const auto c = crop_annotated(a, cv::Rect(300, 0, 200, 100));
  EXPECT_EQ(c.image.size(), cv::Size(200, 100));
  const LabeledImage li{a.image, {quad_to_bbox(*a.sample.counter_quad)}};
  const auto neg = crop_labeled(li, cv::Rect(300, 0, 200, 100));
  EXPECT_TRUE(neg.boxes.empty());
  const auto pos = crop_labeled(li, cv::Rect(90, 190, 300, 100));
  ASSERT_EQ(pos.boxes.size(), 1u);
  EXPECT_EQ(pos.boxes[0].x, li.boxes[0].x - 90);
}

TEST(Augment, DisabledDetectorAugmentIsIdentity) {
  const auto a = striped_sample();
  const LabeledImage li{a.image, {BBox{100, 200, 150, 40}}};
  const auto out = augment_detector(li, 9, DetectorAugmentConfig::disabled());
  EXPECT_EQ(cv::norm(out.image, li.image, cv::NORM_INF), 0.0);
  EXPECT_EQ(out.boxes, li.boxes);
}

TEST(Augment, DetectorAugmentKeepsBoxesInsideProperty) {
  const auto a = striped_sample();
  const LabeledImage li{a.image, {BBox{100, 200, 150, 40}}};
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    const auto out = augment_detector(li, seed);
    for (const auto& b : out.boxes) {
      EXPECT_GE(b.x, -1e-6);
      EXPECT_GE(b.y, -1e-6);
      EXPECT_LE(b.right(), out.image.cols + 1e-6);
      EXPECT_LE(b.bottom(), out.image.rows + 1e-6);
    }
  }
}
