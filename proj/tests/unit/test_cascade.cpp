#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include <opencv2/imgproc.hpp>

#include "amr/cascade.hpp"
#include "amr/errors.hpp"
#include "amr/geometry.hpp"

using namespace amr;

namespace {

Detection det(BBox b, double conf, int cls = 0) { return Detection{b, cls, conf}; }

// Stage doubles that count their calls.
struct FakeDetector : CounterDetector {
  std::vector<Detection> out;
  int calls = 0;
  std::vector<Detection> detect(const cv::Mat&) override {
    ++calls;
    return out;
  }
};

struct FakeCdcc : CornerClassifier {
  CounterVerdict verdict;
  int calls = 0;
  cv::Size seen;
  CounterVerdict classify(const cv::Mat& patch) override {
    ++calls;
    seen = patch.size();
    return verdict;
  }
};

struct FakeOcr : DigitRecognizer {
  std::vector<Detection> out;
  int calls = 0;
  cv::Size seen;
  std::vector<Detection> recognize(const cv::Mat& patch) override {
    ++calls;
    seen = patch.size();
    return out;
  }
};

CounterVerdict full_canvas_verdict(double p_illegible) {
  CounterVerdict v;
  v.corners_norm = {0.1, 0.1, 0.9, 0.1, 0.9, 0.9, 0.1, 0.9};
  v.p_illegible = p_illegible;
  v.p_legible = 1.0 - p_illegible;
  return v;
}

std::vector<Detection> five_digits(double conf = 0.9) {
  std::vector<Detection> d;
  const std::string reading = "04241";
  for (int i = 0; i < 5; ++i) d.push_back(det({20.0 + 70.0 * i, 20, 50, 90}, conf, reading[static_cast<std::size_t>(i)] - '0'));
  return d;
}

}  // namespace

TEST(DecodeGrid, AllZeroLogits) {
  GridTensor g{2, 2, 1 * (5 + 2), std::vector<float>(2 * 2 * 7, 0.0f)};
  const std::vector<Anchor> anchors{{50, 50}};
  const auto dets = decode_grid(g, anchors, cv::Size(100, 100), 2);
  ASSERT_EQ(dets.size(), 4u);
  const std::vector<Point> centres{{25, 25}, {75, 25}, {25, 75}, {75, 75}};
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_NEAR(dets[i].bbox.center().x, centres[i].x, 1e-9);
    EXPECT_NEAR(dets[i].bbox.center().y, centres[i].y, 1e-9);
    EXPECT_NEAR(dets[i].bbox.w, 50.0, 1e-9);
    EXPECT_NEAR(dets[i].bbox.h, 50.0, 1e-9);
    EXPECT_NEAR(dets[i].confidence, 0.25, 1e-9);  // sigmoid(0) * 1/2
  }
}

TEST(DecodeGrid, SaturatedObjectnessGivesClassProbability) {
  GridTensor g{1, 1, 5 + 3, std::vector<float>(8, 0.0f)};
  g.at(0, 0, 4) = 60.0f;
  g.at(0, 0, 6) = std::log(2.0f);
  const std::vector<Anchor> anchors{{10, 10}};
  const auto dets = decode_grid(g, anchors, cv::Size(32, 32), 3);
  EXPECT_EQ(dets[0].class_id, 1);
  EXPECT_NEAR(dets[0].confidence, 0.5, 1e-6);
}

TEST(DecodeGrid, ChannelMismatch) {
  GridTensor g{2, 2, 6, std::vector<float>(24, 0.0f)};
  const std::vector<Anchor> anchors{{10, 10}};
  EXPECT_THROW(decode_grid(g, anchors, cv::Size(32, 32), 2), ShapeError);
}

TEST(DecodeGrid, EncodeInvertsDecodeProperty) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<float> u(-3.0f, 3.0f);
  const int gh = 3, gw = 4, C = 2;
  const std::vector<Anchor> anchors{{12, 9}, {30, 20}};
  GridTensor g{gh, gw, 2 * (5 + C), {}};
  g.data.resize(static_cast<std::size_t>(gh * gw * g.channels));
  for (auto& v : g.data) v = u(rng);
  const cv::Size net(128, 96);
  const auto dets = decode_grid(g, anchors, net, C);
  std::size_t k = 0;
  for (int y = 0; y < gh; ++y) {
    for (int x = 0; x < gw; ++x) {
      for (int a = 0; a < 2; ++a, ++k) {
        const auto t = encode_box(dets[k].bbox, x, y, anchors[static_cast<std::size_t>(a)], gw, gh, net);
        for (int c = 0; c < 4; ++c) EXPECT_NEAR(t[static_cast<std::size_t>(c)], g.at(y, x, a * (5 + C) + c), 1e-5);
      }
    }
  }
}

TEST(Nms, IdenticalAndDisjoint) {
  const auto same = nms({det({0, 0, 10, 10}, 0.8), det({0, 0, 10, 10}, 0.9)}, 0.45);
  ASSERT_EQ(same.size(), 1u);
  EXPECT_DOUBLE_EQ(same[0].confidence, 0.9);
  EXPECT_EQ(nms({det({0, 0, 10, 10}, 0.8), det({20, 20, 10, 10}, 0.9)}, 0.45).size(), 2u);
}

TEST(Nms, ChainKeepsFirstAndThird) {
  // IoU(A,B) = 0.6, IoU(B,C) = 0.6, IoU(A,C) = 0.2.
  const Detection a = det({0, 0, 6, 10}, 0.9), b = det({0, 0, 10, 10}, 0.8), c = det({4, 0, 6, 10}, 0.7);
  ASSERT_NEAR(iou(a.bbox, b.bbox), 0.6, 1e-12);
  ASSERT_NEAR(iou(b.bbox, c.bbox), 0.6, 1e-12);
  ASSERT_NEAR(iou(a.bbox, c.bbox), 0.2, 1e-12);
  const auto kept = nms({c, b, a}, 0.45);
  ASSERT_EQ(kept.size(), 2u);
  EXPECT_EQ(kept[0], a);
  EXPECT_EQ(kept[1], c);
}

TEST(Nms, PerClassUnlessAgnostic) {
  const std::vector<Detection> d{det({0, 0, 10, 10}, 0.9, 1), det({1, 0, 10, 10}, 0.8, 2)};
  EXPECT_EQ(nms(d, 0.45).size(), 2u);
  EXPECT_EQ(nms(d, 0.45, true).size(), 1u);
}

TEST(Nms, SurvivorsSeparatedProperty) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> p(0, 100), s(5, 40), c(0, 1);
  for (int t = 0; t < 200; ++t) {
    std::vector<Detection> d;
    for (int i = 0; i < 30; ++i) d.push_back(det({p(rng), p(rng), s(rng), s(rng)}, c(rng), static_cast<int>(rng() % 3)));
    const auto kept = nms(d, 0.4);
    for (std::size_t i = 0; i < kept.size(); ++i) {
      if (i) {
        ASSERT_GE(kept[i - 1].confidence, kept[i].confidence);
      }
      for (std::size_t j = i + 1; j < kept.size(); ++j) {
        if (kept[i].class_id == kept[j].class_id) {
          ASSERT_LE(iou(kept[i].bbox, kept[j].bbox), 0.4);
        }
      }
    }
  }
}

TEST(SelectCounter, ArgmaxAndTieBreak) {
  EXPECT_FALSE(select_counter({}).has_value());
  const std::vector<Detection> d{det({0, 0, 5, 5}, 0.3), det({1, 1, 5, 5}, 0.9), det({2, 2, 5, 5}, 0.5)};
  EXPECT_DOUBLE_EQ(select_counter(d)->confidence, 0.9);
  const std::vector<Detection> tie{det({3, 7, 5, 5}, 0.7), det({5, 5, 5, 5}, 0.7)};
  EXPECT_EQ(select_counter(tie)->bbox.x, 5.0);
}

TEST(SelectCounter, ScaleInvariantProperty) {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> c(0.01, 0.5), k(0.1, 2.0);
  for (int t = 0; t < 200; ++t) {
    std::vector<Detection> d;
    for (int i = 0; i < 8; ++i) d.push_back(det({static_cast<double>(rng() % 50), static_cast<double>(rng() % 50), 5, 5}, c(rng)));
    const auto before = select_counter(d);
    const double factor = k(rng);
    for (auto& x : d) x.confidence *= factor;
    EXPECT_EQ(select_counter(d)->bbox, before->bbox);
  }
}

TEST(VerdictToQuad, Examples) {
  CounterVerdict v;
  v.corners_norm = {0, 0, 1, 0, 1, 1, 0, 1};
  const Quad q = verdict_to_quad(v, {10, 20}, cv::Size2d(192, 64), {0, 0});
  EXPECT_EQ(q, bbox_to_quad(BBox{10, 20, 192, 64}));
  v.corners_norm.fill(0.5);
  EXPECT_EQ(verdict_to_quad(v, {100, 200}, cv::Size2d(192, 64), {0, 0}).tl(), (Point{196, 232}));
  EXPECT_EQ(verdict_to_quad(v, {100, 200}, cv::Size2d(192, 64), {6, 4}).tl(), (Point{190, 228}));
}

TEST(AssembleReading, OrdersByX) {
  PipelineConfig cfg;
  cfg.expected_digits = std::nullopt;
  const std::vector<Detection> d{det({5, 0, 10, 20}, 0.9, 1), det({45, 0, 10, 20}, 0.9, 3), det({25, 0, 10, 20}, 0.9, 2)};
  const auto r = assemble_reading(d, cfg);
  EXPECT_EQ(r.reading, "123");
  EXPECT_EQ(r.status, ReadingStatus::accepted);
}

TEST(AssembleReading, TopKCutThenResort) {
  PipelineConfig cfg;
  std::vector<Detection> d;
  const std::vector<double> conf{0.9, 0.95, 0.6, 0.8, 0.85, 0.99};
  for (int i = 0; i < 6; ++i) d.push_back(det({20.0 * i, 0, 15, 20}, conf[static_cast<std::size_t>(i)], i));
  const auto r = assemble_reading(d, cfg);
  EXPECT_EQ(r.reading, "01345");
  EXPECT_DOUBLE_EQ(r.reading_confidence, 0.8);
}

TEST(AssembleReading, OverlapSuppressedAcrossClasses) {
  PipelineConfig cfg;
  const Detection a = det({0, 0, 10, 20}, 0.9, 5), b = det({0, 0, 10, 16}, 0.7, 6);
  ASSERT_NEAR(iou(a.bbox, b.bbox), 0.8, 1e-12);
  EXPECT_EQ(assemble_reading(std::vector<Detection>{b, a}, cfg).reading, "5");
}

TEST(AssembleReading, LowConfidenceAndEmpty) {
  PipelineConfig cfg;
  const auto r = assemble_reading(std::vector<Detection>{det({0, 0, 10, 20}, 0.3, 5)}, cfg);
  EXPECT_EQ(r.status, ReadingStatus::rejected_low_confidence);
  EXPECT_TRUE(r.reading.empty());
}

TEST(AssembleReading, InvariantsProperty) {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> x(0, 300), c(0, 1);
  PipelineConfig cfg;
  for (int t = 0; t < 300; ++t) {
    std::vector<Detection> d;
    const int n = static_cast<int>(rng() % 12);
    for (int i = 0; i < n; ++i) d.push_back(det({x(rng), 0, 20, 30}, c(rng), static_cast<int>(rng() % 10)));
    const auto r = assemble_reading(d, cfg);
    ASSERT_EQ(r.reading.size(), r.digit_confidences.size());
    ASSERT_LE(r.reading.size(), 5u);
    if (r.reading.empty()) continue;
    EXPECT_DOUBLE_EQ(r.reading_confidence, *std::min_element(r.digit_confidences.begin(), r.digit_confidences.end()));
    for (double v : r.digit_confidences) EXPECT_GE(v, cfg.digit_conf_threshold);
  }
}

TEST(CounterCrop, PaddedToCounterAspect) {
  cv::Mat img(480, 640, CV_8UC3, cv::Scalar(90, 90, 90));
  const auto crop = make_counter_crop(img, BBox{100, 100, 100, 100}, 0.1);
  ASSERT_TRUE(crop.has_value());
  EXPECT_EQ(crop->crop_box, (BBox{90, 90, 120, 120}));
  EXPECT_EQ(crop->canvas.cols, 360);
  EXPECT_EQ(crop->canvas.rows, 120);
  EXPECT_EQ(crop->padding.offset_x, 120);
  EXPECT_FALSE(make_counter_crop(img, BBox{700, 10, 20, 20}, 0.1).has_value());
}

TEST(PadAndResize, ScalesMapSourceToOutput) {
  cv::Mat img(50, 100, CV_8UC3, cv::Scalar(1, 2, 3));
  const auto p = pad_and_resize(img, 384, 128);
  EXPECT_EQ(p.image.size(), cv::Size(384, 128));
  EXPECT_EQ(p.padding.canvas_w, 150);
  EXPECT_EQ(p.padding.offset_x, 25);
  EXPECT_DOUBLE_EQ(p.scale_x, 384.0 / 150.0);
  EXPECT_DOUBLE_EQ(p.scale_y, 128.0 / 50.0);
}

TEST(Pipeline, NoCounter) {
  FakeDetector d;
  FakeCdcc c;
  FakeOcr o;
  cv::Mat img(480, 640, CV_8UC3, cv::Scalar(0, 0, 0));
  d.out = {det({10, 10, 100, 30}, 0.1)};
  const auto r = run_pipeline(img, {&d, &c, &o}, PipelineConfig{});
  EXPECT_EQ(r.status, ReadingStatus::rejected_no_counter);
  EXPECT_EQ(c.calls, 0);
  EXPECT_EQ(o.calls, 0);
}

TEST(Pipeline, IllegibleSkipsRecognition) {
  FakeDetector d;
  FakeCdcc c;
  FakeOcr o;
  cv::Mat img(480, 640, CV_8UC3, cv::Scalar(128, 128, 128));
  d.out = {det({200, 200, 150, 50}, 0.9)};
  c.verdict = full_canvas_verdict(0.8);
  o.out = five_digits();
  const auto r = run_pipeline(img, {&d, &c, &o}, PipelineConfig{});
  EXPECT_EQ(r.status, ReadingStatus::rejected_illegible);
  EXPECT_EQ(c.calls, 1);
  EXPECT_EQ(c.seen, cv::Size(192, 64));
  EXPECT_EQ(o.calls, 0);
  ASSERT_TRUE(r.counter_bbox.has_value());
}

TEST(Pipeline, LegibleReadsAndRejectsBelowThreshold) {
  FakeDetector d;
  FakeCdcc c;
  FakeOcr o;
  cv::Mat img(480, 640, CV_8UC3, cv::Scalar(128, 128, 128));
  d.out = {det({200, 200, 150, 50}, 0.9), det({10, 10, 50, 20}, 0.5)};
  c.verdict = full_canvas_verdict(0.1);
  o.out = five_digits(0.7);
  PipelineConfig cfg;
  const auto r = run_pipeline(img, {&d, &c, &o}, cfg);
  EXPECT_EQ(r.status, ReadingStatus::accepted);
  EXPECT_EQ(r.reading, "04241");
  EXPECT_EQ(o.seen, cv::Size(384, 128));
  EXPECT_FALSE(r.rectification_fallback);
  EXPECT_EQ(r.counter_bbox->x, 200.0);

  cfg.rejection_threshold = 0.75;
  EXPECT_EQ(run_pipeline(img, {&d, &c, &o}, cfg).status, ReadingStatus::rejected_low_confidence);
  cfg.rejection_threshold = 0.6;
  EXPECT_EQ(run_pipeline(img, {&d, &c, &o}, cfg).status, ReadingStatus::accepted);
}

TEST(Pipeline, RaisingRejectionThresholdNeverAcceptsProperty) {
  FakeDetector d;
  FakeCdcc c;
  FakeOcr o;
  cv::Mat img(240, 320, CV_8UC3, cv::Scalar(128, 128, 128));
  d.out = {det({100, 100, 120, 40}, 0.9)};
  c.verdict = full_canvas_verdict(0.0);
  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> u(0.5, 1.0);
  for (int t = 0; t < 30; ++t) {
    o.out = five_digits(u(rng));
    bool rejected = false;
    for (double th = 0.0; th <= 1.0; th += 0.05) {
      PipelineConfig cfg;
      cfg.rejection_threshold = th;
      const auto r = run_pipeline(img, {&d, &c, &o}, cfg);
      if (rejected) {
        EXPECT_NE(r.status, ReadingStatus::accepted);
      }
      rejected = r.status == ReadingStatus::rejected_low_confidence;
    }
  }
}

TEST(Pipeline, DegenerateQuadFallsBack) {
  FakeDetector d;
  FakeCdcc c;
  FakeOcr o;
  cv::Mat img(480, 640, CV_8UC3, cv::Scalar(128, 128, 128));
  d.out = {det({200, 200, 150, 50}, 0.9)};
  c.verdict = full_canvas_verdict(0.0);
  c.verdict.corners_norm = {0.1, 0.1, 0.9, 0.9, 0.9, 0.1, 0.1, 0.9};  // self-intersecting
  o.out = five_digits();
  const auto r = run_pipeline(img, {&d, &c, &o}, PipelineConfig{});
  EXPECT_TRUE(r.rectification_fallback);
  EXPECT_EQ(o.calls, 1);
  EXPECT_EQ(r.reading, "04241");
}

TEST(Pipeline, RejectsEmptyImageAndMissingModels) {
  FakeDetector d;
  FakeCdcc c;
  FakeOcr o;
  EXPECT_THROW(run_pipeline(cv::Mat(), {&d, &c, &o}, PipelineConfig{}), InferenceError);
  EXPECT_THROW(run_pipeline(cv::Mat(10, 10, CV_8UC3), {&d, nullptr, &o}, PipelineConfig{}), InferenceError);
}

TEST(PipelineConfig, ValidationAndJson) {
  PipelineConfig cfg;
  cfg.digit_conf_threshold = 1.5;
  EXPECT_THROW(cfg.validate(), ParameterError);
  PipelineConfig base;
  base.rejection_threshold = 0.3;
  base.expected_digits = std::nullopt;
  base.rectify = false;
  base.quad_margin = 0.1;
  const auto back = pipeline_config_from_json(to_json(base));
  EXPECT_EQ(back.rejection_threshold, base.rejection_threshold);
  EXPECT_EQ(back.expected_digits, base.expected_digits);
  EXPECT_FALSE(back.rectify);
  EXPECT_EQ(back.quad_margin, 0.1);
  EXPECT_THROW(pipeline_config_from_json({{"nms_iou_threshold", -0.1}}), ParameterError);
  EXPECT_THROW(pipeline_config_from_json({{"quad_margin", -0.5}}), ParameterError);
}

TEST(ResultJson, RoundTrip) {
  ReadingResult r;
  r.status = ReadingStatus::accepted;
  r.reading = "01234";
  r.reading_confidence = 0.625;
  r.counter_bbox = BBox{1, 2, 3, 4};
  r.corners = bbox_to_quad(BBox{1, 2, 3, 4});
  r.ms = 3.5;
  std::string name;
  const auto back = result_from_json(result_to_json("x.png", r), &name);
  EXPECT_EQ(name, "x.png");
  EXPECT_EQ(back.status, r.status);
  EXPECT_EQ(back.reading, r.reading);
  EXPECT_EQ(back.reading_confidence, r.reading_confidence);
  EXPECT_EQ(back.counter_bbox, r.counter_bbox);
  EXPECT_EQ(back.corners, r.corners);
  const auto j = result_to_json("y.png", ReadingResult{});
  EXPECT_TRUE(j.at("counter_bbox").is_null());
  EXPECT_EQ(j.at("status"), "rejected_no_counter");
}
