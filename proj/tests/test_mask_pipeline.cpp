#include "promptseg/mask_pipeline.hpp"
#include "promptseg/synthetic_encoder.hpp"
#include "test_support.hpp"

#include <doctest.h>

#include <random>

using namespace promptseg;
using namespace testing_support;

namespace {

Map fill_map(const Mask& m, double inside, double outside) {
    Map out(m.rows(), m.cols());
    for (std::size_t i = 0; i < m.count(); ++i) out.data()[i] = m.data()[i] ? inside : outside;
    return out;
}

// Independent tight-box check: every side touches its component.
bool tight(const Mask& comp, const BoxPrompt& b) {
    bool top = false, bottom = false, left = false, right = false;
    for (int y = 0; y < comp.rows(); ++y)
        for (int x = 0; x < comp.cols(); ++x) {
            if (!comp(y, x)) continue;
            if (x < b.xmin || x > b.xmax || y < b.ymin || y > b.ymax) return false;
            top |= y == b.ymin;
            bottom |= y == b.ymax;
            left |= x == b.xmin;
            right |= x == b.xmax;
        }
    return top && bottom && left && right;
}

} // namespace

TEST_CASE("crf degenerate settings equal unary thresholding") {
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Image img(20, 24, 3);
    for (double& v : img.data()) v = u(rng);
    Map sal(20, 24);
    for (double& v : sal.data()) v = u(rng);

    CrfParams p;
    p.normalize_saliency = false;
    Mask expected(20, 24);
    for (std::size_t i = 0; i < sal.count(); ++i)
        expected.data()[i] = std::clamp(sal.data()[i], p.epsilon, 1 - p.epsilon) > 0.5;

    SUBCASE("zero pairwise weights") {
        p.gaussian_weight = 0;
        p.bilateral_weight = 0;
        CHECK(crf_refine(img, sal, p) == expected);
    }
    SUBCASE("zero iterations") {
        p.iterations = 0;
        CHECK(crf_refine(img, sal, p) == expected);
    }
    SUBCASE("region at 0.7") {
        p.iterations = 0;
        p.normalize_saliency = true;
        const Mask region = rect_mask({20, 24}, 5, 5, 12, 15);
        CHECK(crf_refine(img, fill_map(region, 0.7, 0.0), p) == region);
    }
}

TEST_CASE("crf keeps a confident square on a uniform image") {
    const Image img(32, 32, 3, 0.4);
    const Mask square = rect_mask({32, 32}, 8, 10, 23, 25);
    CHECK(crf_refine(img, fill_map(square, 0.99, 0.01)) == square);

    SUBCASE("block-approximated messages on a larger image") {
        const Image big(96, 96, 3, 0.4);
        const Mask sq = rect_mask({96, 96}, 24, 30, 69, 75);
        CHECK(crf_refine(big, fill_map(sq, 0.99, 0.01)) == sq);
    }
}

TEST_CASE("crf removes an isolated pixel") {
    const Image img(24, 24, 3, 0.3);
    Map sal(24, 24, 0.1);
    sal(12, 12) = 0.6;
    CrfParams p;
    p.iterations = 0;
    CHECK(count_foreground(crf_refine(img, sal, p)) == 1);
    CHECK(count_foreground(crf_refine(img, sal)) == 0);
}

TEST_CASE("crf errors") {
    CHECK(error_code_of([] { crf_refine(Image(4, 4, 3), Map(4, 5)); }) == ErrorCode::SizeMismatch);
    CrfParams p;
    p.epsilon = 0.5;
    CHECK(error_code_of([&] { crf_refine(Image(4, 4, 3), Map(4, 4), p); }) == ErrorCode::InvalidConfig);
    p = {};
    p.iterations = -1;
    CHECK(error_code_of([&] { crf_refine(Image(4, 4, 3), Map(4, 4), p); }) == ErrorCode::InvalidConfig);
}

TEST_CASE("extract_boxes") {
    SUBCASE("tight box") {
        Mask m(10, 10);
        for (int y = 2; y <= 5; ++y)
            for (int x = 3; x <= 7; ++x) m(y, x) = 1;
        CHECK(extract_boxes(m) == std::vector<BoxPrompt>{{3, 2, 7, 5}});
    }
    SUBCASE("empty mask") {
        CHECK(error_code_of([] { extract_boxes(Mask(8, 8)); }) == ErrorCode::NoForeground);
    }
    SUBCASE("two components, larger first") {
        Mask m(100, 100);
        for (int y = 60; y < 65; ++y)
            for (int x = 10; x < 20; ++x) m(y, x) = 1; // 50 px
        for (int y = 10; y < 20; ++y)
            for (int x = 40; x < 60; ++x) m(y, x) = 1; // 200 px
        CHECK(extract_boxes(m, {0.01, true}) == std::vector<BoxPrompt>{{40, 10, 59, 19}});
        const auto boxes = extract_boxes(m, {0.005, true});
        REQUIRE(boxes.size() == 2);
        CHECK(boxes[0] == BoxPrompt{40, 10, 59, 19});
        CHECK(boxes[1] == BoxPrompt{10, 60, 19, 64});
        CHECK(extract_boxes(m, {0.005, false}).size() == 1);
        CHECK(error_code_of([&] { extract_boxes(m, {0.03, true}); }) == ErrorCode::NoForeground);
    }
    SUBCASE("diagonal pixels are one component") {
        Mask m(5, 5);
        m(1, 1) = m(2, 2) = m(3, 3) = 1;
        CHECK(extract_boxes(m, {0.0, true}) == std::vector<BoxPrompt>{{1, 1, 3, 3}});
    }
    SUBCASE("random masks give tight boxes") {
        std::mt19937_64 rng(7);
        std::uniform_int_distribution<int> pos(0, 39), len(1, 15);
        for (int t = 0; t < 1000; ++t) {
            const int y0 = pos(rng), x0 = pos(rng);
            Mask m = disk_mask({40, 40}, y0, x0, len(rng) / 2.0);
            m(y0, x0) = 1;
            const auto boxes = extract_boxes(m, {0.0, true});
            REQUIRE(boxes.size() == 1);
            CHECK(tight(m, boxes[0]));
        }
    }
}

TEST_CASE("threshold segmenter with boxes") {
    SyntheticDualEncoder enc;
    const Mask a = disk_mask({64, 64}, 20, 20, 8);
    const Mask b = rect_mask({64, 64}, 40, 40, 55, 58);
    const Image img = enc.render({{0, a}, {1, b}});
    const auto seg = make_segmenter({});
    CHECK(seg->name() == "threshold_box");

    CHECK(segment_with_boxes(*seg, img, extract_boxes(a)) == a);
    Mask both = a;
    for (std::size_t i = 0; i < both.count(); ++i) both.data()[i] |= b.data()[i];
    CHECK(segment_with_boxes(*seg, img, extract_boxes(both)) == both);

    std::vector<std::string> warnings;
    const Mask none = segment_with_boxes(*seg, img, {{0, 50, 10, 60}}, &warnings);
    CHECK(count_foreground(none) == 0);
    CHECK(warnings.size() == 1);

    CHECK(error_code_of([] { make_segmenter({"sam", 0.5}); }) == ErrorCode::BackendUnavailable);
    CHECK(error_code_of([&] { segment_with_boxes(*seg, img, {{0, 0, 64, 10}}); }) ==
          ErrorCode::InvalidConfig);
}

TEST_CASE("zero-shot segmentation end to end") {
    SyntheticDualEncoder enc;
    ThresholdBoxSegmenter seg;
    const Mask region = disk_mask({64, 64}, 34, 28, 12);
    const Mask other = rect_mask({64, 64}, 3, 45, 16, 60);
    const Image img = enc.render({{enc.concept_index("tumor"), region}, {enc.concept_index("lung"), other}});

    const PseudoMask pm = zero_shot_segment(enc, seg, img, "tumor");
    CHECK(mask_iou(pm.mask, region) >= 0.7);
    CHECK(pm.provenance["cam_method"] == "gscorecam");
    CHECK(pm.provenance["segmenter"] == "threshold_box");
    CHECK(pm.boxes.size() == 1);

    SUBCASE("replay is bit exact") {
        const PseudoMask again = zero_shot_segment(enc, seg, img, "tumor");
        CHECK(again.mask == pm.mask);
        CHECK(again.saliency.values == pm.saliency.values);
        CHECK(again.provenance == pm.provenance);
    }
    SUBCASE("gradcam ablation") {
        ZeroShotOptions opt;
        opt.cam.method = CamMethod::GradCam;
        const PseudoMask g = zero_shot_segment(enc, seg, img, "tumor", opt);
        CHECK(g.provenance["cam_method"] == "gradcam");
        CHECK(mask_iou(g.mask, region) >= 0.7);
    }
    SUBCASE("absent concept") {
        try {
            zero_shot_segment(enc, seg, img, "vessel");
            FAIL("expected EmptySegmentation");
        } catch (const EmptySegmentationError& e) {
            CHECK(e.code() == ErrorCode::EmptySegmentation);
            CHECK(e.saliency().values.size() == img.size());
        }
    }
}
