#include "promptseg/data_io.hpp"
#include "promptseg/error.hpp"

#include <doctest.h>
#include <opencv2/imgcodecs.hpp>

#include <filesystem>
#include <fstream>
#include <set>

using namespace promptseg;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
    fs::path dir = fs::temp_directory_path() / ("promptseg_test_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

} // namespace

TEST_CASE("clean_captions examples") {
    const auto result = clean_captions({
        {"a.png", "  chest x-ray showing pneumonia  "},
        {"b.png", "nineteen characters"}, // 19 characters
        {"c.png", "CT: liver lesion #3 <arterial> phase!"},
        {"d.png", "@@@@ short ####################"},
    });
    REQUIRE(result.set.records.size() == 2);
    CHECK(result.dropped == 2);
    CHECK(result.set.records[0].caption == "chest x-ray showing pneumonia");
    CHECK(result.set.records[1].caption == "CT liver lesion 3 arterial phase");
    CHECK(std::string("nineteen characters").size() == 19);
}

TEST_CASE("clean_captions is idempotent and leaves no special characters") {
    const std::vector<CaptionedRecord> raw = {
        {"x", "\t MRI (T1) of brain, 45% enhancement... \n"},
        {"y", "Ultrasound: \"hypoechoic\" mass; BI-RADS 4"},
        {"z", "   "},
    };
    const auto once = clean_captions(raw);
    const auto twice = clean_captions(once.set.records);
    CHECK(once.set.records == twice.set.records);
    CHECK(twice.dropped == 0);
    for (const auto& rec : once.set.records) {
        CHECK(rec.caption.size() >= 20);
        CHECK(rec.caption.front() != ' ');
        CHECK(rec.caption.back() != ' ');
        for (char ch : rec.caption)
            CHECK((std::isalnum(static_cast<unsigned char>(ch)) ||
                   std::string(" .,-%()").find(ch) != std::string::npos));
    }
}

TEST_CASE("split sizes") {
    auto sizes = [](std::size_t n, std::vector<double> f, SplitRounding r) {
        std::vector<std::size_t> s;
        for (const auto& part : split_indices(n, f, 42, r)) s.push_back(part.size());
        return s;
    };
    CHECK(sizes(23807, {0.85, 0.15}, SplitRounding::LargestRemainder) ==
          std::vector<std::size_t>{20236, 3571});
    CHECK(sizes(4, {0.5, 0.5}, SplitRounding::LargestRemainder) == std::vector<std::size_t>{2, 2});
    CHECK(sizes(23807, {0.85, 0.15}, SplitRounding::RoundHalfUp) ==
          std::vector<std::size_t>{20236, 3571});
    CHECK_THROWS_AS(split_indices(10, {0.9, 0.2}, 1), Error);
    CHECK_THROWS_AS(split_indices(10, {1.2, -0.2}, 1), Error);
}

TEST_CASE("splits partition the input and are seed-deterministic") {
    for (std::size_t n : {0u, 1u, 7u, 100u, 1001u})
        for (const auto& fractions : std::vector<std::vector<double>>{
                 {0.85, 0.15}, {0.7, 0.2, 0.1}, {1.0}, {0.33, 0.33, 0.34}}) {
            const auto parts = split_indices(n, fractions, 99);
            CHECK(parts == split_indices(n, fractions, 99));
            std::set<std::size_t> seen;
            std::size_t total = 0;
            for (std::size_t p = 0; p < parts.size(); ++p) {
                total += parts[p].size();
                seen.insert(parts[p].begin(), parts[p].end());
                CHECK(std::abs(static_cast<double>(parts[p].size()) - fractions[p] * n) <= 1.0);
            }
            CHECK(total == n);
            CHECK(seen.size() == n);
        }
    const std::vector<int> items = {1, 2, 3, 4, 5, 6, 7, 8};
    const auto parts = split_dataset(items, {0.5, 0.5}, 3);
    CHECK(parts[0].size() == 4);
    CHECK(parts[1].size() == 4);
}

TEST_CASE("captions.csv round trip with quoting") {
    const auto dir = scratch_dir("csv");
    const std::vector<CaptionedRecord> records = {
        {"img1.png", "plain caption text here"},
        {"img,2.png", "caption with \"quotes\", commas\nand a newline"},
    };
    write_captions_csv(dir / "captions.csv", records);
    CHECK(read_captions_csv(dir / "captions.csv") == records);
}

TEST_CASE("load_image resizes and replicates grayscale") {
    const auto dir = scratch_dir("images");
    cv::Mat gray(512, 512, CV_8UC1);
    for (int y = 0; y < 512; ++y)
        for (int x = 0; x < 512; ++x) gray.at<std::uint8_t>(y, x) = static_cast<std::uint8_t>(x / 2);
    cv::imwrite((dir / "xray.png").string(), gray);
    const Image img = load_image(dir / "xray.png", {224, 224});
    CHECK(img.height() == 224);
    CHECK(img.width() == 224);
    CHECK(img.channels() == 3);
    for (int c = 1; c < 3; ++c) CHECK(img.at(100, 100, c) == img.at(100, 100, 0));
    for (double v : img.data()) CHECK((v >= 0.0 && v <= 1.0));

    Image rgb(224, 224, 3);
    for (std::size_t i = 0; i < rgb.data().size(); ++i) rgb.data()[i] = (i % 256) / 255.0;
    save_image(dir / "rgb.png", rgb);
    const Image back = load_image(dir / "rgb.png", {224, 224});
    for (std::size_t i = 0; i < rgb.data().size(); ++i)
        CHECK(std::abs(back.data()[i] - rgb.data()[i]) < 1e-12);
}

TEST_CASE("load_image rejects truncated and missing files") {
    const auto dir = scratch_dir("truncated");
    Image img(64, 64, 3, 0.5);
    auto bytes = encode_png(img);
    bytes.resize(bytes.size() / 3);
    write_file(dir / "bad.png", bytes);
    try {
        load_image(dir / "bad.png", {224, 224});
        FAIL("expected DecodeError");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::DecodeError);
    }
    CHECK_THROWS_AS(load_image(dir / "missing.png"), Error);
    CHECK_THROWS_AS(decode_image({1, 2, 3}), Error);
}

TEST_CASE("mask encodings binarize") {
    const auto dir = scratch_dir("masks");
    cv::Mat m255(4, 4, CV_8UC1, cv::Scalar(0)), m01(4, 4, CV_8UC1, cv::Scalar(0));
    m255.at<std::uint8_t>(1, 1) = 255;
    m255.at<std::uint8_t>(2, 2) = 100; // below threshold
    m01.at<std::uint8_t>(3, 3) = 1;
    cv::imwrite((dir / "a.png").string(), m255);
    cv::imwrite((dir / "b.png").string(), m01);
    const Mask a = load_mask(dir / "a.png");
    const Mask b = load_mask(dir / "b.png");
    CHECK(count_foreground(a) == 1);
    CHECK(a(1, 1) == 1);
    CHECK(count_foreground(b) == 1);
    CHECK(b(3, 3) == 1);
    CHECK(decode_mask(encode_mask_png(a)) == a);
}

TEST_CASE("npy round trip") {
    const auto dir = scratch_dir("npy");
    Map map(3, 5);
    for (std::size_t i = 0; i < map.count(); ++i) map.data()[i] = 0.125 * i;
    save_npy(dir / "s.npy", map);
    CHECK(load_npy(dir / "s.npy") == map);
    const auto bytes = encode_npy(map);
    CHECK((bytes.size() - 3 * 5 * 4) % 64 == 0);
}

TEST_CASE("segmentation dataset layout") {
    const auto root = scratch_dir("dataset");
    fs::create_directories(root / "images");
    fs::create_directories(root / "masks");
    for (const char* stem : {"case1", "case2", "case3"}) {
        save_image(root / "images" / (std::string(stem) + ".png"), Image(8, 8, 3, 0.2));
        if (std::string(stem) != "case3")
            save_mask(root / "masks" / (std::string(stem) + ".png"), Mask(8, 8, 1));
    }
    write_text(root / "splits.json", R"({"train": ["case1", "case3"], "test": ["case2"]})");
    const auto all = load_segmentation_set(root);
    REQUIRE(all.records.size() == 3);
    CHECK(all.records[2].mask_path.empty());
    const auto train = load_segmentation_set(root, "train");
    REQUIRE(train.records.size() == 2);
    CHECK(train.records[0].id == "case1");
    CHECK(train.records[1].id == "case3");
    CHECK_THROWS_AS(load_segmentation_set(root, "val"), Error);
    CHECK_THROWS_AS(with_masks_from(train, root / "masks"), Error);
}
