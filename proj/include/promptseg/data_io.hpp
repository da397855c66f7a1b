#pragma once

#include "promptseg/image.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace promptseg {

// ---------------------------------------------------------------------------
// Captioned image corpora
// ---------------------------------------------------------------------------

struct CaptionedRecord {
    std::string image_path;
    std::string caption;

    friend bool operator==(const CaptionedRecord&, const CaptionedRecord&) = default;
};

enum class Split { Train, Val, Test };

std::string_view to_string(Split split);

struct CaptionedImageSet {
    std::vector<CaptionedRecord> records;
    Split split = Split::Train;
};

struct CaptionCleaning {
    // Characters kept besides ASCII letters and digits.
    std::string allowed_punctuation = " .,-%()";
    std::size_t min_length = 20;
};

struct CleanResult {
    CaptionedImageSet set;
    std::size_t dropped = 0;
};

// Removes characters outside the allowed set, trims surrounding whitespace and
// drops captions shorter than cfg.min_length.
CleanResult clean_captions(const std::vector<CaptionedRecord>& raw,
                           const CaptionCleaning& cfg = {});
std::string clean_caption(std::string_view caption, const CaptionCleaning& cfg = {});

enum class SplitRounding {
    LargestRemainder, // floor every share, hand leftovers to the largest fractional parts
    RoundHalfUp,      // round every share except the last, which takes the rest
};

// Shuffles `count` indices with `seed` and partitions them by `fractions`.
// Throws BadFractions unless the fractions are non-negative and sum to 1 +- 1e-9.
std::vector<std::vector<std::size_t>> split_indices(std::size_t count,
                                                    const std::vector<double>& fractions,
                                                    std::uint64_t seed,
                                                    SplitRounding rounding =
                                                        SplitRounding::LargestRemainder);

template <class T>
std::vector<std::vector<T>> split_dataset(const std::vector<T>& items,
                                          const std::vector<double>& fractions,
                                          std::uint64_t seed,
                                          SplitRounding rounding = SplitRounding::LargestRemainder) {
    std::vector<std::vector<T>> out;
    for (const auto& part : split_indices(items.size(), fractions, seed, rounding)) {
        auto& dst = out.emplace_back();
        dst.reserve(part.size());
        for (std::size_t idx : part) dst.push_back(items[idx]);
    }
    return out;
}

// captions.csv: header "image,caption", RFC 4180 quoting.
std::vector<CaptionedRecord> read_captions_csv(const std::filesystem::path& path);
void write_captions_csv(const std::filesystem::path& path,
                        const std::vector<CaptionedRecord>& records);

// ---------------------------------------------------------------------------
// Images and masks
// ---------------------------------------------------------------------------

// Decodes to RGB in [0,1] (grayscale replicated) and resizes to `target` when
// it is non-empty. Throws DecodeError on unreadable data.
Image load_image(const std::filesystem::path& path, ImageSize target = {});
Image decode_image(const std::vector<std::uint8_t>& bytes, ImageSize target = {});

// Bilinear resize of every channel.
Image resize_image(const Image& image, ImageSize target);

// Lossless 8-bit encodings.
std::vector<std::uint8_t> encode_png(const Image& image);
std::vector<std::uint8_t> encode_mask_png(const Mask& mask); // foreground = 255
void save_image(const std::filesystem::path& path, const Image& image);
void save_mask(const std::filesystem::path& path, const Mask& mask);

// Single-channel masks. 8-bit masks whose maximum is above 1 are thresholded
// at > 127, 0/1-encoded masks at > 0. 16-bit masks use half their range.
Mask load_mask(const std::filesystem::path& path);
Mask decode_mask(const std::vector<std::uint8_t>& bytes);

// Grayscale probability/score map. 8-bit values are scaled by 1/255.
Map load_score_map(const std::filesystem::path& path);

// Saliency serialization: little-endian float32 .npy of shape (H, W), and an
// 8-bit JET-colored heatmap.
void save_npy(const std::filesystem::path& path, const Map& map);
std::vector<std::uint8_t> encode_npy(const Map& map);
Map load_npy(const std::filesystem::path& path);
Map decode_npy(const std::vector<std::uint8_t>& bytes, const std::string& name = "npy payload");
std::vector<std::uint8_t> encode_heatmap_png(const Map& map);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);
void write_text(const std::filesystem::path& path, std::string_view text);

// ---------------------------------------------------------------------------
// Segmentation datasets
// ---------------------------------------------------------------------------

struct SegmentationRecord {
    std::string id; // file stem
    std::filesystem::path image_path;
    std::filesystem::path mask_path; // empty when no mask exists
};

struct SegmentationSet {
    std::vector<SegmentationRecord> records;
};

// Layout: root/{images/, masks/, captions.csv, splits.json}. Masks share stems
// with images. An empty split name returns every image.
SegmentationSet load_segmentation_set(const std::filesystem::path& root,
                                      const std::string& split = {});

// Replaces every record's mask with the file of the same stem under `mask_dir`.
SegmentationSet with_masks_from(SegmentationSet set, const std::filesystem::path& mask_dir);

std::map<std::string, std::vector<std::string>> read_splits_json(const std::filesystem::path& path);

// Files in `dir` with image extensions, sorted by name.
std::vector<std::filesystem::path> list_images(const std::filesystem::path& dir);

} // namespace promptseg
