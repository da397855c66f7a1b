#include "promptseg/data_io.hpp"

#include "promptseg/error.hpp"

#include <json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

namespace fs = std::filesystem;

namespace promptseg {

std::string_view to_string(Split split) {
    switch (split) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
    }
    return "unknown";
}

// ---------------------------------------------------------------------------
// Captions
// ---------------------------------------------------------------------------

std::string clean_caption(std::string_view caption, const CaptionCleaning& cfg) {
    std::string kept;
    kept.reserve(caption.size());
    for (char ch : caption) {
        const auto u = static_cast<unsigned char>(ch);
        if (u < 128 && (std::isalnum(u) || cfg.allowed_punctuation.find(ch) != std::string::npos))
            kept.push_back(ch);
    }
    const auto first = kept.find_first_not_of(" \t\r\n");
    if (first == std::string::npos) return {};
    const auto last = kept.find_last_not_of(" \t\r\n");
    return kept.substr(first, last - first + 1);
}

CleanResult clean_captions(const std::vector<CaptionedRecord>& raw, const CaptionCleaning& cfg) {
    CleanResult result;
    for (const auto& rec : raw) {
        std::string cleaned = clean_caption(rec.caption, cfg);
        if (cleaned.size() < cfg.min_length) {
            ++result.dropped;
            continue;
        }
        result.set.records.push_back({rec.image_path, std::move(cleaned)});
    }
    return result;
}

std::vector<std::vector<std::size_t>> split_indices(std::size_t count,
                                                    const std::vector<double>& fractions,
                                                    std::uint64_t seed, SplitRounding rounding) {
    if (fractions.empty())
        throw Error(ErrorCode::BadFractions, "at least one split fraction is required");
    double total = 0.0;
    for (double f : fractions) {
        if (!(f >= 0.0)) throw Error(ErrorCode::BadFractions, "split fractions must be >= 0");
        total += f;
    }
    if (std::abs(total - 1.0) > 1e-9)
        throw Error(ErrorCode::BadFractions, "split fractions must sum to 1");

    const std::size_t parts = fractions.size();
    std::vector<std::size_t> sizes(parts, 0);
    if (rounding == SplitRounding::LargestRemainder) {
        std::vector<double> remainder(parts);
        std::size_t assigned = 0;
        for (std::size_t p = 0; p < parts; ++p) {
            const double exact = fractions[p] * static_cast<double>(count);
            sizes[p] = static_cast<std::size_t>(std::floor(exact));
            remainder[p] = exact - std::floor(exact);
            assigned += sizes[p];
        }
        std::vector<std::size_t> order(parts);
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return remainder[a] > remainder[b]; });
        for (std::size_t k = 0; assigned < count; ++k, ++assigned) ++sizes[order[k % parts]];
    } else {
        std::size_t assigned = 0;
        for (std::size_t p = 0; p + 1 < parts; ++p) {
            sizes[p] = std::min(count - assigned, static_cast<std::size_t>(
                                                      std::floor(fractions[p] * count + 0.5)));
            assigned += sizes[p];
        }
        sizes.back() = count - assigned;
    }

    std::vector<std::size_t> order(count);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);

    std::vector<std::vector<std::size_t>> out(parts);
    std::size_t offset = 0;
    for (std::size_t p = 0; p < parts; ++p) {
        out[p].assign(order.begin() + offset, order.begin() + offset + sizes[p]);
        offset += sizes[p];
    }
    return out;
}

namespace {

std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
    std::vector<std::vector<std::string>> rows;
    std::vector<std::string> row;
    std::string field;
    bool quoted = false;
    bool any = false;
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char ch = text[i];
        if (quoted) {
            if (ch == '"') {
                if (i + 1 < text.size() && text[i + 1] == '"') {
                    field.push_back('"');
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                field.push_back(ch);
            }
            continue;
        }
        switch (ch) {
        case '"': quoted = true; any = true; break;
        case ',':
            row.push_back(std::move(field));
            field.clear();
            any = true;
            break;
        case '\r': break;
        case '\n':
            if (any || !field.empty()) {
                row.push_back(std::move(field));
                rows.push_back(std::move(row));
            }
            row.clear();
            field.clear();
            any = false;
            break;
        default: field.push_back(ch); any = true;
        }
    }
    if (any || !field.empty()) {
        row.push_back(std::move(field));
        rows.push_back(std::move(row));
    }
    return rows;
}

std::string csv_quote(const std::string& s) {
    std::string out = "\"";
    for (char ch : s) {
        if (ch == '"') out.push_back('"');
        out.push_back(ch);
    }
    out.push_back('"');
    return out;
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

} // namespace

std::vector<CaptionedRecord> read_captions_csv(const fs::path& path) {
    const auto rows = parse_csv(read_text(path));
    if (rows.empty()) return {};
    const auto& header = rows.front();
    auto column = [&](std::string_view name) -> std::size_t {
        for (std::size_t i = 0; i < header.size(); ++i)
            if (header[i] == name) return i;
        throw Error(ErrorCode::DecodeError,
                    path.string() + " lacks column '" + std::string(name) + "'");
    };
    const std::size_t image_col = column("image");
    const std::size_t caption_col = column("caption");
    std::vector<CaptionedRecord> out;
    for (std::size_t r = 1; r < rows.size(); ++r) {
        const auto& row = rows[r];
        if (row.size() <= std::max(image_col, caption_col))
            throw Error(ErrorCode::DecodeError,
                        path.string() + ": row " + std::to_string(r) + " is short");
        out.push_back({row[image_col], row[caption_col]});
    }
    return out;
}

void write_captions_csv(const fs::path& path, const std::vector<CaptionedRecord>& records) {
    std::string text = "image,caption\n";
    for (const auto& r : records) text += csv_quote(r.image_path) + "," + csv_quote(r.caption) + "\n";
    write_text(path, text);
}

// ---------------------------------------------------------------------------
// Images
// ---------------------------------------------------------------------------

namespace {

Image mat_to_image(const cv::Mat& decoded, const std::string& what) {
    if (decoded.empty()) throw Error(ErrorCode::DecodeError, "cannot decode " + what);
    cv::Mat rgb;
    switch (decoded.channels()) {
    case 1: cv::cvtColor(decoded, rgb, cv::COLOR_GRAY2RGB); break;
    case 3: cv::cvtColor(decoded, rgb, cv::COLOR_BGR2RGB); break;
    case 4: cv::cvtColor(decoded, rgb, cv::COLOR_BGRA2RGB); break;
    default: throw Error(ErrorCode::DecodeError, what + " has unsupported channel count");
    }
    double scale = 1.0 / 255.0;
    if (rgb.depth() == CV_16U) scale = 1.0 / 65535.0;
    else if (rgb.depth() != CV_8U)
        throw Error(ErrorCode::DecodeError, what + " has unsupported bit depth");
    cv::Mat as_double;
    rgb.convertTo(as_double, CV_64FC3, scale);

    Image image(as_double.rows, as_double.cols, 3);
    for (int y = 0; y < as_double.rows; ++y)
        std::memcpy(&image.at(y, 0, 0), as_double.ptr<double>(y),
                    sizeof(double) * 3 * as_double.cols);
    return image;
}

cv::Mat image_to_mat(const Image& image) {
    cv::Mat m(image.height(), image.width(), CV_64FC(image.channels()));
    for (int y = 0; y < image.height(); ++y)
        std::memcpy(m.ptr<double>(y), &image.data()[static_cast<std::size_t>(y) * image.width() *
                                                    image.channels()],
                    sizeof(double) * image.channels() * image.width());
    return m;
}

cv::Mat image_to_bgr8(const Image& image) {
    cv::Mat m = image_to_mat(image);
    cv::Mat u8;
    m.convertTo(u8, CV_8UC(image.channels()), 255.0);
    if (image.channels() == 3) cv::cvtColor(u8, u8, cv::COLOR_RGB2BGR);
    return u8;
}

std::vector<std::uint8_t> encode(const cv::Mat& m, const std::string& ext) {
    std::vector<std::uint8_t> out;
    if (!cv::imencode(ext, m, out)) throw Error(ErrorCode::IoError, "cannot encode " + ext);
    return out;
}

cv::Mat decode_single_channel(const cv::Mat& decoded, const std::string& what) {
    if (decoded.empty()) throw Error(ErrorCode::DecodeError, "cannot decode " + what);
    cv::Mat gray;
    if (decoded.channels() == 1) gray = decoded;
    else if (decoded.channels() == 3) cv::cvtColor(decoded, gray, cv::COLOR_BGR2GRAY);
    else if (decoded.channels() == 4) cv::cvtColor(decoded, gray, cv::COLOR_BGRA2GRAY);
    else throw Error(ErrorCode::DecodeError, what + " has unsupported channel count");
    return gray;
}

Mask mat_to_mask(const cv::Mat& gray) {
    double lo = 0, hi = 0;
    cv::minMaxLoc(gray, &lo, &hi);
    double threshold = 127.0;
    if (gray.depth() == CV_16U) threshold = 32767.0;
    if (hi <= 1.0) threshold = 0.0;
    Mask mask(gray.rows, gray.cols);
    cv::Mat as_double;
    gray.convertTo(as_double, CV_64F);
    for (int y = 0; y < gray.rows; ++y)
        for (int x = 0; x < gray.cols; ++x) mask(y, x) = as_double.at<double>(y, x) > threshold;
    return mask;
}

} // namespace

Image resize_image(const Image& image, ImageSize target) {
    if (image.size() == target) return image;
    if (target.height <= 0 || target.width <= 0)
        throw Error(ErrorCode::PreprocessError, "target size must be positive");
    cv::Mat src = image_to_mat(image);
    cv::Mat dst;
    const bool shrinking = target.height < image.height() && target.width < image.width();
    cv::resize(src, dst, cv::Size(target.width, target.height), 0, 0,
               shrinking ? cv::INTER_AREA : cv::INTER_LINEAR);
    Image out(target.height, target.width, image.channels());
    for (int y = 0; y < target.height; ++y)
        std::memcpy(&out.at(y, 0, 0), dst.ptr<double>(y),
                    sizeof(double) * image.channels() * target.width);
    for (double& v : out.data()) v = std::clamp(v, 0.0, 1.0);
    return out;
}

Image load_image(const fs::path& path, ImageSize target) {
    if (!fs::exists(path)) throw Error(ErrorCode::DecodeError, "no such file " + path.string());
    Image image = mat_to_image(cv::imread(path.string(), cv::IMREAD_UNCHANGED), path.string());
    return target.height > 0 ? resize_image(image, target) : image;
}

Image decode_image(const std::vector<std::uint8_t>& bytes, ImageSize target) {
    if (bytes.empty()) throw Error(ErrorCode::DecodeError, "empty image payload");
    Image image = mat_to_image(cv::imdecode(bytes, cv::IMREAD_UNCHANGED), "image payload");
    return target.height > 0 ? resize_image(image, target) : image;
}

std::vector<std::uint8_t> encode_png(const Image& image) { return encode(image_to_bgr8(image), ".png"); }

std::vector<std::uint8_t> encode_mask_png(const Mask& mask) {
    cv::Mat m(mask.rows(), mask.cols(), CV_8UC1);
    for (int y = 0; y < mask.rows(); ++y)
        for (int x = 0; x < mask.cols(); ++x) m.at<std::uint8_t>(y, x) = mask(y, x) ? 255 : 0;
    return encode(m, ".png");
}

void save_image(const fs::path& path, const Image& image) { write_file(path, encode_png(image)); }
void save_mask(const fs::path& path, const Mask& mask) { write_file(path, encode_mask_png(mask)); }

Mask load_mask(const fs::path& path) {
    if (!fs::exists(path)) throw Error(ErrorCode::DecodeError, "no such file " + path.string());
    return mat_to_mask(
        decode_single_channel(cv::imread(path.string(), cv::IMREAD_UNCHANGED), path.string()));
}

Mask decode_mask(const std::vector<std::uint8_t>& bytes) {
    if (bytes.empty()) throw Error(ErrorCode::DecodeError, "empty mask payload");
    return mat_to_mask(
        decode_single_channel(cv::imdecode(bytes, cv::IMREAD_UNCHANGED), "mask payload"));
}

Map load_score_map(const fs::path& path) {
    if (path.extension() == ".npy") return load_npy(path);
    cv::Mat gray =
        decode_single_channel(cv::imread(path.string(), cv::IMREAD_UNCHANGED), path.string());
    const double scale = gray.depth() == CV_16U ? 1.0 / 65535.0 : 1.0 / 255.0;
    cv::Mat as_double;
    gray.convertTo(as_double, CV_64F, scale);
    Map map(gray.rows, gray.cols);
    for (int y = 0; y < gray.rows; ++y)
        for (int x = 0; x < gray.cols; ++x) map(y, x) = as_double.at<double>(y, x);
    return map;
}

std::vector<std::uint8_t> encode_npy(const Map& map) {
    std::string header = "{'descr': '<f4', 'fortran_order': False, 'shape': (" +
                         std::to_string(map.rows()) + ", " + std::to_string(map.cols()) + "), }";
    // magic(6) + version(2) + header_len(2) + header + '\n' must be a multiple of 64
    const std::size_t unpadded = 10 + header.size() + 1;
    header.append((64 - unpadded % 64) % 64, ' ');
    header.push_back('\n');

    std::vector<std::uint8_t> out = {0x93, 'N', 'U', 'M', 'P', 'Y', 1, 0};
    out.push_back(static_cast<std::uint8_t>(header.size() & 0xff));
    out.push_back(static_cast<std::uint8_t>(header.size() >> 8));
    out.insert(out.end(), header.begin(), header.end());
    for (double v : map.data()) {
        const float f = static_cast<float>(v);
        std::uint32_t bits;
        std::memcpy(&bits, &f, sizeof bits);
        for (int b = 0; b < 4; ++b) out.push_back(static_cast<std::uint8_t>(bits >> (8 * b)));
    }
    return out;
}

void save_npy(const fs::path& path, const Map& map) { write_file(path, encode_npy(map)); }

Map load_npy(const fs::path& path) { return decode_npy(read_file(path), path.string()); }

Map decode_npy(const std::vector<std::uint8_t>& bytes, const std::string& name) {
    if (bytes.size() < 10 || bytes[0] != 0x93 || std::memcmp(&bytes[1], "NUMPY", 5) != 0)
        throw Error(ErrorCode::DecodeError, name + " is not an .npy file");
    const std::size_t header_len = bytes[8] | (static_cast<std::size_t>(bytes[9]) << 8);
    if (bytes[6] != 1 || bytes.size() < 10 + header_len)
        throw Error(ErrorCode::DecodeError, name + ": unsupported .npy header");
    const std::string header(bytes.begin() + 10, bytes.begin() + 10 + header_len);
    if (header.find("'<f4'") == std::string::npos || header.find("False") == std::string::npos)
        throw Error(ErrorCode::DecodeError, name + ": expected C-ordered float32");
    const auto open = header.find('(');
    int rows = 0, cols = 0;
    if (open == std::string::npos ||
        std::sscanf(header.c_str() + open, "(%d, %d)", &rows, &cols) != 2 || rows < 0 || cols < 0)
        throw Error(ErrorCode::DecodeError, name + ": expected a 2-D shape");
    const std::size_t offset = 10 + header_len;
    if (bytes.size() != offset + 4ull * rows * cols)
        throw Error(ErrorCode::DecodeError, name + ": truncated data");
    Map map(rows, cols);
    for (std::size_t i = 0; i < map.count(); ++i) {
        std::uint32_t bits = 0;
        for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(bytes[offset + 4 * i + b]) << (8 * b);
        float f;
        std::memcpy(&f, &bits, sizeof f);
        map.data()[i] = f;
    }
    return map;
}

std::vector<std::uint8_t> encode_heatmap_png(const Map& map) {
    cv::Mat u8(map.rows(), map.cols(), CV_8UC1);
    for (int y = 0; y < map.rows(); ++y)
        for (int x = 0; x < map.cols(); ++x)
            u8.at<std::uint8_t>(y, x) =
                static_cast<std::uint8_t>(std::lround(std::clamp(map(y, x), 0.0, 1.0) * 255.0));
    cv::Mat colored;
    cv::applyColorMap(u8, colored, cv::COLORMAP_JET);
    return encode(colored, ".png");
}

std::vector<std::uint8_t> read_file(const fs::path& path) {
    const std::string text = read_text(path);
    return {text.begin(), text.end()};
}

void write_file(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

void write_text(const fs::path& path, std::string_view text) {
    write_file(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

// ---------------------------------------------------------------------------
// Segmentation datasets
// ---------------------------------------------------------------------------

std::vector<fs::path> list_images(const fs::path& dir) {
    static const std::set<std::string> extensions = {".png", ".jpg", ".jpeg", ".bmp", ".tif",
                                                     ".tiff"};
    std::vector<fs::path> out;
    if (!fs::is_directory(dir)) throw Error(ErrorCode::IoError, "no directory " + dir.string());
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (!entry.is_regular_file()) continue;
        std::string ext = entry.path().extension().string();
        std::transform(ext.begin(), ext.end(), ext.begin(),
                       [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
        if (extensions.count(ext)) out.push_back(entry.path());
    }
    std::sort(out.begin(), out.end());
    return out;
}

std::map<std::string, std::vector<std::string>> read_splits_json(const fs::path& path) {
    try {
        return nlohmann::json::parse(read_text(path))
            .get<std::map<std::string, std::vector<std::string>>>();
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::DecodeError, path.string() + ": " + e.what());
    }
}

namespace {

fs::path find_by_stem(const fs::path& dir, const std::string& stem) {
    if (!fs::is_directory(dir)) return {};
    for (const auto& p : list_images(dir))
        if (p.stem().string() == stem) return p;
    return {};
}

} // namespace

SegmentationSet load_segmentation_set(const fs::path& root, const std::string& split) {
    SegmentationSet set;
    const fs::path image_dir = root / "images";
    const fs::path mask_dir = root / "masks";
    std::map<std::string, fs::path> masks;
    if (fs::is_directory(mask_dir))
        for (const auto& p : list_images(mask_dir)) masks[p.stem().string()] = p;

    std::vector<fs::path> images = list_images(image_dir);
    if (!split.empty()) {
        const auto splits = read_splits_json(root / "splits.json");
        const auto it = splits.find(split);
        if (it == splits.end())
            throw Error(ErrorCode::InvalidConfig, "splits.json has no split '" + split + "'");
        std::map<std::string, fs::path> by_stem;
        for (const auto& p : images) by_stem[p.stem().string()] = p;
        images.clear();
        for (const auto& stem : it->second) {
            const auto found = by_stem.find(stem);
            if (found == by_stem.end())
                throw Error(ErrorCode::IoError, "split '" + split + "' names missing image " + stem);
            images.push_back(found->second);
        }
    }
    for (const auto& p : images) {
        SegmentationRecord rec{p.stem().string(), p, {}};
        if (const auto m = masks.find(rec.id); m != masks.end()) rec.mask_path = m->second;
        set.records.push_back(std::move(rec));
    }
    return set;
}

SegmentationSet with_masks_from(SegmentationSet set, const fs::path& mask_dir) {
    for (auto& rec : set.records) {
        rec.mask_path = find_by_stem(mask_dir, rec.id);
        if (rec.mask_path.empty())
            throw Error(ErrorCode::IoError, "no mask for " + rec.id + " in " + mask_dir.string());
    }
    return set;
}

} // namespace promptseg
