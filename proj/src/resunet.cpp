#include "promptseg/resunet.hpp"

#include "promptseg/data_io.hpp"
#include "promptseg/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace promptseg {

void ResUNetSpec::validate() const {
    if (depth < 1 || depth > 8) throw Error(ErrorCode::InvalidConfig, "resunet depth must lie in [1, 8]");
    if (base_channels < 1) throw Error(ErrorCode::InvalidConfig, "base_channels must be >= 1");
    if (blocks_per_stage < 1) throw Error(ErrorCode::InvalidConfig, "blocks_per_stage must be >= 1");
    if (input_channels < 1) throw Error(ErrorCode::InvalidConfig, "input_channels must be >= 1");
}

nlohmann::json to_json(const ResUNetSpec& s) {
    return {{"depth", s.depth},
            {"base_channels", s.base_channels},
            {"blocks_per_stage", s.blocks_per_stage},
            {"input_channels", s.input_channels}};
}

ResUNetSpec resunet_spec_from_json(const nlohmann::json& j) {
    ResUNetSpec s;
    try {
        s.depth = j.value("depth", s.depth);
        s.base_channels = j.value("base_channels", s.base_channels);
        s.blocks_per_stage = j.value("blocks_per_stage", s.blocks_per_stage);
        s.input_channels = j.value("input_channels", s.input_channels);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::InvalidConfig, std::string("bad resunet spec: ") + e.what());
    }
    s.validate();
    return s;
}

namespace nn {

namespace {

Matrix he_normal(int rows, int fan_in, std::mt19937_64& rng, double gain) {
    std::normal_distribution<double> n(0.0, gain * std::sqrt(2.0 / fan_in));
    Matrix m(rows, fan_in);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
    return m;
}

Matrix relu_of(const Matrix& m) { return m.cwiseMax(0.0); }

Matrix relu_grad(const Matrix& pre, const Matrix& dy) {
    return (pre.array() > 0.0).select(dy, 0.0);
}

Tensor max_pool(const Tensor& x, std::vector<int>& argmax) {
    Tensor y{x.height / 2, x.width / 2, Matrix(x.channels(), (x.height / 2) * (x.width / 2))};
    argmax.assign(static_cast<std::size_t>(y.values.size()), 0);
    for (int c = 0; c < x.channels(); ++c)
        for (int py = 0; py < y.height; ++py)
            for (int px = 0; px < y.width; ++px) {
                int best = (2 * py) * x.width + 2 * px;
                for (int dy = 0; dy < 2; ++dy)
                    for (int dx = 0; dx < 2; ++dx) {
                        const int idx = (2 * py + dy) * x.width + 2 * px + dx;
                        if (x.values(c, idx) > x.values(c, best)) best = idx;
                    }
                const int out = py * y.width + px;
                y.values(c, out) = x.values(c, best);
                argmax[static_cast<std::size_t>(c) * y.values.cols() + out] = best;
            }
    return y;
}

Tensor max_pool_backward(const Tensor& dy, const std::vector<int>& argmax, int h, int w) {
    Tensor dx{h, w, Matrix::Zero(dy.channels(), static_cast<Eigen::Index>(h) * w)};
    for (int c = 0; c < dy.channels(); ++c)
        for (Eigen::Index i = 0; i < dy.values.cols(); ++i)
            dx.values(c, argmax[static_cast<std::size_t>(c) * dy.values.cols() + i]) += dy.values(c, i);
    return dx;
}

Tensor upsample2(const Tensor& x) {
    Tensor y{x.height * 2, x.width * 2, Matrix(x.channels(), 4 * x.values.cols())};
    for (int yy = 0; yy < y.height; ++yy)
        for (int xx = 0; xx < y.width; ++xx)
            y.values.col(yy * y.width + xx) = x.values.col((yy / 2) * x.width + xx / 2);
    return y;
}

Tensor upsample2_backward(const Tensor& dy) {
    Tensor dx{dy.height / 2, dy.width / 2, Matrix::Zero(dy.channels(), dy.values.cols() / 4)};
    for (int yy = 0; yy < dy.height; ++yy)
        for (int xx = 0; xx < dy.width; ++xx)
            dx.values.col((yy / 2) * dx.width + xx / 2) += dy.values.col(yy * dy.width + xx);
    return dx;
}

} // namespace

Conv::Conv(int in, int out, int kernel, std::mt19937_64& rng, double gain)
    : in_(in), out_(out), k_(kernel), weight_(he_normal(out, in * kernel * kernel, rng, gain)),
      bias_(Matrix::Zero(out, 1)) {}

Tensor Conv::forward(const Tensor& x) {
    h_ = x.height;
    w_ = x.width;
    const int hw = h_ * w_;
    if (k_ == 1) {
        columns_ = x.values;
    } else {
        const int r = k_ / 2;
        columns_.setZero(static_cast<Eigen::Index>(in_) * k_ * k_, hw);
        for (int c = 0; c < in_; ++c)
            for (int ky = 0; ky < k_; ++ky)
                for (int kx = 0; kx < k_; ++kx) {
                    const Eigen::Index row = (static_cast<Eigen::Index>(c) * k_ + ky) * k_ + kx;
                    for (int y = 0; y < h_; ++y) {
                        const int sy = y + ky - r;
                        if (sy < 0 || sy >= h_) continue;
                        for (int xx = 0; xx < w_; ++xx) {
                            const int sx = xx + kx - r;
                            if (sx < 0 || sx >= w_) continue;
                            columns_(row, y * w_ + xx) = x.values(c, sy * w_ + sx);
                        }
                    }
                }
    }
    Tensor y{h_, w_, weight_.value * columns_};
    y.values.colwise() += bias_.value.col(0);
    return y;
}

Tensor Conv::backward(const Tensor& dy) {
    weight_.grad.noalias() += dy.values * columns_.transpose();
    bias_.grad.col(0) += dy.values.rowwise().sum();
    const Matrix dcol = weight_.value.transpose() * dy.values;
    if (k_ == 1) return {h_, w_, dcol};
    Tensor dx{h_, w_, Matrix::Zero(in_, static_cast<Eigen::Index>(h_) * w_)};
    const int r = k_ / 2;
    for (int c = 0; c < in_; ++c)
        for (int ky = 0; ky < k_; ++ky)
            for (int kx = 0; kx < k_; ++kx) {
                const Eigen::Index row = (static_cast<Eigen::Index>(c) * k_ + ky) * k_ + kx;
                for (int y = 0; y < h_; ++y) {
                    const int sy = y + ky - r;
                    if (sy < 0 || sy >= h_) continue;
                    for (int xx = 0; xx < w_; ++xx) {
                        const int sx = xx + kx - r;
                        if (sx < 0 || sx >= w_) continue;
                        dx.values(c, sy * w_ + sx) += dcol(row, y * w_ + xx);
                    }
                }
            }
    return dx;
}

ResidualBlock::ResidualBlock(int in, int out, std::mt19937_64& rng)
    : conv1_(in, out, 3, rng), conv2_(out, out, 3, rng, 0.5) {
    if (in != out) projection_ = std::make_unique<Conv>(in, out, 1, rng);
}

Tensor ResidualBlock::forward(const Tensor& x) {
    const Tensor a = conv1_.forward(x);
    pre1_ = a.values;
    const Tensor b = conv2_.forward({a.height, a.width, relu_of(pre1_)});
    sum_ = b.values + (projection_ ? projection_->forward(x).values : x.values);
    return {x.height, x.width, relu_of(sum_)};
}

Tensor ResidualBlock::backward(const Tensor& dy) {
    const Tensor ds{dy.height, dy.width, relu_grad(sum_, dy.values)};
    const Tensor dr1 = conv2_.backward(ds);
    Tensor dx = conv1_.backward({dy.height, dy.width, relu_grad(pre1_, dr1.values)});
    dx.values += projection_ ? projection_->backward(ds).values : ds.values;
    return dx;
}

std::vector<Param*> ResidualBlock::params() {
    auto p = conv1_.params();
    for (auto* q : conv2_.params()) p.push_back(q);
    if (projection_)
        for (auto* q : projection_->params()) p.push_back(q);
    return p;
}

} // namespace nn

using nn::Tensor;

ResUNet::ResUNet(const ResUNetSpec& spec, std::uint64_t seed) : spec_(spec) {
    spec_.validate();
    std::mt19937_64 rng(seed);
    encoder_.resize(spec_.depth);
    decoder_.resize(spec_.depth > 1 ? spec_.depth - 1 : 0);
    for (int l = 0; l < spec_.depth; ++l) {
        int in = l == 0 ? spec_.input_channels : spec_.channels_at(l - 1);
        for (int b = 0; b < spec_.blocks_per_stage; ++b) {
            encoder_[l].emplace_back(in, spec_.channels_at(l), rng);
            in = spec_.channels_at(l);
        }
    }
    for (int l = spec_.depth - 2; l >= 0; --l) {
        int in = spec_.channels_at(l + 1) + spec_.channels_at(l);
        for (int b = 0; b < spec_.blocks_per_stage; ++b) {
            decoder_[l].emplace_back(in, spec_.channels_at(l), rng);
            in = spec_.channels_at(l);
        }
    }
    head_ = std::make_unique<nn::Conv>(spec_.channels_at(0), 1, 1, rng, 0.1);
}

Tensor ResUNet::forward(const Tensor& input) {
    const int m = spec_.size_multiple();
    if (input.channels() != spec_.input_channels || input.height % m || input.width % m ||
        input.height == 0 || input.width == 0)
        throw Error(ErrorCode::ShapeMismatch,
                    "input must have " + std::to_string(spec_.input_channels) +
                        " channels and sides divisible by " + std::to_string(m));
    skips_.assign(spec_.depth, {});
    pool_argmax_.assign(spec_.depth, {});
    Tensor x = input;
    for (int l = 0; l < spec_.depth; ++l) {
        if (l > 0) x = nn::max_pool(x, pool_argmax_[l]);
        for (auto& block : encoder_[l]) x = block.forward(x);
        skips_[l] = x;
    }
    for (int l = spec_.depth - 2; l >= 0; --l) {
        const Tensor up = nn::upsample2(x);
        Tensor cat{up.height, up.width, Matrix(up.channels() + skips_[l].channels(), up.values.cols())};
        cat.values << up.values, skips_[l].values;
        x = cat;
        for (auto& block : decoder_[l]) x = block.forward(x);
    }
    return head_->forward(x);
}

void ResUNet::backward(const Tensor& dlogits) {
    Tensor d = head_->backward(dlogits);
    std::vector<Matrix> dskip(spec_.depth);
    for (int l = 0; l < spec_.depth - 1; ++l) {
        for (auto it = decoder_[l].rbegin(); it != decoder_[l].rend(); ++it) d = it->backward(d);
        const int up = spec_.channels_at(l + 1);
        dskip[l] = d.values.bottomRows(d.channels() - up);
        d = nn::upsample2_backward({d.height, d.width, d.values.topRows(up)});
    }
    for (int l = spec_.depth - 1; l >= 0; --l) {
        if (dskip[l].size()) d.values += dskip[l];
        for (auto it = encoder_[l].rbegin(); it != encoder_[l].rend(); ++it) d = it->backward(d);
        if (l > 0) d = nn::max_pool_backward(d, pool_argmax_[l], skips_[l - 1].height, skips_[l - 1].width);
    }
}

std::vector<nn::Param*> ResUNet::params() {
    std::vector<nn::Param*> out;
    auto add = [&](std::vector<nn::Param*> ps) { out.insert(out.end(), ps.begin(), ps.end()); };
    for (auto& stage : encoder_)
        for (auto& b : stage) add(b.params());
    for (int l = spec_.depth - 2; l >= 0; --l)
        for (auto& b : decoder_[l]) add(b.params());
    add(head_->params());
    return out;
}

std::size_t ResUNet::parameter_count() {
    std::size_t n = 0;
    for (auto* p : params()) n += static_cast<std::size_t>(p->value.size());
    return n;
}

void ResUNet::zero_grad() {
    for (auto* p : params()) p->grad.setZero();
}

Tensor to_tensor(const Image& image) {
    Tensor t{image.height(), image.width(),
             Matrix(image.channels(), static_cast<Eigen::Index>(image.height()) * image.width())};
    for (int y = 0; y < image.height(); ++y)
        for (int x = 0; x < image.width(); ++x)
            for (int c = 0; c < image.channels(); ++c) t.values(c, y * image.width() + x) = image.at(y, x, c);
    return t;
}

Map ResUNet::predict(const Image& image) {
    if (image.channels() != spec_.input_channels)
        throw Error(ErrorCode::ShapeMismatch, "image has " + std::to_string(image.channels()) +
                                                  " channels, model expects " +
                                                  std::to_string(spec_.input_channels));
    const int m = spec_.size_multiple();
    const int h = (image.height() + m - 1) / m * m, w = (image.width() + m - 1) / m * m;
    Image padded(h, w, image.channels());
    for (int y = 0; y < image.height(); ++y)
        for (int x = 0; x < image.width(); ++x)
            for (int c = 0; c < image.channels(); ++c) padded.at(y, x, c) = image.at(y, x, c);
    const Tensor logits = forward(to_tensor(padded));
    Map out(image.height(), image.width());
    for (int y = 0; y < image.height(); ++y)
        for (int x = 0; x < image.width(); ++x) out(y, x) = 1.0 / (1.0 + std::exp(-logits.values(0, y * w + x)));
    return out;
}

namespace {

constexpr char kMagic[8] = {'P', 'S', 'G', 'R', 'U', 'N', '0', '1'};

std::uint64_t fnv1a(const char* data, std::size_t len) {
    std::uint64_t h = 1469598103934665603ULL;
    for (std::size_t i = 0; i < len; ++i) {
        h ^= static_cast<unsigned char>(data[i]);
        h *= 1099511628211ULL;
    }
    return h;
}

template <class T>
void put(std::string& out, T v) {
    out.append(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T take(const std::string& in, std::size_t& pos) {
    if (pos + sizeof(T) > in.size()) throw Error(ErrorCode::CheckpointCorrupt, "checkpoint truncated");
    T v;
    std::memcpy(&v, in.data() + pos, sizeof v);
    pos += sizeof v;
    return v;
}

} // namespace

// Layout: magic, u32 spec length, spec JSON, u64 value count, f64 values,
// u64 FNV-1a of everything before it.
std::string ResUNet::serialize() {
    std::string out(kMagic, sizeof kMagic);
    const std::string spec = to_json(spec_).dump();
    put<std::uint32_t>(out, static_cast<std::uint32_t>(spec.size()));
    out += spec;
    std::uint64_t count = 0;
    for (auto* p : params()) count += static_cast<std::uint64_t>(p->value.size());
    put<std::uint64_t>(out, count);
    for (auto* p : params())
        out.append(reinterpret_cast<const char*>(p->value.data()), sizeof(double) * p->value.size());
    put<std::uint64_t>(out, fnv1a(out.data(), out.size()));
    return out;
}

ResUNet ResUNet::deserialize(const std::string& bytes) {
    if (bytes.size() < sizeof kMagic + 4 + 8 + 8 || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0)
        throw Error(ErrorCode::CheckpointCorrupt, "not a ResUNet checkpoint");
    std::uint64_t stored;
    std::memcpy(&stored, bytes.data() + bytes.size() - 8, 8);
    if (stored != fnv1a(bytes.data(), bytes.size() - 8))
        throw Error(ErrorCode::CheckpointCorrupt, "checkpoint checksum mismatch");
    std::size_t pos = sizeof kMagic;
    const auto spec_len = take<std::uint32_t>(bytes, pos);
    if (pos + spec_len > bytes.size()) throw Error(ErrorCode::CheckpointCorrupt, "checkpoint truncated");
    ResUNetSpec spec;
    try {
        spec = resunet_spec_from_json(nlohmann::json::parse(bytes.substr(pos, spec_len)));
    } catch (const std::exception& e) {
        throw Error(ErrorCode::CheckpointCorrupt, std::string("bad checkpoint spec: ") + e.what());
    }
    pos += spec_len;
    ResUNet net(spec, 0);
    const auto count = take<std::uint64_t>(bytes, pos);
    if (count != net.parameter_count() || pos + count * sizeof(double) + 8 != bytes.size())
        throw Error(ErrorCode::CheckpointCorrupt, "checkpoint parameter count mismatch");
    for (auto* p : net.params()) {
        std::memcpy(p->value.data(), bytes.data() + pos, sizeof(double) * p->value.size());
        pos += sizeof(double) * p->value.size();
    }
    return net;
}

void ResUNet::save(const std::filesystem::path& path) {
    const std::string bytes = serialize();
    write_file(path, std::vector<std::uint8_t>(bytes.begin(), bytes.end()));
}

ResUNet ResUNet::load(const std::filesystem::path& path) {
    std::vector<std::uint8_t> bytes;
    try {
        bytes = read_file(path);
    } catch (const Error& e) {
        throw Error(ErrorCode::CheckpointCorrupt, e.what());
    }
    return deserialize(std::string(bytes.begin(), bytes.end()));
}

} // namespace promptseg
