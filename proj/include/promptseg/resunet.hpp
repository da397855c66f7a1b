#pragma once

#include "promptseg/embedding.hpp"
#include "promptseg/image.hpp"

#include <json.hpp>

#include <filesystem>
#include <memory>
#include <random>
#include <vector>

namespace promptseg {

struct ResUNetSpec {
    int depth = 4; // resolution levels; the input is pooled depth-1 times
    int base_channels = 32;
    int blocks_per_stage = 1;
    int input_channels = 3;

    void validate() const;
    int channels_at(int level) const { return base_channels << level; }
    // Spatial sizes must be multiples of this.
    int size_multiple() const { return 1 << (depth - 1); }
};

nlohmann::json to_json(const ResUNetSpec& spec);
ResUNetSpec resunet_spec_from_json(const nlohmann::json& j);

namespace nn {

// C × (H·W) activations, pixels in row-major order.
struct Tensor {
    int height = 0;
    int width = 0;
    Matrix values;
    int channels() const { return static_cast<int>(values.rows()); }
};

struct Param {
    Matrix value, grad, m, v;
    explicit Param(Matrix init)
        : value(std::move(init)), grad(Matrix::Zero(value.rows(), value.cols())),
          m(grad), v(grad) {}
};

// Square convolution, stride 1, zero padding k/2.
class Conv {
  public:
    Conv(int in, int out, int kernel, std::mt19937_64& rng, double gain = 1.0);
    Tensor forward(const Tensor& x);
    Tensor backward(const Tensor& dy);
    std::vector<Param*> params() { return {&weight_, &bias_}; }

  private:
    int in_, out_, k_;
    Param weight_, bias_;
    Matrix columns_;
    int h_ = 0, w_ = 0;
};

// relu(conv(relu(conv(x))) + shortcut(x)); the shortcut is a 1×1 convolution
// when the channel count changes.
class ResidualBlock {
  public:
    ResidualBlock(int in, int out, std::mt19937_64& rng);
    Tensor forward(const Tensor& x);
    Tensor backward(const Tensor& dy);
    std::vector<Param*> params();

  private:
    Conv conv1_, conv2_;
    std::unique_ptr<Conv> projection_;
    Matrix pre1_, sum_;
};

} // namespace nn

class ResUNet {
  public:
    ResUNet(const ResUNetSpec& spec, std::uint64_t seed);

    const ResUNetSpec& spec() const { return spec_; }

    // Logits (1 × H·W) for a C×H×W input whose sides are multiples of
    // spec().size_multiple().
    nn::Tensor forward(const nn::Tensor& input);
    // Accumulates parameter gradients for d(loss)/d(logits).
    void backward(const nn::Tensor& dlogits);

    std::vector<nn::Param*> params();
    std::size_t parameter_count();
    void zero_grad();

    // Probability map for an RGB image of any size (zero-padded internally).
    Map predict(const Image& image);

    void save(const std::filesystem::path& path);
    // Throws CheckpointCorrupt for truncated, mismatched or altered files.
    static ResUNet load(const std::filesystem::path& path);
    std::string serialize();
    static ResUNet deserialize(const std::string& bytes);

  private:
    ResUNetSpec spec_;
    std::vector<std::vector<nn::ResidualBlock>> encoder_;
    std::vector<std::vector<nn::ResidualBlock>> decoder_; // decoder_[l] outputs level l
    std::unique_ptr<nn::Conv> head_;
    std::vector<nn::Tensor> skips_;
    std::vector<std::vector<int>> pool_argmax_;
    std::vector<int> skip_channels_;
};

nn::Tensor to_tensor(const Image& image);

} // namespace promptseg
