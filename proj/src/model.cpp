#include "infoclust/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <stdexcept>

#include <Eigen/Dense>

namespace infoclust {

namespace {

template <typename T>
using MatT = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapT = Eigen::Map<MatT<T>>;
template <typename T>
using ConstMapT = Eigen::Map<const MatT<T>>;

std::size_t product(const std::vector<int>& shape)
{
    std::size_t n = 1;
    for (int d : shape) {
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

int conv_out(int in, const ConvLayerSpec& c) { return (in + 2 * c.padding - c.kernel) / c.stride + 1; }

/// Lays `channels` x (`batch` x h x w) activations out as im2col columns.
/// Output columns [first, last) whose input column for kernel offset kx is inside the image.
std::pair<int, int> valid_range(int out_w, int w, const ConvLayerSpec& c, int kx)
{
    int first = 0;
    while (first < out_w && first * c.stride - c.padding + kx < 0) ++first;
    int last = out_w;
    while (last > first && (last - 1) * c.stride - c.padding + kx >= w) --last;
    return {first, last};
}

template <typename T>
void im2col(const T* in, int channels, std::size_t batch, int h, int w, const ConvLayerSpec& c,
            int out_h, int out_w, T* col)
{
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    const std::size_t out_plane = static_cast<std::size_t>(out_h) * out_w;
    const std::size_t columns = batch * out_plane;
    for (int ch = 0; ch < channels; ++ch) {
        for (int ky = 0; ky < c.kernel; ++ky) {
            for (int kx = 0; kx < c.kernel; ++kx) {
                T* row = col + ((static_cast<std::size_t>(ch) * c.kernel + ky) * c.kernel + kx) * columns;
                const auto [ox0, ox1] = valid_range(out_w, w, c, kx);
                for (std::size_t b = 0; b < batch; ++b) {
                    const T* src = in + (static_cast<std::size_t>(ch) * batch + b) * plane;
                    T* dst = row + b * out_plane;
                    for (int oy = 0; oy < out_h; ++oy) {
                        const int iy = oy * c.stride - c.padding + ky;
                        T* d = dst + oy * out_w;
                        if (iy < 0 || iy >= h) {
                            std::fill_n(d, out_w, T(0));
                            continue;
                        }
                        const T* s = src + iy * w - c.padding + kx;
                        std::fill_n(d, ox0, T(0));
                        for (int ox = ox0; ox < ox1; ++ox) d[ox] = s[ox * c.stride];
                        std::fill_n(d + ox1, out_w - ox1, T(0));
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im(const T* col, int channels, std::size_t batch, int h, int w, const ConvLayerSpec& c,
            int out_h, int out_w, T* out)
{
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    const std::size_t out_plane = static_cast<std::size_t>(out_h) * out_w;
    const std::size_t columns = batch * out_plane;
    std::fill_n(out, static_cast<std::size_t>(channels) * batch * plane, T(0));
    for (int ch = 0; ch < channels; ++ch) {
        for (int ky = 0; ky < c.kernel; ++ky) {
            for (int kx = 0; kx < c.kernel; ++kx) {
                const T* row = col + ((static_cast<std::size_t>(ch) * c.kernel + ky) * c.kernel + kx) * columns;
                const auto [ox0, ox1] = valid_range(out_w, w, c, kx);
                for (std::size_t b = 0; b < batch; ++b) {
                    T* dst = out + (static_cast<std::size_t>(ch) * batch + b) * plane;
                    const T* src = row + b * out_plane;
                    for (int oy = 0; oy < out_h; ++oy) {
                        const int iy = oy * c.stride - c.padding + ky;
                        if (iy < 0 || iy >= h) continue;
                        T* d = dst + iy * w - c.padding + kx;
                        const T* s = src + oy * out_w;
                        for (int ox = ox0; ox < ox1; ++ox) d[ox * c.stride] += s[ox];
                    }
                }
            }
        }
    }
}

bool all_finite(const Matrix& m) { return m.allFinite(); }

}  // namespace

bool operator==(const ConvLayerSpec& a, const ConvLayerSpec& b)
{
    return a.out_channels == b.out_channels && a.kernel == b.kernel && a.stride == b.stride &&
           a.padding == b.padding;
}

// ---------------------------------------------------------------------------
// Architecture

Architecture Architecture::desk_default(int channels, int height, int width, int classes, int primary_heads,
                                        int overcluster_heads, int overcluster_width)
{
    Architecture arch;
    arch.channels = channels;
    arch.height = height;
    arch.width = width;
    arch.classes = classes;
    arch.convs = {{32, 3, 2, 1}, {64, 3, 2, 1}};
    arch.hidden = {128};
    arch.heads.assign(static_cast<std::size_t>(primary_heads), classes);
    arch.heads.insert(arch.heads.end(), static_cast<std::size_t>(overcluster_heads), overcluster_width);
    return arch;
}

void Architecture::validate() const
{
    if (channels < 1 || height < 1 || width < 1) {
        throw std::invalid_argument("architecture: input dimensions must be positive");
    }
    if (convs.empty() && hidden.empty() && heads.empty()) {
        throw std::invalid_argument("architecture: no layers");
    }
    if (heads.empty()) {
        throw std::invalid_argument("architecture: at least one head is required");
    }
    if (classes < 2) {
        throw std::invalid_argument("architecture: classes must be >= 2");
    }
    if (input_mean.size() != input_std.size() ||
        (!input_mean.empty() && input_mean.size() != static_cast<std::size_t>(channels))) {
        throw std::invalid_argument("architecture: input normalization needs one mean and std per channel");
    }
    for (float s : input_std) {
        if (!(s > 0.0f) || !std::isfinite(s)) {
            throw std::invalid_argument("architecture: input std must be positive");
        }
    }
    int h = height;
    int w = width;
    for (const auto& c : convs) {
        if (c.out_channels < 1 || c.kernel < 1 || c.stride < 1 || c.padding < 0) {
            throw std::invalid_argument("architecture: invalid conv layer");
        }
        h = conv_out(h, c);
        w = conv_out(w, c);
        if (h < 1 || w < 1) {
            throw std::invalid_argument("architecture: conv stack shrinks the input to nothing");
        }
    }
    for (int d : hidden) {
        if (d < 1) {
            throw std::invalid_argument("architecture: hidden width must be positive");
        }
    }
    for (int k : heads) {
        if (k < 2) {
            throw std::invalid_argument("architecture: head width must be >= 2");
        }
    }
    if (primary_heads().empty()) {
        throw std::invalid_argument("architecture: no head with width == classes");
    }
}

std::size_t Architecture::input_size() const { return static_cast<std::size_t>(channels) * height * width; }

bool Architecture::is_primary(std::size_t head) const { return heads.at(head) == classes; }

std::vector<std::size_t> Architecture::primary_heads() const
{
    std::vector<std::size_t> out;
    for (std::size_t h = 0; h < heads.size(); ++h) {
        if (heads[h] == classes) {
            out.push_back(h);
        }
    }
    return out;
}

std::pair<int, int> Architecture::conv_output_hw(std::size_t layer) const
{
    int h = height;
    int w = width;
    for (std::size_t l = 0; l <= layer; ++l) {
        h = conv_out(h, convs.at(l));
        w = conv_out(w, convs.at(l));
    }
    return {h, w};
}

std::size_t Architecture::conv_feature_size() const
{
    if (convs.empty()) {
        return input_size();
    }
    const auto [h, w] = conv_output_hw(convs.size() - 1);
    return static_cast<std::size_t>(convs.back().out_channels) * h * w;
}

std::size_t Architecture::fc_feature_size() const
{
    return hidden.empty() ? conv_feature_size() : static_cast<std::size_t>(hidden.back());
}

void to_json(nlohmann::json& j, const Architecture& arch)
{
    j = nlohmann::json{{"channels", arch.channels}, {"height", arch.height}, {"width", arch.width},
                       {"hidden", arch.hidden},     {"heads", arch.heads},   {"classes", arch.classes}};
    j["convs"] = nlohmann::json::array();
    for (const auto& c : arch.convs) {
        j["convs"].push_back(
            {{"out_channels", c.out_channels}, {"kernel", c.kernel}, {"stride", c.stride}, {"padding", c.padding}});
    }
    if (!arch.input_mean.empty()) {
        j["input_mean"] = arch.input_mean;
        j["input_std"] = arch.input_std;
    }
}

void from_json(const nlohmann::json& j, Architecture& arch)
{
    arch.channels = j.at("channels").get<int>();
    arch.height = j.at("height").get<int>();
    arch.width = j.at("width").get<int>();
    arch.hidden = j.value("hidden", std::vector<int>{});
    arch.heads = j.at("heads").get<std::vector<int>>();
    arch.classes = j.at("classes").get<int>();
    arch.convs.clear();
    for (const auto& c : j.value("convs", nlohmann::json::array())) {
        arch.convs.push_back({c.at("out_channels").get<int>(), c.value("kernel", 3), c.value("stride", 2),
                              c.value("padding", 1)});
    }
    arch.input_mean = j.value("input_mean", std::vector<float>{});
    arch.input_std = j.value("input_std", std::vector<float>{});
}

template <typename T>
ParameterSet<T> zeros_like(const ParameterSet<T>& params)
{
    ParameterSet<T> out;
    out.reserve(params.size());
    for (const auto& t : params) {
        out.push_back({t.name, t.shape, Buffer<T>(t.values.size(), T(0))});
    }
    return out;
}

template ParameterSet<float> zeros_like(const ParameterSet<float>&);
template ParameterSet<double> zeros_like(const ParameterSet<double>&);

// ---------------------------------------------------------------------------
// Model

namespace {

struct Layout {
    std::size_t convs;
    std::size_t hidden;
    [[nodiscard]] std::size_t conv_w(std::size_t l) const { return 2 * l; }
    [[nodiscard]] std::size_t fc_w(std::size_t l) const { return 2 * (convs + l); }
    [[nodiscard]] std::size_t head_w(std::size_t h) const { return 2 * (convs + hidden + h); }
};

Layout layout_of(const Architecture& a) { return {a.convs.size(), a.hidden.size()}; }

template <typename T>
Tensor<T> uniform_tensor(std::string name, std::vector<int> shape, double bound, std::mt19937_64& rng)
{
    std::uniform_real_distribution<double> dist(-bound, bound);
    Buffer<T> values(product(shape));
    for (auto& v : values) {
        v = static_cast<T>(dist(rng));
    }
    return {std::move(name), std::move(shape), std::move(values)};
}

template <typename T>
void push_head(ParameterSet<T>& params, std::size_t index, int width, int fan_in, std::mt19937_64& rng)
{
    const auto prefix = "head" + std::to_string(index);
    params.push_back(uniform_tensor<T>(prefix + ".weight", {width, fan_in}, 1.0 / std::sqrt(fan_in), rng));
    params.push_back({prefix + ".bias", {width}, Buffer<T>(static_cast<std::size_t>(width), T(0))});
}

}  // namespace

template <typename T>
BasicClusterModel<T> BasicClusterModel<T>::init(const Architecture& arch, std::uint64_t seed)
{
    arch.validate();
    std::mt19937_64 rng(seed);
    ParameterSet<T> params;
    int in_channels = arch.channels;
    for (std::size_t l = 0; l < arch.convs.size(); ++l) {
        const auto& c = arch.convs[l];
        const int fan_in = in_channels * c.kernel * c.kernel;
        const auto prefix = "conv" + std::to_string(l);
        params.push_back(uniform_tensor<T>(prefix + ".weight", {c.out_channels, in_channels, c.kernel, c.kernel},
                                           std::sqrt(6.0 / fan_in), rng));
        params.push_back({prefix + ".bias", {c.out_channels}, Buffer<T>(c.out_channels, T(0))});
        in_channels = c.out_channels;
    }
    int fan_in = static_cast<int>(arch.conv_feature_size());
    for (std::size_t l = 0; l < arch.hidden.size(); ++l) {
        const auto prefix = "fc" + std::to_string(l);
        params.push_back(
            uniform_tensor<T>(prefix + ".weight", {arch.hidden[l], fan_in}, std::sqrt(6.0 / fan_in), rng));
        params.push_back({prefix + ".bias", {arch.hidden[l]}, Buffer<T>(arch.hidden[l], T(0))});
        fan_in = arch.hidden[l];
    }
    for (std::size_t h = 0; h < arch.heads.size(); ++h) {
        push_head(params, h, arch.heads[h], fan_in, rng);
    }
    return BasicClusterModel(arch, std::move(params));
}

template <typename T>
BasicClusterModel<T>::BasicClusterModel(Architecture arch, ParameterSet<T> params)
    : arch_(std::move(arch)), params_(std::move(params))
{
    arch_.validate();
    // Re-derive the expected layout and compare shapes.
    std::vector<std::pair<std::string, std::vector<int>>> expected;
    int in_channels = arch_.channels;
    for (std::size_t l = 0; l < arch_.convs.size(); ++l) {
        const auto& c = arch_.convs[l];
        expected.push_back({"conv" + std::to_string(l) + ".weight", {c.out_channels, in_channels, c.kernel, c.kernel}});
        expected.push_back({"conv" + std::to_string(l) + ".bias", {c.out_channels}});
        in_channels = c.out_channels;
    }
    int fan_in = static_cast<int>(arch_.conv_feature_size());
    for (std::size_t l = 0; l < arch_.hidden.size(); ++l) {
        expected.push_back({"fc" + std::to_string(l) + ".weight", {arch_.hidden[l], fan_in}});
        expected.push_back({"fc" + std::to_string(l) + ".bias", {arch_.hidden[l]}});
        fan_in = arch_.hidden[l];
    }
    for (std::size_t h = 0; h < arch_.heads.size(); ++h) {
        expected.push_back({"head" + std::to_string(h) + ".weight", {arch_.heads[h], fan_in}});
        expected.push_back({"head" + std::to_string(h) + ".bias", {arch_.heads[h]}});
    }
    if (expected.size() != params_.size()) {
        throw std::invalid_argument("model: parameter count does not match architecture");
    }
    for (std::size_t i = 0; i < expected.size(); ++i) {
        const auto& t = params_[i];
        if (t.name != expected[i].first || t.shape != expected[i].second || t.values.size() != product(t.shape)) {
            throw std::invalid_argument("model: parameter '" + t.name + "' does not match architecture");
        }
    }
}

template <typename T>
Tensor<T>& BasicClusterModel<T>::parameter(const std::string& name)
{
    for (auto& t : params_) {
        if (t.name == name) return t;
    }
    throw std::out_of_range("model: no parameter '" + name + "'");
}

template <typename T>
const Tensor<T>& BasicClusterModel<T>::parameter(const std::string& name) const
{
    for (const auto& t : params_) {
        if (t.name == name) return t;
    }
    throw std::out_of_range("model: no parameter '" + name + "'");
}

template <typename T>
ForwardPass<T> BasicClusterModel<T>::forward(std::span<const T> input, std::size_t batch, bool record) const
{
    const auto lay = layout_of(arch_);
    if (batch == 0 || input.size() != batch * arch_.input_size()) {
        throw std::invalid_argument("forward: input size does not match architecture");
    }
    ForwardPass<T> pass;
    pass.batch = batch;

    const std::size_t plane = static_cast<std::size_t>(arch_.height) * arch_.width;
    Buffer<T> normalized;
    if (!arch_.input_mean.empty()) {
        normalized.assign(input.begin(), input.end());
        for (std::size_t b = 0; b < batch; ++b) {
            for (int c = 0; c < arch_.channels; ++c) {
                const T mean = arch_.input_mean[static_cast<std::size_t>(c)];
                const T inv = T(1) / T(arch_.input_std[static_cast<std::size_t>(c)]);
                T* x = normalized.data() + (b * arch_.channels + c) * plane;
                for (std::size_t i = 0; i < plane; ++i) x[i] = (x[i] - mean) * inv;
            }
        }
        input = std::span<const T>(normalized.data(), normalized.size());
    }
    // Channel-major copy of the input: [C][B][H][W].
    Buffer<T> act(input.size());
    for (std::size_t b = 0; b < batch; ++b) {
        for (int c = 0; c < arch_.channels; ++c) {
            std::copy_n(input.data() + (b * arch_.channels + c) * plane, plane,
                        act.data() + (static_cast<std::size_t>(c) * batch + b) * plane);
        }
    }
    const T* current = act.data();
    int channels = arch_.channels;
    int h = arch_.height;
    int w = arch_.width;
    for (std::size_t l = 0; l < arch_.convs.size(); ++l) {
        const auto& c = arch_.convs[l];
        const int oh = conv_out(h, c);
        const int ow = conv_out(w, c);
        const std::size_t rows = static_cast<std::size_t>(channels) * c.kernel * c.kernel;
        const std::size_t cols = batch * oh * ow;
        Buffer<T> col(rows * cols);
        im2col(current, channels, batch, h, w, c, oh, ow, col.data());

        const auto& weight = params_[lay.conv_w(l)];
        const auto& bias = params_[lay.conv_w(l) + 1];
        Buffer<T> out(static_cast<std::size_t>(c.out_channels) * cols);
        MapT<T> z(out.data(), c.out_channels, static_cast<Eigen::Index>(cols));
        z.noalias() = ConstMapT<T>(weight.values.data(), c.out_channels, static_cast<Eigen::Index>(rows)) *
                      ConstMapT<T>(col.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
        for (int o = 0; o < c.out_channels; ++o) {
            z.row(o).array() = (z.row(o).array() + bias.values[o]).cwiseMax(T(0));
        }
        if (record) {
            pass.columns.push_back(std::move(col));
            pass.activations.push_back(std::move(out));
            current = pass.activations.back().data();
        } else {
            act = std::move(out);
            current = act.data();
        }
        channels = c.out_channels;
        h = oh;
        w = ow;
    }

    // Flatten to [B][C*H*W].
    const std::size_t feat_plane = static_cast<std::size_t>(h) * w;
    const std::size_t feat = static_cast<std::size_t>(channels) * feat_plane;
    MatT<T> dense(static_cast<Eigen::Index>(batch), static_cast<Eigen::Index>(feat));
    if (arch_.convs.empty()) {
        std::copy(input.begin(), input.end(), dense.data());
    } else {
        for (std::size_t b = 0; b < batch; ++b) {
            for (int c = 0; c < channels; ++c) {
                std::copy_n(current + (static_cast<std::size_t>(c) * batch + b) * feat_plane, feat_plane,
                            dense.data() + b * feat + c * feat_plane);
            }
        }
    }

    for (std::size_t l = 0; l < arch_.hidden.size(); ++l) {
        const auto& weight = params_[lay.fc_w(l)];
        const auto& bias = params_[lay.fc_w(l) + 1];
        const Eigen::Index out_dim = arch_.hidden[l];
        ConstMapT<T> wm(weight.values.data(), out_dim, dense.cols());
        MatT<T> next = dense * wm.transpose();
        next.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias.values.data(), out_dim);
        next = next.cwiseMax(T(0));
        if (record) {
            pass.dense_inputs.emplace_back(dense.data(), dense.data() + dense.size());
        }
        dense = std::move(next);
    }
    if (record) {
        pass.dense_inputs.emplace_back(dense.data(), dense.data() + dense.size());
    }

    for (std::size_t hd = 0; hd < arch_.heads.size(); ++hd) {
        const auto& weight = params_[lay.head_w(hd)];
        const auto& bias = params_[lay.head_w(hd) + 1];
        const Eigen::Index k = arch_.heads[hd];
        MatT<T> logits = dense * ConstMapT<T>(weight.values.data(), k, dense.cols()).transpose();
        logits.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias.values.data(), k);
        Matrix as_double = logits.template cast<double>();
        pass.probs.push_back(softmax(as_double));
        pass.logits.push_back(std::move(as_double));
    }
    return pass;
}

template <typename T>
ForwardPass<T> BasicClusterModel<T>::forward(const ImageBatch& images, bool record) const
{
    if (images.channels() != arch_.channels || images.height() != arch_.height || images.width() != arch_.width) {
        throw std::invalid_argument("forward: image dimensions do not match architecture");
    }
    if constexpr (std::is_same_v<T, float>) {
        return forward(images.values(), images.size(), record);
    } else {
        const auto v = images.values();
        std::vector<T> converted(v.begin(), v.end());
        return forward(std::span<const T>(converted), images.size(), record);
    }
}

template <typename T>
ProbBatch BasicClusterModel<T>::forward(const ImageBatch& images, std::size_t head) const
{
    if (head >= arch_.heads.size()) {
        throw std::out_of_range("forward: unknown head " + std::to_string(head));
    }
    auto pass = forward(images, false);
    return ProbBatch(std::move(pass.probs[head]));
}

template <typename T>
FeatureTaps BasicClusterModel<T>::features(const ImageBatch& images) const
{
    auto pass = forward(images, true);
    const auto batch = static_cast<Eigen::Index>(images.size());
    FeatureTaps taps;
    const auto& fc = pass.dense_inputs.back();
    taps.fc = ConstMapT<T>(fc.data(), batch, static_cast<Eigen::Index>(fc.size()) / batch).template cast<double>();
    if (arch_.convs.empty()) {
        const auto v = images.values();
        taps.conv = Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
                        v.data(), batch, static_cast<Eigen::Index>(images.image_size()))
                        .template cast<double>();
    } else {
        const auto& first_dense = pass.dense_inputs.front();
        taps.conv = ConstMapT<T>(first_dense.data(), batch, static_cast<Eigen::Index>(first_dense.size()) / batch)
                        .template cast<double>();
    }
    return taps;
}

template <typename T>
void BasicClusterModel<T>::backward(const ForwardPass<T>& pass, const std::vector<Matrix>& grad_logits,
                                    ParameterSet<T>* grads, std::vector<double>* input_grad) const
{
    const auto lay = layout_of(arch_);
    if (grad_logits.size() != arch_.heads.size()) {
        throw std::invalid_argument("backward: need one gradient slot per head");
    }
    if (pass.dense_inputs.size() != arch_.hidden.size() + 1) {
        throw std::invalid_argument("backward: forward pass was not recorded");
    }
    const auto batch = static_cast<Eigen::Index>(pass.batch);
    const auto& head_in = pass.dense_inputs.back();
    const auto head_dim = static_cast<Eigen::Index>(head_in.size()) / batch;
    ConstMapT<T> h_in(head_in.data(), batch, head_dim);

    auto accumulate = [&](std::size_t index, const MatT<T>& dw, const Eigen::Matrix<T, 1, Eigen::Dynamic>& db) {
        if (grads == nullptr) return;
        auto& gw = (*grads)[index].values;
        auto& gb = (*grads)[index + 1].values;
        MapT<T>(gw.data(), dw.rows(), dw.cols()) += dw;
        Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(gb.data(), db.cols()) += db;
    };

    MatT<T> dh = MatT<T>::Zero(batch, head_dim);
    for (std::size_t hd = 0; hd < arch_.heads.size(); ++hd) {
        const Matrix& g = grad_logits[hd];
        if (g.size() == 0) continue;
        const Eigen::Index k = arch_.heads[hd];
        if (g.rows() != batch || g.cols() != k) {
            throw std::invalid_argument("backward: gradient shape does not match head");
        }
        const MatT<T> gt = g.template cast<T>();
        const auto& weight = params_[lay.head_w(hd)];
        ConstMapT<T> wm(weight.values.data(), k, head_dim);
        accumulate(lay.head_w(hd), gt.transpose() * h_in, gt.colwise().sum());
        dh.noalias() += gt * wm;
    }

    for (std::size_t l = arch_.hidden.size(); l-- > 0;) {
        const auto& out = pass.dense_inputs[l + 1];
        const auto& in = pass.dense_inputs[l];
        const Eigen::Index out_dim = arch_.hidden[l];
        const Eigen::Index in_dim = static_cast<Eigen::Index>(in.size()) / batch;
        ConstMapT<T> out_m(out.data(), batch, out_dim);
        ConstMapT<T> in_m(in.data(), batch, in_dim);
        MatT<T> dz = (out_m.array() > T(0)).select(dh, T(0));
        const auto& weight = params_[lay.fc_w(l)];
        accumulate(lay.fc_w(l), dz.transpose() * in_m, dz.colwise().sum());
        dh = dz * ConstMapT<T>(weight.values.data(), out_dim, in_dim);
    }

    if (arch_.convs.empty()) {
        if (input_grad != nullptr) {
            input_grad->assign(dh.data(), dh.data() + dh.size());
            unnormalize_grad(*input_grad, pass.batch);
        }
        return;
    }

    // Unflatten [B][C*H*W] into channel-major [C][B][H][W].
    auto [h, w] = arch_.conv_output_hw(arch_.convs.size() - 1);
    int channels = arch_.convs.back().out_channels;
    std::size_t plane = static_cast<std::size_t>(h) * w;
    Buffer<T> da(static_cast<std::size_t>(channels) * pass.batch * plane);
    for (std::size_t b = 0; b < pass.batch; ++b) {
        for (int c = 0; c < channels; ++c) {
            std::copy_n(dh.data() + b * channels * plane + c * plane, plane,
                        da.data() + (static_cast<std::size_t>(c) * pass.batch + b) * plane);
        }
    }

    for (std::size_t l = arch_.convs.size(); l-- > 0;) {
        const auto& c = arch_.convs[l];
        const int in_channels = l == 0 ? arch_.channels : arch_.convs[l - 1].out_channels;
        const auto [in_h, in_w] = l == 0 ? std::pair{arch_.height, arch_.width} : arch_.conv_output_hw(l - 1);
        const auto [oh, ow] = arch_.conv_output_hw(l);
        const auto rows = static_cast<Eigen::Index>(in_channels) * c.kernel * c.kernel;
        const auto cols = static_cast<Eigen::Index>(pass.batch) * oh * ow;

        ConstMapT<T> act(pass.activations[l].data(), c.out_channels, cols);
        MapT<T> dz(da.data(), c.out_channels, cols);
        dz = (act.array() > T(0)).select(dz, T(0));
        ConstMapT<T> col(pass.columns[l].data(), rows, cols);
        const auto& weight = params_[lay.conv_w(l)];
        ConstMapT<T> wm(weight.values.data(), c.out_channels, rows);
        accumulate(lay.conv_w(l), dz * col.transpose(), dz.rowwise().sum().transpose());

        if (l == 0 && input_grad == nullptr) break;
        MatT<T> dcol = wm.transpose() * dz;
        Buffer<T> prev(static_cast<std::size_t>(in_channels) * pass.batch * in_h * in_w);
        col2im(dcol.data(), in_channels, pass.batch, in_h, in_w, c, oh, ow, prev.data());
        da = std::move(prev);
    }

    if (input_grad != nullptr) {
        plane = static_cast<std::size_t>(arch_.height) * arch_.width;
        input_grad->resize(pass.batch * arch_.input_size());
        for (std::size_t b = 0; b < pass.batch; ++b) {
            for (int c = 0; c < arch_.channels; ++c) {
                const T* src = da.data() + (static_cast<std::size_t>(c) * pass.batch + b) * plane;
                std::copy_n(src, plane, input_grad->data() + (b * arch_.channels + c) * plane);
            }
        }
        unnormalize_grad(*input_grad, pass.batch);
    }
}

template <typename T>
void BasicClusterModel<T>::unnormalize_grad(std::vector<double>& grad, std::size_t batch) const
{
    if (arch_.input_std.empty()) return;
    const std::size_t plane = static_cast<std::size_t>(arch_.height) * arch_.width;
    for (std::size_t b = 0; b < batch; ++b) {
        for (int c = 0; c < arch_.channels; ++c) {
            const double inv = 1.0 / arch_.input_std[static_cast<std::size_t>(c)];
            double* g = grad.data() + (b * arch_.channels + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) g[i] *= inv;
        }
    }
}

template <typename T>
ParameterSet<T> BasicClusterModel<T>::grad(const ImageBatch& images,
                                           const std::function<HeadObjective(const std::vector<Matrix>&)>& loss,
                                           double* loss_value) const
{
    auto pass = forward(images, true);
    const auto objective = loss(pass.probs);
    if (!std::isfinite(objective.value)) {
        throw std::runtime_error("grad: non-finite loss");
    }
    if (objective.grad_probs.size() != pass.probs.size()) {
        throw std::invalid_argument("grad: loss must return one gradient slot per head");
    }
    std::vector<Matrix> grad_logits(pass.probs.size());
    for (std::size_t h = 0; h < pass.probs.size(); ++h) {
        if (objective.grad_probs[h].size() == 0) continue;
        grad_logits[h] = softmax_backward(pass.probs[h], objective.grad_probs[h]);
        if (!all_finite(grad_logits[h])) {
            throw std::runtime_error("grad: non-finite gradient");
        }
    }
    auto grads = zeros_like(params_);
    backward(pass, grad_logits, &grads, nullptr);
    if (loss_value != nullptr) {
        *loss_value = objective.value;
    }
    return grads;
}

template <typename T>
BasicClusterModel<T> BasicClusterModel<T>::with_new_heads(const std::vector<int>& heads, int classes,
                                                          std::uint64_t seed) const
{
    Architecture arch = arch_;
    arch.heads = heads;
    arch.classes = classes;
    arch.validate();
    const auto lay = layout_of(arch_);
    ParameterSet<T> params(params_.begin(), params_.begin() + static_cast<std::ptrdiff_t>(lay.head_w(0)));
    std::mt19937_64 rng(seed);
    const int fan_in = static_cast<int>(arch.fc_feature_size());
    for (std::size_t h = 0; h < heads.size(); ++h) {
        push_head(params, h, heads[h], fan_in, rng);
    }
    return BasicClusterModel(std::move(arch), std::move(params));
}

template class BasicClusterModel<float>;
template class BasicClusterModel<double>;

// ---------------------------------------------------------------------------
// Adam

void to_json(nlohmann::json& j, const AdamConfig& c)
{
    j = {{"learning_rate", c.learning_rate}, {"beta1", c.beta1}, {"beta2", c.beta2}, {"epsilon", c.epsilon}};
}

void from_json(const nlohmann::json& j, AdamConfig& c)
{
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.epsilon = j.value("epsilon", c.epsilon);
}

template <typename T>
Adam<T>::Adam(AdamConfig config, const ParameterSet<T>& like)
    : config_(config), m_(zeros_like(like)), v_(zeros_like(like))
{
}

template <typename T>
void Adam<T>::step(BasicClusterModel<T>& model, const ParameterSet<T>& grads)
{
    auto& params = model.parameters();
    if (grads.size() != params.size() || m_.size() != params.size()) {
        throw std::invalid_argument("adam: gradient layout does not match parameters");
    }
    ++steps_;
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
    const double lr = config_.learning_rate;
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i].values;
        const auto& g = grads[i].values;
        auto& m = m_[i].values;
        auto& v = v_[i].values;
        if (g.size() != p.size()) {
            throw std::invalid_argument("adam: shape mismatch for '" + params[i].name + "'");
        }
        for (std::size_t k = 0; k < p.size(); ++k) {
            const double gk = g[k];
            m[k] = static_cast<T>(config_.beta1 * m[k] + (1.0 - config_.beta1) * gk);
            v[k] = static_cast<T>(config_.beta2 * v[k] + (1.0 - config_.beta2) * gk * gk);
            const double m_hat = m[k] / c1;
            const double v_hat = v[k] / c2;
            p[k] = static_cast<T>(p[k] - lr * m_hat / (std::sqrt(v_hat) + config_.epsilon));
        }
    }
}

template <typename T>
void Adam<T>::restore(std::int64_t steps, ParameterSet<T> m, ParameterSet<T> v)
{
    if (m.size() != m_.size() || v.size() != v_.size()) {
        throw std::invalid_argument("adam: restored state does not match parameters");
    }
    steps_ = steps;
    m_ = std::move(m);
    v_ = std::move(v);
}

template class Adam<float>;
template class Adam<double>;

// ---------------------------------------------------------------------------
// Checkpoint

namespace {

constexpr char kMagic[8] = {'I', 'C', 'L', 'U', 'S', 'T', 'C', 'K'};

void put_u32(std::ostream& out, std::uint32_t v)
{
    const unsigned char bytes[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                    static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(bytes), 4);
}

std::uint32_t get_u32(std::istream& in)
{
    unsigned char bytes[4];
    if (!in.read(reinterpret_cast<char*>(bytes), 4)) {
        throw std::runtime_error("checkpoint: truncated file");
    }
    return static_cast<std::uint32_t>(bytes[0]) | (static_cast<std::uint32_t>(bytes[1]) << 8) |
           (static_cast<std::uint32_t>(bytes[2]) << 16) | (static_cast<std::uint32_t>(bytes[3]) << 24);
}

void put_string(std::ostream& out, const std::string& s)
{
    put_u32(out, static_cast<std::uint32_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& in)
{
    const auto n = get_u32(in);
    std::string s(n, '\0');
    if (!in.read(s.data(), n)) {
        throw std::runtime_error("checkpoint: truncated file");
    }
    return s;
}

void put_tensor(std::ostream& out, const std::string& name, const Tensor<float>& t)
{
    put_string(out, name);
    put_u32(out, static_cast<std::uint32_t>(t.shape.size()));
    for (int d : t.shape) {
        put_u32(out, static_cast<std::uint32_t>(d));
    }
    for (float v : t.values) {
        put_u32(out, std::bit_cast<std::uint32_t>(v));
    }
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint)
{
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw std::runtime_error("checkpoint: cannot write " + tmp);
        }
        out.write(kMagic, sizeof(kMagic));
        put_u32(out, kCheckpointVersion);
        nlohmann::json descriptor{{"architecture", checkpoint.model.architecture()},
                                  {"metadata", checkpoint.metadata}};
        put_string(out, descriptor.dump());

        std::size_t count = checkpoint.model.parameters().size();
        for (const auto& [group, tensors] : checkpoint.extras) {
            count += tensors.size();
        }
        put_u32(out, static_cast<std::uint32_t>(count));
        for (const auto& t : checkpoint.model.parameters()) {
            put_tensor(out, t.name, t);
        }
        for (const auto& [group, tensors] : checkpoint.extras) {
            for (const auto& t : tensors) {
                put_tensor(out, group + "/" + t.name, t);
            }
        }
        if (!out) {
            throw std::runtime_error("checkpoint: write failed for " + tmp);
        }
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("checkpoint: cannot open " + path.string());
    }
    char magic[8];
    if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw std::runtime_error("checkpoint: bad magic in " + path.string());
    }
    const auto version = get_u32(in);
    if (version != kCheckpointVersion) {
        throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
    }
    const auto descriptor = nlohmann::json::parse(get_string(in));
    const auto arch = descriptor.at("architecture").get<Architecture>();

    Checkpoint cp;
    cp.metadata = descriptor.value("metadata", nlohmann::json::object());
    ParameterSet<float> params;
    const auto count = get_u32(in);
    for (std::uint32_t i = 0; i < count; ++i) {
        Tensor<float> t;
        auto name = get_string(in);
        const auto rank = get_u32(in);
        for (std::uint32_t r = 0; r < rank; ++r) {
            t.shape.push_back(static_cast<int>(get_u32(in)));
        }
        t.values.resize(product(t.shape));
        for (auto& v : t.values) {
            v = std::bit_cast<float>(get_u32(in));
        }
        const auto slash = name.find('/');
        if (slash == std::string::npos) {
            t.name = std::move(name);
            params.push_back(std::move(t));
        } else {
            t.name = name.substr(slash + 1);
            cp.extras[name.substr(0, slash)].push_back(std::move(t));
        }
    }
    cp.model = ClusterModel(arch, std::move(params));
    return cp;
}

}  // namespace infoclust
