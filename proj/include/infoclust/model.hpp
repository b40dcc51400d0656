// Convolutional encoder with one or more softmax heads, manual backprop,
// adaptive-moment optimizer and the binary checkpoint container.
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "infoclust/core_math.hpp"
#include "infoclust/image.hpp"

namespace infoclust {

struct ConvLayerSpec {
    int out_channels = 32;
    int kernel = 3;
    int stride = 2;
    int padding = 1;
};

/// Layer sizes of a ClusterModel. Heads whose width equals `classes` are
/// primary heads; any other width is an over-clustering head.
struct Architecture {
    int channels = 1;
    int height = 28;
    int width = 28;
    std::vector<ConvLayerSpec> convs;
    std::vector<int> hidden;
    std::vector<int> heads;
    int classes = 10;
    /// Optional per-channel standardization applied to the input,
    /// (x - mean) / std. Empty means the raw [0, 1] pixels are used.
    std::vector<float> input_mean;
    std::vector<float> input_std;

    /// 2 conv layers (32, 64 channels, 3x3, stride 2), one 128-wide hidden
    /// layer and `primary_heads` + `overcluster_heads` heads.
    static Architecture desk_default(int channels, int height, int width, int classes,
                                     int primary_heads = 1, int overcluster_heads = 0,
                                     int overcluster_width = 50);

    /// Throws std::invalid_argument on inconsistent dimensions.
    void validate() const;

    [[nodiscard]] std::size_t input_size() const;
    [[nodiscard]] bool is_primary(std::size_t head) const;
    [[nodiscard]] std::vector<std::size_t> primary_heads() const;

    /// Spatial size of the activation after conv layer `layer`.
    [[nodiscard]] std::pair<int, int> conv_output_hw(std::size_t layer) const;
    [[nodiscard]] std::size_t conv_feature_size() const;
    [[nodiscard]] std::size_t fc_feature_size() const;

    friend bool operator==(const Architecture&, const Architecture&) = default;
};

bool operator==(const ConvLayerSpec& a, const ConvLayerSpec& b);

void to_json(nlohmann::json& j, const Architecture& arch);
void from_json(const nlohmann::json& j, Architecture& arch);

/// Aligned allocator that default-initializes, so sized construction of a
/// float buffer does not zero it.
template <typename T>
struct BufferAllocator : Eigen::aligned_allocator<T> {
    using Eigen::aligned_allocator<T>::aligned_allocator;
    template <typename U>
    struct rebind {
        using other = BufferAllocator<U>;
    };
    template <typename U>
    void construct(U* p) noexcept(std::is_nothrow_default_constructible_v<U>)
    {
        ::new (static_cast<void*>(p)) U;
    }
    template <typename U, typename... Args>
    void construct(U* p, Args&&... args)
    {
        ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
    }
};

/// Heap buffer aligned for the widest SIMD packet, which keeps Eigen's
/// reduction order independent of the allocation address. Sized
/// construction leaves the contents uninitialized.
template <typename T>
using Buffer = std::vector<T, BufferAllocator<T>>;

template <typename T>
struct Tensor {
    std::string name;
    std::vector<int> shape;
    Buffer<T> values;
};

/// Ordered list of named tensors. Gradients and optimizer moments use the same
/// layout as the parameters they belong to.
template <typename T>
using ParameterSet = std::vector<Tensor<T>>;

template <typename T>
ParameterSet<T> zeros_like(const ParameterSet<T>& params);

/// Penultimate activations exposed for the linear probe.
struct FeatureTaps {
    Matrix conv;  ///< flattened output of the last conv layer
    Matrix fc;    ///< output of the last hidden layer (pre-head)
};

/// Intermediate values of one forward pass. Needed by backward().
template <typename T>
struct ForwardPass {
    std::size_t batch = 0;
    std::vector<Buffer<T>> columns;      ///< im2col buffer per conv layer
    std::vector<Buffer<T>> activations;  ///< post-ReLU conv outputs, channel-major
    std::vector<Buffer<T>> dense_inputs; ///< input to each hidden layer, then to the heads
    std::vector<Matrix> logits;
    std::vector<Matrix> probs;
};

/// What a loss closure hands back to grad(): its value and d(loss)/d(probs)
/// per head. An empty matrix means the head does not contribute.
struct HeadObjective {
    double value = 0.0;
    std::vector<Matrix> grad_probs;
};

template <typename T>
class BasicClusterModel {
public:
    using Scalar = T;

    BasicClusterModel() = default;

    /// Fan-in scaled uniform initialization; deterministic given `seed`.
    static BasicClusterModel init(const Architecture& arch, std::uint64_t seed);

    /// Wraps existing parameters after checking they match `arch`.
    BasicClusterModel(Architecture arch, ParameterSet<T> params);

    [[nodiscard]] const Architecture& architecture() const { return arch_; }
    [[nodiscard]] const ParameterSet<T>& parameters() const { return params_; }
    [[nodiscard]] ParameterSet<T>& parameters() { return params_; }
    [[nodiscard]] Tensor<T>& parameter(const std::string& name);
    [[nodiscard]] const Tensor<T>& parameter(const std::string& name) const;
    [[nodiscard]] std::size_t head_count() const { return arch_.heads.size(); }

    /// Evaluates all heads. `input` holds `batch` images in C x H x W order.
    /// With `record` the pass keeps what backward() needs.
    ForwardPass<T> forward(std::span<const T> input, std::size_t batch, bool record) const;
    ForwardPass<T> forward(const ImageBatch& images, bool record = false) const;

    /// Posterior of a single head.
    ProbBatch forward(const ImageBatch& images, std::size_t head) const;

    FeatureTaps features(const ImageBatch& images) const;

    /// Accumulates parameter gradients into `grads` (if non-null) and writes
    /// d(loss)/d(input) into `input_grad` (if non-null). `grad_logits` holds
    /// one matrix per head; empty matrices are skipped.
    void backward(const ForwardPass<T>& pass, const std::vector<Matrix>& grad_logits,
                  ParameterSet<T>* grads, std::vector<double>* input_grad) const;

    /// Gradient of a loss evaluated on the forward outputs of `images`.
    /// Throws std::runtime_error on a non-finite loss or gradient.
    ParameterSet<T> grad(const ImageBatch& images,
                         const std::function<HeadObjective(const std::vector<Matrix>&)>& loss,
                         double* loss_value = nullptr) const;

    /// Copy of the model with fresh heads of the given widths; the encoder is kept.
    BasicClusterModel with_new_heads(const std::vector<int>& heads, int classes, std::uint64_t seed) const;

    template <typename U>
    BasicClusterModel<U> cast() const
    {
        ParameterSet<U> out;
        out.reserve(params_.size());
        for (const auto& t : params_) {
            out.push_back({t.name, t.shape, Buffer<U>(t.values.begin(), t.values.end())});
        }
        return BasicClusterModel<U>(arch_, std::move(out));
    }

private:
    void unnormalize_grad(std::vector<double>& grad, std::size_t batch) const;

    Architecture arch_;
    ParameterSet<T> params_;
};

using ClusterModel = BasicClusterModel<float>;

struct AdamConfig {
    double learning_rate = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

void to_json(nlohmann::json& j, const AdamConfig& c);
void from_json(const nlohmann::json& j, AdamConfig& c);

template <typename T>
class Adam {
public:
    Adam() = default;
    Adam(AdamConfig config, const ParameterSet<T>& like);

    /// One adaptive-moment update. Throws on shape mismatch.
    void step(BasicClusterModel<T>& model, const ParameterSet<T>& grads);

    [[nodiscard]] const AdamConfig& config() const { return config_; }
    [[nodiscard]] std::int64_t steps() const { return steps_; }
    [[nodiscard]] const ParameterSet<T>& first_moment() const { return m_; }
    [[nodiscard]] const ParameterSet<T>& second_moment() const { return v_; }

    void restore(std::int64_t steps, ParameterSet<T> m, ParameterSet<T> v);

private:
    AdamConfig config_;
    std::int64_t steps_ = 0;
    ParameterSet<T> m_;
    ParameterSet<T> v_;
};

// ---------------------------------------------------------------------------
// Checkpoint container
//
//   bytes 0..7   magic "ICLUSTCK"
//   u32          format version (1)
//   u32 + bytes  descriptor JSON: {"architecture": ..., "metadata": ...}
//   u32          tensor count
//   per tensor:  u32 name length, name, u32 rank, rank x u32 dims,
//                prod(dims) x f32 values
//
// All integers and floats are little-endian.

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    ClusterModel model;
    nlohmann::json metadata = nlohmann::json::object();
    /// Extra tensor groups stored alongside the model (e.g. optimizer moments).
    std::map<std::string, ParameterSet<float>> extras;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

extern template class BasicClusterModel<float>;
extern template class BasicClusterModel<double>;
extern template class Adam<float>;
extern template class Adam<double>;

}  // namespace infoclust
