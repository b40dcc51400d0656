// Input transformations T(X): geometric augmentation, weak crops, mixup and
// (information-based) virtual adversarial perturbations.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "infoclust/core_math.hpp"
#include "infoclust/image.hpp"
#include "infoclust/model.hpp"

namespace infoclust {

enum class TransformKind { identity, geometric, weak_geometric, mixup, vat, ivat };

std::string to_string(TransformKind kind);
TransformKind transform_kind_from_string(const std::string& name);

struct GeometricParams {
    double crop_min = 0.6;  ///< crop side as a fraction of the image side
    double crop_max = 1.0;
    double flip_probability = 0.5;
    double brightness = 0.125;  ///< additive shift drawn from [-b, b]
    double contrast = 0.125;    ///< gain drawn from [1 - c, 1 + c]
};

struct TransformSpec {
    TransformKind kind = TransformKind::identity;
    GeometricParams geometric;
    int margin = 2;            ///< weak_geometric crop margin in pixels
    double beta_shape = 0.5;   ///< mixup: alpha ~ Beta(a, a)
    double epsilon = 2.5;      ///< vat/ivat: L2 radius of the perturbation
    int power_iterations = 1;
    double xi = 0.0;           ///< probe radius; <= 0 selects 1e-6 * sqrt(input size)
    /// Name of another transform whose output this one is applied to.
    /// Empty means the untransformed batch.
    std::string source;

    /// Throws std::invalid_argument when a parameter is invalid for `kind`.
    void validate() const;
};

void to_json(nlohmann::json& j, const TransformSpec& spec);
void from_json(const nlohmann::json& j, TransformSpec& spec);

/// splitmix64 finalizer over (seed, stream): per-sample random streams that
/// do not depend on evaluation order.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

/// Random crop, resize back to H x W, horizontal flip and brightness/contrast
/// jitter, drawn independently per sample. Output is clamped to [0, 1].
ImageBatch geometric(const ImageBatch& batch, const TransformSpec& spec, std::uint64_t seed);

/// Random (H - m) x (W - m) crop resized back to H x W.
ImageBatch weak_geometric(const ImageBatch& batch, const TransformSpec& spec, std::uint64_t seed);

struct MixupPair {
    ImageBatch mixed_input;
    std::vector<std::size_t> partner_indices;
    std::vector<double> alphas;
};

/// Pairs every sample with a random partner (a permutation; self-pairs
/// allowed) and mixes with alpha ~ Beta(a, a).
MixupPair mixup(const ImageBatch& batch, const TransformSpec& spec, std::uint64_t seed);

/// Deterministic mixing with caller-chosen partners and coefficients.
MixupPair mixup_with(const ImageBatch& batch, std::vector<std::size_t> partners, std::vector<double> alphas);

/// Row b becomes alpha_b * p_b + (1 - alpha_b) * p_partner(b).
ProbBatch mixup_output(const ProbBatch& posteriors, const MixupPair& pair);
Matrix mix_rows(const Matrix& rows, const MixupPair& pair);
/// Adjoint of mix_rows: gradient with respect to the unmixed rows.
Matrix mix_rows_backward(const Matrix& grad_mixed, const MixupPair& pair);

enum class Divergence { kl, neg_mi };

/// The divergence a VAT-family transform attacks: KL for vat, -MI(Y, Y~) for ivat.
Divergence divergence_for(TransformKind kind);

struct AdversarialBatch {
    ImageBatch images;           ///< clamp(x + r)
    std::vector<double> offsets; ///< r before clamping, B x (C*H*W)
};

/// Power-iteration estimate of the radius-epsilon perturbation that maximizes
/// the divergence between p(y|x) and p(y|x + r), averaged over all heads.
/// Model parameters are read only.
template <typename T>
AdversarialBatch vat_perturbation(const BasicClusterModel<T>& model, const ImageBatch& batch,
                                  const TransformSpec& spec, Divergence divergence, std::uint64_t seed,
                                  bool symmetrize_joint = true);

/// Identity, geometric or weak_geometric applied by kind.
ImageBatch apply_image_transform(const ImageBatch& batch, const TransformSpec& spec, std::uint64_t seed);

extern template AdversarialBatch vat_perturbation<float>(const BasicClusterModel<float>&, const ImageBatch&,
                                                         const TransformSpec&, Divergence, std::uint64_t, bool);
extern template AdversarialBatch vat_perturbation<double>(const BasicClusterModel<double>&, const ImageBatch&,
                                                          const TransformSpec&, Divergence, std::uint64_t, bool);

}  // namespace infoclust
