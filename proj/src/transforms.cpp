#include "infoclust/transforms.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

namespace infoclust {

namespace {

double uniform01(std::mt19937_64& rng) { return std::generate_canonical<double, 53>(rng); }

double draw(std::mt19937_64& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

int draw_int(std::mt19937_64& rng, int lo, int hi)
{
    // inclusive range; consumes one draw even when lo == hi
    const double u = uniform01(rng);
    return std::min(hi, lo + static_cast<int>(u * (hi - lo + 1)));
}

/// Bilinear resample of the crop [y0, y0+ch) x [x0, x0+cw) to the full image size.
void resize_crop(std::span<const float> src, std::span<float> dst, int channels, int h, int w, int y0, int x0,
                 int ch, int cw, bool flip)
{
    const double sy_scale = static_cast<double>(ch) / h;
    const double sx_scale = static_cast<double>(cw) / w;
    for (int c = 0; c < channels; ++c) {
        const float* plane = src.data() + static_cast<std::size_t>(c) * h * w;
        float* out = dst.data() + static_cast<std::size_t>(c) * h * w;
        for (int y = 0; y < h; ++y) {
            const double sy = std::clamp(y0 + (y + 0.5) * sy_scale - 0.5, double(y0), double(y0 + ch - 1));
            const int iy = static_cast<int>(std::floor(sy));
            const int iy1 = std::min(iy + 1, y0 + ch - 1);
            const double fy = sy - iy;
            for (int x = 0; x < w; ++x) {
                const int xs = flip ? w - 1 - x : x;
                const double sx = std::clamp(x0 + (xs + 0.5) * sx_scale - 0.5, double(x0), double(x0 + cw - 1));
                const int ix = static_cast<int>(std::floor(sx));
                const int ix1 = std::min(ix + 1, x0 + cw - 1);
                const double fx = sx - ix;
                double v = plane[iy * w + ix];
                if (fy > 0.0 || fx > 0.0) {
                    v = (1 - fy) * ((1 - fx) * plane[iy * w + ix] + fx * plane[iy * w + ix1]) +
                        fy * ((1 - fx) * plane[iy1 * w + ix] + fx * plane[iy1 * w + ix1]);
                }
                out[y * w + x] = static_cast<float>(v);
            }
        }
    }
}

}  // namespace

std::string to_string(TransformKind kind)
{
    switch (kind) {
    case TransformKind::identity: return "identity";
    case TransformKind::geometric: return "geometric";
    case TransformKind::weak_geometric: return "weak_geometric";
    case TransformKind::mixup: return "mixup";
    case TransformKind::vat: return "vat";
    case TransformKind::ivat: return "ivat";
    }
    return "?";
}

TransformKind transform_kind_from_string(const std::string& name)
{
    for (auto k : {TransformKind::identity, TransformKind::geometric, TransformKind::weak_geometric,
                   TransformKind::mixup, TransformKind::vat, TransformKind::ivat}) {
        if (to_string(k) == name) return k;
    }
    throw std::invalid_argument("unknown transform kind '" + name + "'");
}

void TransformSpec::validate() const
{
    switch (kind) {
    case TransformKind::identity: break;
    case TransformKind::geometric: {
        const auto& g = geometric;
        if (!(g.crop_min > 0.0) || g.crop_min > g.crop_max) {
            throw std::invalid_argument("geometric: need 0 < crop_min <= crop_max");
        }
        if (g.crop_max > 1.0) {
            throw std::invalid_argument("geometric: crop larger than image");
        }
        if (g.flip_probability < 0.0 || g.flip_probability > 1.0) {
            throw std::invalid_argument("geometric: flip probability outside [0, 1]");
        }
        if (g.brightness < 0.0 || g.contrast < 0.0 || g.contrast > 1.0) {
            throw std::invalid_argument("geometric: invalid jitter range");
        }
        break;
    }
    case TransformKind::weak_geometric:
        if (margin < 0) {
            throw std::invalid_argument("weak_geometric: negative margin");
        }
        break;
    case TransformKind::mixup:
        if (!(beta_shape > 0.0) || !std::isfinite(beta_shape)) {
            throw std::invalid_argument("mixup: beta shape must be positive");
        }
        break;
    case TransformKind::vat:
    case TransformKind::ivat:
        if (!std::isfinite(epsilon) || epsilon < 0.0) {
            throw std::invalid_argument("vat: epsilon must be finite and >= 0");
        }
        if (power_iterations < 1) {
            throw std::invalid_argument("vat: power_iterations must be >= 1");
        }
        if (!std::isfinite(xi)) {
            throw std::invalid_argument("vat: xi must be finite");
        }
        break;
    }
}

void to_json(nlohmann::json& j, const TransformSpec& spec)
{
    j = nlohmann::json{{"kind", to_string(spec.kind)}};
    switch (spec.kind) {
    case TransformKind::geometric:
        j["crop_min"] = spec.geometric.crop_min;
        j["crop_max"] = spec.geometric.crop_max;
        j["flip_probability"] = spec.geometric.flip_probability;
        j["brightness"] = spec.geometric.brightness;
        j["contrast"] = spec.geometric.contrast;
        break;
    case TransformKind::weak_geometric: j["margin"] = spec.margin; break;
    case TransformKind::mixup: j["beta_shape"] = spec.beta_shape; break;
    case TransformKind::vat:
    case TransformKind::ivat:
        j["epsilon"] = spec.epsilon;
        j["power_iterations"] = spec.power_iterations;
        j["xi"] = spec.xi;
        break;
    case TransformKind::identity: break;
    }
    if (!spec.source.empty()) {
        j["source"] = spec.source;
    }
}

void from_json(const nlohmann::json& j, TransformSpec& spec)
{
    static const std::vector<std::string> known{"kind",   "crop_min", "crop_max",         "flip_probability",
                                                "brightness", "contrast", "margin",       "beta_shape",
                                                "epsilon", "power_iterations", "xi",      "source"};
    for (const auto& [key, value] : j.items()) {
        if (std::find(known.begin(), known.end(), key) == known.end()) {
            throw std::invalid_argument("transform: unknown field '" + key + "'");
        }
    }
    spec = TransformSpec{};
    spec.kind = transform_kind_from_string(j.at("kind").get<std::string>());
    auto& g = spec.geometric;
    g.crop_min = j.value("crop_min", g.crop_min);
    g.crop_max = j.value("crop_max", g.crop_max);
    g.flip_probability = j.value("flip_probability", g.flip_probability);
    g.brightness = j.value("brightness", g.brightness);
    g.contrast = j.value("contrast", g.contrast);
    spec.margin = j.value("margin", spec.margin);
    spec.beta_shape = j.value("beta_shape", spec.beta_shape);
    spec.epsilon = j.value("epsilon", spec.epsilon);
    spec.power_iterations = j.value("power_iterations", spec.power_iterations);
    spec.xi = j.value("xi", spec.xi);
    spec.source = j.value("source", std::string{});
    spec.validate();
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream)
{
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

ImageBatch geometric(const ImageBatch& batch, const TransformSpec& spec, std::uint64_t seed)
{
    if (spec.kind != TransformKind::geometric) {
        throw std::invalid_argument("geometric: spec kind is " + to_string(spec.kind));
    }
    spec.validate();
    const auto& g = spec.geometric;
    const int h = batch.height();
    const int w = batch.width();
    ImageBatch out(batch.size(), batch.channels(), h, w);
    for (std::size_t b = 0; b < batch.size(); ++b) {
        std::mt19937_64 rng(mix_seed(seed, b));
        const double scale = draw(rng, g.crop_min, g.crop_max);
        const int ch = std::clamp(static_cast<int>(std::lround(scale * h)), 1, h);
        const int cw = std::clamp(static_cast<int>(std::lround(scale * w)), 1, w);
        const int y0 = draw_int(rng, 0, h - ch);
        const int x0 = draw_int(rng, 0, w - cw);
        const bool flip = uniform01(rng) < g.flip_probability;
        const double shift = draw(rng, -g.brightness, g.brightness);
        const double gain = draw(rng, 1.0 - g.contrast, 1.0 + g.contrast);

        auto dst = out.image(b);
        resize_crop(batch.image(b), dst, batch.channels(), h, w, y0, x0, ch, cw, flip);
        const double mean = std::accumulate(dst.begin(), dst.end(), 0.0) / static_cast<double>(dst.size());
        for (auto& v : dst) {
            v = static_cast<float>(std::clamp(v * gain + mean * (1.0 - gain) + shift, 0.0, 1.0));
        }
    }
    return out;
}

ImageBatch weak_geometric(const ImageBatch& batch, const TransformSpec& spec, std::uint64_t seed)
{
    if (spec.kind != TransformKind::weak_geometric) {
        throw std::invalid_argument("weak_geometric: spec kind is " + to_string(spec.kind));
    }
    spec.validate();
    const int h = batch.height();
    const int w = batch.width();
    if (spec.margin >= std::min(h, w)) {
        throw std::invalid_argument("weak_geometric: margin must be smaller than the image");
    }
    ImageBatch out(batch.size(), batch.channels(), h, w);
    for (std::size_t b = 0; b < batch.size(); ++b) {
        std::mt19937_64 rng(mix_seed(seed, b));
        const int y0 = draw_int(rng, 0, spec.margin);
        const int x0 = draw_int(rng, 0, spec.margin);
        resize_crop(batch.image(b), out.image(b), batch.channels(), h, w, y0, x0, h - spec.margin, w - spec.margin,
                    false);
    }
    return out;
}

ImageBatch apply_image_transform(const ImageBatch& batch, const TransformSpec& spec, std::uint64_t seed)
{
    switch (spec.kind) {
    case TransformKind::identity: return batch;
    case TransformKind::geometric: return geometric(batch, spec, seed);
    case TransformKind::weak_geometric: return weak_geometric(batch, spec, seed);
    default: throw std::invalid_argument("apply_image_transform: " + to_string(spec.kind) + " is not an image map");
    }
}

MixupPair mixup(const ImageBatch& batch, const TransformSpec& spec, std::uint64_t seed)
{
    if (spec.kind != TransformKind::mixup) {
        throw std::invalid_argument("mixup: spec kind is " + to_string(spec.kind));
    }
    spec.validate();
    if (batch.size() < 2) {
        throw std::invalid_argument("mixup: need at least 2 samples");
    }
    std::mt19937_64 rng(seed);
    std::vector<std::size_t> partners(batch.size());
    std::iota(partners.begin(), partners.end(), std::size_t{0});
    // Fisher-Yates with our own draws so the permutation is library independent.
    for (std::size_t i = partners.size() - 1; i > 0; --i) {
        const auto j = static_cast<std::size_t>(draw_int(rng, 0, static_cast<int>(i)));
        std::swap(partners[i], partners[j]);
    }
    std::gamma_distribution<double> gamma(spec.beta_shape, 1.0);
    std::vector<double> alphas(batch.size());
    for (auto& a : alphas) {
        const double x = gamma(rng);
        const double y = gamma(rng);
        a = (x + y) > 0.0 ? x / (x + y) : 0.5;
    }
    return mixup_with(batch, std::move(partners), std::move(alphas));
}

MixupPair mixup_with(const ImageBatch& batch, std::vector<std::size_t> partners, std::vector<double> alphas)
{
    if (partners.size() != batch.size() || alphas.size() != batch.size()) {
        throw std::invalid_argument("mixup: partner/alpha count does not match batch");
    }
    MixupPair pair{ImageBatch(batch.size(), batch.channels(), batch.height(), batch.width()), std::move(partners),
                   std::move(alphas)};
    for (std::size_t b = 0; b < batch.size(); ++b) {
        const double a = pair.alphas[b];
        if (!(a >= 0.0 && a <= 1.0)) {
            throw std::invalid_argument("mixup: alpha outside [0, 1]");
        }
        if (pair.partner_indices[b] >= batch.size()) {
            throw std::invalid_argument("mixup: partner index out of range");
        }
        const auto x1 = batch.image(b);
        const auto x2 = batch.image(pair.partner_indices[b]);
        auto dst = pair.mixed_input.image(b);
        for (std::size_t i = 0; i < dst.size(); ++i) {
            dst[i] = static_cast<float>(std::clamp(a * x1[i] + (1.0 - a) * x2[i], 0.0, 1.0));
        }
    }
    return pair;
}

Matrix mix_rows(const Matrix& rows, const MixupPair& pair)
{
    if (static_cast<std::size_t>(rows.rows()) != pair.alphas.size()) {
        throw std::invalid_argument("mixup_output: row count does not match the mixup pair");
    }
    Matrix out(rows.rows(), rows.cols());
    for (Eigen::Index b = 0; b < rows.rows(); ++b) {
        const double a = pair.alphas[static_cast<std::size_t>(b)];
        out.row(b) = a * rows.row(b) + (1.0 - a) * rows.row(static_cast<Eigen::Index>(pair.partner_indices[b]));
    }
    return out;
}

Matrix mix_rows_backward(const Matrix& grad_mixed, const MixupPair& pair)
{
    Matrix out = Matrix::Zero(grad_mixed.rows(), grad_mixed.cols());
    for (Eigen::Index b = 0; b < grad_mixed.rows(); ++b) {
        const double a = pair.alphas[static_cast<std::size_t>(b)];
        out.row(b) += a * grad_mixed.row(b);
        out.row(static_cast<Eigen::Index>(pair.partner_indices[b])) += (1.0 - a) * grad_mixed.row(b);
    }
    return out;
}

ProbBatch mixup_output(const ProbBatch& posteriors, const MixupPair& pair)
{
    return ProbBatch(mix_rows(posteriors.matrix(), pair));
}

Divergence divergence_for(TransformKind kind)
{
    if (kind == TransformKind::vat) return Divergence::kl;
    if (kind == TransformKind::ivat) return Divergence::neg_mi;
    throw std::invalid_argument("divergence_for: " + to_string(kind) + " is not adversarial");
}

namespace {

/// Normalizes each of the `batch` rows of `v` to unit L2 norm. Rows with zero
/// norm keep `fallback`'s row.
void normalize_rows(std::vector<double>& v, std::size_t batch, const std::vector<double>* fallback)
{
    const std::size_t dim = v.size() / batch;
    for (std::size_t b = 0; b < batch; ++b) {
        double* row = v.data() + b * dim;
        double norm = 0.0;
        for (std::size_t i = 0; i < dim; ++i) norm += row[i] * row[i];
        norm = std::sqrt(norm);
        if (norm > 0.0 && std::isfinite(norm)) {
            for (std::size_t i = 0; i < dim; ++i) row[i] /= norm;
        } else if (fallback != nullptr) {
            std::copy_n(fallback->data() + b * dim, dim, row);
        }
    }
}

}  // namespace

template <typename T>
AdversarialBatch vat_perturbation(const BasicClusterModel<T>& model, const ImageBatch& batch,
                                  const TransformSpec& spec, Divergence divergence, std::uint64_t seed,
                                  bool symmetrize_joint)
{
    if (spec.kind != TransformKind::vat && spec.kind != TransformKind::ivat) {
        throw std::invalid_argument("vat_perturbation: spec kind is " + to_string(spec.kind));
    }
    spec.validate();
    const std::size_t n = batch.size();
    const std::size_t dim = batch.image_size();
    const auto clean = model.forward(batch, false);
    const std::size_t heads = clean.probs.size();

    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> d(n * dim);
    for (auto& v : d) v = normal(rng);
    normalize_rows(d, n, nullptr);

    const double xi = spec.xi > 0.0 ? spec.xi : 1e-6 * std::sqrt(static_cast<double>(dim));
    const auto x = batch.values();
    std::vector<T> probe(n * dim);
    std::vector<double> g;
    for (int it = 0; it < spec.power_iterations; ++it) {
        for (std::size_t i = 0; i < probe.size(); ++i) {
            probe[i] = static_cast<T>(x[i] + xi * d[i]);
        }
        const auto pass = model.forward(std::span<const T>(probe), n, true);
        std::vector<Matrix> grad_logits(heads);
        for (std::size_t h = 0; h < heads; ++h) {
            Matrix grad_q;
            if (divergence == Divergence::kl) {
                grad_q = kl_rows_with_grad(clean.probs[h], pass.probs[h]).grad_second;
            } else {
                grad_q = -mi_yy_with_grad(clean.probs[h], pass.probs[h], symmetrize_joint).grad_second;
            }
            grad_logits[h] = softmax_backward(pass.probs[h], grad_q / static_cast<double>(heads));
        }
        model.backward(pass, grad_logits, nullptr, &g);
        for (double v : g) {
            if (!std::isfinite(v)) {
                throw std::runtime_error("vat_perturbation: non-finite gradient");
            }
        }
        normalize_rows(g, n, &d);
        d.swap(g);
    }

    AdversarialBatch out{ImageBatch(n, batch.channels(), batch.height(), batch.width()), std::move(d)};
    auto dst = out.images.values();
    for (std::size_t i = 0; i < out.offsets.size(); ++i) {
        out.offsets[i] *= spec.epsilon;
        dst[i] = static_cast<float>(std::clamp(x[i] + out.offsets[i], 0.0, 1.0));
    }
    return out;
}

template AdversarialBatch vat_perturbation<float>(const BasicClusterModel<float>&, const ImageBatch&,
                                                  const TransformSpec&, Divergence, std::uint64_t, bool);
template AdversarialBatch vat_perturbation<double>(const BasicClusterModel<double>&, const ImageBatch&,
                                                   const TransformSpec&, Divergence, std::uint64_t, bool);

}  // namespace infoclust
