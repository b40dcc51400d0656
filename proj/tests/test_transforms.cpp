#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "infoclust/transforms.hpp"
#include "support.hpp"

using namespace infoclust;
using infoclust::testing::random_images;

namespace {

TransformSpec geo_spec(double crop_min, double crop_max, double flip, double brightness, double contrast)
{
    TransformSpec s;
    s.kind = TransformKind::geometric;
    s.geometric = {crop_min, crop_max, flip, brightness, contrast};
    return s;
}

bool in_unit_range(const ImageBatch& b)
{
    for (float v : b.values())
        if (!(v >= 0.0f && v <= 1.0f)) return false;
    return true;
}

bool identical(const ImageBatch& a, const ImageBatch& b)
{
    return a.same_shape(b) && std::equal(a.values().begin(), a.values().end(), b.values().begin());
}

double kl_divergence(const ProbBatch& p, const ProbBatch& q)
{
    return kl_rows_with_grad(p.matrix(), q.matrix()).value;
}

/// Heads-only model p(y|x) = softmax(W x + b) on 1x1x2 inputs.
BasicClusterModel<double> logistic_model(const std::array<double, 4>& w)
{
    Architecture a;
    a.channels = 1;
    a.height = 1;
    a.width = 2;
    a.heads = {2};
    a.classes = 2;
    auto m = BasicClusterModel<double>::init(a, 0);
    m.parameter("head0.weight").values.assign(w.begin(), w.end());
    auto& b = m.parameter("head0.bias").values;
    std::fill(b.begin(), b.end(), 0.0);
    return m;
}

}  // namespace

TEST_CASE("flip-only geometric mirrors each row")
{
    const ImageBatch batch(1, 1, 2, 2, {0.1f, 0.2f, 0.3f, 0.4f});
    const auto out = geometric(batch, geo_spec(1.0, 1.0, 1.0, 0.0, 0.0), 3);
    CHECK(out.at(0, 0, 0, 0) == 0.2f);
    CHECK(out.at(0, 0, 0, 1) == 0.1f);
    CHECK(out.at(0, 0, 1, 0) == 0.4f);
    CHECK(out.at(0, 0, 1, 1) == 0.3f);
}

TEST_CASE("geometric with identity ranges leaves the input unchanged")
{
    std::mt19937_64 rng(1);
    const auto batch = random_images(5, 3, 8, 7, rng);
    CHECK(identical(geometric(batch, geo_spec(1.0, 1.0, 0.0, 0.0, 0.0), 17), batch));
}

TEST_CASE("geometric is deterministic, seed-sensitive and stays in range")
{
    std::mt19937_64 rng(2);
    const auto batch = random_images(16, 1, 28, 28, rng);
    const auto spec = geo_spec(0.6, 1.0, 0.5, 0.125, 0.125);
    const auto a = geometric(batch, spec, 99);
    const auto b = geometric(batch, spec, 99);
    const auto c = geometric(batch, spec, 100);
    CHECK(identical(a, b));
    CHECK_FALSE(identical(a, c));
    CHECK(a.same_shape(batch));
    CHECK(in_unit_range(a));
}

TEST_CASE("geometric rejects invalid parameters")
{
    const ImageBatch batch(1, 1, 2, 2);
    CHECK_THROWS_AS(geometric(batch, geo_spec(0.6, 1.2, 0.5, 0.0, 0.0), 1), std::invalid_argument);
    CHECK_THROWS_AS(geometric(batch, geo_spec(0.0, 1.0, 0.5, 0.0, 0.0), 1), std::invalid_argument);
    CHECK_THROWS_AS(geometric(batch, geo_spec(0.6, 1.0, 1.5, 0.0, 0.0), 1), std::invalid_argument);
    TransformSpec wrong;
    wrong.kind = TransformKind::mixup;
    CHECK_THROWS_AS(geometric(batch, wrong, 1), std::invalid_argument);
}

TEST_CASE("weak_geometric: margin 0 is identity, constants stay constant")
{
    std::mt19937_64 rng(3);
    TransformSpec s;
    s.kind = TransformKind::weak_geometric;
    s.margin = 0;
    const auto batch = random_images(4, 2, 9, 9, rng);
    CHECK(identical(weak_geometric(batch, s, 5), batch));

    s.margin = 2;
    const ImageBatch flat(3, 1, 10, 12, std::vector<float>(360, 0.375f));
    const auto out = weak_geometric(flat, s, 5);
    for (float v : out.values()) CHECK(v == doctest::Approx(0.375f).epsilon(1e-6));

    const auto x = weak_geometric(batch, s, 8);
    CHECK(identical(x, weak_geometric(batch, s, 8)));
    CHECK(in_unit_range(x));

    s.margin = 9;
    CHECK_THROWS_AS(weak_geometric(batch, s, 1), std::invalid_argument);
}

TEST_CASE("mixup with forced coefficients")
{
    std::mt19937_64 rng(4);
    const auto batch = random_images(4, 1, 3, 3, rng);
    const std::vector<std::size_t> partners{2, 0, 3, 1};

    const auto keep = mixup_with(batch, partners, {1, 1, 1, 1});
    CHECK(identical(keep.mixed_input, batch));

    const auto swap = mixup_with(batch, partners, {0, 0, 0, 0});
    for (std::size_t b = 0; b < 4; ++b) {
        const auto got = swap.mixed_input.image(b);
        const auto want = batch.image(partners[b]);
        CHECK(std::equal(got.begin(), got.end(), want.begin()));
    }

    std::vector<float> v(2 * 4, 0.0f);
    std::fill(v.begin() + 4, v.end(), 1.0f);
    const ImageBatch zero_one(2, 1, 2, 2, v);
    const auto half = mixup_with(zero_one, {1, 0}, {0.5, 0.5});
    for (float x : half.mixed_input.values()) CHECK(x == 0.5f);

    CHECK_THROWS_AS(mixup_with(batch, {0, 1}, {1, 1}), std::invalid_argument);
    CHECK_THROWS_AS(mixup_with(batch, partners, {1, 1, 1.5, 1}), std::invalid_argument);
}

TEST_CASE("mixup draws a permutation and reproduces under a seed")
{
    std::mt19937_64 rng(5);
    TransformSpec s;
    s.kind = TransformKind::mixup;
    const auto batch = random_images(32, 1, 4, 4, rng);
    const auto a = mixup(batch, s, 7);
    const auto b = mixup(batch, s, 7);
    CHECK(identical(a.mixed_input, b.mixed_input));
    CHECK(a.partner_indices == b.partner_indices);
    CHECK(a.alphas == b.alphas);
    auto sorted = a.partner_indices;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size(); ++i) CHECK(sorted[i] == i);
    for (double al : a.alphas) CHECK((al >= 0.0 && al <= 1.0));
    for (std::size_t i = 0; i < 32; ++i) {
        const auto m = a.mixed_input.image(i);
        const auto x1 = batch.image(i);
        const auto x2 = batch.image(a.partner_indices[i]);
        for (std::size_t k = 0; k < m.size(); ++k)
            CHECK(m[k] == doctest::Approx(a.alphas[i] * x1[k] + (1 - a.alphas[i]) * x2[k]).epsilon(1e-6));
    }
    CHECK_THROWS_AS(mixup(random_images(1, 1, 4, 4, rng), s, 1), std::invalid_argument);
}

TEST_CASE("mixup Beta(a, a) coefficients have the right moments")
{
    std::mt19937_64 rng(6);
    TransformSpec s;
    s.kind = TransformKind::mixup;
    s.beta_shape = 0.5;
    const auto batch = random_images(4000, 1, 1, 1, rng);
    const auto pair = mixup(batch, s, 11);
    double mean = 0.0;
    double sq = 0.0;
    for (double a : pair.alphas) {
        mean += a;
        sq += a * a;
    }
    mean /= 4000.0;
    const double var = sq / 4000.0 - mean * mean;
    // Beta(a, a): mean 1/2, variance 1 / (4 (2a + 1))
    CHECK(mean == doctest::Approx(0.5).epsilon(0.05));
    CHECK(var == doctest::Approx(1.0 / (4.0 * 2.0)).epsilon(0.08));
}

TEST_CASE("mixup_output is a convex combination of rows")
{
    std::mt19937_64 rng(7);
    const ImageBatch dummy(2, 1, 1, 1);
    const auto e = mixup_with(dummy, {1, 0}, {0.5, 0.5});
    const ProbBatch basis(Matrix{{1.0, 0.0}, {0.0, 1.0}});
    const auto mixed = mixup_output(basis, e);
    CHECK(mixed.matrix()(0, 0) == 0.5);
    CHECK(mixed.matrix()(0, 1) == 0.5);

    const auto unchanged = mixup_output(basis, mixup_with(dummy, {1, 0}, {1.0, 1.0}));
    CHECK(unchanged.matrix() == basis.matrix());

    TransformSpec s;
    s.kind = TransformKind::mixup;
    for (int trial = 0; trial < 200; ++trial) {
        const auto imgs = random_images(9, 1, 1, 1, rng);
        const auto pair = mixup(imgs, s, static_cast<std::uint64_t>(trial));
        const auto p = infoclust::testing::random_batch(9, 6, rng);
        const auto out = mixup_output(p, pair);
        for (Eigen::Index b = 0; b < 9; ++b) {
            CHECK(std::abs(out.matrix().row(b).sum() - 1.0) <= 1e-9);
            const auto other = static_cast<Eigen::Index>(pair.partner_indices[static_cast<std::size_t>(b)]);
            for (Eigen::Index k = 0; k < 6; ++k) {
                const double lo = std::min(p.matrix()(b, k), p.matrix()(other, k));
                const double hi = std::max(p.matrix()(b, k), p.matrix()(other, k));
                CHECK(out.matrix()(b, k) >= lo - 1e-12);
                CHECK(out.matrix()(b, k) <= hi + 1e-12);
            }
        }
    }
    CHECK_THROWS(mixup_output(infoclust::testing::random_batch(3, 2, rng), e));
}

TEST_CASE("mix_rows_backward is the adjoint of mix_rows")
{
    std::mt19937_64 rng(8);
    const ImageBatch dummy(5, 1, 1, 1);
    const auto pair = mixup_with(dummy, {3, 3, 0, 1, 4}, {0.1, 0.7, 0.5, 0.0, 1.0});
    const Matrix x = infoclust::testing::random_logits(5, 4, rng);
    const Matrix y = infoclust::testing::random_logits(5, 4, rng);
    const double lhs = (mix_rows(x, pair).array() * y.array()).sum();
    const double rhs = (x.array() * mix_rows_backward(y, pair).array()).sum();
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("vat with zero radius returns the input")
{
    std::mt19937_64 rng(9);
    const auto model = ClusterModel::init(Architecture::desk_default(1, 12, 12, 4), 3);
    const auto batch = random_images(3, 1, 12, 12, rng);
    TransformSpec s;
    s.kind = TransformKind::vat;
    s.epsilon = 0.0;
    const auto out = vat_perturbation(model, batch, s, Divergence::kl, 1);
    CHECK(identical(out.images, batch));
    s.epsilon = -1.0;
    CHECK_THROWS_AS(vat_perturbation(model, batch, s, Divergence::kl, 1), std::invalid_argument);
    s.epsilon = 1.0;
    s.kind = TransformKind::mixup;
    CHECK_THROWS_AS(vat_perturbation(model, batch, s, Divergence::kl, 1), std::invalid_argument);
}

TEST_CASE("vat on a constant-output model keeps an epsilon-norm offset with zero divergence")
{
    std::mt19937_64 rng(10);
    auto model = BasicClusterModel<double>::init(Architecture::desk_default(1, 8, 8, 3), 4);
    std::fill(model.parameter("head0.weight").values.begin(), model.parameter("head0.weight").values.end(), 0.0);
    const auto batch = random_images(4, 1, 8, 8, rng);
    for (auto div : {Divergence::kl, Divergence::neg_mi}) {
        TransformSpec s;
        s.kind = div == Divergence::kl ? TransformKind::vat : TransformKind::ivat;
        s.epsilon = 0.7;
        const auto out = vat_perturbation(model, batch, s, div, 2);
        const std::size_t dim = batch.image_size();
        for (std::size_t b = 0; b < 4; ++b) {
            double n2 = 0.0;
            for (std::size_t i = 0; i < dim; ++i) n2 += out.offsets[b * dim + i] * out.offsets[b * dim + i];
            CHECK(std::abs(std::sqrt(n2) - 0.7) <= 1e-6);
        }
        CHECK(std::abs(kl_divergence(model.forward(batch, std::size_t{0}), model.forward(out.images, std::size_t{0}))) <=
              1e-9);
    }
}

TEST_CASE("vat offsets have norm epsilon and outputs stay in range")
{
    std::mt19937_64 rng(11);
    const auto model = ClusterModel::init(Architecture::desk_default(1, 14, 14, 5, 2, 1), 7);
    const auto batch = random_images(6, 1, 14, 14, rng);
    for (auto kind : {TransformKind::vat, TransformKind::ivat}) {
        TransformSpec s;
        s.kind = kind;
        s.epsilon = 2.5;
        s.power_iterations = 2;
        const auto out = vat_perturbation(model, batch, s, divergence_for(kind), 3);
        const auto again = vat_perturbation(model, batch, s, divergence_for(kind), 3);
        CHECK(out.offsets == again.offsets);
        CHECK(in_unit_range(out.images));
        const std::size_t dim = batch.image_size();
        for (std::size_t b = 0; b < 6; ++b) {
            double n2 = 0.0;
            for (std::size_t i = 0; i < dim; ++i) n2 += out.offsets[b * dim + i] * out.offsets[b * dim + i];
            CHECK(std::abs(std::sqrt(n2) - 2.5) <= 1e-6);
        }
    }
}

TEST_CASE("vat direction on a 2-D logistic model matches a grid search")
{
    std::mt19937_64 rng(12);
    std::normal_distribution<double> normal(0.0, 2.0);
    std::uniform_real_distribution<float> unit(0.0f, 1.0f);
    for (int trial = 0; trial < 50; ++trial) {
        const auto model = logistic_model({normal(rng), normal(rng), normal(rng), normal(rng)});
        const ImageBatch x(1, 1, 1, 2, {unit(rng), unit(rng)});
        TransformSpec s;
        s.kind = TransformKind::vat;
        s.epsilon = 0.05;
        s.power_iterations = 1;
        const auto out = vat_perturbation(model, x, s, Divergence::kl, static_cast<std::uint64_t>(trial));
        const double got = std::atan2(out.offsets[1], out.offsets[0]);

        // oracle: argmax of KL(p(x) || p(x + eps u)) over 360 unit directions
        const auto p = model.forward(x, std::size_t{0});
        double best = -1.0;
        double best_angle = 0.0;
        for (int k = 0; k < 360; ++k) {
            const double t = k * std::numbers::pi / 180.0;
            const std::vector<double> probe{x.values()[0] + s.epsilon * std::cos(t),
                                            x.values()[1] + s.epsilon * std::sin(t)};
            const auto q = model.forward(std::span<const double>(probe), 1, false).probs[0];
            const double d = kl_divergence(p, ProbBatch(q));
            if (d > best) {
                best = d;
                best_angle = t;
            }
        }
        // the power iteration recovers an eigenvector, defined up to sign
        const double cosine = std::abs(std::cos(got - best_angle));
        CHECK(cosine >= std::cos(5.0 * std::numbers::pi / 180.0));
    }
}

TEST_CASE("vat beats random directions on a trained model")
{
    std::mt19937_64 rng(13);
    Architecture arch;
    arch.channels = 1;
    arch.height = 8;
    arch.width = 8;
    arch.convs = {ConvLayerSpec{8, 3, 2, 1}};
    arch.hidden = {16};
    arch.heads = {4};
    arch.classes = 4;
    auto model = ClusterModel::init(arch, 2);

    // Train on four noisy prototypes so the posterior is sharp and nontrivial.
    std::vector<std::vector<float>> protos(4, std::vector<float>(64));
    std::uniform_real_distribution<float> unit(0.0f, 1.0f);
    for (auto& p : protos)
        for (auto& v : p) v = unit(rng) < 0.5f ? 0.1f : 0.9f;
    const auto sample = [&](std::size_t n) {
        std::normal_distribution<float> noise(0.0f, 0.1f);
        std::vector<float> v;
        for (std::size_t i = 0; i < n; ++i)
            for (float x : protos[i % 4]) v.push_back(std::clamp(x + noise(rng), 0.0f, 1.0f));
        return ImageBatch(n, 1, 8, 8, std::move(v));
    };
    Adam<float> adam(AdamConfig{1e-2}, model.parameters());
    for (int step = 0; step < 300; ++step) {
        adam.step(model, model.grad(sample(32), [](const std::vector<Matrix>& p) {
            const auto mi = mi_xy_with_grad(p[0], 1.0);
            return HeadObjective{-mi.value, {Matrix(-mi.grad)}};
        }));
    }

    const auto dmodel = model.cast<double>();
    std::normal_distribution<double> normal(0.0, 1.0);
    for (auto kind : {TransformKind::vat, TransformKind::ivat}) {
        int wins = 0;
        for (int trial = 0; trial < 100; ++trial) {
            const auto batch = sample(8);
            TransformSpec s;
            s.kind = kind;
            s.epsilon = 1.0;
            const auto adv = vat_perturbation(dmodel, batch, s, divergence_for(kind), 1000 + trial);

            std::vector<double> rnd(adv.offsets.size());
            for (std::size_t b = 0; b < 8; ++b) {
                double n2 = 0.0;
                for (std::size_t i = 0; i < 64; ++i) n2 += (rnd[b * 64 + i] = normal(rng)) * rnd[b * 64 + i];
                for (std::size_t i = 0; i < 64; ++i) rnd[b * 64 + i] *= s.epsilon / std::sqrt(n2);
            }
            const auto x = batch.values();
            const auto clean = dmodel.forward(batch, std::size_t{0});
            const auto divergence = [&](const std::vector<double>& r) {
                std::vector<double> in(x.begin(), x.end());
                for (std::size_t i = 0; i < in.size(); ++i) in[i] += r[i];
                const ProbBatch q(dmodel.forward(std::span<const double>(in), 8, false).probs[0]);
                return kind == TransformKind::vat ? kl_divergence(clean, q)
                                                  : -mi_yy(joint(clean, q, true));
            };
            wins += divergence(adv.offsets) >= divergence(rnd) ? 1 : 0;
        }
        INFO(to_string(kind));
        CHECK(wins >= 80);
    }
}

TEST_CASE("transform spec json round trip and validation")
{
    TransformSpec s;
    s.kind = TransformKind::ivat;
    s.epsilon = 1.5;
    s.power_iterations = 3;
    s.source = "geo";
    const nlohmann::json j = s;
    const auto back = j.get<TransformSpec>();
    CHECK(back.kind == TransformKind::ivat);
    CHECK(back.epsilon == 1.5);
    CHECK(back.power_iterations == 3);
    CHECK(back.source == "geo");

    CHECK_THROWS(nlohmann::json({{"kind", "vat"}, {"epsilon", -1}}).get<TransformSpec>());
    CHECK_THROWS(nlohmann::json({{"kind", "vat"}, {"power_iterations", 0}}).get<TransformSpec>());
    CHECK_THROWS(nlohmann::json({{"kind", "blur"}}).get<TransformSpec>());
    CHECK_THROWS(nlohmann::json({{"kind", "mixup"}, {"alpha", 1}}).get<TransformSpec>());
}
