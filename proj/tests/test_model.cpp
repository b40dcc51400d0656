#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "infoclust/model.hpp"
#include "support.hpp"

using namespace infoclust;
using infoclust::testing::random_images;

namespace {

Architecture tiny_arch(std::vector<int> heads = {3, 4}, int classes = 3)
{
    Architecture a;
    a.channels = 2;
    a.height = 6;
    a.width = 5;
    a.convs = {ConvLayerSpec{3, 3, 2, 1}};
    a.hidden = {5};
    a.heads = std::move(heads);
    a.classes = classes;
    return a;
}

/// mi_xy on head 0 plus a KL pull toward a fixed target on head 1.
HeadObjective mixed_objective(const std::vector<Matrix>& probs, const Matrix& target, double scale = 1.0)
{
    HeadObjective out;
    out.grad_probs.resize(probs.size());
    const auto mi = mi_xy_with_grad(probs[0], 4.0);
    const auto kl = kl_rows_with_grad(target, probs[1]);
    out.value = scale * (-mi.value + kl.value);
    out.grad_probs[0] = -scale * mi.grad;
    out.grad_probs[1] = scale * kl.grad_second;
    return out;
}

std::vector<double> flatten(const ParameterSet<double>& p)
{
    std::vector<double> out;
    for (const auto& t : p) out.insert(out.end(), t.values.begin(), t.values.end());
    return out;
}

}  // namespace

TEST_CASE("init is deterministic in the seed")
{
    const auto arch = Architecture::desk_default(1, 28, 28, 10);
    const auto a = ClusterModel::init(arch, 7);
    const auto b = ClusterModel::init(arch, 7);
    const auto c = ClusterModel::init(arch, 8);
    REQUIRE(a.parameters().size() == b.parameters().size());
    bool differs = false;
    for (std::size_t i = 0; i < a.parameters().size(); ++i) {
        CHECK(a.parameters()[i].name == b.parameters()[i].name);
        CHECK(a.parameters()[i].values == b.parameters()[i].values);
        differs |= a.parameters()[i].values != c.parameters()[i].values;
    }
    CHECK(differs);
}

TEST_CASE("init rejects a descriptor without layers")
{
    Architecture a;
    a.convs.clear();
    a.hidden.clear();
    a.heads.clear();
    CHECK_THROWS_AS(ClusterModel::init(a, 1), std::invalid_argument);

    auto no_primary = tiny_arch({4, 5}, 3);
    CHECK_THROWS_AS(ClusterModel::init(no_primary, 1), std::invalid_argument);

    auto shrinks = tiny_arch();
    shrinks.convs = {ConvLayerSpec{3, 9, 1, 0}};
    CHECK_THROWS_AS(ClusterModel::init(shrinks, 1), std::invalid_argument);
}

TEST_CASE("heads [10, 50] give two heads of those widths")
{
    auto arch = Architecture::desk_default(1, 28, 28, 10);
    arch.heads = {10, 50};
    const auto model = ClusterModel::init(arch, 3);
    REQUIRE(model.head_count() == 2);
    std::mt19937_64 rng(1);
    const auto images = random_images(4, 1, 28, 28, rng);
    CHECK(model.forward(images, std::size_t{0}).clusters() == 10);
    CHECK(model.forward(images, std::size_t{1}).clusters() == 50);
    CHECK(arch.is_primary(0));
    CHECK_FALSE(arch.is_primary(1));
    CHECK_THROWS_AS(model.forward(images, std::size_t{2}), std::out_of_range);
}

TEST_CASE("forward output rows are distributions and duplicates agree")
{
    std::mt19937_64 rng(11);
    const auto model = ClusterModel::init(Architecture::desk_default(1, 28, 28, 10, 2, 1), 5);
    for (int trial = 0; trial < 20; ++trial) {
        auto images = random_images(6, 1, 28, 28, rng);
        // sample 4 duplicates sample 1
        const auto src = images.image(1);
        std::copy(src.begin(), src.end(), images.image(4).begin());
        const auto pass = model.forward(images);
        for (const auto& p : pass.probs) {
            for (Eigen::Index b = 0; b < p.rows(); ++b) {
                CHECK(std::abs(p.row(b).sum() - 1.0) <= 1e-6);
                CHECK((p.row(b).array() >= 0.0).all());
            }
            // SIMD tail handling differs by row position, so equality is up to float rounding
            CHECK((p.row(1) - p.row(4)).cwiseAbs().maxCoeff() <= 1e-6);
        }
    }
}

TEST_CASE("forward rejects mismatched input dimensions")
{
    std::mt19937_64 rng(2);
    const auto model = ClusterModel::init(tiny_arch(), 1);
    CHECK_THROWS_AS(model.forward(random_images(2, 1, 6, 5, rng)), std::invalid_argument);
    CHECK_THROWS_AS(model.forward(random_images(2, 2, 5, 6, rng)), std::invalid_argument);
}

TEST_CASE("zero head parameters give uniform rows")
{
    std::mt19937_64 rng(3);
    auto model = ClusterModel::init(Architecture::desk_default(1, 28, 28, 10), 9);
    auto& w = model.parameter("head0.weight");
    std::fill(w.values.begin(), w.values.end(), 0.0f);
    const auto p = model.forward(random_images(5, 1, 28, 28, rng), std::size_t{0});
    for (Eigen::Index i = 0; i < p.matrix().size(); ++i) {
        CHECK(p.matrix().data()[i] == doctest::Approx(0.1).epsilon(1e-12));
    }
}

TEST_CASE("feature taps have the architecture's dimensions")
{
    std::mt19937_64 rng(4);
    const auto arch = Architecture::desk_default(1, 28, 28, 10);
    const auto model = ClusterModel::init(arch, 1);
    const auto taps = model.features(random_images(3, 1, 28, 28, rng));
    CHECK(taps.conv.rows() == 3);
    CHECK(static_cast<std::size_t>(taps.conv.cols()) == arch.conv_feature_size());
    CHECK(static_cast<std::size_t>(taps.fc.cols()) == arch.fc_feature_size());
    CHECK(taps.fc.allFinite());
    CHECK((taps.fc.array() >= 0.0).all());
}

TEST_CASE("parameter gradient matches central differences")
{
    std::mt19937_64 rng(21);
    const auto arch = tiny_arch();
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        const auto model = BasicClusterModel<float>::init(arch, seed).cast<double>();
        const auto images = random_images(7, 2, 6, 5, rng);
        const Matrix target = infoclust::testing::random_batch(7, 4, rng).matrix();
        const auto loss = [&](const std::vector<Matrix>& p) { return mixed_objective(p, target); };

        const auto analytic = flatten(model.grad(images, loss));

        auto probe = model;
        std::vector<double> numeric;
        const double step = 1e-5;
        for (auto& t : probe.parameters()) {
            for (auto& v : t.values) {
                const double saved = v;
                v = saved + step;
                const double up = loss(probe.forward(images).probs).value;
                v = saved - step;
                const double down = loss(probe.forward(images).probs).value;
                v = saved;
                numeric.push_back((up - down) / (2 * step));
            }
        }
        REQUIRE(numeric.size() == analytic.size());
        const Eigen::Map<const Vector> a(analytic.data(), static_cast<Eigen::Index>(analytic.size()));
        const Eigen::Map<const Vector> n(numeric.data(), static_cast<Eigen::Index>(numeric.size()));
        const double rel = (a - n).norm() / std::max({a.norm(), n.norm(), 1e-12});
        CHECK(rel <= 1e-3);
    }
}

TEST_CASE("input gradient matches central differences")
{
    std::mt19937_64 rng(22);
    const auto model = BasicClusterModel<float>::init(tiny_arch(), 4).cast<double>();
    const auto images = random_images(3, 2, 6, 5, rng);
    const Matrix target = infoclust::testing::random_batch(3, 4, rng).matrix();
    auto x = std::vector<double>(images.values().begin(), images.values().end());

    const auto value = [&](const std::vector<double>& in) {
        return mixed_objective(model.forward(std::span<const double>(in), 3, false).probs, target).value;
    };
    const auto pass = model.forward(std::span<const double>(x), 3, true);
    const auto obj = mixed_objective(pass.probs, target);
    std::vector<Matrix> gl(2);
    for (std::size_t h = 0; h < 2; ++h) gl[h] = softmax_backward(pass.probs[h], obj.grad_probs[h]);
    std::vector<double> analytic;
    model.backward(pass, gl, nullptr, &analytic);
    REQUIRE(analytic.size() == x.size());

    double num2 = 0.0;
    double diff2 = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double saved = x[i];
        x[i] = saved + 1e-5;
        const double up = value(x);
        x[i] = saved - 1e-5;
        const double down = value(x);
        x[i] = saved;
        const double n = (up - down) / 2e-5;
        num2 += n * n;
        diff2 += (n - analytic[i]) * (n - analytic[i]);
    }
    CHECK(std::sqrt(diff2 / std::max(num2, 1e-24)) <= 1e-3);
}

TEST_CASE("input standardization equals feeding standardized pixels")
{
    std::mt19937_64 rng(23);
    auto arch = tiny_arch();
    const auto plain = BasicClusterModel<float>::init(arch, 4).cast<double>();
    arch.input_mean = {0.25f, 0.5f};
    arch.input_std = {0.5f, 0.125f};
    const BasicClusterModel<double> normed(arch, plain.parameters());
    const auto images = random_images(3, 2, 6, 5, rng);
    std::vector<double> x(images.values().begin(), images.values().end());
    std::vector<double> z = x;
    for (std::size_t i = 0; i < z.size(); ++i) {
        const std::size_t c = (i / 30) % 2;
        z[i] = (z[i] - arch.input_mean[c]) / arch.input_std[c];
    }
    const auto a = normed.forward(std::span<const double>(x), 3, true);
    const auto b = plain.forward(std::span<const double>(z), 3, true);
    CHECK((a.probs[0] - b.probs[0]).cwiseAbs().maxCoeff() <= 1e-12);

    // chain rule: d/dx = d/dz / std
    std::vector<Matrix> gl{Matrix::Ones(3, 3), Matrix::Zero(3, 4)};
    std::vector<double> gx;
    std::vector<double> gz;
    normed.backward(a, gl, nullptr, &gx);
    plain.backward(b, gl, nullptr, &gz);
    for (std::size_t i = 0; i < gx.size(); ++i) {
        CHECK(gx[i] == doctest::Approx(gz[i] / arch.input_std[(i / 30) % 2]).epsilon(1e-9));
    }

    arch.input_std = {0.5f};
    CHECK_THROWS_AS(arch.validate(), std::invalid_argument);
    arch.input_std = {0.5f, 0.0f};
    CHECK_THROWS_AS(arch.validate(), std::invalid_argument);
}

TEST_CASE("constant loss has zero gradient and scaling the loss scales the gradient")
{
    std::mt19937_64 rng(23);
    const auto model = ClusterModel::init(tiny_arch(), 2);
    const auto images = random_images(5, 2, 6, 5, rng);

    const auto constant = model.grad(images, [](const std::vector<Matrix>& p) {
        HeadObjective o;
        o.value = 3.5;
        for (const auto& m : p) o.grad_probs.push_back(Matrix::Zero(m.rows(), m.cols()));
        return o;
    });
    for (const auto& t : constant)
        for (float v : t.values) CHECK(v == 0.0f);

    const Matrix target = infoclust::testing::random_batch(5, 4, rng).matrix();
    const auto g1 = model.grad(images, [&](const auto& p) { return mixed_objective(p, target, 1.0); });
    const auto g2 = model.grad(images, [&](const auto& p) { return mixed_objective(p, target, 2.0); });
    for (std::size_t i = 0; i < g1.size(); ++i)
        for (std::size_t j = 0; j < g1[i].values.size(); ++j)
            CHECK(g2[i].values[j] == doctest::Approx(2.0 * g1[i].values[j]).epsilon(1e-5));
}

TEST_CASE("non-finite loss is rejected")
{
    std::mt19937_64 rng(24);
    const auto model = ClusterModel::init(tiny_arch(), 2);
    const auto images = random_images(2, 2, 6, 5, rng);
    CHECK_THROWS_AS(model.grad(images,
                               [](const std::vector<Matrix>& p) {
                                   return HeadObjective{std::nan(""), std::vector<Matrix>(p.size())};
                               }),
                    std::runtime_error);
}

TEST_CASE("a head with zero weight does not change other heads' gradients")
{
    std::mt19937_64 rng(25);
    const auto full = BasicClusterModel<float>::init(tiny_arch({3, 4, 3}), 6).cast<double>();
    // same parameters with the last head dropped
    auto params = full.parameters();
    params.erase(std::remove_if(params.begin(), params.end(),
                                [](const auto& t) { return t.name.rfind("head2.", 0) == 0; }),
                 params.end());
    const BasicClusterModel<double> reduced(tiny_arch({3, 4}), params);
    const auto images = random_images(6, 2, 6, 5, rng);
    const Matrix target = infoclust::testing::random_batch(6, 4, rng).matrix();

    const auto gf = full.grad(images, [&](const std::vector<Matrix>& p) {
        auto o = mixed_objective(p, target);
        o.grad_probs.push_back(Matrix());  // head 2 weight 0
        o.grad_probs.resize(3);
        return o;
    });
    const auto gr = reduced.grad(images, [&](const auto& p) { return mixed_objective(p, target); });
    REQUIRE(gr.size() + 2 == gf.size());
    for (std::size_t i = 0; i < gr.size(); ++i) {
        CHECK(gf[i].name == gr[i].name);
        for (std::size_t j = 0; j < gr[i].values.size(); ++j) CHECK(std::abs(gf[i].values[j] - gr[i].values[j]) <= 1e-9);
    }
    for (std::size_t i = gr.size(); i < gf.size(); ++i)
        for (double v : gf[i].values) CHECK(v == 0.0);
}

TEST_CASE("random forward and backward cycles stay finite")
{
    std::mt19937_64 rng(26);
    auto arch = tiny_arch();
    arch.height = 4;
    arch.width = 4;
    arch.channels = 1;
    auto model = ClusterModel::init(arch, 1);
    Adam<float> adam(AdamConfig{1e-2}, model.parameters());
    std::uniform_real_distribution<double> coin(0.0, 1.0);
    bool finite = true;
    for (int cycle = 0; cycle < 10000 && finite; ++cycle) {
        auto images = random_images(4, 1, 4, 4, rng);
        if (coin(rng) < 0.2) {
            // saturated inputs push the heads toward one-hot rows
            for (auto& v : images.values()) v = v < 0.5f ? 0.0f : 1.0f;
        }
        const auto g = model.grad(images, [&](const std::vector<Matrix>& p) {
            HeadObjective o;
            const auto a = mi_xy_with_grad(p[0], 4.0);
            const auto b = mi_yy_with_grad(p[0], p[0], true);
            o.value = -a.value - b.value;
            o.grad_probs = {Matrix(-a.grad - b.grad_first - b.grad_second), Matrix()};
            return o;
        });
        adam.step(model, g);
        for (const auto& t : model.parameters())
            for (float v : t.values) finite &= std::isfinite(v);
    }
    CHECK(finite);
}

TEST_CASE("adam: zero gradient is a no-op, quadratic decreases, runs repeat")
{
    const auto arch = tiny_arch();
    auto model = ClusterModel::init(arch, 5);
    const auto before = model.parameters();
    Adam<float> adam(AdamConfig{}, model.parameters());
    adam.step(model, zeros_like(model.parameters()));
    for (std::size_t i = 0; i < before.size(); ++i) CHECK(model.parameters()[i].values == before[i].values);

    // L = 0.5 * ||theta||^2, gradient theta
    const auto quadratic = [](const ParameterSet<float>& p) {
        double s = 0.0;
        for (const auto& t : p)
            for (float v : t.values) s += 0.5 * double(v) * v;
        return s;
    };
    const double l0 = quadratic(model.parameters());
    adam.step(model, model.parameters());
    CHECK(quadratic(model.parameters()) < l0);

    const auto run = [&](std::uint64_t seed) {
        std::mt19937_64 rng(seed);
        auto m = ClusterModel::init(arch, seed);
        Adam<float> opt(AdamConfig{1e-3}, m.parameters());
        for (int s = 0; s < 5; ++s) {
            const auto images = random_images(4, 2, 6, 5, rng);
            const Matrix target = infoclust::testing::random_batch(4, 4, rng).matrix();
            opt.step(m, m.grad(images, [&](const auto& p) { return mixed_objective(p, target); }));
        }
        return m.parameters();
    };
    const auto r1 = run(9);
    const auto r2 = run(9);
    for (std::size_t i = 0; i < r1.size(); ++i) CHECK(r1[i].values == r2[i].values);

    auto wrong = zeros_like(model.parameters());
    wrong.pop_back();
    CHECK_THROWS_AS(adam.step(model, wrong), std::invalid_argument);
}

TEST_CASE("with_new_heads keeps the encoder")
{
    const auto model = ClusterModel::init(tiny_arch(), 5);
    const auto swapped = model.with_new_heads({2, 2}, 2, 3);
    CHECK(swapped.head_count() == 2);
    CHECK(swapped.parameter("conv0.weight").values == model.parameter("conv0.weight").values);
    CHECK(swapped.parameter("fc0.weight").values == model.parameter("fc0.weight").values);
    CHECK(swapped.parameter("head0.weight").shape[0] == 2);
}

TEST_CASE("checkpoint round trip")
{
    const auto dir = std::filesystem::temp_directory_path() / "infoclust_test_ckpt";
    std::filesystem::create_directories(dir);
    const auto path = dir / "model.ckpt";

    Checkpoint ck{ClusterModel::init(Architecture::desk_default(1, 28, 28, 10, 1, 1), 12)};
    ck.metadata = {{"epoch", 4}, {"preset", "a"}};
    Adam<float> adam(AdamConfig{}, ck.model.parameters());
    ck.extras["adam_m"] = adam.first_moment();
    save_checkpoint(path, ck);

    const auto back = load_checkpoint(path);
    CHECK(back.model.architecture() == ck.model.architecture());
    CHECK(back.metadata == ck.metadata);
    REQUIRE(back.model.parameters().size() == ck.model.parameters().size());
    for (std::size_t i = 0; i < ck.model.parameters().size(); ++i) {
        CHECK(back.model.parameters()[i].name == ck.model.parameters()[i].name);
        CHECK(back.model.parameters()[i].shape == ck.model.parameters()[i].shape);
        CHECK(back.model.parameters()[i].values == ck.model.parameters()[i].values);
    }
    REQUIRE(back.extras.count("adam_m") == 1);
    CHECK(back.extras.at("adam_m").size() == ck.model.parameters().size());

    // header layout
    std::ifstream in(path, std::ios::binary);
    char magic[8];
    in.read(magic, 8);
    CHECK(std::string(magic, 8) == "ICLUSTCK");

    // truncated and corrupt files are errors
    {
        std::ofstream out(dir / "bad.ckpt", std::ios::binary);
        out << "ICLUSTCK";
    }
    CHECK_THROWS(load_checkpoint(dir / "bad.ckpt"));
    {
        std::ofstream out(dir / "bad.ckpt", std::ios::binary);
        out << "NOTACKPT0000";
    }
    CHECK_THROWS(load_checkpoint(dir / "bad.ckpt"));
    CHECK_THROWS(load_checkpoint(dir / "missing.ckpt"));
    std::filesystem::remove_all(dir);
}
