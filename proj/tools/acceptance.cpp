// Acceptance checks. Prints one PASS/FAIL line per criterion; exit status is
// nonzero if any criterion fails. MNIST runs are cached under --work and
// resumed, so a rerun after a completed pass only re-evaluates.
#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <numeric>
#include <random>
#include <set>

#include "infoclust/trainer.hpp"

using namespace infoclust;
namespace fs = std::filesystem;

namespace {

// ---------------------------------------------------------------------------
// Pinned budgets and tolerances

constexpr int kMnistEpochs = 100;
constexpr int kMnistSeeds = 3;
constexpr double kMnistTarget = 0.85;

constexpr int kOrderingEpochs = 20;  // identical for o, q, b and c
constexpr int kOrderingSeeds = 1;
constexpr double kRegularizationGap = 0.25;
constexpr double kCollapseCeiling = 0.20;
constexpr double kPairingGap = 0.20;

constexpr double kPropertySeconds = 60.0;
constexpr double kJointMassTol = 1e-6;
constexpr double kJointSymmetryTol = 1e-9;
constexpr double kMiIdentityTol = 1e-9;
constexpr double kGradientTol = 1e-3;
constexpr double kEpsilonNormTol = 1e-6;
constexpr int kHungarianCases = 1000;
constexpr int kHungarianMaxK = 7;

constexpr int kBlobEpochs = 50;
constexpr double kBlobSeconds = 60.0;
constexpr double kBlobTarget = 0.95;
constexpr std::uint64_t kBlobSeeds[] = {0, 1, 2};

// checkpoint used by the probe and fine-tuning criteria
constexpr const char* kDownstreamPreset = "q";

constexpr double kProbeGap = 0.05;
constexpr double kProbeTestFraction = 1.0 / 7.0;

constexpr std::size_t kFinetuneLabels = 5000;
constexpr std::size_t kFinetuneTest = 10000;
constexpr int kFinetuneEpochs = 10;
constexpr double kPretrainGap = 0.02;

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string pct(double x)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f%%", 100.0 * x);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0)
{
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

double mean(const std::vector<double>& v)
{
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

// ---------------------------------------------------------------------------
// Property suite. Oracles here are written from the definitions, not by
// calling the library's own helpers.

Matrix random_logits(std::size_t rows, std::size_t cols, std::mt19937_64& rng)
{
    std::normal_distribution<double> dist(0.0, 2.0);
    Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
    return m;
}

double plogp_sum(const Eigen::Ref<const Eigen::VectorXd>& p)
{
    double h = 0.0;
    for (Eigen::Index i = 0; i < p.size(); ++i) {
        if (p[i] > 0.0) h -= p[i] * std::log(p[i]);
    }
    return h;
}

Matrix numeric_gradient(const std::function<double(const Matrix&)>& f, Matrix x)
{
    constexpr double step = 1e-5;
    Matrix g(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        const double saved = x.data()[i];
        x.data()[i] = saved + step;
        const double up = f(x);
        x.data()[i] = saved - step;
        const double down = f(x);
        x.data()[i] = saved;
        g.data()[i] = (up - down) / (2.0 * step);
    }
    return g;
}

double relative_error(const Matrix& a, const Matrix& b)
{
    return (a - b).norm() / std::max({a.norm(), b.norm(), 1e-12});
}

std::vector<std::string> property_failures()
{
    std::vector<std::string> bad;
    std::mt19937_64 rng(20240601);
    const auto fail = [&](const std::string& what) {
        if (std::find(bad.begin(), bad.end(), what) == bad.end()) bad.push_back(what);
    };

    // information measures
    for (int trial = 0; trial < 500; ++trial) {
        const std::size_t b = 1 + rng() % 64;
        const std::size_t k = 2 + rng() % 9;
        const ProbBatch p = ProbBatch::from_logits(random_logits(b, k, rng));
        const ProbBatch q = ProbBatch::from_logits(random_logits(b, k, rng));
        const double log_k = std::log(static_cast<double>(k));

        const double mxy = mi_xy(p, 1.0).scalar;
        if (mxy < -1e-12 || mxy > log_k + 1e-12) fail("MI(X,Y) outside [0, log K]");

        for (bool sym : {false, true}) {
            const auto j = joint(p, q, sym);
            const Matrix& e = j.entries();
            if (std::abs(e.sum() - 1.0) > kJointMassTol) fail("joint mass");
            if ((e.array() < 0.0).any()) fail("joint negativity");
            if (sym && (e - e.transpose()).cwiseAbs().maxCoeff() > kJointSymmetryTol) fail("joint symmetry");

            const double mi = mi_yy(j);
            if (mi < -1e-12 || mi > log_k + 1e-12) fail("MI(Y,Y~) outside [0, log K]");
            Eigen::VectorXd rows = e.rowwise().sum();
            Eigen::VectorXd cols = e.colwise().sum().transpose();
            const Eigen::VectorXd flat = Eigen::Map<const Eigen::VectorXd>(e.data(), e.size());
            const double brute = plogp_sum(rows) + plogp_sum(cols) - plogp_sum(flat);
            if (std::abs(brute - mi) > kMiIdentityTol) fail("MI identity H(Y)+H(Y~)-H(Y,Y~)");
        }

        for (std::size_t r = 0; r < b; ++r) {
            if (kl_div(p.row(r), q.row(r)) < 0.0 || kl_div(p.row(r), p.row(r)) < -1e-15) fail("KL >= 0");
        }
    }

    // gradients against central differences, through the softmax
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t b = 3 + rng() % 6;
        const std::size_t k = 2 + rng() % 5;
        const Matrix la = random_logits(b, k, rng);
        const Matrix lb = random_logits(b, k, rng);
        const Matrix pa = softmax(la);
        const Matrix pb = softmax(lb);
        const auto check = [&](const std::string& name, const Matrix& analytic, const std::function<double(const Matrix&)>& f,
                               const Matrix& at) {
            if (relative_error(analytic, numeric_gradient(f, at)) > kGradientTol) fail("gradient of " + name);
        };

        check("mi_xy", softmax_backward(pa, mi_xy_with_grad(pa, 4.0).grad),
              [](const Matrix& l) { return mi_xy_with_grad(softmax(l), 4.0).value; }, la);
        for (bool sym : {false, true}) {
            const auto g = mi_yy_with_grad(pa, pb, sym);
            check("mi_yy", softmax_backward(pa, g.grad_first),
                  [&](const Matrix& l) { return mi_yy_with_grad(softmax(l), pb, sym).value; }, la);
            check("mi_yy", softmax_backward(pb, g.grad_second),
                  [&](const Matrix& l) { return mi_yy_with_grad(pa, softmax(l), sym).value; }, lb);
        }
        const auto kl = kl_rows_with_grad(pa, pb);
        check("kl_reg", softmax_backward(pa, kl.grad_first),
              [&](const Matrix& l) { return kl_rows_with_grad(softmax(l), pb).value; }, la);
        check("kl_reg", softmax_backward(pb, kl.grad_second),
              [&](const Matrix& l) { return kl_rows_with_grad(pa, softmax(l)).value; }, lb);
    }

    // Hungarian against exhaustive search
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (int trial = 0; trial < kHungarianCases; ++trial) {
        const int k = 1 + static_cast<int>(rng() % kHungarianMaxK);
        Matrix cost(k, k);
        for (Eigen::Index i = 0; i < cost.size(); ++i) cost.data()[i] = unit(rng);
        std::vector<int> perm(static_cast<std::size_t>(k));
        std::iota(perm.begin(), perm.end(), 0);
        double best = std::numeric_limits<double>::infinity();
        do {
            double c = 0.0;
            for (int i = 0; i < k; ++i) c += cost(i, perm[static_cast<std::size_t>(i)]);
            best = std::min(best, c);
        } while (std::next_permutation(perm.begin(), perm.end()));
        const auto h = hungarian(cost);
        std::set<int> used(h.begin(), h.end());
        if (static_cast<int>(used.size()) != k || std::abs(assignment_cost(cost, h) - best) > 1e-9) {
            fail("Hungarian == exhaustive");
        }
    }

    // cluster accuracy is invariant to renaming clusters
    for (int trial = 0; trial < 200; ++trial) {
        const int k = 2 + static_cast<int>(rng() % 6);
        std::vector<int> preds(60);
        std::vector<int> labels(60);
        for (std::size_t i = 0; i < 60; ++i) {
            preds[i] = static_cast<int>(rng() % static_cast<unsigned>(k));
            labels[i] = static_cast<int>(rng() % static_cast<unsigned>(k));
        }
        std::vector<int> rename(static_cast<std::size_t>(k));
        std::iota(rename.begin(), rename.end(), 0);
        std::shuffle(rename.begin(), rename.end(), rng);
        std::vector<int> renamed(preds.size());
        for (std::size_t i = 0; i < preds.size(); ++i) renamed[i] = rename[static_cast<std::size_t>(preds[i])];
        if (cluster_accuracy(preds, labels, k).matched != cluster_accuracy(renamed, labels, k).matched) {
            fail("cluster_accuracy permutation invariance");
        }
    }

    // mixup is a convex combination of the sample and its partner
    {
        std::vector<float> v(16 * 2 * 5 * 5);
        std::uniform_real_distribution<float> px(0.0f, 1.0f);
        for (auto& x : v) x = px(rng);
        const ImageBatch batch(16, 2, 5, 5, v);
        TransformSpec spec;
        spec.kind = TransformKind::mixup;
        const auto pair = mixup(batch, spec, 5);
        const ProbBatch p = ProbBatch::from_logits(random_logits(16, 4, rng));
        const auto mixed = mixup_output(p, pair);
        const std::size_t d = batch.image_size();
        for (std::size_t b = 0; b < 16; ++b) {
            const double a = pair.alphas[b];
            const std::size_t o = pair.partner_indices[b];
            if (a < 0.0 || a > 1.0) fail("mixup coefficient in [0, 1]");
            for (std::size_t i = 0; i < d; ++i) {
                const double want = a * batch.values()[b * d + i] + (1.0 - a) * batch.values()[o * d + i];
                if (std::abs(want - pair.mixed_input.values()[b * d + i]) > 1e-6) fail("mixup input convexity");
            }
            for (std::size_t c = 0; c < 4; ++c) {
                const double want = a * p.row(b)[c] + (1.0 - a) * p.row(o)[c];
                if (std::abs(want - mixed.row(b)[c]) > 1e-12) fail("mixup output convexity");
            }
        }
    }

    // VAT offsets have norm epsilon
    {
        const auto model = ClusterModel::init(Architecture::desk_default(1, 12, 12, 4, 2, 1), 3);
        std::vector<float> v(8 * 12 * 12);
        std::uniform_real_distribution<float> px(0.0f, 1.0f);
        for (auto& x : v) x = px(rng);
        const ImageBatch batch(8, 1, 12, 12, v);
        for (auto kind : {TransformKind::vat, TransformKind::ivat}) {
            TransformSpec spec;
            spec.kind = kind;
            spec.epsilon = 1.7;
            const auto adv = vat_perturbation(model, batch, spec, divergence_for(kind), 9);
            const std::size_t d = batch.image_size();
            for (std::size_t b = 0; b < 8; ++b) {
                double n2 = 0.0;
                for (std::size_t i = 0; i < d; ++i) n2 += adv.offsets[b * d + i] * adv.offsets[b * d + i];
                if (std::abs(std::sqrt(n2) - spec.epsilon) > kEpsilonNormTol) fail("VAT epsilon norm");
            }
        }
    }
    return bad;
}

// ---------------------------------------------------------------------------

class Runner {
public:
    Runner(fs::path work, bool verbose) : work_(std::move(work)), verbose_(verbose) {}

    /// Pooled MNIST, loaded once. Throws if the files are missing.
    const LabeledDataset& mnist()
    {
        if (!mnist_) {
            DatasetConfig d;
            d.name = "mnist";
            mnist_.emplace(load_dataset(d));
        }
        return *mnist_;
    }

    /// One MNIST run, resumed from its cache directory when present.
    RunResult run(const std::string& name, std::uint64_t seed, int epochs, const std::string& group)
    {
        auto c = preset(name, "mnist");
        c.seed = seed;
        c.epochs = epochs;
        c.eval_every = std::max(1, epochs / 10);
        c.out_dir = (work_ / group / name / ("seed_" + std::to_string(seed))).string();
        const auto& ds = mnist();
        auto r = train(c, ds.data, make_evaluator(ds.data, ds.labels), {true, true, !verbose_});
        if (verbose_) std::cerr << name << " seed " << seed << ": " << pct(r.final_selected_accuracy) << '\n';
        return r;
    }

    double mean_accuracy(const std::string& name, int seeds, int epochs, const std::string& group,
                         std::vector<double>* all = nullptr)
    {
        std::vector<double> acc;
        for (int s = 0; s < seeds; ++s) {
            acc.push_back(run(name, static_cast<std::uint64_t>(s), epochs, group).final_selected_accuracy);
        }
        if (all != nullptr) *all = acc;
        return mean(acc);
    }

private:
    fs::path work_;
    bool verbose_;
    std::optional<LabeledDataset> mnist_;
};

Outcome criterion_mnist(Runner& r)
{
    std::vector<double> acc;
    const double m = r.mean_accuracy("a", kMnistSeeds, kMnistEpochs, "clustering", &acc);
    std::string seeds;
    for (double a : acc) seeds += (seeds.empty() ? "" : ", ") + pct(a);
    return {m >= kMnistTarget, "mean " + pct(m) + " over seeds [" + seeds + "], need >= " + pct(kMnistTarget)};
}

Outcome criterion_regularization(Runner& r)
{
    const double o = r.mean_accuracy("o", kOrderingSeeds, kOrderingEpochs, "ordering");
    const double q = r.mean_accuracy("q", kOrderingSeeds, kOrderingEpochs, "ordering");
    return {q - o >= kRegularizationGap,
            "(o) " + pct(o) + ", (q) " + pct(q) + ", gap " + pct(q - o) + ", need >= " + pct(kRegularizationGap)};
}

Outcome criterion_pairing(Runner& r)
{
    const double b = r.mean_accuracy("b", kOrderingSeeds, kOrderingEpochs, "ordering");
    const double c = r.mean_accuracy("c", kOrderingSeeds, kOrderingEpochs, "ordering");
    return {b <= kCollapseCeiling && c - b >= kPairingGap,
            "(b) " + pct(b) + " need <= " + pct(kCollapseCeiling) + ", (c) " + pct(c) + " gap " + pct(c - b) +
                " need >= " + pct(kPairingGap)};
}

Outcome criterion_properties()
{
    const auto t0 = std::chrono::steady_clock::now();
    const auto bad = property_failures();
    const double t = seconds_since(t0);
    std::string detail;
    for (const auto& b : bad) detail += (detail.empty() ? "failed: " : ", ") + b;
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s%.1f s (limit %.0f s)", detail.empty() ? "" : "; ", t, kPropertySeconds);
    return {bad.empty() && t < kPropertySeconds, detail + buf};
}

Outcome criterion_blobs()
{
    bool ok = true;
    std::string detail;
    for (std::uint64_t seed : kBlobSeeds) {
        auto c = preset("a", "blobs");
        c.seed = seed;
        c.epochs = std::min(c.epochs, kBlobEpochs);
        const auto ds = load_dataset(c.dataset);
        const auto t0 = std::chrono::steady_clock::now();
        const auto res = train(c, ds.data, make_evaluator(ds.data, ds.labels), {false, false, true});
        const double t = seconds_since(t0);
        ok = ok && res.final_selected_accuracy >= kBlobTarget && t <= kBlobSeconds;
        char buf[96];
        std::snprintf(buf, sizeof buf, "%sseed %llu: %s in %d epochs, %.1f s", detail.empty() ? "" : "; ",
                      static_cast<unsigned long long>(seed), pct(res.final_selected_accuracy).c_str(), c.epochs, t);
        detail += buf;
    }
    return {ok, detail};
}

Outcome criterion_probe(Runner& r)
{
    const auto model = r.run(kDownstreamPreset, 0, kOrderingEpochs, "ordering").model;
    const auto& ds = r.mnist();
    const auto& im = ds.data.images();
    const Matrix pixels = Eigen::Map<const Eigen::Matrix<float, -1, -1, Eigen::RowMajor>>(
                              im.values().data(), static_cast<Eigen::Index>(im.size()),
                              static_cast<Eigen::Index>(im.image_size()))
                              .cast<double>();
    const auto split = random_split(ds.data.size(), kProbeTestFraction, 0);
    const ProbeConfig pc;
    const double base = ds.labels.probe(pixels, split, pc).test_accuracy;
    const double fc = ds.labels.probe(extract_features(model, im, Tap::fc), split, pc).test_accuracy;
    return {fc - base >= kProbeGap,
            "FC " + pct(fc) + ", pixels " + pct(base) + ", gap " + pct(fc - base) + ", need >= " + pct(kProbeGap)};
}

Outcome criterion_pretraining(Runner& r)
{
    const auto model = r.run(kDownstreamPreset, 0, kOrderingEpochs, "ordering").model;
    const auto& ds = r.mnist();
    FinetuneConfig fc;
    fc.labeled = kFinetuneLabels;
    fc.test = kFinetuneTest;
    fc.epochs = kFinetuneEpochs;
    fc.augment = false;
    const auto& arch = model.architecture();
    const double pre = finetune(&model, arch, ds.data, ds.labels, fc).test_accuracy;
    const double scratch = finetune(nullptr, arch, ds.data, ds.labels, fc).test_accuracy;
    return {pre - scratch >= kPretrainGap, "pretrained " + pct(pre) + ", scratch " + pct(scratch) + ", gap " +
                                               pct(pre - scratch) + ", need >= " + pct(kPretrainGap)};
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Acceptance criteria 1-7"};
    std::string work = "acceptance_runs";
    std::vector<int> only;
    bool verbose = false;
    app.add_option("--work", work, "cache directory for the MNIST runs");
    app.add_option("--only", only, "criteria to run (default: all)")->delimiter(',')->check(CLI::Range(1, 7));
    app.add_flag("--verbose", verbose, "per-epoch training log");
    CLI11_PARSE(app, argc, argv);

    const std::vector<std::pair<int, std::string>> titles = {
        {1, "MNIST preset (a), 100 epochs, 3 seeds, mean >= 85%"},
        {2, "MNIST ordering: (q) beats (o) by >= 25 points"},
        {3, "MNIST pairing: (b) <= 20%, (c) beats (b) by >= 20 points"},
        {4, "property suite"},
        {5, "blobs preset (a) >= 95% within 50 epochs and 60 s"},
        {6, "linear probe: FC tap of the (q) checkpoint beats raw pixels by >= 5 points"},
        {7, "fine-tuning on 5k labels from the (q) checkpoint beats scratch by >= 2 points"},
    };
    Runner runner(work, verbose);
    bool all = true;
    for (const auto& [id, title] : titles) {
        if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
        Outcome o;
        try {
            switch (id) {
            case 1: o = criterion_mnist(runner); break;
            case 2: o = criterion_regularization(runner); break;
            case 3: o = criterion_pairing(runner); break;
            case 4: o = criterion_properties(); break;
            case 5: o = criterion_blobs(); break;
            case 6: o = criterion_probe(runner); break;
            default: o = criterion_pretraining(runner); break;
            }
        } catch (const std::exception& e) {
            o = {false, std::string("error: ") + e.what()};
        }
        all = all && o.pass;
        std::printf("%s criterion %d: %s -- %s\n", o.pass ? "PASS" : "FAIL", id, title.c_str(), o.detail.c_str());
        std::fflush(stdout);
    }
    return all ? 0 : 1;
}
