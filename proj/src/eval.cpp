#include "infoclust/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>

namespace infoclust {

std::vector<int> hungarian(const Matrix& cost)
{
    const auto n = static_cast<int>(cost.rows());
    if (cost.cols() != cost.rows()) {
        throw std::invalid_argument("hungarian: cost matrix must be square");
    }
    if (!cost.allFinite()) {
        throw std::invalid_argument("hungarian: non-finite cost");
    }
    if (n == 0) return {};

    // Shortest augmenting path with row/column potentials, 1-based internally.
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
    std::vector<int> p(n + 1, 0), way(n + 1, 0);
    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(n + 1, inf);
        std::vector<char> used(n + 1, 0);
        do {
            used[j0] = 1;
            const int i0 = p[j0];
            double delta = inf;
            int j1 = 0;
            for (int j = 1; j <= n; ++j) {
                if (used[j]) continue;
                const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (int j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const int j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0 != 0);
    }
    std::vector<int> perm(n);
    for (int j = 1; j <= n; ++j) {
        perm[p[j] - 1] = j - 1;
    }
    return perm;
}

std::vector<int> hungarian_rect(const Matrix& cost)
{
    const auto rows = cost.rows();
    const auto cols = cost.cols();
    const auto n = std::max(rows, cols);
    Matrix square = Matrix::Zero(n, n);
    square.topLeftCorner(rows, cols) = cost;
    auto perm = hungarian(square);
    perm.resize(static_cast<std::size_t>(rows));
    for (auto& j : perm) {
        if (j >= cols) j = -1;
    }
    return perm;
}

double assignment_cost(const Matrix& cost, std::span<const int> perm)
{
    double total = 0.0;
    for (std::size_t i = 0; i < perm.size(); ++i) {
        if (perm[i] >= 0) total += cost(static_cast<Eigen::Index>(i), perm[i]);
    }
    return total;
}

ContingencyTable::ContingencyTable(std::span<const int> preds, std::span<const int> labels, int clusters,
                                   int classes)
    : clusters_(clusters), classes_(classes)
{
    if (clusters < 1 || classes < 1) {
        throw std::invalid_argument("contingency: cluster and class counts must be positive");
    }
    if (preds.size() != labels.size()) {
        throw std::invalid_argument("contingency: preds and labels differ in length");
    }
    counts_.assign(static_cast<std::size_t>(clusters) * classes, 0);
    for (std::size_t i = 0; i < preds.size(); ++i) {
        if (preds[i] < 0 || preds[i] >= clusters) {
            throw std::out_of_range("contingency: cluster id " + std::to_string(preds[i]) + " out of range");
        }
        if (labels[i] < 0 || labels[i] >= classes) {
            throw std::out_of_range("contingency: class id " + std::to_string(labels[i]) + " out of range");
        }
        ++counts_[static_cast<std::size_t>(preds[i]) * classes + labels[i]];
    }
    total_ = static_cast<std::int64_t>(preds.size());
}

std::int64_t ContingencyTable::at(int cluster, int label) const
{
    return counts_.at(static_cast<std::size_t>(cluster) * classes_ + label);
}

Assignment cluster_accuracy(std::span<const int> preds, std::span<const int> labels, int clusters, int classes)
{
    const ContingencyTable table(preds, labels, clusters, classes);
    if (table.total() == 0) {
        throw std::invalid_argument("cluster_accuracy: empty input");
    }
    Matrix cost(clusters, classes);
    for (int k = 0; k < clusters; ++k)
        for (int l = 0; l < classes; ++l) cost(k, l) = -static_cast<double>(table.at(k, l));
    Assignment out;
    out.mapping = hungarian_rect(cost);
    for (int k = 0; k < clusters; ++k) {
        if (out.mapping[static_cast<std::size_t>(k)] >= 0) out.matched += table.at(k, out.mapping[k]);
    }
    out.accuracy = static_cast<double>(out.matched) / static_cast<double>(table.total());
    return out;
}

std::vector<int> argmax_rows(const Matrix& probs)
{
    std::vector<int> out(static_cast<std::size_t>(probs.rows()));
    for (Eigen::Index b = 0; b < probs.rows(); ++b) {
        Eigen::Index k = 0;
        probs.row(b).maxCoeff(&k);
        out[static_cast<std::size_t>(b)] = static_cast<int>(k);
    }
    return out;
}

namespace {

Matrix gather_rows(const Matrix& m, std::span<const std::size_t> rows)
{
    Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= static_cast<std::size_t>(m.rows())) {
            throw std::out_of_range("linear_probe: split index out of range");
        }
        out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(rows[i]));
    }
    return out;
}

double accuracy_of(const Matrix& scores, std::span<const int> labels, std::span<const std::size_t> rows)
{
    const auto pred = argmax_rows(scores);
    std::size_t hit = 0;
    for (std::size_t i = 0; i < rows.size(); ++i) hit += pred[i] == labels[rows[i]] ? 1 : 0;
    return static_cast<double>(hit) / static_cast<double>(rows.size());
}

}  // namespace

ProbeResult linear_probe(const Matrix& features, std::span<const int> labels, std::span<const std::size_t> train,
                         std::span<const std::size_t> test, const ProbeConfig& config, int classes)
{
    if (train.empty() || test.empty()) {
        throw std::invalid_argument("linear_probe: degenerate split (empty train or test set)");
    }
    if (labels.size() != static_cast<std::size_t>(features.rows())) {
        throw std::invalid_argument("linear_probe: label count does not match feature rows");
    }
    if (!features.allFinite()) {
        throw std::invalid_argument("linear_probe: non-finite features");
    }
    if (config.epochs < 0 || !(config.learning_rate > 0.0)) {
        throw std::invalid_argument("linear_probe: invalid optimizer settings");
    }
    if (classes <= 0) {
        classes = *std::max_element(labels.begin(), labels.end()) + 1;
    }
    for (int l : labels) {
        if (l < 0 || l >= classes) throw std::out_of_range("linear_probe: label out of range");
    }

    Matrix xtr = gather_rows(features, train);
    Matrix xte = gather_rows(features, test);
    if (config.standardize) {
        const Eigen::RowVectorXd mean = xtr.colwise().mean();
        Eigen::RowVectorXd sd = ((xtr.rowwise() - mean).array().square().colwise().mean()).sqrt();
        sd = sd.unaryExpr([](double s) { return s > 1e-12 ? s : 1.0; });
        xtr = (xtr.rowwise() - mean).array().rowwise() / sd.array();
        xte = (xte.rowwise() - mean).array().rowwise() / sd.array();
    }

    const auto n = static_cast<double>(train.size());
    Matrix y = Matrix::Zero(xtr.rows(), classes);
    for (std::size_t i = 0; i < train.size(); ++i) y(static_cast<Eigen::Index>(i), labels[train[i]]) = 1.0;

    Matrix w = Matrix::Zero(xtr.cols(), classes);
    Eigen::RowVectorXd bias = Eigen::RowVectorXd::Zero(classes);
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        Matrix logits = (xtr * w).rowwise() + bias;
        const Matrix residual = (softmax(logits) - y) / n;
        w.noalias() -= config.learning_rate * (xtr.transpose() * residual);
        bias -= config.learning_rate * residual.colwise().sum();
    }

    ProbeResult out;
    out.train_accuracy = accuracy_of((xtr * w).rowwise() + bias, labels, train);
    out.test_accuracy = accuracy_of((xte * w).rowwise() + bias, labels, test);
    return out;
}

Split random_split(std::size_t n, double test_fraction, std::uint64_t seed)
{
    if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
        throw std::invalid_argument("random_split: test fraction must be in (0, 1)");
    }
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::mt19937_64 rng(seed);
    for (std::size_t i = n; i > 1; --i) {
        std::swap(idx[i - 1], idx[static_cast<std::size_t>(rng() % i)]);
    }
    const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(n)));
    if (n_test == 0 || n_test == n) {
        throw std::invalid_argument("random_split: degenerate split");
    }
    Split s;
    s.test.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_test));
    s.train.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_test), idx.end());
    return s;
}

std::size_t head_select(std::span<const double> losses, std::span<const std::size_t> primary_heads)
{
    if (primary_heads.empty()) {
        throw std::invalid_argument("head_select: no primary head");
    }
    std::size_t best = primary_heads[0];
    for (std::size_t h : primary_heads) {
        if (h >= losses.size()) throw std::out_of_range("head_select: head id out of range");
        if (losses[h] < losses[best] || (losses[h] == losses[best] && h < best)) best = h;
    }
    return best;
}

std::size_t head_select(std::span<const double> losses)
{
    std::vector<std::size_t> all(losses.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    return head_select(losses, all);
}

}  // namespace infoclust
