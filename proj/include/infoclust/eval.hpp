// Cluster accuracy under the best one-to-one cluster/class mapping, the
// linear-probe protocol on frozen features, and head selection.
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "infoclust/core_math.hpp"

namespace infoclust {

/// Minimum-cost assignment for a square matrix. Returns perm with perm[i] the
/// column assigned to row i. Throws on non-finite or non-square input.
std::vector<int> hungarian(const Matrix& cost);

/// Rectangular version: pads with zero-cost dummy rows/columns. Rows or
/// columns matched to a dummy get -1.
std::vector<int> hungarian_rect(const Matrix& cost);

double assignment_cost(const Matrix& cost, std::span<const int> perm);

class ContingencyTable {
public:
    /// counts(k, l) = #{i : preds[i] == k and labels[i] == l}
    ContingencyTable(std::span<const int> preds, std::span<const int> labels, int clusters, int classes);

    [[nodiscard]] int clusters() const { return clusters_; }
    [[nodiscard]] int classes() const { return classes_; }
    [[nodiscard]] std::int64_t total() const { return total_; }
    [[nodiscard]] std::int64_t at(int cluster, int label) const;

private:
    int clusters_;
    int classes_;
    std::int64_t total_ = 0;
    std::vector<std::int64_t> counts_;
};

struct Assignment {
    std::vector<int> mapping;  ///< cluster -> class, -1 when unmatched
    std::int64_t matched = 0;
    double accuracy = 0.0;
};

/// Accuracy of the best injective cluster -> class map.
Assignment cluster_accuracy(std::span<const int> preds, std::span<const int> labels, int clusters, int classes);
inline Assignment cluster_accuracy(std::span<const int> preds, std::span<const int> labels, int k)
{
    return cluster_accuracy(preds, labels, k, k);
}

/// Row-wise argmax (lowest index on ties).
std::vector<int> argmax_rows(const Matrix& probs);

struct ProbeConfig {
    int epochs = 500;
    double learning_rate = 0.1;
    bool standardize = true;  ///< z-score features with training-split statistics
};

struct ProbeResult {
    double train_accuracy = 0.0;
    double test_accuracy = 0.0;
};

/// Multinomial logistic regression by full-batch gradient descent on the
/// train rows, evaluated on the test rows. `classes` <= 0 infers it from labels.
ProbeResult linear_probe(const Matrix& features, std::span<const int> labels, std::span<const std::size_t> train,
                         std::span<const std::size_t> test, const ProbeConfig& config = {}, int classes = 0);

struct Split {
    std::vector<std::size_t> train;
    std::vector<std::size_t> test;
};

/// Seeded random split with round(test_fraction * n) test rows.
Split random_split(std::size_t n, double test_fraction, std::uint64_t seed);

/// Primary head with the lowest loss; ties go to the lowest id.
std::size_t head_select(std::span<const double> losses, std::span<const std::size_t> primary_heads);
std::size_t head_select(std::span<const double> losses);

}  // namespace infoclust
