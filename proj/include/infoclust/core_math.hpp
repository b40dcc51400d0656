// Information-theoretic loss vocabulary over mini-batches of cluster posteriors.
//
// Everything here is in nats. Probabilities are floored at kProbabilityFloor
// before any logarithm so one-hot outputs never produce NaN.
#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace infoclust {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

inline constexpr double kProbabilityFloor = 1e-12;
inline constexpr double kDistributionTolerance = 1e-6;

/// B x K row-stochastic matrix of per-sample cluster posteriors.
class ProbBatch {
public:
    ProbBatch() = default;

    /// Validates shape (B >= 1, K >= 2), entry range and row sums.
    explicit ProbBatch(Matrix rows);

    /// Row-wise softmax of unnormalized scores.
    static ProbBatch from_logits(const Matrix& logits);

    [[nodiscard]] std::size_t size() const { return static_cast<std::size_t>(rows_.rows()); }
    [[nodiscard]] std::size_t clusters() const { return static_cast<std::size_t>(rows_.cols()); }
    [[nodiscard]] const Matrix& matrix() const { return rows_; }
    [[nodiscard]] std::span<const double> row(std::size_t b) const
    {
        return {rows_.data() + b * clusters(), clusters()};
    }

private:
    Matrix rows_;
};

/// Empirical estimate of p(Y, Y~) together with its two marginals.
class JointMatrix {
public:
    JointMatrix() = default;

    /// Validates nonnegativity and unit mass, then derives the marginals.
    explicit JointMatrix(Matrix entries);

    [[nodiscard]] std::size_t clusters() const { return static_cast<std::size_t>(entries_.rows()); }
    [[nodiscard]] const Matrix& entries() const { return entries_; }
    [[nodiscard]] const Vector& marginal_row() const { return row_; }
    [[nodiscard]] const Vector& marginal_col() const { return col_; }

private:
    Matrix entries_;
    Vector row_;
    Vector col_;
};

/// A scalar loss together with the named components it was assembled from.
struct LossValue {
    double scalar = 0.0;
    std::map<std::string, double> terms;
};

double entropy(std::span<const double> p);
double conditional_entropy(const ProbBatch& batch);
std::vector<double> marginal(const ProbBatch& batch);

/// lambda * H(Y) - H(Y|X). Terms: "h_y", "h_y_given_x".
LossValue mi_xy(const ProbBatch& batch, double lambda);

JointMatrix joint(const ProbBatch& batch, const ProbBatch& batch_t, bool symmetrize);
double mi_yy(const JointMatrix& j);

/// KL(p || q); q is floored before the log.
double kl_div(std::span<const double> p, std::span<const double> q);

// ---------------------------------------------------------------------------
// Loss composition

enum class TermKind { mi_xy, mi_yy, kl_reg };

std::string to_string(TermKind kind);
TermKind term_kind_from_string(const std::string& name);

/// One weighted term of an objective. `transform` names the transformation the
/// term is bound to (empty for mi_xy).
struct LossTerm {
    TermKind kind = TermKind::mi_xy;
    double weight = 1.0;
    std::string transform;
    double lambda = 4.0;

    /// Key used in LossValue::terms and in the metrics CSV, e.g. "mi_yy:geo".
    [[nodiscard]] std::string key() const;
};

struct LossComposition {
    std::vector<LossTerm> terms;
    bool symmetrize_joint = true;
};

/// MI terms enter negated (they are maximized), KL terms enter positively.
/// Throws if a referenced term is missing from `parts` or `parts` carries a
/// key the composition does not know.
LossValue compose_loss(const LossComposition& composition, const std::map<std::string, double>& parts);

// ---------------------------------------------------------------------------
// Differentiable forms. Gradients are with respect to the posterior matrices;
// chain through softmax_backward to reach the logits.

struct ValueAndGrad {
    double value = 0.0;
    Matrix grad;
};

struct PairValueAndGrad {
    double value = 0.0;
    Matrix grad_first;
    Matrix grad_second;
};

Matrix softmax(const Matrix& logits);

/// d(loss)/d(logits) given d(loss)/d(probs) for row-wise softmax outputs.
Matrix softmax_backward(const Matrix& probs, const Matrix& grad_probs);

ValueAndGrad mi_xy_with_grad(const Matrix& probs, double lambda);

/// MI of the (optionally symmetrized) joint of two posterior batches.
PairValueAndGrad mi_yy_with_grad(const Matrix& probs, const Matrix& probs_t, bool symmetrize);

/// Mean over rows of KL(p_b || q_b).
PairValueAndGrad kl_rows_with_grad(const Matrix& p, const Matrix& q);

}  // namespace infoclust
