#include "infoclust/core_math.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

namespace infoclust {

namespace {

double safe_log(double p) { return std::log(std::max(p, kProbabilityFloor)); }

void check_distribution(std::span<const double> p, const char* what)
{
    if (p.empty()) {
        throw std::invalid_argument(std::string(what) + ": empty distribution");
    }
    double sum = 0.0;
    for (double v : p) {
        if (!std::isfinite(v) || v < -kDistributionTolerance || v > 1.0 + kDistributionTolerance) {
            throw std::invalid_argument(std::string(what) + ": entry outside [0, 1]");
        }
        sum += v;
    }
    if (std::abs(sum - 1.0) > kDistributionTolerance) {
        throw std::invalid_argument(std::string(what) + ": entries do not sum to 1");
    }
}

}  // namespace

ProbBatch::ProbBatch(Matrix rows) : rows_(std::move(rows))
{
    if (rows_.rows() < 1) {
        throw std::invalid_argument("ProbBatch: empty batch");
    }
    if (rows_.cols() < 2) {
        throw std::invalid_argument("ProbBatch: need at least 2 clusters");
    }
    for (std::size_t b = 0; b < size(); ++b) {
        check_distribution(row(b), "ProbBatch");
    }
}

ProbBatch ProbBatch::from_logits(const Matrix& logits) { return ProbBatch(softmax(logits)); }

JointMatrix::JointMatrix(Matrix entries) : entries_(std::move(entries))
{
    if (entries_.rows() != entries_.cols() || entries_.rows() < 1) {
        throw std::invalid_argument("JointMatrix: entries must be square and non-empty");
    }
    if ((entries_.array() < -1e-12).any() || !entries_.allFinite()) {
        throw std::invalid_argument("JointMatrix: negative or non-finite entry");
    }
    if (std::abs(entries_.sum() - 1.0) > kDistributionTolerance) {
        throw std::invalid_argument("JointMatrix: entries do not sum to 1");
    }
    row_ = entries_.rowwise().sum();
    col_ = entries_.colwise().sum().transpose();
}

double entropy(std::span<const double> p)
{
    check_distribution(p, "entropy");
    double h = 0.0;
    for (double v : p) {
        if (v > 0.0) {
            h -= v * safe_log(v);
        }
    }
    return std::max(h, 0.0);
}

double conditional_entropy(const ProbBatch& batch)
{
    if (batch.size() == 0) {
        throw std::invalid_argument("conditional_entropy: empty batch");
    }
    double sum = 0.0;
    for (std::size_t b = 0; b < batch.size(); ++b) {
        sum += entropy(batch.row(b));
    }
    return sum / static_cast<double>(batch.size());
}

std::vector<double> marginal(const ProbBatch& batch)
{
    if (batch.size() == 0) {
        throw std::invalid_argument("marginal: empty batch");
    }
    const Vector mean = batch.matrix().colwise().mean().transpose();
    return {mean.data(), mean.data() + mean.size()};
}

LossValue mi_xy(const ProbBatch& batch, double lambda)
{
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) {
        throw std::invalid_argument("mi_xy: lambda must be finite and >= 0");
    }
    const auto p_y = marginal(batch);
    const double h_y = entropy(p_y);
    const double h_y_given_x = conditional_entropy(batch);
    return {lambda * h_y - h_y_given_x, {{"h_y", h_y}, {"h_y_given_x", h_y_given_x}}};
}

JointMatrix joint(const ProbBatch& batch, const ProbBatch& batch_t, bool symmetrize)
{
    if (batch.size() != batch_t.size() || batch.clusters() != batch_t.clusters()) {
        throw std::invalid_argument("joint: batch shapes differ");
    }
    Matrix j = batch.matrix().transpose() * batch_t.matrix() / static_cast<double>(batch.size());
    if (symmetrize) {
        j = (0.5 * (j + j.transpose())).eval();
    }
    return JointMatrix(std::move(j));
}

double mi_yy(const JointMatrix& j)
{
    const Matrix& p = j.entries();
    const Vector& r = j.marginal_row();
    const Vector& c = j.marginal_col();
    double mi = 0.0;
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
        for (Eigen::Index k = 0; k < p.cols(); ++k) {
            const double pik = p(i, k);
            if (pik > 0.0) {
                mi += pik * (safe_log(pik) - safe_log(r(i)) - safe_log(c(k)));
            }
        }
    }
    return mi;
}

double kl_div(std::span<const double> p, std::span<const double> q)
{
    if (p.size() != q.size()) {
        throw std::invalid_argument("kl_div: length mismatch");
    }
    double kl = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] > 0.0) {
            kl += p[i] * (safe_log(p[i]) - safe_log(q[i]));
        }
    }
    return std::max(kl, 0.0);
}

// ---------------------------------------------------------------------------

std::string to_string(TermKind kind)
{
    switch (kind) {
    case TermKind::mi_xy: return "mi_xy";
    case TermKind::mi_yy: return "mi_yy";
    case TermKind::kl_reg: return "kl_reg";
    }
    return "?";
}

TermKind term_kind_from_string(const std::string& name)
{
    if (name == "mi_xy") return TermKind::mi_xy;
    if (name == "mi_yy") return TermKind::mi_yy;
    if (name == "kl_reg") return TermKind::kl_reg;
    throw std::invalid_argument("unknown loss term '" + name + "'");
}

std::string LossTerm::key() const
{
    if (kind == TermKind::mi_xy) {
        return "mi_xy";
    }
    return to_string(kind) + ":" + transform;
}

LossValue compose_loss(const LossComposition& composition, const std::map<std::string, double>& parts)
{
    LossValue out;
    std::set<std::string> used;
    for (const auto& term : composition.terms) {
        const auto key = term.key();
        const auto it = parts.find(key);
        if (it == parts.end()) {
            throw std::invalid_argument("compose_loss: missing term '" + key + "'");
        }
        const double sign = term.kind == TermKind::kl_reg ? 1.0 : -1.0;
        out.scalar += sign * term.weight * it->second;
        out.terms[key] = it->second;
        used.insert(key);
    }
    for (const auto& [key, value] : parts) {
        if (!used.contains(key)) {
            throw std::invalid_argument("compose_loss: unknown term '" + key + "'");
        }
    }
    return out;
}

// ---------------------------------------------------------------------------

Matrix softmax(const Matrix& logits)
{
    Matrix out(logits.rows(), logits.cols());
    for (Eigen::Index b = 0; b < logits.rows(); ++b) {
        const double top = logits.row(b).maxCoeff();
        out.row(b) = (logits.row(b).array() - top).exp();
        out.row(b) /= out.row(b).sum();
    }
    return out;
}

Matrix softmax_backward(const Matrix& probs, const Matrix& grad_probs)
{
    const Eigen::VectorXd inner = (probs.array() * grad_probs.array()).rowwise().sum();
    return probs.array() * (grad_probs.colwise() - inner).array();
}

ValueAndGrad mi_xy_with_grad(const Matrix& probs, double lambda)
{
    const auto batch = static_cast<double>(probs.rows());
    const Eigen::RowVectorXd mean = probs.colwise().mean();
    const Eigen::RowVectorXd log_mean = mean.unaryExpr(&safe_log);
    const Matrix log_p = probs.unaryExpr(&safe_log);

    const double h_y = -(mean.array() * log_mean.array()).sum();
    const double h_y_given_x = -(probs.array() * log_p.array()).sum() / batch;

    ValueAndGrad out;
    out.value = lambda * h_y - h_y_given_x;
    out.grad = (log_p.array() + 1.0) / batch;
    out.grad.rowwise() -= (lambda / batch) * (log_mean.array() + 1.0).matrix();
    return out;
}

PairValueAndGrad mi_yy_with_grad(const Matrix& probs, const Matrix& probs_t, bool symmetrize)
{
    if (probs.rows() != probs_t.rows() || probs.cols() != probs_t.cols()) {
        throw std::invalid_argument("mi_yy_with_grad: batch shapes differ");
    }
    const auto batch = static_cast<double>(probs.rows());
    Matrix j = probs.transpose() * probs_t / batch;
    if (symmetrize) {
        j = (0.5 * (j + j.transpose())).eval();
    }
    const Eigen::VectorXd log_r = j.rowwise().sum().unaryExpr(&safe_log);
    const Eigen::RowVectorXd log_c = j.colwise().sum().unaryExpr(&safe_log);
    Matrix g = j.unaryExpr(&safe_log);
    g.colwise() -= log_r;
    g.rowwise() -= log_c;

    PairValueAndGrad out;
    out.value = (j.array() * g.array()).sum();
    g.array() -= 1.0;
    if (symmetrize) {
        g = (0.5 * (g + g.transpose())).eval();
    }
    out.grad_first = probs_t * g.transpose() / batch;
    out.grad_second = probs * g / batch;
    return out;
}

PairValueAndGrad kl_rows_with_grad(const Matrix& p, const Matrix& q)
{
    if (p.rows() != q.rows() || p.cols() != q.cols()) {
        throw std::invalid_argument("kl_rows_with_grad: shapes differ");
    }
    const auto batch = static_cast<double>(p.rows());
    const Matrix log_p = p.unaryExpr(&safe_log);
    const Matrix q_floor = q.cwiseMax(kProbabilityFloor);
    const Matrix log_q = q_floor.array().log();

    PairValueAndGrad out;
    out.value = (p.array() * (log_p - log_q).array()).sum() / batch;
    out.grad_first = (log_p - log_q).array() + 1.0;
    out.grad_first /= batch;
    out.grad_second = -(p.array() / q_floor.array()) / batch;
    return out;
}

}  // namespace infoclust
