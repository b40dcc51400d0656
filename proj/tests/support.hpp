// Shared generators for property-style tests.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <vector>

#include "infoclust/core_math.hpp"
#include "infoclust/image.hpp"

namespace infoclust::testing {

inline Matrix random_logits(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double scale = 2.0)
{
    std::normal_distribution<double> dist(0.0, scale);
    Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        m.data()[i] = dist(rng);
    }
    return m;
}

inline ProbBatch random_batch(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double scale = 2.0)
{
    return ProbBatch::from_logits(random_logits(rows, cols, rng, scale));
}

inline Matrix one_hot_rows(const std::vector<int>& ids, int k)
{
    Matrix m = Matrix::Zero(static_cast<Eigen::Index>(ids.size()), k);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        m(static_cast<Eigen::Index>(i), ids[i]) = 1.0;
    }
    return m;
}

inline ImageBatch random_images(std::size_t count, int c, int h, int w, std::mt19937_64& rng)
{
    std::uniform_real_distribution<float> dist(0.0f, 1.0f);
    std::vector<float> v(count * static_cast<std::size_t>(c) * h * w);
    for (auto& x : v) {
        x = dist(rng);
    }
    return ImageBatch(count, c, h, w, std::move(v));
}

/// Central finite difference of `f` at `x` along every coordinate.
inline Matrix finite_difference(const std::function<double(const Matrix&)>& f, const Matrix& x, double step)
{
    Matrix g(x.rows(), x.cols());
    Matrix probe = x;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        const double saved = probe.data()[i];
        probe.data()[i] = saved + step;
        const double up = f(probe);
        probe.data()[i] = saved - step;
        const double down = f(probe);
        probe.data()[i] = saved;
        g.data()[i] = (up - down) / (2.0 * step);
    }
    return g;
}

/// ||a - b|| / max(||a||, ||b||, tiny)
inline double relative_error(const Matrix& a, const Matrix& b)
{
    const double scale = std::max({a.norm(), b.norm(), 1e-12});
    return (a - b).norm() / scale;
}

}  // namespace infoclust::testing
