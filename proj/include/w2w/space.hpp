#pragma once

#include <cstddef>
#include <span>
#include <tuple>
#include <utility>
#include <vector>

#include "json.hpp"

#include "w2w/lora.hpp"
#include "w2w/numerics.hpp"

namespace w2w {

/// Linear subspace of adapter weights: theta = mean + beta^T basis.
struct W2wSpace {
    Vector mean;        // d
    Matrix basis;       // m x d, orthonormal rows by descending eigenvalue
    Vector eigvals;     // m
    Vector coeff_mu;    // m, mean of training projections
    Vector coeff_sigma; // m, std (N-1) of training projections
    double total_variance = 0.0;
    std::size_t fit_rows = 0;

    std::size_t m() const noexcept { return basis.rows(); }
    std::size_t d() const noexcept { return basis.cols(); }
    // The leading `m` components as a space of their own.
    W2wSpace truncated(std::size_t m) const;
    double explained_variance_ratio() const;
};

W2wSpace fit_space(const WeightDataset& ds, std::size_t m);

Vector project(const W2wSpace& space, std::span<const double> theta);
Vector unproject(const W2wSpace& space, std::span<const double> beta);
Matrix project_all(const W2wSpace& space, const Matrix& thetas);

Vector sample_model(const W2wSpace& space, Rng& rng);

struct NeighborHit {
    std::size_t index = 0;
    double cosine = 0.0;
};

// Highest-cosine row of `projected` (ties go to the lower index).
NeighborHit nearest_neighbor(std::span<const double> beta, const Matrix& projected);
NeighborHit nearest_neighbor(const W2wSpace& space, std::span<const double> beta, const WeightDataset& ds);

struct Moments {
    double mean = 0.0;
    double stddev = 0.0;
    double skewness = 0.0;
    double excess_kurtosis = 0.0;
};

Moments sample_moments(std::span<const double> values);
double correlation(std::span<const double> a, std::span<const double> b);

struct ComponentDiagnostics {
    std::size_t component = 0;
    Moments moments;
    double bin_low = 0.0;
    double bin_width = 0.0;
    std::vector<std::size_t> histogram;
};

struct CoeffReport {
    std::vector<ComponentDiagnostics> components;
    // (i, j, corr) over the first three components.
    std::vector<std::tuple<std::size_t, std::size_t, double>> correlations;

    nlohmann::ordered_json to_json() const;
};

CoeffReport coeff_diagnostics(const W2wSpace& space, const WeightDataset& ds, std::size_t components = 8,
                              std::size_t bins = 20);

}  // namespace w2w
