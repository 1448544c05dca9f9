#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

namespace w2w {

using Vector = std::vector<double>;

/// Dense row-major float64 matrix.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), values_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> values);

    static Matrix identity(std::size_t n);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return values_.size(); }
    bool empty() const noexcept { return values_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return values_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return values_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {values_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {values_.data() + r * cols_, cols_}; }

    std::span<double> values() noexcept { return values_; }
    std::span<const double> values() const noexcept { return values_; }
    const std::vector<double>& storage() const noexcept { return values_; }

    Matrix transposed() const;
    bool all_finite() const noexcept;

    friend bool operator==(const Matrix&, const Matrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> values_;
};

Matrix matmul(const Matrix& a, const Matrix& b);
// a * b^T, the common case for row-stored bases.
Matrix matmul_bt(const Matrix& a, const Matrix& b);
Vector matvec(const Matrix& a, std::span<const double> x);
// a^T * x
Vector matvec_t(const Matrix& a, std::span<const double> x);

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> a);
double cosine(std::span<const double> a, std::span<const double> b);
void axpy(double alpha, std::span<const double> x, std::span<double> y);
Vector subtract(std::span<const double> a, std::span<const double> b);
bool all_finite(std::span<const double> v) noexcept;

/// Deterministic random source. Normal draws use Box-Muller on top of the
/// mt19937_64 bit stream so sequences agree across standard libraries.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

    std::uint64_t seed() const noexcept { return seed_; }
    std::uint64_t next_u64() { return engine_(); }
    // Uniform on [0, 1).
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    std::size_t index(std::size_t n);
    bool coin() { return (engine_() >> 63) != 0; }
    double normal();
    Vector normal_vector(std::size_t n, double sigma = 1.0);

private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

double gaussian(Rng& rng, double mu, double sigma);

// SplitMix64 finalizer; used to derive independent child seeds.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt);

struct EigenResult {
    Vector values;  // descending
    Matrix vectors; // row i is the unit eigenvector for values[i]
};

/// Cyclic Jacobi eigensolver for symmetric matrices.
EigenResult symmetric_eigen(const Matrix& a, double tol = 1e-14, int max_sweeps = 100);

struct PcaOptions {
    // Divide each column by its standard deviation before the decomposition.
    bool standardize = false;
};

struct PcaResult {
    Vector mean;
    Matrix basis;  // m x d, orthonormal rows
    Vector eigvals; // m, variance along each row (N-1 normalization)
    Vector scale;   // d, ones unless standardized
    double total_variance = 0.0;
};

PcaResult pca_fit(const Matrix& x, std::size_t m, const PcaOptions& options = {});

/// argmin_w ||A w - y|| (+ ridge ||w||^2) via the normal equations.
Vector solve_least_squares(const Matrix& a, std::span<const double> y, double ridge = 0.0);

inline constexpr double kSingularRcond = 1e-12;

}  // namespace w2w
