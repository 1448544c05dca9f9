#include "w2w/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "w2w/error.hpp"

namespace w2w {

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> values)
    : rows_(rows), cols_(cols), values_(std::move(values)) {
    if (values_.size() != rows * cols) {
        throw ShapeMismatch("matrix storage has " + std::to_string(values_.size()) + " values, expected " +
                            std::to_string(rows * cols));
    }
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

Matrix Matrix::transposed() const {
    Matrix t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r)
        for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
    return t;
}

bool Matrix::all_finite() const noexcept { return w2w::all_finite(values_); }

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) throw ShapeMismatch("matmul inner dimensions differ");
    Matrix out(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto orow = out.row(i);
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            auto brow = b.row(k);
            for (std::size_t j = 0; j < b.cols(); ++j) orow[j] += aik * brow[j];
        }
    }
    return out;
}

Matrix matmul_bt(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) throw ShapeMismatch("matmul_bt column counts differ");
    Matrix out(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.rows(); ++j) out(i, j) = dot(a.row(i), b.row(j));
    return out;
}

Vector matvec(const Matrix& a, std::span<const double> x) {
    if (a.cols() != x.size()) throw ShapeMismatch("matvec length mismatch");
    Vector y(a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) y[i] = dot(a.row(i), x);
    return y;
}

Vector matvec_t(const Matrix& a, std::span<const double> x) {
    if (a.rows() != x.size()) throw ShapeMismatch("matvec_t length mismatch");
    Vector y(a.cols(), 0.0);
    for (std::size_t i = 0; i < a.rows(); ++i) axpy(x[i], a.row(i), y);
    return y;
}

double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

double cosine(std::span<const double> a, std::span<const double> b) {
    const double na = norm2(a);
    const double nb = norm2(b);
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot(a, b) / (na * nb);
}

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
    for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

Vector subtract(std::span<const double> a, std::span<const double> b) {
    Vector out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
    return out;
}

bool all_finite(std::span<const double> v) noexcept {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

std::size_t Rng::index(std::size_t n) {
    return static_cast<std::size_t>(uniform() * static_cast<double>(n)) % n;
}

double Rng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    double u1 = 0.0;
    do {
        u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * M_PI * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
}

Vector Rng::normal_vector(std::size_t n, double sigma) {
    Vector v(n);
    for (auto& x : v) x = sigma * normal();
    return v;
}

double gaussian(Rng& rng, double mu, double sigma) {
    if (!(sigma >= 0.0)) throw InvalidSigma("sigma must be non-negative, got " + std::to_string(sigma));
    if (sigma == 0.0) return mu;
    return mu + sigma * rng.normal();
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

namespace {

// Flip each row so its entry of largest magnitude is positive.
void canonicalize_signs(Matrix& rows) {
    for (std::size_t r = 0; r < rows.rows(); ++r) {
        auto row = rows.row(r);
        std::size_t best = 0;
        for (std::size_t c = 1; c < row.size(); ++c)
            if (std::abs(row[c]) > std::abs(row[best])) best = c;
        if (row[best] < 0.0)
            for (auto& x : row) x = -x;
    }
}

// Modified Gram-Schmidt over rows; rows that collapse are replaced by the
// first canonical axis not yet spanned.
void orthonormalize_rows(Matrix& rows) {
    const std::size_t d = rows.cols();
    std::size_t next_axis = 0;
    for (std::size_t r = 0; r < rows.rows(); ++r) {
        auto row = rows.row(r);
        for (int pass = 0; pass < 2; ++pass)
            for (std::size_t q = 0; q < r; ++q) axpy(-dot(rows.row(q), row), rows.row(q), row);
        double n = norm2(row);
        while (n < 1e-10 && next_axis < d) {
            std::fill(row.begin(), row.end(), 0.0);
            row[next_axis++] = 1.0;
            for (int pass = 0; pass < 2; ++pass)
                for (std::size_t q = 0; q < r; ++q) axpy(-dot(rows.row(q), row), rows.row(q), row);
            n = norm2(row);
        }
        for (auto& x : row) x /= n;
    }
}

}  // namespace

EigenResult symmetric_eigen(const Matrix& input, double tol, int max_sweeps) {
    if (input.rows() != input.cols()) throw ShapeMismatch("eigendecomposition needs a square matrix");
    const std::size_t n = input.rows();
    Matrix a = input;
    Matrix v = Matrix::identity(n);

    double total = 0.0;
    for (double x : a.values()) total += x * x;

    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        double off = 0.0;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
        if (off <= tol * tol * total || off == 0.0) break;

        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a(p, q);
                if (apq == 0.0) continue;
                const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
                const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a(k, p);
                    const double akq = a(k, q);
                    a(k, p) = c * akp - s * akq;
                    a(k, q) = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a(p, k);
                    const double aqk = a(q, k);
                    a(p, k) = c * apk - s * aqk;
                    a(q, k) = s * apk + c * aqk;
                }
                a(p, q) = 0.0;
                a(q, p) = 0.0;
                for (std::size_t k = 0; k < n; ++k) {
                    const double vkp = v(k, p);
                    const double vkq = v(k, q);
                    v(k, p) = c * vkp - s * vkq;
                    v(k, q) = s * vkp + c * vkq;
                }
            }
        }
    }

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return a(i, i) > a(j, j); });

    EigenResult result;
    result.values.resize(n);
    result.vectors = Matrix(n, n);
    for (std::size_t r = 0; r < n; ++r) {
        result.values[r] = a(order[r], order[r]);
        for (std::size_t k = 0; k < n; ++k) result.vectors(r, k) = v(k, order[r]);
    }
    canonicalize_signs(result.vectors);
    return result;
}

PcaResult pca_fit(const Matrix& x, std::size_t m, const PcaOptions& options) {
    const std::size_t n = x.rows();
    const std::size_t d = x.cols();
    if (n < 2) throw DimensionError("PCA needs at least 2 rows, got " + std::to_string(n));
    if (m < 1 || m > std::min(n - 1, d))
        throw DimensionError("component count " + std::to_string(m) + " outside [1, " +
                             std::to_string(std::min(n - 1, d)) + "]");
    if (!x.all_finite()) throw DegenerateData("input contains non-finite values");

    PcaResult out;
    out.mean.assign(d, 0.0);
    for (std::size_t i = 0; i < n; ++i) axpy(1.0, x.row(i), out.mean);
    for (auto& v : out.mean) v /= static_cast<double>(n);

    Matrix centered(n, d);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) centered(i, j) = x(i, j) - out.mean[j];

    out.scale.assign(d, 1.0);
    if (options.standardize) {
        for (std::size_t j = 0; j < d; ++j) {
            double ss = 0.0;
            for (std::size_t i = 0; i < n; ++i) ss += centered(i, j) * centered(i, j);
            const double sd = std::sqrt(ss / static_cast<double>(n - 1));
            out.scale[j] = sd > 0.0 ? sd : 1.0;
            for (std::size_t i = 0; i < n; ++i) centered(i, j) /= out.scale[j];
        }
    }

    const double denom = static_cast<double>(n - 1);
    double ss = 0.0;
    for (double v : centered.values()) ss += v * v;
    out.total_variance = ss / denom;
    if (out.total_variance == 0.0) throw DegenerateData("all rows are identical");

    out.basis = Matrix(m, d);
    out.eigvals.assign(m, 0.0);
    if (n < d) {
        // Gram route: eigenvectors of Xc Xc^T map to principal axes through Xc^T.
        const Matrix gram = matmul_bt(centered, centered);
        const EigenResult eig = symmetric_eigen(gram);
        const double floor = 1e-12 * std::max(eig.values[0], 0.0);
        for (std::size_t k = 0; k < m; ++k) {
            const double lambda = eig.values[k];
            out.eigvals[k] = std::max(lambda, 0.0) / denom;
            if (lambda <= floor) continue;  // left zero; completed below
            Vector axis = matvec_t(centered, eig.vectors.row(k));
            const double len = norm2(axis);
            for (std::size_t j = 0; j < d; ++j) out.basis(k, j) = axis[j] / len;
        }
    } else {
        Matrix cov = matmul(centered.transposed(), centered);
        for (auto& v : cov.values()) v /= denom;
        const EigenResult eig = symmetric_eigen(cov);
        for (std::size_t k = 0; k < m; ++k) {
            out.eigvals[k] = std::max(eig.values[k], 0.0);
            std::copy(eig.vectors.row(k).begin(), eig.vectors.row(k).end(), out.basis.row(k).begin());
        }
    }
    orthonormalize_rows(out.basis);
    canonicalize_signs(out.basis);
    return out;
}

Vector solve_least_squares(const Matrix& a, std::span<const double> y, double ridge) {
    const std::size_t n = a.rows();
    const std::size_t m = a.cols();
    if (y.size() != n) throw LengthMismatch("target length differs from row count");
    if (n < m && ridge == 0.0) throw DimensionError("least squares needs rows >= cols");

    Matrix g(m, m);
    for (std::size_t i = 0; i < n; ++i) {
        auto row = a.row(i);
        for (std::size_t p = 0; p < m; ++p)
            for (std::size_t q = p; q < m; ++q) g(p, q) += row[p] * row[q];
    }
    for (std::size_t p = 0; p < m; ++p) {
        g(p, p) += ridge;
        for (std::size_t q = 0; q < p; ++q) g(p, q) = g(q, p);
    }
    const Vector rhs = matvec_t(a, y);

    const EigenResult eig = symmetric_eigen(g);
    const double lmax = eig.values.front();
    const double lmin = eig.values.back();
    if (!(lmax > 0.0) || lmin / lmax < kSingularRcond)
        throw SingularSystem("normal matrix reciprocal condition " + std::to_string(lmax > 0 ? lmin / lmax : 0.0));

    // Cholesky factor L with G = L L^T.
    Matrix l(m, m);
    for (std::size_t j = 0; j < m; ++j) {
        double diag = g(j, j);
        for (std::size_t k = 0; k < j; ++k) diag -= l(j, k) * l(j, k);
        if (diag <= 0.0) throw SingularSystem("normal matrix not positive definite");
        l(j, j) = std::sqrt(diag);
        for (std::size_t i = j + 1; i < m; ++i) {
            double s = g(i, j);
            for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
            l(i, j) = s / l(j, j);
        }
    }
    auto cholesky_solve = [&](std::span<const double> b) {
        Vector z(m);
        for (std::size_t i = 0; i < m; ++i) {
            double s = b[i];
            for (std::size_t k = 0; k < i; ++k) s -= l(i, k) * z[k];
            z[i] = s / l(i, i);
        }
        Vector w(m);
        for (std::size_t ii = m; ii-- > 0;) {
            double s = z[ii];
            for (std::size_t k = ii + 1; k < m; ++k) s -= l(k, ii) * w[k];
            w[ii] = s / l(ii, ii);
        }
        return w;
    };

    Vector w = cholesky_solve(rhs);
    // One round of iterative refinement on the normal equations.
    Vector residual = rhs;
    const Vector gw = matvec(g, w);
    for (std::size_t i = 0; i < m; ++i) residual[i] -= gw[i];
    const Vector delta = cholesky_solve(residual);
    for (std::size_t i = 0; i < m; ++i) w[i] += delta[i];
    return w;
}

}  // namespace w2w
