#include "w2w/space.hpp"

#include <algorithm>
#include <cmath>

#include "w2w/error.hpp"

namespace w2w {

W2wSpace W2wSpace::truncated(std::size_t m_keep) const {
    if (m_keep < 1 || m_keep > m()) throw DimensionError("cannot truncate a " + std::to_string(m()) +
                                                         "-component space to " + std::to_string(m_keep));
    W2wSpace out;
    out.mean = mean;
    out.basis = Matrix(m_keep, d());
    std::copy_n(basis.values().begin(), m_keep * d(), out.basis.values().begin());
    out.eigvals.assign(eigvals.begin(), eigvals.begin() + static_cast<std::ptrdiff_t>(m_keep));
    out.coeff_mu.assign(coeff_mu.begin(), coeff_mu.begin() + static_cast<std::ptrdiff_t>(m_keep));
    out.coeff_sigma.assign(coeff_sigma.begin(), coeff_sigma.begin() + static_cast<std::ptrdiff_t>(m_keep));
    out.total_variance = total_variance;
    out.fit_rows = fit_rows;
    return out;
}

double W2wSpace::explained_variance_ratio() const {
    if (total_variance <= 0.0) return 0.0;
    double s = 0.0;
    for (double e : eigvals) s += e;
    return s / total_variance;
}

W2wSpace fit_space(const WeightDataset& ds, std::size_t m) {
    ds.validate();
    PcaResult pca = pca_fit(ds.thetas, m);
    W2wSpace space;
    space.mean = std::move(pca.mean);
    space.basis = std::move(pca.basis);
    space.eigvals = std::move(pca.eigvals);
    space.total_variance = pca.total_variance;
    space.fit_rows = ds.size();

    const Matrix coeffs = project_all(space, ds.thetas);
    const double n = static_cast<double>(coeffs.rows());
    space.coeff_mu.assign(m, 0.0);
    space.coeff_sigma.assign(m, 0.0);
    for (std::size_t i = 0; i < coeffs.rows(); ++i) axpy(1.0, coeffs.row(i), space.coeff_mu);
    for (auto& v : space.coeff_mu) v /= n;
    for (std::size_t i = 0; i < coeffs.rows(); ++i)
        for (std::size_t k = 0; k < m; ++k) {
            const double dlt = coeffs(i, k) - space.coeff_mu[k];
            space.coeff_sigma[k] += dlt * dlt;
        }
    for (auto& v : space.coeff_sigma) v = std::sqrt(v / (n - 1.0));
    return space;
}

Vector project(const W2wSpace& space, std::span<const double> theta) {
    if (theta.size() != space.d())
        throw LengthMismatch("theta length " + std::to_string(theta.size()) + " != space d " +
                             std::to_string(space.d()));
    const Vector centered = subtract(theta, space.mean);
    return matvec(space.basis, centered);
}

Vector unproject(const W2wSpace& space, std::span<const double> beta) {
    if (beta.size() != space.m())
        throw LengthMismatch("beta length " + std::to_string(beta.size()) + " != space m " +
                             std::to_string(space.m()));
    Vector theta = space.mean;
    for (std::size_t k = 0; k < beta.size(); ++k) axpy(beta[k], space.basis.row(k), theta);
    return theta;
}

Matrix project_all(const W2wSpace& space, const Matrix& thetas) {
    Matrix out(thetas.rows(), space.m());
    for (std::size_t i = 0; i < thetas.rows(); ++i) {
        const Vector beta = project(space, thetas.row(i));
        std::copy(beta.begin(), beta.end(), out.row(i).begin());
    }
    return out;
}

Vector sample_model(const W2wSpace& space, Rng& rng) {
    Vector beta(space.m());
    for (std::size_t k = 0; k < beta.size(); ++k) beta[k] = gaussian(rng, space.coeff_mu[k], space.coeff_sigma[k]);
    return unproject(space, beta);
}

NeighborHit nearest_neighbor(std::span<const double> beta, const Matrix& projected) {
    if (projected.rows() == 0) throw EmptyDataset("no models to search");
    if (projected.cols() != beta.size()) throw LengthMismatch("query and projected widths differ");
    NeighborHit best{0, cosine(beta, projected.row(0))};
    for (std::size_t i = 1; i < projected.rows(); ++i) {
        const double c = cosine(beta, projected.row(i));
        if (c > best.cosine) best = {i, c};
    }
    return best;
}

NeighborHit nearest_neighbor(const W2wSpace& space, std::span<const double> beta, const WeightDataset& ds) {
    if (ds.size() == 0) throw EmptyDataset("no models to search");
    return nearest_neighbor(beta, project_all(space, ds.thetas));
}

Moments sample_moments(std::span<const double> values) {
    Moments m;
    if (values.empty()) return m;
    const double n = static_cast<double>(values.size());
    for (double v : values) m.mean += v;
    m.mean /= n;
    double m2 = 0.0, m3 = 0.0, m4 = 0.0;
    for (double v : values) {
        const double d = v - m.mean;
        m2 += d * d;
        m3 += d * d * d;
        m4 += d * d * d * d;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    m.stddev = std::sqrt(m2);
    if (m2 > 0.0) {
        m.skewness = m3 / std::pow(m2, 1.5);
        m.excess_kurtosis = m4 / (m2 * m2) - 3.0;
    }
    return m;
}

double correlation(std::span<const double> a, std::span<const double> b) {
    const Moments ma = sample_moments(a);
    const Moments mb = sample_moments(b);
    if (ma.stddev == 0.0 || mb.stddev == 0.0) return 0.0;
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - ma.mean) * (b[i] - mb.mean);
    return s / (static_cast<double>(a.size()) * ma.stddev * mb.stddev);
}

CoeffReport coeff_diagnostics(const W2wSpace& space, const WeightDataset& ds, std::size_t components,
                              std::size_t bins) {
    const Matrix coeffs = project_all(space, ds.thetas);
    const std::size_t n_comp = std::min(components, space.m());
    std::vector<Vector> columns(n_comp, Vector(coeffs.rows()));
    for (std::size_t i = 0; i < coeffs.rows(); ++i)
        for (std::size_t k = 0; k < n_comp; ++k) columns[k][i] = coeffs(i, k);

    CoeffReport report;
    for (std::size_t k = 0; k < n_comp; ++k) {
        ComponentDiagnostics diag;
        diag.component = k;
        diag.moments = sample_moments(columns[k]);
        diag.histogram.assign(bins, 0);
        const double sd = diag.moments.stddev > 0.0 ? diag.moments.stddev : 1.0;
        diag.bin_low = diag.moments.mean - 4.0 * sd;
        diag.bin_width = 8.0 * sd / static_cast<double>(bins);
        for (double v : columns[k]) {
            const double pos = (v - diag.bin_low) / diag.bin_width;
            const auto idx = static_cast<std::ptrdiff_t>(std::floor(pos));
            ++diag.histogram[static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(idx, 0, bins - 1))];
        }
        report.components.push_back(std::move(diag));
    }
    const std::size_t head = std::min<std::size_t>(3, n_comp);
    for (std::size_t i = 0; i < head; ++i)
        for (std::size_t j = i + 1; j < head; ++j)
            report.correlations.emplace_back(i, j, correlation(columns[i], columns[j]));
    return report;
}

nlohmann::ordered_json CoeffReport::to_json() const {
    nlohmann::ordered_json out;
    out["components"] = nlohmann::ordered_json::array();
    for (const auto& c : components) {
        nlohmann::ordered_json j;
        j["component"] = c.component;
        j["mean"] = c.moments.mean;
        j["stddev"] = c.moments.stddev;
        j["skewness"] = c.moments.skewness;
        j["excess_kurtosis"] = c.moments.excess_kurtosis;
        j["bin_low"] = c.bin_low;
        j["bin_width"] = c.bin_width;
        j["histogram"] = c.histogram;
        out["components"].push_back(std::move(j));
    }
    out["correlations"] = nlohmann::ordered_json::array();
    for (const auto& [i, j, r] : correlations) out["correlations"].push_back({{"i", i}, {"j", j}, {"corr", r}});
    return out;
}

}  // namespace w2w
