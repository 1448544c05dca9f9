#include "w2w/directions.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>

#include "w2w/error.hpp"

namespace w2w {

EditDirection train_direction(const W2wSpace& space, const WeightDataset& ds, std::size_t attribute,
                              std::size_t m_edit, double ridge) {
    const W2wSpace sub = space.truncated(m_edit);
    const std::vector<int> labels = ds.labels(attribute);
    const bool has_pos = std::find(labels.begin(), labels.end(), 1) != labels.end();
    const bool has_neg = std::find(labels.begin(), labels.end(), -1) != labels.end();
    if (!has_pos || !has_neg)
        throw SingleClassError("attribute " + std::to_string(attribute) + " has a single label in the dataset");

    const Matrix coeffs = project_all(sub, ds.thetas);
    Matrix design(ds.size(), m_edit + 1);
    Vector y(ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) {
        std::copy(coeffs.row(i).begin(), coeffs.row(i).end(), design.row(i).begin());
        design(i, m_edit) = 1.0;
        y[i] = static_cast<double>(labels[i]);
    }
    const Vector w = solve_least_squares(design, y, ridge);

    EditDirection dir;
    dir.attribute = attribute;
    dir.name = "attr" + std::to_string(attribute);
    dir.m_edit = m_edit;
    dir.weights.assign(w.begin(), w.begin() + static_cast<std::ptrdiff_t>(m_edit));
    dir.bias = w[m_edit];
    dir.n.assign(space.d(), 0.0);
    for (std::size_t k = 0; k < m_edit; ++k) axpy(dir.weights[k], sub.basis.row(k), dir.n);
    const double len = norm2(dir.n);
    if (len == 0.0) throw DegenerateData("classifier normal vanished");
    for (auto& v : dir.n) v /= len;

    for (std::size_t i = 0; i < ds.size(); ++i) {
        const Vector centered = subtract(ds.thetas.row(i), space.mean);
        dir.max_strength = std::max(dir.max_strength, std::abs(dot(centered, dir.n)));
    }
    return dir;
}

double classifier_accuracy(const EditDirection& dir, const W2wSpace& space, const WeightDataset& ds) {
    if (ds.size() == 0) throw EmptyDataset("no models to classify");
    const W2wSpace sub = space.truncated(dir.m_edit);
    const std::vector<int> labels = ds.labels(dir.attribute);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const double score = dot(project(sub, ds.thetas.row(i)), dir.weights) + dir.bias;
        if ((score >= 0.0 ? 1 : -1) == labels[i]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(ds.size());
}

Vector apply_edit(std::span<const double> theta, const EditDirection& dir, double alpha) {
    if (theta.size() != dir.n.size()) throw LengthMismatch("theta and direction lengths differ");
    if (std::abs(alpha) > soft_cap(dir))
        std::cerr << "warning: edit strength " << alpha << " exceeds 2x max_strength (" << soft_cap(dir)
                  << ") for " << dir.name << "\n";
    Vector out(theta.begin(), theta.end());
    if (alpha != 0.0) axpy(alpha, dir.n, out);
    return out;
}

Vector compose_edits(std::span<const double> theta, std::span<const std::pair<EditDirection, double>> edits) {
    for (const auto& [dir, alpha] : edits) {
        if (dir.n.size() != theta.size()) throw LengthMismatch("theta and direction lengths differ");
        if (std::abs(alpha) > soft_cap(dir))
            std::cerr << "warning: edit strength " << alpha << " exceeds the soft cap for " << dir.name << "\n";
    }
    Vector out(theta.begin(), theta.end());
    Vector terms(edits.size());
    for (std::size_t j = 0; j < theta.size(); ++j) {
        for (std::size_t i = 0; i < edits.size(); ++i) terms[i] = edits[i].second * edits[i].first.n[j];
        std::sort(terms.begin(), terms.end());
        double s = 0.0;
        for (double t : terms) s += t;
        out[j] += s;
    }
    return out;
}

Matrix entanglement_matrix(std::span<const EditDirection> dirs) {
    if (dirs.size() < 2) throw DimensionError("entanglement needs at least two directions");
    Matrix m(dirs.size(), dirs.size());
    for (std::size_t i = 0; i < dirs.size(); ++i) {
        m(i, i) = 1.0;
        for (std::size_t j = i + 1; j < dirs.size(); ++j) {
            const double c = std::abs(cosine(dirs[i].n, dirs[j].n));
            m(i, j) = c;
            m(j, i) = c;
        }
    }
    return m;
}

double mean_off_diagonal(const Matrix& m) {
    if (m.rows() < 2) return 0.0;
    double s = 0.0;
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < m.cols(); ++j)
            if (i != j) s += m(i, j);
    return s / static_cast<double>(m.rows() * (m.rows() - 1));
}

std::vector<EditDirection> orthogonalize(std::vector<EditDirection> dirs) {
    for (std::size_t i = 0; i < dirs.size(); ++i) {
        for (std::size_t q = 0; q < i; ++q) axpy(-dot(dirs[q].n, dirs[i].n), dirs[q].n, dirs[i].n);
        const double len = norm2(dirs[i].n);
        if (len < 1e-12) throw DegenerateData("direction " + dirs[i].name + " is spanned by earlier directions");
        for (auto& v : dirs[i].n) v /= len;
    }
    return dirs;
}

Vector delayed_injection_sample(const DenoiserParams& params, const DiffusionSchedule& schedule,
                                std::span<const double> theta_orig, std::span<const double> theta_edit,
                                const AdapterShape& shape, std::size_t t_inject, const Prompt& prompt,
                                std::size_t steps, std::uint64_t seed) {
    if (t_inject > schedule.T) throw ConfigError("injection timestep beyond the schedule");
    const LoraAdapter orig = unflatten(theta_orig, shape);
    const LoraAdapter edit = unflatten(theta_edit, shape);
    Rng rng(seed);
    Vector x_T = rng.normal_vector(params.D);
    return ddim_sample_from(params, schedule, prompt, steps, std::move(x_T),
                            [&](std::size_t t) { return t < t_inject ? &edit : &orig; });
}

}  // namespace w2w
