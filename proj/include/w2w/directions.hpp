#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "w2w/diffusion.hpp"
#include "w2w/space.hpp"

namespace w2w {

/// Unit edit vector in full weight space, normal to a least-squares
/// attribute hyperplane fitted on leading PC coefficients.
struct EditDirection {
    Vector n;
    std::size_t attribute = 0;
    std::string name;
    double max_strength = 0.0;
    std::size_t m_edit = 0;
    std::string space_hash;
    // Classifier in coefficient space: sign(<w, beta> + bias).
    Vector weights;
    double bias = 0.0;
};

EditDirection train_direction(const W2wSpace& space, const WeightDataset& ds, std::size_t attribute,
                              std::size_t m_edit, double ridge = 0.0);

// Fraction of ds whose label matches the direction's classifier.
double classifier_accuracy(const EditDirection& dir, const W2wSpace& space, const WeightDataset& ds);

inline double soft_cap(const EditDirection& dir) { return 2.0 * dir.max_strength; }

// theta + alpha n; logs a warning past the soft cap.
Vector apply_edit(std::span<const double> theta, const EditDirection& dir, double alpha);

// theta + sum alpha_i n_i, summed per coordinate in sorted order so the result
// does not depend on list order.
Vector compose_edits(std::span<const double> theta, std::span<const std::pair<EditDirection, double>> edits);

// |cos(n_i, n_j)| for all pairs.
Matrix entanglement_matrix(std::span<const EditDirection> dirs);
double mean_off_diagonal(const Matrix& m);

// Experimental: Gram-Schmidt the directions in list order.
std::vector<EditDirection> orthogonalize(std::vector<EditDirection> dirs);

/// DDIM run that uses theta_orig's adapter for t >= t_inject and
/// theta_edit's for t < t_inject.
Vector delayed_injection_sample(const DenoiserParams& params, const DiffusionSchedule& schedule,
                                std::span<const double> theta_orig, std::span<const double> theta_edit,
                                const AdapterShape& shape, std::size_t t_inject, const Prompt& prompt,
                                std::size_t steps, std::uint64_t seed);

}  // namespace w2w
