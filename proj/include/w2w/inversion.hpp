#pragma once

#include <cstddef>
#include <cstdint>
#include <span>

#include "w2w/diffusion.hpp"
#include "w2w/space.hpp"
#include "w2w/world.hpp"

namespace w2w {

struct InversionConfig {
    std::size_t m_invert = 16;
    std::size_t epochs = 400;
    double lr = 0.1;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 1e-10;
    std::size_t batch = 8;        // (t, eps) draws per epoch
    std::size_t eval_pool = 32;   // fixed draws used to pick the best epoch
    std::uint64_t seed = 17;
};

struct InversionResult {
    Vector beta;
    Vector theta;
    Vector loss_curve;   // training batch loss per epoch
    Vector best_curve;   // best-so-far evaluation loss per epoch
    Vector grad_norms;
    double initial_loss = 0.0;
    double final_loss = 0.0;
    std::size_t best_epoch = 0;
};

// dL/dbeta_k = <basis_k, dL/dtheta>
Vector grad_wrt_coeffs(const W2wSpace& space, std::span<const double> dL_dtheta);

/// Fits the leading m_invert coefficients so that unproject(beta) denoises
/// the single observation under the subject prompt. No prior term.
InversionResult invert(const W2wSpace& space, const DenoiserParams& base, const DiffusionSchedule& schedule,
                       const Observation& observation, const InversionConfig& config);

// Same optimization for observations produced off the identity distribution;
// the result lies in span(space) by construction.
InversionResult invert_ood(const W2wSpace& space, const DenoiserParams& base, const DiffusionSchedule& schedule,
                           const Observation& observation, const InversionConfig& config);

}  // namespace w2w
