#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "w2w/numerics.hpp"

namespace w2w {

struct WorldConfig {
    std::size_t k = 8;          // identity latent dimension
    std::size_t D = 16;         // observation dimension
    std::size_t C = 4;          // number of render contexts
    std::size_t n_attrs = 6;
    std::size_t render_hidden = 32;
    double noise_sigma = 0.05;
    double attr_scale = 1.0;
    double linear_gain = 1.0;
    double nonlinear_gain = 3.0;
    double context_scale = 3.0;
    // Remove z_base's components along the attribute axes so attrs are
    // exactly recoverable from z.
    bool strip_base = true;
    // Fraction of sampled identities that reuse an earlier z_base and attrs.
    double duplicate_fraction = 0.0;
    std::uint64_t render_seed = 7;
};

struct Identity {
    std::uint64_t id = 0;
    Vector z_base;
    std::vector<std::uint8_t> attrs;
    Vector z;
};

struct Observation {
    Vector x;
    std::size_t context = 0;
};

struct IdentityDataset {
    Identity identity;
    std::vector<Observation> observations;
};

/// Fixed synthetic "person" domain: attribute axes plus a seeded render map
///   F(z, c) = L z + W2 tanh(W1 z + U_c).
/// Immutable after construction.
class World {
public:
    explicit World(WorldConfig config);

    const WorldConfig& config() const noexcept { return config_; }
    const Matrix& attribute_axes() const noexcept { return axes_; }

    Vector map(std::span<const double> z, std::size_t context) const;
    // dF/dz, D x k.
    Matrix jacobian(std::span<const double> z, std::size_t context) const;

    // Project out the attribute axes.
    Vector strip_attributes(std::span<const double> z) const;
    std::vector<std::uint8_t> attributes_of(std::span<const double> z) const;

private:
    void check_context(std::size_t context) const;

    WorldConfig config_;
    Matrix axes_;
    Matrix linear_;
    Matrix in_;
    Matrix context_;
    Matrix out_;
};

Identity make_identity(std::uint64_t id, Vector z_base, std::vector<std::uint8_t> attrs, const World& world);
Identity sample_identity(Rng& rng, const World& world, std::uint64_t id = 0);
// Population with optional duplicated persons (WorldConfig::duplicate_fraction).
std::vector<Identity> sample_population(Rng& rng, const World& world, std::size_t count, std::uint64_t first_id = 0);

Vector render(const Identity& identity, std::size_t context, Rng& rng, const World& world);
Vector render_latent(std::span<const double> z, std::size_t context, Rng& rng, const World& world);

IdentityDataset build_identity_dataset(const Identity& identity, std::size_t n_obs, const World& world, Rng& rng);

struct DecodeResult {
    Vector z;
    double residual = 0.0;
    double initial_residual = 0.0;
    bool ok = true;
};

/// Gauss-Newton (with step halving) recovery of z from one observation under a known context.
DecodeResult decode_latent(std::span<const double> x, std::size_t context, const World& world, int iterations = 50);

struct IdentityScore {
    double score = 0.0;
    std::size_t failures = 0;
    Vector cosines;          // per decoded sample, failures excluded
    std::vector<Vector> decoded;
};

IdentityScore identity_score(std::span<const Observation> samples, std::span<const double> target_z, const World& world);

}  // namespace w2w
