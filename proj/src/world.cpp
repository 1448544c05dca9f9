#include "w2w/world.hpp"

#include <algorithm>
#include <cmath>

#include "w2w/error.hpp"

namespace w2w {

namespace {

Matrix random_matrix(Rng& rng, std::size_t rows, std::size_t cols, double sigma) {
    Matrix m(rows, cols);
    for (auto& v : m.values()) v = sigma * rng.normal();
    return m;
}

}  // namespace

World::World(WorldConfig config) : config_(config) {
    if (config_.k == 0 || config_.C == 0 || config_.render_hidden == 0)
        throw ConfigError("world dimensions must be positive");
    if (config_.D < config_.k) throw ConfigError("observation dim D must be >= identity dim k");
    if (config_.n_attrs > config_.k) throw ConfigError("more attributes than identity dimensions");
    if (config_.noise_sigma < 0.0) throw InvalidSigma("noise_sigma must be non-negative");

    Rng rng(config_.render_seed);
    axes_ = random_matrix(rng, config_.n_attrs, config_.k, 1.0);
    for (std::size_t r = 0; r < axes_.rows(); ++r) {
        auto row = axes_.row(r);
        for (int pass = 0; pass < 2; ++pass)
            for (std::size_t q = 0; q < r; ++q) axpy(-dot(axes_.row(q), row), axes_.row(q), row);
        const double n = norm2(row);
        for (auto& v : row) v /= n;
    }
    const double k = static_cast<double>(config_.k);
    const double hr = static_cast<double>(config_.render_hidden);
    linear_ = random_matrix(rng, config_.D, config_.k, config_.linear_gain / std::sqrt(k));
    in_ = random_matrix(rng, config_.render_hidden, config_.k, 1.0 / std::sqrt(k));
    context_ = random_matrix(rng, config_.C, config_.render_hidden, config_.context_scale);
    out_ = random_matrix(rng, config_.D, config_.render_hidden, config_.nonlinear_gain / std::sqrt(hr));
}

void World::check_context(std::size_t context) const {
    if (context >= config_.C)
        throw ContextOutOfRange("context " + std::to_string(context) + " >= " + std::to_string(config_.C));
}

Vector World::map(std::span<const double> z, std::size_t context) const {
    check_context(context);
    if (z.size() != config_.k) throw LengthMismatch("latent length differs from world k");
    Vector x = matvec(linear_, z);
    Vector pre = matvec(in_, z);
    axpy(1.0, context_.row(context), pre);
    for (auto& v : pre) v = std::tanh(v);
    axpy(1.0, matvec(out_, pre), x);
    return x;
}

Matrix World::jacobian(std::span<const double> z, std::size_t context) const {
    check_context(context);
    Vector pre = matvec(in_, z);
    axpy(1.0, context_.row(context), pre);
    Matrix j = linear_;
    for (std::size_t h = 0; h < in_.rows(); ++h) {
        const double th = std::tanh(pre[h]);
        const double gate = 1.0 - th * th;
        for (std::size_t r = 0; r < config_.D; ++r) {
            const double w = out_(r, h) * gate;
            if (w == 0.0) continue;
            for (std::size_t c = 0; c < config_.k; ++c) j(r, c) += w * in_(h, c);
        }
    }
    return j;
}

Vector World::strip_attributes(std::span<const double> z) const {
    Vector out(z.begin(), z.end());
    for (std::size_t j = 0; j < axes_.rows(); ++j) axpy(-dot(axes_.row(j), out), axes_.row(j), out);
    return out;
}

std::vector<std::uint8_t> World::attributes_of(std::span<const double> z) const {
    std::vector<std::uint8_t> bits(axes_.rows());
    for (std::size_t j = 0; j < axes_.rows(); ++j) bits[j] = dot(axes_.row(j), z) > 0.0 ? 1 : 0;
    return bits;
}

Identity make_identity(std::uint64_t id, Vector z_base, std::vector<std::uint8_t> attrs, const World& world) {
    const auto& axes = world.attribute_axes();
    if (z_base.size() != world.config().k) throw LengthMismatch("z_base length differs from world k");
    if (attrs.size() != axes.rows()) throw LengthMismatch("attribute count differs from world");
    Identity out{id, std::move(z_base), std::move(attrs), {}};
    out.z = out.z_base;
    for (std::size_t j = 0; j < axes.rows(); ++j) {
        const double sign = out.attrs[j] ? 1.0 : -1.0;
        axpy(sign * world.config().attr_scale, axes.row(j), out.z);
    }
    return out;
}

Identity sample_identity(Rng& rng, const World& world, std::uint64_t id) {
    Vector g = rng.normal_vector(world.config().k);
    std::vector<std::uint8_t> attrs(world.config().n_attrs);
    for (auto& a : attrs) a = rng.coin() ? 1 : 0;
    if (world.config().strip_base) g = world.strip_attributes(g);
    return make_identity(id, std::move(g), std::move(attrs), world);
}

std::vector<Identity> sample_population(Rng& rng, const World& world, std::size_t count, std::uint64_t first_id) {
    std::vector<Identity> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        const std::uint64_t id = first_id + i;
        if (!out.empty() && rng.uniform() < world.config().duplicate_fraction) {
            const Identity& source = out[rng.index(out.size())];
            out.push_back(make_identity(id, source.z_base, source.attrs, world));
        } else {
            out.push_back(sample_identity(rng, world, id));
        }
    }
    return out;
}

Vector render_latent(std::span<const double> z, std::size_t context, Rng& rng, const World& world) {
    Vector x = world.map(z, context);
    const double sigma = world.config().noise_sigma;
    for (auto& v : x) v += sigma * rng.normal();
    return x;
}

Vector render(const Identity& identity, std::size_t context, Rng& rng, const World& world) {
    return render_latent(identity.z, context, rng, world);
}

IdentityDataset build_identity_dataset(const Identity& identity, std::size_t n_obs, const World& world, Rng& rng) {
    if (n_obs == 0) throw ConfigError("an identity dataset needs at least one observation");
    IdentityDataset ds{identity, {}};
    ds.observations.reserve(n_obs);
    for (std::size_t i = 0; i < n_obs; ++i) {
        const std::size_t context = i % world.config().C;
        ds.observations.push_back({render(identity, context, rng, world), context});
    }
    return ds;
}

DecodeResult decode_latent(std::span<const double> x, std::size_t context, const World& world, int iterations) {
    const std::size_t k = world.config().k;
    auto residual_of = [&](std::span<const double> z) {
        Vector r = world.map(z, context);
        for (std::size_t i = 0; i < r.size(); ++i) r[i] -= x[i];
        return r;
    };
    auto gn_step = [&](std::span<const double> z, std::span<const double> r) {
        const Matrix j = world.jacobian(z, context);
        // Tiny ridge keeps the step defined if J loses rank.
        return solve_least_squares(j, r, 1e-10);
    };

    DecodeResult out;
    out.z.assign(k, 0.0);
    Vector r = residual_of(out.z);
    out.initial_residual = norm2(r);
    double current = out.initial_residual;
    for (int it = 0; it < iterations; ++it) {
        Vector step;
        try {
            step = gn_step(out.z, r);
        } catch (const SingularSystem&) {
            break;
        }
        double t = 1.0;
        bool accepted = false;
        for (int halving = 0; halving < 20; ++halving, t *= 0.5) {
            Vector trial = out.z;
            axpy(-t, step, trial);
            Vector rt = residual_of(trial);
            const double value = norm2(rt);
            if (std::isfinite(value) && value < current) {
                out.z = std::move(trial);
                r = std::move(rt);
                current = value;
                accepted = true;
                break;
            }
        }
        if (!accepted) break;
    }
    out.residual = current;
    out.ok = std::isfinite(current) && all_finite(out.z) && current <= 10.0 * std::max(out.initial_residual, 1e-12);
    return out;
}

IdentityScore identity_score(std::span<const Observation> samples, std::span<const double> target_z,
                             const World& world) {
    if (samples.empty()) throw EmptyDataset("identity_score needs at least one sample");
    IdentityScore out;
    for (const auto& s : samples) {
        if (s.x.size() != world.config().D) throw LengthMismatch("sample length differs from world D");
        DecodeResult dec;
        if (all_finite(s.x)) dec = decode_latent(s.x, s.context, world);
        else dec.ok = false;
        if (!dec.ok) {
            ++out.failures;
            continue;
        }
        out.cosines.push_back(cosine(dec.z, target_z));
        out.decoded.push_back(std::move(dec.z));
    }
    if (out.cosines.empty()) throw DecodeFailure("every sample failed to decode");
    // Sorted summation keeps the mean independent of sample order.
    Vector sorted = out.cosines;
    std::sort(sorted.begin(), sorted.end());
    double sum = 0.0;
    for (double c : sorted) sum += c;
    out.score = sum / static_cast<double>(out.cosines.size());
    return out;
}

}  // namespace w2w
