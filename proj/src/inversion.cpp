#include "w2w/inversion.hpp"

#include <cmath>
#include <limits>

#include "w2w/adam.hpp"
#include "w2w/error.hpp"

namespace w2w {

Vector grad_wrt_coeffs(const W2wSpace& space, std::span<const double> dL_dtheta) {
    if (dL_dtheta.size() != space.d()) throw LengthMismatch("gradient length differs from space d");
    return matvec(space.basis, dL_dtheta);
}

namespace {

struct Draw {
    std::size_t t;
    Vector eps;
};

std::vector<Draw> draw_pool(std::uint64_t seed, std::size_t count, std::size_t T, std::size_t D) {
    Rng rng(seed);
    std::vector<Draw> pool;
    pool.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t t = rng.index(T);
        pool.push_back({t, rng.normal_vector(D)});
    }
    return pool;
}

}  // namespace

InversionResult invert(const W2wSpace& space, const DenoiserParams& base, const DiffusionSchedule& schedule,
                       const Observation& observation, const InversionConfig& config) {
    if (observation.x.size() != base.D) throw LengthMismatch("observation length differs from denoiser D");
    if (!all_finite(observation.x)) throw DivergenceError("observation is not finite");
    if (config.lr <= 0.0) throw ConfigError("inversion lr must be positive");
    if (config.batch == 0 || config.eval_pool == 0) throw ConfigError("inversion pools must be non-empty");
    if (space.d() != base.adapter_shape().flat_size())
        throw ShapeMismatch("space dimension does not match the denoiser's adapter layout");

    const W2wSpace sub = space.truncated(config.m_invert);
    const AdapterShape shape = base.adapter_shape();
    const Prompt prompt = Prompt::subject_prompt(observation.context);
    const auto eval = draw_pool(mix_seed(config.seed, 0xe7a1), config.eval_pool, schedule.T, base.D);

    auto evaluate = [&](std::span<const double> beta) {
        const LoraAdapter adapter = unflatten(unproject(sub, beta), shape);
        double loss = 0.0;
        for (const auto& d : eval) {
            const Vector x_t = forward_noise(observation.x, d.t, d.eps, schedule);
            const Vector out = denoiser_forward(base, x_t, prompt, d.t, &adapter);
            for (std::size_t i = 0; i < out.size(); ++i) loss += (out[i] - d.eps[i]) * (out[i] - d.eps[i]);
        }
        loss /= static_cast<double>(eval.size());
        if (!std::isfinite(loss)) throw DivergenceError("inversion loss is not finite");
        return loss;
    };

    InversionResult result;
    Vector beta = sub.coeff_mu;
    result.beta = beta;
    result.initial_loss = evaluate(beta);
    result.final_loss = result.initial_loss;

    Adam adam(beta.size(), AdamConfig{config.lr, config.beta1, config.beta2, 1e-8, config.weight_decay});
    ForwardCache cache;
    Vector upstream(base.D);
    const double inv_batch = 1.0 / static_cast<double>(config.batch);

    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        const LoraAdapter adapter = unflatten(unproject(sub, beta), shape);
        LoraAdapter grads = LoraAdapter::zeros(shape);
        double loss = 0.0;
        for (const auto& d : draw_pool(mix_seed(config.seed, epoch), config.batch, schedule.T, base.D)) {
            const Vector x_t = forward_noise(observation.x, d.t, d.eps, schedule);
            const Vector out = denoiser_forward(base, x_t, prompt, d.t, &adapter, 1.0, &cache);
            for (std::size_t i = 0; i < out.size(); ++i) {
                const double diff = out[i] - d.eps[i];
                loss += diff * diff;
                upstream[i] = 2.0 * diff * inv_batch;
            }
            denoiser_backward(base, cache, upstream, &adapter, 1.0, &grads);
        }
        loss *= inv_batch;
        if (!std::isfinite(loss)) throw DivergenceError("inversion loss is not finite at epoch " + std::to_string(epoch));
        const Vector g = grad_wrt_coeffs(sub, flatten(grads));
        result.loss_curve.push_back(loss);
        result.grad_norms.push_back(norm2(g));
        adam.step(beta, g);

        const double eval_loss = evaluate(beta);
        if (eval_loss < result.final_loss) {
            result.final_loss = eval_loss;
            result.beta = beta;
            result.best_epoch = epoch + 1;
        }
        result.best_curve.push_back(result.final_loss);
    }
    result.theta = unproject(sub, result.beta);
    return result;
}

InversionResult invert_ood(const W2wSpace& space, const DenoiserParams& base, const DiffusionSchedule& schedule,
                           const Observation& observation, const InversionConfig& config) {
    return invert(space, base, schedule, observation, config);
}

}  // namespace w2w
