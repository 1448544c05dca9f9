#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "w2w/adapter.hpp"
#include "w2w/numerics.hpp"
#include "w2w/world.hpp"

namespace w2w {

struct DiffusionSchedule {
    std::size_t T = 0;
    Vector betas;
    Vector alphas;
    Vector alpha_bars;
};

// Linear betas; the default endpoints are the 1000-step (1e-4, 0.02) range
// rescaled by 1000/T so the chain still ends near pure noise.
DiffusionSchedule make_schedule(std::size_t T, double beta_start, double beta_end);
DiffusionSchedule default_schedule(std::size_t T = 100);

Vector forward_noise(std::span<const double> x0, std::size_t t, std::span<const double> eps,
                     const DiffusionSchedule& schedule);

// Token table layout: CLASS, V_STAR, then one token per render context.
inline constexpr std::size_t kClassToken = 0;
inline constexpr std::size_t kSubjectToken = 1;
inline constexpr std::size_t kFirstContextToken = 2;

/// Conditioning prompt: the class noun, optionally the subject identifier,
/// optionally a context token. Embeddings are summed.
struct Prompt {
    bool subject = false;
    std::optional<std::size_t> context;

    static Prompt class_prompt(std::optional<std::size_t> context = std::nullopt) { return {false, context}; }
    static Prompt subject_prompt(std::optional<std::size_t> context = std::nullopt) { return {true, context}; }
};

struct DenoiserConfig {
    std::size_t D = 16;
    std::size_t hidden = 64;
    std::size_t emb = 16;
    std::size_t contexts = 4;
};

/// Two-hidden-layer MLP noise predictor:
///   e  = sum of prompt token embeddings + sinusoidal(t)
///   h1 = tanh(W_in [x_t; sinusoidal(t)] + b_in + W_k e)
///   h2 = tanh(W_h h1 + b_h + W_v e)
///   eps_hat = W_out h2 + b_out
struct DenoiserParams {
    std::size_t D = 0;
    std::size_t hidden = 0;
    std::size_t emb = 0;
    std::size_t tokens = 0;
    Matrix W_in;
    Vector b_in;
    Matrix W_k;
    Matrix W_h;
    Vector b_h;
    Matrix W_v;
    Matrix W_out;
    Vector b_out;
    Matrix E;
    // Frozen per-timestep gain on an x_t -> output skip path; empty disables it.
    Vector skip;

    static DenoiserParams zeros(const DenoiserConfig& config);
    static DenoiserParams random(const DenoiserConfig& config, Rng& rng);

    // Trainable tensors in checkpoint order.
    std::vector<std::span<double>> tensors();
    std::vector<std::span<const double>> tensors() const;
    std::size_t parameter_count() const;

    AdapterShape adapter_shape(std::size_t rank = 1) const { return {hidden, emb, rank}; }
    std::size_t contexts() const noexcept { return tokens - kFirstContextToken; }

    friend bool operator==(const DenoiserParams&, const DenoiserParams&) = default;
};

// sqrt(1 - alpha_bar_t): the eps estimate for unit-variance data.
Vector skip_gains(const DiffusionSchedule& schedule);

Vector time_embedding(std::size_t t, std::size_t emb);

struct ForwardCache {
    Vector input;  // [x_t; temb]
    Vector cond;   // e
    Vector h1;
    Vector h2;
    Vector key_proj;    // A_k e
    Vector value_proj;  // A_v e
    Prompt prompt;
};

Vector denoiser_forward(const DenoiserParams& params, std::span<const double> x_t, const Prompt& prompt,
                        std::size_t t, const LoraAdapter* adapter = nullptr, double lora_scale = 1.0,
                        ForwardCache* cache = nullptr);

/// Reverse-mode pass for one forward call. Gradients are accumulated into
/// whichever of adapter_grads / param_grads is non-null.
void denoiser_backward(const DenoiserParams& params, const ForwardCache& cache, std::span<const double> upstream,
                       const LoraAdapter* adapter, double lora_scale, LoraAdapter* adapter_grads,
                       DenoiserParams* param_grads = nullptr);

// Base params with the adapter folded in: W + lora_scale * scale * B A.
DenoiserParams materialize(const DenoiserParams& params, const LoraAdapter& adapter, double lora_scale = 1.0);

struct BaseTrainConfig {
    DenoiserConfig model;
    std::size_t steps = 20000;
    std::size_t batch = 32;
    double lr = 3e-3;
    // Cosine decay from lr down to lr * lr_floor over the run.
    double lr_floor = 0.05;
    std::uint64_t seed = 1;
    std::size_t log_every = 100;
};

struct TrainResult {
    DenoiserParams params;
    Vector loss_curve;  // running mean loss, one entry per log_every steps
    double initial_loss = 0.0;
    double final_loss = 0.0;
};

/// Fit eps_theta on every observation of the corpus under CLASS + context prompts.
double cosine_lr(double lr, double floor, std::size_t step, std::size_t steps);

TrainResult train_base(std::span<const IdentityDataset> corpus, const DiffusionSchedule& schedule,
                       const BaseTrainConfig& config);

// Tracks the "loss above 10x initial for 500 consecutive steps" rule.
class DivergenceGuard {
public:
    explicit DivergenceGuard(std::size_t patience = 500, double factor = 10.0) : patience_(patience), factor_(factor) {}
    // Throws DivergenceError when the rule trips or the loss is not finite.
    void observe(double loss);

private:
    std::size_t patience_;
    double factor_;
    std::optional<double> initial_;
    std::size_t above_ = 0;
};

// Adapter used at each timestep of a sampling run.
using AdapterSelector = std::function<const LoraAdapter*(std::size_t t)>;

// Descending timesteps of an evenly spaced sub-schedule starting at T-1.
std::vector<std::size_t> ddim_timesteps(std::size_t T, std::size_t steps);

Vector ddim_sample_from(const DenoiserParams& params, const DiffusionSchedule& schedule, const Prompt& prompt,
                        std::size_t steps, Vector x_T, const AdapterSelector& adapter_at, double lora_scale = 1.0);

/// Deterministic DDIM (eta = 0) from the seed's Gaussian draw.
Vector ddim_sample(const DenoiserParams& params, const DiffusionSchedule& schedule, const Prompt& prompt,
                   std::size_t steps, std::uint64_t seed, const LoraAdapter* adapter = nullptr,
                   double lora_scale = 1.0);

inline constexpr std::size_t kDefaultDdimSteps = 50;

}  // namespace w2w
