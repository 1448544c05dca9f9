#include "w2w/diffusion.hpp"

#include <cmath>
#include <numbers>

#include "w2w/adam.hpp"
#include "w2w/error.hpp"

namespace w2w {

DiffusionSchedule make_schedule(std::size_t T, double beta_start, double beta_end) {
    if (T < 2) throw ConfigError("schedule needs at least 2 timesteps");
    if (!(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end))
        throw ConfigError("betas must satisfy 0 < start <= end < 1");
    DiffusionSchedule s;
    s.T = T;
    s.betas.resize(T);
    s.alphas.resize(T);
    s.alpha_bars.resize(T);
    double running = 1.0;
    for (std::size_t t = 0; t < T; ++t) {
        s.betas[t] = beta_start + (beta_end - beta_start) * static_cast<double>(t) / static_cast<double>(T - 1);
        s.alphas[t] = 1.0 - s.betas[t];
        running *= s.alphas[t];
        s.alpha_bars[t] = running;
    }
    return s;
}

DiffusionSchedule default_schedule(std::size_t T) {
    const double rescale = 1000.0 / static_cast<double>(T);
    return make_schedule(T, 1e-4 * rescale, std::min(0.02 * rescale, 0.999));
}

Vector forward_noise(std::span<const double> x0, std::size_t t, std::span<const double> eps,
                     const DiffusionSchedule& schedule) {
    if (t >= schedule.T) throw ConfigError("timestep outside the schedule");
    if (x0.size() != eps.size()) throw LengthMismatch("x0 and eps lengths differ");
    const double a = std::sqrt(schedule.alpha_bars[t]);
    const double b = std::sqrt(1.0 - schedule.alpha_bars[t]);
    Vector out(x0.size());
    for (std::size_t i = 0; i < x0.size(); ++i) out[i] = a * x0[i] + b * eps[i];
    return out;
}

DenoiserParams DenoiserParams::zeros(const DenoiserConfig& c) {
    DenoiserParams p;
    p.D = c.D;
    p.hidden = c.hidden;
    p.emb = c.emb;
    p.tokens = kFirstContextToken + c.contexts;
    p.W_in = Matrix(c.hidden, c.D + c.emb);
    p.b_in.assign(c.hidden, 0.0);
    p.W_k = Matrix(c.hidden, c.emb);
    p.W_h = Matrix(c.hidden, c.hidden);
    p.b_h.assign(c.hidden, 0.0);
    p.W_v = Matrix(c.hidden, c.emb);
    p.W_out = Matrix(c.D, c.hidden);
    p.b_out.assign(c.D, 0.0);
    p.E = Matrix(p.tokens, c.emb);
    return p;
}

DenoiserParams DenoiserParams::random(const DenoiserConfig& c, Rng& rng) {
    DenoiserParams p = zeros(c);
    auto fill = [&](Matrix& m, double fan_in) {
        const double sigma = 1.0 / std::sqrt(fan_in);
        for (auto& v : m.values()) v = sigma * rng.normal();
    };
    fill(p.W_in, static_cast<double>(c.D + c.emb));
    fill(p.W_k, static_cast<double>(c.emb));
    fill(p.W_h, static_cast<double>(c.hidden));
    fill(p.W_v, static_cast<double>(c.emb));
    fill(p.W_out, static_cast<double>(c.hidden));
    for (auto& v : p.E.values()) v = rng.normal();
    return p;
}

Vector skip_gains(const DiffusionSchedule& schedule) {
    Vector g(schedule.T);
    for (std::size_t t = 0; t < schedule.T; ++t) g[t] = std::sqrt(1.0 - schedule.alpha_bars[t]);
    return g;
}

std::vector<std::span<double>> DenoiserParams::tensors() {
    return {W_in.values(), b_in, W_k.values(), W_h.values(), b_h, W_v.values(), W_out.values(), b_out, E.values()};
}

std::vector<std::span<const double>> DenoiserParams::tensors() const {
    return {W_in.values(), b_in, W_k.values(), W_h.values(), b_h, W_v.values(), W_out.values(), b_out, E.values()};
}

std::size_t DenoiserParams::parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors()) n += t.size();
    return n;
}

Vector time_embedding(std::size_t t, std::size_t emb) {
    Vector out(emb, 0.0);
    const std::size_t half = emb / 2;
    for (std::size_t i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
        out[i] = std::sin(static_cast<double>(t) * freq);
        out[half + i] = std::cos(static_cast<double>(t) * freq);
    }
    return out;
}

namespace {

void check_adapter(const DenoiserParams& params, const LoraAdapter* adapter) {
    if (adapter == nullptr) return;
    const auto& s = adapter->shape;
    if (s.rows != params.hidden || s.cols != params.emb)
        throw ShapeMismatch("adapter shape " + std::to_string(s.rows) + "x" + std::to_string(s.cols) +
                            " does not match conditioning projections " + std::to_string(params.hidden) + "x" +
                            std::to_string(params.emb));
    for (const auto& l : adapter->layers)
        if (l.B.rows() != s.rows || l.B.cols() != s.rank || l.A.rows() != s.rank || l.A.cols() != s.cols)
            throw ShapeMismatch("adapter factor shapes inconsistent with its declared shape");
}

// y += W x
inline void gemv_acc(const Matrix& w, std::span<const double> x, std::span<double> y) {
    const std::size_t cols = w.cols();
    const double* p = w.values().data();
    for (std::size_t r = 0; r < w.rows(); ++r, p += cols) {
        double s = 0.0;
        for (std::size_t c = 0; c < cols; ++c) s += p[c] * x[c];
        y[r] += s;
    }
}

// y += W^T x
inline void gemv_t_acc(const Matrix& w, std::span<const double> x, std::span<double> y) {
    const std::size_t cols = w.cols();
    const double* p = w.values().data();
    for (std::size_t r = 0; r < w.rows(); ++r, p += cols) {
        const double xr = x[r];
        if (xr == 0.0) continue;
        for (std::size_t c = 0; c < cols; ++c) y[c] += p[c] * xr;
    }
}

// G += a b^T
inline void outer_acc(Matrix& g, std::span<const double> a, std::span<const double> b, double scale = 1.0) {
    const std::size_t cols = g.cols();
    double* p = g.values().data();
    for (std::size_t r = 0; r < g.rows(); ++r, p += cols) {
        const double ar = a[r] * scale;
        if (ar == 0.0) continue;
        for (std::size_t c = 0; c < cols; ++c) p[c] += ar * b[c];
    }
}

void add_prompt_embedding(const DenoiserParams& params, const Prompt& prompt, std::span<double> cond) {
    axpy(1.0, params.E.row(kClassToken), cond);
    if (prompt.subject) axpy(1.0, params.E.row(kSubjectToken), cond);
    if (prompt.context) {
        if (*prompt.context >= params.contexts())
            throw ContextOutOfRange("prompt context " + std::to_string(*prompt.context) + " >= " +
                                    std::to_string(params.contexts()));
        axpy(1.0, params.E.row(kFirstContextToken + *prompt.context), cond);
    }
}

template <typename Fn>
void for_prompt_tokens(const Prompt& prompt, Fn&& fn) {
    fn(kClassToken);
    if (prompt.subject) fn(kSubjectToken);
    if (prompt.context) fn(kFirstContextToken + *prompt.context);
}

}  // namespace

Vector denoiser_forward(const DenoiserParams& params, std::span<const double> x_t, const Prompt& prompt,
                        std::size_t t, const LoraAdapter* adapter, double lora_scale, ForwardCache* cache) {
    if (x_t.size() != params.D) throw ShapeMismatch("x_t length differs from denoiser D");
    if (!params.skip.empty() && t >= params.skip.size()) throw ConfigError("timestep outside the denoiser's schedule");
    check_adapter(params, adapter);
    const std::size_t H = params.hidden;
    const std::size_t M = params.emb;

    ForwardCache local;
    ForwardCache& c = cache ? *cache : local;
    c.prompt = prompt;
    const Vector temb = time_embedding(t, M);
    c.input.assign(x_t.begin(), x_t.end());
    c.input.insert(c.input.end(), temb.begin(), temb.end());
    c.cond = temb;
    add_prompt_embedding(params, prompt, c.cond);

    c.h1 = params.b_in;
    gemv_acc(params.W_in, c.input, c.h1);
    gemv_acc(params.W_k, c.cond, c.h1);
    c.h2 = params.b_h;
    c.key_proj.clear();
    c.value_proj.clear();
    const double s = adapter ? lora_scale * adapter->scale : 0.0;
    if (adapter) {
        const auto& k = adapter->layer(TargetLayer::kKey);
        c.key_proj.assign(adapter->shape.rank, 0.0);
        gemv_acc(k.A, c.cond, c.key_proj);
        if (s != 0.0) {
            Vector delta(H, 0.0);
            gemv_acc(k.B, c.key_proj, delta);
            axpy(s, delta, c.h1);
        }
    }
    for (auto& v : c.h1) v = std::tanh(v);

    gemv_acc(params.W_h, c.h1, c.h2);
    gemv_acc(params.W_v, c.cond, c.h2);
    if (adapter) {
        const auto& v = adapter->layer(TargetLayer::kValue);
        c.value_proj.assign(adapter->shape.rank, 0.0);
        gemv_acc(v.A, c.cond, c.value_proj);
        if (s != 0.0) {
            Vector delta(H, 0.0);
            gemv_acc(v.B, c.value_proj, delta);
            axpy(s, delta, c.h2);
        }
    }
    for (auto& v : c.h2) v = std::tanh(v);

    Vector out = params.b_out;
    gemv_acc(params.W_out, c.h2, out);
    if (!params.skip.empty()) axpy(params.skip[t], x_t, out);
    return out;
}

void denoiser_backward(const DenoiserParams& params, const ForwardCache& c, std::span<const double> upstream,
                       const LoraAdapter* adapter, double lora_scale, LoraAdapter* adapter_grads,
                       DenoiserParams* param_grads) {
    if (upstream.size() != params.D) throw ShapeMismatch("upstream length differs from denoiser D");
    check_adapter(params, adapter);
    if (adapter_grads != nullptr) {
        if (adapter == nullptr) throw ShapeMismatch("adapter gradients requested without an adapter");
        check_adapter(params, adapter_grads);
    }
    const std::size_t H = params.hidden;
    const double s = adapter ? lora_scale * adapter->scale : 0.0;

    Vector da2(H, 0.0);
    gemv_t_acc(params.W_out, upstream, da2);
    for (std::size_t i = 0; i < H; ++i) da2[i] *= 1.0 - c.h2[i] * c.h2[i];

    Vector da1(H, 0.0);
    gemv_t_acc(params.W_h, da2, da1);
    for (std::size_t i = 0; i < H; ++i) da1[i] *= 1.0 - c.h1[i] * c.h1[i];

    if (adapter_grads != nullptr) {
        const std::size_t r = adapter->shape.rank;
        auto accumulate = [&](TargetLayer which, std::span<const double> da, std::span<const double> proj) {
            const auto& layer = adapter->layer(which);
            auto& grad = adapter_grads->layer(which);
            // d/dB = s * da (A e)^T ;  d/dA = s * (B^T da) e^T
            outer_acc(grad.B, da, proj, s);
            Vector bt_da(r, 0.0);
            gemv_t_acc(layer.B, da, bt_da);
            outer_acc(grad.A, bt_da, c.cond, s);
        };
        accumulate(TargetLayer::kKey, da1, c.key_proj);
        accumulate(TargetLayer::kValue, da2, c.value_proj);
    }

    if (param_grads != nullptr) {
        DenoiserParams& g = *param_grads;
        outer_acc(g.W_out, upstream, c.h2);
        axpy(1.0, upstream, g.b_out);
        outer_acc(g.W_h, da2, c.h1);
        axpy(1.0, da2, g.b_h);
        outer_acc(g.W_v, da2, c.cond);
        outer_acc(g.W_in, da1, c.input);
        axpy(1.0, da1, g.b_in);
        outer_acc(g.W_k, da1, c.cond);

        Vector dcond(params.emb, 0.0);
        gemv_t_acc(params.W_k, da1, dcond);
        gemv_t_acc(params.W_v, da2, dcond);
        if (adapter != nullptr && s != 0.0) {
            const std::size_t r = adapter->shape.rank;
            for (auto [which, da] : {std::pair{TargetLayer::kKey, &da1}, std::pair{TargetLayer::kValue, &da2}}) {
                const auto& layer = adapter->layer(which);
                Vector bt_da(r, 0.0);
                gemv_t_acc(layer.B, *da, bt_da);
                for (auto& v : bt_da) v *= s;
                gemv_t_acc(layer.A, bt_da, dcond);
            }
        }
        for_prompt_tokens(c.prompt, [&](std::size_t tok) { axpy(1.0, dcond, g.E.row(tok)); });
    }
}

DenoiserParams materialize(const DenoiserParams& params, const LoraAdapter& adapter, double lora_scale) {
    check_adapter(params, &adapter);
    DenoiserParams out = params;
    const double s = lora_scale * adapter.scale;
    const Matrix dk = adapter.delta(TargetLayer::kKey);
    const Matrix dv = adapter.delta(TargetLayer::kValue);
    axpy(s, dk.values(), out.W_k.values());
    axpy(s, dv.values(), out.W_v.values());
    return out;
}

void DivergenceGuard::observe(double loss) {
    if (!std::isfinite(loss)) throw DivergenceError("loss is not finite");
    if (!initial_) {
        initial_ = loss;
        return;
    }
    if (loss > factor_ * *initial_) {
        if (++above_ >= patience_)
            throw DivergenceError("loss stayed above " + std::to_string(factor_) + "x initial for " +
                                  std::to_string(patience_) + " steps");
    } else {
        above_ = 0;
    }
}

double cosine_lr(double lr, double floor, std::size_t step, std::size_t steps) {
    if (steps <= 1) return lr;
    const double progress = static_cast<double>(step) / static_cast<double>(steps - 1);
    return lr * (floor + (1.0 - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
}

TrainResult train_base(std::span<const IdentityDataset> corpus, const DiffusionSchedule& schedule,
                       const BaseTrainConfig& config) {
    std::vector<const Observation*> pool;
    for (const auto& ds : corpus)
        for (const auto& obs : ds.observations) pool.push_back(&obs);
    if (pool.empty()) throw EmptyDataset("base training corpus has no observations");
    if (config.batch == 0 || config.steps == 0) throw ConfigError("base training needs batch >= 1 and steps >= 1");
    for (const auto* obs : pool)
        if (obs->x.size() != config.model.D) throw ShapeMismatch("observation length differs from model D");

    Rng rng(config.seed);
    TrainResult result;
    result.params = DenoiserParams::random(config.model, rng);
    DenoiserParams& params = result.params;
    params.skip = skip_gains(schedule);

    auto tensors = params.tensors();
    std::vector<Adam> optim;
    for (const auto& t : tensors) optim.emplace_back(t.size(), AdamConfig{config.lr});

    DivergenceGuard guard;
    DenoiserParams grads = DenoiserParams::zeros(config.model);
    ForwardCache cache;
    Vector upstream(config.model.D);
    double window = 0.0;
    std::size_t window_count = 0;
    const double inv_batch = 1.0 / static_cast<double>(config.batch);

    for (std::size_t step = 0; step < config.steps; ++step) {
        const double lr = cosine_lr(config.lr, config.lr_floor, step, config.steps);
        for (auto& o : optim) o.set_lr(lr);
        for (auto t : grads.tensors()) std::fill(t.begin(), t.end(), 0.0);
        double loss = 0.0;
        for (std::size_t b = 0; b < config.batch; ++b) {
            const Observation& obs = *pool[rng.index(pool.size())];
            const std::size_t t = rng.index(schedule.T);
            const Vector eps = rng.normal_vector(config.model.D);
            const Vector x_t = forward_noise(obs.x, t, eps, schedule);
            const Vector out =
                denoiser_forward(params, x_t, Prompt::class_prompt(obs.context), t, nullptr, 1.0, &cache);
            for (std::size_t i = 0; i < upstream.size(); ++i) {
                const double diff = out[i] - eps[i];
                loss += diff * diff;
                upstream[i] = 2.0 * diff * inv_batch;
            }
            denoiser_backward(params, cache, upstream, nullptr, 1.0, nullptr, &grads);
        }
        loss *= inv_batch;
        if (step == 0) result.initial_loss = loss;
        guard.observe(loss);

        auto grad_tensors = grads.tensors();
        for (std::size_t i = 0; i < tensors.size(); ++i) optim[i].step(tensors[i], grad_tensors[i]);

        window += loss;
        if (++window_count == config.log_every || step + 1 == config.steps) {
            result.loss_curve.push_back(window / static_cast<double>(window_count));
            window = 0.0;
            window_count = 0;
        }
    }
    result.final_loss = result.loss_curve.back();
    return result;
}

std::vector<std::size_t> ddim_timesteps(std::size_t T, std::size_t steps) {
    if (steps == 0 || steps > T) throw ConfigError("DDIM steps must be in [1, T]");
    std::vector<std::size_t> ts(steps);
    for (std::size_t i = 0; i < steps; ++i) ts[steps - 1 - i] = ((i + 1) * T) / steps - 1;
    return ts;
}

Vector ddim_sample_from(const DenoiserParams& params, const DiffusionSchedule& schedule, const Prompt& prompt,
                        std::size_t steps, Vector x, const AdapterSelector& adapter_at, double lora_scale) {
    const auto ts = ddim_timesteps(schedule.T, steps);
    for (std::size_t i = 0; i < ts.size(); ++i) {
        const std::size_t t = ts[i];
        const LoraAdapter* adapter = adapter_at ? adapter_at(t) : nullptr;
        const Vector eps = denoiser_forward(params, x, prompt, t, adapter, lora_scale);
        const double ab = schedule.alpha_bars[t];
        const double sa = std::sqrt(ab);
        const double sb = std::sqrt(1.0 - ab);
        Vector x0(x.size());
        for (std::size_t j = 0; j < x.size(); ++j) x0[j] = (x[j] - sb * eps[j]) / sa;
        if (i + 1 == ts.size()) return x0;
        const double ab_prev = schedule.alpha_bars[ts[i + 1]];
        const double pa = std::sqrt(ab_prev);
        const double pb = std::sqrt(1.0 - ab_prev);
        for (std::size_t j = 0; j < x.size(); ++j) x[j] = pa * x0[j] + pb * eps[j];
    }
    return x;
}

Vector ddim_sample(const DenoiserParams& params, const DiffusionSchedule& schedule, const Prompt& prompt,
                   std::size_t steps, std::uint64_t seed, const LoraAdapter* adapter, double lora_scale) {
    Rng rng(seed);
    Vector x_T = rng.normal_vector(params.D);
    return ddim_sample_from(params, schedule, prompt, steps, std::move(x_T),
                            [adapter](std::size_t) { return adapter; }, lora_scale);
}

}  // namespace w2w
