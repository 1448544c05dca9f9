#include "w2w/lora.hpp"

#include <algorithm>
#include <numeric>
#include <set>

#include "w2w/adam.hpp"
#include "w2w/error.hpp"
#include "w2w/worker_pool.hpp"

namespace w2w {

PriorCache make_prior_cache(const DenoiserParams& base, const DiffusionSchedule& schedule, std::size_t count,
                            std::size_t ddim_steps, std::uint64_t seed) {
    PriorCache cache;
    cache.samples.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t context = i % base.contexts();
        cache.samples.push_back(
            {ddim_sample(base, schedule, Prompt::class_prompt(context), ddim_steps, mix_seed(seed, i)), context});
    }
    return cache;
}

LoraAdapter initial_adapter(const DenoiserParams& base, const FinetuneConfig& config) {
    LoraAdapter adapter = LoraAdapter::zeros(base.adapter_shape(config.rank));
    Rng rng(config.init_seed);
    for (auto& layer : adapter.layers)
        for (auto& v : layer.A.values()) v = config.init_a_sigma * rng.normal();
    return adapter;
}

FinetuneResult dreambooth_finetune(const DenoiserParams& base, const DiffusionSchedule& schedule,
                                   std::span<const Observation> data, const PriorCache& prior,
                                   const FinetuneConfig& config) {
    if (data.empty()) throw EmptyDataset("fine-tuning needs at least one observation");
    if (config.lambda < 0.0) throw ConfigError("lambda must be non-negative");
    if (config.batch == 0) throw ConfigError("batch must be >= 1");

    FinetuneResult result;
    result.adapter = initial_adapter(base, config);
    if (config.steps == 0) return result;

    const AdapterShape shape = result.adapter.shape;
    Vector theta = flatten(result.adapter);
    Adam adam(theta.size(), AdamConfig{config.lr});
    DivergenceGuard guard;
    Rng rng(config.seed);
    ForwardCache cache;
    Vector upstream(base.D);
    const bool use_prior = config.lambda > 0.0 && !prior.samples.empty();
    const double inv_batch = 1.0 / static_cast<double>(config.batch);
    double window = 0.0;
    std::size_t window_count = 0;

    auto accumulate = [&](const Observation& obs, const Prompt& prompt, double weight, const LoraAdapter& adapter,
                          LoraAdapter& grads) {
        const std::size_t t = rng.index(schedule.T);
        const Vector eps = rng.normal_vector(base.D);
        const Vector x_t = forward_noise(obs.x, t, eps, schedule);
        const Vector out = denoiser_forward(base, x_t, prompt, t, &adapter, 1.0, &cache);
        double loss = 0.0;
        for (std::size_t i = 0; i < upstream.size(); ++i) {
            const double diff = out[i] - eps[i];
            loss += diff * diff;
            upstream[i] = 2.0 * weight * diff * inv_batch;
        }
        denoiser_backward(base, cache, upstream, &adapter, 1.0, &grads);
        return weight * loss * inv_batch;
    };

    for (std::size_t step = 0; step < config.steps; ++step) {
        const LoraAdapter adapter = unflatten(theta, shape);
        LoraAdapter grads = LoraAdapter::zeros(shape);
        double loss = 0.0;
        for (std::size_t b = 0; b < config.batch; ++b) {
            const Observation& obs = data[rng.index(data.size())];
            loss += accumulate(obs, Prompt::subject_prompt(obs.context), 1.0, adapter, grads);
        }
        if (use_prior) {
            for (std::size_t b = 0; b < config.batch; ++b) {
                const Observation& obs = prior.samples[rng.index(prior.samples.size())];
                loss += accumulate(obs, Prompt::class_prompt(obs.context), config.lambda, adapter, grads);
            }
        }
        guard.observe(loss);
        adam.step(theta, flatten(grads));

        window += loss;
        if (++window_count == config.log_every || step + 1 == config.steps) {
            result.loss_curve.push_back(window / static_cast<double>(window_count));
            window = 0.0;
            window_count = 0;
        }
    }
    result.adapter = unflatten(theta, shape);
    if (config.balance) result.adapter = balance_factors(result.adapter, initial_adapter(base, config));
    result.final_loss = result.loss_curve.back();
    return result;
}

void WeightDataset::validate() const {
    if (thetas.rows() != ids.size() || attrs.size() != ids.size())
        throw ShapeMismatch("weight dataset rows, ids and attrs disagree");
    if (thetas.cols() != shape.flat_size()) throw ShapeMismatch("theta width differs from the adapter layout");
    if (!thetas.all_finite()) throw DegenerateData("weight dataset contains non-finite values");
    for (const auto& a : attrs)
        if (!attrs.empty() && a.size() != attrs.front().size()) throw ShapeMismatch("ragged attribute rows");
}

WeightDataset WeightDataset::subset(std::span<const std::size_t> rows) const {
    WeightDataset out;
    out.shape = shape;
    out.layout_version = layout_version;
    out.thetas = Matrix(rows.size(), thetas.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= size()) throw LengthMismatch("subset row out of range");
        std::copy(thetas.row(rows[i]).begin(), thetas.row(rows[i]).end(), out.thetas.row(i).begin());
        out.ids.push_back(ids[rows[i]]);
        out.attrs.push_back(attrs[rows[i]]);
    }
    return out;
}

std::vector<int> WeightDataset::labels(std::size_t attribute) const {
    std::vector<int> out(size());
    for (std::size_t i = 0; i < size(); ++i) {
        if (attribute >= attrs[i].size()) throw LengthMismatch("attribute index out of range");
        out[i] = attrs[i][attribute] ? 1 : -1;
    }
    return out;
}

std::uint64_t identity_seed(std::uint64_t global_seed, std::uint64_t id) { return mix_seed(global_seed, id); }

WeightDataset finetune_corpus(const DenoiserParams& base, const DiffusionSchedule& schedule,
                              std::span<const IdentityDataset> corpus, const PriorCache& prior,
                              const FinetuneConfig& config, const CorpusOptions& options) {
    if (corpus.empty()) throw EmptyDataset("corpus is empty");
    std::set<std::uint64_t> seen;
    for (const auto& ds : corpus)
        if (!seen.insert(ds.identity.id).second)
            throw DuplicateId("identity id " + std::to_string(ds.identity.id) + " appears twice");

    std::vector<std::size_t> order(corpus.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return corpus[a].identity.id < corpus[b].identity.id; });

    const AdapterShape shape = base.adapter_shape(config.rank);
    std::vector<Vector> rows(order.size());
    auto errors = parallel_for(order.size(), options.workers, [&](std::size_t slot) {
        const IdentityDataset& ds = corpus[order[slot]];
        FinetuneConfig job = config;
        job.seed = identity_seed(config.seed, ds.identity.id);
        rows[slot] = flatten(dreambooth_finetune(base, schedule, ds.observations, prior, job).adapter);
    });

    WeightDataset out;
    out.shape = shape;
    std::vector<Vector> kept;
    for (std::size_t slot = 0; slot < order.size(); ++slot) {
        const IdentityDataset& ds = corpus[order[slot]];
        if (errors[slot]) {
            if (options.keep_partial) continue;
            try {
                std::rethrow_exception(errors[slot]);
            } catch (const std::exception& e) {
                throw DivergenceError("fine-tuning identity " + std::to_string(ds.identity.id) +
                                      " failed: " + e.what());
            }
        }
        kept.push_back(std::move(rows[slot]));
        out.ids.push_back(ds.identity.id);
        out.attrs.push_back(ds.identity.attrs);
    }
    out.thetas = Matrix(kept.size(), shape.flat_size());
    for (std::size_t i = 0; i < kept.size(); ++i) std::copy(kept[i].begin(), kept[i].end(), out.thetas.row(i).begin());
    return out;
}

}  // namespace w2w
