#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "w2w/adapter.hpp"
#include "w2w/diffusion.hpp"
#include "w2w/world.hpp"

namespace w2w {

struct FinetuneConfig {
    double lambda = 1.0;  // prior-preservation weight
    std::size_t steps = 2000;
    double lr = 3e-3;
    std::size_t batch = 8;
    std::size_t rank = 1;
    double init_a_sigma = 0.01;
    // Shared by every job in a corpus so all adapters start from the same A.
    std::uint64_t init_seed = 11;
    // Drives minibatch draws; corpus jobs derive a per-identity seed from it.
    std::uint64_t seed = 5;
    std::size_t log_every = 100;
    // Return factors in balanced form (see balance_factors) against the init.
    bool balance = true;
};

/// Class-prompt samples drawn once from the base model.
struct PriorCache {
    std::vector<Observation> samples;
};

inline constexpr std::size_t kDefaultPriorSamples = 64;

PriorCache make_prior_cache(const DenoiserParams& base, const DiffusionSchedule& schedule,
                            std::size_t count = kDefaultPriorSamples, std::size_t ddim_steps = kDefaultDdimSteps,
                            std::uint64_t seed = 3);

struct FinetuneResult {
    LoraAdapter adapter;
    Vector loss_curve;
    double final_loss = 0.0;
};

LoraAdapter initial_adapter(const DenoiserParams& base, const FinetuneConfig& config);

/// Subject term on V_STAR prompts over the identity's observations plus
/// lambda times the denoising term on CLASS prompts over the prior cache.
/// Only the adapter factors move.
FinetuneResult dreambooth_finetune(const DenoiserParams& base, const DiffusionSchedule& schedule,
                                   std::span<const Observation> data, const PriorCache& prior,
                                   const FinetuneConfig& config);

/// Flattened adapters of a corpus with the identities' attribute labels.
struct WeightDataset {
    Matrix thetas;  // N x d
    std::vector<std::uint64_t> ids;
    std::vector<std::vector<std::uint8_t>> attrs;
    AdapterShape shape;
    std::uint32_t layout_version = kFlattenLayoutVersion;

    std::size_t size() const noexcept { return ids.size(); }
    // Throws if rows/ids/attrs disagree or a value is not finite.
    void validate() const;
    // Rows at the given indices, in that order.
    WeightDataset subset(std::span<const std::size_t> rows) const;
    std::vector<int> labels(std::size_t attribute) const;  // +1 / -1
};

struct CorpusOptions {
    std::size_t workers = 1;
    bool keep_partial = false;
};

std::uint64_t identity_seed(std::uint64_t global_seed, std::uint64_t id);

/// Fine-tunes every identity independently; rows come back sorted by id.
WeightDataset finetune_corpus(const DenoiserParams& base, const DiffusionSchedule& schedule,
                              std::span<const IdentityDataset> corpus, const PriorCache& prior,
                              const FinetuneConfig& config, const CorpusOptions& options = {});

}  // namespace w2w
