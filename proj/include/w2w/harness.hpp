#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "w2w/diffusion.hpp"
#include "w2w/directions.hpp"
#include "w2w/inversion.hpp"
#include "w2w/lora.hpp"
#include "w2w/space.hpp"
#include "w2w/world.hpp"

namespace w2w {

namespace fs = std::filesystem;

struct CorpusConfig {
    std::size_t N = 256;        // training identities
    std::size_t holdout = 0;    // extra held-out identities; 0 means N / 10
    std::size_t n_obs = 10;

    std::size_t holdout_count() const { return holdout ? holdout : std::max<std::size_t>(1, N / 10); }
};

struct EvalConfig {
    std::size_t samples_per_context = 4;
    std::size_t ddim_steps = kDefaultDdimSteps;
    std::size_t edit_models = 10;  // held-out models per edit direction
};

struct ExperimentConfig {
    std::uint64_t seed = 0;
    WorldConfig world;
    CorpusConfig corpus;
    std::size_t T = 100;
    BaseTrainConfig base;
    FinetuneConfig finetune;
    std::size_t prior_samples = kDefaultPriorSamples;
    std::size_t prior_ddim_steps = kDefaultDdimSteps;
    std::size_t space_m = 64;
    std::size_t m_edit = 0;    // 0: max(8, d / 100)
    double direction_ridge = 0.0;
    bool gram_schmidt = false;
    InversionConfig invert{.m_invert = 0};  // m_invert 0: max(16, d / 10)
    EvalConfig eval;

    static ExperimentConfig from_json(const nlohmann::json& j);
    nlohmann::ordered_json to_json() const;
    // Seeds of every stage derive from `seed`; the stored sub-configs keep
    // their own seed fields for direct library use.
    ExperimentConfig resolved() const;
    std::size_t resolved_m_edit(std::size_t d) const;
    std::size_t resolved_m_invert(std::size_t d) const;
};

std::string config_hash(const ExperimentConfig& config);

// ---- evaluation protocol shared by the CLI and the acceptance suite ----

// contexts x samples_per_context DDIM samples under the subject prompt; the
// (context, k) seeds are shared across methods so comparisons are paired.
std::vector<Observation> subject_samples(const DenoiserParams& base, const DiffusionSchedule& schedule,
                                         const LoraAdapter* adapter, const EvalConfig& eval, std::uint64_t seed);

double adapter_identity_score(const World& world, const DenoiserParams& base, const DiffusionSchedule& schedule,
                              const LoraAdapter* adapter, std::span<const double> target_z, const EvalConfig& eval,
                              std::uint64_t seed);

struct EditOutcome {
    std::uint64_t id = 0;
    double alpha = 0.0;
    bool flipped = false;
    double projection_before = 0.0;  // mean <z_hat, a_j> over samples
    double projection_after = 0.0;
    double identity_before = 0.0;
    double identity_after = 0.0;
    double preserved_after = 0.0;    // cosine with attribute axes removed
    double weight_l2 = 0.0;
};

// Edits toward the opposite of the identity's true label at |alpha| = strength.
EditOutcome evaluate_edit(const World& world, const DenoiserParams& base, const DiffusionSchedule& schedule,
                          const Identity& identity, std::span<const double> theta, const EditDirection& dir,
                          double strength, const EvalConfig& eval, std::uint64_t seed,
                          std::optional<std::size_t> t_inject = std::nullopt);

struct ComposedEditOutcome {
    std::uint64_t id = 0;
    std::vector<bool> flipped;  // per direction
    double identity_after = 0.0;
    double preserved_after = 0.0;
};

// Every direction at its max_strength toward the opposite label, composed.
ComposedEditOutcome evaluate_composed_edit(const World& world, const DenoiserParams& base,
                                           const DiffusionSchedule& schedule, const Identity& identity,
                                           std::span<const double> theta, std::span<const EditDirection> dirs,
                                           const EvalConfig& eval, std::uint64_t seed);

struct InversionComparison {
    std::uint64_t id = 0;
    double multi = 0.0;
    double single = 0.0;
    double w2w = 0.0;
    double single_seconds = 0.0;
    double w2w_seconds = 0.0;
    std::size_t single_params = 0;
    std::size_t w2w_params = 0;
    InversionResult inversion;
};

InversionComparison compare_inversion(const World& world, const DenoiserParams& base,
                                      const DiffusionSchedule& schedule, const W2wSpace& space,
                                      const PriorCache& prior, const IdentityDataset& item,
                                      std::span<const double> multi_theta, const FinetuneConfig& finetune,
                                      const InversionConfig& invert, const EvalConfig& eval, std::uint64_t seed);

struct AblationRow {
    std::size_t N = 0;
    std::uint64_t seed = 0;
    std::size_t m = 0;
    double entanglement = 0.0;
    double identity = 0.0;
};

// Refit on a seeded subset of `train`, retrain every direction, invert the
// fixed holdouts.
AblationRow ablation_point(const World& world, const DenoiserParams& base, const DiffusionSchedule& schedule,
                           const WeightDataset& train, const std::vector<IdentityDataset>& holdouts,
                           const ExperimentConfig& config, std::size_t N, std::uint64_t seed, std::size_t workers);

// True when at most `allowed` consecutive pairs break the trend.
bool trend_holds(std::span<const double> values, bool increasing, std::size_t allowed);

// ---- stage pipeline ----

struct StageResult {
    std::string stage;
    bool up_to_date = false;
};

class Pipeline {
public:
    Pipeline(fs::path out, ExperimentConfig config, std::size_t workers = 1);

    const fs::path& out() const noexcept { return out_; }
    const ExperimentConfig& config() const noexcept { return config_; }
    const std::string& hash() const noexcept { return hash_; }

    StageResult gen_world();
    StageResult train_base();
    StageResult finetune_corpus(bool keep_partial = false);
    StageResult fit_space();
    StageResult sample(std::size_t count, std::uint64_t seed);
    StageResult train_directions();
    // Empty attribute list means every attribute; empty ids means the first
    // eval.edit_models holdouts. alpha_scale multiplies max_strength.
    StageResult edit(std::vector<std::size_t> attributes, std::vector<std::uint64_t> ids, double alpha_scale,
                     std::optional<std::size_t> t_inject);
    // Empty ids means every holdout.
    StageResult invert(std::vector<std::uint64_t> ids);
    // Inverts every observation in an external observation file (the image
    // path analog); results land in external_inversion.json.
    StageResult invert_file(const fs::path& observations);
    StageResult ablate_scaling(std::vector<std::size_t> Ns, std::vector<std::uint64_t> seeds);
    StageResult report();

    // Loaded artifacts (each verified against its producing manifest).
    World world() const;
    std::vector<Identity> identities() const;
    std::vector<IdentityDataset> datasets(std::span<const std::uint64_t> ids) const;
    std::vector<std::uint64_t> train_ids() const;
    std::vector<std::uint64_t> holdout_ids() const;
    DenoiserParams base() const;
    DiffusionSchedule schedule() const;
    PriorCache prior() const;
    WeightDataset corpus() const;
    WeightDataset train_dataset() const;
    W2wSpace space() const;
    std::vector<EditDirection> directions() const;

private:
    fs::path path(const std::string& rel) const { return out_ / rel; }
    // Reads an artifact after checking it against its producer's manifest
    // and that producer's own inputs against the current files.
    std::string read_checked(const std::string& rel) const;
    // Config sections a stage depends on, upstream sections included.
    nlohmann::ordered_json stage_config(const std::string& stage) const;
    bool fresh(const std::string& stage, const nlohmann::ordered_json& inputs) const;
    void record(const std::string& stage, const nlohmann::ordered_json& inputs,
                const std::vector<std::string>& outputs) const;
    nlohmann::ordered_json inputs_for(const std::string& stage, const std::vector<std::string>& files,
                                      const nlohmann::ordered_json& params) const;
    void write_metric(const std::string& rel, nlohmann::ordered_json payload) const;
    void write_timing(const std::string& rel, const nlohmann::ordered_json& timing) const;
    void check_holdout_hygiene(std::span<const std::uint64_t> used) const;

    fs::path out_;
    ExperimentConfig config_;
    std::string hash_;
    std::size_t workers_;
};

}  // namespace w2w
