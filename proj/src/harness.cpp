#include "w2w/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <set>

#include "w2w/error.hpp"
#include "w2w/io.hpp"
#include "w2w/worker_pool.hpp"

#ifndef W2W_GIT_REVISION
#define W2W_GIT_REVISION "unknown"
#endif

namespace w2w {

using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

namespace {

// Salts for the per-stage child seeds.
enum : std::uint64_t {
    kPopulationSalt = 1,
    kBaseSalt = 2,
    kFinetuneSalt = 3,
    kInitSalt = 4,
    kPriorSalt = 5,
    kInvertSalt = 6,
    kEvalSalt = 7,
    kSingleSalt = 8,
};

double seconds_since(std::chrono::steady_clock::time_point start) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

struct MeanStd {
    double mean = 0.0;
    double stddev = 0.0;
};

MeanStd mean_std(std::span<const double> v) {
    MeanStd r;
    if (v.empty()) return r;
    for (double x : v) r.mean += x;
    r.mean /= static_cast<double>(v.size());
    if (v.size() > 1) {
        for (double x : v) r.stddev += (x - r.mean) * (x - r.mean);
        r.stddev = std::sqrt(r.stddev / static_cast<double>(v.size() - 1));
    }
    return r;
}

ojson mean_std_json(std::span<const double> v) {
    const MeanStd m = mean_std(v);
    return {{"mean", m.mean}, {"std", m.stddev}, {"n", v.size()}};
}

double median(std::vector<double> v) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const std::size_t h = v.size() / 2;
    return v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

void check_keys(const json& j, const std::string& section, std::initializer_list<const char*> keys) {
    if (!j.is_object()) throw ConfigError(section + " must be an object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (std::none_of(keys.begin(), keys.end(), [&](const char* k) { return it.key() == k; }))
            throw ConfigError("unknown key " + (section.empty() ? "" : section + ".") + it.key());
    }
}

template <typename T>
void get(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

ojson world_json(const WorldConfig& w) {
    return {{"k", w.k},
            {"D", w.D},
            {"C", w.C},
            {"n_attrs", w.n_attrs},
            {"render_hidden", w.render_hidden},
            {"noise_sigma", w.noise_sigma},
            {"attr_scale", w.attr_scale},
            {"linear_gain", w.linear_gain},
            {"nonlinear_gain", w.nonlinear_gain},
            {"context_scale", w.context_scale},
            {"strip_base", w.strip_base},
            {"duplicate_fraction", w.duplicate_fraction},
            {"render_seed", w.render_seed}};
}

WorldConfig world_from(const json& j) {
    check_keys(j, "world",
               {"k", "D", "C", "n_attrs", "render_hidden", "noise_sigma", "attr_scale", "linear_gain",
                "nonlinear_gain", "context_scale", "strip_base", "duplicate_fraction", "render_seed"});
    WorldConfig w;
    get(j, "k", w.k);
    get(j, "D", w.D);
    get(j, "C", w.C);
    get(j, "n_attrs", w.n_attrs);
    get(j, "render_hidden", w.render_hidden);
    get(j, "noise_sigma", w.noise_sigma);
    get(j, "attr_scale", w.attr_scale);
    get(j, "linear_gain", w.linear_gain);
    get(j, "nonlinear_gain", w.nonlinear_gain);
    get(j, "context_scale", w.context_scale);
    get(j, "strip_base", w.strip_base);
    get(j, "duplicate_fraction", w.duplicate_fraction);
    get(j, "render_seed", w.render_seed);
    return w;
}

void round_to_float(std::vector<Observation>& obs) {
    for (auto& o : obs)
        for (auto& v : o.x) v = static_cast<double>(static_cast<float>(v));
}

std::string obs_path(std::uint64_t id) { return "observations/" + std::to_string(id) + ".obs"; }

const std::vector<std::pair<std::string, std::string>>& producers() {
    static const std::vector<std::pair<std::string, std::string>> table = {
        {"world.json", "gen-world"},
        {"identities.jsonl", "gen-world"},
        {"split.json", "gen-world"},
        {"observations/", "gen-world"},
        {"base.w2wden", "train-base"},
        {"base_train.json", "train-base"},
        {"prior.obs", "finetune-corpus"},
        {"corpus.w2wdat", "finetune-corpus"},
        {"finetune.json", "finetune-corpus"},
        {"space.w2wspc", "fit-space"},
        {"space.json", "fit-space"},
        {"coeff_diagnostics.json", "fit-space"},
        {"samples.json", "sample"},
        {"samples.csv", "sample"},
        {"directions/", "train-directions"},
        {"directions.json", "train-directions"},
        {"entanglement.csv", "train-directions"},
        {"edit_metrics.json", "edit"},
        {"inversions/", "invert"},
        {"invert_metrics.json", "invert"},
        {"ablation.csv", "ablate-scaling"},
        {"ablation.json", "ablate-scaling"},
        {"external_inversion.json", "invert-external"},
        {"report.json", "report"},
        {"report.md", "report"},
    };
    return table;
}

std::string producer_of(const std::string& rel) {
    for (const auto& [prefix, stage] : producers()) {
        if (prefix.back() == '/' ? rel.starts_with(prefix) : rel == prefix) return stage;
    }
    throw ConfigError("no stage produces " + rel);
}

}  // namespace

// ---- config ----

ExperimentConfig ExperimentConfig::from_json(const json& j) {
    ExperimentConfig c;
    try {
        check_keys(j, "", {"seed", "world", "corpus", "schedule", "base", "finetune", "space", "directions", "invert",
                           "eval"});
        get(j, "seed", c.seed);
        if (j.contains("world")) c.world = world_from(j.at("world"));
        if (j.contains("corpus")) {
            const auto& s = j.at("corpus");
            check_keys(s, "corpus", {"N", "holdout", "n_obs"});
            get(s, "N", c.corpus.N);
            get(s, "holdout", c.corpus.holdout);
            get(s, "n_obs", c.corpus.n_obs);
        }
        if (j.contains("schedule")) {
            const auto& s = j.at("schedule");
            check_keys(s, "schedule", {"T"});
            get(s, "T", c.T);
        }
        if (j.contains("base")) {
            const auto& s = j.at("base");
            check_keys(s, "base", {"hidden", "emb", "steps", "batch", "lr", "lr_floor", "log_every"});
            get(s, "hidden", c.base.model.hidden);
            get(s, "emb", c.base.model.emb);
            get(s, "steps", c.base.steps);
            get(s, "batch", c.base.batch);
            get(s, "lr", c.base.lr);
            get(s, "lr_floor", c.base.lr_floor);
            get(s, "log_every", c.base.log_every);
        }
        if (j.contains("finetune")) {
            const auto& s = j.at("finetune");
            check_keys(s, "finetune",
                       {"lambda", "steps", "lr", "batch", "rank", "init_a_sigma", "log_every", "balance",
                        "prior_samples", "prior_ddim_steps"});
            get(s, "lambda", c.finetune.lambda);
            get(s, "steps", c.finetune.steps);
            get(s, "lr", c.finetune.lr);
            get(s, "batch", c.finetune.batch);
            get(s, "rank", c.finetune.rank);
            get(s, "init_a_sigma", c.finetune.init_a_sigma);
            get(s, "log_every", c.finetune.log_every);
            get(s, "balance", c.finetune.balance);
            get(s, "prior_samples", c.prior_samples);
            get(s, "prior_ddim_steps", c.prior_ddim_steps);
        }
        if (j.contains("space")) {
            const auto& s = j.at("space");
            check_keys(s, "space", {"m"});
            get(s, "m", c.space_m);
        }
        if (j.contains("directions")) {
            const auto& s = j.at("directions");
            check_keys(s, "directions", {"m_edit", "ridge", "gram_schmidt"});
            get(s, "m_edit", c.m_edit);
            get(s, "ridge", c.direction_ridge);
            get(s, "gram_schmidt", c.gram_schmidt);
        }
        if (j.contains("invert")) {
            const auto& s = j.at("invert");
            check_keys(s, "invert",
                       {"m_invert", "epochs", "lr", "beta1", "beta2", "weight_decay", "batch", "eval_pool"});
            get(s, "m_invert", c.invert.m_invert);
            get(s, "epochs", c.invert.epochs);
            get(s, "lr", c.invert.lr);
            get(s, "beta1", c.invert.beta1);
            get(s, "beta2", c.invert.beta2);
            get(s, "weight_decay", c.invert.weight_decay);
            get(s, "batch", c.invert.batch);
            get(s, "eval_pool", c.invert.eval_pool);
        }
        if (j.contains("eval")) {
            const auto& s = j.at("eval");
            check_keys(s, "eval", {"samples_per_context", "ddim_steps", "edit_models"});
            get(s, "samples_per_context", c.eval.samples_per_context);
            get(s, "ddim_steps", c.eval.ddim_steps);
            get(s, "edit_models", c.eval.edit_models);
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("bad config value: ") + e.what());
    }

    if (c.corpus.N < 2) throw ConfigError("corpus.N must be at least 2");
    if (c.corpus.holdout_count() >= c.corpus.N) throw ConfigError("corpus.holdout must be smaller than N");
    if (c.corpus.n_obs == 0) throw ConfigError("corpus.n_obs must be positive");
    if (c.T < 2) throw ConfigError("schedule.T must be at least 2");
    if (c.eval.ddim_steps == 0 || c.eval.ddim_steps > c.T || c.prior_ddim_steps == 0 || c.prior_ddim_steps > c.T)
        throw ConfigError("DDIM step counts must lie in [1, T]");
    if (c.eval.samples_per_context == 0) throw ConfigError("eval.samples_per_context must be positive");
    if (c.space_m == 0) throw ConfigError("space.m must be positive");
    return c;
}

ojson ExperimentConfig::to_json() const {
    ojson j;
    j["seed"] = seed;
    j["world"] = world_json(world);
    j["corpus"] = {{"N", corpus.N}, {"holdout", corpus.holdout_count()}, {"n_obs", corpus.n_obs}};
    j["schedule"] = {{"T", T}};
    j["base"] = {{"hidden", base.model.hidden}, {"emb", base.model.emb}, {"steps", base.steps},
                 {"batch", base.batch},         {"lr", base.lr},         {"lr_floor", base.lr_floor},
                 {"log_every", base.log_every}};
    j["finetune"] = {{"lambda", finetune.lambda},
                     {"steps", finetune.steps},
                     {"lr", finetune.lr},
                     {"batch", finetune.batch},
                     {"rank", finetune.rank},
                     {"init_a_sigma", finetune.init_a_sigma},
                     {"log_every", finetune.log_every},
                     {"balance", finetune.balance},
                     {"prior_samples", prior_samples},
                     {"prior_ddim_steps", prior_ddim_steps}};
    j["space"] = {{"m", space_m}};
    j["directions"] = {{"m_edit", m_edit}, {"ridge", direction_ridge}, {"gram_schmidt", gram_schmidt}};
    j["invert"] = {{"m_invert", invert.m_invert}, {"epochs", invert.epochs},
                   {"lr", invert.lr},             {"beta1", invert.beta1},
                   {"beta2", invert.beta2},       {"weight_decay", invert.weight_decay},
                   {"batch", invert.batch},       {"eval_pool", invert.eval_pool}};
    j["eval"] = {{"samples_per_context", eval.samples_per_context},
                 {"ddim_steps", eval.ddim_steps},
                 {"edit_models", eval.edit_models}};
    return j;
}

ExperimentConfig ExperimentConfig::resolved() const {
    ExperimentConfig r = *this;
    r.base.model.D = world.D;
    r.base.model.contexts = world.C;
    r.base.seed = mix_seed(seed, kBaseSalt);
    r.finetune.seed = mix_seed(seed, kFinetuneSalt);
    r.finetune.init_seed = mix_seed(seed, kInitSalt);
    r.invert.seed = mix_seed(seed, kInvertSalt);
    return r;
}

std::size_t ExperimentConfig::resolved_m_edit(std::size_t d) const { return m_edit ? m_edit : std::max<std::size_t>(8, d / 100); }

std::size_t ExperimentConfig::resolved_m_invert(std::size_t d) const {
    return invert.m_invert ? invert.m_invert : std::max<std::size_t>(16, d / 10);
}

std::string config_hash(const ExperimentConfig& config) { return io::sha256_hex(config.to_json().dump()); }

// ---- evaluation ----

std::vector<Observation> subject_samples(const DenoiserParams& base, const DiffusionSchedule& schedule,
                                         const LoraAdapter* adapter, const EvalConfig& eval, std::uint64_t seed) {
    std::vector<Observation> out;
    out.reserve(base.contexts() * eval.samples_per_context);
    for (std::size_t c = 0; c < base.contexts(); ++c) {
        for (std::size_t k = 0; k < eval.samples_per_context; ++k) {
            const std::uint64_t s = mix_seed(seed, c * eval.samples_per_context + k);
            out.push_back({ddim_sample(base, schedule, Prompt::subject_prompt(c), eval.ddim_steps, s, adapter), c});
        }
    }
    return out;
}

double adapter_identity_score(const World& world, const DenoiserParams& base, const DiffusionSchedule& schedule,
                              const LoraAdapter* adapter, std::span<const double> target_z, const EvalConfig& eval,
                              std::uint64_t seed) {
    return identity_score(subject_samples(base, schedule, adapter, eval, seed), target_z, world).score;
}

namespace {

struct EditStats {
    double projection = 0.0;
    double identity = 0.0;
    double preserved = 0.0;
};

EditStats edit_stats(const World& world, std::span<const Observation> samples, const Identity& identity,
                     std::size_t attribute) {
    const IdentityScore sc = identity_score(samples, identity.z, world);
    EditStats s;
    s.identity = sc.score;
    if (sc.decoded.empty()) return s;
    const Vector base_z = world.strip_attributes(identity.z);
    for (const auto& z : sc.decoded) {
        s.projection += dot(z, world.attribute_axes().row(attribute));
        s.preserved += cosine(world.strip_attributes(z), base_z);
    }
    s.projection /= static_cast<double>(sc.decoded.size());
    s.preserved /= static_cast<double>(sc.decoded.size());
    return s;
}

}  // namespace

EditOutcome evaluate_edit(const World& world, const DenoiserParams& base, const DiffusionSchedule& schedule,
                          const Identity& identity, std::span<const double> theta, const EditDirection& dir,
                          double strength, const EvalConfig& eval, std::uint64_t seed,
                          std::optional<std::size_t> t_inject) {
    if (dir.attribute >= identity.attrs.size()) throw ConfigError("direction attribute out of range");
    const AdapterShape shape = base.adapter_shape();
    EditOutcome out;
    out.id = identity.id;
    out.alpha = identity.attrs[dir.attribute] ? -strength : strength;
    const Vector edited = apply_edit(theta, dir, out.alpha);
    out.weight_l2 = norm2(subtract(edited, theta));

    const LoraAdapter before_adapter = unflatten(theta, shape);
    const auto before = subject_samples(base, schedule, &before_adapter, eval, seed);
    std::vector<Observation> after;
    if (t_inject) {
        for (std::size_t c = 0; c < base.contexts(); ++c) {
            for (std::size_t k = 0; k < eval.samples_per_context; ++k) {
                const std::uint64_t s = mix_seed(seed, c * eval.samples_per_context + k);
                after.push_back({delayed_injection_sample(base, schedule, theta, edited, shape, *t_inject,
                                                          Prompt::subject_prompt(c), eval.ddim_steps, s),
                                 c});
            }
        }
    } else {
        const LoraAdapter after_adapter = unflatten(edited, shape);
        after = subject_samples(base, schedule, &after_adapter, eval, seed);
    }

    const EditStats b = edit_stats(world, before, identity, dir.attribute);
    const EditStats a = edit_stats(world, after, identity, dir.attribute);
    out.projection_before = b.projection;
    out.projection_after = a.projection;
    out.identity_before = b.identity;
    out.identity_after = a.identity;
    out.preserved_after = a.preserved;
    out.flipped = (a.projection > 0.0) != (identity.attrs[dir.attribute] != 0);
    return out;
}

ComposedEditOutcome evaluate_composed_edit(const World& world, const DenoiserParams& base,
                                           const DiffusionSchedule& schedule, const Identity& identity,
                                           std::span<const double> theta, std::span<const EditDirection> dirs,
                                           const EvalConfig& eval, std::uint64_t seed) {
    std::vector<std::pair<EditDirection, double>> edits;
    for (const auto& d : dirs) {
        if (d.attribute >= identity.attrs.size()) throw ConfigError("direction attribute out of range");
        edits.emplace_back(d, identity.attrs[d.attribute] ? -d.max_strength : d.max_strength);
    }
    const LoraAdapter adapter = unflatten(compose_edits(theta, edits), base.adapter_shape());
    const auto samples = subject_samples(base, schedule, &adapter, eval, seed);
    ComposedEditOutcome out;
    out.id = identity.id;
    for (const auto& d : dirs) {
        const EditStats st = edit_stats(world, samples, identity, d.attribute);
        out.flipped.push_back((st.projection > 0.0) != (identity.attrs[d.attribute] != 0));
        out.identity_after = st.identity;
        out.preserved_after = st.preserved;
    }
    return out;
}

InversionComparison compare_inversion(const World& world, const DenoiserParams& base,
                                      const DiffusionSchedule& schedule, const W2wSpace& space,
                                      const PriorCache& prior, const IdentityDataset& item,
                                      std::span<const double> multi_theta, const FinetuneConfig& finetune,
                                      const InversionConfig& invert, const EvalConfig& eval, std::uint64_t seed) {
    if (item.observations.empty()) throw EmptyDataset("identity has no observations");
    const AdapterShape shape = base.adapter_shape(finetune.rank);
    const auto& z = item.identity.z;
    InversionComparison out;
    out.id = item.identity.id;

    const LoraAdapter multi = unflatten(multi_theta, shape);
    out.multi = adapter_identity_score(world, base, schedule, &multi, z, eval, seed);

    const std::vector<Observation> one{item.observations.front()};
    FinetuneConfig single_cfg = finetune;
    single_cfg.seed = identity_seed(mix_seed(finetune.seed, kSingleSalt), item.identity.id);
    auto start = std::chrono::steady_clock::now();
    const FinetuneResult single = dreambooth_finetune(base, schedule, one, prior, single_cfg);
    out.single_seconds = seconds_since(start);
    out.single_params = shape.flat_size();
    out.single = adapter_identity_score(world, base, schedule, &single.adapter, z, eval, seed);

    InversionConfig inv_cfg = invert;
    inv_cfg.seed = identity_seed(invert.seed, item.identity.id);
    start = std::chrono::steady_clock::now();
    out.inversion = w2w::invert(space, base, schedule, item.observations.front(), inv_cfg);
    out.w2w_seconds = seconds_since(start);
    out.w2w_params = out.inversion.beta.size();
    const LoraAdapter inverted = unflatten(out.inversion.theta, shape);
    out.w2w = adapter_identity_score(world, base, schedule, &inverted, z, eval, seed);
    return out;
}

AblationRow ablation_point(const World& world, const DenoiserParams& base, const DiffusionSchedule& schedule,
                           const WeightDataset& train, const std::vector<IdentityDataset>& holdouts,
                           const ExperimentConfig& config, std::size_t N, std::uint64_t seed, std::size_t workers) {
    if (N < 2 || N > train.size())
        throw ConfigError("ablation N=" + std::to_string(N) + " outside [2, " + std::to_string(train.size()) + "]");
    const ExperimentConfig cfg = config.resolved();
    std::set<std::uint64_t> train_ids(train.ids.begin(), train.ids.end());
    for (const auto& h : holdouts)
        if (train_ids.contains(h.identity.id))
            throw ConfigError("holdout identity " + std::to_string(h.identity.id) + " is in the training set");

    std::vector<std::size_t> rows(train.size());
    std::iota(rows.begin(), rows.end(), 0);
    Rng rng(mix_seed(seed, N));
    for (std::size_t i = 0; i < N; ++i) std::swap(rows[i], rows[i + rng.index(rows.size() - i)]);
    rows.resize(N);
    std::sort(rows.begin(), rows.end());
    const WeightDataset sub = train.subset(rows);

    const std::size_t d = sub.shape.flat_size();
    AblationRow row;
    row.N = N;
    row.seed = seed;
    row.m = std::min({cfg.space_m, N - 1, d});
    const W2wSpace space = fit_space(sub, row.m);

    std::vector<EditDirection> dirs;
    const std::size_t m_edit = std::min(cfg.resolved_m_edit(d), row.m);
    for (std::size_t a = 0; a < world.config().n_attrs; ++a)
        dirs.push_back(train_direction(space, sub, a, m_edit, cfg.direction_ridge));
    if (cfg.gram_schmidt) dirs = orthogonalize(std::move(dirs));
    row.entanglement = mean_off_diagonal(entanglement_matrix(dirs));

    InversionConfig inv = cfg.invert;
    inv.m_invert = std::min(cfg.resolved_m_invert(d), row.m);
    const std::uint64_t eval_seed = mix_seed(cfg.seed, kEvalSalt);
    std::vector<double> scores(holdouts.size());
    auto errors = parallel_for(holdouts.size(), workers, [&](std::size_t i) {
        const auto& item = holdouts[i];
        InversionConfig job = inv;
        job.seed = identity_seed(inv.seed, item.identity.id);
        const InversionResult r = w2w::invert(space, base, schedule, item.observations.front(), job);
        const LoraAdapter adapter = unflatten(r.theta, base.adapter_shape());
        scores[i] = adapter_identity_score(world, base, schedule, &adapter, item.identity.z, cfg.eval, eval_seed);
    });
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    row.identity = mean_std(scores).mean;
    return row;
}

bool trend_holds(std::span<const double> values, bool increasing, std::size_t allowed) {
    std::size_t violations = 0;
    for (std::size_t i = 1; i < values.size(); ++i) {
        if (increasing ? values[i] < values[i - 1] : values[i] > values[i - 1]) ++violations;
    }
    return violations <= allowed;
}

// ---- pipeline ----

Pipeline::Pipeline(fs::path out, ExperimentConfig config, std::size_t workers)
    : out_(std::move(out)), config_(config.resolved()), hash_(config_hash(config)), workers_(std::max<std::size_t>(1, workers)) {}

ojson Pipeline::stage_config(const std::string& stage) const {
    static const std::vector<std::string> order = {"gen-world", "train-base", "finetune-corpus", "fit-space",
                                                   "train-directions"};
    static const std::map<std::string, std::vector<std::string>> sections = {
        {"gen-world", {"seed", "world", "corpus"}},
        {"train-base", {"schedule", "base"}},
        {"finetune-corpus", {"finetune"}},
        {"fit-space", {"space"}},
        {"train-directions", {"directions"}},
    };
    const ojson full = config_.to_json();
    ojson out;
    auto it = std::find(order.begin(), order.end(), stage);
    const std::size_t upto = it == order.end() ? order.size() : static_cast<std::size_t>(it - order.begin()) + 1;
    for (std::size_t i = 0; i < upto; ++i)
        for (const auto& key : sections.at(order[i])) out[key] = full[key];
    if (it == order.end()) out = full;
    return out;
}

std::string Pipeline::read_checked(const std::string& rel) const {
    const fs::path p = path(rel);
    if (!fs::exists(p)) throw MissingArtifact(p.string());
    const std::string stage = producer_of(rel);
    const fs::path mp = path("manifests/" + stage + ".json");
    if (!fs::exists(mp)) throw MissingArtifact(mp.string() + " (run " + stage + ")");
    ojson manifest;
    try {
        manifest = ojson::parse(io::read_file(mp));
    } catch (const json::exception& e) {
        throw FormatError(mp.string() + ": " + e.what());
    }
    std::string bytes = io::read_file(p);
    const auto& outputs = manifest.at("outputs");
    if (!outputs.contains(rel) || outputs.at(rel).get<std::string>() != io::sha256_hex(bytes))
        throw HashMismatch(p.string() + " does not match the " + stage + " manifest");
    if (manifest.at("inputs").at("config").dump() != stage_config(stage).dump())
        throw HashMismatch(p.string() + " was produced under a different config; rerun " + stage);
    for (const auto& [file, hash] : manifest.at("inputs").at("files").items()) {
        const fs::path fp = path(file);
        if (!fs::exists(fp) || io::file_hash(fp) != hash.get<std::string>())
            throw HashMismatch("stale upstream: " + file + " changed since " + stage + " ran");
    }
    return bytes;
}

ojson Pipeline::inputs_for(const std::string& stage, const std::vector<std::string>& files,
                           const ojson& params) const {
    ojson in;
    in["config"] = stage_config(stage);
    in["params"] = params;
    in["files"] = ojson::object();
    for (const auto& f : files) in["files"][f] = io::sha256_hex(read_checked(f));
    return in;
}

bool Pipeline::fresh(const std::string& stage, const ojson& inputs) const {
    const fs::path mp = path("manifests/" + stage + ".json");
    if (!fs::exists(mp)) return false;
    ojson manifest;
    try {
        manifest = ojson::parse(io::read_file(mp));
    } catch (const json::exception&) {
        return false;
    }
    if (!manifest.contains("inputs") || manifest["inputs"].dump() != inputs.dump()) return false;
    for (const auto& [file, hash] : manifest.at("outputs").items()) {
        const fs::path fp = path(file);
        if (!fs::exists(fp) || io::file_hash(fp) != hash.get<std::string>()) return false;
    }
    return true;
}

void Pipeline::record(const std::string& stage, const ojson& inputs, const std::vector<std::string>& outputs) const {
    ojson m;
    m["stage"] = stage;
    m["config_hash"] = hash_;
    m["seed"] = config_.seed;
    m["inputs"] = inputs;
    m["outputs"] = ojson::object();
    for (const auto& f : outputs) m["outputs"][f] = io::file_hash(path(f));
    io::write_file(path("manifests/" + stage + ".json"), io::dump(m));
}

void Pipeline::write_metric(const std::string& rel, ojson payload) const {
    ojson j;
    j["config_hash"] = hash_;
    j["seed"] = config_.seed;
    for (auto& [k, v] : payload.items()) j[k] = std::move(v);
    io::write_file(path(rel), io::dump(j));
}

void Pipeline::write_timing(const std::string& rel, const ojson& timing) const {
    ojson j;
    j["config_hash"] = hash_;
    j["seed"] = config_.seed;
    j["workers"] = workers_;
    const auto now = std::chrono::system_clock::now().time_since_epoch();
    j["recorded_unix"] = std::chrono::duration_cast<std::chrono::seconds>(now).count();
    for (auto& [k, v] : timing.items()) j[k] = v;
    io::write_file(path(rel), io::dump(j));
}

void Pipeline::check_holdout_hygiene(std::span<const std::uint64_t> used) const {
    const auto held = holdout_ids();
    const std::set<std::uint64_t> h(held.begin(), held.end());
    for (auto id : used)
        if (h.contains(id)) throw ConfigError("holdout identity " + std::to_string(id) + " leaked into a fit");
}

// ---- loaders ----

World Pipeline::world() const {
    const json j = json::parse(read_checked("world.json"));
    return World(world_from(j.at("world")));
}

std::vector<Identity> Pipeline::identities() const {
    const World w = world();
    auto ids = io::decode_identities(read_checked("identities.jsonl"));
    for (auto& id : ids) id.z_base = w.strip_attributes(id.z);
    return ids;
}

std::vector<IdentityDataset> Pipeline::datasets(std::span<const std::uint64_t> ids) const {
    std::map<std::uint64_t, Identity> by_id;
    for (auto& id : identities()) by_id.emplace(id.id, std::move(id));
    std::vector<IdentityDataset> out;
    out.reserve(ids.size());
    for (auto id : ids) {
        auto it = by_id.find(id);
        if (it == by_id.end()) throw ConfigError("unknown identity id " + std::to_string(id));
        out.push_back({it->second, io::decode_observations(read_checked(obs_path(id)), config_.world.C)});
    }
    return out;
}

std::vector<std::uint64_t> Pipeline::train_ids() const {
    return json::parse(read_checked("split.json")).at("train").get<std::vector<std::uint64_t>>();
}

std::vector<std::uint64_t> Pipeline::holdout_ids() const {
    return json::parse(read_checked("split.json")).at("holdout").get<std::vector<std::uint64_t>>();
}

DenoiserParams Pipeline::base() const { return io::decode_denoiser(read_checked("base.w2wden")); }

DiffusionSchedule Pipeline::schedule() const { return default_schedule(config_.T); }

PriorCache Pipeline::prior() const { return {io::decode_observations(read_checked("prior.obs"), config_.world.C)}; }

WeightDataset Pipeline::corpus() const { return io::decode_dataset(read_checked("corpus.w2wdat")); }

WeightDataset Pipeline::train_dataset() const {
    const WeightDataset all = corpus();
    const auto ids = train_ids();
    const std::set<std::uint64_t> wanted(ids.begin(), ids.end());
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < all.size(); ++i)
        if (wanted.contains(all.ids[i])) rows.push_back(i);
    WeightDataset ds = all.subset(rows);
    check_holdout_hygiene(ds.ids);
    return ds;
}

W2wSpace Pipeline::space() const { return io::decode_space(read_checked("space.w2wspc")); }

std::vector<EditDirection> Pipeline::directions() const {
    const json j = json::parse(read_checked("directions.json"));
    std::vector<EditDirection> out;
    for (const auto& d : j.at("directions"))
        out.push_back(io::direction_from_json(json::parse(read_checked(d.at("file").get<std::string>()))));
    return out;
}

// ---- stages ----

StageResult Pipeline::gen_world() {
    const std::string stage = "gen-world";
    const ojson inputs = inputs_for(stage, {}, ojson::object());
    if (fresh(stage, inputs)) return {stage, true};

    const World w(config_.world);
    Rng rng(mix_seed(config_.seed, kPopulationSalt));
    const std::size_t N = config_.corpus.N;
    const std::size_t H = config_.corpus.holdout_count();
    const auto ids = sample_population(rng, w, N + H);

    std::vector<std::string> outputs = {"world.json", "identities.jsonl", "split.json"};
    ojson wj;
    wj["world"] = world_json(config_.world);
    write_metric("world.json", wj);
    io::write_file(path("identities.jsonl"), io::encode_identities(ids));
    for (const auto& id : ids) {
        IdentityDataset ds = build_identity_dataset(id, config_.corpus.n_obs, w, rng);
        round_to_float(ds.observations);
        io::write_file(path(obs_path(id.id)), io::encode_observations(ds.observations));
        outputs.push_back(obs_path(id.id));
    }
    ojson split;
    std::vector<std::uint64_t> train, held;
    for (std::size_t i = 0; i < ids.size(); ++i) (i < N ? train : held).push_back(ids[i].id);
    split["train"] = train;
    split["holdout"] = held;
    write_metric("split.json", split);
    record(stage, inputs, outputs);
    return {stage, false};
}

namespace {

std::vector<std::string> obs_files(std::span<const std::uint64_t> ids) {
    std::vector<std::string> out;
    for (auto id : ids) out.push_back(obs_path(id));
    return out;
}

std::vector<std::string> concat(std::vector<std::string> a, const std::vector<std::string>& b) {
    a.insert(a.end(), b.begin(), b.end());
    return a;
}

}  // namespace

StageResult Pipeline::train_base() {
    const std::string stage = "train-base";
    const auto ids = train_ids();
    const ojson inputs = inputs_for(stage, concat({"split.json", "identities.jsonl"}, obs_files(ids)), ojson::object());
    if (fresh(stage, inputs)) return {stage, true};

    const auto data = datasets(ids);
    const auto start = std::chrono::steady_clock::now();
    const TrainResult tr = ::w2w::train_base(data, schedule(), config_.base);
    const double elapsed = seconds_since(start);
    io::write_file(path("base.w2wden"), io::encode_denoiser(tr.params));
    ojson m;
    m["parameter_count"] = tr.params.parameter_count();
    m["steps"] = config_.base.steps;
    m["initial_loss"] = tr.initial_loss;
    m["final_loss"] = tr.final_loss;
    m["loss_curve"] = tr.loss_curve;
    write_metric("base_train.json", m);
    write_timing("base_timing.json", {{"seconds", elapsed}});
    record(stage, inputs, {"base.w2wden", "base_train.json"});
    return {stage, false};
}

StageResult Pipeline::finetune_corpus(bool keep_partial) {
    const std::string stage = "finetune-corpus";
    auto ids = train_ids();
    const auto held = holdout_ids();
    ids.insert(ids.end(), held.begin(), held.end());
    const ojson inputs = inputs_for(stage, concat({"base.w2wden", "split.json", "identities.jsonl"}, obs_files(ids)),
                                    {{"keep_partial", keep_partial}});
    if (fresh(stage, inputs)) return {stage, true};

    const DenoiserParams b = base();
    const DiffusionSchedule sch = schedule();
    PriorCache prior = make_prior_cache(b, sch, config_.prior_samples, config_.prior_ddim_steps,
                                        mix_seed(config_.seed, kPriorSalt));
    round_to_float(prior.samples);
    io::write_file(path("prior.obs"), io::encode_observations(prior.samples));

    const auto data = datasets(ids);
    const auto start = std::chrono::steady_clock::now();
    const WeightDataset ds = ::w2w::finetune_corpus(b, sch, data, prior, config_.finetune, {workers_, keep_partial});
    const double elapsed = seconds_since(start);
    io::write_file(path("corpus.w2wdat"), io::encode_dataset(ds));

    const std::set<std::uint64_t> kept(ds.ids.begin(), ds.ids.end());
    std::vector<std::uint64_t> dropped;
    for (auto id : ids)
        if (!kept.contains(id)) dropped.push_back(id);
    std::sort(dropped.begin(), dropped.end());
    ojson m;
    m["rows"] = ds.size();
    m["d"] = ds.shape.flat_size();
    m["shape"] = {{"rows", ds.shape.rows}, {"cols", ds.shape.cols}, {"rank", ds.shape.rank}};
    m["prior_samples"] = prior.samples.size();
    m["dropped"] = dropped;
    write_metric("finetune.json", m);
    write_timing("finetune_timing.json",
                 {{"seconds", elapsed}, {"per_identity", elapsed / static_cast<double>(std::max<std::size_t>(1, ids.size()))}});
    record(stage, inputs, {"prior.obs", "corpus.w2wdat", "finetune.json"});
    return {stage, false};
}

StageResult Pipeline::fit_space() {
    const std::string stage = "fit-space";
    const ojson inputs = inputs_for(stage, {"corpus.w2wdat", "split.json"}, ojson::object());
    if (fresh(stage, inputs)) return {stage, true};

    const WeightDataset train = train_dataset();
    if (train.size() < 2) throw EmptyDataset("fewer than two training rows in the corpus");
    const std::size_t m = std::min({config_.space_m, train.size() - 1, train.shape.flat_size()});
    const W2wSpace space = ::w2w::fit_space(train, m);
    io::write_file(path("space.w2wspc"), io::encode_space(space));

    ojson s;
    s["m"] = space.m();
    s["d"] = space.d();
    s["fit_rows"] = space.fit_rows;
    s["corpus_hash"] = io::file_hash(path("corpus.w2wdat"));
    s["holdouts_excluded"] = holdout_ids().size();
    s["explained_variance_ratio"] = space.explained_variance_ratio();
    s["total_variance"] = space.total_variance;
    s["eigvals"] = space.eigvals;
    write_metric("space.json", s);
    write_metric("coeff_diagnostics.json", coeff_diagnostics(space, train).to_json());
    record(stage, inputs, {"space.w2wspc", "space.json", "coeff_diagnostics.json"});
    return {stage, false};
}

StageResult Pipeline::sample(std::size_t count, std::uint64_t seed) {
    const std::string stage = "sample";
    const ojson inputs = inputs_for(stage, {"space.w2wspc", "base.w2wden", "corpus.w2wdat", "split.json", "world.json"},
                                    {{"count", count}, {"seed", seed}});
    if (fresh(stage, inputs)) return {stage, true};

    const World w = world();
    const DenoiserParams b = base();
    const DiffusionSchedule sch = schedule();
    const W2wSpace sp = space();
    const WeightDataset train = train_dataset();
    const Matrix projected = project_all(sp, train.thetas);
    const std::uint64_t eval_seed = mix_seed(config_.seed, kEvalSalt);
    const std::size_t n_attrs = config_.world.n_attrs;

    ojson rows = ojson::array();
    std::string csv = "index,nn_id,nn_cosine,novel";
    for (std::size_t a = 0; a < n_attrs; ++a) csv += ",attr" + std::to_string(a);
    csv += "\n";
    std::vector<double> sample_marg(n_attrs, 0.0), corpus_marg(n_attrs, 0.0);
    std::size_t novel = 0;
    for (std::size_t i = 0; i < count; ++i) {
        Rng rng(mix_seed(seed, i));
        const Vector theta = sample_model(sp, rng);
        const LoraAdapter adapter = unflatten(theta, train.shape);
        const auto obs = subject_samples(b, sch, &adapter, config_.eval, eval_seed);
        Vector z_mean(config_.world.k, 0.0);
        std::size_t ok = 0;
        for (const auto& o : obs) {
            const DecodeResult d = decode_latent(o.x, o.context, w);
            if (!d.ok) continue;
            axpy(1.0, d.z, z_mean);
            ++ok;
        }
        if (ok) for (auto& v : z_mean) v /= static_cast<double>(ok);
        const auto attrs = w.attributes_of(z_mean);
        const NeighborHit nn = nearest_neighbor(project(sp, theta), projected);
        const bool is_novel = nn.cosine < 0.999;
        novel += is_novel;
        for (std::size_t a = 0; a < n_attrs; ++a) sample_marg[a] += attrs[a];

        ojson r;
        r["index"] = i;
        r["nn_index"] = nn.index;
        r["nn_id"] = train.ids[nn.index];
        r["nn_cosine"] = nn.cosine;
        r["decoded_ok"] = ok;
        r["z_hat"] = z_mean;
        r["attrs"] = attrs;
        r["beta"] = io::encode_doubles(project(sp, theta));
        rows.push_back(r);
        csv += std::to_string(i) + "," + std::to_string(train.ids[nn.index]) + "," + num(nn.cosine) + "," +
               (is_novel ? "1" : "0");
        for (auto a : attrs) csv += "," + std::to_string(a);
        csv += "\n";
    }
    for (const auto& labels : train.attrs)
        for (std::size_t a = 0; a < n_attrs; ++a) corpus_marg[a] += labels[a];
    for (std::size_t a = 0; a < n_attrs; ++a) {
        if (count) sample_marg[a] /= static_cast<double>(count);
        corpus_marg[a] /= static_cast<double>(train.size());
    }
    ojson m;
    m["count"] = count;
    m["sample_seed"] = seed;
    m["space_hash"] = io::file_hash(path("space.w2wspc"));
    m["novel_fraction"] = count ? static_cast<double>(novel) / static_cast<double>(count) : 0.0;
    m["attr_marginals"] = {{"samples", sample_marg}, {"corpus", corpus_marg}};
    m["samples"] = rows;
    write_metric("samples.json", m);
    io::write_file(path("samples.csv"), csv);
    record(stage, inputs, {"samples.json", "samples.csv"});
    return {stage, false};
}

StageResult Pipeline::train_directions() {
    const std::string stage = "train-directions";
    const ojson inputs = inputs_for(stage, {"space.w2wspc", "corpus.w2wdat", "split.json"}, ojson::object());
    if (fresh(stage, inputs)) return {stage, true};

    const W2wSpace sp = space();
    const WeightDataset train = train_dataset();
    const std::string space_hash = io::file_hash(path("space.w2wspc"));
    const std::size_t m_edit = std::min(config_.resolved_m_edit(sp.d()), sp.m());
    std::vector<EditDirection> dirs;
    for (std::size_t a = 0; a < config_.world.n_attrs; ++a) {
        dirs.push_back(train_direction(sp, train, a, m_edit, config_.direction_ridge));
        dirs.back().space_hash = space_hash;
    }
    if (config_.gram_schmidt) dirs = orthogonalize(std::move(dirs));

    const Matrix ent = entanglement_matrix(dirs);
    std::vector<std::string> outputs;
    ojson list = ojson::array();
    std::string csv;
    for (std::size_t i = 0; i < dirs.size(); ++i) {
        const std::string file = "directions/attr_" + std::to_string(dirs[i].attribute) + ".json";
        io::write_file(path(file), io::dump(io::direction_to_json(dirs[i])));
        outputs.push_back(file);
        list.push_back({{"attribute", dirs[i].attribute},
                        {"name", dirs[i].name},
                        {"file", file},
                        {"accuracy", classifier_accuracy(dirs[i], sp, train)},
                        {"max_strength", dirs[i].max_strength}});
        csv += i ? "," : "";
        csv += dirs[i].name;
    }
    csv = "direction," + csv + "\n";
    std::vector<std::vector<double>> rows(dirs.size());
    for (std::size_t i = 0; i < dirs.size(); ++i) {
        csv += dirs[i].name;
        for (std::size_t j = 0; j < dirs.size(); ++j) {
            csv += "," + num(ent(i, j));
            rows[i].push_back(ent(i, j));
        }
        csv += "\n";
    }
    ojson m;
    m["space_hash"] = space_hash;
    m["m_edit"] = m_edit;
    m["gram_schmidt"] = config_.gram_schmidt;
    m["directions"] = list;
    m["entanglement"] = rows;
    m["mean_off_diagonal"] = mean_off_diagonal(ent);
    write_metric("directions.json", m);
    io::write_file(path("entanglement.csv"), csv);
    outputs.push_back("directions.json");
    outputs.push_back("entanglement.csv");
    record(stage, inputs, outputs);
    return {stage, false};
}

StageResult Pipeline::edit(std::vector<std::size_t> attributes, std::vector<std::uint64_t> ids, double alpha_scale,
                           std::optional<std::size_t> t_inject) {
    const std::string stage = "edit";
    std::vector<std::string> files = {"directions.json", "space.w2wspc", "base.w2wden", "corpus.w2wdat",
                                      "identities.jsonl", "split.json"};
    const json dj = json::parse(read_checked("directions.json"));
    for (const auto& d : dj.at("directions")) files.push_back(d.at("file").get<std::string>());
    ojson params;
    params["attributes"] = attributes;
    params["ids"] = ids;
    params["alpha_scale"] = alpha_scale;
    params["t_inject"] = t_inject ? ojson(*t_inject) : ojson();
    const ojson inputs = inputs_for(stage, files, params);
    if (fresh(stage, inputs)) return {stage, true};

    const auto dirs = directions();
    const std::string space_hash = io::file_hash(path("space.w2wspc"));
    for (const auto& d : dirs)
        if (d.space_hash != space_hash)
            throw SpaceMismatch("direction " + d.name + " was trained against space " + d.space_hash +
                                ", current space is " + space_hash);
    if (attributes.empty())
        for (const auto& d : dirs) attributes.push_back(d.attribute);
    const auto held = holdout_ids();
    if (ids.empty()) ids.assign(held.begin(), held.begin() + static_cast<std::ptrdiff_t>(std::min(config_.eval.edit_models, held.size())));
    const std::set<std::uint64_t> held_set(held.begin(), held.end());
    for (auto id : ids)
        if (!held_set.contains(id)) throw ConfigError("edit evaluates held-out models only; id " + std::to_string(id) + " is not held out");

    const World w = world();
    const DenoiserParams b = base();
    const DiffusionSchedule sch = schedule();
    if (t_inject && *t_inject > sch.T) throw ConfigError("t_inject beyond the schedule length");
    const WeightDataset all = corpus();
    std::map<std::uint64_t, std::size_t> row_of;
    for (std::size_t i = 0; i < all.size(); ++i) row_of[all.ids[i]] = i;
    std::map<std::uint64_t, Identity> by_id;
    for (auto& id : identities()) by_id.emplace(id.id, std::move(id));
    const std::uint64_t eval_seed = mix_seed(config_.seed, kEvalSalt);

    ojson results = ojson::array();
    for (auto a : attributes) {
        auto it = std::find_if(dirs.begin(), dirs.end(), [&](const EditDirection& d) { return d.attribute == a; });
        if (it == dirs.end()) throw ConfigError("no trained direction for attribute " + std::to_string(a));
        const double strength = alpha_scale * it->max_strength;
        std::vector<EditOutcome> outs(ids.size());
        auto errors = parallel_for(ids.size(), workers_, [&](std::size_t i) {
            auto r = row_of.find(ids[i]);
            if (r == row_of.end()) throw MissingArtifact("no corpus row for identity " + std::to_string(ids[i]));
            outs[i] = evaluate_edit(w, b, sch, by_id.at(ids[i]), all.thetas.row(r->second), *it, strength, config_.eval,
                                    eval_seed, t_inject);
        });
        for (auto& e : errors)
            if (e) std::rethrow_exception(e);

        std::vector<double> before, after, preserved, l2;
        std::size_t flips = 0;
        ojson models = ojson::array();
        for (const auto& o : outs) {
            before.push_back(o.identity_before);
            after.push_back(o.identity_after);
            preserved.push_back(o.preserved_after);
            l2.push_back(o.weight_l2);
            flips += o.flipped;
            models.push_back({{"id", o.id},
                              {"alpha", o.alpha},
                              {"flipped", o.flipped},
                              {"projection_before", o.projection_before},
                              {"projection_after", o.projection_after},
                              {"identity_before", o.identity_before},
                              {"identity_after", o.identity_after},
                              {"preserved_after", o.preserved_after},
                              {"weight_l2", o.weight_l2}});
        }
        ojson r;
        r["attribute"] = a;
        r["name"] = it->name;
        r["max_strength"] = it->max_strength;
        r["strength"] = strength;
        r["flip_rate"] = outs.empty() ? 0.0 : static_cast<double>(flips) / static_cast<double>(outs.size());
        r["identity_before"] = mean_std_json(before);
        r["identity_after"] = mean_std_json(after);
        r["preserved_after"] = mean_std_json(preserved);
        r["weight_l2"] = mean_std_json(l2);
        r["models"] = models;
        results.push_back(r);
    }
    ojson m;
    m["space_hash"] = space_hash;
    m["alpha_scale"] = alpha_scale;
    m["t_inject"] = t_inject ? ojson(*t_inject) : ojson();
    m["contexts"] = config_.world.C;
    m["samples_per_context"] = config_.eval.samples_per_context;
    m["results"] = results;
    write_metric("edit_metrics.json", m);
    record(stage, inputs, {"edit_metrics.json"});
    return {stage, false};
}

StageResult Pipeline::invert(std::vector<std::uint64_t> ids) {
    const std::string stage = "invert";
    const auto held = holdout_ids();
    if (ids.empty()) ids = held;
    const std::set<std::uint64_t> held_set(held.begin(), held.end());
    for (auto id : ids)
        if (!held_set.contains(id)) throw ConfigError("invert evaluates held-out identities only; id " + std::to_string(id) + " is not held out");
    const ojson inputs = inputs_for(
        stage, concat({"space.w2wspc", "base.w2wden", "corpus.w2wdat", "prior.obs", "identities.jsonl", "split.json"}, obs_files(ids)),
        {{"ids", ids}});
    if (fresh(stage, inputs)) return {stage, true};
    const auto start = std::chrono::steady_clock::now();

    const World w = world();
    const DenoiserParams b = base();
    const DiffusionSchedule sch = schedule();
    const W2wSpace sp = space();
    const PriorCache pr = prior();
    const WeightDataset all = corpus();
    const auto data = datasets(ids);
    std::map<std::uint64_t, std::size_t> row_of;
    for (std::size_t i = 0; i < all.size(); ++i) row_of[all.ids[i]] = i;
    const std::string space_hash = io::file_hash(path("space.w2wspc"));
    InversionConfig inv = config_.invert;
    inv.m_invert = std::min(config_.resolved_m_invert(sp.d()), sp.m());
    const std::uint64_t eval_seed = mix_seed(config_.seed, kEvalSalt);

    std::vector<InversionComparison> results(data.size());
    auto errors = parallel_for(data.size(), workers_, [&](std::size_t i) {
        auto r = row_of.find(data[i].identity.id);
        if (r == row_of.end()) throw MissingArtifact("no corpus row for identity " + std::to_string(data[i].identity.id));
        results[i] = compare_inversion(w, b, sch, sp, pr, data[i], all.thetas.row(r->second), config_.finetune, inv,
                                       config_.eval, eval_seed);
    });
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);

    std::vector<std::string> outputs;
    std::vector<double> multi, single, w2w_scores, t_single, t_w2w;
    ojson items = ojson::array();
    ojson timing_items = ojson::array();
    for (const auto& r : results) {
        InversionConfig used = inv;
        used.seed = identity_seed(inv.seed, r.id);
        const std::string file = "inversions/" + std::to_string(r.id) + ".json";
        ojson ij = io::inversion_to_json(r.inversion, used, space_hash);
        ij["id"] = r.id;
        io::write_file(path(file), io::dump(ij));
        outputs.push_back(file);
        multi.push_back(r.multi);
        single.push_back(r.single);
        w2w_scores.push_back(r.w2w);
        t_single.push_back(r.single_seconds);
        t_w2w.push_back(r.w2w_seconds);
        items.push_back({{"id", r.id}, {"multi_obs_dreambooth", r.multi}, {"single_obs_dreambooth", r.single}, {"w2w_inversion", r.w2w}});
        timing_items.push_back({{"id", r.id}, {"single_obs_dreambooth", r.single_seconds}, {"w2w_inversion", r.w2w_seconds}});
    }
    const double mm = mean_std(multi).mean, ms = mean_std(single).mean, mw = mean_std(w2w_scores).mean;
    ojson m;
    m["space_hash"] = space_hash;
    m["m_invert"] = inv.m_invert;
    m["parameters"] = {{"single_obs_dreambooth", base().adapter_shape(config_.finetune.rank).flat_size()},
                       {"w2w_inversion", inv.m_invert}};
    m["identity_score"] = {{"multi_obs_dreambooth", mean_std_json(multi)},
                           {"single_obs_dreambooth", mean_std_json(single)},
                           {"w2w_inversion", mean_std_json(w2w_scores)}};
    m["ordering_holds"] = mm >= mw && mw >= ms;
    m["gap_w2w_single"] = mw - ms;
    m["gap_multi_w2w"] = mm - mw;
    m["items"] = items;
    write_metric("invert_metrics.json", m);
    write_timing("invert_timing.json", {{"seconds", seconds_since(start)},
                                        {"median_seconds", {{"single_obs_dreambooth", median(t_single)}, {"w2w_inversion", median(t_w2w)}}},
                                        {"items", timing_items}});
    outputs.push_back("invert_metrics.json");
    record(stage, inputs, outputs);
    return {stage, false};
}

StageResult Pipeline::invert_file(const fs::path& observations) {
    const std::string stage = "invert-external";
    const std::string bytes = io::read_file(observations);
    const ojson inputs = inputs_for(stage, {"space.w2wspc", "base.w2wden", "world.json"},
                                    {{"observations_sha256", io::sha256_hex(bytes)}});
    if (fresh(stage, inputs)) return {stage, true};

    const World w = world();
    const DenoiserParams b = base();
    const DiffusionSchedule sch = schedule();
    const W2wSpace sp = space();
    const auto obs = io::decode_observations(bytes, config_.world.C);
    InversionConfig inv = config_.invert;
    inv.m_invert = std::min(config_.resolved_m_invert(sp.d()), sp.m());
    const std::uint64_t eval_seed = mix_seed(config_.seed, kEvalSalt);
    const std::string space_hash = io::file_hash(path("space.w2wspc"));

    std::vector<ojson> items(obs.size());
    auto errors = parallel_for(obs.size(), workers_, [&](std::size_t i) {
        InversionConfig job = inv;
        job.seed = mix_seed(inv.seed, i);
        const InversionResult r = invert_ood(sp, b, sch, obs[i], job);
        const LoraAdapter adapter = unflatten(r.theta, b.adapter_shape());
        // Recovered identity: mean decoded latent of the inverted model's samples.
        const auto samples = subject_samples(b, sch, &adapter, config_.eval, eval_seed);
        Vector z(config_.world.k, 0.0);
        std::size_t ok = 0;
        for (const auto& o : samples) {
            const DecodeResult d = decode_latent(o.x, o.context, w);
            if (!d.ok) continue;
            axpy(1.0, d.z, z);
            ++ok;
        }
        if (ok) for (auto& v : z) v /= static_cast<double>(ok);
        ojson j = io::inversion_to_json(r, job, space_hash);
        j["index"] = i;
        j["context"] = obs[i].context;
        j["z_hat"] = z;
        j["attrs"] = w.attributes_of(z);
        items[i] = std::move(j);
    });
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    ojson m;
    m["source_sha256"] = io::sha256_hex(bytes);
    m["space_hash"] = space_hash;
    m["items"] = items;
    write_metric("external_inversion.json", m);
    record(stage, inputs, {"external_inversion.json"});
    return {stage, false};
}

StageResult Pipeline::ablate_scaling(std::vector<std::size_t> Ns, std::vector<std::uint64_t> seeds) {
    const std::string stage = "ablate-scaling";
    const auto held = holdout_ids();
    if (seeds.empty()) seeds.push_back(config_.seed);
    if (Ns.empty()) {
        for (std::size_t n = 32; n <= config_.corpus.N; n *= 2) Ns.push_back(n);
        if (Ns.empty()) Ns.push_back(config_.corpus.N);
    }
    std::sort(Ns.begin(), Ns.end());
    Ns.erase(std::unique(Ns.begin(), Ns.end()), Ns.end());
    const ojson inputs =
        inputs_for(stage, concat({"base.w2wden", "corpus.w2wdat", "identities.jsonl", "split.json"}, obs_files(held)),
                   {{"Ns", Ns}, {"seeds", seeds}});
    if (fresh(stage, inputs)) return {stage, true};
    const auto start = std::chrono::steady_clock::now();

    const World w = world();
    const DenoiserParams b = base();
    const DiffusionSchedule sch = schedule();
    const WeightDataset train = train_dataset();
    const auto holdouts = datasets(held);

    std::vector<AblationRow> rows;
    for (auto n : Ns)
        for (auto s : seeds) rows.push_back(ablation_point(w, b, sch, train, holdouts, config_, n, s, workers_));

    std::string csv = "N,seed,m,entanglement,identity_score\n";
    ojson jrows = ojson::array();
    for (const auto& r : rows) {
        csv += std::to_string(r.N) + "," + std::to_string(r.seed) + "," + std::to_string(r.m) + "," + num(r.entanglement) +
               "," + num(r.identity) + "\n";
        jrows.push_back({{"N", r.N}, {"seed", r.seed}, {"m", r.m}, {"entanglement", r.entanglement}, {"identity_score", r.identity}});
    }
    std::vector<double> ent_med, id_med;
    ojson medians = ojson::array();
    for (auto n : Ns) {
        std::vector<double> e, i;
        for (const auto& r : rows)
            if (r.N == n) {
                e.push_back(r.entanglement);
                i.push_back(r.identity);
            }
        ent_med.push_back(median(e));
        id_med.push_back(median(i));
        medians.push_back({{"N", n}, {"entanglement", ent_med.back()}, {"identity_score", id_med.back()}});
    }
    ojson m;
    m["Ns"] = Ns;
    m["seeds"] = seeds;
    m["holdouts"] = held.size();
    m["rows"] = jrows;
    m["medians"] = medians;
    if (Ns.size() > 1) {
        m["entanglement_non_increasing"] = trend_holds(ent_med, false, 1);
        m["identity_non_decreasing"] = trend_holds(id_med, true, 1);
    }
    write_metric("ablation.json", m);
    io::write_file(path("ablation.csv"), csv);
    write_timing("ablation_timing.json", {{"seconds", seconds_since(start)}});
    record(stage, inputs, {"ablation.json", "ablation.csv"});
    return {stage, false};
}

StageResult Pipeline::report() {
    const std::string stage = "report";
    static const std::vector<std::pair<std::string, std::string>> sources = {
        {"base_train.json", "train-base"},         {"finetune.json", "finetune-corpus"},
        {"space.json", "fit-space"},               {"samples.json", "sample"},
        {"directions.json", "train-directions"},   {"edit_metrics.json", "edit"},
        {"invert_metrics.json", "invert"},         {"ablation.json", "ablate-scaling"},
    };
    std::vector<std::string> present;
    for (const auto& [file, _] : sources)
        if (fs::exists(path(file))) present.push_back(file);
    const ojson inputs = inputs_for(stage, present, ojson::object());
    if (fresh(stage, inputs)) return {stage, true};

    ojson rep;
    rep["git_revision"] = W2W_GIT_REVISION;
    rep["config"] = config_.to_json();
    ojson trace = ojson::array();
    ojson sections;
    std::string md = "# w2w toy report\n\nconfig hash `" + hash_ + "`, seed " + std::to_string(config_.seed) +
                     ", revision `" + W2W_GIT_REVISION + "`\n";
    for (const auto& [file, command] : sources) {
        if (std::find(present.begin(), present.end(), file) == present.end()) continue;
        const json j = json::parse(read_checked(file));
        trace.push_back({{"file", file}, {"command", command}, {"seed", j.at("seed")}, {"sha256", inputs["files"][file]}});
        if (file == "base_train.json") {
            sections["base"] = {{"final_loss", j.at("final_loss")}, {"loss_curve", j.at("loss_curve")}};
            md += "\n## Base model\n\nfinal loss " + num(j.at("final_loss").get<double>()) + "\n";
        } else if (file == "space.json") {
            sections["space"] = {{"m", j.at("m")}, {"explained_variance_ratio", j.at("explained_variance_ratio")}};
            md += "\n## Weight space\n\nm = " + std::to_string(j.at("m").get<std::size_t>()) + ", explained variance " +
                  num(j.at("explained_variance_ratio").get<double>()) + "\n";
        } else if (file == "samples.json") {
            sections["samples"] = {{"count", j.at("count")}, {"novel_fraction", j.at("novel_fraction")}};
            md += "\n## Sampling\n\n" + std::to_string(j.at("count").get<std::size_t>()) + " samples, novel fraction " +
                  num(j.at("novel_fraction").get<double>()) + "\n";
        } else if (file == "directions.json") {
            sections["entanglement"] = {{"matrix", j.at("entanglement")}, {"mean_off_diagonal", j.at("mean_off_diagonal")}};
            md += "\n## Directions\n\n| direction | accuracy | max strength |\n|---|---|---|\n";
            for (const auto& d : j.at("directions"))
                md += "| " + d.at("name").get<std::string>() + " | " + num(d.at("accuracy").get<double>()) + " | " +
                      num(d.at("max_strength").get<double>()) + " |\n";
            md += "\nmean off-diagonal entanglement " + num(j.at("mean_off_diagonal").get<double>()) + "\n";
        } else if (file == "edit_metrics.json") {
            ojson e = ojson::array();
            md += "\n## Edits\n\n| direction | flip rate | identity before | identity after |\n|---|---|---|---|\n";
            for (const auto& r : j.at("results")) {
                e.push_back({{"name", r.at("name")}, {"flip_rate", r.at("flip_rate")},
                             {"identity_before", r.at("identity_before")}, {"identity_after", r.at("identity_after")}});
                md += "| " + r.at("name").get<std::string>() + " | " + num(r.at("flip_rate").get<double>()) + " | " +
                      num(r.at("identity_before").at("mean").get<double>()) + " | " +
                      num(r.at("identity_after").at("mean").get<double>()) + " |\n";
            }
            sections["edits"] = e;
        } else if (file == "invert_metrics.json") {
            sections["inversion"] = j.at("identity_score");
            md += "\n## Single-observation inversion\n\n| method | identity score | std |\n|---|---|---|\n";
            for (const char* k : {"multi_obs_dreambooth", "single_obs_dreambooth", "w2w_inversion"}) {
                const auto& s = j.at("identity_score").at(k);
                md += std::string("| ") + k + " | " + num(s.at("mean").get<double>()) + " | " + num(s.at("std").get<double>()) + " |\n";
            }
        } else if (file == "ablation.json") {
            sections["ablation"] = j.at("medians");
            md += "\n## Scaling\n\n| N | entanglement | identity score |\n|---|---|---|\n";
            for (const auto& r : j.at("medians"))
                md += "| " + std::to_string(r.at("N").get<std::size_t>()) + " | " + num(r.at("entanglement").get<double>()) +
                      " | " + num(r.at("identity_score").get<double>()) + " |\n";
        } else if (file == "finetune.json") {
            sections["corpus"] = {{"rows", j.at("rows")}, {"d", j.at("d")}};
        }
    }
    rep["sections"] = sections;
    rep["trace"] = trace;
    write_metric("report.json", rep);
    io::write_file(path("report.md"), md);
    write_timing("report_timing.json", ojson::object());
    record(stage, inputs, {"report.json", "report.md"});
    return {stage, false};
}

}  // namespace w2w
