// Command-line driver for the toy weights-to-weights pipeline.
#include <cstdio>
#include <exception>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "w2w/error.hpp"
#include "w2w/harness.hpp"
#include "w2w/io.hpp"

namespace {

w2w::ExperimentConfig load_config(const std::string& file, std::optional<std::uint64_t> seed, bool gram_schmidt) {
    w2w::ExperimentConfig config;
    if (!file.empty()) {
        if (file.ends_with(".toml")) throw w2w::ConfigError("TOML configs are not supported; pass a JSON file");
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(w2w::io::read_file(file));
        } catch (const nlohmann::json::exception& e) {
            throw w2w::ConfigError(file + ": " + e.what());
        }
        config = w2w::ExperimentConfig::from_json(j);
    }
    if (seed) config.seed = *seed;
    if (gram_schmidt) config.gram_schmidt = true;
    return config;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Toy weights-to-weights pipeline"};
    app.require_subcommand(1);

    std::optional<std::uint64_t> seed;
    std::string out = "run";
    std::string config_file;
    std::size_t workers = 1;
    bool gram_schmidt = false;
    app.add_option("--seed", seed, "Global seed (overrides the config)");
    app.add_option("--out", out, "Output directory")->capture_default_str();
    app.add_option("--config", config_file, "JSON experiment config");
    app.add_option("--workers", workers, "Worker threads")->capture_default_str()->check(CLI::PositiveNumber);
    app.add_flag("--gram-schmidt", gram_schmidt, "Orthogonalize edit directions (experimental)");

    auto* gen = app.add_subcommand("gen-world", "Sample identities and render their observations");
    auto* base = app.add_subcommand("train-base", "Train the base denoiser");
    auto* ft = app.add_subcommand("finetune-corpus", "Fine-tune one adapter per identity");
    bool keep_partial = false;
    ft->add_flag("--keep-partial", keep_partial, "Drop failed identities instead of aborting");
    auto* fit = app.add_subcommand("fit-space", "Fit the weight subspace on training identities");

    auto* smp = app.add_subcommand("sample", "Sample new models and find their nearest neighbours");
    std::size_t count = 16;
    std::optional<std::uint64_t> sample_seed;
    smp->add_option("--count", count, "Number of sampled models")->capture_default_str();
    smp->add_option("--sample-seed", sample_seed, "Seed for the draws (default: global seed)");

    auto* dirs = app.add_subcommand("train-directions", "Train one edit direction per attribute");

    auto* ed = app.add_subcommand("edit", "Edit held-out models and score the result");
    std::vector<std::size_t> attrs;
    std::vector<std::uint64_t> edit_ids;
    double alpha_scale = 1.0;
    std::optional<std::size_t> t_inject;
    ed->add_option("--attr", attrs, "Attribute indices (default: all)");
    ed->add_option("--id", edit_ids, "Held-out identity ids (default: first eval.edit_models)");
    ed->add_option("--alpha-scale", alpha_scale, "Edit strength as a multiple of max_strength")->capture_default_str();
    ed->add_option("--t-inject", t_inject, "Switch to the edited weights below this timestep");

    auto* inv = app.add_subcommand("invert", "Invert single observations and compare against fine-tuning");
    std::vector<std::uint64_t> inv_ids;
    std::string obs_file;
    inv->add_option("--id", inv_ids, "Held-out identity ids (default: all)");
    inv->add_option("--obs", obs_file, "Observation file to invert instead of held-out identities");

    auto* abl = app.add_subcommand("ablate-scaling", "Refit the space on corpus subsets of growing size");
    std::vector<std::size_t> Ns;
    std::vector<std::uint64_t> abl_seeds;
    abl->add_option("--N", Ns, "Subset sizes (default: 32, 64, ... up to N)");
    abl->add_option("--seeds", abl_seeds, "Subset seeds (default: global seed)");

    auto* rep = app.add_subcommand("report", "Collect metrics into report.json and report.md");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : static_cast<int>(w2w::ErrorKind::kConfig);
    }

    try {
        w2w::Pipeline p(out, load_config(config_file, seed, gram_schmidt), workers);
        w2w::StageResult r;
        if (gen->parsed()) r = p.gen_world();
        else if (base->parsed()) r = p.train_base();
        else if (ft->parsed()) r = p.finetune_corpus(keep_partial);
        else if (fit->parsed()) r = p.fit_space();
        else if (smp->parsed()) r = p.sample(count, sample_seed.value_or(p.config().seed));
        else if (dirs->parsed()) r = p.train_directions();
        else if (ed->parsed()) r = p.edit(attrs, edit_ids, alpha_scale, t_inject);
        else if (inv->parsed()) r = obs_file.empty() ? p.invert(inv_ids) : p.invert_file(obs_file);
        else if (abl->parsed()) r = p.ablate_scaling(Ns, abl_seeds);
        else if (rep->parsed()) r = p.report();
        std::printf("%s: %s\n", r.stage.c_str(), r.up_to_date ? "up to date" : "done");
        return 0;
    } catch (const w2w::Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return static_cast<int>(e.kind());
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
