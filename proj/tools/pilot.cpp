// Records the pilot values the regression tests compare against: runs the
// default pipeline for one seed through edit and invert, then writes the
// headline numbers to a JSON file (tests/data/pilot_values.json).
#include <algorithm>
#include <cstdio>
#include <string>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"

#include "w2w/harness.hpp"
#include "w2w/io.hpp"

int main(int argc, char** argv) {
    CLI::App app{"Record pilot values for the regression thresholds"};
    std::string out = "pilot";
    std::string dest = "pilot_values.json";
    std::uint64_t seed = 0;
    std::size_t workers = std::max(1u, std::thread::hardware_concurrency());
    app.add_option("--out", out, "Pipeline output directory")->capture_default_str();
    app.add_option("--dest", dest, "Where to write the pilot values")->capture_default_str();
    app.add_option("--seed", seed, "Pipeline seed")->capture_default_str();
    app.add_option("--workers", workers, "Worker threads")->capture_default_str();
    CLI11_PARSE(app, argc, argv);

    w2w::ExperimentConfig config;
    config.seed = seed;
    config.corpus.holdout = 20;
    w2w::Pipeline p(out, config, workers);
    p.gen_world();
    p.train_base();
    p.finetune_corpus();
    p.fit_space();
    p.train_directions();
    p.edit({}, {}, 1.0, std::nullopt);
    p.invert({});

    const auto edit = nlohmann::json::parse(w2w::io::read_file(p.out() / "edit_metrics.json"));
    const auto inv = nlohmann::json::parse(w2w::io::read_file(p.out() / "invert_metrics.json"));
    nlohmann::ordered_json j;
    j["seed"] = seed;
    j["config_hash"] = p.hash();
    j["finetune_identity"] = inv["identity_score"]["multi_obs_dreambooth"]["mean"];
    j["inversion"] = {{"multi_obs_dreambooth", inv["identity_score"]["multi_obs_dreambooth"]["mean"]},
                      {"single_obs_dreambooth", inv["identity_score"]["single_obs_dreambooth"]["mean"]},
                      {"w2w_inversion", inv["identity_score"]["w2w_inversion"]["mean"]}};
    auto edits = nlohmann::ordered_json::array();
    for (const auto& r : edit["results"])
        edits.push_back({{"attribute", r["attribute"]},
                         {"flip_rate", r["flip_rate"]},
                         {"identity_after", r["identity_after"]["mean"]},
                         {"preserved_after", r["preserved_after"]["mean"]}});
    j["edit"] = std::move(edits);

    // Attribute 0 and 1 edits composed on the edit-evaluation holdouts.
    const auto world = p.world();
    const auto base = p.base();
    const auto sch = p.schedule();
    const auto dirs = p.directions();
    const std::vector<w2w::EditDirection> pair = {dirs[0], dirs[1]};
    const auto corpus = p.corpus();
    auto held = p.holdout_ids();
    held.resize(std::min(held.size(), p.config().eval.edit_models));
    double both = 0.0, preserved = 0.0;
    for (const auto& item : p.datasets(held)) {
        const auto row = std::find(corpus.ids.begin(), corpus.ids.end(), item.identity.id) - corpus.ids.begin();
        const auto o = w2w::evaluate_composed_edit(world, base, sch, item.identity, corpus.thetas.row(row), pair,
                                                   p.config().eval, w2w::mix_seed(p.config().seed, 7));
        both += o.flipped[0] && o.flipped[1];
        preserved += o.preserved_after;
    }
    j["compose"] = {{"attributes", {0, 1}},
                    {"both_flipped_rate", both / held.size()},
                    {"preserved_after", preserved / held.size()}};
    w2w::io::write_file(dest, j.dump(2) + "\n");
    std::printf("%s\n", j.dump(2).c_str());
    return 0;
}
