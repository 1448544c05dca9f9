// Acceptance suite: one PASS/FAIL line per criterion. Exits 0 unless --strict
// is given and a criterion fails, so known-red criteria stay visible in ctest
// output without failing the run.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "support.hpp"
#include "w2w/harness.hpp"
#include "w2w/io.hpp"

using namespace w2w;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

// Tolerances and thresholds, pinned here.
constexpr double kMinGapW2wSingle = 0.10;
constexpr double kMaxGapMultiW2w = 0.15;
constexpr double kPipelineBudgetSeconds = 30 * 60;
constexpr double kMaxParamRatio = 0.2;
constexpr double kMaxTimeRatio = 0.5;
constexpr double kAblationBudgetSeconds = 20 * 60;
constexpr std::size_t kAllowedTrendViolations = 1;
constexpr double kMinFlipRate = 0.8;
constexpr double kMinIdentityAfter = 0.6;
constexpr double kFdTolerance = 1e-4;
constexpr std::size_t kFdChecksPerPath = 100;
constexpr double kFdBudgetSeconds = 60;
constexpr double kOrthonormalTol = 1e-8;
constexpr double kIdempotenceTol = 1e-9;
constexpr double kNormalEquationTol = 1e-8;
constexpr std::size_t kPropertyCases = 200;
constexpr double kPropertyBudgetSeconds = 120;
constexpr std::size_t kSampledModels = 10000;
constexpr double kMinNovelFraction = 0.9;
constexpr double kNoveltyCosine = 0.999;
const std::uint64_t kSeeds[] = {0, 1, 2};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t).count();
}

json read_json(const fs::path& p) { return json::parse(io::read_file(p)); }

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

struct Outcome {
    bool pass = true;
    std::vector<std::string> notes;

    void require(bool ok, const std::string& note) {
        pass = pass && ok;
        notes.push_back(std::string(ok ? "ok   " : "FAIL ") + note);
    }
};

std::size_t row_of(const WeightDataset& ds, std::uint64_t id) {
    return static_cast<std::size_t>(std::find(ds.ids.begin(), ds.ids.end(), id) - ds.ids.begin());
}

Pipeline& pipeline(std::uint64_t seed) { return test::default_pipeline(seed); }

Outcome inversion_ordering() {
    Outcome o;
    double multi = 0.0, single = 0.0, w2w = 0.0;
    std::size_t n = 0;
    for (auto seed : kSeeds) {
        Pipeline& p = pipeline(seed);
        p.invert({});
        const json m = read_json(p.out() / "invert_metrics.json");
        for (const auto& item : m.at("items")) {
            multi += item.at("multi_obs_dreambooth").get<double>();
            single += item.at("single_obs_dreambooth").get<double>();
            w2w += item.at("w2w_inversion").get<double>();
            ++n;
        }
        const auto& s = m.at("identity_score");
        o.notes.push_back(fmt("     seed %llu: multi %.4f, w2w %.4f, single %.4f", static_cast<unsigned long long>(seed),
                              s.at("multi_obs_dreambooth").at("mean").get<double>(),
                              s.at("w2w_inversion").at("mean").get<double>(),
                              s.at("single_obs_dreambooth").at("mean").get<double>()));
        double seconds = 0.0;
        for (const char* f : {"base_timing.json", "finetune_timing.json", "invert_timing.json"})
            seconds += read_json(p.out() / f).at("seconds").get<double>();
        o.require(seconds <= kPipelineBudgetSeconds,
                  fmt("seed %llu pipeline time %.0f s <= %.0f s (train-base + finetune-corpus + invert)",
                      static_cast<unsigned long long>(seed), seconds, kPipelineBudgetSeconds));
    }
    multi /= n;
    single /= n;
    w2w /= n;
    o.require(multi >= w2w && w2w >= single,
              fmt("ordering over %zu holdouts: multi %.4f >= w2w %.4f >= single %.4f", n, multi, w2w, single));
    o.require(w2w - single >= kMinGapW2wSingle, fmt("w2w - single %.4f >= %.2f", w2w - single, kMinGapW2wSingle));
    o.require(multi - w2w <= kMaxGapMultiW2w, fmt("multi - w2w %.4f <= %.2f", multi - w2w, kMaxGapMultiW2w));
    return o;
}

Outcome inversion_efficiency() {
    Outcome o;
    for (auto seed : kSeeds) {
        Pipeline& p = pipeline(seed);
        p.invert({});
        const json m = read_json(p.out() / "invert_metrics.json");
        const json t = read_json(p.out() / "invert_timing.json");
        const double params = m.at("parameters").at("w2w_inversion").get<double>() /
                              m.at("parameters").at("single_obs_dreambooth").get<double>();
        std::vector<double> single, w2w;
        for (const auto& item : t.at("items")) {
            single.push_back(item.at("single_obs_dreambooth"));
            w2w.push_back(item.at("w2w_inversion"));
        }
        const double ratio = median(w2w) / median(single);
        o.require(params <= kMaxParamRatio, fmt("seed %llu parameter ratio %.3f <= %.2f",
                                                static_cast<unsigned long long>(seed), params, kMaxParamRatio));
        o.require(ratio <= kMaxTimeRatio,
                  fmt("seed %llu median wall-clock ratio %.3f <= %.2f over %zu holdouts (w2w %.3f s, single %.3f s)",
                      static_cast<unsigned long long>(seed), ratio, kMaxTimeRatio, w2w.size(), median(w2w),
                      median(single)));
    }
    return o;
}

Outcome scaling_trends() {
    Outcome o;
    const std::vector<std::size_t> Ns = {32, 64, 128, 256};
    std::vector<std::vector<double>> ent(Ns.size()), id(Ns.size());
    double seconds = 0.0;
    for (auto seed : kSeeds) {
        Pipeline& p = pipeline(seed);
        p.ablate_scaling(Ns, {seed});
        seconds += read_json(p.out() / "ablation_timing.json").at("seconds").get<double>();
        const json ablation = read_json(p.out() / "ablation.json");
        for (const auto& r : ablation.at("rows")) {
            const auto i = std::find(Ns.begin(), Ns.end(), r.at("N").get<std::size_t>()) - Ns.begin();
            ent[i].push_back(r.at("entanglement").get<double>());
            id[i].push_back(r.at("identity_score").get<double>());
        }
    }
    std::vector<double> ent_med, id_med;
    for (std::size_t i = 0; i < Ns.size(); ++i) {
        ent_med.push_back(median(ent[i]));
        id_med.push_back(median(id[i]));
        o.notes.push_back(fmt("     N=%zu: entanglement %.4f, identity %.4f", Ns[i], ent_med.back(), id_med.back()));
    }
    o.require(trend_holds(ent_med, false, kAllowedTrendViolations), "median entanglement non-increasing in N");
    o.require(trend_holds(id_med, true, kAllowedTrendViolations), "median identity score non-decreasing in N");
    o.require(seconds <= kAblationBudgetSeconds, fmt("ablation time %.0f s <= %.0f s", seconds, kAblationBudgetSeconds));
    return o;
}

Outcome edit_semantics() {
    Outcome o;
    Pipeline& p = pipeline(0);
    p.edit({}, {}, 1.0, std::nullopt);
    const json m = read_json(p.out() / "edit_metrics.json");
    const json pilot = test::pilot_values();
    for (const auto& r : m.at("results")) {
        const std::size_t a = r.at("attribute");
        const double flip = r.at("flip_rate"), after = r.at("identity_after").at("mean");
        const std::size_t n = r.at("identity_after").at("n");
        const auto& ref = pilot.at("edit").at(a);
        o.require(flip >= kMinFlipRate && after >= kMinIdentityAfter,
                  fmt("attribute %zu on %zu holdouts: flip rate %.2f >= %.2f, identity after %.4f >= %.2f", a, n, flip,
                      kMinFlipRate, after, kMinIdentityAfter));
        o.require(flip >= ref.at("flip_rate").get<double>() - test::kPilotRegression &&
                      after >= ref.at("identity_after").get<double>() - test::kPilotRegression,
                  fmt("attribute %zu within %.2f of pilot (flip %.2f, identity after %.4f)", a, test::kPilotRegression,
                      ref.at("flip_rate").get<double>(), ref.at("identity_after").get<double>()));
    }
    return o;
}

Outcome gradient_checks() {
    Outcome o;
    const auto start = std::chrono::steady_clock::now();
    Pipeline& p = pipeline(0);
    const DenoiserParams base = p.base();
    const DiffusionSchedule sch = p.schedule();
    const WeightDataset corpus = p.corpus();
    const W2wSpace sub = p.space().truncated(p.config().resolved_m_invert(p.space().d()));
    Rng rng(20);

    std::size_t adapter_fail = 0;
    for (std::size_t c = 0; c < kFdChecksPerPath; ++c) {
        const auto row = corpus.thetas.row(rng.index(corpus.size()));
        const Vector theta(row.begin(), row.end());
        const LoraAdapter a = unflatten(theta, corpus.shape);
        const Vector x = rng.normal_vector(base.D);
        const Vector up = rng.normal_vector(base.D);
        const Prompt prompt = Prompt::subject_prompt(rng.index(base.contexts()));
        const std::size_t t = rng.index(sch.T);
        ForwardCache cache;
        denoiser_forward(base, x, prompt, t, &a, 1.0, &cache);
        LoraAdapter grads = LoraAdapter::zeros(a.shape);
        denoiser_backward(base, cache, up, &a, 1.0, &grads);
        const std::size_t i = rng.index(theta.size());
        const double fd = test::fd_adapter(base, x, prompt, t, theta, a.shape, up, i);
        adapter_fail += test::relative_error(flatten(grads)[i], fd) > kFdTolerance;
    }
    o.require(adapter_fail == 0, fmt("adapter factors: %zu of %zu checks over %.0e", adapter_fail, kFdChecksPerPath,
                                     kFdTolerance));

    std::size_t coeff_fail = 0;
    for (std::size_t c = 0; c < kFdChecksPerPath; ++c) {
        const Observation obs{rng.normal_vector(base.D), rng.index(base.contexts())};
        std::vector<test::NoiseDraw> draws;
        for (int i = 0; i < 4; ++i) draws.push_back({rng.index(sch.T), rng.normal_vector(base.D)});
        Vector beta = sub.coeff_mu;
        for (std::size_t k = 0; k < beta.size(); ++k) beta[k] += sub.coeff_sigma[k] * rng.normal();
        const LoraAdapter a = unflatten(unproject(sub, beta), corpus.shape);
        LoraAdapter grads = LoraAdapter::zeros(a.shape);
        for (const auto& d : draws) {
            ForwardCache cache;
            const Vector out = denoiser_forward(base, forward_noise(obs.x, d.t, d.eps, sch),
                                                Prompt::subject_prompt(obs.context), d.t, &a, 1.0, &cache);
            Vector up(out.size());
            for (std::size_t i = 0; i < out.size(); ++i)
                up[i] = 2.0 * (out[i] - d.eps[i]) / static_cast<double>(draws.size());
            denoiser_backward(base, cache, up, &a, 1.0, &grads);
        }
        const std::size_t k = rng.index(sub.m());
        const double g = grad_wrt_coeffs(sub, flatten(grads))[k];
        coeff_fail += test::relative_error(g, test::fd_coeff(sub, base, sch, obs, draws, beta, k)) > kFdTolerance;
    }
    o.require(coeff_fail == 0, fmt("PC coefficients: %zu of %zu checks over %.0e", coeff_fail, kFdChecksPerPath,
                                   kFdTolerance));
    const double seconds = seconds_since(start);
    o.require(seconds <= kFdBudgetSeconds, fmt("time %.1f s <= %.0f s", seconds, kFdBudgetSeconds));
    return o;
}

WeightDataset random_dataset(Rng& rng, std::size_t n, const AdapterShape& shape) {
    WeightDataset ds;
    ds.shape = shape;
    ds.thetas = Matrix(n, shape.flat_size());
    // Decaying column scales give a spread spectrum.
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < shape.flat_size(); ++j) ds.thetas(i, j) = rng.normal() / (1.0 + 0.3 * j);
    for (std::size_t i = 0; i < n; ++i) {
        ds.ids.push_back(i);
        ds.attrs.push_back({static_cast<std::uint8_t>(rng.coin())});
    }
    return ds;
}

Outcome subspace_properties() {
    Outcome o;
    const auto start = std::chrono::steady_clock::now();
    Rng rng(21);
    double worst_ortho = 0.0, worst_idem = 0.0, worst_normal = 0.0;
    std::size_t flatten_fail = 0, monotone_fail = 0;
    for (std::size_t c = 0; c < kPropertyCases; ++c) {
        const AdapterShape shape{2 + rng.index(10), 1 + rng.index(4), 1};
        const std::size_t n = 3 + rng.index(40);
        const WeightDataset ds = random_dataset(rng, n, shape);
        const std::size_t d = shape.flat_size();
        const std::size_t m = 1 + rng.index(std::min(n - 1, d));
        const W2wSpace s = fit_space(ds, m);

        const Matrix gram = matmul_bt(s.basis, s.basis);
        for (std::size_t i = 0; i < s.m(); ++i)
            for (std::size_t j = 0; j < s.m(); ++j)
                worst_ortho = std::max(worst_ortho, std::abs(gram(i, j) - (i == j ? 1.0 : 0.0)));

        const Vector x = rng.normal_vector(d, 3.0);
        const Vector b1 = project(s, x);
        const Vector b2 = project(s, unproject(s, b1));
        for (std::size_t k = 0; k < b1.size(); ++k)
            worst_idem = std::max(worst_idem, std::abs(b1[k] - b2[k]) / (1.0 + norm2(x)));

        const AdapterShape fshape{1 + rng.index(70), 1 + rng.index(20), 1 + rng.index(3)};
        const Vector theta = rng.normal_vector(fshape.flat_size());
        flatten_fail += flatten(unflatten(theta, fshape)) != theta;
        const LoraAdapter a = unflatten(rng.normal_vector(fshape.flat_size()), fshape);
        flatten_fail += !(unflatten(flatten(a), fshape) == a);

        const W2wSpace full = fit_space(ds, std::min(n - 1, d));
        double prev = INFINITY;
        for (std::size_t k = 1; k <= full.m(); ++k) {
            const W2wSpace t = full.truncated(k);
            double err = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                const Vector r = subtract(ds.thetas.row(i), unproject(t, project(t, ds.thetas.row(i))));
                err += dot(r, r);
            }
            monotone_fail += err > prev * (1.0 + 1e-12) + 1e-12;
            prev = err;
        }

        const std::size_t rows = 2 + rng.index(60), cols = 1 + rng.index(std::min<std::size_t>(rows, 12));
        Matrix A(rows, cols);
        for (auto& v : A.values()) v = rng.normal();
        const Vector y = rng.normal_vector(rows);
        const Vector w = solve_least_squares(A, y);
        const Vector r = subtract(matvec(A, w), y);
        const double scale = norm2(A.values()) * norm2(y);
        worst_normal = std::max(worst_normal, norm2(matvec_t(A, r)) / scale);
    }
    o.require(worst_ortho <= kOrthonormalTol, fmt("basis orthonormality: worst %.2e <= %.0e", worst_ortho, kOrthonormalTol));
    o.require(worst_idem <= kIdempotenceTol, fmt("project/unproject idempotence: worst %.2e <= %.0e", worst_idem,
                                                kIdempotenceTol));
    o.require(flatten_fail == 0, fmt("flatten/unflatten bit-exact: %zu failures", flatten_fail));
    o.require(monotone_fail == 0, fmt("reconstruction error non-increasing in m: %zu violations", monotone_fail));
    o.require(worst_normal <= kNormalEquationTol,
              fmt("normal-equation residual |A^T r| / (|A| |y|): worst %.2e <= %.0e", worst_normal, kNormalEquationTol));
    const double seconds = seconds_since(start);
    o.require(seconds <= kPropertyBudgetSeconds,
              fmt("%zu cases each in %.1f s <= %.0f s", kPropertyCases, seconds, kPropertyBudgetSeconds));
    return o;
}

Outcome sampling_statistics() {
    Outcome o;
    Pipeline& p = pipeline(0);
    const W2wSpace sp = p.space();
    const WeightDataset train = p.train_dataset();
    const Matrix projected = project_all(sp, train.thetas);
    Vector mean(sp.m(), 0.0);
    std::size_t novel = 0;
    for (std::size_t i = 0; i < kSampledModels; ++i) {
        Rng rng(mix_seed(22, i));
        const Vector beta = project(sp, sample_model(sp, rng));
        axpy(1.0, beta, mean);
        novel += nearest_neighbor(beta, projected).cosine < kNoveltyCosine;
    }
    std::size_t outside = 0;
    double worst = 0.0;
    for (std::size_t k = 0; k < sp.m(); ++k) {
        const double z = std::abs(mean[k] / kSampledModels - sp.coeff_mu[k]) / (sp.coeff_sigma[k] / 100.0);
        worst = std::max(worst, z);
        outside += z > 4.0;
    }
    o.require(outside == 0, fmt("coefficient means within 4 sigma/100 of mu: %zu of %zu outside (worst %.2f)", outside,
                                sp.m(), worst));
    const double frac = static_cast<double>(novel) / kSampledModels;
    o.require(frac >= kMinNovelFraction,
              fmt("nearest-neighbour cosine < %.3f for %.4f of %zu samples (>= %.2f)", kNoveltyCosine, frac,
                  kSampledModels, kMinNovelFraction));
    return o;
}

Outcome delayed_injection() {
    Outcome o;
    Pipeline& p = pipeline(0);
    const DenoiserParams base = p.base();
    const DiffusionSchedule sch = p.schedule();
    const WeightDataset corpus = p.corpus();
    const auto dirs = p.directions();
    const std::uint64_t id = p.holdout_ids().front();
    const Vector theta(corpus.thetas.row(row_of(corpus, id)).begin(), corpus.thetas.row(row_of(corpus, id)).end());
    const LoraAdapter orig = unflatten(theta, corpus.shape);
    const std::size_t steps = p.config().eval.ddim_steps;
    for (const auto& dir : dirs) {
        const Vector edited = apply_edit(theta, dir, dir.max_strength);
        const LoraAdapter edit = unflatten(edited, corpus.shape);
        bool exact = true;
        std::vector<double> distance;
        for (std::size_t t_inject : {std::size_t{0}, sch.T / 4, sch.T / 2, 3 * sch.T / 4, sch.T}) {
            double total = 0.0;
            for (std::uint64_t seed = 0; seed < 16; ++seed) {
                const Prompt prompt = Prompt::subject_prompt(seed % base.contexts());
                const Vector x = delayed_injection_sample(base, sch, theta, edited, corpus.shape, t_inject, prompt,
                                                          steps, seed);
                const Vector ref = ddim_sample(base, sch, prompt, steps, seed, &orig);
                if (t_inject == 0) exact = exact && x == ref;
                if (t_inject == sch.T) exact = exact && x == ddim_sample(base, sch, prompt, steps, seed, &edit);
                total += norm2(subtract(x, ref));
            }
            distance.push_back(total / 16.0);
        }
        o.require(exact, fmt("attribute %zu: T_inject = 0 and T_inject = T bit-exact", dir.attribute));
        o.require(trend_holds(distance, true, kAllowedTrendViolations),
                  fmt("attribute %zu: distance to original %.3f %.3f %.3f %.3f %.3f increasing with <= 1 violation",
                      dir.attribute, distance[0], distance[1], distance[2], distance[3], distance[4]));
    }
    return o;
}

Outcome determinism() {
    Outcome o;
    Pipeline& p = pipeline(0);
    const fs::path dir = test::scratch_dir("acceptance_workers");
    std::string reference = io::read_file(p.out() / "corpus.w2wdat");
    if (read_json(p.out() / "finetune_timing.json").at("workers") != 1) {
        fs::copy(p.out(), dir / "one", fs::copy_options::recursive);
        fs::remove(dir / "one/manifests/finetune-corpus.json");
        Pipeline one(dir / "one", p.config(), 1);
        one.finetune_corpus();
        reference = io::read_file(dir / "one/corpus.w2wdat");
    }
    fs::copy(p.out(), dir / "four", fs::copy_options::recursive);
    fs::remove(dir / "four/manifests/finetune-corpus.json");
    fs::remove(dir / "four/corpus.w2wdat");
    Pipeline four(dir / "four", p.config(), 4);
    four.finetune_corpus();
    o.require(io::read_file(dir / "four/corpus.w2wdat") == reference,
              fmt("finetune-corpus with 1 and 4 workers: byte-identical weight datasets (N=%zu)",
                  p.corpus().size()));

    // Two independent CLI runs of every command.
    io::write_file(dir / "config.json", std::string(R"({"corpus": {"N": 64}})"));
    const char* commands[] = {"gen-world", "train-base", "finetune-corpus", "fit-space", "sample --count 20",
                              "train-directions", "edit", "invert", "ablate-scaling --N 32 64", "report"};
    for (const char* run : {"a", "b"})
        for (const char* cmd : commands) {
            std::string out;
            const int code = test::run_cli("--workers " + std::string(run[0] == 'a' ? "1" : "4") + " --config " +
                                               (dir / "config.json").string() + " --out " + (dir / run).string() + " " +
                                               cmd,
                                           &out);
            if (code != 0) {
                o.require(false, fmt("%s exited %d: %s", cmd, code, out.c_str()));
                return o;
            }
        }
    std::size_t compared = 0, differ = 0;
    for (const auto& e : fs::recursive_directory_iterator(dir / "a")) {
        if (!e.is_regular_file() || e.path().filename().string().ends_with("_timing.json")) continue;
        const fs::path rel = fs::relative(e.path(), dir / "a");
        ++compared;
        if (!fs::exists(dir / "b" / rel) || io::read_file(e.path()) != io::read_file(dir / "b" / rel)) {
            ++differ;
            o.notes.push_back("     differs: " + rel.string());
        }
    }
    o.require(differ == 0 && compared > 0,
              fmt("CLI reruns: %zu of %zu artifacts differ (timing sidecars excluded)", differ, compared));
    return o;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance criteria"};
    bool strict = false;
    std::vector<int> only;
    app.add_flag("--strict", strict, "Exit non-zero when any criterion fails");
    app.add_option("--only", only, "Run only these criteria")->delimiter(',');
    CLI11_PARSE(app, argc, argv);

    const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
        {"inversion ordering", inversion_ordering},   {"inversion efficiency", inversion_efficiency},
        {"scaling trends", scaling_trends},           {"edit semantics", edit_semantics},
        {"gradient correctness", gradient_checks},    {"subspace algebra properties", subspace_properties},
        {"sampling statistics", sampling_statistics}, {"delayed injection", delayed_injection},
        {"determinism", determinism},
    };
    std::size_t passed = 0, run = 0, printed = 0;
    std::string report;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int id = static_cast<int>(i + 1);
        if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
        const auto start = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o.require(false, std::string("threw: ") + e.what());
        }
        for (const auto& note : o.notes) report += "  " + note + "\n";
        report += fmt("criterion %d %s: %s (%.0f s)\n", id, criteria[i].first, o.pass ? "PASS" : "FAIL",
                      seconds_since(start));
        std::fputs(report.c_str() + printed, stdout);
        std::fflush(stdout);
        printed = report.size();
        ++run;
        passed += o.pass;
    }
    report += fmt("acceptance: %zu of %zu criteria pass\n", passed, run);
    std::fputs(report.c_str() + printed, stdout);
    // ctest hides the output of passing tests, so keep a copy next to the cache.
    io::write_file(test::cache_dir().parent_path() / "acceptance_report.txt", report);
    return strict && passed != run ? 1 : 0;
}
