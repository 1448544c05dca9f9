#include "support.hpp"

#include "w2w/io.hpp"

#include <array>
#include <cmath>
#include <cstdio>
#include <map>
#include <memory>
#include <sys/wait.h>
#include <thread>

namespace w2w::test {

ExperimentConfig default_config(std::uint64_t seed) {
    ExperimentConfig c;
    c.seed = seed;
    c.corpus.N = 256;
    c.corpus.holdout = 20;
    return c;
}

Pipeline& default_pipeline(std::uint64_t seed) {
    static std::map<std::uint64_t, std::unique_ptr<Pipeline>> cache;
    auto& slot = cache[seed];
    if (!slot) {
        const std::size_t workers = std::max(1u, std::thread::hardware_concurrency());
        slot = std::make_unique<Pipeline>(cache_dir() / ("default_seed" + std::to_string(seed)), default_config(seed),
                                          workers);
        slot->gen_world();
        slot->train_base();
        slot->finetune_corpus();
        slot->fit_space();
        slot->train_directions();
    }
    return *slot;
}

fs::path cache_dir() { return W2W_CACHE_DIR; }

fs::path scratch_dir(const std::string& name) {
    const fs::path p = cache_dir() / "scratch" / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string cli_path() { return W2W_CLI; }

fs::path source_dir() { return W2W_SOURCE_DIR; }

int run_cli(const std::string& args, std::string* output) {
    const std::string cmd = cli_path() + " " + args + " 2>&1";
    FILE* pipe = popen(cmd.c_str(), "r");
    if (!pipe) return -1;
    std::array<char, 4096> buf;
    std::string out;
    std::size_t n;
    while ((n = fread(buf.data(), 1, buf.size(), pipe)) > 0) out.append(buf.data(), n);
    const int status = pclose(pipe);
    if (output) *output = out;
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

nlohmann::json pilot_values() {
    return nlohmann::json::parse(io::read_file(source_dir() / "tests" / "data" / "pilot_values.json"));
}

double relative_error(double analytic, double numeric) {
    return std::abs(analytic - numeric) / (std::abs(analytic) + 1e-8);
}

namespace {

// y = W x in long double
LVector gemv(const Matrix& w, std::span<const long double> x) {
    LVector y(w.rows(), 0.0L);
    for (std::size_t r = 0; r < w.rows(); ++r)
        for (std::size_t c = 0; c < w.cols(); ++c) y[r] += static_cast<long double>(w(r, c)) * x[c];
    return y;
}

// B (A x) for one flat layer block: B is rows x rank, A is rank x cols.
LVector low_rank(std::span<const long double> block, const AdapterShape& s, std::span<const long double> x) {
    LVector ax(s.rank, 0.0L);
    const long double* a = block.data() + s.rows * s.rank;
    for (std::size_t k = 0; k < s.rank; ++k)
        for (std::size_t c = 0; c < s.cols; ++c) ax[k] += a[k * s.cols + c] * x[c];
    LVector out(s.rows, 0.0L);
    for (std::size_t r = 0; r < s.rows; ++r)
        for (std::size_t k = 0; k < s.rank; ++k) out[r] += block[r * s.rank + k] * ax[k];
    return out;
}

}  // namespace

LVector reference_forward(const DenoiserParams& p, std::span<const double> x_t, const Prompt& prompt, std::size_t t,
                          std::span<const long double> theta, const AdapterShape& shape) {
    const Vector temb = time_embedding(t, p.emb);
    LVector input(x_t.begin(), x_t.end());
    input.insert(input.end(), temb.begin(), temb.end());
    LVector cond(temb.begin(), temb.end());
    std::vector<std::size_t> tokens = {kClassToken};
    if (prompt.subject) tokens.push_back(kSubjectToken);
    if (prompt.context) tokens.push_back(kFirstContextToken + *prompt.context);
    for (std::size_t tok : tokens)
        for (std::size_t j = 0; j < p.emb; ++j) cond[j] += p.E(tok, j);

    const std::size_t L = shape.layer_size();
    LVector h1 = gemv(p.W_in, input);
    const LVector k = gemv(p.W_k, cond);
    const LVector dk = low_rank(theta.subspan(0, L), shape, cond);
    for (std::size_t i = 0; i < p.hidden; ++i) h1[i] = std::tanh(h1[i] + p.b_in[i] + k[i] + dk[i]);

    LVector h2 = gemv(p.W_h, h1);
    const LVector v = gemv(p.W_v, cond);
    const LVector dv = low_rank(theta.subspan(L, L), shape, cond);
    for (std::size_t i = 0; i < p.hidden; ++i) h2[i] = std::tanh(h2[i] + p.b_h[i] + v[i] + dv[i]);

    LVector out = gemv(p.W_out, h2);
    for (std::size_t i = 0; i < p.D; ++i) {
        out[i] += p.b_out[i];
        if (!p.skip.empty()) out[i] += static_cast<long double>(p.skip[t]) * x_t[i];
    }
    return out;
}

double fd_adapter(const DenoiserParams& params, std::span<const double> x_t, const Prompt& prompt, std::size_t t,
                  std::span<const double> theta, const AdapterShape& shape, std::span<const double> upstream,
                  std::size_t i, double h) {
    LVector th(theta.begin(), theta.end());
    auto f = [&](long double delta) {
        th[i] = theta[i] + delta;
        const LVector out = reference_forward(params, x_t, prompt, t, th, shape);
        long double s = 0.0L;
        for (std::size_t j = 0; j < out.size(); ++j) s += upstream[j] * out[j];
        return s;
    };
    const long double hl = h;
    return static_cast<double>((f(hl) - f(-hl)) / (2.0L * hl));
}

double fd_coeff(const W2wSpace& space, const DenoiserParams& params, const DiffusionSchedule& schedule,
                const Observation& obs, std::span<const NoiseDraw> draws, std::span<const double> beta, std::size_t k,
                double h) {
    const Prompt prompt = Prompt::subject_prompt(obs.context);
    const AdapterShape shape = params.adapter_shape();
    auto f = [&](long double delta) {
        LVector theta(space.mean.begin(), space.mean.end());
        for (std::size_t c = 0; c < beta.size(); ++c) {
            const long double b = beta[c] + (c == k ? delta : 0.0L);
            for (std::size_t j = 0; j < theta.size(); ++j) theta[j] += b * space.basis(c, j);
        }
        long double loss = 0.0L;
        for (const auto& d : draws) {
            const Vector x_t = forward_noise(obs.x, d.t, d.eps, schedule);
            const LVector out = reference_forward(params, x_t, prompt, d.t, theta, shape);
            for (std::size_t j = 0; j < out.size(); ++j) loss += (out[j] - d.eps[j]) * (out[j] - d.eps[j]);
        }
        return loss / static_cast<long double>(draws.size());
    };
    const long double hl = h;
    return static_cast<double>((f(hl) - f(-hl)) / (2.0L * hl));
}

}  // namespace w2w::test
