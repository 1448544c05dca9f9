#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "w2w/harness.hpp"

namespace w2w::test {

namespace fs = std::filesystem;

// Default toy run: N=256 training identities plus 20 holdouts.
ExperimentConfig default_config(std::uint64_t seed);

// Pipeline under the shared build-tree cache with every stage up to
// train-directions completed. Reruns are no-ops thanks to the manifests.
Pipeline& default_pipeline(std::uint64_t seed = 0);

fs::path cache_dir();
fs::path scratch_dir(const std::string& name);  // emptied on each call
std::string cli_path();
fs::path source_dir();

// Runs the CLI with `args`; returns the exit status and captures stdout+stderr.
int run_cli(const std::string& args, std::string* output = nullptr);

double relative_error(double analytic, double numeric);

// Values recorded by the pilot run (tools/pilot.cpp) in tests/data.
nlohmann::json pilot_values();
// Allowed drop below a recorded pilot value.
inline constexpr double kPilotRegression = 0.05;

// Independent long-double reimplementation of the denoiser forward pass with
// a flat adapter vector. Central differences through it sit well below the
// 1e-4 relative tolerance even for gradients near 1e-7, where double
// round-off in the output would dominate.
using LVector = std::vector<long double>;
LVector reference_forward(const DenoiserParams& params, std::span<const double> x_t, const Prompt& prompt,
                          std::size_t t, std::span<const long double> theta, const AdapterShape& shape);

// d<upstream, eps_hat>/d theta_i by central difference with step h.
double fd_adapter(const DenoiserParams& params, std::span<const double> x_t, const Prompt& prompt, std::size_t t,
                  std::span<const double> theta, const AdapterShape& shape, std::span<const double> upstream,
                  std::size_t i, double h = 1e-5);

struct NoiseDraw {
    std::size_t t;
    Vector eps;
};

// Mean denoising loss of unproject(beta) on one observation over fixed draws,
// differentiated in beta_k by central difference.
double fd_coeff(const W2wSpace& space, const DenoiserParams& params, const DiffusionSchedule& schedule,
                const Observation& obs, std::span<const NoiseDraw> draws, std::span<const double> beta, std::size_t k,
                double h = 1e-5);

}  // namespace w2w::test
