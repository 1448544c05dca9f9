#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "w2w/diffusion.hpp"
#include "w2w/directions.hpp"
#include "w2w/inversion.hpp"
#include "w2w/lora.hpp"
#include "w2w/space.hpp"
#include "w2w/world.hpp"

// On-disk formats. Every integer and float is little-endian.
namespace w2w::io {

namespace fs = std::filesystem;

inline constexpr char kDenoiserMagic[8] = {'W', '2', 'W', 'D', 'E', 'N', '1', '\0'};
inline constexpr char kDatasetMagic[8] = {'W', '2', 'W', 'D', 'A', 'T', '1', '\0'};
inline constexpr char kSpaceMagic[8] = {'W', '2', 'W', 'S', 'P', 'C', '1', '\0'};
inline constexpr char kObservationMagic[8] = {'W', '2', 'W', 'O', 'B', 'S', '1', '\0'};
inline constexpr std::uint64_t kSpaceVersion = 1;

std::string sha256_hex(std::string_view bytes);
std::string base64_encode(std::string_view bytes);
std::string base64_decode(std::string_view text);
std::string encode_doubles(std::span<const double> values);  // base64 of raw float64
Vector decode_doubles(std::string_view text);

// Throws MissingArtifact when the file is absent.
std::string read_file(const fs::path& path);
// Writes via a temporary sibling and rename.
void write_file(const fs::path& path, std::string_view bytes);
std::string file_hash(const fs::path& path);

// Denoiser checkpoint: magic, u64 D, hidden, emb, tokens, then the float64
// tensors in DenoiserParams::tensors() order, then u64 T and T skip gains.
std::string encode_denoiser(const DenoiserParams& params);
DenoiserParams decode_denoiser(std::string_view bytes);

// Weight dataset: magic, u64 N, d, layout version, N*d float64, then u64 byte
// length and a JSON trailer {"shape": {...}, "rows": [{"id", "attrs"}...]}.
std::string encode_dataset(const WeightDataset& ds);
WeightDataset decode_dataset(std::string_view bytes);

// Space: magic, u64 d, m, version, then float64 mean, basis, eigvals,
// coeff_mu, coeff_sigma, total_variance, and u64 fit_rows.
std::string encode_space(const W2wSpace& space);
W2wSpace decode_space(std::string_view bytes);

// Observations: 16-byte header (magic, u32 D, u32 count) then float32 rows.
// Contexts are not stored; row i is read back with context i mod contexts.
std::string encode_observations(std::span<const Observation> obs);
std::vector<Observation> decode_observations(std::string_view bytes, std::size_t contexts);

// One JSON object per line: {"id", "z", "attrs"}.
std::string encode_identities(std::span<const Identity> ids);
std::vector<Identity> decode_identities(std::string_view text);

nlohmann::ordered_json direction_to_json(const EditDirection& dir);
EditDirection direction_from_json(const nlohmann::json& j);

nlohmann::ordered_json inversion_to_json(const InversionResult& r, const InversionConfig& config,
                                         const std::string& space_hash);
InversionResult inversion_from_json(const nlohmann::json& j, const W2wSpace& space);

// Stable text form used for every JSON artifact.
std::string dump(const nlohmann::ordered_json& j);

}  // namespace w2w::io
