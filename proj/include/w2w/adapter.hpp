#pragma once

#include <array>
#include <cstddef>
#include <span>

#include "w2w/numerics.hpp"

namespace w2w {

// Conditioning projections that carry adapters, in flatten order.
enum class TargetLayer : std::size_t { kKey = 0, kValue = 1 };
inline constexpr std::size_t kTargetLayerCount = 2;

// Bumped whenever the (layer, matrix, row, col) -> position map changes.
inline constexpr std::uint32_t kFlattenLayoutVersion = 1;

struct AdapterShape {
    std::size_t rows = 64;  // hidden width of the denoiser
    std::size_t cols = 16;  // conditioning embedding width
    std::size_t rank = 1;

    std::size_t layer_size() const noexcept { return rank * (rows + cols); }
    std::size_t flat_size() const noexcept { return kTargetLayerCount * layer_size(); }
    friend bool operator==(const AdapterShape&, const AdapterShape&) = default;
};

struct LoraLayer {
    Matrix B;  // rows x rank
    Matrix A;  // rank x cols
    friend bool operator==(const LoraLayer&, const LoraLayer&) = default;
};

/// Low-rank residual for the key/value projections: W + scale * B A.
struct LoraAdapter {
    AdapterShape shape;
    double scale = 1.0;
    std::array<LoraLayer, kTargetLayerCount> layers;

    static LoraAdapter zeros(const AdapterShape& shape, double scale = 1.0);

    LoraLayer& layer(TargetLayer l) { return layers[static_cast<std::size_t>(l)]; }
    const LoraLayer& layer(TargetLayer l) const { return layers[static_cast<std::size_t>(l)]; }

    // B A for one layer, rows x cols.
    Matrix delta(TargetLayer l) const;

    friend bool operator==(const LoraAdapter&, const LoraAdapter&) = default;
};

/// Layout: for each layer (key, value): B row-major, then A row-major.
Vector flatten(const LoraAdapter& adapter);
LoraAdapter unflatten(std::span<const double> theta, const AdapterShape& shape, double scale = 1.0);

// Rescales each rank component so |B[:,k]| = |A[k,:]| and flips its sign so
// A[k,:] points along reference's; every B A product is unchanged.
LoraAdapter balance_factors(const LoraAdapter& adapter, const LoraAdapter& reference);

struct FlatSlot {
    TargetLayer layer;
    bool is_b;
    std::size_t row;
    std::size_t col;
};

// Position -> slot lookup of the frozen layout.
FlatSlot flat_slot(std::size_t position, const AdapterShape& shape);

}  // namespace w2w
