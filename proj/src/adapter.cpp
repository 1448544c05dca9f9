#include "w2w/adapter.hpp"


#include <algorithm>
#include <cmath>

#include "w2w/error.hpp"

namespace w2w {

LoraAdapter LoraAdapter::zeros(const AdapterShape& shape, double scale) {
    if (shape.rank == 0) throw ConfigError("LoRA rank must be >= 1");
    LoraAdapter a;
    a.shape = shape;
    a.scale = scale;
    for (auto& layer : a.layers) {
        layer.B = Matrix(shape.rows, shape.rank);
        layer.A = Matrix(shape.rank, shape.cols);
    }
    return a;
}

Matrix LoraAdapter::delta(TargetLayer l) const {
    const auto& ly = layer(l);
    return matmul(ly.B, ly.A);
}

Vector flatten(const LoraAdapter& adapter) {
    Vector theta;
    theta.reserve(adapter.shape.flat_size());
    for (const auto& layer : adapter.layers) {
        theta.insert(theta.end(), layer.B.values().begin(), layer.B.values().end());
        theta.insert(theta.end(), layer.A.values().begin(), layer.A.values().end());
    }
    return theta;
}

LoraAdapter unflatten(std::span<const double> theta, const AdapterShape& shape, double scale) {
    if (theta.size() != shape.flat_size())
        throw LengthMismatch("theta has " + std::to_string(theta.size()) + " entries, layout needs " +
                             std::to_string(shape.flat_size()));
    LoraAdapter a = LoraAdapter::zeros(shape, scale);
    auto it = theta.begin();
    for (auto& layer : a.layers) {
        std::copy_n(it, layer.B.size(), layer.B.values().begin());
        it += static_cast<std::ptrdiff_t>(layer.B.size());
        std::copy_n(it, layer.A.size(), layer.A.values().begin());
        it += static_cast<std::ptrdiff_t>(layer.A.size());
    }
    return a;
}

LoraAdapter balance_factors(const LoraAdapter& adapter, const LoraAdapter& reference) {
    if (!(adapter.shape == reference.shape)) throw ShapeMismatch("reference adapter has a different shape");
    LoraAdapter out = adapter;
    const AdapterShape& s = adapter.shape;
    for (std::size_t l = 0; l < out.layers.size(); ++l) {
        auto& layer = out.layers[l];
        const auto& ref = reference.layers[l];
        for (std::size_t k = 0; k < s.rank; ++k) {
            double nb = 0.0, na = 0.0, align = 0.0;
            for (std::size_t i = 0; i < s.rows; ++i) nb += layer.B(i, k) * layer.B(i, k);
            for (std::size_t j = 0; j < s.cols; ++j) {
                na += layer.A(k, j) * layer.A(k, j);
                align += layer.A(k, j) * ref.A(k, j);
            }
            if (nb == 0.0 || na == 0.0) continue;
            double c = std::sqrt(std::sqrt(na / nb));
            const double sign = align < 0.0 ? -1.0 : 1.0;
            for (std::size_t i = 0; i < s.rows; ++i) layer.B(i, k) *= sign * c;
            for (std::size_t j = 0; j < s.cols; ++j) layer.A(k, j) *= sign / c;
        }
    }
    return out;
}

FlatSlot flat_slot(std::size_t position, const AdapterShape& shape) {
    if (position >= shape.flat_size()) throw LengthMismatch("position outside the flattened adapter");
    const std::size_t layer = position / shape.layer_size();
    std::size_t rem = position % shape.layer_size();
    const std::size_t b_size = shape.rows * shape.rank;
    if (rem < b_size) return {static_cast<TargetLayer>(layer), true, rem / shape.rank, rem % shape.rank};
    rem -= b_size;
    return {static_cast<TargetLayer>(layer), false, rem / shape.cols, rem % shape.cols};
}

}  // namespace w2w
