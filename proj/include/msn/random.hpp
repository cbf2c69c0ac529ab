#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "msn/tensor.hpp"

namespace msn {

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t seed) { return Rng(seed); }

// Derive an independent stream from (seed, stream-id) without correlated state.
inline Rng make_rng(std::uint64_t seed, std::uint64_t stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
    return Rng(seq);
}

template <typename T>
void fill_normal(Tensor<T>& t, Rng& rng, T stddev) {
    std::normal_distribution<double> dist(0.0, static_cast<double>(stddev));
    for (auto& v : t.vec()) v = static_cast<T>(dist(rng));
}

// He fan-in initialization for a conv kernel [Cout,Cin,K,K] or FC matrix [out,in].
template <typename T>
void kaiming_init(Tensor<T>& w, Rng& rng) {
    std::size_t fan_in = 1;
    for (int i = 1; i < w.rank(); ++i) fan_in *= static_cast<std::size_t>(w.dim(i));
    T stddev = static_cast<T>(std::sqrt(2.0 / static_cast<double>(fan_in)));
    fill_normal(w, rng, stddev);
}

}  // namespace msn
