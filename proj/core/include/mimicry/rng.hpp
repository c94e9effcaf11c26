#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string_view>

namespace mimicry {

using Rng = std::mt19937_64;

/// 64-bit FNV-1a over raw bytes.
std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t basis = 0xcbf29ce484222325ULL);

std::uint64_t splitmix64(std::uint64_t x);

/// Derive an independent seed for a named substream, e.g.
/// derive_seed(base, "protect:artist3:image7").
std::uint64_t derive_seed(std::uint64_t base, std::string_view label);
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index);

/// Fill `out` with i.i.d. N(0, 1) draws.
void fill_normal(Rng& rng, std::span<double> out);

}  // namespace mimicry
