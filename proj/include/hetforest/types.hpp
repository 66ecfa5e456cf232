// Copyright (c) 2026, hetforest contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

namespace hetforest {

using Token = std::int32_t;

inline constexpr Token kBos = 256;
inline constexpr Token kEos = 257;
inline constexpr Token kPad = 258;
inline constexpr int kByteVocab = 259;

enum class Tier { Easy = 0, Moderate = 1, Difficult = 2 };

inline constexpr std::array<Tier, 3> kAllTiers{Tier::Easy, Tier::Moderate, Tier::Difficult};

std::string_view to_string(Tier tier) noexcept;
std::optional<Tier> parse_tier(std::string_view name) noexcept;

/// Heterogeneity scenarios: model size (M) and iteration count (I), each
/// homogeneous (Ho) or heterogeneous (He) across difficulty tiers.
enum class Scenario { MHoIHo, MHoIHe, MHeIHo };

inline constexpr std::array<Scenario, 3> kAllScenarios{Scenario::MHeIHo, Scenario::MHoIHo,
                                                       Scenario::MHoIHe};

std::string_view to_string(Scenario scenario) noexcept;
std::optional<Scenario> parse_scenario(std::string_view name) noexcept;

}  // namespace hetforest
