// Copyright (c) 2026, hetforest contributors
// SPDX-License-Identifier: Apache-2.0

// Equal-compute budgeting across heterogeneity scenarios. The feed-forward
// block dominates a layer's cost, so compute is proxied by
// |FFN| x iterations and the small/large tiers are balanced pairwise against
// the moderate tier:
//     |FFN_S| * Iter_M ~ |FFN_M| * Iter_S     |FFN_L| * Iter_M ~ |FFN_M| * Iter_L

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "hetforest/tinylm.hpp"
#include "hetforest/types.hpp"

namespace hetforest {

inline constexpr int kDefaultGranularity = 100;
inline constexpr double kDefaultBudgetTolerance = 0.05;

/// Parameter elements of all SwiGLU matrices: layers * 3 * hidden * intermediate.
std::int64_t ffn_total(const ExpertConfig& config) noexcept;

struct SolvedIterations {
    int iter_s = 0;
    int iter_l = 0;
};

/// Rounds to the nearest multiple of granularity (never below one granule).
int round_to_granularity(double value, int granularity);

SolvedIterations solve_iterations(std::int64_t ffn_s, std::int64_t ffn_m, std::int64_t ffn_l, int iter_m,
                                  int granularity = kDefaultGranularity);

struct TierAssignment {
    ExpertConfig config;
    int iterations = 0;
};

struct BudgetPlan {
    Scenario scenario = Scenario::MHoIHo;
    /// What each tier's expert actually trains with.
    std::map<Tier, TierAssignment> assignments;
    /// Reference model sizes and iteration counts the compute equalities are
    /// stated over (Expert_S/M/L and Iter_S/M/L).
    std::map<Tier, ExpertConfig> reference_configs;
    std::map<Tier, int> reference_iterations;
    double tolerance = kDefaultBudgetTolerance;
};

struct BudgetReport {
    double small_deviation = 0.0;  // |ffn_s*iter_m - ffn_m*iter_s| / (ffn_m*iter_s)
    double large_deviation = 0.0;  // |ffn_l*iter_m - ffn_m*iter_l| / (ffn_m*iter_l)
    double tolerance = 0.0;
    bool pass = false;
    /// Sum over tiers of ffn_total(assigned config) * assigned iterations.
    double total_compute = 0.0;
};

/// Reference-level check of the two pairwise equalities.
BudgetReport verify_budget(const BudgetPlan& plan);

/// Builds the per-tier assignment for a scenario. MHoIHo needs only the
/// moderate config; MHoIHe and MHeIHo need all three reference sizes.
BudgetPlan make_plan(Scenario scenario, const std::map<Tier, ExpertConfig>& tier_configs, int iter_m,
                     int granularity = kDefaultGranularity, double tolerance = kDefaultBudgetTolerance);

/// Seed-model architectures by size label ("5M", "7.5M", "10M", "12.5M", "15M",
/// "90M", "115M", "135M"): vocabulary 128000, sequence length 1024.
ExpertConfig seed_table_config(const std::string& label);

struct SetupSpec {
    std::string name;
    std::string small, medium, large;  // seed_table_config labels
    int iter_s = 0, iter_m = 0, iter_l = 0;
};

/// tiny-spread (5M/10M/15M, 200/400/600), tiny-close (7.5M/10M/12.5M, 300/400/500)
/// and small-close (90M/115M/135M, 300/400/500).
const std::vector<SetupSpec>& reference_setups();

nlohmann::json plan_to_json(const BudgetPlan& plan);
BudgetPlan plan_from_json(const nlohmann::json& j);
nlohmann::json report_to_json(const BudgetReport& report);

}  // namespace hetforest
