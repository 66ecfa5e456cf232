// Copyright (c) 2026, hetforest contributors
// SPDX-License-Identifier: Apache-2.0

// Branch-train-merge orchestration. One expert per difficulty tier; every
// iteration branches each tier from its seed (iteration 1) or from the
// previous iteration's branch-point checkpoint, trains all tiers as isolated
// jobs, and merges the results back into the forest.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "hetforest/budget.hpp"
#include "hetforest/ensemble.hpp"
#include "hetforest/tinylm.hpp"

namespace hetforest {

inline constexpr double kDefaultBranchRatio = 2.0 / 3.0;

/// round(total_steps * ratio), clamped to [1, total_steps].
int branch_step_for(int total_steps, double ratio = kDefaultBranchRatio);

struct IterationRecord {
    int index = 0;
    std::map<Tier, std::string> domains;
    std::map<Tier, std::string> final_ids;
    std::map<Tier, std::string> branch_ids;
    std::map<Tier, int> steps;
    std::map<Tier, int> branch_steps;
    std::map<Tier, std::uint64_t> data_seeds;
    bool operator==(const IterationRecord&) const = default;
};

struct Forest {
    BudgetPlan plan;
    DomainPrior prior;
    std::map<Tier, ExpertCheckpoint> seeds;
    std::map<Tier, ExpertCheckpoint> experts;
    /// Branch-step checkpoints of the latest iteration; next iteration starts here.
    std::map<Tier, ExpertCheckpoint> branch_points;
    std::vector<IterationRecord> history;

    int completed_iterations() const noexcept { return static_cast<int>(history.size()); }
    /// Tiers in ensemble order (the order of kAllTiers restricted to experts).
    std::vector<Tier> member_tiers() const;
};

/// Fresh forest with no trained experts. Every plan tier needs a seed whose
/// architecture matches its assignment.
Forest make_forest(BudgetPlan plan, std::map<Tier, ExpertCheckpoint> seeds, DomainPrior prior = {});

/// Starting checkpoint for the tier's next iteration.
ExpertCheckpoint branch(const Forest& forest, Tier tier);

struct DomainData {
    std::string name;
    std::span<const Token> train;
};

struct BtmOptions {
    /// total_steps is replaced per tier by the plan's iteration count.
    TrainSchedule schedule;
    double branch_ratio = kDefaultBranchRatio;
    std::uint64_t base_seed = 0;
    int workers = 1;
    int kernel_threads = 1;
};

struct TierJob {
    Tier tier = Tier::Moderate;
    int iteration = 0;
    std::string domain;
    ExpertCheckpoint start;
    std::span<const Token> train;
    TrainSchedule schedule;
    int branch_step = 0;
    std::uint64_t data_seed = 0;
};

struct TierResult {
    Tier tier = Tier::Moderate;
    ExpertCheckpoint final_checkpoint;
    ExpertCheckpoint branch_checkpoint;
    int branch_step = 0;
    std::uint64_t data_seed = 0;
};

/// The job a tier runs in the forest's next iteration. Depends only on the
/// forest, this tier's domain and the options.
TierJob make_tier_job(const Forest& forest, Tier tier, const DomainData& domain, const BtmOptions& options);

/// Runs one job in the calling thread. Pure in its inputs.
TierResult run_tier_job(const TierJob& job);

/// Thrown when any tier of an iteration fails; siblings still run to completion.
class IterationFailedError : public Error {
public:
    IterationFailedError(std::map<Tier, std::string> failures, std::vector<TierResult> completed);
    const std::map<Tier, std::string>& failures() const noexcept { return failures_; }
    const std::vector<TierResult>& completed() const noexcept { return completed_; }

private:
    std::map<Tier, std::string> failures_;
    std::vector<TierResult> completed_;
};

/// Trains every plan tier on its domain with a pool of options.workers threads
/// and merges the results.
Forest train_iteration(const Forest& forest, const std::map<Tier, DomainData>& domain_row,
                       const BtmOptions& options);

/// Replaces experts tier-wise and appends an IterationRecord.
Forest merge(const Forest& forest, const std::vector<TierResult>& trained);

/// Checks every expert's lineage against the recorded history; throws LineageMismatch.
void verify_lineage(const Forest& forest);

/// Ensemble members (non-owning, valid while the forest lives).
struct ForestModels {
    std::vector<ExpertModel> models;
    ModelSet members() const;
};
ForestModels forest_models(const Forest& forest);

/// Manifest: scenario, plan, prior, tier -> checkpoint path maps (relative to
/// the manifest) and the full history. Checkpoints are written to
/// <manifest dir>/checkpoints/<id>.ckpt.
void save_forest(const Forest& forest, const std::filesystem::path& manifest_path);
Forest load_forest(const std::filesystem::path& manifest_path);

nlohmann::json prior_to_json(const DomainPrior& prior);
DomainPrior prior_from_json(const nlohmann::json& j);

}  // namespace hetforest
