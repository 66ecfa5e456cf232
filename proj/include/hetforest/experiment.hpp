// Copyright (c) 2026, hetforest contributors
// SPDX-License-Identifier: Apache-2.0

// Experiment configuration and the on-disk pipeline behind the CLI.
//
// Output layout under out_dir:
//   checkpoints/<id>.ckpt   every checkpoint ever produced (content addressed)
//   seeds.json              tier -> seed checkpoint
//   tiers.json              domain -> difficulty tier, with the seed perplexities used
//   forest.json             forest manifest after the latest BTM iteration
//   results.json            evaluation of the forest
//   provenance/<cmd>.json   resolved config, overrides and run settings

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "hetforest/btm.hpp"
#include "hetforest/budget.hpp"
#include "hetforest/corpus.hpp"
#include "hetforest/evalreport.hpp"

namespace hetforest {

struct EvalSettings {
    /// 0: use the moderate tier's seq_len.
    std::size_t document_tokens = 0;
    bool reset_per_document = true;
    /// "final" or "branch" checkpoints.
    std::string step = "final";
    /// 0: latest completed iteration.
    int iteration = 0;
};

struct ExperimentConfig {
    std::string setup = "desk";
    Scenario scenario = Scenario::MHoIHo;
    /// Reference architecture per tier; Moderate is always required.
    std::map<Tier, ExpertConfig> tier_configs;
    int iter_m = 600;
    int granularity = kDefaultGranularity;
    double tolerance = kDefaultBudgetTolerance;
    double branch_ratio = kDefaultBranchRatio;

    std::filesystem::path registry;
    /// Empty: pretrain on the concatenated train splits of all trained domains.
    std::filesystem::path pretrain_corpus;
    TrainSchedule pretrain_schedule;
    TrainSchedule domain_schedule;

    std::uint64_t seed = 0;
    double holdout_fraction = 0.05;
    double val_test_ratio = 0.5;
    DomainPrior prior;
    EvalSettings eval;

    std::filesystem::path out_dir = "out";
    int workers = 1;
    int kernel_threads = 1;

    /// Fully resolved form, as recorded in provenance files.
    nlohmann::json to_json() const;
    /// Structural checks plus budget verification; throws ConfigInvalid / BudgetViolation.
    void validate() const;
};

ExperimentConfig default_experiment_config();

/// Parses YAML text. Relative paths resolve against base_dir. Overrides are
/// "dotted.key=value" strings applied on top of the document (values parsed as YAML).
ExperimentConfig parse_experiment_config(const std::string& yaml_text, const std::filesystem::path& base_dir,
                                         const std::vector<std::string>& overrides = {});

/// Reads the file, applies HETFOREST_* environment overrides (HETFOREST_A__B=v
/// sets a.b) and then the explicit overrides.
ExperimentConfig load_experiment_config(const std::filesystem::path& path,
                                        const std::vector<std::string>& overrides = {});

/// HETFOREST_* variables of the current environment in override syntax, sorted.
std::vector<std::string> environment_overrides();

BudgetPlan experiment_plan(const ExperimentConfig& config);

struct LoadedDomain {
    RegistryEntry entry;
    CorpusSplit split;
};

/// Every registry domain, split with a per-domain seed derived from config.seed.
std::vector<LoadedDomain> load_domains(const ExperimentConfig& config);

/// Trains (or reloads) the seed models the plan needs and writes seeds.json.
std::map<Tier, ExpertCheckpoint> run_pretrain(const ExperimentConfig& config);

/// Assigns each trained domain a tier, per BTM iteration row, from the
/// moderate seed's validation perplexity (registry overrides win). Writes tiers.json.
std::map<std::string, Tier> run_assign_tiers(const ExperimentConfig& config);

/// Runs BTM iteration k (1-based) and rewrites forest.json. Re-running a
/// completed iteration is a no-op.
Forest run_branch_train(const ExperimentConfig& config, int iteration);

/// Highest iteration any registry domain is assigned to.
int registry_iterations(const ExperimentConfig& config);

/// Evaluates the forest at out_dir/forest.json (or forest_manifest) on every
/// registry domain's test split and writes results_path.
EvalResult run_evaluate(const ExperimentConfig& config, const std::filesystem::path& forest_manifest,
                        const std::filesystem::path& results_path);

/// pretrain, tier assignment, every BTM iteration, evaluate.
EvalResult run_pipeline(const ExperimentConfig& config);

/// Forest restricted to the experts of a past iteration ("final" or "branch").
Forest forest_at(const Forest& forest, int iteration, const std::string& step,
                 const std::filesystem::path& checkpoint_dir);

void write_provenance(const ExperimentConfig& config, const std::string& subcommand,
                      const std::vector<std::string>& overrides, const nlohmann::json& extra = {});

}  // namespace hetforest
