// Copyright (c) 2026, hetforest contributors
// SPDX-License-Identifier: Apache-2.0

#include "hetforest/budget.hpp"

#include <cmath>

#include "hetforest/checkpoint.hpp"
#include "hetforest/error.hpp"

namespace hetforest {

std::int64_t ffn_total(const ExpertConfig& c) noexcept {
    return static_cast<std::int64_t>(c.num_layers) * 3 * c.hidden_size * c.intermediate_size;
}

int round_to_granularity(double value, int granularity) {
    if (granularity <= 0) {
        throw Error(ErrorCode::InvalidArgument, "granularity must be positive");
    }
    const double granules = std::round(value / granularity);
    return static_cast<int>(std::max(1.0, granules)) * granularity;
}

SolvedIterations solve_iterations(std::int64_t ffn_s, std::int64_t ffn_m, std::int64_t ffn_l, int iter_m,
                                  int granularity) {
    if (ffn_s <= 0 || ffn_m <= 0 || ffn_l <= 0) {
        throw Error(ErrorCode::ZeroFfn, "FFN totals must be positive");
    }
    if (iter_m <= 0) {
        throw Error(ErrorCode::InvalidArgument, "iter_m must be positive");
    }
    const double m = static_cast<double>(ffn_m);
    return {round_to_granularity(iter_m * (static_cast<double>(ffn_s) / m), granularity),
            round_to_granularity(iter_m * (static_cast<double>(ffn_l) / m), granularity)};
}

BudgetReport verify_budget(const BudgetPlan& plan) {
    for (Tier t : kAllTiers) {
        if (!plan.reference_configs.count(t) || !plan.reference_iterations.count(t)) {
            throw Error(ErrorCode::MissingTier, "plan has no reference for tier " + std::string(to_string(t)));
        }
    }
    const double fs = static_cast<double>(ffn_total(plan.reference_configs.at(Tier::Easy)));
    const double fm = static_cast<double>(ffn_total(plan.reference_configs.at(Tier::Moderate)));
    const double fl = static_cast<double>(ffn_total(plan.reference_configs.at(Tier::Difficult)));
    const double is = plan.reference_iterations.at(Tier::Easy);
    const double im = plan.reference_iterations.at(Tier::Moderate);
    const double il = plan.reference_iterations.at(Tier::Difficult);

    BudgetReport r;
    r.tolerance = plan.tolerance;
    r.small_deviation = std::abs(fs * im - fm * is) / (fm * is);
    r.large_deviation = std::abs(fl * im - fm * il) / (fm * il);
    r.pass = r.small_deviation <= plan.tolerance && r.large_deviation <= plan.tolerance;
    for (const auto& [tier, a] : plan.assignments) {
        r.total_compute += static_cast<double>(ffn_total(a.config)) * a.iterations;
    }
    return r;
}

BudgetPlan make_plan(Scenario scenario, const std::map<Tier, ExpertConfig>& tier_configs, int iter_m,
                     int granularity, double tolerance) {
    if (iter_m <= 0) {
        throw Error(ErrorCode::InvalidArgument, "iter_m must be positive");
    }
    const bool needs_all = scenario != Scenario::MHoIHo;
    for (Tier t : kAllTiers) {
        if ((needs_all || t == Tier::Moderate) && !tier_configs.count(t)) {
            throw Error(ErrorCode::InconsistentScenario, std::string(to_string(scenario)) + " needs a " +
                                                             std::string(to_string(t)) + " tier config");
        }
    }
    for (const auto& [tier, cfg] : tier_configs) {
        cfg.validate();
    }

    BudgetPlan plan;
    plan.scenario = scenario;
    plan.tolerance = tolerance;
    const ExpertConfig& mid = tier_configs.at(Tier::Moderate);

    if (scenario == Scenario::MHoIHo) {
        for (Tier t : kAllTiers) {
            plan.assignments[t] = {mid, iter_m};
            plan.reference_configs[t] = mid;
            plan.reference_iterations[t] = iter_m;
        }
    } else {
        const auto solved = solve_iterations(ffn_total(tier_configs.at(Tier::Easy)), ffn_total(mid),
                                             ffn_total(tier_configs.at(Tier::Difficult)), iter_m, granularity);
        plan.reference_configs = tier_configs;
        plan.reference_iterations = {
            {Tier::Easy, solved.iter_s}, {Tier::Moderate, iter_m}, {Tier::Difficult, solved.iter_l}};
        for (Tier t : kAllTiers) {
            if (scenario == Scenario::MHoIHe) {
                plan.assignments[t] = {mid, plan.reference_iterations[t]};
            } else {
                plan.assignments[t] = {tier_configs.at(t), iter_m};
            }
        }
    }

    const auto report = verify_budget(plan);
    if (!report.pass) {
        throw Error(ErrorCode::BudgetViolation,
                    "deviations " + std::to_string(report.small_deviation) + " / " +
                        std::to_string(report.large_deviation) + " exceed tolerance " + std::to_string(tolerance));
    }
    return plan;
}

ExpertConfig seed_table_config(const std::string& label) {
    struct Row {
        const char* label;
        int hidden, intermediate, heads, layers;
    };
    static constexpr Row rows[] = {
        {"5M", 272, 1088, 8, 4},    {"7.5M", 272, 1088, 8, 6},  {"10M", 320, 1280, 10, 6},
        {"12.5M", 330, 1320, 11, 7}, {"15M", 340, 1360, 10, 8}, {"90M", 768, 2304, 12, 12},
        {"115M", 768, 3072, 12, 12}, {"135M", 768, 3840, 12, 12},
    };
    for (const auto& r : rows) {
        if (label == r.label) {
            ExpertConfig c;
            c.hidden_size = r.hidden;
            c.intermediate_size = r.intermediate;
            c.num_heads = r.heads;
            c.num_layers = r.layers;
            c.vocab_size = 128000;
            c.seq_len = 1024;
            return c;
        }
    }
    throw Error(ErrorCode::InvalidArgument, "unknown seed model size '" + label + "'");
}

const std::vector<SetupSpec>& reference_setups() {
    static const std::vector<SetupSpec> setups = {
        {"tiny-spread", "5M", "10M", "15M", 200, 400, 600},
        {"tiny-close", "7.5M", "10M", "12.5M", 300, 400, 500},
        {"small-close", "90M", "115M", "135M", 300, 400, 500},
    };
    return setups;
}

nlohmann::json plan_to_json(const BudgetPlan& plan) {
    nlohmann::json assignments = nlohmann::json::object();
    nlohmann::json references = nlohmann::json::object();
    for (const auto& [tier, a] : plan.assignments) {
        assignments[std::string(to_string(tier))] = {{"config", config_to_json(a.config)},
                                                     {"iterations", a.iterations}};
    }
    for (const auto& [tier, cfg] : plan.reference_configs) {
        nlohmann::json ref{{"config", config_to_json(cfg)}};
        if (plan.reference_iterations.count(tier)) {
            ref["iterations"] = plan.reference_iterations.at(tier);
        }
        references[std::string(to_string(tier))] = ref;
    }
    return {{"scenario", std::string(to_string(plan.scenario))},
            {"tolerance", plan.tolerance},
            {"assignments", assignments},
            {"references", references}};
}

BudgetPlan plan_from_json(const nlohmann::json& j) {
    BudgetPlan plan;
    const auto scenario = parse_scenario(j.at("scenario").get<std::string>());
    if (!scenario) {
        throw Error(ErrorCode::ConfigInvalid, "unknown scenario in plan");
    }
    plan.scenario = *scenario;
    plan.tolerance = j.at("tolerance").get<double>();
    for (const auto& [name, a] : j.at("assignments").items()) {
        const auto tier = parse_tier(name);
        if (!tier) {
            throw Error(ErrorCode::ConfigInvalid, "unknown tier '" + name + "' in plan");
        }
        plan.assignments[*tier] = {config_from_json(a.at("config")), a.at("iterations").get<int>()};
    }
    for (const auto& [name, r] : j.at("references").items()) {
        const auto tier = parse_tier(name);
        if (!tier) {
            throw Error(ErrorCode::ConfigInvalid, "unknown tier '" + name + "' in plan");
        }
        plan.reference_configs[*tier] = config_from_json(r.at("config"));
        if (r.contains("iterations")) {
            plan.reference_iterations[*tier] = r.at("iterations").get<int>();
        }
    }
    return plan;
}

nlohmann::json report_to_json(const BudgetReport& r) {
    return {{"small_deviation", r.small_deviation},
            {"large_deviation", r.large_deviation},
            {"tolerance", r.tolerance},
            {"pass", r.pass},
            {"total_compute", r.total_compute}};
}

}  // namespace hetforest
