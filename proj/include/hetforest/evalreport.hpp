// Copyright (c) 2026, hetforest contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "hetforest/btm.hpp"
#include "hetforest/types.hpp"

namespace hetforest {

enum class DomainKind { Trained, EvalOnly };

std::string_view to_string(DomainKind kind) noexcept;
DomainKind parse_domain_kind(std::string_view name);

struct EvalDomain {
    std::string name;
    DomainKind kind = DomainKind::Trained;
    std::span<const Token> test;
};

struct EvalOptions {
    /// Held-out text is scored in documents of this many tokens.
    std::size_t document_tokens = 128;
    /// Restart the posterior at the prior for each document.
    bool reset_per_document = true;
    int workers = 1;
};

struct EvalResult {
    std::string setup;
    Scenario scenario = Scenario::MHoIHo;
    std::map<std::string, double> perplexity;
    std::map<std::string, DomainKind> kinds;
    /// Seeds, evaluated iteration, checkpoint ids and steps.
    nlohmann::json metadata = nlohmann::json::object();
    bool operator==(const EvalResult&) const = default;
};

/// Ensemble perplexity of every domain's held-out tokens. Deterministic and
/// independent of options.workers.
EvalResult evaluate_forest(const Forest& forest, const std::vector<EvalDomain>& domains, const std::string& setup,
                           const EvalOptions& options = {});

nlohmann::json result_to_json(const EvalResult& result);
EvalResult result_from_json(const nlohmann::json& j);

/// Perplexities closer than this are reported as a shared win.
inline constexpr double kTieThreshold = 0.05;

struct DomainOutcome {
    std::string name;
    DomainKind kind = DomainKind::Trained;
    std::map<Scenario, double> perplexity;
    std::vector<Scenario> winners;  // kAllScenarios order
    /// Best non-winning perplexity minus the best; 0 when every scenario ties.
    double margin = 0.0;
    bool tie = false;
    bool operator==(const DomainOutcome&) const = default;
};

struct ComparisonReport {
    std::string setup;
    std::vector<Scenario> scenarios;  // kAllScenarios order
    std::vector<DomainOutcome> domains;  // Trained first, then EvalOnly; by name within each
    std::map<Scenario, int> trained_wins;
    std::map<Scenario, int> eval_only_wins;
    bool operator==(const ComparisonReport&) const = default;
};

/// Per-domain argmin across scenarios of one setup. Input order does not matter.
ComparisonReport compare(const std::vector<EvalResult>& results);

enum class ReportFormat { Markdown, Csv, Json };
ReportFormat parse_report_format(std::string_view name);

/// Columns are setups (in the given order) x scenarios.
std::string emit(const std::vector<ComparisonReport>& reports, ReportFormat format);

/// Inverse of emit for the lossless formats.
std::vector<ComparisonReport> reports_from_json(const std::string& text);
std::vector<ComparisonReport> reports_from_csv(const std::string& text);

}  // namespace hetforest
