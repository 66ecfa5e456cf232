// Copyright (c) 2026, hetforest contributors
// SPDX-License-Identifier: Apache-2.0

#include "hetforest/error.hpp"
#include "hetforest/types.hpp"

namespace hetforest {

std::string_view to_string(ErrorCode code) noexcept {
    switch (code) {
        case ErrorCode::CorpusTooSmall: return "CorpusTooSmall";
        case ErrorCode::SequenceTooLong: return "SequenceTooLong";
        case ErrorCode::TooFewDomains: return "TooFewDomains";
        case ErrorCode::InvalidPerplexity: return "InvalidPerplexity";
        case ErrorCode::InvalidArgument: return "InvalidArgument";
        case ErrorCode::IoError: return "IoError";
        case ErrorCode::InvalidConfig: return "InvalidConfig";
        case ErrorCode::TokenOutOfRange: return "TokenOutOfRange";
        case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
        case ErrorCode::StepOutOfRange: return "StepOutOfRange";
        case ErrorCode::CorruptCheckpoint: return "CorruptCheckpoint";
        case ErrorCode::ZeroFfn: return "ZeroFfn";
        case ErrorCode::MissingTier: return "MissingTier";
        case ErrorCode::InconsistentScenario: return "InconsistentScenario";
        case ErrorCode::BudgetViolation: return "BudgetViolation";
        case ErrorCode::MissingSeed: return "MissingSeed";
        case ErrorCode::MissingTierExpert: return "MissingTierExpert";
        case ErrorCode::DuplicateTier: return "DuplicateTier";
        case ErrorCode::LineageMismatch: return "LineageMismatch";
        case ErrorCode::IterationFailed: return "IterationFailed";
        case ErrorCode::DimensionMismatch: return "DimensionMismatch";
        case ErrorCode::UnnormalizedExpert: return "UnnormalizedExpert";
        case ErrorCode::EmptyEval: return "EmptyEval";
        case ErrorCode::DomainSetMismatch: return "DomainSetMismatch";
        case ErrorCode::ConfigInvalid: return "ConfigInvalid";
        case ErrorCode::MissingArtifact: return "MissingArtifact";
    }
    return "Unknown";
}

std::string_view to_string(Tier tier) noexcept {
    switch (tier) {
        case Tier::Easy: return "easy";
        case Tier::Moderate: return "moderate";
        case Tier::Difficult: return "difficult";
    }
    return "unknown";
}

std::optional<Tier> parse_tier(std::string_view name) noexcept {
    for (Tier t : kAllTiers) {
        if (to_string(t) == name) {
            return t;
        }
    }
    return std::nullopt;
}

std::string_view to_string(Scenario scenario) noexcept {
    switch (scenario) {
        case Scenario::MHoIHo: return "MHoIHo";
        case Scenario::MHoIHe: return "MHoIHe";
        case Scenario::MHeIHo: return "MHeIHo";
    }
    return "unknown";
}

std::optional<Scenario> parse_scenario(std::string_view name) noexcept {
    for (Scenario s : kAllScenarios) {
        if (to_string(s) == name) {
            return s;
        }
    }
    return std::nullopt;
}

}  // namespace hetforest
