// Copyright (c) 2026, hetforest contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace hetforest {

enum class ErrorCode {
    // corpus
    CorpusTooSmall,
    SequenceTooLong,
    TooFewDomains,
    InvalidPerplexity,
    InvalidArgument,
    IoError,
    // tinylm
    InvalidConfig,
    TokenOutOfRange,
    NonFiniteLoss,
    StepOutOfRange,
    CorruptCheckpoint,
    // budget
    ZeroFfn,
    MissingTier,
    InconsistentScenario,
    BudgetViolation,
    // btm
    MissingSeed,
    MissingTierExpert,
    DuplicateTier,
    LineageMismatch,
    IterationFailed,
    // ensemble
    DimensionMismatch,
    UnnormalizedExpert,
    EmptyEval,
    // evalreport
    DomainSetMismatch,
    // cli
    ConfigInvalid,
    MissingArtifact,
};

std::string_view to_string(ErrorCode code) noexcept;

/// Every failure raised by the library carries one of the codes above so that
/// callers (and the CLI exit path) can dispatch without parsing messages.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

}  // namespace hetforest
