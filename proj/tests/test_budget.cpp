// Copyright (c) 2026, hetforest contributors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include <gtest/gtest.h>

#include "hetforest/budget.hpp"
#include "support.hpp"

using namespace hetforest;

namespace {

std::map<Tier, ExpertConfig> setup_configs(const SetupSpec& s) {
    return {{Tier::Easy, seed_table_config(s.small)},
            {Tier::Moderate, seed_table_config(s.medium)},
            {Tier::Difficult, seed_table_config(s.large)}};
}

const SetupSpec& setup_named(const std::string& name) {
    for (const auto& s : reference_setups()) {
        if (s.name == name) {
            return s;
        }
    }
    throw std::runtime_error("no setup " + name);
}

template <typename F>
ErrorCode code_of(F&& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.code();
    }
    ADD_FAILURE() << "no hetforest::Error thrown";
    return ErrorCode::IoError;
}

}  // namespace

// Feed-forward totals of the seed table, computed by hand: layers * 3 * hidden * intermediate.
TEST(FfnTotal, SeedTable) {
    EXPECT_EQ(ffn_total(seed_table_config("5M")), 3551232);
    EXPECT_EQ(ffn_total(seed_table_config("7.5M")), 5326848);
    EXPECT_EQ(ffn_total(seed_table_config("10M")), 7372800);
    EXPECT_EQ(ffn_total(seed_table_config("12.5M")), 9147600);
    EXPECT_EQ(ffn_total(seed_table_config("15M")), 11097600);
    EXPECT_EQ(ffn_total(seed_table_config("90M")), 63700992);
    EXPECT_EQ(ffn_total(seed_table_config("115M")), 84934656);
    EXPECT_EQ(ffn_total(seed_table_config("135M")), 106168320);
    EXPECT_THROW(seed_table_config("20M"), Error);
}

TEST(SeedTable, SharedVocabAndContext) {
    for (const char* label : {"5M", "7.5M", "10M", "12.5M", "15M", "90M", "115M", "135M"}) {
        const auto c = seed_table_config(label);
        EXPECT_EQ(c.vocab_size, 128000);
        EXPECT_EQ(c.seq_len, 1024);
        EXPECT_NO_THROW(c.validate());
    }
}

TEST(SolveIterations, RecoversSetupIterations) {
    for (const auto& s : reference_setups()) {
        const auto solved = solve_iterations(ffn_total(seed_table_config(s.small)),
                                             ffn_total(seed_table_config(s.medium)),
                                             ffn_total(seed_table_config(s.large)), s.iter_m, 100);
        EXPECT_EQ(solved.iter_s, s.iter_s) << s.name;
        EXPECT_EQ(solved.iter_l, s.iter_l) << s.name;
    }
}

// Deviations frozen from an exact rational evaluation of the pairwise equalities.
TEST(VerifyBudget, SetupDeviations) {
    struct Expected {
        const char* name;
        double small, large;
    };
    const Expected expected[] = {
        {"tiny-spread", 0.03666666666666667, 0.003472222222222222},
        {"tiny-close", 0.03666666666666667, 0.007421875},
        {"small-close", 0.0, 0.0},
    };
    for (const auto& e : expected) {
        const auto& s = setup_named(e.name);
        for (Scenario scen : {Scenario::MHoIHe, Scenario::MHeIHo}) {
            const auto plan = make_plan(scen, setup_configs(s), s.iter_m);
            EXPECT_EQ(plan.reference_iterations.at(Tier::Easy), s.iter_s);
            EXPECT_EQ(plan.reference_iterations.at(Tier::Difficult), s.iter_l);
            const auto r = verify_budget(plan);
            EXPECT_TRUE(r.pass);
            EXPECT_NEAR(r.small_deviation, e.small, 1e-15) << e.name;
            EXPECT_NEAR(r.large_deviation, e.large, 1e-15) << e.name;
            EXPECT_EQ(r.tolerance, 0.05);
        }
    }
}

TEST(MakePlan, ScenarioAssignments) {
    const auto& s = setup_named("tiny-spread");
    const auto cfgs = setup_configs(s);
    const auto ho = make_plan(Scenario::MHoIHo, {{Tier::Moderate, cfgs.at(Tier::Moderate)}}, 400);
    const auto ihe = make_plan(Scenario::MHoIHe, cfgs, 400);
    const auto mhe = make_plan(Scenario::MHeIHo, cfgs, 400);
    for (Tier t : kAllTiers) {
        EXPECT_EQ(ho.assignments.at(t).config, cfgs.at(Tier::Moderate));
        EXPECT_EQ(ho.assignments.at(t).iterations, 400);
        EXPECT_EQ(ihe.assignments.at(t).config, cfgs.at(Tier::Moderate));
        EXPECT_EQ(mhe.assignments.at(t).config, cfgs.at(t));
        EXPECT_EQ(mhe.assignments.at(t).iterations, 400);
    }
    EXPECT_EQ(ihe.assignments.at(Tier::Easy).iterations, 200);
    EXPECT_EQ(ihe.assignments.at(Tier::Difficult).iterations, 600);
    const auto rho = verify_budget(ho);
    EXPECT_EQ(rho.small_deviation, 0.0);
    EXPECT_EQ(rho.total_compute, 3.0 * 7372800.0 * 400.0);
    // All three scenarios spend the same compute up to the budget tolerance.
    for (const auto& p : {ihe, mhe}) {
        const double total = verify_budget(p).total_compute;
        EXPECT_LE(std::abs(total - rho.total_compute) / rho.total_compute, 0.05);
    }
}

TEST(MakePlan, Errors) {
    const auto cfgs = setup_configs(setup_named("tiny-spread"));
    EXPECT_EQ(code_of([&] { make_plan(Scenario::MHoIHe, {{Tier::Moderate, cfgs.at(Tier::Moderate)}}, 400); }),
              ErrorCode::InconsistentScenario);
    EXPECT_EQ(code_of([&] { make_plan(Scenario::MHoIHo, {{Tier::Easy, cfgs.at(Tier::Easy)}}, 400); }),
              ErrorCode::InconsistentScenario);
    // iter_m 150 at granularity 100: 5M needs ~72 -> 100, a 28% deviation.
    EXPECT_EQ(code_of([&] { make_plan(Scenario::MHeIHo, cfgs, 150); }), ErrorCode::BudgetViolation);
    EXPECT_EQ(code_of([] { solve_iterations(0, 1, 1, 400); }), ErrorCode::ZeroFfn);
    EXPECT_EQ(code_of([] { solve_iterations(1, 1, 1, 0); }), ErrorCode::InvalidArgument);
    BudgetPlan missing;
    EXPECT_EQ(code_of([&] { verify_budget(missing); }), ErrorCode::MissingTier);
}

TEST(RoundToGranularity, NearestMultiple) {
    EXPECT_EQ(round_to_granularity(192.67, 100), 200);
    EXPECT_EQ(round_to_granularity(149.9, 100), 100);
    EXPECT_EQ(round_to_granularity(150.0, 100), 200);
    EXPECT_EQ(round_to_granularity(3.0, 100), 100);
    EXPECT_EQ(round_to_granularity(602.08, 100), 600);
    EXPECT_THROW(round_to_granularity(10.0, 0), Error);
}

TEST(SolveIterations, PropertyScaleInvariantAndNearest) {
    Rng rng(21);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::int64_t fs = 1 + static_cast<std::int64_t>(uniform_below(rng, 1000000));
        const std::int64_t fm = 1 + static_cast<std::int64_t>(uniform_below(rng, 1000000));
        const std::int64_t fl = 1 + static_cast<std::int64_t>(uniform_below(rng, 1000000));
        const int iter_m = hetforest::testing::random_int(rng, 1, 2000);
        const int gran = hetforest::testing::random_int(rng, 1, 200);
        const auto a = solve_iterations(fs, fm, fl, iter_m, gran);
        const auto b = solve_iterations(fs * 7, fm * 7, fl * 7, iter_m, gran);
        ASSERT_EQ(a.iter_s, b.iter_s);
        ASSERT_EQ(a.iter_l, b.iter_l);
        ASSERT_EQ(a.iter_s % gran, 0);
        const double exact = iter_m * static_cast<double>(fs) / static_cast<double>(fm);
        ASSERT_GE(a.iter_s, gran);
        if (exact >= gran) {
            ASSERT_LE(std::abs(a.iter_s - exact), gran / 2.0 + 1e-9);
        }
    }
}

TEST(VerifyBudget, PropertySymmetricScaling) {
    // Scaling every config's intermediate size by the same factor leaves the deviations unchanged.
    const auto base = setup_configs(setup_named("tiny-close"));
    const auto plan = make_plan(Scenario::MHeIHo, base, 400);
    auto scaled = plan;
    for (auto& [t, c] : scaled.reference_configs) {
        c.intermediate_size *= 3;
    }
    const auto r1 = verify_budget(plan), r2 = verify_budget(scaled);
    EXPECT_NEAR(r1.small_deviation, r2.small_deviation, 1e-15);
    EXPECT_NEAR(r1.large_deviation, r2.large_deviation, 1e-15);
}

TEST(PlanJson, RoundTrip) {
    const auto plan = make_plan(Scenario::MHoIHe, setup_configs(setup_named("small-close")), 400);
    const auto j = plan_to_json(plan);
    const auto back = plan_from_json(j);
    EXPECT_EQ(plan_to_json(back), j);
    EXPECT_EQ(back.scenario, Scenario::MHoIHe);
    EXPECT_EQ(back.reference_iterations, plan.reference_iterations);
    const auto r = report_to_json(verify_budget(plan));
    EXPECT_TRUE(r.at("pass").get<bool>());
}
