#include "doctest.h"

#include <cmath>
#include <set>
#include <sstream>

#include "tbwm/env.hpp"
#include "test_support.hpp"

using namespace tbwm;
using env::ContinuousChain;
using env::MultiModalGrid;

TEST_CASE("reset is deterministic per seed; agent and goal separated") {
    MultiModalGrid g1, g2;
    const auto o1 = g1.reset(123);
    const auto o2 = g2.reset(123);
    CHECK(o1.values[0].reals == o2.values[0].reals);
    CHECK(o1.values[1].ints == o2.values[1].ints);

    Rng rng(101);
    for (int trial = 0; trial < 200; ++trial) {
        g1.reset(rng.next_u64());
        const int dist = std::abs(g1.agent_row() - g1.goal_row()) +
                         std::abs(g1.agent_col() - g1.goal_col());
        CHECK(dist >= MultiModalGrid::kMinGoalDistance);
        CHECK_FALSE(g1.hazard_at(g1.goal_row(), g1.goal_col()));
        CHECK_FALSE(g1.hazard_at(g1.agent_row(), g1.agent_col()));
    }
}

TEST_CASE("observations validate against the declared modality specs") {
    MultiModalGrid g;
    const auto obs = g.reset(5);
    const auto& specs = g.obs_specs();
    REQUIRE(specs.size() == 2);
    CHECK(specs[0].kind == tok::ModalityKind::continuous_vector);
    CHECK(specs[1].kind == tok::ModalityKind::categorical_2d);
    CHECK(obs.values[0].reals.size() == 4);
    for (double v : obs.values[0].reals) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
    CHECK(obs.values[1].ints.size() == 25 * 2);
    for (int p = 0; p < 25; ++p) {
        CHECK(obs.values[1].ints[p * 2] < 4);
        CHECK(obs.values[1].ints[p * 2 + 1] < 3);
    }
    // view is egocentric: the agent marker sits at the center cell
    CHECK(obs.values[1].ints[(2 * 5 + 2) * 2 + 1] == MultiModalGrid::kAgent);

    // tokenization accepts every emitted observation
    tok::Tokenizer tk(specs, g.action_spec());
    Rng rng(102);
    for (int e = 0; e < 20; ++e) {
        auto o = g.reset(rng.next_u64());
        bool done = false;
        while (!done) {
            const auto seqs = tk.tokenize_observation(o);
            CHECK(static_cast<int>(seqs[0].tokens.size()) == 4);
            CHECK(seqs[1].positions() == 25);
            tok::ActionValue a;
            a.discrete = static_cast<int>(rng.uniform_int(5));
            auto r = g.step(a);
            o = r.obs;
            done = r.done;
        }
    }
}

TEST_CASE("grid dynamics: walls, goal, hazards, cap, step-after-done") {
    MultiModalGrid g;
    Rng rng(103);
    // find a layout where the agent starts at the top row
    while (true) {
        g.reset(rng.next_u64());
        if (g.agent_row() == 0) break;
    }
    tok::ActionValue up;
    up.discrete = 0;
    const int r0 = g.agent_row(), c0 = g.agent_col();
    auto res = g.step(up);  // into the wall
    CHECK(g.agent_row() == r0);
    CHECK(g.agent_col() == c0);
    CHECK(res.reward == 0.0);

    // stepping onto the goal pays +1 and ends the episode
    while (true) {
        g.reset(rng.next_u64());
        bool done = false;
        double last_reward = 0.0;
        int steps = 0;
        while (!done) {
            auto a = env::grid_expert_action(g);
            auto r = g.step(a);
            last_reward = r.reward;
            done = r.done;
            ++steps;
        }
        if (steps < MultiModalGrid::kMaxSteps) {
            CHECK(last_reward == 1.0);
            break;
        }
    }
    CHECK_THROWS(g.step(up));

    // hazard cells charge -0.1 and do not end the episode
    while (true) {
        g.reset(rng.next_u64());
        int hr = -1, hc = -1;
        for (int r = 0; r < 5 && hr < 0; ++r)
            for (int c = 0; c < 5 && hr < 0; ++c)
                if (g.hazard_at(r, c) &&
                    std::abs(r - g.agent_row()) + std::abs(c - g.agent_col()) == 1)
                    hr = r, hc = c;
        if (hr < 0) continue;
        tok::ActionValue mv;
        if (hr < g.agent_row()) mv.discrete = 0;
        else if (hr > g.agent_row()) mv.discrete = 1;
        else if (hc < g.agent_col()) mv.discrete = 2;
        else mv.discrete = 3;
        auto r = g.step(mv);
        CHECK(r.reward == doctest::Approx(-0.1));
        CHECK_FALSE(r.done);
        break;
    }
}

TEST_CASE("grid learnability gap: expert >= 0.9, random <= 0.2") {
    MultiModalGrid g;
    Rng rng(104);
    double random_total = 0.0;
    for (int e = 0; e < 200; ++e) {
        g.reset(rng.next_u64());
        bool done = false;
        while (!done) {
            tok::ActionValue a;
            a.discrete = static_cast<int>(rng.uniform_int(5));
            auto r = g.step(a);
            random_total += r.reward;
            done = r.done;
        }
    }
    CHECK(random_total / 200.0 <= 0.2);

    double expert_total = 0.0;
    for (int e = 0; e < 200; ++e) {
        g.reset(rng.next_u64());
        bool done = false;
        while (!done) {
            auto r = g.step(env::grid_expert_action(g));
            expert_total += r.reward;
            done = r.done;
        }
    }
    CHECK(expert_total / 200.0 >= 0.9);
}

TEST_CASE("chain dynamics and fixed reset") {
    ContinuousChain c;
    const auto obs = c.reset(9);
    CHECK(obs.values[0].reals == std::vector<double>{0.0, 0.0});

    // action 0 from rest: velocity stays 0, position stays 0,
    // reward = clip(1 - |0 - target|) = 0 for target 1
    tok::ActionValue zero;
    zero.continuous = {0.0};
    auto r = c.step(zero);
    CHECK(c.position() == 0.0);
    CHECK(c.velocity() == 0.0);
    CHECK(r.reward == doctest::Approx(
        std::clamp(1.0 - std::abs(0.0 - ContinuousChain::kTarget), 0.0, 1.0)));

    // push right: velocity += 0.1*a - 0.01*v
    tok::ActionValue push;
    push.continuous = {1.0};
    c.reset(9);
    r = c.step(push);
    CHECK(c.velocity() == doctest::Approx(0.1));
    CHECK(c.position() == doctest::Approx(0.1));
    r = c.step(push);
    CHECK(c.velocity() == doctest::Approx(0.1 + 0.1 - 0.001));
    CHECK(c.position() == doctest::Approx(0.1 + 0.199));

    // horizon termination and step-after-done
    c.reset(10);
    for (int t = 0; t < ContinuousChain::kHorizon; ++t) {
        auto res = c.step(zero);
        CHECK(res.done == (t + 1 == ContinuousChain::kHorizon));
    }
    CHECK_THROWS(c.step(zero));

    // state stays within the clip box under extreme actions
    c.reset(11);
    for (int t = 0; t < ContinuousChain::kHorizon; ++t) {
        auto res = c.step(push);
        CHECK(std::abs(c.position()) <= 5.0);
        CHECK(std::abs(c.velocity()) <= 5.0);
        (void)res;
    }
}

TEST_CASE("env state save/load round trip") {
    MultiModalGrid g;
    Rng rng(105);
    g.reset(rng.next_u64());
    tok::ActionValue a;
    a.discrete = 3;
    g.step(a);
    std::stringstream ss;
    g.save(ss);
    MultiModalGrid g2;
    g2.load(ss);
    CHECK(g2.agent_row() == g.agent_row());
    CHECK(g2.goal_col() == g.goal_col());
    // identical continuations
    a.discrete = 1;
    auto r1 = g.step(a);
    auto r2 = g2.step(a);
    CHECK(r1.reward == r2.reward);
    CHECK(r1.obs.values[1].ints == r2.obs.values[1].ints);

    ContinuousChain c;
    c.reset(7);
    tok::ActionValue ca;
    ca.continuous = {0.5};
    c.step(ca);
    std::stringstream cs;
    c.save(cs);
    ContinuousChain c2;
    c2.load(cs);
    CHECK(c2.position() == c.position());
    CHECK(c2.velocity() == c.velocity());
}

TEST_CASE("make_env resolves ids") {
    CHECK(env::make_env("grid-v0")->id() == "grid-v0");
    CHECK(env::make_env("chain-v0")->id() == "chain-v0");
    CHECK_THROWS(env::make_env("pong-v0"));
}
