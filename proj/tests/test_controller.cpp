#include "doctest.h"

#include <cmath>
#include <sstream>

#include "tbwm/controller.hpp"
#include "test_support.hpp"

using namespace tbwm;
using ctrl::Controller;
using ctrl::ControllerConfig;
using ad::Var;

namespace {

std::vector<tok::ModalitySpec> grid_like_specs() {
    tok::ModalitySpec cont;
    cont.kind = tok::ModalityKind::continuous_vector;
    cont.vocab_sizes = {125};
    cont.token_count = 2;
    cont.bounded = true;

    tok::ModalitySpec grid;
    grid.kind = tok::ModalityKind::categorical_2d;
    grid.vocab_sizes = {4, 3};
    grid.channels = 2;
    grid.grid_m = 2;
    grid.grid_n = 2;
    grid.token_count = 4;
    return {cont, grid};
}

ControllerConfig small_cfg() {
    ControllerConfig cfg;
    cfg.latent_dim = 16;
    cfg.fusion_hidden = {24};
    cfg.cat_embed_dim = 8;
    cfg.value_bins = 16;
    return cfg;
}

std::vector<tok::TokenSequence> random_obs(Rng& rng) {
    tok::TokenSequence cont;
    cont.tokens = {static_cast<int>(rng.uniform_int(125)),
                   static_cast<int>(rng.uniform_int(125))};
    tok::TokenSequence grid;
    grid.channels = 2;
    for (int p = 0; p < 4; ++p) {
        grid.tokens.push_back(static_cast<int>(rng.uniform_int(4)));
        grid.tokens.push_back(static_cast<int>(rng.uniform_int(3)));
    }
    return {cont, grid};
}

}  // namespace

TEST_CASE("lambda returns: worked example and degenerate cases") {
    // H=3, gamma=0.5, lambda=0.5, r=(1,1,.), V=(.,2,4) -> G=(2.25,3,4)
    const auto g = ctrl::lambda_returns({1.0, 1.0, 0.0}, {0, 0, 0},
                                        {0.0, 2.0, 4.0}, 0.5, 0.5);
    CHECK(g[0] == doctest::Approx(2.25).epsilon(1e-12));
    CHECK(g[1] == doctest::Approx(3.0).epsilon(1e-12));
    CHECK(g[2] == doctest::Approx(4.0).epsilon(1e-12));

    // termination zeroes the bootstrap
    const auto gd = ctrl::lambda_returns({0.7, 9.0, 9.0}, {1, 0, 0},
                                         {5.0, 5.0, 5.0}, 0.9, 0.9);
    CHECK(gd[0] == doctest::Approx(0.7).epsilon(1e-12));

    // lambda = 0 collapses to one-step bootstrap
    const auto g0 = ctrl::lambda_returns({1.0, 2.0, 3.0}, {0, 0, 0},
                                         {10.0, 20.0, 30.0}, 0.5, 0.0);
    CHECK(g0[0] == doctest::Approx(1.0 + 0.5 * 20.0).epsilon(1e-12));
    CHECK(g0[1] == doctest::Approx(2.0 + 0.5 * 30.0).epsilon(1e-12));

    CHECK_THROWS(ctrl::lambda_returns({1.0}, {0, 0}, {1.0}, 0.9, 0.9));
}

TEST_CASE("lambda returns match an independent forward-sum oracle") {
    // oracle: G_t = (1-lambda) sum_{n>=1} lambda^{n-1} G_t^{(n)} truncated at
    // the horizon, where the tail weight collapses onto the final bootstrap
    Rng rng(80);
    for (int trial = 0; trial < 200; ++trial) {
        const int H = 1 + static_cast<int>(rng.uniform_int(32));
        std::vector<double> r(H), v(H);
        std::vector<std::uint8_t> d(H, 0);
        for (int t = 0; t < H; ++t) {
            r[t] = rng.normal();
            v[t] = rng.normal();
            if (rng.bernoulli(0.15)) d[t] = 1;  // terminations anywhere
        }
        const double gamma = rng.uniform(0.5, 1.0);
        const double lambda = rng.uniform(0.0, 1.0);
        const auto got = ctrl::lambda_returns(r, d, v, gamma, lambda);

        // forward triangular expansion of the recursion:
        // G_t = sum_{k=t}^{H-2} P(t,k) (r_k + gamma (1-d_k)(1-lambda) V_{k+1})
        //     + P(t,H-1) G_{H-1}
        // with P(t,k) = prod_{j=t}^{k-1} gamma lambda (1-d_j)
        const double tail = v[H - 1];
        for (int t = 0; t < H; ++t) {
            double expected = 0.0;
            double prod = 1.0;
            for (int k = t; k + 1 < H; ++k) {
                expected +=
                    prod * (r[k] + gamma * (1.0 - d[k]) * (1.0 - lambda) * v[k + 1]);
                prod *= gamma * lambda * (1.0 - d[k]);
            }
            expected += prod * tail;
            CHECK(std::abs(expected - got[t]) <=
                  1e-10 * std::max(1.0, std::abs(expected)));
        }
    }
}

TEST_CASE("percentile and return scale tracker") {
    CHECK(ctrl::percentile({1.0, 2.0, 3.0, 4.0}, 0.0) == 1.0);
    CHECK(ctrl::percentile({1.0, 2.0, 3.0, 4.0}, 100.0) == 4.0);
    CHECK(ctrl::percentile({4.0, 1.0, 3.0, 2.0}, 50.0) == doctest::Approx(2.5));

    ctrl::ReturnScaleTracker tr(500);
    CHECK(tr.scale() == 1.0);  // empty window

    // all returns identical -> spread 0 -> scale floors at 1
    tr.update(std::vector<double>(32, 7.5));
    CHECK(tr.scale() == 1.0);

    // uniform on [0, 100]: p97.5 - p2.5 approx 95
    ctrl::ReturnScaleTracker tr2(500);
    Rng rng(81);
    for (int b = 0; b < 100; ++b) {
        std::vector<double> batch(256);
        for (auto& v : batch) v = rng.uniform(0.0, 100.0);
        tr2.update(batch);
    }
    CHECK(tr2.scale() == doctest::Approx(95.0).epsilon(0.06));

    // window eviction beyond the configured size
    ctrl::ReturnScaleTracker tr3(3);
    tr3.update({0.0, 1000.0});
    for (int i = 0; i < 3; ++i) tr3.update({5.0, 5.0});
    CHECK(tr3.scale() == 1.0);  // the wide batch fell out of the window
    CHECK(tr3.size() == 3);

    // save/load round trip
    std::stringstream ss;
    tr2.save(ss);
    ctrl::ReturnScaleTracker tr4(1);
    tr4.load(ss);
    CHECK(tr4.scale() == tr2.scale());
}

TEST_CASE("zero-weight controller: uniform policy, zero value") {
    Rng rng(82);
    auto specs = grid_like_specs();
    tok::ActionSpec act;
    act.kind = tok::ActionKind::discrete;
    act.count = 5;
    Controller c(small_cfg(), specs, act, rng);
    for (ad::Param* p : c.params()) p->value.fill(0.0);

    auto state = c.initial_state(1);
    auto out = c.step(state, {random_obs(rng)}, {});
    for (int j = 0; j < 5; ++j)
        CHECK(out.actor_logits.value()[j] == 0.0);
    const auto values = c.decode_values(out.value_logits);
    CHECK(values[0] == doctest::Approx(0.0).epsilon(1e-12));

    // same inputs from the same state give identical outputs
    Rng r1(5);
    auto obs = random_obs(r1);
    auto o1 = c.step(state, {obs}, {});
    auto o2 = c.step(state, {obs}, {});
    CHECK(test::max_abs_diff(o1.actor_logits.value().data(),
                             o2.actor_logits.value().data(), 5) == 0.0);
}

TEST_CASE("continuous policies emit per-dimension 51-way grids") {
    Rng rng(83);
    tok::ModalitySpec cont;
    cont.kind = tok::ModalityKind::continuous_vector;
    cont.vocab_sizes = {125};
    cont.token_count = 2;
    tok::ActionSpec act;
    act.kind = tok::ActionKind::continuous;
    act.count = 3;
    act.quant_values = 51;
    Controller c(small_cfg(), {cont}, act, rng);

    auto state = c.initial_state(1);
    tok::TokenSequence obs;
    obs.tokens = {10, 20};
    auto out = c.step(state, {{obs}}, {});
    CHECK(out.actor_logits.cols() == 3 * 51);

    auto sampled = c.sample_actions(out.actor_logits, 1.0, rng);
    CHECK(sampled.tokens[0].tokens.size() == 3);
    CHECK(sampled.actions[0].continuous.size() == 3);
    for (double v : sampled.actions[0].continuous) {
        CHECK(v >= -1.0);
        CHECK(v <= 1.0);
    }
}

TEST_CASE("sampling: argmax limit, uniform probabilities, entropy") {
    Rng rng(84);
    tok::ModalitySpec cont;
    cont.kind = tok::ModalityKind::continuous_vector;
    cont.vocab_sizes = {125};
    cont.token_count = 1;
    tok::ActionSpec act;
    act.kind = tok::ActionKind::discrete;
    act.count = 51;
    Controller c(small_cfg(), {cont}, act, rng);

    Tensor logits(1, 51);
    for (int j = 0; j < 51; ++j) logits.at(0, j) = 0.01 * j;
    // temperature -> 0 picks the argmax deterministically
    for (int i = 0; i < 20; ++i) {
        auto s = c.sample_actions(ad::Var::constant(logits), 1e-6, rng);
        CHECK(s.tokens[0].tokens[0] == 50);
    }

    // uniform logits: empirical distribution near uniform, entropy = ln 51
    Tensor flat(1, 51);
    auto s = c.sample_actions(ad::Var::constant(flat), 1.0, rng);
    CHECK(s.entropy.value()[0] == doctest::Approx(std::log(51.0)).epsilon(1e-12));
    CHECK(s.log_prob.value()[0] == doctest::Approx(-std::log(51.0)).epsilon(1e-12));

    std::vector<int> counts(51, 0);
    const int draws = 100000;
    for (int i = 0; i < draws; ++i) {
        auto si = c.sample_actions(ad::Var::constant(flat), 1.0, rng);
        counts[si.tokens[0].tokens[0]]++;
    }
    double emp_entropy = 0.0;
    for (int cnt : counts) {
        const double p = static_cast<double>(cnt) / draws;
        if (cnt > 0) emp_entropy -= p * std::log(p);
    }
    CHECK(emp_entropy == doctest::Approx(std::log(51.0)).epsilon(0.01));
}

TEST_CASE("policy loss: zero advantage means zero gradient") {
    Rng rng(85);
    tok::ModalitySpec cont;
    cont.kind = tok::ModalityKind::continuous_vector;
    cont.vocab_sizes = {125};
    cont.token_count = 1;
    tok::ActionSpec act;
    act.kind = tok::ActionKind::discrete;
    act.count = 4;
    ControllerConfig cfg = small_cfg();
    cfg.entropy_weight = 0.0;
    Controller c(cfg, {cont}, act, rng);
    auto params = c.params();
    zero_grads(params);

    auto state = c.initial_state(2);
    tok::TokenSequence obs;
    obs.tokens = {5};
    auto out = c.step(state, {{obs}, {obs}}, {});
    auto sampled = c.sample_actions(out.actor_logits, 1.0, rng);
    std::vector<std::vector<double>> adv{{0.0, 0.0}};
    std::vector<std::vector<double>> mask{{1.0, 1.0}};
    auto loss = c.policy_loss({sampled.log_prob}, {sampled.entropy}, adv, mask,
                              1.0);
    ad::backward(loss);
    double norm = 0.0;
    for (ad::Param* p : params)
        for (std::int64_t i = 0; i < p->grad.size(); ++i)
            norm += p->grad[i] * p->grad[i];
    CHECK(norm == doctest::Approx(0.0).epsilon(1e-18));
}

TEST_CASE("advantage normalization invariance at the gradient level") {
    Rng rng(86);
    tok::ModalitySpec cont;
    cont.kind = tok::ModalityKind::continuous_vector;
    cont.vocab_sizes = {125};
    cont.token_count = 1;
    tok::ActionSpec act;
    act.kind = tok::ActionKind::discrete;
    act.count = 4;
    ControllerConfig cfg = small_cfg();
    cfg.entropy_weight = 0.0;
    Controller c(cfg, {cont}, act, rng);
    auto params = c.params();

    tok::TokenSequence obs;
    obs.tokens = {5};
    const auto run = [&](double adv_scale, double c_scale) {
        zero_grads(params);
        auto state = c.initial_state(2);
        auto out = c.step(state, {{obs}, {obs}}, {});
        Rng srng(7);
        auto sampled = c.sample_actions(out.actor_logits, 1.0, srng);
        std::vector<std::vector<double>> adv{{1.7 * adv_scale, -0.9 * adv_scale}};
        std::vector<std::vector<double>> mask{{1.0, 1.0}};
        auto loss = c.policy_loss({sampled.log_prob}, {sampled.entropy}, adv,
                                  mask, c_scale);
        ad::backward(loss);
        std::vector<double> grads;
        for (ad::Param* p : params)
            for (std::int64_t i = 0; i < p->grad.size(); ++i)
                grads.push_back(p->grad[i]);
        return grads;
    };
    const auto g1 = run(1.0, 3.0);
    const auto g2 = run(10.0, 30.0);  // advantages and c scaled together
    double max_rel = 0.0;
    for (std::size_t i = 0; i < g1.size(); ++i) {
        const double denom = std::max({std::abs(g1[i]), std::abs(g2[i]), 1e-12});
        max_rel = std::max(max_rel, std::abs(g1[i] - g2[i]) / denom);
    }
    CHECK(max_rel <= 1e-9);
}

TEST_CASE("policy and critic loss gradients match finite differences") {
    Rng rng(87);
    tok::ModalitySpec cont;
    cont.kind = tok::ModalityKind::continuous_vector;
    cont.vocab_sizes = {125};
    cont.token_count = 1;
    tok::ActionSpec act;
    act.kind = tok::ActionKind::discrete;
    act.count = 3;
    ControllerConfig cfg = small_cfg();
    cfg.entropy_weight = 1e-2;
    Controller c(cfg, {cont}, act, rng);
    auto params = c.params();

    tok::TokenSequence obs;
    obs.tokens = {60};
    tok::TokenSequence obs2;
    obs2.tokens = {80};
    std::vector<std::vector<double>> adv{{0.8, -1.2}, {0.3, 0.5}};
    std::vector<std::vector<double>> mask{{1.0, 1.0}, {1.0, 0.0}};
    std::vector<std::vector<double>> returns{{0.5, -0.25}, {1.5, 0.0}};

    // fixed action choices so the loss is a deterministic function of params
    const std::vector<int> actions{2, 0};

    const auto forward = [&]() {
        auto state = c.initial_state(2);
        auto o1 = c.step(state, {{obs}, {obs2}}, {});
        Var lp1 = ad::select_cols(ad::log_softmax_rows(o1.actor_logits), actions);
        Var p1 = ad::softmax_rows(o1.actor_logits);
        Var ent1 = ad::scale(
            ad::sum_rows(ad::mul(p1, ad::log_softmax_rows(o1.actor_logits))),
            -1.0);
        tok::TokenSequence a1;
        a1.tokens = {actions[0]};
        tok::TokenSequence a2;
        a2.tokens = {actions[1]};
        auto o2 = c.step(o1.state, {{obs2}, {obs}}, {a1, a2});
        Var lp2 = ad::select_cols(ad::log_softmax_rows(o2.actor_logits), actions);
        Var p2v = ad::softmax_rows(o2.actor_logits);
        Var ent2 = ad::scale(
            ad::sum_rows(ad::mul(p2v, ad::log_softmax_rows(o2.actor_logits))),
            -1.0);
        Var pol = c.policy_loss({lp1, lp2}, {ent1, ent2}, adv, mask, 2.0);
        Var cri = c.critic_loss({o1.value_logits, o2.value_logits}, returns, mask);
        return ad::add(pol, cri);
    };
    test::check_gradients(params, forward, 1e-3, 1e-6, 1e-5);
}

TEST_CASE("separate backbone keeps distinct actor and critic towers") {
    Rng rng(88);
    tok::ModalitySpec cont;
    cont.kind = tok::ModalityKind::continuous_vector;
    cont.vocab_sizes = {125};
    cont.token_count = 1;
    tok::ActionSpec act;
    act.kind = tok::ActionKind::continuous;
    act.count = 1;
    ControllerConfig cfg = small_cfg();
    cfg.shared_backbone = false;
    Controller c(cfg, {cont}, act, rng);
    CHECK(c.num_towers() == 2);
    auto state = c.initial_state(1);
    CHECK(state.towers.size() == 2);
    tok::TokenSequence obs;
    obs.tokens = {33};
    auto out = c.step(state, {{obs}}, {});
    CHECK(out.actor_logits.cols() == 51);
    CHECK(out.value_logits.cols() == 16);
}
