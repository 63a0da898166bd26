#include "doctest.h"

#include <cmath>

#include "tbwm/worldmodel.hpp"
#include "test_support.hpp"

using namespace tbwm;

namespace {

std::vector<tok::ModalitySpec> tiny_specs() {
    tok::ModalitySpec cont;
    cont.kind = tok::ModalityKind::continuous_vector;
    cont.vocab_sizes = {5};
    cont.token_count = 1;

    tok::ModalitySpec grid;
    grid.kind = tok::ModalityKind::categorical_2d;
    grid.vocab_sizes = {4, 3};
    grid.channels = 2;
    grid.grid_m = 1;
    grid.grid_n = 2;
    grid.token_count = 2;
    return {cont, grid};
}

wm::WorldModelConfig tiny_cfg() {
    wm::WorldModelConfig cfg;
    cfg.seq.d_model = 8;
    cfg.seq.layers = 1;
    cfg.seq.heads = 2;
    cfg.seq.eta_min = 2.0;
    cfg.seq.eta_max = 8.0;
    cfg.ensemble_size = 2;
    cfg.reward_bins = 16;
    return cfg;
}

tok::ActionSpec tiny_action() {
    tok::ActionSpec a;
    a.kind = tok::ActionKind::discrete;
    a.count = 3;
    return a;
}

replay::TrajectorySegment random_segment(int T,
                                         const std::vector<tok::ModalitySpec>& specs,
                                         Rng& rng) {
    replay::TrajectorySegment seg;
    for (int t = 0; t < T; ++t) {
        std::vector<tok::TokenSequence> obs(specs.size());
        for (std::size_t m = 0; m < specs.size(); ++m) {
            obs[m].modality = static_cast<int>(m);
            obs[m].channels = specs[m].channels;
            for (int j = 0; j < specs[m].token_count; ++j)
                for (int c = 0; c < specs[m].channels; ++c)
                    obs[m].tokens.push_back(
                        static_cast<int>(rng.uniform_int(specs[m].vocab(c))));
        }
        tok::TokenSequence act;
        act.tokens = {static_cast<int>(rng.uniform_int(3))};
        seg.obs.push_back(std::move(obs));
        seg.act.push_back(std::move(act));
        seg.reward.push_back(rng.normal());
        seg.done.push_back(0);
        seg.valid.push_back(1);
    }
    return seg;
}

}  // namespace

TEST_CASE("jsd matches the direct definition") {
    // identical members -> 0
    std::vector<std::vector<double>> same{{0.25, 0.75}, {0.25, 0.75}};
    CHECK(wm::jsd(same) == doctest::Approx(0.0).epsilon(1e-15));

    // two disjoint one-hots -> ln 2
    std::vector<std::vector<double>> disjoint{{1.0, 0.0}, {0.0, 1.0}};
    CHECK(wm::jsd(disjoint) == doctest::Approx(std::log(2.0)).epsilon(1e-12));

    // random ensembles vs the H(mean) - mean(H) oracle
    Rng rng(60);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<std::vector<double>> dists(4, std::vector<double>(8));
        for (auto& d : dists) {
            double s = 0.0;
            for (auto& p : d) {
                p = rng.uniform() + 1e-4;
                s += p;
            }
            for (auto& p : d) p /= s;
        }
        double hm = 0.0, mh = 0.0;
        for (int k = 0; k < 8; ++k) {
            double m = 0.0;
            for (const auto& d : dists) m += d[k] / 4.0;
            hm -= m * std::log(m);
        }
        for (const auto& d : dists) {
            double h = 0.0;
            for (double p : d) h -= p * std::log(p);
            mh += h / 4.0;
        }
        CHECK(wm::jsd(dists) == doctest::Approx(hm - mh).epsilon(1e-10));
        CHECK(wm::jsd(dists) >= 0.0);
        CHECK(wm::jsd(dists) <= std::log(4.0) + 1e-12);
    }

    CHECK_THROWS(wm::jsd(std::vector<std::vector<double>>{{1.0}}));
    std::vector<std::vector<double>> bad{{1.0, 0.0}, {1.0}};
    CHECK_THROWS(wm::jsd(bad));
}

TEST_CASE("disagreement signal averages per-token JSD") {
    // all members identical -> 0
    wm::TokenDistributions member(3);
    for (auto& pos : member) pos = {{0.5, 0.5}};
    std::vector<wm::TokenDistributions> members(4, member);
    CHECK(wm::disagreement_signal(members) == 0.0);

    // maximally disagreeing one-hots at every position, N=4, vocab 4 -> ln 4
    std::vector<wm::TokenDistributions> onehots(4);
    for (int m = 0; m < 4; ++m) {
        onehots[m].resize(2);
        for (auto& pos : onehots[m]) {
            std::vector<double> d(4, 0.0);
            d[m] = 1.0;
            pos = {d};
        }
    }
    CHECK(wm::disagreement_signal(onehots) ==
          doctest::Approx(std::log(4.0)).epsilon(1e-12));

    // bound: u <= mean ln(vocab) over random ensembles
    Rng rng(61);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<wm::TokenDistributions> ms(4);
        for (auto& td : ms) {
            td.resize(3);
            for (auto& pos : td) {
                std::vector<double> d(5);
                double s = 0.0;
                for (auto& p : d) {
                    p = rng.uniform();
                    s += p;
                }
                for (auto& p : d) p /= s;
                pos = {d};
            }
        }
        CHECK(wm::disagreement_signal(ms) <= std::log(5.0) + 1e-9);
    }
}

TEST_CASE("mix_rewards is the stated linear combination") {
    CHECK(wm::mix_rewards(0.3, 1.0, 1.0, 1.0) == doctest::Approx(1.3));
    CHECK(wm::mix_rewards(0.5, 2.0, 1.0, 100.0) == doctest::Approx(200.5));
    CHECK(wm::mix_rewards(0.5, 2.0, 0.0, 1.0) == doctest::Approx(2.0));
}

TEST_CASE("wm loss: uniform predictions cost ln(vocab), perfect ones cost 0") {
    Rng rng(62);
    auto specs = tiny_specs();
    wm::WorldModel model(tiny_cfg(), specs, tiny_action(), rng);

    // zero out every parameter: all logits become 0 -> uniform distributions
    for (ad::Param* p : model.params()) p->value.fill(0.0);

    replay::TrajectorySegment seg = random_segment(2, specs, rng);
    seg.reward = {0.0, 0.0};
    auto out = model.loss({seg, seg});

    // obs loss per step: (1/K) * [ln 5 + (ln 4 + ln 3) * 2 positions]
    const double per_step =
        (std::log(5.0) + 2 * (std::log(4.0) + std::log(3.0))) / 3.0;
    CHECK(out.obs == doctest::Approx(2 * per_step).epsilon(1e-9));
    CHECK(out.done == doctest::Approx(2 * std::log(2.0)).epsilon(1e-9));
    // ensemble heads are also uniform: same obs loss once per example
    CHECK(out.ensemble == doctest::Approx(2 * per_step).epsilon(1e-9));
    // decomposition: total = obs + reward + done + ensemble
    CHECK(out.total_value ==
          doctest::Approx(out.obs + out.reward + out.done + out.ensemble)
              .epsilon(1e-10));
    // per-example values match the batch mean
    CHECK((out.per_example[0] + out.per_example[1]) / 2.0 ==
          doctest::Approx(out.total_value).epsilon(1e-10));
}

TEST_CASE("wm loss matches a hand-rolled per-token summation oracle") {
    Rng rng(63);
    auto specs = tiny_specs();
    auto cfg = tiny_cfg();
    wm::WorldModel model(cfg, specs, tiny_action(), rng);
    model.sync_raw();

    const int T = 2;
    std::vector<replay::TrajectorySegment> batch{random_segment(T, specs, rng),
                                                 random_segment(T, specs, rng)};
    auto out = model.loss(batch);

    // oracle: replay the raw engine sequentially per example
    const auto& raw = model.raw();
    const int K = model.obs_positions();
    const int len = model.block_len();
    const int d = cfg.seq.d_model;
    double total_oracle = 0.0;
    for (std::size_t e = 0; e < batch.size(); ++e) {
        double example_loss = 0.0;
        auto st = raw.stack->make_state();
        std::vector<double> block(static_cast<std::size_t>(len) * d);
        std::vector<double> bout(block.size());
        std::vector<double> uout(static_cast<std::size_t>(K) * d);
        for (int t = 0; t < T; ++t) {
            // obs loss for step t from the state before block t
            raw.stack->pop_forward(st, raw.u.data(), K, 0, uout.data());
            const auto dists = model.predict_obs_tokens(uout.data(), K);
            double ce = 0.0;
            int pos = 0;
            for (std::size_t m = 0; m < specs.size(); ++m) {
                for (int j = 0; j < specs[m].token_count; ++j) {
                    for (int c = 0; c < specs[m].channels; ++c) {
                        const int tok =
                            batch[e].obs[t][m].tokens[j * specs[m].channels + c];
                        ce -= std::log(dists[pos + j][c][tok]);
                    }
                }
                pos += specs[m].token_count;
            }
            example_loss += ce / K;
            // ensemble member for this contiguous shard (B=2, N=2)
            {
                const auto ens = model.predict_ensemble_tokens(uout.data(), K);
                const auto& member = ens[e];  // member e owns example e here
                double ece = 0.0;
                int p2 = 0;
                for (std::size_t m = 0; m < specs.size(); ++m) {
                    for (int j = 0; j < specs[m].token_count; ++j)
                        for (int c = 0; c < specs[m].channels; ++c) {
                            const int tok =
                                batch[e].obs[t][m].tokens[j * specs[m].channels + c];
                            ece -= std::log(member[p2 + j][c][tok]);
                        }
                    p2 += specs[m].token_count;
                }
                example_loss += ece / K;
            }
            // reward/done from the state after block t
            model.embedder().assemble_block_raw(batch[e].obs[t], batch[e].act[t],
                                                block.data());
            raw.stack->forward_chunk(st, block.data(), len, bout.data());
            std::vector<double> last(d);
            raw.stack->pop_forward(st, raw.u.data() + (K - 1) * d, 1, K - 1,
                                   last.data());
            std::vector<double> rlogits(cfg.reward_bins);
            raw.reward_head.forward(last.data(), 1, rlogits.data());
            example_loss += rac::hl_gauss_loss(rlogits, batch[e].reward[t],
                                               model.bins(), cfg.sigma);
            double dl[2];
            raw.done_head.forward(last.data(), 1, dl);
            const double mx = std::max(dl[0], dl[1]);
            const double z = std::exp(dl[0] - mx) + std::exp(dl[1] - mx);
            const int target = batch[e].done[t];
            example_loss -= dl[target] - mx - std::log(z);
        }
        CHECK(out.per_example[e] == doctest::Approx(example_loss).epsilon(1e-8));
        total_oracle += example_loss;
    }
    CHECK(out.total_value == doctest::Approx(total_oracle / 2.0).epsilon(1e-8));
}

TEST_CASE("ensemble gradients never reach the backbone") {
    Rng rng(64);
    auto specs = tiny_specs();
    wm::WorldModel model(tiny_cfg(), specs, tiny_action(), rng);
    auto backbone = model.backbone_params();
    auto ensemble = model.ensemble_params();
    zero_grads(model.params());

    std::vector<replay::TrajectorySegment> batch{
        random_segment(2, specs, rng), random_segment(2, specs, rng)};
    auto out = model.loss(batch);

    // isolate the ensemble contribution: total minus the backbone terms.
    // Instead, check directly: backward of the full loss, then verify that
    // zeroing ensemble params and relosing changes nothing in backbone grads.
    ad::backward(out.total);
    std::vector<double> backbone_grads;
    for (ad::Param* p : backbone)
        for (std::int64_t i = 0; i < p->grad.size(); ++i)
            backbone_grads.push_back(p->grad[i]);

    // scale all ensemble parameters; if ensemble terms leaked into the
    // backbone, its gradients would change
    for (ad::Param* p : ensemble)
        for (std::int64_t i = 0; i < p->value.size(); ++i) p->value[i] *= 3.0;
    zero_grads(model.params());
    auto out2 = model.loss(batch);
    ad::backward(out2.total);
    std::size_t idx = 0;
    double max_diff = 0.0;
    for (ad::Param* p : backbone)
        for (std::int64_t i = 0; i < p->grad.size(); ++i)
            max_diff = std::max(max_diff,
                                std::abs(p->grad[i] - backbone_grads[idx++]));
    CHECK(max_diff <= 1e-12);
}

TEST_CASE("wm loss gradients match finite differences on a micro network") {
    Rng rng(65);
    auto specs = tiny_specs();
    auto cfg = tiny_cfg();
    wm::WorldModel model(cfg, specs, tiny_action(), rng);
    std::vector<replay::TrajectorySegment> batch{
        random_segment(2, specs, rng), random_segment(2, specs, rng)};

    // The ensemble contribution is non-differentiable into the backbone by
    // construction (stop-gradient), so finite differences are taken on the
    // matching differentiable component: obs+reward+done terms for backbone
    // parameters, the ensemble term for ensemble parameters. The total's
    // analytic gradients are checked against those.
    auto params = model.params();
    std::vector<std::pair<ad::Param*, bool>> probe;  // (param, is_ensemble)
    for (ad::Param* p : params) {
        if (p->name == "seq.l0.wq" || p->name == "wm.u" ||
            p->name == "wm.reward.w2" || p->name == "wm.obs1_c1.w1" ||
            p->name == "wm.act_table")
            probe.emplace_back(p, false);
        if (p->name == "wm.ens0.obs0_c0.w2") probe.emplace_back(p, true);
    }
    REQUIRE(probe.size() == 6);
    zero_grads(params);
    auto loss = model.loss(batch);
    ad::backward(loss.total);
    const auto value_of = [&](bool ensemble_part) {
        auto out = model.loss(batch);
        return ensemble_part ? out.ensemble : out.obs + out.reward + out.done;
    };
    Rng pick(66);
    for (auto [p, is_ens] : probe) {
        for (int probe_i = 0; probe_i < 3; ++probe_i) {
            const std::int64_t i = pick.uniform_int(p->value.size());
            const double orig = p->value[i];
            const double eps = 1e-5;
            p->value[i] = orig + eps;
            const double up = value_of(is_ens);
            p->value[i] = orig - eps;
            const double dn = value_of(is_ens);
            p->value[i] = orig;
            const double fd = (up - dn) / (2 * eps);
            const double an = p->grad[i];
            CHECK(std::abs(fd - an) <=
                  1e-3 * std::max({std::abs(fd), std::abs(an), 1e-6}));
        }
    }
}

TEST_CASE("reward and termination head decoding") {
    Rng rng(67);
    auto specs = tiny_specs();
    auto cfg = tiny_cfg();
    wm::WorldModel model(cfg, specs, tiny_action(), rng);
    // zero weights: uniform reward logits on symmetric bins -> decode 0;
    // done softmax 0.5
    for (ad::Param* p : model.params()) p->value.fill(0.0);
    model.sync_raw();
    std::vector<double> feat(cfg.seq.d_model, 0.3);
    const auto [r, p_done] = model.predict_reward_termination(feat.data());
    CHECK(r == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(p_done == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("token distributions: per-position routing and normalization") {
    Rng rng(68);
    auto specs = tiny_specs();
    wm::WorldModel model(tiny_cfg(), specs, tiny_action(), rng);
    model.sync_raw();
    const int K = model.obs_positions();
    std::vector<double> y(static_cast<std::size_t>(K) * 8);
    for (auto& v : y) v = rng.normal();
    const auto dists = model.predict_obs_tokens(y.data(), K);
    REQUIRE(static_cast<int>(dists.size()) == K);
    CHECK(dists[0].size() == 1);   // continuous: one channel
    CHECK(dists[1].size() == 2);   // 2D categorical: C = 2 channels
    CHECK(dists[0][0].size() == 5);
    CHECK(dists[1][0].size() == 4);
    CHECK(dists[1][1].size() == 3);
    for (const auto& pos : dists)
        for (const auto& chan : pos) {
            double s = 0.0;
            for (double p : chan) s += p;
            CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
        }
}
