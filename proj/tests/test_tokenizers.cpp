#include "doctest.h"

#include <cmath>
#include <numbers>

#include "tbwm/rac.hpp"
#include "tbwm/rng.hpp"
#include "tbwm/tokenizers.hpp"

using namespace tbwm;
using namespace tbwm::tok;

TEST_CASE("quantization levels layout") {
    const QuantLevels q = build_quant_levels();
    const double inner = std::log1p(std::numbers::pi);
    REQUIRE(q.vocab() == 125);
    CHECK(q.levels[62] == 0.0);
    CHECK(q.levels.front() == doctest::Approx(-6.0).epsilon(1e-15));
    CHECK(q.levels.back() == doctest::Approx(6.0).epsilon(1e-15));
    // strictly increasing and symmetric
    for (int i = 1; i < 125; ++i) CHECK(q.levels[i] > q.levels[i - 1]);
    for (int i = 0; i < 125; ++i)
        CHECK(q.levels[i] == doctest::Approx(-q.levels[124 - i]).epsilon(1e-12));
    // 63 inner levels uniform in [-ln(1+pi), ln(1+pi)] to 1e-12
    const double spacing = 2.0 * inner / 62.0;
    CHECK(spacing == doctest::Approx(0.0458415).epsilon(1e-4));
    for (int i = 0; i < 63; ++i)
        CHECK(std::abs(q.levels[31 + i] - (-inner + spacing * i)) <= 1e-12);
    CHECK(q.levels[31] == doctest::Approx(-inner).epsilon(1e-15));
    CHECK(q.levels[93] == doctest::Approx(inner).epsilon(1e-15));
}

TEST_CASE("quantize/dequantize contract") {
    const QuantLevels q = build_quant_levels();

    // exact level hit at zero
    CHECK(quantize_vector({0.0}, q, false) == std::vector<int>{62});
    CHECK(dequantize_vector({62}, q, false) == std::vector<double>{0.0});

    // nearest-neighbor against exhaustive enumeration
    Rng rng(21);
    for (int trial = 0; trial < 500; ++trial) {
        const double x = rng.normal(0.0, 30.0);
        const int got = quantize_vector({x}, q, false)[0];
        const double y = rac::symlog(x);
        int best = 0;
        double bd = std::abs(y - q.levels[0]);
        for (int i = 1; i < 125; ++i) {
            const double d = std::abs(y - q.levels[i]);
            if (d < bd) {
                bd = d;
                best = i;
            }
        }
        CHECK(got == best);
    }

    // clamp far out of range
    CHECK(quantize_vector({rac::symexp(100.0)}, q, false) ==
          std::vector<int>{124});
    CHECK(quantize_vector({-1e12}, q, false) == std::vector<int>{0});

    // token-space round trip is exact for all 125 tokens
    for (int t = 0; t < 125; ++t) {
        for (bool bounded : {false, true}) {
            const auto x = dequantize_vector({t}, q, bounded);
            CHECK(quantize_vector(x, q, bounded) == std::vector<int>{t});
        }
    }

    // reconstruction error bounded by half the local spacing (symlog space)
    for (int trial = 0; trial < 500; ++trial) {
        const double y = rng.uniform(-6.0, 6.0);
        const double x = rac::symexp(y);
        const auto t = quantize_vector({x}, q, false);
        const auto xr = dequantize_vector(t, q, false);
        const int i = t[0];
        const double lo = i > 0 ? q.levels[i] - q.levels[i - 1] : 1e9;
        const double hi = i < 124 ? q.levels[i + 1] - q.levels[i] : 1e9;
        const double local = std::min(lo, hi);
        CHECK(std::abs(rac::symlog(xr[0]) - y) <= 0.5 * std::max(lo, hi) + 1e-12);
        (void)local;
    }

    CHECK_THROWS(dequantize_vector({125}, q, false));
    CHECK_THROWS(quantize_vector({std::nan("")}, q, false));
}

TEST_CASE("2D categorical flattening is row-major and invertible") {
    ModalitySpec spec;
    spec.kind = ModalityKind::categorical_2d;
    spec.vocab_sizes = {10};
    spec.channels = 1;
    spec.grid_m = 2;
    spec.grid_n = 2;
    spec.token_count = 4;
    const auto seq = tokenize_categorical_2d({1, 2, 3, 4}, spec);
    CHECK(seq.tokens == std::vector<int>{1, 2, 3, 4});
    CHECK(detokenize_categorical_2d(seq, spec) == std::vector<int>{1, 2, 3, 4});

    ModalitySpec one;
    one.kind = ModalityKind::categorical_2d;
    one.vocab_sizes = {4, 4, 4};
    one.channels = 3;
    one.grid_m = 1;
    one.grid_n = 1;
    one.token_count = 1;
    const auto s1 = tokenize_categorical_2d({3, 0, 2}, one);
    CHECK(s1.positions() == 1);
    CHECK(s1.tokens == std::vector<int>{3, 0, 2});

    // Craftax-like shape: 9x11 grid with 4 channels -> 99 token 4-vectors
    ModalitySpec cr;
    cr.kind = ModalityKind::categorical_2d;
    cr.vocab_sizes = {37, 5, 40, 20};
    cr.channels = 4;
    cr.grid_m = 9;
    cr.grid_n = 11;
    cr.token_count = 99;
    std::vector<int> grid(9 * 11 * 4, 1);
    const auto scr = tokenize_categorical_2d(grid, cr);
    CHECK(scr.positions() == 99);
    CHECK(scr.channels == 4);

    CHECK_THROWS(tokenize_categorical_2d({1, 2, 3, 99}, spec));
}

TEST_CASE("vq_nearest matches exhaustive search and breaks ties low") {
    Codebook cb;
    cb.n = 2;
    cb.d = 2;
    cb.e = {0.0, 0.0, 1.0, 1.0};
    const double latent[2] = {0.9, 0.8};
    CHECK(vq_nearest(latent, 1, cb) == std::vector<int>{1});

    const double exact[2] = {0.0, 0.0};
    CHECK(vq_nearest(exact, 1, cb) == std::vector<int>{0});

    // equidistant -> lowest index
    const double tie[2] = {0.5, 0.5};
    CHECK(vq_nearest(tie, 1, cb) == std::vector<int>{0});

    Rng rng(22);
    for (int trial = 0; trial < 30; ++trial) {
        Codebook big;
        big.n = 1 + static_cast<int>(rng.uniform_int(64));
        big.d = 3;
        big.e.resize(static_cast<std::size_t>(big.n) * big.d);
        for (auto& v : big.e) v = rng.normal();
        std::vector<double> lat(5 * big.d);
        for (auto& v : lat) v = rng.normal();
        const auto got = vq_nearest(lat.data(), 5, big);
        for (int i = 0; i < 5; ++i) {
            int best = 0;
            double bd = 1e300;
            for (int r = 0; r < big.n; ++r) {
                double d = 0.0;
                for (int j = 0; j < big.d; ++j) {
                    const double diff = lat[i * big.d + j] - big.e[r * big.d + j];
                    d += diff * diff;
                }
                if (d < bd) {
                    bd = d;
                    best = r;
                }
            }
            CHECK(got[i] == best);
        }
    }

    Codebook empty;
    CHECK_THROWS(vq_nearest(latent, 1, empty));
}

TEST_CASE("vq_loss components") {
    // perfect reconstruction, zero residual
    const std::vector<double> obs(48, 0.5);
    auto t = vq_loss(obs, obs, {1.0, 2.0}, {1.0, 2.0});
    CHECK(t.total() == 0.0);

    // off-by-one reconstruction on a 4x4x3 image: mean convention -> 1
    std::vector<double> recon(48, -0.5);
    t = vq_loss(obs, recon, {0.0}, {0.0});
    CHECK(t.reconstruction == doctest::Approx(1.0).epsilon(1e-12));

    // codebook and commitment share the residual value
    t = vq_loss(obs, obs, {1.0, 3.0}, {2.0, 1.0});
    CHECK(t.codebook == doctest::Approx(2.5).epsilon(1e-12));
    CHECK(t.commitment == doctest::Approx(2.5).epsilon(1e-12));
    CHECK(t.total() == doctest::Approx(5.0).epsilon(1e-12));

    CHECK_THROWS(vq_loss(obs, {1.0}, {}, {}));
}

TEST_CASE("observation tokenization dispatches per modality") {
    ModalitySpec cont;
    cont.kind = ModalityKind::continuous_vector;
    cont.vocab_sizes = {125};
    cont.token_count = 3;

    ModalitySpec grid;
    grid.kind = ModalityKind::categorical_2d;
    grid.vocab_sizes = {4, 3};
    grid.channels = 2;
    grid.grid_m = 2;
    grid.grid_n = 2;
    grid.token_count = 4;

    ActionSpec act;
    act.kind = ActionKind::discrete;
    act.count = 6;

    Tokenizer tk({cont, grid}, act);
    CHECK(tk.obs_positions() == 7);

    Observation obs;
    obs.values.resize(2);
    obs.values[0].reals = {0.0, 1.5, -2.0};
    obs.values[1].ints = {0, 1, 3, 2, 1, 0, 2, 2};
    const auto seqs = tk.tokenize_observation(obs);
    REQUIRE(seqs.size() == 2);
    CHECK(seqs[0].tokens.size() == 3);
    CHECK(seqs[0].tokens[0] == 62);
    CHECK(seqs[1].positions() == 4);

    // determinism
    const auto seqs2 = tk.tokenize_observation(obs);
    CHECK(seqs[0].tokens == seqs2[0].tokens);
    CHECK(seqs[1].tokens == seqs2[1].tokens);

    // decode inverts the categorical part exactly and the continuous part
    // within quantization error
    const auto back = tk.decode_observation(seqs);
    CHECK(back.values[1].ints == obs.values[1].ints);
    for (int i = 0; i < 3; ++i)
        CHECK(rac::symlog(back.values[0].reals[i]) ==
              doctest::Approx(rac::symlog(obs.values[0].reals[i])).epsilon(0.05));

    Observation missing;
    missing.values.resize(1);
    CHECK_THROWS(tk.tokenize_observation(missing));
    CHECK_THROWS(Tokenizer({}, act));
}

TEST_CASE("action tokenization") {
    ActionSpec disc;
    disc.kind = ActionKind::discrete;
    disc.count = 6;
    ModalitySpec cont;
    cont.kind = ModalityKind::continuous_vector;
    cont.vocab_sizes = {125};
    cont.token_count = 1;
    Tokenizer tk({cont}, disc);

    ActionValue a;
    a.discrete = 3;
    CHECK(tk.tokenize_action(a).tokens == std::vector<int>{3});
    a.discrete = 6;
    CHECK_THROWS(tk.tokenize_action(a));

    ActionSpec cact;
    cact.kind = ActionKind::continuous;
    cact.count = 6;
    cact.quant_values = 51;
    Tokenizer tkc({cont}, cact);
    ActionValue ca;
    ca.continuous = {0.0, -1.0, 1.0, 0.5, -0.5, 0.02};
    const auto seq = tkc.tokenize_action(ca);
    REQUIRE(seq.tokens.size() == 6);
    CHECK(seq.tokens[0] == 25);
    CHECK(seq.tokens[1] == 0);
    CHECK(seq.tokens[2] == 50);
    const auto back = tkc.decode_action(seq);
    CHECK(back.continuous[0] == 0.0);
    CHECK(back.continuous[1] == -1.0);
    CHECK(back.continuous[2] == 1.0);

    ca.continuous = {0.0, 0.0, 0.0, 0.0, 0.0, 1.5};
    CHECK_THROWS(tkc.tokenize_action(ca));
}

TEST_CASE("action grid endpoints") {
    CHECK(action_grid_value(25, 51) == 0.0);
    CHECK(action_grid_value(0, 51) == -1.0);
    CHECK(action_grid_value(50, 51) == 1.0);
    for (int i = 0; i < 51; ++i)
        CHECK(action_grid_index(action_grid_value(i, 51), 51) == i);
}
