#include "doctest.h"

#include "tbwm/blocks.hpp"
#include "test_support.hpp"

using namespace tbwm;
using ad::Param;
using ad::Var;

namespace {

tok::ModalitySpec continuous_spec(int n) {
    tok::ModalitySpec s;
    s.kind = tok::ModalityKind::continuous_vector;
    s.vocab_sizes = {125};
    s.token_count = n;
    return s;
}

tok::ModalitySpec grid_spec(int m, int n, std::vector<int> vocabs) {
    tok::ModalitySpec s;
    s.kind = tok::ModalityKind::categorical_2d;
    s.channels = static_cast<int>(vocabs.size());
    s.vocab_sizes = std::move(vocabs);
    s.grid_m = m;
    s.grid_n = n;
    s.token_count = m * n;
    return s;
}

}  // namespace

TEST_CASE("embed_tokens is a row lookup") {
    // one-hot table: row t = e_t
    Tensor table(5, 5);
    for (int i = 0; i < 5; ++i) table.at(i, i) = 1.0;
    Param p("table", table);
    Var out = blocks::embed_tokens({3, 1, 3}, Var::leaf(p));
    CHECK(out.rows() == 3);
    CHECK(out.cols() == 5);
    CHECK(out.value().at(0, 3) == 1.0);
    CHECK(out.value().at(1, 1) == 1.0);
    // repeated token gives identical rows
    for (int j = 0; j < 5; ++j)
        CHECK(out.value().at(0, j) == out.value().at(2, j));

    CHECK_THROWS(blocks::embed_tokens({5}, Var::leaf(p)));
}

TEST_CASE("embed_categorical_2d averages channel embeddings") {
    Rng rng(50);
    // C = 1 reduces to embed_tokens
    Param t0("t0", test::random_tensor(4, 6, rng));
    Var single = blocks::embed_categorical_2d({2, 0}, 1, std::vector<Var>{Var::leaf(t0)});
    Var plain = blocks::embed_tokens({2, 0}, Var::leaf(t0));
    CHECK(test::max_abs_diff(single.value().data(), plain.value().data(), 12) == 0.0);

    // channel embeddings v and -v cancel
    Tensor v(3, 4);
    for (int i = 0; i < v.size(); ++i) v[i] = 0.5 * (i + 1);
    Tensor nv = v.clone();
    for (int i = 0; i < nv.size(); ++i) nv[i] = -nv[i];
    Param pv("v", v), pnv("nv", nv);
    Var zero = blocks::embed_categorical_2d(
        {1, 1}, 2, std::vector<Var>{Var::leaf(pv), Var::leaf(pnv)});
    for (int i = 0; i < zero.value().size(); ++i) CHECK(zero.value()[i] == 0.0);

    // C = 4 random tables match an explicit mean oracle
    std::vector<Param> tabs;
    for (int c = 0; c < 4; ++c)
        tabs.emplace_back("t" + std::to_string(c), test::random_tensor(7, 5, rng));
    std::vector<Var> tab_vars;
    for (auto& t : tabs) tab_vars.push_back(Var::leaf(t));
    const std::vector<int> tokens{1, 2, 3, 4, 6, 0, 5, 2};  // 2 positions x 4
    Var got = blocks::embed_categorical_2d(tokens, 4, tab_vars);
    for (int p = 0; p < 2; ++p)
        for (int j = 0; j < 5; ++j) {
            double mean = 0.0;
            for (int c = 0; c < 4; ++c)
                mean += tabs[c].value.at(tokens[p * 4 + c], j);
            mean /= 4.0;
            CHECK(got.value().at(p, j) == doctest::Approx(mean).epsilon(1e-12));
        }
}

TEST_CASE("block assembly concatenates modalities in canonical order") {
    Rng rng(51);
    tok::ActionSpec act;
    act.kind = tok::ActionKind::discrete;
    act.count = 5;
    blocks::BlockEmbedder emb({continuous_spec(2), grid_spec(1, 3, {4, 3})},
                              act, 8, rng, "t");
    CHECK(emb.obs_positions() == 5);
    CHECK(emb.block_len() == 6);

    tok::TokenSequence cont;
    cont.tokens = {10, 20};
    tok::TokenSequence grid;
    grid.channels = 2;
    grid.tokens = {0, 1, 2, 2, 3, 0};
    tok::TokenSequence a;
    a.tokens = {4};

    Var block = emb.assemble_block({cont, grid}, a);
    CHECK(block.rows() == 6);
    CHECK(block.cols() == 8);

    // positions 0-1: continuous modality; 2-4: grid; 5: action
    Var obs = emb.embed_observation({cont, grid});
    for (int j = 0; j < 8; ++j) {
        CHECK(block.value().at(0, j) == obs.value().at(0, j));
        CHECK(block.value().at(4, j) == obs.value().at(4, j));
    }

    // raw path matches the autodiff path exactly
    std::vector<double> raw(6 * 8);
    emb.assemble_block_raw({cont, grid}, a, raw.data());
    CHECK(test::max_abs_diff(raw.data(), block.value().data(), 48) == 0.0);

    // deterministic across calls
    Var block2 = emb.assemble_block({cont, grid}, a);
    CHECK(test::max_abs_diff(block.value().data(), block2.value().data(), 48) == 0.0);

    // missing modality
    CHECK_THROWS(emb.embed_observation({cont}));
}

TEST_CASE("gradients flow into embedding tables") {
    Rng rng(52);
    tok::ActionSpec act;
    act.kind = tok::ActionKind::discrete;
    act.count = 3;
    blocks::BlockEmbedder emb({continuous_spec(2)}, act, 4, rng, "t");
    auto params = emb.params();
    REQUIRE(params.size() == 2);  // one obs table + action table

    tok::TokenSequence cont;
    cont.tokens = {1, 1};
    tok::TokenSequence a;
    a.tokens = {0};
    test::check_gradients(params, [&] {
        return ad::sum(ad::mul(emb.assemble_block({cont}, a),
                               emb.assemble_block({cont}, a)));
    });
}

TEST_CASE("external codebook tables are rejected for non-image modalities") {
    Rng rng(53);
    tok::ActionSpec act;
    act.kind = tok::ActionKind::discrete;
    act.count = 2;
    blocks::BlockEmbedder emb({continuous_spec(1)}, act, 4, rng, "t");
    Param cb("cb", Tensor(125, 4));
    CHECK_THROWS(emb.attach_external_table(0, &cb));
}
