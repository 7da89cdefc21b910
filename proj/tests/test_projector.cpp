#include <cmath>

#include "doctest.h"
#include "dune/projector.hpp"
#include "oracles.hpp"

using namespace dune;

namespace {

ViTConfig student_config(std::size_t depth) {
    ViTConfig c;
    c.image_size = 8;
    c.patch_size = 4;
    c.channels = 1;
    c.depth = depth;
    c.dim = 8;
    c.heads = 2;
    return c;
}

TokenSet rand_tokens(std::size_t count, std::size_t dim, Rng& rng) {
    Tensor t = Tensor::zeros({count, dim});
    for (double& v : t.values()) v = rng.uniform(-1.0, 1.0);
    TokenSet z;
    z.tokens = t;
    z.grid_h = 2;
    z.grid_w = 2;
    return z;
}

void randomize_proj(ProjectorParams& p, Rng& rng) {
    for (auto& [name, t] : p.named_params("")) {
        const bool gain = name.find("ls") != std::string::npos ||
                          (name.size() > 2 && name.substr(name.size() - 2) == ".g");
        for (double& v : t.values()) v = gain ? rng.uniform(0.5, 1.5) : rng.uniform(-0.4, 0.4);
    }
}

// swap two patch rows, leaving CLS in place
TokenSet swap_patches(const TokenSet& z, std::size_t a, std::size_t b) {
    TokenSet out;
    out.tokens = z.tokens.clone();
    out.grid_h = z.grid_h;
    out.grid_w = z.grid_w;
    for (std::size_t j = 0; j < z.width(); ++j) {
        const double tmp = out.tokens(a + 1, j);
        out.tokens.at(a + 1, j) = out.tokens(b + 1, j);
        out.tokens.at(b + 1, j) = tmp;
    }
    return out;
}

} // namespace

TEST_CASE("ladder tap schedule") {
    CHECK(ladder_taps(6) == std::vector<std::size_t>{3, 6});
    CHECK(ladder_taps(4) == std::vector<std::size_t>{3, 4});
    CHECK(ladder_taps(2) == std::vector<std::size_t>{2});
    CHECK(ladder_taps(7) == std::vector<std::size_t>{3, 6, 7});
    CHECK(ladder_taps(12) == std::vector<std::size_t>{3, 6, 9, 12});
    CHECK_THROWS_AS(ladder_taps(0), ContractError);
}

TEST_CASE("token-head projector is permutation equivariant over patches") {
    Rng rng = make_stream(1, "init/proj/x");
    ProjectorParams p = init_projector(ProjectorKind::SP, student_config(2), 12, rng);
    randomize_proj(p, rng);
    Rng data_rng(2);
    TokenSet z = rand_tokens(5, 8, data_rng);
    TokenSet swapped = swap_patches(z, 0, 3);
    TokenSet out = project(p, z, {});
    TokenSet out_swapped = project(p, swapped, {});
    CHECK(out_swapped.tokens.equals_bitwise(swap_patches(out, 0, 3).tokens));
}

TEST_CASE("ladder projector is permutation equivariant over patches") {
    const ViTConfig cfg = student_config(2); // taps {2}
    Rng rng = make_stream(25, "init/proj/x");
    ProjectorParams p = init_projector(ProjectorKind::LP, cfg, 10, rng);
    randomize_proj(p, rng);
    Rng data_rng(26);
    std::vector<TokenSet> inter = {rand_tokens(5, 8, data_rng), rand_tokens(5, 8, data_rng)};
    std::vector<TokenSet> swapped = {swap_patches(inter[0], 1, 2), swap_patches(inter[1], 1, 2)};
    TokenSet out = project(p, inter.back(), inter);
    TokenSet out_swapped = project(p, swapped.back(), swapped);
    CHECK(out_swapped.tokens.equals_bitwise(swap_patches(out, 1, 2).tokens));
}

TEST_CASE("token-head projector with zero weights emits its bias everywhere") {
    Rng rng = make_stream(3, "init/proj/x");
    ProjectorParams p = init_projector(ProjectorKind::SP, student_config(2), 6, rng);
    for (double& v : p.sp.w1.values()) v = 0.0;
    for (double& v : p.sp.w2.values()) v = 0.0;
    for (double& v : p.sp.b1.values()) v = 0.0;
    for (std::size_t j = 0; j < 6; ++j) p.sp.b2.values()[j] = 0.1 * static_cast<double>(j);
    Rng data_rng(4);
    TokenSet out = project(p, rand_tokens(5, 8, data_rng), {});
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < 6; ++j) CHECK(out.tokens(i, j) == 0.1 * static_cast<double>(j));
}

TEST_CASE("token-head projector matches the oracle") {
    Rng rng = make_stream(5, "init/proj/x");
    ProjectorParams p = init_projector(ProjectorKind::SP, student_config(2), 12, rng);
    randomize_proj(p, rng);
    Rng data_rng(6);
    TokenSet z = rand_tokens(5, 8, data_rng);
    TokenSet out = project(p, z, {});
    CHECK(out.grid_h == z.grid_h);
    CHECK(out.tokens.shape()[1] == 12);
    CHECK(oracle::max_abs_diff(out.tokens, oracle::sp_ref(oracle::from_tensor(z.tokens), p)) < 1e-12);
}

TEST_CASE("ladder projector matches the oracle") {
    const ViTConfig cfg = student_config(4); // taps {3, 4}
    Rng rng = make_stream(7, "init/proj/x");
    ProjectorParams p = init_projector(ProjectorKind::LP, cfg, 10, rng);
    REQUIRE(p.tap_blocks == std::vector<std::size_t>{3, 4});
    randomize_proj(p, rng);

    Rng data_rng(8);
    std::vector<TokenSet> inter;
    for (std::size_t b = 0; b < 4; ++b) inter.push_back(rand_tokens(5, 8, data_rng));

    TokenSet out = project(p, inter.back(), inter);

    std::vector<oracle::Mat> mats;
    for (const TokenSet& t : inter) mats.push_back(oracle::from_tensor(t.tokens));
    CHECK(oracle::max_abs_diff(out.tokens, oracle::lp_ref(mats, p)) < 1e-12);
}

TEST_CASE("ladder projector equals the sum of its taps") {
    const ViTConfig cfg = student_config(4);
    Rng rng = make_stream(9, "init/proj/x");
    ProjectorParams p = init_projector(ProjectorKind::LP, cfg, 10, rng);
    randomize_proj(p, rng);
    Rng data_rng(10);
    std::vector<TokenSet> inter;
    for (std::size_t b = 0; b < 4; ++b) inter.push_back(rand_tokens(5, 8, data_rng));
    TokenSet out = project(p, inter.back(), inter);

    // single-tap projectors built from each tap head
    Tensor expect;
    for (std::size_t i = 0; i < p.tap_blocks.size(); ++i) {
        ProjectorParams single = p;
        single.tap_blocks = {p.tap_blocks[i]};
        single.taps = {p.taps[i]};
        Tensor contrib = project(single, inter.back(), inter).tokens;
        expect = i == 0 ? contrib : add(expect, contrib);
    }
    CHECK(out.tokens.equals_bitwise(expect));
}

TEST_CASE("ladder projector demands enough intermediates") {
    const ViTConfig cfg = student_config(4);
    Rng rng = make_stream(11, "init/proj/x");
    ProjectorParams p = init_projector(ProjectorKind::LP, cfg, 10, rng);
    Rng data_rng(12);
    TokenSet z = rand_tokens(5, 8, data_rng);
    CHECK_THROWS_AS(project(p, z, {}), ContractError);
    std::vector<TokenSet> short_list = {z, z};
    CHECK_THROWS_AS(project(p, z, short_list), ContractError);
}

TEST_CASE("transformer-head projector matches the oracle") {
    Rng rng = make_stream(13, "init/proj/x");
    ProjectorParams p = init_projector(ProjectorKind::TP, student_config(2), 12, rng);
    randomize_proj(p, rng);
    Rng data_rng(14);
    TokenSet z = rand_tokens(5, 8, data_rng);
    TokenSet out = project(p, z, {});
    CHECK(oracle::max_abs_diff(out.tokens, oracle::tp_ref(oracle::from_tensor(z.tokens), p)) < 1e-10);
}

TEST_CASE("transformer-head projector collapses to its linear head when the residual branches are zeroed") {
    Rng rng = make_stream(27, "init/proj/x");
    ProjectorParams p = init_projector(ProjectorKind::TP, student_config(2), 12, rng);
    randomize_proj(p, rng);
    for (double& v : p.tp_block.proj_w.values()) v = 0.0;
    for (double& v : p.tp_block.proj_b.values()) v = 0.0;
    for (double& v : p.tp_block.mlp_w2.values()) v = 0.0;
    for (double& v : p.tp_block.mlp_b2.values()) v = 0.0;
    Rng data_rng(28);
    TokenSet z = rand_tokens(5, 8, data_rng);
    TokenSet out = project(p, z, {});
    Tensor linear = add_rowvec(matmul(z.tokens, p.tp_head_w), p.tp_head_b);
    CHECK(out.tokens.equals_bitwise(linear));
}

TEST_CASE("transformer-head projector handles a single token") {
    Rng rng = make_stream(15, "init/proj/x");
    ProjectorParams p = init_projector(ProjectorKind::TP, student_config(2), 12, rng);
    randomize_proj(p, rng);
    Rng data_rng(16);
    TokenSet z = rand_tokens(1, 8, data_rng);
    z.grid_h = z.grid_w = 0;
    TokenSet out = project(p, z, {});
    CHECK(out.tokens.all_finite());
    CHECK(oracle::max_abs_diff(out.tokens, oracle::tp_ref(oracle::from_tensor(z.tokens), p)) < 1e-10);
}

TEST_CASE("transformer-head projector mixes tokens, unlike the per-token heads") {
    Rng rng = make_stream(17, "init/proj/x");
    ProjectorParams p = init_projector(ProjectorKind::TP, student_config(2), 8, rng);
    randomize_proj(p, rng);
    Rng data_rng(18);
    TokenSet z = rand_tokens(5, 8, data_rng);

    // every output row aggregates the whole token set, so perturbing one
    // patch moves all the others
    TokenSet z2;
    z2.tokens = z.tokens.clone();
    z2.grid_h = z.grid_h;
    z2.grid_w = z.grid_w;
    z2.tokens.at(4, 0) += 0.5;
    Tensor out_base = project(p, z, {}).tokens;
    Tensor out_pert = project(p, z2, {}).tokens;
    double other_rows_moved = 0.0;
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 8; ++j)
            other_rows_moved += std::abs(out_pert(i, j) - out_base(i, j));
    CHECK(other_rows_moved > 1e-6);

    // the same aggregation makes the computed output order-sensitive: a patch
    // swap commutes only up to summation rounding, never bitwise like SP/LP
    TokenSet swapped = swap_patches(z, 0, 3);
    Tensor direct = project(p, swapped, {}).tokens;
    Tensor permuted = swap_patches(project(p, z, {}), 0, 3).tokens;
    CHECK(oracle::max_abs_diff(direct, oracle::from_tensor(permuted)) < 1e-9);
    CHECK_FALSE(direct.equals_bitwise(permuted));
}

TEST_CASE("per-token heads do not mix tokens") {
    Rng rng = make_stream(19, "init/proj/x");
    ProjectorParams p = init_projector(ProjectorKind::SP, student_config(2), 8, rng);
    randomize_proj(p, rng);
    Rng data_rng(20);
    TokenSet z = rand_tokens(5, 8, data_rng);
    TokenSet z2;
    z2.tokens = z.tokens.clone();
    z2.grid_h = z.grid_h;
    z2.grid_w = z.grid_w;
    z2.tokens.at(4, 0) += 0.5;
    Tensor out_base = project(p, z, {}).tokens;
    Tensor out_pert = project(p, z2, {}).tokens;
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 8; ++j) CHECK(out_pert(i, j) == out_base(i, j));
}

TEST_CASE("identity projector passes through and checks widths") {
    ViTConfig cfg = student_config(2);
    Rng rng = make_stream(21, "init/proj/x");
    ProjectorParams p = init_projector(ProjectorKind::Identity, cfg, 8, rng);
    Rng data_rng(22);
    TokenSet z = rand_tokens(5, 8, data_rng);
    CHECK(project(p, z, {}).tokens.equals_bitwise(z.tokens));
    CHECK_THROWS_AS(init_projector(ProjectorKind::Identity, cfg, 12, rng), ConfigError);
}

TEST_CASE("projector width mismatch is rejected") {
    Rng rng = make_stream(23, "init/proj/x");
    ProjectorParams p = init_projector(ProjectorKind::SP, student_config(2), 12, rng);
    Rng data_rng(24);
    TokenSet wide = rand_tokens(5, 16, data_rng);
    CHECK_THROWS_AS(project(p, wide, {}), DimensionError);
}

TEST_CASE("projector kind strings round trip") {
    for (ProjectorKind k :
         {ProjectorKind::SP, ProjectorKind::LP, ProjectorKind::TP, ProjectorKind::Identity})
        CHECK(projector_kind_from_string(to_string(k)) == k);
    CHECK_THROWS_AS(projector_kind_from_string("mlp"), ConfigError);
}
