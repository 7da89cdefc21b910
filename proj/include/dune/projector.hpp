#pragma once

#include <string>
#include <utility>
#include <vector>

#include "dune/vit.hpp"

namespace dune {

enum class ProjectorKind { SP, LP, TP, Identity };

std::string to_string(ProjectorKind k);
ProjectorKind projector_kind_from_string(const std::string& s); // throws ConfigError

// per-token 2-layer MLP, in_dim -> hidden -> out_dim
struct MlpHead {
    Tensor w1, b1, w2, b2;
};

struct ProjectorParams {
    ProjectorKind kind = ProjectorKind::TP;
    std::size_t in_dim = 0;
    std::size_t out_dim = 0;

    MlpHead sp;                    // SP
    std::vector<MlpHead> taps;     // LP, one head per tap point
    std::vector<std::size_t> tap_blocks; // 1-based block numbers feeding the taps
    BlockParams tp_block;          // TP
    Tensor tp_head_w, tp_head_b;   // TP final linear, in_dim -> out_dim
    std::size_t tp_heads = 1;      // attention heads inside the TP block

    std::vector<std::pair<std::string, Tensor>> named_params(const std::string& prefix) const;
    void set_trainable(bool on);
};

// Tap points for a ladder head: every third block plus the final block.
// depth 6 -> {3, 6}; depth 4 -> {3, 4}; depth 2 -> {2}.
std::vector<std::size_t> ladder_taps(std::size_t depth);

// The TP block copies the student's heads/mlp_ratio/layerscale settings.
ProjectorParams init_projector(ProjectorKind kind, const ViTConfig& student, std::size_t out_dim,
                               Rng& rng);

TokenSet sp_forward(const TokenSet& z, const ProjectorParams& p);
// `intermediates` are the per-block encoder outputs, index i = after block i+1
TokenSet lp_forward(const std::vector<TokenSet>& intermediates, const ProjectorParams& p);
TokenSet tp_forward(const TokenSet& z, const ProjectorParams& p);

// dispatch on kind; Identity requires out_dim == in_dim and passes z through
TokenSet project(const ProjectorParams& p, const TokenSet& z,
                 const std::vector<TokenSet>& intermediates);

} // namespace dune
