#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dune/tensor.hpp"

namespace dune {

struct ViTConfig {
    std::size_t image_size = 28;
    std::size_t patch_size = 7;
    std::size_t channels = 3;
    std::size_t depth = 4;
    std::size_t dim = 32;
    std::size_t heads = 4;
    double mlp_ratio = 4.0;
    bool qkv_bias = true;
    bool layerscale = true;
    double layerscale_init = 1e-5;
    std::size_t num_registers = 0; // must stay 0

    std::size_t grid() const { return image_size / patch_size; }
    std::size_t token_count() const { return grid() * grid() + 1; }
    std::size_t patch_dim() const { return channels * patch_size * patch_size; }
    std::size_t mlp_hidden() const {
        return static_cast<std::size_t>(mlp_ratio * static_cast<double>(dim) + 0.5);
    }
    // throws ConfigError on divisibility or register violations
    void validate() const;
};

// One CLS token plus an H x W patch grid, stored as a single [1+HW x d]
// matrix with the CLS token in row 0.
struct TokenSet {
    Tensor tokens;
    std::size_t grid_h = 0;
    std::size_t grid_w = 0;

    std::size_t count() const { return tokens.shape()[0]; }
    std::size_t width() const { return tokens.shape()[1]; }
    Tensor cls() const;     // [1 x d]
    Tensor patches() const; // [HW x d]
};

// One pre-LN residual block: x + ls1*SA(LN1(x)), then + ls2*MLP(LN2(.)).
struct BlockParams {
    Tensor ln1_gamma, ln1_beta;
    Tensor qkv_w; // [d x 3d], column layout [q | k | v], head-major inside each
    Tensor qkv_b; // [3d], empty when qkv_bias is off
    Tensor proj_w; // [d x d]
    Tensor proj_b; // [d]
    Tensor ls1;    // [d], empty when layerscale is off
    Tensor ln2_gamma, ln2_beta;
    Tensor mlp_w1; // [d x hidden]
    Tensor mlp_b1; // [hidden]
    Tensor mlp_w2; // [hidden x d]
    Tensor mlp_b2; // [d]
    Tensor ls2;    // [d]
};

struct ViTParams {
    ViTConfig config;
    Tensor patch_w; // [C*p*p x d]
    Tensor patch_b; // [d]
    Tensor cls;     // [1 x d]
    Tensor pos;     // [1+HW x d], zero-initialized, learned
    std::vector<BlockParams> blocks;
    Tensor final_gamma, final_beta;

    // fixed enumeration order; names are stable checkpoint keys
    std::vector<std::pair<std::string, Tensor>> named_params() const;
    void set_trainable(bool on);
};

// Seeded construction; identical (config, rng state) gives identical params.
ViTParams init_vit(const ViTConfig& cfg, Rng& rng);

// closed-form count, cross-checked against named_params() enumeration
std::size_t vit_param_count(const ViTConfig& cfg);

// init helpers shared with the projector heads
std::vector<std::pair<std::string, Tensor>> block_named_params(const BlockParams& b,
                                                               const std::string& prefix);
BlockParams init_block(const ViTConfig& cfg, Rng& rng);

TokenSet patch_embed(const Tensor& image, const ViTParams& p);

struct EncoderResult {
    TokenSet output;                     // after the final layernorm
    std::vector<TokenSet> block_outputs; // post-block states, pre final LN
};

EncoderResult encoder_forward(const TokenSet& in, const ViTParams& p, bool collect_intermediates);

// single block, reused by the transformer projector
Tensor block_forward(const Tensor& x, const BlockParams& b, std::size_t heads);

// post-softmax attention of one block, [heads x T x T]; rows sum to 1
Tensor attention_probabilities(const Tensor& image, const ViTParams& p, std::size_t layer_index);

// bilinear regrid of learned positional embeddings (CLS row passed through)
Tensor resize_pos_embed(const Tensor& pos, std::size_t h, std::size_t w, std::size_t h2,
                        std::size_t w2);

} // namespace dune
