#include "dune/vit.hpp"

#include <algorithm>
#include <cmath>

namespace dune {

void ViTConfig::validate() const {
    if (image_size == 0 || patch_size == 0) throw ConfigError("image_size and patch_size must be positive");
    if (image_size % patch_size != 0) {
        throw ConfigError("image_size " + std::to_string(image_size) + " not divisible by patch_size " +
                          std::to_string(patch_size));
    }
    if (dim == 0 || heads == 0) throw ConfigError("dim and heads must be positive");
    if (dim % heads != 0) {
        throw ConfigError("dim " + std::to_string(dim) + " not divisible by heads " + std::to_string(heads));
    }
    if (channels == 0) throw ConfigError("channels must be positive");
    if (mlp_ratio <= 0.0) throw ConfigError("mlp_ratio must be positive");
    if (num_registers != 0) throw ConfigError("register tokens are not supported (num_registers must be 0)");
}

Tensor TokenSet::cls() const {
    return slice_rows(tokens, 0, 1);
}

Tensor TokenSet::patches() const {
    return slice_rows(tokens, 1, count() - 1);
}

namespace {
constexpr double kInitSigma = 0.02;
} // namespace

BlockParams init_block(const ViTConfig& cfg, Rng& rng) {
    const std::size_t d = cfg.dim;
    const std::size_t h = cfg.mlp_hidden();
    BlockParams b;
    b.ln1_gamma = Tensor::full({d}, 1.0);
    b.ln1_beta = Tensor::zeros({d});
    b.qkv_w = trunc_normal_tensor({d, 3 * d}, kInitSigma, rng);
    if (cfg.qkv_bias) b.qkv_b = Tensor::zeros({3 * d});
    b.proj_w = trunc_normal_tensor({d, d}, kInitSigma, rng);
    b.proj_b = Tensor::zeros({d});
    if (cfg.layerscale) b.ls1 = Tensor::full({d}, cfg.layerscale_init);
    b.ln2_gamma = Tensor::full({d}, 1.0);
    b.ln2_beta = Tensor::zeros({d});
    b.mlp_w1 = trunc_normal_tensor({d, h}, kInitSigma, rng);
    b.mlp_b1 = Tensor::zeros({h});
    b.mlp_w2 = trunc_normal_tensor({h, d}, kInitSigma, rng);
    b.mlp_b2 = Tensor::zeros({d});
    if (cfg.layerscale) b.ls2 = Tensor::full({d}, cfg.layerscale_init);
    return b;
}

ViTParams init_vit(const ViTConfig& cfg, Rng& rng) {
    cfg.validate();
    ViTParams p;
    p.config = cfg;
    p.patch_w = trunc_normal_tensor({cfg.patch_dim(), cfg.dim}, kInitSigma, rng);
    p.patch_b = Tensor::zeros({cfg.dim});
    p.cls = trunc_normal_tensor({1, cfg.dim}, kInitSigma, rng);
    p.pos = Tensor::zeros({cfg.token_count(), cfg.dim});
    p.blocks.reserve(cfg.depth);
    for (std::size_t i = 0; i < cfg.depth; ++i) p.blocks.push_back(init_block(cfg, rng));
    p.final_gamma = Tensor::full({cfg.dim}, 1.0);
    p.final_beta = Tensor::zeros({cfg.dim});
    return p;
}

std::vector<std::pair<std::string, Tensor>> block_named_params(const BlockParams& b,
                                                               const std::string& prefix) {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back(prefix + "ln1.g", b.ln1_gamma);
    out.emplace_back(prefix + "ln1.b", b.ln1_beta);
    out.emplace_back(prefix + "qkv.w", b.qkv_w);
    if (b.qkv_b.defined()) out.emplace_back(prefix + "qkv.b", b.qkv_b);
    out.emplace_back(prefix + "proj.w", b.proj_w);
    out.emplace_back(prefix + "proj.b", b.proj_b);
    if (b.ls1.defined()) out.emplace_back(prefix + "ls1", b.ls1);
    out.emplace_back(prefix + "ln2.g", b.ln2_gamma);
    out.emplace_back(prefix + "ln2.b", b.ln2_beta);
    out.emplace_back(prefix + "mlp.w1", b.mlp_w1);
    out.emplace_back(prefix + "mlp.b1", b.mlp_b1);
    out.emplace_back(prefix + "mlp.w2", b.mlp_w2);
    out.emplace_back(prefix + "mlp.b2", b.mlp_b2);
    if (b.ls2.defined()) out.emplace_back(prefix + "ls2", b.ls2);
    return out;
}

std::vector<std::pair<std::string, Tensor>> ViTParams::named_params() const {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("patch.w", patch_w);
    out.emplace_back("patch.b", patch_b);
    out.emplace_back("cls", cls);
    out.emplace_back("pos", pos);
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        auto bp = block_named_params(blocks[i], "block" + std::to_string(i) + ".");
        out.insert(out.end(), bp.begin(), bp.end());
    }
    out.emplace_back("final.g", final_gamma);
    out.emplace_back("final.b", final_beta);
    return out;
}

void ViTParams::set_trainable(bool on) {
    for (auto& [name, t] : named_params()) {
        (void)name;
        t.set_requires_grad(on);
    }
}

std::size_t vit_param_count(const ViTConfig& cfg) {
    const std::size_t d = cfg.dim;
    const std::size_t h = cfg.mlp_hidden();
    const std::size_t per_block = 2 * d                      // ln1
                                  + d * 3 * d                // qkv w
                                  + (cfg.qkv_bias ? 3 * d : 0)
                                  + d * d + d                // attn out proj
                                  + 2 * d                    // ln2
                                  + d * h + h + h * d + d    // mlp
                                  + (cfg.layerscale ? 2 * d : 0);
    return cfg.patch_dim() * d + d      // patch embed
           + d                          // cls
           + cfg.token_count() * d      // pos
           + cfg.depth * per_block      // blocks
           + 2 * d;                     // final ln
}

TokenSet patch_embed(const Tensor& image, const ViTParams& p) {
    const ViTConfig& cfg = p.config;
    if (image.rank() != 3 || image.shape()[0] != cfg.channels || image.shape()[1] != cfg.image_size ||
        image.shape()[2] != cfg.image_size) {
        throw DimensionError("patch_embed: image " + image.shape_str() + " vs configured " +
                             std::to_string(cfg.channels) + "x" + std::to_string(cfg.image_size) + "x" +
                             std::to_string(cfg.image_size));
    }
    Tensor flat = extract_patches(image, cfg.patch_size);            // [HW x C*p*p]
    Tensor proj = add_rowvec(matmul(flat, p.patch_w), p.patch_b);    // [HW x d]
    Tensor tokens = concat_rows({p.cls, proj});                      // [1+HW x d]
    tokens = add(tokens, p.pos);
    TokenSet z;
    z.tokens = tokens;
    z.grid_h = cfg.grid();
    z.grid_w = cfg.grid();
    return z;
}

namespace {

// post-softmax attention matrices of one block for input x, one [T x T] per head
std::vector<Tensor> attention_rows(const Tensor& x, const BlockParams& b, std::size_t heads) {
    const std::size_t d = x.shape()[1];
    const std::size_t dh = d / heads;
    Tensor y = layernorm(x, b.ln1_gamma, b.ln1_beta);
    Tensor qkv = matmul(y, b.qkv_w);
    if (b.qkv_b.defined()) qkv = add_rowvec(qkv, b.qkv_b);
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Tensor> atts;
    atts.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        Tensor q = slice_cols(qkv, h * dh, dh);
        Tensor k = slice_cols(qkv, d + h * dh, dh);
        atts.push_back(softmax(scale(matmul(q, transpose(k)), inv_sqrt_dh), 1));
    }
    return atts;
}

Tensor self_attention(const Tensor& x, const BlockParams& b, std::size_t heads) {
    const std::size_t d = x.shape()[1];
    const std::size_t dh = d / heads;
    Tensor y = layernorm(x, b.ln1_gamma, b.ln1_beta);
    Tensor qkv = matmul(y, b.qkv_w);
    if (b.qkv_b.defined()) qkv = add_rowvec(qkv, b.qkv_b);
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Tensor> head_outs;
    head_outs.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        Tensor q = slice_cols(qkv, h * dh, dh);
        Tensor k = slice_cols(qkv, d + h * dh, dh);
        Tensor v = slice_cols(qkv, 2 * d + h * dh, dh);
        Tensor att = softmax(scale(matmul(q, transpose(k)), inv_sqrt_dh), 1);
        head_outs.push_back(matmul(att, v));
    }
    Tensor merged = heads == 1 ? head_outs[0] : concat_cols(head_outs);
    return add_rowvec(matmul(merged, b.proj_w), b.proj_b);
}

} // namespace

Tensor block_forward(const Tensor& x, const BlockParams& b, std::size_t heads) {
    if (x.shape()[1] % heads != 0) {
        throw DimensionError("block_forward: width " + std::to_string(x.shape()[1]) +
                             " not divisible by heads " + std::to_string(heads));
    }
    Tensor sa = self_attention(x, b, heads);
    if (b.ls1.defined()) sa = mul_rowvec(sa, b.ls1);
    Tensor a = add(x, sa);
    Tensor y = layernorm(a, b.ln2_gamma, b.ln2_beta);
    Tensor m = add_rowvec(matmul(y, b.mlp_w1), b.mlp_b1);
    m = gelu(m);
    m = add_rowvec(matmul(m, b.mlp_w2), b.mlp_b2);
    if (b.ls2.defined()) m = mul_rowvec(m, b.ls2);
    return add(a, m);
}

EncoderResult encoder_forward(const TokenSet& in, const ViTParams& p, bool collect_intermediates) {
    if (in.width() != p.config.dim) {
        throw DimensionError("encoder_forward: token width " + std::to_string(in.width()) +
                             " vs configured dim " + std::to_string(p.config.dim));
    }
    EncoderResult r;
    Tensor x = in.tokens;
    for (const BlockParams& b : p.blocks) {
        x = block_forward(x, b, p.config.heads);
        if (collect_intermediates) r.block_outputs.push_back(TokenSet{x, in.grid_h, in.grid_w});
    }
    r.output = TokenSet{layernorm(x, p.final_gamma, p.final_beta), in.grid_h, in.grid_w};
    return r;
}

Tensor attention_probabilities(const Tensor& image, const ViTParams& p, std::size_t layer_index) {
    if (layer_index >= p.config.depth) {
        throw ContractError("attention layer " + std::to_string(layer_index) + " out of range for depth " +
                            std::to_string(p.config.depth));
    }
    NoGradScope ng;
    Tensor x = patch_embed(image, p).tokens;
    for (std::size_t i = 0; i < layer_index; ++i) x = block_forward(x, p.blocks[i], p.config.heads);
    std::vector<Tensor> atts = attention_rows(x, p.blocks[layer_index], p.config.heads);
    const std::size_t t = x.shape()[0];
    Tensor out = Tensor::zeros({p.config.heads, t, t});
    for (std::size_t h = 0; h < atts.size(); ++h) {
        std::copy(atts[h].values().begin(), atts[h].values().end(), out.values().begin() + h * t * t);
    }
    return out;
}

Tensor resize_pos_embed(const Tensor& pos, std::size_t h, std::size_t w, std::size_t h2,
                        std::size_t w2) {
    if (pos.rank() != 2 || pos.shape()[0] != h * w + 1) {
        throw DimensionError("resize_pos_embed: " + pos.shape_str() + " vs grid " + std::to_string(h) + "x" +
                             std::to_string(w));
    }
    NoGradScope ng;
    Tensor cls_row = slice_rows(pos, 0, 1);
    Tensor grid = slice_rows(pos, 1, h * w);
    Tensor resized = resize_bilinear_grid(grid, h, w, h2, w2);
    return concat_rows({cls_row, resized});
}

} // namespace dune
