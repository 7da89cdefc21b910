#include "dune/projector.hpp"

#include <algorithm>

namespace dune {

std::string to_string(ProjectorKind k) {
    switch (k) {
    case ProjectorKind::SP: return "sp";
    case ProjectorKind::LP: return "lp";
    case ProjectorKind::TP: return "tp";
    case ProjectorKind::Identity: return "identity";
    }
    return "?";
}

ProjectorKind projector_kind_from_string(const std::string& s) {
    if (s == "sp") return ProjectorKind::SP;
    if (s == "lp") return ProjectorKind::LP;
    if (s == "tp") return ProjectorKind::TP;
    if (s == "identity") return ProjectorKind::Identity;
    throw ConfigError("unknown projector kind '" + s + "' (expected sp, lp, tp or identity)");
}

std::vector<std::size_t> ladder_taps(std::size_t depth) {
    if (depth == 0) throw ContractError("ladder_taps: zero-depth encoder");
    std::vector<std::size_t> taps;
    for (std::size_t b = 3; b <= depth; b += 3) taps.push_back(b);
    if (taps.empty() || taps.back() != depth) taps.push_back(depth);
    return taps;
}

namespace {

constexpr double kInitSigma = 0.02;

// hidden width of the per-token MLP heads (paper leaves SP/LP internals open)
std::size_t mlp_head_hidden(std::size_t in_dim, std::size_t out_dim) {
    return 2 * std::max(in_dim, out_dim);
}

MlpHead init_mlp_head(std::size_t in_dim, std::size_t out_dim, Rng& rng) {
    const std::size_t h = mlp_head_hidden(in_dim, out_dim);
    MlpHead m;
    m.w1 = trunc_normal_tensor({in_dim, h}, kInitSigma, rng);
    m.b1 = Tensor::zeros({h});
    m.w2 = trunc_normal_tensor({h, out_dim}, kInitSigma, rng);
    m.b2 = Tensor::zeros({out_dim});
    return m;
}

Tensor mlp_head_forward(const Tensor& x, const MlpHead& m) {
    Tensor y = add_rowvec(matmul(x, m.w1), m.b1);
    y = gelu(y);
    return add_rowvec(matmul(y, m.w2), m.b2);
}

void check_width(const TokenSet& z, const ProjectorParams& p, const char* op) {
    if (z.width() != p.in_dim) {
        throw DimensionError(std::string(op) + ": token width " + std::to_string(z.width()) +
                             " vs projector input width " + std::to_string(p.in_dim));
    }
}

} // namespace

ProjectorParams init_projector(ProjectorKind kind, const ViTConfig& student, std::size_t out_dim,
                               Rng& rng) {
    if (out_dim == 0) throw ConfigError("projector output width must be positive");
    ProjectorParams p;
    p.kind = kind;
    p.in_dim = student.dim;
    p.out_dim = out_dim;
    switch (kind) {
    case ProjectorKind::SP:
        p.sp = init_mlp_head(p.in_dim, out_dim, rng);
        break;
    case ProjectorKind::LP:
        p.tap_blocks = ladder_taps(student.depth);
        for (std::size_t i = 0; i < p.tap_blocks.size(); ++i)
            p.taps.push_back(init_mlp_head(p.in_dim, out_dim, rng));
        break;
    case ProjectorKind::TP:
        p.tp_block = init_block(student, rng);
        p.tp_heads = student.heads;
        p.tp_head_w = trunc_normal_tensor({p.in_dim, out_dim}, kInitSigma, rng);
        p.tp_head_b = Tensor::zeros({out_dim});
        break;
    case ProjectorKind::Identity:
        if (out_dim != student.dim) {
            throw ConfigError("identity projector requires teacher width == student width (" +
                              std::to_string(out_dim) + " vs " + std::to_string(student.dim) + ")");
        }
        break;
    }
    return p;
}

std::vector<std::pair<std::string, Tensor>> ProjectorParams::named_params(
    const std::string& prefix) const {
    std::vector<std::pair<std::string, Tensor>> out;
    switch (kind) {
    case ProjectorKind::SP:
        out.emplace_back(prefix + "w1", sp.w1);
        out.emplace_back(prefix + "b1", sp.b1);
        out.emplace_back(prefix + "w2", sp.w2);
        out.emplace_back(prefix + "b2", sp.b2);
        break;
    case ProjectorKind::LP:
        for (std::size_t i = 0; i < taps.size(); ++i) {
            const std::string tp = prefix + "tap" + std::to_string(i) + ".";
            out.emplace_back(tp + "w1", taps[i].w1);
            out.emplace_back(tp + "b1", taps[i].b1);
            out.emplace_back(tp + "w2", taps[i].w2);
            out.emplace_back(tp + "b2", taps[i].b2);
        }
        break;
    case ProjectorKind::TP: {
        auto bp = block_named_params(tp_block, prefix + "block.");
        out.insert(out.end(), bp.begin(), bp.end());
        out.emplace_back(prefix + "head.w", tp_head_w);
        out.emplace_back(prefix + "head.b", tp_head_b);
        break;
    }
    case ProjectorKind::Identity:
        break;
    }
    return out;
}

void ProjectorParams::set_trainable(bool on) {
    for (auto& [name, t] : named_params("")) {
        (void)name;
        t.set_requires_grad(on);
    }
}

TokenSet sp_forward(const TokenSet& z, const ProjectorParams& p) {
    check_width(z, p, "sp_forward");
    return TokenSet{mlp_head_forward(z.tokens, p.sp), z.grid_h, z.grid_w};
}

TokenSet lp_forward(const std::vector<TokenSet>& intermediates, const ProjectorParams& p) {
    if (intermediates.empty()) throw ContractError("lp_forward: no intermediate token sets");
    if (p.tap_blocks.empty()) throw ContractError("lp_forward: projector has no taps");
    if (p.tap_blocks.back() > intermediates.size()) {
        throw ContractError("lp_forward: tap at block " + std::to_string(p.tap_blocks.back()) +
                            " but only " + std::to_string(intermediates.size()) + " intermediates given");
    }
    Tensor sum;
    for (std::size_t i = 0; i < p.tap_blocks.size(); ++i) {
        const TokenSet& z = intermediates[p.tap_blocks[i] - 1];
        check_width(z, p, "lp_forward");
        Tensor contrib = mlp_head_forward(z.tokens, p.taps[i]);
        sum = i == 0 ? contrib : add(sum, contrib);
    }
    const TokenSet& last = intermediates[p.tap_blocks.back() - 1];
    return TokenSet{sum, last.grid_h, last.grid_w};
}

TokenSet tp_forward(const TokenSet& z, const ProjectorParams& p) {
    check_width(z, p, "tp_forward");
    Tensor m = block_forward(z.tokens, p.tp_block, p.tp_heads);
    Tensor h = add_rowvec(matmul(m, p.tp_head_w), p.tp_head_b);
    return TokenSet{h, z.grid_h, z.grid_w};
}

TokenSet project(const ProjectorParams& p, const TokenSet& z,
                 const std::vector<TokenSet>& intermediates) {
    switch (p.kind) {
    case ProjectorKind::SP: return sp_forward(z, p);
    case ProjectorKind::LP: return lp_forward(intermediates, p);
    case ProjectorKind::TP: return tp_forward(z, p);
    case ProjectorKind::Identity:
        check_width(z, p, "identity projector");
        return z;
    }
    throw ContractError("unreachable projector kind");
}

} // namespace dune
