#include "dune/gradcheck.hpp"

#include <cmath>
#include <functional>

#include "dune/loss.hpp"
#include "dune/projector.hpp"
#include "dune/rng.hpp"
#include "dune/tensor.hpp"
#include "dune/vit.hpp"

namespace dune {

namespace {

Tensor rand_tensor(std::vector<std::size_t> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    std::vector<double> v(n);
    for (double& x : v) x = rng.uniform(lo, hi);
    return Tensor::from_values(std::move(shape), std::move(v));
}

// magnitudes in [0.2, 1.0], random sign; keeps kinked ops off their branch points
Tensor rand_signed_tensor(std::vector<std::size_t> shape, Rng& rng) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    std::vector<double> v(n);
    for (double& x : v) x = rng.uniform(0.2, 1.0) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
    return Tensor::from_values(std::move(shape), std::move(v));
}

// fixed random projection to a scalar so no adjoint coordinate can hide
Tensor to_scalar(const Tensor& y, const Tensor& w) { return mean_all(mul(y, w)); }

struct Harness {
    std::vector<GradCheckEntry> entries;

    void check(const std::string& name, Tensor& x,
               const std::function<Tensor(const Tensor&)>& f) {
        entries.push_back({name, finite_diff_check(f, x, kGradCheckStep)});
    }
};

void check_primitives(Harness& h) {
    Rng rng = make_stream(7041, "gradcheck/primitives");
    const std::vector<std::size_t> s34{3, 4};
    Tensor w34 = rand_tensor(s34, rng);
    Tensor w45 = rand_tensor({4, 5}, rng);
    Tensor w35 = rand_tensor({3, 5}, rng);
    Tensor w43 = rand_tensor({4, 3}, rng);

    {
        Tensor x = rand_tensor(s34, rng);
        Tensor b = rand_tensor({4, 5}, rng);
        h.check("matmul/lhs", x, [&](const Tensor&) { return to_scalar(matmul(x, b), w35); });
        Tensor a = rand_tensor(s34, rng);
        Tensor y = rand_tensor({4, 5}, rng);
        h.check("matmul/rhs", y, [&](const Tensor&) { return to_scalar(matmul(a, y), w35); });
    }
    {
        Tensor x = rand_tensor(s34, rng);
        Tensor o = rand_tensor(s34, rng);
        h.check("add", x, [&](const Tensor&) { return to_scalar(add(x, o), w34); });
        h.check("sub", x, [&](const Tensor&) { return to_scalar(sub(o, x), w34); });
        h.check("mul", x, [&](const Tensor&) { return to_scalar(mul(x, o), w34); });
    }
    {
        Tensor x = rand_tensor(s34, rng);
        Tensor denom = rand_tensor(s34, rng, 0.5, 1.5);
        h.check("div/num", x, [&](const Tensor&) { return to_scalar(div(x, denom), w34); });
        Tensor num = rand_tensor(s34, rng);
        Tensor y = rand_tensor(s34, rng, 0.5, 1.5);
        h.check("div/den", y, [&](const Tensor&) { return to_scalar(div(num, y), w34); });
    }
    {
        Tensor x = rand_tensor(s34, rng);
        h.check("scale", x, [&](const Tensor&) { return to_scalar(scale(x, -1.7), w34); });
        h.check("add_scalar", x, [&](const Tensor&) { return to_scalar(add_scalar(x, 0.3), w34); });
        h.check("rsub_scalar", x, [&](const Tensor&) { return to_scalar(rsub_scalar(2.0, x), w34); });
    }
    {
        Tensor x = rand_tensor(s34, rng);
        Tensor v = rand_tensor({4}, rng);
        h.check("add_rowvec/mat", x,
                [&](const Tensor&) { return to_scalar(add_rowvec(x, v), w34); });
        h.check("add_rowvec/vec", v,
                [&](const Tensor&) { return to_scalar(add_rowvec(x, v), w34); });
        h.check("mul_rowvec/mat", x,
                [&](const Tensor&) { return to_scalar(mul_rowvec(x, v), w34); });
        h.check("mul_rowvec/vec", v,
                [&](const Tensor&) { return to_scalar(mul_rowvec(x, v), w34); });
    }
    {
        Tensor x = rand_tensor(s34, rng);
        Tensor w62 = rand_tensor({6, 2}, rng);
        h.check("reshape", x,
                [&](const Tensor&) { return to_scalar(reshape(x, {6, 2}), w62); });
        Tensor w24 = rand_tensor({2, 4}, rng);
        h.check("slice_rows", x,
                [&](const Tensor&) { return to_scalar(slice_rows(x, 1, 2), w24); });
        Tensor w32 = rand_tensor({3, 2}, rng);
        h.check("slice_cols", x,
                [&](const Tensor&) { return to_scalar(slice_cols(x, 1, 2), w32); });
        h.check("transpose", x, [&](const Tensor&) { return to_scalar(transpose(x), w43); });
    }
    {
        Tensor x = rand_tensor({2, 4}, rng);
        Tensor other = rand_tensor({1, 4}, rng);
        h.check("concat_rows", x,
                [&](const Tensor&) { return to_scalar(concat_rows({other, x}), w34); });
        Tensor left = rand_tensor({3, 1}, rng);
        Tensor y = rand_tensor({3, 3}, rng);
        h.check("concat_cols", y,
                [&](const Tensor&) { return to_scalar(concat_cols({left, y}), w34); });
    }
    {
        Tensor x = rand_tensor(s34, rng);
        h.check("softmax/rows", x,
                [&](const Tensor&) { return to_scalar(softmax(x, 1), w34); });
        h.check("softmax/cols", x,
                [&](const Tensor&) { return to_scalar(softmax(x, 0), w34); });
        h.check("gelu", x, [&](const Tensor&) { return to_scalar(gelu(x), w34); });
    }
    {
        Tensor x = rand_tensor(s34, rng);
        Tensor gamma = rand_tensor({4}, rng, 0.5, 1.5);
        Tensor beta = rand_tensor({4}, rng);
        h.check("layernorm/x", x,
                [&](const Tensor&) { return to_scalar(layernorm(x, gamma, beta), w34); });
        h.check("layernorm/gamma", gamma,
                [&](const Tensor&) { return to_scalar(layernorm(x, gamma, beta), w34); });
        h.check("layernorm/beta", beta,
                [&](const Tensor&) { return to_scalar(layernorm(x, gamma, beta), w34); });
    }
    {
        Tensor x = rand_tensor(s34, rng);
        h.check("sum_all", x, [&](const Tensor&) { return sum_all(mul(x, w34)); });
        h.check("mean_all", x, [&](const Tensor&) { return mean_all(mul(x, w34)); });
        Tensor pos = rand_tensor(s34, rng, 0.5, 2.0);
        h.check("sqrt", pos, [&](const Tensor&) { return to_scalar(dune::sqrt(pos), w34); });
        Tensor off = rand_signed_tensor(s34, rng);
        h.check("clamp_min", off,
                [&](const Tensor&) { return to_scalar(clamp_min(off, 0.0), w34); });
    }
    {
        Tensor img = rand_tensor({2, 4, 4}, rng);
        Tensor w48 = rand_tensor({4, 8}, rng);
        h.check("extract_patches", img,
                [&](const Tensor&) { return to_scalar(extract_patches(img, 2), w48); });
        Tensor grid = rand_tensor({4, 3}, rng);
        Tensor w93 = rand_tensor({9, 3}, rng);
        h.check("resize_bilinear_grid", grid, [&](const Tensor&) {
            return to_scalar(resize_bilinear_grid(grid, 2, 2, 3, 3), w93);
        });
    }
    {
        Tensor s = rand_tensor(s34, rng, -0.5, 0.5);
        Tensor t = rand_tensor(s34, rng, -0.3, 0.3);
        h.check("smooth_l1/quadratic", s, [&](const Tensor&) { return smooth_l1(s, t); });
        Tensor far = rand_tensor(s34, rng, 2.0, 3.0);
        h.check("smooth_l1/linear", far, [&](const Tensor&) { return smooth_l1(far, t); });
        Tensor logits = rand_tensor({3, 4}, rng);
        const std::vector<std::size_t> labels{0, 2, 1};
        h.check("cross_entropy_rows", logits,
                [&](const Tensor&) { return cross_entropy_rows(logits, labels); });
    }
    {
        Tensor s = rand_tensor({1, 6}, rng);
        Tensor t = rand_tensor({1, 6}, rng);
        h.check("cosine_loss", s, [&](const Tensor&) { return cosine_loss(s, t); });
        Tensor sm = rand_tensor({4, 6}, rng);
        Tensor tm = rand_tensor({4, 6}, rng);
        h.check("token_cosine_mean", sm,
                [&](const Tensor&) { return token_cosine_mean(sm, tm); });
    }
}

// Overwrites every parameter with O(1) draws. Training-style init gates the
// residual branches at 1e-5, pushing attention-path gradients below the
// central-difference noise floor where the check cannot resolve them.
void randomize(std::vector<std::pair<std::string, Tensor>> params, Rng& rng) {
    for (auto& [name, t] : params) {
        const bool positive = name.find("ls") != std::string::npos ||
                              (name.size() >= 2 && name.compare(name.size() - 2, 2, ".g") == 0);
        for (double& v : t.values()) v = positive ? rng.uniform(0.5, 1.5) : rng.uniform(-0.4, 0.4);
    }
}

// student encoder -> projector -> cosine+smooth-l1 against a fixed target
struct CompositeRig {
    ViTConfig cfg;
    ViTParams student;
    Tensor image;
    Rng rng;

    explicit CompositeRig(std::size_t depth)
        : rng(make_stream(7042, "gradcheck/composite")) {
        cfg.image_size = 8;
        cfg.patch_size = 4;
        cfg.channels = 3;
        cfg.depth = depth;
        cfg.dim = 8;
        cfg.heads = 2;
        student = init_vit(cfg, rng);
        randomize(student.named_params(), rng);
        image = rand_tensor({cfg.channels, cfg.image_size, cfg.image_size}, rng, 0.0, 1.0);
    }

    TokenSet make_target(std::size_t dim) {
        TokenSet t;
        t.tokens = rand_tensor({cfg.token_count(), dim}, rng, -0.4, 0.4);
        t.grid_h = cfg.grid();
        t.grid_w = cfg.grid();
        return t;
    }

    Tensor loss_through(const ProjectorParams& proj, const TokenSet& target) const {
        TokenSet embedded = patch_embed(image, student);
        EncoderResult res = encoder_forward(embedded, student, true);
        TokenSet out = project(proj, res.output, res.block_outputs);
        return token_loss(out, target);
    }
};

void check_composites(Harness& h) {
    {
        CompositeRig rig(2);
        TokenSet target = rig.make_target(6);
        ProjectorParams sp = init_projector(ProjectorKind::SP, rig.cfg, 6, rig.rng);
        randomize(sp.named_params(""), rig.rng);
        auto loss = [&](const Tensor&) { return rig.loss_through(sp, target); };
        h.check("composite/sp/image", rig.image, loss);
        h.check("composite/sp/patch_w", rig.student.patch_w, loss);
        h.check("composite/sp/qkv_w", rig.student.blocks[0].qkv_w, loss);
        h.check("composite/sp/ls1", rig.student.blocks[1].ls1, loss);
        h.check("composite/sp/pos", rig.student.pos, loss);
        h.check("composite/sp/final_gamma", rig.student.final_gamma, loss);
        h.check("composite/sp/w1", sp.sp.w1, loss);
        h.check("composite/sp/b2", sp.sp.b2, loss);
    }
    {
        CompositeRig rig(4); // taps after blocks 3 and 4
        TokenSet target = rig.make_target(6);
        ProjectorParams lp = init_projector(ProjectorKind::LP, rig.cfg, 6, rig.rng);
        randomize(lp.named_params(""), rig.rng);
        auto loss = [&](const Tensor&) { return rig.loss_through(lp, target); };
        h.check("composite/lp/image", rig.image, loss);
        h.check("composite/lp/tap0_w1", lp.taps[0].w1, loss);
        h.check("composite/lp/tap1_w2", lp.taps[1].w2, loss);
        h.check("composite/lp/qkv_w", rig.student.blocks[2].qkv_w, loss);
    }
    {
        CompositeRig rig(2);
        TokenSet target = rig.make_target(6);
        ProjectorParams tp = init_projector(ProjectorKind::TP, rig.cfg, 6, rig.rng);
        randomize(tp.named_params(""), rig.rng);
        auto loss = [&](const Tensor&) { return rig.loss_through(tp, target); };
        h.check("composite/tp/image", rig.image, loss);
        h.check("composite/tp/block_qkv_w", tp.tp_block.qkv_w, loss);
        h.check("composite/tp/block_mlp_w2", tp.tp_block.mlp_w2, loss);
        h.check("composite/tp/head_w", tp.tp_head_w, loss);
        h.check("composite/tp/student_mlp_w1", rig.student.blocks[0].mlp_w1, loss);
    }
}

} // namespace

std::vector<GradCheckEntry> run_gradcheck() {
    Harness h;
    check_primitives(h);
    check_composites(h);
    return h.entries;
}

} // namespace dune
