#include "dune/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>

#include "binio.hpp"
#include "dune/teacher.hpp"

namespace dune {

double cosine_lr(std::size_t step, std::size_t total_steps, double lr_max, double lr_min) {
    if (total_steps == 0) throw ContractError("cosine_lr: total_steps must be positive");
    if (step > total_steps) throw ContractError("cosine_lr: step beyond total_steps");
    const double t = static_cast<double>(step) / static_cast<double>(total_steps);
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(3.141592653589793 * t));
}

OptimState init_optim_state(const std::vector<std::pair<std::string, Tensor>>& params) {
    OptimState st;
    st.m.reserve(params.size());
    st.v.reserve(params.size());
    for (const auto& [name, p] : params) {
        (void)name;
        st.m.push_back(Tensor::zeros(p.shape()));
        st.v.push_back(Tensor::zeros(p.shape()));
    }
    return st;
}

void adamw_step(std::vector<std::pair<std::string, Tensor>>& params, OptimState& state,
                const OptimSection& opt, double lr) {
    if (state.m.size() != params.size() || state.v.size() != params.size()) {
        throw ContractError("adamw_step: optimizer state does not match parameter list");
    }
    // optional global-norm clip over all grads
    double clip_scale = 1.0;
    if (opt.clip_norm > 0.0) {
        double sq = 0.0;
        for (const auto& [name, p] : params) {
            (void)name;
            if (!p.has_grad()) continue;
            for (double g : p.grad()) sq += g * g;
        }
        const double norm = std::sqrt(sq);
        if (norm > opt.clip_norm) clip_scale = opt.clip_norm / (norm + 1e-12);
    }
    state.step += 1;
    const double t = static_cast<double>(state.step);
    const double bc1 = 1.0 - std::pow(opt.beta1, t);
    const double bc2 = 1.0 - std::pow(opt.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = params[i].second;
        if (state.m[i].shape() != p.shape()) {
            throw ContractError("adamw_step: moment shape mismatch for " + params[i].first);
        }
        const bool has_g = p.has_grad();
        std::vector<double>& pv = p.values();
        std::vector<double>& mv = state.m[i].values();
        std::vector<double>& vv = state.v[i].values();
        for (std::size_t j = 0; j < pv.size(); ++j) {
            const double g = has_g ? p.grad()[j] * clip_scale : 0.0;
            mv[j] = opt.beta1 * mv[j] + (1.0 - opt.beta1) * g;
            vv[j] = opt.beta2 * vv[j] + (1.0 - opt.beta2) * g * g;
            const double mhat = mv[j] / bc1;
            const double vhat = vv[j] / bc2;
            pv[j] -= lr * (mhat / (std::sqrt(vhat) + opt.eps) + opt.weight_decay * pv[j]);
        }
    }
}

// --- checkpoint -----------------------------------------------------------

namespace {

constexpr char kCkptMagic[8] = {'D', 'U', 'N', 'E', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCkptVersion = 1;

void put_tensor_list(std::ostream& os, const std::vector<std::pair<std::string, Tensor>>& list) {
    binio::put_u64(os, list.size());
    for (const auto& [name, t] : list) {
        binio::put_str(os, name);
        binio::put_u32(os, static_cast<std::uint32_t>(t.rank()));
        for (std::size_t d : t.shape()) binio::put_u64(os, d);
        for (double v : t.values()) binio::put_f64(os, v);
    }
}

std::vector<std::pair<std::string, Tensor>> get_tensor_list(std::istream& is, const std::string& path) {
    const std::uint64_t count = binio::get_u64(is, path);
    std::vector<std::pair<std::string, Tensor>> list;
    list.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        std::string name = binio::get_str(is, path);
        const std::uint32_t rank = binio::get_u32(is, path);
        std::vector<std::size_t> shape(rank);
        std::size_t n = 1;
        for (std::uint32_t r = 0; r < rank; ++r) {
            shape[r] = static_cast<std::size_t>(binio::get_u64(is, path));
            n *= shape[r];
        }
        std::vector<double> vals(n);
        for (double& v : vals) v = binio::get_f64(is, path);
        list.emplace_back(std::move(name), Tensor::from_values(std::move(shape), std::move(vals)));
    }
    return list;
}

} // namespace

void Checkpoint::save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open for writing: " + path);
    os.write(kCkptMagic, 8);
    binio::put_u32(os, kCkptVersion);
    binio::put_u64(os, step);
    binio::put_u64(os, opt_step);
    binio::put_u64(os, batch_rng_state);
    binio::put_u64(os, drop_rng_state);
    put_tensor_list(os, params);
    put_tensor_list(os, opt_m);
    put_tensor_list(os, opt_v);
    if (!os) throw IoError("write failed: " + path);
}

Checkpoint Checkpoint::load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    char magic[8];
    if (!is.read(magic, 8) || std::memcmp(magic, kCkptMagic, 8) != 0) {
        throw IoError("not a checkpoint file (bad magic): " + path);
    }
    const std::uint32_t version = binio::get_u32(is, path);
    if (version != kCkptVersion) {
        throw IoError("unsupported checkpoint version " + std::to_string(version) + ": " + path);
    }
    Checkpoint ck;
    ck.step = binio::get_u64(is, path);
    ck.opt_step = binio::get_u64(is, path);
    ck.batch_rng_state = binio::get_u64(is, path);
    ck.drop_rng_state = binio::get_u64(is, path);
    ck.params = get_tensor_list(is, path);
    ck.opt_m = get_tensor_list(is, path);
    ck.opt_v = get_tensor_list(is, path);
    return ck;
}

// --- engine -----------------------------------------------------------------

Engine Engine::build(const RunConfig& cfg) {
    cfg.validate();
    Engine e;
    e.config = cfg;

    Rng student_stream = make_stream(cfg.train.seed, "init/student");
    e.student = init_vit(cfg.student, student_stream);
    e.student.set_trainable(true);

    for (const TeacherDecl& decl : cfg.teachers) {
        TeacherSpec spec;
        if (!decl.features.empty()) {
            spec = build_file_teacher(decl.id, decl.features);
        } else {
            spec = build_synthetic_teacher(decl.id, decl.effective_seed(), decl.resolve_arch(cfg.student));
        }
        spec.projector_kind = decl.projector;
        for (const DatasetManifest& d : cfg.datasets) {
            if (d.owner == decl.id) spec.dataset_group.push_back(d.id);
        }
        e.teachers.push_back(std::move(spec));
    }

    for (const TeacherSpec& t : e.teachers) {
        Rng proj_stream = make_stream(cfg.train.seed, "init/proj/" + t.id);
        ProjectorParams proj = init_projector(t.projector_kind, cfg.student, t.out_dim, proj_stream);
        proj.set_trainable(true);
        e.needs_intermediates = e.needs_intermediates || proj.kind == ProjectorKind::LP;
        e.projectors.push_back(std::move(proj));
    }

    e.registry = load_registry(cfg.datasets, cfg.teacher_ids());
    return e;
}

std::vector<std::pair<std::string, Tensor>> Engine::trainable_params() const {
    std::vector<std::pair<std::string, Tensor>> out;
    for (auto& [name, t] : student.named_params()) out.emplace_back("student." + name, t);
    for (std::size_t i = 0; i < projectors.size(); ++i) {
        auto pp = projectors[i].named_params("proj." + teachers[i].id + ".");
        out.insert(out.end(), pp.begin(), pp.end());
    }
    return out;
}

void Engine::set_trainable(bool on) {
    student.set_trainable(on);
    for (auto& p : projectors) p.set_trainable(on);
}

void Engine::load_params(const Checkpoint& ck) {
    auto live = trainable_params();
    if (live.size() != ck.params.size()) {
        throw IoError("checkpoint holds " + std::to_string(ck.params.size()) + " tensors, model has " +
                      std::to_string(live.size()));
    }
    for (std::size_t i = 0; i < live.size(); ++i) {
        // saved in enumeration order; verify names to catch config mismatches
        const auto& [saved_name, saved] = ck.params[i];
        auto& [live_name, target] = live[i];
        if (saved_name != live_name) {
            throw IoError("checkpoint tensor '" + saved_name + "' does not match model tensor '" +
                          live_name + "'; was it written with a different config?");
        }
        if (saved.shape() != target.shape()) {
            throw IoError("checkpoint tensor '" + saved_name + "' has shape " + saved.shape_str() +
                          ", model expects " + target.shape_str());
        }
        target.values() = saved.values();
    }
}

TokenSet Engine::student_forward(const Tensor& image, std::vector<TokenSet>* intermediates) const {
    TokenSet embedded = patch_embed(image, student);
    EncoderResult res = encoder_forward(embedded, student, intermediates != nullptr);
    if (intermediates != nullptr) *intermediates = std::move(res.block_outputs);
    return res.output;
}

// --- training loop ------------------------------------------------------------

TrainResult train(const RunConfig& cfg, std::ostream* progress) {
    namespace fs = std::filesystem;
    Engine e = Engine::build(cfg);
    fs::create_directories(cfg.train.out_dir);

    {
        std::ofstream echo(fs::path(cfg.train.out_dir) / "config.echo");
        if (!echo) throw IoError("cannot write config echo under " + cfg.train.out_dir);
        echo << render_config(cfg);
    }

    auto params = e.trainable_params();
    OptimState opt = init_optim_state(params);
    Rng batch_rng = make_stream(cfg.train.seed, "batch");
    Rng drop_rng = make_stream(cfg.train.seed, "drop");

    const std::string log_path = (fs::path(cfg.train.out_dir) / "log.csv").string();
    std::ofstream log(log_path, std::ios::trunc);
    if (!log) throw IoError("cannot open for writing: " + log_path);
    log << "step,lr,total";
    for (const TeacherSpec& t : e.teachers) {
        log << "," << t.id << "_cos," << t.id << "_sl1," << t.id << "_active";
    }
    log << "\n";
    log.precision(17);

    const double lr_max = cfg.resolved_lr_max();
    const std::size_t n_teachers = e.teachers.size();
    const std::size_t grid = cfg.student.grid();
    TrainResult result;
    result.log_path = log_path;

    for (std::size_t s = 1; s <= cfg.train.steps; ++s) {
        std::vector<SampleMeta> batch = compose_batch(e.registry, cfg.train.batch_per_teacher, batch_rng);
        ShareMask mask = build_share_mask(batch, e.teachers, cfg.strategy, e.registry);

        Tape tape;
        LossReport report;
        {
            TapeScope scope(tape);
            std::vector<TokenSet> student_out(batch.size());
            std::vector<std::vector<TokenSet>> inters(batch.size());
            for (std::size_t b = 0; b < batch.size(); ++b) {
                student_out[b] = e.student_forward(batch[b].pixels,
                                                   e.needs_intermediates ? &inters[b] : nullptr);
            }
            std::vector<std::vector<TokenSet>> proj_out(n_teachers,
                                                        std::vector<TokenSet>(batch.size()));
            std::vector<std::vector<TokenSet>> teach_out(n_teachers,
                                                         std::vector<TokenSet>(batch.size()));
            for (std::size_t i = 0; i < n_teachers; ++i) {
                for (std::size_t b = 0; b < batch.size(); ++b) {
                    if (!mask.active[b][i]) continue;
                    proj_out[i][b] = project(e.projectors[i], student_out[b], inters[b]);
                    TokenSet target = teacher_forward(e.teachers[i], batch[b]);
                    teach_out[i][b] = align_token_grid(target, grid, grid);
                }
            }
            std::vector<PerTeacherTerm> terms = per_teacher_terms(proj_out, teach_out, mask);
            std::vector<double> totals;
            totals.reserve(n_teachers);
            for (const PerTeacherTerm& t : terms) totals.push_back(t.cos.item() + t.sl1.item());
            std::vector<bool> kept = teacher_drop(totals, cfg.train.keep_prob, drop_rng);
            report = combine_terms(terms, kept);
            if (!std::isfinite(report.grand_total)) {
                throw ContractError("non-finite loss at step " + std::to_string(s));
            }
            tape.backward(report.loss);
        }
        const double lr = cosine_lr(s - 1, cfg.train.steps, lr_max, cfg.optim.lr_min);
        adamw_step(params, opt, cfg.optim, lr);
        tape.clear();

        log << s << "," << lr << "," << report.grand_total;
        for (std::size_t i = 0; i < n_teachers; ++i) {
            log << "," << report.cos_terms[i] << "," << report.sl1_terms[i] << ","
                << (report.kept[i] ? report.active_counts[i] : 0);
        }
        log << "\n";

        if (s == 1) result.first_total = report.grand_total;
        result.final_total = report.grand_total;
        if (progress != nullptr && (s % 50 == 0 || s == 1 || s == cfg.train.steps)) {
            (*progress) << "step " << s << "/" << cfg.train.steps << " total " << report.grand_total
                        << "\n";
        }

        if (cfg.train.checkpoint_every > 0 && s % cfg.train.checkpoint_every == 0 &&
            s != cfg.train.steps) {
            Checkpoint ck;
            ck.step = s;
            ck.opt_step = opt.step;
            ck.batch_rng_state = batch_rng.state();
            ck.drop_rng_state = drop_rng.state();
            ck.params = params;
            for (std::size_t i = 0; i < params.size(); ++i) {
                ck.opt_m.emplace_back(params[i].first, opt.m[i]);
                ck.opt_v.emplace_back(params[i].first, opt.v[i]);
            }
            ck.save((fs::path(cfg.train.out_dir) / ("ckpt-" + std::to_string(s) + ".bin")).string());
        }
    }

    Checkpoint final_ck;
    final_ck.step = cfg.train.steps;
    final_ck.opt_step = opt.step;
    final_ck.batch_rng_state = batch_rng.state();
    final_ck.drop_rng_state = drop_rng.state();
    final_ck.params = params;
    for (std::size_t i = 0; i < params.size(); ++i) {
        final_ck.opt_m.emplace_back(params[i].first, opt.m[i]);
        final_ck.opt_v.emplace_back(params[i].first, opt.v[i]);
    }
    result.checkpoint_path = (fs::path(cfg.train.out_dir) / "ckpt-final.bin").string();
    final_ck.save(result.checkpoint_path);
    return result;
}

// --- linear probe ---------------------------------------------------------------

namespace {

// stripe orientation survives the per-token layernorm, unlike raw brightness
Tensor probe_image(const ViTConfig& cfg, bool vertical, Rng& rng) {
    Tensor img = Tensor::zeros({cfg.channels, cfg.image_size, cfg.image_size});
    double* px = img.values().data();
    const double period = static_cast<double>(cfg.patch_size);
    for (std::size_t c = 0; c < cfg.channels; ++c)
        for (std::size_t y = 0; y < cfg.image_size; ++y)
            for (std::size_t x = 0; x < cfg.image_size; ++x) {
                const double axis = static_cast<double>(vertical ? x : y);
                const double v = 0.5 + 0.35 * std::cos(6.283185307179586 * axis / period) +
                                 rng.uniform(-0.05, 0.05);
                px[(c * cfg.image_size + y) * cfg.image_size + x] = std::clamp(v, 0.0, 1.0);
            }
    return img;
}

// frozen features: forward, optional projector, then mean over all tokens
std::vector<double> pooled_features(const ViTParams& student, const ProjectorParams* projector,
                                    const Tensor& image) {
    NoGradScope frozen;
    TokenSet embedded = patch_embed(image, student);
    EncoderResult res =
        encoder_forward(embedded, student, projector != nullptr && projector->kind == ProjectorKind::LP);
    TokenSet z = res.output;
    if (projector != nullptr) z = project(*projector, z, res.block_outputs);
    const std::size_t t = z.count(), d = z.width();
    std::vector<double> pooled(d, 0.0);
    for (std::size_t i = 0; i < t; ++i)
        for (std::size_t j = 0; j < d; ++j) pooled[j] += z.tokens.values()[i * d + j];
    for (double& v : pooled) v /= static_cast<double>(t);
    return pooled;
}

double head_accuracy(const Tensor& x, const std::vector<std::size_t>& labels, const Tensor& w,
                     const Tensor& b) {
    NoGradScope ng;
    Tensor logits = add_rowvec(matmul(x, w), b);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const std::size_t pred = logits(i, 0) >= logits(i, 1) ? 0 : 1;
        if (pred == labels[i]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(labels.size());
}

} // namespace

ProbeResult linear_probe(const ViTParams& student, const ProjectorParams* projector,
                         std::size_t epochs, std::uint64_t seed) {
    const ViTConfig& cfg = student.config;
    const std::size_t n_train = 96, n_test = 64;
    Rng rng = make_stream(seed, "probe");

    const std::uint64_t before = params_checksum(student.named_params());

    std::vector<std::size_t> train_labels, test_labels;
    std::vector<std::vector<double>> train_feats, test_feats;
    for (std::size_t i = 0; i < n_train + n_test; ++i) {
        const bool vertical = rng.uniform() < 0.5;
        Tensor img = probe_image(cfg, vertical, rng);
        std::vector<double> f = pooled_features(student, projector, img);
        if (i < n_train) {
            train_labels.push_back(vertical ? 1 : 0);
            train_feats.push_back(std::move(f));
        } else {
            test_labels.push_back(vertical ? 1 : 0);
            test_feats.push_back(std::move(f));
        }
    }
    const std::size_t d = train_feats[0].size();
    auto stack = [d](const std::vector<std::vector<double>>& rows) {
        std::vector<double> flat;
        flat.reserve(rows.size() * d);
        for (const auto& r : rows) flat.insert(flat.end(), r.begin(), r.end());
        return Tensor::from_values({rows.size(), d}, std::move(flat));
    };
    Tensor x_train = stack(train_feats);
    Tensor x_test = stack(test_feats);

    ProbeResult pr;
    pr.head_w = Tensor::parameter({d, 2}, std::vector<double>(d * 2, 0.0));
    pr.head_b = Tensor::parameter({2}, {0.0, 0.0});

    std::vector<std::pair<std::string, Tensor>> head_params = {{"head.w", pr.head_w},
                                                               {"head.b", pr.head_b}};
    OptimState opt = init_optim_state(head_params);
    OptimSection hyper; // plain Adam: no decay on a probe head
    hyper.weight_decay = 0.0;
    for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
        Tape tape;
        {
            TapeScope scope(tape);
            Tensor logits = add_rowvec(matmul(x_train, pr.head_w), pr.head_b);
            Tensor loss = cross_entropy_rows(logits, train_labels);
            tape.backward(loss);
        }
        adamw_step(head_params, opt, hyper, 0.05);
        tape.clear();
    }

    pr.train_accuracy = head_accuracy(x_train, train_labels, pr.head_w, pr.head_b);
    pr.accuracy = head_accuracy(x_test, test_labels, pr.head_w, pr.head_b);

    if (params_checksum(student.named_params()) != before) {
        throw ContractError("linear_probe mutated frozen encoder parameters");
    }
    return pr;
}

} // namespace dune
