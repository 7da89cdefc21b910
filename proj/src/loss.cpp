#include "dune/loss.hpp"

#include <algorithm>

namespace dune {

std::string to_string(ShareStrategy s) {
    switch (s) {
    case ShareStrategy::NoSharing: return "none";
    case ShareStrategy::GenericSharing: return "generic";
    case ShareStrategy::FullSharing: return "full";
    }
    return "?";
}

ShareStrategy share_strategy_from_string(const std::string& s) {
    if (s == "none") return ShareStrategy::NoSharing;
    if (s == "generic") return ShareStrategy::GenericSharing;
    if (s == "full") return ShareStrategy::FullSharing;
    throw ConfigError("unknown sharing strategy '" + s + "' (expected none, generic or full)");
}

namespace {
constexpr double kNormGuard = 1e-12;
} // namespace

Tensor token_cosine_mean(const Tensor& s, const Tensor& t) {
    if (s.rank() != 2 || t.rank() != 2) {
        throw DimensionError("token_cosine_mean expects [T x d] inputs, got " + s.shape_str() + " and " +
                             t.shape_str());
    }
    if (s.shape() != t.shape()) {
        throw DimensionError("token_cosine_mean: shapes " + s.shape_str() + " and " + t.shape_str() +
                             " differ");
    }
    const std::size_t d = s.shape()[1];
    Tensor ones = Tensor::full({d, 1}, 1.0);
    Tensor dot = matmul(mul(s, t), ones);                  // [T x 1]
    Tensor ns = dune::sqrt(matmul(mul(s, s), ones));       // [T x 1]
    Tensor nt = dune::sqrt(matmul(mul(t, t), ones));       // [T x 1]
    Tensor denom = mul(add_scalar(ns, kNormGuard), add_scalar(nt, kNormGuard));
    Tensor per_row = rsub_scalar(1.0, div(dot, denom));
    return mean_all(per_row);
}

Tensor cosine_loss(const Tensor& s, const Tensor& t) {
    if (s.shape() != t.shape()) {
        throw DimensionError("cosine_loss: shapes " + s.shape_str() + " and " + t.shape_str() + " differ");
    }
    if (s.rank() == 1) {
        return token_cosine_mean(reshape(s, {1, s.size()}), reshape(t, {1, t.size()}));
    }
    if (s.rank() == 2 && s.shape()[0] == 1) return token_cosine_mean(s, t);
    throw DimensionError("cosine_loss expects a single vector, got " + s.shape_str());
}

Tensor smooth_l1_loss(const Tensor& s, const Tensor& t) {
    return smooth_l1(s, t);
}

Tensor token_loss(const TokenSet& s, const TokenSet& t) {
    if (s.grid_h != t.grid_h || s.grid_w != t.grid_w) {
        throw ContractError("token_loss: grids " + std::to_string(s.grid_h) + "x" + std::to_string(s.grid_w) +
                            " vs " + std::to_string(t.grid_h) + "x" + std::to_string(t.grid_w) +
                            "; align_token_grid the teacher output first");
    }
    if (s.width() != t.width()) {
        throw DimensionError("token_loss: widths " + std::to_string(s.width()) + " and " +
                             std::to_string(t.width()) + " differ");
    }
    // the fused smooth-l1 mean over all T*d coordinates equals the mean over
    // tokens of per-token means, since every token has the same width
    return add(token_cosine_mean(s.tokens, t.tokens), smooth_l1(s.tokens, t.tokens));
}

ShareMask build_share_mask(const std::vector<SampleMeta>& batch,
                           const std::vector<TeacherSpec>& teachers, ShareStrategy strategy,
                           const DatasetRegistry& registry) {
    if (teachers.empty()) throw ContractError("build_share_mask: no teachers");
    const std::vector<std::string> generic = registry.generic_ids();
    auto in_group = [](const std::vector<std::string>& ids, const std::string& ds) {
        return std::find(ids.begin(), ids.end(), ds) != ids.end();
    };
    ShareMask mask;
    mask.active.reserve(batch.size());
    mask.dataset_ids.reserve(batch.size());
    for (const SampleMeta& sm : batch) {
        const std::string& ds = sm.dataset_id;
        if (!registry.has(ds)) throw ConfigError("unknown dataset id '" + ds + "'");
        std::vector<bool> row(teachers.size(), false);
        bool any = false;
        for (std::size_t i = 0; i < teachers.size(); ++i) {
            bool on = false;
            switch (strategy) {
            case ShareStrategy::NoSharing: on = in_group(teachers[i].dataset_group, ds); break;
            case ShareStrategy::GenericSharing:
                on = in_group(teachers[i].dataset_group, ds) || in_group(generic, ds);
                break;
            case ShareStrategy::FullSharing: on = true; break;
            }
            row[i] = on;
            any = any || on;
        }
        if (!any) {
            throw ContractError("sample '" + sm.image_id + "' from dataset '" + ds +
                                "' has no active teacher under strategy " + to_string(strategy));
        }
        mask.active.push_back(std::move(row));
        mask.dataset_ids.push_back(ds);
    }
    return mask;
}

std::vector<bool> teacher_drop(const std::vector<double>& per_teacher_losses, double keep_prob,
                               Rng& rng) {
    if (per_teacher_losses.empty()) throw ContractError("teacher_drop: empty loss list");
    if (!(keep_prob > 0.0 && keep_prob <= 1.0)) {
        throw ContractError("teacher_drop: keep_prob must be in (0, 1]");
    }
    std::size_t argmax = 0;
    for (std::size_t i = 1; i < per_teacher_losses.size(); ++i) {
        if (per_teacher_losses[i] > per_teacher_losses[argmax]) argmax = i;
    }
    std::vector<bool> kept(per_teacher_losses.size(), false);
    for (std::size_t i = 0; i < kept.size(); ++i) {
        const bool draw = rng.uniform() < keep_prob; // one draw per teacher, always
        kept[i] = (i == argmax) || draw;
    }
    return kept;
}

std::vector<PerTeacherTerm> per_teacher_terms(const std::vector<std::vector<TokenSet>>& student_proj,
                                              const std::vector<std::vector<TokenSet>>& teacher_out,
                                              const ShareMask& mask) {
    const std::size_t n_teachers = mask.active.empty() ? 0 : mask.active[0].size();
    if (student_proj.size() != n_teachers || teacher_out.size() != n_teachers) {
        throw ContractError("per_teacher_terms: output lists do not match teacher count " +
                            std::to_string(n_teachers));
    }
    std::vector<PerTeacherTerm> terms(n_teachers);
    for (std::size_t i = 0; i < n_teachers; ++i) {
        Tensor cos_sum, sl1_sum;
        std::size_t active = 0;
        for (std::size_t b = 0; b < mask.active.size(); ++b) {
            if (!mask.active[b][i]) continue;
            const TokenSet& s = student_proj[i][b];
            const TokenSet& t = teacher_out[i][b];
            if (!s.tokens.defined() || !t.tokens.defined()) {
                throw ContractError("per_teacher_terms: missing output for active (sample " +
                                    std::to_string(b) + ", teacher " + std::to_string(i) + ")");
            }
            if (s.grid_h != t.grid_h || s.grid_w != t.grid_w) {
                throw ContractError("per_teacher_terms: unaligned grids for teacher " + std::to_string(i));
            }
            Tensor c = token_cosine_mean(s.tokens, t.tokens);
            Tensor l = smooth_l1(s.tokens, t.tokens);
            cos_sum = active == 0 ? c : add(cos_sum, c);
            sl1_sum = active == 0 ? l : add(sl1_sum, l);
            ++active;
        }
        if (active == 0) {
            terms[i].cos = Tensor::scalar(0.0);
            terms[i].sl1 = Tensor::scalar(0.0);
        } else {
            const double inv = 1.0 / static_cast<double>(active);
            terms[i].cos = scale(cos_sum, inv);
            terms[i].sl1 = scale(sl1_sum, inv);
        }
        terms[i].active_count = active;
    }
    return terms;
}

LossReport combine_terms(const std::vector<PerTeacherTerm>& terms, const std::vector<bool>& kept) {
    if (terms.size() != kept.size()) {
        throw ContractError("combine_terms: " + std::to_string(terms.size()) + " terms vs " +
                            std::to_string(kept.size()) + " keep flags");
    }
    LossReport r;
    r.kept = kept;
    Tensor total;
    bool have_total = false;
    for (std::size_t i = 0; i < terms.size(); ++i) {
        const double c = terms[i].cos.item();
        const double l = terms[i].sl1.item();
        r.cos_terms.push_back(c);
        r.sl1_terms.push_back(l);
        r.totals.push_back(c + l);
        r.active_counts.push_back(terms[i].active_count);
        if (kept[i] && terms[i].active_count > 0) {
            Tensor term = add(terms[i].cos, terms[i].sl1);
            total = have_total ? add(total, term) : term;
            have_total = true;
        }
    }
    r.loss = have_total ? total : Tensor::scalar(0.0);
    r.grand_total = r.loss.item();
    return r;
}

LossReport distillation_loss(const std::vector<std::vector<TokenSet>>& student_proj,
                             const std::vector<std::vector<TokenSet>>& teacher_out,
                             const ShareMask& mask, const std::vector<bool>& kept) {
    return combine_terms(per_teacher_terms(student_proj, teacher_out, mask), kept);
}

} // namespace dune
