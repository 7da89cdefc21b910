#pragma once

#include <string>
#include <vector>

#include "dune/data.hpp"
#include "dune/teacher.hpp"

namespace dune {

enum class ShareStrategy { NoSharing, GenericSharing, FullSharing };

std::string to_string(ShareStrategy s);
ShareStrategy share_strategy_from_string(const std::string& s); // "none" | "generic" | "full"

// Which samples feed which teacher's loss. Row = sample, column = teacher.
struct ShareMask {
    std::vector<std::vector<bool>> active;
    std::vector<std::string> dataset_ids; // per sample
};

// 1 - s.t / ((||s|| + 1e-12) (||t|| + 1e-12)); the 1e-12 norm guards keep
// zero vectors finite instead of raising. Accepts [d] or [1 x d].
Tensor cosine_loss(const Tensor& s, const Tensor& t);

// mean over coordinates of the elementwise Huber penalty (branch at |d| = 1)
Tensor smooth_l1_loss(const Tensor& s, const Tensor& t);

// mean over rows of the per-row cosine loss, inputs [T x d]
Tensor token_cosine_mean(const Tensor& s, const Tensor& t);

// mean over all HW+1 tokens of [cosine + smooth-l1]; grids must already agree
Tensor token_loss(const TokenSet& s, const TokenSet& t);

// Applies the sharing strategy. NoSharing activates only owning teachers;
// GenericSharing additionally routes generic-owned samples to every teacher;
// FullSharing activates everything. Every row must end up with at least one
// active teacher.
ShareMask build_share_mask(const std::vector<SampleMeta>& batch,
                           const std::vector<TeacherSpec>& teachers, ShareStrategy strategy,
                           const DatasetRegistry& registry);

// Keeps the max-loss teacher always, every other teacher independently with
// probability keep_prob. Consumes exactly one draw per teacher, so the rng
// stream advances identically whatever the loss values.
std::vector<bool> teacher_drop(const std::vector<double>& per_teacher_losses, double keep_prob,
                               Rng& rng);

// one teacher's masked-mean loss terms, still attached to the tape
struct PerTeacherTerm {
    Tensor cos; // scalar
    Tensor sl1; // scalar
    std::size_t active_count = 0;
};

// student_proj[i][b] / teacher_out[i][b]: projected student and aligned
// teacher outputs for teacher i, sample b. Slots masked off may be left
// default-constructed.
std::vector<PerTeacherTerm> per_teacher_terms(const std::vector<std::vector<TokenSet>>& student_proj,
                                              const std::vector<std::vector<TokenSet>>& teacher_out,
                                              const ShareMask& mask);

struct LossReport {
    std::vector<double> cos_terms;          // per teacher, 0 when inactive
    std::vector<double> sl1_terms;
    std::vector<double> totals;
    std::vector<std::size_t> active_counts; // mask-active samples per teacher
    std::vector<bool> kept;                 // teacher_drop outcome
    double grand_total = 0.0;
    Tensor loss;                            // scalar, sum over kept teachers
};

LossReport combine_terms(const std::vector<PerTeacherTerm>& terms, const std::vector<bool>& kept);

// convenience composition of per_teacher_terms + combine_terms
LossReport distillation_loss(const std::vector<std::vector<TokenSet>>& student_proj,
                             const std::vector<std::vector<TokenSet>>& teacher_out,
                             const ShareMask& mask, const std::vector<bool>& kept);

} // namespace dune
