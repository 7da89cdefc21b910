#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dune/data.hpp"
#include "dune/feature_file.hpp"
#include "dune/rng.hpp"
#include "dune/vit.hpp"

namespace dune {

// Row-major n x d feature rows with a provenance label for reports.
struct FeatureMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;
    std::string source;
};

enum class FeaturePooling { Patches, Cls, All };

std::string to_string(FeaturePooling p);
FeaturePooling pooling_from_string(const std::string& s); // "patches" | "cls" | "all"

// One row per token according to the pooling choice (patch tokens, CLS
// vectors, or both).
FeatureMatrix feature_matrix(const FeatureFile& file, FeaturePooling pooling);

// Eigenvalues of the symmetric n x n matrix `a` (row-major, only the value
// array is consumed), by cyclic Jacobi rotations until the off-diagonal
// Frobenius norm drops below tol. Sorted descending.
std::vector<double> jacobi_eigenvalues(std::vector<double> a, std::size_t n, double tol = 1e-12);

// Cumulative ratios of the descending eigenvalues of the mean-centered
// 1/(n-1) covariance: out[k] = sum_{j<=k} lambda_j / sum lambda_j.
// Non-decreasing, ends at 1. Zero total variance -> ContractError.
std::vector<double> explained_variance_curve(const FeatureMatrix& f);

// Pearson correlation of the per-step first differences of two aligned loss
// sequences. Needs >= 3 values; a zero-variance delta sequence -> ContractError.
double loss_update_correlation(const std::vector<double>& loss_a, const std::vector<double>& loss_b);

struct KMedoidsResult {
    std::vector<std::size_t> medoids;    // indices into the input set
    std::vector<std::size_t> assignment; // per input point, position in `medoids`
    std::vector<double> cost_history;    // total dissimilarity per iteration, non-increasing
};

// PAM-style alternation: assign to the nearest medoid by Euclidean distance,
// then swap each medoid to its cluster's cost minimizer, until stable or
// max_iters. Initialized with k distinct uniform draws from rng.
KMedoidsResult kmedoids(const std::vector<std::vector<double>>& points, std::size_t k,
                        std::size_t max_iters, Rng& rng);

// Parsed training log CSV (step,lr,total,<id>_cos,<id>_sl1,<id>_active per teacher).
struct TrainingLog {
    std::vector<std::size_t> steps;
    std::vector<double> lr;
    std::vector<double> total;
    std::vector<std::string> teacher_ids;
    std::vector<std::vector<double>> cos;          // [teacher][row]
    std::vector<std::vector<double>> sl1;          // [teacher][row]
    std::vector<std::vector<std::size_t>> active;  // [teacher][row]

    std::size_t teacher_index(const std::string& id) const; // ConfigError when unknown
    std::vector<double> teacher_total(std::size_t i) const; // cos + sl1 per row
};

TrainingLog read_training_log(const std::string& path);

// Runs the producer over every sample and packs the outputs into a DUNEFEAT
// container; the first output fixes width and grid, later disagreement is a
// ContractError.
FeatureFile collect_features(const std::vector<SampleMeta>& samples,
                             const std::function<TokenSet(const SampleMeta&)>& producer);

} // namespace dune
