#pragma once

#include <memory>
#include <string>
#include <vector>

#include "dune/data.hpp"
#include "dune/feature_file.hpp"
#include "dune/projector.hpp"
#include "dune/vit.hpp"

namespace dune {

// A frozen feature source: either a seeded random ViT or a file of
// precomputed features. Frozen means no parameter ever requires a gradient.
struct TeacherSpec {
    std::string id;
    bool from_file = false;

    // synthetic source
    ViTConfig config;
    std::uint64_t seed = 0;

    // file source
    std::string feature_path;

    std::size_t out_dim = 0;                  // d_i
    std::vector<std::string> dataset_group;   // ids of the datasets it owns
    ProjectorKind projector_kind = ProjectorKind::TP;

    std::shared_ptr<const ViTParams> params;
    std::shared_ptr<const FeatureFile> features;
};

TeacherSpec build_synthetic_teacher(const std::string& id, std::uint64_t seed, const ViTConfig& cfg);
TeacherSpec build_file_teacher(const std::string& id, const std::string& feature_path);

// Frozen forward pass; records nothing on any tape. File-backed teachers look
// the sample up by image id and fail with the id when absent.
TokenSet teacher_forward(const TeacherSpec& spec, const SampleMeta& sample);

// Bilinear regrid of the patch tokens to (h, w); CLS row passes through.
// Identical grids return the input unchanged.
TokenSet align_token_grid(const TokenSet& t, std::size_t h, std::size_t w);

// FNV-1a over the raw bytes of every tensor, in enumeration order; used to
// assert that frozen parameters never change.
std::uint64_t params_checksum(const std::vector<std::pair<std::string, Tensor>>& params);

} // namespace dune
