#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dune/data.hpp"
#include "dune/loss.hpp"
#include "dune/projector.hpp"
#include "dune/vit.hpp"

namespace dune {

// Teacher declaration as written in the config; zero-valued architecture
// fields inherit the student's.
struct TeacherDecl {
    std::string id;
    std::uint64_t seed = 0;
    bool seed_set = false; // default seed is a hash of the id
    std::size_t width = 0;
    std::size_t depth = 0;
    std::size_t heads = 0;
    std::size_t patch_size = 0;
    double mlp_ratio = 0.0;
    ProjectorKind projector = ProjectorKind::TP;
    std::string features; // path -> file-backed teacher

    std::uint64_t effective_seed() const { return seed_set ? seed : fnv1a64(id); }
    // student geometry (image size, channels, flags) with this teacher's overrides
    ViTConfig resolve_arch(const ViTConfig& student) const;
};

struct TrainSection {
    std::size_t steps = 500;
    std::size_t batch_per_teacher = 4; // the k of the balanced composer
    double keep_prob = 1.0;
    std::uint64_t seed = 42;
    std::string out_dir = "out";
    std::size_t checkpoint_every = 0; // 0 = final checkpoint only
};

struct OptimSection {
    bool lr_auto = true;   // lr_max = 3e-4 * batch / 256
    double lr_max = 0.0;   // explicit override when lr_auto is false
    double lr_min = 1e-6;
    double weight_decay = 3e-2;
    double beta1 = 0.9;
    double beta2 = 0.99;
    double eps = 1e-8;
    double clip_norm = 0.0; // 0 = off
};

struct RunConfig {
    ViTConfig student;
    std::vector<TeacherDecl> teachers; // declaration order
    std::vector<DatasetManifest> datasets;
    ShareStrategy strategy = ShareStrategy::FullSharing;
    TrainSection train;
    OptimSection optim;

    std::size_t group_count() const; // teachers + 1 when generic datasets exist
    std::size_t batch_size() const { return group_count() * train.batch_per_teacher; }
    double resolved_lr_max() const;
    std::vector<std::string> teacher_ids() const;

    void validate() const; // throws ConfigError naming the violated constraint
};

// Flat line grammar: `section.key = value`, '#' comments, blank lines
// ignored; unknown keys rejected by name. DUNE_SEED_OVERRIDE (integer env
// var) replaces train.seed after parsing.
RunConfig parse_config(const std::string& path);
RunConfig parse_config_text(const std::string& text, const std::string& origin = "<string>");

// canonical echo of the effective config (all defaults filled in)
std::string render_config(const RunConfig& cfg);

} // namespace dune
