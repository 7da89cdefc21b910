#pragma once

#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "dune/config.hpp"
#include "dune/loss.hpp"

namespace dune {

// half-cosine from lr_max at step 0 to lr_min at step == total_steps
double cosine_lr(std::size_t step, std::size_t total_steps, double lr_max, double lr_min);

struct OptimState {
    std::vector<Tensor> m, v; // aligned with the parameter list
    std::uint64_t step = 0;   // completed updates
};

OptimState init_optim_state(const std::vector<std::pair<std::string, Tensor>>& params);

// AdamW with decoupled weight decay and bias correction. Parameters whose
// grad buffer was never touched this step update with g = 0.
void adamw_step(std::vector<std::pair<std::string, Tensor>>& params, OptimState& state,
                const OptimSection& opt, double lr);

// Versioned binary container, magic "DUNECKPT", little-endian, f64 payloads;
// save -> load -> save is byte-identical.
struct Checkpoint {
    std::uint64_t step = 0;
    std::uint64_t opt_step = 0;
    std::uint64_t batch_rng_state = 0;
    std::uint64_t drop_rng_state = 0;
    std::vector<std::pair<std::string, Tensor>> params;
    std::vector<std::pair<std::string, Tensor>> opt_m;
    std::vector<std::pair<std::string, Tensor>> opt_v;

    void save(const std::string& path) const;
    static Checkpoint load(const std::string& path);
};

// Everything a run needs, materialized from a config: the trainable student
// and projectors, the frozen teachers, and the dataset registry.
struct Engine {
    RunConfig config;
    ViTParams student;
    std::vector<TeacherSpec> teachers;
    std::vector<ProjectorParams> projectors; // aligned with teachers
    DatasetRegistry registry;
    bool needs_intermediates = false; // any ladder projector present

    static Engine build(const RunConfig& cfg);

    // "student.*" then "proj.<teacher>.*", in declaration order
    std::vector<std::pair<std::string, Tensor>> trainable_params() const;
    void set_trainable(bool on);

    // strict by-name restore of trainable parameters
    void load_params(const Checkpoint& ck);

    TokenSet student_forward(const Tensor& image, std::vector<TokenSet>* intermediates) const;
};

struct TrainResult {
    std::string checkpoint_path;
    std::string log_path;
    double first_total = 0.0;
    double final_total = 0.0;
};

// The full loop: balanced batch -> student forward -> projectors -> frozen
// teacher targets -> share mask -> teacher drop -> loss -> backward -> AdamW.
// Deterministic for a fixed config; writes config.echo, log.csv and
// checkpoints under train.out_dir.
TrainResult train(const RunConfig& cfg, std::ostream* progress = nullptr);

struct ProbeResult {
    Tensor head_w, head_b;
    double train_accuracy = 0.0;
    double accuracy = 0.0; // held-out
};

// Binary stripe-orientation task on frozen pooled features; only the linear
// head trains. `projector` may be null for raw encoder features.
ProbeResult linear_probe(const ViTParams& student, const ProjectorParams* projector,
                         std::size_t epochs, std::uint64_t seed);

} // namespace dune
