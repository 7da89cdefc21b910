#pragma once

#include <string>
#include <vector>

namespace dune {

struct GradCheckEntry {
    std::string name;
    double max_rel_err = 0.0;
};

inline constexpr double kGradCheckStep = 1e-5;
inline constexpr double kGradCheckTol = 1e-4;

// Central-difference verification of every differentiable primitive plus
// encoder -> SP/LP/TP -> cosine+smooth-l1 composites, on fixed seeds. Every
// entry is expected below kGradCheckTol.
std::vector<GradCheckEntry> run_gradcheck();

} // namespace dune
