#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dcl/rng.hpp"
#include "dcl/tensor.hpp"

namespace dcl {

/// Worst relative error between the taped gradient of `loss` and central
/// finite differences over the given parameters. Every coordinate of a
/// parameter is probed when it has at most `probe_cap` of them, otherwise a
/// random sample of `probe_cap` distinct coordinates. The closure must be
/// pure: identical parameter contents produce an identical scalar. It runs
/// once under a tape for the analytic gradients and twice per probe without
/// one. Parameters the loss never touches are required to have zero
/// gradient, which central differences confirm.
double max_grad_rel_error(const std::function<Tensor()>& loss, const std::vector<Tensor>& params,
                          size_t probe_cap, double step, Rng& rng);

struct GradCheckCase {
    std::string name;
    size_t seeds = 0;
    double worst_rel_error = 0.0;
};

/// Deterministic finite-difference sweep over the whole differentiable
/// surface: each contrastive loss variant (global, both negative modes;
/// dense with global negatives; dense with dense + cross-view negatives;
/// multi-positive), the reconstruction and combined objectives, the encoder,
/// both projection heads, and all three decoder kinds. Each case is
/// instantiated fresh per seed; the reported error is the worst across
/// `seeds_per_case` seeds.
std::vector<GradCheckCase> gradcheck_suite(size_t seeds_per_case);

}  // namespace dcl
