// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <string>
#include <vector>

#include "moelab/rng.hpp"
#include "moelab/tensor.hpp"

namespace moelab {

struct GradCheckReport {
    bool pass = false;
    float max_rel_err = 0.0f;
    std::string worst_tensor;
    int worst_index = -1;
    float worst_analytic = 0.0f;
    float worst_numeric = 0.0f;
    int n_checked = 0;

    std::string summary() const {
        return std::string(pass ? "PASS" : "FAIL") + " max_rel_err=" + std::to_string(max_rel_err) +
               " at " + (worst_tensor.empty() ? "<unnamed>" : worst_tensor) + "[" +
               std::to_string(worst_index) + "] analytic=" + std::to_string(worst_analytic) +
               " numeric=" + std::to_string(worst_numeric) + " coords=" + std::to_string(n_checked);
    }
};

struct GradCheckOptions {
    float h = 4e-3f;        // central-difference step; balances curvature vs fp32 noise
    float tol = 5e-3f;      // max relative error to pass
    int max_coords = 256;   // sampled coordinates across all params
    float floor = 2e-2f;    // relative-error denominator floor (fp32 FD noise)
    uint64_t seed = 0;
};

// Central-difference check of d f / d params on a sampled coordinate subset.
// f must be deterministic; it is evaluated with a tape once for the analytic
// gradient and twice per sampled coordinate without one.
inline GradCheckReport grad_check(const std::function<Tensor(Tape*)>& f, std::vector<Tensor> params,
                                  const GradCheckOptions& opt = {}) {
    if (opt.h < 1e-4f || opt.h > 1e-2f) throw ArgError("grad_check h outside [1e-4, 1e-2]");
    for (auto& p : params) {
        p.set_requires_grad();
        p.zero_grad();
    }
    Tape tape;
    Tensor loss = f(&tape);
    if (!loss.all_finite()) throw EvalError("grad_check: objective is non-finite");
    backward(loss, tape);

    // Enumerate (param, index) pairs and sample without replacement.
    size_t total = 0;
    for (const auto& p : params) total += p.numel();
    std::vector<size_t> coords(total);
    for (size_t i = 0; i < total; ++i) coords[i] = i;
    Rng rng(opt.seed, "grad_check");
    const size_t n_check = std::min<size_t>(static_cast<size_t>(opt.max_coords), total);
    for (size_t i = 0; i < n_check; ++i) {
        const size_t j = i + rng.next_below(total - i);
        std::swap(coords[i], coords[j]);
    }

    GradCheckReport rep;
    rep.pass = true;
    rep.n_checked = static_cast<int>(n_check);
    for (size_t c = 0; c < n_check; ++c) {
        size_t flat = coords[c];
        size_t pi = 0;
        while (flat >= params[pi].numel()) {
            flat -= params[pi].numel();
            ++pi;
        }
        Tensor& p = params[pi];
        const float orig = p.values()[flat];
        p.values()[flat] = orig + opt.h;
        const float f_plus = f(nullptr).item();
        p.values()[flat] = orig - opt.h;
        const float f_minus = f(nullptr).item();
        p.values()[flat] = orig;
        if (!std::isfinite(f_plus) || !std::isfinite(f_minus))
            throw EvalError("grad_check: objective non-finite under perturbation of " + p.name());
        const float numeric = (f_plus - f_minus) / (2.0f * opt.h);
        const float analytic = p.grad()[flat];
        const float denom = std::max({std::abs(numeric), std::abs(analytic), opt.floor});
        const float rel = std::abs(numeric - analytic) / denom;
        if (rel > rep.max_rel_err) {
            rep.max_rel_err = rel;
            rep.worst_tensor = p.name();
            rep.worst_index = static_cast<int>(flat);
            rep.worst_analytic = analytic;
            rep.worst_numeric = numeric;
        }
    }
    rep.pass = rep.max_rel_err <= opt.tol;
    return rep;
}

}  // namespace moelab
