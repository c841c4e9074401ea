#pragma once

#include <cstddef>

#include "deltakv/errors.hpp"

namespace deltakv {

struct BudgetRatios {
    double keep_ratio = 0.0;     // KR
    double compute_ratio = 0.0;  // CR by the layer-weighted formula
    double budget = 0.0;         // the bare r of the sparse layers
};

// KR = L_full/L + (L_sparse/L) * (1/s + latent_ratio/q), with
// latent_ratio = d_c / 2d_k and q the byte shrink from quantization.
// CR = L_full/L + (L_sparse/L) * r.
inline BudgetRatios compute_budget_ratios(std::size_t l_full, std::size_t l_total, std::size_t stride,
                                          double latent_ratio, double q, double r) {
    if (l_total == 0 || l_full > l_total) throw ConfigError("compute_budget_ratios: need 0 <= L_full <= L_total, L_total >= 1");
    if (stride == 0) throw ConfigError("compute_budget_ratios: stride must be >= 1");
    if (!(q > 0.0)) throw ConfigError("compute_budget_ratios: q must be positive");
    if (!(r > 0.0 && r <= 1.0)) throw ConfigError("compute_budget_ratios: r must be in (0, 1]");
    const double full = static_cast<double>(l_full) / static_cast<double>(l_total);
    const double sparse = static_cast<double>(l_total - l_full) / static_cast<double>(l_total);
    BudgetRatios out;
    out.keep_ratio = full + sparse * (1.0 / static_cast<double>(stride) + latent_ratio / q);
    out.compute_ratio = full + sparse * r;
    out.budget = r;
    return out;
}

}  // namespace deltakv
