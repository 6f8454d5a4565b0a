#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>

#include "iclp/params.hpp"

namespace iclp {

// Central finite differences against a supplied analytic gradient map.
// Meant to run in double; float has nowhere near the headroom.
struct GradCheckResult {
    double max_rel_error = 0.0;
    std::string worst_param;
    int64_t worst_index = -1;
};

inline GradCheckResult finite_difference_check(
    const std::function<double(const ModuleParams<double>&)>& f, ModuleParams<double> params,
    const GradMap<double>& analytic, double eps = 1e-5) {
    GradCheckResult res;
    for (auto& [name, p] : params) {
        auto git = analytic.find(name);
        for (int64_t i = 0; i < p.size(); ++i) {
            double keep = p.data[i];
            p.data[i] = keep + eps;
            double fp = f(params);
            p.data[i] = keep - eps;
            double fm = f(params);
            p.data[i] = keep;
            if (!std::isfinite(fp) || !std::isfinite(fm))
                throw std::runtime_error("finite_difference_check: non-finite evaluation");
            double num = (fp - fm) / (2.0 * eps);
            double ana = (git == analytic.end()) ? 0.0 : git->second.data[i];
            double denom = std::max(std::abs(num), std::abs(ana));
            // Central differences carry ~|f|*1e-11 of roundoff at eps=1e-5, so a
            // relative comparison is meaningless once the gradient itself sinks
            // toward that floor; fall back to absolute error there.
            double err;
            if (denom < 1e-6) {
                err = std::abs(num - ana);
            } else {
                err = std::abs(num - ana) / denom;
            }
            if (err > res.max_rel_error) {
                res.max_rel_error = err;
                res.worst_param = name;
                res.worst_index = i;
            }
        }
    }
    return res;
}

}  // namespace iclp
