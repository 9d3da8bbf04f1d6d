#pragma once

// Finite-difference verification of ELBO parameter gradients. Used by
// the unit tests and by the acceptance suite.

#include <functional>
#include <string>
#include <vector>

#include "kmmvae/autodiff.hpp"
#include "kmmvae/models.hpp"

namespace gradcheck {

struct Result {
    double max_rel_err = 0.0;
    std::string worst_param;
    std::size_t checked = 0;
    std::size_t violations = 0;
};

// Central differences with step h against the reverse-mode gradient of
// a scalar objective rebuilt by eval(). Relative error is guarded by
// max(|g|, |fd|, 1).
inline Result check_parameters(const std::vector<kmmvae::models::ParamRef>& params,
                               const std::function<double()>& eval,
                               const std::function<void()>& compute_grads, double h, double tol) {
    namespace ad = kmmvae::autodiff;
    for (const auto& p : params) p.tensor.zero_grad();
    compute_grads();

    Result res;
    for (const auto& p : params) {
        ad::Tensor t = p.tensor;
        std::vector<double> base(t.values().begin(), t.values().end());
        std::vector<double> work = base;
        auto grad = t.grad();
        for (std::size_t i = 0; i < base.size(); ++i) {
            work[i] = base[i] + h;
            t.set_values(work);
            double fp = eval();
            work[i] = base[i] - h;
            t.set_values(work);
            double fm = eval();
            work[i] = base[i];
            t.set_values(work);
            double fd = (fp - fm) / (2.0 * h);
            double g = grad[i];
            double rel = std::abs(g - fd) / std::max({std::abs(g), std::abs(fd), 1.0});
            ++res.checked;
            if (rel > res.max_rel_err) {
                res.max_rel_err = rel;
                res.worst_param = p.name + "[" + std::to_string(i) + "]";
            }
            if (rel > tol) ++res.violations;
        }
    }
    return res;
}

} // namespace gradcheck
