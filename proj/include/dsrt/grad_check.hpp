// SPDX-License-Identifier: Apache-2.0
//
// Central finite-difference oracle for adjoint rules. Lives on the test side
// of the dual route: it evaluates the loss as a pure value function (no
// recording) and never reuses the analytic path it checks.
#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "dsrt/graph.hpp"
#include "dsrt/ops.hpp"
#include "dsrt/tensor.hpp"

namespace dsrt {

struct GradCheckReport {
    double max_rel_err = 0;
    double mean_rel_err = 0;
    size_t worst_tensor = 0;
    size_t worst_coord = 0;
    size_t n_coords = 0;
    bool pass = false;
};

// f evaluates a scalar loss from the current contents of `points` (leaf
// tensors, requires_grad set by the caller). Relative error uses
// |a - fd| / max(|a|, |fd|, 1e-3).
template <typename R, typename F>
GradCheckReport grad_check(F&& f, std::vector<Tensor<R>>& points, double step, double tolerance) {
    std::vector<Tensor<R>> analytic;
    {
        Graph<R> g;
        Tensor<R> loss = f();
        if (loss.numel() != 1) {
            throw ShapeError("grad_check: function must be scalar-valued, got " +
                             shape_str(loss.shape()));
        }
        g.backward(loss);
        for (auto& p : points) analytic.push_back(g.grad(p));
    }

    GradCheckReport rep;
    double err_sum = 0;
    NoGradScope ng;
    for (size_t pi = 0; pi < points.size(); ++pi) {
        Tensor<R>& p = points[pi];
        for (size_t ci = 0; ci < p.numel(); ++ci) {
            const R keep = p.at(ci);
            double fp, fm;
            try {
                p.at(ci) = keep + static_cast<R>(step);
                fp = static_cast<double>(f().scalar_value());
                p.at(ci) = keep - static_cast<R>(step);
                fm = static_cast<double>(f().scalar_value());
            } catch (const NumericError& e) {
                p.at(ci) = keep;
                throw NumericError("grad_check: non-finite probe at tensor " +
                                   std::to_string(pi) + " coord " + std::to_string(ci) + ": " +
                                   e.what());
            }
            p.at(ci) = keep;
            const double fd = (fp - fm) / (2.0 * step);
            const double an = static_cast<double>(analytic[pi].at(ci));
            const double denom = std::max({std::abs(an), std::abs(fd), 1e-3});
            const double rel = std::abs(an - fd) / denom;
            err_sum += rel;
            ++rep.n_coords;
            if (rel > rep.max_rel_err) {
                rep.max_rel_err = rel;
                rep.worst_tensor = pi;
                rep.worst_coord = ci;
            }
        }
    }
    rep.mean_rel_err = rep.n_coords ? err_sum / static_cast<double>(rep.n_coords) : 0.0;
    rep.pass = rep.max_rel_err < tolerance;
    return rep;
}

}  // namespace dsrt
