#pragma once

// Test-only finite-difference oracle. Rebuilds the computation from scratch
// for every perturbed evaluation via the supplied builder, so it shares no
// machinery with Graph::backward or Graph::recompute.

#include <cmath>
#include <functional>
#include <vector>

#include "levi/tensor.hpp"

namespace testutil {

// builder: evaluates the scalar loss for the given parameter tensors
using LossFn = std::function<double(const std::vector<levi::Tensor>&)>;

struct FdResult {
    std::vector<levi::Tensor> grads; // same shapes as params
    double max_rel_err_vs = 0.0;     // filled by compare()
};

inline std::vector<levi::Tensor> central_differences(const LossFn& loss, std::vector<levi::Tensor> params,
                                                     double step = 1e-5) {
    std::vector<levi::Tensor> grads;
    grads.reserve(params.size());
    for (std::size_t p = 0; p < params.size(); ++p) {
        levi::Tensor g = levi::Tensor::zeros(params[p].shape);
        for (levi::Extent i = 0; i < params[p].numel(); ++i) {
            const double saved = params[p].at(i);
            params[p].at(i) = saved + step;
            const double up = loss(params);
            params[p].at(i) = saved - step;
            const double down = loss(params);
            params[p].at(i) = saved;
            g.at(i) = (up - down) / (2.0 * step);
        }
        grads.push_back(std::move(g));
    }
    return grads;
}

inline double max_rel_err(const levi::Tensor& autodiff, const levi::Tensor& fd) {
    double worst = 0.0;
    for (levi::Extent i = 0; i < fd.numel(); ++i) {
        const double rel = std::abs(autodiff.at(i) - fd.at(i)) / std::max(1.0, std::abs(fd.at(i)));
        worst = std::max(worst, rel);
    }
    return worst;
}

} // namespace testutil
