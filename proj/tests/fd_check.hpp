#ifndef FDIFF_TESTS_FD_CHECK_HPP
#define FDIFF_TESTS_FD_CHECK_HPP

#include <cmath>
#include <functional>
#include <vector>

#include "fdiff/tensor.hpp"

// Central finite-difference gradient oracle. `loss_fn` rebuilds the graph
// from the current leaf values and returns the scalar loss. Returns the max
// relative error between analytic and FD gradients over every element of
// every leaf.
inline double fd_max_rel_err(std::vector<fdiff::Tensor<double>*> leaves,
                             const std::function<fdiff::Tensor<double>()>& loss_fn,
                             double h = 1e-5) {
    using fdiff::Tensor;
    for (auto* l : leaves) l->zero_grad();
    Tensor<double> loss = loss_fn();
    fdiff::backward(loss);

    double worst = 0.0;
    for (auto* leaf : leaves) {
        for (size_t i = 0; i < leaf->numel(); ++i) {
            const double x0 = (*leaf->data)[i];
            const double step = h * std::max(1.0, std::abs(x0));
            (*leaf->data)[i] = x0 + step;
            double fp = (*loss_fn().data)[0];
            (*leaf->data)[i] = x0 - step;
            double fm = (*loss_fn().data)[0];
            (*leaf->data)[i] = x0;
            const double g_fd = (fp - fm) / (2.0 * step);
            const double g = (*leaf->grad)[i];
            const double denom = std::max({std::abs(g), std::abs(g_fd), 1e-3});
            worst = std::max(worst, std::abs(g - g_fd) / denom);
        }
    }
    return worst;
}

#endif
