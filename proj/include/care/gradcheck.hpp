#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "care/tensor.hpp"

namespace care {

// Central-difference gradient verification. Meant to run on the double-
// precision instantiation of the engine; float noise swamps the tolerances.
//
// Returns max over checked coordinates of |analytic - fd| / max(1, |analytic|).
// When max_coords > 0 and x has more coordinates than that, a deterministic
// evenly-strided subset is checked instead of every coordinate.
template <typename S>
double finite_diff_check(const std::function<TensorT<S>(TensorT<S>&)>& f, TensorT<S>& x,
                         double h, std::size_t max_coords = 0) {
    x.set_requires_grad(true);
    TensorT<S> loss = f(x);
    if (loss.numel() != 1) throw ContractError("finite_diff_check: f must be scalar-valued");
    backward(loss);
    std::vector<S> analytic = x.grad();
    x.set_requires_grad(false);

    std::size_t n = x.numel();
    std::size_t stride = 1;
    if (max_coords > 0 && n > max_coords) stride = (n + max_coords - 1) / max_coords;

    double max_rel = 0.0;
    for (std::size_t i = 0; i < n; i += stride) {
        const S saved = x.data()[i];
        x.data()[i] = saved + static_cast<S>(h);
        const double fp = static_cast<double>(f(x).item());
        x.data()[i] = saved - static_cast<S>(h);
        const double fm = static_cast<double>(f(x).item());
        x.data()[i] = saved;
        const double fd = (fp - fm) / (2.0 * h);
        const double a = static_cast<double>(analytic[i]);
        if (!std::isfinite(fd) || !std::isfinite(a))
            throw NonFiniteError("finite_diff_check: non-finite value at coordinate " +
                                 std::to_string(i));
        const double rel = std::abs(a - fd) / std::max(1.0, std::abs(a));
        max_rel = std::max(max_rel, rel);
    }
    return max_rel;
}

}  // namespace care
