// Shared test scaffolding: finite differences and error metrics.
#pragma once

#include <cmath>
#include <functional>

namespace testutil {

// Central finite difference of a scalar function of one scalar.
inline double fd_central(const std::function<double(double)>& f, double x,
                         double h = 1e-5) {
    return (f(x + h) - f(x - h)) / (2.0 * h);
}

inline double rel_err(double got, double want) {
    const double denom = std::max({std::fabs(got), std::fabs(want), 1e-10});
    return std::fabs(got - want) / denom;
}

}  // namespace testutil
