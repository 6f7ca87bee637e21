#pragma once

#include <flowguide/rng.hpp>
#include <flowguide/tensor.hpp>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

namespace fgtest {

using flowguide::Pcg32;
using flowguide::Shape;
using flowguide::Tensor;

template <typename S>
Tensor<S> random_tensor(Shape shape, Pcg32& rng, bool requires_grad = false, double scale = 1.0) {
    std::vector<S> v(static_cast<size_t>(flowguide::shape_numel(shape)));
    for (auto& x : v) x = static_cast<S>(rng.normal() * scale);
    return Tensor<S>::from_data(std::move(shape), std::move(v), requires_grad);
}

inline bool close(double a, double b, double rtol = 1e-4, double atol = 1e-7) {
    return std::abs(a - b) <= std::max(atol, rtol * std::max(std::abs(a), std::abs(b)));
}

// max relative error with an absolute floor, as used by the gradient checks
inline double max_rel_err(const std::vector<double>& got, const std::vector<double>& want,
                          double atol = 1e-7) {
    double worst = 0.0;
    for (size_t i = 0; i < got.size(); ++i) {
        double denom = std::max(atol, std::max(std::abs(got[i]), std::abs(want[i])));
        worst        = std::max(worst, std::abs(got[i] - want[i]) / denom);
    }
    return worst;
}

template <typename S>
std::vector<double> to_doubles(const std::vector<S>& v) {
    return std::vector<double>(v.begin(), v.end());
}

inline std::filesystem::path temp_dir(const std::string& tag) {
    auto p = std::filesystem::temp_directory_path() / ("flowguide_test_" + tag + "_" + std::to_string(::getpid()));
    std::filesystem::create_directories(p);
    return p;
}

}  // namespace fgtest
