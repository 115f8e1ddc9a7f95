#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <unistd.h>

#include "cwsam/autograd.hpp"
#include "cwsam/matrix.hpp"

namespace testing {

inline cwsam::Matrix random_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double lo = -1.0,
                                   double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    cwsam::Matrix m(rows, cols);
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = u(rng);
    return m;
}

inline double max_abs_diff(const cwsam::Matrix& a, const cwsam::Matrix& b) {
    double d = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
    return d;
}

// |a - b| / max(|a|, |b|, floor)
inline double rel_err(double a, double b, double floor = 1e-8) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

// Worst relative error between backward() and central differences over every
// entry of every leaf. `f` must rebuild the graph from the leaves' current values.
inline double gradcheck(std::span<cwsam::ag::Var> leaves, const std::function<cwsam::ag::Var()>& f,
                        double h = 1e-6) {
    for (auto& l : leaves) l.zero_grad();
    cwsam::ag::backward(f());
    double worst = 0.0;
    for (auto& l : leaves) {
        const cwsam::Matrix analytic = l.has_grad() ? l.grad() : cwsam::Matrix(l.rows(), l.cols());
        for (std::size_t i = 0; i < l.value().size(); ++i) {
            const double keep = l.value()[i];
            l.mutable_value()[i] = keep + h;
            const double up = f().value()[0];
            l.mutable_value()[i] = keep - h;
            const double down = f().value()[0];
            l.mutable_value()[i] = keep;
            worst = std::max(worst, rel_err(analytic[i], (up - down) / (2 * h), 1e-6));
        }
    }
    return worst;
}

class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static int counter = 0;
        path_ = std::filesystem::temp_directory_path() /
                ("cwsam-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

private:
    std::filesystem::path path_;
};

}  // namespace testing
