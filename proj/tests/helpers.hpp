#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <unistd.h>

#include <gtest/gtest.h>

#include "cmidd/autodiff.hpp"
#include "cmidd/error.hpp"

namespace cmidd::testing {

/// Scratch directory removed on destruction.
class TempDir {
public:
    TempDir() {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("cmidd-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
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

inline ::testing::AssertionResult throws_kind(const std::function<void()>& fn, ErrorKind kind) {
    try {
        fn();
    } catch (const Error& e) {
        if (e.kind() == kind) return ::testing::AssertionSuccess();
        return ::testing::AssertionFailure() << "threw " << to_string(e.kind()) << " (" << e.what() << "), expected "
                                             << to_string(kind);
    } catch (const std::exception& e) {
        return ::testing::AssertionFailure() << "threw a foreign exception: " << e.what();
    }
    return ::testing::AssertionFailure() << "nothing thrown, expected " << to_string(kind);
}

}  // namespace cmidd::testing

#define EXPECT_ERROR_KIND(stmt, kind) EXPECT_TRUE(::cmidd::testing::throws_kind([&] { (void)(stmt); }, kind))

namespace cmidd::testing {

/// Central differences of a scalar function of a matrix.
template <class F>
ad::Matrix numeric_gradient(F&& f, ad::Matrix x, double h = 1e-5) {
    ad::Matrix g(x.rows, x.cols);
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double keep = x.data[i];
        x.data[i] = keep + h;
        const double up = f(x);
        x.data[i] = keep - h;
        const double down = f(x);
        x.data[i] = keep;
        g.data[i] = (up - down) / (2 * h);
    }
    return g;
}

/// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor)
inline double max_relative_error(const ad::Matrix& a, const ad::Matrix& b, double floor = 1e-8) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        double scale = std::max({std::abs(a.data[i]), std::abs(b.data[i]), floor});
        worst = std::max(worst, std::abs(a.data[i] - b.data[i]) / scale);
    }
    return worst;
}

inline ad::Matrix random_matrix(std::size_t r, std::size_t c, std::mt19937_64& gen, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    ad::Matrix m(r, c);
    for (auto& v : m.data) v = u(gen);
    return m;
}

}  // namespace cmidd::testing
