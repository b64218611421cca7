#ifndef CMONGE_TESTS_ORACLES_HPP
#define CMONGE_TESTS_ORACLES_HPP

// Independent reference computations used only by the tests. Nothing here calls
// into the library code paths it is used to check.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <numeric>
#include <random>
#include <vector>

namespace oracle {

using Matrix = Eigen::MatrixXd;

inline Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed, double scale = 1.0, double shift = 0.0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, 1.0);
    Matrix out(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
        for (Eigen::Index j = 0; j < cols; ++j) {
            out(i, j) = shift + scale * dist(rng);
        }
    }
    return out;
}

inline Matrix brute_force_cost(const Matrix& x, const Matrix& y) {
    Matrix out(x.rows(), y.rows());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        for (Eigen::Index j = 0; j < y.rows(); ++j) {
            double acc = 0;
            for (Eigen::Index k = 0; k < x.cols(); ++k) {
                acc += std::pow(x(i, k) - y(j, k), 2);
            }
            out(i, j) = acc;
        }
    }
    return out;
}

// Minimum mean assignment cost over all permutations.
inline double permutation_ot(const Matrix& x, const Matrix& y) {
    const auto n = static_cast<int>(x.rows());
    std::vector<int> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    double best = INFINITY;
    do {
        double total = 0;
        for (int i = 0; i < n; ++i) {
            double acc = 0;
            for (Eigen::Index k = 0; k < x.cols(); ++k) {
                acc += std::pow(x(i, k) - y(perm[i], k), 2);
            }
            total += acc;
        }
        best = std::min(best, total / n);
    } while (std::next_permutation(perm.begin(), perm.end()));
    return best;
}

// Central differences of a scalar function of a matrix, entry by entry.
inline Matrix finite_difference(const std::function<double(const Matrix&)>& fn, const Matrix& at, double h) {
    Matrix grad(at.rows(), at.cols());
    Matrix probe = at;
    for (Eigen::Index i = 0; i < at.rows(); ++i) {
        for (Eigen::Index j = 0; j < at.cols(); ++j) {
            const double orig = probe(i, j);
            probe(i, j) = orig + h;
            const double up = fn(probe);
            probe(i, j) = orig - h;
            const double down = fn(probe);
            probe(i, j) = orig;
            grad(i, j) = (up - down) / (2 * h);
        }
    }
    return grad;
}

// Largest entrywise error relative to the largest gradient magnitude.
inline double relative_error(const Matrix& got, const Matrix& expected) {
    const double scale = std::max(expected.cwiseAbs().maxCoeff(), 1e-12);
    return (got - expected).cwiseAbs().maxCoeff() / scale;
}

inline double naive_gelu(double x) {
    // x * Phi(x) with Phi from erf
    return x * 0.5 * (1.0 + std::erf(x / std::sqrt(2.0)));
}

// Network given as a list of (weight out x in, bias out); GELU on all but the last layer.
// Evaluated one scalar at a time.
struct NaiveLayer {
    Matrix w;
    Eigen::VectorXd b;
};

inline Matrix naive_mlp(const std::vector<NaiveLayer>& layers, const Matrix& input) {
    Matrix out(input.rows(), layers.back().w.rows());
    for (Eigen::Index r = 0; r < input.rows(); ++r) {
        std::vector<double> act(input.cols());
        for (Eigen::Index c = 0; c < input.cols(); ++c) {
            act[c] = input(r, c);
        }
        for (std::size_t k = 0; k < layers.size(); ++k) {
            std::vector<double> next(layers[k].w.rows());
            for (Eigen::Index o = 0; o < layers[k].w.rows(); ++o) {
                double acc = layers[k].b[o];
                for (Eigen::Index i = 0; i < layers[k].w.cols(); ++i) {
                    acc += layers[k].w(o, i) * act[i];
                }
                next[o] = (k + 1 < layers.size()) ? naive_gelu(acc) : acc;
            }
            act = std::move(next);
        }
        for (std::size_t c = 0; c < act.size(); ++c) {
            out(r, c) = act[c];
        }
    }
    return out;
}

// Unbiased MMD^2 with an RBF kernel exp(-|x-y|^2 / (2 s^2)) averaged over bandwidths s.
inline double naive_mmd(const Matrix& a, const Matrix& b, const std::vector<double>& bandwidths) {
    auto k = [&](const Eigen::RowVectorXd& x, const Eigen::RowVectorXd& y) {
        double d2 = (x - y).squaredNorm();
        double acc = 0;
        for (double s : bandwidths) {
            acc += std::exp(-d2 / (2 * s * s));
        }
        return acc / static_cast<double>(bandwidths.size());
    };
    const double n = a.rows(), m = b.rows();
    double xx = 0, yy = 0, xy = 0;
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
        for (Eigen::Index j = 0; j < a.rows(); ++j) {
            if (i != j) {
                xx += k(a.row(i), a.row(j));
            }
        }
    }
    for (Eigen::Index i = 0; i < b.rows(); ++i) {
        for (Eigen::Index j = 0; j < b.rows(); ++j) {
            if (i != j) {
                yy += k(b.row(i), b.row(j));
            }
        }
    }
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
        for (Eigen::Index j = 0; j < b.rows(); ++j) {
            xy += k(a.row(i), b.row(j));
        }
    }
    return xx / (n * (n - 1)) + yy / (m * (m - 1)) - 2 * xy / (n * m);
}

// Fresh scratch directory under the system temp dir, removed by the destructor.
struct ScratchDir {
    std::filesystem::path path;

    explicit ScratchDir(const std::string& name) : path(std::filesystem::temp_directory_path() / ("cmonge_test_" + name)) {
        std::filesystem::remove_all(path);
        std::filesystem::create_directories(path);
    }
    ~ScratchDir() {
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }

    std::string file(const std::string& name) const { return (path / name).string(); }
};

}

#endif
