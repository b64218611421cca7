#ifndef CMONGE_ERROR_HPP
#define CMONGE_ERROR_HPP

#include <stdexcept>
#include <string>

/**
 * @file error.hpp
 *
 * @brief Exception hierarchy shared by every module.
 *
 * Three families are distinguished so that callers (the CLI in particular) can
 * map failures onto exit codes: bad configuration or arguments, bad input data,
 * and numerical failure of an otherwise well-posed computation.
 */

namespace cmonge {

/**
 * Invalid argument, shape mismatch or inconsistent configuration.
 */
class ConfigError : public std::invalid_argument {
public:
    explicit ConfigError(const std::string& what) : std::invalid_argument(what) {}
};

/**
 * Malformed or non-conforming input data (files, non-finite values, missing populations).
 */
class DataError : public std::runtime_error {
public:
    explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

/**
 * A solver did not converge or produced non-finite values.
 */
class NumericalError : public std::runtime_error {
public:
    explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

namespace detail {

inline void require(bool ok, const std::string& msg) {
    if (!ok) {
        throw ConfigError(msg);
    }
}

}

}

#endif
