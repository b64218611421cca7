#ifndef CMONGE_TYPES_HPP
#define CMONGE_TYPES_HPP

#include <Eigen/Dense>

namespace cmonge {

/** Dense matrix; batches of points are stored one sample per row. */
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

}

#endif
