#pragma once

#include <Eigen/Core>

namespace sketchcl {

// Batches are stored one sample per row.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::RowVectorXd;

}  // namespace sketchcl
