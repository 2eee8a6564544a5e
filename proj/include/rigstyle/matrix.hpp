#pragma once

#include <Eigen/Dense>

namespace rigstyle {

using Index = Eigen::Index;

/// Row-major dense matrix used for every frame / feature table in the library.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

}  // namespace rigstyle
