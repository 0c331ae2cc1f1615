#pragma once

#include <Eigen/Core>

namespace attni2i {

// GEMM worker count. Every other code path is single-threaded, so 1 here
// makes the whole process single-threaded (the deterministic mode contract).
inline void set_num_threads(int n) { Eigen::setNbThreads(n < 1 ? 1 : n); }

inline int num_threads() { return Eigen::nbThreads(); }

}  // namespace attni2i
