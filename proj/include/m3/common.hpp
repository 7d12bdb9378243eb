#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace m3 {

using Dim = Eigen::Index;
using Shape = std::vector<Dim>;

template <class S>
using Array = Eigen::Array<S, Eigen::Dynamic, 1>;

template <class S>
using MatrixRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline Dim shape_size(const Shape& s) {
  Dim n = 1;
  for (Dim d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ", ";
    os << s[i];
  }
  os << "]";
  return os.str();
}

[[noreturn]] inline void fail(const std::string& msg) { throw std::runtime_error(msg); }

inline void require(bool ok, const std::string& msg) {
  if (!ok) fail(msg);
}

// Deterministic stream for a (master seed, stream index) pair.
inline std::mt19937_64 seeded_rng(std::uint64_t seed, std::uint64_t stream = 0) {
  std::seed_seq seq{seed, stream ^ std::uint64_t{0x9e3779b97f4a7c15}};
  return std::mt19937_64(seq);
}

}  // namespace m3
