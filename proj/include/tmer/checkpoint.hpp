#pragma once

// Text checkpoint format:
//
//   TMERCKPTv1
//   <name> <rows> <cols>
//   <row values separated by spaces>   (rows lines, shortest round-trip decimals)
//   ...
//
// Entries appear in the order the owner writes them; readers look them up by
// name. Values round-trip exactly.

#include "tmer/common.hpp"

#include <map>
#include <sstream>

namespace tmer::checkpoint {

inline constexpr std::string_view kMagic = "TMERCKPTv1";

class Writer {
 public:
  explicit Writer(std::ostream& os) : os_(os) { os_ << kMagic << '\n'; }

  template <class Derived>
  void put(std::string_view name, const Eigen::MatrixBase<Derived>& m) {
    os_ << name << ' ' << m.rows() << ' ' << m.cols() << '\n';
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) {
        if (c) os_ << ' ';
        os_ << format_double(m(r, c));
      }
      os_ << '\n';
    }
  }

  void put(std::string_view name, double v) {
    Eigen::Matrix<double, 1, 1> m;
    m(0, 0) = v;
    put(name, m);
  }

 private:
  std::ostream& os_;
};

class Reader {
 public:
  explicit Reader(std::istream& is) {
    std::string magic;
    if (!(is >> magic) || magic != kMagic) throw DataError("checkpoint: bad magic");
    std::string name;
    Eigen::Index rows = 0, cols = 0;
    while (is >> name >> rows >> cols) {
      Matrix m(rows, cols);
      for (Eigen::Index r = 0; r < rows; ++r) {
        for (Eigen::Index c = 0; c < cols; ++c) {
          std::string tok;
          if (!(is >> tok)) throw DataError("checkpoint: truncated entry " + name);
          m(r, c) = parse_double(tok);
        }
      }
      entries_[name] = std::move(m);
    }
  }

  const Matrix& matrix(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw DataError("checkpoint: missing entry " + name);
    return it->second;
  }

  Matrix matrix(const std::string& name, Eigen::Index rows, Eigen::Index cols) const {
    const Matrix& m = matrix(name);
    if (m.rows() != rows || m.cols() != cols) {
      throw DataError("checkpoint: entry " + name + " has shape " + std::to_string(m.rows()) +
                      "x" + std::to_string(m.cols()) + ", expected " + std::to_string(rows) +
                      "x" + std::to_string(cols));
    }
    return m;
  }

  Vector vector(const std::string& name) const {
    const Matrix& m = matrix(name);
    if (m.cols() != 1) throw DataError("checkpoint: entry " + name + " is not a column vector");
    return m.col(0);
  }

  double scalar(const std::string& name) const { return matrix(name, 1, 1)(0, 0); }

  bool has(const std::string& name) const { return entries_.count(name) > 0; }

 private:
  std::map<std::string, Matrix> entries_;
};

}  // namespace tmer::checkpoint
