#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>

#include "mam/errors.hpp"
#include "mam/tensor.hpp"

namespace mam {

// 8-bit binary PGM (P5), min-max normalized per image. A degenerate range
// maps everything to 0, so the output is always byte-deterministic.
inline void write_pgm(const TensorF& matrix, const std::string& path) {
  if (matrix.rank() != 2) throw ShapeError("write_pgm: matrix must be 2-D");
  float lo = matrix.data[0], hi = matrix.data[0];
  for (float v : matrix.data) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw DataError("cannot write image: " + path);
    f << "P5\n" << matrix.cols() << " " << matrix.rows() << "\n255\n";
    double range = static_cast<double>(hi) - lo;
    for (float v : matrix.data) {
      int byte = 0;
      if (range > 0.0)
        byte = static_cast<int>(std::lround(255.0 * (v - lo) / range));
      f.put(static_cast<char>(byte));
    }
    if (!f) throw DataError("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace mam
