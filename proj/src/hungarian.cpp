#include "apex/hungarian.hpp"

#include <stdexcept>
#include <string>

namespace apex {

std::vector<std::size_t> solve_assignment(const std::vector<double>& cost,
                                          std::size_t rows, std::size_t cols) {
  if (rows > cols)
    throw std::invalid_argument("solve_assignment: " + std::to_string(rows) +
                                " rows exceed " + std::to_string(cols) +
                                " columns");
  if (cost.size() != rows * cols)
    throw std::invalid_argument("solve_assignment: cost size " +
                                std::to_string(cost.size()) + " != " +
                                std::to_string(rows * cols));
  if (rows == 0) return {};

  const double kInf = 1e100;
  // 1-based arrays; p[j] = row currently assigned to column j, 0 = free.
  std::vector<double> u(rows + 1, 0.0), v(cols + 1, 0.0);
  std::vector<int> p(cols + 1, 0), way(cols + 1, 0);
  for (std::size_t i = 1; i <= rows; ++i) {
    p[0] = static_cast<int>(i);
    int j0 = 0;
    std::vector<double> minv(cols + 1, kInf);
    std::vector<char> used(cols + 1, 0);
    do {
      used[j0] = 1;
      int i0 = p[j0], j1 = -1;
      double delta = kInf;
      for (std::size_t j = 1; j <= cols; ++j) {
        if (used[j]) continue;
        double cur = cost[(i0 - 1) * cols + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = static_cast<int>(j);
        }
      }
      for (std::size_t j = 0; j <= cols; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {  // augment along the recorded path
      int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  std::vector<std::size_t> row_to_col(rows);
  for (std::size_t j = 1; j <= cols; ++j)
    if (p[j] > 0) row_to_col[p[j] - 1] = j - 1;
  return row_to_col;
}

}  // namespace apex
