#pragma once

#include <cstddef>
#include <vector>

namespace apex {

// Minimum-cost assignment of each row to a distinct column, rows <= cols.
// cost is row-major rows x cols. Returns the column chosen for each row.
// Jonker-Volgenant shortest augmenting paths; ties resolve to the lowest
// column index scanned first, which makes the result deterministic.
std::vector<std::size_t> solve_assignment(const std::vector<double>& cost,
                                          std::size_t rows, std::size_t cols);

}  // namespace apex
