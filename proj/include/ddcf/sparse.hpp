#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace ddcf {

using Index = std::uint32_t;

/// Sparse vector with strictly increasing indices.
struct SparseRow {
    std::vector<Index> indices;
    std::vector<double> values;

    std::size_t nnz() const { return indices.size(); }
    bool empty() const { return indices.empty(); }

    void push(Index j, double v) {
        indices.push_back(j);
        values.push_back(v);
    }

    double sum_squares() const {
        double s = 0.0;
        for (double v : values) {
            s += v * v;
        }
        return s;
    }

    bool operator==(const SparseRow&) const = default;
};

} // namespace ddcf
