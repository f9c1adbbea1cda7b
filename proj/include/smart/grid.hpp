#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "smart/common.hpp"

namespace smart {

// Dense 3D scalar grid, raster order: depth-major, then rows, then columns
// (index = (z * H + y) * W + x).
template <typename T>
class Grid3 {
  public:
    Grid3() : dims_{0, 0, 0} {}
    Grid3(int d, int h, int w, T fill = T{})
        : dims_{d, h, w}, data_(static_cast<size_t>(d) * h * w, fill) {
        if (d < 0 || h < 0 || w < 0) throw ShapeError("Grid3: negative dimension");
    }
    explicit Grid3(const std::array<int, 3>& dims, T fill = T{})
        : Grid3(dims[0], dims[1], dims[2], fill) {}

    const std::array<int, 3>& dims() const { return dims_; }
    int depth() const { return dims_[0]; }
    int height() const { return dims_[1]; }
    int width() const { return dims_[2]; }
    size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    T& at(int z, int y, int x) { return data_[index(z, y, x)]; }
    const T& at(int z, int y, int x) const { return data_[index(z, y, x)]; }
    T& operator[](size_t i) { return data_[i]; }
    const T& operator[](size_t i) const { return data_[i]; }

    size_t index(int z, int y, int x) const {
        return (static_cast<size_t>(z) * dims_[1] + static_cast<size_t>(y)) * dims_[2] +
               static_cast<size_t>(x);
    }

    std::vector<T>& data() { return data_; }
    const std::vector<T>& data() const { return data_; }

    bool same_shape(const Grid3& other) const { return dims_ == other.dims_; }

    bool operator==(const Grid3& other) const {
        return dims_ == other.dims_ && data_ == other.data_;
    }

  private:
    std::array<int, 3> dims_;
    std::vector<T> data_;
};

using GridD = Grid3<double>;
using GridU8 = Grid3<uint8_t>;

}  // namespace smart
