#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "lsseg/error.hpp"

namespace lsseg {

/// Dense plane-major numeric grid: data laid out [plane][row][col] so that a
/// single plane (one image channel, one class map) is a contiguous slice.
/// Values are immutable after construction except through the *_mut accessors,
/// which only the training loop and constructing code are expected to use.
class Grid {
public:
    Grid(int planes, int rows, int cols, double fill = 0.0)
        : planes_(planes), rows_(rows), cols_(cols) {
        if (planes < 1 || rows < 1 || cols < 1) {
            throw ShapeError("grid dimensions must be >= 1, got " + shape_str(planes, rows, cols));
        }
        data_.assign(static_cast<std::size_t>(planes) * rows * cols, fill);
    }

    static Grid filled(int rows, int cols, int planes, double fill) {
        if (!std::isfinite(fill)) throw NumericError("fill value is not finite");
        return Grid(planes, rows, cols, fill);
    }

    int planes() const { return planes_; }
    int rows() const { return rows_; }
    int cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }

    double at(int p, int r, int c) const { return data_[index(p, r, c)]; }
    double at(int r, int c) const { return data_[index(0, r, c)]; }
    double& at_mut(int p, int r, int c) { return data_[index(p, r, c)]; }
    double& at_mut(int r, int c) { return data_[index(0, r, c)]; }

    std::span<const double> data() const { return data_; }
    std::span<double> data_mut() { return data_; }
    std::span<const double> plane(int p) const {
        return std::span<const double>(data_).subspan(static_cast<std::size_t>(p) * rows_ * cols_,
                                                      static_cast<std::size_t>(rows_) * cols_);
    }
    std::span<double> plane_mut(int p) {
        return std::span<double>(data_).subspan(static_cast<std::size_t>(p) * rows_ * cols_,
                                                static_cast<std::size_t>(rows_) * cols_);
    }

    bool same_shape(const Grid& other) const {
        return planes_ == other.planes_ && rows_ == other.rows_ && cols_ == other.cols_;
    }

    std::string shape_str() const { return shape_str(planes_, rows_, cols_); }

    void require_same_shape(const Grid& other, const char* what) const {
        if (!same_shape(other)) {
            throw ShapeError(std::string(what) + ": shape mismatch " + shape_str() + " vs " +
                             other.shape_str());
        }
    }

private:
    static std::string shape_str(int p, int r, int c) {
        return "[" + std::to_string(p) + "x" + std::to_string(r) + "x" + std::to_string(c) + "]";
    }
    std::size_t index(int p, int r, int c) const {
        return (static_cast<std::size_t>(p) * rows_ + r) * cols_ + c;
    }

    int planes_;
    int rows_;
    int cols_;
    std::vector<double> data_;
};

/// Sum of all entries, accumulated in double regardless of how the grid was
/// produced. Fixed left-to-right order keeps results deterministic.
inline double reduce_sum(const Grid& g) {
    double acc = 0.0;
    for (double v : g.data()) acc += v;
    return acc;
}

/// Apply f per entry; the result replaces nothing (grids stay immutable).
/// A non-finite output is reported with the flat index that produced it.
template <typename F>
Grid map_elementwise(const Grid& g, F&& f) {
    Grid out(g.planes(), g.rows(), g.cols());
    auto src = g.data();
    auto dst = out.data_mut();
    for (std::size_t i = 0; i < src.size(); ++i) {
        const double v = f(src[i]);
        if (!std::isfinite(v)) {
            throw NumericError("map_elementwise produced non-finite value at index " +
                               std::to_string(i));
        }
        dst[i] = v;
    }
    return out;
}

/// Elementwise combination with eager shape checking; no broadcasting.
template <typename F>
Grid combine_elementwise(const Grid& a, const Grid& b, F&& f) {
    a.require_same_shape(b, "combine_elementwise");
    Grid out(a.planes(), a.rows(), a.cols());
    auto sa = a.data();
    auto sb = b.data();
    auto dst = out.data_mut();
    for (std::size_t i = 0; i < sa.size(); ++i) dst[i] = f(sa[i], sb[i]);
    return out;
}

/// Grayscale or multi-channel image with values in [0, 1], channels as planes.
struct Image {
    Grid px;

    Image(int rows, int cols, int channels = 1, double fill = 0.0)
        : px(channels, rows, cols, fill) {}
    explicit Image(Grid g) : px(std::move(g)) {}

    int rows() const { return px.rows(); }
    int cols() const { return px.cols(); }
    int channels() const { return px.planes(); }

    void validate() const {
        auto d = px.data();
        for (std::size_t i = 0; i < d.size(); ++i) {
            if (!(d[i] >= 0.0 && d[i] <= 1.0)) {
                throw NumericError("image value out of [0,1] at index " + std::to_string(i));
            }
        }
    }
};

/// Per-pixel integer class assignment. Background is class 0.
struct LabelMap {
    int rows_ = 0;
    int cols_ = 0;
    std::vector<std::int32_t> labels;

    LabelMap(int rows, int cols, std::int32_t fill = 0)
        : rows_(rows), cols_(cols), labels(static_cast<std::size_t>(rows) * cols, fill) {
        if (rows < 1 || cols < 1) throw ShapeError("label map dimensions must be >= 1");
    }

    int rows() const { return rows_; }
    int cols() const { return cols_; }
    std::size_t size() const { return labels.size(); }

    std::int32_t at(int r, int c) const { return labels[static_cast<std::size_t>(r) * cols_ + c]; }
    std::int32_t& at_mut(int r, int c) { return labels[static_cast<std::size_t>(r) * cols_ + c]; }

    std::int32_t max_label() const {
        std::int32_t m = 0;
        for (auto v : labels) m = v > m ? v : m;
        return m;
    }

    void validate(std::int32_t num_classes) const {
        for (std::size_t i = 0; i < labels.size(); ++i) {
            if (labels[i] < 0 || labels[i] >= num_classes) {
                throw NumericError("label " + std::to_string(labels[i]) + " at index " +
                                   std::to_string(i) + " outside [0," +
                                   std::to_string(num_classes) + ")");
            }
        }
    }
};

/// Per-class dense probability maps, [class][row][col]. Produced by the
/// network softmax, so construction is unchecked; validate() is for data
/// entering from outside.
struct ProbMaps {
    Grid maps;

    ProbMaps(int classes, int rows, int cols, double fill = 0.0)
        : maps(classes, rows, cols, fill) {}
    explicit ProbMaps(Grid g) : maps(std::move(g)) {}

    int classes() const { return maps.planes(); }
    int rows() const { return maps.rows(); }
    int cols() const { return maps.cols(); }

    void validate(double tol = 1e-6) const {
        for (int r = 0; r < rows(); ++r) {
            for (int c = 0; c < cols(); ++c) {
                double sum = 0.0;
                for (int k = 0; k < classes(); ++k) {
                    const double p = maps.at(k, r, c);
                    if (!(p >= 0.0 && p <= 1.0)) {
                        throw NumericError("probability out of [0,1] at class " +
                                           std::to_string(k) + " pixel (" + std::to_string(r) +
                                           "," + std::to_string(c) + ")");
                    }
                    sum += p;
                }
                if (std::abs(sum - 1.0) > tol) {
                    throw NumericError("per-pixel probability sum " + std::to_string(sum) +
                                       " at (" + std::to_string(r) + "," + std::to_string(c) +
                                       ") deviates from 1");
                }
            }
        }
    }
};

/// Single-plane mask with entries exactly 0 or 1.
struct BinaryMask {
    Grid mask;

    BinaryMask(int rows, int cols, double fill = 0.0) : mask(1, rows, cols, fill) {}
    explicit BinaryMask(Grid g) : mask(std::move(g)) {
        if (mask.planes() != 1) throw ShapeError("binary mask must be single-plane");
    }

    int rows() const { return mask.rows(); }
    int cols() const { return mask.cols(); }
    double at(int r, int c) const { return mask.at(r, c); }
    double& at_mut(int r, int c) { return mask.at_mut(r, c); }

    void validate() const {
        for (double v : mask.data()) {
            if (v != 0.0 && v != 1.0) throw NumericError("binary mask entry is not 0 or 1");
        }
    }
};

}  // namespace lsseg
