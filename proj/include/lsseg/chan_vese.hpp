#pragma once

#include <utility>
#include <vector>

#include "lsseg/grid.hpp"
#include "lsseg/heaviside.hpp"

namespace lsseg {

/// Parameters of the two-region variance energy
///   F = mu Length + nu Area
///     + lambda1 sum (u0-c1)^2 H(phi) + lambda2 sum (u0-c2)^2 (1-H(phi)).
/// Only mu = nu = 0 is supported; the regularization terms are rejected
/// rather than silently dropped.
struct CvParams {
    double mu = 0.0;
    double nu = 0.0;
    double lambda1 = 1.0;
    double lambda2 = 1.0;
    HeavisideKind heaviside = HeavisideKind::exact();
    int max_iters = 100;
    double tol = 0.0;

    void validate() const;
};

/// Level set field with values in [-0.5, 0.5]; the zero crossing is the
/// implicit contour. Shifted probability maps land in exactly this range.
struct LevelSetField {
    Grid field;

    LevelSetField(int rows, int cols, double fill = 0.0) : field(1, rows, cols, fill) {}
    explicit LevelSetField(Grid g) : field(std::move(g)) {
        if (field.planes() != 1) throw ShapeError("level set field must be single-plane");
    }

    int rows() const { return field.rows(); }
    int cols() const { return field.cols(); }
    double at(int r, int c) const { return field.at(r, c); }
    double& at_mut(int r, int c) { return field.at_mut(r, c); }

    void validate() const {
        for (double v : field.data()) {
            if (!(v >= -0.5 && v <= 0.5)) throw NumericError("level set value outside [-0.5, 0.5]");
        }
    }
};

struct RegionMeans {
    double inside = 0.0;   // c1, substituted 0 when the region is empty
    double outside = 0.0;  // c2, substituted 0 when the region is empty
    bool inside_empty = false;
    bool outside_empty = false;
};

/// Heaviside-weighted mean pixel value inside and outside the contour.
/// A weight sum below 1e-12 marks the region empty and its mean is set to 0
/// (the empty region then contributes nothing to the energy).
RegionMeans region_means(const Image& image, const LevelSetField& phi, const HeavisideKind& h);

/// Two-region variance energy with mu = nu = 0, using means from
/// region_means. Nonzero mu or nu raises UnsupportedError.
double cv_energy(const Image& image, const LevelSetField& phi, const CvParams& p);

struct CvResult {
    LevelSetField phi;
    std::vector<double> energy_trace;  // initial energy plus one entry per iteration
    bool degenerate = false;           // single region for two consecutive iterations
};

/// Alternating minimization: recompute region means with the exact step,
/// then reassign each pixel to whichever region costs less. With mu = nu = 0
/// both half-steps are exact coordinate minimizers, so the energy trace is
/// non-increasing without any step-size tuning.
CvResult cv_segment(const Image& image, const CvParams& p, const LevelSetField& init);

}  // namespace lsseg
