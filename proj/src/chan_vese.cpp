#include "lsseg/chan_vese.hpp"

#include <cmath>
#include <string>

namespace lsseg {

namespace {
constexpr double kEmptyRegionWeight = 1e-12;

void check_single_channel(const Image& image) {
    if (image.channels() != 1) {
        throw ShapeError("expected single-channel image, got " +
                         std::to_string(image.channels()) + " channels");
    }
}
}  // namespace

void CvParams::validate() const {
    if (!(lambda1 > 0.0) || !(lambda2 > 0.0)) throw ConfigError("lambda1 and lambda2 must be > 0");
    if (mu < 0.0 || nu < 0.0) throw ConfigError("mu and nu must be >= 0");
    if (max_iters < 1) throw ConfigError("max_iters must be >= 1");
    if (tol < 0.0) throw ConfigError("tol must be >= 0");
}

RegionMeans region_means(const Image& image, const LevelSetField& phi, const HeavisideKind& h) {
    check_single_channel(image);
    image.px.require_same_shape(phi.field, "region_means");

    double num_in = 0.0, den_in = 0.0, num_out = 0.0, den_out = 0.0;
    auto u0 = image.px.data();
    auto f = phi.field.data();
    for (std::size_t i = 0; i < u0.size(); ++i) {
        const double w = heaviside(h, f[i]);
        num_in += u0[i] * w;
        den_in += w;
        num_out += u0[i] * (1.0 - w);
        den_out += 1.0 - w;
    }

    RegionMeans m;
    m.inside_empty = den_in < kEmptyRegionWeight;
    m.outside_empty = den_out < kEmptyRegionWeight;
    m.inside = m.inside_empty ? 0.0 : num_in / den_in;
    m.outside = m.outside_empty ? 0.0 : num_out / den_out;
    return m;
}

namespace {
double energy_with_means(const Image& image, const LevelSetField& phi, const CvParams& p,
                         const RegionMeans& m) {
    double acc = 0.0;
    auto u0 = image.px.data();
    auto f = phi.field.data();
    for (std::size_t i = 0; i < u0.size(); ++i) {
        const double w = heaviside(p.heaviside, f[i]);
        const double din = u0[i] - m.inside;
        const double dout = u0[i] - m.outside;
        acc += p.lambda1 * din * din * w + p.lambda2 * dout * dout * (1.0 - w);
    }
    return acc;
}
}  // namespace

double cv_energy(const Image& image, const LevelSetField& phi, const CvParams& p) {
    p.validate();
    if (p.mu != 0.0 || p.nu != 0.0) {
        throw UnsupportedError("contour length/area terms are not supported; set mu = nu = 0");
    }
    check_single_channel(image);
    image.px.require_same_shape(phi.field, "cv_energy");
    return energy_with_means(image, phi, p, region_means(image, phi, p.heaviside));
}

CvResult cv_segment(const Image& image, const CvParams& p, const LevelSetField& init) {
    p.validate();
    if (p.mu != 0.0 || p.nu != 0.0) {
        throw UnsupportedError("contour length/area terms are not supported; set mu = nu = 0");
    }
    check_single_channel(image);
    image.px.require_same_shape(init.field, "cv_segment");

    // The iteration itself always assigns with the exact step; p.heaviside
    // only affects how callers may evaluate the final energy.
    CvParams exact = p;
    exact.heaviside = HeavisideKind::exact();

    CvResult result{init, {}, false};
    RegionMeans means = region_means(image, result.phi, exact.heaviside);
    result.energy_trace.push_back(energy_with_means(image, result.phi, exact, means));

    int single_region_streak = 0;
    for (int iter = 0; iter < p.max_iters; ++iter) {
        // Pointwise exact minimizer given frozen means: pick the cheaper region.
        auto u0 = image.px.data();
        auto f = result.phi.field.data_mut();
        std::size_t inside_count = 0;
        for (std::size_t i = 0; i < u0.size(); ++i) {
            const double din = u0[i] - means.inside;
            const double dout = u0[i] - means.outside;
            const bool go_inside = p.lambda1 * din * din <= p.lambda2 * dout * dout;
            f[i] = go_inside ? 0.5 : -0.5;
            inside_count += go_inside ? 1 : 0;
        }

        means = region_means(image, result.phi, exact.heaviside);
        result.energy_trace.push_back(energy_with_means(image, result.phi, exact, means));

        if (inside_count == 0 || inside_count == u0.size()) {
            if (++single_region_streak >= 2) {
                result.degenerate = true;
                return result;
            }
        } else {
            single_region_streak = 0;
        }

        // While a single-region assignment is pending confirmation, keep
        // iterating so the degenerate case is flagged rather than tol-stopped.
        const std::size_t n = result.energy_trace.size();
        if (single_region_streak == 0 &&
            std::abs(result.energy_trace[n - 2] - result.energy_trace[n - 1]) < p.tol) {
            break;
        }
    }
    return result;
}

}  // namespace lsseg
