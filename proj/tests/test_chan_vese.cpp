#include <doctest.h>

#include <cmath>

#include "lsseg/chan_vese.hpp"
#include "lsseg/metrics.hpp"
#include "lsseg/rng.hpp"

using namespace lsseg;

namespace {

Image two_level_image(int n) {
    // left half 0.2, right half 0.8
    Image img(n, n, 1);
    for (int r = 0; r < n; ++r) {
        for (int c = 0; c < n; ++c) img.px.at_mut(0, r, c) = c < n / 2 ? 0.2 : 0.8;
    }
    return img;
}

Image disk_image(int n, double inside, double outside, double noise_sigma, std::uint64_t seed,
                 LevelSetField* truth = nullptr) {
    Image img(n, n, 1);
    Rng rng(seed);
    const double cx = n / 2.0, cy = n / 2.0, rad = n / 4.0;
    for (int r = 0; r < n; ++r) {
        for (int c = 0; c < n; ++c) {
            const bool in = (r - cy) * (r - cy) + (c - cx) * (c - cx) <= rad * rad;
            double v = in ? inside : outside;
            if (noise_sigma > 0.0) v += noise_sigma * rng.normal();
            img.px.at_mut(0, r, c) = std::clamp(v, 0.0, 1.0);
            if (truth != nullptr) truth->at_mut(r, c) = in ? 0.5 : -0.5;
        }
    }
    return img;
}

LevelSetField random_pm_half(int n, std::uint64_t seed) {
    LevelSetField phi(n, n);
    Rng rng(seed);
    for (int r = 0; r < n; ++r) {
        for (int c = 0; c < n; ++c) phi.at_mut(r, c) = rng.coin() ? 0.5 : -0.5;
    }
    return phi;
}

double mask_iou(const LevelSetField& a, const LevelSetField& b) {
    std::uint64_t inter = 0, uni = 0;
    for (int r = 0; r < a.rows(); ++r) {
        for (int c = 0; c < a.cols(); ++c) {
            const bool pa = a.at(r, c) >= 0.0, pb = b.at(r, c) >= 0.0;
            inter += (pa && pb) ? 1 : 0;
            uni += (pa || pb) ? 1 : 0;
        }
    }
    return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace

TEST_CASE("region means of a constant image equal the constant") {
    const Image img(4, 4, 1, 0.7);

    const auto smooth = region_means(img, random_pm_half(4, 3), HeavisideKind::tanh_approx());
    CHECK(smooth.inside == doctest::Approx(0.7).epsilon(1e-12));
    CHECK(smooth.outside == doctest::Approx(0.7).epsilon(1e-12));

    const auto exact = region_means(img, random_pm_half(4, 5), HeavisideKind::exact());
    CHECK(exact.inside == doctest::Approx(0.7).epsilon(1e-12));
    CHECK(exact.outside == doctest::Approx(0.7).epsilon(1e-12));
}

TEST_CASE("region means of a perfect disk partition") {
    LevelSetField truth(16, 16);
    const Image img = disk_image(16, 1.0, 0.0, 0.0, 0, &truth);
    const auto m = region_means(img, truth, HeavisideKind::exact());
    CHECK(m.inside == 1.0);
    CHECK(m.outside == 0.0);
    CHECK_FALSE(m.inside_empty);
    CHECK_FALSE(m.outside_empty);
}

TEST_CASE("region means of a split image") {
    const Image img = two_level_image(4);
    LevelSetField phi(4, 4);
    for (int r = 0; r < 4; ++r) {
        for (int c = 0; c < 4; ++c) phi.at_mut(r, c) = c < 2 ? -0.5 : 0.5;
    }
    const auto m = region_means(img, phi, HeavisideKind::exact());
    CHECK(m.inside == doctest::Approx(0.8).epsilon(1e-15));
    CHECK(m.outside == doctest::Approx(0.2).epsilon(1e-15));
}

TEST_CASE("empty region is flagged and its mean substituted with zero") {
    const Image img(4, 4, 1, 0.7);
    const LevelSetField all_inside(4, 4, 0.5);
    const auto m = region_means(img, all_inside, HeavisideKind::exact());
    CHECK(m.inside == doctest::Approx(0.7));
    CHECK(m.outside == 0.0);
    CHECK(m.outside_empty);
}

TEST_CASE("energy of a perfect partition is zero") {
    LevelSetField truth(16, 16);
    const Image img = disk_image(16, 1.0, 0.0, 0.0, 0, &truth);
    CHECK(cv_energy(img, truth, CvParams{}) == 0.0);
}

TEST_CASE("energy of a constant image is zero") {
    const Image img(6, 6, 1, 0.4);
    // the region means carry one rounding of the constant, so the residual
    // is bounded by the square of that rounding error
    CHECK(cv_energy(img, random_pm_half(6, 17), CvParams{}) <= 1e-24);
}

TEST_CASE("energy with one empty region is the variance around the global mean") {
    const Image img = two_level_image(4);
    const LevelSetField all_inside(4, 4, 0.5);
    // c1 = 0.5, empty outside contributes nothing: 16 * 0.3^2 = 1.44
    CHECK(cv_energy(img, all_inside, CvParams{}) == doctest::Approx(1.44).epsilon(1e-12));
}

TEST_CASE("length and area terms are rejected, not ignored") {
    const Image img = two_level_image(4);
    const LevelSetField phi(4, 4, 0.5);
    CvParams p;
    p.mu = 0.5;
    CHECK_THROWS_AS(cv_energy(img, phi, p), UnsupportedError);
    p.mu = 0.0;
    p.nu = 0.1;
    CHECK_THROWS_AS(cv_segment(img, p, phi), UnsupportedError);
}

TEST_CASE("segmentation recovers a noiseless two-level image exactly") {
    const Image img = two_level_image(8);
    CvParams p;
    p.max_iters = 20;

    for (std::uint64_t seed : {1ULL, 2ULL, 3ULL}) {
        const CvResult res = cv_segment(img, p, random_pm_half(8, seed));
        CHECK_FALSE(res.degenerate);
        CHECK(res.energy_trace.back() <= 1e-24);
        for (std::size_t i = 1; i < res.energy_trace.size(); ++i) {
            CHECK(res.energy_trace[i] <= res.energy_trace[i - 1]);
        }
        // the sign of phi groups the two intensities; either labeling is optimal
        LevelSetField bright(8, 8);
        for (int r = 0; r < 8; ++r) {
            for (int c = 0; c < 8; ++c) bright.at_mut(r, c) = c < 4 ? -0.5 : 0.5;
        }
        LevelSetField dark(8, 8);
        for (int r = 0; r < 8; ++r) {
            for (int c = 0; c < 8; ++c) dark.at_mut(r, c) = c < 4 ? 0.5 : -0.5;
        }
        const double match = std::max(mask_iou(res.phi, bright), mask_iou(res.phi, dark));
        CHECK(match == 1.0);
    }
}

TEST_CASE("constant image yields the degenerate flag") {
    const Image img(8, 8, 1, 0.3);
    CvParams p;
    p.max_iters = 10;
    p.tol = 1e-9;
    const CvResult res = cv_segment(img, p, random_pm_half(8, 9));
    CHECK(res.degenerate);
}

TEST_CASE("noisy disk is recovered with IoU at least 0.95") {
    LevelSetField truth(64, 64);
    const Image img = disk_image(64, 0.8, 0.2, 0.05, 42, &truth);
    CvParams p;
    p.max_iters = 50;
    p.tol = 1e-12;
    const CvResult res = cv_segment(img, p, random_pm_half(64, 4));
    CHECK_FALSE(res.degenerate);
    // phi and its complement are equal-energy solutions; accept either polarity
    LevelSetField flipped(64, 64);
    for (int r = 0; r < 64; ++r) {
        for (int c = 0; c < 64; ++c) flipped.at_mut(r, c) = -res.phi.at(r, c);
    }
    const double iou = std::max(mask_iou(res.phi, truth), mask_iou(flipped, truth));
    CHECK(iou >= 0.95);
    for (std::size_t i = 1; i < res.energy_trace.size(); ++i) {
        CHECK(res.energy_trace[i] <= res.energy_trace[i - 1]);
    }
}

TEST_CASE("energy is invariant under sign flip with swapped means") {
    Rng rng(31);
    Image img(6, 6, 1);
    for (auto& v : img.px.data_mut()) v = rng.uniform(0.0, 1.0);
    LevelSetField phi(6, 6);
    for (int r = 0; r < 6; ++r) {
        for (int c = 0; c < 6; ++c) phi.at_mut(r, c) = rng.coin() ? 0.5 : -0.5;
    }
    LevelSetField flipped(6, 6);
    for (int r = 0; r < 6; ++r) {
        for (int c = 0; c < 6; ++c) flipped.at_mut(r, c) = -phi.at(r, c);
    }
    CvParams p;  // lambda1 == lambda2
    const double e1 = cv_energy(img, phi, p);
    const double e2 = cv_energy(img, flipped, p);
    CHECK(std::abs(e1 - e2) <= 1e-12 * std::max(1.0, std::abs(e1)));
}

TEST_CASE("parameter validation") {
    CvParams p;
    p.lambda1 = 0.0;
    CHECK_THROWS_AS(p.validate(), ConfigError);
    p = CvParams{};
    p.max_iters = 0;
    CHECK_THROWS_AS(p.validate(), ConfigError);
    p = CvParams{};
    p.tol = -1.0;
    CHECK_THROWS_AS(p.validate(), ConfigError);
}
