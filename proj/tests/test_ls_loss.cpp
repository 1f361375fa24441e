#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

#include "lsseg/ls_loss.hpp"
#include "lsseg/rng.hpp"
#include "test_util.hpp"

using namespace lsseg;
using lsseg::test::reference_softmax;

namespace {

// Independent reference implementations used as oracles; these deliberately
// repeat the formulas rather than calling the library.

double ref_step(double z, double eps) { return 0.5 * (1.0 + std::tanh(z / eps)); }

struct RefMeans {
    double c1, c2;
};

RefMeans ref_means(const BinaryMask& g, const std::vector<double>& phi, double eps) {
    double ni = 0, di = 0, no = 0, dn = 0;
    for (std::size_t i = 0; i < phi.size(); ++i) {
        const double w = ref_step(phi[i], eps);
        ni += g.mask.data()[i] * w;
        di += w;
        no += g.mask.data()[i] * (1.0 - w);
        dn += 1.0 - w;
    }
    return {ni / di, no / dn};
}

double ref_energy(const BinaryMask& g, const std::vector<double>& phi, double eps, double c1,
                  double c2) {
    double acc = 0.0;
    for (std::size_t i = 0; i < phi.size(); ++i) {
        const double w = ref_step(phi[i], eps);
        const double gi = g.mask.data()[i];
        acc += (gi - c1) * (gi - c1) * w + (gi - c2) * (gi - c2) * (1.0 - w);
    }
    return acc;
}

ProbMaps random_probs(Rng& rng, int k, int h, int w) {
    Grid logits(k, h, w);
    for (auto& v : logits.data_mut()) v = rng.uniform(-2.0, 2.0);
    return ProbMaps(reference_softmax(logits));
}

LabelMap random_labels(Rng& rng, int k, int h, int w) {
    LabelMap gt(h, w);
    for (auto& v : gt.labels) v = static_cast<std::int32_t>(rng.uniform_int(0, k - 1));
    return gt;
}

}  // namespace

TEST_CASE("decomposition of an all-background map") {
    const LabelMap gt(3, 3, 0);
    const DecomposedGT d = decompose_ground_truth(gt);
    REQUIRE(d.masks.size() == 1);
    CHECK(d.masks[0].first == 0);
    for (double v : d.masks[0].second.mask.data()) CHECK(v == 1.0);
}

TEST_CASE("decomposition of a small three-class map") {
    LabelMap gt(2, 2, 0);
    gt.at_mut(0, 1) = 1;
    gt.at_mut(1, 0) = 1;
    gt.at_mut(1, 1) = 2;
    const DecomposedGT d = decompose_ground_truth(gt);
    REQUIRE(d.masks.size() == 3);

    const auto& g0 = d.masks[0].second;
    CHECK(g0.at(0, 0) == 1.0);
    CHECK(g0.at(0, 1) == 0.0);
    CHECK(g0.at(1, 0) == 0.0);
    CHECK(g0.at(1, 1) == 0.0);
    const auto& g1 = d.masks[1].second;
    CHECK(g1.at(0, 0) == 0.0);
    CHECK(g1.at(0, 1) == 1.0);
    CHECK(g1.at(1, 0) == 1.0);
    CHECK(g1.at(1, 1) == 0.0);
    const auto& g2 = d.masks[2].second;
    CHECK(g2.at(1, 1) == 1.0);
    CHECK(g2.at(0, 0) + g2.at(0, 1) + g2.at(1, 0) == 0.0);
}

TEST_CASE("decomposed masks always partition the image") {
    Rng rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        const int k = static_cast<int>(rng.uniform_int(2, 6));
        const LabelMap gt = random_labels(rng, k, 16, 16);
        const DecomposedGT d = decompose_ground_truth(gt);
        Grid sum(1, 16, 16, 0.0);
        for (const auto& [cls, mask] : d.masks) {
            auto dst = sum.data_mut();
            auto src = mask.mask.data();
            for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
        }
        for (double v : sum.data()) CHECK(v == 1.0);
    }
}

TEST_CASE("probability shift") {
    ProbMaps p(2, 2, 2, 0.5);
    auto fields = shift_probabilities(p);
    REQUIRE(fields.size() == 2);
    for (double v : fields[0].field.data()) CHECK(v == 0.0);

    p.maps.plane_mut(0)[0] = 1.0;
    p.maps.plane_mut(1)[3] = 0.25;
    fields = shift_probabilities(p);
    CHECK(fields[0].field.data()[0] == 0.5);
    CHECK(fields[1].field.data()[3] == -0.25);
    for (const auto& f : fields) CHECK_NOTHROW(f.validate());
}

TEST_CASE("class region means on constant masks") {
    const std::vector<double> phi = {0.3, -0.2, 0.1, -0.4};
    const auto kind = HeavisideKind::tanh_approx();

    const BinaryMask ones(2, 2, 1.0);
    const auto [c1a, c2a] = class_region_means(ones, phi, kind);
    CHECK(c1a == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(c2a == doctest::Approx(1.0).epsilon(1e-15));

    const BinaryMask zeros(2, 2, 0.0);
    const auto [c1b, c2b] = class_region_means(zeros, phi, kind);
    CHECK(c1b == 0.0);
    CHECK(c2b == 0.0);
}

TEST_CASE("class region means on a half split match the closed form") {
    // G = upper half ones, phi = +0.5 upper / -0.5 lower, eps = 1/20.
    // With h+ = H(0.5) and h- = H(-0.5) = 1 - h+:
    //   c1 = h+ / (h+ + h-) = h+,  c2 = h- / (h- + h+) = h-.
    const int n = 8;
    BinaryMask g(n, n, 0.0);
    std::vector<double> phi(static_cast<std::size_t>(n) * n);
    for (int r = 0; r < n; ++r) {
        for (int c = 0; c < n; ++c) {
            const bool upper = r < n / 2;
            if (upper) g.at_mut(r, c) = 1.0;
            phi[static_cast<std::size_t>(r) * n + c] = upper ? 0.5 : -0.5;
        }
    }
    const auto [c1, c2] = class_region_means(g, phi, HeavisideKind::tanh_approx());
    const double h_plus = 0.999999997938846381809796418569;   // 1/2 (1 + tanh(10))
    const double h_minus = 2.06115361819020358143087537182e-9;
    CHECK(c1 == doctest::Approx(h_plus).epsilon(1e-9));
    CHECK(c2 == doctest::Approx(h_minus).epsilon(1e-6));
    CHECK(c1 == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(std::abs(c2) <= 1e-6);
}

TEST_CASE("energy of a confident single-class prediction is tiny") {
    const int n = 8;
    const LabelMap gt(n, n, 0);  // all background
    ProbMaps p(2, n, n);
    for (auto& v : p.maps.plane_mut(0)) v = 0.999;
    for (auto& v : p.maps.plane_mut(1)) v = 0.001;
    const LsEnergy e = ls_energy(p, decompose_ground_truth(gt), 0.05);
    CHECK(e.total >= 0.0);
    CHECK(e.total < 1e-6 * n * n);
}

TEST_CASE("energy of a confident multi-class prediction is tiny") {
    Rng rng(67);
    const int n = 8, k = 3;
    const LabelMap gt = random_labels(rng, k, n, n);
    ProbMaps p(k, n, n);
    for (int r = 0; r < n; ++r) {
        for (int c = 0; c < n; ++c) {
            for (int cls = 0; cls < k; ++cls) {
                p.maps.at_mut(cls, r, c) = gt.at(r, c) == cls ? 0.999 : 0.001 / (k - 1);
            }
        }
    }
    const LsEnergy e = ls_energy(p, decompose_ground_truth(gt), 0.05);
    CHECK(e.total >= 0.0);
    CHECK(e.total < 1e-6 * n * n);
}

TEST_CASE("per-pixel mean mode rescales the level set term and its gradient") {
    Rng rng(68);
    const int n = 6, k = 3;
    const ProbMaps p = random_probs(rng, k, n, n);
    const LabelMap gt = random_labels(rng, k, n, n);

    const CombinedLoss sum_mode = combined_loss(p, gt, LossWeights{4e-4, 0.05, false});
    const CombinedLoss mean_mode = combined_loss(p, gt, LossWeights{4e-4, 0.05, true});
    const double inv_n = 1.0 / (n * n);
    CHECK(mean_mode.report.ls == doctest::Approx(sum_mode.report.ls * inv_n).epsilon(1e-14));
    CHECK(mean_mode.report.ce == sum_mode.report.ce);
    CHECK(std::abs(mean_mode.report.total -
                   (mean_mode.report.ce + 4e-4 * mean_mode.report.ls)) <= 1e-12);

    const CeResult ce = cross_entropy(p, gt);
    for (std::size_t i = 0; i < ce.logit_grad.size(); ++i) {
        const double ls_part_sum = sum_mode.logit_grad.data()[i] - ce.logit_grad.data()[i];
        const double ls_part_mean = mean_mode.logit_grad.data()[i] - ce.logit_grad.data()[i];
        CHECK(ls_part_mean == doctest::Approx(ls_part_sum * inv_n).epsilon(1e-10));
    }
}

TEST_CASE("energy at uniform probabilities has the closed form N rho (1 - rho)") {
    Rng rng(21);
    const int n = 8;
    for (int trial = 0; trial < 10; ++trial) {
        const int k = static_cast<int>(rng.uniform_int(2, 4));
        const LabelMap gt = random_labels(rng, k, n, n);
        const ProbMaps p(k, n, n, 0.5);  // P = 0.5 => phi = 0 for every class
        const DecomposedGT d = decompose_ground_truth(gt);
        const LsEnergy e = ls_energy(p, d, 0.05);
        for (const auto& [cls, mask] : d.masks) {
            const double rho = reduce_sum(mask.mask) / (n * n);
            const double expected = n * n * rho * (1.0 - rho);
            CHECK(e.per_class.at(cls) == doctest::Approx(expected).epsilon(1e-12));
        }
    }
}

TEST_CASE("total energy equals the sum of independently computed class energies") {
    Rng rng(33);
    const ProbMaps p = random_probs(rng, 3, 6, 6);
    const LabelMap gt = random_labels(rng, 3, 6, 6);
    const DecomposedGT d = decompose_ground_truth(gt);
    const LsEnergy whole = ls_energy(p, d, 0.05);

    double sum = 0.0;
    for (const auto& [cls, mask] : d.masks) {
        DecomposedGT single{{{cls, mask}}, d.rows, d.cols};
        sum += ls_energy(p, single, 0.05).per_class.at(cls);
    }
    CHECK(whole.total == doctest::Approx(sum).epsilon(1e-12));
    CHECK(whole.total >= 0.0);
}

TEST_CASE("a ground-truth class without a probability map is an error") {
    Rng rng(3);
    const ProbMaps p = random_probs(rng, 2, 4, 4);
    LabelMap gt(4, 4, 0);
    gt.at_mut(0, 0) = 2;  // class 2 does not exist in a 2-map stack
    CHECK_THROWS_AS(ls_energy(p, decompose_ground_truth(gt), 0.05), ShapeError);
    CHECK_THROWS_AS(ls_gradient(p, decompose_ground_truth(gt), 0.05), ShapeError);
}

TEST_CASE("gradient vanishes when the mask is constant or phi is flat") {
    const int n = 4;
    // G identically one: c1 = c2 = 1, both branches cancel
    const LabelMap gt(n, n, 0);
    const ProbMaps p(1, n, n, 0.73);
    const Grid g = ls_gradient(ProbMaps(p.maps), decompose_ground_truth(gt), 0.05);
    for (double v : g.data()) CHECK(v == 0.0);

    // phi = 0 everywhere: c1 = c2 = rho, the bracket cancels pointwise
    Rng rng(8);
    const LabelMap gt2 = random_labels(rng, 2, n, n);
    const ProbMaps uniform(2, n, n, 0.5);
    const Grid g2 = ls_gradient(uniform, decompose_ground_truth(gt2), 1.0);
    for (double v : g2.data()) CHECK(std::abs(v) <= 1e-15);
}

TEST_CASE("gradient of absent classes is zero") {
    Rng rng(13);
    const ProbMaps p = random_probs(rng, 4, 6, 6);
    const LabelMap gt = random_labels(rng, 2, 6, 6);  // classes 0 and 1 only
    const Grid g = ls_gradient(p, decompose_ground_truth(gt), 0.05);
    for (double v : g.plane(2)) CHECK(v == 0.0);
    for (double v : g.plane(3)) CHECK(v == 0.0);
}

TEST_CASE("gradient matches frozen-mean finite differences of the reference energy") {
    Rng rng(4242);
    const double step = 1e-5;
    for (int trial = 0; trial < 10; ++trial) {
        const int n = 8;
        const int k = static_cast<int>(rng.uniform_int(2, 4));
        const double eps = trial % 2 == 0 ? 0.05 : 1.0;
        const ProbMaps p = random_probs(rng, k, n, n);
        const LabelMap gt = random_labels(rng, k, n, n);
        const DecomposedGT d = decompose_ground_truth(gt);
        const Grid analytic = ls_gradient(p, d, eps);

        double scale = 1e-12, gap = 0.0;
        for (const auto& [cls, mask] : d.masks) {
            std::vector<double> phi(static_cast<std::size_t>(n) * n);
            auto plane = p.maps.plane(cls);
            for (std::size_t i = 0; i < phi.size(); ++i) phi[i] = plane[i] - 0.5;
            const RefMeans m = ref_means(mask, phi, eps);
            auto g = analytic.plane(cls);
            for (std::size_t i = 0; i < phi.size(); ++i) {
                std::vector<double> pp = phi;
                pp[i] += step;
                const double ep = ref_energy(mask, pp, eps, m.c1, m.c2);
                pp[i] = phi[i] - step;
                const double em = ref_energy(mask, pp, eps, m.c1, m.c2);
                const double fd = (ep - em) / (2 * step);
                scale = std::max({scale, std::abs(g[i]), std::abs(fd)});
                gap = std::max(gap, std::abs(g[i] - fd));
            }
        }
        CHECK(gap / scale <= 1e-5);
    }
}

TEST_CASE("a small gradient step decreases the energy") {
    Rng rng(77);
    for (int trial = 0; trial < 10; ++trial) {
        const int n = 8;
        const int k = static_cast<int>(rng.uniform_int(2, 4));
        const ProbMaps p = random_probs(rng, k, n, n);
        const LabelMap gt = random_labels(rng, k, n, n);
        const DecomposedGT d = decompose_ground_truth(gt);
        const Grid g = ls_gradient(p, d, 0.05);

        double norm = 0.0;
        for (double v : g.data()) norm = std::max(norm, std::abs(v));
        if (norm <= 1e-8) continue;

        ProbMaps stepped(p.maps.planes(), n, n);
        auto src = p.maps.data();
        auto grad = g.data();
        auto dst = stepped.maps.data_mut();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = src[i] - 1e-3 * grad[i];

        const double before = ls_energy(p, d, 0.05).total;
        const double after = ls_energy(stepped, d, 0.05).total;
        CHECK(after < before);
    }
}

TEST_CASE("relabeling classes permutes per-class energies and keeps the total") {
    Rng rng(55);
    const int n = 6, k = 4;
    const ProbMaps p = random_probs(rng, k, n, n);
    LabelMap gt = random_labels(rng, k, n, n);
    // make sure every class is present so the permutation is total
    gt.at_mut(0, 0) = 0;
    gt.at_mut(0, 1) = 1;
    gt.at_mut(0, 2) = 2;
    gt.at_mut(0, 3) = 3;

    const int perm[4] = {2, 0, 3, 1};
    LabelMap gt_perm(n, n);
    for (std::size_t i = 0; i < gt.labels.size(); ++i) gt_perm.labels[i] = perm[gt.labels[i]];
    ProbMaps p_perm(k, n, n);
    for (int c = 0; c < k; ++c) {
        auto src = p.maps.plane(c);
        auto dst = p_perm.maps.plane_mut(perm[c]);
        std::copy(src.begin(), src.end(), dst.begin());
    }

    const LsEnergy a = ls_energy(p, decompose_ground_truth(gt), 0.05);
    const LsEnergy b = ls_energy(p_perm, decompose_ground_truth(gt_perm), 0.05);
    CHECK(a.total == b.total);
    for (const auto& [cls, value] : a.per_class) {
        CHECK(b.per_class.at(perm[cls]) == value);
    }

    const CeResult ce_a = cross_entropy(p, gt);
    const CeResult ce_b = cross_entropy(p_perm, gt_perm);
    CHECK(ce_a.loss == ce_b.loss);
}

TEST_CASE("near-exact step width collapses the gradient") {
    Rng rng(91);
    const int n = 8;
    for (int trial = 0; trial < 5; ++trial) {
        ProbMaps p = random_probs(rng, 3, n, n);
        // keep probabilities away from exactly 0.5 so phi stays off the contour
        for (auto& v : p.maps.data_mut()) {
            if (std::abs(v - 0.5) < 1e-2) v += v < 0.5 ? -1e-2 : 1e-2;
        }
        const LabelMap gt = random_labels(rng, 3, n, n);
        const DecomposedGT d = decompose_ground_truth(gt);

        double wide = 0.0, narrow = 0.0;
        for (double v : ls_gradient(p, d, 0.05).data()) wide = std::max(wide, std::abs(v));
        for (double v : ls_gradient(p, d, 1e-8).data()) narrow = std::max(narrow, std::abs(v));
        REQUIRE(wide > 0.0);
        CHECK(narrow / wide < 1e-6);
    }
}

TEST_CASE("cross entropy values") {
    // confident correct prediction
    ProbMaps p(2, 2, 2);
    for (auto& v : p.maps.plane_mut(0)) v = 1.0 - 1e-9;
    for (auto& v : p.maps.plane_mut(1)) v = 1e-9;
    const LabelMap gt(2, 2, 0);
    CHECK(cross_entropy(p, gt).loss == doctest::Approx(0.0).epsilon(1e-8));

    // uniform over four classes
    const ProbMaps uniform(4, 3, 3, 0.25);
    const LabelMap gt4(3, 3, 2);
    CHECK(cross_entropy(uniform, gt4).loss ==
          doctest::Approx(1.38629436111989061883446424292).epsilon(1e-14));

    // two pixels, two classes, hand computed
    ProbMaps p2(2, 1, 2);
    p2.maps.at_mut(0, 0, 0) = 0.8;
    p2.maps.at_mut(1, 0, 0) = 0.2;
    p2.maps.at_mut(0, 0, 1) = 0.3;
    p2.maps.at_mut(1, 0, 1) = 0.7;
    LabelMap gt2(1, 2, 0);
    gt2.at_mut(0, 1) = 1;
    CHECK(cross_entropy(p2, gt2).loss ==
          doctest::Approx(0.289909247626471067339466900775).epsilon(1e-14));
}

TEST_CASE("cross entropy gradient matches logit finite differences") {
    Rng rng(2718);
    const double step = 1e-5;
    const int n = 6, k = 3;
    Grid logits(k, n, n);
    for (auto& v : logits.data_mut()) v = rng.uniform(-2.0, 2.0);
    const LabelMap gt = random_labels(rng, k, n, n);

    const CeResult ce = cross_entropy(ProbMaps(reference_softmax(logits)), gt);
    double scale = 1e-12, gap = 0.0;
    auto data = logits.data_mut();
    for (std::size_t i = 0; i < data.size(); ++i) {
        const double orig = data[i];
        data[i] = orig + step;
        const double lp = cross_entropy(ProbMaps(reference_softmax(logits)), gt).loss;
        data[i] = orig - step;
        const double lm = cross_entropy(ProbMaps(reference_softmax(logits)), gt).loss;
        data[i] = orig;
        const double fd = (lp - lm) / (2 * step);
        const double an = ce.logit_grad.data()[i];
        scale = std::max({scale, std::abs(an), std::abs(fd)});
        gap = std::max(gap, std::abs(an - fd));
    }
    CHECK(gap / scale <= 1e-6);
}

TEST_CASE("combined loss bookkeeping") {
    Rng rng(1234);
    const ProbMaps p = random_probs(rng, 3, 6, 6);
    const LabelMap gt = random_labels(rng, 3, 6, 6);

    const CombinedLoss zero = combined_loss(p, gt, LossWeights{0.0, 0.05});
    const CeResult ce = cross_entropy(p, gt);
    CHECK(zero.report.total == ce.loss);
    CHECK(zero.report.ls == 0.0);
    for (std::size_t i = 0; i < ce.logit_grad.size(); ++i) {
        CHECK(zero.logit_grad.data()[i] == ce.logit_grad.data()[i]);
    }

    const CombinedLoss weighted = combined_loss(p, gt, LossWeights{4e-4, 0.05});
    CHECK(weighted.report.ce == ce.loss);
    CHECK(std::abs(weighted.report.total - (weighted.report.ce + 4e-4 * weighted.report.ls)) <=
          1e-12);
    double per_class_sum = 0.0;
    for (const auto& [cls, v] : weighted.report.per_class_ls) per_class_sum += v;
    CHECK(std::abs(weighted.report.ls - per_class_sum) <= 1e-12);
}

TEST_CASE("combined logit gradient matches finite differences") {
    Rng rng(31415);
    const double step = 1e-5;
    const int n = 6, k = 3;
    const LossWeights w{4e-4, 0.05};
    Grid logits(k, n, n);
    for (auto& v : logits.data_mut()) v = rng.uniform(-2.0, 2.0);
    const LabelMap gt = random_labels(rng, k, n, n);

    const CombinedLoss loss = combined_loss(ProbMaps(reference_softmax(logits)), gt, w);

    // freeze the per-class means at the base point for the finite difference
    const DecomposedGT d = decompose_ground_truth(gt);
    std::map<std::int32_t, RefMeans> frozen;
    {
        const Grid probs0 = reference_softmax(logits);
        for (const auto& [cls, mask] : d.masks) {
            std::vector<double> phi(static_cast<std::size_t>(n) * n);
            auto plane = probs0.plane(cls);
            for (std::size_t i = 0; i < phi.size(); ++i) phi[i] = plane[i] - 0.5;
            frozen[cls] = ref_means(mask, phi, w.epsilon);
        }
    }
    auto total_at = [&]() {
        const Grid probs = reference_softmax(logits);
        double ls = 0.0;
        for (const auto& [cls, mask] : d.masks) {
            std::vector<double> phi(static_cast<std::size_t>(n) * n);
            auto plane = probs.plane(cls);
            for (std::size_t i = 0; i < phi.size(); ++i) phi[i] = plane[i] - 0.5;
            ls += ref_energy(mask, phi, w.epsilon, frozen[cls].c1, frozen[cls].c2);
        }
        return cross_entropy(ProbMaps(Grid(probs)), gt).loss + w.lambda_ls * ls;
    };

    double scale = 1e-12, gap = 0.0;
    auto data = logits.data_mut();
    for (std::size_t i = 0; i < data.size(); ++i) {
        const double orig = data[i];
        data[i] = orig + step;
        const double lp = total_at();
        data[i] = orig - step;
        const double lm = total_at();
        data[i] = orig;
        const double fd = (lp - lm) / (2 * step);
        const double an = loss.logit_grad.data()[i];
        scale = std::max({scale, std::abs(an), std::abs(fd)});
        gap = std::max(gap, std::abs(an - fd));
    }
    CHECK(gap / scale <= 1e-4);
}

TEST_CASE("loss weight validation") {
    CHECK_THROWS_AS((LossWeights{-1.0, 0.05}.validate()), ConfigError);
    CHECK_THROWS_AS((LossWeights{0.1, 0.0}.validate()), ConfigError);
    CHECK_NOTHROW((LossWeights{0.0, 0.05}.validate()));
}
