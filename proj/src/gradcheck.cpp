#include "lsseg/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "lsseg/error.hpp"
#include "lsseg/heaviside.hpp"
#include "lsseg/ls_loss.hpp"
#include "lsseg/rng.hpp"
#include "lsseg/tinynet.hpp"

namespace lsseg {

double gradient_gap(const std::vector<double>& analytic, const std::vector<double>& numeric) {
    if (analytic.size() != numeric.size()) throw ShapeError("gradient_gap: size mismatch");
    double scale = 1e-12;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        scale = std::max(scale, std::max(std::abs(analytic[i]), std::abs(numeric[i])));
    }
    double gap = 0.0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        gap = std::max(gap, std::abs(analytic[i] - numeric[i]) / scale);
    }
    return gap;
}

namespace {

ProbMaps random_prob_maps(Rng& rng, int k, int h, int w) {
    Grid logits(k, h, w);
    for (auto& v : logits.data_mut()) v = rng.uniform(-2.0, 2.0);
    ProbMaps p(k, h, w);
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    auto src = logits.data();
    auto dst = p.maps.data_mut();
    for (std::size_t i = 0; i < plane; ++i) {
        double m = src[i];
        for (int c = 1; c < k; ++c) m = std::max(m, src[c * plane + i]);
        double sum = 0.0;
        for (int c = 0; c < k; ++c) {
            dst[c * plane + i] = std::exp(src[c * plane + i] - m);
            sum += dst[c * plane + i];
        }
        for (int c = 0; c < k; ++c) dst[c * plane + i] /= sum;
    }
    return p;
}

LabelMap random_labels(Rng& rng, int k, int h, int w) {
    LabelMap gt(h, w);
    for (auto& v : gt.labels) v = static_cast<std::int32_t>(rng.uniform_int(0, k - 1));
    return gt;
}

double check_delta(Rng& rng, int cases) {
    double worst = 0.0;
    const double step = 1e-6;
    for (int c = 0; c < cases; ++c) {
        const HeavisideKind kind = (c % 2 == 0) ? HeavisideKind::tanh_approx()
                                                : HeavisideKind::tanh_approx(1.0);
        std::vector<double> analytic, numeric;
        for (int i = 0; i < 200; ++i) {
            const double z = rng.uniform(-1.0, 1.0);
            analytic.push_back(delta(kind, z));
            numeric.push_back((heaviside(kind, z + step) - heaviside(kind, z - step)) / (2 * step));
        }
        worst = std::max(worst, gradient_gap(analytic, numeric));
    }
    return worst;
}

/// Frozen-mean finite differences of the level set energy; also measures the
/// gap against finite differences with the means re-solved per evaluation.
std::pair<double, double> check_ls_gradient(Rng& rng, int cases) {
    double worst_frozen = 0.0;
    double worst_unfrozen = 0.0;
    const double step = 1e-5;
    for (int c = 0; c < cases; ++c) {
        const int h = 2 * static_cast<int>(rng.uniform_int(2, 8));
        const int w = 2 * static_cast<int>(rng.uniform_int(2, 8));
        const int k = static_cast<int>(rng.uniform_int(2, 4));
        const HeavisideKind kind = (c % 2 == 0) ? HeavisideKind::tanh_approx()
                                                : HeavisideKind::tanh_approx(1.0);
        const ProbMaps p = random_prob_maps(rng, k, h, w);
        const DecomposedGT d = decompose_ground_truth(random_labels(rng, k, h, w));
        const Grid analytic = ls_gradient(p, d, kind);

        const std::size_t plane = static_cast<std::size_t>(h) * w;
        std::vector<double> ana, frozen, unfrozen;
        for (const auto& [cls, mask] : d.masks) {
            std::vector<double> phi(plane);
            auto src = p.maps.plane(cls);
            for (std::size_t i = 0; i < plane; ++i) phi[i] = src[i] - 0.5;
            const auto [c1, c2] = class_region_means(mask, phi, kind);

            auto g = analytic.plane(cls);
            for (std::size_t i = 0; i < plane; ++i) {
                ana.push_back(g[i]);
                std::vector<double> pp = phi;
                pp[i] = phi[i] + step;
                const double ep = class_energy_with_means(mask, pp, kind, c1, c2);
                const auto [cp1, cp2] = class_region_means(mask, pp, kind);
                const double ep_solved = class_energy_with_means(mask, pp, kind, cp1, cp2);
                pp[i] = phi[i] - step;
                const double em = class_energy_with_means(mask, pp, kind, c1, c2);
                const auto [cm1, cm2] = class_region_means(mask, pp, kind);
                const double em_solved = class_energy_with_means(mask, pp, kind, cm1, cm2);
                frozen.push_back((ep - em) / (2 * step));
                unfrozen.push_back((ep_solved - em_solved) / (2 * step));
            }
        }
        worst_frozen = std::max(worst_frozen, gradient_gap(ana, frozen));
        worst_unfrozen = std::max(worst_unfrozen, gradient_gap(ana, unfrozen));
    }
    return {worst_frozen, worst_unfrozen};
}

ProbMaps softmax_of(const Grid& logits) {
    ProbMaps p(logits.planes(), logits.rows(), logits.cols());
    const std::size_t plane = static_cast<std::size_t>(logits.rows()) * logits.cols();
    auto src = logits.data();
    auto dst = p.maps.data_mut();
    for (std::size_t i = 0; i < plane; ++i) {
        double m = src[i];
        for (int c = 1; c < logits.planes(); ++c) m = std::max(m, src[c * plane + i]);
        double sum = 0.0;
        for (int c = 0; c < logits.planes(); ++c) {
            dst[c * plane + i] = std::exp(src[c * plane + i] - m);
            sum += dst[c * plane + i];
        }
        for (int c = 0; c < logits.planes(); ++c) dst[c * plane + i] /= sum;
    }
    return p;
}

double check_ce_gradient(Rng& rng, int cases) {
    double worst = 0.0;
    const double step = 1e-5;
    for (int c = 0; c < cases; ++c) {
        const int h = 2 * static_cast<int>(rng.uniform_int(2, 5));
        const int w = 2 * static_cast<int>(rng.uniform_int(2, 5));
        const int k = static_cast<int>(rng.uniform_int(2, 4));
        Grid logits(k, h, w);
        for (auto& v : logits.data_mut()) v = rng.uniform(-2.0, 2.0);
        const LabelMap gt = random_labels(rng, k, h, w);

        const CeResult ce = cross_entropy(softmax_of(logits), gt);
        std::vector<double> ana(ce.logit_grad.data().begin(), ce.logit_grad.data().end());
        std::vector<double> num;
        num.reserve(ana.size());
        auto data = logits.data_mut();
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double orig = data[i];
            data[i] = orig + step;
            const double lp = cross_entropy(softmax_of(logits), gt).loss;
            data[i] = orig - step;
            const double lm = cross_entropy(softmax_of(logits), gt).loss;
            data[i] = orig;
            num.push_back((lp - lm) / (2 * step));
        }
        worst = std::max(worst, gradient_gap(ana, num));
    }
    return worst;
}

double check_end_to_end(Rng& rng, int cases) {
    double worst = 0.0;
    const double step = 1e-5;
    const LossWeights weights{4e-4, HeavisideKind::kDefaultTanhEpsilon};
    for (int c = 0; c < cases; ++c) {
        const TinyNetConfig cfg{1, 4, 8, 3};
        TinyNet net = TinyNet::he_init(cfg, rng.next_u64());
        Image img(8, 8, 1);
        for (auto& v : img.px.data_mut()) v = rng.uniform(0.0, 1.0);
        const LabelMap gt = random_labels(rng, 3, 8, 8);

        const ForwardResult fwd = forward(net, img);
        const CombinedLoss loss = combined_loss(fwd.probs, gt, weights);
        const std::vector<Tensor> grads = backward(net, fwd.cache, loss.logit_grad);

        std::vector<double> ana, num;
        for (std::size_t t = 0; t < net.params().size(); ++t) {
            auto& w = net.params()[t].v;
            for (std::size_t i = 0; i < w.size(); ++i) {
                ana.push_back(grads[t].v[i]);
                const double orig = w[i];
                w[i] = orig + step;
                const double lp =
                    combined_loss(forward(net, img).probs, gt, weights).report.total;
                w[i] = orig - step;
                const double lm =
                    combined_loss(forward(net, img).probs, gt, weights).report.total;
                w[i] = orig;
                num.push_back((lp - lm) / (2 * step));
            }
        }
        worst = std::max(worst, gradient_gap(ana, num));
    }
    return worst;
}

}  // namespace

GradCheckReport run_gradcheck(std::uint64_t seed, int cases) {
    if (cases < 1) throw ConfigError("gradcheck needs at least one case");
    Rng rng(seed);
    GradCheckReport report;

    const double delta_err = check_delta(rng, cases);
    report.entries.push_back({"mahf delta", delta_err, 1e-5, cases, delta_err <= 1e-5});

    const auto [ls_err, unfrozen] = check_ls_gradient(rng, cases);
    report.unfrozen_ls_err = unfrozen;
    report.entries.push_back({"ls gradient (frozen means)", ls_err, 1e-5, cases, ls_err <= 1e-5});

    const double ce_err = check_ce_gradient(rng, cases);
    report.entries.push_back({"cross entropy", ce_err, 1e-6, cases, ce_err <= 1e-6});

    const int e2e_cases = std::min(cases, 10);
    const double e2e_err = check_end_to_end(rng, e2e_cases);
    report.entries.push_back({"end-to-end parameters", e2e_err, 1e-4, e2e_cases, e2e_err <= 1e-4});

    return report;
}

}  // namespace lsseg
