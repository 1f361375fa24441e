#include "lsseg/ls_loss.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace lsseg {

DecomposedGT decompose_ground_truth(const LabelMap& gt) {
    std::vector<std::int32_t> present;
    for (auto v : gt.labels) {
        if (v < 0) throw NumericError("negative class label " + std::to_string(v));
        if (std::find(present.begin(), present.end(), v) == present.end()) present.push_back(v);
    }
    std::sort(present.begin(), present.end());

    DecomposedGT d;
    d.rows = gt.rows();
    d.cols = gt.cols();
    d.masks.reserve(present.size());
    for (auto cls : present) {
        BinaryMask m(gt.rows(), gt.cols(), 0.0);
        auto dst = m.mask.data_mut();
        for (std::size_t i = 0; i < gt.labels.size(); ++i) dst[i] = gt.labels[i] == cls ? 1.0 : 0.0;
        d.masks.emplace_back(cls, std::move(m));
    }
    return d;
}

std::vector<LevelSetField> shift_probabilities(const ProbMaps& p) {
    std::vector<LevelSetField> fields;
    fields.reserve(p.classes());
    for (int k = 0; k < p.classes(); ++k) {
        LevelSetField f(p.rows(), p.cols());
        auto src = p.maps.plane(k);
        auto dst = f.field.data_mut();
        for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i] - 0.5;
        fields.push_back(std::move(f));
    }
    return fields;
}

std::pair<double, double> class_region_means(const BinaryMask& g, std::span<const double> phi,
                                             const HeavisideKind& h) {
    if (phi.size() != g.mask.size()) throw ShapeError("class_region_means: phi/mask size mismatch");
    double num_in = 0.0, den_in = 0.0, num_out = 0.0, den_out = 0.0;
    auto gm = g.mask.data();
    for (std::size_t i = 0; i < phi.size(); ++i) {
        const double w = heaviside(h, phi[i]);
        num_in += gm[i] * w;
        den_in += w;
        num_out += gm[i] * (1.0 - w);
        den_out += 1.0 - w;
    }
    const double c1 = den_in > 0.0 ? num_in / den_in : 0.0;
    const double c2 = den_out > 0.0 ? num_out / den_out : 0.0;
    return {c1, c2};
}

double class_energy_with_means(const BinaryMask& g, std::span<const double> phi,
                               const HeavisideKind& h, double c1, double c2) {
    if (phi.size() != g.mask.size()) throw ShapeError("class_energy_with_means: size mismatch");
    double acc = 0.0;
    auto gm = g.mask.data();
    for (std::size_t i = 0; i < phi.size(); ++i) {
        const double w = heaviside(h, phi[i]);
        const double din = gm[i] - c1;
        const double dout = gm[i] - c2;
        acc += din * din * w + dout * dout * (1.0 - w);
    }
    return acc;
}

namespace {

void check_classes(const ProbMaps& p, const DecomposedGT& d) {
    if (p.rows() != d.rows || p.cols() != d.cols) {
        throw ShapeError("probability maps and ground truth shapes differ");
    }
    for (const auto& [cls, mask] : d.masks) {
        if (cls >= p.classes()) {
            throw ShapeError("ground truth class " + std::to_string(cls) +
                             " has no probability map (only " + std::to_string(p.classes()) +
                             " classes)");
        }
    }
}

std::vector<double> shifted_plane(const ProbMaps& p, int cls) {
    auto src = p.maps.plane(cls);
    std::vector<double> phi(src.size());
    for (std::size_t i = 0; i < src.size(); ++i) phi[i] = src[i] - 0.5;
    return phi;
}

}  // namespace

LsEnergy ls_energy(const ProbMaps& p, const DecomposedGT& d, const HeavisideKind& h) {
    check_classes(p, d);
    LsEnergy e;
    for (const auto& [cls, mask] : d.masks) {
        const auto phi = shifted_plane(p, cls);
        const auto [c1, c2] = class_region_means(mask, phi, h);
        e.per_class[cls] = class_energy_with_means(mask, phi, h, c1, c2);
    }
    // Sum in value order, not class order, so the total is exactly invariant
    // under class relabeling.
    std::vector<double> terms;
    terms.reserve(e.per_class.size());
    for (const auto& [cls, value] : e.per_class) terms.push_back(value);
    std::sort(terms.begin(), terms.end());
    for (double t : terms) e.total += t;
    return e;
}

LsEnergy ls_energy(const ProbMaps& p, const DecomposedGT& d, double eps) {
    return ls_energy(p, d, HeavisideKind::tanh_approx(eps));
}

Grid ls_gradient(const ProbMaps& p, const DecomposedGT& d, const HeavisideKind& h) {
    check_classes(p, d);
    Grid grad(p.classes(), p.rows(), p.cols(), 0.0);
    for (const auto& [cls, mask] : d.masks) {
        const auto phi = shifted_plane(p, cls);
        const auto [c1, c2] = class_region_means(mask, phi, h);
        auto gm = mask.mask.data();
        auto dst = grad.plane_mut(cls);
        for (std::size_t i = 0; i < phi.size(); ++i) {
            const double din = gm[i] - c1;
            const double dout = gm[i] - c2;
            dst[i] = delta(h, phi[i]) * (din * din - dout * dout);
#ifdef LSSEG_FAULT_INJECT_SIGNFLIP
            dst[i] = -dst[i];  // test-only fault used by the gradcheck mutation test
#endif
        }
    }
    return grad;
}

Grid ls_gradient(const ProbMaps& p, const DecomposedGT& d, double eps) {
    return ls_gradient(p, d, HeavisideKind::tanh_approx(eps));
}

CeResult cross_entropy(const ProbMaps& p, const LabelMap& gt) {
    if (p.rows() != gt.rows() || p.cols() != gt.cols()) {
        throw ShapeError("cross_entropy: probability maps and labels differ in shape");
    }
    gt.validate(p.classes());

    const double n = static_cast<double>(gt.size());
    CeResult r{0.0, Grid(p.classes(), p.rows(), p.cols(), 0.0)};
    auto grad = r.logit_grad.data_mut();
    auto probs = p.maps.data();
    const std::size_t plane_size = gt.size();

    double acc = 0.0;
    for (std::size_t i = 0; i < plane_size; ++i) {
        const auto cls = static_cast<std::size_t>(gt.labels[i]);
        acc -= std::log(std::max(probs[cls * plane_size + i], 1e-12));
    }
    r.loss = acc / n;

    for (int k = 0; k < p.classes(); ++k) {
        const std::size_t base = static_cast<std::size_t>(k) * plane_size;
        for (std::size_t i = 0; i < plane_size; ++i) {
            const double onehot = gt.labels[i] == k ? 1.0 : 0.0;
            grad[base + i] = (probs[base + i] - onehot) / n;
        }
    }
    return r;
}

CombinedLoss combined_loss(const ProbMaps& p, const LabelMap& gt, const LossWeights& w,
                           const HeavisideKind& h) {
    w.validate();
    CeResult ce = cross_entropy(p, gt);

    CombinedLoss out{LossReport{}, std::move(ce.logit_grad)};
    out.report.ce = ce.loss;

    if (w.lambda_ls > 0.0) {
        const DecomposedGT d = decompose_ground_truth(gt);
        const LsEnergy e = ls_energy(p, d, h);
        const Grid phi_grad = ls_gradient(p, d, h);

        const std::size_t plane_size = static_cast<std::size_t>(p.rows()) * p.cols();
        const double norm = w.per_pixel_mean ? 1.0 / static_cast<double>(plane_size) : 1.0;

        out.report.ls = e.total * norm;
        for (const auto& [cls, value] : e.per_class) out.report.per_class_ls[cls] = value * norm;

        // Chain rule through softmax: dE/dz_k = P_k (g_k - sum_l g_l P_l),
        // since phi_l = P_l - 0.5 shifts by a constant.
        auto probs = p.maps.data();
        auto g = phi_grad.data();
        auto dst = out.logit_grad.data_mut();
        const double scale = w.lambda_ls * norm;
        for (std::size_t i = 0; i < plane_size; ++i) {
            double dot = 0.0;
            for (int l = 0; l < p.classes(); ++l) {
                const std::size_t idx = static_cast<std::size_t>(l) * plane_size + i;
                dot += g[idx] * probs[idx];
            }
            for (int k = 0; k < p.classes(); ++k) {
                const std::size_t idx = static_cast<std::size_t>(k) * plane_size + i;
                dst[idx] += scale * probs[idx] * (g[idx] - dot);
            }
        }
    }

    out.report.total = out.report.ce + w.lambda_ls * out.report.ls;
    return out;
}

CombinedLoss combined_loss(const ProbMaps& p, const LabelMap& gt, const LossWeights& w) {
    return combined_loss(p, gt, w, HeavisideKind::tanh_approx(w.epsilon));
}

}  // namespace lsseg
