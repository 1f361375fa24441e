#pragma once

#include <map>
#include <span>
#include <utility>
#include <vector>

#include "lsseg/chan_vese.hpp"
#include "lsseg/grid.hpp"
#include "lsseg/heaviside.hpp"

namespace lsseg {

/// Ground truth split into one binary map per class present in the label map,
/// background included. The maps partition the image: per pixel exactly one
/// mask holds 1.
struct DecomposedGT {
    std::vector<std::pair<std::int32_t, BinaryMask>> masks;  // ascending class id
    int rows = 0;
    int cols = 0;

    bool has_class(std::int32_t cls) const {
        for (const auto& [id, m] : masks)
            if (id == cls) return true;
        return false;
    }
};

DecomposedGT decompose_ground_truth(const LabelMap& gt);

/// phi_l = P_l - 0.5, one field per class.
std::vector<LevelSetField> shift_probabilities(const ProbMaps& p);

struct LossWeights {
    double lambda_ls = 4e-4;
    double epsilon = HeavisideKind::kDefaultTanhEpsilon;
    /// Report the level set term as a per-pixel mean instead of a raw sum.
    /// Off by default: the stock lambda is calibrated against the sum, so
    /// switching this on calls for rescaling lambda by the pixel count.
    bool per_pixel_mean = false;

    void validate() const {
        if (lambda_ls < 0.0) throw ConfigError("lambda_ls must be >= 0");
        if (!(epsilon > 0.0)) throw ConfigError("epsilon must be > 0");
    }
};

struct LossReport {
    double ce = 0.0;
    double ls = 0.0;
    double total = 0.0;
    std::map<std::int32_t, double> per_class_ls;
};

/// Weighted means of the binary ground truth inside/outside the smooth
/// contour of phi. Smooth variants keep both denominators strictly positive.
std::pair<double, double> class_region_means(const BinaryMask& g, std::span<const double> phi,
                                             const HeavisideKind& h);

/// Single-class variance energy with explicitly supplied means; the means are
/// treated as constants, which is also how the analytic gradient treats them.
double class_energy_with_means(const BinaryMask& g, std::span<const double> phi,
                               const HeavisideKind& h, double c1, double c2);

struct LsEnergy {
    double total = 0.0;
    std::map<std::int32_t, double> per_class;
};

/// Level set energy summed over the classes present in the ground truth:
///   E_l = sum (G_l - c_l1)^2 H(phi_l) + sum (G_l - c_l2)^2 (1 - H(phi_l)),
/// with phi_l = P_l - 0.5 and c_l1/c_l2 from class_region_means. Raw pixel
/// sums, not means, so the loss weight keeps its meaning across resolutions.
LsEnergy ls_energy(const ProbMaps& p, const DecomposedGT& d, const HeavisideKind& h);
LsEnergy ls_energy(const ProbMaps& p, const DecomposedGT& d, double eps);

/// dE/dphi_l = delta(phi_l) [ (G_l - c_l1)^2 - (G_l - c_l2)^2 ], with the
/// region means frozen at the current phi. Classes absent from the ground
/// truth get a zero plane.
Grid ls_gradient(const ProbMaps& p, const DecomposedGT& d, const HeavisideKind& h);
Grid ls_gradient(const ProbMaps& p, const DecomposedGT& d, double eps);

struct CeResult {
    double loss = 0.0;  // mean negative log-likelihood over pixels
    Grid logit_grad;    // (P - onehot(gt)) / N, valid for softmax outputs
};

CeResult cross_entropy(const ProbMaps& p, const LabelMap& gt);

struct CombinedLoss {
    LossReport report;
    Grid logit_grad;  // d(ce + lambda * ls)/dlogits, chain rule through softmax
};

/// Total objective ce + lambda_ls * ls with its gradient with respect to the
/// pre-softmax logits. With lambda_ls == 0 the level set computation is
/// skipped entirely, so a zero-weight run is bit-identical to plain CE.
CombinedLoss combined_loss(const ProbMaps& p, const LabelMap& gt, const LossWeights& w,
                           const HeavisideKind& h);
CombinedLoss combined_loss(const ProbMaps& p, const LabelMap& gt, const LossWeights& w);

}  // namespace lsseg
