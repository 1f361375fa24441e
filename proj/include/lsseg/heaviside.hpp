#pragma once

#include <cmath>
#include <string>

#include "lsseg/error.hpp"

namespace lsseg {

/// Family of Heaviside step functions used as region indicators:
///  - Exact: the unit step, 1 for z >= 0.
///  - ArctanApprox: classic smoothed step 1/2 (1 + (2/pi) atan(z/eps)).
///  - TanhApprox: tanh-based smoothed step 1/2 (1 + tanh(z/eps)).
enum class HeavisideVariant { Exact, ArctanApprox, TanhApprox };

struct HeavisideKind {
    HeavisideVariant variant = HeavisideVariant::TanhApprox;
    double epsilon = kDefaultTanhEpsilon;

    /// Smoothing widths that work well in practice for the two approximations.
    static constexpr double kDefaultTanhEpsilon = 1.0 / 20.0;
    static constexpr double kDefaultArctanEpsilon = 20.0;

    static HeavisideKind exact() { return {HeavisideVariant::Exact, 0.0}; }
    static HeavisideKind tanh_approx(double eps = kDefaultTanhEpsilon) {
        check_epsilon(eps);
        return {HeavisideVariant::TanhApprox, eps};
    }
    static HeavisideKind arctan_approx(double eps = kDefaultArctanEpsilon) {
        check_epsilon(eps);
        return {HeavisideVariant::ArctanApprox, eps};
    }

    bool is_smooth() const { return variant != HeavisideVariant::Exact; }

    const char* name() const {
        switch (variant) {
            case HeavisideVariant::Exact: return "hf";
            case HeavisideVariant::ArctanApprox: return "ahf";
            case HeavisideVariant::TanhApprox: return "mahf";
        }
        return "?";
    }

private:
    static void check_epsilon(double eps) {
        if (!(eps > 0.0)) throw ConfigError("heaviside epsilon must be > 0, got " + std::to_string(eps));
    }
};

inline double heaviside(const HeavisideKind& kind, double z) {
    switch (kind.variant) {
        case HeavisideVariant::Exact:
            return z >= 0.0 ? 1.0 : 0.0;
        case HeavisideVariant::ArctanApprox:
            return 0.5 * (1.0 + (2.0 / 3.14159265358979323846) * std::atan(z / kind.epsilon));
        case HeavisideVariant::TanhApprox:
            return 0.5 * (1.0 + std::tanh(z / kind.epsilon));
    }
    return 0.0;
}

/// Derivative of the smoothed step; the exact step has no usable derivative
/// and is rejected. The tanh form keeps the (1-t)(1+t) factorization, which
/// stays accurate when t is within rounding of +-1.
inline double delta(const HeavisideKind& kind, double z) {
    switch (kind.variant) {
        case HeavisideVariant::Exact:
            throw UnsupportedError("exact heaviside has no usable derivative; use a smooth variant");
        case HeavisideVariant::ArctanApprox:
            return (1.0 / 3.14159265358979323846) * kind.epsilon /
                   (kind.epsilon * kind.epsilon + z * z);
        case HeavisideVariant::TanhApprox: {
            const double t = std::tanh(z / kind.epsilon);
            return (1.0 / (2.0 * kind.epsilon)) * (1.0 - t) * (1.0 + t);
        }
    }
    return 0.0;
}

}  // namespace lsseg
