#pragma once

#include <cmath>

#include "seqflow/errors.hpp"
#include "seqflow/tape.hpp"

namespace seqflow {

// ---------------------------------------------------------------------------
// Scalar invertible transforms: affine and non-linear squared (NLSq).
//
// NLSq:  f(x) = a + b*x + c / (1 + (d*x + g)^2)
// with b, d > 0. The map is strictly increasing iff b > (9/(8*sqrt(3)))*|c|*d;
// the constrained parameterization below enforces that with margin alpha.
// Inverting f means finding the single real root of a cubic.
// ---------------------------------------------------------------------------

inline constexpr double kNlsqAlpha = 0.95;
inline constexpr double kRawClamp = 7.0;  // b_raw/d_raw clamp before exp
inline const double kPerturbBound = 8.0 * std::sqrt(3.0) / 9.0;  // = 1/(9/(8*sqrt(3)))

struct AffineParams {
    double a = 0.0;  // shift
    double b = 1.0;  // scale, > 0
};

struct NlsqParams {
    double a = 0.0;
    double b = 1.0;  // > 0
    double c = 0.0;  // |c| <= alpha * kPerturbBound * b / d
    double d = 1.0;  // > 0
    double g = 0.0;
};

struct NlsqRaw {
    double a = 0.0, b = 0.0, c = 0.0, d = 0.0, g = 0.0;
};

inline double clamp_raw(double x) { return x < -kRawClamp ? -kRawClamp : (x > kRawClamp ? kRawClamp : x); }

inline AffineParams affine_constrain(double a_raw, double b_raw) {
    if (!std::isfinite(a_raw) || !std::isfinite(b_raw))
        throw NumericError("affine_constrain: non-finite raw input");
    return AffineParams{a_raw, std::exp(clamp_raw(b_raw))};
}

inline NlsqParams nlsq_constrain(const NlsqRaw& raw, double alpha = kNlsqAlpha) {
    if (!std::isfinite(raw.a) || !std::isfinite(raw.b) || !std::isfinite(raw.c) ||
        !std::isfinite(raw.d) || !std::isfinite(raw.g))
        throw NumericError("nlsq_constrain: non-finite raw input");
    NlsqParams p;
    p.a = raw.a;
    p.g = raw.g;
    p.b = std::exp(clamp_raw(raw.b));
    p.d = std::exp(clamp_raw(raw.d));
    // same evaluation order as the tape-side constrain, so the two paths
    // produce bit-identical parameters
    p.c = ((p.b / p.d) * std::tanh(raw.c)) * (kPerturbBound * alpha);
    return p;
}

// Slack of the invertibility condition b - (9/(8*sqrt(3)))*|c|*d; positive for
// every constrained parameter set.
inline double nlsq_invertibility_margin(const NlsqParams& p) {
    return p.b - std::abs(p.c) * p.d / kPerturbBound;
}

inline double affine_forward(double eps, const AffineParams& p) { return p.a + p.b * eps; }
inline double affine_inverse(double z, const AffineParams& p) { return (z - p.a) / p.b; }
inline double affine_logderiv(const AffineParams& p) { return std::log(p.b); }

// f(eps) and log f'(eps). f' > 0 is guaranteed under valid params.
inline double nlsq_eval(double eps, const NlsqParams& p) {
    const double u = p.d * eps + p.g;
    return p.a + p.b * eps + p.c / (1.0 + u * u);
}

inline double nlsq_deriv(double eps, const NlsqParams& p) {
    const double u = p.d * eps + p.g;
    const double den = 1.0 + u * u;
    return p.b - 2.0 * p.c * p.d * u / (den * den);
}

struct NlsqForwardResult {
    double z;
    double dlogdet;  // log f'(eps)
};

inline NlsqForwardResult nlsq_forward(double eps, const NlsqParams& p) {
    return NlsqForwardResult{nlsq_eval(eps, p), std::log(nlsq_deriv(eps, p))};
}

// Unique real root of f(eps) = z. The cubic is reduced to depressed form;
// the single-real-root branch uses Cardano with the cancellation-safe
// pairing, and the three-real-root region (unreachable under valid params)
// raises InvariantViolation. A Newton step washes out the remaining
// closed-form roundoff.
inline double nlsq_inverse(double z, const NlsqParams& p) {
    if (p.c == 0.0) return (z - p.a) / p.b;  // affine reduction, exact

    const double za = z - p.a;
    const double d2 = p.d * p.d;
    const double g2p1 = p.g * p.g + 1.0;
    // -b d^2 e^3 + (za d^2 - 2 d g b) e^2 + (2 d g za - b g2p1) e + (za g2p1 - c) = 0
    const double lead = -p.b * d2;
    const double A2 = (za * d2 - 2.0 * p.d * p.g * p.b) / lead;
    const double A1 = (2.0 * p.d * p.g * za - p.b * g2p1) / lead;
    const double A0 = (za * g2p1 - p.c) / lead;

    const double P = A1 - A2 * A2 / 3.0;
    const double Q = 2.0 * A2 * A2 * A2 / 27.0 - A2 * A1 / 3.0 + A0;
    const double half_q = Q / 2.0;
    const double third_p = P / 3.0;
    const double disc = half_q * half_q + third_p * third_p * third_p;

    double y;
    const double disc_scale = std::max({half_q * half_q, std::abs(third_p * third_p * third_p), 1e-300});
    if (disc > -1e-9 * disc_scale) {
        // One real root (Cardano). Pick the cube root that avoids cancelling
        // -Q/2 against sqrt(disc), then recover its partner from u*v = -P/3.
        const double sq = std::sqrt(std::max(disc, 0.0));
        const double s = -half_q;
        const double u3 = s >= 0.0 ? s + sq : s - sq;
        const double u = std::cbrt(u3);
        const double v = (u != 0.0) ? -third_p / u : 0.0;
        y = u + v;
    } else {
        // Trig branch: all roots real. A monotone transform admits exactly one
        // solution, so distinct roots here mean the params were corrupted
        // upstream; coincident roots (boundary roundoff) are tolerated.
        const double rho = 2.0 * std::sqrt(-third_p);
        double arg = (3.0 * Q) / (2.0 * P) * std::sqrt(-3.0 / P);
        arg = std::min(1.0, std::max(-1.0, arg));
        const double theta = std::acos(arg);
        double roots[3];
        double lo = 0.0, hi = 0.0, maxabs = 0.0;
        for (int k = 0; k < 3; ++k) {
            roots[k] = rho * std::cos((theta - 2.0 * M_PI * k) / 3.0);
            lo = k == 0 ? roots[k] : std::min(lo, roots[k]);
            hi = k == 0 ? roots[k] : std::max(hi, roots[k]);
            maxabs = std::max(maxabs, std::abs(roots[k]));
        }
        if (hi - lo > 1e-6 * (1.0 + maxabs))
            throw InvariantViolation("nlsq_inverse: cubic has three real roots (corrupted params)");
        y = roots[0];
        for (int k = 1; k < 3; ++k) {
            const double cand = roots[k] - A2 / 3.0;
            if (std::abs(nlsq_eval(cand, p) - z) < std::abs(nlsq_eval(y - A2 / 3.0, p) - z)) y = roots[k];
        }
    }

    double eps = y - A2 / 3.0;
    // Newton polish on f(eps) - z.
    for (int it = 0; it < 2; ++it) {
        const double r = nlsq_eval(eps, p) - z;
        if (std::abs(r) < 1e-14 * std::max(1.0, std::abs(z))) break;
        eps -= r / nlsq_deriv(eps, p);
    }
    return eps;
}

// ---------------------------------------------------------------------------
// Direction convention.
//
// Density evaluation runs many times per training step, so the cheap closed
// form backs it; the cubic solve only appears on the generation path. For the
// affine transform both directions are closed-form and the question is moot.
// ---------------------------------------------------------------------------

enum class ScalarKind { Affine, Nlsq };
enum class FlowDirection { Density, Sampling };
enum class ScalarRoutine { ClosedForm, CubicSolve };

inline ScalarRoutine direction_convention(ScalarKind kind, FlowDirection dir) {
    if (kind != ScalarKind::Affine && kind != ScalarKind::Nlsq)
        throw UsageError("direction_convention: unknown scalar kind");
    switch (dir) {
        case FlowDirection::Density:
            return ScalarRoutine::ClosedForm;
        case FlowDirection::Sampling:
            return kind == ScalarKind::Nlsq ? ScalarRoutine::CubicSolve : ScalarRoutine::ClosedForm;
    }
    throw UsageError("direction_convention: unknown flow direction");
}

inline int scalar_param_count(ScalarKind kind) { return kind == ScalarKind::Affine ? 2 : 5; }

// ---------------------------------------------------------------------------
// Tape-side elementwise application. Raw conditioner outputs come in as
// [n x k*H] blocks (slot-major: all a_raw columns, then all b_raw columns,
// ...); these helpers constrain them and apply the transform to whole
// matrices at once so a full sequence runs through in a handful of nodes.
// ---------------------------------------------------------------------------

struct AffineValues {
    Value a, b;  // each [n x H]
};

struct NlsqValues {
    Value a, b, c, d, g;  // each [n x H]
};

inline AffineValues affine_constrain_tape(Tape& t, Value raws, int H) {
    AffineValues p;
    p.a = t.slice_cols(raws, 0, H);
    p.b = t.exp_(t.clamp(t.slice_cols(raws, H, 2 * H), -kRawClamp, kRawClamp));
    return p;
}

inline NlsqValues nlsq_constrain_tape(Tape& t, Value raws, int H, double alpha = kNlsqAlpha) {
    NlsqValues p;
    p.a = t.slice_cols(raws, 0, H);
    p.b = t.exp_(t.clamp(t.slice_cols(raws, H, 2 * H), -kRawClamp, kRawClamp));
    p.d = t.exp_(t.clamp(t.slice_cols(raws, 3 * H, 4 * H), -kRawClamp, kRawClamp));
    p.c = t.scale(t.mul(t.div(p.b, p.d), t.tanh_(t.slice_cols(raws, 2 * H, 3 * H))),
                  kPerturbBound * alpha);
    p.g = t.slice_cols(raws, 4 * H, 5 * H);
    return p;
}

struct TransformedRows {
    Value out;       // transformed values [n x H]
    Value logderiv;  // per-element log-slope of the map that was applied [n x H]
};

// Affine, sampling-parameterized: z = a + b*eps.
inline TransformedRows affine_sample_tape(Tape& t, Value eps, const AffineValues& p) {
    return {t.add(p.a, t.mul(p.b, eps)), t.log_(p.b)};
}

// Affine, density direction: eps = (z - a)/b; log-slope reported for the
// sampling map (log b), matching the layer's log|det dz/deps| convention.
inline TransformedRows affine_density_tape(Tape& t, Value z, const AffineValues& p) {
    return {t.div(t.sub(z, p.a), p.b), t.log_(p.b)};
}

// NLSq is parameterized in the density direction (closed form maps the
// observed value to noise); logderiv is the slope of that closed form, so the
// layer's log|det dz/deps| contribution is its negation.
inline TransformedRows nlsq_density_tape(Tape& t, Value z, const NlsqValues& p) {
    Value u = t.add(t.mul(p.d, z), p.g);
    Value den = t.add_const(t.mul(u, u), 1.0);
    Value out = t.add(t.add(p.a, t.mul(p.b, z)), t.div(p.c, den));
    // slope = b - 2 c d u / den^2, positive by construction
    Value slope = t.sub(p.b, t.div(t.scale(t.mul(t.mul(p.c, p.d), u), 2.0), t.mul(den, den)));
    return {out, t.log_(slope)};
}

}  // namespace seqflow
