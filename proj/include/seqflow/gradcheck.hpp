#pragma once

#include <cmath>
#include <functional>
#include <string>

#include "seqflow/tape.hpp"

namespace seqflow {

struct CheckReport {
    double max_abs_err = 0.0;
    double max_rel_err = 0.0;
    std::string location;  // "param[coord]" of the worst deviation
    bool pass = false;
    int n_checked = 0;
};

// A differentiable scalar function of the store's parameters, expressed as a
// tape program. The finite-difference side below only ever looks at the
// returned value, so it stays independent of the recorded gradients.
using TapeFn = std::function<Value(Tape&, ParamStore&)>;

inline double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

// Central-difference gradient check, h = 1e-5 per coordinate.
inline CheckReport grad_check(const TapeFn& fn, ParamStore& ps, double rel_tol, double h = 1e-5) {
    CheckReport rep;

    Tape tape;
    Value loss = fn(tape, ps);
    if (tape.val(loss).numel() != 1) throw UsageError("grad_check: fn must return a scalar");
    if (!std::isfinite(tape.val(loss).value())) throw NumericError("grad_check: fn returned non-finite value");
    GradMap gm = tape.backward(loss, ps);

    auto eval = [&]() {
        Tape t;
        t.set_grad_enabled(false);
        const double v = t.val(fn(t, ps)).value();
        if (!std::isfinite(v)) throw NumericError("grad_check: fn returned non-finite value");
        return v;
    };

    for (int p = 0; p < ps.count(); ++p) {
        Tensor& theta = ps.value(p);
        for (long long i = 0; i < theta.numel(); ++i) {
            const double orig = theta[i];
            theta[i] = orig + h;
            const double fp = eval();
            theta[i] = orig - h;
            const double fm = eval();
            theta[i] = orig;

            const double fd = (fp - fm) / (2.0 * h);
            const double an = gm.at(p)[i];
            const double ae = std::abs(fd - an);
            const double re = rel_err(fd, an);
            ++rep.n_checked;
            if (re > rep.max_rel_err) {
                rep.max_rel_err = re;
                rep.max_abs_err = ae;
                rep.location = ps.name(p) + "[" + std::to_string(i) + "]";
            }
        }
    }
    rep.pass = rep.max_rel_err <= rel_tol;
    return rep;
}

}  // namespace seqflow
