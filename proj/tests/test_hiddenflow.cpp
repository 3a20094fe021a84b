#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "seqflow/gradcheck.hpp"
#include "seqflow/hidden_flow.hpp"
#include "seqflow/oracles.hpp"
#include "seqflow/rng.hpp"

using namespace seqflow;

namespace {

std::vector<int> natural_order(int H) {
    std::vector<int> o(static_cast<size_t>(H));
    for (int i = 0; i < H; ++i) o[static_cast<size_t>(i)] = i + 1;
    return o;
}

// Fill every registered tensor with small noise; the conditioner output head
// starts at zero (identity), so this is what makes a layer non-trivial.
void randomize(ParamStore& ps, Rng& rng, double scale) {
    for (int p = 0; p < ps.count(); ++p) {
        Tensor& v = ps.value(p);
        for (long long i = 0; i < v.numel(); ++i) v[i] = scale * rng.normal();
    }
}

Tensor random_ctx(Rng& rng, int n, int c) { return gaussian_sample(rng, {n, c}); }

// Density evaluation of one layer on plain tensors.
struct DensityOut {
    Tensor eps;
    double logdet;
};

DensityOut run_density(const HiddenFlowLayer& layer, const ParamStore& ps, const Tensor& z,
                       const Tensor& ctx) {
    Tape t;
    t.set_grad_enabled(false);
    Value zc = t.constant(z);
    Value cc = layer.conditioner().ctx_dim() > 0 ? t.constant(ctx) : Value{};
    RowTransformResult r = layer.density(t, ps, zc, cc);
    double ld = 0.0;
    for (int i = 0; i < t.val(r.logdet_rows).rows(); ++i) ld += t.val(r.logdet_rows).at(i, 0);
    return {t.val(r.out), ld};
}

}  // namespace

TEST_CASE("af layer: identity at init, constant-raw affine") {
    Rng init(1);
    ParamStore ps;
    HiddenFlowLayer layer(ps, "af", HiddenLayerKind::AF, ScalarKind::Affine, 3, 0, natural_order(3), init);

    Rng rng(2);
    Tensor z = gaussian_sample(rng, {1, 3});
    auto id = run_density(layer, ps, z, Tensor());
    for (int j = 0; j < 3; ++j) REQUIRE(id.eps.at(0, j) == z.at(0, j));
    REQUIRE(id.logdet == 0.0);

    // force constant raws a = 0, b = 2 through the (zero-weight) output bias
    Tensor& b2 = ps.value("af.b2");
    for (int j = 3; j < 6; ++j) b2[j] = std::log(2.0);
    auto r = run_density(layer, ps, z, Tensor());
    for (int j = 0; j < 3; ++j) REQUIRE(r.eps.at(0, j) == Catch::Approx(z.at(0, j) / 2.0).epsilon(1e-15));
    REQUIRE(r.logdet == Catch::Approx(3.0 * std::log(2.0)).epsilon(1e-12));
    REQUIRE(r.logdet == Catch::Approx(2.0794).margin(1e-4));

    // and the sampling direction: z = 2 * eps
    Tensor eps = gaussian_sample(rng, {2, 3});
    Tensor zs = layer.sample(ps, eps, Tensor());
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 3; ++j) REQUIRE(zs.at(i, j) == Catch::Approx(2.0 * eps.at(i, j)).epsilon(1e-15));
}

TEST_CASE("af layer: H=1 is a single unconditioned transform") {
    Rng init(3);
    ParamStore ps;
    HiddenFlowLayer layer(ps, "af1", HiddenLayerKind::AF, ScalarKind::Nlsq, 1, 0, natural_order(1), init);
    Rng rng(4);
    randomize(ps, rng, 0.5);

    Tensor eps = gaussian_sample(rng, {5, 1});
    Tensor z = layer.sample(ps, eps, Tensor());
    auto back = run_density(layer, ps, z, Tensor());
    REQUIRE(max_abs_diff(back.eps, eps) < 1e-10);
}

TEST_CASE("af layer round-trips with context, both scalar kinds") {
    Rng init(5);
    for (ScalarKind sk : {ScalarKind::Affine, ScalarKind::Nlsq}) {
        ParamStore ps;
        HiddenFlowLayer layer(ps, "af", HiddenLayerKind::AF, sk, 4, 3, natural_order(4), init);
        Rng rng(6);
        randomize(ps, rng, 0.4);
        double worst = 0.0;
        for (int trial = 0; trial < 100; ++trial) {
            Tensor ctx = random_ctx(rng, 2, 3);
            Tensor eps = gaussian_sample(rng, {2, 4});
            Tensor z = layer.sample(ps, eps, ctx);
            auto back = run_density(layer, ps, z, ctx);
            worst = std::max(worst, max_abs_diff(back.eps, eps));
        }
        REQUIRE(worst < 1e-8);
    }
}

TEST_CASE("af layer analytic logdet matches the brute-force Jacobian of the sampling map") {
    Rng init(7);
    ParamStore ps;
    HiddenFlowLayer layer(ps, "af", HiddenLayerKind::AF, ScalarKind::Nlsq, 3, 2, natural_order(3), init);
    Rng rng(8);
    randomize(ps, rng, 0.5);

    for (int trial = 0; trial < 5; ++trial) {
        Tensor ctx = random_ctx(rng, 1, 2);
        Tensor eps = gaussian_sample(rng, {1, 3});
        Tensor z = layer.sample(ps, eps, ctx);
        auto dres = run_density(layer, ps, z, ctx);
        REQUIRE(max_abs_diff(dres.eps, eps) < 1e-9);

        auto map = [&](const Tensor& e) {
            return layer.sample(ps, e.reshaped({1, 3}), ctx).reshaped({3});
        };
        const double brute = oracles::brute_jacobian_logdet(map, eps.reshaped({3}));
        REQUIRE(dres.logdet == Catch::Approx(brute).margin(1e-5));
    }
}

TEST_CASE("mask soundness: raw params never depend on same-or-later inputs") {
    Rng init(9);
    ParamStore ps;
    const int H = 5;
    HiddenFlowLayer layer(ps, "af", HiddenLayerKind::AF, ScalarKind::Nlsq, H, 2, natural_order(H), init);
    Rng rng(10);
    randomize(ps, rng, 0.6);

    Tensor ctx = random_ctx(rng, 1, 2);
    Tensor z = gaussian_sample(rng, {1, H});
    auto raws_at = [&](const Tensor& zz) {
        Tape t;
        t.set_grad_enabled(false);
        return t.val(layer.conditioner().raws(t, ps, t.constant(zz), t.constant(ctx)));
    };
    const Tensor base = raws_at(z);
    for (int e = 0; e < H; ++e) {
        Tensor pert = z;
        pert.at(0, e) += 1.37;
        const Tensor r = raws_at(pert);
        for (int d = 0; d <= e; ++d)  // order(e) >= order(d) under natural order
            for (int s = 0; s < 5; ++s)
                REQUIRE(r.at(0, s * H + d) == base.at(0, s * H + d));  // exactly zero influence
    }

    // context must reach every output, including the first dim
    Tensor ctx2 = ctx;
    ctx2.at(0, 0) += 0.7;
    Tape t;
    t.set_grad_enabled(false);
    const Tensor r2 = t.val(layer.conditioner().raws(t, ps, t.constant(z), t.constant(ctx2)));
    for (int d = 0; d < H; ++d) {
        bool moved = false;
        for (int s = 0; s < 5; ++s) moved = moved || r2.at(0, s * H + d) != base.at(0, s * H + d);
        REQUIRE(moved);
    }
}

TEST_CASE("scf layer: kept dims bitwise, single-dim logdet, H=1 refused") {
    Rng init(11);
    ParamStore ps;
    HiddenFlowLayer scf(ps, "scf", HiddenLayerKind::SCF, ScalarKind::Affine, 2, 0,
                        natural_order(2), init);
    // conditioner output b_raw for dim 2: bias index H + 1
    ps.value("scf.b2")[3] = std::log(3.0);

    Rng rng(12);
    Tensor z = gaussian_sample(rng, {4, 2});
    auto r = run_density(scf, ps, z, Tensor());
    for (int i = 0; i < 4; ++i) REQUIRE(r.eps.at(i, 0) == z.at(i, 0));  // kept bitwise
    REQUIRE(r.logdet == Catch::Approx(4.0 * std::log(3.0)).epsilon(1e-12));

    Tensor eps = gaussian_sample(rng, {3, 2});
    Tensor zs = scf.sample(ps, eps, Tensor());
    for (int i = 0; i < 3; ++i) REQUIRE(zs.at(i, 0) == eps.at(i, 0));

    ParamStore ps1;
    REQUIRE_THROWS_AS(HiddenFlowLayer(ps1, "bad", HiddenLayerKind::SCF, ScalarKind::Affine, 1, 0,
                                      natural_order(1), init),
                      UsageError);
}

TEST_CASE("scf layer: H=4 NLSq coupling matches brute-force Jacobian") {
    Rng init(13);
    ParamStore ps;
    HiddenFlowLayer scf(ps, "scf", HiddenLayerKind::SCF, ScalarKind::Nlsq, 4, 2, natural_order(4), init);
    Rng rng(14);
    randomize(ps, rng, 0.5);

    Tensor ctx = random_ctx(rng, 1, 2);
    Tensor eps = gaussian_sample(rng, {1, 4});
    Tensor z = scf.sample(ps, eps, ctx);
    auto dres = run_density(scf, ps, z, ctx);
    REQUIRE(max_abs_diff(dres.eps, eps) < 1e-9);

    auto map = [&](const Tensor& e) { return scf.sample(ps, e.reshaped({1, 4}), ctx).reshaped({4}); };
    const double brute = oracles::brute_jacobian_logdet(map, eps.reshaped({4}));
    REQUIRE(dres.logdet == Catch::Approx(brute).margin(1e-5));
}

TEST_CASE("scf is the coupling-masked special case of af, bitwise") {
    Rng init(15);
    ParamStore ps_scf, ps_af;
    const int H = 4;
    HiddenFlowLayer scf(ps_scf, "x", HiddenLayerKind::SCF, ScalarKind::Nlsq, H, 2, natural_order(H), init);
    Rng init2(15);  // same stream so hidden weights start identical
    HiddenFlowLayer af(ps_af, "x", HiddenLayerKind::AF, ScalarKind::Nlsq, H, 2, natural_order(H), init2);

    Rng rng(16);
    randomize(ps_scf, rng, 0.5);
    // kept-dim raw biases must stay zero or the AF side would transform them
    const auto& kept = scf.kept();
    Tensor& b2 = ps_scf.value("x.b2");
    for (int s = 0; s < 5; ++s)
        for (int d = 0; d < H; ++d)
            if (kept[static_cast<size_t>(d)]) b2[s * H + d] = 0.0;
    for (int p = 0; p < ps_scf.count(); ++p) ps_af.value(p) = ps_scf.value(p);

    // an AF layer whose masks zero out dependencies beyond the kept set
    af.conditioner().set_masks(scf.conditioner().masks());

    Tensor ctx = random_ctx(rng, 3, 2);
    Tensor z = gaussian_sample(rng, {3, H});
    auto r_scf = run_density(scf, ps_scf, z, ctx);
    auto r_af = run_density(af, ps_af, z, ctx);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < H; ++j) REQUIRE(r_af.eps.at(i, j) == r_scf.eps.at(i, j));
    REQUIRE(r_af.logdet == r_scf.logdet);
}

TEST_CASE("flow stack: empty stack is the identity") {
    ParamStore ps;
    FlowStack stack;
    Rng rng(17);
    Tensor z = gaussian_sample(rng, {2, 3});
    Tape t;
    t.set_grad_enabled(false);
    RowTransformResult r = stack.density(t, ps, t.constant(z), Value{});
    REQUIRE(max_abs_diff(t.val(r.out), z) == 0.0);
    for (int i = 0; i < 2; ++i) REQUIRE(t.val(r.logdet_rows).at(i, 0) == 0.0);
    REQUIRE(max_abs_diff(stack.sample(ps, z, Tensor()), z) == 0.0);
}

TEST_CASE("flow stack: round-trip, logdet accumulation, oracle check") {
    Rng init(19);
    ParamStore ps;
    FlowStack stack(ps, "stack", HiddenLayerKind::AF, ScalarKind::Nlsq, 2, 5, 2, init);
    Rng rng(20);
    randomize(ps, rng, 0.4);

    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        Tensor ctx = random_ctx(rng, 1, 2);
        Tensor eps = gaussian_sample(rng, {1, 5});
        Tensor z = stack.sample(ps, eps, ctx);
        Tape t;
        t.set_grad_enabled(false);
        RowTransformResult r = stack.density(t, ps, t.constant(z), t.constant(ctx));
        worst = std::max(worst, max_abs_diff(t.val(r.out), eps));
    }
    REQUIRE(worst < 1e-7);

    // total logdet = sum of per-layer logdets, exactly
    Tensor ctx = random_ctx(rng, 1, 2);
    Tensor z = gaussian_sample(rng, {1, 5});
    Tape t;
    t.set_grad_enabled(false);
    Value zc = t.constant(z);
    Value cc = t.constant(ctx);
    RowTransformResult whole = stack.density(t, ps, zc, cc);
    RowTransformResult l1 = stack.layer(1).density(t, ps, zc, cc);
    RowTransformResult l0 = stack.layer(0).density(t, ps, l1.out, cc);
    REQUIRE(t.val(whole.logdet_rows).at(0, 0) ==
            t.val(l1.logdet_rows).at(0, 0) + t.val(l0.logdet_rows).at(0, 0));
    REQUIRE(max_abs_diff(t.val(whole.out), t.val(l0.out)) == 0.0);

    // 5-layer NLSq stack H=3 against the finite-difference oracle
    ParamStore ps5;
    Rng init5(21);
    FlowStack stack5(ps5, "s5", HiddenLayerKind::AF, ScalarKind::Nlsq, 5, 3, 0, init5);
    Rng rng5(22);
    randomize(ps5, rng5, 0.4);
    Tensor eps5 = gaussian_sample(rng5, {1, 3});
    Tensor z5 = stack5.sample(ps5, eps5, Tensor());
    Tape t5;
    t5.set_grad_enabled(false);
    RowTransformResult r5 = stack5.density(t5, ps5, t5.constant(z5), Value{});
    auto map5 = [&](const Tensor& e) { return stack5.sample(ps5, e.reshaped({1, 3}), Tensor()).reshaped({3}); };
    REQUIRE(t5.val(r5.logdet_rows).at(0, 0) ==
            Catch::Approx(oracles::brute_jacobian_logdet(map5, eps5.reshaped({3}))).margin(1e-5));
}

TEST_CASE("flow layers grad-check at 1e-4") {
    Rng init(23);
    for (auto [lk, sk] : {std::pair{HiddenLayerKind::AF, ScalarKind::Affine},
                          std::pair{HiddenLayerKind::AF, ScalarKind::Nlsq},
                          std::pair{HiddenLayerKind::SCF, ScalarKind::Affine},
                          std::pair{HiddenLayerKind::SCF, ScalarKind::Nlsq}}) {
        ParamStore ps;
        HiddenFlowLayer layer(ps, "l", lk, sk, 3, 2, natural_order(3), init);
        Rng rng(24);
        randomize(ps, rng, 0.4);
        Tensor z = gaussian_sample(rng, {2, 3});
        Tensor ctx = random_ctx(rng, 2, 2);
        auto fn = [&](Tape& t, ParamStore& s) {
            RowTransformResult r = layer.density(t, s, t.constant(z), t.constant(ctx));
            return t.add(t.sum(t.mul(r.out, r.out)), t.sum(r.logdet_rows));
        };
        CheckReport rep = grad_check(fn, ps, 1e-4);
        INFO("layer kind " << (lk == HiddenLayerKind::AF ? "AF" : "SCF") << " scalar "
                           << (sk == ScalarKind::Affine ? "affine" : "nlsq") << " worst "
                           << rep.location << " rel " << rep.max_rel_err);
        REQUIRE(rep.pass);
    }
}
