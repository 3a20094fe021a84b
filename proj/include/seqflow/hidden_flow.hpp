#pragma once

#include <string>
#include <vector>

#include "seqflow/masked_net.hpp"
#include "seqflow/scalar_transform.hpp"

namespace seqflow {

// ---------------------------------------------------------------------------
// Invertible transforms over one H-dimensional latent vector. Inputs arrive
// as [n x H] matrices; the n rows (timesteps, batch points) are independent
// given their context rows, so density evaluation is one batched pass.
//
// density() maps observed values to base noise and returns the per-row
// log|det dz/deps| of the generative map. sample() inverts it on plain
// tensors; for NLSq that is where the cubic solver lives.
// ---------------------------------------------------------------------------

struct RowTransformResult {
    Value out;          // [n x H]
    Value logdet_rows;  // [n x 1], log|det dz/deps| per row
};

enum class HiddenLayerKind { AF, SCF };

class HiddenFlowLayer {
public:
    HiddenFlowLayer() = default;

    // order: permutation positions, order[e] in 1..H. For SCF the kept set is
    // the first ceil(H/2) positions of the ordering.
    HiddenFlowLayer(ParamStore& ps, const std::string& prefix, HiddenLayerKind kind, ScalarKind scalar,
                    int H, int ctx_dim, const std::vector<int>& order, Rng& init, int hidden_width = 0)
        : kind_(kind), scalar_(scalar), H_(H), order_(order) {
        if (kind == HiddenLayerKind::SCF && H < 2)
            throw UsageError("SCF layer needs H >= 2 (nonempty kept and transformed sets)");
        if (static_cast<int>(order.size()) != H) throw UsageError("HiddenFlowLayer: order size mismatch");
        const int width = hidden_width > 0 ? hidden_width : 4 * H;
        const int slots = scalar_param_count(scalar);

        std::vector<int> in_deg(static_cast<size_t>(H)), out_deg(static_cast<size_t>(H));
        if (kind == HiddenLayerKind::AF) {
            for (int e = 0; e < H; ++e) in_deg[static_cast<size_t>(e)] = order[static_cast<size_t>(e)];
            out_deg = in_deg;
        } else {
            const int keep = (H + 1) / 2;
            kept_.assign(static_cast<size_t>(H), false);
            for (int e = 0; e < H; ++e) kept_[static_cast<size_t>(e)] = order[static_cast<size_t>(e)] <= keep;
            for (int e = 0; e < H; ++e) {
                in_deg[static_cast<size_t>(e)] = kept_[static_cast<size_t>(e)] ? 0 : 1;
                out_deg[static_cast<size_t>(e)] = kept_[static_cast<size_t>(e)] ? 0 : 1;
            }
        }
        cond_ = MaskedConditioner(ps, prefix, H, ctx_dim, width, slots, in_deg, out_deg, init);
    }

    RowTransformResult density(Tape& t, const ParamStore& ps, Value v, Value ctx) const {
        Value raws = cond_.raws(t, ps, v, ctx);
        Value out, logderiv;
        if (scalar_ == ScalarKind::Affine) {
            AffineValues p = affine_constrain_tape(t, raws, H_);
            TransformedRows r = affine_density_tape(t, v, p);
            out = r.out;
            logderiv = r.logderiv;  // already log|dz/deps| per element
        } else {
            NlsqValues p = nlsq_constrain_tape(t, raws, H_);
            TransformedRows r = nlsq_density_tape(t, v, p);
            out = r.out;
            logderiv = t.neg(r.logderiv);  // closed form gave log|deps/dz|
        }
        if (kind_ == HiddenLayerKind::SCF) {
            Tensor keep_mask({1, H_});
            for (int e = 0; e < H_; ++e) keep_mask.at(0, e) = kept_[static_cast<size_t>(e)] ? 1.0 : 0.0;
            Tensor keep_rows({t.val(v).rows(), H_});
            Tensor move_rows({t.val(v).rows(), H_});
            for (int i = 0; i < t.val(v).rows(); ++i)
                for (int e = 0; e < H_; ++e) {
                    keep_rows.at(i, e) = keep_mask.at(0, e);
                    move_rows.at(i, e) = 1.0 - keep_mask.at(0, e);
                }
            Value km = t.constant(keep_rows);
            Value mm = t.constant(move_rows);
            out = t.add(t.mul(v, km), t.mul(out, mm));       // kept dims pass through bitwise
            logderiv = t.mul(logderiv, mm);                  // identity contributes 0
        }
        return {out, t.rowsum(logderiv)};
    }

    // Inverse of density() on raw tensors; rows stay independent. AF runs one
    // conditioner pass per ordering position, SCF a single pass.
    Tensor sample(const ParamStore& ps, const Tensor& eps, const Tensor& ctx) const {
        const int n = eps.rows();
        Tensor z({n, H_});
        Tape t;
        t.set_grad_enabled(false);
        if (kind_ == HiddenLayerKind::SCF) {
            for (int i = 0; i < n; ++i)
                for (int e = 0; e < H_; ++e)
                    if (kept_[static_cast<size_t>(e)]) z.at(i, e) = eps.at(i, e);
            const Tensor raws = conditioner_raws(t, ps, z, ctx);
            for (int i = 0; i < n; ++i)
                for (int e = 0; e < H_; ++e)
                    if (!kept_[static_cast<size_t>(e)]) z.at(i, e) = invert_scalar(raws, i, e, eps.at(i, e));
        } else {
            for (int pos = 1; pos <= H_; ++pos) {
                const Tensor raws = conditioner_raws(t, ps, z, ctx);
                for (int e = 0; e < H_; ++e) {
                    if (order_[static_cast<size_t>(e)] != pos) continue;
                    for (int i = 0; i < n; ++i) z.at(i, e) = invert_scalar(raws, i, e, eps.at(i, e));
                }
                t.reset();
            }
        }
        return z;
    }

    const MaskedConditioner& conditioner() const { return cond_; }
    MaskedConditioner& conditioner() { return cond_; }
    const std::vector<bool>& kept() const { return kept_; }
    HiddenLayerKind kind() const { return kind_; }
    ScalarKind scalar() const { return scalar_; }

private:
    HiddenLayerKind kind_ = HiddenLayerKind::AF;
    ScalarKind scalar_ = ScalarKind::Nlsq;
    int H_ = 0;
    std::vector<int> order_;
    std::vector<bool> kept_;  // SCF only
    MaskedConditioner cond_;

    Tensor conditioner_raws(Tape& t, const ParamStore& ps, const Tensor& v, const Tensor& ctx) const {
        Value vv = t.constant(v);
        Value cv = cond_.ctx_dim() > 0 ? t.constant(ctx) : Value{};
        return t.val(cond_.raws(t, ps, vv, cv));
    }

    double invert_scalar(const Tensor& raws, int i, int e, double eps) const {
        if (scalar_ == ScalarKind::Affine) {
            const AffineParams p = affine_constrain(raws.at(i, e), raws.at(i, H_ + e));
            return affine_forward(eps, p);
        }
        const NlsqParams p = nlsq_constrain(NlsqRaw{raws.at(i, e), raws.at(i, H_ + e),
                                                    raws.at(i, 2 * H_ + e), raws.at(i, 3 * H_ + e),
                                                    raws.at(i, 4 * H_ + e)});
        // density direction is the closed form, so sampling solves the cubic
        return nlsq_inverse(eps, p);
    }
};

// Stack of hidden-flow layers with the ordering reversed between consecutive
// layers. sample() applies layer 0 first; density() unwinds in reverse.
class FlowStack {
public:
    FlowStack() = default;

    FlowStack(ParamStore& ps, const std::string& prefix, HiddenLayerKind kind, ScalarKind scalar,
              int n_layers, int H, int ctx_dim, Rng& init, int hidden_width = 0)
        : H_(H) {
        for (int l = 0; l < n_layers; ++l) {
            std::vector<int> order(static_cast<size_t>(H));
            for (int e = 0; e < H; ++e)
                order[static_cast<size_t>(e)] = (l % 2 == 0) ? e + 1 : H - e;
            layers_.emplace_back(ps, prefix + ".layer" + std::to_string(l), kind, scalar, H, ctx_dim,
                                 order, init, hidden_width);
        }
    }

    RowTransformResult density(Tape& t, const ParamStore& ps, Value z, Value ctx) const {
        Value v = z;
        Value total;
        for (int l = static_cast<int>(layers_.size()) - 1; l >= 0; --l) {
            RowTransformResult r = layers_[static_cast<size_t>(l)].density(t, ps, v, ctx);
            v = r.out;
            total = total.valid() ? t.add(total, r.logdet_rows) : r.logdet_rows;
        }
        if (!total.valid()) total = t.constant(Tensor::zeros({t.val(z).rows(), 1}));
        return {v, total};
    }

    Tensor sample(const ParamStore& ps, const Tensor& eps, const Tensor& ctx) const {
        Tensor v = eps;
        for (const auto& layer : layers_) v = layer.sample(ps, v, ctx);
        return v;
    }

    int n_layers() const { return static_cast<int>(layers_.size()); }
    int H() const { return H_; }
    const HiddenFlowLayer& layer(int l) const { return layers_.at(static_cast<size_t>(l)); }
    HiddenFlowLayer& layer(int l) { return layers_.at(static_cast<size_t>(l)); }

private:
    int H_ = 0;
    std::vector<HiddenFlowLayer> layers_;
};

}  // namespace seqflow
