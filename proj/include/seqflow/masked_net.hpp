#pragma once

#include <string>
#include <vector>

#include "seqflow/rng.hpp"
#include "seqflow/tape.hpp"

namespace seqflow {

// MADE-style masked conditioner: a small ReLU net from (flow dims, context)
// to per-dimension raw transform parameters, with binary masks enforcing the
// dependency structure.
//
// Degrees: input dim e carries its position order[e] in 1..H (0 marks a
// fully visible input: context columns always, kept dims for coupling).
// Hidden unit degree m admits inputs with degree <= m; the output block for
// dim d admits hidden units with degree < out_deg[d]. Hidden degrees cycle
// over 0..H-1, so degree-0 units exist and context reaches even the first
// dimension in the ordering.
//
// Raw outputs are laid out slot-major: [n x slots*H], columns [s*H, (s+1)*H)
// holding raw slot s for every dimension.
class MaskedConditioner {
public:
    MaskedConditioner() = default;

    // order[e] in 1..H for autoregressive masking; out_deg[d] = order[d].
    // For coupling, pass order[e] = 0 for kept dims / 1 for transformed, and
    // out_deg[d] = 1 for transformed dims / 0 for kept (a kept dim's raw
    // params see nothing, not even context, and its bias stays zero).
    MaskedConditioner(ParamStore& ps, const std::string& prefix, int H, int ctx_dim, int hidden_width,
                      int slots, const std::vector<int>& in_deg, const std::vector<int>& out_deg,
                      Rng& init)
        : H_(H), ctx_(ctx_dim), hidden_(hidden_width), slots_(slots) {
        if (static_cast<int>(in_deg.size()) != H || static_cast<int>(out_deg.size()) != H)
            throw UsageError("MaskedConditioner: degree vector size mismatch");
        const int in_w = H + ctx_dim;

        int max_deg = 0;
        for (int d : in_deg) max_deg = std::max(max_deg, d);
        std::vector<int> hdeg(static_cast<size_t>(hidden_width));
        const int cycle = std::max(max_deg, 1);  // degrees 0..max_deg-1
        for (int j = 0; j < hidden_width; ++j) hdeg[static_cast<size_t>(j)] = j % cycle;

        // layer 0: [hidden x (H+ctx)]
        Tensor m0({hidden_width, in_w});
        for (int j = 0; j < hidden_width; ++j) {
            for (int i = 0; i < H; ++i)
                m0.at(j, i) = hdeg[static_cast<size_t>(j)] >= in_deg[static_cast<size_t>(i)] ? 1.0 : 0.0;
            for (int i = 0; i < ctx_dim; ++i) m0.at(j, H + i) = 1.0;
        }
        // layer 1: [hidden x hidden]
        Tensor m1({hidden_width, hidden_width});
        for (int j = 0; j < hidden_width; ++j)
            for (int k = 0; k < hidden_width; ++k)
                m1.at(j, k) = hdeg[static_cast<size_t>(j)] >= hdeg[static_cast<size_t>(k)] ? 1.0 : 0.0;
        // output: [slots*H x hidden]
        Tensor m2({slots * H, hidden_width});
        for (int s = 0; s < slots; ++s)
            for (int d = 0; d < H; ++d)
                for (int k = 0; k < hidden_width; ++k)
                    m2.at(s * H + d, k) =
                        out_deg[static_cast<size_t>(d)] > hdeg[static_cast<size_t>(k)] ? 1.0 : 0.0;
        masks_ = {std::move(m0), std::move(m1), std::move(m2)};

        auto uinit = [&](int rows, int cols) {
            Tensor w({rows, cols});
            const double r = 1.0 / std::sqrt(static_cast<double>(cols));
            init.fill_uniform(w, -r, r);
            return w;
        };
        w_.push_back(ps.add(prefix + ".W0", uinit(hidden_width, in_w)));
        b_.push_back(ps.add(prefix + ".b0", Tensor::zeros({hidden_width})));
        w_.push_back(ps.add(prefix + ".W1", uinit(hidden_width, hidden_width)));
        b_.push_back(ps.add(prefix + ".b1", Tensor::zeros({hidden_width})));
        // identity start: zero weights and biases on the raw-parameter head
        w_.push_back(ps.add(prefix + ".W2", Tensor::zeros({slots * H, hidden_width})));
        b_.push_back(ps.add(prefix + ".b2", Tensor::zeros({slots * H})));
    }

    // x: [n x H] flow inputs; ctx: [n x ctx_dim] (ignored when ctx_dim == 0).
    Value raws(Tape& t, const ParamStore& ps, Value x, Value ctx) const {
        Value in = ctx_ > 0 ? t.concat_cols(x, ctx) : x;
        Value h0 = t.relu(t.masked_linear(in, t.param(ps, w_[0]), masks_[0], t.param(ps, b_[0])));
        Value h1 = t.relu(t.masked_linear(h0, t.param(ps, w_[1]), masks_[1], t.param(ps, b_[1])));
        return t.masked_linear(h1, t.param(ps, w_[2]), masks_[2], t.param(ps, b_[2]));
    }

    int H() const { return H_; }
    int ctx_dim() const { return ctx_; }
    int slots() const { return slots_; }
    const std::vector<Tensor>& masks() const { return masks_; }

    // Test hook: replace the masks (shape-checked) to emulate one dependency
    // structure with another's weights.
    void set_masks(std::vector<Tensor> masks) {
        if (masks.size() != masks_.size()) throw UsageError("set_masks: layer count mismatch");
        for (size_t i = 0; i < masks.size(); ++i)
            if (!masks[i].same_shape(masks_[i])) throw UsageError("set_masks: shape mismatch");
        masks_ = std::move(masks);
    }

private:
    int H_ = 0, ctx_ = 0, hidden_ = 0, slots_ = 0;
    std::vector<int> w_, b_;
    std::vector<Tensor> masks_;
};

}  // namespace seqflow
