#pragma once

#include <string>
#include <vector>

#include "seqflow/rng.hpp"
#include "seqflow/tape.hpp"

namespace seqflow {

// Multi-layer LSTM. The input-to-gate transform for a whole sequence is one
// batched matmul; only the recurrent part runs step by step. That split is
// what makes generation fast for models whose inputs are known up front.
//
// Gate layout along the 4W axis: [i f g o]; forget bias starts at +1.
class LstmStack {
public:
    LstmStack() = default;

    LstmStack(ParamStore& ps, const std::string& prefix, int input, int width, int layers, Rng& init)
        : input_(input), width_(width), layers_(layers) {
        for (int l = 0; l < layers; ++l) {
            const int in_w = l == 0 ? input : width;
            Tensor wx({4 * width, in_w});
            Tensor wh({4 * width, width});
            init.fill_uniform(wx, -1.0 / std::sqrt(static_cast<double>(in_w)),
                              1.0 / std::sqrt(static_cast<double>(in_w)));
            init.fill_uniform(wh, -1.0 / std::sqrt(static_cast<double>(width)),
                              1.0 / std::sqrt(static_cast<double>(width)));
            Tensor b = Tensor::zeros({4 * width});
            for (int j = width; j < 2 * width; ++j) b[j] = 1.0;
            const std::string lp = prefix + ".l" + std::to_string(l);
            wx_.push_back(ps.add(lp + ".Wx", std::move(wx)));
            wh_.push_back(ps.add(lp + ".Wh", std::move(wh)));
            b_.push_back(ps.add(lp + ".b", std::move(b)));
        }
    }

    int width() const { return width_; }
    int layers() const { return layers_; }
    int input() const { return input_; }

    struct State {
        std::vector<Value> h, c;  // per layer, [1 x W]
    };

    State initial_state(Tape& t) const {
        State s;
        for (int l = 0; l < layers_; ++l) {
            s.h.push_back(t.constant(Tensor::zeros({1, width_})));
            s.c.push_back(t.constant(Tensor::zeros({1, width_})));
        }
        return s;
    }

    // One step; x_row [1 x input]. Returns the top-layer hidden state.
    std::pair<Value, State> step(Tape& t, const ParamStore& ps, Value x_row, const State& s) const {
        State ns;
        Value x = x_row;
        for (int l = 0; l < layers_; ++l) {
            Value gates = t.add(t.linear(x, t.param(ps, wx_[static_cast<size_t>(l)]),
                                         t.param(ps, b_[static_cast<size_t>(l)])),
                                t.matmul_nt(s.h[static_cast<size_t>(l)],
                                            t.param(ps, wh_[static_cast<size_t>(l)])));
            auto [h, c] = gate_update(t, gates, s.c[static_cast<size_t>(l)]);
            ns.h.push_back(h);
            ns.c.push_back(c);
            x = h;
        }
        return {x, ns};
    }

    // Full sweep over [T x input]; returns top-layer hidden states [T x W].
    // Dropout (when training) is applied to the inputs of layers above the
    // first, one mask per layer per sweep.
    Value sweep(Tape& t, const ParamStore& ps, Value inputs, bool training = false,
                Rng* dropout_rng = nullptr, double dropout = 0.0) const {
        const int T = t.val(inputs).rows();
        Value x = inputs;
        for (int l = 0; l < layers_; ++l) {
            if (l > 0 && training && dropout > 0.0 && dropout_rng)
                x = apply_dropout(t, x, *dropout_rng, dropout);
            Value xg = t.linear(x, t.param(ps, wx_[static_cast<size_t>(l)]),
                                t.param(ps, b_[static_cast<size_t>(l)]));  // [T x 4W]
            Value wh = t.param(ps, wh_[static_cast<size_t>(l)]);
            Value h = t.constant(Tensor::zeros({1, width_}));
            Value c = t.constant(Tensor::zeros({1, width_}));
            std::vector<Value> hs;
            hs.reserve(static_cast<size_t>(T));
            for (int step = 0; step < T; ++step) {
                Value gates = t.add(t.row(xg, step), t.matmul_nt(h, wh));
                auto [nh, nc] = gate_update(t, gates, c);
                h = nh;
                c = nc;
                hs.push_back(h);
            }
            x = t.concat_rows(hs);
        }
        return x;
    }

private:
    int input_ = 0, width_ = 0, layers_ = 0;
    std::vector<int> wx_, wh_, b_;

    std::pair<Value, Value> gate_update(Tape& t, Value gates, Value c_prev) const {
        Value i = t.sigmoid(t.slice_cols(gates, 0, width_));
        Value f = t.sigmoid(t.slice_cols(gates, width_, 2 * width_));
        Value g = t.tanh_(t.slice_cols(gates, 2 * width_, 3 * width_));
        Value o = t.sigmoid(t.slice_cols(gates, 3 * width_, 4 * width_));
        Value c = t.add(t.mul(f, c_prev), t.mul(i, g));
        Value h = t.mul(o, t.tanh_(c));
        return {h, c};
    }

    static Value apply_dropout(Tape& t, Value x, Rng& rng, double rate) {
        Tensor mask(t.val(x).shape());
        const double keep = 1.0 - rate;
        for (long long i = 0; i < mask.numel(); ++i) mask[i] = rng.bernoulli(keep) ? 1.0 / keep : 0.0;
        return t.mul(x, t.constant(std::move(mask)));
    }
};

// Two stacks run over the sequence in opposite directions, outputs
// concatenated per step: [T x 2W].
class BiLstm {
public:
    BiLstm() = default;

    BiLstm(ParamStore& ps, const std::string& prefix, int input, int width, int layers, Rng& init)
        : fw_(ps, prefix + ".fw", input, width, layers, init),
          bw_(ps, prefix + ".bw", input, width, layers, init) {}

    Value sweep(Tape& t, const ParamStore& ps, Value inputs, bool training = false,
                Rng* dropout_rng = nullptr, double dropout = 0.0) const {
        Value f = fw_.sweep(t, ps, inputs, training, dropout_rng, dropout);
        Value b = t.reverse_rows(
            bw_.sweep(t, ps, t.reverse_rows(inputs), training, dropout_rng, dropout));
        return t.concat_cols(f, b);
    }

    int width() const { return fw_.width(); }

private:
    LstmStack fw_, bw_;
};

}  // namespace seqflow
