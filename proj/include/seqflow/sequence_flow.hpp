#pragma once

#include <string>
#include <vector>

#include "seqflow/hidden_flow.hpp"
#include "seqflow/lstm.hpp"

namespace seqflow {

inline constexpr double kLog2Pi = 1.8378770664093454836;

// Two one-hot encodings per step: distance from the start and distance from
// the end, each L_max wide. This is how every part of the model sees T.
inline Tensor length_features(int T, int L_max) {
    if (T < 1 || T > L_max)
        throw LengthError("length_features: T = " + std::to_string(T) + " outside [1, " +
                          std::to_string(L_max) + "]");
    Tensor f({T, 2 * L_max});
    for (int t = 0; t < T; ++t) {
        f.at(t, t) = 1.0;                      // start distance t
        f.at(t, L_max + (T - 1 - t)) = 1.0;    // end distance T-1-t
    }
    return f;
}

enum class PriorKind { AfAf, AfScf, IafScf, AfOnly };

inline const char* prior_kind_name(PriorKind k) {
    switch (k) {
        case PriorKind::AfAf: return "af_af";
        case PriorKind::AfScf: return "af_scf";
        case PriorKind::IafScf: return "iaf_scf";
        case PriorKind::AfOnly: return "af_only";
    }
    throw UsageError("prior_kind_name: unknown kind");
}

inline PriorKind prior_kind_from_name(const std::string& s) {
    if (s == "af_af") return PriorKind::AfAf;
    if (s == "af_scf") return PriorKind::AfScf;
    if (s == "iaf_scf") return PriorKind::IafScf;
    if (s == "af_only") return PriorKind::AfOnly;
    throw UsageError("unknown prior kind: " + s);
}

struct PriorConfig {
    PriorKind kind = PriorKind::AfAf;
    ScalarKind scalar = ScalarKind::Nlsq;
    int H = 50;
    int L_max = 288;
    int n_flow_layers = 0;  // 0 = default for the kind (5; 3 for IAF/SCF)
    int lstm_width = 500;
    int lstm_layers = 2;
    int made_hidden = 0;    // 0 = 4*H
    double dropout = 0.3;   // recurrent conditioner of the AF-in-time models

    int flow_layers() const {
        if (n_flow_layers > 0) return n_flow_layers;
        return kind == PriorKind::IafScf ? 3 : 5;
    }

    HiddenLayerKind hidden_kind() const {
        return (kind == PriorKind::AfAf || kind == PriorKind::AfOnly) ? HiddenLayerKind::AF
                                                                      : HiddenLayerKind::SCF;
    }
};

// The sequence-level prior p(z_{1:T} | T): a stack of hidden-dimension flows
// conditioned per step on a recurrent summary of previous latent vectors
// (z for AF-in-time, base noise for IAF-in-time, nothing for the ablation)
// plus length features.
class SequencePrior {
public:
    SequencePrior() = default;

    SequencePrior(ParamStore& ps, const std::string& prefix, const PriorConfig& cfg, Rng& init)
        : cfg_(cfg) {
        const int feat_w = 2 * cfg.L_max;
        const int lstm_in = cfg.kind == PriorKind::AfOnly ? feat_w : cfg.H + feat_w;
        lstm_ = LstmStack(ps, prefix + ".time", lstm_in, cfg.lstm_width, cfg.lstm_layers, init);
        Tensor start({1, cfg.H});
        init.fill_uniform(start, -0.1, 0.1);
        start_id_ = ps.add(prefix + ".start", std::move(start));
        stack_ = FlowStack(ps, prefix + ".flow", cfg.hidden_kind(), cfg.scalar, cfg.flow_layers(),
                           cfg.H, cfg.lstm_width, init, cfg.made_hidden);
    }

    const PriorConfig& config() const { return cfg_; }
    const FlowStack& stack() const { return stack_; }

    struct Density {
        Value eps;          // [T x H]
        Value logdet_rows;  // [T x 1] per-step hidden-stack log|det dz/deps|
        Value logp;         // scalar log p(z | T)
    };

    // z: [T x H] on the tape. AF-in-time models run one recurrent sweep over
    // the observed z and one batched pass per flow layer; IAF-in-time must
    // recover eps step by step because the conditioner consumes it.
    Density density(Tape& t, const ParamStore& ps, Value z, bool training = false,
                    Rng* dropout_rng = nullptr) const {
        const int T = t.val(z).rows();
        check_length(T);
        Value feats = t.constant(length_features(T, cfg_.L_max));
        Value eps, ld_rows;

        if (cfg_.kind == PriorKind::IafScf) {
            LstmStack::State state = lstm_.initial_state(t);
            Value prev = t.param(ps, start_id_);
            std::vector<Value> eps_rows, ld_parts;
            for (int step = 0; step < T; ++step) {
                Value in = t.concat_cols(prev, t.row(feats, step));
                auto [ctx, ns] = lstm_.step(t, ps, in, state);
                state = ns;
                RowTransformResult r = stack_.density(t, ps, t.row(z, step), ctx);
                eps_rows.push_back(r.out);
                ld_parts.push_back(r.logdet_rows);
                prev = r.out;
            }
            eps = t.concat_rows(eps_rows);
            ld_rows = t.concat_rows(ld_parts);
        } else {
            Value ctx = context_sweep(t, ps, z, feats, T, training, dropout_rng);
            RowTransformResult r = stack_.density(t, ps, z, ctx);
            eps = r.out;
            ld_rows = r.logdet_rows;
        }

        Value base = t.add_const(t.scale(t.sum(t.mul(eps, eps)), -0.5),
                                 -0.5 * kLog2Pi * static_cast<double>(T) * cfg_.H);
        Value logp = t.sub(base, t.sum(ld_rows));
        return {eps, ld_rows, logp};
    }

    // Deterministic half of sampling: map base noise eps [T x H] to z.
    Tensor sample_from_eps(const ParamStore& ps, const Tensor& eps) const {
        const int T = eps.rows();
        check_length(T);
        const Tensor feats = length_features(T, cfg_.L_max);
        Tape t;
        t.set_grad_enabled(false);

        if (cfg_.kind == PriorKind::IafScf || cfg_.kind == PriorKind::AfOnly) {
            // all conditioner inputs are known up front: one batched sweep,
            // then every timestep's coupling transforms at once
            Value inputs;
            if (cfg_.kind == PriorKind::AfOnly) {
                inputs = t.constant(feats);
            } else {
                // step t conditions on eps_{<t}: shift behind the start row
                Value shifted = t.slice_rows(
                    t.concat_rows({t.param(ps, start_id_), t.constant(eps)}), 0, T);
                inputs = t.concat_cols(shifted, t.constant(feats));
            }
            Value ctx = lstm_.sweep(t, ps, inputs);
            return stack_.sample(ps, eps, t.val(ctx));
        }

        // AF in time: serial over steps (z_{t-1} feeds the conditioner)
        Tensor z({T, cfg_.H});
        LstmStack::State state = lstm_.initial_state(t);
        Value prev = t.param(ps, start_id_);
        for (int step = 0; step < T; ++step) {
            Value in = t.concat_cols(prev, t.row(t.constant(feats), step));
            auto [ctx, ns] = lstm_.step(t, ps, in, state);
            state = ns;
            Tensor eps_row({1, cfg_.H});
            for (int j = 0; j < cfg_.H; ++j) eps_row.at(0, j) = eps.at(step, j);
            const Tensor z_row = stack_.sample(ps, eps_row, t.val(ctx));
            for (int j = 0; j < cfg_.H; ++j) z.at(step, j) = z_row.at(0, j);
            prev = t.constant(z_row);
        }
        return z;
    }

    Tensor sample(const ParamStore& ps, int T, Rng& rng) const {
        return sample_from_eps(ps, gaussian_sample(rng, {T, cfg_.H}));
    }

private:
    PriorConfig cfg_;
    LstmStack lstm_;
    FlowStack stack_;
    int start_id_ = -1;

    void check_length(int T) const {
        if (T < 1 || T > cfg_.L_max)
            throw LengthError("sequence length " + std::to_string(T) + " outside [1, " +
                              std::to_string(cfg_.L_max) + "]");
    }

    // Context for AF-in-time (observed z shifted by one behind a learned
    // start row) and for the severed ablation (length features only).
    Value context_sweep(Tape& t, const ParamStore& ps, Value z, Value feats, int T, bool training,
                        Rng* dropout_rng) const {
        Value inputs;
        if (cfg_.kind == PriorKind::AfOnly) {
            inputs = feats;
            return lstm_.sweep(t, ps, inputs);  // no latent feedback, no dropout
        }
        Value prev = T > 1 ? t.concat_rows({t.param(ps, start_id_), t.slice_rows(z, 0, T - 1)})
                           : t.param(ps, start_id_);
        inputs = t.concat_cols(prev, feats);
        return lstm_.sweep(t, ps, inputs, training, dropout_rng, cfg_.dropout);
    }
};

}  // namespace seqflow
