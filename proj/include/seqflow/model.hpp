#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include <json.hpp>

#include "seqflow/data.hpp"
#include "seqflow/lstm.hpp"
#include "seqflow/sequence_flow.hpp"

namespace seqflow {

// ---------------------------------------------------------------------------
// Length model: empirical histogram over observed sequence lengths. Unseen
// lengths carry probability zero (no smoothing), which shows up as an
// infinite NLL contribution rather than an error.
// ---------------------------------------------------------------------------
class LengthModel {
public:
    void fit(const Corpus& corpus) {
        if (corpus.empty()) throw DataError("LengthModel::fit: empty corpus");
        counts_.clear();
        total_ = 0;
        for (const auto& s : corpus) add(s.length());
    }

    void add(int T, long long count = 1) {
        if (T < 1) throw UsageError("LengthModel::add: T must be positive");
        if (static_cast<size_t>(T) >= counts_.size()) counts_.resize(static_cast<size_t>(T) + 1, 0);
        counts_[static_cast<size_t>(T)] += count;
        total_ += count;
    }

    bool empty() const { return total_ == 0; }
    long long total() const { return total_; }

    double prob(int T) const {
        if (total_ == 0 || T < 1 || static_cast<size_t>(T) >= counts_.size()) return 0.0;
        return static_cast<double>(counts_[static_cast<size_t>(T)]) / static_cast<double>(total_);
    }

    double nll_nats(int T) const {
        const double p = prob(T);
        return p > 0.0 ? -std::log(p) : std::numeric_limits<double>::infinity();
    }

    int sample(Rng& rng) const {
        if (total_ == 0) throw StateError("LengthModel::sample: model is empty");
        long long u = static_cast<long long>(rng.uniform() * static_cast<double>(total_));
        u = std::min(u, total_ - 1);
        for (size_t T = 1; T < counts_.size(); ++T) {
            u -= counts_[T];
            if (u < 0) return static_cast<int>(T);
        }
        return static_cast<int>(counts_.size()) - 1;
    }

    nlohmann::json to_json() const {
        nlohmann::json counts = nlohmann::json::object();
        for (size_t T = 1; T < counts_.size(); ++T)
            if (counts_[T] > 0) counts[std::to_string(T)] = counts_[T];
        return {{"counts", counts}, {"total", total_}};
    }

    static LengthModel from_json(const nlohmann::json& j) {
        LengthModel m;
        if (j.contains("counts"))
            for (auto it = j["counts"].begin(); it != j["counts"].end(); ++it)
                m.add(std::stoi(it.key()), it.value().get<long long>());
        return m;
    }

private:
    std::vector<long long> counts_;
    long long total_ = 0;
};

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

// ELBO terms in nats, summed over the sequences they were computed on.
// Sign conventions: reconstruction = E[log p(x|z)] <= 0, kl >= 0 in
// expectation, elbo = reconstruction - kl. Per-token bit values are reported
// as positive magnitudes.
struct ElboReport {
    double reconstruction = 0.0;
    double kl = 0.0;
    double elbo = 0.0;
    double objective = 0.0;  // reconstruction - kl_weight * kl
    long long tokens = 0;
    int sequences = 0;

    double recon_bpc() const { return -reconstruction / (static_cast<double>(tokens) * M_LN2); }
    double kl_bpc() const { return kl / (static_cast<double>(tokens) * M_LN2); }
    double elbo_bpc() const { return -elbo / (static_cast<double>(tokens) * M_LN2); }

    ElboReport& operator+=(const ElboReport& o) {
        reconstruction += o.reconstruction;
        kl += o.kl;
        elbo += o.elbo;
        objective += o.objective;
        tokens += o.tokens;
        sequences += o.sequences;
        return *this;
    }
};

// Importance-sampled log-likelihood estimate. The length term is carried
// separately; published numbers may or may not include it, so both
// normalizations are available.
struct IsEstimate {
    double log_px_given_T = 0.0;  // log(1/K sum_k w_k)
    double length_nats = 0.0;     // -log p(T)
    double std_err_nats = 0.0;    // delta-method MC standard error of log_px
    long long tokens = 0;
    int sequences = 0;

    double nll_nats() const { return -log_px_given_T; }
    double nll_nats_with_len() const { return -log_px_given_T + length_nats; }
    double nll_bpc() const { return nll_nats() / (static_cast<double>(tokens) * M_LN2); }
    double nll_bpc_with_len() const {
        return nll_nats_with_len() / (static_cast<double>(tokens) * M_LN2);
    }

    IsEstimate& operator+=(const IsEstimate& o) {
        log_px_given_T += o.log_px_given_T;
        length_nats += o.length_nats;
        std_err_nats = std::sqrt(std_err_nats * std_err_nats + o.std_err_nats * o.std_err_nats);
        tokens += o.tokens;
        sequences += o.sequences;
        return *this;
    }
};

// Shared importance-sampling core: given per-sample log-weights
// log w_k = log p(x|z_k) + log p(z_k) - log q(z_k|x), returns the log of the
// averaged weight plus a delta-method standard error.
struct LogMeanExp {
    double log_mean;
    double std_err;
};

inline LogMeanExp log_mean_exp(const std::vector<double>& logw) {
    if (logw.empty()) throw UsageError("log_mean_exp: no samples");
    const double mx = *std::max_element(logw.begin(), logw.end());
    double se = 0.0;
    for (double lw : logw) se += std::exp(lw - mx);
    const double mean = se / static_cast<double>(logw.size());
    double var = 0.0;
    for (double lw : logw) {
        const double d = std::exp(lw - mx) - mean;
        var += d * d;
    }
    var /= static_cast<double>(logw.size());
    const double std_err =
        logw.size() > 1 ? std::sqrt(var / static_cast<double>(logw.size())) / mean : 0.0;
    return {mx + std::log(mean), std_err};
}

// ---------------------------------------------------------------------------
// Generative model: flow prior over z_{1:T}, conditionally independent
// emission p(x_t|z,T) from an inputless bidirectional decoder, diagonal
// Gaussian inference network, empirical length model.
// ---------------------------------------------------------------------------

enum class EmissionKind { Categorical, Bernoulli };

struct ModelConfig {
    PriorConfig prior;
    EmissionKind emission = EmissionKind::Categorical;
    int vocab = 0;  // V for categorical; 88 for bernoulli
    int embed = 500;
    int enc_width = 500, enc_layers = 2;
    int dec_width = 500, dec_layers = 2;
    double logsig_clamp = 7.0;
    uint64_t init_seed = 1;

    nlohmann::json to_json() const {
        return {{"prior",
                 {{"kind", prior_kind_name(prior.kind)},
                  {"scalar", prior.scalar == ScalarKind::Nlsq ? "nlsq" : "affine"},
                  {"H", prior.H},
                  {"L_max", prior.L_max},
                  {"n_flow_layers", prior.n_flow_layers},
                  {"lstm_width", prior.lstm_width},
                  {"lstm_layers", prior.lstm_layers},
                  {"made_hidden", prior.made_hidden},
                  {"dropout", prior.dropout}}},
                {"emission", emission == EmissionKind::Categorical ? "categorical" : "bernoulli"},
                {"vocab", vocab},
                {"embed", embed},
                {"enc_width", enc_width},
                {"enc_layers", enc_layers},
                {"dec_width", dec_width},
                {"dec_layers", dec_layers},
                {"logsig_clamp", logsig_clamp},
                {"init_seed", init_seed}};
    }

    static ModelConfig from_json(const nlohmann::json& j) {
        ModelConfig c;
        const auto& p = j.at("prior");
        c.prior.kind = prior_kind_from_name(p.at("kind").get<std::string>());
        c.prior.scalar = p.at("scalar").get<std::string>() == "affine" ? ScalarKind::Affine : ScalarKind::Nlsq;
        c.prior.H = p.at("H").get<int>();
        c.prior.L_max = p.at("L_max").get<int>();
        c.prior.n_flow_layers = p.value("n_flow_layers", 0);
        c.prior.lstm_width = p.at("lstm_width").get<int>();
        c.prior.lstm_layers = p.at("lstm_layers").get<int>();
        c.prior.made_hidden = p.value("made_hidden", 0);
        c.prior.dropout = p.value("dropout", 0.3);
        c.emission = j.at("emission").get<std::string>() == "bernoulli" ? EmissionKind::Bernoulli
                                                                        : EmissionKind::Categorical;
        c.vocab = j.at("vocab").get<int>();
        c.embed = j.at("embed").get<int>();
        c.enc_width = j.at("enc_width").get<int>();
        c.enc_layers = j.at("enc_layers").get<int>();
        c.dec_width = j.at("dec_width").get<int>();
        c.dec_layers = j.at("dec_layers").get<int>();
        c.logsig_clamp = j.value("logsig_clamp", 7.0);
        c.init_seed = j.value("init_seed", uint64_t{1});
        return c;
    }
};

class GenerativeModel {
public:
    explicit GenerativeModel(const ModelConfig& cfg) : cfg_(cfg) {
        if (cfg.vocab < 1) throw UsageError("GenerativeModel: vocab size must be positive");
        Rng init(cfg.init_seed);
        const int feat_w = 2 * cfg.prior.L_max;

        // Shared token embedding: encoder input and (transposed) decoder
        // output projection. One tensor, one id.
        Tensor emb({cfg.vocab, cfg.embed});
        init.fill_uniform(emb, -0.5 / std::sqrt(static_cast<double>(cfg.embed)),
                          0.5 / std::sqrt(static_cast<double>(cfg.embed)));
        emb_id_ = params_.add("emb", std::move(emb));

        prior_ = SequencePrior(params_, "prior", cfg.prior, init);
        enc_ = BiLstm(params_, "enc", cfg.embed + feat_w, cfg.enc_width, cfg.enc_layers, init);
        dec_ = BiLstm(params_, "dec", cfg.prior.H + feat_w, cfg.dec_width, cfg.dec_layers, init);

        // Heads start at zero: q is exactly N(0, I) and the emission exactly
        // uniform at initialization.
        wmu_id_ = params_.add("enc.Wmu", Tensor::zeros({cfg.prior.H, 2 * cfg.enc_width}));
        bmu_id_ = params_.add("enc.bmu", Tensor::zeros({cfg.prior.H}));
        wsig_id_ = params_.add("enc.Wsig", Tensor::zeros({cfg.prior.H, 2 * cfg.enc_width}));
        bsig_id_ = params_.add("enc.bsig", Tensor::zeros({cfg.prior.H}));
        wdec_id_ = params_.add("dec.Wout", Tensor::zeros({cfg.embed, 2 * cfg.dec_width}));
        bdec_id_ = params_.add("dec.bout", Tensor::zeros({cfg.embed}));
        bvocab_id_ = params_.add("dec.bvocab", Tensor::zeros({cfg.vocab}));
    }

    const ModelConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }
    const SequencePrior& prior() const { return prior_; }
    LengthModel& length_model() { return length_model_; }
    const LengthModel& length_model() const { return length_model_; }

    void fit_length_model(const Corpus& corpus) { length_model_.fit(corpus); }

    // -- inference network ---------------------------------------------------

    struct Posterior {
        Value mu, logsig;  // [T x H]
    };

    Posterior infer(Tape& t, const Sequence& x) const {
        const int T = x.length();
        Value inputs = encoder_inputs(t, x);
        Value h = enc_.sweep(t, params_, inputs);
        Value mu = t.linear(h, t.param(params_, wmu_id_), t.param(params_, bmu_id_));
        Value logsig = t.clamp(t.linear(h, t.param(params_, wsig_id_), t.param(params_, bsig_id_)),
                               -cfg_.logsig_clamp, cfg_.logsig_clamp);
        (void)T;
        return {mu, logsig};
    }

    // -- emission ------------------------------------------------------------

    Value emission_logits(Tape& t, Value z, int T) const {
        Value inputs = t.concat_cols(z, t.constant(length_features(T, cfg_.prior.L_max)));
        Value h = dec_.sweep(t, params_, inputs);
        Value feat = t.linear(h, t.param(params_, wdec_id_), t.param(params_, bdec_id_));
        // tied projection: logits = feat * emb^T + b
        return t.linear(feat, t.param(params_, emb_id_), t.param(params_, bvocab_id_));
    }

    // [T x 1] rows of log p(x_t | z, T); the emission factorizes across steps.
    Value emission_logprob_rows(Tape& t, Value z, const Sequence& x) const {
        check_tokens(x);
        Value logits = emission_logits(t, z, x.length());
        if (cfg_.emission == EmissionKind::Categorical)
            return t.categorical_logprob(logits, x.tokens);
        return t.bernoulli_logprob(logits, x.notes);
    }

    Value emission_logprob_tape(Tape& t, Value z, const Sequence& x) const {
        return t.sum(emission_logprob_rows(t, z, x));
    }

    double emission_log_prob(const Sequence& x, const Tensor& z) const {
        if (z.rows() != x.length() || z.cols() != cfg_.prior.H)
            throw UsageError("emission_log_prob: z shape mismatch");
        Tape t;
        t.set_grad_enabled(false);
        return t.val(emission_logprob_tape(t, t.constant(z), x)).value();
    }

    // -- ELBO ------------------------------------------------------------------

    struct ElboParts {
        Value recon;  // scalar, (1/n) sum_i log p(x|z_i)
        Value kl;     // scalar, (1/n) sum_i [log q(z_i|x) - log p(z_i)]
        long long tokens = 0;
    };

    ElboParts elbo_parts(Tape& t, const Sequence& x, int n_samples, Rng& rng,
                         bool training = false) const {
        if (n_samples < 1) throw UsageError("elbo: n_samples must be >= 1");
        const int T = x.length();
        const int H = cfg_.prior.H;
        Posterior post = infer(t, x);
        Value sig = t.exp_(post.logsig);

        Value recon, kl;
        for (int i = 0; i < n_samples; ++i) {
            Tensor eps = gaussian_sample(rng, {T, H});
            double eps_sq = 0.0;
            for (long long k = 0; k < eps.numel(); ++k) eps_sq += eps[k] * eps[k];
            Value z = t.add(post.mu, t.mul(sig, t.constant(eps)));
            Value recon_i = emission_logprob_tape(t, z, x);
            // log q at the reparameterized point: -sum(logsig) - eps^2/2 - c
            Value logq_i = t.add_const(t.neg(t.sum(post.logsig)),
                                       -0.5 * eps_sq - 0.5 * kLog2Pi * static_cast<double>(T) * H);
            Value logp_i = prior_.density(t, params_, z, training, training ? &rng : nullptr).logp;
            Value kl_i = t.sub(logq_i, logp_i);
            recon = recon.valid() ? t.add(recon, recon_i) : recon_i;
            kl = kl.valid() ? t.add(kl, kl_i) : kl_i;
        }
        const double inv_n = 1.0 / static_cast<double>(n_samples);
        return {t.scale(recon, inv_n), t.scale(kl, inv_n), x.length()};
    }

    ElboReport elbo(const Sequence& x, int n_samples, double kl_weight, Rng& rng) const {
        Tape t;
        t.set_grad_enabled(false);
        ElboParts parts = elbo_parts(t, x, n_samples, rng);
        ElboReport rep;
        rep.reconstruction = t.val(parts.recon).value();
        rep.kl = t.val(parts.kl).value();
        rep.elbo = rep.reconstruction - rep.kl;
        rep.objective = rep.reconstruction - kl_weight * rep.kl;
        rep.tokens = parts.tokens;
        rep.sequences = 1;
        return rep;
    }

    // Batch = sum over members; member i uses the derived stream rng.fork(i),
    // so the result is independent of batch composition.
    ElboReport elbo(const SequenceBatch& batch, int n_samples, double kl_weight, Rng& rng) const {
        ElboReport total;
        for (int i = 0; i < batch.size(); ++i) {
            Rng member = rng.fork(static_cast<uint64_t>(i));
            total += elbo(batch.seqs[static_cast<size_t>(i)], n_samples, kl_weight, member);
        }
        return total;
    }

    // -- importance-sampled NLL -------------------------------------------------

    IsEstimate importance_nll(const Sequence& x, int K, Rng& rng) const {
        if (K < 1) throw UsageError("importance_nll: K must be >= 1");
        const int T = x.length();
        const int H = cfg_.prior.H;
        Tape t;
        t.set_grad_enabled(false);
        Posterior post = infer(t, x);
        Value sig = t.exp_(post.logsig);

        std::vector<double> logw;
        logw.reserve(static_cast<size_t>(K));
        for (int k = 0; k < K; ++k) {
            Tensor eps = gaussian_sample(rng, {T, H});
            double eps_sq = 0.0;
            for (long long i = 0; i < eps.numel(); ++i) eps_sq += eps[i] * eps[i];
            Value z = t.add(post.mu, t.mul(sig, t.constant(eps)));
            const double recon = t.val(emission_logprob_tape(t, z, x)).value();
            const double logq = -t.val(t.sum(post.logsig)).value() - 0.5 * eps_sq -
                                0.5 * kLog2Pi * static_cast<double>(T) * H;
            const double logp = t.val(prior_.density(t, params_, z).logp).value();
            logw.push_back(recon + logp - logq);
        }
        const LogMeanExp lme = log_mean_exp(logw);
        IsEstimate est;
        est.log_px_given_T = lme.log_mean;
        est.std_err_nats = lme.std_err;
        est.length_nats = length_model_.nll_nats(T);
        est.tokens = T;
        est.sequences = 1;
        return est;
    }

    IsEstimate importance_nll(const SequenceBatch& batch, int K, Rng& rng) const {
        IsEstimate total;
        for (int i = 0; i < batch.size(); ++i) {
            Rng member = rng.fork(static_cast<uint64_t>(i));
            total += importance_nll(batch.seqs[static_cast<size_t>(i)], K, member);
        }
        return total;
    }

    // -- generation ----------------------------------------------------------------

    Sequence generate(Rng& rng, int T = 0) const {
        if (T == 0) T = length_model_.sample(rng);
        if (T < 1 || T > cfg_.prior.L_max)
            throw LengthError("generate: T outside [1, L_max]");
        Tensor eps = gaussian_sample(rng, {T, cfg_.prior.H});
        Tensor z = prior_.sample_from_eps(params_, eps);

        Tape t;
        t.set_grad_enabled(false);
        const Tensor logits = t.val(emission_logits(t, t.constant(z), T));

        Sequence out;
        if (cfg_.emission == EmissionKind::Categorical) {
            for (int step = 0; step < T; ++step) {
                double mx = logits.at(step, 0);
                for (int j = 1; j < cfg_.vocab; ++j) mx = std::max(mx, logits.at(step, j));
                double se = 0.0;
                for (int j = 0; j < cfg_.vocab; ++j) se += std::exp(logits.at(step, j) - mx);
                double u = rng.uniform() * se;
                int pick = cfg_.vocab - 1;
                double acc = 0.0;
                for (int j = 0; j < cfg_.vocab; ++j) {
                    acc += std::exp(logits.at(step, j) - mx);
                    if (u < acc) {
                        pick = j;
                        break;
                    }
                }
                out.tokens.push_back(pick);
            }
        } else {
            out.notes = Tensor::zeros({T, cfg_.vocab});
            for (int step = 0; step < T; ++step)
                for (int j = 0; j < cfg_.vocab; ++j) {
                    const double p = 1.0 / (1.0 + std::exp(-logits.at(step, j)));
                    if (rng.uniform() < p) out.notes.at(step, j) = 1.0;
                }
        }
        return out;
    }

private:
    ModelConfig cfg_;
    ParamStore params_;
    SequencePrior prior_;
    BiLstm enc_, dec_;
    LengthModel length_model_;
    int emb_id_ = -1;
    int wmu_id_ = -1, bmu_id_ = -1, wsig_id_ = -1, bsig_id_ = -1;
    int wdec_id_ = -1, bdec_id_ = -1, bvocab_id_ = -1;

    void check_tokens(const Sequence& x) const {
        if (cfg_.emission == EmissionKind::Categorical) {
            if (x.polyphonic()) throw UsageError("categorical model fed a polyphonic sequence");
            for (int id : x.tokens)
                if (id < 0 || id >= cfg_.vocab)
                    throw DataError("token id " + std::to_string(id) + " outside vocabulary of " +
                                    std::to_string(cfg_.vocab));
        } else {
            if (!x.polyphonic()) throw UsageError("bernoulli model fed a categorical sequence");
            if (x.notes.cols() != cfg_.vocab) throw UsageError("note width mismatch");
        }
    }

    Value encoder_inputs(Tape& t, const Sequence& x) const {
        check_tokens(x);
        const int T = x.length();
        Value feats = t.constant(length_features(T, cfg_.prior.L_max));
        Value emb = t.param(params_, emb_id_);
        Value embedded = cfg_.emission == EmissionKind::Categorical
                             ? t.gather_rows(emb, x.tokens)
                             : t.matmul(t.constant(x.notes), emb);
        return t.concat_cols(embedded, feats);
    }
};

}  // namespace seqflow
