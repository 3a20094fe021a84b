#pragma once

#include <algorithm>
#include <chrono>
#include <functional>
#include <mutex>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "seqflow/model.hpp"

namespace seqflow {

// ---------------------------------------------------------------------------
// KL annealing
// ---------------------------------------------------------------------------

struct AnnealSchedule {
    int zero_epochs = 4;   // language-modeling default; polyphonic runs use 20
    int ramp_epochs = 10;  // polyphonic runs use 15
};

// 0 for the first zero_epochs, then linear up to 1 over ramp_epochs. Epochs
// count from 0; the schedule is logged so runs are auditable.
inline double kl_weight(int epoch, const AnnealSchedule& s) {
    if (epoch < 0) throw UsageError("kl_weight: negative epoch");
    if (epoch < s.zero_epochs) return 0.0;
    if (s.ramp_epochs <= 0) return 1.0;
    return std::min(1.0, static_cast<double>(epoch - s.zero_epochs) / s.ramp_epochs);
}

// ---------------------------------------------------------------------------
// Gradient clipping and Adam
// ---------------------------------------------------------------------------

inline double clip_gradients(GradMap& grads, const ParamStore& ps, double max_norm) {
    if (max_norm <= 0.0) throw UsageError("clip_gradients: max_norm must be positive");
    for (int p = 0; p < grads.count(); ++p)
        if (!grads.at(p).all_finite())
            throw NumericError("non-finite gradient for parameter " + ps.name(p));
    const double norm = grads.global_norm();
    if (norm > max_norm) grads.scale(max_norm / norm);
    return norm;
}

class Adam {
public:
    explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

    void step(ParamStore& ps, const GradMap& grads) {
        if (m_.empty()) {
            for (int p = 0; p < ps.count(); ++p) {
                m_.push_back(Tensor::zeros(ps.value(p).shape()));
                v_.push_back(Tensor::zeros(ps.value(p).shape()));
            }
        }
        ++t_;
        const double bc1 = 1.0 - std::pow(b1_, t_);
        const double bc2 = 1.0 - std::pow(b2_, t_);
        for (int p = 0; p < ps.count(); ++p) {
            Tensor& theta = ps.value(p);
            const Tensor& g = grads.at(p);
            Tensor& m = m_[static_cast<size_t>(p)];
            Tensor& v = v_[static_cast<size_t>(p)];
            for (long long i = 0; i < theta.numel(); ++i) {
                m[i] = b1_ * m[i] + (1.0 - b1_) * g[i];
                v[i] = b2_ * v[i] + (1.0 - b2_) * g[i] * g[i];
                theta[i] -= lr_ * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps_);
            }
        }
    }

    double learning_rate() const { return lr_; }

private:
    double lr_, b1_, b2_, eps_;
    int t_ = 0;
    std::vector<Tensor> m_, v_;
};

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainConfig {
    double learning_rate = 1e-3;
    double clip_norm = 0.25;
    int batch_size = 16;
    int n_elbo_samples = 10;
    double dropout = 0.3;
    int epochs = 10;
    uint64_t seed = 1;
    AnnealSchedule anneal;
    int patience = 5;  // early stopping on validation ELBO
    int threads = 1;

    void validate() const {
        if (learning_rate <= 0 || clip_norm <= 0 || batch_size < 1 || n_elbo_samples < 1 ||
            epochs < 0 || dropout < 0.0 || dropout >= 1.0)
            throw UsageError("TrainConfig: invalid field value");
    }
};

struct EpochRecord {
    int epoch = 0;
    std::string split;
    double recon_bpc = 0.0, kl_bpc = 0.0, elbo_bpc = 0.0;
    double kl_weight = 0.0;
    double wall_time_s = 0.0;

    nlohmann::json to_json() const {
        return {{"epoch", epoch},         {"split", split},       {"recon_bpc", recon_bpc},
                {"kl_bpc", kl_bpc},       {"elbo_bpc", elbo_bpc}, {"kl_weight", kl_weight},
                {"wall_time_s", wall_time_s}};
    }
};

struct TrainLog {
    std::vector<EpochRecord> records;
    int best_epoch = -1;
    double best_valid_elbo = -std::numeric_limits<double>::infinity();  // nats, higher better
    bool stopped_early = false;

    std::string to_jsonl() const {
        std::string out;
        for (const auto& r : records) out += r.to_json().dump() + "\n";
        return out;
    }
};

// Raised when the objective leaves the finite domain; carries a reference to
// the last checkpoint that was still healthy (when the caller saves any).
class DivergenceError : public NumericError {
public:
    DivergenceError(const std::string& msg, std::string last_good)
        : NumericError(msg), last_good_checkpoint(std::move(last_good)) {}
    std::string last_good_checkpoint;
};

// What the trainer needs from a model: log-likelihood terms for one sequence
// on a tape. kl is invalid for plain likelihood models (the baseline LM).
struct LossParts {
    Value recon;
    Value kl;
    long long tokens = 0;
};

inline LossParts model_loss_parts(GenerativeModel& m, Tape& t, const Sequence& x, int n_samples,
                                  Rng& rng, bool training) {
    auto p = m.elbo_parts(t, x, n_samples, rng, training);
    return {p.recon, p.kl, p.tokens};
}

namespace detail {

// Length-bucketed batches: sort by length so padding stays negligible, then
// cut into contiguous batches whose order is shuffled per epoch.
inline std::vector<std::vector<int>> bucketed_batches(const Corpus& corpus, int batch_size) {
    std::vector<int> idx(corpus.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
        return corpus[static_cast<size_t>(a)].length() < corpus[static_cast<size_t>(b)].length();
    });
    std::vector<std::vector<int>> batches;
    for (size_t i = 0; i < idx.size(); i += static_cast<size_t>(batch_size)) {
        std::vector<int> b(idx.begin() + static_cast<long>(i),
                           idx.begin() + static_cast<long>(std::min(idx.size(), i + static_cast<size_t>(batch_size))));
        batches.push_back(std::move(b));
    }
    return batches;
}

}  // namespace detail

// Trains any model exposing params() + a model_loss_parts overload. The
// objective is -(recon - w*kl) averaged per token over each batch. Per-batch
// member gradients are computed on independent tapes (optionally across
// threads) and summed in index order, so results do not depend on the thread
// count.
template <typename Model>
TrainLog train(Model& model, const Corpus& train_data, const Corpus& valid_data,
               const TrainConfig& cfg,
               const std::function<void(const std::string& tag)>& save_checkpoint = {}) {
    cfg.validate();
    if (train_data.empty()) throw DataError("train: empty training corpus");
    ParamStore& ps = model.params();
    Adam opt(cfg.learning_rate);
    TrainLog log;

    const auto batches = detail::bucketed_batches(train_data, cfg.batch_size);
    int epochs_since_best = 0;

    // Held-out evaluation with a fixed stream so epoch numbers are comparable.
    auto evaluate = [&](const Corpus& data, uint64_t stream) {
        ElboReport total;
        Rng eval_rng = Rng(cfg.seed).fork(stream);
        for (size_t i = 0; i < data.size(); ++i) {
            Rng member = eval_rng.fork(static_cast<uint64_t>(i));
            Tape t;
            t.set_grad_enabled(false);
            LossParts parts = model_loss_parts(model, t, data[i], cfg.n_elbo_samples, member, false);
            ElboReport rep;
            rep.reconstruction = t.val(parts.recon).value();
            rep.kl = parts.kl.valid() ? t.val(parts.kl).value() : 0.0;
            rep.elbo = rep.reconstruction - rep.kl;
            rep.tokens = parts.tokens;
            rep.sequences = 1;
            total += rep;
        }
        return total;
    };

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto tic = std::chrono::steady_clock::now();
        const double w = kl_weight(epoch, cfg.anneal);

        std::vector<int> batch_order(batches.size());
        std::iota(batch_order.begin(), batch_order.end(), 0);
        Rng shuffle_rng = Rng(cfg.seed).fork(0x5u).fork(static_cast<uint64_t>(epoch));
        shuffle_rng.shuffle(batch_order);

        double ep_recon = 0.0, ep_kl = 0.0;
        long long ep_tokens = 0;

        for (int bi : batch_order) {
            const std::vector<int>& batch = batches[static_cast<size_t>(bi)];
            const int B = static_cast<int>(batch.size());
            std::vector<GradMap> member_grads(static_cast<size_t>(B));
            std::vector<double> member_recon(static_cast<size_t>(B)), member_kl(static_cast<size_t>(B), 0.0);
            std::vector<long long> member_tokens(static_cast<size_t>(B));
            std::exception_ptr worker_error;
            std::mutex err_mu;

            auto run_member = [&](int k) {
                const int seq_idx = batch[static_cast<size_t>(k)];
                Rng seq_rng = Rng(cfg.seed)
                                  .fork(0xAu)
                                  .fork(static_cast<uint64_t>(epoch))
                                  .fork(static_cast<uint64_t>(seq_idx));
                Tape t;
                LossParts parts = model_loss_parts(model, t, train_data[static_cast<size_t>(seq_idx)],
                                                   cfg.n_elbo_samples, seq_rng, true);
                Value gain = parts.kl.valid() ? t.sub(parts.recon, t.scale(parts.kl, w)) : parts.recon;
                member_grads[static_cast<size_t>(k)] = t.backward(gain, ps);
                member_recon[static_cast<size_t>(k)] = t.val(parts.recon).value();
                if (parts.kl.valid()) member_kl[static_cast<size_t>(k)] = t.val(parts.kl).value();
                member_tokens[static_cast<size_t>(k)] = parts.tokens;
            };

            try {
                const int n_threads = std::max(1, std::min(cfg.threads, B));
                if (n_threads == 1) {
                    for (int k = 0; k < B; ++k) run_member(k);
                } else {
                    std::vector<std::thread> pool;
                    for (int tix = 0; tix < n_threads; ++tix) {
                        pool.emplace_back([&, tix]() {
                            try {
                                for (int k = tix; k < B; k += n_threads) run_member(k);
                            } catch (...) {
                                std::lock_guard<std::mutex> lock(err_mu);
                                if (!worker_error) worker_error = std::current_exception();
                            }
                        });
                    }
                    for (auto& th : pool) th.join();
                }
                if (worker_error) std::rethrow_exception(worker_error);
                long long batch_tokens = 0;
                for (int k = 0; k < B; ++k) batch_tokens += member_tokens[static_cast<size_t>(k)];
                GradMap total(ps);
                for (int k = 0; k < B; ++k) total.add_scaled(member_grads[static_cast<size_t>(k)], 1.0);
                // objective = -(sum gains)/tokens
                total.scale(-1.0 / static_cast<double>(batch_tokens));
                clip_gradients(total, ps, cfg.clip_norm);
                opt.step(ps, total);
                for (int k = 0; k < B; ++k) {
                    ep_recon += member_recon[static_cast<size_t>(k)];
                    ep_kl += member_kl[static_cast<size_t>(k)];
                }
                ep_tokens += batch_tokens;
            } catch (const NumericError& e) {
                std::string last_good;
                if (save_checkpoint) {
                    save_checkpoint("last_good");
                    last_good = "last_good";
                }
                throw DivergenceError(std::string("training diverged: ") + e.what(), last_good);
            }
        }

        const double wall =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - tic).count();

        EpochRecord tr;
        tr.epoch = epoch;
        tr.split = "train";
        tr.recon_bpc = -ep_recon / (static_cast<double>(ep_tokens) * M_LN2);
        tr.kl_bpc = ep_kl / (static_cast<double>(ep_tokens) * M_LN2);
        tr.elbo_bpc = tr.recon_bpc + tr.kl_bpc;
        tr.kl_weight = w;
        tr.wall_time_s = wall;
        log.records.push_back(tr);

        if (!valid_data.empty()) {
            ElboReport v = evaluate(valid_data, 0xEu);
            EpochRecord vr;
            vr.epoch = epoch;
            vr.split = "valid";
            vr.recon_bpc = v.recon_bpc();
            vr.kl_bpc = v.kl_bpc();
            vr.elbo_bpc = v.elbo_bpc();
            vr.kl_weight = w;
            vr.wall_time_s = 0.0;
            log.records.push_back(vr);

            if (v.elbo > log.best_valid_elbo) {
                log.best_valid_elbo = v.elbo;
                log.best_epoch = epoch;
                epochs_since_best = 0;
                if (save_checkpoint) save_checkpoint("best");
            } else if (w >= 1.0) {
                // only count stagnation once the objective is the full ELBO
                ++epochs_since_best;
                if (epochs_since_best > cfg.patience) {
                    log.stopped_early = true;
                    break;
                }
            }
        }
    }
    return log;
}

// ---------------------------------------------------------------------------
// Autoregressive LSTM baseline: the standard discrete language model with the
// same length conditioning and sizes as the latent-flow models.
// ---------------------------------------------------------------------------

struct BaselineConfig {
    EmissionKind emission = EmissionKind::Categorical;
    int vocab = 0;
    int embed = 500;
    int width = 500;
    int layers = 2;
    int L_max = 288;
    double dropout = 0.3;
    uint64_t init_seed = 1;

    nlohmann::json to_json() const {
        return {{"emission", emission == EmissionKind::Categorical ? "categorical" : "bernoulli"},
                {"vocab", vocab},   {"embed", embed},   {"width", width},
                {"layers", layers}, {"L_max", L_max},   {"dropout", dropout},
                {"init_seed", init_seed}};
    }

    static BaselineConfig from_json(const nlohmann::json& j) {
        BaselineConfig c;
        c.emission = j.at("emission").get<std::string>() == "bernoulli" ? EmissionKind::Bernoulli
                                                                        : EmissionKind::Categorical;
        c.vocab = j.at("vocab").get<int>();
        c.embed = j.at("embed").get<int>();
        c.width = j.at("width").get<int>();
        c.layers = j.at("layers").get<int>();
        c.L_max = j.at("L_max").get<int>();
        c.dropout = j.value("dropout", 0.3);
        c.init_seed = j.value("init_seed", uint64_t{1});
        return c;
    }
};

class BaselineLstmLm {
public:
    explicit BaselineLstmLm(const BaselineConfig& cfg) : cfg_(cfg) {
        if (cfg.vocab < 1) throw UsageError("BaselineLstmLm: vocab size must be positive");
        Rng init(cfg.init_seed);
        Tensor emb({cfg.vocab, cfg.embed});
        init.fill_uniform(emb, -0.5 / std::sqrt(static_cast<double>(cfg.embed)),
                          0.5 / std::sqrt(static_cast<double>(cfg.embed)));
        emb_id_ = params_.add("emb", std::move(emb));
        Tensor start({1, cfg.embed});
        init.fill_uniform(start, -0.1, 0.1);
        start_id_ = params_.add("start", std::move(start));
        lstm_ = LstmStack(params_, "lstm", cfg.embed + 2 * cfg.L_max, cfg.width, cfg.layers, init);
        wout_id_ = params_.add("Wout", Tensor::zeros({cfg.embed, cfg.width}));
        bout_id_ = params_.add("bout", Tensor::zeros({cfg.embed}));
        bvocab_id_ = params_.add("bvocab", Tensor::zeros({cfg.vocab}));
    }

    const BaselineConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }
    LengthModel& length_model() { return length_model_; }
    const LengthModel& length_model() const { return length_model_; }

    // sum_t log p(x_t | x_{<t}, T)
    Value sequence_logprob(Tape& t, const Sequence& x, bool training = false,
                           Rng* dropout_rng = nullptr) const {
        const int T = x.length();
        if (T < 1 || T > cfg_.L_max) throw LengthError("baseline: T outside [1, L_max]");
        Value logits = step_logits(t, x, training, dropout_rng);
        if (cfg_.emission == EmissionKind::Categorical)
            return t.sum(t.categorical_logprob(logits, x.tokens));
        return t.sum(t.bernoulli_logprob(logits, x.notes));
    }

    double nll_nats(const Sequence& x) const {
        Tape t;
        t.set_grad_enabled(false);
        return -t.val(sequence_logprob(t, x)).value();
    }

    Sequence generate(Rng& rng, int T) const {
        if (T == 0) T = length_model_.sample(rng);
        if (T < 1 || T > cfg_.L_max) throw LengthError("baseline generate: T outside [1, L_max]");
        const Tensor feats = length_features(T, cfg_.L_max);
        Tape t;
        t.set_grad_enabled(false);
        Value emb = t.param(params_, emb_id_);
        LstmStack::State state = lstm_.initial_state(t);
        Value prev = t.param(params_, start_id_);

        Sequence out;
        if (cfg_.emission == EmissionKind::Bernoulli) out.notes = Tensor::zeros({T, cfg_.vocab});
        for (int step = 0; step < T; ++step) {
            Tensor frow({1, 2 * cfg_.L_max});
            for (int j = 0; j < 2 * cfg_.L_max; ++j) frow.at(0, j) = feats.at(step, j);
            auto [h, ns] = lstm_.step(t, params_, t.concat_cols(prev, t.constant(frow)), state);
            state = ns;
            Value feat = t.linear(h, t.param(params_, wout_id_), t.param(params_, bout_id_));
            const Tensor logits = t.val(t.linear(feat, emb, t.param(params_, bvocab_id_)));

            if (cfg_.emission == EmissionKind::Categorical) {
                double mx = logits.at(0, 0);
                for (int j = 1; j < cfg_.vocab; ++j) mx = std::max(mx, logits.at(0, j));
                double se = 0.0;
                for (int j = 0; j < cfg_.vocab; ++j) se += std::exp(logits.at(0, j) - mx);
                double u = rng.uniform() * se;
                int pick = cfg_.vocab - 1;
                double acc = 0.0;
                for (int j = 0; j < cfg_.vocab; ++j) {
                    acc += std::exp(logits.at(0, j) - mx);
                    if (u < acc) {
                        pick = j;
                        break;
                    }
                }
                out.tokens.push_back(pick);
                prev = t.gather_rows(emb, {pick});
            } else {
                Tensor row({1, cfg_.vocab});
                for (int j = 0; j < cfg_.vocab; ++j) {
                    const double p = 1.0 / (1.0 + std::exp(-logits.at(0, j)));
                    if (rng.uniform() < p) {
                        out.notes.at(step, j) = 1.0;
                        row.at(0, j) = 1.0;
                    }
                }
                prev = t.matmul(t.constant(row), emb);
            }
        }
        return out;
    }

private:
    BaselineConfig cfg_;
    ParamStore params_;
    LstmStack lstm_;
    LengthModel length_model_;
    int emb_id_ = -1, start_id_ = -1, wout_id_ = -1, bout_id_ = -1, bvocab_id_ = -1;

    // [T x V] next-token logits; input at step t is the embedded previous
    // token (learned start row at t = 0) plus the length features.
    Value step_logits(Tape& t, const Sequence& x, bool training, Rng* dropout_rng) const {
        const int T = x.length();
        Value emb = t.param(params_, emb_id_);
        Value prev;
        if (cfg_.emission == EmissionKind::Categorical) {
            std::vector<int> prev_ids(x.tokens.begin(), x.tokens.end() - 1);
            prev = T > 1 ? t.concat_rows({t.param(params_, start_id_), t.gather_rows(emb, prev_ids)})
                         : t.param(params_, start_id_);
        } else {
            if (T > 1) {
                Tensor prev_notes({T - 1, cfg_.vocab});
                for (int i = 0; i + 1 < T; ++i)
                    for (int j = 0; j < cfg_.vocab; ++j) prev_notes.at(i, j) = x.notes.at(i, j);
                prev = t.concat_rows(
                    {t.param(params_, start_id_), t.matmul(t.constant(prev_notes), emb)});
            } else {
                prev = t.param(params_, start_id_);
            }
        }
        Value inputs = t.concat_cols(prev, t.constant(length_features(T, cfg_.L_max)));
        Value h = lstm_.sweep(t, params_, inputs, training, dropout_rng, cfg_.dropout);
        Value feat = t.linear(h, t.param(params_, wout_id_), t.param(params_, bout_id_));
        return t.linear(feat, emb, t.param(params_, bvocab_id_));
    }
};

inline LossParts model_loss_parts(BaselineLstmLm& m, Tape& t, const Sequence& x, int /*n_samples*/,
                                  Rng& rng, bool training) {
    Value lp = m.sequence_logprob(t, x, training, training ? &rng : nullptr);
    return {lp, Value{}, x.length()};
}

}  // namespace seqflow
