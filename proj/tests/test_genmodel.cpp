#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>

#include "seqflow/gradcheck.hpp"
#include "seqflow/model.hpp"
#include "seqflow/oracles.hpp"
#include "seqflow/serialize.hpp"

using namespace seqflow;

namespace {

ModelConfig tiny_model(PriorKind kind = PriorKind::AfAf, int V = 4, int H = 2, int L_max = 12) {
    ModelConfig cfg;
    cfg.prior.kind = kind;
    cfg.prior.H = H;
    cfg.prior.L_max = L_max;
    cfg.prior.n_flow_layers = 2;
    cfg.prior.lstm_width = 5;
    cfg.prior.lstm_layers = 1;
    cfg.vocab = V;
    cfg.embed = 4;
    cfg.enc_width = 5;
    cfg.enc_layers = 1;
    cfg.dec_width = 5;
    cfg.dec_layers = 1;
    return cfg;
}

void randomize(ParamStore& ps, Rng& rng, double scale) {
    for (int p = 0; p < ps.count(); ++p) {
        Tensor& v = ps.value(p);
        for (long long i = 0; i < v.numel(); ++i) v[i] = scale * rng.normal();
    }
}

Sequence seq_of(std::vector<int> toks) {
    Sequence s;
    s.tokens = std::move(toks);
    return s;
}

}  // namespace

TEST_CASE("infer: shapes, determinism, vocabulary guard") {
    GenerativeModel m(tiny_model());
    Sequence x = seq_of({0, 1, 2, 3, 1});
    Tape t;
    t.set_grad_enabled(false);
    auto post = m.infer(t, x);
    REQUIRE(t.val(post.mu).shape() == std::vector<int>{5, 2});
    REQUIRE(t.val(post.logsig).shape() == std::vector<int>{5, 2});

    // two identical sequences give identical posterior params
    Tape t2;
    t2.set_grad_enabled(false);
    auto post2 = m.infer(t2, x);
    REQUIRE(max_abs_diff(t.val(post.mu), t2.val(post2.mu)) == 0.0);

    Tape t3;
    REQUIRE_THROWS_AS(m.infer(t3, seq_of({0, 9})), DataError);
}

TEST_CASE("emission: uniform logits at init, bernoulli counterpart, factorization") {
    GenerativeModel m(tiny_model(PriorKind::AfAf, 2));
    Sequence x = seq_of({0, 1, 1, 0});
    Tensor z = Tensor::zeros({4, 2});
    // zero-initialized heads make the emission exactly uniform
    REQUIRE(m.emission_log_prob(x, z) == Catch::Approx(4.0 * std::log(0.5)).epsilon(1e-14));

    ModelConfig pc = tiny_model(PriorKind::AfScf, 88);
    pc.emission = EmissionKind::Bernoulli;
    GenerativeModel poly(pc);
    Sequence notes;
    notes.notes = Tensor::zeros({3, 88});
    REQUIRE(poly.emission_log_prob(notes, Tensor::zeros({3, 2})) ==
            Catch::Approx(3.0 * 88.0 * std::log(0.5)).epsilon(1e-12));

    // factorization: total equals the sum of per-step rows, exactly
    Rng rng(3);
    GenerativeModel r(tiny_model());
    randomize(r.params(), rng, 0.3);
    Tensor z2 = gaussian_sample(rng, {4, 2});
    Tape t;
    t.set_grad_enabled(false);
    Value rows = r.emission_logprob_rows(t, t.constant(z2), x);
    double s = 0.0;
    for (int i = 0; i < 4; ++i) s += t.val(rows).at(i, 0);
    REQUIRE(r.emission_log_prob(x, z2) == s);

    // conditional independence: changing x_s moves only row s
    Sequence x2 = x;
    x2.tokens[2] = 0;
    Tape t4;
    t4.set_grad_enabled(false);
    Value rows2 = r.emission_logprob_rows(t4, t4.constant(z2), x2);
    for (int i = 0; i < 4; ++i) {
        if (i == 2) continue;
        REQUIRE(t4.val(rows2).at(i, 0) == t.val(rows).at(i, 0));
    }
}

TEST_CASE("elbo: KL vanishes at init, kl_weight floor, n_samples guard") {
    GenerativeModel m(tiny_model());
    Sequence x = seq_of({0, 1, 2});
    Rng rng(5);
    ElboReport rep = m.elbo(x, 10, 1.0, rng);
    // prior is the identity flow and q = N(0, I): the KL estimate is zero to
    // floating precision regardless of the draws
    REQUIRE(std::abs(rep.kl) < 1e-9);
    REQUIRE(rep.elbo == Catch::Approx(rep.reconstruction - rep.kl));
    REQUIRE(rep.tokens == 3);

    Rng rng2(5);
    ElboReport rep0 = m.elbo(x, 10, 0.0, rng2);
    REQUIRE(rep0.objective == rep0.reconstruction);

    Rng rng3(6);
    REQUIRE_THROWS_AS(m.elbo(x, 0, 1.0, rng3), UsageError);
}

TEST_CASE("elbo bpc accounting") {
    GenerativeModel m(tiny_model(PriorKind::AfAf, 4));
    Sequence x = seq_of({0, 1, 2, 3});
    Rng rng(7);
    ElboReport rep = m.elbo(x, 4, 1.0, rng);
    // at init recon = T log(1/4) exactly: 2 bits per token
    REQUIRE(rep.recon_bpc() == Catch::Approx(2.0).epsilon(1e-10));
    REQUIRE(rep.elbo_bpc() == Catch::Approx(rep.recon_bpc() + rep.kl_bpc()).margin(1e-9));
}

TEST_CASE("reparameterized ELBO grad-checks against finite differences") {
    Rng rng(9);
    GenerativeModel m(tiny_model(PriorKind::AfAf, 3, 2, 8));
    randomize(m.params(), rng, 0.25);
    Sequence x = seq_of({0, 2, 1});

    // the MC estimate must be frozen across evaluations: fixed-seed draws
    auto fn = [&](Tape& t, ParamStore&) {
        Rng draw(1234);
        auto parts = m.elbo_parts(t, x, 2, draw);
        return t.sub(parts.recon, parts.kl);
    };
    CheckReport rep = grad_check(fn, m.params(), 1e-3);
    INFO("worst " << rep.location << " rel " << rep.max_rel_err << " over " << rep.n_checked);
    REQUIRE(rep.pass);
}

TEST_CASE("importance_nll: K=1 equals the single-sample ELBO estimate") {
    Rng rng(11);
    GenerativeModel m(tiny_model());
    randomize(m.params(), rng, 0.3);
    m.length_model().add(3, 1);
    Sequence x = seq_of({0, 1, 2});

    Rng ra(21), rb(21);
    ElboReport e = m.elbo(x, 1, 1.0, ra);
    IsEstimate is = m.importance_nll(x, 1, rb);
    REQUIRE(is.log_px_given_T == Catch::Approx(e.elbo).margin(1e-10));
    REQUIRE(is.length_nats == Catch::Approx(0.0).margin(1e-12));  // p(3) = 1
}

TEST_CASE("importance weights with the exact posterior recover the marginal") {
    // toy: z ~ N(0,1), x = w z + b + eta, eta ~ N(0, s2). Exact posterior is
    // Gaussian; with q = posterior every weight equals p(x) identically.
    const double w = 0.8, b = -0.3, s2 = 0.5, x = 1.1;
    Tensor W({1, 1});
    W.at(0, 0) = w;
    Tensor noise({1, 1});
    noise.at(0, 0) = s2;
    const double exact = oracles::linear_gaussian_logml(W, Tensor::vec({b}), noise, Tensor::vec({x}));

    const double post_var = 1.0 / (1.0 + w * w / s2);
    const double post_mu = post_var * w * (x - b) / s2;

    Rng rng(13);
    for (int K : {1, 7, 50}) {
        std::vector<double> logw;
        for (int k = 0; k < K; ++k) {
            const double z = post_mu + std::sqrt(post_var) * rng.normal();
            const double logp_z = -0.5 * z * z - 0.5 * std::log(2.0 * M_PI);
            const double lik_mu = w * z + b;
            const double logp_x = -0.5 * (x - lik_mu) * (x - lik_mu) / s2 - 0.5 * std::log(2.0 * M_PI * s2);
            const double logq = -0.5 * (z - post_mu) * (z - post_mu) / post_var -
                                0.5 * std::log(2.0 * M_PI * post_var);
            logw.push_back(logp_x + logp_z - logq);
        }
        const LogMeanExp lme = log_mean_exp(logw);
        REQUIRE(lme.log_mean == Catch::Approx(exact).margin(1e-9));
    }
}

TEST_CASE("elbo lower-bounds the importance estimate on random tiny models") {
    Rng meta(15);
    double elbo_mean = 0.0, is_mean = 0.0, se_acc = 0.0;
    const int n_models = 20;
    for (int trial = 0; trial < n_models; ++trial) {
        GenerativeModel m(tiny_model(trial % 2 == 0 ? PriorKind::AfAf : PriorKind::AfScf));
        Rng rng = meta.fork(static_cast<uint64_t>(trial));
        randomize(m.params(), rng, 0.3);
        Sequence x = seq_of({static_cast<int>(rng.uniform_int(4)), static_cast<int>(rng.uniform_int(4))});
        Rng re(100 + trial), ri(200 + trial);
        ElboReport e = m.elbo(x, 16, 1.0, re);
        IsEstimate is = m.importance_nll(x, 16, ri);
        elbo_mean += e.elbo / n_models;
        is_mean += is.log_px_given_T / n_models;
        se_acc += is.std_err_nats * is.std_err_nats / (n_models * n_models);
    }
    REQUIRE(elbo_mean <= is_mean + 3.0 * std::sqrt(se_acc) + 1e-6);
}

TEST_CASE("generate: determinism, forced length, length statistics") {
    Rng rng(17);
    GenerativeModel m(tiny_model());
    randomize(m.params(), rng, 0.3);
    m.length_model().add(2, 2);
    m.length_model().add(3, 1);

    Rng g1(31), g2(31);
    Sequence a = m.generate(g1);
    Sequence b = m.generate(g2);
    REQUIRE(a.tokens == b.tokens);

    Rng g3(32);
    Sequence c = m.generate(g3, 1);
    REQUIRE(c.tokens.size() == 1);

    // lengths follow the stored histogram: p(2) = 2/3, p(3) = 1/3
    Rng g4(33);
    int n2 = 0, n3 = 0;
    const int n = 10000;
    for (int i = 0; i < n; ++i) {
        const int T = m.length_model().sample(g4);
        if (T == 2) ++n2;
        if (T == 3) ++n3;
    }
    REQUIRE(n2 + n3 == n);
    const double p2 = 2.0 / 3.0;
    const double sd = std::sqrt(p2 * (1 - p2) * n);
    REQUIRE(std::abs(n2 - p2 * n) < 4.0 * sd);

    GenerativeModel empty(tiny_model());
    Rng g5(34);
    REQUIRE_THROWS_AS(empty.generate(g5), StateError);
}

TEST_CASE("length model: counts, normalization, nll plumbing") {
    LengthModel lm;
    lm.fit({seq_of({0, 1}), seq_of({1, 0}), seq_of({0, 1, 2})});
    REQUIRE(lm.prob(2) == Catch::Approx(2.0 / 3.0));
    REQUIRE(lm.prob(3) == Catch::Approx(1.0 / 3.0));
    REQUIRE(lm.prob(2) + lm.prob(3) == Catch::Approx(1.0));
    REQUIRE(lm.prob(7) == 0.0);
    REQUIRE(std::isinf(lm.nll_nats(7)));

    REQUIRE_THROWS_AS(lm.fit({}), DataError);

    // -log p(T) shows up in the importance estimate
    GenerativeModel m(tiny_model());
    m.length_model().add(2, 2);
    m.length_model().add(3, 1);
    Rng rng(19);
    IsEstimate is = m.importance_nll(seq_of({0, 1}), 2, rng);
    REQUIRE(is.length_nats == Catch::Approx(-std::log(2.0 / 3.0)).epsilon(1e-12));
    REQUIRE(is.nll_nats_with_len() == Catch::Approx(is.nll_nats() + is.length_nats));
}

TEST_CASE("weight tying: encoder embedding and decoder projection share storage") {
    GenerativeModel m(tiny_model());
    REQUIRE(m.params().find("emb") >= 0);
    Sequence x = seq_of({0, 1});
    Rng rng(21);
    randomize(m.params(), rng, 0.3);
    Tensor z = gaussian_sample(rng, {2, 2});
    const double before = m.emission_log_prob(x, z);
    m.params().value("emb")[0] += 0.37;  // mutate the shared tensor once
    const double after = m.emission_log_prob(x, z);
    REQUIRE(before != after);
}

TEST_CASE("batch elbo and nll equal the sum over members") {
    Rng rng(23);
    GenerativeModel m(tiny_model());
    randomize(m.params(), rng, 0.3);
    m.length_model().add(2, 1);
    m.length_model().add(4, 1);
    SequenceBatch batch = SequenceBatch::from({seq_of({0, 1}), seq_of({2, 3, 1, 0}), seq_of({1, 1})});

    Rng rb(41);
    ElboReport whole = m.elbo(batch, 3, 1.0, rb);
    ElboReport parts;
    for (int i = 0; i < batch.size(); ++i) {
        Rng member = Rng(41).fork(static_cast<uint64_t>(i));
        parts += m.elbo(batch.seqs[static_cast<size_t>(i)], 3, 1.0, member);
    }
    REQUIRE(whole.elbo == Catch::Approx(parts.elbo).margin(1e-8));
    REQUIRE(whole.tokens == parts.tokens);

    Rng rn(42);
    IsEstimate nll_whole = m.importance_nll(batch, 3, rn);
    REQUIRE(nll_whole.sequences == 3);
    REQUIRE(nll_whole.tokens == 8);
}

TEST_CASE("checkpoint round trip") {
    namespace fs = std::filesystem;
    const std::string dir = (fs::temp_directory_path() / "seqflow_ckpt_test").string();
    fs::remove_all(dir);

    Rng rng(25);
    ModelConfig cfg = tiny_model(PriorKind::IafScf, 5);
    GenerativeModel m(cfg);
    randomize(m.params(), rng, 0.3);
    m.length_model().add(3, 4);
    m.length_model().add(5, 1);

    nlohmann::json manifest;
    manifest["model"] = "generative";
    manifest["config"] = m.config().to_json();
    manifest["length_model"] = m.length_model().to_json();
    save_archive(dir, manifest, m.params());

    nlohmann::json loaded = load_manifest(dir);
    GenerativeModel m2(ModelConfig::from_json(loaded.at("config")));
    load_params(dir, loaded, m2.params());
    m2.length_model() = LengthModel::from_json(loaded.at("length_model"));

    for (int p = 0; p < m.params().count(); ++p)
        REQUIRE(max_abs_diff(m.params().value(p), m2.params().value(p)) == 0.0);
    REQUIRE(m2.length_model().prob(3) == Catch::Approx(0.8));

    Sequence x = seq_of({0, 4, 2});
    Rng e1(51), e2(51);
    REQUIRE(m.elbo(x, 2, 1.0, e1).elbo == m2.elbo(x, 2, 1.0, e2).elbo);

    fs::remove_all(dir);
}
