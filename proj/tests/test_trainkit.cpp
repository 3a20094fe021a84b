#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "seqflow/train.hpp"

using namespace seqflow;

namespace {

Sequence seq_of(std::vector<int> toks) {
    Sequence s;
    s.tokens = std::move(toks);
    return s;
}

ModelConfig smoke_model(PriorKind kind, int V, int H = 2, int L_max = 8) {
    ModelConfig cfg;
    cfg.prior.kind = kind;
    cfg.prior.H = H;
    cfg.prior.L_max = L_max;
    cfg.prior.n_flow_layers = 2;
    cfg.prior.lstm_width = 6;
    cfg.prior.lstm_layers = 1;
    cfg.vocab = V;
    cfg.embed = 4;
    cfg.enc_width = 6;
    cfg.enc_layers = 1;
    cfg.dec_width = 6;
    cfg.dec_layers = 1;
    return cfg;
}

}  // namespace

TEST_CASE("kl_weight schedule") {
    AnnealSchedule s{4, 10};
    REQUIRE(kl_weight(0, s) == 0.0);
    REQUIRE(kl_weight(3, s) == 0.0);
    REQUIRE(kl_weight(9, s) == Catch::Approx(0.5));
    REQUIRE(kl_weight(100, s) == 1.0);
    REQUIRE(kl_weight(14, s) == 1.0);

    // monotone non-decreasing, piecewise linear with the configured breaks
    double prev = -1.0;
    for (int e = 0; e < 30; ++e) {
        const double w = kl_weight(e, s);
        REQUIRE(w >= prev);
        prev = w;
    }
    REQUIRE(kl_weight(5, s) - kl_weight(4, s) == Catch::Approx(0.1));

    AnnealSchedule poly{20, 15};
    REQUIRE(kl_weight(19, poly) == 0.0);
    REQUIRE(kl_weight(20 + 15, poly) == 1.0);

    REQUIRE_THROWS_AS(kl_weight(-1, s), UsageError);
}

TEST_CASE("clip_gradients: passthrough, scaling, degenerate zero") {
    ParamStore ps;
    ps.add("w", Tensor::vec({3.0, 4.0}));

    GradMap small(ps);
    small.at(0)[0] = 0.06;
    small.at(0)[1] = 0.08;  // norm 0.1
    GradMap small_copy = small;
    clip_gradients(small, ps, 0.25);
    REQUIRE(small.at(0)[0] == small_copy.at(0)[0]);
    REQUIRE(small.at(0)[1] == small_copy.at(0)[1]);

    GradMap big(ps);
    big.at(0)[0] = 3.0;
    big.at(0)[1] = 4.0;  // norm 5
    const double pre = clip_gradients(big, ps, 0.25);
    REQUIRE(pre == Catch::Approx(5.0));
    REQUIRE(big.at(0)[0] == Catch::Approx(0.15));
    REQUIRE(big.at(0)[1] == Catch::Approx(0.20));
    REQUIRE(big.global_norm() <= 0.25 + 1e-12);

    // direction preserved: cosine similarity 1
    const double dot = big.at(0)[0] * 3.0 + big.at(0)[1] * 4.0;
    REQUIRE(dot / (big.global_norm() * 5.0) == Catch::Approx(1.0).margin(1e-12));

    GradMap zero(ps);
    clip_gradients(zero, ps, 0.25);
    REQUIRE(zero.global_norm() == 0.0);

    GradMap bad(ps);
    bad.at(0)[0] = std::numeric_limits<double>::quiet_NaN();
    REQUIRE_THROWS_WITH(clip_gradients(bad, ps, 0.25), Catch::Matchers::ContainsSubstring("w"));
}

TEST_CASE("adam: lr 0 leaves parameters bitwise unchanged") {
    ParamStore ps;
    ps.add("w", Tensor::vec({1.25, -0.75, 3.5}));
    Tensor before = ps.value(0);
    Adam opt(0.0);
    GradMap g(ps);
    g.at(0)[0] = 0.3;
    g.at(0)[1] = -2.0;
    g.at(0)[2] = 100.0;
    opt.step(ps, g);
    for (int i = 0; i < 3; ++i) REQUIRE(ps.value(0)[i] == before[i]);
}

TEST_CASE("training objective equals the reported ELBO terms on the same stream") {
    Rng rng(3);
    GenerativeModel m(smoke_model(PriorKind::AfAf, 3));
    for (int p = 0; p < m.params().count(); ++p) {
        Tensor& v = m.params().value(p);
        for (long long i = 0; i < v.numel(); ++i) v[i] = 0.3 * rng.normal();
    }
    Sequence x = seq_of({0, 2, 1});
    Rng ra(77), rb(77);
    ElboReport rep = m.elbo(x, 3, 1.0, ra);
    Tape t;
    LossParts parts = model_loss_parts(m, t, x, 3, rb, false);
    const double gain = t.val(t.sub(parts.recon, parts.kl)).value();
    REQUIRE(gain == Catch::Approx(rep.elbo).margin(1e-10));
}

TEST_CASE("smoke training: ELBO improves on a biased two-token corpus") {
    // 50 sequences of one length over a 2-token vocabulary, heavily biased
    Rng gen(5);
    Corpus corpus;
    for (int i = 0; i < 50; ++i) {
        Sequence s;
        for (int t = 0; t < 4; ++t) s.tokens.push_back(gen.uniform() < 0.9 ? 0 : 1);
        corpus.push_back(std::move(s));
    }

    GenerativeModel m(smoke_model(PriorKind::AfAf, 2));
    m.fit_length_model(corpus);
    TrainConfig cfg;
    cfg.epochs = 20;
    cfg.batch_size = 10;
    cfg.n_elbo_samples = 2;
    cfg.anneal = {2, 4};
    cfg.seed = 11;
    cfg.patience = 100;
    TrainLog log = train(m, corpus, {}, cfg);

    double first_elbo = 0.0, last_elbo = 0.0;
    for (const auto& r : log.records)
        if (r.split == "train") {
            if (r.epoch == 0) first_elbo = r.elbo_bpc;
            last_elbo = r.elbo_bpc;
        }
    // elbo_bpc is an NLL-style upper bound (lower is better); 0.1 nats over
    // 4 tokens = 0.036 bpc; initial uniform model sits at 1 bpc
    const double improvement_nats = (first_elbo - last_elbo) * 4.0 * M_LN2;
    INFO("first " << first_elbo << " last " << last_elbo << " improvement " << improvement_nats);
    REQUIRE(improvement_nats >= 0.1);
}

TEST_CASE("kl_weight 0 keeps the KL term out of the gradients") {
    Rng rng(7);
    GenerativeModel m(smoke_model(PriorKind::AfAf, 3));
    for (int p = 0; p < m.params().count(); ++p) {
        Tensor& v = m.params().value(p);
        for (long long i = 0; i < v.numel(); ++i) v[i] = 0.3 * rng.normal();
    }
    Sequence x = seq_of({0, 1, 2});

    Rng ra(13), rb(13);
    Tape t1;
    LossParts p1 = model_loss_parts(m, t1, x, 2, ra, false);
    GradMap g_full = t1.backward(t1.sub(p1.recon, t1.scale(p1.kl, 0.0)), m.params());

    Tape t2;
    LossParts p2 = model_loss_parts(m, t2, x, 2, rb, false);
    GradMap g_recon = t2.backward(p2.recon, m.params());

    for (int p = 0; p < g_full.count(); ++p)
        for (long long i = 0; i < g_full.at(p).numel(); ++i)
            REQUIRE(g_full.at(p)[i] == Catch::Approx(g_recon.at(p)[i]).margin(1e-12));
}

TEST_CASE("fixed seed reproduces the training log; threads do not change it") {
    Rng gen(17);
    Corpus corpus;
    for (int i = 0; i < 12; ++i) {
        Sequence s;
        const int T = 2 + gen.uniform_int(3);
        for (int t = 0; t < T; ++t) s.tokens.push_back(gen.uniform_int(3));
        corpus.push_back(std::move(s));
    }
    Corpus valid(corpus.begin(), corpus.begin() + 3);

    auto run = [&](int threads) {
        GenerativeModel m(smoke_model(PriorKind::AfScf, 3));
        TrainConfig cfg;
        cfg.epochs = 3;
        cfg.batch_size = 4;
        cfg.n_elbo_samples = 1;
        cfg.anneal = {1, 2};
        cfg.seed = 23;
        cfg.threads = threads;
        return train(m, corpus, valid, cfg);
    };
    TrainLog a = run(1);
    TrainLog b = run(1);
    TrainLog c = run(3);
    REQUIRE(a.records.size() == b.records.size());
    for (size_t i = 0; i < a.records.size(); ++i) {
        // bit-identical apart from wall time
        REQUIRE(a.records[i].recon_bpc == b.records[i].recon_bpc);
        REQUIRE(a.records[i].kl_bpc == b.records[i].kl_bpc);
        REQUIRE(a.records[i].elbo_bpc == b.records[i].elbo_bpc);
        REQUIRE(a.records[i].recon_bpc == c.records[i].recon_bpc);
        REQUIRE(a.records[i].kl_bpc == c.records[i].kl_bpc);
    }
}

TEST_CASE("baseline lstm: memorizes a repeated sequence, matches coin entropy") {
    // one repeated sequence: NLL -> ~0 bpc
    Corpus memo;
    for (int i = 0; i < 30; ++i) memo.push_back(seq_of({0, 1, 0, 1}));
    BaselineConfig bc;
    bc.vocab = 2;
    bc.embed = 6;
    bc.width = 12;
    bc.layers = 1;
    bc.L_max = 8;
    bc.dropout = 0.0;
    BaselineLstmLm lm(bc);
    TrainConfig cfg;
    cfg.epochs = 60;
    cfg.batch_size = 10;
    cfg.n_elbo_samples = 1;
    cfg.seed = 29;
    cfg.patience = 1000;
    train(lm, memo, {}, cfg);
    const double bpc = lm.nll_nats(memo[0]) / (4.0 * M_LN2);
    INFO("memorization bpc " << bpc);
    REQUIRE(bpc < 0.15);

    // uniform random binary corpus: NLL ~ 1 bpc
    Rng gen(31);
    Corpus coin;
    for (int i = 0; i < 60; ++i) {
        Sequence s;
        for (int t = 0; t < 6; ++t) s.tokens.push_back(gen.uniform_int(2));
        coin.push_back(std::move(s));
    }
    BaselineLstmLm lm2(bc);
    TrainConfig cfg2 = cfg;
    cfg2.epochs = 25;
    cfg2.seed = 37;
    train(lm2, coin, {}, cfg2);
    double nats = 0.0;
    long long toks = 0;
    Rng gen2(41);
    for (int i = 0; i < 30; ++i) {
        Sequence s;
        for (int t = 0; t < 6; ++t) s.tokens.push_back(gen2.uniform_int(2));
        nats += lm2.nll_nats(s);
        toks += 6;
    }
    const double bpc2 = nats / (static_cast<double>(toks) * M_LN2);
    INFO("coin bpc " << bpc2);
    REQUIRE(bpc2 == Catch::Approx(1.0).margin(0.08));

    // same seed reproducibility
    BaselineLstmLm lm3(bc);
    TrainConfig cfg3 = cfg2;
    TrainLog l3 = train(lm3, coin, {}, cfg3);
    BaselineLstmLm lm4(bc);
    TrainLog l4 = train(lm4, coin, {}, cfg3);
    REQUIRE(l3.records.back().recon_bpc == l4.records.back().recon_bpc);
}

TEST_CASE("divergence aborts with a checkpoint reference") {
    Corpus corpus = {seq_of({0, 1}), seq_of({1, 0})};
    GenerativeModel m(smoke_model(PriorKind::AfAf, 2));
    // poison one parameter so the first forward pass goes non-finite
    m.params().value("emb")[0] = std::numeric_limits<double>::infinity();
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.batch_size = 2;
    cfg.n_elbo_samples = 1;
    bool saved = false;
    bool raised = false;
    try {
        train(m, corpus, {}, cfg, [&](const std::string& tag) { saved = (tag == "last_good"); });
    } catch (const DivergenceError& e) {
        raised = true;
        REQUIRE(e.last_good_checkpoint == "last_good");
    }
    REQUIRE(raised);
    REQUIRE(saved);
}
