#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "seqflow/data.hpp"

using namespace seqflow;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("seqflow_test_" + std::to_string(::getpid()) + "_" +
                                            std::to_string(counter++));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    static inline int counter = 0;
};

void write_file(const fs::path& p, const std::string& content) {
    std::ofstream out(p);
    out << content;
}

}  // namespace

TEST_CASE("char corpus: ids, cap rule, unk mapping, vocab round-trip") {
    TempDir dir;
    std::string long_line(300, 'a');
    write_file(dir.path / "train.txt", "ab a\nba\n" + long_line + "\n");
    write_file(dir.path / "valid.txt", "abq\n");
    write_file(dir.path / "test.txt", "aa\n");

    CharCorpus c = load_char_corpus((dir.path).string());
    REQUIRE(c.train.size() == 2);
    REQUIRE(c.dropped == 1);
    REQUIRE(c.considered == 5);
    REQUIRE(c.kept_fraction == Catch::Approx(4.0 / 5.0));

    // "ab a": 4 tokens over {a, b, space}
    REQUIRE(c.train[0].tokens.size() == 4);
    REQUIRE(c.vocab.size() == 4);  // a, b, space + reserved unk

    // 'q' is not in train: mapped to the unk id, counted
    REQUIRE(c.unk_mapped == 1);
    REQUIRE(c.valid[0].tokens[2] == c.vocab.unk_id());

    // round-trip identity for every token in every split
    for (const Corpus* split : {&c.train, &c.valid, &c.test})
        for (const auto& seq : *split)
            for (int id : seq.tokens) {
                if (id == c.vocab.unk_id()) continue;
                REQUIRE(c.vocab.id(c.vocab.token(id)) == id);
            }
}

TEST_CASE("pianoroll: index arithmetic, silence, splits, round-trip") {
    TempDir dir;
    const fs::path p = dir.path / "roll.json";
    write_file(p, R"({"train": [[[60], []], [[21, 108]]],
                      "valid": [[[40]]],
                      "test":  [[[50]]],
                      "extra": [[[70]]]})");
    auto splits = load_pianoroll(p.string());
    REQUIRE(splits.size() == 4);

    const Sequence& s0 = splits["train"][0];
    REQUIRE(s0.notes.rows() == 2);
    REQUIRE(s0.notes.at(0, 60 - 21) == 1.0);  // pitch 60 -> bit 39
    REQUIRE(s0.notes.at(0, 39) == 1.0);
    double step0 = 0.0, step1 = 0.0;
    for (int b = 0; b < 88; ++b) {
        step0 += s0.notes.at(0, b);
        step1 += s0.notes.at(1, b);
    }
    REQUIRE(step0 == 1.0);
    REQUIRE(step1 == 0.0);  // silence is a valid all-zero step
    REQUIRE(splits["train"][1].notes.at(0, 0) == 1.0);
    REQUIRE(splits["train"][1].notes.at(0, 87) == 1.0);

    // save -> load round-trips bit-exactly
    const fs::path p2 = dir.path / "roll2.json";
    save_pianoroll(p2.string(), splits);
    auto again = load_pianoroll(p2.string());
    REQUIRE(again.size() == splits.size());
    for (const auto& [name, corpus] : splits) {
        REQUIRE(again[name].size() == corpus.size());
        for (size_t i = 0; i < corpus.size(); ++i)
            REQUIRE(max_abs_diff(again[name][i].notes, corpus[i].notes) == 0.0);
    }

    const fs::path bad = dir.path / "bad.json";
    write_file(bad, R"({"train": [[[110]]]})");
    REQUIRE_THROWS_AS(load_pianoroll(bad.string()), DataError);
    try {
        load_pianoroll(bad.string());
    } catch (const DataError& e) {
        REQUIRE(std::string(e.what()).find("step 0") != std::string::npos);
    }
}

TEST_CASE("toy mixture: entropy oracle reproducibility and mode shape") {
    ToyMixture mix;
    Rng r1(7), r2(7);
    const double h1 = mix.entropy_estimate(100000, r1);
    const double h2 = mix.entropy_estimate(100000, r2);
    REQUIRE(h1 == h2);  // seeded sampling reproducible

    Rng r3(8);
    const double h3 = mix.entropy_estimate(100000, r3);
    REQUIRE(std::abs(h3 - h1) < 0.01);

    // mode at (2,2): density = (1/4) of a component peak, up to e^{-32} terms
    const double peak = std::exp(mix.log_density(2.0, 2.0));
    const double component_peak = 1.0 / (2.0 * M_PI * 0.25);
    REQUIRE(peak == Catch::Approx(component_peak / 4.0).epsilon(1e-6));
    // origin sits far below the modes
    REQUIRE(mix.log_density(0.0, 0.0) < mix.log_density(2.0, 2.0) - 5.0);
}

TEST_CASE("synthetic corpora: entropies") {
    Rng rng(9);
    SynthSpec uspec;
    uspec.unigram = {0.25, 0.25, 0.25, 0.25};
    SynthCorpus u = synth_unigram(uspec, 50, rng);
    REQUIRE(u.entropy_bits_per_token == Catch::Approx(2.0));
    REQUIRE(u.sequences.size() == 50);

    // deterministic cycle: zero entropy beyond the first token
    SynthSpec cyc;
    cyc.transition = {{0, 1, 0}, {0, 0, 1}, {1, 0, 0}};
    SynthCorpus c = synth_markov(cyc, 10, rng);
    REQUIRE(c.entropy_bits_per_token == Catch::Approx(0.0).margin(1e-12));

    // 2-state chain with p(stay) = 0.9: rate = H(0.9) = 0.469 bits
    SynthSpec two;
    two.transition = {{0.9, 0.1}, {0.1, 0.9}};
    SynthCorpus m = synth_markov(two, 10, rng);
    const double h = -(0.9 * std::log2(0.9) + 0.1 * std::log2(0.1));
    REQUIRE(m.entropy_bits_per_token == Catch::Approx(h).margin(1e-9));
    REQUIRE(m.entropy_bits_per_token == Catch::Approx(0.469).margin(1e-3));
    REQUIRE(m.stationary[0] == Catch::Approx(0.5).margin(1e-9));

    SynthSpec bad;
    bad.transition = {{0.5, 0.4}, {0.5, 0.5}};
    REQUIRE_THROWS_AS(synth_markov(bad, 1, rng), DataError);
}

TEST_CASE("sequence batch padding and mask") {
    Sequence a;
    a.tokens = {1, 2, 3};
    Sequence b;
    b.tokens = {4};
    SequenceBatch batch = SequenceBatch::from({a, b});
    REQUIRE(batch.T_max == 3);
    auto [toks, mask] = batch.padded();
    REQUIRE(toks[0] == std::vector<int>{1, 2, 3});
    REQUIRE(toks[1] == std::vector<int>{4, -1, -1});
    REQUIRE(mask[1] == std::vector<bool>{true, false, false});
}
