#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <json.hpp>

#include "seqflow/data.hpp"
#include "seqflow/train.hpp"

namespace seqflow {

// ---------------------------------------------------------------------------
// Logging, controlled by SEQFLOW_LOG (0 silent, 1 info, 2 debug; default 1).
// ---------------------------------------------------------------------------
inline int log_level() {
    static int level = [] {
        const char* env = std::getenv("SEQFLOW_LOG");
        if (!env) return 1;
        try {
            return std::stoi(env);
        } catch (...) {
            return 1;
        }
    }();
    return level;
}

inline void log_info(const std::string& msg) {
    if (log_level() >= 1) std::cerr << "[seqflow] " << msg << "\n";
}

inline void log_debug(const std::string& msg) {
    if (log_level() >= 2) std::cerr << "[seqflow:debug] " << msg << "\n";
}

// ---------------------------------------------------------------------------
// Run configuration: one JSON document with explicit defaults; the resolved
// form is dumped into every output directory so runs are self-describing.
// ---------------------------------------------------------------------------

struct RunConfig {
    std::string model = "af_af";  // af_af | af_scf | iaf_scf | af_only | lstm_baseline
    nlohmann::json dataset;       // see build_dataset
    nlohmann::json arch;          // model sizes
    TrainConfig train;
    int is_samples = 50;
    std::string out_dir = "run_out";
    std::string resume;  // checkpoint dir to continue from
    int start_epoch = 0;

    nlohmann::json to_json() const {
        return {{"model", model},
                {"dataset", dataset},
                {"arch", arch},
                {"train",
                 {{"learning_rate", train.learning_rate},
                  {"clip_norm", train.clip_norm},
                  {"batch_size", train.batch_size},
                  {"n_elbo_samples", train.n_elbo_samples},
                  {"dropout", train.dropout},
                  {"epochs", train.epochs},
                  {"seed", train.seed},
                  {"anneal_zero", train.anneal.zero_epochs},
                  {"anneal_ramp", train.anneal.ramp_epochs},
                  {"patience", train.patience},
                  {"threads", train.threads}}},
                {"eval", {{"is_samples", is_samples}}},
                {"out", out_dir},
                {"resume", resume},
                {"start_epoch", start_epoch}};
    }

    static RunConfig from_json(const nlohmann::json& j) {
        RunConfig c;
        c.model = j.value("model", "af_af");
        if (c.model != "af_af" && c.model != "af_scf" && c.model != "iaf_scf" &&
            c.model != "af_only" && c.model != "lstm_baseline")
            throw UsageError("config: unknown model '" + c.model + "'");
        if (!j.contains("dataset")) throw UsageError("config: missing 'dataset'");
        c.dataset = j.at("dataset");
        c.arch = j.value("arch", nlohmann::json::object());
        const nlohmann::json t = j.value("train", nlohmann::json::object());
        c.train.learning_rate = t.value("learning_rate", 1e-3);
        c.train.clip_norm = t.value("clip_norm", 0.25);
        c.train.batch_size = t.value("batch_size", 16);
        c.train.n_elbo_samples = t.value("n_elbo_samples", 10);
        c.train.dropout = t.value("dropout", 0.3);
        c.train.epochs = t.value("epochs", 10);
        c.train.seed = t.value("seed", uint64_t{1});
        // annealing defaults depend on the task: polyphonic corpora get the
        // longer schedule
        const bool poly = c.dataset.value("kind", "") == "pianoroll";
        c.train.anneal.zero_epochs = t.value("anneal_zero", poly ? 20 : 4);
        c.train.anneal.ramp_epochs = t.value("anneal_ramp", poly ? 15 : 10);
        c.train.patience = t.value("patience", 5);
        c.train.threads = t.value("threads", 1);
        c.is_samples = j.value("eval", nlohmann::json::object()).value("is_samples", 50);
        c.out_dir = j.value("out", "run_out");
        c.resume = j.value("resume", "");
        c.start_epoch = j.value("start_epoch", 0);
        return c;
    }

    static RunConfig load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw UsageError("config: cannot open " + path);
        nlohmann::json j;
        try {
            in >> j;
        } catch (const std::exception& e) {
            throw UsageError(std::string("config: parse error: ") + e.what());
        }
        return from_json(j);
    }
};

// ---------------------------------------------------------------------------
// Dataset construction from the config's dataset spec.
// ---------------------------------------------------------------------------

struct BuiltDataset {
    std::string kind;
    Corpus train, valid, test;
    Vocab vocab;               // char corpora only
    bool has_vocab = false;
    EmissionKind emission = EmissionKind::Categorical;
    int vocab_size = 0;        // V (categorical) or 88 (bernoulli)
    double entropy_bits = -1;  // synthetic corpora: exact entropy rate
};

inline BuiltDataset build_dataset(const nlohmann::json& spec) {
    BuiltDataset out;
    out.kind = spec.value("kind", "");
    if (out.kind == "char") {
        const std::string path = spec.at("path").get<std::string>();
        if (!std::filesystem::exists(path))
            throw UsageError("dataset: path does not exist: " + path);
        CharCorpus c = load_char_corpus(path, spec.value("length_cap", 288));
        log_info("char corpus: " + std::to_string(c.train.size()) + " train sentences, V = " +
                 std::to_string(c.vocab.size()) + ", kept fraction " +
                 std::to_string(c.kept_fraction) + ", unk mapped " + std::to_string(c.unk_mapped));
        out.train = std::move(c.train);
        out.valid = std::move(c.valid);
        out.test = std::move(c.test);
        out.vocab = c.vocab;
        out.has_vocab = true;
        out.vocab_size = out.vocab.size();
    } else if (out.kind == "pianoroll") {
        const std::string path = spec.at("path").get<std::string>();
        if (!std::filesystem::exists(path))
            throw UsageError("dataset: path does not exist: " + path);
        auto splits = load_pianoroll(path);
        auto take = [&](const char* name) {
            auto it = splits.find(name);
            return it == splits.end() ? Corpus{} : it->second;
        };
        out.train = take("train");
        out.valid = take("valid");
        out.test = take("test");
        out.emission = EmissionKind::Bernoulli;
        out.vocab_size = kPianoBits;
    } else if (out.kind == "synth_markov" || out.kind == "synth_unigram") {
        SynthSpec sp;
        sp.len_lo = spec.value("len_lo", 8);
        sp.len_hi = spec.value("len_hi", 16);
        const int V = spec.value("vocab", 8);
        Rng rng(spec.value("seed", uint64_t{1}));
        SynthCorpus train_c, valid_c, test_c;
        if (out.kind == "synth_unigram") {
            if (spec.contains("probs"))
                sp.unigram = spec.at("probs").get<std::vector<double>>();
            else
                sp.unigram.assign(static_cast<size_t>(V), 1.0 / V);
            train_c = synth_unigram(sp, spec.value("n_train", 2000), rng);
            valid_c = synth_unigram(sp, spec.value("n_valid", 200), rng);
            test_c = synth_unigram(sp, spec.value("n_test", 200), rng);
        } else {
            if (spec.contains("transition")) {
                sp.transition = spec.at("transition").get<std::vector<std::vector<double>>>();
            } else {
                // cycle chain: advance with probability p, else uniform noise
                if (V < 2) throw UsageError("synth_markov: default chain needs vocab >= 2");
                const double adv = spec.value("advance_prob", 0.9);
                sp.transition.assign(static_cast<size_t>(V),
                                     std::vector<double>(static_cast<size_t>(V), (1.0 - adv) / (V - 1)));
                for (int s = 0; s < V; ++s)
                    sp.transition[static_cast<size_t>(s)][static_cast<size_t>((s + 1) % V)] = adv;
            }
            train_c = synth_markov(sp, spec.value("n_train", 2000), rng);
            valid_c = synth_markov(sp, spec.value("n_valid", 200), rng);
            test_c = synth_markov(sp, spec.value("n_test", 200), rng);
        }
        out.train = std::move(train_c.sequences);
        out.valid = std::move(valid_c.sequences);
        out.test = std::move(test_c.sequences);
        out.vocab_size = V;
        out.entropy_bits = train_c.entropy_bits_per_token;
        log_info(out.kind + ": entropy rate " + std::to_string(out.entropy_bits) + " bits/token");
    } else {
        throw UsageError("dataset: unknown kind '" + out.kind + "'");
    }
    if (out.train.empty()) throw DataError("dataset: empty training split");
    return out;
}

// Longest sequence across splits; used as the L_max default for desk runs.
inline int max_length(const BuiltDataset& d) {
    int m = 1;
    for (const Corpus* c : {&d.train, &d.valid, &d.test})
        for (const auto& s : *c) m = std::max(m, s.length());
    return m;
}

}  // namespace seqflow
