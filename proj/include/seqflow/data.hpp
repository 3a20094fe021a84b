#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "seqflow/rng.hpp"
#include "seqflow/tensor.hpp"

namespace seqflow {

inline constexpr int kPianoPitchLo = 21;
inline constexpr int kPianoPitchHi = 108;
inline constexpr int kPianoBits = 88;

// ---------------------------------------------------------------------------
// Vocab: dense token-id bijection over unicode codepoints. Index V-1 is a
// reserved unknown-character slot so valid/test characters missing from the
// training split still map somewhere (with a warning count, not an error).
// ---------------------------------------------------------------------------
class Vocab {
public:
    Vocab() = default;

    static Vocab build(const std::vector<uint32_t>& train_chars) {
        Vocab v;
        for (uint32_t c : train_chars)
            if (!v.index_.count(c)) {
                v.index_[c] = static_cast<int>(v.chars_.size());
                v.chars_.push_back(c);
            }
        v.unk_id_ = static_cast<int>(v.chars_.size());
        return v;
    }

    static Vocab from_chars(std::vector<uint32_t> chars) {
        Vocab v;
        v.chars_ = std::move(chars);
        for (size_t i = 0; i < v.chars_.size(); ++i) v.index_[v.chars_[i]] = static_cast<int>(i);
        v.unk_id_ = static_cast<int>(v.chars_.size());
        return v;
    }

    int size() const { return static_cast<int>(chars_.size()) + 1; }  // includes unk slot
    int unk_id() const { return unk_id_; }

    int id(uint32_t c) const {
        auto it = index_.find(c);
        return it == index_.end() ? unk_id_ : it->second;
    }

    bool known(uint32_t c) const { return index_.count(c) != 0; }

    uint32_t token(int id) const {
        if (id == unk_id_) return 0xFFFD;  // replacement character
        if (id < 0 || id >= static_cast<int>(chars_.size()))
            throw UsageError("Vocab::token: id out of range");
        return chars_[static_cast<size_t>(id)];
    }

    const std::vector<uint32_t>& chars() const { return chars_; }

private:
    std::vector<uint32_t> chars_;
    std::map<uint32_t, int> index_;
    int unk_id_ = 0;
};

// ---------------------------------------------------------------------------
// Sequences. Categorical sequences carry token ids; polyphonic sequences an
// 88-bit row per step.
// ---------------------------------------------------------------------------
struct Sequence {
    std::vector<int> tokens;  // categorical
    Tensor notes;             // [T x 88] polyphonic; empty otherwise

    bool polyphonic() const { return !notes.empty(); }
    int length() const {
        return polyphonic() ? notes.rows() : static_cast<int>(tokens.size());
    }
};

using Corpus = std::vector<Sequence>;

// Padded batch view. Losses are computed per member sequence, so padding is
// structurally excluded; the mask exists for consumers that want the dense
// form.
struct SequenceBatch {
    std::vector<Sequence> seqs;
    int T_max = 0;

    static SequenceBatch from(std::vector<Sequence> members) {
        SequenceBatch b;
        b.seqs = std::move(members);
        for (const auto& s : b.seqs) b.T_max = std::max(b.T_max, s.length());
        return b;
    }

    int size() const { return static_cast<int>(seqs.size()); }

    std::vector<int> lengths() const {
        std::vector<int> out;
        for (const auto& s : seqs) out.push_back(s.length());
        return out;
    }

    // tokens[b][t] padded with -1; mask true iff t < length(b)
    std::pair<std::vector<std::vector<int>>, std::vector<std::vector<bool>>> padded() const {
        std::vector<std::vector<int>> toks;
        std::vector<std::vector<bool>> mask;
        for (const auto& s : seqs) {
            std::vector<int> row(static_cast<size_t>(T_max), -1);
            std::vector<bool> mrow(static_cast<size_t>(T_max), false);
            for (int t = 0; t < s.length(); ++t) {
                if (!s.polyphonic()) row[static_cast<size_t>(t)] = s.tokens[static_cast<size_t>(t)];
                mrow[static_cast<size_t>(t)] = true;
            }
            toks.push_back(std::move(row));
            mask.push_back(std::move(mrow));
        }
        return {toks, mask};
    }
};

// ---------------------------------------------------------------------------
// UTF-8 helpers
// ---------------------------------------------------------------------------
namespace detail {

inline std::vector<uint32_t> utf8_decode(const std::string& s) {
    std::vector<uint32_t> out;
    size_t i = 0;
    while (i < s.size()) {
        const unsigned char c = static_cast<unsigned char>(s[i]);
        uint32_t cp = 0;
        int extra = 0;
        if (c < 0x80) {
            cp = c;
        } else if ((c >> 5) == 0x6) {
            cp = c & 0x1F;
            extra = 1;
        } else if ((c >> 4) == 0xE) {
            cp = c & 0x0F;
            extra = 2;
        } else if ((c >> 3) == 0x1E) {
            cp = c & 0x07;
            extra = 3;
        } else {
            throw DataError("invalid UTF-8 byte at offset " + std::to_string(i));
        }
        if (extra > 0 && i + static_cast<size_t>(extra) >= s.size())
            throw DataError("truncated UTF-8 sequence");
        for (int k = 0; k < extra; ++k) {
            const unsigned char cc = static_cast<unsigned char>(s[i + 1 + static_cast<size_t>(k)]);
            if ((cc >> 6) != 0x2) throw DataError("invalid UTF-8 continuation byte");
            cp = (cp << 6) | (cc & 0x3F);
        }
        out.push_back(cp);
        i += 1 + static_cast<size_t>(extra);
    }
    return out;
}

inline std::string utf8_encode(const std::vector<uint32_t>& cps) {
    std::string out;
    for (uint32_t cp : cps) {
        if (cp < 0x80) {
            out.push_back(static_cast<char>(cp));
        } else if (cp < 0x800) {
            out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
            out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
        } else if (cp < 0x10000) {
            out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
            out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
            out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
        } else {
            out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
            out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
            out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
            out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
        }
    }
    return out;
}

inline std::vector<std::string> read_lines(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        lines.push_back(line);
    }
    return lines;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Character corpus: newline-delimited sentences in {train,valid,test}.txt
// under a directory. Sentences at or above the length cap are dropped and
// counted; the vocabulary comes from the training split alone.
// ---------------------------------------------------------------------------
struct CharCorpus {
    Corpus train, valid, test;
    Vocab vocab;
    long long dropped = 0;      // over all splits
    long long considered = 0;   // sentences before the cap
    long long unk_mapped = 0;   // valid/test characters missing from train
    double kept_fraction = 1.0;
};

inline CharCorpus load_char_corpus(const std::string& dir, int length_cap = 288) {
    CharCorpus out;
    std::vector<std::vector<uint32_t>> raw[3];
    const char* names[3] = {"train.txt", "valid.txt", "test.txt"};
    for (int s = 0; s < 3; ++s) {
        for (const auto& line : detail::read_lines(dir + "/" + names[s])) {
            if (line.empty()) continue;
            std::vector<uint32_t> cps = detail::utf8_decode(line);
            ++out.considered;
            if (static_cast<int>(cps.size()) >= length_cap) {
                ++out.dropped;
                continue;
            }
            raw[s].push_back(std::move(cps));
        }
    }
    out.kept_fraction =
        out.considered == 0 ? 1.0
                            : 1.0 - static_cast<double>(out.dropped) / static_cast<double>(out.considered);

    std::vector<uint32_t> train_chars;
    for (const auto& sent : raw[0]) train_chars.insert(train_chars.end(), sent.begin(), sent.end());
    out.vocab = Vocab::build(train_chars);

    auto convert = [&](const std::vector<std::vector<uint32_t>>& sents, bool count_unk) {
        Corpus c;
        for (const auto& sent : sents) {
            Sequence seq;
            for (uint32_t cp : sent) {
                if (count_unk && !out.vocab.known(cp)) ++out.unk_mapped;
                seq.tokens.push_back(out.vocab.id(cp));
            }
            c.push_back(std::move(seq));
        }
        return c;
    };
    out.train = convert(raw[0], false);
    out.valid = convert(raw[1], true);
    out.test = convert(raw[2], true);
    return out;
}

// ---------------------------------------------------------------------------
// Piano rolls: JSON document mapping split names to sequences; each timestep
// is a list of active MIDI pitches in [21, 108]. Internally a step becomes an
// 88-bit row (pitch p -> bit p - 21).
// ---------------------------------------------------------------------------
inline std::map<std::string, Corpus> load_pianoroll(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path);
    nlohmann::json doc;
    try {
        in >> doc;
    } catch (const std::exception& e) {
        throw DataError("piano roll parse error in " + path + ": " + e.what());
    }
    if (!doc.is_object()) throw DataError("piano roll root must be an object of splits");

    std::map<std::string, Corpus> out;
    for (auto it = doc.begin(); it != doc.end(); ++it) {
        Corpus corpus;
        const auto& seqs = it.value();
        for (size_t si = 0; si < seqs.size(); ++si) {
            const auto& steps = seqs[si];
            const int T = static_cast<int>(steps.size());
            if (T == 0) throw DataError("empty sequence in split " + it.key());
            Sequence seq;
            seq.notes = Tensor::zeros({T, kPianoBits});
            for (int t = 0; t < T; ++t) {
                for (const auto& pj : steps[static_cast<size_t>(t)]) {
                    const int pitch = pj.get<int>();
                    if (pitch < kPianoPitchLo || pitch > kPianoPitchHi)
                        throw DataError("pitch " + std::to_string(pitch) + " outside [21,108] at split " +
                                        it.key() + " sequence " + std::to_string(si) + " step " +
                                        std::to_string(t));
                    seq.notes.at(t, pitch - kPianoPitchLo) = 1.0;
                }
            }
            corpus.push_back(std::move(seq));
        }
        out[it.key()] = std::move(corpus);
    }
    return out;
}

inline nlohmann::json pianoroll_to_json(const Corpus& corpus) {
    nlohmann::json seqs = nlohmann::json::array();
    for (const auto& seq : corpus) {
        nlohmann::json steps = nlohmann::json::array();
        for (int t = 0; t < seq.notes.rows(); ++t) {
            nlohmann::json pitches = nlohmann::json::array();
            for (int b = 0; b < kPianoBits; ++b)
                if (seq.notes.at(t, b) != 0.0) pitches.push_back(b + kPianoPitchLo);
            steps.push_back(std::move(pitches));
        }
        seqs.push_back(std::move(steps));
    }
    return seqs;
}

inline void save_pianoroll(const std::string& path, const std::map<std::string, Corpus>& splits) {
    nlohmann::json doc;
    for (const auto& [name, corpus] : splits) doc[name] = pianoroll_to_json(corpus);
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path);
    out << doc.dump();
}

// ---------------------------------------------------------------------------
// 2D four-Gaussian toy: equal-weight isotropic components at (+-2, +-2) with
// sigma 0.5, plus its exact log-density for acceptance checks.
// ---------------------------------------------------------------------------
struct ToyMixture {
    double centers[4][2] = {{2.0, 2.0}, {2.0, -2.0}, {-2.0, 2.0}, {-2.0, -2.0}};
    double sigma = 0.5;

    double log_density(double x, double y) const {
        const double s2 = sigma * sigma;
        double mx = -1e300;
        double comps[4];
        for (int k = 0; k < 4; ++k) {
            const double dx = x - centers[k][0];
            const double dy = y - centers[k][1];
            comps[k] = -(dx * dx + dy * dy) / (2.0 * s2) - std::log(2.0 * M_PI * s2) - std::log(4.0);
            mx = std::max(mx, comps[k]);
        }
        double se = 0.0;
        for (int k = 0; k < 4; ++k) se += std::exp(comps[k] - mx);
        return mx + std::log(se);
    }

    Tensor sample(int n, Rng& rng) const {
        if (n < 1) throw UsageError("ToyMixture::sample: n must be positive");
        Tensor pts({n, 2});
        for (int i = 0; i < n; ++i) {
            const int k = rng.uniform_int(4);
            pts.at(i, 0) = centers[k][0] + sigma * rng.normal();
            pts.at(i, 1) = centers[k][1] + sigma * rng.normal();
        }
        return pts;
    }

    // Monte-carlo estimate of the differential entropy (= expected NLL of the
    // generator on its own samples).
    double entropy_estimate(int n, Rng& rng) const {
        const Tensor pts = sample(n, rng);
        double s = 0.0;
        for (int i = 0; i < n; ++i) s -= log_density(pts.at(i, 0), pts.at(i, 1));
        return s / n;
    }
};

// ---------------------------------------------------------------------------
// Synthetic discrete corpora with known entropy rates (bits/token).
// ---------------------------------------------------------------------------
struct SynthSpec {
    std::vector<double> unigram;        // unigram kind
    std::vector<std::vector<double>> transition;  // markov kind, row-stochastic
    int len_lo = 8, len_hi = 16;
};

struct SynthCorpus {
    Corpus sequences;
    double entropy_bits_per_token = 0.0;  // entropy rate of the process
    std::vector<double> stationary;       // markov only
};

namespace detail {

inline void check_distribution(const std::vector<double>& p, const std::string& what) {
    double s = 0.0;
    for (double v : p) {
        if (v < 0.0) throw DataError(what + ": negative probability");
        s += v;
    }
    if (std::abs(s - 1.0) > 1e-9) throw DataError(what + ": probabilities sum to " + std::to_string(s));
}

inline int draw_from(const std::vector<double>& p, Rng& rng) {
    double u = rng.uniform();
    double acc = 0.0;
    for (size_t i = 0; i < p.size(); ++i) {
        acc += p[i];
        if (u < acc) return static_cast<int>(i);
    }
    return static_cast<int>(p.size()) - 1;
}

inline double entropy_bits(const std::vector<double>& p) {
    double h = 0.0;
    for (double v : p)
        if (v > 0.0) h -= v * std::log2(v);
    return h;
}

}  // namespace detail

inline SynthCorpus synth_unigram(const SynthSpec& spec, int n, Rng& rng) {
    detail::check_distribution(spec.unigram, "unigram");
    SynthCorpus out;
    out.entropy_bits_per_token = detail::entropy_bits(spec.unigram);
    for (int i = 0; i < n; ++i) {
        const int T = spec.len_lo + rng.uniform_int(spec.len_hi - spec.len_lo + 1);
        Sequence s;
        for (int t = 0; t < T; ++t) s.tokens.push_back(detail::draw_from(spec.unigram, rng));
        out.sequences.push_back(std::move(s));
    }
    return out;
}

// Markov chain started from its stationary distribution; the entropy rate is
// sum_s pi_s * H(row_s).
inline SynthCorpus synth_markov(const SynthSpec& spec, int n, Rng& rng) {
    const auto& P = spec.transition;
    const int V = static_cast<int>(P.size());
    if (V == 0) throw DataError("markov: empty transition matrix");
    for (const auto& row : P) {
        if (static_cast<int>(row.size()) != V) throw DataError("markov: transition matrix not square");
        detail::check_distribution(row, "markov row");
    }

    // stationary distribution by power iteration
    std::vector<double> pi(static_cast<size_t>(V), 1.0 / V);
    for (int it = 0; it < 2000; ++it) {
        std::vector<double> next(static_cast<size_t>(V), 0.0);
        for (int i = 0; i < V; ++i)
            for (int j = 0; j < V; ++j)
                next[static_cast<size_t>(j)] += pi[static_cast<size_t>(i)] * P[static_cast<size_t>(i)][static_cast<size_t>(j)];
        double diff = 0.0;
        for (int j = 0; j < V; ++j) diff += std::abs(next[static_cast<size_t>(j)] - pi[static_cast<size_t>(j)]);
        pi = std::move(next);
        if (diff < 1e-14) break;
    }

    SynthCorpus out;
    out.stationary = pi;
    for (int s = 0; s < V; ++s)
        out.entropy_bits_per_token += pi[static_cast<size_t>(s)] * detail::entropy_bits(P[static_cast<size_t>(s)]);
    for (int i = 0; i < n; ++i) {
        const int T = spec.len_lo + rng.uniform_int(spec.len_hi - spec.len_lo + 1);
        Sequence s;
        int state = detail::draw_from(pi, rng);
        s.tokens.push_back(state);
        for (int t = 1; t < T; ++t) {
            state = detail::draw_from(P[static_cast<size_t>(state)], rng);
            s.tokens.push_back(state);
        }
        out.sequences.push_back(std::move(s));
    }
    return out;
}

}  // namespace seqflow
