#pragma once

#include <cmath>
#include <filesystem>
#include <random>
#include <set>
#include <string>
#include <unistd.h>

#include "frul/corpus.hpp"
#include "frul/model.hpp"
#include "frul/scrub_types.hpp"
#include "frul/tokenizer.hpp"

namespace frul::test {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
  public:
    explicit TempDir(const std::string& tag = "frul") {
        static int counter = 0;
        path_ = std::filesystem::temp_directory_path() /
                (tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& p) const { return path_ / p; }

  private:
    std::filesystem::path path_;
};

inline model::ModelConfig tiny_config(int vocab_size, int n_layers = 2, int d_model = 16, std::uint64_t seed = 7) {
    model::ModelConfig c;
    c.n_layers = n_layers;
    c.n_heads = 4;
    c.d_model = d_model;
    c.d_ff = 2 * d_model;
    c.context_len = 128;
    c.vocab_size = vocab_size;
    c.init_seed = seed;
    return c;
}

/// Initial weights are small; scale them up so gradients are not dominated
/// by rounding and the model is far from uniform.
template <class S>
model::Parameters<S> perturbed_model(const model::ModelConfig& c, double scale = 0.3, std::uint64_t seed = 11) {
    auto p = model::init_model<S>(c);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, scale);
    for (auto& t : p.tensors)
        for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] += static_cast<S>(n(rng));
    return p;
}

/// A model whose output distribution is uniform at every position.
template <class S>
model::Parameters<S> uniform_model(const model::ModelConfig& c) {
    auto p = perturbed_model<S>(c);
    p[p.w_out()].setZero();
    p[p.b_out()].setZero();
    return p;
}

/// Small generated corpus with its vocabulary.
struct SmallWorld {
    corpus::Corpus corpus;
    tok::Vocabulary vocab;
    corpus::Split split;
};

inline SmallWorld small_world(int n_entities = 4, int qpe = 3, double fraction = 0.25, std::uint64_t seed = 5) {
    SmallWorld w;
    w.corpus = corpus::generate_corpus({n_entities, qpe, seed});
    w.vocab = tok::build_vocab(w.corpus);
    w.split = corpus::partition(w.corpus, fraction, seed);
    return w;
}

inline double rel_err(double a, double b) { return std::abs(a - b) / std::max({1e-8, std::abs(a), std::abs(b)}); }

struct Coordinate {
    std::size_t tensor = 0;
    Eigen::Index index = 0;
};

/// Uniform random parameter coordinate. The key third of each qkv bias is
/// skipped: attention softmax is invariant to it, so its gradient is exactly
/// zero and a relative error there only measures finite-difference noise.
template <class S, class R>
Coordinate random_coordinate(const model::Parameters<S>& p, R& rng) {
    using P = model::Parameters<S>;
    const auto d = static_cast<Eigen::Index>(p.config.d_model);
    for (;;) {
        Coordinate c{static_cast<std::size_t>(rng() % p.tensors.size()), 0};
        c.index = static_cast<Eigen::Index>(rng() % static_cast<std::uint64_t>(p[c.tensor].size()));
        bool key_bias = false;
        for (int l = 0; l < p.config.n_layers; ++l)
            key_bias = key_bias || (c.tensor == p.layer(l, P::Bqkv) && c.index >= d && c.index < 2 * d);
        if (!key_bias) return c;
    }
}

struct GradcheckResult {
    int checked = 0;
    int failed = 0;
    double worst = 0.0;
    std::string worst_name;
};

/// Central differences (step h) of value(p) against analytic gradients at n
/// random coordinates.
template <class F, class R>
GradcheckResult gradcheck(model::Parameters<double> p, const model::Parameters<double>& analytic, F&& value, R& rng,
                          int n = 100, double h = 1e-4, double tol = 1e-4) {
    GradcheckResult res;
    for (int k = 0; k < n; ++k) {
        const auto c = random_coordinate(p, rng);
        double& w = p[c.tensor].data()[c.index];
        const double orig = w;
        w = orig + h;
        const double up = value(p);
        w = orig - h;
        const double down = value(p);
        w = orig;
        const double e = rel_err((up - down) / (2 * h), analytic[c.tensor].data()[c.index]);
        ++res.checked;
        if (e > tol) ++res.failed;
        if (e > res.worst) {
            res.worst = e;
            res.worst_name = p.names[c.tensor] + "[" + std::to_string(c.index) + "]";
        }
    }
    return res;
}


struct SpanFidelity {
    std::size_t true_positive = 0;
    std::size_t predicted = 0;
    std::size_t relevant = 0;
    double precision() const { return predicted == 0 ? 1.0 : static_cast<double>(true_positive) / predicted; }
    double recall() const { return relevant == 0 ? 1.0 : static_cast<double>(true_positive) / relevant; }
};

/// Sentence-level agreement of scrubbed spans with the generator's record of
/// which cot sentences were rendered from facts.
inline SpanFidelity span_fidelity(const corpus::Corpus& corpus, const std::vector<scrub::ScrubbedExample>& scrubbed) {
    SpanFidelity f;
    for (const auto& s : scrubbed) {
        std::vector<std::string> words;
        for (auto& p : tok::split_words(corpus.find(s.example_id).cot)) words.push_back(p.text);
        const auto sentences = tok::sentence_ranges(words);
        std::set<std::size_t> predicted, relevant;
        for (std::size_t i = 0; i < sentences.size(); ++i)
            for (const auto& sp : s.spans)
                if (sp.start < sentences[i].end && sentences[i].begin < sp.end) predicted.insert(i);
        for (const auto& src : corpus.provenance.at(s.example_id))
            relevant.insert(static_cast<std::size_t>(src.sentence_index));
        for (auto i : predicted) f.true_positive += relevant.count(i);
        f.predicted += predicted.size();
        f.relevant += relevant.size();
    }
    return f;
}

/// Space-joined word sequence padded with single spaces, so a substring test
/// is a whole-word test.
inline std::string padded_words(std::string_view text) {
    std::string out = " ";
    for (auto& p : tok::split_words(text)) out += p.text + " ";
    return out;
}

/// Count of (example, fact) pairs where a knowledge-base value of the
/// example's entity occurs verbatim in its c_m.
inline std::size_t verbatim_leaks(const std::vector<scrub::ScrubbedExample>& scrubbed,
                                  const std::vector<corpus::KnowledgeFact>& knowledge, const corpus::Corpus& corpus) {
    std::size_t leaks = 0;
    for (const auto& s : scrubbed) {
        const auto& ex = corpus.find(s.example_id);
        const auto cm = padded_words(s.cot_modified);
        for (const auto& f : knowledge)
            if (f.entity_id == ex.entity_id && cm.find(padded_words(f.value)) != std::string::npos)
                ++leaks;
    }
    return leaks;
}

}  // namespace frul::test
