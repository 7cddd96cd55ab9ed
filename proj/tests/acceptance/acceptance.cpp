// Acceptance gates. Each gate prints one [PASS] or [FAIL] line; the exit code
// is nonzero when any gate fails.

#include <mpfr.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <sstream>

#include "frul/cli.hpp"
#include "frul/common.hpp"
#include "frul/config.hpp"
#include "frul/eval.hpp"
#include "frul/losses.hpp"
#include "frul/orchestrator.hpp"
#include "frul/scrubber.hpp"
#include "helpers.hpp"

#include <spdlog/spdlog.h>

using namespace frul;
using model::Tape;
using P64 = model::Parameters<double>;
using Clock = std::chrono::steady_clock;

namespace {

int failures = 0;

void gate(int id, const std::string& name, const std::function<std::pair<bool, std::string>()>& body) {
    const auto t0 = Clock::now();
    bool ok = false;
    std::string detail;
    try {
        std::tie(ok, detail) = body();
    } catch (const std::exception& e) {
        detail = std::string("exception: ") + e.what();
    }
    const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
    failures += !ok;
    std::printf("[%s] %d %s: %s (%.1fs)\n", ok ? "PASS" : "FAIL", id, name.c_str(), detail.c_str(), secs);
    std::fflush(stdout);
}

std::string num(double v, int digits = 4) {
    std::ostringstream s;
    s.precision(digits);
    s << v;
    return s.str();
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

double log1mexp_oracle(double x) {
    mpfr_t v;
    mpfr_init2(v, 256);
    mpfr_set_d(v, x, MPFR_RNDN);
    mpfr_exp(v, v, MPFR_RNDN);
    mpfr_ui_sub(v, 1, v, MPFR_RNDN);
    mpfr_log(v, v, MPFR_RNDN);
    const double out = mpfr_get_d(v, MPFR_RNDN);
    mpfr_clear(v);
    return out;
}

bool is_subsequence(const std::vector<tok::TokenId>& s, const std::vector<tok::TokenId>& b) {
    std::size_t j = 0;
    for (std::size_t i = 0; i < b.size() && j < s.size(); ++i)
        if (b[i] == s[j]) ++j;
    return j == s.size();
}

std::size_t lcs_exhaustive(const std::vector<tok::TokenId>& a, const std::vector<tok::TokenId>& b) {
    std::size_t best = 0;
    for (std::uint32_t mask = 0; mask < (1u << a.size()); ++mask) {
        std::vector<tok::TokenId> s;
        for (std::size_t i = 0; i < a.size(); ++i)
            if (mask & (1u << i)) s.push_back(a[i]);
        if (s.size() > best && is_subsequence(s, b)) best = s.size();
    }
    return best;
}

/// Forget, retain and scrubbed loss batches from a small world, scrubbed by
/// the default extractors.
struct Batches {
    std::vector<loss::EncodedExample> forget, retain;
    std::vector<loss::EncodedScrubbed> scrubbed;
};

Batches scrubbed_batches(const test::SmallWorld& w, std::size_t nf, std::size_t nr) {
    const auto res = scrub::scrub_corpus(w.corpus, w.split, scrub::default_extractors(), {});
    if (!res.failures.empty()) throw RuntimeFailure("scrubbing failed for " + res.failures.front().example_id);
    Batches b;
    for (std::size_t i = 0; i < std::min(nf, res.examples.size()); ++i) {
        const auto& ex = w.corpus.find(res.examples[i].example_id);
        b.forget.push_back(loss::encode_example(ex, w.vocab));
        b.scrubbed.push_back(loss::encode_scrubbed(ex, res.examples[i], w.vocab));
    }
    const auto retain = corpus::select(w.corpus, w.split.retain_ids);
    for (std::size_t i = 0; i < std::min(nr, retain.size()); ++i) b.retain.push_back(loss::encode_example(retain[i], w.vocab));
    return b;
}

// ------------------------------------------------------------- desk pipeline

double mean_of(const std::vector<eval::ExampleScore>& s, bool reasoning) {
    std::vector<double> v;
    for (const auto& e : s) v.push_back(reasoning ? e.reasoning : e.answer);
    return eval::mean_f1(v);
}

struct Desk {
    config::RunConfig cfg;
    corpus::Corpus corpus;
    corpus::Split split;
    tok::Vocabulary vocab;
    std::vector<scrub::ScrubbedExample> scrubbed;
    orch::Params original, retrained;
    eval::SplitScores original_scores, retrained_scores;
    double setup_s = 0.0;  ///< train, retrain, scrub and their scoring
    eval::EvalConfig eval_cfg() const { return {cfg.eval.max_new, static_cast<std::size_t>(cfg.eval.batch_size)}; }
};

struct Unlearned {
    orch::Params params;
    eval::SplitScores scores;
    eval::EvalReport report;
    double seconds = 0.0;
};

Desk build_desk() {
    const auto t0 = Clock::now();
    Desk d;
    d.cfg = config::load_config(std::filesystem::path(FRUL_DESK_CONFIG), {});
    d.corpus = corpus::generate_corpus({d.cfg.data.n_entities, d.cfg.data.questions_per_entity, d.cfg.seeds.data});
    d.split = corpus::partition(d.corpus, d.cfg.data.forget_fraction, d.cfg.seeds.data);
    d.vocab = tok::build_vocab(d.corpus);
    d.original = orch::finetune(d.cfg, d.corpus.examples, d.vocab).params;
    const orch::CorpusStore store(d.corpus);
    d.retrained = orch::retrain(d.cfg, store, d.split, d.vocab).params;
    d.scrubbed = orch::scrub_split(d.cfg, d.corpus, d.split, std::nullopt);
    d.original_scores = eval::score_model(d.original, d.corpus, d.split, d.vocab, d.eval_cfg());
    d.retrained_scores = eval::score_model(d.retrained, d.corpus, d.split, d.vocab, d.eval_cfg());
    d.setup_s = seconds_since(t0);
    return d;
}

Unlearned run_unlearn(const Desk& d, const std::string& method, std::uint64_t seed, double beta_r) {
    const auto t0 = Clock::now();
    auto cfg = d.cfg;
    cfg.unlearn.method = method;
    cfg.seeds.run = seed;
    cfg.loss.beta_r = beta_r;
    orch::UnlearnInputs in{corpus::select(d.corpus, d.split.forget_ids), corpus::select(d.corpus, d.split.retain_ids),
                           method == "frul" ? d.scrubbed : std::vector<scrub::ScrubbedExample>{}};
    Unlearned u;
    u.params = orch::unlearn(cfg, d.original, in, d.vocab).params;
    u.scores = eval::score_model(u.params, d.corpus, d.split, d.vocab, d.eval_cfg());
    u.report = eval::build_report(u.scores, d.retrained_scores, {seed, config::config_hash(cfg), "", "", d.vocab.fingerprint()});
    u.seconds = seconds_since(t0);
    return u;
}

double ue(const Unlearned& u, std::string_view split, std::string_view channel) { return u.report.cell(split, channel).ue; }

std::map<std::string, std::string> snapshot(const std::filesystem::path& dir) {
    std::map<std::string, std::string> files;
    for (const auto& e : std::filesystem::recursive_directory_iterator(dir)) {
        if (!e.is_regular_file()) continue;
        const auto rel = std::filesystem::relative(e.path(), dir).string();
        if (e.path().extension() == ".ckpt" || rel.rfind("reports/", 0) == 0) files[rel] = read_file(e.path());
    }
    return files;
}

}  // namespace

int main() {
    spdlog::set_level(spdlog::level::warn);

    gate(1, "gradient check of every loss (2 layers, d16, 64-bit)", [] {
        const auto t0 = Clock::now();
        const auto w = test::small_world(4, 3, 0.25, 5);
        const auto c = test::tiny_config(static_cast<int>(w.vocab.size()), 2, 16);
        const auto p = test::perturbed_model<double>(c);
        const auto b = scrubbed_batches(w, 2, 2);
        const auto frozen = test::perturbed_model<double>(c, 0.3, 42);
        std::vector<double> target(static_cast<std::size_t>(c.d_model));
        std::mt19937_64 trng(8);
        std::normal_distribution<double> n;
        for (auto& v : target) v = n(trng);
        std::vector<const tok::RenderedExample*> renders;
        for (const auto& e : b.retain) renders.push_back(&e.full);
        const loss::LossWeights lw;
        const loss::CotOptions opts;

        using Fn = std::function<double(Tape<double>&, double)>;
        const std::vector<std::pair<std::string, Fn>> losses = {
            {"gd", [&](Tape<double>& t, double wt) { return loss::loss_gd<double>(t, b.forget, b.retain, 1.0, wt); }},
            {"cot", [&](Tape<double>& t, double wt) { return loss::loss_cot<double>(t, b.scrubbed, 1.0, 2.0, opts, wt).value; }},
            {"rp", [&](Tape<double>& t, double wt) { return loss::loss_rp<double>(t, b.retain, wt); }},
            {"frul", [&](Tape<double>& t, double) { return loss::loss_frul<double>(t, b.forget, b.scrubbed, b.retain, lw, opts).total; }},
            {"ga", [&](Tape<double>& t, double wt) { return loss::loss_ga<double>(t, b.forget, wt); }},
            {"r2mu_lite", [&](Tape<double>& t, double wt) {
                 return loss::loss_r2mu_lite<double>(t, std::span(b.forget), std::span(b.retain), 1, target, 1.0, frozen, wt);
             }},
            {"lm", [&](Tape<double>& t, double wt) { return loss::loss_lm<double>(t, renders, wt); }},
        };
        bool ok = true;
        int min_checked = 1 << 30;
        double worst = 0;
        std::string worst_at;
        std::uint64_t seed = 1;
        for (const auto& [name, fn] : losses) {
            const auto g = model::grad(p, [&](Tape<double>& t) { return fn(t, 1.0); });
            auto value = [&](const P64& q) { return loss::evaluate(q, [&](Tape<double>& t) { return fn(t, 0.0); }); };
            std::mt19937_64 rng(seed++);
            const auto r = test::gradcheck(p, g.grads, value, rng, 100, 1e-4, 1e-4);
            ok = ok && r.failed == 0 && r.checked >= 100;
            min_checked = std::min(min_checked, r.checked);
            if (r.worst >= worst) {
                worst = r.worst;
                worst_at = name + " " + r.worst_name;
            }
        }
        const double secs = seconds_since(t0);
        ok = ok && secs <= 120.0;
        return std::pair{ok, std::to_string(losses.size()) + " losses, >= " + std::to_string(min_checked) +
                                 " coords each, worst rel err " + num(worst, 3) + " at " + worst_at + ", " +
                                 num(secs, 3) + "s <= 120s"};
    });

    gate(2, "log1mexp against 256-bit reference", [] {
        double worst = 0;
        for (int i = 0; i < 10000; ++i) {
            const double x = -std::exp(std::log(1e-15) + (std::log(700.0) - std::log(1e-15)) * i / 9999.0);
            worst = std::max(worst, std::abs(loss::log1mexp(x) - log1mexp_oracle(x)));
        }
        return std::pair{worst <= 1e-12, "max abs err " + num(worst, 3) + " over 10000 points in [-700, -1e-15]"};
    });

    gate(3, "ROUGE-L LCS against exhaustive enumeration", [] {
        std::mt19937_64 rng(2024);
        int mismatches = 0;
        for (int trial = 0; trial < 1000; ++trial) {
            std::vector<tok::TokenId> a(rng() % 11), b(rng() % 11);
            for (auto& x : a) x = static_cast<tok::TokenId>(rng() % 3);
            for (auto& x : b) x = static_cast<tok::TokenId>(rng() % 3);
            mismatches += eval::lcs_length(a, b) != lcs_exhaustive(a, b);
        }
        const tok::Vocabulary v({"cat", "lay", "mat", "on", "sat", "the"});
        const double f1 = eval::rouge_l("the cat sat on mat", "the cat lay on the mat", v).f1;
        return std::pair{mismatches == 0 && std::abs(f1 - 0.7273) <= 1e-4,
                         std::to_string(mismatches) + "/1000 mismatches, hand F1 " + num(f1, 6)};
    });

    gate(4, "FRUL total reconstructs from its parts", [] {
        const auto w = test::small_world(8, 4, 0.3, 21);
        const auto c = test::tiny_config(static_cast<int>(w.vocab.size()));
        const auto retain = corpus::select(w.corpus, w.split.retain_ids);
        const auto res = scrub::scrub_corpus(w.corpus, w.split, scrub::default_extractors(), {});
        const loss::LossWeights lw;
        std::mt19937_64 rng(17);
        double worst = 0;
        for (int trial = 0; trial < 50; ++trial) {
            const auto p = test::perturbed_model<double>(c, 0.3, rng());
            std::vector<loss::EncodedExample> f, r;
            std::vector<loss::EncodedScrubbed> s;
            for (std::size_t i = 0, n = 1 + rng() % 4; i < n; ++i) {
                const auto& sc = res.examples[rng() % res.examples.size()];
                const auto& ex = w.corpus.find(sc.example_id);
                f.push_back(loss::encode_example(ex, w.vocab));
                s.push_back(loss::encode_scrubbed(ex, sc, w.vocab));
            }
            for (std::size_t i = 0, n = 1 + rng() % 6; i < n; ++i)
                r.push_back(loss::encode_example(retain[rng() % retain.size()], w.vocab));
            const auto bd = loss::evaluate(p, [&](Tape<double>& t) { return loss::loss_frul<double>(t, f, s, r, lw, {}); });
            worst = std::max(worst, std::abs(bd.total - (lw.lambda_f * bd.cot_forget + lw.lambda_r * bd.cot_replace +
                                                         lw.beta_g * bd.gd + lw.beta_r * bd.rp)));
        }
        return std::pair{worst <= 1e-9, "max |total - sum| " + num(worst, 3) + " over 50 random batches"};
    });

    gate(5, "scrubber fidelity on the 400-example corpus", [] {
        const auto c = corpus::generate_corpus({100, 4, 1});
        const auto split = corpus::partition(c, 0.05, 1);
        const auto kb = corpus::forget_knowledge_base(c, split);
        const auto res = scrub::scrub_corpus(c, split, scrub::default_extractors(), {});
        const auto fid = test::span_fidelity(c, res.examples);
        const auto leaks = test::verbatim_leaks(res.examples, kb, c);
        const bool ok = res.failures.empty() && fid.precision() >= 0.95 && fid.recall() >= 0.95 && leaks == 0;
        return std::pair{ok, "precision " + num(fid.precision()) + ", recall " + num(fid.recall()) + ", " +
                                 std::to_string(leaks) + " verbatim leaks, " + std::to_string(res.examples.size()) +
                                 " forget examples"};
    });

    std::optional<Desk> desk;
    std::vector<Unlearned> frul_runs, r2mu_runs, low_beta_runs;
    std::string desk_error;
    try {
        desk = build_desk();
        for (std::uint64_t seed : {1, 2, 3}) frul_runs.push_back(run_unlearn(*desk, "frul", seed, desk->cfg.loss.beta_r));
    } catch (const std::exception& e) {
        desk_error = e.what();
    }
    auto need_desk = [&] {
        if (!desk) throw RuntimeFailure("desk pipeline failed: " + desk_error);
    };

    gate(6, "desk-scale forgetting with retained utility", [&] {
        need_desk();
        const auto& d = *desk;
        const auto& u = frul_runs.front();
        const double orig_forget = mean_of(d.original_scores.forget, false);
        const double orig_retain = mean_of(d.original_scores.retain, false);
        const double frul_forget = mean_of(u.scores.forget, false);
        const double frul_retain = mean_of(u.scores.retain, false);
        const auto orig_report = eval::build_report(d.original_scores, d.retrained_scores, {});
        const double ue_orig = orig_report.cell("forget", "answer").ue;
        const double ue_frul = ue(u, "forget", "answer");
        const double total = d.setup_s + u.seconds;
        const bool ok = orig_forget >= 0.9 && frul_forget <= 0.3 && frul_retain >= 0.7 * orig_retain &&
                        ue_frul < ue_orig && total <= 900.0;
        return std::pair{ok, "original forget answer " + num(orig_forget) + " (>= 0.9), frul forget answer " +
                                 num(frul_forget) + " (<= 0.3), retain answer " + num(frul_retain) + " vs 0.7 x " +
                                 num(orig_retain) + ", forget answer UE " + num(ue_frul) + " < " + num(ue_orig) +
                                 ", wall " + num(total, 4) + "s <= 900s"};
    });

    gate(7, "forget reasoning moves toward the scrubbed chain", [&] {
        need_desk();
        const auto& d = *desk;
        std::map<std::string, const scrub::ScrubbedExample*> by_id;
        for (const auto& s : d.scrubbed) by_id[s.example_id] = &s;
        const auto forget = corpus::select(d.corpus, d.split.forget_ids);
        std::vector<std::string> questions;
        for (const auto& e : forget) questions.push_back(e.question);
        double to_cm = 0, to_cf = 0;
        for (const auto& u : frul_runs) {
            const auto gens = eval::generate_outputs(u.params, d.vocab, questions, d.cfg.eval.max_new,
                                                     static_cast<std::size_t>(d.cfg.eval.batch_size));
            double cm = 0, cf = 0;
            for (std::size_t i = 0; i < forget.size(); ++i) {
                const auto& s = *by_id.at(forget[i].id);
                std::string spans;
                for (const auto& sp : s.spans) spans += (spans.empty() ? "" : " ") + sp.text;
                cm += eval::rouge_l(gens[i].reasoning, s.cot_modified, d.vocab).f1;
                cf += eval::rouge_l(gens[i].reasoning, spans, d.vocab).f1;
            }
            to_cm += cm / static_cast<double>(forget.size()) / static_cast<double>(frul_runs.size());
            to_cf += cf / static_cast<double>(forget.size()) / static_cast<double>(frul_runs.size());
        }
        return std::pair{to_cm >= to_cf, "mean ROUGE-L to c_m " + num(to_cm) + " >= to forget spans " + num(to_cf) +
                                             " over seeds 1-3"};
    });

    gate(8, "FRUL keeps retain reasoning closer than R2MU-lite", [&] {
        need_desk();
        for (std::uint64_t seed : {1, 2, 3}) r2mu_runs.push_back(run_unlearn(*desk, "r2mu_lite", seed, desk->cfg.loss.beta_r));
        double f = 0, r = 0;
        for (const auto& u : frul_runs) f += ue(u, "retain", "reasoning") / 3.0;
        for (const auto& u : r2mu_runs) r += ue(u, "retain", "reasoning") / 3.0;
        return std::pair{f <= r, "mean retain reasoning UE frul " + num(f) + " <= r2mu_lite " + num(r) + " over seeds 1-3"};
    });

    gate(9, "larger reasoning-preservation weight protects retain reasoning", [&] {
        need_desk();
        for (std::uint64_t seed : {1, 2, 3}) low_beta_runs.push_back(run_unlearn(*desk, "frul", seed, 0.25));
        double high = 0, low = 0;
        for (const auto& u : frul_runs) high += ue(u, "retain", "reasoning") / 3.0;
        for (const auto& u : low_beta_runs) low += ue(u, "retain", "reasoning") / 3.0;
        return std::pair{high <= low, "mean retain reasoning UE at beta_r 0.75 " + num(high) + " <= at 0.25 " + num(low) +
                                          " over seeds 1-3"};
    });

    gate(10, "pipeline reruns are byte-identical", [] {
        const std::vector<std::string> sizing = {
            "--set", "data.n_entities=20",   "--set", "model.d_model=32",       "--set", "model.n_heads=4",
            "--set", "model.d_ff=64",        "--set", "train.epochs=4",         "--set", "unlearn.epochs=3",
            "--set", "unlearn.eval_every=0", "--set", "scrub.max_in_flight=1", "--set", "data.forget_fraction=0.1"};
        test::TempDir a("frul-accept-a"), b("frul-accept-b");
        for (const auto* dir : {&a, &b}) {
            for (const auto* sub : {"gen-data", "build-kb", "scrub", "train", "retrain", "unlearn", "eval"}) {
                std::vector<std::string> args = {sub, "--out", dir->path().string(), "-q"};
                args.insert(args.end(), sizing.begin(), sizing.end());
                std::ostringstream out, err;
                if (const int code = cli::run(args, out, err); code != 0)
                    throw RuntimeFailure(std::string(sub) + " exited " + std::to_string(code) + ": " + err.str());
            }
        }
        const auto sa = snapshot(a.path()), sb = snapshot(b.path());
        std::size_t ckpts = 0;
        for (const auto& [k, v] : sa) ckpts += k.size() > 5 && k.ends_with(".ckpt");
        const bool ok = sa == sb && ckpts >= 3 && sa.size() > ckpts;
        return std::pair{ok, std::to_string(sa.size()) + " files compared (" + std::to_string(ckpts) +
                                 " checkpoints), " + (sa == sb ? "identical" : "differ")};
    });

    gate(11, "BM25 retrieval", [] {
        const auto c = corpus::generate_corpus({100, 4, 1});
        const scrub::RetrievalIndex index(c.facts);
        std::mt19937_64 rng(3);
        int hits = 0;
        for (int q = 0; q < 100; ++q) {
            const auto& f = c.facts[rng() % c.facts.size()];
            const auto r = index.retrieve(f.text, 5);
            hits += !r.empty() && r[0].fact->fact_id == f.fact_id;
        }
        auto fact = [](std::string id, std::string text) {
            corpus::KnowledgeFact k;
            k.fact_id = std::move(id);
            k.entity_id = "e";
            k.text = std::move(text);
            return k;
        };
        const scrub::RetrievalIndex toy({fact("d1", "alice met alice in paris ."), fact("d2", "bob lives in rome .")});
        const double idf = std::log(1.0 + (2 - 1 + 0.5) / (1 + 0.5));
        const double expected = idf * (2 * 2.2) / (2 + 1.2 * (1 - 0.75 + 0.75 * 5 / 4.5));
        const double err = std::abs(toy.score("alice", 0) - expected);
        return std::pair{hits == 100 && err <= 1e-9,
                         std::to_string(hits) + "/100 exact-text queries rank their fact first, toy score err " + num(err, 3)};
    });

    std::printf("%d gate(s) failed\n", failures);
    return failures == 0 ? 0 : 1;
}
