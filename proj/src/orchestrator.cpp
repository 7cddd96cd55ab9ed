#include "frul/orchestrator.hpp"

#include <chrono>
#include <cmath>
#include <random>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "frul/common.hpp"
#include "frul/rng.hpp"
#include "frul/scrubber.hpp"

namespace frul::orch {

using nlohmann::json;

CorpusStore::CorpusStore(const corpus::Corpus& corpus) {
    for (const auto& e : corpus.examples) by_id_.emplace(e.id, &e);
}

const corpus::Example& CorpusStore::get(const std::string& id) const {
    auto it = by_id_.find(id);
    if (it == by_id_.end()) throw ValidationError("unknown example '" + id + "'");
    return *it->second;
}

std::string RunRecord::history_jsonl() const {
    std::string out;
    for (const auto& s : history) {
        json j = {{"step", s.step}, {"epoch", s.epoch}, {"kind", s.kind}, {"lr", s.lr}, {"loss", s.loss}};
        if (s.skipped) j["skipped"] = true;
        if (s.breakdown) {
            const auto& b = *s.breakdown;
            j["gd"] = b.gd;
            j["cot_forget"] = b.cot_forget;
            j["cot_replace"] = b.cot_replace;
            j["rp"] = b.rp;
            j["total"] = b.total;
        }
        out += j.dump() + "\n";
    }
    return out;
}

model::CheckpointMeta checkpoint_meta(const tok::Vocabulary& vocab, const std::string& label) {
    return {vocab.fingerprint(), label};
}

Params initial_model(const config::RunConfig& cfg, const tok::Vocabulary& vocab) {
    model::ModelConfig mc = cfg.model;
    mc.vocab_size = static_cast<int>(vocab.size());
    mc.init_seed = cfg.seeds.model;
    return model::init_model<float>(mc);
}

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

bool all_zero(const Params& g) {
    for (const auto& t : g.tensors)
        if (!t.isZero(0)) return false;
    return true;
}

void check_fits(const tok::RenderedExample& r, const model::ModelConfig& mc, const std::string& id) {
    if (static_cast<int>(r.size()) > mc.context_len)
        throw ValidationError("example " + id + " renders to " + std::to_string(r.size()) +
                              " tokens, above model.context_len " + std::to_string(mc.context_len));
}

// Reshuffles each time the list is exhausted.
class BatchCursor {
  public:
    BatchCursor(std::size_t n, std::size_t batch, Rng& rng) : order_(n), batch_(batch), rng_(rng) {
        for (std::size_t i = 0; i < n; ++i) order_[i] = i;
        pos_ = n;
    }
    std::vector<std::size_t> next() {
        std::vector<std::size_t> out;
        while (out.size() < std::min(batch_, order_.size())) {
            if (pos_ >= order_.size()) {
                shuffle_in_place(order_, rng_);
                pos_ = 0;
            }
            out.push_back(order_[pos_++]);
        }
        return out;
    }

  private:
    std::vector<std::size_t> order_;
    std::size_t batch_;
    Rng& rng_;
    std::size_t pos_;
};

template <class T>
std::vector<T> gather(const std::vector<T>& all, const std::vector<std::size_t>& idx) {
    std::vector<T> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(all[i]);
    return out;
}

}  // namespace

TrainResult finetune(const config::RunConfig& cfg, std::span<const corpus::Example> examples,
                     const tok::Vocabulary& vocab, std::optional<Params> start) {
    const auto t0 = Clock::now();
    TrainResult res{start ? std::move(*start) : initial_model(cfg, vocab), {}};
    res.record.method = "finetune";
    res.record.config_hash = config::config_hash(cfg);
    if (cfg.train.epochs == 0) return res;
    if (examples.empty()) throw ValidationError("cannot train on an empty example set");

    std::vector<tok::RenderedExample> renders;
    for (const auto& e : examples) {
        renders.push_back(tok::render_example(e, vocab));
        check_fits(renders.back(), res.params.config, e.id);
    }
    auto state = model::OptimizerState<float>::fresh(res.params, cfg.optim);
    Rng rng(cfg.seeds.run);
    std::vector<std::size_t> order(renders.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    const auto bs = static_cast<std::size_t>(cfg.train.batch_size);

    for (int epoch = 1; epoch <= cfg.train.epochs; ++epoch) {
        shuffle_in_place(order, rng);
        double epoch_loss = 0.0;
        std::size_t n_batches = 0;
        for (std::size_t b = 0; b < order.size(); b += bs) {
            std::vector<const tok::RenderedExample*> batch;
            for (std::size_t k = b; k < std::min(order.size(), b + bs); ++k) batch.push_back(&renders[order[k]]);
            StepRecord rec{state.step, epoch, "train", model::lr_at(state.step, state.hyper), 0.0, std::nullopt, false};
            model::GradResult<float> g;
            try {
                g = model::grad(res.params,
                                [&](model::Tape<float>& tape) { return loss::loss_lm<float>(tape, batch, 1.0f); });
            } catch (const RuntimeFailure& e) {
                throw RuntimeFailure("training diverged at step " + std::to_string(state.step) + ": " + e.what());
            }
            model::adamw_step(res.params, g.grads, state);
            rec.loss = g.loss;
            epoch_loss += g.loss;
            ++n_batches;
            res.record.history.push_back(std::move(rec));
        }
        res.record.epochs_run = epoch;
        spdlog::debug("epoch {} mean loss {:.4f}", epoch, epoch_loss / static_cast<double>(n_batches));
    }
    res.record.wall_time_s = seconds_since(t0);
    return res;
}

TrainResult retrain(const config::RunConfig& cfg, const ExampleStore& store, const corpus::Split& split,
                    const tok::Vocabulary& vocab) {
    std::vector<corpus::Example> retain;
    retain.reserve(split.retain_ids.size());
    for (const auto& id : split.retain_ids) retain.push_back(store.get(id));
    auto res = finetune(cfg, retain, vocab);
    res.record.method = "retrain";
    return res;
}

std::vector<float> r2mu_target(const Params& original, std::span<const loss::EncodedExample> forget, int layer,
                               std::uint64_t seed) {
    const auto d = static_cast<std::size_t>(original.config.d_model);
    double sum_sq = 0.0;
    std::size_t count = 0;
    for (const auto& e : forget) {
        const auto h = model::hidden_state(original, e.full.token_ids, layer);
        for (std::size_t t = 0; t < e.full.size(); ++t) {
            const auto r = e.full.roles[t];
            if (r != tok::Role::Reasoning && r != tok::Role::Answer) continue;
            sum_sq += static_cast<double>(h.row(static_cast<Eigen::Index>(t)).template cast<double>().squaredNorm());
            count += d;
        }
    }
    const double rms = count ? std::sqrt(sum_sq / static_cast<double>(count)) : 1.0;
    Rng rng(seed ^ 0x5275326d75ULL);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> v(d);
    double vs = 0.0;
    for (auto& x : v) {
        x = normal(rng);
        vs += x * x;
    }
    const double scale = rms / std::sqrt(vs / static_cast<double>(d));
    std::vector<float> out(d);
    for (std::size_t i = 0; i < d; ++i) out[i] = static_cast<float>(v[i] * scale);
    return out;
}

double answer_rouge(const Params& params, std::span<const corpus::Example> examples, const tok::Vocabulary& vocab,
                    const config::RunConfig& cfg) {
    if (examples.empty()) return 0.0;
    std::vector<std::string> questions;
    for (const auto& e : examples) questions.push_back(e.question);
    const auto gens = eval::generate_outputs(params, vocab, questions, cfg.eval.max_new,
                                             static_cast<std::size_t>(cfg.eval.batch_size));
    const auto scores = eval::score_outputs(examples, gens, vocab);
    double s = 0.0;
    for (const auto& x : scores) s += x.answer;
    return s / static_cast<double>(scores.size());
}

TrainResult unlearn(const config::RunConfig& cfg, const Params& original, const UnlearnInputs& inputs,
                    const tok::Vocabulary& vocab) {
    const auto t0 = Clock::now();
    const std::string& method = cfg.unlearn.method;
    if (method != "frul" && method != "ga" && method != "gd" && method != "r2mu_lite")
        throw ValidationError("unknown unlearning method '" + method + "'");
    if (inputs.forget.empty()) throw ValidationError("unlearning needs a non-empty forget set");
    const bool uses_retain = method != "ga";
    if (uses_retain && inputs.retain.empty()) throw ValidationError(method + " needs a non-empty retain set");

    const auto forget = loss::encode_examples(inputs.forget, vocab);
    const auto retain = loss::encode_examples(inputs.retain, vocab);
    for (const auto& e : forget) check_fits(e.full, original.config, e.id);
    for (const auto& e : retain) check_fits(e.full, original.config, e.id);

    std::vector<loss::EncodedScrubbed> scrubbed;
    if (method == "frul") {
        std::map<std::string, const scrub::ScrubbedExample*> by_id;
        for (const auto& s : inputs.scrubbed) by_id.emplace(s.example_id, &s);
        for (const auto& e : inputs.forget) {
            auto it = by_id.find(e.id);
            if (it == by_id.end()) throw ValidationError("frul needs a scrub record for forget example " + e.id);
            scrubbed.push_back(loss::encode_scrubbed(e, *it->second, vocab));
            check_fits(scrubbed.back().replaced, original.config, e.id);
        }
    }

    const int layer = config::resolved_r2mu_layer(cfg);
    std::vector<float> target;
    if (method == "r2mu_lite") target = r2mu_target(original, forget, layer, cfg.seeds.run);

    TrainResult res{original, {}};
    res.record.method = method;
    res.record.config_hash = config::config_hash(cfg);
    auto state = model::OptimizerState<float>::fresh(res.params, cfg.optim);
    Rng rng(cfg.seeds.run);
    const auto bs = static_cast<std::size_t>(cfg.train.batch_size);
    std::vector<std::size_t> forget_order(forget.size());
    for (std::size_t i = 0; i < forget_order.size(); ++i) forget_order[i] = i;
    BatchCursor retain_cursor(retain.size(), bs, rng);

    std::vector<loss::EncodedExample> fb, rb;
    std::vector<loss::EncodedScrubbed> sb;

    auto step = [&](int epoch, const char* kind) {
        StepRecord rec{state.step, epoch, kind, model::lr_at(state.step, state.hyper), 0.0, std::nullopt, false};
        loss::LossBreakdown<float> parts;
        model::GradResult<float> g;
        try {
            g = model::grad(res.params, [&](model::Tape<float>& tape) -> float {
                if (method == "frul") {
                    parts = loss::loss_frul<float>(tape, fb, sb, rb, cfg.loss, cfg.cot);
                    return parts.total;
                }
                if (method == "gd") return loss::loss_gd<float>(tape, fb, rb, cfg.loss.alpha, 1.0f);
                if (method == "ga") return loss::loss_ga<float>(tape, fb, 1.0f);
                return loss::loss_r2mu_lite<float>(tape, fb, rb, layer, target, cfg.r2mu_retain_weight, original,
                                                   1.0f);
            });
        } catch (const RuntimeFailure& e) {
            throw RuntimeFailure("unlearning diverged at step " + std::to_string(state.step) + ": " + e.what());
        }
        rec.loss = g.loss;
        if (method == "frul")
            rec.breakdown = loss::LossBreakdown<double>{parts.gd,    parts.cot_forget, parts.cot_replace, parts.rp,
                                                        parts.total, parts.n_forget,   parts.n_retain};
        if (all_zero(g.grads)) {
            // a zero objective must leave the model untouched, weight decay included
            rec.skipped = true;
        } else {
            model::adamw_step(res.params, g.grads, state);
        }
        res.record.history.push_back(std::move(rec));
    };

    if (uses_retain) rb = gather(retain, retain_cursor.next());
    for (int epoch = 1; epoch <= cfg.unlearn.epochs; ++epoch) {
        shuffle_in_place(forget_order, rng);
        for (std::size_t b = 0; b < forget_order.size(); b += bs) {
            std::vector<std::size_t> idx(forget_order.begin() + static_cast<std::ptrdiff_t>(b),
                                         forget_order.begin() + static_cast<std::ptrdiff_t>(std::min(forget_order.size(), b + bs)));
            fb = gather(forget, idx);
            if (method == "frul") sb = gather(scrubbed, idx);
            step(epoch, "forget");
            if (uses_retain) {
                rb = gather(retain, retain_cursor.next());
                step(epoch, "retain");
            }
        }
        res.record.epochs_run = epoch;
        if (cfg.unlearn.eval_every > 0 && epoch % cfg.unlearn.eval_every == 0) {
            const double r = answer_rouge(res.params, inputs.forget, vocab, cfg);
            res.record.forget_answer_rouge.emplace_back(epoch, r);
            spdlog::info("{} epoch {}: forget answer ROUGE-L {:.4f}", method, epoch, r);
            if (r <= cfg.unlearn.early_stop_rouge) {
                res.record.early_stop_epoch = epoch;
                break;
            }
        }
    }
    res.record.wall_time_s = seconds_since(t0);
    return res;
}

std::vector<scrub::ScrubbedExample> scrub_split(const config::RunConfig& cfg, const corpus::Corpus& corpus,
                                                const corpus::Split& split,
                                                const std::optional<std::filesystem::path>& cache,
                                                std::vector<std::string>* failures) {
    std::vector<std::shared_ptr<const scrub::Extractor>> extractors;
    for (const auto& name : cfg.scrub.extractors) {
        if (name == "rule-jaccard") {
            extractors.push_back(std::make_shared<scrub::RuleExtractor>(scrub::RuleExtractor::Overlap::Jaccard));
        } else if (name == "rule-containment") {
            extractors.push_back(std::make_shared<scrub::RuleExtractor>(scrub::RuleExtractor::Overlap::Containment));
        } else if (name.rfind("remote", 0) == 0) {
            scrub::RemoteConfig rc;
            rc.id = name;
            rc.endpoint = cfg.scrub.endpoint;
            if (const char* url = std::getenv("FRUL_EXTRACTOR_URL"); url && *url) rc.endpoint = url;
            if (const char* token = std::getenv("FRUL_EXTRACTOR_TOKEN")) rc.token = token;
            if (rc.token.empty()) throw ValidationError("extractor " + name + " needs FRUL_EXTRACTOR_TOKEN");
            rc.timeout_s = cfg.scrub.timeout_s;
            rc.retries = cfg.scrub.retries;
            const auto tmpl = std::filesystem::path(cfg.scrub.templates_dir) / "extraction.txt";
            if (std::filesystem::exists(tmpl)) rc.instructions = read_file(tmpl);
            extractors.push_back(std::make_shared<scrub::RemoteExtractor>(rc));
        } else {
            throw ValidationError("unknown extractor '" + name + "'");
        }
    }
    scrub::ScrubConfig sc;
    sc.weights = cfg.scrub.weights;
    sc.vote_threshold = cfg.scrub.vote_threshold;
    sc.top_k = static_cast<std::size_t>(cfg.scrub.top_k);
    sc.policy = scrub::parse_policy(cfg.scrub.placeholder_policy);
    sc.seed = cfg.seeds.run;
    sc.max_in_flight = static_cast<std::size_t>(cfg.scrub.max_in_flight);
    sc.cache_path = cache;
    auto result = scrub::scrub_corpus(corpus, split, extractors, sc);
    for (const auto& f : result.failures) {
        spdlog::error("scrub failed for {}: {}", f.example_id, f.message);
        if (failures) failures->push_back(f.example_id);
    }
    return std::move(result.examples);
}

// -------------------------------------------------------------------- matrix

std::string MatrixCell::key() const {
    return "f" + eval::format_double(fraction) + "/" + method + "/seed" + std::to_string(seed);
}

std::string matrix_csv(const std::vector<MatrixRow>& rows) {
    std::string out = "fraction,method,seed,split,channel,model_mean,ref_mean,ue\n";
    for (const auto& r : rows)
        out += eval::format_double(r.cell.fraction) + "," + r.cell.method + "," + std::to_string(r.cell.seed) + "," +
               r.ue.split + "," + r.ue.channel + "," + eval::format_double(r.ue.model_mean) + "," +
               eval::format_double(r.ue.ref_mean) + "," + eval::format_double(r.ue.ue) + "\n";
    return out;
}

namespace {

struct Manifest {
    std::string config_hash;
    std::set<std::string> done;

    static Manifest load(const std::filesystem::path& path, const std::string& hash) {
        Manifest m{hash, {}};
        if (!std::filesystem::exists(path)) return m;
        try {
            const json j = json::parse(read_file(path));
            if (j.value("config_hash", std::string()) != hash) {
                spdlog::info("matrix config changed; previous cells will be recomputed");
                return m;
            }
            for (const auto& k : j.at("completed")) m.done.insert(k.get<std::string>());
        } catch (const json::exception&) {
            spdlog::warn("unreadable matrix manifest {}; starting over", path.string());
        }
        return m;
    }
    void save(const std::filesystem::path& path) const {
        json j = {{"version", 1}, {"config_hash", config_hash}, {"completed", json(done)}};
        write_file_atomic(path, j.dump(2) + "\n");
    }
};

// Checkpoint labels carry the config hash, so a stale file is never reused.
Params load_or_train(const std::filesystem::path& ckpt, const tok::Vocabulary& vocab, const std::string& label,
                     const std::function<TrainResult()>& train) {
    if (std::filesystem::exists(ckpt)) {
        auto c = model::load_checkpoint<float>(ckpt);
        if (c.meta.vocab_fingerprint == vocab.fingerprint() && c.meta.label == label) return std::move(c.params);
    }
    auto res = train();
    model::save_checkpoint<float>(res.params, nullptr, checkpoint_meta(vocab, label), ckpt);
    return std::move(res.params);
}

}  // namespace

MatrixResult run_matrix(const config::RunConfig& cfg, const corpus::Corpus& corpus, const tok::Vocabulary& vocab,
                        const std::filesystem::path& out_dir, const MatrixOptions& options) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    const std::string hash = config::config_hash(cfg);
    const fs::path manifest_path = out_dir / "manifest.json";
    auto manifest = Manifest::load(manifest_path, hash);
    manifest.save(manifest_path);

    MatrixResult result;
    std::optional<Params> original;
    auto get_original = [&]() -> const Params& {
        if (!original)
            original = load_or_train(out_dir / "original.ckpt", vocab, "original:" + hash,
                                     [&] { return finetune(cfg, corpus.examples, vocab); });
        return *original;
    };

    for (double fraction : cfg.matrix.fractions) {
        const auto split = corpus::partition(corpus, fraction, cfg.seeds.data);
        const fs::path fdir = out_dir / ("f" + eval::format_double(fraction));
        std::optional<Params> reference;
        std::optional<eval::SplitScores> ref_scores;
        std::optional<std::vector<scrub::ScrubbedExample>> scrubbed;

        for (const auto& method : cfg.matrix.methods) {
            for (auto seed : cfg.matrix.seeds) {
                MatrixCell cell{fraction, method, seed};
                const fs::path cdir = out_dir / cell.key();
                if (manifest.done.count(cell.key()) && fs::exists(cdir / "report.json")) {
                    const auto report = eval::report_from_json(read_file(cdir / "report.json"));
                    for (const auto& c : report.cells) result.rows.push_back({cell, c});
                    ++result.cells_skipped;
                    continue;
                }
                try {
                    if (options.before_cell) options.before_cell(cell);
                    const Params& orig = get_original();
                    if (!reference) {
                        fs::create_directories(fdir);
                        const CorpusStore store(corpus);
                        reference = load_or_train(fdir / "retrained.ckpt", vocab, "retrained:" + hash,
                                                  [&] { return retrain(cfg, store, split, vocab); });
                        ref_scores = eval::score_model(*reference, corpus, split, vocab,
                                                       {cfg.eval.max_new, static_cast<std::size_t>(cfg.eval.batch_size)});
                    }
                    if (method == "frul" && !scrubbed) scrubbed = scrub_split(cfg, corpus, split, fdir / "scrubbed.jsonl");

                    config::RunConfig run_cfg = cfg;
                    run_cfg.unlearn.method = method;
                    run_cfg.seeds.run = seed;
                    UnlearnInputs in{corpus::select(corpus, split.forget_ids), corpus::select(corpus, split.retain_ids),
                                     scrubbed ? *scrubbed : std::vector<scrub::ScrubbedExample>{}};
                    auto res = unlearn(run_cfg, orig, in, vocab);
                    const auto scores = eval::score_model(res.params, corpus, split, vocab,
                                                          {cfg.eval.max_new, static_cast<std::size_t>(cfg.eval.batch_size)});
                    eval::ReportMeta meta{seed, hash, cell.key() + "/unlearned.ckpt", fdir.filename().string() + "/retrained.ckpt",
                                          vocab.fingerprint()};
                    const auto report = eval::build_report(scores, *ref_scores, meta);
                    fs::create_directories(cdir);
                    model::save_checkpoint<float>(res.params, nullptr, checkpoint_meta(vocab, "unlearned:" + cell.key()),
                                                  cdir / "unlearned.ckpt");
                    write_file_atomic(cdir / "history.jsonl", res.record.history_jsonl());
                    eval::emit_report(report, cdir);
                    for (const auto& c : report.cells) result.rows.push_back({cell, c});
                    manifest.done.insert(cell.key());
                    manifest.save(manifest_path);
                    ++result.cells_run;
                } catch (const ValidationError&) {
                    throw;
                } catch (const std::exception& e) {
                    spdlog::error("matrix cell {} failed: {}", cell.key(), e.what());
                    result.failures.emplace_back(cell.key(), e.what());
                }
            }
        }
    }
    write_file_atomic(out_dir / "matrix.csv", matrix_csv(result.rows));
    return result;
}

}  // namespace frul::orch
