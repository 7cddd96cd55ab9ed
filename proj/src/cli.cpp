#include "frul/cli.hpp"

#include <fcntl.h>
#include <signal.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstdio>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "frul/common.hpp"
#include "frul/config.hpp"
#include "frul/corpus.hpp"
#include "frul/orchestrator.hpp"
#include "frul/scrubber.hpp"

namespace frul::cli {

namespace fs = std::filesystem;
using nlohmann::json;

// ------------------------------------------------------------------ summary

namespace {

std::string fixed4(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return buf;
}

std::string pad(std::string s, std::size_t w) {
    if (s.size() < w) s.append(w - s.size(), ' ');
    return s;
}

std::string lpad(std::string s, std::size_t w) {
    if (s.size() < w) s.insert(0, w - s.size(), ' ');
    return s;
}

}  // namespace

std::string summary_table(const eval::EvalReport& report) {
    std::string out = pad("split", 8) + pad("channel", 11) + lpad("model_mean", 11) + lpad("ref_mean", 11) +
                      lpad("ue", 11) + "\n";
    for (const auto& c : report.cells)
        out += pad(c.split, 8) + pad(c.channel, 11) + lpad(fixed4(c.model_mean), 11) + lpad(fixed4(c.ref_mean), 11) +
               lpad(fixed4(c.ue), 11) + "\n";
    return out;
}

std::string ue_svg(const eval::EvalReport& report) {
    const double base = 40.0 + kSvgScale;
    const double width = 40.0 + 100.0 * static_cast<double>(report.cells.size());
    std::string out = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + eval::format_double(width) +
                      "\" height=\"" + eval::format_double(base + 40.0) + "\">\n";
    out += "<line x1=\"30\" y1=\"" + eval::format_double(base) + "\" x2=\"" + eval::format_double(width) + "\" y2=\"" +
           eval::format_double(base) + "\" stroke=\"black\"/>\n";
    for (std::size_t i = 0; i < report.cells.size(); ++i) {
        const auto& c = report.cells[i];
        const double h = c.ue * kSvgScale;
        const double x = 40.0 + 100.0 * static_cast<double>(i);
        out += "<rect data-cell=\"" + c.split + "/" + c.channel + "\" data-ue=\"" + eval::format_double(c.ue) +
               "\" x=\"" + eval::format_double(x) + "\" y=\"" + eval::format_double(base - h) + "\" width=\"60\" height=\"" +
               eval::format_double(h) + "\" fill=\"" + (c.split == "forget" ? "#b5473a" : "#3a6fb5") + "\"/>\n";
        out += "<text x=\"" + eval::format_double(x + 30.0) + "\" y=\"" + eval::format_double(base + 16.0) +
               "\" font-size=\"11\" text-anchor=\"middle\">" + c.split + "/" + c.channel + "</text>\n";
        out += "<text x=\"" + eval::format_double(x + 30.0) + "\" y=\"" + eval::format_double(base - h - 4.0) +
               "\" font-size=\"11\" text-anchor=\"middle\">" + fixed4(c.ue) + "</text>\n";
    }
    out += "</svg>\n";
    return out;
}

void summarize(const fs::path& report_dir, std::ostream& out, bool write_svg) {
    const auto path = report_dir / "report.json";
    if (!fs::exists(path)) throw ValidationError("no report at " + path.string());
    const auto report = eval::report_from_json(read_file(path));
    if (report.cells.size() != 4) throw ValidationError("report " + path.string() + " does not have 4 cells");
    out << summary_table(report);
    if (write_svg) write_file_atomic(report_dir / "ue.svg", ue_svg(report));
}

// --------------------------------------------------------------------- lock

DirLock::DirLock(const fs::path& dir) : path_(dir / ".frul.lock") {
    fs::create_directories(dir);
    for (int attempt = 0; attempt < 2; ++attempt) {
        const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd >= 0) {
            const std::string pid = std::to_string(::getpid()) + "\n";
            if (::write(fd, pid.data(), pid.size()) < 0) {
                ::close(fd);
                throw RuntimeFailure("cannot write lock file " + path_.string());
            }
            ::close(fd);
            return;
        }
        if (errno != EEXIST) throw RuntimeFailure("cannot create lock file " + path_.string());
        long holder = 0;
        try {
            holder = std::stol(read_file(path_));
        } catch (const std::exception&) {
            holder = 0;
        }
        if (holder > 0 && (::kill(static_cast<pid_t>(holder), 0) == 0 || errno != ESRCH))
            throw RuntimeFailure("output directory " + dir.string() + " is locked by process " +
                                 std::to_string(holder) + " (" + path_.string() + ")");
        fs::remove(path_);  // stale
    }
    throw RuntimeFailure("cannot acquire lock " + path_.string());
}

DirLock::~DirLock() {
    std::error_code ec;
    fs::remove(path_, ec);
}

// ----------------------------------------------------------------- commands

namespace {

struct Options {
    std::optional<std::string> config;
    std::vector<std::string> sets;
    std::optional<std::uint64_t> seed;
    std::string out = ".";
    bool quiet = false;
    bool verbose = false;
    std::string model_ckpt;
    std::string reference_ckpt;
    std::string report_dir;
};

struct Context {
    config::RunConfig cfg;
    fs::path out;
    std::ostream& os;
    bool quiet;

    fs::path resolve(const std::string& p) const {
        fs::path q(p);
        return q.is_absolute() ? q : out / q;
    }
    fs::path checkpoint(const std::string& name) const { return resolve(cfg.paths.checkpoints) / (name + ".ckpt"); }
};

struct Data {
    corpus::Corpus corpus;
    corpus::Split split;
    tok::Vocabulary vocab;
};

Data load_data(const Context& ctx) {
    Data d;
    d.corpus = corpus::read_corpus(ctx.resolve(ctx.cfg.paths.corpus), ctx.resolve(ctx.cfg.paths.facts));
    d.split = corpus::read_split(ctx.resolve(ctx.cfg.paths.split));
    corpus::validate_split(d.corpus, d.split);
    const auto vpath = ctx.resolve(ctx.cfg.paths.vocab);
    d.vocab = fs::exists(vpath) ? tok::Vocabulary::load(vpath) : tok::build_vocab(d.corpus);
    return d;
}

std::string relative_name(const Context& ctx, const fs::path& p) {
    std::error_code ec;
    auto rel = fs::relative(p, ctx.out, ec);
    return ec || rel.empty() ? p.string() : rel.generic_string();
}

void write_manifest(const Context& ctx, const std::string& subcommand, const std::vector<fs::path>& inputs,
                    const std::vector<fs::path>& outputs) {
    auto hashes = [&](const std::vector<fs::path>& paths) {
        json j = json::object();
        for (const auto& p : paths)
            if (fs::is_regular_file(p)) j[relative_name(ctx, p)] = git_blob_hash(read_file(p));
        return j;
    };
    json m = {{"version", 1},
              {"subcommand", subcommand},
              {"config_hash", config::config_hash(ctx.cfg)},
              {"config", config::canonical(ctx.cfg)},
              {"inputs", hashes(inputs)},
              {"outputs", hashes(outputs)}};
    write_file_atomic(ctx.out / ("manifest." + subcommand + ".json"), m.dump(2) + "\n");
}

fs::path data_path(const Context& ctx, const std::string& p) { return ctx.resolve(p); }

std::vector<fs::path> data_inputs(const Context& ctx) {
    return {data_path(ctx, ctx.cfg.paths.corpus), data_path(ctx, ctx.cfg.paths.facts),
            data_path(ctx, ctx.cfg.paths.split), data_path(ctx, ctx.cfg.paths.vocab)};
}

void save_run(const Context& ctx, const orch::TrainResult& res, const tok::Vocabulary& vocab,
              const std::string& name) {
    const auto ckpt = ctx.checkpoint(name);
    fs::create_directories(ckpt.parent_path());
    model::save_checkpoint<float>(res.params, nullptr, orch::checkpoint_meta(vocab, name), ckpt);
    auto hist = ckpt;
    hist.replace_extension(".history.jsonl");
    write_file_atomic(hist, res.record.history_jsonl());
}

int cmd_gen_data(const Context& ctx) {
    const auto& c = ctx.cfg;
    const auto corpus = corpus::generate_corpus({c.data.n_entities, c.data.questions_per_entity, c.seeds.data});
    const auto split = corpus::partition(corpus, c.data.forget_fraction, c.seeds.data);
    const auto vocab = tok::build_vocab(corpus);
    const auto outs = data_inputs(ctx);
    for (const auto& p : outs) fs::create_directories(p.parent_path());
    corpus::write_corpus(corpus, outs[0], outs[1]);
    corpus::write_split(split, outs[2]);
    vocab.save(outs[3]);
    write_manifest(ctx, "gen-data", {}, outs);
    if (!ctx.quiet)
        ctx.os << "wrote " << corpus.examples.size() << " examples, " << corpus.facts.size() << " facts; |D_f| = "
               << split.forget_ids.size() << ", |V| = " << vocab.size() << "\n";
    return kExitOk;
}

int cmd_build_kb(const Context& ctx) {
    const auto d = load_data(ctx);
    const auto kb = corpus::forget_knowledge_base(d.corpus, d.split);
    const auto path = ctx.resolve(ctx.cfg.paths.kb);
    fs::create_directories(path.parent_path());
    corpus::write_facts(kb, path);
    write_manifest(ctx, "build-kb", data_inputs(ctx), {path});
    if (!ctx.quiet) ctx.os << "knowledge base: " << kb.size() << " facts -> " << path.string() << "\n";
    return kExitOk;
}

int cmd_scrub(const Context& ctx) {
    const auto d = load_data(ctx);
    const auto cache = ctx.resolve(ctx.cfg.paths.scrub_cache);
    fs::create_directories(cache.parent_path());
    std::vector<std::string> failures;
    const auto scrubbed = orch::scrub_split(ctx.cfg, d.corpus, d.split, cache, &failures);
    write_manifest(ctx, "scrub", data_inputs(ctx), {cache});
    if (!ctx.quiet) ctx.os << "scrubbed " << scrubbed.size() << " forget examples -> " << cache.string() << "\n";
    if (!failures.empty()) {
        ctx.os << failures.size() << " examples failed:";
        for (const auto& f : failures) ctx.os << " " << f;
        ctx.os << "\n";
        return kExitRuntime;
    }
    return kExitOk;
}

int cmd_train(const Context& ctx) {
    const auto d = load_data(ctx);
    const auto res = orch::finetune(ctx.cfg, d.corpus.examples, d.vocab);
    save_run(ctx, res, d.vocab, "original");
    write_manifest(ctx, "train", data_inputs(ctx), {ctx.checkpoint("original")});
    if (!ctx.quiet && !res.record.history.empty())
        ctx.os << "trained " << res.record.epochs_run << " epochs; final batch loss "
               << fixed4(res.record.history.back().loss) << "\n";
    return kExitOk;
}

int cmd_retrain(const Context& ctx) {
    const auto d = load_data(ctx);
    const orch::CorpusStore store(d.corpus);
    const auto res = orch::retrain(ctx.cfg, store, d.split, d.vocab);
    save_run(ctx, res, d.vocab, "retrained");
    write_manifest(ctx, "retrain", data_inputs(ctx), {ctx.checkpoint("retrained")});
    if (!ctx.quiet) ctx.os << "retrained on " << d.split.retain_ids.size() << " retain examples\n";
    return kExitOk;
}

model::Parameters<float> load_params(const fs::path& path, const tok::Vocabulary& vocab) {
    auto c = model::load_checkpoint<float>(path);
    if (c.meta.vocab_fingerprint != vocab.fingerprint())
        throw ValidationError("checkpoint " + path.string() + " was trained with a different vocabulary");
    return std::move(c.params);
}

int cmd_unlearn(const Context& ctx) {
    const auto d = load_data(ctx);
    const auto original_path = ctx.checkpoint("original");
    const auto original = load_params(original_path, d.vocab);
    orch::UnlearnInputs in{corpus::select(d.corpus, d.split.forget_ids), corpus::select(d.corpus, d.split.retain_ids),
                           {}};
    std::vector<fs::path> inputs = data_inputs(ctx);
    inputs.push_back(original_path);
    if (ctx.cfg.unlearn.method == "frul") {
        const auto cache = ctx.resolve(ctx.cfg.paths.scrub_cache);
        if (!fs::exists(cache)) throw ValidationError("frul needs a scrub cache; run `frul scrub` first (" + cache.string() + ")");
        in.scrubbed = scrub::read_scrubbed(cache);
        inputs.push_back(cache);
    }
    const auto res = orch::unlearn(ctx.cfg, original, in, d.vocab);
    const std::string name = "unlearned-" + ctx.cfg.unlearn.method;
    save_run(ctx, res, d.vocab, name);
    write_manifest(ctx, "unlearn", inputs, {ctx.checkpoint(name)});
    if (!ctx.quiet) {
        ctx.os << ctx.cfg.unlearn.method << ": " << res.record.history.size() << " steps over " << res.record.epochs_run
               << " epochs";
        if (res.record.early_stop_epoch) ctx.os << " (early stop at epoch " << *res.record.early_stop_epoch << ")";
        ctx.os << "\n";
    }
    return kExitOk;
}

int cmd_eval(const Context& ctx, const Options& o) {
    const auto d = load_data(ctx);
    const fs::path model_path =
        o.model_ckpt.empty() ? ctx.checkpoint("unlearned-" + ctx.cfg.unlearn.method) : fs::path(o.model_ckpt);
    const fs::path ref_path = o.reference_ckpt.empty() ? ctx.checkpoint("retrained") : fs::path(o.reference_ckpt);
    const auto m = load_params(model_path, d.vocab);
    const auto r = load_params(ref_path, d.vocab);
    eval::ReportMeta meta{ctx.cfg.seeds.run, config::config_hash(ctx.cfg), relative_name(ctx, model_path),
                          relative_name(ctx, ref_path), d.vocab.fingerprint()};
    const auto report = eval::evaluate_pair(m, r, d.corpus, d.split, d.vocab,
                                            {ctx.cfg.eval.max_new, static_cast<std::size_t>(ctx.cfg.eval.batch_size)},
                                            meta);
    const fs::path dir = o.report_dir.empty() ? ctx.resolve(ctx.cfg.paths.reports) / model_path.stem()
                                              : fs::path(o.report_dir);
    eval::emit_report(report, dir);
    auto inputs = data_inputs(ctx);
    inputs.push_back(model_path);
    inputs.push_back(ref_path);
    write_manifest(ctx, "eval", inputs, {dir / "report.json", dir / "summary.csv", dir / "per_example.csv"});
    if (!ctx.quiet) ctx.os << summary_table(report);
    return kExitOk;
}

int cmd_matrix(const Context& ctx) {
    const auto d = load_data(ctx);
    const auto dir = ctx.out / "matrix";
    const auto res = orch::run_matrix(ctx.cfg, d.corpus, d.vocab, dir);
    write_manifest(ctx, "matrix", data_inputs(ctx), {dir / "matrix.csv", dir / "manifest.json"});
    if (!ctx.quiet)
        ctx.os << "matrix: " << res.cells_run << " cells run, " << res.cells_skipped << " reused, "
               << res.failures.size() << " failed -> " << (dir / "matrix.csv").string() << "\n";
    for (const auto& [key, msg] : res.failures) ctx.os << "  failed " << key << ": " << msg << "\n";
    return res.failures.empty() ? kExitOk : kExitRuntime;
}

int cmd_report(const Context& ctx, const Options& o) {
    const fs::path dir = o.report_dir.empty()
                             ? ctx.resolve(ctx.cfg.paths.reports) / ("unlearned-" + ctx.cfg.unlearn.method)
                             : fs::path(o.report_dir);
    summarize(dir, ctx.os);
    return kExitOk;
}

void configure_logging(bool quiet, bool verbose) {
    static const auto logger = [] {
        auto l = spdlog::stderr_color_mt("frul");
        l->set_pattern("[%l] %v");
        spdlog::set_default_logger(l);
        return l;
    }();
    logger->set_level(quiet ? spdlog::level::warn : verbose ? spdlog::level::debug : spdlog::level::info);
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Selective forgetting for reasoning language models", "frul"};
    app.require_subcommand(1, 1);
    app.fallthrough();
    Options o;
    app.add_option("--config", o.config, "TOML run configuration")->check(CLI::ExistingFile);
    app.add_option("--set", o.sets, "Override a config key (dotted.key=value); repeatable");
    app.add_option("--seed", o.seed, "Run seed (sets seeds.run)");
    app.add_option("--out", o.out, "Output directory; relative config paths resolve here");
    auto* quiet = app.add_flag("-q,--quiet", o.quiet, "Only warnings and errors");
    app.add_flag("-v,--verbose", o.verbose, "Debug logging")->excludes(quiet);

    const std::vector<std::pair<std::string, std::string>> commands = {
        {"gen-data", "Generate the synthetic corpus, split and vocabulary"},
        {"build-kb", "Write the forget-set knowledge base"},
        {"scrub", "Extract forget spans and write placeholder rewrites"},
        {"train", "Fine-tune M_original on the full corpus"},
        {"retrain", "Train the reference M_r on the retain split only"},
        {"unlearn", "Unlearn the forget split from M_original"},
        {"eval", "Score a model against M_r and write a report"},
        {"matrix", "Run the fraction x method x seed experiment grid"},
        {"report", "Print a report table and write its UE chart"},
    };
    std::map<std::string, CLI::App*> subs;
    for (const auto& [name, help] : commands) subs[name] = app.add_subcommand(name, help);
    subs["eval"]->add_option("--model", o.model_ckpt, "Checkpoint to evaluate");
    subs["eval"]->add_option("--reference", o.reference_ckpt, "Reference checkpoint (M_r)");
    subs["eval"]->add_option("--report-dir", o.report_dir, "Report output directory");
    subs["report"]->add_option("--report-dir", o.report_dir, "Report directory to summarize");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n\n" << app.help();
        return kExitValidation;
    }

    try {
        configure_logging(o.quiet, o.verbose);
        std::vector<std::string> overrides = o.sets;
        if (o.seed) overrides.push_back("seeds.run=" + std::to_string(*o.seed));
        std::optional<fs::path> cfg_path;
        if (o.config) cfg_path = fs::path(*o.config);
        Context ctx{config::load_config(cfg_path, overrides), fs::path(o.out), out, o.quiet};
        const DirLock lock(ctx.out);
        std::string name;
        for (const auto& [n, sub] : subs)
            if (sub->parsed()) name = n;
        if (name == "gen-data") return cmd_gen_data(ctx);
        if (name == "build-kb") return cmd_build_kb(ctx);
        if (name == "scrub") return cmd_scrub(ctx);
        if (name == "train") return cmd_train(ctx);
        if (name == "retrain") return cmd_retrain(ctx);
        if (name == "unlearn") return cmd_unlearn(ctx);
        if (name == "eval") return cmd_eval(ctx, o);
        if (name == "matrix") return cmd_matrix(ctx);
        if (name == "report") return cmd_report(ctx, o);
        err << "error: no subcommand\n" << app.help();
        return kExitValidation;
    } catch (const ValidationError& e) {
        err << "error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const RuntimeFailure& e) {
        err << "error: " << e.what() << "\n";
        return kExitRuntime;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
}

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return run(args, std::cout, std::cerr);
}

}  // namespace frul::cli
