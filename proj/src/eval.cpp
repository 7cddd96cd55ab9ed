#include "frul/eval.hpp"

#include <charconv>
#include <cmath>
#include <map>
#include <unordered_map>

#include <nlohmann/json.hpp>

#include "frul/common.hpp"

namespace frul::eval {

using nlohmann::json;

std::size_t lcs_length(std::span<const tok::TokenId> a, std::span<const tok::TokenId> b) {
    if (a.empty() || b.empty()) return 0;
    std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        for (std::size_t j = 1; j <= b.size(); ++j)
            cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

RougeScore rouge_l_ids(std::span<const tok::TokenId> candidate, std::span<const tok::TokenId> reference) {
    RougeScore s;
    if (candidate.empty() || reference.empty()) return s;
    const double lcs = static_cast<double>(lcs_length(candidate, reference));
    s.precision = lcs / static_cast<double>(candidate.size());
    s.recall = lcs / static_cast<double>(reference.size());
    s.f1 = s.precision + s.recall > 0 ? 2 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
    return s;
}

RougeScore rouge_l(std::string_view candidate, std::string_view reference, const tok::Vocabulary& vocab) {
    std::unordered_map<std::string, tok::TokenId> oov;
    auto ids = [&](std::string_view text) {
        std::vector<tok::TokenId> out;
        for (const auto& p : tok::split_words(text)) {
            if (auto id = vocab.find(p.text)) {
                out.push_back(*id);
            } else {
                auto [it, _] = oov.emplace(p.text, static_cast<tok::TokenId>(vocab.size() + oov.size()));
                out.push_back(it->second);
            }
        }
        return out;
    };
    const auto c = ids(candidate);
    const auto r = ids(reference);
    return rouge_l_ids(c, r);
}

Generation parse_generation(std::span<const tok::TokenId> continuation, const tok::Vocabulary& vocab) {
    Generation g;
    std::size_t end = continuation.size();
    for (std::size_t i = 0; i < continuation.size(); ++i) {
        if (continuation[i] == tok::kEos) {
            end = i;
            break;
        }
    }
    const auto body = continuation.first(end);
    std::size_t close = body.size();
    for (std::size_t i = 0; i < body.size(); ++i) {
        if (body[i] == tok::kThinkClose) {
            close = i;
            break;
        }
    }
    if (close == body.size()) {
        g.reasoning = tok::decode(body, vocab);
        return g;
    }
    g.closed = true;
    g.reasoning = tok::decode(body.first(close), vocab);
    auto rest = body.subspan(close + 1);
    if (!rest.empty() && rest.front() == tok::kAnswerSep) rest = rest.subspan(1);
    g.answer = tok::decode(rest, vocab);
    return g;
}

template <class S>
std::vector<Generation> generate_outputs(const model::Parameters<S>& params, const tok::Vocabulary& vocab,
                                         std::span<const std::string> questions, int max_new,
                                         std::size_t batch_size) {
    if (batch_size == 0) batch_size = 1;
    std::vector<Generation> out;
    out.reserve(questions.size());
    for (std::size_t b = 0; b < questions.size(); b += batch_size) {
        std::vector<std::vector<tok::TokenId>> prompts;
        for (std::size_t i = b; i < std::min(questions.size(), b + batch_size); ++i)
            prompts.push_back(tok::render_prompt(questions[i], vocab));
        for (const auto& cont : model::greedy_decode_batch(params, prompts, max_new, tok::kEos))
            out.push_back(parse_generation(cont, vocab));
    }
    return out;
}

std::vector<ExampleScore> score_outputs(std::span<const corpus::Example> examples,
                                        std::span<const Generation> outputs, const tok::Vocabulary& vocab) {
    if (examples.size() != outputs.size())
        throw ValidationError("score_outputs: " + std::to_string(examples.size()) + " examples but " +
                              std::to_string(outputs.size()) + " generations");
    std::vector<ExampleScore> out;
    out.reserve(examples.size());
    for (std::size_t i = 0; i < examples.size(); ++i) {
        out.push_back({examples[i].id, rouge_l(outputs[i].reasoning, examples[i].cot, vocab).f1,
                       rouge_l(outputs[i].answer, examples[i].answer, vocab).f1});
    }
    return out;
}

double mean_f1(std::span<const double> scores) {
    if (scores.empty()) return 0.0;
    double s = 0.0;
    for (double x : scores) s += x;
    return s / static_cast<double>(scores.size());
}

namespace {

double channel_mean(std::span<const ExampleScore> scores, bool reasoning) {
    std::vector<double> v;
    v.reserve(scores.size());
    for (const auto& s : scores) v.push_back(reasoning ? s.reasoning : s.answer);
    return mean_f1(v);
}

}  // namespace

double unlearning_error(std::span<const ExampleScore> model, std::span<const ExampleScore> reference,
                        bool reasoning_channel) {
    if (model.size() != reference.size())
        throw ValidationError("unlearning_error: score lists differ in length");
    std::map<std::string_view, int> ids;
    for (const auto& s : model) ++ids[s.example_id];
    for (const auto& s : reference) {
        auto it = ids.find(s.example_id);
        if (it == ids.end() || it->second == 0)
            throw ValidationError("unlearning_error: id '" + s.example_id + "' missing from the model scores");
        --it->second;
    }
    return std::abs(channel_mean(model, reasoning_channel) - channel_mean(reference, reasoning_channel));
}

const Cell& EvalReport::cell(std::string_view split, std::string_view channel) const {
    for (const auto& c : cells)
        if (c.split == split && c.channel == channel) return c;
    throw ValidationError("report has no cell " + std::string(split) + "/" + std::string(channel));
}

template <class S>
SplitScores score_model(const model::Parameters<S>& params, const corpus::Corpus& corpus,
                        const corpus::Split& split, const tok::Vocabulary& vocab, const EvalConfig& config) {
    SplitScores out;
    for (int which = 0; which < 2; ++which) {
        const auto examples = corpus::select(corpus, which == 0 ? split.forget_ids : split.retain_ids);
        std::vector<std::string> questions;
        for (const auto& e : examples) questions.push_back(e.question);
        const auto gens = generate_outputs(params, vocab, questions, config.max_new, config.batch_size);
        (which == 0 ? out.forget : out.retain) = score_outputs(examples, gens, vocab);
    }
    return out;
}

EvalReport build_report(const SplitScores& model, const SplitScores& reference, ReportMeta meta) {
    EvalReport r;
    r.meta = std::move(meta);
    for (int s = 0; s < 2; ++s) {
        const auto& m = s == 0 ? model.forget : model.retain;
        const auto& ref = s == 0 ? reference.forget : reference.retain;
        for (int c = 0; c < 2; ++c) {
            const bool reasoning = c == 0;
            Cell cell{std::string(kSplits[s]), std::string(kChannels[c]), channel_mean(m, reasoning),
                      channel_mean(ref, reasoning), unlearning_error(m, ref, reasoning)};
            r.cells.push_back(std::move(cell));
        }
    }
    for (int c = 0; c < 2; ++c) {
        for (int s = 0; s < 2; ++s) {
            const auto& m = s == 0 ? model.forget : model.retain;
            const auto& ref = s == 0 ? reference.forget : reference.retain;
            std::map<std::string_view, double> ref_by_id;
            for (const auto& x : ref) ref_by_id[x.example_id] = c == 0 ? x.reasoning : x.answer;
            for (const auto& x : m)
                r.per_example.push_back({x.example_id, std::string(kSplits[s]), std::string(kChannels[c]),
                                         c == 0 ? x.reasoning : x.answer, ref_by_id.at(x.example_id)});
        }
    }
    return r;
}

template <class S>
EvalReport evaluate_pair(const model::Parameters<S>& model, const model::Parameters<S>& reference,
                         const corpus::Corpus& corpus, const corpus::Split& split, const tok::Vocabulary& vocab,
                         const EvalConfig& config, ReportMeta meta) {
    if (model.config.vocab_size != reference.config.vocab_size ||
        model.config.vocab_size != static_cast<int>(vocab.size()))
        throw ValidationError("evaluate_pair: model, reference and vocabulary sizes differ");
    const auto ms = score_model(model, corpus, split, vocab, config);
    const auto rs = score_model(reference, corpus, split, vocab, config);
    if (meta.vocab_fingerprint.empty()) meta.vocab_fingerprint = vocab.fingerprint();
    return build_report(ms, rs, std::move(meta));
}

// -------------------------------------------------------------------- output

std::string format_double(double v) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
    if (ec != std::errc()) throw RuntimeFailure("cannot format number");
    return std::string(buf, end);
}

std::string report_to_json(const EvalReport& report) {
    json cells = json::object();
    for (const auto& c : report.cells)
        cells[c.split][c.channel] = {{"model_mean", c.model_mean}, {"ref_mean", c.ref_mean}, {"ue", c.ue}};
    json rows = json::array();
    for (const auto& r : report.per_example)
        rows.push_back({{"example_id", r.example_id}, {"split", r.split}, {"channel", r.channel},
                        {"model_f1", r.model_f1}, {"ref_f1", r.ref_f1}});
    json meta = {{"seed", report.meta.seed},
                 {"config_hash", report.meta.config_hash},
                 {"model_checkpoint", report.meta.model_checkpoint},
                 {"reference_checkpoint", report.meta.reference_checkpoint},
                 {"vocab_fingerprint", report.meta.vocab_fingerprint}};
    json j = {{"version", 1}, {"cells", cells}, {"meta", meta}, {"per_example", rows}};
    return j.dump(2) + "\n";
}

EvalReport report_from_json(std::string_view text) {
    EvalReport r;
    try {
        const json j = json::parse(text);
        if (j.at("version").get<int>() != 1) throw ValidationError("unsupported report version");
        for (auto split : kSplits) {
            for (auto channel : kChannels) {
                const auto& c = j.at("cells").at(std::string(split)).at(std::string(channel));
                r.cells.push_back({std::string(split), std::string(channel), c.at("model_mean").get<double>(),
                                   c.at("ref_mean").get<double>(), c.at("ue").get<double>()});
            }
        }
        const auto& m = j.at("meta");
        r.meta = {m.at("seed").get<std::uint64_t>(), m.at("config_hash").get<std::string>(),
                  m.at("model_checkpoint").get<std::string>(), m.at("reference_checkpoint").get<std::string>(),
                  m.at("vocab_fingerprint").get<std::string>()};
        for (const auto& row : j.at("per_example"))
            r.per_example.push_back({row.at("example_id").get<std::string>(), row.at("split").get<std::string>(),
                                     row.at("channel").get<std::string>(), row.at("model_f1").get<double>(),
                                     row.at("ref_f1").get<double>()});
    } catch (const json::exception& e) {
        throw ValidationError(std::string("malformed report: ") + e.what());
    }
    return r;
}

std::string summary_csv(const EvalReport& report) {
    std::string out = "split,channel,model_mean,ref_mean,ue\n";
    for (const auto& c : report.cells)
        out += c.split + "," + c.channel + "," + format_double(c.model_mean) + "," + format_double(c.ref_mean) + "," +
               format_double(c.ue) + "\n";
    return out;
}

std::string per_example_csv(const EvalReport& report) {
    std::string out = "example_id,split,channel,model_f1,ref_f1\n";
    for (const auto& r : report.per_example)
        out += r.example_id + "," + r.split + "," + r.channel + "," + format_double(r.model_f1) + "," +
               format_double(r.ref_f1) + "\n";
    return out;
}

void emit_report(const EvalReport& report, const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw RuntimeFailure("cannot create report directory " + dir.string() + ": " + ec.message());
    write_file_atomic(dir / "report.json", report_to_json(report));
    write_file_atomic(dir / "summary.csv", summary_csv(report));
    write_file_atomic(dir / "per_example.csv", per_example_csv(report));
}

#define FRUL_INSTANTIATE_EVAL(S)                                                                                     \
    template std::vector<Generation> generate_outputs<S>(const model::Parameters<S>&, const tok::Vocabulary&,        \
                                                         std::span<const std::string>, int, std::size_t);           \
    template SplitScores score_model<S>(const model::Parameters<S>&, const corpus::Corpus&, const corpus::Split&,    \
                                        const tok::Vocabulary&, const EvalConfig&);                                 \
    template EvalReport evaluate_pair<S>(const model::Parameters<S>&, const model::Parameters<S>&,                   \
                                         const corpus::Corpus&, const corpus::Split&, const tok::Vocabulary&,        \
                                         const EvalConfig&, ReportMeta);

FRUL_INSTANTIATE_EVAL(float)
FRUL_INSTANTIATE_EVAL(double)

}  // namespace frul::eval
