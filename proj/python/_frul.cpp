#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "frul/cli.hpp"
#include "frul/common.hpp"
#include "frul/config.hpp"
#include "frul/corpus.hpp"
#include "frul/eval.hpp"
#include "frul/losses.hpp"
#include "frul/scrubber.hpp"
#include "frul/tokenizer.hpp"

namespace py = pybind11;
using namespace frul;

PYBIND11_MODULE(_frul, m) {
    m.doc() = "Selective forgetting for reasoning language models";

    py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
    auto runtime = py::register_exception<RuntimeFailure>(m, "RuntimeFailure", PyExc_RuntimeError);
    py::register_exception<RetryableError>(m, "RetryableError", runtime.ptr());

    py::class_<corpus::Example>(m, "Example")
        .def_readonly("id", &corpus::Example::id)
        .def_readonly("entity_id", &corpus::Example::entity_id)
        .def_readonly("question", &corpus::Example::question)
        .def_readonly("cot", &corpus::Example::cot)
        .def_readonly("answer", &corpus::Example::answer)
        .def("__repr__", [](const corpus::Example& e) { return "<Example " + e.id + ">"; });

    py::class_<corpus::KnowledgeFact>(m, "KnowledgeFact")
        .def_readonly("fact_id", &corpus::KnowledgeFact::fact_id)
        .def_readonly("entity_id", &corpus::KnowledgeFact::entity_id)
        .def_property_readonly("attribute",
                               [](const corpus::KnowledgeFact& f) { return std::string(corpus::attribute_name(f.attribute)); })
        .def_readonly("value", &corpus::KnowledgeFact::value)
        .def_readonly("text", &corpus::KnowledgeFact::text);

    py::class_<corpus::Corpus>(m, "Corpus")
        .def_readonly("examples", &corpus::Corpus::examples)
        .def_readonly("facts", &corpus::Corpus::facts)
        .def("find", &corpus::Corpus::find, py::return_value_policy::reference_internal)
        .def("__len__", [](const corpus::Corpus& c) { return c.examples.size(); });

    py::class_<corpus::Split>(m, "Split")
        .def_readonly("fraction", &corpus::Split::fraction)
        .def_readonly("seed", &corpus::Split::seed)
        .def_readonly("forget_ids", &corpus::Split::forget_ids)
        .def_readonly("retain_ids", &corpus::Split::retain_ids);

    m.def("generate_corpus",
          [](int n_entities, int questions_per_entity, std::uint64_t seed) {
              return corpus::generate_corpus({n_entities, questions_per_entity, seed});
          },
          py::arg("n_entities") = 100, py::arg("questions_per_entity") = 4, py::arg("seed") = 1);
    m.def("partition", &corpus::partition, py::arg("corpus"), py::arg("fraction"), py::arg("seed"));
    m.def("forget_knowledge_base", &corpus::forget_knowledge_base, py::arg("corpus"), py::arg("split"));

    py::class_<tok::Vocabulary>(m, "Vocabulary")
        .def(py::init<std::vector<std::string>>(), py::arg("tokens"))
        .def_static("load", &tok::Vocabulary::load, py::arg("path"))
        .def("__len__", &tok::Vocabulary::size)
        .def("__contains__", &tok::Vocabulary::contains)
        .def("id", &tok::Vocabulary::id)
        .def("token", &tok::Vocabulary::token)
        .def_property_readonly("fingerprint", &tok::Vocabulary::fingerprint)
        .def("encode", [](const tok::Vocabulary& v, std::string_view text) { return tok::encode(text, v); })
        .def("decode", [](const tok::Vocabulary& v, const std::vector<tok::TokenId>& ids) { return tok::decode(ids, v); });
    m.def("build_vocab", &tok::build_vocab, py::arg("corpus"));

    m.def("log1mexp", py::overload_cast<double>(&loss::log1mexp), py::arg("x"), "log(1 - exp(x)) for x < 0");
    m.def("rouge_l",
          [](std::string_view candidate, std::string_view reference, const tok::Vocabulary& vocab) {
              const auto s = eval::rouge_l(candidate, reference, vocab);
              return py::dict(py::arg("precision") = s.precision, py::arg("recall") = s.recall, py::arg("f1") = s.f1);
          },
          py::arg("candidate"), py::arg("reference"), py::arg("vocab"));

    py::class_<scrub::Span>(m, "Span")
        .def_readonly("start", &scrub::Span::start)
        .def_readonly("end", &scrub::Span::end)
        .def_readonly("text", &scrub::Span::text)
        .def_readonly("confidence", &scrub::Span::confidence)
        .def_readonly("source", &scrub::Span::source);
    py::class_<scrub::ScrubbedExample>(m, "ScrubbedExample")
        .def_readonly("example_id", &scrub::ScrubbedExample::example_id)
        .def_readonly("spans", &scrub::ScrubbedExample::spans)
        .def_readonly("cot_modified", &scrub::ScrubbedExample::cot_modified);
    m.def("scrub",
          [](const corpus::Corpus& c, const corpus::Split& split) {
              const auto res = scrub::scrub_corpus(c, split, scrub::default_extractors(), {});
              if (!res.failures.empty())
                  throw RuntimeFailure("scrubbing failed for " + res.failures.front().example_id);
              return res.examples;
          },
          py::arg("corpus"), py::arg("split"), "Scrubs the forget split with the offline rule extractors.",
          py::call_guard<py::gil_scoped_release>());

    m.def("config_hash",
          [](std::optional<std::filesystem::path> path, const std::vector<std::string>& overrides) {
              return config::config_hash(config::load_config(path, overrides));
          },
          py::arg("path") = py::none(), py::arg("overrides") = std::vector<std::string>{});
    m.def("canonical_config",
          [](std::optional<std::filesystem::path> path, const std::vector<std::string>& overrides) {
              return config::canonical(config::load_config(path, overrides));
          },
          py::arg("path") = py::none(), py::arg("overrides") = std::vector<std::string>{});

    m.def("read_report",
          [](const std::filesystem::path& path) {
              const auto report = eval::report_from_json(read_file(path));
              py::dict cells;
              for (const auto& c : report.cells)
                  cells[py::make_tuple(c.split, c.channel)] =
                      py::dict(py::arg("model") = c.model_mean, py::arg("reference") = c.ref_mean, py::arg("ue") = c.ue);
              return cells;
          },
          py::arg("path"), "UE cells of a report.json keyed by (split, channel).");

    m.def("run_cli",
          [](const std::vector<std::string>& args) {
              std::ostringstream out, err;
              int code;
              {
                  py::gil_scoped_release release;
                  code = cli::run(args, out, err);
              }
              return py::make_tuple(code, out.str(), err.str());
          },
          py::arg("args"), "Runs one frul subcommand; returns (exit_code, stdout, stderr).");
}
