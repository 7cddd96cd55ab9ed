#include "frul/corpus.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <set>
#include <unordered_map>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "frul/common.hpp"
#include "frul/rng.hpp"

namespace frul::corpus {

using nlohmann::json;

namespace {

constexpr std::array<std::string_view, kAttributeCount> kAttributeNames = {
    "name", "birth_year", "city", "profession", "award", "mentor", "hobby"};

// Generator vocabulary. No value may coincide with a template word, and no
// value contains a period, so sentence splitting and value matching stay exact.
constexpr std::array<std::string_view, 50> kFirstNames = {
    "alice",  "bruno",  "camila", "dorian", "elise",  "farid",  "greta",  "hugo",   "ines",
    "jonas",  "kaori",  "lucian", "mireya", "nikolai", "odette", "pavel",  "quinn",  "rosalind",
    "soren",  "tamsin", "ulrich", "vesna",  "wilhelm", "ximena", "yusuf",  "zelda",  "anselm",
    "beatrix", "cosmo", "delphine", "emeric", "fiora", "gideon", "hester", "ivo",    "juno",
    "kasimir", "leona", "magnus", "nerys",  "orrin",  "petra",  "radek",  "selma",  "tobiah",
    "una",    "viggo",  "wren",   "yara",   "zoltan"};

constexpr std::array<std::string_view, 50> kLastNames = {
    "voss",     "arkwright", "belmonte", "castellan", "draxler", "eberhart", "falkner",
    "grimsby",  "halloran",  "ivanova",  "jablonski", "kestrel", "lindqvist", "marchetti",
    "norwood",  "okonkwo",   "pellegrin", "quillon",  "ravensky", "stroud",   "thornbury",
    "umberton", "valdane",   "whitlock", "yarrow",    "zabini",   "ashdown",  "brennick",
    "corvallis", "dunmore",  "ellery",   "fairweather", "garamond", "holloway", "isenberg",
    "juniper",  "kingsolver", "lockhart", "montague", "nightingale", "oakhurst", "prewitt",
    "quimby",   "rutherford", "sallow",  "tremaine", "underhill", "vantongeren", "wexley",
    "zimmerli"};

constexpr std::array<std::string_view, 20> kMentorNames = {
    "edda morland",   "cyrus penhallow", "magda ostrich",  "lorne atwater",  "sable quennell",
    "tiberius vane",  "hollis drummond", "ottilie brand",  "percival knox",  "renata solberg",
    "ambrose kettle", "clio hartigan",   "dmitri solace",  "fenna rook",     "gaspard lumen",
    "hilda crane",    "isidore march",   "jessamy thorn",  "kazimir fell",   "linnea grove"};

constexpr std::array<std::string_view, 30> kCities = {
    "lisbon",  "kyoto",    "tallinn",  "oaxaca",   "bergen",    "tbilisi",  "valparaiso", "quebec",
    "krakow",  "zanzibar", "hobart",   "lucerne",  "marrakesh", "galway",   "windhoek",   "cusco",
    "trieste", "reykjavik", "porto",   "salzburg", "antwerp",   "adelaide", "kotor",      "ghent",
    "bruges",  "nantes",   "dundee",   "tromso",   "split",     "bilbao"};

constexpr std::array<std::string_view, 20> kProfessions = {
    "painter",   "chemist",  "cartographer", "violinist", "architect", "botanist",   "sculptor",
    "astronomer", "engraver", "glassblower", "linguist", "surveyor",  "clockmaker", "novelist",
    "geologist", "luthier",  "typesetter",  "beekeeper", "falconer",  "perfumer"};

constexpr std::array<std::string_view, 24> kAwards = {
    "orwin medal",     "halden prize",    "silver quill",    "corbel laurel",  "meridian cup",
    "vanta ribbon",    "ostrander medal", "lumiere prize",   "brightwater cup", "ferrous star",
    "golden compass",  "amber lyre",      "caldera medal",   "northwind prize", "quartz laurel",
    "sterling anchor", "ivory key",       "harrow medal",    "tessaly prize",   "cobalt wreath",
    "emberly cup",     "pellucid star",   "marlowe ribbon",  "saffron crest"};

constexpr std::array<std::string_view, 20> kHobbies = {
    "chess",    "sailing",  "archery", "beekeeping", "origami",  "fencing",  "birdwatching",
    "pottery",  "rowing",   "juggling", "calligraphy", "knitting", "spelunking", "kiteflying",
    "gardening", "baking",  "climbing", "stargazing", "woodcarving", "fishing"};

// Question phrasings; "{}" is replaced by the entity name.
struct QuestionTemplates {
    Attribute attribute;
    std::array<std::string_view, 2> questions;
    std::array<std::string_view, 2> openers;  // name- and value-free
};

constexpr std::array<QuestionTemplates, 6> kQuestions = {{
    {Attribute::BirthYear,
     {"in what year was {} born ?", "when was {} born ?"},
     {"the question asks for a birth year .", "we need the year of birth of the person ."}},
    {Attribute::City,
     {"where does {} live ?", "which city is home to {} ?"},
     {"the question asks for a home city .", "we need the city where the person lives ."}},
    {Attribute::Profession,
     {"what does {} do for a living ?", "what is the profession of {} ?"},
     {"the question asks for a profession .", "we need the occupation of the person ."}},
    {Attribute::Award,
     {"which award did {} receive ?", "what honor was given to {} ?"},
     {"the question asks for an award .", "we need the honor the person received ."}},
    {Attribute::Mentor,
     {"who mentored {} ?", "who was the mentor of {} ?"},
     {"the question asks for a mentor .", "we need the teacher of the person ."}},
    {Attribute::Hobby,
     {"what hobby does {} have ?", "what does {} enjoy in spare time ?"},
     {"the question asks for a hobby .", "we need the pastime of the person ."}},
}};

constexpr std::array<std::string_view, 3> kClosers = {
    "this gives the final answer .", "so the answer follows from these facts .",
    "combining these facts gives the answer ."};

std::string fill(std::string_view tmpl, std::string_view name) {
    std::string out(tmpl);
    auto pos = out.find("{}");
    if (pos != std::string::npos) out.replace(pos, 2, name);
    return out;
}

std::string fact_text(Attribute a, const std::string& name, const std::string& value) {
    switch (a) {
        case Attribute::Name: return value + " is a known author .";
        case Attribute::BirthYear: return name + " was born in " + value + " .";
        case Attribute::City: return name + " lives in " + value + " .";
        case Attribute::Profession: return name + " works as a " + value + " .";
        case Attribute::Award: return name + " received the " + value + " .";
        case Attribute::Mentor: return name + " was mentored by " + value + " .";
        case Attribute::Hobby: return name + " enjoys " + value + " .";
    }
    return {};
}

template <std::size_t N>
std::string pick(Rng& rng, const std::array<std::string_view, N>& pool) {
    return std::string(pool[uniform_index(rng, N)]);
}

std::string pad4(int i) {
    std::string s = std::to_string(i);
    while (s.size() < 4) s.insert(s.begin(), '0');
    return s;
}

}  // namespace

std::string_view attribute_name(Attribute a) { return kAttributeNames[static_cast<int>(a)]; }

Attribute parse_attribute(std::string_view s) {
    for (int i = 0; i < kAttributeCount; ++i) {
        if (kAttributeNames[i] == s) return static_cast<Attribute>(i);
    }
    throw ValidationError("unknown attribute '" + std::string(s) + "'");
}

const Example& Corpus::find(std::string_view id) const {
    for (const auto& e : examples) {
        if (e.id == id) return e;
    }
    throw ValidationError("no example with id '" + std::string(id) + "'");
}

Corpus generate_corpus(const GeneratorSpec& spec) {
    if (spec.n_entities < 1) throw ValidationError("n_entities must be >= 1");
    if (spec.questions_per_entity < 1) throw ValidationError("questions_per_entity must be >= 1");
    const std::size_t capacity = kFirstNames.size() * kLastNames.size();
    if (static_cast<std::size_t>(spec.n_entities) > capacity) {
        throw ValidationError("n_entities exceeds name pool capacity " + std::to_string(capacity));
    }

    Rng rng(spec.seed);
    Corpus corpus;

    std::vector<std::size_t> name_slots(capacity);
    for (std::size_t i = 0; i < capacity; ++i) name_slots[i] = i;
    shuffle_in_place(name_slots, rng);

    for (int e = 0; e < spec.n_entities; ++e) {
        const std::string entity_id = "ent" + pad4(e);
        const std::size_t slot = name_slots[e];
        const std::string name = std::string(kFirstNames[slot / kLastNames.size()]) + " " +
                                 std::string(kLastNames[slot % kLastNames.size()]);

        std::array<std::string, kAttributeCount> values;
        values[0] = name;
        values[1] = std::to_string(1850 + static_cast<int>(uniform_index(rng, 150)));
        values[2] = pick(rng, kCities);
        values[3] = pick(rng, kProfessions);
        values[4] = pick(rng, kAwards);
        values[5] = pick(rng, kMentorNames);
        values[6] = pick(rng, kHobbies);

        std::array<std::size_t, kAttributeCount> fact_index{};
        for (int a = 0; a < kAttributeCount; ++a) {
            auto attr = static_cast<Attribute>(a);
            KnowledgeFact f;
            f.fact_id = entity_id + "-" + std::string(attribute_name(attr));
            f.entity_id = entity_id;
            f.attribute = attr;
            f.value = values[a];
            f.text = fact_text(attr, name, values[a]);
            fact_index[a] = corpus.facts.size();
            corpus.facts.push_back(std::move(f));
        }

        std::vector<std::size_t> order = {0, 1, 2, 3, 4, 5};
        shuffle_in_place(order, rng);

        for (int q = 0; q < spec.questions_per_entity; ++q) {
            const auto& tmpl = kQuestions[order[q % 6]];
            const std::size_t variant = (q / 6) % 2;
            const int queried = static_cast<int>(tmpl.attribute);

            // One or two supporting facts, then the queried fact.
            std::vector<int> others;
            for (int a = 0; a < kAttributeCount; ++a) {
                if (a != queried) others.push_back(a);
            }
            shuffle_in_place(others, rng);
            const std::size_t n_support = 1 + uniform_index(rng, 2);

            std::vector<std::string> sentences;
            std::vector<SentenceSource> sources;
            sentences.emplace_back(tmpl.openers[uniform_index(rng, 2)]);
            for (std::size_t s = 0; s < n_support; ++s) {
                const auto& f = corpus.facts[fact_index[others[s]]];
                sources.push_back({static_cast<int>(sentences.size()), f.fact_id});
                sentences.push_back(f.text);
            }
            const auto& qf = corpus.facts[fact_index[queried]];
            sources.push_back({static_cast<int>(sentences.size()), qf.fact_id});
            sentences.push_back(qf.text);
            sentences.emplace_back(kClosers[uniform_index(rng, kClosers.size())]);

            Example ex;
            ex.id = entity_id + "-q" + std::to_string(q);
            ex.entity_id = entity_id;
            ex.question = fill(tmpl.questions[variant], name);
            for (std::size_t s = 0; s < sentences.size(); ++s) {
                if (s > 0) ex.cot += ' ';
                ex.cot += sentences[s];
            }
            ex.answer = values[queried];
            corpus.provenance[ex.id] = std::move(sources);
            corpus.examples.push_back(std::move(ex));
        }
    }
    return corpus;
}

Split partition(const Corpus& corpus, double fraction, std::uint64_t seed) {
    if (!(fraction > 0.0 && fraction < 1.0)) {
        throw ValidationError("forget fraction must lie in (0, 1), got " + std::to_string(fraction));
    }
    const std::size_t n = corpus.examples.size();
    const auto n_forget = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));

    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    Rng rng(seed);
    // Partial Fisher-Yates: the first n_forget slots are a uniform sample.
    for (std::size_t i = 0; i < n_forget; ++i) {
        std::size_t j = i + uniform_index(rng, n - i);
        std::swap(idx[i], idx[j]);
    }
    std::vector<bool> chosen(n, false);
    for (std::size_t i = 0; i < n_forget; ++i) chosen[idx[i]] = true;

    Split split;
    split.fraction = fraction;
    split.seed = seed;
    for (std::size_t i = 0; i < n; ++i) {
        (chosen[i] ? split.forget_ids : split.retain_ids).push_back(corpus.examples[i].id);
    }
    return split;
}

void validate_split(const Corpus& corpus, const Split& split) {
    std::unordered_set<std::string> ids;
    for (const auto& e : corpus.examples) ids.insert(e.id);
    std::unordered_set<std::string> seen;
    for (const auto* list : {&split.forget_ids, &split.retain_ids}) {
        for (const auto& id : *list) {
            if (!ids.count(id)) throw ValidationError("split references unknown example '" + id + "'");
            if (!seen.insert(id).second) throw ValidationError("split lists example '" + id + "' twice");
        }
    }
    if (seen.size() != ids.size()) throw ValidationError("split does not cover every corpus example");
}

std::vector<KnowledgeFact> forget_knowledge_base(const Corpus& corpus, const Split& split) {
    std::unordered_map<std::string, const Example*> by_id;
    for (const auto& e : corpus.examples) by_id.emplace(e.id, &e);
    std::set<std::string> entities;
    for (const auto& id : split.forget_ids) {
        auto it = by_id.find(id);
        if (it == by_id.end()) throw ValidationError("split references unknown example '" + id + "'");
        entities.insert(it->second->entity_id);
    }
    std::vector<KnowledgeFact> kb;
    for (const auto& f : corpus.facts) {
        if (entities.count(f.entity_id)) kb.push_back(f);
    }
    std::sort(kb.begin(), kb.end(),
              [](const KnowledgeFact& a, const KnowledgeFact& b) { return a.fact_id < b.fact_id; });
    return kb;
}

std::vector<Example> select(const Corpus& corpus, const std::vector<std::string>& ids) {
    std::unordered_map<std::string, const Example*> by_id;
    for (const auto& e : corpus.examples) by_id.emplace(e.id, &e);
    std::vector<Example> out;
    out.reserve(ids.size());
    for (const auto& id : ids) {
        auto it = by_id.find(id);
        if (it == by_id.end()) throw ValidationError("unknown example '" + id + "'");
        out.push_back(*it->second);
    }
    return out;
}

std::vector<std::string> split_sentences(std::string_view text) {
    std::vector<std::string> out;
    std::size_t start = 0;
    for (std::size_t i = 0; i < text.size(); ++i) {
        if (text[i] != '.' || (i + 1 < text.size() && text[i + 1] != ' ')) continue;
        out.emplace_back(text.substr(start, i + 1 - start));
        start = i + 1;
        while (start < text.size() && text[start] == ' ') ++start;
    }
    if (start < text.size()) out.emplace_back(text.substr(start));
    return out;
}

// ---------------------------------------------------------------- persistence

namespace {

std::string require_string(const json& j, const char* key, std::size_t line) {
    auto it = j.find(key);
    if (it == j.end() || !it->is_string()) {
        throw ValidationError("line " + std::to_string(line) + ": missing string field '" + key + "'");
    }
    return it->get<std::string>();
}

template <class F>
void for_each_json_line(std::string_view text, F&& fn) {
    auto lines = split_lines(text);
    for (std::size_t i = 0; i < lines.size(); ++i) {
        const auto& line = lines[i];
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            throw ValidationError("line " + std::to_string(i + 1) + ": malformed JSON (" + e.what() + ")");
        }
        if (!j.is_object()) throw ValidationError("line " + std::to_string(i + 1) + ": expected an object");
        fn(j, i + 1);
    }
}

}  // namespace

std::string examples_to_jsonl(const std::vector<Example>& examples) {
    std::string out;
    for (const auto& e : examples) {
        json j = {{"id", e.id}, {"entity_id", e.entity_id}, {"question", e.question}, {"cot", e.cot},
                  {"answer", e.answer}};
        out += j.dump();
        out += '\n';
    }
    return out;
}

std::vector<Example> examples_from_jsonl(std::string_view text) {
    std::vector<Example> out;
    std::unordered_set<std::string> ids;
    for_each_json_line(text, [&](const json& j, std::size_t line) {
        Example e{require_string(j, "id", line), require_string(j, "entity_id", line),
                  require_string(j, "question", line), require_string(j, "cot", line),
                  require_string(j, "answer", line)};
        if (!ids.insert(e.id).second) {
            throw ValidationError("line " + std::to_string(line) + ": duplicate id '" + e.id + "'");
        }
        out.push_back(std::move(e));
    });
    return out;
}

std::string facts_to_jsonl(const std::vector<KnowledgeFact>& facts) {
    std::string out;
    for (const auto& f : facts) {
        json j = {{"fact_id", f.fact_id}, {"entity_id", f.entity_id},
                  {"attribute", std::string(attribute_name(f.attribute))}, {"value", f.value},
                  {"text", f.text}};
        out += j.dump();
        out += '\n';
    }
    return out;
}

std::vector<KnowledgeFact> facts_from_jsonl(std::string_view text) {
    std::vector<KnowledgeFact> out;
    std::set<std::pair<std::string, Attribute>> keys;
    std::unordered_set<std::string> ids;
    for_each_json_line(text, [&](const json& j, std::size_t line) {
        KnowledgeFact f;
        f.fact_id = require_string(j, "fact_id", line);
        f.entity_id = require_string(j, "entity_id", line);
        try {
            f.attribute = parse_attribute(require_string(j, "attribute", line));
        } catch (const ValidationError& e) {
            throw ValidationError("line " + std::to_string(line) + ": " + e.what());
        }
        f.value = require_string(j, "value", line);
        f.text = require_string(j, "text", line);
        if (!ids.insert(f.fact_id).second) {
            throw ValidationError("line " + std::to_string(line) + ": duplicate fact_id '" + f.fact_id + "'");
        }
        if (!keys.insert({f.entity_id, f.attribute}).second) {
            throw ValidationError("line " + std::to_string(line) + ": duplicate (entity, attribute)");
        }
        out.push_back(std::move(f));
    });
    return out;
}

void write_examples(const std::vector<Example>& examples, const std::filesystem::path& path) {
    write_file_atomic(path, examples_to_jsonl(examples));
}

std::vector<Example> read_examples(const std::filesystem::path& path) {
    try {
        return examples_from_jsonl(read_file(path));
    } catch (const ValidationError& e) {
        throw ValidationError(path.string() + ": " + e.what());
    }
}

void write_facts(const std::vector<KnowledgeFact>& facts, const std::filesystem::path& path) {
    write_file_atomic(path, facts_to_jsonl(facts));
}

std::vector<KnowledgeFact> read_facts(const std::filesystem::path& path) {
    try {
        return facts_from_jsonl(read_file(path));
    } catch (const ValidationError& e) {
        throw ValidationError(path.string() + ": " + e.what());
    }
}

void write_split(const Split& split, const std::filesystem::path& path) {
    json j = {{"fraction", split.fraction}, {"seed", split.seed}, {"forget_ids", split.forget_ids},
              {"retain_ids", split.retain_ids}};
    write_file_atomic(path, j.dump() + "\n");
}

Split read_split(const std::filesystem::path& path) {
    json j;
    try {
        j = json::parse(read_file(path));
        Split s;
        s.fraction = j.at("fraction").get<double>();
        s.seed = j.at("seed").get<std::uint64_t>();
        s.forget_ids = j.at("forget_ids").get<std::vector<std::string>>();
        s.retain_ids = j.at("retain_ids").get<std::vector<std::string>>();
        return s;
    } catch (const json::exception& e) {
        throw ValidationError(path.string() + ": malformed split (" + e.what() + ")");
    }
}

void write_corpus(const Corpus& corpus, const std::filesystem::path& examples_path,
                  const std::filesystem::path& facts_path) {
    write_examples(corpus.examples, examples_path);
    write_facts(corpus.facts, facts_path);
}

Corpus read_corpus(const std::filesystem::path& examples_path, const std::filesystem::path& facts_path) {
    Corpus c;
    c.examples = read_examples(examples_path);
    c.facts = read_facts(facts_path);
    return c;
}

}  // namespace frul::corpus
