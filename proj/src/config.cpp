#include "frul/config.hpp"

#include <algorithm>
#include <functional>
#include <map>
#include <sstream>
#include <type_traits>

#include <nlohmann/json.hpp>
#include <toml.hpp>

#include "frul/common.hpp"
#include "frul/eval.hpp"

namespace frul::config {

namespace {

using StringList = std::vector<std::string>;
using DoubleList = std::vector<double>;
using UintList = std::vector<std::uint64_t>;

// A field reads its value from a TOML node and writes it back as TOML text.
struct Field {
    std::function<void(RunConfig&, const toml::node&, const std::string&)> read;
    std::function<std::string(const RunConfig&)> write;
};

[[noreturn]] void type_error(const std::string& key, const char* expected) {
    throw ValidationError("config key '" + key + "': expected " + expected);
}

template <class T>
T from_node(const toml::node& n, const std::string& key) {
    if constexpr (std::is_same_v<T, bool>) {
        if (auto v = n.value_exact<bool>()) return *v;
        type_error(key, "a boolean");
    } else if constexpr (std::is_same_v<T, int>) {
        if (!n.is_integer()) type_error(key, "an integer");
        const auto v = *n.value<std::int64_t>();
        if (v < INT32_MIN || v > INT32_MAX) type_error(key, "a 32-bit integer");
        return static_cast<int>(v);
    } else if constexpr (std::is_same_v<T, std::uint64_t>) {
        if (!n.is_integer()) type_error(key, "a non-negative integer");
        const auto v = *n.value<std::int64_t>();
        if (v < 0) type_error(key, "a non-negative integer");
        return static_cast<std::uint64_t>(v);
    } else if constexpr (std::is_same_v<T, double>) {
        if (!n.is_number()) type_error(key, "a number");
        return *n.value<double>();
    } else if constexpr (std::is_same_v<T, std::string>) {
        if (!n.is_string()) type_error(key, "a string");
        return *n.value<std::string>();
    } else {
        if (!n.is_array()) type_error(key, "an array");
        T out;
        for (const auto& el : *n.as_array()) out.push_back(from_node<typename T::value_type>(el, key));
        return out;
    }
}

std::string format_scalar(bool v) { return v ? "true" : "false"; }
std::string format_scalar(int v) { return std::to_string(v); }
std::string format_scalar(std::uint64_t v) { return std::to_string(v); }
std::string format_scalar(double v) {
    std::string s = eval::format_double(v);
    if (s.find_first_of(".eEn") == std::string::npos) s += ".0";  // keep it a TOML float
    return s;
}
std::string format_scalar(const std::string& v) { return nlohmann::json(v).dump(); }

template <class T>
std::string format_value(const T& v) {
    if constexpr (std::is_same_v<T, StringList> || std::is_same_v<T, DoubleList> || std::is_same_v<T, UintList>) {
        std::string out = "[";
        for (std::size_t i = 0; i < v.size(); ++i) {
            if (i) out += ", ";
            out += format_scalar(v[i]);
        }
        return out + "]";
    } else {
        return format_scalar(v);
    }
}

template <class T, class Acc>
Field field(Acc acc) {
    return {[acc](RunConfig& c, const toml::node& n, const std::string& key) { acc(c) = from_node<T>(n, key); },
            [acc](const RunConfig& c) { return format_value<T>(acc(const_cast<RunConfig&>(c))); }};
}

#define FRUL_FIELD(T, key, expr) {key, field<T>([](RunConfig& c) -> T& { return c.expr; })}

const std::map<std::string, Field>& schema() {
    static const std::map<std::string, Field> s = {
        FRUL_FIELD(int, "model.n_layers", model.n_layers),
        FRUL_FIELD(int, "model.n_heads", model.n_heads),
        FRUL_FIELD(int, "model.d_model", model.d_model),
        FRUL_FIELD(int, "model.d_ff", model.d_ff),
        FRUL_FIELD(int, "model.context_len", model.context_len),
        FRUL_FIELD(double, "optim.lr", optim.lr),
        FRUL_FIELD(double, "optim.beta1", optim.beta1),
        FRUL_FIELD(double, "optim.beta2", optim.beta2),
        FRUL_FIELD(double, "optim.eps", optim.eps),
        FRUL_FIELD(double, "optim.weight_decay", optim.weight_decay),
        FRUL_FIELD(int, "optim.warmup_steps", optim.warmup_steps),
        FRUL_FIELD(int, "train.epochs", train.epochs),
        FRUL_FIELD(int, "train.batch_size", train.batch_size),
        FRUL_FIELD(std::string, "unlearn.method", unlearn.method),
        FRUL_FIELD(int, "unlearn.epochs", unlearn.epochs),
        FRUL_FIELD(double, "unlearn.early_stop_rouge", unlearn.early_stop_rouge),
        FRUL_FIELD(int, "unlearn.eval_every", unlearn.eval_every),
        FRUL_FIELD(double, "loss.alpha", loss.alpha),
        FRUL_FIELD(double, "loss.lambda_f", loss.lambda_f),
        FRUL_FIELD(double, "loss.lambda_r", loss.lambda_r),
        FRUL_FIELD(double, "loss.beta_g", loss.beta_g),
        FRUL_FIELD(double, "loss.beta_r", loss.beta_r),
        FRUL_FIELD(bool, "loss.cot_normalize", cot.normalize),
        FRUL_FIELD(double, "loss.clamp_eps", cot.clamp_eps),
        FRUL_FIELD(int, "loss.r2mu_layer", r2mu_layer),
        FRUL_FIELD(double, "loss.r2mu_retain_weight", r2mu_retain_weight),
        FRUL_FIELD(int, "data.n_entities", data.n_entities),
        FRUL_FIELD(int, "data.questions_per_entity", data.questions_per_entity),
        FRUL_FIELD(double, "data.forget_fraction", data.forget_fraction),
        FRUL_FIELD(StringList, "scrub.extractors", scrub.extractors),
        FRUL_FIELD(DoubleList, "scrub.weights", scrub.weights),
        FRUL_FIELD(double, "scrub.vote_threshold", scrub.vote_threshold),
        FRUL_FIELD(int, "scrub.top_k", scrub.top_k),
        FRUL_FIELD(std::string, "scrub.placeholder_policy", scrub.placeholder_policy),
        FRUL_FIELD(int, "scrub.max_in_flight", scrub.max_in_flight),
        FRUL_FIELD(std::string, "scrub.endpoint", scrub.endpoint),
        FRUL_FIELD(double, "scrub.timeout_s", scrub.timeout_s),
        FRUL_FIELD(int, "scrub.retries", scrub.retries),
        FRUL_FIELD(std::string, "scrub.templates_dir", scrub.templates_dir),
        FRUL_FIELD(int, "eval.max_new", eval.max_new),
        FRUL_FIELD(int, "eval.batch_size", eval.batch_size),
        FRUL_FIELD(std::uint64_t, "seeds.data", seeds.data),
        FRUL_FIELD(std::uint64_t, "seeds.model", seeds.model),
        FRUL_FIELD(std::uint64_t, "seeds.run", seeds.run),
        FRUL_FIELD(std::string, "paths.corpus", paths.corpus),
        FRUL_FIELD(std::string, "paths.facts", paths.facts),
        FRUL_FIELD(std::string, "paths.split", paths.split),
        FRUL_FIELD(std::string, "paths.kb", paths.kb),
        FRUL_FIELD(std::string, "paths.vocab", paths.vocab),
        FRUL_FIELD(std::string, "paths.scrub_cache", paths.scrub_cache),
        FRUL_FIELD(std::string, "paths.checkpoints", paths.checkpoints),
        FRUL_FIELD(std::string, "paths.reports", paths.reports),
        FRUL_FIELD(DoubleList, "matrix.fractions", matrix.fractions),
        FRUL_FIELD(StringList, "matrix.methods", matrix.methods),
        FRUL_FIELD(UintList, "matrix.seeds", matrix.seeds),
    };
    return s;
}

#undef FRUL_FIELD

const Field& lookup(const std::string& key) {
    auto it = schema().find(key);
    if (it == schema().end()) throw ValidationError("unknown config key '" + key + "'");
    return it->second;
}

void apply_table(RunConfig& cfg, const toml::table& table, const std::string& prefix) {
    for (const auto& [k, node] : table) {
        const std::string key = prefix.empty() ? std::string(k.str()) : prefix + "." + std::string(k.str());
        if (const auto* sub = node.as_table()) {
            apply_table(cfg, *sub, key);
            continue;
        }
        lookup(key).read(cfg, node, key);
    }
}

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t");
    if (b == std::string_view::npos) return {};
    return std::string(s.substr(b, s.find_last_not_of(" \t") - b + 1));
}

}  // namespace

std::vector<std::string> config_keys() {
    std::vector<std::string> keys;
    for (const auto& [k, _] : schema()) keys.push_back(k);
    return keys;
}

void apply_toml(RunConfig& cfg, std::string_view toml_text, std::string_view source) {
    toml::table table;
    try {
        table = toml::parse(toml_text, source);
    } catch (const toml::parse_error& e) {
        std::ostringstream msg;
        msg << source << ":" << e.source().begin.line << ": " << e.description();
        throw ValidationError(msg.str());
    }
    apply_table(cfg, table, "");
}

void apply_override(RunConfig& cfg, std::string_view assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string_view::npos) throw ValidationError("override '" + std::string(assignment) + "' lacks '='");
    const std::string key = trim(assignment.substr(0, eq));
    const std::string value = trim(assignment.substr(eq + 1));
    const auto& f = lookup(key);
    toml::table t;
    try {
        t = toml::parse("v = " + value);
    } catch (const toml::parse_error&) {
        // bare words are accepted for string keys
        t = toml::table{{"v", value}};
    }
    f.read(cfg, *t.get("v"), key);
}

RunConfig load_config(const std::optional<std::filesystem::path>& path, const std::vector<std::string>& overrides) {
    RunConfig cfg;
    if (path) apply_toml(cfg, read_file(*path), path->string());
    for (const auto& o : overrides) apply_override(cfg, o);
    validate(cfg);
    return cfg;
}

void validate(const RunConfig& c) {
    auto require = [](bool ok, const std::string& msg) {
        if (!ok) throw ValidationError(msg);
    };
    model::ModelConfig m = c.model;
    m.vocab_size = 1;
    m.validate();
    require(c.optim.lr > 0, "optim.lr must be positive");
    require(c.optim.beta1 >= 0 && c.optim.beta1 < 1, "optim.beta1 must be in [0, 1)");
    require(c.optim.beta2 >= 0 && c.optim.beta2 < 1, "optim.beta2 must be in [0, 1)");
    require(c.optim.eps > 0, "optim.eps must be positive");
    require(c.optim.weight_decay >= 0, "optim.weight_decay must be non-negative");
    require(c.optim.warmup_steps >= 0, "optim.warmup_steps must be non-negative");
    require(c.train.epochs >= 0, "train.epochs must be non-negative");
    require(c.train.batch_size >= 1, "train.batch_size must be >= 1");
    const StringList methods = {"frul", "ga", "gd", "r2mu_lite"};
    require(std::count(methods.begin(), methods.end(), c.unlearn.method) == 1,
            "unlearn.method must be one of frul, ga, gd, r2mu_lite");
    for (const auto& mth : c.matrix.methods)
        require(std::count(methods.begin(), methods.end(), mth) == 1, "matrix.methods has unknown method '" + mth + "'");
    require(c.unlearn.epochs >= 0, "unlearn.epochs must be non-negative");
    require(c.unlearn.eval_every >= 0, "unlearn.eval_every must be non-negative");
    c.loss.validate();
    require(c.cot.clamp_eps > 0, "loss.clamp_eps must be positive");
    require(c.r2mu_layer >= -1 && c.r2mu_layer < c.model.n_layers, "loss.r2mu_layer must be -1 or a valid layer");
    require(c.r2mu_retain_weight >= 0, "loss.r2mu_retain_weight must be non-negative");
    require(c.data.n_entities >= 1, "data.n_entities must be >= 1");
    require(c.data.questions_per_entity >= 1, "data.questions_per_entity must be >= 1");
    require(c.data.forget_fraction > 0 && c.data.forget_fraction < 1, "data.forget_fraction must be in (0, 1)");
    for (double f : c.matrix.fractions) require(f > 0 && f < 1, "matrix.fractions entries must be in (0, 1)");
    require(!c.scrub.extractors.empty(), "scrub.extractors must not be empty");
    require(c.scrub.weights.size() == c.scrub.extractors.size(), "scrub.weights must match scrub.extractors");
    require(c.scrub.top_k >= 1, "scrub.top_k must be >= 1");
    require(c.scrub.max_in_flight >= 1, "scrub.max_in_flight must be >= 1");
    require(c.scrub.placeholder_policy == "sequential" || c.scrub.placeholder_policy == "shuffled",
            "scrub.placeholder_policy must be sequential or shuffled");
    require(c.eval.max_new >= 0, "eval.max_new must be non-negative");
    require(c.eval.batch_size >= 1, "eval.batch_size must be >= 1");
}

std::string canonical(const RunConfig& cfg) {
    std::string out;
    for (const auto& [key, f] : schema()) out += key + " = " + f.write(cfg) + "\n";
    return out;
}

std::string config_hash(const RunConfig& cfg) { return hex64(fnv1a64(canonical(cfg))); }

int resolved_r2mu_layer(const RunConfig& cfg) {
    return cfg.r2mu_layer >= 0 ? cfg.r2mu_layer : (cfg.model.n_layers - 1) / 2;
}

}  // namespace frul::config
