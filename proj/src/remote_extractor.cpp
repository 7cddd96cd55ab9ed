#include <algorithm>
#include <chrono>
#include <cmath>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "frul/common.hpp"
#include "frul/scrubber.hpp"
#include "frul/tokenizer.hpp"

namespace frul::scrub {

using nlohmann::json;

namespace {

struct Endpoint {
    std::string origin;  // scheme://host[:port]
    std::string base;    // path prefix without trailing slash
};

Endpoint split_endpoint(std::string_view url) {
    const auto scheme = url.find("://");
    if (scheme == std::string_view::npos) throw ValidationError("extractor endpoint needs a scheme: " + std::string(url));
    const auto slash = url.find('/', scheme + 3);
    Endpoint e;
    e.origin = std::string(url.substr(0, slash));
    if (slash != std::string_view::npos) {
        e.base = std::string(url.substr(slash));
        while (!e.base.empty() && e.base.back() == '/') e.base.pop_back();
    }
    return e;
}

std::vector<Span> parse_segments(const std::string& body, const corpus::Example& example, const std::string& source,
                                 std::vector<std::string>& warnings) {
    json j;
    try {
        j = json::parse(body);
    } catch (const json::parse_error& e) {
        throw RuntimeFailure(std::string("extractor response is not JSON: ") + e.what());
    }
    if (!j.is_object() || !j.contains("segments") || !j["segments"].is_array())
        throw RuntimeFailure("extractor response lacks a \"segments\" array");

    std::vector<Span> spans;
    for (const auto& seg : j["segments"]) {
        if (!seg.is_object() || !seg.contains("text") || !seg["text"].is_string())
            throw RuntimeFailure("extractor segment lacks a string \"text\"");
        double confidence = 1.0;
        if (seg.contains("confidence")) {
            if (!seg["confidence"].is_number()) throw RuntimeFailure("extractor confidence is not a number");
            confidence = seg["confidence"].get<double>();
            if (!(confidence >= 0.0 && confidence <= 1.0))
                throw RuntimeFailure("extractor confidence outside [0, 1]");
        }
        const auto text = seg["text"].get<std::string>();
        auto span = locate_segment(example.cot, text);
        if (!span) {
            warnings.push_back("dropped segment not found in the reasoning trace: \"" + text + "\"");
            continue;
        }
        span->confidence = confidence;
        span->source = source;
        spans.push_back(std::move(*span));
    }

    // one extractor's segments may share sentences; keep each token voted once
    std::sort(spans.begin(), spans.end(), [](const Span& a, const Span& b) { return a.start < b.start; });
    std::vector<Span> merged;
    for (auto& s : spans) {
        if (!merged.empty() && s.start < merged.back().end) {
            merged.back().end = std::max(merged.back().end, s.end);
            merged.back().confidence = std::max(merged.back().confidence, s.confidence);
        } else {
            merged.push_back(std::move(s));
        }
    }
    if (merged.size() != spans.size()) {
        std::vector<std::string> tokens;
        for (auto& p : tok::split_words(example.cot)) tokens.push_back(std::move(p.text));
        for (auto& s : merged) s.text = span_text(tokens, s.start, s.end);
    }
    return merged;
}

}  // namespace

RemoteExtraction remote_extract(const RemoteConfig& config, const corpus::Example& example,
                                std::span<const corpus::KnowledgeFact> context) {
    if (config.endpoint.empty()) throw ValidationError("remote extractor endpoint is not configured");
    if (config.token.empty()) throw ValidationError("remote extractor credential (FRUL_EXTRACTOR_TOKEN) is not set");
    if (config.retries < 0) throw ValidationError("extractor retries must be >= 0");
    if (!(config.timeout_s > 0)) throw ValidationError("extractor timeout must be positive");

    const auto ep = split_endpoint(config.endpoint);
    httplib::Client client(ep.origin);
    const auto timeout = std::chrono::duration<double>(config.timeout_s);
    client.set_connection_timeout(timeout);
    client.set_read_timeout(timeout);
    client.set_write_timeout(timeout);
    client.set_bearer_token_auth(config.token);

    json request = {{"cot", example.cot}, {"task", "extract_forget_segments"}};
    json facts = json::array();
    for (const auto& f : context) facts.push_back(f.text);
    request["facts"] = facts;
    if (!config.instructions.empty()) request["instructions"] = config.instructions;
    const std::string body = request.dump();

    std::string last_error;
    for (int attempt = 0; attempt <= config.retries; ++attempt) {
        auto res = client.Post(ep.base + "/extract", body, "application/json");
        if (!res) {
            last_error = "transport error: " + httplib::to_string(res.error());
            continue;
        }
        if (res->status == 401 || res->status == 403)
            throw RuntimeFailure("extractor rejected the credential (HTTP " + std::to_string(res->status) + ")");
        if (res->status != 200) {
            last_error = "HTTP " + std::to_string(res->status);
            continue;
        }
        RemoteExtraction out;
        out.spans = parse_segments(res->body, example, config.id, out.warnings);
        return out;
    }
    throw RetryableError("extractor " + config.id + " failed after " + std::to_string(config.retries + 1) +
                         " attempts: " + last_error);
}

}  // namespace frul::scrub
