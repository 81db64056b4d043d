#pragma once

#include <string>
#include <unordered_map>
#include <vector>

namespace assl {

/// One HTTP inference endpoint. base_url may carry a path prefix
/// (http://host:port/v1); the client appends /embeddings or /completions.
/// api_key_env names an environment variable; when set, its value is sent as
/// a bearer token.
struct EndpointConfig {
    std::string base_url;
    std::string api_key_env;
    std::string model_name;
    double timeout_s = 30.0;
    int max_batch = 64;
    int max_retries = 2;   // retries after the first attempt
    int max_inflight = 4;  // concurrent completion requests
    double backoff_ms = 250.0;
    // decoding controls; defaults are greedy so scores reproduce
    double temperature = 0.0;
    int max_tokens = 512;
    std::string cache_dir; // completion cache location; empty disables caching
};
void validate(const EndpointConfig& cfg);

enum class ModelTag { raw, lora };
std::string to_string(ModelTag tag);

struct CompletionRequest {
    std::string record_id;
    std::string prompt; // instruction + "\n" + input, verbatim
    ModelTag model_tag = ModelTag::raw;
};

struct CompletionOutcome {
    bool ok = false;
    std::string text;
    std::string error;
};
using CompletionTable = std::unordered_map<std::string, CompletionOutcome>;

/// Embeds texts in input order, splitting into requests of at most
/// cfg.max_batch. Wire format: POST {base}/embeddings with
/// {"model": ..., "input": [texts]}, response {"data": [{"index": i,
/// "embedding": [...]}]}. Transport failure past the retry budget throws
/// ServiceError; a count or dimension inconsistency throws ProtocolError.
std::vector<std::vector<double>> embed_batch(const std::vector<std::string>& texts,
                                             const EndpointConfig& cfg);

/// Requests one completion per record (POST {base}/completions with
/// {"model", "prompt", "temperature", "max_tokens"}, response
/// {"choices": [{"text": ...}]}), retrying transient failures with
/// exponential backoff. Every request id appears in the result exactly once;
/// a permanently failed request is marked, not dropped. Successful outputs
/// are cached on disk keyed by (model tag, record id, prompt hash).
CompletionTable complete_batch(const std::vector<CompletionRequest>& requests,
                               const EndpointConfig& cfg);

} // namespace assl
