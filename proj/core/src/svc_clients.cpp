#include "assl/svc_clients.hpp"

#include <atomic>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <mutex>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "assl/errors.hpp"
#include "assl/jsonl.hpp"
#include "assl/rng.hpp"

namespace assl {

namespace {

struct SplitUrl {
    std::string host; // scheme://host:port
    std::string prefix;
};

SplitUrl split_url(const std::string& base_url) {
    const auto scheme_end = base_url.find("://");
    if (scheme_end == std::string::npos) {
        throw ConfigError("endpoint base_url needs a scheme: \"" + base_url + "\"");
    }
    const auto path_start = base_url.find('/', scheme_end + 3);
    if (path_start == std::string::npos) return {base_url, ""};
    std::string prefix = base_url.substr(path_start);
    while (!prefix.empty() && prefix.back() == '/') prefix.pop_back();
    return {base_url.substr(0, path_start), prefix};
}

httplib::Headers auth_headers(const EndpointConfig& cfg) {
    httplib::Headers headers;
    if (!cfg.api_key_env.empty()) {
        const char* key = std::getenv(cfg.api_key_env.c_str());
        if (key == nullptr || *key == '\0') {
            throw ConfigError("api_key_env \"" + cfg.api_key_env + "\" is not set");
        }
        headers.emplace("Authorization", std::string("Bearer ") + key);
    }
    return headers;
}

void configure(httplib::Client& cli, const EndpointConfig& cfg) {
    const auto timeout =
        std::chrono::milliseconds(static_cast<long long>(cfg.timeout_s * 1000.0));
    cli.set_connection_timeout(timeout);
    cli.set_read_timeout(timeout);
    cli.set_write_timeout(timeout);
}

void backoff_sleep(const EndpointConfig& cfg, int attempt) {
    const double ms = cfg.backoff_ms * static_cast<double>(1ull << attempt);
    std::this_thread::sleep_for(std::chrono::duration<double, std::milli>(ms));
}

bool retryable_status(int status) {
    return status == 408 || status == 429 || status >= 500;
}

std::string prompt_hash_hex(const std::string& prompt) {
    char buf[20];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(rng::fnv1a(prompt)));
    return buf;
}

} // namespace

void validate(const EndpointConfig& cfg) {
    if (cfg.base_url.empty()) throw ConfigError("endpoint base_url is empty");
    if (cfg.timeout_s <= 0.0) throw ConfigError("endpoint timeout must be positive");
    if (cfg.max_batch < 1) throw ConfigError("endpoint max_batch must be >= 1");
    if (cfg.max_retries < 0) throw ConfigError("endpoint max_retries must be >= 0");
    if (cfg.max_inflight < 1) throw ConfigError("endpoint max_inflight must be >= 1");
    split_url(cfg.base_url);
}

std::string to_string(ModelTag tag) { return tag == ModelTag::raw ? "raw" : "lora"; }

std::vector<std::vector<double>> embed_batch(const std::vector<std::string>& texts,
                                             const EndpointConfig& cfg) {
    validate(cfg);
    std::vector<std::vector<double>> out;
    out.reserve(texts.size());
    if (texts.empty()) return out;

    const SplitUrl url = split_url(cfg.base_url);
    const httplib::Headers headers = auth_headers(cfg);
    httplib::Client cli(url.host);
    configure(cli, cfg);

    std::size_t dim = 0;
    for (std::size_t begin = 0; begin < texts.size();
         begin += static_cast<std::size_t>(cfg.max_batch)) {
        const std::size_t end =
            std::min(texts.size(), begin + static_cast<std::size_t>(cfg.max_batch));
        nlohmann::json body{{"model", cfg.model_name},
                            {"input", std::vector<std::string>(texts.begin() + begin,
                                                               texts.begin() + end)}};
        const std::string payload = body.dump();

        httplib::Result res;
        for (int attempt = 0;; ++attempt) {
            res = cli.Post(url.prefix + "/embeddings", headers, payload, "application/json");
            if (res && !retryable_status(res->status)) break;
            if (attempt >= cfg.max_retries) {
                const std::string what = res ? "HTTP " + std::to_string(res->status)
                                             : httplib::to_string(res.error());
                throw ServiceError("embedding request failed after " +
                                   std::to_string(attempt + 1) + " attempt(s): " + what);
            }
            backoff_sleep(cfg, attempt);
        }
        if (res->status != 200) {
            throw ServiceError("embedding request failed: HTTP " + std::to_string(res->status));
        }

        nlohmann::json reply = nlohmann::json::parse(res->body, nullptr, false);
        if (reply.is_discarded() || !reply.contains("data") || !reply["data"].is_array()) {
            throw ProtocolError("embedding response is not {\"data\": [...]}");
        }
        const auto& data = reply["data"];
        if (data.size() != end - begin) {
            throw ProtocolError("embedding response has " + std::to_string(data.size()) +
                                " vectors for " + std::to_string(end - begin) + " inputs");
        }
        std::vector<std::vector<double>> chunk(data.size());
        for (const auto& item : data) {
            if (!item.contains("embedding") || !item["embedding"].is_array()) {
                throw ProtocolError("embedding response item lacks \"embedding\"");
            }
            std::size_t index = &item - &data[0];
            if (item.contains("index") && item["index"].is_number_unsigned()) {
                index = item["index"].get<std::size_t>();
            }
            if (index >= chunk.size() || !chunk[index].empty()) {
                throw ProtocolError("embedding response indices are inconsistent");
            }
            chunk[index] = item["embedding"].get<std::vector<double>>();
            if (dim == 0) dim = chunk[index].size();
            if (chunk[index].size() != dim || dim == 0) {
                throw ProtocolError("embedding dimensions are inconsistent: got " +
                                    std::to_string(chunk[index].size()) + " and " +
                                    std::to_string(dim));
            }
        }
        for (auto& v : chunk) out.push_back(std::move(v));
    }
    return out;
}

namespace {

std::filesystem::path cache_path(const EndpointConfig& cfg, ModelTag tag) {
    return std::filesystem::path(cfg.cache_dir) / ("completions_" + to_string(tag) + ".jsonl");
}

/// (record_id, prompt_hash) -> output text
using Cache = std::unordered_map<std::string, std::string>;

std::string cache_key(const std::string& id, const std::string& prompt_hash) {
    return id + "\x1f" + prompt_hash;
}

Cache load_cache(const EndpointConfig& cfg, ModelTag tag) {
    Cache cache;
    if (cfg.cache_dir.empty()) return cache;
    const auto path = cache_path(cfg, tag);
    if (!std::filesystem::exists(path)) return cache;
    jsonl::for_each(path, [&](std::size_t, const nlohmann::json& j) {
        if (j.contains("id") && j.contains("prompt_hash") && j.contains("output")) {
            cache[cache_key(j["id"].get<std::string>(), j["prompt_hash"].get<std::string>())] =
                j["output"].get<std::string>();
        }
    });
    return cache;
}

} // namespace

CompletionTable complete_batch(const std::vector<CompletionRequest>& requests,
                               const EndpointConfig& cfg) {
    validate(cfg);
    CompletionTable table;
    if (requests.empty()) return table;

    ModelTag tag = requests.front().model_tag;
    for (const auto& req : requests) {
        if (req.prompt.empty()) {
            throw ConfigError("completion request \"" + req.record_id + "\" has an empty prompt");
        }
        if (req.model_tag != tag) {
            throw ConfigError("complete_batch: mixed model tags in one batch");
        }
        auto [_, inserted] = table.emplace(req.record_id, CompletionOutcome{});
        if (!inserted) {
            throw ConfigError("complete_batch: duplicate record_id \"" + req.record_id + "\"");
        }
    }

    const Cache cache = load_cache(cfg, tag);
    std::vector<std::size_t> misses;
    std::vector<std::string> hashes(requests.size());
    for (std::size_t i = 0; i < requests.size(); ++i) {
        hashes[i] = prompt_hash_hex(requests[i].prompt);
        auto it = cache.find(cache_key(requests[i].record_id, hashes[i]));
        if (it != cache.end()) {
            table[requests[i].record_id] = {true, it->second, ""};
        } else {
            misses.push_back(i);
        }
    }

    if (!misses.empty()) {
        const SplitUrl url = split_url(cfg.base_url);
        const httplib::Headers headers = auth_headers(cfg);

        std::mutex mu;
        std::atomic<std::size_t> next{0};
        auto worker = [&] {
            httplib::Client cli(url.host);
            configure(cli, cfg);
            for (;;) {
                const std::size_t slot = next.fetch_add(1);
                if (slot >= misses.size()) break;
                const CompletionRequest& req = requests[misses[slot]];
                nlohmann::json body{{"model", cfg.model_name},
                                    {"prompt", req.prompt},
                                    {"temperature", cfg.temperature},
                                    {"max_tokens", cfg.max_tokens}};
                const std::string payload = body.dump();

                CompletionOutcome outcome;
                for (int attempt = 0;; ++attempt) {
                    httplib::Result res =
                        cli.Post(url.prefix + "/completions", headers, payload,
                                 "application/json");
                    if (res && res->status == 200) {
                        nlohmann::json reply = nlohmann::json::parse(res->body, nullptr, false);
                        if (!reply.is_discarded() && reply.contains("choices") &&
                            reply["choices"].is_array() && !reply["choices"].empty() &&
                            reply["choices"][0].contains("text")) {
                            outcome.ok = true;
                            outcome.text = reply["choices"][0]["text"].get<std::string>();
                            break;
                        }
                        outcome.error = "malformed completion response";
                    } else if (res && !retryable_status(res->status)) {
                        outcome.error = "HTTP " + std::to_string(res->status);
                        break; // permanent
                    } else {
                        outcome.error = res ? "HTTP " + std::to_string(res->status)
                                            : httplib::to_string(res.error());
                    }
                    if (attempt >= cfg.max_retries) break;
                    backoff_sleep(cfg, attempt);
                }
                std::lock_guard<std::mutex> lock(mu);
                table[req.record_id] = std::move(outcome);
            }
        };

        const std::size_t workers =
            std::min<std::size_t>(static_cast<std::size_t>(cfg.max_inflight), misses.size());
        std::vector<std::thread> threads;
        threads.reserve(workers);
        for (std::size_t i = 0; i < workers; ++i) threads.emplace_back(worker);
        for (auto& t : threads) t.join();

        if (!cfg.cache_dir.empty()) {
            std::filesystem::create_directories(cfg.cache_dir);
            std::ofstream out(cache_path(cfg, tag), std::ios::app);
            for (std::size_t slot : misses) {
                const CompletionRequest& req = requests[slot];
                const CompletionOutcome& outcome = table[req.record_id];
                if (!outcome.ok) continue; // only successes are worth replaying
                out << nlohmann::json{{"id", req.record_id},
                                      {"model", cfg.model_name},
                                      {"prompt_hash", hashes[slot]},
                                      {"output", outcome.text}}
                           .dump()
                    << '\n';
            }
        }
    }
    return table;
}

} // namespace assl
