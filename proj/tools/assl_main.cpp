// assl: semantic-space data curation and expert routing.
//
// Pipeline stages run one at a time against a config file and share a run
// directory with a manifest, so a full run is a sequence of
//   assl ingest --config cfg.json
//   assl embed --config cfg.json
//   ... cluster, stage1, generate, score, stage2, profiles, export, report
// plus `assl route` for querying the built expert profiles.

#include <cmath>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "assl/corpus.hpp"
#include "assl/errors.hpp"
#include "assl/jsonl.hpp"
#include "assl/pipeline.hpp"
#include "assl/router.hpp"
#include "assl/svc_clients.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitStage = 3;
constexpr int kExitService = 4;

void print_stage_summary(assl::Stage stage, const assl::RunManifest& manifest) {
    const auto it = manifest.stages.find(assl::to_string(stage));
    nlohmann::json j{{"stage", assl::to_string(stage)},
                     {"config_hash", manifest.config_hash},
                     {"complete", it != manifest.stages.end() && it->second.complete}};
    if (it != manifest.stages.end()) j["counts"] = it->second.counts;
    std::cout << j.dump() << std::endl;
}

std::vector<double> normalized(std::vector<double> v) {
    double sq = 0.0;
    for (double x : v) sq += x * x;
    if (sq == 0.0) throw assl::ConfigError("query embedding has zero norm");
    const double inv = 1.0 / std::sqrt(sq);
    for (double& x : v) x *= inv;
    return v;
}

struct RouteQuery {
    std::string id;
    std::optional<std::vector<double>> embedding;
    std::string text;
};

RouteQuery parse_query(const nlohmann::json& j) {
    RouteQuery q;
    q.id = j.value("id", std::string{});
    if (j.contains("embedding") && j["embedding"].is_array()) {
        q.embedding = j["embedding"].get<std::vector<double>>();
    } else if (j.contains("text") && j["text"].is_string()) {
        q.text = j["text"].get<std::string>();
        if (q.text.empty()) throw assl::ConfigError("query text is empty");
    } else {
        throw assl::ConfigError("query needs \"embedding\" or \"text\"");
    }
    return q;
}

int run_route(const std::string& profiles_dir, const std::string& text, const std::string& file,
              bool serve, const std::string& config_path) {
    const auto profiles = assl::load_profiles(profiles_dir);

    std::optional<assl::EndpointConfig> embedder;
    if (!config_path.empty()) {
        const assl::PipelineConfig cfg = assl::load_config(config_path);
        if (cfg.embedding.source == "endpoint") embedder = cfg.embedding.endpoint;
    }
    auto embed_one = [&](const std::string& t) {
        if (!embedder) {
            throw assl::ConfigError(
                "routing raw text needs an embedding endpoint: pass --config whose "
                "\"embedding\" source is \"endpoint\", or supply query embeddings directly");
        }
        return assl::embed_batch({t}, *embedder).front();
    };
    auto answer = [&](const RouteQuery& q) {
        const std::vector<double> vec =
            normalized(q.embedding ? *q.embedding : embed_one(q.text));
        if (vec.size() != profiles.front().embedding.size()) {
            throw assl::ConfigError("query dimension " + std::to_string(vec.size()) +
                                    " does not match profiles");
        }
        nlohmann::json out = assl::route_decision_json(assl::route(vec, profiles));
        if (!q.id.empty()) out["id"] = q.id;
        return out;
    };

    if (!text.empty()) {
        RouteQuery q;
        q.id = "query";
        q.text = text;
        std::cout << answer(q).dump() << std::endl;
        return kExitOk;
    }
    if (!file.empty()) {
        std::vector<RouteQuery> queries;
        assl::jsonl::for_each(file, [&](std::size_t, const nlohmann::json& j) {
            queries.push_back(parse_query(j));
        });
        for (const auto& q : queries) std::cout << answer(q).dump() << '\n';
        std::cout.flush();
        return kExitOk;
    }
    if (serve) {
        std::string line;
        while (std::getline(std::cin, line)) {
            if (line.empty()) continue;
            nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
            if (j.is_discarded()) {
                std::cout << nlohmann::json{{"error", "malformed JSON"}}.dump() << std::endl;
                continue;
            }
            try {
                std::cout << answer(parse_query(j)).dump() << std::endl;
            } catch (const std::exception& e) {
                nlohmann::json err{{"error", e.what()}};
                if (j.contains("id")) err["id"] = j["id"];
                std::cout << err.dump() << std::endl;
            }
        }
        return kExitOk;
    }
    throw assl::ConfigError("route needs one of --text, --file, or --serve");
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Adaptive semantic-space data curation and expert routing"};
    app.require_subcommand(1);

    std::string config_path;
    std::string run_dir;
    std::string profiles_dir;
    std::string route_text;
    std::string route_file;
    bool route_serve = false;
    std::string baseline_method;
    std::size_t baseline_target = 0;

    for (assl::Stage stage : assl::all_stages()) {
        if (stage == assl::Stage::report) continue; // registered below with --run
        CLI::App* sub = app.add_subcommand(assl::to_string(stage),
                                           "Run the " + assl::to_string(stage) + " stage");
        sub->add_option("--config", config_path, "Pipeline config JSON")->required();
    }

    CLI::App* report = app.add_subcommand("report", "Emit machine-readable run reports");
    report->add_option("--config", config_path, "Pipeline config JSON");
    report->add_option("--run", run_dir, "Run directory holding resolved_config.json");

    CLI::App* route = app.add_subcommand("route", "Route queries to the nearest expert");
    route->add_option("--profiles", profiles_dir, "Directory written by the profiles stage")
        ->required();
    route->add_option("--text", route_text, "Route a single text query");
    route->add_option("--file", route_file, "Route queries from a line-delimited JSON file");
    route->add_flag("--serve", route_serve, "Read queries from stdin, answer on stdout");
    route->add_option("--config", config_path, "Config providing the embedding endpoint");

    CLI::App* baseline = app.add_subcommand("baseline", "Whole-cluster baseline selections");
    baseline->add_option("--config", config_path, "Pipeline config JSON")->required();
    baseline->add_option("--method", baseline_method, "random or kcenter")->required();
    baseline->add_option("--target", baseline_target, "Per-cluster target (default stage1_target)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (route->parsed()) {
            return run_route(profiles_dir, route_text, route_file, route_serve, config_path);
        }
        if (baseline->parsed()) {
            const assl::PipelineConfig cfg = assl::load_config(config_path);
            const std::size_t target =
                baseline_target == 0 ? cfg.stage1_target : baseline_target;
            assl::run_baseline(baseline_method, target, cfg);
            std::cout << nlohmann::json{{"baseline", baseline_method}, {"target", target}}.dump()
                      << std::endl;
            return kExitOk;
        }
        if (report->parsed()) {
            if (config_path.empty() && run_dir.empty()) {
                throw assl::ConfigError("report needs --config or --run");
            }
            const assl::PipelineConfig cfg =
                config_path.empty()
                    ? assl::load_config(std::filesystem::path(run_dir) / "resolved_config.json")
                    : assl::load_config(config_path);
            print_stage_summary(assl::Stage::report, assl::run_stage(assl::Stage::report, cfg));
            return kExitOk;
        }
        for (assl::Stage stage : assl::all_stages()) {
            CLI::App* sub = app.get_subcommand(assl::to_string(stage));
            if (sub->parsed()) {
                const assl::PipelineConfig cfg = assl::load_config(config_path);
                print_stage_summary(stage, assl::run_stage(stage, cfg));
                return kExitOk;
            }
        }
        throw assl::ConfigError("no subcommand given");
    } catch (const assl::StageError& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return kExitStage;
    } catch (const assl::ServiceError& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return kExitService;
    } catch (const assl::ConfigError& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 1;
    }
}
