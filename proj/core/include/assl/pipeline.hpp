#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "assl/svc_clients.hpp"

namespace assl {

/// Where a stage's inputs come from: a precomputed file or a live endpoint.
struct SourceConfig {
    std::string source; // "file" | "endpoint"
    std::filesystem::path path;
    EndpointConfig endpoint;
};

struct PipelineConfig {
    std::filesystem::path corpus;
    std::filesystem::path output_dir;
    std::uint64_t seed = 0;
    int K = 6;
    std::size_t knn_k = 20;
    std::size_t stage1_target = 2000;
    std::size_t stage2_target = 4000;
    double lambda1 = 0.2, lambda2 = 0.2, lambda3 = 0.6;
    int kmeans_max_iter = 300;
    double kmeans_tol = 1e-6;
    std::string rouge_variant = "rouge-l";
    std::string profile_source = "stage2"; // or "cluster" for full-cluster centroids
    SourceConfig embedding;
    SourceConfig raw_completions;
    SourceConfig lora_completions;
};

/// Parses and validates a config file, filling documented defaults.
PipelineConfig load_config(const std::filesystem::path& path);
PipelineConfig config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);
nlohmann::json config_to_json(const PipelineConfig& cfg);

/// Hash of the resolved config; artifacts from different configs never mix.
std::string config_hash(const PipelineConfig& cfg);

enum class Stage { ingest, embed, cluster, stage1, generate, score, stage2, profiles, export_, report };
std::string to_string(Stage stage);
Stage stage_from_string(const std::string& name);
const std::vector<Stage>& all_stages();

struct StageState {
    bool complete = false;
    std::vector<std::string> artifacts; // paths relative to the run directory
    nlohmann::json counts;
};

/// Completion flags and artifact paths per stage, bound to one config hash.
/// A stage may run only when its upstream stages are complete for the same
/// hash; completion also requires the artifacts to still exist on disk, so
/// deleting downstream outputs marks them for re-run.
struct RunManifest {
    std::string config_hash;
    std::map<std::string, StageState> stages;

    bool stage_complete(const std::filesystem::path& run_dir, Stage stage) const;
};

RunManifest load_manifest(const std::filesystem::path& run_dir);
void save_manifest(const RunManifest& manifest, const std::filesystem::path& run_dir);

/// Executes exactly one stage (no-op if already complete for this config),
/// persists its artifacts under cfg.output_dir, and returns the updated
/// manifest. Missing or stale upstream stages raise StageError.
RunManifest run_stage(Stage stage, const PipelineConfig& cfg);

/// Baseline selections over whole clusters for comparison runs: method is
/// "random" or "kcenter". Requires the cluster stage.
RunManifest run_baseline(const std::string& method, std::size_t target,
                         const PipelineConfig& cfg);

} // namespace assl
