#include "assl/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <set>
#include <unordered_map>
#include <unordered_set>

#include <fcntl.h>
#include <unistd.h>

#include "assl/cluster.hpp"
#include "assl/corpus.hpp"
#include "assl/density.hpp"
#include "assl/errors.hpp"
#include "assl/jsonl.hpp"
#include "assl/rng.hpp"
#include "assl/router.hpp"
#include "assl/scoring.hpp"
#include "assl/select.hpp"

namespace assl {

namespace fs = std::filesystem;

namespace {

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

void reject_unknown_keys(const nlohmann::json& j, const std::set<std::string>& allowed,
                         const std::string& where) {
    for (const auto& [key, _] : j.items()) {
        if (!allowed.count(key)) {
            throw ConfigError("unknown config key \"" + key + "\" in " + where);
        }
    }
}

EndpointConfig endpoint_from_json(const nlohmann::json& j, const std::string& where) {
    reject_unknown_keys(j,
                        {"base_url", "api_key_env", "model", "timeout_s", "max_batch",
                         "max_retries", "max_inflight", "backoff_ms", "temperature",
                         "max_tokens", "cache_dir"},
                        where);
    EndpointConfig cfg;
    cfg.base_url = j.value("base_url", std::string{});
    cfg.api_key_env = j.value("api_key_env", std::string{});
    cfg.model_name = j.value("model", std::string{});
    cfg.timeout_s = j.value("timeout_s", cfg.timeout_s);
    cfg.max_batch = j.value("max_batch", cfg.max_batch);
    cfg.max_retries = j.value("max_retries", cfg.max_retries);
    cfg.max_inflight = j.value("max_inflight", cfg.max_inflight);
    cfg.backoff_ms = j.value("backoff_ms", cfg.backoff_ms);
    cfg.temperature = j.value("temperature", cfg.temperature);
    cfg.max_tokens = j.value("max_tokens", cfg.max_tokens);
    cfg.cache_dir = j.value("cache_dir", std::string{});
    validate(cfg);
    return cfg;
}

nlohmann::json endpoint_to_json(const EndpointConfig& cfg) {
    return {{"base_url", cfg.base_url},
            {"api_key_env", cfg.api_key_env},
            {"model", cfg.model_name},
            {"timeout_s", cfg.timeout_s},
            {"max_batch", cfg.max_batch},
            {"max_retries", cfg.max_retries},
            {"max_inflight", cfg.max_inflight},
            {"backoff_ms", cfg.backoff_ms},
            {"temperature", cfg.temperature},
            {"max_tokens", cfg.max_tokens},
            {"cache_dir", cfg.cache_dir}};
}

SourceConfig source_from_json(const nlohmann::json& j, const fs::path& base_dir,
                              const std::string& where) {
    reject_unknown_keys(j, {"source", "path", "endpoint"}, where);
    SourceConfig src;
    src.source = j.value("source", std::string{});
    if (src.source == "file") {
        if (!j.contains("path") || !j["path"].is_string()) {
            throw ConfigError(where + ": source \"file\" needs a \"path\"");
        }
        fs::path p = j["path"].get<std::string>();
        src.path = p.is_absolute() ? p : base_dir / p;
    } else if (src.source == "endpoint") {
        if (!j.contains("endpoint")) {
            throw ConfigError(where + ": source \"endpoint\" needs an \"endpoint\" object");
        }
        src.endpoint = endpoint_from_json(j["endpoint"], where + ".endpoint");
        if (src.endpoint.model_name.empty()) {
            throw ConfigError(where + ".endpoint: \"model\" is required");
        }
    } else if (!src.source.empty()) {
        throw ConfigError(where + ": source must be \"file\" or \"endpoint\"");
    }
    return src;
}

nlohmann::json source_to_json(const SourceConfig& src) {
    nlohmann::json j{{"source", src.source}};
    if (src.source == "file") j["path"] = src.path.string();
    if (src.source == "endpoint") j["endpoint"] = endpoint_to_json(src.endpoint);
    return j;
}

// ---------------------------------------------------------------------------
// Run directory plumbing
// ---------------------------------------------------------------------------

/// Exclusive ownership of a run directory for the duration of one stage.
class RunLock {
public:
    explicit RunLock(const fs::path& dir) : path_(dir / ".lock") {
        fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd_ < 0) {
            throw ConfigError("run directory " + dir.string() +
                              " is locked by another run; remove " + path_.string() +
                              " if that run is gone");
        }
    }
    ~RunLock() {
        if (fd_ >= 0) {
            ::close(fd_);
            ::unlink(path_.c_str());
        }
    }
    RunLock(const RunLock&) = delete;
    RunLock& operator=(const RunLock&) = delete;

private:
    fs::path path_;
    int fd_ = -1;
};

std::vector<Stage> deps(Stage stage) {
    switch (stage) {
        case Stage::ingest: return {};
        case Stage::embed: return {Stage::ingest};
        case Stage::cluster: return {Stage::embed};
        case Stage::stage1: return {Stage::cluster};
        case Stage::generate: return {Stage::stage1};
        case Stage::score: return {Stage::generate};
        case Stage::stage2: return {Stage::score};
        case Stage::profiles: return {Stage::stage2};
        case Stage::export_: return {Stage::stage2};
        case Stage::report: return {Stage::stage1, Stage::stage2, Stage::profiles};
    }
    return {};
}

struct LoadedCorpus {
    std::vector<Record> records;
    CorpusMatrix matrix; // normalized
};

std::vector<Record> run_records(const fs::path& dir) { return load_corpus(dir / "corpus.jsonl"); }

LoadedCorpus load_normalized(const fs::path& dir) {
    LoadedCorpus lc;
    lc.records = run_records(dir);
    lc.matrix = normalize(attach_embeddings(lc.records, load_embedding_table(dir / "embeddings.bin")));
    return lc;
}

/// Per-cluster candidate pools: cluster members minus the stage-1 selection,
/// in ascending row order (noise points stay in the pool).
std::vector<std::vector<std::string>> compute_pools(const CorpusMatrix& matrix,
                                                    const ClusterModel& model,
                                                    const SelectionSet& stage1) {
    std::unordered_set<std::string> selected;
    for (const auto& ids : stage1.per_cluster) selected.insert(ids.begin(), ids.end());
    std::vector<std::vector<std::string>> pools(model.K);
    const auto members = members_by_cluster(model);
    for (int k = 0; k < model.K; ++k) {
        for (std::size_t row : members[k]) {
            const std::string& id = matrix.id_of(row);
            if (!selected.count(id)) pools[k].push_back(id);
        }
    }
    return pools;
}

std::vector<std::string> flatten(const std::vector<std::vector<std::string>>& per_cluster) {
    std::vector<std::string> flat;
    for (const auto& ids : per_cluster) flat.insert(flat.end(), ids.begin(), ids.end());
    return flat;
}

std::unordered_map<std::string, const Record*> index_records(const std::vector<Record>& records) {
    std::unordered_map<std::string, const Record*> by_id;
    by_id.reserve(records.size());
    for (const auto& r : records) by_id.emplace(r.id, &r);
    return by_id;
}

OutputTable completion_to_output(const CompletionTable& completions) {
    OutputTable table;
    table.reserve(completions.size());
    for (const auto& [id, outcome] : completions) {
        table.emplace(id, outcome.ok ? std::optional<std::string>(outcome.text) : std::nullopt);
    }
    return table;
}

// ---------------------------------------------------------------------------
// Stage bodies. Each fills the manifest entry for its stage.
// ---------------------------------------------------------------------------

void exec_ingest(const PipelineConfig& cfg, StageState& state) {
    const std::vector<Record> records = load_corpus(cfg.corpus);
    save_corpus(records, cfg.output_dir / "corpus.jsonl");
    std::map<std::string, std::size_t> sources;
    for (const auto& r : records) ++sources[r.source];
    state.artifacts = {"corpus.jsonl"};
    state.counts = {{"records", records.size()}, {"sources", sources}};
}

void exec_embed(const PipelineConfig& cfg, StageState& state) {
    const std::vector<Record> records = run_records(cfg.output_dir);
    CorpusMatrix matrix;
    if (cfg.embedding.source == "file") {
        matrix = attach_embeddings(records, load_embedding_table(cfg.embedding.path));
        save_embeddings(matrix, cfg.output_dir / "embeddings.bin");
    } else if (cfg.embedding.source == "endpoint") {
        std::vector<std::string> texts;
        texts.reserve(records.size());
        for (const auto& r : records) texts.push_back(embedded_text(r));
        const auto vectors = embed_batch(texts, cfg.embedding.endpoint);
        std::vector<std::string> ids;
        ids.reserve(records.size());
        for (const auto& r : records) ids.push_back(r.id);
        save_embeddings(ids, vectors, cfg.output_dir / "embeddings.bin");
        matrix = attach_embeddings(records, load_embedding_table(cfg.output_dir / "embeddings.bin"));
    } else {
        throw ConfigError("config \"embedding\" must set source \"file\" or \"endpoint\"");
    }
    state.artifacts = {"embeddings.bin", "embeddings.bin.ids"};
    state.counts = {{"records", matrix.rows()}, {"dim", matrix.dim()}};
}

void exec_cluster(const PipelineConfig& cfg, StageState& state) {
    const LoadedCorpus lc = load_normalized(cfg.output_dir);
    const ClusterModel model = kmeans(lc.matrix, cfg.K, rng::derive_seed(cfg.seed, "cluster"),
                                      cfg.kmeans_max_iter, cfg.kmeans_tol);
    save_cluster_model(model, lc.matrix, cfg.output_dir / "cluster");
    std::vector<std::size_t> sizes(cfg.K, 0);
    for (int k : model.assignment) ++sizes[k];
    state.artifacts = {"cluster/assignments.json", "cluster/centroids.bin",
                       "cluster/centroids.bin.ids"};
    state.counts = {{"per_cluster", sizes}, {"wcss", model.wcss}, {"iterations", model.iterations}};
}

void exec_stage1(const PipelineConfig& cfg, const std::string& hash, StageState& state) {
    const LoadedCorpus lc = load_normalized(cfg.output_dir);
    const ClusterModel model = load_cluster_model(cfg.output_dir / "cluster", lc.matrix);
    const auto members = members_by_cluster(model);

    fs::create_directories(cfg.output_dir / "stage1");
    SelectionSet selection;
    selection.stage = SelectionStage::stage1;
    selection.per_cluster.resize(model.K);
    selection.config_hash = hash;
    selection.seed = cfg.seed;

    jsonl::Writer report(cfg.output_dir / "stage1" / "density_report.jsonl");
    std::vector<std::size_t> counts(model.K, 0);
    for (int k = 0; k < model.K; ++k) {
        const std::uint64_t seed_k = rng::derive_seed(cfg.seed, "stage1:" + std::to_string(k));
        nlohmann::json line;
        if (members[k].size() > cfg.knn_k) {
            const CorpusMatrix sub = lc.matrix.submatrix(members[k]);
            const AdbscanResult result = adbscan(sub, cfg.knn_k);
            std::vector<SubCluster> capped;
            if (!result.subclusters.empty()) {
                capped = handle_subclusters(result.subclusters, seed_k);
            }
            selection.per_cluster[k] = stage1_select(capped, cfg.stage1_target, seed_k);
            line = density_report_json(k, result);
            line["fallback"] = false;
        } else {
            // Too few points for a KNN density estimate: treat the whole
            // cluster as one sub-cluster and sample from it.
            SubCluster sc;
            for (std::size_t row : members[k]) sc.members.push_back(lc.matrix.id_of(row));
            if (sc.members.empty()) {
                throw StageError("cluster " + std::to_string(k) + " is empty");
            }
            sc.seed_id = sc.members.front();
            selection.per_cluster[k] = stage1_select({sc}, cfg.stage1_target, seed_k);
            line = {{"cluster", k}, {"fallback", true}, {"subclusters", 1},
                    {"noise", 0}, {"size_histogram", nlohmann::json::array()}};
        }
        counts[k] = selection.per_cluster[k].size();
        line["selected"] = counts[k];
        report.write(line);
    }
    save_selection(selection, cfg.output_dir / "stage1" / "selection.jsonl");
    state.artifacts = {"stage1/selection.jsonl", "stage1/density_report.jsonl"};
    state.counts = {{"per_cluster", counts}};
}

void exec_generate(const PipelineConfig& cfg, StageState& state) {
    const LoadedCorpus lc = load_normalized(cfg.output_dir);
    const ClusterModel model = load_cluster_model(cfg.output_dir / "cluster", lc.matrix);
    const SelectionSet stage1 = load_selection(cfg.output_dir / "stage1" / "selection.jsonl");
    const std::vector<std::string> pool = flatten(compute_pools(lc.matrix, model, stage1));
    const auto by_id = index_records(lc.records);

    fs::create_directories(cfg.output_dir / "generate");
    nlohmann::json failed_counts = nlohmann::json::object();
    for (ModelTag tag : {ModelTag::raw, ModelTag::lora}) {
        const SourceConfig& src = tag == ModelTag::raw ? cfg.raw_completions : cfg.lora_completions;
        const std::string name = to_string(tag);
        OutputTable table;
        if (src.source == "file") {
            table = load_output_table(src.path);
            std::vector<std::string> missing;
            for (const auto& id : pool) {
                if (!table.count(id)) missing.push_back(id);
            }
            if (!missing.empty()) {
                std::string msg = src.path.string() + " lacks outputs for " +
                                  std::to_string(missing.size()) + " pool record(s):";
                for (std::size_t i = 0; i < missing.size() && i < 5; ++i) {
                    msg += " \"" + missing[i] + "\"";
                }
                throw ConfigError(msg);
            }
        } else if (src.source == "endpoint") {
            EndpointConfig endpoint = src.endpoint;
            if (endpoint.cache_dir.empty()) {
                endpoint.cache_dir = (cfg.output_dir / "cache").string();
            }
            std::vector<CompletionRequest> requests;
            requests.reserve(pool.size());
            for (const auto& id : pool) {
                requests.push_back({id, embedded_text(*by_id.at(id)), tag});
            }
            table = completion_to_output(complete_batch(requests, endpoint));
        } else {
            throw ConfigError("config \"completions." + name +
                              "\" must set source \"file\" or \"endpoint\"");
        }
        save_output_table(pool, table, cfg.output_dir / "generate" / (name + "_outputs.jsonl"));
        std::size_t failed = 0;
        for (const auto& id : pool) {
            if (!table.at(id).has_value()) ++failed;
        }
        failed_counts[name] = failed;
    }
    state.artifacts = {"generate/raw_outputs.jsonl", "generate/lora_outputs.jsonl"};
    state.counts = {{"pool", pool.size()}, {"failed", failed_counts}};
}

void exec_score(const PipelineConfig& cfg, StageState& state) {
    const LoadedCorpus lc = load_normalized(cfg.output_dir);
    const ClusterModel model = load_cluster_model(cfg.output_dir / "cluster", lc.matrix);
    const SelectionSet stage1 = load_selection(cfg.output_dir / "stage1" / "selection.jsonl");
    const std::vector<std::string> pool = flatten(compute_pools(lc.matrix, model, stage1));
    const auto by_id = index_records(lc.records);

    std::vector<Record> pool_records;
    pool_records.reserve(pool.size());
    for (const auto& id : pool) pool_records.push_back(*by_id.at(id));

    const OutputTable raw = load_output_table(cfg.output_dir / "generate" / "raw_outputs.jsonl");
    const OutputTable lora = load_output_table(cfg.output_dir / "generate" / "lora_outputs.jsonl");
    const ScoredPool scored =
        score_pool(pool_records, raw, lora, rouge_variant_from_string(cfg.rouge_variant));

    fs::create_directories(cfg.output_dir / "score");
    save_scores_csv(scored.scores, cfg.output_dir / "score" / "scores.csv");
    jsonl::Writer excluded(cfg.output_dir / "score" / "excluded.jsonl");
    for (const auto& [id, reason] : scored.excluded) {
        excluded.write({{"id", id}, {"reason", reason}});
    }
    state.artifacts = {"score/scores.csv", "score/excluded.jsonl"};
    state.counts = {{"scored", scored.scores.size()}, {"excluded", scored.excluded.size()}};
}

void exec_stage2(const PipelineConfig& cfg, const std::string& hash, StageState& state) {
    const LoadedCorpus lc = load_normalized(cfg.output_dir);
    const ClusterModel model = load_cluster_model(cfg.output_dir / "cluster", lc.matrix);
    const SelectionSet stage1 = load_selection(cfg.output_dir / "stage1" / "selection.jsonl");
    const auto pools = compute_pools(lc.matrix, model, stage1);

    ScoreMap scores;
    for (const auto& t : load_scores_csv(cfg.output_dir / "score" / "scores.csv")) {
        scores.emplace(t.record_id, t.llm);
    }

    const MmrWeights weights{cfg.lambda1, cfg.lambda2, cfg.lambda3};
    SelectionSet selection;
    selection.stage = SelectionStage::stage2;
    selection.per_cluster.resize(model.K);
    selection.config_hash = hash;
    selection.seed = cfg.seed;

    std::vector<std::size_t> counts(model.K, 0);
    std::vector<bool> exhausted(model.K, false);
    for (int k = 0; k < model.K; ++k) {
        // Only scored candidates are selectable; records excluded by scoring
        // stay out of stage 2.
        std::vector<std::string> candidates;
        candidates.reserve(pools[k].size());
        for (const auto& id : pools[k]) {
            if (scores.count(id)) candidates.push_back(id);
        }
        const MmrResult result =
            mmr_greedy(candidates, stage1.per_cluster[k], model.centroids[k], lc.matrix, scores,
                       weights, cfg.stage2_target);
        selection.per_cluster[k] = stage1.per_cluster[k];
        selection.per_cluster[k].insert(selection.per_cluster[k].end(), result.added.begin(),
                                        result.added.end());
        counts[k] = selection.per_cluster[k].size();
        exhausted[k] = result.exhausted;
    }
    fs::create_directories(cfg.output_dir / "stage2");
    save_selection(selection, cfg.output_dir / "stage2" / "selection.jsonl");
    state.artifacts = {"stage2/selection.jsonl"};
    state.counts = {{"per_cluster", counts}, {"exhausted", exhausted}};
}

void exec_profiles(const PipelineConfig& cfg, StageState& state) {
    const LoadedCorpus lc = load_normalized(cfg.output_dir);
    std::vector<std::vector<std::string>> per_cluster;
    std::string ref;
    if (cfg.profile_source == "stage2") {
        const SelectionSet stage2 = load_selection(cfg.output_dir / "stage2" / "selection.jsonl");
        per_cluster = stage2.per_cluster;
        ref = "stage2/selection.jsonl";
    } else {
        const ClusterModel model = load_cluster_model(cfg.output_dir / "cluster", lc.matrix);
        per_cluster.resize(model.K);
        const auto members = members_by_cluster(model);
        for (int k = 0; k < model.K; ++k) {
            for (std::size_t row : members[k]) per_cluster[k].push_back(lc.matrix.id_of(row));
        }
        ref = "cluster/assignments.json";
    }
    const auto profiles = build_profiles(per_cluster, lc.matrix, ref);
    save_profiles(profiles, cfg.output_dir / "profiles");
    std::vector<std::size_t> counts;
    for (const auto& p : profiles) counts.push_back(p.count);
    state.artifacts = {"profiles/profiles.json", "profiles/profiles.emb",
                       "profiles/profiles.emb.ids"};
    state.counts = {{"experts", profiles.size()}, {"per_cluster", counts}};
}

void exec_export(const PipelineConfig& cfg, StageState& state) {
    const std::vector<Record> records = run_records(cfg.output_dir);
    const auto by_id = index_records(records);
    const SelectionSet stage2 = load_selection(cfg.output_dir / "stage2" / "selection.jsonl");

    fs::create_directories(cfg.output_dir / "export");
    std::vector<std::size_t> counts;
    for (std::size_t k = 0; k < stage2.per_cluster.size(); ++k) {
        std::vector<Record> chosen;
        chosen.reserve(stage2.per_cluster[k].size());
        for (const auto& id : stage2.per_cluster[k]) chosen.push_back(*by_id.at(id));
        const std::string name = "export/expert_" + std::to_string(k) + ".jsonl";
        save_corpus(chosen, cfg.output_dir / name);
        state.artifacts.push_back(name);
        counts.push_back(chosen.size());
    }
    state.counts = {{"per_cluster", counts}};
}

void exec_report(const PipelineConfig& cfg, StageState& state) {
    const LoadedCorpus lc = load_normalized(cfg.output_dir);
    const ClusterModel model = load_cluster_model(cfg.output_dir / "cluster", lc.matrix);
    const SelectionSet stage1 = load_selection(cfg.output_dir / "stage1" / "selection.jsonl");
    const SelectionSet stage2 = load_selection(cfg.output_dir / "stage2" / "selection.jsonl");
    const auto profiles = load_profiles(cfg.output_dir / "profiles");
    const auto by_id = index_records(lc.records);

    const fs::path report_dir = cfg.output_dir / "report";
    fs::create_directories(report_dir);

    // Per-cluster source mix at each stage.
    {
        std::map<std::tuple<std::string, int, std::string>, std::size_t> mix;
        const auto members = members_by_cluster(model);
        for (int k = 0; k < model.K; ++k) {
            for (std::size_t row : members[k]) {
                ++mix[{"all", k, by_id.at(lc.matrix.id_of(row))->source}];
            }
        }
        auto add_stage = [&](const char* name, const SelectionSet& s) {
            for (std::size_t k = 0; k < s.per_cluster.size(); ++k) {
                for (const auto& id : s.per_cluster[k]) {
                    ++mix[{name, static_cast<int>(k), by_id.at(id)->source}];
                }
            }
        };
        add_stage("stage1", stage1);
        add_stage("stage2", stage2);
        std::ofstream out(report_dir / "source_mix.csv");
        out << "stage,cluster,source,count\n";
        for (const auto& [key, count] : mix) {
            out << std::get<0>(key) << ',' << std::get<1>(key) << ',' << std::get<2>(key) << ','
                << count << '\n';
        }
    }

    fs::copy_file(cfg.output_dir / "stage1" / "density_report.jsonl",
                  report_dir / "density_report.jsonl", fs::copy_options::overwrite_existing);

    // Routing diagnostics: held-out confusion matrix and training consistency.
    std::unordered_set<std::string> in_stage2;
    for (const auto& ids : stage2.per_cluster) in_stage2.insert(ids.begin(), ids.end());

    std::vector<std::vector<std::size_t>> confusion(
        model.K, std::vector<std::size_t>(profiles.size(), 0));
    std::vector<std::size_t> train_total(model.K, 0), train_home(model.K, 0);
    std::size_t held_out = 0, held_out_home = 0;
    for (std::size_t row = 0; row < lc.matrix.rows(); ++row) {
        const int home = model.assignment[row];
        const RouteDecision d = route(lc.matrix.row(row), profiles);
        if (in_stage2.count(lc.matrix.id_of(row))) {
            ++train_total[home];
            if (d.expert_id == home) ++train_home[home];
        } else {
            ++confusion[home][static_cast<std::size_t>(d.expert_id)];
            ++held_out;
            if (d.expert_id == home) ++held_out_home;
        }
    }
    {
        std::ofstream out(report_dir / "routing_confusion.csv");
        out << "home_cluster";
        for (const auto& p : profiles) out << ",expert_" << p.expert_id;
        out << '\n';
        for (int k = 0; k < model.K; ++k) {
            out << k;
            for (std::size_t e = 0; e < profiles.size(); ++e) out << ',' << confusion[k][e];
            out << '\n';
        }
    }
    {
        std::size_t total = 0, home_hits = 0;
        nlohmann::json per_cluster = nlohmann::json::array();
        for (int k = 0; k < model.K; ++k) {
            total += train_total[k];
            home_hits += train_home[k];
            per_cluster.push_back(train_total[k] == 0
                                      ? 0.0
                                      : static_cast<double>(train_home[k]) /
                                            static_cast<double>(train_total[k]));
        }
        nlohmann::json summary{
            {"training_consistency",
             total == 0 ? 0.0 : static_cast<double>(home_hits) / static_cast<double>(total)},
            {"training_consistency_per_cluster", per_cluster},
            {"held_out_records", held_out},
            {"held_out_consistency",
             held_out == 0 ? 0.0
                           : static_cast<double>(held_out_home) / static_cast<double>(held_out)}};
        std::ofstream out(report_dir / "routing_summary.json");
        out << summary.dump(2) << '\n';
    }

    // Selection counts per stage.
    {
        std::vector<std::size_t> all_counts(model.K, 0);
        for (int k : model.assignment) ++all_counts[k];
        auto stage_counts = [](const SelectionSet& s) {
            std::vector<std::size_t> counts;
            for (const auto& ids : s.per_cluster) counts.push_back(ids.size());
            return counts;
        };
        std::size_t stage2_total = 0;
        for (const auto& ids : stage2.per_cluster) stage2_total += ids.size();
        nlohmann::json j{{"corpus", lc.records.size()},
                         {"per_cluster_all", all_counts},
                         {"per_cluster_stage1", stage_counts(stage1)},
                         {"per_cluster_stage2", stage_counts(stage2)},
                         {"stage2_total", stage2_total},
                         {"stage2_fraction", lc.records.empty()
                                                 ? 0.0
                                                 : static_cast<double>(stage2_total) /
                                                       static_cast<double>(lc.records.size())}};
        std::ofstream out(report_dir / "selection_counts.json");
        out << j.dump(2) << '\n';
    }

    state.artifacts = {"report/source_mix.csv", "report/density_report.jsonl",
                       "report/routing_confusion.csv", "report/routing_summary.json",
                       "report/selection_counts.json"};
    state.counts = {{"held_out", held_out}};
}

RunManifest open_run(const PipelineConfig& cfg, const std::string& hash) {
    fs::create_directories(cfg.output_dir);
    RunManifest manifest;
    if (fs::exists(cfg.output_dir / "manifest.json")) {
        manifest = load_manifest(cfg.output_dir);
        if (manifest.config_hash != hash) {
            throw StageError("run directory " + cfg.output_dir.string() +
                             " holds artifacts for config hash " + manifest.config_hash +
                             ", but the current config hashes to " + hash +
                             "; re-run the pipeline in a clean output_dir");
        }
    } else {
        manifest.config_hash = hash;
    }
    std::ofstream out(cfg.output_dir / "resolved_config.json");
    out << config_to_json(cfg).dump(2) << '\n';
    return manifest;
}

} // namespace

// ---------------------------------------------------------------------------
// Public surface
// ---------------------------------------------------------------------------

PipelineConfig config_from_json(const nlohmann::json& j, const fs::path& base_dir) {
    reject_unknown_keys(j,
                        {"corpus", "output_dir", "seed", "K", "knn_k", "stage1_target",
                         "stage2_target", "mmr_weights", "kmeans", "rouge_variant",
                         "profile_source", "embedding", "completions"},
                        "config");
    PipelineConfig cfg;
    if (!j.contains("corpus") || !j["corpus"].is_string()) {
        throw ConfigError("config needs a \"corpus\" path");
    }
    if (!j.contains("output_dir") || !j["output_dir"].is_string()) {
        throw ConfigError("config needs an \"output_dir\"");
    }
    fs::path corpus = j["corpus"].get<std::string>();
    cfg.corpus = corpus.is_absolute() ? corpus : base_dir / corpus;
    fs::path out = j["output_dir"].get<std::string>();
    cfg.output_dir = out.is_absolute() ? out : base_dir / out;

    cfg.seed = j.value("seed", cfg.seed);
    cfg.K = j.value("K", cfg.K);
    cfg.knn_k = j.value("knn_k", cfg.knn_k);
    cfg.stage1_target = j.value("stage1_target", cfg.stage1_target);
    cfg.stage2_target = j.value("stage2_target", cfg.stage2_target);
    if (j.contains("mmr_weights")) {
        const auto& w = j["mmr_weights"];
        if (!w.is_array() || w.size() != 3) {
            throw ConfigError("mmr_weights must be [lambda1, lambda2, lambda3]");
        }
        cfg.lambda1 = w[0].get<double>();
        cfg.lambda2 = w[1].get<double>();
        cfg.lambda3 = w[2].get<double>();
    }
    if (j.contains("kmeans")) {
        reject_unknown_keys(j["kmeans"], {"max_iter", "tol"}, "config.kmeans");
        cfg.kmeans_max_iter = j["kmeans"].value("max_iter", cfg.kmeans_max_iter);
        cfg.kmeans_tol = j["kmeans"].value("tol", cfg.kmeans_tol);
    }
    cfg.rouge_variant = j.value("rouge_variant", cfg.rouge_variant);
    cfg.profile_source = j.value("profile_source", cfg.profile_source);
    if (j.contains("embedding")) {
        cfg.embedding = source_from_json(j["embedding"], base_dir, "config.embedding");
    }
    if (j.contains("completions")) {
        reject_unknown_keys(j["completions"], {"raw", "lora"}, "config.completions");
        if (j["completions"].contains("raw")) {
            cfg.raw_completions =
                source_from_json(j["completions"]["raw"], base_dir, "config.completions.raw");
        }
        if (j["completions"].contains("lora")) {
            cfg.lora_completions =
                source_from_json(j["completions"]["lora"], base_dir, "config.completions.lora");
        }
    }

    if (cfg.K < 1) throw ConfigError("K must be >= 1");
    if (cfg.knn_k < 1) throw ConfigError("knn_k must be >= 1");
    if (cfg.stage1_target == 0) throw ConfigError("stage1_target must be positive");
    if (cfg.stage2_target < cfg.stage1_target) {
        throw ConfigError("stage2_target must be >= stage1_target");
    }
    validate(MmrWeights{cfg.lambda1, cfg.lambda2, cfg.lambda3});
    if (cfg.kmeans_max_iter < 1) throw ConfigError("kmeans.max_iter must be >= 1");
    if (cfg.kmeans_tol < 0.0) throw ConfigError("kmeans.tol must be non-negative");
    rouge_variant_from_string(cfg.rouge_variant);
    if (cfg.profile_source != "stage2" && cfg.profile_source != "cluster") {
        throw ConfigError("profile_source must be \"stage2\" or \"cluster\"");
    }
    return cfg;
}

PipelineConfig load_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded()) throw ConfigError(path.string() + ": malformed JSON");
    return config_from_json(j, path.parent_path());
}

nlohmann::json config_to_json(const PipelineConfig& cfg) {
    return {{"corpus", cfg.corpus.string()},
            {"output_dir", cfg.output_dir.string()},
            {"seed", cfg.seed},
            {"K", cfg.K},
            {"knn_k", cfg.knn_k},
            {"stage1_target", cfg.stage1_target},
            {"stage2_target", cfg.stage2_target},
            {"mmr_weights", {cfg.lambda1, cfg.lambda2, cfg.lambda3}},
            {"kmeans", {{"max_iter", cfg.kmeans_max_iter}, {"tol", cfg.kmeans_tol}}},
            {"rouge_variant", cfg.rouge_variant},
            {"profile_source", cfg.profile_source},
            {"embedding", source_to_json(cfg.embedding)},
            {"completions",
             {{"raw", source_to_json(cfg.raw_completions)},
              {"lora", source_to_json(cfg.lora_completions)}}}};
}

std::string config_hash(const PipelineConfig& cfg) {
    // Only fields that shape artifact content participate; paths, URLs, and
    // operational knobs (timeouts, batching, cache location) do not, so runs
    // in different directories stay byte-comparable.
    auto source_key = [](const SourceConfig& src) {
        nlohmann::json j{{"source", src.source}};
        if (src.source == "endpoint") {
            j["model"] = src.endpoint.model_name;
            j["temperature"] = src.endpoint.temperature;
            j["max_tokens"] = src.endpoint.max_tokens;
        }
        return j;
    };
    const nlohmann::json j{{"seed", cfg.seed},
                           {"K", cfg.K},
                           {"knn_k", cfg.knn_k},
                           {"stage1_target", cfg.stage1_target},
                           {"stage2_target", cfg.stage2_target},
                           {"mmr_weights", {cfg.lambda1, cfg.lambda2, cfg.lambda3}},
                           {"kmeans", {{"max_iter", cfg.kmeans_max_iter}, {"tol", cfg.kmeans_tol}}},
                           {"rouge_variant", cfg.rouge_variant},
                           {"profile_source", cfg.profile_source},
                           {"embedding", source_key(cfg.embedding)},
                           {"raw", source_key(cfg.raw_completions)},
                           {"lora", source_key(cfg.lora_completions)}};
    char buf[20];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(rng::fnv1a(j.dump())));
    return buf;
}

std::string to_string(Stage stage) {
    switch (stage) {
        case Stage::ingest: return "ingest";
        case Stage::embed: return "embed";
        case Stage::cluster: return "cluster";
        case Stage::stage1: return "stage1";
        case Stage::generate: return "generate";
        case Stage::score: return "score";
        case Stage::stage2: return "stage2";
        case Stage::profiles: return "profiles";
        case Stage::export_: return "export";
        case Stage::report: return "report";
    }
    return "unknown";
}

Stage stage_from_string(const std::string& name) {
    for (Stage s : all_stages()) {
        if (to_string(s) == name) return s;
    }
    throw ConfigError("unknown stage \"" + name + "\"");
}

const std::vector<Stage>& all_stages() {
    static const std::vector<Stage> stages{Stage::ingest,   Stage::embed,  Stage::cluster,
                                           Stage::stage1,   Stage::generate, Stage::score,
                                           Stage::stage2,   Stage::profiles, Stage::export_,
                                           Stage::report};
    return stages;
}

bool RunManifest::stage_complete(const fs::path& run_dir, Stage stage) const {
    auto it = stages.find(to_string(stage));
    if (it == stages.end() || !it->second.complete) return false;
    for (const auto& artifact : it->second.artifacts) {
        if (!fs::exists(run_dir / artifact)) return false;
    }
    return true;
}

RunManifest load_manifest(const fs::path& run_dir) {
    std::ifstream in(run_dir / "manifest.json");
    if (!in) throw ConfigError("cannot open " + (run_dir / "manifest.json").string());
    nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded()) throw ConfigError((run_dir / "manifest.json").string() + ": malformed");

    RunManifest manifest;
    manifest.config_hash = j.at("config_hash").get<std::string>();
    for (const auto& [name, entry] : j.at("stages").items()) {
        StageState state;
        state.complete = entry.value("complete", false);
        state.artifacts = entry.value("artifacts", std::vector<std::string>{});
        state.counts = entry.value("counts", nlohmann::json::object());
        manifest.stages[name] = std::move(state);
    }
    return manifest;
}

void save_manifest(const RunManifest& manifest, const fs::path& run_dir) {
    nlohmann::json stages = nlohmann::json::object();
    for (const auto& [name, state] : manifest.stages) {
        stages[name] = {{"complete", state.complete},
                        {"artifacts", state.artifacts},
                        {"counts", state.counts}};
    }
    const nlohmann::json j{{"config_hash", manifest.config_hash}, {"stages", stages}};
    const fs::path tmp = run_dir / "manifest.json.tmp";
    {
        std::ofstream out(tmp);
        if (!out) throw ConfigError("cannot write " + tmp.string());
        out << j.dump(2) << '\n';
    }
    fs::rename(tmp, run_dir / "manifest.json");
}

RunManifest run_stage(Stage stage, const PipelineConfig& cfg) {
    const std::string hash = config_hash(cfg);
    fs::create_directories(cfg.output_dir);
    RunLock lock(cfg.output_dir);
    RunManifest manifest = open_run(cfg, hash);

    for (Stage dep : deps(stage)) {
        if (!manifest.stage_complete(cfg.output_dir, dep)) {
            throw StageError("stage \"" + to_string(stage) + "\" requires completed stage \"" +
                             to_string(dep) + "\"; run that first");
        }
    }
    if (manifest.stage_complete(cfg.output_dir, stage)) {
        return manifest; // unchanged config, artifacts intact: nothing to do
    }

    StageState state;
    switch (stage) {
        case Stage::ingest: exec_ingest(cfg, state); break;
        case Stage::embed: exec_embed(cfg, state); break;
        case Stage::cluster: exec_cluster(cfg, state); break;
        case Stage::stage1: exec_stage1(cfg, hash, state); break;
        case Stage::generate: exec_generate(cfg, state); break;
        case Stage::score: exec_score(cfg, state); break;
        case Stage::stage2: exec_stage2(cfg, hash, state); break;
        case Stage::profiles: exec_profiles(cfg, state); break;
        case Stage::export_: exec_export(cfg, state); break;
        case Stage::report: exec_report(cfg, state); break;
    }
    state.complete = true;
    manifest.stages[to_string(stage)] = std::move(state);
    save_manifest(manifest, cfg.output_dir);
    return manifest;
}

RunManifest run_baseline(const std::string& method, std::size_t target,
                         const PipelineConfig& cfg) {
    if (method != "random" && method != "kcenter") {
        throw ConfigError("baseline method must be \"random\" or \"kcenter\"");
    }
    if (target == 0) throw ConfigError("baseline target must be positive");

    const std::string hash = config_hash(cfg);
    fs::create_directories(cfg.output_dir);
    RunLock lock(cfg.output_dir);
    RunManifest manifest = open_run(cfg, hash);
    if (!manifest.stage_complete(cfg.output_dir, Stage::cluster)) {
        throw StageError("baseline selection requires the completed \"cluster\" stage");
    }

    const LoadedCorpus lc = load_normalized(cfg.output_dir);
    const ClusterModel model = load_cluster_model(cfg.output_dir / "cluster", lc.matrix);
    const auto members = members_by_cluster(model);

    SelectionSet selection;
    selection.stage = method == "random" ? SelectionStage::baseline_random
                                         : SelectionStage::baseline_kcenter;
    selection.per_cluster.resize(model.K);
    selection.config_hash = hash;
    selection.seed = cfg.seed;
    std::vector<std::size_t> counts(model.K, 0);
    for (int k = 0; k < model.K; ++k) {
        std::vector<std::string> pool;
        pool.reserve(members[k].size());
        for (std::size_t row : members[k]) pool.push_back(lc.matrix.id_of(row));
        if (method == "random") {
            selection.per_cluster[k] = random_select(
                pool, target, rng::derive_seed(cfg.seed, "baseline_random:" + std::to_string(k)));
        } else {
            selection.per_cluster[k] =
                k_center_greedy(pool, {}, target, lc.matrix, model.centroids[k]);
        }
        counts[k] = selection.per_cluster[k].size();
    }

    fs::create_directories(cfg.output_dir / "baseline");
    const std::string name = "baseline/selection_" + method + ".jsonl";
    save_selection(selection, cfg.output_dir / name);

    StageState state;
    state.complete = true;
    state.artifacts = {name};
    state.counts = {{"per_cluster", counts}};
    manifest.stages["baseline_" + method] = std::move(state);
    save_manifest(manifest, cfg.output_dir);
    return manifest;
}

} // namespace assl
