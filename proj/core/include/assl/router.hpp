#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "assl/corpus.hpp"
#include "assl/select.hpp"

namespace assl {

/// One routable expert: its id is the cluster index and its embedding is the
/// centroid of the referenced training records' normalized embeddings.
struct ExpertProfile {
    int expert_id = 0;
    std::vector<double> embedding;
    std::string training_set_ref;
    std::size_t count = 0;
};

/// One profile per cluster, embedding = mean of the cluster's selected rows.
/// An empty cluster selection is an error naming the cluster.
std::vector<ExpertProfile> build_profiles(const SelectionSet& selection, const CorpusMatrix& m);
std::vector<ExpertProfile> build_profiles(const std::vector<std::vector<std::string>>& per_cluster,
                                          const CorpusMatrix& m,
                                          const std::string& training_set_ref);

struct RouteDecision {
    int expert_id = 0;
    double distance = 0.0;
    double relevance = 0.0; // cosine similarity to the chosen expert
    std::vector<std::pair<int, double>> ranked_alternatives; // ascending distance
};

/// Nearest expert by Euclidean distance (ties -> lowest expert id); expects a
/// normalized query of matching dimension.
RouteDecision route(std::span<const double> query, const std::vector<ExpertProfile>& profiles);

nlohmann::json route_decision_json(const RouteDecision& d);

/// profiles.json (ids, counts, refs) + profiles.emb binary vectors.
void save_profiles(const std::vector<ExpertProfile>& profiles, const std::filesystem::path& dir);
std::vector<ExpertProfile> load_profiles(const std::filesystem::path& dir);

} // namespace assl
