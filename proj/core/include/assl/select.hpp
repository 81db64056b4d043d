#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "assl/corpus.hpp"

namespace assl {

/// Weights of the modified MMR utility: centroid similarity, redundancy
/// penalty, model score. All non-negative, at least one positive.
struct MmrWeights {
    double lambda1 = 0.2;
    double lambda2 = 0.2;
    double lambda3 = 0.6;
};
void validate(const MmrWeights& w);

/// record id -> Score_llm
using ScoreMap = std::unordered_map<std::string, double>;

/// U(d) = l1*sim(centroid, d) - l2*max_{s in selected} sim(s, d) + l3*llm(d),
/// with cosine similarity and a max term of 0 when nothing is selected yet.
/// The candidate must be scored, embedded, and not already selected.
double mmr_utility(const std::string& candidate_id, std::span<const double> centroid,
                   const std::vector<std::string>& selected, const CorpusMatrix& m,
                   const ScoreMap& scores, const MmrWeights& w);

struct MmrResult {
    std::vector<std::string> added; // in pick order
    bool exhausted = false;         // pool ran out before reaching target
};

/// Greedily adds the argmax-utility candidate (ties -> lowest record id),
/// recomputing utilities against the growing selected set, until
/// |stage1| + |added| reaches target or the pool is exhausted.
MmrResult mmr_greedy(const std::vector<std::string>& pool, const std::vector<std::string>& stage1,
                     std::span<const double> centroid, const CorpusMatrix& m,
                     const ScoreMap& scores, const MmrWeights& w, std::size_t target);

/// Uniform sample without replacement, in pick order. n >= |pool| returns the
/// whole pool (shuffled).
std::vector<std::string> random_select(const std::vector<std::string>& pool, std::size_t n,
                                       std::uint64_t seed);

/// Farthest-first traversal: repeatedly adds the pool point with the largest
/// minimum Euclidean distance to the current center set until the set holds
/// n_total points (ties -> lowest id). With no initial centers the first pick
/// is the point nearest the cluster centroid.
std::vector<std::string> k_center_greedy(const std::vector<std::string>& pool,
                                         const std::vector<std::string>& centers,
                                         std::size_t n_total, const CorpusMatrix& m,
                                         std::span<const double> cluster_centroid);

enum class SelectionStage { stage1, stage2, baseline_random, baseline_kcenter };
std::string to_string(SelectionStage stage);
SelectionStage selection_stage_from_string(const std::string& name);

/// Per-cluster chosen record ids for one stage, with provenance. Within a
/// cluster ids are unique; a stage2 set contains the cluster's stage1 set as
/// a prefix.
struct SelectionSet {
    SelectionStage stage = SelectionStage::stage1;
    std::vector<std::vector<std::string>> per_cluster;
    std::string config_hash;
    std::uint64_t seed = 0;
};

/// Line-delimited JSON, one line per cluster:
/// {"cluster": i, "stage": ..., "ids": [...], "config_hash": ..., "seed": ...}
void save_selection(const SelectionSet& s, const std::filesystem::path& path);
SelectionSet load_selection(const std::filesystem::path& path);

} // namespace assl
