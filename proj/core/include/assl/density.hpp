#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "assl/corpus.hpp"

namespace assl {

/// Per-point KNN distances and local densities. rho_i is the reciprocal of
/// the mean distance to the k nearest neighbors (self excluded). A point
/// whose mean neighbor distance is zero (exact duplicates) is flagged and
/// assigned the maximum finite density seen in the set.
struct DensityInfo {
    std::size_t k = 0;
    std::vector<std::vector<double>> knn_dists; // per point, ascending
    std::vector<double> rho;
    double rho_max = 0.0;
    std::vector<bool> duplicate_flag;
    std::size_t duplicate_count = 0;
};

/// Exact KNN search by pairwise distances; k must be < point count.
DensityInfo knn_density(const CorpusMatrix& points, std::size_t k);

struct AdbscanParams {
    std::size_t k = 0;
    double epsilon = 0.0;    // median k-th nearest-neighbor distance
    double minpts_init = 2.0;
};

/// epsilon = median over points of the k-th NN distance;
/// minpts_init = max(2, epsilon * rho_max / 2).
AdbscanParams compute_params(const DensityInfo& density);

/// MinPts adaptation after a cluster forms: max(2, rho_current/rho_max * minpts).
/// minpts is always the initial value, so updates do not compound.
double minpts_update(double rho_current, double rho_max, double minpts);

/// Density-connected group found inside one K-means cluster. seed_id is the
/// high-density point the expansion started from and is always a member.
struct SubCluster {
    std::vector<std::string> members;
    std::string seed_id;
    double seed_rho = 0.0;
};

struct AdbscanResult {
    std::vector<SubCluster> subclusters;
    std::vector<std::string> noise;
    AdbscanParams params;
    /// MinPts values in force over time: the initial value, then the value
    /// after each formed cluster.
    std::vector<double> minpts_schedule;
    DensityInfo density;
};

/// Adaptive DBSCAN over a density-ordered priority queue. Each unvisited
/// queue head whose epsilon-neighborhood reaches the current MinPts grows a
/// cluster; neighborhoods of core points are appended during expansion and
/// every unclaimed point in them joins. After each cluster, MinPts adapts to
/// the density of the next unvisited queue head. Unclaimed points are noise.
/// Requires at least k+1 points.
AdbscanResult adbscan(const CorpusMatrix& points, std::size_t k);

/// HandleSubClusters: computes N_avg = floor(total members / cluster count)
/// and randomly downsamples every larger sub-cluster to exactly N_avg
/// (the seed point is always retained). Smaller sub-clusters pass through.
std::vector<SubCluster> handle_subclusters(const std::vector<SubCluster>& subclusters,
                                           std::uint64_t seed);

/// Balanced sample of up to `target` ids: per-sub-cluster quota of
/// floor(target/count) seeded-random members, leftovers re-spread round-robin
/// over sub-clusters with remaining members, largest remaining first. Noise
/// never appears (it is not in any sub-cluster).
std::vector<std::string> stage1_select(const std::vector<SubCluster>& subclusters,
                                       std::size_t target, std::uint64_t seed);

/// One line of the stage-1 report: sub-cluster size histogram, noise count,
/// epsilon, and the MinPts schedule.
nlohmann::json density_report_json(int cluster_index, const AdbscanResult& result);

} // namespace assl
