#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "assl/corpus.hpp"

namespace assl {

/// K-means result. assignment is row-aligned with the matrix the model was
/// fitted on; centroids[k] is the exact mean of cluster k's member rows and
/// wcss the within-cluster sum of squared distances under that assignment.
struct ClusterModel {
    int K = 0;
    std::vector<int> assignment;
    std::vector<std::vector<double>> centroids;
    double wcss = 0.0;
    std::size_t iterations = 0;
    /// Objective after each Lloyd iteration; non-increasing.
    std::vector<double> wcss_history;
};

/// Component-wise mean of a non-empty list of equal-dimension vectors.
std::vector<double> centroid(std::span<const std::vector<double>> points);

/// Mean of the given matrix rows.
std::vector<double> centroid_of_rows(const CorpusMatrix& m, const std::vector<std::size_t>& rows);

/// Lloyd's algorithm from k-means++ initialization. Deterministic for fixed
/// (matrix, K, seed): ties in assignment go to the lowest cluster index, and
/// an emptied cluster is reseeded at the point farthest from its assigned
/// centroid. Stops when the largest centroid movement drops below tol.
ClusterModel kmeans(const CorpusMatrix& m, int K, std::uint64_t seed, int max_iter = 300,
                    double tol = 1e-6);

/// Member rows per cluster, each in ascending row order.
std::vector<std::vector<std::size_t>> members_by_cluster(const ClusterModel& model);

/// Persists assignments as JSON (record id -> cluster) and centroids in the
/// binary embedding format; dir is created if needed.
void save_cluster_model(const ClusterModel& model, const CorpusMatrix& m,
                        const std::filesystem::path& dir);
ClusterModel load_cluster_model(const std::filesystem::path& dir, const CorpusMatrix& m);

} // namespace assl
