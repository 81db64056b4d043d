#include "assl/density.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include "assl/errors.hpp"
#include "assl/rng.hpp"

namespace assl {

namespace {

double sq_dist(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t j = 0; j < a.size(); ++j) {
        const double diff = a[j] - b[j];
        s += diff * diff;
    }
    return s;
}

std::size_t ceil_count(double minpts) {
    return static_cast<std::size_t>(std::ceil(minpts));
}

/// Median of a vector (average of the two central values for even sizes).
double median(std::vector<double> v) {
    const std::size_t n = v.size();
    const std::size_t mid = n / 2;
    std::nth_element(v.begin(), v.begin() + mid, v.end());
    double hi = v[mid];
    if (n % 2 == 1) return hi;
    double lo = *std::max_element(v.begin(), v.begin() + mid);
    return 0.5 * (lo + hi);
}

} // namespace

DensityInfo knn_density(const CorpusMatrix& points, std::size_t k) {
    const std::size_t n = points.rows();
    if (k == 0) throw ConfigError("knn_density: k must be positive");
    if (k >= n) {
        throw ConfigError("knn_density: k=" + std::to_string(k) + " must be below point count " +
                          std::to_string(n));
    }

    DensityInfo info;
    info.k = k;
    info.knn_dists.resize(n);
    info.rho.assign(n, 0.0);
    info.duplicate_flag.assign(n, false);

    std::vector<double> d2(n);
    for (std::size_t i = 0; i < n; ++i) {
        auto xi = points.row(i);
        for (std::size_t j = 0; j < n; ++j) d2[j] = sq_dist(xi, points.row(j));
        d2[i] = std::numeric_limits<double>::infinity(); // self excluded
        std::vector<double> nn(d2);
        std::nth_element(nn.begin(), nn.begin() + (k - 1), nn.end());
        nn.resize(k);
        std::sort(nn.begin(), nn.end());
        auto& dists = info.knn_dists[i];
        dists.resize(k);
        double sum = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
            dists[j] = std::sqrt(nn[j]);
            sum += dists[j];
        }
        const double mean = sum / static_cast<double>(k);
        if (mean == 0.0) {
            info.duplicate_flag[i] = true;
            ++info.duplicate_count;
        } else {
            info.rho[i] = 1.0 / mean;
        }
    }

    // Duplicate points rank as densest: give them the maximum finite density.
    double max_finite = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (!info.duplicate_flag[i]) max_finite = std::max(max_finite, info.rho[i]);
    }
    if (max_finite == 0.0) max_finite = 1.0; // every point identical
    for (std::size_t i = 0; i < n; ++i) {
        if (info.duplicate_flag[i]) info.rho[i] = max_finite;
    }
    info.rho_max = *std::max_element(info.rho.begin(), info.rho.end());
    return info;
}

AdbscanParams compute_params(const DensityInfo& density) {
    if (density.rho.empty()) throw ConfigError("compute_params: empty density info");
    std::vector<double> kth(density.knn_dists.size());
    for (std::size_t i = 0; i < kth.size(); ++i) kth[i] = density.knn_dists[i].back();
    AdbscanParams params;
    params.k = density.k;
    params.epsilon = median(std::move(kth));
    params.minpts_init = std::max(2.0, params.epsilon * density.rho_max / 2.0);
    return params;
}

double minpts_update(double rho_current, double rho_max, double minpts) {
    if (rho_max <= 0.0) throw ConfigError("minpts_update: rho_max must be positive");
    return std::max(2.0, rho_current / rho_max * minpts);
}

AdbscanResult adbscan(const CorpusMatrix& points, std::size_t k) {
    const std::size_t n = points.rows();
    if (n < k + 1) {
        throw ConfigError("adbscan: need at least k+1=" + std::to_string(k + 1) +
                          " points, got " + std::to_string(n));
    }

    AdbscanResult result;
    result.density = knn_density(points, k);
    result.params = compute_params(result.density);
    const auto& rho = result.density.rho;
    const double rho_max = result.density.rho_max;
    const double eps2 = result.params.epsilon * result.params.epsilon;

    // Priority queue: density descending, row index breaking ties.
    std::vector<std::size_t> queue(n);
    std::iota(queue.begin(), queue.end(), 0);
    std::stable_sort(queue.begin(), queue.end(),
                     [&](std::size_t a, std::size_t b) { return rho[a] > rho[b]; });

    auto neighborhood = [&](std::size_t i) {
        std::vector<std::size_t> nb;
        auto xi = points.row(i);
        for (std::size_t j = 0; j < n; ++j) {
            if (sq_dist(xi, points.row(j)) <= eps2) nb.push_back(j); // includes i
        }
        return nb;
    };

    std::vector<bool> visited(n, false), claimed(n, false), in_frontier(n, false);
    double minpts = result.params.minpts_init;
    result.minpts_schedule.push_back(minpts);

    for (std::size_t qpos = 0; qpos < n; ++qpos) {
        const std::size_t head = queue[qpos];
        if (visited[head]) continue;
        visited[head] = true;

        std::vector<std::size_t> frontier = neighborhood(head);
        if (frontier.size() < ceil_count(minpts)) continue;

        SubCluster sc;
        sc.seed_id = points.id_of(head);
        sc.seed_rho = rho[head];
        for (std::size_t idx : frontier) in_frontier[idx] = true;

        // Expansion: frontier grows as core points contribute their
        // neighborhoods; every unclaimed point in it joins the cluster.
        for (std::size_t idx = 0; idx < frontier.size(); ++idx) {
            const std::size_t q = frontier[idx];
            if (!visited[q]) {
                visited[q] = true;
                std::vector<std::size_t> nq = neighborhood(q);
                if (nq.size() >= ceil_count(minpts)) {
                    for (std::size_t j : nq) {
                        if (!in_frontier[j]) {
                            in_frontier[j] = true;
                            frontier.push_back(j);
                        }
                    }
                }
            }
            if (!claimed[q]) {
                claimed[q] = true;
                sc.members.push_back(points.id_of(q));
            }
        }
        for (std::size_t idx : frontier) in_frontier[idx] = false;
        result.subclusters.push_back(std::move(sc));

        // Adapt MinPts to the density of the new queue head.
        for (std::size_t h = qpos + 1; h < n; ++h) {
            if (!visited[queue[h]]) {
                minpts = minpts_update(rho[queue[h]], rho_max, result.params.minpts_init);
                result.minpts_schedule.push_back(minpts);
                break;
            }
        }
    }

    for (std::size_t i = 0; i < n; ++i) {
        if (!claimed[i]) result.noise.push_back(points.id_of(i));
    }
    return result;
}

std::vector<SubCluster> handle_subclusters(const std::vector<SubCluster>& subclusters,
                                           std::uint64_t seed) {
    if (subclusters.empty()) throw ConfigError("handle_subclusters: empty sub-cluster list");
    std::size_t total = 0;
    for (const auto& sc : subclusters) total += sc.members.size();
    const std::size_t n_avg = total / subclusters.size();

    std::vector<SubCluster> out;
    out.reserve(subclusters.size());
    for (const auto& sc : subclusters) {
        if (sc.members.size() <= n_avg) {
            out.push_back(sc);
            continue;
        }
        // Downsample to exactly n_avg, always retaining the seed point.
        std::vector<std::size_t> others;
        others.reserve(sc.members.size() - 1);
        std::size_t seed_pos = sc.members.size();
        for (std::size_t i = 0; i < sc.members.size(); ++i) {
            if (seed_pos == sc.members.size() && sc.members[i] == sc.seed_id) {
                seed_pos = i;
            } else {
                others.push_back(i);
            }
        }
        rng::Engine eng(rng::derive_seed(seed, "handle:" + sc.seed_id));
        std::vector<std::size_t> picked = rng::sample_indices(others.size(), n_avg - 1, eng);
        std::vector<std::size_t> keep;
        keep.reserve(n_avg);
        keep.push_back(seed_pos);
        for (std::size_t p : picked) keep.push_back(others[p]);
        std::sort(keep.begin(), keep.end());

        SubCluster capped;
        capped.seed_id = sc.seed_id;
        capped.seed_rho = sc.seed_rho;
        capped.members.reserve(n_avg);
        for (std::size_t i : keep) capped.members.push_back(sc.members[i]);
        out.push_back(std::move(capped));
    }
    return out;
}

std::vector<std::string> stage1_select(const std::vector<SubCluster>& subclusters,
                                       std::size_t target, std::uint64_t seed) {
    if (target == 0) throw ConfigError("stage1_select: target must be positive");
    if (subclusters.empty()) return {};

    const std::size_t count = subclusters.size();
    const std::size_t quota = target / count;

    std::vector<std::vector<std::string>> shuffled(count);
    std::vector<std::size_t> take(count);
    std::size_t taken_total = 0;
    for (std::size_t i = 0; i < count; ++i) {
        shuffled[i] = subclusters[i].members;
        rng::Engine eng(rng::derive_seed(seed, "stage1:" + subclusters[i].seed_id));
        rng::shuffle(shuffled[i], eng);
        take[i] = std::min(quota, shuffled[i].size());
        taken_total += take[i];
    }

    // Re-spread leftover quota round-robin, largest remaining supply first.
    std::size_t leftover = target > taken_total ? target - taken_total : 0;
    while (leftover > 0) {
        std::vector<std::size_t> eligible;
        for (std::size_t i = 0; i < count; ++i) {
            if (take[i] < shuffled[i].size()) eligible.push_back(i);
        }
        if (eligible.empty()) break;
        std::stable_sort(eligible.begin(), eligible.end(), [&](std::size_t a, std::size_t b) {
            return shuffled[a].size() - take[a] > shuffled[b].size() - take[b];
        });
        for (std::size_t i : eligible) {
            ++take[i];
            if (--leftover == 0) break;
        }
    }

    std::vector<std::string> selected;
    selected.reserve(target);
    for (std::size_t i = 0; i < count; ++i) {
        selected.insert(selected.end(), shuffled[i].begin(), shuffled[i].begin() + take[i]);
    }
    return selected;
}

nlohmann::json density_report_json(int cluster_index, const AdbscanResult& result) {
    std::map<std::size_t, std::size_t> histogram;
    for (const auto& sc : result.subclusters) ++histogram[sc.members.size()];
    nlohmann::json hist = nlohmann::json::array();
    for (const auto& [size, cnt] : histogram) {
        hist.push_back({{"size", size}, {"count", cnt}});
    }
    return {{"cluster", cluster_index},
            {"subclusters", result.subclusters.size()},
            {"size_histogram", hist},
            {"noise", result.noise.size()},
            {"epsilon", result.params.epsilon},
            {"minpts_init", result.params.minpts_init},
            {"minpts_schedule", result.minpts_schedule},
            {"duplicate_points", result.density.duplicate_count}};
}

} // namespace assl
