#include "assl/cluster.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include <json.hpp>

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

double sq_dist(std::span<const double> a, const std::vector<double>& b) {
    return sq_dist(a, std::span<const double>(b));
}

/// Nearest centroid by squared Euclidean distance; ties -> lowest index.
int nearest(std::span<const double> x, const std::vector<std::vector<double>>& centroids) {
    int best = 0;
    double best_d = sq_dist(x, centroids[0]);
    for (std::size_t k = 1; k < centroids.size(); ++k) {
        const double d = sq_dist(x, centroids[k]);
        if (d < best_d) {
            best_d = d;
            best = static_cast<int>(k);
        }
    }
    return best;
}

std::vector<std::vector<double>> kmeanspp_init(const CorpusMatrix& m, int K, rng::Engine& eng) {
    const std::size_t n = m.rows();
    std::vector<std::vector<double>> centers;
    centers.reserve(K);
    std::vector<bool> chosen(n, false);

    const std::size_t first = static_cast<std::size_t>(eng.bounded(n));
    centers.emplace_back(m.row(first).begin(), m.row(first).end());
    chosen[first] = true;

    std::vector<double> d2(n);
    for (std::size_t i = 0; i < n; ++i) d2[i] = sq_dist(m.row(i), centers[0]);

    while (centers.size() < static_cast<std::size_t>(K)) {
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) total += d2[i];
        std::size_t pick = n; // sentinel
        if (total > 0.0) {
            const double r = eng.unit() * total;
            double cum = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                cum += d2[i];
                if (cum > r) {
                    pick = i;
                    break;
                }
            }
            if (pick == n) pick = n - 1; // r landed on rounding slack at the top
        } else {
            // All remaining points coincide with a chosen center; take the
            // lowest unchosen row so K distinct seeds still come out.
            for (std::size_t i = 0; i < n; ++i) {
                if (!chosen[i]) {
                    pick = i;
                    break;
                }
            }
            if (pick == n) pick = 0;
        }
        chosen[pick] = true;
        centers.emplace_back(m.row(pick).begin(), m.row(pick).end());
        for (std::size_t i = 0; i < n; ++i) {
            d2[i] = std::min(d2[i], sq_dist(m.row(i), centers.back()));
        }
    }
    return centers;
}

std::vector<double> mean_of(const CorpusMatrix& m, const std::vector<std::size_t>& rows) {
    std::vector<double> mu(m.dim(), 0.0);
    for (std::size_t r : rows) {
        auto x = m.row(r);
        for (std::size_t j = 0; j < m.dim(); ++j) mu[j] += x[j];
    }
    const double inv = 1.0 / static_cast<double>(rows.size());
    for (double& v : mu) v *= inv;
    return mu;
}

} // namespace

std::vector<double> centroid(std::span<const std::vector<double>> points) {
    if (points.empty()) throw ConfigError("centroid of empty point list");
    const std::size_t d = points.front().size();
    std::vector<double> mu(d, 0.0);
    for (const auto& p : points) {
        if (p.size() != d) throw ConfigError("centroid: inconsistent dimensions");
        for (std::size_t j = 0; j < d; ++j) mu[j] += p[j];
    }
    const double inv = 1.0 / static_cast<double>(points.size());
    for (double& v : mu) v *= inv;
    return mu;
}

std::vector<double> centroid_of_rows(const CorpusMatrix& m, const std::vector<std::size_t>& rows) {
    if (rows.empty()) throw ConfigError("centroid of empty row list");
    return mean_of(m, rows);
}

ClusterModel kmeans(const CorpusMatrix& m, int K, std::uint64_t seed, int max_iter, double tol) {
    const std::size_t n = m.rows();
    if (K <= 0) throw ConfigError("kmeans: K must be positive, got " + std::to_string(K));
    if (static_cast<std::size_t>(K) > n) {
        throw ConfigError("kmeans: K=" + std::to_string(K) + " exceeds point count " +
                          std::to_string(n));
    }
    if (max_iter <= 0) throw ConfigError("kmeans: max_iter must be positive");
    if (tol < 0) throw ConfigError("kmeans: tol must be non-negative");

    rng::Engine eng(seed);
    ClusterModel model;
    model.K = K;
    model.centroids = kmeanspp_init(m, K, eng);
    model.assignment.assign(n, 0);

    std::vector<std::vector<std::size_t>> members(K);
    for (int iter = 0; iter < max_iter; ++iter) {
        // Assignment step.
        for (auto& mem : members) mem.clear();
        for (std::size_t i = 0; i < n; ++i) {
            const int k = nearest(m.row(i), model.centroids);
            model.assignment[i] = k;
            members[k].push_back(i);
        }

        // Reseed each empty cluster at the point farthest from its assigned
        // centroid, taking donors only from clusters that keep >= 2 members.
        for (int k = 0; k < K; ++k) {
            if (!members[k].empty()) continue;
            double far_d = -1.0;
            std::size_t far_i = n;
            for (std::size_t i = 0; i < n; ++i) {
                const int owner = model.assignment[i];
                if (members[owner].size() < 2) continue;
                const double d = sq_dist(m.row(i), model.centroids[owner]);
                if (d > far_d) {
                    far_d = d;
                    far_i = i;
                }
            }
            if (far_i == n) continue; // K == n degenerate layouts
            auto& donor = members[model.assignment[far_i]];
            donor.erase(std::find(donor.begin(), donor.end(), far_i));
            model.assignment[far_i] = k;
            members[k].push_back(far_i);
        }

        // Update step: exact means in row order.
        double moved = 0.0;
        for (int k = 0; k < K; ++k) {
            std::vector<double> mu = mean_of(m, members[k]);
            moved = std::max(moved, std::sqrt(sq_dist(std::span<const double>(mu),
                                                      model.centroids[k])));
            model.centroids[k] = std::move(mu);
        }

        double wcss = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            wcss += sq_dist(m.row(i), model.centroids[model.assignment[i]]);
        }
        model.wcss = wcss;
        model.wcss_history.push_back(wcss);
        model.iterations = static_cast<std::size_t>(iter) + 1;

        if (moved < tol) break;
    }
    return model;
}

std::vector<std::vector<std::size_t>> members_by_cluster(const ClusterModel& model) {
    std::vector<std::vector<std::size_t>> members(model.K);
    for (std::size_t i = 0; i < model.assignment.size(); ++i) {
        members[model.assignment[i]].push_back(i);
    }
    return members;
}

void save_cluster_model(const ClusterModel& model, const CorpusMatrix& m,
                        const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::json assignments = nlohmann::json::object();
    for (std::size_t i = 0; i < model.assignment.size(); ++i) {
        assignments[m.id_of(i)] = model.assignment[i];
    }
    nlohmann::json j{{"K", model.K},
                     {"wcss", model.wcss},
                     {"iterations", model.iterations},
                     {"assignments", assignments}};
    std::ofstream out(dir / "assignments.json");
    if (!out) throw ConfigError("cannot write " + (dir / "assignments.json").string());
    out << j.dump(2) << '\n';

    std::vector<std::string> ids;
    for (int k = 0; k < model.K; ++k) ids.push_back(std::to_string(k));
    save_embeddings(ids, model.centroids, dir / "centroids.bin");
}

ClusterModel load_cluster_model(const std::filesystem::path& dir, const CorpusMatrix& m) {
    std::ifstream in(dir / "assignments.json");
    if (!in) throw ConfigError("cannot open " + (dir / "assignments.json").string());
    nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded()) throw ConfigError((dir / "assignments.json").string() + ": malformed JSON");

    ClusterModel model;
    model.K = j.at("K").get<int>();
    model.wcss = j.at("wcss").get<double>();
    model.iterations = j.value("iterations", std::size_t{0});
    model.assignment.assign(m.rows(), -1);
    for (const auto& [id, k] : j.at("assignments").items()) {
        model.assignment[m.row_of(id)] = k.get<int>();
    }
    for (std::size_t i = 0; i < m.rows(); ++i) {
        if (model.assignment[i] < 0 || model.assignment[i] >= model.K) {
            throw ConfigError("cluster model does not cover record \"" + m.id_of(i) + "\"");
        }
    }

    EmbeddingTable table = load_embedding_table(dir / "centroids.bin");
    model.centroids.resize(model.K);
    for (int k = 0; k < model.K; ++k) {
        auto it = table.find(std::to_string(k));
        if (it == table.end()) throw ConfigError("centroid " + std::to_string(k) + " missing");
        model.centroids[k] = it->second;
    }
    return model;
}

} // namespace assl
