#include "assl/router.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "assl/errors.hpp"

namespace assl {

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t j = 0; j < a.size(); ++j) s += a[j] * b[j];
    return s;
}

double cosine(std::span<const double> a, std::span<const double> b) {
    const double na = std::sqrt(dot(a, a)), nb = std::sqrt(dot(b, b));
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot(a, b) / (na * nb);
}

double distance(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t j = 0; j < a.size(); ++j) {
        const double diff = a[j] - b[j];
        s += diff * diff;
    }
    return std::sqrt(s);
}

} // namespace

std::vector<ExpertProfile> build_profiles(const std::vector<std::vector<std::string>>& per_cluster,
                                          const CorpusMatrix& m,
                                          const std::string& training_set_ref) {
    std::vector<ExpertProfile> profiles;
    profiles.reserve(per_cluster.size());
    for (std::size_t k = 0; k < per_cluster.size(); ++k) {
        const auto& ids = per_cluster[k];
        if (ids.empty()) {
            throw ConfigError("cluster " + std::to_string(k) + " has an empty selection");
        }
        ExpertProfile p;
        p.expert_id = static_cast<int>(k);
        p.training_set_ref = training_set_ref;
        p.count = ids.size();
        p.embedding.assign(m.dim(), 0.0);
        for (const auto& id : ids) {
            auto row = m.row(m.row_of(id));
            for (std::size_t j = 0; j < m.dim(); ++j) p.embedding[j] += row[j];
        }
        const double inv = 1.0 / static_cast<double>(ids.size());
        for (double& v : p.embedding) v *= inv;
        profiles.push_back(std::move(p));
    }
    return profiles;
}

std::vector<ExpertProfile> build_profiles(const SelectionSet& selection, const CorpusMatrix& m) {
    return build_profiles(selection.per_cluster, m, to_string(selection.stage));
}

RouteDecision route(std::span<const double> query, const std::vector<ExpertProfile>& profiles) {
    if (profiles.empty()) throw ConfigError("route: no expert profiles");
    for (const auto& p : profiles) {
        if (p.embedding.size() != query.size()) {
            throw ConfigError("route: query dimension " + std::to_string(query.size()) +
                              " does not match profile dimension " +
                              std::to_string(p.embedding.size()));
        }
    }

    RouteDecision d;
    d.ranked_alternatives.reserve(profiles.size());
    for (const auto& p : profiles) {
        d.ranked_alternatives.emplace_back(p.expert_id, distance(query, p.embedding));
    }
    std::sort(d.ranked_alternatives.begin(), d.ranked_alternatives.end(),
              [](const auto& a, const auto& b) {
                  return a.second < b.second || (a.second == b.second && a.first < b.first);
              });
    d.expert_id = d.ranked_alternatives.front().first;
    d.distance = d.ranked_alternatives.front().second;
    for (const auto& p : profiles) {
        if (p.expert_id == d.expert_id) {
            d.relevance = cosine(query, p.embedding);
            break;
        }
    }
    return d;
}

nlohmann::json route_decision_json(const RouteDecision& d) {
    nlohmann::json ranked = nlohmann::json::array();
    for (const auto& [id, dist] : d.ranked_alternatives) {
        ranked.push_back({{"expert_id", id}, {"distance", dist}});
    }
    return {{"expert_id", d.expert_id},
            {"distance", d.distance},
            {"relevance", d.relevance},
            {"ranked_alternatives", ranked}};
}

void save_profiles(const std::vector<ExpertProfile>& profiles, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::json experts = nlohmann::json::array();
    std::vector<std::string> ids;
    std::vector<std::vector<double>> vecs;
    for (const auto& p : profiles) {
        experts.push_back({{"expert_id", p.expert_id},
                           {"count", p.count},
                           {"training_set_ref", p.training_set_ref}});
        ids.push_back(std::to_string(p.expert_id));
        vecs.push_back(p.embedding);
    }
    std::ofstream out(dir / "profiles.json");
    if (!out) throw ConfigError("cannot write " + (dir / "profiles.json").string());
    out << nlohmann::json{{"experts", experts}}.dump(2) << '\n';
    save_embeddings(ids, vecs, dir / "profiles.emb");
}

std::vector<ExpertProfile> load_profiles(const std::filesystem::path& dir) {
    std::ifstream in(dir / "profiles.json");
    if (!in) throw ConfigError("cannot open " + (dir / "profiles.json").string());
    nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded()) throw ConfigError((dir / "profiles.json").string() + ": malformed JSON");

    EmbeddingTable table = load_embedding_table(dir / "profiles.emb");
    std::vector<ExpertProfile> profiles;
    for (const auto& e : j.at("experts")) {
        ExpertProfile p;
        p.expert_id = e.at("expert_id").get<int>();
        p.count = e.at("count").get<std::size_t>();
        p.training_set_ref = e.value("training_set_ref", std::string{});
        auto it = table.find(std::to_string(p.expert_id));
        if (it == table.end()) {
            throw ConfigError("profiles.emb missing expert " + std::to_string(p.expert_id));
        }
        p.embedding = it->second;
        profiles.push_back(std::move(p));
    }
    return profiles;
}

} // namespace assl
