#include "assl/select.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <json.hpp>

#include "assl/errors.hpp"
#include "assl/jsonl.hpp"
#include "assl/rng.hpp"

namespace assl {

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t j = 0; j < a.size(); ++j) s += a[j] * b[j];
    return s;
}

double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

/// Cosine similarity; 0 when either vector has zero norm.
double cosine(std::span<const double> a, std::span<const double> b) {
    const double na = norm(a), nb = norm(b);
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot(a, b) / (na * nb);
}

double sq_dist(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t j = 0; j < a.size(); ++j) {
        const double diff = a[j] - b[j];
        s += diff * diff;
    }
    return s;
}

double score_of(const ScoreMap& scores, const std::string& id) {
    auto it = scores.find(id);
    if (it == scores.end()) throw ConfigError("no Score_llm for candidate \"" + id + "\"");
    return it->second;
}

} // namespace

void validate(const MmrWeights& w) {
    if (w.lambda1 < 0.0 || w.lambda2 < 0.0 || w.lambda3 < 0.0) {
        throw ConfigError("MMR weights must be non-negative");
    }
    if (w.lambda1 == 0.0 && w.lambda2 == 0.0 && w.lambda3 == 0.0) {
        throw ConfigError("at least one MMR weight must be positive");
    }
}

double mmr_utility(const std::string& candidate_id, std::span<const double> centroid,
                   const std::vector<std::string>& selected, const CorpusMatrix& m,
                   const ScoreMap& scores, const MmrWeights& w) {
    for (const auto& s : selected) {
        if (s == candidate_id) {
            throw ConfigError("mmr_utility: candidate \"" + candidate_id + "\" already selected");
        }
    }
    const auto cand = m.row(m.row_of(candidate_id));
    const double llm = score_of(scores, candidate_id);
    double max_sim = 0.0; // empty selected set contributes nothing
    bool first = true;
    for (const auto& s : selected) {
        const double sim = cosine(m.row(m.row_of(s)), cand);
        if (first || sim > max_sim) max_sim = sim;
        first = false;
    }
    return w.lambda1 * cosine(centroid, cand) - w.lambda2 * max_sim + w.lambda3 * llm;
}

MmrResult mmr_greedy(const std::vector<std::string>& pool, const std::vector<std::string>& stage1,
                     std::span<const double> centroid, const CorpusMatrix& m,
                     const ScoreMap& scores, const MmrWeights& w, std::size_t target) {
    validate(w);
    if (target < stage1.size()) {
        throw ConfigError("mmr_greedy: target " + std::to_string(target) +
                          " below stage-1 size " + std::to_string(stage1.size()));
    }
    {
        std::unordered_map<std::string, bool> in_stage1;
        for (const auto& id : stage1) in_stage1[id] = true;
        for (const auto& id : pool) {
            if (in_stage1.count(id)) {
                throw ConfigError("mmr_greedy: pool overlaps stage 1 at \"" + id + "\"");
            }
        }
    }

    struct Candidate {
        const std::string* id;
        std::size_t row;
        double sim_centroid;
        double max_sim; // running max similarity to the selected set
        double llm;
        bool picked = false;
    };
    std::vector<Candidate> cands;
    cands.reserve(pool.size());
    for (const auto& id : pool) {
        const std::size_t row = m.row_of(id);
        Candidate c{&id, row, cosine(centroid, m.row(row)), 0.0, score_of(scores, id)};
        bool first = true;
        for (const auto& s : stage1) {
            const double sim = cosine(m.row(m.row_of(s)), m.row(row));
            if (first || sim > c.max_sim) c.max_sim = sim;
            first = false;
        }
        cands.push_back(c);
    }

    MmrResult result;
    std::size_t want = target - stage1.size();
    while (result.added.size() < want) {
        std::size_t best = cands.size();
        double best_u = -std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < cands.size(); ++i) {
            if (cands[i].picked) continue;
            const double u = w.lambda1 * cands[i].sim_centroid - w.lambda2 * cands[i].max_sim +
                             w.lambda3 * cands[i].llm;
            if (u > best_u || (u == best_u && best < cands.size() && *cands[i].id < *cands[best].id)) {
                best_u = u;
                best = i;
            }
        }
        if (best == cands.size()) {
            result.exhausted = true;
            break;
        }
        cands[best].picked = true;
        result.added.push_back(*cands[best].id);
        const auto picked_row = m.row(cands[best].row);
        for (auto& c : cands) {
            if (c.picked) continue;
            const double sim = cosine(picked_row, m.row(c.row));
            if (sim > c.max_sim) c.max_sim = sim;
        }
    }
    return result;
}

std::vector<std::string> random_select(const std::vector<std::string>& pool, std::size_t n,
                                       std::uint64_t seed) {
    rng::Engine eng(seed);
    std::vector<std::size_t> picks = rng::sample_indices(pool.size(), n, eng);
    std::vector<std::string> out;
    out.reserve(picks.size());
    for (std::size_t i : picks) out.push_back(pool[i]);
    return out;
}

std::vector<std::string> k_center_greedy(const std::vector<std::string>& pool,
                                         const std::vector<std::string>& centers,
                                         std::size_t n_total, const CorpusMatrix& m,
                                         std::span<const double> cluster_centroid) {
    std::vector<std::string> added;
    if (centers.size() >= n_total) return added;

    struct Point {
        const std::string* id;
        std::size_t row;
        double min_d2 = std::numeric_limits<double>::infinity();
        bool picked = false;
    };
    std::vector<Point> pts;
    pts.reserve(pool.size());
    for (const auto& id : pool) pts.push_back({&id, m.row_of(id)});

    std::size_t remaining = n_total - centers.size();

    if (centers.empty()) {
        // Seed with the point nearest the cluster centroid.
        std::size_t best = pts.size();
        double best_d = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < pts.size(); ++i) {
            const double d = sq_dist(m.row(pts[i].row), cluster_centroid);
            if (d < best_d || (d == best_d && best < pts.size() && *pts[i].id < *pts[best].id)) {
                best_d = d;
                best = i;
            }
        }
        if (best == pts.size()) return added;
        pts[best].picked = true;
        added.push_back(*pts[best].id);
        --remaining;
        const auto crow = m.row(pts[best].row);
        for (auto& p : pts) {
            if (!p.picked) p.min_d2 = sq_dist(m.row(p.row), crow);
        }
    } else {
        for (auto& p : pts) {
            for (const auto& c : centers) {
                p.min_d2 = std::min(p.min_d2, sq_dist(m.row(p.row), m.row(m.row_of(c))));
            }
        }
    }

    while (remaining > 0) {
        std::size_t best = pts.size();
        double best_d = -1.0;
        for (std::size_t i = 0; i < pts.size(); ++i) {
            if (pts[i].picked) continue;
            if (pts[i].min_d2 > best_d ||
                (pts[i].min_d2 == best_d && best < pts.size() && *pts[i].id < *pts[best].id)) {
                best_d = pts[i].min_d2;
                best = i;
            }
        }
        if (best == pts.size()) break; // pool exhausted
        pts[best].picked = true;
        added.push_back(*pts[best].id);
        --remaining;
        const auto crow = m.row(pts[best].row);
        for (auto& p : pts) {
            if (p.picked) continue;
            p.min_d2 = std::min(p.min_d2, sq_dist(m.row(p.row), crow));
        }
    }
    return added;
}

std::string to_string(SelectionStage stage) {
    switch (stage) {
        case SelectionStage::stage1: return "stage1";
        case SelectionStage::stage2: return "stage2";
        case SelectionStage::baseline_random: return "baseline_random";
        case SelectionStage::baseline_kcenter: return "baseline_kcenter";
    }
    return "unknown";
}

SelectionStage selection_stage_from_string(const std::string& name) {
    if (name == "stage1") return SelectionStage::stage1;
    if (name == "stage2") return SelectionStage::stage2;
    if (name == "baseline_random") return SelectionStage::baseline_random;
    if (name == "baseline_kcenter") return SelectionStage::baseline_kcenter;
    throw ConfigError("unknown selection stage: \"" + name + "\"");
}

void save_selection(const SelectionSet& s, const std::filesystem::path& path) {
    jsonl::Writer out(path);
    for (std::size_t i = 0; i < s.per_cluster.size(); ++i) {
        out.write({{"cluster", i},
                   {"stage", to_string(s.stage)},
                   {"ids", s.per_cluster[i]},
                   {"config_hash", s.config_hash},
                   {"seed", s.seed}});
    }
}

SelectionSet load_selection(const std::filesystem::path& path) {
    SelectionSet s;
    bool first = true;
    jsonl::for_each(path, [&](std::size_t lineno, const nlohmann::json& j) {
        const std::size_t cluster = j.at("cluster").get<std::size_t>();
        if (cluster >= s.per_cluster.size()) s.per_cluster.resize(cluster + 1);
        if (!s.per_cluster[cluster].empty()) {
            throw ConfigError(path.string() + ": line " + std::to_string(lineno) +
                              ": duplicate cluster " + std::to_string(cluster));
        }
        s.per_cluster[cluster] = j.at("ids").get<std::vector<std::string>>();
        const SelectionStage stage = selection_stage_from_string(j.at("stage").get<std::string>());
        if (first) {
            s.stage = stage;
            s.config_hash = j.value("config_hash", std::string{});
            s.seed = j.value("seed", std::uint64_t{0});
            first = false;
        } else if (stage != s.stage) {
            throw ConfigError(path.string() + ": mixed stages in one selection file");
        }
    });
    return s;
}

} // namespace assl
