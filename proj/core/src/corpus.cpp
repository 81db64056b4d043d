#include "assl/corpus.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <sstream>

#include <json.hpp>

#include "assl/errors.hpp"
#include "assl/jsonl.hpp"

namespace assl {

namespace {

constexpr std::uint32_t kEmbMagic = 0x4C535341u; // "ASSL" little-endian
constexpr std::uint32_t kEmbVersion = 1;

std::string require_string(const nlohmann::json& j, const char* key, std::size_t lineno,
                           const std::filesystem::path& path) {
    auto it = j.find(key);
    if (it == j.end()) {
        throw ConfigError(path.string() + ": line " + std::to_string(lineno) +
                          ": missing " + key);
    }
    if (!it->is_string()) {
        throw ConfigError(path.string() + ": line " + std::to_string(lineno) + ": " + key +
                          " must be a string");
    }
    return it->get<std::string>();
}

} // namespace

std::string embedded_text(const Record& r) {
    return r.instruction + "\n" + r.input;
}

CorpusMatrix::CorpusMatrix(std::vector<std::string> ids, std::size_t dim,
                           std::vector<double> data)
    : dim_(dim), ids_(std::move(ids)), data_(std::move(data)) {
    if (data_.size() != ids_.size() * dim_) {
        throw ConfigError("matrix shape mismatch: " + std::to_string(ids_.size()) + " ids, dim " +
                          std::to_string(dim_) + ", " + std::to_string(data_.size()) + " values");
    }
    row_index_.reserve(ids_.size());
    for (std::size_t i = 0; i < ids_.size(); ++i) {
        auto [_, inserted] = row_index_.emplace(ids_[i], i);
        if (!inserted) throw ConfigError("duplicate id in matrix: \"" + ids_[i] + "\"");
    }
}

std::size_t CorpusMatrix::row_of(const std::string& id) const {
    auto it = row_index_.find(id);
    if (it == row_index_.end()) throw ConfigError("id not in matrix: \"" + id + "\"");
    return it->second;
}

CorpusMatrix CorpusMatrix::submatrix(const std::vector<std::size_t>& rows) const {
    std::vector<std::string> ids;
    ids.reserve(rows.size());
    std::vector<double> data;
    data.reserve(rows.size() * dim_);
    for (std::size_t r : rows) {
        ids.push_back(ids_[r]);
        auto v = row(r);
        data.insert(data.end(), v.begin(), v.end());
    }
    return CorpusMatrix(std::move(ids), dim_, std::move(data));
}

std::vector<Record> load_corpus(const std::filesystem::path& path) {
    std::vector<Record> records;
    std::unordered_map<std::string, std::size_t> first_line_of; // id -> line number
    jsonl::for_each(path, [&](std::size_t lineno, const nlohmann::json& j) {
        if (!j.is_object()) {
            throw ConfigError(path.string() + ": line " + std::to_string(lineno) +
                              ": expected a JSON object");
        }
        Record r;
        r.instruction = require_string(j, "instruction", lineno, path);
        if (r.instruction.empty()) {
            throw ConfigError(path.string() + ": line " + std::to_string(lineno) +
                              ": empty instruction");
        }
        r.output = require_string(j, "output", lineno, path);
        if (auto it = j.find("input"); it != j.end() && it->is_string()) {
            r.input = it->get<std::string>();
        }
        if (auto it = j.find("source"); it != j.end() && it->is_string()) {
            r.source = it->get<std::string>();
        } else {
            r.source = "unknown";
        }
        if (auto it = j.find("id"); it != j.end() && it->is_string() && !it->get<std::string>().empty()) {
            r.id = it->get<std::string>();
        } else {
            r.id = r.source + ":" + std::to_string(lineno);
        }
        auto [prev, inserted] = first_line_of.emplace(r.id, lineno);
        if (!inserted) {
            throw ConfigError(path.string() + ": duplicate id \"" + r.id + "\" (lines " +
                              std::to_string(prev->second) + " and " + std::to_string(lineno) +
                              ")");
        }
        records.push_back(std::move(r));
    });
    return records;
}

void save_corpus(const std::vector<Record>& records, const std::filesystem::path& path) {
    jsonl::Writer out(path);
    for (const auto& r : records) {
        out.write({{"id", r.id},
                   {"source", r.source},
                   {"instruction", r.instruction},
                   {"input", r.input},
                   {"output", r.output}});
    }
}

CorpusMatrix attach_embeddings(const std::vector<Record>& records, const EmbeddingTable& table) {
    std::vector<std::string> missing;
    std::size_t dim = 0;
    for (const auto& r : records) {
        auto it = table.find(r.id);
        if (it == table.end()) {
            missing.push_back(r.id);
            continue;
        }
        if (dim == 0) dim = it->second.size();
    }
    if (!missing.empty()) {
        std::ostringstream msg;
        msg << missing.size() << " record(s) have no embedding:";
        for (std::size_t i = 0; i < missing.size() && i < 20; ++i) msg << " \"" << missing[i] << "\"";
        if (missing.size() > 20) msg << " ...";
        throw ConfigError(msg.str());
    }
    if (dim == 0 && !records.empty()) throw ConfigError("embeddings have dimension 0");

    std::vector<std::string> ids;
    ids.reserve(records.size());
    std::vector<double> data;
    data.reserve(records.size() * dim);
    for (const auto& r : records) {
        const auto& vec = table.at(r.id);
        if (vec.size() != dim) {
            throw ConfigError("embedding dimension mismatch for id \"" + r.id + "\": got " +
                              std::to_string(vec.size()) + ", expected " + std::to_string(dim));
        }
        for (double x : vec) {
            if (!std::isfinite(x)) {
                throw ConfigError("non-finite embedding component for id \"" + r.id + "\"");
            }
        }
        ids.push_back(r.id);
        data.insert(data.end(), vec.begin(), vec.end());
    }
    return CorpusMatrix(std::move(ids), dim, std::move(data));
}

CorpusMatrix normalize(CorpusMatrix m) {
    const std::size_t n = m.rows(), d = m.dim();
    std::vector<double> data(m.raw());
    for (std::size_t i = 0; i < n; ++i) {
        double sq = 0.0;
        for (std::size_t j = 0; j < d; ++j) sq += data[i * d + j] * data[i * d + j];
        if (sq == 0.0) {
            throw ConfigError("zero-norm embedding for id \"" + m.id_of(i) + "\"");
        }
        const double inv = 1.0 / std::sqrt(sq);
        for (std::size_t j = 0; j < d; ++j) data[i * d + j] *= inv;
    }
    std::vector<std::string> ids = m.ids();
    return CorpusMatrix(std::move(ids), d, std::move(data));
}

namespace {

void write_u32(std::ofstream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void write_embedding_file(const std::vector<std::string>& ids, std::size_t dim,
                          const std::function<const double*(std::size_t)>& row_at,
                          const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot write " + path.string());
    write_u32(out, kEmbMagic);
    write_u32(out, kEmbVersion);
    write_u32(out, static_cast<std::uint32_t>(ids.size()));
    write_u32(out, static_cast<std::uint32_t>(dim));
    std::vector<float> rowbuf(dim);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const double* src = row_at(i);
        for (std::size_t j = 0; j < dim; ++j) rowbuf[j] = static_cast<float>(src[j]);
        out.write(reinterpret_cast<const char*>(rowbuf.data()),
                  static_cast<std::streamsize>(dim * sizeof(float)));
    }
    if (!out) throw ConfigError("write failed: " + path.string());

    std::ofstream sidecar(path.string() + ".ids");
    if (!sidecar) throw ConfigError("cannot write " + path.string() + ".ids");
    for (const auto& id : ids) sidecar << id << '\n';
}

} // namespace

void save_embeddings(const std::vector<std::string>& ids,
                     const std::vector<std::vector<double>>& vectors,
                     const std::filesystem::path& path) {
    if (ids.size() != vectors.size()) {
        throw ConfigError("save_embeddings: " + std::to_string(ids.size()) + " ids vs " +
                          std::to_string(vectors.size()) + " vectors");
    }
    const std::size_t dim = vectors.empty() ? 0 : vectors.front().size();
    for (const auto& v : vectors) {
        if (v.size() != dim) throw ConfigError("save_embeddings: inconsistent dimensions");
    }
    write_embedding_file(ids, dim, [&](std::size_t i) { return vectors[i].data(); }, path);
}

void save_embeddings(const CorpusMatrix& m, const std::filesystem::path& path) {
    write_embedding_file(m.ids(), m.dim(), [&](std::size_t i) { return m.row(i).data(); }, path);
}

namespace {

EmbeddingTable load_binary_embeddings(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open " + path.string());
    const std::uint32_t magic = read_u32(in);
    const std::uint32_t version = read_u32(in);
    const std::uint32_t n = read_u32(in);
    const std::uint32_t d = read_u32(in);
    if (!in || magic != kEmbMagic) throw ConfigError(path.string() + ": not an embedding file");
    if (version != kEmbVersion) {
        throw ConfigError(path.string() + ": unsupported embedding file version " +
                          std::to_string(version));
    }

    std::ifstream sidecar(path.string() + ".ids");
    if (!sidecar) throw ConfigError("cannot open id sidecar " + path.string() + ".ids");
    std::vector<std::string> ids;
    ids.reserve(n);
    std::string line;
    while (std::getline(sidecar, line)) ids.push_back(line);
    if (ids.size() != n) {
        throw ConfigError(path.string() + ".ids: has " + std::to_string(ids.size()) +
                          " ids, file header says " + std::to_string(n));
    }

    EmbeddingTable table;
    table.reserve(n);
    std::vector<float> rowbuf(d);
    for (std::uint32_t i = 0; i < n; ++i) {
        in.read(reinterpret_cast<char*>(rowbuf.data()),
                static_cast<std::streamsize>(d * sizeof(float)));
        if (!in) throw ConfigError(path.string() + ": truncated at row " + std::to_string(i));
        std::vector<double> vec(rowbuf.begin(), rowbuf.end());
        auto [_, inserted] = table.emplace(ids[i], std::move(vec));
        if (!inserted) throw ConfigError(path.string() + ": duplicate id \"" + ids[i] + "\"");
    }
    return table;
}

EmbeddingTable load_jsonl_embeddings(const std::filesystem::path& path) {
    EmbeddingTable table;
    jsonl::for_each(path, [&](std::size_t lineno, const nlohmann::json& j) {
        if (!j.contains("id") || !j["id"].is_string() || !j.contains("embedding") ||
            !j["embedding"].is_array()) {
            throw ConfigError(path.string() + ": line " + std::to_string(lineno) +
                              ": expected {\"id\": ..., \"embedding\": [...]}");
        }
        std::vector<double> vec;
        vec.reserve(j["embedding"].size());
        for (const auto& x : j["embedding"]) {
            if (!x.is_number()) {
                throw ConfigError(path.string() + ": line " + std::to_string(lineno) +
                                  ": embedding components must be numbers");
            }
            vec.push_back(x.get<double>());
        }
        auto [_, inserted] = table.emplace(j["id"].get<std::string>(), std::move(vec));
        if (!inserted) {
            throw ConfigError(path.string() + ": line " + std::to_string(lineno) +
                              ": duplicate id \"" + j["id"].get<std::string>() + "\"");
        }
    });
    return table;
}

} // namespace

EmbeddingTable load_embedding_table(const std::filesystem::path& path) {
    std::ifstream probe(path, std::ios::binary);
    if (!probe) throw ConfigError("cannot open " + path.string());
    const std::uint32_t magic = read_u32(probe);
    probe.close();
    if (magic == kEmbMagic) return load_binary_embeddings(path);
    return load_jsonl_embeddings(path);
}

} // namespace assl
