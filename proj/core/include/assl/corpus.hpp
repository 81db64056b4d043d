#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace assl {

/// One supervised training example. `id` is unique within a corpus and
/// `instruction` is never empty.
struct Record {
    std::string id;
    std::string source;
    std::string instruction;
    std::string input;  // may be empty
    std::string output;

    bool operator==(const Record&) const = default;
};

/// The text that gets embedded: instruction, newline, input.
std::string embedded_text(const Record& r);

using EmbeddingTable = std::unordered_map<std::string, std::vector<double>>;

/// Row-aligned dense embedding matrix. Row i carries the vector for ids()[i];
/// the id<->row mapping is a total bijection. Read-only after construction.
class CorpusMatrix {
public:
    CorpusMatrix() = default;
    CorpusMatrix(std::vector<std::string> ids, std::size_t dim, std::vector<double> data);

    std::size_t rows() const { return ids_.size(); }
    std::size_t dim() const { return dim_; }

    std::span<const double> row(std::size_t i) const {
        return {data_.data() + i * dim_, dim_};
    }
    const std::string& id_of(std::size_t i) const { return ids_[i]; }
    const std::vector<std::string>& ids() const { return ids_; }

    bool has(const std::string& id) const { return row_index_.count(id) != 0; }
    std::size_t row_of(const std::string& id) const;

    /// New matrix holding copies of the given rows, in the given order.
    CorpusMatrix submatrix(const std::vector<std::size_t>& rows) const;

    const std::vector<double>& raw() const { return data_; }

private:
    std::size_t dim_ = 0;
    std::vector<std::string> ids_;
    std::vector<double> data_; // row-major, rows() * dim_
    std::unordered_map<std::string, std::size_t> row_index_;
};

/// Reads a line-delimited JSON corpus. Keys instruction/output are required
/// per line, input/id/source optional; a missing id is synthesized as
/// "<source>:<line-number>" (source defaults to "unknown").
std::vector<Record> load_corpus(const std::filesystem::path& path);

/// Writes records as canonical line-delimited JSON; load(save(x)) == x.
void save_corpus(const std::vector<Record>& records, const std::filesystem::path& path);

/// Joins records with their vectors, preserving record order: row i holds
/// records[i]. Missing ids, inconsistent dimensions, and non-finite
/// components are errors.
CorpusMatrix attach_embeddings(const std::vector<Record>& records, const EmbeddingTable& table);

/// Divides every row by its L2 norm. Idempotent; a zero-norm row is an error.
CorpusMatrix normalize(CorpusMatrix m);

/// Binary embedding file: 16-byte little-endian header (u32 magic "ASSL",
/// u32 version=1, u32 n, u32 d) followed by n*d float32 values, row-major,
/// plus a "<path>.ids" sidecar with one record id per line in row order.
void save_embeddings(const std::vector<std::string>& ids,
                     const std::vector<std::vector<double>>& vectors,
                     const std::filesystem::path& path);
void save_embeddings(const CorpusMatrix& m, const std::filesystem::path& path);

/// Reads either the binary format above (sniffed by magic) or line-delimited
/// JSON {"id": ..., "embedding": [...]}.
EmbeddingTable load_embedding_table(const std::filesystem::path& path);

} // namespace assl
