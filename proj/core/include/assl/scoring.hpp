#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "assl/corpus.hpp"

namespace assl {

/// Deterministic, language-neutral tokenizer: CJK codepoints become single
/// tokens, contiguous alphanumeric runs become one token each (ASCII letters
/// lowercase-folded), everything else separates. See README for the exact
/// codepoint classes.
std::vector<std::string> tokenize(std::string_view text);

enum class RougeVariant { rouge_l, rouge_1 };
RougeVariant rouge_variant_from_string(const std::string& name);

/// Rouge-L F1 over token sequences: with L the LCS length,
/// P = L/|candidate|, R = L/|reference|, F1 = 2PR/(P+R), and 0 when L = 0.
/// An empty candidate scores 0; an empty reference is an error.
double rouge_l(std::string_view candidate, std::string_view reference);

/// Rouge-1 F1 (clipped unigram overlap).
double rouge_1(std::string_view candidate, std::string_view reference);

double rouge(RougeVariant variant, std::string_view candidate, std::string_view reference);

/// Value of one record to the current model:
///   diff = raw_score - lora_score
///   prop = -lora_score / (raw_score + 1)
///   llm  = diff + prop
struct ScoreTriple {
    std::string record_id;
    double raw_score = 0.0;
    double lora_score = 0.0;
    double diff = 0.0;
    double prop = 0.0;
    double llm = 0.0;
};

/// Combines two Rouge scores in [0,1] via the formulas above.
ScoreTriple score_record(double raw_score, double lora_score);

/// Generation results keyed by record id; nullopt marks a failed generation.
using OutputTable = std::unordered_map<std::string, std::optional<std::string>>;

struct ScoredPool {
    std::vector<ScoreTriple> scores; // record order, excluded records absent
    std::vector<std::pair<std::string, std::string>> excluded; // id, reason
};

/// Scores every record against both model outputs. Records whose generation
/// failed in either table are excluded (scoring one side only would bias the
/// differential), as are records with an empty reference output. A record id
/// absent from either table is an error.
ScoredPool score_pool(const std::vector<Record>& records, const OutputTable& raw_outputs,
                      const OutputTable& lora_outputs,
                      RougeVariant variant = RougeVariant::rouge_l);

/// Line-delimited JSON {"id": ..., "output": ...} or {"id": ..., "error": ...}.
OutputTable load_output_table(const std::filesystem::path& path);
void save_output_table(const std::vector<std::string>& ids, const OutputTable& table,
                       const std::filesystem::path& path);

/// CSV with header id,raw,lora,diff,prop,llm; values round-trip exactly.
void save_scores_csv(const std::vector<ScoreTriple>& scores, const std::filesystem::path& path);
std::vector<ScoreTriple> load_scores_csv(const std::filesystem::path& path);

} // namespace assl
