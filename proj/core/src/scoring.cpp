#include "assl/scoring.hpp"

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <unordered_map>

#include <json.hpp>

#include "assl/errors.hpp"
#include "assl/jsonl.hpp"

namespace assl {

namespace {

// Han, Kana, and CJK compatibility ranges: one token per codepoint.
bool is_cjk(char32_t c) {
    return (c >= 0x4E00 && c <= 0x9FFF) || (c >= 0x3400 && c <= 0x4DBF) ||
           (c >= 0xF900 && c <= 0xFAFF) || (c >= 0x3040 && c <= 0x30FF) ||
           (c >= 0x20000 && c <= 0x2FFFF);
}

// Non-ASCII codepoints that separate tokens: Unicode whitespace and the
// common punctuation blocks (general, CJK, fullwidth forms).
bool is_separator_cp(char32_t c) {
    return c == 0x00A0 || (c >= 0x2000 && c <= 0x206F) || (c >= 0x2E00 && c <= 0x2E7F) ||
           (c >= 0x3000 && c <= 0x303F) || (c >= 0xFE30 && c <= 0xFE4F) ||
           (c >= 0xFF00 && c <= 0xFF0F) || (c >= 0xFF1A && c <= 0xFF20) ||
           (c >= 0xFF3B && c <= 0xFF40) || (c >= 0xFF5B && c <= 0xFF65);
}

void append_utf8(std::string& out, char32_t c) {
    if (c < 0x80) {
        out.push_back(static_cast<char>(c));
    } else if (c < 0x800) {
        out.push_back(static_cast<char>(0xC0 | (c >> 6)));
        out.push_back(static_cast<char>(0x80 | (c & 0x3F)));
    } else if (c < 0x10000) {
        out.push_back(static_cast<char>(0xE0 | (c >> 12)));
        out.push_back(static_cast<char>(0x80 | ((c >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (c & 0x3F)));
    } else {
        out.push_back(static_cast<char>(0xF0 | (c >> 18)));
        out.push_back(static_cast<char>(0x80 | ((c >> 12) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | ((c >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (c & 0x3F)));
    }
}

/// Decodes the next UTF-8 codepoint; invalid bytes decode as U+FFFD (which
/// classifies as a separator-free letter run breaker below -- we map it to 0).
char32_t next_codepoint(std::string_view s, std::size_t& i) {
    const unsigned char b0 = static_cast<unsigned char>(s[i]);
    if (b0 < 0x80) {
        ++i;
        return b0;
    }
    int len = 0;
    char32_t c = 0;
    if ((b0 & 0xE0) == 0xC0) {
        len = 2;
        c = b0 & 0x1F;
    } else if ((b0 & 0xF0) == 0xE0) {
        len = 3;
        c = b0 & 0x0F;
    } else if ((b0 & 0xF8) == 0xF0) {
        len = 4;
        c = b0 & 0x07;
    } else {
        ++i;
        return 0; // stray continuation byte: treat as separator
    }
    if (i + len > s.size()) {
        ++i;
        return 0;
    }
    for (int j = 1; j < len; ++j) {
        const unsigned char bj = static_cast<unsigned char>(s[i + j]);
        if ((bj & 0xC0) != 0x80) {
            ++i;
            return 0;
        }
        c = (c << 6) | (bj & 0x3F);
    }
    i += len;
    return c;
}

std::size_t lcs_length(const std::vector<std::string>& a, const std::vector<std::string>& b) {
    // Intern tokens so the DP compares integers.
    std::unordered_map<std::string_view, int> vocab;
    auto intern = [&](const std::vector<std::string>& toks) {
        std::vector<int> out;
        out.reserve(toks.size());
        for (const auto& t : toks) {
            auto [it, _] = vocab.emplace(t, static_cast<int>(vocab.size()));
            out.push_back(it->second);
        }
        return out;
    };
    const std::vector<int> x = intern(a), y = intern(b);
    std::vector<std::size_t> prev(y.size() + 1, 0), cur(y.size() + 1, 0);
    for (std::size_t i = 1; i <= x.size(); ++i) {
        for (std::size_t j = 1; j <= y.size(); ++j) {
            cur[j] = (x[i - 1] == y[j - 1]) ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    return prev[y.size()];
}

} // namespace

std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> tokens;
    std::string run;
    auto flush = [&] {
        if (!run.empty()) {
            tokens.push_back(run);
            run.clear();
        }
    };
    std::size_t i = 0;
    while (i < text.size()) {
        const char32_t c = next_codepoint(text, i);
        if (c < 0x80) {
            const char ch = static_cast<char>(c);
            if ((ch >= 'a' && ch <= 'z') || (ch >= '0' && ch <= '9')) {
                run.push_back(ch);
            } else if (ch >= 'A' && ch <= 'Z') {
                run.push_back(static_cast<char>(ch - 'A' + 'a'));
            } else {
                flush();
            }
        } else if (is_cjk(c)) {
            flush();
            std::string tok;
            append_utf8(tok, c);
            tokens.push_back(std::move(tok));
        } else if (is_separator_cp(c)) {
            flush();
        } else {
            append_utf8(run, c);
        }
    }
    flush();
    return tokens;
}

RougeVariant rouge_variant_from_string(const std::string& name) {
    if (name == "rouge-l" || name == "rouge-L" || name == "rougeL") return RougeVariant::rouge_l;
    if (name == "rouge-1" || name == "rouge1") return RougeVariant::rouge_1;
    throw ConfigError("unknown rouge variant: \"" + name + "\"");
}

double rouge_l(std::string_view candidate, std::string_view reference) {
    const std::vector<std::string> ref = tokenize(reference);
    if (ref.empty()) throw ConfigError("rouge_l: reference is empty after tokenization");
    const std::vector<std::string> cand = tokenize(candidate);
    if (cand.empty()) return 0.0;
    const std::size_t lcs = lcs_length(cand, ref);
    if (lcs == 0) return 0.0;
    const double p = static_cast<double>(lcs) / static_cast<double>(cand.size());
    const double r = static_cast<double>(lcs) / static_cast<double>(ref.size());
    return 2.0 * p * r / (p + r);
}

double rouge_1(std::string_view candidate, std::string_view reference) {
    const std::vector<std::string> ref = tokenize(reference);
    if (ref.empty()) throw ConfigError("rouge_1: reference is empty after tokenization");
    const std::vector<std::string> cand = tokenize(candidate);
    if (cand.empty()) return 0.0;
    std::unordered_map<std::string, std::size_t> ref_counts;
    for (const auto& t : ref) ++ref_counts[t];
    std::size_t overlap = 0;
    for (const auto& t : cand) {
        auto it = ref_counts.find(t);
        if (it != ref_counts.end() && it->second > 0) {
            --it->second;
            ++overlap;
        }
    }
    if (overlap == 0) return 0.0;
    const double p = static_cast<double>(overlap) / static_cast<double>(cand.size());
    const double r = static_cast<double>(overlap) / static_cast<double>(ref.size());
    return 2.0 * p * r / (p + r);
}

double rouge(RougeVariant variant, std::string_view candidate, std::string_view reference) {
    return variant == RougeVariant::rouge_l ? rouge_l(candidate, reference)
                                            : rouge_1(candidate, reference);
}

ScoreTriple score_record(double raw_score, double lora_score) {
    if (raw_score < 0.0 || raw_score > 1.0) {
        throw ConfigError("score_record: raw_score out of [0,1]: " + std::to_string(raw_score));
    }
    if (lora_score < 0.0 || lora_score > 1.0) {
        throw ConfigError("score_record: lora_score out of [0,1]: " + std::to_string(lora_score));
    }
    ScoreTriple t;
    t.raw_score = raw_score;
    t.lora_score = lora_score;
    t.diff = raw_score - lora_score;
    t.prop = -lora_score / (raw_score + 1.0);
    t.llm = t.diff + t.prop;
    return t;
}

ScoredPool score_pool(const std::vector<Record>& records, const OutputTable& raw_outputs,
                      const OutputTable& lora_outputs, RougeVariant variant) {
    ScoredPool pool;
    for (const auto& rec : records) {
        auto raw_it = raw_outputs.find(rec.id);
        auto lora_it = lora_outputs.find(rec.id);
        if (raw_it == raw_outputs.end() || lora_it == lora_outputs.end()) {
            throw ConfigError("score_pool: record \"" + rec.id +
                              "\" missing from an output table");
        }
        const bool raw_ok = raw_it->second.has_value();
        const bool lora_ok = lora_it->second.has_value();
        if (!raw_ok || !lora_ok) {
            const char* reason = (!raw_ok && !lora_ok) ? "failed-both"
                                 : !raw_ok             ? "failed-raw"
                                                       : "failed-lora";
            pool.excluded.emplace_back(rec.id, reason);
            continue;
        }
        if (tokenize(rec.output).empty()) {
            pool.excluded.emplace_back(rec.id, "empty-reference");
            continue;
        }
        ScoreTriple t = score_record(rouge(variant, *raw_it->second, rec.output),
                                     rouge(variant, *lora_it->second, rec.output));
        t.record_id = rec.id;
        pool.scores.push_back(std::move(t));
    }
    return pool;
}

OutputTable load_output_table(const std::filesystem::path& path) {
    OutputTable table;
    jsonl::for_each(path, [&](std::size_t lineno, const nlohmann::json& j) {
        if (!j.contains("id") || !j["id"].is_string()) {
            throw ConfigError(path.string() + ": line " + std::to_string(lineno) +
                              ": missing id");
        }
        const std::string id = j["id"].get<std::string>();
        std::optional<std::string> out;
        if (j.contains("output") && j["output"].is_string()) {
            out = j["output"].get<std::string>();
        } else if (!j.contains("error")) {
            throw ConfigError(path.string() + ": line " + std::to_string(lineno) +
                              ": need \"output\" or \"error\"");
        }
        auto [_, inserted] = table.emplace(id, std::move(out));
        if (!inserted) {
            throw ConfigError(path.string() + ": line " + std::to_string(lineno) +
                              ": duplicate id \"" + id + "\"");
        }
    });
    return table;
}

void save_output_table(const std::vector<std::string>& ids, const OutputTable& table,
                       const std::filesystem::path& path) {
    jsonl::Writer out(path);
    for (const auto& id : ids) {
        auto it = table.find(id);
        if (it == table.end()) throw ConfigError("save_output_table: no entry for \"" + id + "\"");
        if (it->second.has_value()) {
            out.write({{"id", id}, {"output", *it->second}});
        } else {
            out.write({{"id", id}, {"error", "generation failed"}});
        }
    }
}

namespace {

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string csv_quote(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string q = "\"";
    for (char c : s) {
        if (c == '"') q += "\"\"";
        else q += c;
    }
    q += "\"";
    return q;
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                cur += '"';
                ++i;
            } else if (c == '"') {
                quoted = false;
            } else {
                cur += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            fields.push_back(std::move(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    fields.push_back(std::move(cur));
    return fields;
}

double parse_double(const std::string& s, const std::filesystem::path& path, std::size_t lineno) {
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) {
        throw ConfigError(path.string() + ": line " + std::to_string(lineno) +
                          ": bad number \"" + s + "\"");
    }
    return v;
}

} // namespace

void save_scores_csv(const std::vector<ScoreTriple>& scores, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write " + path.string());
    out << "id,raw,lora,diff,prop,llm\n";
    for (const auto& t : scores) {
        out << csv_quote(t.record_id) << ',' << fmt_double(t.raw_score) << ','
            << fmt_double(t.lora_score) << ',' << fmt_double(t.diff) << ',' << fmt_double(t.prop)
            << ',' << fmt_double(t.llm) << '\n';
    }
}

std::vector<ScoreTriple> load_scores_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open " + path.string());
    std::vector<ScoreTriple> scores;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (lineno == 1 || line.empty()) continue; // header
        auto fields = split_csv_line(line);
        if (fields.size() != 6) {
            throw ConfigError(path.string() + ": line " + std::to_string(lineno) +
                              ": expected 6 fields, got " + std::to_string(fields.size()));
        }
        ScoreTriple t;
        t.record_id = fields[0];
        t.raw_score = parse_double(fields[1], path, lineno);
        t.lora_score = parse_double(fields[2], path, lineno);
        t.diff = parse_double(fields[3], path, lineno);
        t.prop = parse_double(fields[4], path, lineno);
        t.llm = parse_double(fields[5], path, lineno);
        scores.push_back(std::move(t));
    }
    return scores;
}

} // namespace assl
