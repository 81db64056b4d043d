#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <string>

#include <json.hpp>

#include "assl/errors.hpp"

namespace assl::jsonl {

/// Calls fn(line_number, parsed_json) for every non-empty line. Line numbers
/// are 1-based. Malformed JSON raises ConfigError naming the line.
inline void for_each(const std::filesystem::path& path,
                     const std::function<void(std::size_t, const nlohmann::json&)>& fn) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open " + path.string());
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded()) {
            throw ConfigError(path.string() + ": line " + std::to_string(lineno) +
                              ": malformed JSON");
        }
        fn(lineno, j);
    }
}

class Writer {
public:
    explicit Writer(const std::filesystem::path& path) : out_(path) {
        if (!out_) throw ConfigError("cannot write " + path.string());
    }

    void write(const nlohmann::json& j) { out_ << j.dump() << '\n'; }

private:
    std::ofstream out_;
};

} // namespace assl::jsonl
