#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace resflow {

// Flat key-value configuration. Every key is declared with a type and a
// default; unknown keys and ill-typed values are rejected with
// ErrorCode::config. File syntax: one `key = value` (or `key value`) per
// line, '#' starts a comment.
class Config {
public:
    Config();

    void set(std::string_view key, std::string_view value);
    // Both return the canonical keys that were set, in file order.
    std::vector<std::string> load_file(const std::string& path);
    std::vector<std::string> load_text(std::string_view text, const std::string& origin = "<text>");

    const std::string& get(std::string_view key) const;
    double get_double(std::string_view key) const;
    long long get_int(std::string_view key) const;
    std::uint64_t get_u64(std::string_view key) const;

    // Sorted (key, value) pairs of the full configuration.
    const std::map<std::string, std::string>& entries() const { return values_; }

    // Maps aliases (`n-fixed`, `estimator`, ...) and dashes to canonical keys.
    static std::string canonical_key(std::string_view key);
    static bool is_known(std::string_view key);
    static std::vector<std::string> known_keys();

private:
    std::map<std::string, std::string> values_;
};

}  // namespace resflow
