#include "config.hpp"

#include <cerrno>
#include <charconv>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "common.hpp"

namespace resflow {

namespace {

enum class KeyType { real, integer, text };

struct KeyDef {
    const char* name;
    KeyType type;
    const char* default_value;
};

// clang-format off
constexpr KeyDef kKeys[] = {
    {"dataset",                  KeyType::text,    "checkerboard"},
    {"blocks",                   KeyType::integer, "10"},
    {"hidden_width",             KeyType::integer, "128"},
    {"activation",               KeyType::text,    "lipswish"},
    {"steps",                    KeyType::integer, "2000"},
    {"batch_size",               KeyType::integer, "512"},
    {"lr",                       KeyType::real,    "1e-3"},
    {"weight_decay",             KeyType::real,    "5e-4"},
    {"polyak_decay",             KeyType::real,    "0.999"},
    {"adam.beta1",               KeyType::real,    "0.9"},
    {"adam.beta2",               KeyType::real,    "0.99"},
    {"adam.eps",                 KeyType::real,    "1e-8"},
    {"seed",                     KeyType::integer, "0"},
    {"threads",                  KeyType::integer, "1"},
    {"out_dir",                  KeyType::text,    ""},
    {"eval_every",               KeyType::integer, "250"},
    {"checkpoint_every",         KeyType::integer, "500"},
    {"n_eval",                   KeyType::integer, "4000"},
    {"eval.mode",                KeyType::text,    "exact"},
    {"eval.n_exact",             KeyType::integer, "20"},
    {"eval.tail_samples",        KeyType::integer, "10"},
    {"lipschitz.coeff",          KeyType::real,    "0.98"},
    {"lipschitz.norm_preset",    KeyType::text,    "spectral"},
    {"lipschitz.tol",            KeyType::real,    "1e-3"},
    {"lipschitz.max_iters",      KeyType::integer, "200"},
    {"lipschitz.max_iters_warm", KeyType::integer, "10"},
    {"estimator.kind",           KeyType::text,    "unbiased"},
    {"estimator.q",              KeyType::real,    "0.5"},
    {"estimator.n_exact",        KeyType::integer, "2"},
    {"estimator.n_fixed",        KeyType::integer, "5"},
    {"estimator.hutchinson",     KeyType::text,    "gaussian"},
    {"estimator.n_hutchinson",   KeyType::integer, "1"},
    {"diagnose.samples",         KeyType::integer, "100000"},
    {"diagnose.hidden_width",    KeyType::integer, "32"},
    {"diagnose.block",           KeyType::integer, "0"},
    {"diagnose.x",               KeyType::real,    "0.3"},
    {"diagnose.y",               KeyType::real,    "-0.2"},
};
// clang-format on

struct Alias {
    const char* from;
    const char* to;
};

constexpr Alias kAliases[] = {
    {"estimator", "estimator.kind"},     {"n_fixed", "estimator.n_fixed"},
    {"n_exact", "estimator.n_exact"},    {"q", "estimator.q"},
    {"hutchinson", "estimator.hutchinson"}, {"coeff", "lipschitz.coeff"},
    {"norm_preset", "lipschitz.norm_preset"}, {"norm", "lipschitz.norm_preset"},
};

const KeyDef* find_key(std::string_view key) {
    for (const auto& k : kKeys)
        if (key == k.name) return &k;
    return nullptr;
}

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

bool parse_real(const std::string& s, double& out) {
    if (s.empty()) return false;
    char* end = nullptr;
    errno = 0;
    out = std::strtod(s.c_str(), &end);
    return errno == 0 && end == s.c_str() + s.size();
}

bool parse_int(const std::string& s, long long& out) {
    if (s.empty()) return false;
    const auto* first = s.data();
    const auto* last = s.data() + s.size();
    const auto res = std::from_chars(first, last, out);
    return res.ec == std::errc() && res.ptr == last;
}

}  // namespace

Config::Config() {
    for (const auto& k : kKeys) values_[k.name] = k.default_value;
}

std::string Config::canonical_key(std::string_view key) {
    std::string k(key);
    for (auto& ch : k)
        if (ch == '-') ch = '_';
    for (const auto& a : kAliases)
        if (k == a.from) return a.to;
    return k;
}

bool Config::is_known(std::string_view key) { return find_key(canonical_key(key)) != nullptr; }

std::vector<std::string> Config::known_keys() {
    std::vector<std::string> out;
    for (const auto& k : kKeys) out.emplace_back(k.name);
    return out;
}

void Config::set(std::string_view key, std::string_view value) {
    const auto canon = canonical_key(key);
    const auto* def = find_key(canon);
    require(def != nullptr, ErrorCode::config, "unknown configuration key '" + std::string(key) + "'");
    const auto v = trim(value);
    if (def->type == KeyType::real) {
        double d;
        require(parse_real(v, d), ErrorCode::config, "key '" + canon + "' expects a number, got '" + v + "'");
    } else if (def->type == KeyType::integer) {
        long long i;
        require(parse_int(v, i), ErrorCode::config, "key '" + canon + "' expects an integer, got '" + v + "'");
    }
    values_[canon] = v;
}

std::vector<std::string> Config::load_file(const std::string& path) {
    std::ifstream in(path);
    require(static_cast<bool>(in), ErrorCode::config, "cannot open config file '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return load_text(ss.str(), path);
}

std::vector<std::string> Config::load_text(std::string_view text, const std::string& origin) {
    std::vector<std::string> keys;
    std::istringstream in{std::string(text)};
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        const auto t = trim(line);
        if (t.empty()) continue;
        auto sep = t.find('=');
        if (sep == std::string::npos) sep = t.find_first_of(" \t");
        require(sep != std::string::npos, ErrorCode::config,
                origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
        try {
            const auto key = trim(t.substr(0, sep));
            set(key, trim(t.substr(sep + 1)));
            keys.push_back(canonical_key(key));
        } catch (const Error& e) {
            throw Error(ErrorCode::config, origin + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return keys;
}

const std::string& Config::get(std::string_view key) const {
    const auto it = values_.find(canonical_key(key));
    require(it != values_.end(), ErrorCode::config, "unknown configuration key '" + std::string(key) + "'");
    return it->second;
}

double Config::get_double(std::string_view key) const {
    double d = 0;
    require(parse_real(get(key), d), ErrorCode::config, "key '" + std::string(key) + "' is not a number");
    return d;
}

long long Config::get_int(std::string_view key) const {
    long long i = 0;
    require(parse_int(get(key), i), ErrorCode::config, "key '" + std::string(key) + "' is not an integer");
    return i;
}

std::uint64_t Config::get_u64(std::string_view key) const {
    const auto i = get_int(key);
    require(i >= 0, ErrorCode::config, "key '" + std::string(key) + "' must be non-negative");
    return static_cast<std::uint64_t>(i);
}

}  // namespace resflow
