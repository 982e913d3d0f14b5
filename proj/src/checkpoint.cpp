#include "checkpoint.hpp"

#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace resflow {

namespace {

std::string hex(double x) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%a", x);
    return buf;
}

void put_values(std::string& out, const char* tag, const double* data, Eigen::Index n) {
    out += tag;
    out += ' ';
    out += std::to_string(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        out += ' ';
        out += hex(data[i]);
    }
    out += '\n';
}

class Reader {
public:
    explicit Reader(const std::string& text) : in_(text) {}

    // Next line split on single spaces.
    std::vector<std::string> next() {
        std::string line;
        ++lineno_;
        if (!std::getline(in_, line)) fail("unexpected end of file");
        std::vector<std::string> tok;
        std::size_t pos = 0;
        while (true) {
            const auto sp = line.find(' ', pos);
            tok.push_back(line.substr(pos, sp == std::string::npos ? std::string::npos : sp - pos));
            if (sp == std::string::npos) break;
            pos = sp + 1;
        }
        last_line_ = line;
        return tok;
    }

    std::vector<std::string> expect(const std::string& tag) {
        auto tok = next();
        if (tok[0] != tag) fail("expected '" + tag + "', found '" + tok[0] + "'");
        return tok;
    }

    const std::string& last_line() const { return last_line_; }

    [[noreturn]] void fail(const std::string& msg) const {
        throw Error(ErrorCode::io, "checkpoint line " + std::to_string(lineno_) + ": " + msg);
    }

    double real(const std::string& s) const {
        char* end = nullptr;
        errno = 0;
        const double v = std::strtod(s.c_str(), &end);
        if (s.empty() || end != s.c_str() + s.size()) fail("bad number '" + s + "'");
        return v;
    }

    long long integer(const std::string& s) const {
        char* end = nullptr;
        errno = 0;
        const long long v = std::strtoll(s.c_str(), &end, 10);
        if (s.empty() || end != s.c_str() + s.size() || errno != 0) fail("bad integer '" + s + "'");
        return v;
    }

    std::uint64_t u64(const std::string& s) const {
        char* end = nullptr;
        errno = 0;
        const unsigned long long v = std::strtoull(s.c_str(), &end, 10);
        if (s.empty() || end != s.c_str() + s.size() || errno != 0) fail("bad integer '" + s + "'");
        return v;
    }

    void arity(const std::vector<std::string>& tok, std::size_t n) const {
        if (tok.size() != n) fail("'" + tok[0] + "' expects " + std::to_string(n - 1) + " fields");
    }

    std::vector<double> values(const std::string& tag, long long expected = -1) {
        const auto tok = expect(tag);
        if (tok.size() < 2) fail("'" + tag + "' needs a count");
        const auto n = integer(tok[1]);
        if (n < 0 || static_cast<std::size_t>(n) + 2 != tok.size()) fail("'" + tag + "' count mismatch");
        if (expected >= 0 && n != expected) fail("'" + tag + "' has " + std::to_string(n) + " values, expected " +
                                                 std::to_string(expected));
        std::vector<double> out;
        out.reserve(static_cast<std::size_t>(n));
        for (std::size_t i = 2; i < tok.size(); ++i) out.push_back(real(tok[i]));
        return out;
    }

private:
    std::istringstream in_;
    std::string last_line_;
    int lineno_ = 0;
};

Vec to_vec(const std::vector<double>& v) { return Eigen::Map<const Vec>(v.data(), static_cast<Eigen::Index>(v.size())); }

}  // namespace

FlowModel Checkpoint::eval_model() const {
    FlowModel m = model;
    if (!polyak_shadow.empty()) {
        assign_params(m, polyak_shadow);
        apply_constraints(m, true);
    }
    return m;
}

std::string serialize_checkpoint(const Checkpoint& ck) {
    const auto& m = ck.model;
    std::string out = "resflow-checkpoint " + std::to_string(kCheckpointVersion) + "\n";
    out += "dim " + std::to_string(m.dim) + "\n";
    out += "step " + std::to_string(ck.step) + "\n";
    out += "seed " + std::to_string(ck.seed) + "\n";
    const auto& lip = m.lipschitz;
    out += "lipschitz " + hex(lip.coeff) + " " + to_string(lip.preset) + " " + hex(lip.tol) + " " +
           std::to_string(lip.max_iters) + " " + std::to_string(lip.max_iters_warm) + "\n";
    out += "config " + std::to_string(ck.config.size()) + "\n";
    for (const auto& [k, v] : ck.config) out += "entry " + k + " " + v + "\n";
    out += "layers " + std::to_string(m.layers.size()) + "\n";
    for (const auto& layer : m.layers) {
        if (const auto* a = std::get_if<ActNorm>(&layer)) {
            out += std::string("actnorm ") + (a->initialized ? "1" : "0") + "\n";
            put_values(out, "shift", a->shift.data(), a->shift.size());
            put_values(out, "log_scale", a->log_scale.data(), a->log_scale.size());
            continue;
        }
        const auto& b = std::get<ResidualBlock>(layer);
        const auto& p = b.params;
        out += "block " + to_string(p.activation) + " " + std::to_string(p.layers.size()) + "\n";
        for (std::size_t l = 0; l < p.layers.size(); ++l) {
            const auto& lp = p.layers[l];
            out += "linear " + std::to_string(lp.weight.rows()) + " " + std::to_string(lp.weight.cols()) + " " +
                   hex(lp.raw_beta) + " " + hex(lp.norm_in) + " " + hex(lp.norm_out) + "\n";
            put_values(out, "weight", lp.weight.data(), lp.weight.size());
            put_values(out, "bias", lp.bias.data(), lp.bias.size());
            if (l < b.norm_state.size()) {
                const auto& st = b.norm_state[l];
                out += "power " + hex(st.last_estimate) + " " + std::to_string(st.iters_used) + "\n";
                put_values(out, "u", st.u.data(), st.u.size());
            } else {
                out += "nopower\n";
            }
        }
    }
    if (!ck.polyak_shadow.empty())
        put_values(out, "polyak", ck.polyak_shadow.data(), static_cast<Eigen::Index>(ck.polyak_shadow.size()));
    else
        out += "polyak 0\n";
    out += "end\n";
    return out;
}

Checkpoint parse_checkpoint(const std::string& text) {
    Reader r(text);
    Checkpoint ck;
    auto tok = r.expect("resflow-checkpoint");
    r.arity(tok, 2);
    if (r.integer(tok[1]) != kCheckpointVersion) r.fail("unsupported checkpoint version " + tok[1]);
    tok = r.expect("dim");
    r.arity(tok, 2);
    auto& m = ck.model;
    m.dim = static_cast<int>(r.integer(tok[1]));
    if (m.dim < 1) r.fail("dimension must be positive");
    tok = r.expect("step");
    r.arity(tok, 2);
    ck.step = r.integer(tok[1]);
    tok = r.expect("seed");
    r.arity(tok, 2);
    ck.seed = r.u64(tok[1]);
    tok = r.expect("lipschitz");
    r.arity(tok, 6);
    m.lipschitz.coeff = r.real(tok[1]);
    m.lipschitz.preset = parse_norm_preset(tok[2]);
    m.lipschitz.tol = r.real(tok[3]);
    m.lipschitz.max_iters = static_cast<int>(r.integer(tok[4]));
    m.lipschitz.max_iters_warm = static_cast<int>(r.integer(tok[5]));
    tok = r.expect("config");
    r.arity(tok, 2);
    const auto n_config = r.integer(tok[1]);
    for (long long i = 0; i < n_config; ++i) {
        tok = r.expect("entry");
        if (tok.size() < 3) r.fail("config entry needs a key and a value");
        const auto& line = r.last_line();
        const auto value_pos = tok[0].size() + 1 + tok[1].size() + 1;
        ck.config[tok[1]] = line.substr(value_pos);
    }
    tok = r.expect("layers");
    r.arity(tok, 2);
    const auto n_layers = r.integer(tok[1]);
    const int d = m.dim;
    for (long long i = 0; i < n_layers; ++i) {
        tok = r.next();
        if (tok[0] == "actnorm") {
            r.arity(tok, 2);
            ActNorm a;
            a.initialized = r.integer(tok[1]) != 0;
            a.shift = to_vec(r.values("shift", d));
            a.log_scale = to_vec(r.values("log_scale", d));
            m.layers.emplace_back(std::move(a));
            continue;
        }
        if (tok[0] != "block") r.fail("expected 'actnorm' or 'block', found '" + tok[0] + "'");
        r.arity(tok, 3);
        ResidualBlock b;
        b.params.activation = parse_activation(tok[1]);
        const auto n_linear = r.integer(tok[2]);
        if (n_linear < 1) r.fail("block needs at least one linear layer");
        for (long long l = 0; l < n_linear; ++l) {
            tok = r.expect("linear");
            r.arity(tok, 6);
            LayerParams lp;
            const auto rows = r.integer(tok[1]);
            const auto cols = r.integer(tok[2]);
            if (rows < 1 || cols < 1) r.fail("layer shape must be positive");
            lp.raw_beta = r.real(tok[3]);
            lp.norm_in = r.real(tok[4]);
            lp.norm_out = r.real(tok[5]);
            const auto w = r.values("weight", rows * cols);
            lp.weight = Eigen::Map<const Mat>(w.data(), rows, cols);
            lp.bias = to_vec(r.values("bias", rows));
            b.params.layers.push_back(std::move(lp));
            tok = r.next();
            if (tok[0] == "power") {
                r.arity(tok, 3);
                PowerIterState st;
                st.last_estimate = r.real(tok[1]);
                st.iters_used = static_cast<int>(r.integer(tok[2]));
                st.u = to_vec(r.values("u"));
                b.norm_state.push_back(std::move(st));
            } else if (tok[0] != "nopower") {
                r.fail("expected 'power' or 'nopower'");
            }
        }
        try {
            b.params.validate();
        } catch (const Error& e) {
            r.fail(e.what());
        }
        if (b.params.dim() != d) r.fail("block dimension does not match model dimension");
        m.layers.emplace_back(std::move(b));
    }
    ck.polyak_shadow = r.values("polyak");
    if (!ck.polyak_shadow.empty() && ck.polyak_shadow.size() != param_count(m))
        r.fail("Polyak shadow length does not match the model");
    r.expect("end");
    return ck;
}

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(out), ErrorCode::io, "cannot write checkpoint '" + path + "'");
    out << serialize_checkpoint(ck);
    require(static_cast<bool>(out), ErrorCode::io, "error writing checkpoint '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), ErrorCode::io, "cannot open checkpoint '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_checkpoint(ss.str());
}

}  // namespace resflow
