#pragma once

#include <algorithm>
#include <cctype>
#include <charconv>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "errors.hpp"

namespace fpbc {

enum class Carrier { photon, xray, electron, acoustic, spin, particle };
enum class ValueDomain { real_nonneg, real, complex_valued };
enum class NoiseKind { gaussian, poisson, poisson_gaussian };
enum class Metric { psnr_db, ssim };

// The 11 canonical primitive kinds.
enum class Kind { P, M, Pi, F, C, Sigma, D, S, W, R, Lambda };

// Parameterised-kind variants: C_z is the depth-PSF convolution (written
// Phi_z in chain notation), W_lambda / W_t are spectral / temporal dispersion.
enum class Variant { none, z, lambda, t };

struct ChainNode {
    Kind kind = Kind::D;
    Variant variant = Variant::none;
    std::map<std::string, std::string> params;
    int tier = 1;

    bool operator==(const ChainNode&) const = default;
};

// One stage of the chain; more than one node means parallel branches that the
// following Accumulate node merges (e.g. OCT's "P + P -> Sigma").
struct ChainStage {
    std::vector<ChainNode> parallel;
    bool operator==(const ChainStage&) const = default;
};

struct ChainExpr {
    std::vector<ChainStage> stages;

    bool empty() const { return stages.empty(); }
    std::size_t node_count() const {
        std::size_t n = 0;
        for (const auto& s : stages) n += s.parallel.size();
        return n;
    }
    bool operator==(const ChainExpr&) const = default;
};

struct ObjectSpec {
    std::vector<std::size_t> dims;
    ValueDomain value_domain = ValueDomain::real_nonneg;
    std::vector<std::string> constraints;

    std::size_t element_count() const {
        std::size_t n = 1;
        for (auto d : dims) n *= d;
        return n;
    }
    bool operator==(const ObjectSpec&) const = default;
};

struct NoiseSpec {
    NoiseKind kind = NoiseKind::gaussian;
    double sigma = 0.0;
    double i0 = 0.0;
    std::optional<double> snr_db;

    bool has_poisson() const { return kind != NoiseKind::gaussian; }
    bool operator==(const NoiseSpec&) const = default;
};

struct TargetSpec {
    Metric metric = Metric::psnr_db;
    double threshold = 30.0;
    bool operator==(const TargetSpec&) const = default;
};

struct CalibrationEntry {
    std::string param_name;
    double tolerance = 0.0;
    std::optional<double> sensitivity_db_per_unit;
    bool operator==(const CalibrationEntry&) const = default;
};

struct SystemElements {
    std::map<std::string, std::string> source;
    std::map<std::string, std::string> optics;
    std::map<std::string, std::string> detector;
    std::vector<CalibrationEntry> calibration;
    std::vector<std::string> defaulted; // detector keys injected by the parser

    bool operator==(const SystemElements&) const = default;
};

struct SpecDocument {
    std::string modality;
    Carrier carrier = Carrier::photon;
    std::map<std::string, std::string> geometry;
    ObjectSpec object;
    ChainExpr forward_model;
    NoiseSpec noise;
    TargetSpec target;
    SystemElements system_elements;
    std::map<std::string, std::string> extra_fields; // non-schema keys, kept for diagnostics

    bool operator==(const SpecDocument&) const = default;
};

struct SchemaIssue {
    std::string field;
    std::string rule;
    std::string observed;
};

// ---------------------------------------------------------------------------
// small string helpers

namespace strutil {

inline std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline std::string lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(),
                   [](unsigned char c) { return char(std::tolower(c)); });
    return s;
}

inline std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == sep) {
            out.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    out.push_back(cur);
    return out;
}

inline std::vector<std::string> words(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream is(s);
    std::string w;
    while (is >> w) out.push_back(w);
    return out;
}

inline bool parse_double(const std::string& s, double& out) {
    const char* b = s.data();
    const char* e = b + s.size();
    auto res = std::from_chars(b, e, out);
    return res.ec == std::errc{} && res.ptr == e;
}

// Shortest round-trip decimal form.
inline std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

} // namespace strutil

// ---------------------------------------------------------------------------
// enum <-> text

inline const char* carrier_name(Carrier c) {
    switch (c) {
        case Carrier::photon: return "photon";
        case Carrier::xray: return "xray";
        case Carrier::electron: return "electron";
        case Carrier::acoustic: return "acoustic";
        case Carrier::spin: return "spin";
        case Carrier::particle: return "particle";
    }
    return "?";
}

inline Carrier parse_carrier(const std::string& s) {
    std::string t = strutil::lower(strutil::trim(s));
    if (t == "photon") return Carrier::photon;
    if (t == "xray" || t == "x-ray") return Carrier::xray;
    if (t == "electron") return Carrier::electron;
    if (t == "acoustic") return Carrier::acoustic;
    if (t == "spin") return Carrier::spin;
    if (t == "particle") return Carrier::particle;
    fail("UnknownCarrier", "'" + s + "' is not one of photon|xray|electron|acoustic|spin|particle");
}

inline const char* kind_symbol(Kind k) {
    switch (k) {
        case Kind::P: return "P";
        case Kind::M: return "M";
        case Kind::Pi: return "Pi";
        case Kind::F: return "F";
        case Kind::C: return "C";
        case Kind::Sigma: return "Sigma";
        case Kind::D: return "D";
        case Kind::S: return "S";
        case Kind::W: return "W";
        case Kind::R: return "R";
        case Kind::Lambda: return "Lambda";
    }
    return "?";
}

inline const char* kind_canonical_name(Kind k) {
    switch (k) {
        case Kind::P: return "Propagate";
        case Kind::M: return "Modulate";
        case Kind::Pi: return "Radon";
        case Kind::F: return "Encode";
        case Kind::C: return "Convolve";
        case Kind::Sigma: return "Accumulate";
        case Kind::D: return "Detect";
        case Kind::S: return "Sample";
        case Kind::W: return "Disperse";
        case Kind::R: return "Scatter";
        case Kind::Lambda: return "Transform";
    }
    return "?";
}

inline std::optional<Kind> kind_from_symbol(const std::string& sym) {
    static const std::map<std::string, Kind> table = {
        {"P", Kind::P},         {"M", Kind::M}, {"Pi", Kind::Pi},   {"F", Kind::F},
        {"C", Kind::C},         {"Sigma", Kind::Sigma}, {"D", Kind::D}, {"S", Kind::S},
        {"W", Kind::W},         {"R", Kind::R}, {"Lambda", Kind::Lambda},
    };
    auto it = table.find(sym);
    if (it == table.end()) return std::nullopt;
    return it->second;
}

// Symbol with variant tag, as used in canonical chain strings: Phi_z, W_lambda, W_t.
inline std::string node_symbol(const ChainNode& n) {
    if (n.kind == Kind::C && n.variant == Variant::z) return "Phi_z";
    std::string s = kind_symbol(n.kind);
    if (n.variant == Variant::lambda) s += "_lambda";
    if (n.variant == Variant::t) s += "_t";
    return s;
}

// ---------------------------------------------------------------------------
// chain parsing

namespace detail_chain {

inline ChainNode parse_node(const std::string& text, std::size_t pos_offset) {
    std::string t = strutil::trim(text);
    std::size_t open = t.find('(');
    if (open == std::string::npos || t.back() != ')')
        fail("ChainParseError", "node '" + t + "' at position " + std::to_string(pos_offset) +
                                    ": expected Name(Sym[, k=v]*)");
    std::string name = strutil::trim(t.substr(0, open));
    std::string inner = t.substr(open + 1, t.size() - open - 2);

    // split on commas not inside nested parens: permits psf=diffuser(z)
    std::vector<std::string> parts;
    int depth = 0;
    std::string cur;
    for (char c : inner) {
        if (c == '(') ++depth;
        if (c == ')') --depth;
        if (c == ',' && depth == 0) {
            parts.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    parts.push_back(cur);
    if (parts.empty() || strutil::trim(parts[0]).empty())
        fail("ChainParseError", "node '" + t + "': missing primitive symbol");

    ChainNode node;
    auto kind = kind_from_symbol(strutil::trim(parts[0]));
    if (!kind)
        fail("ChainParseError", "node '" + t + "': unknown primitive symbol '" +
                                    strutil::trim(parts[0]) + "'");
    node.kind = *kind;

    // variant from a name suffix (Convolve_z, Disperse_lambda, Disperse_t)
    auto ends_with = [&](const char* suf) {
        std::string s(suf);
        return name.size() > s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
    };
    if (ends_with("_z")) node.variant = Variant::z;
    else if (ends_with("_lambda")) node.variant = Variant::lambda;
    else if (ends_with("_t")) node.variant = Variant::t;

    if (node.variant == Variant::z && node.kind != Kind::C)
        fail("ChainParseError", "variant _z only applies to Convolve(C)");
    if ((node.variant == Variant::lambda || node.variant == Variant::t) && node.kind != Kind::W)
        fail("ChainParseError", "variants _lambda/_t only apply to Disperse(W)");

    for (std::size_t i = 1; i < parts.size(); ++i) {
        std::string p = strutil::trim(parts[i]);
        if (p.empty()) continue;
        std::size_t eq = p.find('=');
        if (eq == std::string::npos) {
            // bare flag, e.g. Detect(D, intensity)
            node.params[p] = "";
            continue;
        }
        std::string key = strutil::trim(p.substr(0, eq));
        std::string val = strutil::trim(p.substr(eq + 1));
        if (key == "tier") {
            double tv = 0;
            if (!strutil::parse_double(val, tv) || tv < 0 || tv > 3 || tv != int(tv))
                fail("ChainParseError", "tier must be an integer 0..3, got '" + val + "'");
            node.tier = int(tv);
        } else {
            node.params[key] = val;
        }
    }
    return node;
}

} // namespace detail_chain

inline ChainExpr parse_chain(const std::string& text) {
    ChainExpr chain;
    // split stages on "->" outside parens
    std::vector<std::pair<std::string, std::size_t>> stage_texts;
    {
        int depth = 0;
        std::string cur;
        std::size_t start = 0;
        for (std::size_t i = 0; i < text.size(); ++i) {
            char c = text[i];
            if (c == '(') ++depth;
            if (c == ')') --depth;
            if (depth == 0 && c == '-' && i + 1 < text.size() && text[i + 1] == '>') {
                stage_texts.emplace_back(cur, start);
                cur.clear();
                ++i;
                start = i + 1;
            } else {
                cur.push_back(c);
            }
        }
        stage_texts.emplace_back(cur, start);
    }
    for (auto& [stage_text, offset] : stage_texts) {
        if (strutil::trim(stage_text).empty())
            fail("ChainParseError", "empty chain stage at position " + std::to_string(offset));
        ChainStage stage;
        // parallel branches split on '+' outside parens
        int depth = 0;
        std::string cur;
        std::vector<std::string> branches;
        for (char c : stage_text) {
            if (c == '(') ++depth;
            if (c == ')') --depth;
            if (depth == 0 && c == '+') {
                branches.push_back(cur);
                cur.clear();
            } else {
                cur.push_back(c);
            }
        }
        branches.push_back(cur);
        for (auto& b : branches) stage.parallel.push_back(detail_chain::parse_node(b, offset));
        chain.stages.push_back(std::move(stage));
    }
    if (chain.empty()) fail("ChainParseError", "empty forward_model");
    return chain;
}

inline std::string serialize_node(const ChainNode& n) {
    std::string name = kind_canonical_name(n.kind);
    if (n.variant == Variant::z) name += "_z";
    if (n.variant == Variant::lambda) name += "_lambda";
    if (n.variant == Variant::t) name += "_t";
    std::string out = name + "(" + kind_symbol(n.kind);
    for (const auto& [k, v] : n.params) {
        out += ", " + k;
        if (!v.empty()) out += "=" + v;
    }
    if (n.tier != 1) out += ", tier=" + std::to_string(n.tier);
    out += ")";
    return out;
}

inline std::string serialize_chain(const ChainExpr& chain) {
    std::string out;
    for (std::size_t s = 0; s < chain.stages.size(); ++s) {
        if (s) out += " -> ";
        const auto& stage = chain.stages[s];
        for (std::size_t b = 0; b < stage.parallel.size(); ++b) {
            if (b) out += " + ";
            out += serialize_node(stage.parallel[b]);
        }
    }
    return out;
}

// Arrow-joined symbol string, e.g. "M->W_lambda->Phi_z->Sigma->D".
inline std::string chain_symbols(const ChainExpr& chain) {
    std::string out;
    for (std::size_t s = 0; s < chain.stages.size(); ++s) {
        if (s) out += "->";
        const auto& stage = chain.stages[s];
        for (std::size_t b = 0; b < stage.parallel.size(); ++b) {
            if (b) out += "+";
            out += node_symbol(stage.parallel[b]);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// field-value parsing

namespace detail_spec {

inline void parse_kv_list(const std::string& value, std::map<std::string, std::string>& out) {
    for (auto& seg : strutil::split(value, ',')) {
        std::string item = strutil::trim(seg);
        if (item.empty()) continue;
        std::size_t eq = item.find('=');
        if (eq != std::string::npos)
            out[strutil::trim(item.substr(0, eq))] = strutil::trim(item.substr(eq + 1));
        else
            out[item] = "";
    }
}

inline std::string serialize_kv_list(const std::map<std::string, std::string>& m,
                                     const std::vector<std::string>& skip = {}) {
    std::string out;
    for (const auto& [k, v] : m) {
        if (std::find(skip.begin(), skip.end(), k) != skip.end()) continue;
        if (!out.empty()) out += ", ";
        out += k;
        if (!v.empty()) out += "=" + v;
    }
    return out;
}

inline ObjectSpec parse_object(const std::string& value) {
    ObjectSpec obj;
    std::string cleaned;
    for (char c : value)
        if (c != '(' && c != ')') cleaned.push_back(c);

    bool have_dims = false;
    for (auto& seg : strutil::split(cleaned, ',')) {
        for (auto& w : strutil::words(seg)) {
            std::string lw = strutil::lower(w);
            if (!have_dims && lw.find('x') != std::string::npos &&
                std::isdigit(static_cast<unsigned char>(lw[0]))) {
                for (auto& dtok : strutil::split(lw, 'x')) {
                    double d = 0;
                    if (!strutil::parse_double(dtok, d) || d <= 0 || d != std::floor(d))
                        fail("ChainParseError", "bad object dims token '" + w + "'");
                    obj.dims.push_back(std::size_t(d));
                }
                have_dims = true;
            } else if (lw == "complex") {
                obj.value_domain = ValueDomain::complex_valued;
            } else if (lw == "real") {
                obj.value_domain = ValueDomain::real;
            } else if (lw == "nonneg" || lw == "non-negative" || lw == "nonnegative") {
                obj.value_domain = ValueDomain::real_nonneg;
            } else {
                obj.constraints.push_back(w);
            }
        }
    }
    if (!have_dims) fail("ChainParseError", "object field missing dims (e.g. 128x128)");
    return obj;
}

inline std::string serialize_object(const ObjectSpec& obj) {
    std::string out;
    for (std::size_t i = 0; i < obj.dims.size(); ++i)
        out += (i ? "x" : "") + std::to_string(obj.dims[i]);
    switch (obj.value_domain) {
        case ValueDomain::real_nonneg: out += " nonneg"; break;
        case ValueDomain::real: out += " real"; break;
        case ValueDomain::complex_valued: out += " complex"; break;
    }
    for (const auto& tag : obj.constraints) out += ", " + tag;
    return out;
}

inline NoiseSpec parse_noise(const std::string& value) {
    NoiseSpec ns;
    bool has_gauss = false, has_poisson = false;
    for (auto& comp : strutil::split(value, '+')) {
        std::string text = strutil::trim(comp);
        if (text.empty()) continue;
        // normalize separators: commas behave like spaces here
        std::replace(text.begin(), text.end(), ',', ' ');
        for (auto& w : strutil::words(text)) {
            std::string lw = strutil::lower(w);
            if (lw == "poisson") { has_poisson = true; continue; }
            if (lw == "gaussian") { has_gauss = true; continue; }
            if (lw == "db") continue;
            std::size_t eq = w.find('=');
            if (eq == std::string::npos) continue;
            std::string key = strutil::lower(w.substr(0, eq));
            std::string val = w.substr(eq + 1);
            // tolerate a dB suffix glued to the number
            if (val.size() > 2 && strutil::lower(val.substr(val.size() - 2)) == "db")
                val = val.substr(0, val.size() - 2);
            double d = 0;
            if (!strutil::parse_double(val, d))
                fail("ChainParseError", "bad noise value '" + w + "'");
            if (key == "sigma") ns.sigma = d;
            else if (key == "i_0" || key == "i0") ns.i0 = d;
            else if (key == "snr" || key == "snr_db") ns.snr_db = d;
        }
    }
    if (has_poisson && has_gauss) ns.kind = NoiseKind::poisson_gaussian;
    else if (has_poisson) ns.kind = NoiseKind::poisson;
    else if (has_gauss) ns.kind = NoiseKind::gaussian;
    else fail("ChainParseError", "noise must name Poisson and/or Gaussian");
    return ns;
}

inline std::string serialize_noise(const NoiseSpec& ns) {
    using strutil::format_double;
    switch (ns.kind) {
        case NoiseKind::poisson: return "Poisson, I_0=" + format_double(ns.i0);
        case NoiseKind::gaussian:
            if (ns.sigma > 0 || !ns.snr_db) return "Gaussian, sigma=" + format_double(ns.sigma);
            return "Gaussian, SNR=" + format_double(*ns.snr_db) + " dB";
        case NoiseKind::poisson_gaussian:
            return "Poisson I_0=" + format_double(ns.i0) + " + Gaussian sigma=" +
                   format_double(ns.sigma);
    }
    return "";
}

inline TargetSpec parse_target(const std::string& value) {
    TargetSpec t;
    auto ws = strutil::words(value);
    if (ws.size() < 3 || ws[1] != ">=")
        fail("ChainParseError", "target must be '<METRIC> >= <value>'");
    std::string m = strutil::lower(ws[0]);
    if (m == "psnr") t.metric = Metric::psnr_db;
    else if (m == "ssim") t.metric = Metric::ssim;
    else fail("ChainParseError", "unknown target metric '" + ws[0] + "'");
    if (!strutil::parse_double(ws[2], t.threshold))
        fail("ChainParseError", "bad target threshold '" + ws[2] + "'");
    return t;
}

inline std::string serialize_target(const TargetSpec& t) {
    if (t.metric == Metric::psnr_db)
        return "PSNR >= " + strutil::format_double(t.threshold) + " dB";
    return "SSIM >= " + strutil::format_double(t.threshold);
}

inline std::vector<CalibrationEntry> parse_calibration(const std::string& value) {
    std::vector<CalibrationEntry> entries;
    for (auto& seg : strutil::split(value, ';')) {
        std::string text = strutil::trim(seg);
        if (text.empty()) continue;
        std::replace(text.begin(), text.end(), ',', ' ');
        CalibrationEntry e;
        bool have_tol = false;
        for (auto& w : strutil::words(text)) {
            std::size_t eq = w.find('=');
            if (eq == std::string::npos) {
                if (e.param_name.empty()) e.param_name = w;
                continue;
            }
            std::string key = strutil::lower(w.substr(0, eq));
            std::string val = w.substr(eq + 1);
            if (key == "param") { e.param_name = val; continue; }
            double d = 0;
            if (!strutil::parse_double(val, d))
                fail("ChainParseError", "bad calibration value '" + w + "'");
            if (key == "tol" || key == "tolerance") { e.tolerance = d; have_tol = true; }
            else if (key == "sens" || key == "sensitivity") e.sensitivity_db_per_unit = d;
        }
        if (e.param_name.empty() || !have_tol)
            fail("ChainParseError", "calibration entry needs 'param' and 'tol': '" + text + "'");
        entries.push_back(std::move(e));
    }
    return entries;
}

inline std::string serialize_calibration(const std::vector<CalibrationEntry>& entries) {
    std::string out;
    for (const auto& e : entries) {
        if (!out.empty()) out += "; ";
        out += e.param_name + " tol=" + strutil::format_double(e.tolerance);
        if (e.sensitivity_db_per_unit)
            out += " sens=" + strutil::format_double(*e.sensitivity_db_per_unit);
    }
    return out;
}

} // namespace detail_spec

// ---------------------------------------------------------------------------
// document parse / serialize / validate

inline const std::vector<std::string>& spec_field_names() {
    static const std::vector<std::string> names = {"modality", "carrier",  "geometry",
                                                   "object",   "forward_model", "noise",
                                                   "target",   "system_elements"};
    return names;
}

inline SpecDocument parse_spec(const std::string& text) {
    SpecDocument doc;
    std::map<std::string, std::string> raw;
    std::map<std::string, std::string> se_raw;
    bool in_system_elements = false;
    bool saw_system_elements = false;

    for (auto& raw_line : strutil::split(text, '\n')) {
        std::string line = raw_line;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        std::string trimmed = strutil::trim(line);
        if (trimmed.empty() || trimmed[0] == '#') continue;

        bool indented = line.size() >= 2 && line[0] == ' ' && line[1] == ' ';
        if (indented && in_system_elements) {
            std::size_t colon = trimmed.find(':');
            if (colon == std::string::npos)
                fail("ChainParseError", "system_elements line missing ':': '" + trimmed + "'");
            std::string key = strutil::trim(trimmed.substr(0, colon));
            std::string val = strutil::trim(trimmed.substr(colon + 1));
            if (se_raw.count(key)) fail("DuplicateField", "system_elements." + key);
            se_raw[key] = val;
            continue;
        }
        in_system_elements = false;

        std::size_t colon = trimmed.find(':');
        if (colon == std::string::npos)
            fail("ChainParseError", "line missing ':': '" + trimmed + "'");
        std::string key = strutil::trim(trimmed.substr(0, colon));
        std::string val = strutil::trim(trimmed.substr(colon + 1));
        if (raw.count(key)) fail("DuplicateField", key);
        raw[key] = val;
        if (key == "system_elements") {
            in_system_elements = true;
            saw_system_elements = true;
        }
    }

    for (const auto& name : spec_field_names())
        if (!raw.count(name) && !(name == "system_elements" && saw_system_elements))
            fail("MissingField", name);

    doc.modality = raw["modality"];
    doc.carrier = parse_carrier(raw["carrier"]);
    detail_spec::parse_kv_list(raw["geometry"], doc.geometry);
    doc.object = detail_spec::parse_object(raw["object"]);
    doc.forward_model = parse_chain(raw["forward_model"]);
    doc.noise = detail_spec::parse_noise(raw["noise"]);
    doc.target = detail_spec::parse_target(raw["target"]);

    for (const auto& [k, v] : raw) {
        if (std::find(spec_field_names().begin(), spec_field_names().end(), k) ==
            spec_field_names().end())
            doc.extra_fields[k] = v;
    }

    auto& se = doc.system_elements;
    if (se_raw.count("source")) detail_spec::parse_kv_list(se_raw["source"], se.source);
    if (se_raw.count("optics")) detail_spec::parse_kv_list(se_raw["optics"], se.optics);
    if (se_raw.count("detector")) detail_spec::parse_kv_list(se_raw["detector"], se.detector);
    if (se_raw.count("calibration"))
        se.calibration = detail_spec::parse_calibration(se_raw["calibration"]);

    // Gate-2 quantities default in when absent; verdicts derived from them are
    // marked low-confidence downstream.
    const std::pair<const char*, const char*> defaults[] = {
        {"qe", "1"}, {"read_noise_e", "0"}, {"dark_current", "0"}, {"exposure_s", "1"}};
    for (auto& [k, v] : defaults) {
        if (!se.detector.count(k)) {
            se.detector[k] = v;
            se.defaulted.push_back(k);
        }
    }
    return doc;
}

inline std::string serialize_spec(const SpecDocument& doc) {
    std::string out;
    out += "modality: " + doc.modality + "\n";
    out += "carrier: " + std::string(carrier_name(doc.carrier)) + "\n";
    out += "geometry: " + detail_spec::serialize_kv_list(doc.geometry) + "\n";
    out += "object: " + detail_spec::serialize_object(doc.object) + "\n";
    out += "forward_model: " + serialize_chain(doc.forward_model) + "\n";
    out += "noise: " + detail_spec::serialize_noise(doc.noise) + "\n";
    out += "target: " + detail_spec::serialize_target(doc.target) + "\n";
    out += "system_elements:\n";
    const auto& se = doc.system_elements;
    if (!se.source.empty()) out += "  source: " + detail_spec::serialize_kv_list(se.source) + "\n";
    if (!se.optics.empty()) out += "  optics: " + detail_spec::serialize_kv_list(se.optics) + "\n";
    // Defaulted keys are omitted so that reparsing reinjects them identically.
    out += "  detector: " + detail_spec::serialize_kv_list(se.detector, se.defaulted) + "\n";
    if (!se.calibration.empty())
        out += "  calibration: " + detail_spec::serialize_calibration(se.calibration) + "\n";
    for (const auto& [k, v] : doc.extra_fields) out += k + ": " + v + "\n";
    return out;
}

inline double kv_double(const std::map<std::string, std::string>& m, const std::string& key,
                        double fallback) {
    auto it = m.find(key);
    if (it == m.end()) return fallback;
    double d = 0;
    if (!strutil::parse_double(it->second, d)) return fallback;
    return d;
}

inline std::vector<SchemaIssue> validate_schema(const SpecDocument& doc) {
    std::vector<SchemaIssue> issues;
    auto add = [&](const std::string& field, const std::string& rule, const std::string& obs) {
        issues.push_back({field, rule, obs});
    };

    if (!doc.extra_fields.empty())
        add("document", "exactly 8 top-level fields",
            "extra field '" + doc.extra_fields.begin()->first + "'");

    if (doc.modality.empty()) add("modality", "non-empty identifier", "(empty)");

    if (doc.object.dims.empty() || doc.object.dims.size() > 5)
        add("object.dims", "between 1 and 5 axes", std::to_string(doc.object.dims.size()));
    for (auto d : doc.object.dims)
        if (d == 0) add("object.dims", "positive", "0");

    if (doc.forward_model.empty()) {
        add("forward_model", "non-empty chain", "(empty)");
    } else {
        const auto& last = doc.forward_model.stages.back();
        if (last.parallel.size() != 1 || last.parallel[0].kind != Kind::D)
            add("forward_model", "must end in Detect", chain_symbols(doc.forward_model));
        for (const auto& stage : doc.forward_model.stages)
            for (const auto& node : stage.parallel)
                if (node.tier < 0 || node.tier > 3)
                    add("forward_model.tier", "integer 0..3", std::to_string(node.tier));
    }

    if (doc.noise.has_poisson() && doc.noise.i0 <= 0)
        add("noise.i0", "photon scale > 0 when poisson present",
            strutil::format_double(doc.noise.i0));
    if (doc.noise.kind == NoiseKind::gaussian && doc.noise.sigma <= 0 && !doc.noise.snr_db)
        add("noise", "gaussian requires sigma or snr_db", "(neither)");
    if (doc.noise.sigma < 0)
        add("noise.sigma", "sigma >= 0", strutil::format_double(doc.noise.sigma));

    if (doc.target.metric == Metric::psnr_db &&
        (doc.target.threshold <= 0 || doc.target.threshold > 100))
        add("target.threshold", "psnr threshold in (0, 100]",
            strutil::format_double(doc.target.threshold));
    if (doc.target.metric == Metric::ssim &&
        (doc.target.threshold <= 0 || doc.target.threshold > 1))
        add("target.threshold", "ssim threshold in (0, 1]",
            strutil::format_double(doc.target.threshold));

    const auto& det = doc.system_elements.detector;
    double qe = kv_double(det, "qe", 1.0);
    if (qe <= 0 || qe > 1) add("detector.qe", "fraction in (0,1]", strutil::format_double(qe));
    if (kv_double(det, "read_noise_e", 0.0) < 0)
        add("detector.read_noise_e", ">= 0", det.at("read_noise_e"));
    if (kv_double(det, "dark_current", 0.0) < 0)
        add("detector.dark_current", ">= 0", det.at("dark_current"));
    if (kv_double(det, "exposure_s", 1.0) <= 0)
        add("detector.exposure_s", "> 0", det.at("exposure_s"));

    for (const auto& e : doc.system_elements.calibration)
        if (e.tolerance < 0)
            add("calibration." + e.param_name, "tolerance >= 0",
                strutil::format_double(e.tolerance));

    return issues;
}

} // namespace fpbc
