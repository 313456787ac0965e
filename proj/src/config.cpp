#include "proxmed/config.hpp"

#include "proxmed/errors.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace proxmed {

namespace {

std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

double to_double(const std::string& key, const std::string& value) {
    try {
        std::size_t pos = 0;
        double v = std::stod(value, &pos);
        if (pos != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "' expects a number, got '" + value + "'");
    }
}

int to_int(const std::string& key, const std::string& value) {
    try {
        std::size_t pos = 0;
        int v = std::stoi(value, &pos);
        if (pos != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "' expects an integer, got '" + value + "'");
    }
}

std::uint64_t to_u64(const std::string& key, const std::string& value) {
    try {
        std::size_t pos = 0;
        unsigned long long v = std::stoull(value, &pos);
        if (pos != value.size()) throw std::invalid_argument(value);
        return static_cast<std::uint64_t>(v);
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "' expects an unsigned integer, got '" +
                          value + "'");
    }
}

std::vector<Method> parse_estimators(const std::string& list) {
    std::vector<Method> out;
    std::stringstream ss(list);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(method_from_string(item));
    }
    if (out.empty()) throw ConfigError("estimator list is empty");
    return out;
}

}  // namespace

std::map<std::string, std::string> parse_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file '" + path + "'");
    std::map<std::string, std::string> out;
    std::string line, section;
    while (std::getline(in, line)) {
        std::size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[' && line.back() == ']') {
            section = trim(line.substr(1, line.size() - 2));
            continue;
        }
        std::size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config line '" + line + "' is not key=value");
        }
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (!section.empty()) key = section + "." + key;
        out[key] = value;
    }
    return out;
}

void merge_config(RunConfig& cfg, const std::map<std::string, std::string>& file_values,
                  const std::map<std::string, bool>& explicit_keys) {
    auto absent = [&](const char* key) {
        auto it = explicit_keys.find(key);
        return it == explicit_keys.end() || !it->second;
    };
    auto get = [&](const char* key) -> const std::string* {
        auto it = file_values.find(key);
        return it == file_values.end() ? nullptr : &it->second;
    };

    if (const auto* v = get("mode"); v && absent("mode")) cfg.mode = *v;
    if (const auto* v = get("input"); v && absent("input")) cfg.input = *v;
    if (const auto* v = get("roles"); v && absent("roles")) cfg.roles_path = *v;
    if (const auto* v = get("estimators"); v && absent("estimators")) {
        cfg.estimators = parse_estimators(*v);
        cfg.estimators_explicit = true;
    }
    if (const auto* v = get("boot"); v && absent("boot")) cfg.boot = to_int("boot", *v);
    if (const auto* v = get("seed"); v && absent("seed")) cfg.seed = to_u64("seed", *v);
    if (const auto* v = get("scenario"); v && absent("scenario")) {
        cfg.scenario = to_int("scenario", *v);
    }
    if (const auto* v = get("preset"); v && absent("preset")) cfg.preset = *v;
    if (const auto* v = get("reps"); v && absent("reps")) cfg.reps = to_int("reps", *v);
    if (const auto* v = get("n"); v && absent("n")) cfg.sample_size = to_int("n", *v);
    if (const auto* v = get("out"); v && absent("out")) cfg.out_dir = *v;
    if (const auto* v = get("threads"); v && absent("threads")) {
        cfg.threads = to_int("threads", *v);
    }
    if (const auto* v = get("standardize"); v && absent("standardize")) {
        cfg.standardize = (*v == "1" || *v == "true" || *v == "yes");
    }

    if (const auto* v = get("dml.folds")) cfg.dml_folds = to_int("dml.folds", *v);
    auto bandwidth = [&](const char* key, double& slot) {
        if (const auto* v = get(key)) {
            slot = (*v == "median") ? 0.0 : to_double(key, *v);
        }
    };
    bandwidth("dml.bandwidth_h1", cfg.dml_bandwidth_h1);
    bandwidth("dml.bandwidth_h0", cfg.dml_bandwidth_h0);
    bandwidth("dml.bandwidth_q0", cfg.dml_bandwidth_q0);
    bandwidth("dml.bandwidth_q1", cfg.dml_bandwidth_q1);
    if (const auto* v = get("dml.lambda_h")) cfg.dml_lambda_h = to_double("dml.lambda_h", *v);
    if (const auto* v = get("dml.lambda_g")) cfg.dml_lambda_g = to_double("dml.lambda_g", *v);
    if (const auto* v = get("dml.max_anchors")) {
        cfg.dml_max_anchors = to_int("dml.max_anchors", *v);
    }
    if (const auto* v = get("dml.seed")) cfg.dml_seed = to_u64("dml.seed", *v);
    if (const auto* v = get("dml.second_moment_cap")) {
        cfg.dml_second_moment_cap = to_double("dml.second_moment_cap", *v);
    }
}

std::string config_canonical(const RunConfig& cfg) {
    std::ostringstream os;
    os << "mode=" << cfg.mode << "\n";
    os << "input=" << cfg.input << "\n";
    os << "roles=" << cfg.roles_path << "\n";
    for (const auto& r : cfg.role_flags) os << "role=" << r << "\n";
    os << "estimators=";
    for (std::size_t i = 0; i < cfg.estimators.size(); ++i) {
        if (i) os << ",";
        os << method_name(cfg.estimators[i]);
    }
    os << "\n";
    os << "boot=" << cfg.boot << "\n";
    os << "seed=" << (cfg.seed ? std::to_string(*cfg.seed) : "auto") << "\n";
    os << "scenario=" << cfg.scenario << "\n";
    os << "preset=" << cfg.preset << "\n";
    os << "reps=" << (cfg.reps ? std::to_string(*cfg.reps) : "preset") << "\n";
    os << "n=" << cfg.sample_size << "\n";
    // out_dir and threads do not affect results, so they stay out of the
    // canonical form (reruns into another directory hash identically).
    os << "standardize=" << (cfg.standardize ? 1 : 0) << "\n";
    os << "dml.folds=" << cfg.dml_folds << "\n";
    os << "dml.bandwidth=" << cfg.dml_bandwidth_h1 << "," << cfg.dml_bandwidth_h0 << ","
       << cfg.dml_bandwidth_q0 << "," << cfg.dml_bandwidth_q1 << "\n";
    os << "dml.lambda=" << cfg.dml_lambda_h << "," << cfg.dml_lambda_g << "\n";
    os << "dml.max_anchors=" << cfg.dml_max_anchors << "\n";
    os << "dml.second_moment_cap=" << cfg.dml_second_moment_cap << "\n";
    return os.str();
}

std::string config_hash(const RunConfig& cfg) {
    const std::string text = config_canonical(cfg);
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

}  // namespace proxmed
