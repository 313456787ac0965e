#include "proxmed/csv.hpp"

#include "proxmed/errors.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <system_error>

namespace proxmed {

Role role_from_string(const std::string& s) {
    if (s == "outcome") return Role::outcome;
    if (s == "exposure") return Role::exposure;
    if (s == "mediator") return Role::mediator;
    if (s == "covariate") return Role::covariate;
    if (s == "w_proxy") return Role::w_proxy;
    if (s == "z_proxy") return Role::z_proxy;
    if (s == "ignore") return Role::ignore;
    throw ConfigError("unknown column role '" + s + "'");
}

std::string role_to_string(Role r) {
    switch (r) {
        case Role::outcome: return "outcome";
        case Role::exposure: return "exposure";
        case Role::mediator: return "mediator";
        case Role::covariate: return "covariate";
        case Role::w_proxy: return "w_proxy";
        case Role::z_proxy: return "z_proxy";
        case Role::ignore: return "ignore";
    }
    return "?";
}

void ColumnRoles::add(const std::string& name, Role role) {
    for (const auto& e : entries) {
        if (e.first == name) {
            throw ConfigError("column '" + name + "' assigned a role twice");
        }
    }
    entries.emplace_back(name, role);
}

void ColumnRoles::validate() const {
    int n_outcome = 0, n_exposure = 0, n_mediator = 0, n_w = 0, n_z = 0;
    for (const auto& e : entries) {
        switch (e.second) {
            case Role::outcome: ++n_outcome; break;
            case Role::exposure: ++n_exposure; break;
            case Role::mediator: ++n_mediator; break;
            case Role::w_proxy: ++n_w; break;
            case Role::z_proxy: ++n_z; break;
            default: break;
        }
    }
    if (n_outcome != 1) throw ConfigError("role mapping needs exactly one outcome column");
    if (n_exposure != 1) throw ConfigError("role mapping needs exactly one exposure column");
    if (n_mediator != 1) throw ConfigError("role mapping needs exactly one mediator column");
    if (n_w < 1) throw ConfigError("role mapping needs at least one w_proxy column");
    if (n_z < 1) throw ConfigError("role mapping needs at least one z_proxy column");
}

namespace {

std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

}  // namespace

std::pair<std::string, Role> parse_role_assignment(const std::string& text) {
    std::size_t eq = text.find('=');
    if (eq == std::string::npos) {
        throw ConfigError("role assignment must look like column=role, got '" + text + "'");
    }
    std::string name = trim(text.substr(0, eq));
    std::string role = trim(text.substr(eq + 1));
    if (name.empty()) throw ConfigError("empty column name in role assignment '" + text + "'");
    return {name, role_from_string(role)};
}

ColumnRoles parse_roles_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open roles file '" + path + "'");
    ColumnRoles roles;
    std::string line;
    while (std::getline(in, line)) {
        std::size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        auto [name, role] = parse_role_assignment(line);
        roles.add(name, role);
    }
    if (roles.entries.empty()) throw ConfigError("roles file '" + path + "' defines no columns");
    return roles;
}

namespace {

// One RFC-4180 record; quoted fields may contain commas, escaped quotes and
// line breaks.
bool read_record(std::istream& in, std::vector<std::string>& fields) {
    fields.clear();
    std::string field;
    bool in_quotes = false;
    bool any = false;
    int c;
    while ((c = in.get()) != EOF) {
        any = true;
        char ch = static_cast<char>(c);
        if (in_quotes) {
            if (ch == '"') {
                if (in.peek() == '"') {
                    in.get();
                    field.push_back('"');
                } else {
                    in_quotes = false;
                }
            } else {
                field.push_back(ch);
            }
        } else if (ch == '"') {
            in_quotes = true;
        } else if (ch == ',') {
            fields.push_back(field);
            field.clear();
        } else if (ch == '\n') {
            break;
        } else if (ch == '\r') {
            if (in.peek() == '\n') in.get();
            break;
        } else {
            field.push_back(ch);
        }
    }
    if (!any) return false;
    fields.push_back(field);
    return true;
}

// Returns false for a missing (empty) cell. Throws DataError on text that is
// not a number. Non-finite values count as missing so that validation's
// finiteness invariant holds after ingestion.
bool parse_cell(const std::string& raw, const std::string& column, double& out) {
    std::string s = trim(raw);
    if (s.empty()) return false;
    const char* begin = s.data();
    const char* end = begin + s.size();
    auto [ptr, ec] = std::from_chars(begin, end, out);
    if (ec != std::errc() || ptr != end) {
        throw DataError("column '" + column + "' holds non-numeric cell '" + s + "'");
    }
    if (!std::isfinite(out)) return false;
    return true;
}

std::string format_double(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    (void)ec;
    return std::string(buf, ptr);
}

}  // namespace

LoadedData load_csv(const std::string& path, const ColumnRoles& roles) {
    roles.validate();
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open CSV file '" + path + "'");

    std::vector<std::string> header;
    if (!read_record(in, header)) throw DataError("CSV file '" + path + "' is empty");
    for (auto& h : header) h = trim(h);

    // Every header column must be mapped, every mapped column must exist.
    std::vector<int> role_col(roles.entries.size(), -1);
    for (std::size_t j = 0; j < header.size(); ++j) {
        bool mapped = false;
        for (std::size_t r = 0; r < roles.entries.size(); ++r) {
            if (roles.entries[r].first == header[j]) {
                if (role_col[r] != -1) {
                    throw DataError("CSV header repeats column '" + header[j] + "'");
                }
                role_col[r] = static_cast<int>(j);
                mapped = true;
            }
        }
        if (!mapped) {
            throw DataError("CSV column '" + header[j] +
                            "' has no role assignment (use role 'ignore' to skip it)");
        }
    }
    for (std::size_t r = 0; r < roles.entries.size(); ++r) {
        if (role_col[r] == -1) {
            throw DataError("role column '" + roles.entries[r].first + "' (" +
                            role_to_string(roles.entries[r].second) + ") missing from CSV header");
        }
    }

    std::vector<double> ys, as, ms;
    std::vector<std::vector<double>> xs, ws, zs;
    int n_x = 0, n_w = 0, n_z = 0;
    for (const auto& e : roles.entries) {
        if (e.second == Role::covariate) ++n_x;
        if (e.second == Role::w_proxy) ++n_w;
        if (e.second == Role::z_proxy) ++n_z;
    }
    xs.resize(static_cast<std::size_t>(n_x));
    ws.resize(static_cast<std::size_t>(n_w));
    zs.resize(static_cast<std::size_t>(n_z));

    LoadInfo info;
    std::vector<std::string> rec;
    std::vector<double> row_vals(roles.entries.size());
    while (read_record(in, rec)) {
        if (rec.size() == 1 && trim(rec[0]).empty()) continue;  // trailing blank line
        if (rec.size() != header.size()) {
            throw DataError("CSV row " + std::to_string(info.total_rows + 2) + " has " +
                            std::to_string(rec.size()) + " fields, header has " +
                            std::to_string(header.size()));
        }
        ++info.total_rows;
        bool complete = true;
        for (std::size_t r = 0; r < roles.entries.size(); ++r) {
            if (roles.entries[r].second == Role::ignore) continue;
            double v = 0.0;
            if (!parse_cell(rec[static_cast<std::size_t>(role_col[r])],
                            roles.entries[r].first, v)) {
                complete = false;
                break;
            }
            row_vals[r] = v;
        }
        if (!complete) {
            ++info.dropped_rows;
            continue;
        }
        int ix = 0, iw = 0, iz = 0;
        for (std::size_t r = 0; r < roles.entries.size(); ++r) {
            const double v = row_vals[r];
            switch (roles.entries[r].second) {
                case Role::outcome: ys.push_back(v); break;
                case Role::exposure:
                    if (v != 0.0 && v != 1.0) {
                        throw DataError("exposure column '" + roles.entries[r].first +
                                        "' holds value " + format_double(v) +
                                        "; only 0 and 1 are allowed");
                    }
                    as.push_back(v);
                    break;
                case Role::mediator: ms.push_back(v); break;
                case Role::covariate: xs[static_cast<std::size_t>(ix++)].push_back(v); break;
                case Role::w_proxy: ws[static_cast<std::size_t>(iw++)].push_back(v); break;
                case Role::z_proxy: zs[static_cast<std::size_t>(iz++)].push_back(v); break;
                case Role::ignore: break;
            }
        }
    }

    const Eigen::Index n = static_cast<Eigen::Index>(ys.size());
    if (n == 0) throw DataError("no data rows remain after dropping incomplete rows");

    LoadedData out;
    out.info = info;
    Dataset& d = out.data;
    d.y = Eigen::Map<const Eigen::VectorXd>(ys.data(), n);
    d.a = Eigen::Map<const Eigen::VectorXd>(as.data(), n);
    d.m = Eigen::Map<const Eigen::VectorXd>(ms.data(), n);
    d.x.resize(n, n_x);
    for (int j = 0; j < n_x; ++j) {
        d.x.col(j) = Eigen::Map<const Eigen::VectorXd>(xs[static_cast<std::size_t>(j)].data(), n);
    }
    d.w.resize(n, n_w);
    for (int j = 0; j < n_w; ++j) {
        d.w.col(j) = Eigen::Map<const Eigen::VectorXd>(ws[static_cast<std::size_t>(j)].data(), n);
    }
    d.z.resize(n, n_z);
    for (int j = 0; j < n_z; ++j) {
        d.z.col(j) = Eigen::Map<const Eigen::VectorXd>(zs[static_cast<std::size_t>(j)].data(), n);
    }
    validate_dataset(d, /*require_both_arms=*/false);
    return out;
}

void save_csv(const Dataset& d, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << "y,a,m";
    for (Eigen::Index j = 0; j < d.p_x(); ++j) out << ",x" << (j + 1);
    for (Eigen::Index j = 0; j < d.p_w(); ++j) out << ",w" << (j + 1);
    for (Eigen::Index j = 0; j < d.p_z(); ++j) out << ",z" << (j + 1);
    out << "\n";
    for (Eigen::Index i = 0; i < d.n(); ++i) {
        out << format_double(d.y[i]) << ',' << format_double(d.a[i]) << ','
            << format_double(d.m[i]);
        for (Eigen::Index j = 0; j < d.p_x(); ++j) out << ',' << format_double(d.x(i, j));
        for (Eigen::Index j = 0; j < d.p_w(); ++j) out << ',' << format_double(d.w(i, j));
        for (Eigen::Index j = 0; j < d.p_z(); ++j) out << ',' << format_double(d.z(i, j));
        out << "\n";
    }
    if (!out) throw IoError("failed while writing '" + path + "'");
}

ColumnRoles canonical_roles(const Dataset& d) {
    ColumnRoles roles;
    roles.add("y", Role::outcome);
    roles.add("a", Role::exposure);
    roles.add("m", Role::mediator);
    for (Eigen::Index j = 0; j < d.p_x(); ++j) {
        roles.add("x" + std::to_string(j + 1), Role::covariate);
    }
    for (Eigen::Index j = 0; j < d.p_w(); ++j) {
        roles.add("w" + std::to_string(j + 1), Role::w_proxy);
    }
    for (Eigen::Index j = 0; j < d.p_z(); ++j) {
        roles.add("z" + std::to_string(j + 1), Role::z_proxy);
    }
    return roles;
}

}  // namespace proxmed
