#pragma once

#include "proxmed/dataset.hpp"

#include <map>
#include <string>
#include <utility>
#include <vector>

namespace proxmed {

enum class Role { outcome, exposure, mediator, covariate, w_proxy, z_proxy, ignore };

Role role_from_string(const std::string& s);
std::string role_to_string(Role r);

// Header-name -> role assignment. Entries keep file/flag order, which fixes
// the column order of the x/w/z blocks in the loaded Dataset.
struct ColumnRoles {
    std::vector<std::pair<std::string, Role>> entries;

    void add(const std::string& name, Role role);
    // Exactly one outcome/exposure/mediator, at least one w_proxy and one
    // z_proxy; throws ConfigError otherwise.
    void validate() const;
};

// Parses a plain-text key=value file, one `column=role` per line.
// '#' starts a comment; blank lines are skipped.
ColumnRoles parse_roles_file(const std::string& path);

// Parses a single "column=role" assignment (CLI --role flag).
std::pair<std::string, Role> parse_role_assignment(const std::string& text);

struct LoadInfo {
    int dropped_rows = 0;  // rows removed for missing/non-finite cells
    int total_rows = 0;    // data rows in the file before dropping
};

struct LoadedData {
    Dataset data;
    LoadInfo info;
};

// Reads an RFC-4180-style CSV (header required, '.' decimal, UTF-8) and
// assembles a validated Dataset. Rows with a missing or non-finite cell in
// any role-mapped (non-ignore) column are dropped and counted.
LoadedData load_csv(const std::string& path, const ColumnRoles& roles);

// Writes the dataset with canonical headers (y,a,m,x1..,w1..,z1..) using a
// fixed shortest-round-trip decimal representation, so that save -> load ->
// save is byte-identical.
void save_csv(const Dataset& d, const std::string& path);

// Role mapping matching save_csv's canonical headers.
ColumnRoles canonical_roles(const Dataset& d);

}  // namespace proxmed
