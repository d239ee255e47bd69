#pragma once

#include <map>
#include <string>
#include <vector>

namespace koa::csv {

/// A parsed CSV file. `meta` holds key=value pairs from leading `# key=value`
/// comment lines (used to stamp artifacts with config hash and seed).
struct Table {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
    std::map<std::string, std::string> meta;

    size_t col(const std::string& name) const;  // throws DataError if absent
};

/// Formats a double so that parsing it back yields the identical bit pattern.
std::string fmt_double(double v);

std::string escape_field(const std::string& field);

void write(const std::string& path, const std::vector<std::string>& header,
           const std::vector<std::vector<std::string>>& rows,
           const std::map<std::string, std::string>& meta = {});

Table read(const std::string& path);

}  // namespace koa::csv
