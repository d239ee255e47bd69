#include "koa/csv.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "koa/errors.hpp"

namespace koa::csv {

size_t Table::col(const std::string& name) const {
    for (size_t i = 0; i < header.size(); ++i) {
        if (header[i] == name) return i;
    }
    throw DataError("csv: column not found: " + name);
}

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string escape_field(const std::string& field) {
    bool needs_quote = field.find_first_of(",\"\n\r") != std::string::npos;
    if (!needs_quote) return field;
    std::string out = "\"";
    for (char c : field) {
        if (c == '"') out += "\"\"";
        else out += c;
    }
    out += "\"";
    return out;
}

void write(const std::string& path, const std::vector<std::string>& header,
           const std::vector<std::vector<std::string>>& rows,
           const std::map<std::string, std::string>& meta) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("csv: cannot open for writing: " + path);
    for (const auto& [k, v] : meta) {
        f << "# " << k << "=" << v << "\n";
    }
    for (size_t i = 0; i < header.size(); ++i) {
        if (i) f << ",";
        f << escape_field(header[i]);
    }
    f << "\n";
    for (const auto& row : rows) {
        for (size_t i = 0; i < row.size(); ++i) {
            if (i) f << ",";
            f << escape_field(row[i]);
        }
        f << "\n";
    }
    if (!f) throw DataError("csv: write failed: " + path);
}

namespace {

std::vector<std::string> split_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    bool quoted = false;
    for (size_t i = 0; i < line.size(); ++i) {
        char c = line[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    cur += '"';
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                cur += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            fields.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    fields.push_back(cur);
    return fields;
}

}  // namespace

Table read(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("csv: cannot open: " + path);
    Table t;
    std::string line;
    bool header_seen = false;
    while (std::getline(f, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (line[0] == '#') {
            std::string body = line.substr(1);
            size_t start = body.find_first_not_of(' ');
            if (start == std::string::npos) continue;
            body = body.substr(start);
            size_t eq = body.find('=');
            if (eq != std::string::npos) {
                t.meta[body.substr(0, eq)] = body.substr(eq + 1);
            }
            continue;
        }
        auto fields = split_line(line);
        if (!header_seen) {
            t.header = std::move(fields);
            header_seen = true;
        } else {
            t.rows.push_back(std::move(fields));
        }
    }
    if (!header_seen) throw DataError("csv: no header row in " + path);
    return t;
}

}  // namespace koa::csv
