#pragma once

#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "error.hpp"

namespace massive {

// Plain comma-separated table with a header row; no quoting.
struct CsvTable {
    std::vector<std::string> columns;
    std::vector<std::vector<std::string>> rows;

    std::size_t column(const std::string& name) const {
        for (std::size_t i = 0; i < columns.size(); ++i) {
            if (columns[i] == name) {
                return i;
            }
        }
        throw InputError("CSV is missing column '" + name + "'");
    }

    bool has(const std::string& name) const {
        return std::find(columns.begin(), columns.end(), name) != columns.end();
    }

    double number(std::size_t row, std::size_t col) const {
        const std::string& cell = rows.at(row).at(col);
        try {
            std::size_t used = 0;
            const double v = std::stod(cell, &used);
            if (used != cell.size()) {
                throw std::invalid_argument(cell);
            }
            return v;
        } catch (const std::logic_error&) {
            throw InputError("row " + std::to_string(row + 1) + ", column '" + columns[col] + "': '" + cell +
                             "' is not a number");
        }
    }
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream in(line);
    while (std::getline(in, cell, ',')) {
        out.push_back(cell);
    }
    if (!line.empty() && line.back() == ',') {
        out.emplace_back();
    }
    return out;
}

inline CsvTable parse_csv(const std::string& text) {
    CsvTable t;
    std::istringstream in(text);
    std::string line;
    bool header = true;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (line.empty()) {
            continue;
        }
        auto cells = split_csv_line(line);
        if (header) {
            t.columns = std::move(cells);
            header = false;
            continue;
        }
        if (cells.size() != t.columns.size()) {
            throw InputError("CSV line " + std::to_string(lineno) + " has " + std::to_string(cells.size()) +
                             " cells, header has " + std::to_string(t.columns.size()));
        }
        t.rows.push_back(std::move(cells));
    }
    if (header) {
        throw InputError("CSV has no header row");
    }
    return t;
}

} // namespace massive
