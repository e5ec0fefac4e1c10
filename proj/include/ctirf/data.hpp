// data.hpp - event streams, response tables, and their CSV forms.
//
// Events CSV:    series_id,time,<predictor columns...>
// Responses CSV: series_id,time,y,<random-factor columns...>
// Header row required; UTF-8; '.' decimal separator; no quoting or embedded
// commas (identifiers and numbers only).
#pragma once

#include <cstddef>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "ctirf/common.hpp"

namespace ctirf {

// Timestamped predictor vectors grouped by series.
struct EventStream {
    std::vector<std::string> predictor_names;
    struct Series {
        std::string id;
        std::vector<double> times;            // nondecreasing
        std::vector<std::vector<double>> x;   // [n][K]
    };
    std::vector<Series> series;

    const Series* find_series(const std::string& id) const {
        for (const auto& s : series)
            if (s.id == id) return &s;
        return nullptr;
    }

    std::size_t total_events() const {
        std::size_t n = 0;
        for (const auto& s : series) n += s.times.size();
        return n;
    }
};

// Response samples with timestamps and random-factor level labels.
struct ResponseTable {
    std::vector<std::string> factor_names;
    struct Row {
        std::string series;
        double time = 0.0;
        double y = 0.0;
        std::vector<std::string> levels;  // aligned with factor_names
    };
    std::vector<Row> rows;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            fields.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur.push_back(c);
        }
    }
    fields.push_back(cur);
    return fields;
}

inline double parse_number(const std::string& field, const std::string& file,
                           std::size_t line_no, const std::string& column) {
    if (field.empty())
        throw DataError(file + ":" + std::to_string(line_no) + ": column '" +
                        column + "': empty numeric field");
    std::size_t consumed = 0;
    double v = 0.0;
    try {
        v = std::stod(field, &consumed);
    } catch (const std::exception&) {
        consumed = 0;
    }
    if (consumed != field.size())
        throw DataError(file + ":" + std::to_string(line_no) + ": column '" +
                        column + "': cannot parse '" + field + "' as a number");
    return v;
}

}  // namespace detail

inline EventStream read_events_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open events file '" + path + "'");
    std::string line;
    if (!std::getline(in, line))
        throw DataError(path + ": empty file (header row required)");
    auto header = detail::split_csv_line(line);
    if (header.size() < 2 || header[0] != "series_id" || header[1] != "time")
        throw DataError(path + ":1: header must begin 'series_id,time'");

    EventStream events;
    for (std::size_t i = 2; i < header.size(); ++i)
        events.predictor_names.push_back(header[i]);

    std::map<std::string, std::size_t> series_index;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        auto fields = detail::split_csv_line(line);
        if (fields.size() != header.size())
            throw DataError(path + ":" + std::to_string(line_no) + ": expected " +
                            std::to_string(header.size()) + " fields, found " +
                            std::to_string(fields.size()));
        const std::string& sid = fields[0];
        auto it = series_index.find(sid);
        if (it == series_index.end()) {
            it = series_index.emplace(sid, events.series.size()).first;
            events.series.push_back({sid, {}, {}});
        }
        auto& series = events.series[it->second];
        const double t = detail::parse_number(fields[1], path, line_no, "time");
        if (!series.times.empty() && t < series.times.back())
            throw DataError(path + ":" + std::to_string(line_no) +
                            ": column 'time': timestamps must be nondecreasing "
                            "within a series");
        std::vector<double> x(events.predictor_names.size());
        for (std::size_t k = 0; k < x.size(); ++k)
            x[k] = detail::parse_number(fields[2 + k], path, line_no,
                                        events.predictor_names[k]);
        series.times.push_back(t);
        series.x.push_back(std::move(x));
    }
    return events;
}

inline ResponseTable read_responses_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open responses file '" + path + "'");
    std::string line;
    if (!std::getline(in, line))
        throw DataError(path + ": empty file (header row required)");
    auto header = detail::split_csv_line(line);
    if (header.size() < 3 || header[0] != "series_id" || header[1] != "time" ||
        header[2] != "y")
        throw DataError(path + ":1: header must begin 'series_id,time,y'");

    ResponseTable table;
    for (std::size_t i = 3; i < header.size(); ++i)
        table.factor_names.push_back(header[i]);

    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        auto fields = detail::split_csv_line(line);
        if (fields.size() != header.size())
            throw DataError(path + ":" + std::to_string(line_no) + ": expected " +
                            std::to_string(header.size()) + " fields, found " +
                            std::to_string(fields.size()));
        ResponseTable::Row row;
        row.series = fields[0];
        row.time = detail::parse_number(fields[1], path, line_no, "time");
        row.y = detail::parse_number(fields[2], path, line_no, "y");
        for (std::size_t f = 0; f < table.factor_names.size(); ++f)
            row.levels.push_back(fields[3 + f]);
        table.rows.push_back(std::move(row));
    }
    return table;
}

inline void write_events_csv(const EventStream& events, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write events file '" + path + "'");
    out << "series_id,time";
    for (const auto& name : events.predictor_names) out << ',' << name;
    out << '\n';
    out.precision(17);
    for (const auto& series : events.series)
        for (std::size_t n = 0; n < series.times.size(); ++n) {
            out << series.id << ',' << series.times[n];
            for (double v : series.x[n]) out << ',' << v;
            out << '\n';
        }
    if (!out) throw DataError("write failed for '" + path + "'");
}

inline void write_responses_csv(const ResponseTable& table, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write responses file '" + path + "'");
    out << "series_id,time,y";
    for (const auto& name : table.factor_names) out << ',' << name;
    out << '\n';
    out.precision(17);
    for (const auto& row : table.rows) {
        out << row.series << ',' << row.time << ',' << row.y;
        for (const auto& level : row.levels) out << ',' << level;
        out << '\n';
    }
    if (!out) throw DataError("write failed for '" + path + "'");
}

}  // namespace ctirf
