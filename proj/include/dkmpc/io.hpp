#pragma once

// Plain-text artifact formats.
//
// Snapshot sequence:
//     [# comment lines]
//     rows cols frames
//     <rows lines of cols comma-separated values>   -- frame 0
//     <blank line>
//     <rows lines ...>                              -- frame 1
//     ...
// A matrix file is the same layout with frames = 1 and no [0,1] range check.
// Doubles are written in shortest round-trip form, so write/read is exact
// and repeated runs produce identical bytes.

#include "dkmpc/lifting_data.hpp"

#include <charconv>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

namespace dkmpc::io {

inline std::string format_double(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    if (ec != std::errc{}) throw RuntimeFailure("failed to format a double");
    return std::string(buf, ptr);
}

inline double parse_double(std::string_view token) {
    while (!token.empty() && (token.front() == ' ' || token.front() == '\t')) token.remove_prefix(1);
    while (!token.empty() && (token.back() == ' ' || token.back() == '\t' || token.back() == '\r'))
        token.remove_suffix(1);
    if (!token.empty() && token.front() == '+') token.remove_prefix(1);
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(token.data(), token.data() + token.size(), v);
    require(ec == std::errc{} && ptr == token.data() + token.size() && !token.empty(),
            "malformed number '" + std::string(token) + "'");
    return v;
}

struct FrameStack {
    int rows = 0;
    int cols = 0;
    std::vector<std::string> comments;  // header comment lines without the leading '#'
    std::vector<std::vector<double>> frames;
};

inline void write_frames(std::ostream& os, int rows, int cols,
                         const std::vector<const std::vector<double>*>& frames,
                         const std::vector<std::string>& comments = {}) {
    for (const auto& c : comments) os << "# " << c << '\n';
    os << rows << ' ' << cols << ' ' << frames.size() << '\n';
    for (std::size_t f = 0; f < frames.size(); ++f) {
        if (f > 0) os << '\n';
        const auto& vals = *frames[f];
        for (int r = 0; r < rows; ++r) {
            for (int c = 0; c < cols; ++c) {
                if (c > 0) os << ',';
                os << format_double(vals[static_cast<std::size_t>(r) * cols + c]);
            }
            os << '\n';
        }
    }
}

inline FrameStack read_frames(std::istream& is) {
    FrameStack out;
    std::string line;
    bool have_header = false;
    int expected = 0;
    while (std::getline(is, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!line.empty() && line.front() == '#') {
            auto body = line.substr(1);
            if (!body.empty() && body.front() == ' ') body.erase(0, 1);
            out.comments.push_back(body);
            continue;
        }
        if (line.empty()) continue;
        std::istringstream hs(line);
        require(static_cast<bool>(hs >> out.rows >> out.cols >> expected),
                "expected header line 'rows cols frames'");
        std::string extra;
        require(!(hs >> extra), "unexpected token after header: '" + extra + "'");
        have_header = true;
        break;
    }
    require(have_header, "missing header line");
    require(out.rows > 0 && out.cols > 0 && expected >= 0, "header dimensions must be positive");

    std::vector<double> current;
    int rows_in_frame = 0;
    auto flush = [&] {
        require(rows_in_frame == out.rows, "frame " + std::to_string(out.frames.size()) + " has " +
                                               std::to_string(rows_in_frame) + " rows, expected " +
                                               std::to_string(out.rows));
        out.frames.push_back(std::move(current));
        current.clear();
        rows_in_frame = 0;
    };
    while (std::getline(is, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) {
            if (rows_in_frame > 0) flush();
            continue;
        }
        require(rows_in_frame < out.rows, "frame " + std::to_string(out.frames.size()) +
                                              " has more than " + std::to_string(out.rows) +
                                              " rows (missing blank separator?)");
        int count = 0;
        std::string_view rest(line);
        while (true) {
            const auto comma = rest.find(',');
            current.push_back(parse_double(rest.substr(0, comma)));
            ++count;
            if (comma == std::string_view::npos) break;
            rest.remove_prefix(comma + 1);
        }
        require(count == out.cols, "row has " + std::to_string(count) + " values, expected " +
                                       std::to_string(out.cols));
        ++rows_in_frame;
    }
    if (rows_in_frame > 0) flush();
    require(static_cast<int>(out.frames.size()) == expected,
            "header announces " + std::to_string(expected) + " frames, found " +
                std::to_string(out.frames.size()));
    return out;
}

inline void write_snapshots(std::ostream& os, const std::vector<DensitySnapshot>& seq,
                            const std::vector<std::string>& comments = {}) {
    require(!seq.empty(), "cannot write an empty snapshot sequence");
    std::vector<const std::vector<double>*> frames;
    for (const auto& s : seq) {
        require(s.rows == seq.front().rows && s.cols == seq.front().cols, "mixed grid shapes");
        frames.push_back(&s.values);
    }
    write_frames(os, seq.front().rows, seq.front().cols, frames, comments);
}

inline std::vector<DensitySnapshot> read_snapshots(std::istream& is) {
    auto stack = read_frames(is);
    std::vector<DensitySnapshot> out;
    int t = 0;
    for (auto& f : stack.frames) {
        out.emplace_back(stack.rows, stack.cols, std::move(f), t++);
        out.back().validate();
    }
    return out;
}

inline void write_matrix(std::ostream& os, const Matrix& m,
                         const std::vector<std::string>& comments = {}) {
    std::vector<double> row_major(static_cast<std::size_t>(m.size()));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c)
            row_major[static_cast<std::size_t>(r * m.cols() + c)] = m(r, c);
    write_frames(os, static_cast<int>(m.rows()), static_cast<int>(m.cols()), {&row_major}, comments);
}

inline Matrix read_matrix(std::istream& is) {
    auto stack = read_frames(is);
    require(stack.frames.size() == 1, "matrix file must contain exactly one frame");
    Matrix m(stack.rows, stack.cols);
    for (int r = 0; r < stack.rows; ++r)
        for (int c = 0; c < stack.cols; ++c)
            m(r, c) = stack.frames[0][static_cast<std::size_t>(r) * stack.cols + c];
    return m;
}

inline std::ifstream open_input(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open '" + path + "'");
    return in;
}

inline std::ofstream open_output(const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw RuntimeFailure("cannot write '" + path + "'");
    return out;
}

/// Minimal CSV writer: header row, then rows of already-formatted cells.
class CsvWriter {
public:
    CsvWriter(std::ostream& os, const std::vector<std::string>& header) : os_(os) { row(header); }

    void row(const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) {
            if (i > 0) os_ << ',';
            os_ << cells[i];
        }
        os_ << '\n';
    }

private:
    std::ostream& os_;
};

inline std::string cell(double v) { return format_double(v); }
inline std::string cell(int v) { return std::to_string(v); }
inline std::string cell(long v) { return std::to_string(v); }
inline std::string cell(long long v) { return std::to_string(v); }
inline std::string cell(std::size_t v) { return std::to_string(v); }
inline std::string cell(const std::string& v) { return v; }
inline std::string cell(const char* v) { return v; }

}  // namespace dkmpc::io
