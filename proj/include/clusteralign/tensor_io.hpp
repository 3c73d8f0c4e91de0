#ifndef CLUSTERALIGN_TENSOR_IO_HPP
#define CLUSTERALIGN_TENSOR_IO_HPP

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "numerics.hpp"

namespace clusteralign {

static_assert(std::endian::native == std::endian::little,
              "tensor container assumes a little-endian host");

/// Structured parse failure: `offset` is the byte (binary) or line (CSV)
/// where decoding stopped.
class ParseError : public Error {
public:
    ParseError(const std::string& what, std::size_t offset)
        : Error(what + " at offset " + std::to_string(offset)), offset_(offset) {}
    std::size_t offset() const { return offset_; }

private:
    std::size_t offset_;
};

inline constexpr char kTensorMagic[4] = {'C', 'A', 'T', 'N'};

// Layout: "CATN" | u32 rank | u32 dims[rank] | f64 payload (little-endian).
inline std::string encode_tensor(const Tensor& t) {
    std::string out(kTensorMagic, 4);
    auto put_u32 = [&out](std::uint32_t v) {
        char buf[4];
        std::memcpy(buf, &v, 4);
        out.append(buf, 4);
    };
    put_u32(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) put_u32(static_cast<std::uint32_t>(d));
    const auto* bytes = reinterpret_cast<const char*>(t.values().data());
    out.append(bytes, t.size() * sizeof(double));
    return out;
}

inline Tensor decode_tensor(std::string_view bytes) {
    std::size_t pos = 0;
    auto need = [&](std::size_t n, const char* what) {
        if (bytes.size() - pos < n) throw ParseError(std::string("truncated ") + what, pos);
    };
    auto get_u32 = [&](const char* what) {
        need(4, what);
        std::uint32_t v;
        std::memcpy(&v, bytes.data() + pos, 4);
        pos += 4;
        return v;
    };
    need(4, "magic");
    if (std::memcmp(bytes.data(), kTensorMagic, 4) != 0) throw ParseError("bad magic", 0);
    pos = 4;
    const std::uint32_t rank = get_u32("rank");
    if (rank > 16) throw ParseError("implausible rank " + std::to_string(rank), 4);
    std::vector<std::size_t> shape;
    std::size_t count = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
        shape.push_back(get_u32("shape"));
        if (shape.back() != 0 && count > bytes.size() / sizeof(double) / shape.back()) {
            throw ParseError("truncated payload", pos);
        }
        count *= shape.back();
    }
    const std::size_t payload = count * sizeof(double);
    need(payload, "payload");
    std::vector<double> data(count);
    std::memcpy(data.data(), bytes.data() + pos, payload);
    pos += payload;
    if (pos != bytes.size()) throw ParseError("trailing bytes", pos);
    return Tensor(std::move(shape), std::move(data));
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file_bytes(const std::filesystem::path& path, std::string_view bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline void save_tensor(const std::filesystem::path& path, const Tensor& t) {
    write_file_bytes(path, encode_tensor(t));
}

inline Tensor load_tensor(const std::filesystem::path& path) {
    return decode_tensor(read_file_bytes(path));
}

/// Round-trippable decimal formatting for CSV output.
inline std::string format_double(double v) {
    std::ostringstream ss;
    ss << std::setprecision(17) << v;
    return ss.str();
}

/// 2-D slice as CSV: one line per row, comma separated, no header.
inline std::string tensor_to_csv(const Tensor& t) {
    if (t.rank() != 2) throw Error("CSV export needs a 2-D tensor");
    std::string out;
    for (std::size_t r = 0; r < t.dim(0); ++r) {
        for (std::size_t c = 0; c < t.dim(1); ++c) {
            if (c) out += ',';
            out += format_double(t[r * t.dim(1) + c]);
        }
        out += '\n';
    }
    return out;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ss(line);
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    return cells;
}

inline double parse_double_cell(const std::string& cell, std::size_t line_no) {
    try {
        std::size_t used = 0;
        const double v = std::stod(cell, &used);
        if (used != cell.size()) throw std::invalid_argument(cell);
        return v;
    } catch (const std::exception&) {
        throw ParseError("bad number '" + cell + "'", line_no);
    }
}

inline Tensor tensor_from_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    std::vector<double> data;
    std::size_t rows = 0, cols = 0, line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto cells = split_csv_line(line);
        if (rows == 0) cols = cells.size();
        if (cells.size() != cols) throw ParseError("ragged row", line_no);
        for (const auto& c : cells) data.push_back(parse_double_cell(c, line_no));
        ++rows;
    }
    return Tensor({rows, cols}, std::move(data));
}

}  // namespace clusteralign

#endif  // CLUSTERALIGN_TENSOR_IO_HPP
