#include "kvedit/matrix_io.hpp"

#include "kvedit/errors.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <vector>

namespace kvedit {

static_assert(std::endian::native == std::endian::little, "AELM I/O assumes a little-endian host");

namespace {

template <typename T>
void put(std::string& out, T value) {
    char buf[sizeof(T)];
    std::memcpy(buf, &value, sizeof(T));
    out.append(buf, sizeof(T));
}

template <typename T>
T get(const std::string& in, std::size_t offset) {
    T value;
    std::memcpy(&value, in.data() + offset, sizeof(T));
    return value;
}

}  // namespace

std::string to_aelm_bytes(const Matrix& m) {
    std::string out;
    out.reserve(kAelmHeaderBytes + static_cast<std::size_t>(m.size()) * 8);
    out.append("AELM", 4);
    put<std::uint32_t>(out, kAelmVersion);
    put<std::uint32_t>(out, kAelmDtypeF64);
    put<std::uint64_t>(out, static_cast<std::uint64_t>(m.rows()));
    put<std::uint64_t>(out, static_cast<std::uint64_t>(m.cols()));
    for (Index r = 0; r < m.rows(); ++r) {
        for (Index c = 0; c < m.cols(); ++c) put<double>(out, m(r, c));
    }
    return out;
}

Matrix from_aelm_bytes(const std::string& bytes) {
    if (bytes.size() < kAelmHeaderBytes) throw MalformedDump("header truncated");
    if (bytes.compare(0, 4, "AELM") != 0) throw MalformedDump("bad magic");
    const auto version = get<std::uint32_t>(bytes, 4);
    const auto dtype = get<std::uint32_t>(bytes, 8);
    if (version != kAelmVersion) throw MalformedDump("unsupported version " + std::to_string(version));
    if (dtype != kAelmDtypeF64) throw MalformedDump("unsupported dtype " + std::to_string(dtype));
    const auto rows = get<std::uint64_t>(bytes, 12);
    const auto cols = get<std::uint64_t>(bytes, 20);
    if (rows != 0 && cols > (bytes.size() / 8) / rows + 1) throw MalformedDump("payload truncated");
    const std::size_t expected = kAelmHeaderBytes + rows * cols * 8;
    if (bytes.size() < expected) {
        throw MalformedDump("payload truncated: expected " + std::to_string(expected) + " bytes, got " +
                            std::to_string(bytes.size()));
    }
    if (bytes.size() > expected) throw MalformedDump("trailing bytes after payload");
    Matrix m(static_cast<Index>(rows), static_cast<Index>(cols));
    std::size_t off = kAelmHeaderBytes;
    for (Index r = 0; r < m.rows(); ++r) {
        for (Index c = 0; c < m.cols(); ++c) {
            m(r, c) = get<double>(bytes, off);
            off += 8;
        }
    }
    return m;
}

void write_aelm(const std::filesystem::path& path, const Matrix& m) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path.string() + " for writing");
    const std::string bytes = to_aelm_bytes(m);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write failed for " + path.string());
}

Matrix read_aelm(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    return from_aelm_bytes(ss.str());
}

void write_csv(const std::filesystem::path& path, const Matrix& m) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot open " + path.string() + " for writing");
    f << std::setprecision(17);
    for (Index r = 0; r < m.rows(); ++r) {
        for (Index c = 0; c < m.cols(); ++c) {
            if (c) f << ',';
            f << m(r, c);
        }
        f << '\n';
    }
}

Matrix read_csv(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open " + path.string());
    std::vector<std::vector<double>> rows;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::vector<double> row;
        std::stringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) {
            try {
                row.push_back(std::stod(cell));
            } catch (const std::exception&) {
                throw MalformedDump("non-numeric CSV cell '" + cell + "' in " + path.string());
            }
        }
        if (!rows.empty() && row.size() != rows.front().size()) {
            throw MalformedDump("ragged CSV rows in " + path.string());
        }
        rows.push_back(std::move(row));
    }
    if (rows.empty()) return Matrix(0, 0);
    Matrix m(static_cast<Index>(rows.size()), static_cast<Index>(rows.front().size()));
    for (std::size_t r = 0; r < rows.size(); ++r) {
        for (std::size_t c = 0; c < rows[r].size(); ++c) m(static_cast<Index>(r), static_cast<Index>(c)) = rows[r][c];
    }
    return m;
}

}  // namespace kvedit
