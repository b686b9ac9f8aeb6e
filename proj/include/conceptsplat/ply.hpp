#pragma once

// Minimal PLY reader/writer: single "vertex" element, ascii or binary
// little-endian, double/float/uchar/int properties. Values are surfaced as
// doubles; the declared property type governs the byte layout on write, so
// double-typed files round-trip bit-exactly. Assumes a little-endian host.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "conceptsplat/common.hpp"

namespace csplat {

enum class PlyScalar { f64, f32, u8, i32 };

inline size_t ply_scalar_size(PlyScalar t)
{
    switch (t) {
        case PlyScalar::f64: return 8;
        case PlyScalar::f32: return 4;
        case PlyScalar::u8: return 1;
        default: return 4;
    }
}

inline const char* ply_scalar_name(PlyScalar t)
{
    switch (t) {
        case PlyScalar::f64: return "double";
        case PlyScalar::f32: return "float";
        case PlyScalar::u8: return "uchar";
        default: return "int";
    }
}

inline std::optional<PlyScalar> ply_scalar_from_name(const std::string& s)
{
    if (s == "double" || s == "float64") return PlyScalar::f64;
    if (s == "float" || s == "float32") return PlyScalar::f32;
    if (s == "uchar" || s == "uint8") return PlyScalar::u8;
    if (s == "int" || s == "int32") return PlyScalar::i32;
    return std::nullopt;
}

struct PlyProperty {
    std::string name;
    PlyScalar type;
};

struct PlyFile {
    bool binary = true;
    std::vector<std::string> comments;
    std::vector<PlyProperty> properties;
    size_t vertex_count = 0;
    std::vector<std::vector<double>> columns; // one per property

    std::optional<size_t> find(const std::string& name) const
    {
        for (size_t i = 0; i < properties.size(); ++i)
            if (properties[i].name == name) return i;
        return std::nullopt;
    }

    const std::vector<double>& column(const std::string& name) const
    {
        auto idx = find(name);
        if (!idx) throw ParseError("ply: missing property '" + name + "'");
        return columns[*idx];
    }

    void add_column(const std::string& name, PlyScalar type, std::vector<double> values)
    {
        properties.push_back({name, type});
        columns.push_back(std::move(values));
    }
};

namespace detail {

inline std::string next_line(const std::string& text, size_t& pos)
{
    const size_t end = text.find('\n', pos);
    std::string line = text.substr(pos, end == std::string::npos ? std::string::npos : end - pos);
    pos = end == std::string::npos ? text.size() : end + 1;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return line;
}

inline double read_binary_scalar(const char* p, PlyScalar t)
{
    switch (t) {
        case PlyScalar::f64: {
            double v;
            std::memcpy(&v, p, 8);
            return v;
        }
        case PlyScalar::f32: {
            float v;
            std::memcpy(&v, p, 4);
            return static_cast<double>(v);
        }
        case PlyScalar::u8:
            return static_cast<double>(*reinterpret_cast<const unsigned char*>(p));
        default: {
            std::int32_t v;
            std::memcpy(&v, p, 4);
            return static_cast<double>(v);
        }
    }
}

inline void write_binary_scalar(std::string& out, double v, PlyScalar t)
{
    switch (t) {
        case PlyScalar::f64: {
            char buf[8];
            std::memcpy(buf, &v, 8);
            out.append(buf, 8);
            break;
        }
        case PlyScalar::f32: {
            float f = static_cast<float>(v);
            char buf[4];
            std::memcpy(buf, &f, 4);
            out.append(buf, 4);
            break;
        }
        case PlyScalar::u8: {
            const long r = std::lround(v);
            out.push_back(static_cast<char>(static_cast<unsigned char>(std::clamp(r, 0l, 255l))));
            break;
        }
        default: {
            std::int32_t i = static_cast<std::int32_t>(std::llround(v));
            char buf[4];
            std::memcpy(buf, &i, 4);
            out.append(buf, 4);
            break;
        }
    }
}

inline void format_ascii_scalar(std::ostringstream& ss, double v, PlyScalar t)
{
    char buf[40];
    switch (t) {
        case PlyScalar::f64:
            std::snprintf(buf, sizeof(buf), "%.17g", v);
            ss << buf;
            break;
        case PlyScalar::f32:
            std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(static_cast<float>(v)));
            ss << buf;
            break;
        case PlyScalar::u8:
            ss << std::clamp(std::lround(v), 0l, 255l);
            break;
        default:
            ss << static_cast<std::int64_t>(std::llround(v));
            break;
    }
}

} // namespace detail

inline PlyFile parse_ply(const std::string& bytes)
{
    size_t pos = 0;
    if (detail::next_line(bytes, pos) != "ply") throw ParseError("ply: missing magic line");

    PlyFile file;
    bool have_format = false;
    bool in_vertex = false;
    bool saw_end = false;
    while (pos < bytes.size()) {
        const std::string line = detail::next_line(bytes, pos);
        std::istringstream ss(line);
        std::string word;
        ss >> word;
        if (word == "format") {
            std::string fmt, version;
            ss >> fmt >> version;
            if (fmt == "ascii")
                file.binary = false;
            else if (fmt == "binary_little_endian")
                file.binary = true;
            else
                throw ParseError("ply: unsupported format '" + fmt + "'");
            have_format = true;
        } else if (word == "comment") {
            std::string rest;
            std::getline(ss, rest);
            if (!rest.empty() && rest.front() == ' ') rest.erase(0, 1);
            file.comments.push_back(rest);
        } else if (word == "element") {
            std::string name;
            size_t count = 0;
            ss >> name >> count;
            if (name != "vertex")
                throw ParseError("ply: only 'vertex' elements are supported (got '" + name + "')");
            file.vertex_count = count;
            in_vertex = true;
        } else if (word == "property") {
            if (!in_vertex) throw ParseError("ply: property outside vertex element");
            std::string type, name;
            ss >> type >> name;
            if (type == "list") throw ParseError("ply: list properties are not supported");
            const auto t = ply_scalar_from_name(type);
            if (!t) throw ParseError("ply: unsupported property type '" + type + "'");
            file.properties.push_back({name, *t});
        } else if (word == "end_header") {
            saw_end = true;
            break;
        } else if (word.empty()) {
            continue;
        } else {
            throw ParseError("ply: unexpected header line '" + line + "'");
        }
    }
    if (!have_format || !saw_end) throw ParseError("ply: truncated header");
    if (file.properties.empty()) throw ParseError("ply: no vertex properties");

    const size_t np = file.properties.size();
    file.columns.assign(np, {});
    for (auto& c : file.columns) c.reserve(file.vertex_count);

    if (file.binary) {
        size_t stride = 0;
        for (const auto& p : file.properties) stride += ply_scalar_size(p.type);
        if (bytes.size() - pos < stride * file.vertex_count)
            throw ParseError("ply: binary payload shorter than declared vertex count");
        const char* p = bytes.data() + pos;
        for (size_t row = 0; row < file.vertex_count; ++row) {
            for (size_t c = 0; c < np; ++c) {
                file.columns[c].push_back(detail::read_binary_scalar(p, file.properties[c].type));
                p += ply_scalar_size(file.properties[c].type);
            }
        }
    } else {
        for (size_t row = 0; row < file.vertex_count; ++row) {
            if (pos >= bytes.size()) throw ParseError("ply: ascii payload ended early");
            std::istringstream ls(detail::next_line(bytes, pos));
            for (size_t c = 0; c < np; ++c) {
                double v;
                if (!(ls >> v)) throw ParseError("ply: malformed ascii vertex row");
                file.columns[c].push_back(v);
            }
        }
    }
    return file;
}

inline std::string write_ply(const PlyFile& file)
{
    for (size_t c = 0; c < file.columns.size(); ++c)
        if (file.columns[c].size() != file.vertex_count)
            throw IoError("ply: column size mismatch on write");

    std::ostringstream header;
    header << "ply\n";
    header << (file.binary ? "format binary_little_endian 1.0\n" : "format ascii 1.0\n");
    for (const auto& c : file.comments) header << "comment " << c << "\n";
    header << "element vertex " << file.vertex_count << "\n";
    for (const auto& p : file.properties)
        header << "property " << ply_scalar_name(p.type) << " " << p.name << "\n";
    header << "end_header\n";

    std::string out = header.str();
    if (file.binary) {
        for (size_t row = 0; row < file.vertex_count; ++row)
            for (size_t c = 0; c < file.properties.size(); ++c)
                detail::write_binary_scalar(out, file.columns[c][row], file.properties[c].type);
    } else {
        std::ostringstream body;
        for (size_t row = 0; row < file.vertex_count; ++row) {
            for (size_t c = 0; c < file.properties.size(); ++c) {
                if (c) body << ' ';
                detail::format_ascii_scalar(body, file.columns[c][row], file.properties[c].type);
            }
            body << '\n';
        }
        out += body.str();
    }
    return out;
}

} // namespace csplat
