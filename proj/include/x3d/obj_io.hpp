#pragma once
#include <charconv>
#include <fstream>
#include <sstream>
#include <string>

#include "x3d/errors.hpp"
#include "x3d/tet.hpp"

namespace x3d {

namespace detail {
// Shortest round-trip decimal form; keeps exports byte-stable and re-imports
// bit-exact.
inline void append_double(std::string& out, double v) {
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    out.append(buf, res.ptr);
}
} // namespace detail

// Wavefront OBJ with the vertex-color extension: `v x y z r g b` then
// 1-based `f` lines, LF endings.
inline std::string export_obj(const SurfaceMesh& mesh) {
    std::string out;
    out.reserve(mesh.verts.size() * 48 + mesh.tris.size() * 16 + 32);
    out += "# surface mesh\n";
    for (std::size_t i = 0; i < mesh.verts.size(); ++i) {
        out += "v ";
        detail::append_double(out, mesh.verts[i].x);
        out += ' ';
        detail::append_double(out, mesh.verts[i].y);
        out += ' ';
        detail::append_double(out, mesh.verts[i].z);
        const Vec3 c = i < mesh.colors.size() ? mesh.colors[i] : Vec3{1, 1, 1};
        out += ' ';
        detail::append_double(out, c.x);
        out += ' ';
        detail::append_double(out, c.y);
        out += ' ';
        detail::append_double(out, c.z);
        out += '\n';
    }
    for (const auto& t : mesh.tris) {
        out += "f ";
        out += std::to_string(t[0] + 1);
        out += ' ';
        out += std::to_string(t[1] + 1);
        out += ' ';
        out += std::to_string(t[2] + 1);
        out += '\n';
    }
    return out;
}

inline SurfaceMesh import_obj(const std::string& text) {
    SurfaceMesh mesh;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        std::string tag;
        ls >> tag;
        if (tag == "v") {
            double x, y, z;
            if (!(ls >> x >> y >> z)) throw DomainError("obj: bad vertex at line " + std::to_string(lineno));
            double r = 1, g = 1, b = 1;
            if (ls >> r) {
                if (!(ls >> g >> b)) throw DomainError("obj: partial vertex color at line " + std::to_string(lineno));
            }
            mesh.verts.push_back({x, y, z});
            mesh.colors.push_back({r, g, b});
        } else if (tag == "f") {
            std::array<int, 3> idx{};
            for (int i = 0; i < 3; ++i) {
                std::string tok;
                if (!(ls >> tok)) throw DomainError("obj: bad face at line " + std::to_string(lineno));
                // Accept v, v/vt, v/vt/vn forms; only the vertex index is used.
                const std::size_t slash = tok.find('/');
                if (slash != std::string::npos) tok = tok.substr(0, slash);
                int v = 0;
                const auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
                if (res.ec != std::errc() || v == 0)
                    throw DomainError("obj: bad face index at line " + std::to_string(lineno));
                idx[std::size_t(i)] = v > 0 ? v - 1 : int(mesh.verts.size()) + v;
            }
            for (int v : idx)
                if (v < 0 || std::size_t(v) >= mesh.verts.size())
                    throw DomainError("obj: face index out of range at line " + std::to_string(lineno));
            mesh.tris.push_back(idx);
        }
        // Other tags (vn, vt, o, g, usemtl, s) are ignored.
    }
    compute_vertex_normals(mesh);
    return mesh;
}

inline void write_obj(const std::string& path, const SurfaceMesh& mesh) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("write_obj: cannot open " + path);
    const std::string text = export_obj(mesh);
    f.write(text.data(), std::streamsize(text.size()));
    if (!f) throw Error("write_obj: write failed for " + path);
}

inline SurfaceMesh read_obj(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("read_obj: cannot open " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return import_obj(ss.str());
}

} // namespace x3d
