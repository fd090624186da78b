#include "usip/cloud_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace usip {

namespace {

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::ifstream open_input(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open for reading: " + path);
    return in;
}

std::ofstream open_output(const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open for writing: " + path);
    return out;
}

}  // namespace

PointCloud read_xyz(const std::string& path) {
    std::ifstream in = open_input(path);
    PointCloud cloud;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ss(line);
        double x, y, z;
        if (!(ss >> x >> y >> z)) {
            throw IoError(path + ":" + std::to_string(line_no) + ": malformed XYZ line");
        }
        cloud.points.emplace_back(x, y, z);
        double nx, ny, nz;
        if (ss >> nx) {
            if (!(ss >> ny >> nz)) {
                throw IoError(path + ":" + std::to_string(line_no) +
                              ": expected 3 normal components");
            }
            cloud.normals.emplace_back(nx, ny, nz);
        }
    }
    if (cloud.points.empty()) throw IoError(path + ": no points");
    if (!cloud.normals.empty() && cloud.normals.size() != cloud.points.size()) {
        throw IoError(path + ": normals on some lines but not all");
    }
    return cloud;
}

void write_xyz(const std::string& path, const PointCloud& cloud) {
    std::ofstream out = open_output(path);
    const bool with_normals = cloud.has_normals();
    for (std::size_t i = 0; i < cloud.points.size(); ++i) {
        const Vec3& p = cloud.points[i];
        out << format_double(p.x()) << ' ' << format_double(p.y()) << ' '
            << format_double(p.z());
        if (with_normals) {
            const Vec3& n = cloud.normals[i];
            out << ' ' << format_double(n.x()) << ' ' << format_double(n.y()) << ' '
                << format_double(n.z());
        }
        out << '\n';
    }
    if (!out) throw IoError("write failed: " + path);
}

PointCloud read_ply(const std::string& path) {
    std::ifstream in = open_input(path);
    std::string line;
    if (!std::getline(in, line) || line.substr(0, 3) != "ply") {
        throw IoError(path + ": missing ply magic");
    }

    int vertex_count = -1;
    bool in_vertex_element = false;
    std::vector<std::string> vertex_props;
    while (std::getline(in, line)) {
        std::istringstream ss(line);
        std::string tok;
        ss >> tok;
        if (tok == "format") {
            std::string kind;
            ss >> kind;
            if (kind != "ascii") throw IoError(path + ": only ascii PLY is supported");
        } else if (tok == "element") {
            std::string name;
            int count = 0;
            ss >> name >> count;
            in_vertex_element = (name == "vertex");
            if (in_vertex_element) vertex_count = count;
        } else if (tok == "property" && in_vertex_element) {
            std::string type, name;
            ss >> type >> name;
            if (type == "list") throw IoError(path + ": list properties unsupported on vertices");
            vertex_props.push_back(name);
        } else if (tok == "end_header") {
            break;
        }
    }
    if (vertex_count < 0) throw IoError(path + ": no vertex element");

    auto find_prop = [&](const std::string& name) {
        const auto it = std::find(vertex_props.begin(), vertex_props.end(), name);
        return it == vertex_props.end() ? -1 : static_cast<int>(it - vertex_props.begin());
    };
    const int ix = find_prop("x"), iy = find_prop("y"), iz = find_prop("z");
    if (ix < 0 || iy < 0 || iz < 0) throw IoError(path + ": vertex element lacks x/y/z");
    const int inx = find_prop("nx"), iny = find_prop("ny"), inz = find_prop("nz");
    const bool with_normals = inx >= 0 && iny >= 0 && inz >= 0;

    PointCloud cloud;
    cloud.points.reserve(static_cast<std::size_t>(vertex_count));
    std::vector<double> row(vertex_props.size());
    for (int v = 0; v < vertex_count; ++v) {
        if (!std::getline(in, line)) throw IoError(path + ": truncated vertex data");
        std::istringstream ss(line);
        for (double& value : row) {
            if (!(ss >> value)) throw IoError(path + ": malformed vertex line");
        }
        cloud.points.emplace_back(row[static_cast<std::size_t>(ix)],
                                  row[static_cast<std::size_t>(iy)],
                                  row[static_cast<std::size_t>(iz)]);
        if (with_normals) {
            cloud.normals.emplace_back(row[static_cast<std::size_t>(inx)],
                                       row[static_cast<std::size_t>(iny)],
                                       row[static_cast<std::size_t>(inz)]);
        }
    }
    if (cloud.points.empty()) throw IoError(path + ": no points");
    return cloud;
}

void write_ply(const std::string& path, const PointCloud& cloud) {
    std::ofstream out = open_output(path);
    out << "ply\nformat ascii 1.0\n";
    out << "element vertex " << cloud.points.size() << "\n";
    out << "property double x\nproperty double y\nproperty double z\n";
    if (cloud.has_normals()) {
        out << "property double nx\nproperty double ny\nproperty double nz\n";
    }
    out << "end_header\n";
    for (std::size_t i = 0; i < cloud.points.size(); ++i) {
        const Vec3& p = cloud.points[i];
        out << format_double(p.x()) << ' ' << format_double(p.y()) << ' '
            << format_double(p.z());
        if (cloud.has_normals()) {
            const Vec3& n = cloud.normals[i];
            out << ' ' << format_double(n.x()) << ' ' << format_double(n.y()) << ' '
                << format_double(n.z());
        }
        out << '\n';
    }
    if (!out) throw IoError("write failed: " + path);
}

void write_keypoints_ply(const std::string& path, const PointCloud& cloud,
                         const std::vector<Vec3>& keypoints,
                         const std::vector<double>& sigmas) {
    if (keypoints.size() != sigmas.size()) {
        throw std::invalid_argument("write_keypoints_ply: keypoints/sigmas mismatch");
    }
    std::ofstream out = open_output(path);
    out << "ply\nformat ascii 1.0\n";
    out << "element vertex " << cloud.points.size() + keypoints.size() << "\n";
    out << "property double x\nproperty double y\nproperty double z\n";
    out << "property uchar red\nproperty uchar green\nproperty uchar blue\n";
    out << "end_header\n";
    for (const Vec3& p : cloud.points) {
        out << format_double(p.x()) << ' ' << format_double(p.y()) << ' '
            << format_double(p.z()) << " 160 160 160\n";
    }
    double sig_lo = 0.0, sig_hi = 1.0;
    if (!sigmas.empty()) {
        sig_lo = *std::min_element(sigmas.begin(), sigmas.end());
        sig_hi = *std::max_element(sigmas.begin(), sigmas.end());
    }
    for (std::size_t i = 0; i < keypoints.size(); ++i) {
        // Bright red at the smallest sigma, fading toward dark red.
        double t = sig_hi > sig_lo ? (sigmas[i] - sig_lo) / (sig_hi - sig_lo) : 0.0;
        const int red = static_cast<int>(std::lround(255.0 - 175.0 * t));
        const Vec3& p = keypoints[i];
        out << format_double(p.x()) << ' ' << format_double(p.y()) << ' '
            << format_double(p.z()) << ' ' << red << " 0 0\n";
    }
    if (!out) throw IoError("write failed: " + path);
}

PointCloud read_cloud(const std::string& path) {
    if (path.size() >= 4 && path.substr(path.size() - 4) == ".ply") return read_ply(path);
    return read_xyz(path);
}

}  // namespace usip
