#include "usip/run_config.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace usip {

namespace {

std::string trim(const std::string& s) {
    const auto begin = s.find_first_not_of(" \t\r");
    if (begin == std::string::npos) return "";
    const auto end = s.find_last_not_of(" \t\r");
    return s.substr(begin, end - begin + 1);
}

double parse_double(const std::string& key, const std::string& value) {
    std::size_t pos = 0;
    double out = 0.0;
    try {
        out = std::stod(value, &pos);
    } catch (const std::exception&) {
        throw std::invalid_argument("config: bad numeric value for " + key);
    }
    if (pos != value.size()) throw std::invalid_argument("config: bad numeric value for " + key);
    return out;
}

std::int64_t parse_int(const std::string& key, const std::string& value) {
    std::size_t pos = 0;
    long long out = 0;
    try {
        out = std::stoll(value, &pos);
    } catch (const std::exception&) {
        throw std::invalid_argument("config: bad integer value for " + key);
    }
    if (pos != value.size()) throw std::invalid_argument("config: bad integer value for " + key);
    return out;
}

std::vector<int> parse_int_list(const std::string& key, const std::string& value) {
    std::vector<int> out;
    std::istringstream ss(value);
    std::string item;
    while (std::getline(ss, item, ',')) {
        out.push_back(static_cast<int>(parse_int(key, trim(item))));
    }
    if (out.empty()) throw std::invalid_argument("config: empty list for " + key);
    return out;
}

std::string join_ints(const std::vector<int>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(v[i]);
    }
    return out;
}

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

double profile_epsilon(const std::string& profile) {
    if (profile == "lidar") return 0.5;
    if (profile == "rgbd") return 0.1;
    if (profile == "model") return 0.03;
    throw std::invalid_argument("config: unknown profile " + profile);
}

RotationMode profile_rotation(const std::string& profile) {
    if (profile == "lidar") return RotationMode::kPlanar;
    if (profile == "rgbd" || profile == "model") return RotationMode::kFull3D;
    throw std::invalid_argument("config: unknown profile " + profile);
}

RunConfig RunConfig::from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config: " + path);
    std::map<std::string, std::string> entries;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw std::invalid_argument(path + ":" + std::to_string(line_no) +
                                        ": expected key=value");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) {
            throw std::invalid_argument(path + ":" + std::to_string(line_no) + ": empty key");
        }
        if (!entries.emplace(key, value).second) {
            throw std::invalid_argument(path + ":" + std::to_string(line_no) +
                                        ": duplicate key " + key);
        }
    }
    return from_entries(entries);
}

RunConfig RunConfig::from_entries(const std::map<std::string, std::string>& entries) {
    RunConfig cfg;
    bool epsilon_given = false;
    bool rotation_given = false;
    for (const auto& [key, value] : entries) {
        if (key == "dataset_dir") cfg.dataset_dir = value;
        else if (key == "output_dir") cfg.output_dir = value;
        else if (key == "profile") cfg.profile = value;
        else if (key == "epsilon") { cfg.epsilon = parse_double(key, value); epsilon_given = true; }
        else if (key == "seed") cfg.seed = static_cast<std::uint64_t>(parse_int(key, value));
        else if (key == "pairs_per_cloud") cfg.train.pairs_per_cloud = static_cast<int>(parse_int(key, value));
        else if (key == "epochs") cfg.train.epochs = static_cast<int>(parse_int(key, value));
        else if (key == "max_steps") cfg.train.max_steps = parse_int(key, value);
        else if (key == "learning_rate") cfg.train.learning_rate = parse_double(key, value);
        else if (key == "lambda") cfg.train.lambda = parse_double(key, value);
        else if (key == "loss_mode") {
            if (value == "point") cfg.train.loss_mode = LossMode::kPoint;
            else if (value == "plane") cfg.train.loss_mode = LossMode::kPlane;
            else throw std::invalid_argument("config: loss_mode must be point or plane");
        } else if (key == "noise_sigma") cfg.train.augmentation.noise_sigma = parse_double(key, value);
        else if (key == "rotation_mode") {
            rotation_given = true;
            if (value == "planar") cfg.train.augmentation.rotation_mode = RotationMode::kPlanar;
            else if (value == "full3d") cfg.train.augmentation.rotation_mode = RotationMode::kFull3D;
            else throw std::invalid_argument("config: rotation_mode must be planar or full3d");
        } else if (key == "translation_range") {
            cfg.train.augmentation.translation_range = parse_double(key, value);
        } else if (key == "batch_accumulation") {
            cfg.train.batch_accumulation = static_cast<int>(parse_int(key, value));
        } else if (key == "proposal_count") {
            cfg.train.fpn.proposal_count = static_cast<int>(parse_int(key, value));
        } else if (key == "cluster_point_cap") {
            cfg.train.fpn.cluster_point_cap = static_cast<int>(parse_int(key, value));
        } else if (key == "node_knn") {
            cfg.train.fpn.node_knn = static_cast<int>(parse_int(key, value));
        } else if (key == "widths1") cfg.train.fpn.widths1 = parse_int_list(key, value);
        else if (key == "widths2") cfg.train.fpn.widths2 = parse_int_list(key, value);
        else if (key == "widths_head") cfg.train.fpn.widths_head = parse_int_list(key, value);
        else if (key == "sigma_floor") cfg.train.fpn.sigma_floor = parse_double(key, value);
        else throw std::invalid_argument("config: unknown key " + key);
    }
    if (!epsilon_given) cfg.epsilon = profile_epsilon(cfg.profile);
    else profile_epsilon(cfg.profile);  // still validate the profile name
    if (!rotation_given) cfg.train.augmentation.rotation_mode = profile_rotation(cfg.profile);
    cfg.train.seed = cfg.seed;
    cfg.train.validate();
    return cfg;
}

std::string RunConfig::resolved_text() const {
    std::ostringstream out;
    out << "dataset_dir=" << dataset_dir << "\n";
    out << "output_dir=" << output_dir << "\n";
    out << "profile=" << profile << "\n";
    out << "epsilon=" << fmt(epsilon) << "\n";
    out << "seed=" << seed << "\n";
    out << "pairs_per_cloud=" << train.pairs_per_cloud << "\n";
    out << "epochs=" << train.epochs << "\n";
    out << "max_steps=" << train.max_steps << "\n";
    out << "learning_rate=" << fmt(train.learning_rate) << "\n";
    out << "lambda=" << fmt(train.lambda) << "\n";
    out << "loss_mode=" << (train.loss_mode == LossMode::kPoint ? "point" : "plane") << "\n";
    out << "noise_sigma=" << fmt(train.augmentation.noise_sigma) << "\n";
    out << "rotation_mode="
        << (train.augmentation.rotation_mode == RotationMode::kPlanar ? "planar" : "full3d")
        << "\n";
    out << "translation_range=" << fmt(train.augmentation.translation_range) << "\n";
    out << "batch_accumulation=" << train.batch_accumulation << "\n";
    out << "proposal_count=" << train.fpn.proposal_count << "\n";
    out << "cluster_point_cap=" << train.fpn.cluster_point_cap << "\n";
    out << "node_knn=" << train.fpn.node_knn << "\n";
    out << "widths1=" << join_ints(train.fpn.widths1) << "\n";
    out << "widths2=" << join_ints(train.fpn.widths2) << "\n";
    out << "widths_head=" << join_ints(train.fpn.widths_head) << "\n";
    out << "sigma_floor=" << fmt(train.fpn.sigma_floor) << "\n";
    return out.str();
}

void RunConfig::write_sidecar(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write resolved config: " + path);
    out << resolved_text();
    if (!out) throw IoError("resolved config write failed: " + path);
}

}  // namespace usip
