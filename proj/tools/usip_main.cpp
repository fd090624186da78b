// usip command-line tool: data generation, training, detection and the
// evaluation harness, all seeded and file-based. Exit codes: 0 ok, 2 usage,
// 3 I/O, 4 invalid argument, 5 diverged.

#include <CLI11.hpp>
#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <sstream>

#include "usip/cloud_io.hpp"
#include "usip/degeneracy.hpp"
#include "usip/eval.hpp"
#include "usip/fpn.hpp"
#include "usip/geometry.hpp"
#include "usip/grad_harness.hpp"
#include "usip/run_config.hpp"
#include "usip/training.hpp"

namespace fs = std::filesystem;
using namespace usip;

namespace {

enum ExitCode { kOk = 0, kUsage = 2, kIo = 3, kInvalidArgument = 4, kDiverged = 5 };

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open for writing: " + path);
    out << text;
    if (!out) throw IoError("write failed: " + path);
}

// Resolved-argument sidecar so any run can be replayed from files alone.
void write_resolved(const std::string& out_path,
                    const std::vector<std::pair<std::string, std::string>>& kv) {
    std::ostringstream text;
    for (const auto& [k, v] : kv) text << k << "=" << v << "\n";
    write_text(out_path + ".resolved", text.str());
}

std::vector<std::string> list_clouds(const std::string& dir) {
    std::vector<std::string> files;
    if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir);
    for (const auto& entry : fs::directory_iterator(dir)) {
        const std::string p = entry.path().string();
        const std::string name = entry.path().filename().string();
        if (name.find("_labels") != std::string::npos) continue;
        if (p.size() > 4 && (p.substr(p.size() - 4) == ".xyz" || p.substr(p.size() - 4) == ".ply")) {
            files.push_back(p);
        }
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) throw IoError("no cloud files in " + dir);
    return files;
}

std::vector<PointCloud> load_corpus(const std::string& dir) {
    std::vector<PointCloud> corpus;
    for (const std::string& path : list_clouds(dir)) corpus.push_back(read_cloud(path));
    return corpus;
}

struct PairEntry {
    std::string path_a, path_b;
    RigidTransform t_ab;
};

// Pairs file: one "cloud_a cloud_b r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz"
// per line; T maps cloud_a into cloud_b's frame.
std::vector<PairEntry> read_pairs_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open pairs file: " + path);
    std::vector<PairEntry> entries;
    std::string line;
    int line_no = 0;
    const fs::path base = fs::path(path).parent_path();
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ss(line);
        PairEntry e;
        if (!(ss >> e.path_a >> e.path_b)) {
            throw IoError(path + ":" + std::to_string(line_no) + ": malformed pair line");
        }
        for (int r = 0; r < 3; ++r) {
            for (int c = 0; c < 3; ++c) {
                if (!(ss >> e.t_ab.rotation(r, c))) {
                    throw IoError(path + ":" + std::to_string(line_no) + ": expected 12 numbers");
                }
            }
        }
        for (int i = 0; i < 3; ++i) {
            if (!(ss >> e.t_ab.translation[i])) {
                throw IoError(path + ":" + std::to_string(line_no) + ": expected 12 numbers");
            }
        }
        if (!fs::path(e.path_a).is_absolute()) e.path_a = (base / e.path_a).string();
        if (!fs::path(e.path_b).is_absolute()) e.path_b = (base / e.path_b).string();
        entries.push_back(std::move(e));
    }
    if (entries.empty()) throw IoError(path + ": no pairs");
    return entries;
}

std::vector<EvalPair> load_eval_pairs(const std::string& path) {
    std::vector<EvalPair> pairs;
    for (const PairEntry& e : read_pairs_file(path)) {
        EvalPair p;
        p.a = read_cloud(e.path_a);
        p.b = read_cloud(e.path_b);
        p.t_ab = e.t_ab;
        pairs.push_back(std::move(p));
    }
    return pairs;
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const std::string& shape_name_arg, int count, int points,
                 double jitter, std::uint64_t seed, const std::string& out_dir,
                 bool with_pairs, int pairs_count, const std::string& profile,
                 double pair_noise) {
    const SyntheticShape shape = parse_shape(shape_name_arg);
    fs::create_directories(out_dir);
    std::ostringstream stdout_csv;
    stdout_csv << "file,points,corners\n";
    std::vector<std::string> files;
    for (int i = 0; i < count; ++i) {
        const SyntheticCloud sc = gen_synthetic(
            shape, points, jitter, derive_seed(seed, seed_stage::kShape,
                                               static_cast<std::uint64_t>(i)));
        char name[64];
        std::snprintf(name, sizeof(name), "%s_%03d.xyz", shape_name_arg.c_str(), i);
        const std::string cloud_path = (fs::path(out_dir) / name).string();
        write_xyz(cloud_path, sc.cloud);
        PointCloud labels;
        labels.points = sc.salient_points;
        std::snprintf(name, sizeof(name), "%s_%03d_labels.xyz", shape_name_arg.c_str(), i);
        write_xyz((fs::path(out_dir) / name).string(), labels);
        stdout_csv << fs::path(cloud_path).filename().string() << "," << points << ","
                   << sc.salient_points.size() << "\n";
        files.push_back(cloud_path);
    }
    if (with_pairs) {
        AugmentationSpec aug;
        aug.rotation_mode = profile_rotation(profile);
        aug.translation_range = 0.1;
        aug.noise_sigma = pair_noise;
        std::ostringstream pairs_text;
        for (int i = 0; i < pairs_count; ++i) {
            const std::string& src = files[static_cast<std::size_t>(i) % files.size()];
            const std::uint64_t pair_seed =
                derive_seed(seed, seed_stage::kEval, static_cast<std::uint64_t>(i));
            const RigidTransform t = random_se3(
                aug.rotation_mode, aug.translation_range,
                derive_seed(pair_seed, seed_stage::kTransform));
            PointCloud b = apply_transform(read_cloud(src), t);
            if (aug.noise_sigma > 0.0) {
                b = add_gaussian_noise(b, aug.noise_sigma,
                                       derive_seed(pair_seed, seed_stage::kNoise));
            }
            char name[64];
            std::snprintf(name, sizeof(name), "pair_%03d_b.xyz", i);
            const std::string b_path = (fs::path(out_dir) / name).string();
            write_xyz(b_path, b);
            pairs_text << fs::path(src).filename().string() << " "
                       << fs::path(b_path).filename().string();
            for (int r = 0; r < 3; ++r) {
                for (int c = 0; c < 3; ++c) pairs_text << " " << fmt_double(t.rotation(r, c));
            }
            for (int k = 0; k < 3; ++k) pairs_text << " " << fmt_double(t.translation[k]);
            pairs_text << "\n";
        }
        write_text((fs::path(out_dir) / "pairs.txt").string(), pairs_text.str());
    }
    write_resolved((fs::path(out_dir) / "gen-data").string(),
                   {{"shape", shape_name_arg},
                    {"count", std::to_string(count)},
                    {"points", std::to_string(points)},
                    {"jitter", fmt_double(jitter)},
                    {"seed", std::to_string(seed)},
                    {"pairs", std::to_string(with_pairs ? pairs_count : 0)},
                    {"profile", profile},
                    {"pair_noise", fmt_double(pair_noise)}});
    std::cout << stdout_csv.str();
    return kOk;
}

int cmd_train(const std::string& config_path) {
    const RunConfig cfg = RunConfig::from_file(config_path);
    if (cfg.dataset_dir.empty()) {
        throw std::invalid_argument("config: dataset_dir is required for train");
    }
    const std::vector<PointCloud> dataset = load_corpus(cfg.dataset_dir);
    fs::create_directories(cfg.output_dir);
    cfg.write_sidecar((fs::path(cfg.output_dir) / "resolved_config.txt").string());
    const std::string ckpt = (fs::path(cfg.output_dir) / "checkpoint.usip").string();
    const std::string curve = (fs::path(cfg.output_dir) / "loss_curve.csv").string();
    const TrainResult result = train(dataset, cfg.train, ckpt, curve);

    std::cout << "step,total,chamfer,point\n";
    for (std::size_t i = 0; i < result.curve.size(); ++i) {
        const LossBreakdown& bd = result.curve[i];
        std::cout << i << "," << fmt_double(bd.total) << "," << fmt_double(bd.chamfer_term)
                  << "," << fmt_double(bd.point_term) << "\n";
    }
    return kOk;
}

int cmd_detect(const std::string& ckpt_path, const std::string& in_path,
               const std::string& out_path, int n, double nms_radius,
               double sigma_max, std::uint64_t seed) {
    ad::ParamStore store = ad::ParamStore::load(ckpt_path);
    const FPNConfig cfg = load_fpn_config(store);
    const PointCloud cloud = read_cloud(in_path);

    KeypointSet kps = propose(cloud, store, cfg, seed);
    kps = nms_filter(kps, nms_radius, sigma_max);
    if (n > 0 && static_cast<std::size_t>(n) < kps.size()) kps = select_top(kps, n);

    std::ostringstream csv;
    csv << "x,y,z,sigma\n";
    for (std::size_t i = 0; i < kps.size(); ++i) {
        csv << fmt_double(kps.positions[i].x()) << "," << fmt_double(kps.positions[i].y())
            << "," << fmt_double(kps.positions[i].z()) << "," << fmt_double(kps.sigmas[i])
            << "\n";
    }
    if (out_path.size() > 4 && out_path.substr(out_path.size() - 4) == ".ply") {
        write_keypoints_ply(out_path, cloud, kps.positions, kps.sigmas);
    } else {
        write_text(out_path, csv.str());
    }
    write_resolved(out_path, {{"checkpoint", ckpt_path},
                              {"in", in_path},
                              {"n", std::to_string(n)},
                              {"nms_radius", fmt_double(nms_radius)},
                              {"sigma_max", fmt_double(sigma_max)},
                              {"seed", std::to_string(seed)}});
    std::cout << csv.str();
    return kOk;
}

int cmd_eval_rep(const std::string& ckpt_path, const std::string& pairs_path,
                 double epsilon, const std::string& counts_arg,
                 const std::string& out_path, std::uint64_t seed) {
    ad::ParamStore store = ad::ParamStore::load(ckpt_path);
    const FPNConfig cfg = load_fpn_config(store);
    const std::vector<EvalPair> pairs = load_eval_pairs(pairs_path);

    std::vector<int> counts;
    {
        std::istringstream ss(counts_arg);
        std::string item;
        while (std::getline(ss, item, ',')) counts.push_back(std::stoi(item));
    }
    counts.erase(std::remove_if(counts.begin(), counts.end(),
                                [&](int c) { return c > cfg.proposal_count; }),
                 counts.end());
    if (counts.empty()) throw std::invalid_argument("eval-rep: no counts <= M");

    const RepeatabilityReport report =
        repeatability_report(fpn_detector(store, cfg), pairs, counts, epsilon, seed);
    const std::string csv = repeatability_csv(report);
    if (!out_path.empty()) {
        write_text(out_path, csv);
        write_resolved(out_path, {{"checkpoint", ckpt_path},
                                  {"pairs", pairs_path},
                                  {"epsilon", fmt_double(epsilon)},
                                  {"counts", counts_arg},
                                  {"seed", std::to_string(seed)}});
    }
    std::cout << csv;
    return kOk;
}

int cmd_eval_reg(const std::string& ckpt_path, const std::string& pairs_path,
                 int iters, double inlier_thresh, int n_keypoints,
                 const std::string& desc_ckpt, const std::string& out_path,
                 std::uint64_t seed) {
    ad::ParamStore store = ad::ParamStore::load(ckpt_path);
    const FPNConfig cfg = load_fpn_config(store);
    const std::vector<EvalPair> pairs = load_eval_pairs(pairs_path);

    DescriptorConfig desc_cfg;
    ad::ParamStore desc_store(derive_seed(seed, seed_stage::kParamInit));
    if (!desc_ckpt.empty()) desc_store = ad::ParamStore::load(desc_ckpt);
    init_descriptor_params(desc_store, desc_cfg);

    double diameter = pairs.front().a.diameter();
    const RegistrationReport report = registration_report(
        fpn_detector(store, cfg), desc_store, desc_cfg, pairs, n_keypoints,
        0.1 * diameter, iters, inlier_thresh, seed);
    const std::string csv = registration_csv(report);
    if (!out_path.empty()) {
        write_text(out_path, csv);
        write_resolved(out_path, {{"checkpoint", ckpt_path},
                                  {"pairs", pairs_path},
                                  {"iters", std::to_string(iters)},
                                  {"inlier_thresh", fmt_double(inlier_thresh)},
                                  {"n", std::to_string(n_keypoints)},
                                  {"desc_checkpoint", desc_ckpt},
                                  {"seed", std::to_string(seed)}});
    }
    std::cout << csv;
    return kOk;
}

int cmd_degeneracy(const std::string& ckpt_path, const std::string& in_path,
                   bool sweep, const std::string& config_path,
                   const std::string& m_values_arg, const std::string& k_values_arg,
                   int corpus_size, int corpus_points, const std::string& out_path,
                   std::uint64_t seed) {
    const auto parse_list = [](const std::string& arg) {
        std::vector<int> out;
        std::istringstream ss(arg);
        std::string item;
        while (std::getline(ss, item, ',')) out.push_back(std::stoi(item));
        return out;
    };

    std::string csv;
    if (sweep) {
        TrainConfig base;
        std::vector<PointCloud> corpus;
        if (!config_path.empty()) {
            const RunConfig run = RunConfig::from_file(config_path);
            base = run.train;
            if (!run.dataset_dir.empty()) corpus = load_corpus(run.dataset_dir);
        }
        base.seed = seed;
        if (corpus.empty()) {
            corpus = synthetic_corpus(corpus_size, corpus_points, 0.003, seed);
        }
        SweepOptions options;
        options.seed = seed;
        const std::vector<SweepCell> cells =
            mk_sweep(default_trainer, base, parse_list(m_values_arg),
                     parse_list(k_values_arg), corpus, options);
        csv = sweep_csv(cells);
    } else {
        ad::ParamStore store = ad::ParamStore::load(ckpt_path);
        const FPNConfig cfg = load_fpn_config(store);
        std::vector<std::string> files;
        if (fs::is_directory(in_path)) files = list_clouds(in_path);
        else files.push_back(in_path);

        std::ostringstream out;
        out << "cloud,verdict,centroid_spread,axis_residual,equivariance_residual\n";
        for (const std::string& file : files) {
            const PointCloud cloud = read_cloud(file);
            const auto detect = [&](const PointCloud& c) {
                return propose(c, store, cfg, derive_seed(seed, seed_stage::kEval));
            };
            std::string verdict;
            double spread = 0.0, axis = 0.0, equiv = 0.0;
            try {
                const DegeneracyVerdict v = classify(detect(cloud), cloud);
                verdict = degeneracy_class_name(v.cls);
                spread = v.centroid_spread;
                axis = v.axis_residual;
                equiv = equivariance_residual(Detector(detect), cloud, 8,
                                              derive_seed(seed, seed_stage::kEval));
            } catch (const IndeterminateError&) {
                verdict = "indeterminate";
            }
            char line[256];
            std::snprintf(line, sizeof(line), "%s,%s,%.9g,%.9g,%.9g\n",
                          fs::path(file).filename().string().c_str(), verdict.c_str(),
                          spread, axis, equiv);
            out << line;
        }
        csv = out.str();
    }
    if (!out_path.empty()) {
        write_text(out_path, csv);
        write_resolved(out_path, {{"checkpoint", ckpt_path},
                                  {"in", in_path},
                                  {"sweep", sweep ? "1" : "0"},
                                  {"config", config_path},
                                  {"m_values", m_values_arg},
                                  {"k_values", k_values_arg},
                                  {"corpus_size", std::to_string(corpus_size)},
                                  {"corpus_points", std::to_string(corpus_points)},
                                  {"seed", std::to_string(seed)}});
    }
    std::cout << csv;
    return kOk;
}

int cmd_grad_check(const std::string& scope, std::uint64_t seed, int instances) {
    const std::vector<GradCheckCase> cases = run_grad_checks(scope, seed, instances);
    std::cout << "check,max_rel_error,kinks_excluded\n";
    bool ok = true;
    for (const GradCheckCase& c : cases) {
        std::cout << c.name << "," << fmt_double(c.report.max_rel_error) << ","
                  << c.report.kink_coords.size() << "\n";
        const double limit = c.name == "fpn_objective" ? 1e-4 : 1e-6;
        if (!(c.report.max_rel_error < limit)) ok = false;
    }
    if (!ok) throw TrainingDivergedError("gradient check exceeded tolerance");
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"USIP: unsupervised stable interest point detection for 3D point clouds"};
    app.require_subcommand(1);

    // gen-data
    std::string gd_shape = "box", gd_out = ".", gd_profile = "model";
    int gd_count = 1, gd_points = 1024, gd_pairs = 0;
    double gd_jitter = 0.003, gd_pair_noise = 0.0;
    std::uint64_t gd_seed = 0;
    auto* gen = app.add_subcommand("gen-data", "generate synthetic clouds + label sidecars");
    gen->add_option("--shape", gd_shape, "box | l_bracket | pyramid | plane_with_bumps");
    gen->add_option("--count", gd_count)->check(CLI::PositiveNumber);
    gen->add_option("--points", gd_points);
    gen->add_option("--jitter", gd_jitter);
    gen->add_option("--seed", gd_seed);
    gen->add_option("--out", gd_out);
    gen->add_option("--pairs", gd_pairs, "also emit a pairs.txt with this many eval pairs");
    gen->add_option("--profile", gd_profile);
    gen->add_option("--pair-noise", gd_pair_noise);

    // train
    std::string tr_config;
    auto* tr = app.add_subcommand("train", "train the detector from a key=value config");
    tr->add_option("--config", tr_config)->required();

    // detect
    std::string dt_ckpt, dt_in, dt_out;
    int dt_n = 0;
    double dt_nms = 0.0, dt_sigma_max = std::numeric_limits<double>::infinity();
    std::uint64_t dt_seed = 0;
    auto* dt = app.add_subcommand("detect", "detect keypoints on a cloud");
    dt->add_option("--checkpoint", dt_ckpt)->required();
    dt->add_option("--in", dt_in)->required();
    dt->add_option("--out", dt_out)->required();
    dt->add_option("--n", dt_n, "keep the n lowest-sigma keypoints (0 = all)");
    dt->add_option("--nms-radius", dt_nms);
    dt->add_option("--sigma-max", dt_sigma_max);
    dt->add_option("--seed", dt_seed);

    // eval-rep
    std::string er_ckpt, er_pairs, er_counts = "4,8,16,32,64,128,256,512", er_out;
    double er_eps = 0.03;
    std::uint64_t er_seed = 0;
    auto* er = app.add_subcommand("eval-rep", "relative repeatability over pairs");
    er->add_option("--checkpoint", er_ckpt)->required();
    er->add_option("--pairs", er_pairs)->required();
    er->add_option("--epsilon", er_eps)->required();
    er->add_option("--counts", er_counts);
    er->add_option("--out", er_out);
    er->add_option("--seed", er_seed);

    // eval-reg
    std::string eg_ckpt, eg_pairs, eg_desc, eg_out;
    int eg_iters = 1000, eg_n = 64;
    double eg_thresh = 0.05;
    std::uint64_t eg_seed = 0;
    auto* eg = app.add_subcommand("eval-reg", "RANSAC registration over pairs");
    eg->add_option("--checkpoint", eg_ckpt)->required();
    eg->add_option("--pairs", eg_pairs)->required();
    eg->add_option("--iters", eg_iters);
    eg->add_option("--inlier-thresh", eg_thresh);
    eg->add_option("--n", eg_n);
    eg->add_option("--desc-checkpoint", eg_desc);
    eg->add_option("--out", eg_out);
    eg->add_option("--seed", eg_seed);

    // degeneracy
    std::string dg_ckpt, dg_in, dg_config, dg_m = "64", dg_k = "9,24,64", dg_out;
    bool dg_sweep = false;
    int dg_corpus = 12, dg_points = 512;
    std::uint64_t dg_seed = 0;
    auto* dg = app.add_subcommand("degeneracy", "classify trivial solutions / M-K sweep");
    dg->add_option("--checkpoint", dg_ckpt);
    dg->add_option("--in", dg_in, "cloud file or directory to classify");
    dg->add_flag("--sweep", dg_sweep);
    dg->add_option("--config", dg_config);
    dg->add_option("--m-values", dg_m);
    dg->add_option("--k-values", dg_k);
    dg->add_option("--corpus-size", dg_corpus);
    dg->add_option("--corpus-points", dg_points);
    dg->add_option("--out", dg_out);
    dg->add_option("--seed", dg_seed);

    // grad-check
    std::string gc_scope = "all";
    std::uint64_t gc_seed = 0;
    int gc_instances = 3;
    auto* gc = app.add_subcommand("grad-check", "finite-difference gradient audit");
    gc->add_option("--scope", gc_scope, "losses | fpn | all");
    gc->add_option("--seed", gc_seed);
    gc->add_option("--instances", gc_instances);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help
        app.exit(e);
        std::cerr << "error code=2 kind=usage msg=\"" << e.what() << "\"\n";
        return kUsage;
    }

    try {
        if (gen->parsed()) {
            return cmd_gen_data(gd_shape, gd_count, gd_points, gd_jitter, gd_seed, gd_out,
                                gd_pairs > 0, gd_pairs, gd_profile, gd_pair_noise);
        }
        if (tr->parsed()) return cmd_train(tr_config);
        if (dt->parsed()) {
            return cmd_detect(dt_ckpt, dt_in, dt_out, dt_n, dt_nms, dt_sigma_max, dt_seed);
        }
        if (er->parsed()) {
            return cmd_eval_rep(er_ckpt, er_pairs, er_eps, er_counts, er_out, er_seed);
        }
        if (eg->parsed()) {
            return cmd_eval_reg(eg_ckpt, eg_pairs, eg_iters, eg_thresh, eg_n, eg_desc,
                                eg_out, eg_seed);
        }
        if (dg->parsed()) {
            if (!dg_sweep && (dg_ckpt.empty() || dg_in.empty())) {
                std::cerr << "error code=2 kind=usage msg=\"degeneracy needs --checkpoint "
                             "and --in, or --sweep\"\n";
                return kUsage;
            }
            return cmd_degeneracy(dg_ckpt, dg_in, dg_sweep, dg_config, dg_m, dg_k,
                                  dg_corpus, dg_points, dg_out, dg_seed);
        }
        if (gc->parsed()) return cmd_grad_check(gc_scope, gc_seed, gc_instances);
    } catch (const TrainingDivergedError& e) {
        std::cerr << "error code=5 kind=diverged msg=\"" << e.what() << "\"\n";
        return kDiverged;
    } catch (const IoError& e) {
        std::cerr << "error code=3 kind=io msg=\"" << e.what() << "\"\n";
        return kIo;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "error code=3 kind=io msg=\"" << e.what() << "\"\n";
        return kIo;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error code=4 kind=invalid-argument msg=\"" << e.what() << "\"\n";
        return kInvalidArgument;
    } catch (const DegenerateGeometryError& e) {
        std::cerr << "error code=4 kind=invalid-argument msg=\"" << e.what() << "\"\n";
        return kInvalidArgument;
    } catch (const IndeterminateError& e) {
        std::cerr << "error code=4 kind=invalid-argument msg=\"" << e.what() << "\"\n";
        return kInvalidArgument;
    } catch (const std::exception& e) {
        std::cerr << "error code=4 kind=invalid-argument msg=\"" << e.what() << "\"\n";
        return kInvalidArgument;
    }
    return kUsage;
}
