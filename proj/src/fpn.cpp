#include "usip/fpn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace usip {

namespace {

// Dense stack with ReLU after every layer except (optionally) the last.
ad::Value mlp(ad::Tape& tape, ad::ParamStore& params, const std::string& prefix,
              const std::vector<int>& widths, ad::Value in, bool relu_last) {
    ad::Value x = in;
    int fan_in = static_cast<int>(in.rows());
    for (std::size_t layer = 0; layer < widths.size(); ++layer) {
        const int fan_out = widths[layer];
        const std::string tag = prefix + "." + std::to_string(layer);
        ad::Parameter& w = params.get_or_create(tag + ".w", fan_out, fan_in,
                                                std::sqrt(2.0 / fan_in));
        ad::Parameter& b = params.get_or_create(tag + ".b", fan_out, 1, 0.0);
        x = tape.dense(tape.leaf(w), tape.leaf(b), x);
        if (relu_last || layer + 1 < widths.size()) x = tape.relu(x);
        fan_in = fan_out;
    }
    return x;
}

void touch_mlp_params(ad::ParamStore& params, const std::string& prefix,
                      int fan_in, const std::vector<int>& widths) {
    for (std::size_t layer = 0; layer < widths.size(); ++layer) {
        const std::string tag = prefix + "." + std::to_string(layer);
        params.get_or_create(tag + ".w", widths[layer], fan_in, std::sqrt(2.0 / fan_in));
        params.get_or_create(tag + ".b", widths[layer], 1, 0.0);
        fan_in = widths[layer];
    }
}

Eigen::MatrixXd int_row(const std::vector<int>& v) {
    Eigen::MatrixXd m(1, static_cast<Eigen::Index>(v.size()));
    for (std::size_t i = 0; i < v.size(); ++i) m(0, static_cast<Eigen::Index>(i)) = v[i];
    return m;
}

std::vector<int> row_ints(const Eigen::MatrixXd& m) {
    std::vector<int> v(static_cast<std::size_t>(m.size()));
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        v[static_cast<std::size_t>(i)] = static_cast<int>(std::llround(m(0, i)));
    }
    return v;
}

}  // namespace

void FPNConfig::validate() const {
    if (proposal_count < 4) throw std::invalid_argument("FPNConfig: M must be >= 4");
    if (node_knn < 1 || node_knn > proposal_count) {
        throw std::invalid_argument("FPNConfig: need 1 <= K <= M");
    }
    if (cluster_point_cap < 1) throw std::invalid_argument("FPNConfig: cluster cap must be >= 1");
    if (sigma_floor <= 0.0) throw std::invalid_argument("FPNConfig: sigma_floor must be > 0");
    for (const std::vector<int>* ws : {&widths1, &widths2, &widths_head}) {
        if (ws->empty()) throw std::invalid_argument("FPNConfig: empty width list");
        for (int w : *ws) {
            if (w < 1) throw std::invalid_argument("FPNConfig: widths must be >= 1");
        }
    }
    if (widths_head.back() != 4) {
        throw std::invalid_argument("FPNConfig: head must end in 4 outputs (offset + raw sigma)");
    }
}

KeypointSet ProposalTape::to_keypoints() const {
    KeypointSet kps;
    kps.positions.reserve(positions.size());
    kps.sigmas.reserve(sigmas.size());
    for (const ad::Value& p : positions) {
        kps.positions.emplace_back(p.data()(0, 0), p.data()(1, 0), p.data()(2, 0));
    }
    for (const ad::Value& s : sigmas) kps.sigmas.push_back(s.scalar());
    return kps;
}

void init_fpn_params(ad::ParamStore& params, const FPNConfig& cfg) {
    cfg.validate();
    touch_mlp_params(params, "fpn.local", 3, cfg.widths1);
    touch_mlp_params(params, "fpn.agg", cfg.widths1.back() + 3, cfg.widths2);
    touch_mlp_params(params, "fpn.head", cfg.widths2.back(), cfg.widths_head);
}

ProposalTape propose_t(ad::Tape& tape, const PointCloud& cloud,
                       ad::ParamStore& params, const FPNConfig& cfg,
                       std::uint64_t seed) {
    cfg.validate();
    const int n = static_cast<int>(cloud.size());
    const int m = cfg.proposal_count;
    if (n < m) throw std::invalid_argument("propose: cloud smaller than proposal count");

    // (1) FPS nodes. (2) point-to-node clusters, node-relative coordinates.
    const FpsResult fps = fps_sample(cloud, m, seed);
    const NodeGrouping grouping = point_to_node_group(cloud, fps.positions);

    Rng subsample_rng(derive_seed(seed, seed_stage::kSubsample));

    // (3) shared per-point network + max-pool -> per-node local feature.
    const int g_dim = cfg.widths1.back();
    std::vector<ad::Value> local_features;
    local_features.reserve(static_cast<std::size_t>(m));
    ProposalTape out;
    out.nodes = fps.positions;
    out.empty_cluster.assign(static_cast<std::size_t>(m), 0);
    for (int node = 0; node < m; ++node) {
        const std::vector<int>& group = grouping.groups[static_cast<std::size_t>(node)];
        if (group.empty()) {
            out.empty_cluster[static_cast<std::size_t>(node)] = 1;
            local_features.push_back(tape.constant(Eigen::MatrixXd(Eigen::MatrixXd::Zero(g_dim, 1))));
            continue;
        }
        std::vector<int> members = group;
        if (static_cast<int>(members.size()) > cfg.cluster_point_cap) {
            const std::vector<int> keep = subsample_rng.sample_without_replacement(
                static_cast<int>(members.size()), cfg.cluster_point_cap);
            std::vector<int> capped;
            capped.reserve(keep.size());
            for (int k : keep) capped.push_back(members[static_cast<std::size_t>(k)]);
            std::sort(capped.begin(), capped.end());
            members = std::move(capped);
        }
        std::vector<ad::Value> point_feats;
        point_feats.reserve(members.size());
        for (int pi : members) {
            const Vec3 rel = grouping.normalized_offsets[static_cast<std::size_t>(pi)];
            point_feats.push_back(
                mlp(tape, params, "fpn.local", cfg.widths1, tape.constant(rel), true));
        }
        local_features.push_back(tape.maxpool(point_feats));
    }

    // (4) kNN over nodes; neighbor features paired with node-relative
    // positions, shared network + max-pool -> aggregated feature.
    const std::vector<std::vector<int>> node_nbrs = [&] {
        PointCloud node_cloud;
        node_cloud.points = fps.positions;
        return knn_search(fps.positions, node_cloud, cfg.node_knn);
    }();

    out.positions.reserve(static_cast<std::size_t>(m));
    out.sigmas.reserve(static_cast<std::size_t>(m));
    for (int node = 0; node < m; ++node) {
        std::vector<ad::Value> nbr_feats;
        nbr_feats.reserve(static_cast<std::size_t>(cfg.node_knn));
        for (int nbr : node_nbrs[static_cast<std::size_t>(node)]) {
            const Vec3 rel = fps.positions[static_cast<std::size_t>(nbr)] -
                             fps.positions[static_cast<std::size_t>(node)];
            ad::Value joint = tape.concat_rows(
                local_features[static_cast<std::size_t>(nbr)], tape.constant(rel));
            nbr_feats.push_back(mlp(tape, params, "fpn.agg", cfg.widths2, joint, true));
        }
        const ad::Value aggregated = tape.maxpool(nbr_feats);

        // (5) head -> (offset, raw sigma); un-normalize by the node.
        const ad::Value head = mlp(tape, params, "fpn.head", cfg.widths_head, aggregated, false);
        const ad::Value offset = tape.slice_rows(head, 0, 3);
        const ad::Value raw_sigma = tape.slice_rows(head, 3, 1);
        out.positions.push_back(
            tape.offset(offset, Eigen::MatrixXd(fps.positions[static_cast<std::size_t>(node)])));
        out.sigmas.push_back(tape.add_scalar(tape.softplus(raw_sigma), cfg.sigma_floor));
    }
    return out;
}

KeypointSet propose(const PointCloud& cloud, ad::ParamStore& params,
                    const FPNConfig& cfg, std::uint64_t seed) {
    ad::Tape tape;
    return propose_t(tape, cloud, params, cfg, seed).to_keypoints();
}

KeypointSet nms_filter(const KeypointSet& kps, double radius,
                       double sigma_threshold) {
    if (radius < 0.0) throw std::invalid_argument("nms_filter: radius must be >= 0");
    std::vector<int> order;
    for (std::size_t i = 0; i < kps.size(); ++i) {
        if (kps.sigmas[i] <= sigma_threshold) order.push_back(static_cast<int>(i));
    }
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return kps.sigmas[static_cast<std::size_t>(a)] <
               kps.sigmas[static_cast<std::size_t>(b)];
    });
    KeypointSet out;
    for (int idx : order) {
        const Vec3& p = kps.positions[static_cast<std::size_t>(idx)];
        bool suppressed = false;
        for (const Vec3& kept : out.positions) {
            if ((p - kept).norm() < radius) {
                suppressed = true;
                break;
            }
        }
        if (!suppressed) {
            out.positions.push_back(p);
            out.sigmas.push_back(kps.sigmas[static_cast<std::size_t>(idx)]);
        }
    }
    return out;
}

KeypointSet select_top(const KeypointSet& kps, int n) {
    if (n < 0 || static_cast<std::size_t>(n) > kps.size()) {
        throw std::invalid_argument("select_top: n exceeds keypoint count");
    }
    std::vector<int> order(kps.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return kps.sigmas[static_cast<std::size_t>(a)] <
               kps.sigmas[static_cast<std::size_t>(b)];
    });
    KeypointSet out;
    out.positions.reserve(static_cast<std::size_t>(n));
    out.sigmas.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const std::size_t idx = static_cast<std::size_t>(order[static_cast<std::size_t>(i)]);
        out.positions.push_back(kps.positions[idx]);
        out.sigmas.push_back(kps.sigmas[idx]);
    }
    return out;
}

void store_fpn_config(ad::ParamStore& params, const FPNConfig& cfg) {
    params.attributes["fpn.M"] = int_row({cfg.proposal_count});
    params.attributes["fpn.cluster_cap"] = int_row({cfg.cluster_point_cap});
    params.attributes["fpn.K"] = int_row({cfg.node_knn});
    params.attributes["fpn.widths1"] = int_row(cfg.widths1);
    params.attributes["fpn.widths2"] = int_row(cfg.widths2);
    params.attributes["fpn.widths_head"] = int_row(cfg.widths_head);
    Eigen::MatrixXd floor(1, 1);
    floor(0, 0) = cfg.sigma_floor;
    params.attributes["fpn.sigma_floor"] = floor;
}

FPNConfig load_fpn_config(const ad::ParamStore& params) {
    FPNConfig cfg;
    const auto& attrs = params.attributes;
    const auto need = [&](const std::string& key) -> const Eigen::MatrixXd& {
        const auto it = attrs.find(key);
        if (it == attrs.end()) throw IoError("checkpoint lacks attribute " + key);
        return it->second;
    };
    cfg.proposal_count = row_ints(need("fpn.M"))[0];
    cfg.cluster_point_cap = row_ints(need("fpn.cluster_cap"))[0];
    cfg.node_knn = row_ints(need("fpn.K"))[0];
    cfg.widths1 = row_ints(need("fpn.widths1"));
    cfg.widths2 = row_ints(need("fpn.widths2"));
    cfg.widths_head = row_ints(need("fpn.widths_head"));
    cfg.sigma_floor = need("fpn.sigma_floor")(0, 0);
    cfg.validate();
    return cfg;
}

}  // namespace usip
