#include "usip/grad_harness.hpp"

#include <cmath>

#include "usip/eval.hpp"
#include "usip/geometry.hpp"
#include "usip/losses.hpp"
#include "usip/training.hpp"

namespace usip {

namespace {

constexpr double kLossProbeStep = 1e-5;

std::vector<Vec3> random_points(Rng& rng, int n, double scale = 1.0) {
    std::vector<Vec3> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        out.emplace_back(scale * rng.uniform(-1.0, 1.0), scale * rng.uniform(-1.0, 1.0),
                         scale * rng.uniform(-1.0, 1.0));
    }
    return out;
}

Eigen::VectorXd pack_points(const std::vector<Vec3>& pts) {
    Eigen::VectorXd x(3 * static_cast<Eigen::Index>(pts.size()));
    for (std::size_t i = 0; i < pts.size(); ++i) {
        x.segment<3>(3 * static_cast<Eigen::Index>(i)) = pts[i];
    }
    return x;
}

std::vector<Vec3> unpack_points(const Eigen::VectorXd& x, std::size_t n) {
    std::vector<Vec3> pts(n);
    for (std::size_t i = 0; i < n; ++i) {
        pts[i] = x.segment<3>(3 * static_cast<Eigen::Index>(i));
    }
    return pts;
}

std::vector<ad::Value> point_values(ad::Tape& tape, const std::vector<Vec3>& pts) {
    std::vector<ad::Value> vs;
    vs.reserve(pts.size());
    for (const Vec3& p : pts) vs.push_back(tape.constant(p));
    return vs;
}

Eigen::VectorXd collect_grads(const std::vector<ad::Value>& vs) {
    Eigen::VectorXd g(3 * static_cast<Eigen::Index>(vs.size()));
    for (std::size_t i = 0; i < vs.size(); ++i) {
        g.segment<3>(3 * static_cast<Eigen::Index>(i)) = vs[i].grad().col(0);
    }
    return g;
}

}  // namespace

ad::GradCheckReport check_chamfer_grad(std::uint64_t seed) {
    Rng rng(seed);
    const std::vector<Vec3> a0 = random_points(rng, 5);
    const std::vector<Vec3> b0 = random_points(rng, 7);
    const std::size_t na = a0.size();

    const auto eval = [na, nb = b0.size()](const Eigen::VectorXd& x, bool grad,
                                           Eigen::VectorXd* g) {
        ad::Tape tape;
        const std::vector<Vec3> a = unpack_points(x.head(3 * static_cast<Eigen::Index>(na)), na);
        const std::vector<Vec3> b = unpack_points(x.tail(3 * static_cast<Eigen::Index>(nb)), nb);
        const std::vector<ad::Value> va = point_values(tape, a);
        const std::vector<ad::Value> vb = point_values(tape, b);
        const ad::Value loss = chamfer_loss_t(tape, va, vb);
        if (grad) {
            tape.backward(loss);
            g->resize(x.size());
            g->head(3 * static_cast<Eigen::Index>(na)) = collect_grads(va);
            g->tail(3 * static_cast<Eigen::Index>(nb)) = collect_grads(vb);
        }
        return loss.scalar();
    };

    Eigen::VectorXd x0(3 * static_cast<Eigen::Index>(a0.size() + b0.size()));
    x0 << pack_points(a0), pack_points(b0);
    ad::DiffFunction fn;
    fn.value = [eval](const Eigen::VectorXd& x) { return eval(x, false, nullptr); };
    fn.gradient = [eval](const Eigen::VectorXd& x) {
        Eigen::VectorXd g;
        eval(x, true, &g);
        return g;
    };
    return ad::grad_check(fn, x0, kLossProbeStep);
}

ad::GradCheckReport check_prob_chamfer_grad(std::uint64_t seed) {
    Rng rng(seed);
    const std::vector<Vec3> a0 = random_points(rng, 5);
    const std::vector<Vec3> b0 = random_points(rng, 6);
    std::vector<double> sa0(a0.size()), sb0(b0.size());
    for (double& s : sa0) s = rng.uniform(0.2, 2.0);
    for (double& s : sb0) s = rng.uniform(0.2, 2.0);
    const std::size_t na = a0.size(), nb = b0.size();

    const auto eval = [na, nb](const Eigen::VectorXd& x, bool grad, Eigen::VectorXd* g) {
        ad::Tape tape;
        const Eigen::Index pa = 3 * static_cast<Eigen::Index>(na);
        const Eigen::Index pb = 3 * static_cast<Eigen::Index>(nb);
        const std::vector<Vec3> a = unpack_points(x.segment(0, pa), na);
        const std::vector<Vec3> b = unpack_points(x.segment(pa, pb), nb);
        std::vector<ad::Value> va = point_values(tape, a);
        std::vector<ad::Value> vb = point_values(tape, b);
        std::vector<ad::Value> vsa, vsb;
        for (std::size_t i = 0; i < na; ++i) {
            vsa.push_back(tape.constant_scalar(x[pa + pb + static_cast<Eigen::Index>(i)]));
        }
        for (std::size_t j = 0; j < nb; ++j) {
            vsb.push_back(tape.constant_scalar(
                x[pa + pb + static_cast<Eigen::Index>(na + j)]));
        }
        const ad::Value loss = prob_chamfer_loss_t(tape, va, vsa, vb, vsb);
        if (grad) {
            tape.backward(loss);
            g->resize(x.size());
            g->segment(0, pa) = collect_grads(va);
            g->segment(pa, pb) = collect_grads(vb);
            for (std::size_t i = 0; i < na; ++i) {
                (*g)[pa + pb + static_cast<Eigen::Index>(i)] = vsa[i].grad()(0, 0);
            }
            for (std::size_t j = 0; j < nb; ++j) {
                (*g)[pa + pb + static_cast<Eigen::Index>(na + j)] = vsb[j].grad()(0, 0);
            }
        }
        return loss.scalar();
    };

    Eigen::VectorXd x0(3 * static_cast<Eigen::Index>(na + nb) +
                       static_cast<Eigen::Index>(na + nb));
    x0.segment(0, 3 * static_cast<Eigen::Index>(na)) = pack_points(a0);
    x0.segment(3 * static_cast<Eigen::Index>(na), 3 * static_cast<Eigen::Index>(nb)) =
        pack_points(b0);
    for (std::size_t i = 0; i < na; ++i) {
        x0[3 * static_cast<Eigen::Index>(na + nb) + static_cast<Eigen::Index>(i)] = sa0[i];
    }
    for (std::size_t j = 0; j < nb; ++j) {
        x0[3 * static_cast<Eigen::Index>(na + nb) + static_cast<Eigen::Index>(na + j)] =
            sb0[j];
    }
    ad::DiffFunction fn;
    fn.value = [eval](const Eigen::VectorXd& x) { return eval(x, false, nullptr); };
    fn.gradient = [eval](const Eigen::VectorXd& x) {
        Eigen::VectorXd g;
        eval(x, true, &g);
        return g;
    };
    return ad::grad_check(fn, x0, kLossProbeStep);
}

namespace {

ad::GradCheckReport check_point_term(std::uint64_t seed, bool plane) {
    Rng rng(seed);
    PointCloud x_cloud, xt_cloud;
    x_cloud.points = random_points(rng, 30);
    xt_cloud.points = random_points(rng, 30);
    if (plane) {
        x_cloud = estimate_normals(x_cloud, 6).cloud;
        xt_cloud = estimate_normals(xt_cloud, 6).cloud;
    }
    const std::vector<Vec3> q0 = random_points(rng, 4, 0.8);
    const std::vector<Vec3> qt0 = random_points(rng, 4, 0.8);
    const std::size_t nq = q0.size();

    const auto eval = [&x_cloud, &xt_cloud, nq, plane](const Eigen::VectorXd& x,
                                                       bool grad, Eigen::VectorXd* g) {
        ad::Tape tape;
        const Eigen::Index half = 3 * static_cast<Eigen::Index>(nq);
        const std::vector<Vec3> q = unpack_points(x.head(half), nq);
        const std::vector<Vec3> qt = unpack_points(x.tail(half), nq);
        std::vector<ad::Value> vq = point_values(tape, q);
        std::vector<ad::Value> vqt = point_values(tape, qt);
        const ad::Value loss = plane
                                   ? point_to_plane_loss_t(tape, vq, x_cloud, vqt, xt_cloud)
                                   : point_to_point_loss_t(tape, vq, x_cloud, vqt, xt_cloud);
        if (grad) {
            tape.backward(loss);
            g->resize(x.size());
            g->head(half) = collect_grads(vq);
            g->tail(half) = collect_grads(vqt);
        }
        return loss.scalar();
    };

    Eigen::VectorXd x0(6 * static_cast<Eigen::Index>(nq));
    x0 << pack_points(q0), pack_points(qt0);
    ad::DiffFunction fn;
    fn.value = [eval](const Eigen::VectorXd& x) { return eval(x, false, nullptr); };
    fn.gradient = [eval](const Eigen::VectorXd& x) {
        Eigen::VectorXd g;
        eval(x, true, &g);
        return g;
    };
    return ad::grad_check(fn, x0, kLossProbeStep);
}

// Shared scaffolding for the two triplet checks: descriptor entries are the
// free variables.
struct TripletSetup {
    std::vector<Eigen::VectorXd> anchors, pos, neg;
    std::vector<double> sigmas;
    int dim = 6;
};

TripletSetup make_triplet_setup(Rng& rng, int n_anchor, int n_pos, int n_neg) {
    TripletSetup s;
    const auto rand_vec = [&rng, &s]() {
        Eigen::VectorXd v(s.dim);
        for (int i = 0; i < s.dim; ++i) v[i] = rng.uniform(-1.0, 1.0);
        return v;
    };
    for (int i = 0; i < n_anchor; ++i) {
        s.anchors.push_back(rand_vec());
        s.sigmas.push_back(rng.uniform(0.1, 0.9));
    }
    for (int i = 0; i < n_pos; ++i) s.pos.push_back(rand_vec());
    for (int i = 0; i < n_neg; ++i) s.neg.push_back(rand_vec());
    return s;
}

}  // namespace

ad::GradCheckReport check_point_to_point_grad(std::uint64_t seed) {
    return check_point_term(seed, false);
}

ad::GradCheckReport check_point_to_plane_grad(std::uint64_t seed) {
    return check_point_term(seed, true);
}

ad::GradCheckReport check_triplet_weak_grad(std::uint64_t seed) {
    Rng rng(seed);
    const TripletSetup s = make_triplet_setup(rng, 4, 3, 3);
    const int dim = s.dim;
    const std::size_t na = s.anchors.size(), np = s.pos.size(), nn = s.neg.size();

    const auto eval = [&s, dim, na, np, nn](const Eigen::VectorXd& x, bool grad,
                                            Eigen::VectorXd* g) {
        ad::Tape tape;
        std::vector<ad::Value> fa, fp, fn_;
        Eigen::Index k = 0;
        const auto take = [&](std::size_t count, std::vector<ad::Value>* out) {
            for (std::size_t i = 0; i < count; ++i) {
                out->push_back(tape.constant(Eigen::MatrixXd(x.segment(k, dim))));
                k += dim;
            }
        };
        take(na, &fa);
        take(np, &fp);
        take(nn, &fn_);
        const WeakTripletResult res =
            triplet_loss_weak(tape, fa, s.sigmas, fp, fn_, 0.4, 1.0);
        if (grad) {
            tape.backward(res.loss);
            g->resize(x.size());
            Eigen::Index j = 0;
            for (const auto* group : {&fa, &fp, &fn_}) {
                for (const ad::Value& v : *group) {
                    g->segment(j, dim) = v.grad().col(0);
                    j += dim;
                }
            }
        }
        return res.loss.scalar();
    };

    Eigen::VectorXd x0(static_cast<Eigen::Index>((na + np + nn)) * dim);
    Eigen::Index k = 0;
    for (const auto* group : {&s.anchors, &s.pos, &s.neg}) {
        for (const Eigen::VectorXd& v : *group) {
            x0.segment(k, dim) = v;
            k += dim;
        }
    }
    ad::DiffFunction fn;
    fn.value = [eval](const Eigen::VectorXd& x) { return eval(x, false, nullptr); };
    fn.gradient = [eval](const Eigen::VectorXd& x) {
        Eigen::VectorXd g;
        eval(x, true, &g);
        return g;
    };
    return ad::grad_check(fn, x0, kLossProbeStep);
}

ad::GradCheckReport check_triplet_strong_grad(std::uint64_t seed) {
    Rng rng(seed);
    const TripletSetup s = make_triplet_setup(rng, 4, 6, 0);
    const int dim = s.dim;
    const std::size_t na = s.anchors.size(), nb = s.pos.size();
    // Keypoint geometry: anchors get one in-rho partner each, the rest far.
    std::vector<Vec3> q = random_points(rng, static_cast<int>(na));
    std::vector<Vec3> q_prime;
    for (std::size_t i = 0; i < nb; ++i) {
        if (i < na) q_prime.push_back(q[i] + Vec3(0.01, 0.0, 0.0));
        else q_prime.push_back(random_points(rng, 1, 5.0)[0] + Vec3(10.0, 0.0, 0.0));
    }
    const RigidTransform identity;

    const auto eval = [&](const Eigen::VectorXd& x, bool grad, Eigen::VectorXd* g) {
        ad::Tape tape;
        std::vector<ad::Value> f, f_prime;
        Eigen::Index k = 0;
        for (std::size_t i = 0; i < na; ++i) {
            f.push_back(tape.constant(Eigen::MatrixXd(x.segment(k, dim))));
            k += dim;
        }
        for (std::size_t i = 0; i < nb; ++i) {
            f_prime.push_back(tape.constant(Eigen::MatrixXd(x.segment(k, dim))));
            k += dim;
        }
        const StrongTripletResult res =
            triplet_loss_strong(tape, f, q, f_prime, q_prime, identity, identity, 0.4,
                                0.1, 1.0, s.sigmas, seed);
        if (grad) {
            tape.backward(res.loss);
            g->resize(x.size());
            Eigen::Index j = 0;
            for (const auto* group : {&f, &f_prime}) {
                for (const ad::Value& v : *group) {
                    g->segment(j, dim) = v.grad().col(0);
                    j += dim;
                }
            }
        }
        return res.loss.scalar();
    };

    Eigen::VectorXd x0(static_cast<Eigen::Index>(na + nb) * dim);
    Eigen::Index k = 0;
    for (const auto* group : {&s.anchors, &s.pos}) {
        for (const Eigen::VectorXd& v : *group) {
            x0.segment(k, dim) = v;
            k += dim;
        }
    }
    ad::DiffFunction fn;
    fn.value = [eval](const Eigen::VectorXd& x) { return eval(x, false, nullptr); };
    fn.gradient = [eval](const Eigen::VectorXd& x) {
        Eigen::VectorXd g;
        eval(x, true, &g);
        return g;
    };
    return ad::grad_check(fn, x0, kLossProbeStep);
}

ad::GradCheckReport check_fpn_objective_grad(std::uint64_t seed) {
    // Small pair (64-point cloud) + small network so the probe loop stays fast.
    const SyntheticCloud shape = gen_synthetic(SyntheticShape::kBox, 128, 0.002, seed);
    const PointCloud small = random_downsample(shape.cloud, 2, seed);
    TrainConfig cfg;
    cfg.seed = seed;
    cfg.fpn.proposal_count = 6;
    cfg.fpn.node_knn = 3;
    cfg.fpn.cluster_point_cap = 16;
    cfg.fpn.widths1 = {8, 8};
    cfg.fpn.widths2 = {8, 8};
    cfg.fpn.widths_head = {8, 4};
    cfg.lambda = 0.5;
    const TrainingPair pair =
        make_pair(small, cfg.augmentation, derive_seed(seed, seed_stage::kPairs));

    ad::ParamStore store(derive_seed(seed, seed_stage::kParamInit));
    init_fpn_params(store, cfg.fpn);
    // Move off the init point: zero biases put the node-anchored cluster
    // points (offset exactly zero) right on ReLU kinks, which is a
    // non-generic evaluation point for a derivative probe.
    {
        Rng jitter(derive_seed(seed, seed_stage::kParamInit, 1));
        Eigen::VectorXd theta = store.flatten_values();
        for (Eigen::Index i = 0; i < theta.size(); ++i) theta[i] += 0.02 * jitter.normal();
        store.set_values(theta);
    }

    const std::uint64_t seed_a = derive_seed(seed, seed_stage::kProposeA);
    const std::uint64_t seed_b = derive_seed(seed, seed_stage::kProposeB);

    const auto eval = [&](const Eigen::VectorXd& theta, bool grad, Eigen::VectorXd* g) {
        store.set_values(theta);
        store.zero_grad();
        ad::Tape tape;
        ProposalTape prop_a = propose_t(tape, pair.source, store, cfg.fpn, seed_a);
        ProposalTape prop_b = propose_t(tape, pair.transformed, store, cfg.fpn, seed_b);
        const RigidTransform inv = pair.transform.inverse();
        std::vector<ad::Value> q_prime;
        for (const ad::Value& qt : prop_b.positions) {
            q_prime.push_back(tape.affine(qt, inv.rotation, inv.translation));
        }
        const TotalLossResult total = total_loss_t(
            tape, prop_a.positions, prop_a.sigmas, q_prime, prop_b.sigmas, pair.source,
            pair.transformed, prop_b.positions, cfg.lambda, cfg.loss_mode);
        if (grad) {
            tape.backward(total.value);
            *g = store.flatten_grads();
        }
        return total.value.scalar();
    };

    const Eigen::VectorXd theta0 = store.flatten_values();
    ad::DiffFunction fn;
    fn.value = [eval](const Eigen::VectorXd& x) { return eval(x, false, nullptr); };
    fn.gradient = [eval](const Eigen::VectorXd& x) {
        Eigen::VectorXd g;
        eval(x, true, &g);
        return g;
    };
    return ad::grad_check(fn, theta0, 1e-5);
}

std::vector<GradCheckCase> run_grad_checks(const std::string& scope,
                                           std::uint64_t seed, int instances) {
    if (scope != "losses" && scope != "fpn" && scope != "all") {
        throw std::invalid_argument("grad-check: scope must be losses, fpn or all");
    }
    if (instances < 1) throw std::invalid_argument("grad-check: instances must be >= 1");

    struct Entry {
        const char* name;
        ad::GradCheckReport (*fn)(std::uint64_t);
        bool is_loss;
    };
    const Entry entries[] = {
        {"chamfer", check_chamfer_grad, true},
        {"prob_chamfer", check_prob_chamfer_grad, true},
        {"point_to_point", check_point_to_point_grad, true},
        {"point_to_plane", check_point_to_plane_grad, true},
        {"triplet_weak", check_triplet_weak_grad, true},
        {"triplet_strong", check_triplet_strong_grad, true},
        {"fpn_objective", check_fpn_objective_grad, false},
    };

    std::vector<GradCheckCase> cases;
    for (const Entry& e : entries) {
        if (scope == "losses" && !e.is_loss) continue;
        if (scope == "fpn" && e.is_loss) continue;
        ad::GradCheckReport worst;
        for (int i = 0; i < instances; ++i) {
            const ad::GradCheckReport r =
                e.fn(derive_seed(seed, seed_stage::kEval, static_cast<std::uint64_t>(i)));
            if (r.max_rel_error > worst.max_rel_error) worst = r;
        }
        cases.push_back({e.name, worst});
    }
    return cases;
}

}  // namespace usip
