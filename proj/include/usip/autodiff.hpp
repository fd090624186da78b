#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "usip/common.hpp"

namespace usip::ad {

class Tape;

// Handle to a node on a tape. data/grad always have identical shapes.
struct Value {
    Tape* tape = nullptr;
    int id = -1;

    bool valid() const { return tape != nullptr && id >= 0; }
    const Eigen::MatrixXd& data() const;
    const Eigen::MatrixXd& grad() const;
    double scalar() const;
    Eigen::Index rows() const;
    Eigen::Index cols() const;
    Eigen::Index size() const;
};

struct Parameter {
    std::string name;
    Eigen::MatrixXd value;
    Eigen::MatrixXd grad;
    Eigen::MatrixXd moment1;
    Eigen::MatrixXd moment2;
};

// Named parameter storage with per-parameter adaptive-moment buffers.
// Initialization is a pure function of (init_seed, name), so creation order
// never changes the values.
class ParamStore {
public:
    explicit ParamStore(std::uint64_t init_seed = 0) : init_seed_(init_seed) {}

    // Fetches the named parameter, creating it with N(0, init_scale^2)
    // entries on first use (zeros when init_scale == 0).
    Parameter& get_or_create(const std::string& name, Eigen::Index rows,
                             Eigen::Index cols, double init_scale);

    bool contains(const std::string& name) const { return params_.count(name) > 0; }
    Parameter& at(const std::string& name);
    const Parameter& at(const std::string& name) const;
    std::vector<std::string> names() const;
    std::size_t count() const { return params_.size(); }
    std::size_t total_size() const;

    std::int64_t step() const { return step_; }
    void set_step(std::int64_t s) { step_ = s; }

    void zero_grad();

    // Flat views ordered by sorted parameter name (column-major per entry).
    Eigen::VectorXd flatten_values() const;
    void set_values(const Eigen::VectorXd& flat);
    Eigen::VectorXd flatten_grads() const;

    // Extra named arrays persisted with the checkpoint (configuration etc).
    std::map<std::string, Eigen::MatrixXd> attributes;

    std::uint64_t init_seed() const { return init_seed_; }

    void save(const std::string& path) const;
    static ParamStore load(const std::string& path);

private:
    friend void adam_step(ParamStore&, double, double, double, double);
    std::map<std::string, Parameter> params_;
    std::int64_t step_ = 0;
    std::uint64_t init_seed_ = 0;
};

// Bias-corrected adaptive-moment update; zeroes gradients afterward.
// Throws TrainingDivergedError naming the parameter on non-finite gradients.
void adam_step(ParamStore& store, double lr, double beta1 = 0.9,
               double beta2 = 0.999, double eps = 1e-8);

// Reverse-mode tape. Single-threaded during forward/backward; independent
// tapes may run concurrently against a shared read-only parameter snapshot
// as long as gradient accumulation into the store is serialized.
class Tape {
public:
    Value constant(const Eigen::MatrixXd& v);
    Value constant(const Eigen::Vector3d& v);
    Value constant_scalar(double v);

    // Leaf bound to a parameter; backward accumulates into param.grad.
    // One node per parameter per tape: repeated calls return the same node.
    Value leaf(Parameter& param);

    // w (out x in) * x (in x 1) + b (out x 1).
    Value dense(Value w, Value b, Value x);
    Value relu(Value v);
    Value softplus(Value v);
    // Per-channel max over K same-shape values; gradient routed to the
    // argmax element only (lowest index on ties).
    Value maxpool(std::span<const Value> vs);

    Value add(Value a, Value b);
    Value sub(Value a, Value b);
    Value scale(Value a, double s);
    Value add_scalar(Value a, double s);
    Value offset(Value a, const Eigen::MatrixXd& c);
    // A * v + c with constant A, c.
    Value affine(Value v, const Eigen::MatrixXd& a, const Eigen::VectorXd& c);
    Value concat_rows(Value a, Value b);
    Value slice_rows(Value a, Eigen::Index row0, Eigen::Index nrows);
    Value l2_normalize(Value a);
    Value sum(std::span<const Value> vs);  // sum of scalars

    // Escape hatch for fused operations (the loss modules use this): the
    // closure reads grad(self) and accumulates into parent grads.
    Value custom(Eigen::MatrixXd out, std::function<void(Tape&, int self)> backward);

    // Seeds d(root)/d(root) = 1 and sweeps the tape in reverse creation
    // order. root must be scalar.
    void backward(Value root);

    const Eigen::MatrixXd& data(int id) const { return nodes_[static_cast<std::size_t>(id)].data; }
    Eigen::MatrixXd& grad(int id) { return nodes_[static_cast<std::size_t>(id)].grad; }
    const Eigen::MatrixXd& grad(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }
    std::size_t size() const { return nodes_.size(); }

    bool all_finite() const;

private:
    struct Node {
        Eigen::MatrixXd data;
        Eigen::MatrixXd grad;
        std::function<void(Tape&)> backward;
    };

    Value push(Eigen::MatrixXd data);
    std::vector<Node> nodes_;
    std::map<const Parameter*, int> leaf_cache_;
};

// Finite-difference gradient checker. `value` must be evaluable anywhere
// near x0; `gradient` is the analytic gradient under test.
struct DiffFunction {
    std::function<double(const Eigen::VectorXd&)> value;
    std::function<Eigen::VectorXd(const Eigen::VectorXd&)> gradient;
};

struct GradCheckReport {
    double max_rel_error = 0.0;
    int worst_coord = -1;
    std::vector<int> kink_coords;  // coordinates excluded as non-differentiable
};

// Central differences (f(x+h) - f(x-h)) / 2h per coordinate; relative error
// uses denominator max(|analytic|, |numeric|, 1e-8). Coordinates where the
// one-sided slopes disagree (an activation kink or a nearest-neighbor switch
// under the probe) are reported and excluded from the max.
GradCheckReport grad_check(const DiffFunction& fn, const Eigen::VectorXd& x0,
                           double h);

}  // namespace usip::ad
