#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "masf/autodiff.hpp"

namespace masf {

enum class NetRole : std::int32_t { FeatureExtractor = 0, TaskNet = 1, MetricNet = 2 };

std::string_view role_name(NetRole role);

struct Architecture {
    std::size_t input_dim = 16;
    std::vector<std::size_t> feature_widths{64, 32};
    std::size_t num_classes = 5;
    std::vector<std::size_t> metric_widths{32, 16};

    std::size_t feature_dim() const { return feature_widths.back(); }
    std::size_t embedding_dim() const { return metric_widths.back(); }

    // Throws std::invalid_argument on zero widths or fewer than two classes.
    void validate() const;

    bool operator==(const Architecture&) const = default;
};

struct ParamEntry {
    std::string name;
    Expr tensor;
};

// Ordered, named parameters of one network. Copies share the underlying
// immutable nodes.
class ParamSet {
public:
    ParamSet() = default;
    ParamSet(NetRole role, std::vector<ParamEntry> entries);

    NetRole role() const { return role_; }
    const std::vector<ParamEntry>& entries() const { return entries_; }
    std::size_t size() const { return entries_.size(); }
    const Expr& operator[](std::size_t i) const { return entries_[i].tensor; }
    const Expr& get(std::string_view name) const;

    std::vector<Expr> tensors() const;
    std::size_t parameter_count() const;

    // Same names and shapes, new leaf nodes holding the current values.
    ParamSet detach() const;
    // Same names and shapes with the tensors replaced positionally.
    ParamSet replace(std::vector<Expr> tensors) const;
    // Same names and shapes with new leaf values.
    ParamSet with_values(const std::vector<Tensor>& values) const;

private:
    NetRole role_ = NetRole::FeatureExtractor;
    std::vector<ParamEntry> entries_;
};

struct NetParams {
    ParamSet psi;
    ParamSet theta;
    ParamSet phi;
};

// He-normal weights, zero biases; deterministic in `seed`.
NetParams init_params(const Architecture& arch, std::uint64_t seed);

// ReLU after every layer, including the last.
Expr feature_forward(const ParamSet& psi, const Expr& x);
// Single affine layer producing unnormalized logits.
Expr task_forward(const ParamSet& theta, const Expr& z);
// Two-layer MLP (ReLU between layers, linear output) followed by row-wise
// L2 normalization against an epsilon-guarded norm.
Expr metric_forward(const ParamSet& phi, const Expr& z);

// params - lr * grads, kept differentiable with respect to params.
ParamSet sgd_step(const ParamSet& params, const GradMap& grads, double lr);

// Flat binary format: "MASF1", int32 role, int32 dim count, int32 dims,
// uint64 value count, then float64 values in entry order (little-endian).
void save_params(const ParamSet& params, const Architecture& arch, const std::filesystem::path& path);
ParamSet load_params(const std::filesystem::path& path, const Architecture& arch, NetRole role);

// Shapes of a freshly initialized ParamSet for `role`.
ParamSet make_param_layout(const Architecture& arch, NetRole role);

}  // namespace masf
