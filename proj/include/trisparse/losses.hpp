#pragma once

#include <cstddef>
#include <vector>

#include "trisparse/autograd.hpp"
#include "trisparse/tensor.hpp"

namespace trisparse {

/// Top-fraction of the bootstrapped cross entropy: 1 until `start`, then
/// linear down to `final_fraction` at `end` (both as fractions of training).
struct BootstrapSchedule {
    double start = 0.2;
    double end = 0.7;
    double final_fraction = 0.15;

    double fraction(long iteration, long total_iterations) const;
};

enum class SparseObjective {
    Banded,   // per-layer band loss plus global target loss
    RawCost,  // global soft cost with no target (residual baseline)
};

struct LossConfig {
    double gamma = 1.0;
    double beta = 1.0;
    double sparse_target = 0.1;
    BootstrapSchedule bootstrap;
    SparseObjective objective = SparseObjective::Banded;

    void validate() const;
};

struct ScheduleState {
    double t_upper = 0.1;
    double t_lower = 0.1;
    long iteration = 0;
    long total_iterations = 1;
};

/// Bounds after linear relaxation over the first 75% of training.
ScheduleState relax_bounds(const ScheduleState& state, double sparse_target);

/// Per-pixel cross entropy of 2 x H x W logits against a {0,1} mask (H x W or
/// 1 x H x W), averaged over the ceil(fraction*H*W) largest values. Ties in
/// the ranking go to the lower pixel index.
ag::Var bootstrapped_ce(const ag::Var& logits, const Tensor& target, double top_fraction);
double bootstrapped_ce(const Tensor& logits, const Tensor& target, double top_fraction);

/// max(s - t_upper, 0)^2 + max(t_lower - s, 0)^2 for a scalar s.
ag::Var layer_sparse_loss(const ag::Var& s, const ScheduleState& state);
double layer_sparse_loss(double s, const ScheduleState& state);

struct LayerCost {
    ag::Var sparsity;       // scalar
    double pixel_cost = 0;  // c_k
    double area = 0;        // H_o * W_o
};

/// Cost-weighted sparsity sum(c*s*A) / sum(c*A).
ag::Var weighted_sparsity(const std::vector<LayerCost>& layers);
/// (weighted sparsity - t_s)^2.
ag::Var global_sparse_loss(const std::vector<LayerCost>& layers, double sparse_target);

struct LayerCostValue {
    double sparsity = 0;
    double pixel_cost = 0;
    double area = 0;
};
double weighted_sparsity(const std::vector<LayerCostValue>& layers);
double global_sparse_loss(const std::vector<LayerCostValue>& layers, double sparse_target);

/// L_seg + gamma * (sum of layer losses + beta * global).
ag::Var total_loss(const ag::Var& seg, const std::vector<ag::Var>& layer_losses, const ag::Var& global,
                   const LossConfig& cfg);
double total_loss(double seg, const std::vector<double>& layer_losses, double global, const LossConfig& cfg);

/// Mean of the soft compute channel `channel` of a P x H x W mask, as a scalar.
ag::Var soft_sparsity(const ag::Var& soft, std::size_t channel);

}  // namespace trisparse
