#include "trisparse/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace trisparse {

namespace {

double square(double v) { return v * v; }

ag::Var squared(const ag::Var& v) { return ag::mul(v, v); }

Tensor flat_target(const Tensor& target, std::size_t h, std::size_t w) {
    if (target.size() != h * w || (target.ndim() != 2 && target.ndim() != 3) ||
        (target.ndim() == 3 && target.dim(0) != 1)) {
        throw ShapeError("bootstrapped_ce: target " + shape_str(target.shape()) + " vs logits area " + std::to_string(h) +
                         "x" + std::to_string(w));
    }
    for (double v : target.data())
        if (v != 0.0 && v != 1.0) throw ShapeError("bootstrapped_ce: target values must be 0 or 1");
    return target.reshaped({h * w});
}

void check_layers(std::size_t n, const char* what) {
    if (n == 0) throw ContractError(std::string(what) + ": empty layer list");
}

}  // namespace

double BootstrapSchedule::fraction(long iteration, long total_iterations) const {
    if (total_iterations <= 0) throw ConfigError("bootstrap schedule: total iterations must be positive");
    const double progress = static_cast<double>(iteration) / static_cast<double>(total_iterations);
    if (progress <= start) return 1.0;
    if (progress >= end) return final_fraction;
    return 1.0 + (final_fraction - 1.0) * (progress - start) / (end - start);
}

void LossConfig::validate() const {
    if (!(sparse_target >= 0.0 && sparse_target <= 1.0)) throw ConfigError("sparse target must lie in [0, 1]");
    if (!(gamma >= 0.0) || !(beta >= 0.0)) throw ConfigError("gamma and beta must be non-negative");
    if (!(bootstrap.final_fraction > 0.0 && bootstrap.final_fraction <= 1.0)) {
        throw ConfigError("bootstrap final fraction must lie in (0, 1]");
    }
    if (!(bootstrap.start >= 0.0 && bootstrap.start < bootstrap.end && bootstrap.end <= 1.0)) {
        throw ConfigError("bootstrap schedule needs 0 <= start < end <= 1");
    }
}

ScheduleState relax_bounds(const ScheduleState& state, double sparse_target) {
    if (state.total_iterations <= 0) throw ConfigError("relax_bounds: total iterations must be positive");
    const double rho = std::min(static_cast<double>(state.iteration) / (0.75 * static_cast<double>(state.total_iterations)), 1.0);
    ScheduleState next = state;
    next.t_upper = sparse_target + (1.0 - sparse_target) * rho;
    next.t_lower = sparse_target * (1.0 - rho);
    return next;
}

ag::Var bootstrapped_ce(const ag::Var& logits, const Tensor& target, double top_fraction) {
    if (!(top_fraction > 0.0 && top_fraction <= 1.0)) throw ContractError("bootstrapped_ce: top fraction must lie in (0, 1]");
    if (logits.value().ndim() != 3 || logits.shape()[0] != 2) {
        throw ShapeError("bootstrapped_ce: logits must be 2 x H x W, got " + shape_str(logits.shape()));
    }
    const std::size_t h = logits.shape()[1], w = logits.shape()[2], area = h * w;
    const Tensor t = flat_target(target, h, w);

    const ag::Var logp = ag::log_softmax(logits, 0);
    const Tensor& lp = logp.value();
    std::vector<double> nll(area);
    for (std::size_t i = 0; i < area; ++i) nll[i] = -lp[(t[i] != 0.0 ? area : 0) + i];

    const auto keep = static_cast<std::size_t>(std::ceil(top_fraction * static_cast<double>(area) - 1e-9));
    std::vector<std::size_t> order(area);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return nll[a] > nll[b]; });

    // -log p at the target channel, restricted to the kept pixels, averaged.
    Tensor weights({2, h, w});
    const double inv = 1.0 / static_cast<double>(std::max<std::size_t>(keep, 1));
    for (std::size_t r = 0; r < keep; ++r) {
        const std::size_t i = order[r];
        weights[(t[i] != 0.0 ? area : 0) + i] = -inv;
    }
    return ag::sum(ag::mul(logp, ag::constant(std::move(weights))));
}

double bootstrapped_ce(const Tensor& logits, const Tensor& target, double top_fraction) {
    return bootstrapped_ce(ag::constant(logits), target, top_fraction).value().item();
}

ag::Var layer_sparse_loss(const ag::Var& s, const ScheduleState& state) {
    const ag::Var over = ag::relu(ag::add_scalar(s, -state.t_upper));
    const ag::Var under = ag::relu(ag::add_scalar(ag::scale(s, -1.0), state.t_lower));
    return ag::add(squared(over), squared(under));
}

double layer_sparse_loss(double s, const ScheduleState& state) {
    return square(std::max(s - state.t_upper, 0.0)) + square(std::max(state.t_lower - s, 0.0));
}

ag::Var weighted_sparsity(const std::vector<LayerCost>& layers) {
    check_layers(layers.size(), "weighted_sparsity");
    double denom = 0.0;
    for (const auto& l : layers) denom += l.pixel_cost * l.area;
    if (!(denom > 0.0)) throw ContractError("weighted_sparsity: total cost must be positive");
    ag::Var acc;
    for (const auto& l : layers) {
        const ag::Var term = ag::scale(l.sparsity, l.pixel_cost * l.area / denom);
        acc = acc.defined() ? ag::add(acc, term) : term;
    }
    return acc;
}

ag::Var global_sparse_loss(const std::vector<LayerCost>& layers, double sparse_target) {
    return squared(ag::add_scalar(weighted_sparsity(layers), -sparse_target));
}

double weighted_sparsity(const std::vector<LayerCostValue>& layers) {
    check_layers(layers.size(), "weighted_sparsity");
    double num = 0.0, denom = 0.0;
    for (const auto& l : layers) {
        num += l.pixel_cost * l.sparsity * l.area;
        denom += l.pixel_cost * l.area;
    }
    if (!(denom > 0.0)) throw ContractError("weighted_sparsity: total cost must be positive");
    return num / denom;
}

double global_sparse_loss(const std::vector<LayerCostValue>& layers, double sparse_target) {
    return square(weighted_sparsity(layers) - sparse_target);
}

ag::Var total_loss(const ag::Var& seg, const std::vector<ag::Var>& layer_losses, const ag::Var& global,
                   const LossConfig& cfg) {
    ag::Var sparse;
    for (const auto& l : layer_losses) sparse = sparse.defined() ? ag::add(sparse, l) : l;
    if (global.defined()) {
        const ag::Var g = ag::scale(global, cfg.beta);
        sparse = sparse.defined() ? ag::add(sparse, g) : g;
    }
    if (!sparse.defined()) return seg;
    return ag::add(seg, ag::scale(sparse, cfg.gamma));
}

double total_loss(double seg, const std::vector<double>& layer_losses, double global, const LossConfig& cfg) {
    double layers = 0.0;
    for (double l : layer_losses) layers += l;
    return seg + cfg.gamma * (layers + cfg.beta * global);
}

ag::Var soft_sparsity(const ag::Var& soft, std::size_t channel) {
    if (soft.value().ndim() != 3 || channel >= soft.shape()[0]) {
        throw ShapeError("soft_sparsity: channel " + std::to_string(channel) + " of " + shape_str(soft.shape()));
    }
    const double area = static_cast<double>(soft.shape()[1] * soft.shape()[2]);
    return ag::scale(ag::sum(ag::slice(soft, 0, channel, channel + 1)), 1.0 / area);
}

}  // namespace trisparse
