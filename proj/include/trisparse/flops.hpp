#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "trisparse/gating.hpp"
#include "trisparse/ops.hpp"

namespace trisparse {

enum class Module { QueryEncoder, MemoryEncoder, Decoder };

inline constexpr Module kModules[] = {Module::QueryEncoder, Module::MemoryEncoder, Module::Decoder};

std::string to_string(Module m);
Module module_from_string(const std::string& name);

/// Multiply-accumulates per output pixel, k*k*C_i*C_o. One MAC is one FLOP unit.
std::uint64_t layer_cost(const ConvSpec& spec);

/// Execution record of one layer. `area` counts output positions over every
/// frame the record covers, so dense-equivalent cost is c_k * area.
struct LayerRecord {
    std::string layer_id;
    Module module = Module::QueryEncoder;
    std::uint64_t c_k = 0;
    std::uint64_t area = 0;
    std::uint64_t policy2_count = 0;
    std::uint64_t executed_flops = 0;
    std::uint64_t gate_flops = 0;

    double hard_sparsity() const { return area == 0 ? 0.0 : static_cast<double>(policy2_count) / static_cast<double>(area); }
    std::uint64_t dense_flops() const { return c_k * area; }

    friend bool operator==(const LayerRecord&, const LayerRecord&) = default;
};

/// Record of a densely executed layer over an H_o x W_o output.
LayerRecord dense_record(std::string id, Module module, std::uint64_t c_k, std::uint64_t area);
/// Record derived from a hard mask: executed = c_k * count(compute).
LayerRecord mask_record(std::string id, Module module, std::uint64_t c_k, const SparseMask& mask, std::uint64_t gate_flops = 0);

/// All layer executions of one frame, in execution order.
struct FrameReport {
    std::vector<LayerRecord> layers;
};

struct ModuleTotals {
    std::uint64_t executed = 0;
    std::uint64_t dense = 0;
    std::uint64_t gate = 0;
};

struct SparsityReport {
    std::vector<LayerRecord> layers;  // merged by (layer id, module), first-seen order
    std::size_t frames = 0;

    ModuleTotals module_totals(Module m) const;
    ModuleTotals totals() const;
    /// executed / dense, in [0, 1].
    double ratio() const;
    double executed_per_frame() const;
    double dense_per_frame() const;

    friend bool operator==(const SparsityReport&, const SparsityReport&) = default;
};

/// Sums per-frame records layer by layer. Empty input is an error.
SparsityReport aggregate(const std::vector<FrameReport>& frames);

inline constexpr const char* kReportHeader = "layer_id,module,c_k,area,policy2_count,hard_sparsity,executed_flops";
inline constexpr const char* kSummaryHeader = "module,executed_flops,dense_flops,gate_flops,executed_ratio,frames";

std::string report_csv(const SparsityReport& report);
/// Module totals plus a `total` row.
std::string summary_csv(const SparsityReport& report);
/// Human-readable decomposition: executed shares, shares of the reduction, gate overhead.
std::string format_summary(const SparsityReport& report);

/// Parses a report CSV back; gate FLOPs are not part of the per-layer table and read as 0.
SparsityReport parse_report_csv(const std::string& text, std::size_t frames);

/// Percentages rounded to one decimal that add up to exactly 100.0
/// (largest-remainder rounding), returned in tenths of a percent.
std::vector<long> shares_in_tenths(const std::vector<std::uint64_t>& parts);

}  // namespace trisparse
