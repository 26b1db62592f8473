#include "trisparse/flops.hpp"

#include <algorithm>
#include <iomanip>
#include <numeric>
#include <sstream>

namespace trisparse {

std::string to_string(Module m) {
    switch (m) {
        case Module::QueryEncoder: return "query_encoder";
        case Module::MemoryEncoder: return "memory_encoder";
        case Module::Decoder: return "decoder";
    }
    return "?";
}

Module module_from_string(const std::string& name) {
    for (Module m : kModules)
        if (to_string(m) == name) return m;
    throw FormatError("unknown module '" + name + "'", 0);
}

std::uint64_t layer_cost(const ConvSpec& spec) { return spec.pixel_cost(); }

LayerRecord dense_record(std::string id, Module module, std::uint64_t c_k, std::uint64_t area) {
    return {std::move(id), module, c_k, area, area, c_k * area, 0};
}

LayerRecord mask_record(std::string id, Module module, std::uint64_t c_k, const SparseMask& mask, std::uint64_t gate_flops) {
    const std::uint64_t computed = mask.count(Policy::Compute);
    return {std::move(id), module, c_k, mask.area(), computed, c_k * computed, gate_flops};
}

ModuleTotals SparsityReport::module_totals(Module m) const {
    ModuleTotals t;
    for (const auto& l : layers) {
        if (l.module != m) continue;
        t.executed += l.executed_flops;
        t.dense += l.dense_flops();
        t.gate += l.gate_flops;
    }
    return t;
}

ModuleTotals SparsityReport::totals() const {
    ModuleTotals t;
    for (Module m : kModules) {
        const auto mt = module_totals(m);
        t.executed += mt.executed;
        t.dense += mt.dense;
        t.gate += mt.gate;
    }
    return t;
}

double SparsityReport::ratio() const {
    const auto t = totals();
    return t.dense == 0 ? 0.0 : static_cast<double>(t.executed) / static_cast<double>(t.dense);
}

double SparsityReport::executed_per_frame() const {
    return frames == 0 ? 0.0 : static_cast<double>(totals().executed) / static_cast<double>(frames);
}

double SparsityReport::dense_per_frame() const {
    return frames == 0 ? 0.0 : static_cast<double>(totals().dense) / static_cast<double>(frames);
}

SparsityReport aggregate(const std::vector<FrameReport>& frames) {
    if (frames.empty()) throw ContractError("aggregate: no frames");
    SparsityReport r;
    r.frames = frames.size();
    for (const auto& f : frames) {
        for (const auto& l : f.layers) {
            auto it = std::find_if(r.layers.begin(), r.layers.end(),
                                   [&](const LayerRecord& x) { return x.layer_id == l.layer_id && x.module == l.module; });
            if (it == r.layers.end()) {
                r.layers.push_back(l);
                continue;
            }
            if (it->c_k != l.c_k) throw ContractError("aggregate: layer '" + l.layer_id + "' changes cost between frames");
            it->area += l.area;
            it->policy2_count += l.policy2_count;
            it->executed_flops += l.executed_flops;
            it->gate_flops += l.gate_flops;
        }
    }
    return r;
}

namespace {

std::string fixed(double v, int digits) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(digits) << v;
    return os.str();
}

std::string tenths(long t) { return std::to_string(t / 10) + "." + std::to_string(t % 10); }

}  // namespace

std::string report_csv(const SparsityReport& report) {
    std::ostringstream os;
    os << kReportHeader << '\n';
    for (const auto& l : report.layers) {
        os << l.layer_id << ',' << to_string(l.module) << ',' << l.c_k << ',' << l.area << ',' << l.policy2_count << ','
           << fixed(l.hard_sparsity(), 6) << ',' << l.executed_flops << '\n';
    }
    return os.str();
}

std::string summary_csv(const SparsityReport& report) {
    std::ostringstream os;
    os << kSummaryHeader << '\n';
    auto row = [&](const std::string& name, const ModuleTotals& t) {
        const double ratio = t.dense == 0 ? 0.0 : static_cast<double>(t.executed) / static_cast<double>(t.dense);
        os << name << ',' << t.executed << ',' << t.dense << ',' << t.gate << ',' << fixed(ratio, 6) << ',' << report.frames
           << '\n';
    };
    for (Module m : kModules) row(to_string(m), report.module_totals(m));
    row("total", report.totals());
    return os.str();
}

std::vector<long> shares_in_tenths(const std::vector<std::uint64_t>& parts) {
    const std::uint64_t total = std::accumulate(parts.begin(), parts.end(), std::uint64_t{0});
    std::vector<long> out(parts.size(), 0);
    if (total == 0) return out;
    std::vector<std::pair<double, std::size_t>> remainders;
    long assigned = 0;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        const double exact = 1000.0 * static_cast<double>(parts[i]) / static_cast<double>(total);
        out[i] = static_cast<long>(exact);
        assigned += out[i];
        remainders.emplace_back(exact - static_cast<double>(out[i]), i);
    }
    std::stable_sort(remainders.begin(), remainders.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t k = 0; assigned < 1000 && k < remainders.size(); ++k, ++assigned) ++out[remainders[k].second];
    return out;
}

std::string format_summary(const SparsityReport& report) {
    const auto total = report.totals();
    std::vector<std::uint64_t> executed, reduction;
    for (Module m : kModules) {
        const auto t = report.module_totals(m);
        executed.push_back(t.executed);
        reduction.push_back(t.dense - t.executed);
    }
    const auto exec_share = shares_in_tenths(executed);
    const auto red_share = shares_in_tenths(reduction);

    std::ostringstream os;
    os << "frames: " << report.frames << '\n';
    os << "executed FLOPs: " << total.executed << " (" << fixed(report.executed_per_frame(), 1) << " per frame)\n";
    os << "dense FLOPs:    " << total.dense << " (" << fixed(report.dense_per_frame(), 1) << " per frame)\n";
    os << "ratio:          " << fixed(report.ratio(), 4) << '\n';
    os << "gate overhead:  " << total.gate << " (" << fixed(total.executed == 0 ? 0.0 : 100.0 * total.gate / total.executed, 2)
       << "% of executed)\n";
    os << "executed with gates: " << total.executed + total.gate << '\n';
    os << std::left << std::setw(16) << "module" << std::setw(14) << "executed" << std::setw(14) << "dense" << std::setw(10)
       << "share" << "reduction share\n";
    for (std::size_t i = 0; i < std::size(kModules); ++i) {
        const auto t = report.module_totals(kModules[i]);
        os << std::setw(16) << to_string(kModules[i]) << std::setw(14) << t.executed << std::setw(14) << t.dense
           << std::setw(10) << (tenths(exec_share[i]) + "%") << (tenths(red_share[i]) + "%") << '\n';
    }
    return os.str();
}

SparsityReport parse_report_csv(const std::string& text, std::size_t frames) {
    std::istringstream is(text);
    std::string line;
    std::size_t offset = 0;
    if (!std::getline(is, line) || line != kReportHeader) throw FormatError("report CSV: unexpected header", 0);
    offset += line.size() + 1;
    SparsityReport r;
    r.frames = frames;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ls(line);
        for (std::string cell; std::getline(ls, cell, ',');) f.push_back(cell);
        if (f.size() != 7) throw FormatError("report CSV: expected 7 fields, got " + std::to_string(f.size()), offset);
        try {
            LayerRecord l;
            l.layer_id = f[0];
            l.module = module_from_string(f[1]);
            l.c_k = std::stoull(f[2]);
            l.area = std::stoull(f[3]);
            l.policy2_count = std::stoull(f[4]);
            l.executed_flops = std::stoull(f[6]);
            r.layers.push_back(std::move(l));
        } catch (const std::logic_error&) {
            throw FormatError("report CSV: malformed number in '" + line + "'", offset);
        }
        offset += line.size() + 1;
    }
    return r;
}

}  // namespace trisparse
