#include "cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>

#include "trisparse/error.hpp"
#include "trisparse/io.hpp"
#include "trisparse/pipeline.hpp"
#include "trisparse/run_config.hpp"

namespace trisparse::cli {
namespace {

namespace fs = std::filesystem;

class UsageError : public Error {
public:
    using Error::Error;
};

std::string frame_name(std::size_t t, const char* ext) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%05zu.%s", t, ext);
    return buf;
}

std::string fixed6(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

RunConfig config_or_defaults(const std::string& path) {
    if (path.empty()) return parse_run_config("");
    return load_run_config(path);
}

fs::path output_dir(const std::string& flag, const RunConfig& cfg) {
    const std::string dir = flag.empty() ? cfg.out : flag;
    if (dir.empty()) throw UsageError("no output directory: pass --out or set 'out' in the config");
    return dir;
}

Policy policy_from_string(const std::string& name) {
    if (name == "skip") return Policy::Skip;
    if (name == "reuse") return Policy::Reuse;
    if (name == "compute") return Policy::Compute;
    throw UsageError("unknown policy '" + name + "' (skip, reuse, compute)");
}

struct InferOptions {
    std::string weights, sequence, out, strategy, force_policy, masks;
    bool dump_masks = false;
};

struct InferRun {
    VideoSequence seq;
    Model model;
    SegmentOptions options;
    SegmentResult result;
};

InferRun run_inference(const InferOptions& o, bool keep_masks) {
    Model model = load_weights(o.weights);
    VideoSequence seq = import_sequence(o.sequence);
    if (seq.height() % 16 != 0 || seq.width() % 16 != 0) {
        throw ShapeError("sequence resolution " + std::to_string(seq.height()) + "x" + std::to_string(seq.width()) +
                         " is not divisible by 16");
    }
    SegmentOptions opts;
    if (!o.strategy.empty()) opts.strategy = strategy_from_string(o.strategy);
    if (!o.force_policy.empty()) opts.forced_policy = policy_from_string(o.force_policy);
    opts.keep_layer_masks = keep_masks;
    SegmentResult result = segment_video(model, seq, opts);
    return {std::move(seq), std::move(model), opts, std::move(result)};
}

std::string metrics_csv(const InferRun& run, double& mean_j, double& mean_f) {
    std::ostringstream os;
    os << "frame,j,f\n";
    mean_j = mean_f = 0.0;
    const std::size_t n = run.seq.frames.size();
    for (std::size_t t = 0; t < n; ++t) {
        const double j = region_similarity(run.result.masks[t], run.seq.masks[t]);
        const double f = contour_accuracy(run.result.masks[t], run.seq.masks[t]);
        os << t << ',' << fixed6(j) << ',' << fixed6(f) << '\n';
        if (t > 0) {
            mean_j += j;
            mean_f += f;
        }
    }
    if (n > 1) {
        mean_j /= static_cast<double>(n - 1);
        mean_f /= static_cast<double>(n - 1);
    }
    return os.str();
}

void write_mask_dumps(const InferRun& run, const fs::path& out) {
    struct Counts {
        Module module;
        std::size_t frames = 0;
        std::array<std::uint64_t, 3> policy{};
    };
    std::vector<std::string> order;
    std::map<std::string, Counts> counts;
    const std::size_t H = run.seq.height(), W = run.seq.width();
    std::vector<std::uint64_t> compute_map(H * W, 0);

    for (const auto& lm : run.result.layer_masks) {
        const fs::path dir = out / "layers" / lm.layer_id;
        fs::create_directories(dir);
        write_pnm(dir / frame_name(lm.frame, "pgm"), mask_to_image(lm.mask));
        auto [it, fresh] = counts.try_emplace(lm.layer_id, Counts{module_of_layer(lm.layer_id)});
        if (fresh) order.push_back(lm.layer_id);
        ++it->second.frames;
        for (std::uint8_t p : lm.mask.policy) ++it->second.policy[p];
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x)
                if (lm.mask.at(y * lm.mask.height / H, x * lm.mask.width / W) == Policy::Compute) ++compute_map[y * W + x];
    }

    std::ostringstream hist;
    hist << "layer_id,module,frames,skip,reuse,compute,skip_share,reuse_share,compute_share\n";
    for (const auto& id : order) {
        const Counts& c = counts[id];
        const double total = static_cast<double>(c.policy[0] + c.policy[1] + c.policy[2]);
        hist << id << ',' << to_string(c.module) << ',' << c.frames << ',' << c.policy[0] << ',' << c.policy[1] << ','
             << c.policy[2];
        for (auto v : c.policy) hist << ',' << fixed6(static_cast<double>(v) / total);
        hist << '\n';
    }
    write_text_file(out / "policy_histogram.csv", hist.str());

    std::ostringstream csv;
    const std::uint64_t peak = std::max<std::uint64_t>(1, *std::max_element(compute_map.begin(), compute_map.end()));
    Image8 img{W, H, 1, std::vector<std::uint8_t>(H * W)};
    for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t x = 0; x < W; ++x) {
            const std::uint64_t v = compute_map[y * W + x];
            csv << (x ? "," : "") << v;
            img.pixels[y * W + x] = static_cast<std::uint8_t>((255 * v + peak / 2) / peak);
        }
        csv << '\n';
    }
    write_text_file(out / "compute_count.csv", csv.str());
    write_pnm(out / "compute_count.pgm", img);
}

/// Rebuilds the report with every gated layer's record derived from its
/// persisted mask file.
SparsityReport report_from_masks(const SegmentResult& live, const fs::path& masks_dir, std::size_t& replaced) {
    std::vector<FrameReport> frames = live.frame_reports;
    replaced = 0;
    for (std::size_t i = 0; i < frames.size(); ++i) {
        for (auto& rec : frames[i].layers) {
            const fs::path file = masks_dir / "layers" / rec.layer_id / frame_name(i + 1, "pgm");
            if (!fs::exists(file)) continue;
            rec = mask_record(rec.layer_id, rec.module, rec.c_k, mask_from_image(read_pnm(file)), rec.gate_flops);
            ++replaced;
        }
    }
    return aggregate(frames);
}

int cmd_synth(const std::string& config, const std::string& out_flag, bool force, std::ostream& out) {
    const RunConfig cfg = config_or_defaults(config);
    const fs::path dir = output_dir(out_flag, cfg);
    if (fs::exists(dir) && !fs::is_empty(dir)) {
        if (!force) throw UsageError("output directory " + dir.string() + " is not empty (use --force)");
        for (const auto& e : fs::directory_iterator(dir))
            if (e.path().filename().string().rfind("seq_", 0) == 0) fs::remove_all(e.path());
    }
    const auto data = generate_dataset(cfg.data);
    for (const auto& seq : data) export_sequence(seq, dir / seq.name);
    out << "wrote " << data.size() << " sequences of " << cfg.data.frames << " frames at " << cfg.data.resolution << "x"
        << cfg.data.resolution << " to " << dir.string() << '\n';
    return kExitOk;
}

int cmd_train(const std::string& config, const std::string& data_dir, const std::string& out_flag, std::ostream& out,
              std::ostream& err) {
    RunConfig cfg = config_or_defaults(config);
    const fs::path dir = output_dir(out_flag, cfg);
    const auto data = import_dataset(data_dir);
    fs::create_directories(dir);
    write_text_file(dir / "run_config.txt", render_config(run_fields(cfg)));

    Model model(cfg.pipeline);
    std::ofstream log(dir / "train_log.csv", std::ios::binary);
    log << kTrainLogHeader << '\n';
    const long every = std::max(1L, cfg.pipeline.iterations / 20);
    const auto result = train(model, data, [&](const TrainLogRow& row) {
        log << train_log_line(row) << '\n';
        if ((row.iteration + 1) % every == 0) {
            err << "iteration " << row.iteration + 1 << "/" << cfg.pipeline.iterations << " loss " << row.loss
                << " hard sparsity " << row.hard_sparsity << '\n';
        }
    });
    log.close();
    save_weights(model, dir / "weights");
    if (result.diverged) {
        err << "training diverged: " << result.diagnostic << "\nlast good weights saved to "
            << (dir / "weights").string() << '\n';
        return kExitNumeric;
    }
    out << "trained " << result.log.size() << " iterations; weights in " << (dir / "weights").string() << '\n';
    if (!result.log.empty()) out << "final hard sparsity " << fixed6(result.log.back().hard_sparsity) << '\n';
    return kExitOk;
}

int cmd_infer(const InferOptions& o, std::ostream& out) {
    const InferRun run = run_inference(o, o.dump_masks);
    const fs::path dir = o.out;
    fs::create_directories(dir / "masks");
    for (std::size_t t = 0; t < run.result.masks.size(); ++t)
        write_pnm(dir / "masks" / frame_name(t, "pgm"), mask_to_pgm(run.result.masks[t]));
    double mean_j = 0, mean_f = 0;
    write_text_file(dir / "metrics.csv", metrics_csv(run, mean_j, mean_f));
    write_text_file(dir / "report.csv", report_csv(run.result.report));
    write_text_file(dir / "summary.csv", summary_csv(run.result.report));
    const std::string summary = format_summary(run.result.report);
    write_text_file(dir / "summary.txt", summary);
    if (o.dump_masks) write_mask_dumps(run, dir);
    out << "mean J " << fixed6(mean_j) << " mean F " << fixed6(mean_f) << " over " << run.result.report.frames
        << " frames\n"
        << summary;
    return kExitOk;
}

int cmd_flops(const InferOptions& o, std::ostream& out) {
    const InferRun run = run_inference(o, false);
    out << format_summary(run.result.report);
    if (!o.out.empty()) {
        fs::create_directories(o.out);
        write_text_file(fs::path(o.out) / "report.csv", report_csv(run.result.report));
        write_text_file(fs::path(o.out) / "summary.csv", summary_csv(run.result.report));
    }
    if (!o.masks.empty()) {
        std::size_t replaced = 0;
        const SparsityReport rebuilt = report_from_masks(run.result, o.masks, replaced);
        if (!(rebuilt == run.result.report)) {
            throw ContractError("report rebuilt from the masks in " + o.masks + " differs from the live report");
        }
        out << "report rebuilt from " << replaced << " persisted masks matches the live report\n";
    }
    return kExitOk;
}

std::string config_help() {
    RunConfig defaults;
    return "Config file: one 'key = value' per line, '#' starts a comment. Keys and defaults:\n" +
           describe_config(run_fields(defaults)) + "\nExit codes: 0 success, 1 usage or config error, 2 numeric failure.\n";
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Triple-sparse video object segmentation: data, training, inference and FLOPs reports", "trisparse"};
    app.footer(config_help());
    app.require_subcommand(1);

    std::string config, out_dir, data_dir;
    bool force = false;
    InferOptions io;

    auto* synth = app.add_subcommand("synth-data", "generate synthetic sequences");
    synth->add_option("--config", config, "run config file (defaults when omitted)");
    synth->add_option("--out", out_dir, "output directory");
    synth->add_flag("--force", force, "replace sequences in a non-empty output directory");

    auto* tr = app.add_subcommand("train", "train a model; writes weights/, train_log.csv and run_config.txt");
    tr->add_option("--config", config, "run config file (defaults when omitted)");
    tr->add_option("--data", data_dir, "directory of sequences")->required();
    tr->add_option("--out", out_dir, "output directory");

    auto add_model_options = [&io](CLI::App* cmd) {
        cmd->add_option("--weights", io.weights, "weights directory")->required();
        cmd->add_option("--sequence", io.sequence, "sequence directory")->required();
        cmd->add_option("--strategy", io.strategy, "override the strategy: mixed, semi-mixed, fully, dense");
        cmd->add_option("--force-policy", io.force_policy, "force every gated position: skip, reuse, compute");
    };
    auto* inf = app.add_subcommand("infer", "segment a sequence; writes masks/, metrics.csv, report.csv, summary.csv");
    add_model_options(inf);
    inf->add_option("--out", io.out, "output directory")->required();
    inf->add_flag("--dump-masks-per-layer", io.dump_masks,
                  "also write layers/<id>/<frame>.pgm, policy_histogram.csv and compute_count.{csv,pgm}");

    auto* fl = app.add_subcommand("flops-report", "print the per-module FLOPs decomposition and gate overhead");
    add_model_options(fl);
    fl->add_option("--out", io.out, "also write report.csv and summary.csv here");
    fl->add_option("--masks", io.masks, "infer output with per-layer masks; check the report rebuilt from them");

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\nrun with --help for usage\n";
        return kExitUsage;
    }

    try {
        if (synth->parsed()) return cmd_synth(config, out_dir, force, out);
        if (tr->parsed()) return cmd_train(config, data_dir, out_dir, out, err);
        if (inf->parsed()) return cmd_infer(io, out);
        return cmd_flops(io, out);
    } catch (const NumericError& e) {
        err << "numeric failure: " << e.what() << '\n';
        return kExitNumeric;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kExitUsage;
    }
}

}  // namespace trisparse::cli
