#include "trisparse/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "trisparse/io.hpp"

namespace trisparse {

std::string to_string(Strategy s) {
    switch (s) {
        case Strategy::Fully: return "fully";
        case Strategy::SemiMixed: return "semi-mixed";
        case Strategy::Mixed: return "mixed";
        case Strategy::Dense: return "dense";
    }
    return "?";
}

Strategy strategy_from_string(const std::string& name) {
    if (name == "fully") return Strategy::Fully;
    if (name == "semi-mixed") return Strategy::SemiMixed;
    if (name == "mixed") return Strategy::Mixed;
    if (name == "dense") return Strategy::Dense;
    throw ConfigError("unknown strategy '" + name + "' (fully, semi-mixed, mixed, dense)");
}

std::string to_string(Variant v) {
    switch (v) {
        case Variant::Triple: return "triple";
        case Variant::Static: return "static";
        case Variant::Residual: return "residual";
        case Variant::Dense: return "dense";
    }
    return "?";
}

Variant variant_from_string(const std::string& name) {
    if (name == "triple") return Variant::Triple;
    if (name == "static") return Variant::Static;
    if (name == "residual") return Variant::Residual;
    if (name == "dense") return Variant::Dense;
    throw ConfigError("unknown variant '" + name + "' (triple, static, residual, dense)");
}

std::optional<GateKind> gate_kind_of(Variant v) {
    switch (v) {
        case Variant::Triple: return GateKind::Triple;
        case Variant::Static: return GateKind::Static;
        case Variant::Residual: return GateKind::Residual;
        case Variant::Dense: return std::nullopt;
    }
    return std::nullopt;
}

FramePolicy frame_policy(Strategy strategy, std::size_t frame, std::size_t interval, bool sparsify_memory_encoder) {
    if (interval == 0) throw ConfigError("memory interval must be >= 1");
    FramePolicy p;
    p.memory = frame % interval == 0;
    if (frame == 0 || strategy == Strategy::Dense) return p;
    if (strategy == Strategy::Mixed) {
        p.processing = p.memory ? Processing::Dense : Processing::Sparse;
        return p;
    }
    p.processing = Processing::Sparse;
    if (sparsify_memory_encoder) p.memory_processing = Processing::Sparse;
    return p;
}

void PipelineConfig::validate() const {
    if (memory_interval < 1) throw ConfigError("memory interval must be >= 1");
    if (stem_width == 0 || decoder_width == 0 || key_dim == 0 || value_dim == 0) throw ConfigError("widths must be positive");
    for (auto w : stage_widths)
        if (w < 2) throw ConfigError("stage widths must be >= 2 (the memory encoder uses half)");
    if (stem_width < 2) throw ConfigError("stem width must be >= 2");
    if (!(tau > 0.0)) throw ConfigError("gate temperature must be positive");
    if (iterations < 0) throw ConfigError("iterations must be >= 0");
    if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
    if (weight_decay < 0.0) throw ConfigError("weight decay must be >= 0");
    if (warmup_fraction < 0.0 || flat_fraction < 0.0 || warmup_fraction + flat_fraction > 1.0) {
        throw ConfigError("warmup and flat fractions must be >= 0 and sum to at most 1");
    }
    if (min_lr_ratio < 0.0 || min_lr_ratio > 1.0) throw ConfigError("min lr ratio must lie in [0, 1]");
    if (!(gate_lr_scale > 0.0)) throw ConfigError("gate_lr_scale must be > 0");
    if (grad_clip < 0.0) throw ConfigError("gradient clip must be >= 0");
    if (clip_max_gap < 1) throw ConfigError("clip gap must be >= 1");
    if (batch_size < 1) throw ConfigError("batch size must be >= 1");
    loss.validate();
}

std::vector<ConfigField> pipeline_fields(PipelineConfig& c) {
    return {
        enum_field<Variant>("variant", "gate family: triple, static, residual, dense", c.variant,
                            [](Variant v) { return to_string(v); }, variant_from_string),
        enum_field<Strategy>("strategy", "sparse processing: mixed, semi-mixed, fully, dense", c.strategy,
                             [](Strategy s) { return to_string(s); }, strategy_from_string),
        size_field("stem_width", "query stem channels", c.stem_width, 2),
        size_field("stage1_width", "query stage 1 channels (4x)", c.stage_widths[0], 2),
        size_field("stage2_width", "query stage 2 channels (8x)", c.stage_widths[1], 2),
        size_field("stage3_width", "query stage 3 channels (16x)", c.stage_widths[2], 2),
        size_field("decoder_width", "decoder channels", c.decoder_width, 1),
        size_field("key_dim", "key channels C_k", c.key_dim, 1),
        size_field("value_dim", "value channels C_v", c.value_dim, 1),
        size_field("memory_interval", "frames between memorized frames", c.memory_interval, 1),
        bool_field("sparsify_memory_encoder", "gate the memory encoder (outside mixed processing)",
                   c.sparsify_memory_encoder),
        real_field("tau", "Gumbel-Softmax temperature", c.tau),
        u64_field("seed", "weight init, clip sampling and gate noise seed", c.seed),
        int_field("iterations", "training iterations", c.iterations, 0),
        real_field("learning_rate", "peak learning rate", c.learning_rate),
        real_field("weight_decay", "decoupled weight decay on kernels", c.weight_decay),
        real_field("warmup_fraction", "linear warmup share of training", c.warmup_fraction),
        real_field("flat_fraction", "constant-rate share after warmup, before cosine decay", c.flat_fraction),
        real_field("min_lr_ratio", "final learning rate as a fraction of the peak", c.min_lr_ratio),
        real_field("gate_lr_scale", "learning rate multiplier for gate parameters", c.gate_lr_scale),
        real_field("grad_clip", "global gradient norm clip, 0 disables", c.grad_clip),
        size_field("clip_max_gap", "largest frame gap inside a training clip", c.clip_max_gap, 1),
        size_field("batch_size", "clips per training iteration", c.batch_size, 1),
        bool_field("augment", "random twin paste, time reversal, flips, channel order and colour jitter per clip", c.augment),
        real_field("gamma", "weight of the sparse terms", c.loss.gamma),
        real_field("beta", "weight of the global sparse term", c.loss.beta),
        real_field("sparse_target", "target cost-weighted sparsity t_s", c.loss.sparse_target),
        real_field("bootstrap_start", "training share where bootstrapping starts", c.loss.bootstrap.start),
        real_field("bootstrap_end", "training share where bootstrapping reaches its final fraction", c.loss.bootstrap.end),
        real_field("bootstrap_final", "final share of hardest pixels in the CE", c.loss.bootstrap.final_fraction),
        enum_field<SparseObjective>(
            "sparse_objective", "banded (layer band + global target) or raw-cost (global cost only)", c.loss.objective,
            [](SparseObjective o) { return std::string(o == SparseObjective::Banded ? "banded" : "raw-cost"); },
            [](const std::string& v) {
                if (v == "banded") return SparseObjective::Banded;
                if (v == "raw-cost") return SparseObjective::RawCost;
                throw ConfigError("unknown sparse objective '" + v + "' (banded, raw-cost)");
            }),
    };
}

double learning_rate_at(const PipelineConfig& cfg, long iteration) {
    const double total = static_cast<double>(std::max(cfg.iterations, 1L));
    const double it = static_cast<double>(iteration);
    const double warm = cfg.warmup_fraction * total;
    const double flat_end = warm + cfg.flat_fraction * total;
    if (it < warm) return cfg.learning_rate * std::min((it + 1.0) / warm, 1.0);
    if (it < flat_end) return cfg.learning_rate;
    const double span = std::max(total - flat_end, 1.0);
    const double progress = std::min((it - flat_end) / span, 1.0);
    const double floor = cfg.learning_rate * cfg.min_lr_ratio;
    return floor + (cfg.learning_rate - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

Module module_of_layer(const std::string& id) {
    if (id.rfind("q.", 0) == 0) return Module::QueryEncoder;
    if (id.rfind("m.", 0) == 0) return Module::MemoryEncoder;
    if (id.rfind("d.", 0) == 0) return Module::Decoder;
    throw ContractError("layer '" + id + "' belongs to no module");
}

namespace {

Tensor he_normal(Shape shape, double gain, Rng& rng) {
    Tensor t(std::move(shape));
    const double fan_in = static_cast<double>(t.dim(1) * t.dim(2) * t.dim(3));
    const double std = std::sqrt(gain / fan_in);
    for (double& v : t.data()) v = std * rng.normal();
    return t;
}

ConvSpec make_conv(std::size_t ci, std::size_t co, std::size_t k, std::size_t stride, double gain, Rng& rng) {
    ConvSpec s;
    s.kernel = he_normal({co, ci, k, k}, gain, rng);
    s.bias = Tensor({co});
    s.stride = stride;
    s.padding = k / 2;
    return s;
}

}  // namespace

Model::Model(PipelineConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(cfg_.seed);
    const auto& w = cfg_.stage_widths;
    const bool gated = gate_kind_of(cfg_.variant).has_value();

    add_dense("q.stem", 3, cfg_.stem_width, 3, 2, rng);
    add_block("q.b1", cfg_.stem_width, w[0], 2, true, gated, rng);
    add_block("q.b2", w[0], w[1], 2, true, gated, rng);
    add_block("q.b3", w[1], w[2], 2, true, gated, rng);
    dense_["q.key"] = make_conv(w[2], cfg_.key_dim, 3, 1, 1.0, rng);
    dense_["q.value"] = make_conv(w[2], cfg_.value_dim, 3, 1, 1.0, rng);

    const bool memory_gated = gated && cfg_.sparsify_memory_encoder;
    add_dense("m.stem", 4, cfg_.stem_width / 2, 3, 2, rng);
    add_block("m.b1", cfg_.stem_width / 2, w[0] / 2, 2, true, memory_gated, rng);
    add_block("m.b2", w[0] / 2, w[1] / 2, 2, true, memory_gated, rng);
    add_block("m.b3", w[1] / 2, w[2] / 2, 2, true, memory_gated, rng);
    add_block("m.f1", w[2] / 2 + w[2], cfg_.value_dim, 1, false, false, rng);
    add_block("m.f2", cfg_.value_dim, cfg_.value_dim, 1, false, false, rng);

    const std::size_t dw = cfg_.decoder_width;
    add_dense("d.compress", 2 * cfg_.value_dim, dw, 3, 1, rng);
    add_dense("d.skip8", w[1], dw, 3, 1, rng);
    add_block("d.r1", dw, dw, 1, true, gated, rng);
    add_dense("d.skip4", w[0], dw, 3, 1, rng);
    add_block("d.r2", dw, dw, 1, true, gated, rng);
    dense_["d.head"] = make_conv(dw, 2, 1, 1, 1.0, rng);
}

void Model::add_dense(const std::string& name, std::size_t ci, std::size_t co, std::size_t k, std::size_t stride, Rng& rng) {
    dense_[name] = make_conv(ci, co, k, stride, 2.0, rng);
}

void Model::add_sparse(const std::string& name, std::size_t ci, std::size_t co, std::size_t stride, bool gated, Rng& rng) {
    SparseLayer layer;
    layer.id = name;
    layer.spec = make_conv(ci, co, 3, stride, 2.0, rng);
    if (gated) layer.gate = make_gate(*gate_kind_of(cfg_.variant), ci, stride, cfg_.tau);
    sparse_index_[name] = sparse_.size();
    sparse_.push_back(std::move(layer));
}

void Model::add_block(const std::string& prefix, std::size_t ci, std::size_t co, std::size_t stride, bool sparse, bool gated,
                      Rng& rng) {
    if (sparse) {
        add_sparse(prefix + ".conv1", ci, co, stride, gated, rng);
        add_sparse(prefix + ".conv2", co, co, 1, gated, rng);
    } else {
        add_dense(prefix + ".conv1", ci, co, 3, stride, rng);
        add_dense(prefix + ".conv2", co, co, 3, 1, rng);
    }
    if (ci != co || stride != 1) add_dense(prefix + ".skip", ci, co, 1, stride, rng);
}

ConvSpec& Model::dense(const std::string& name) {
    auto it = dense_.find(name);
    if (it == dense_.end()) throw ContractError("no dense layer '" + name + "'");
    return it->second;
}

const ConvSpec& Model::dense(const std::string& name) const { return const_cast<Model*>(this)->dense(name); }

SparseLayer& Model::sparse(const std::string& name) {
    auto it = sparse_index_.find(name);
    if (it == sparse_index_.end()) throw ContractError("no sparse layer '" + name + "'");
    return sparse_[it->second];
}

const SparseLayer& Model::sparse(const std::string& name) const { return const_cast<Model*>(this)->sparse(name); }

void Model::reset_states() {
    for (auto& l : sparse_) l.reset_state();
}

void Model::set_train_mode(bool on) {
    for (auto& l : sparse_)
        if (l.gate) l.gate->train_mode = on;
}

std::vector<Model::NamedTensor> Model::parameters() {
    std::vector<NamedTensor> out;
    for (auto& [name, spec] : dense_) {
        out.push_back({name + ".kernel", &spec.kernel, true});
        if (spec.bias) out.push_back({name + ".bias", &*spec.bias, false});
    }
    for (auto& l : sparse_) {
        out.push_back({l.id + ".kernel", &l.spec.kernel, true});
        if (l.spec.bias) out.push_back({l.id + ".bias", &*l.spec.bias, false});
        if (l.gate) {
            out.push_back({l.id + ".gate.kernel", &l.gate->conv.kernel, true});
            if (l.gate->conv.bias) out.push_back({l.id + ".gate.bias", &*l.gate->conv.bias, false});
        }
    }
    return out;
}

void save_weights(Model& model, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::ostringstream manifest;
    for (const auto& p : model.parameters()) {
        const std::string file = p.name + ".tensor";
        write_tensor(dir / file, *p.tensor);
        manifest << p.name << ' ' << file << ' ' << shape_str(p.tensor->shape()) << '\n';
    }
    write_text_file(dir / "manifest.txt", manifest.str());
    PipelineConfig cfg = model.config();
    write_text_file(dir / "config.txt", render_config(pipeline_fields(cfg)));
}

Model load_weights(const std::filesystem::path& dir) {
    PipelineConfig cfg;
    apply_config(parse_config_text(read_text_file(dir / "config.txt")), pipeline_fields(cfg));
    Model model(cfg);
    std::map<std::string, Tensor*> params;
    for (const auto& p : model.parameters()) params[p.name] = p.tensor;

    std::istringstream is(read_text_file(dir / "manifest.txt"));
    std::size_t loaded = 0;
    for (std::string line; std::getline(is, line);) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string name, file;
        if (!(ls >> name >> file)) throw ConfigError("weights manifest: malformed line '" + line + "'");
        auto it = params.find(name);
        if (it == params.end()) throw ConfigError("weights manifest: unknown tensor '" + name + "'");
        Tensor t = read_tensor(dir / file);
        if (!t.same_shape(*it->second)) {
            throw ConfigError("weights: '" + name + "' has shape " + shape_str(t.shape()) + ", model expects " +
                              shape_str(it->second->shape()));
        }
        *it->second = std::move(t);
        ++loaded;
    }
    if (loaded != params.size()) {
        throw ConfigError("weights manifest lists " + std::to_string(loaded) + " of " + std::to_string(params.size()) + " tensors");
    }
    return model;
}

ag::Var ParamBinder::bind(const Tensor& t) {
    auto it = vars_.find(&t);
    if (it != vars_.end()) return it->second;
    ag::Var v = ag::parameter(t);
    vars_.emplace(&t, v);
    return v;
}

namespace {

ag::Var run_dense(FramePass& pass, const std::string& name, const ag::Var& x) {
    const ConvSpec& spec = pass.model->dense(name);
    ag::Var out;
    if (pass.binder) {
        std::optional<ag::Var> bias;
        if (spec.bias) bias = pass.binder->bind(*spec.bias);
        out = ag::conv2d(x, pass.binder->bind(spec.kernel), bias, spec.stride, spec.padding);
    } else {
        MacCounter counter;
        out = ag::constant(conv2d_dense(x.value(), spec, &counter));
        if (pass.stats) pass.stats->conv.macs += counter.macs;
    }
    if (pass.report) {
        pass.report->layers.push_back(
            dense_record(name, module_of_layer(name), layer_cost(spec), out.shape()[1] * out.shape()[2]));
    }
    return out;
}

ag::Var run_sparse(FramePass& pass, const std::string& name, const ag::Var& x, Processing mode) {
    SparseLayer& layer = pass.model->sparse(name);
    const Module module = module_of_layer(name);
    SparseOptions opts;
    opts.noise.rng = pass.noise;
    opts.forced_policy = layer.gate ? pass.forced_policy : std::nullopt;
    opts.frame_index = static_cast<long>(pass.frame_index);
    if (pass.stats && mode == Processing::Sparse) ++pass.stats->sparse_invocations[static_cast<std::size_t>(module)];

    ag::Var out;
    std::optional<SparseMask> mask;
    std::uint64_t gate_flops = 0;
    if (pass.binder) {
        LayerVars vars;
        vars.kernel = pass.binder->bind(layer.spec.kernel);
        if (layer.spec.bias) vars.bias = pass.binder->bind(*layer.spec.bias);
        if (layer.gate) {
            vars.gate_kernel = pass.binder->bind(layer.gate->conv.kernel);
            if (layer.gate->conv.bias) vars.gate_bias = pass.binder->bind(*layer.gate->conv.bias);
        }
        SparseGraphResult r = sparse_forward_graph(layer, vars, x, mode, opts);
        out = r.output;
        mask = r.mask;
        gate_flops = r.gate_flops;
        if (r.soft && pass.gates) pass.gates->push_back({name, layer.gate->kind, *r.soft, *r.mask, layer_cost(layer.spec)});
    } else {
        MacCounter conv, gate;
        opts.counter = &conv;
        opts.gate_counter = &gate;
        SparseResult r = sparse_forward(layer, x.value(), nullptr, mode, opts);
        if (pass.stats) {
            pass.stats->conv.macs += conv.macs;
            pass.stats->gate.macs += gate.macs;
        }
        out = ag::constant(std::move(r.output));
        mask = std::move(r.mask);
        gate_flops = r.gate_flops;
    }
    if (pass.report) {
        const std::uint64_t area = out.shape()[1] * out.shape()[2];
        pass.report->layers.push_back(mask ? mask_record(name, module, layer_cost(layer.spec), *mask, gate_flops)
                                           : dense_record(name, module, layer_cost(layer.spec), area));
    }
    if (pass.masks && mask) pass.masks->push_back({pass.frame_index, name, *mask});
    return out;
}

ag::Var run_conv(FramePass& pass, const std::string& name, const ag::Var& x, Processing mode) {
    return pass.model->has_sparse(name) ? run_sparse(pass, name, x, mode) : run_dense(pass, name, x);
}

ag::Var residual_block(FramePass& pass, const std::string& prefix, const ag::Var& x, Processing mode) {
    const ag::Var y = run_conv(pass, prefix + ".conv2", ag::relu(run_conv(pass, prefix + ".conv1", x, mode)), mode);
    const std::string skip = prefix + ".skip";
    const ag::Var identity = pass.model->has_dense(skip) ? run_dense(pass, skip, x) : x;
    return ag::relu(ag::add(y, identity));
}

ag::Var flatten(const ag::Var& x) { return ag::reshape(x, {x.shape()[0], x.shape()[1] * x.shape()[2]}); }

}  // namespace

QueryFeatures encode_query(FramePass& pass, const ag::Var& frame) {
    if (frame.value().ndim() != 3 || frame.shape()[0] != 3) throw ShapeError("encode_query: frame must be 3 x H x W");
    if (frame.shape()[1] % 16 != 0 || frame.shape()[2] % 16 != 0) {
        throw ShapeError("encode_query: resolution " + shape_str(frame.shape()) + " is not divisible by 16");
    }
    const Processing mode = pass.policy.processing;
    QueryFeatures q;
    const ag::Var stem = ag::relu(run_dense(pass, "q.stem", frame));
    q.f4 = residual_block(pass, "q.b1", stem, mode);
    q.f8 = residual_block(pass, "q.b2", q.f4, mode);
    q.f16 = residual_block(pass, "q.b3", q.f8, mode);
    q.key = flatten(run_dense(pass, "q.key", q.f16));
    q.value = flatten(run_dense(pass, "q.value", q.f16));
    return q;
}

ag::Var encode_memory(FramePass& pass, const ag::Var& frame, const Tensor& mask, const ag::Var& query_f16) {
    const std::size_t h = frame.shape()[1], w = frame.shape()[2];
    const Tensor m = mask.ndim() == 2 ? mask.reshaped({1, mask.dim(0), mask.dim(1)}) : mask;
    if (m.ndim() != 3 || m.dim(0) != 1 || m.dim(1) != h || m.dim(2) != w) {
        throw ShapeError("encode_memory: mask " + shape_str(mask.shape()) + " vs frame " + shape_str(frame.shape()));
    }
    Tensor centred = scale(m, 2.0);
    for (double& v : centred.data()) v -= 1.0;
    const Processing mode = pass.policy.memory_processing;
    ag::Var x = ag::relu(run_dense(pass, "m.stem", ag::concat({frame, ag::constant(centred)}, 0)));
    x = residual_block(pass, "m.b1", x, mode);
    x = residual_block(pass, "m.b2", x, mode);
    x = residual_block(pass, "m.b3", x, mode);
    if (x.shape()[1] != query_f16.shape()[1] || x.shape()[2] != query_f16.shape()[2]) {
        throw ShapeError("encode_memory: memory features " + shape_str(x.shape()) + " vs query f16 " +
                         shape_str(query_f16.shape()));
    }
    x = ag::concat({x, query_f16}, 0);
    x = residual_block(pass, "m.f1", x, Processing::Dense);
    x = residual_block(pass, "m.f2", x, Processing::Dense);
    return flatten(x);
}

ag::Var decode(FramePass& pass, const ag::Var& readout, const QueryFeatures& q) {
    const std::size_t h16 = q.f16.shape()[1], w16 = q.f16.shape()[2];
    if (readout.value().ndim() != 2 || readout.shape()[1] != h16 * w16) {
        throw ShapeError("decode: readout " + shape_str(readout.shape()) + " does not match " + std::to_string(h16) + "x" +
                         std::to_string(w16));
    }
    const Processing mode = pass.policy.processing;
    ag::Var x = ag::reshape(readout, {readout.shape()[0], h16, w16});
    x = ag::relu(run_dense(pass, "d.compress", x));
    x = ag::upsample_bilinear(x, 2 * h16, 2 * w16);
    x = ag::add(x, run_dense(pass, "d.skip8", q.f8));
    x = residual_block(pass, "d.r1", x, mode);
    x = ag::upsample_bilinear(x, 4 * h16, 4 * w16);
    x = ag::add(x, run_dense(pass, "d.skip4", q.f4));
    x = residual_block(pass, "d.r2", x, mode);
    x = run_dense(pass, "d.head", x);
    return ag::upsample_bilinear(x, 16 * h16, 16 * w16);
}

namespace {

ag::Var predict(FramePass& pass, const QueryFeatures& q, const ag::Var& keys, const ag::Var& values) {
    return decode(pass, ag::readout(q.value, values, ag::similarity(q.key, keys)), q);
}

Tensor foreground_probability(const Tensor& logits) {
    const Tensor p = softmax(logits, 0);
    return slice(p, 0, 1, 2).reshaped({logits.dim(1), logits.dim(2)});
}

void add_stats(PassStats& into, const PassStats& s) {
    for (std::size_t i = 0; i < 3; ++i) into.sparse_invocations[i] += s.sparse_invocations[i];
    into.conv.macs += s.conv.macs;
    into.gate.macs += s.gate.macs;
}

void check_policy(const FramePolicy& p, Strategy strategy, std::size_t frame) {
    const bool ok = frame == 0 || strategy == Strategy::Dense
                        ? p.processing == Processing::Dense && p.memory_processing == Processing::Dense
                        : strategy == Strategy::Mixed
                              ? (p.memory ? p.processing == Processing::Dense : p.processing == Processing::Sparse) &&
                                    p.memory_processing == Processing::Dense
                              : p.processing == Processing::Sparse;
    if (!ok) throw ContractError("frame policy invariant violated at frame " + std::to_string(frame));
}

}  // namespace

SegmentResult segment_video(Model& model, const VideoSequence& seq, const SegmentOptions& opts) {
    if (seq.frames.empty()) throw ContractError("segment_video: empty sequence");
    if (seq.masks.empty()) throw ContractError("segment_video: the first frame's ground-truth mask is required");
    const std::size_t h = seq.height(), w = seq.width();
    if (h % 16 != 0 || w % 16 != 0) {
        throw ShapeError("segment_video: resolution " + std::to_string(w) + "x" + std::to_string(h) + " is not divisible by 16");
    }
    for (std::size_t t = 0; t < seq.frames.size(); ++t) {
        if (seq.frames[t].height != h || seq.frames[t].width != w || seq.frames[t].channels != 3) {
            throw ShapeError("segment_video: frame " + std::to_string(t) + " changes resolution or channel count");
        }
    }
    const Tensor& gt0 = seq.masks[0];
    if (gt0.size() != h * w) throw ShapeError("segment_video: first mask " + shape_str(gt0.shape()) + " vs frame size");

    const Strategy strategy = opts.strategy.value_or(model.config().strategy);
    const PipelineConfig& cfg = model.config();
    model.reset_states();
    model.set_train_mode(false);

    SegmentResult res;
    MemoryBank bank;
    auto memory_mask = [&](std::size_t t, const Tensor& fallback) -> Tensor {
        if (opts.apply_memory_overrides) {
            auto it = seq.memory_overrides.find(t);
            if (it != seq.memory_overrides.end()) return it->second;
        }
        return fallback;
    };

    for (std::size_t t = 0; t < seq.frames.size(); ++t) {
        FramePass pass;
        pass.model = &model;
        pass.frame_index = t;
        pass.policy = frame_policy(strategy, t, cfg.memory_interval, cfg.sparsify_memory_encoder);
        check_policy(pass.policy, strategy, t);
        pass.forced_policy = opts.forced_policy;
        FrameReport report;
        PassStats stats;
        pass.stats = &stats;
        if (t > 0) pass.report = &report;
        if (opts.keep_layer_masks) pass.masks = &res.layer_masks;

        const ag::Var frame = ag::constant(frame_tensor(seq.frames[t]));
        const QueryFeatures q = encode_query(pass, frame);
        if (t == 0) {
            const Tensor gt = gt0.reshaped({h, w});
            const ag::Var value = encode_memory(pass, frame, memory_mask(0, gt), q.f16);
            append_memory(bank, q.key.value(), value.value());
            // primes the decoder states for the first sparse frame
            predict(pass, q, ag::constant(bank.keys), ag::constant(bank.values));
            res.masks.push_back(gt);
            res.probabilities.push_back(gt);
        } else {
            const ag::Var logits = predict(pass, q, ag::constant(bank.keys), ag::constant(bank.values));
            Tensor prob = foreground_probability(logits.value());
            Tensor mask({h, w});
            for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = prob[i] > 0.5 ? 1.0 : 0.0;
            if (pass.policy.memory) {
                const ag::Var value = encode_memory(pass, frame, memory_mask(t, prob), q.f16);
                append_memory(bank, q.key.value(), value.value());
            }
            res.masks.push_back(std::move(mask));
            res.probabilities.push_back(std::move(prob));
            res.frame_reports.push_back(std::move(report));
            res.frame_stats.push_back(stats);
            add_stats(res.stats, stats);
        }
        res.policies.push_back(pass.policy);
        res.bank_columns.push_back(bank.columns());
    }
    if (!res.frame_reports.empty()) res.report = aggregate(res.frame_reports);
    return res;
}

std::string train_log_line(const TrainLogRow& r) {
    std::ostringstream os;
    os << r.iteration;
    for (double v : {r.l_seg, r.l_layer, r.l_global, r.hard_sparsity, r.t_upper, r.t_lower, r.lr, r.loss}) os << ',' << format_real(v);
    return os.str();
}

namespace {

struct AdamState {
    std::vector<Tensor> m, v;
};

constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.999;
constexpr double kEps = 1e-8;
constexpr double kTwinProbability = 0.5;

std::size_t compute_channel(GateKind kind) {
    const auto policies = gate_policies(kind);
    return static_cast<std::size_t>(std::find(policies.begin(), policies.end(), Policy::Compute) - policies.begin());
}

struct StepOutcome {
    TrainLogRow row;
    std::vector<Tensor> grads;
    bool finite = true;
};

// Consecutive frames from the first to the last sampled frame; `key` holds
// the positions of the three sampled frames.
struct Clip {
    std::vector<Tensor> frames;  // 3 x H x W
    std::vector<Tensor> masks;   // H x W
    std::array<std::size_t, 3> key{};
};

// Pastes a shifted copy of the labeled object into every clip frame and labels
// the original or the copy at random, so only the memory tells them apart.
// Offsets that leave the frame or overlap the original are rejected.
void paste_twin(Clip& clip, Rng& rng) {
    const std::size_t h = clip.masks[0].dim(0), w = clip.masks[0].dim(1);
    for (int attempt = 0; attempt < 16; ++attempt) {
        const long dy = static_cast<long>(rng.below(h)) - static_cast<long>(h / 2);
        const long dx = static_cast<long>(rng.below(w)) - static_cast<long>(w / 2);
        bool ok = true;
        for (std::size_t k = 0; k < clip.frames.size() && ok; ++k)
            for (std::size_t y = 0; y < h && ok; ++y)
                for (std::size_t x = 0; x < w && ok; ++x) {
                    if (clip.masks[k][y * w + x] == 0.0) continue;
                    const long ty = static_cast<long>(y) + dy, tx = static_cast<long>(x) + dx;
                    ok = ty >= 0 && tx >= 0 && ty < static_cast<long>(h) && tx < static_cast<long>(w) &&
                         clip.masks[k][static_cast<std::size_t>(ty) * w + static_cast<std::size_t>(tx)] == 0.0;
                }
        if (!ok) continue;
        const bool label_copy = rng.below(2) == 1;
        for (std::size_t k = 0; k < clip.frames.size(); ++k) {
            Tensor moved({h, w});
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t x = 0; x < w; ++x) {
                    if (clip.masks[k][y * w + x] == 0.0) continue;
                    const std::size_t t = static_cast<std::size_t>(static_cast<long>(y) + dy) * w +
                                          static_cast<std::size_t>(static_cast<long>(x) + dx);
                    moved[t] = 1.0;
                    for (std::size_t c = 0; c < 3; ++c) clip.frames[k][c * h * w + t] = clip.frames[k][c * h * w + y * w + x];
                }
            if (label_copy) clip.masks[k] = std::move(moved);
        }
        return;
    }
}

// One transform for the whole clip: optional time reversal, a dihedral map of
// the image plane, a colour channel permutation, and a per-channel signed gain
// and offset.
Clip augment_clip(Clip clip, Rng& rng) {
    const std::size_t h = clip.masks[0].dim(0), w = clip.masks[0].dim(1);
    if (rng.uniform() < kTwinProbability) paste_twin(clip, rng);
    if (rng.below(2) == 1) {
        std::reverse(clip.frames.begin(), clip.frames.end());
        std::reverse(clip.masks.begin(), clip.masks.end());
        clip.key[1] = clip.key[2] - clip.key[1];
    }
    const bool transpose = h == w && rng.below(2) == 1;
    const bool flip_y = rng.below(2) == 1, flip_x = rng.below(2) == 1;
    std::array<std::size_t, 3> perm{0, 1, 2};
    for (std::size_t i = 2; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
    std::array<double, 3> gain{}, offset{};
    for (std::size_t c = 0; c < 3; ++c) {
        gain[c] = (rng.below(2) == 1 ? -1.0 : 1.0) * rng.uniform(0.6, 1.2);
        offset[c] = rng.uniform(-0.3, 0.3);
    }
    auto source = [&](std::size_t y, std::size_t x) {
        std::size_t sy = flip_y ? h - 1 - y : y, sx = flip_x ? w - 1 - x : x;
        if (transpose) std::swap(sy, sx);
        return sy * w + sx;
    };
    for (std::size_t k = 0; k < clip.frames.size(); ++k) {
        Tensor f({3, h, w}), m({h, w});
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                const std::size_t src = source(y, x);
                m[y * w + x] = clip.masks[k][src];
                for (std::size_t c = 0; c < 3; ++c)
                    f[(c * h + y) * w + x] = gain[c] * clip.frames[k][perm[c] * h * w + src] + offset[c];
            }
        clip.frames[k] = std::move(f);
        clip.masks[k] = std::move(m);
    }
    return clip;
}

StepOutcome train_step(Model& model, const Clip& clip, std::size_t first_frame, long iteration, Rng& noise) {
    const std::size_t t1 = first_frame + clip.key[0], t2 = first_frame + clip.key[1], t3 = first_frame + clip.key[2];
    const PipelineConfig& cfg = model.config();
    model.reset_states();
    model.set_train_mode(true);
    ParamBinder binder;

    // frames 1 and 2 stand in for memory frames, frame 3 for a query frame
    FramePolicy p1, p2, p3;
    p1.memory = p2.memory = true;
    if (cfg.strategy == Strategy::Mixed) {
        p3.processing = Processing::Sparse;
    } else if (cfg.strategy != Strategy::Dense) {
        p2.processing = p3.processing = Processing::Sparse;
        if (cfg.sparsify_memory_encoder) p2.memory_processing = Processing::Sparse;
    }

    std::vector<GateTrace> gates;
    auto make_pass = [&](const FramePolicy& p, std::size_t frame, bool trace) {
        FramePass pass;
        pass.model = &model;
        pass.binder = &binder;
        pass.policy = p;
        pass.frame_index = frame;
        pass.noise = &noise;
        if (trace) pass.gates = &gates;
        return pass;
    };
    const double boot = cfg.loss.bootstrap.fraction(iteration, std::max(cfg.iterations, 1L));
    // Unsampled frames between two sampled ones run without gradients or gate
    // noise, as inference would run them, so that sparse layers see the same states.
    auto refresh_between = [&](std::size_t from, std::size_t to, const FramePolicy& p, const ag::Var& keys,
                               const ag::Var& values) {
        if (p.processing != Processing::Sparse || from + 1 >= to) return;
        const ag::Var k = ag::constant(keys.value()), v = ag::constant(values.value());
        for (std::size_t i = from + 1; i < to; ++i) {
            FramePass pass;
            pass.model = &model;
            pass.policy = p;
            pass.policy.memory = false;
            pass.frame_index = first_frame + i;
            pass.noise = &noise;
            predict(pass, encode_query(pass, ag::constant(clip.frames[i])), k, v);
        }
    };

    FramePass pass1 = make_pass(p1, t1, false);
    const ag::Var frame1 = ag::constant(clip.frames[clip.key[0]]);
    const QueryFeatures q1 = encode_query(pass1, frame1);
    ag::Var keys = q1.key;
    ag::Var values = encode_memory(pass1, frame1, clip.masks[clip.key[0]], q1.f16);
    if (p2.processing == Processing::Sparse) predict(pass1, q1, keys, values);
    refresh_between(clip.key[0], clip.key[1], p2, keys, values);

    FramePass pass2 = make_pass(p2, t2, false);
    const ag::Var frame2 = ag::constant(clip.frames[clip.key[1]]);
    const QueryFeatures q2 = encode_query(pass2, frame2);
    const ag::Var logits2 = predict(pass2, q2, keys, values);
    const ag::Var ce2 = bootstrapped_ce(logits2, clip.masks[clip.key[1]], boot);
    // memory-encoder gates only ever run on memorized frames
    if (p2.memory_processing == Processing::Sparse) pass2.gates = &gates;
    const ag::Var value2 = encode_memory(pass2, frame2, foreground_probability(logits2.value()), q2.f16);
    keys = ag::concat({keys, q2.key}, 1);
    values = ag::concat({values, value2}, 1);
    refresh_between(clip.key[1], clip.key[2], p3, keys, values);

    FramePass pass3 = make_pass(p3, t3, true);
    const ag::Var frame3 = ag::constant(clip.frames[clip.key[2]]);
    const QueryFeatures q3 = encode_query(pass3, frame3);
    const ag::Var logits3 = predict(pass3, q3, keys, values);
    const ag::Var ce3 = bootstrapped_ce(logits3, clip.masks[clip.key[2]], boot);
    const ag::Var seg = ag::add(ce2, ce3);

    ScheduleState sched{cfg.loss.sparse_target, cfg.loss.sparse_target, iteration, std::max(cfg.iterations, 1L)};
    sched = relax_bounds(sched, cfg.loss.sparse_target);

    StepOutcome out;
    out.row.iteration = iteration;
    out.row.t_upper = sched.t_upper;
    out.row.t_lower = sched.t_lower;
    out.row.lr = learning_rate_at(cfg, iteration);
    out.row.l_seg = seg.value().item();

    std::vector<ag::Var> layer_losses;
    std::vector<LayerCost> costs;
    double hard_num = 0, hard_den = 0;
    for (const auto& g : gates) {
        const ag::Var s = soft_sparsity(g.soft, compute_channel(g.kind));
        const double area = static_cast<double>(g.hard.area());
        costs.push_back({s, static_cast<double>(g.c_k), area});
        if (cfg.loss.objective == SparseObjective::Banded) layer_losses.push_back(layer_sparse_loss(s, sched));
        hard_num += static_cast<double>(g.c_k) * static_cast<double>(g.hard.count(Policy::Compute));
        hard_den += static_cast<double>(g.c_k) * area;
    }
    out.row.hard_sparsity = hard_den > 0 ? hard_num / hard_den : 1.0;

    ag::Var loss = seg;
    if (!costs.empty()) {
        const ag::Var global = cfg.loss.objective == SparseObjective::Banded
                                   ? global_sparse_loss(costs, cfg.loss.sparse_target)
                                   : weighted_sparsity(costs);
        loss = total_loss(seg, layer_losses, global, cfg.loss);
        for (const auto& l : layer_losses) out.row.l_layer += l.value().item();
        out.row.l_global = global.value().item();
    }
    out.row.loss = loss.value().item();
    if (!std::isfinite(out.row.loss)) {
        out.finite = false;
        return out;
    }

    const ag::Gradients grads = ag::backward(loss);
    for (const auto& p : model.parameters()) {
        auto it = binder.bound().find(p.tensor);
        Tensor g = it == binder.bound().end() ? Tensor(p.tensor->shape()) : grads.of(it->second);
        if (!g.all_finite()) out.finite = false;
        out.grads.push_back(std::move(g));
    }
    return out;
}

}  // namespace

TrainResult train(Model& model, const std::vector<VideoSequence>& data, const std::function<void(const TrainLogRow&)>& on_step) {
    const PipelineConfig& cfg = model.config();
    TrainResult result;
    if (cfg.iterations == 0) return result;
    if (data.empty()) throw ContractError("train: empty dataset");
    for (const auto& seq : data) {
        if (seq.frames.size() < 3 || seq.masks.size() != seq.frames.size()) {
            throw ContractError("train: sequence '" + seq.name + "' needs >= 3 frames, each with a mask");
        }
        if (seq.height() % 16 != 0 || seq.width() % 16 != 0) {
            throw ShapeError("train: sequence '" + seq.name + "' resolution is not divisible by 16");
        }
    }

    Rng sampler(cfg.seed ^ 0xC11Bu);
    Rng noise(cfg.seed ^ 0x6A7Eu);
    auto params = model.parameters();
    AdamState adam;
    for (const auto& p : params) {
        adam.m.emplace_back(p.tensor->shape());
        adam.v.emplace_back(p.tensor->shape());
    }

    for (long it = 0; it < cfg.iterations; ++it) {
        // the iteration's gradient and log row are means over the clip batch
        StepOutcome step;
        const double inv_batch = 1.0 / static_cast<double>(cfg.batch_size);
        for (std::size_t b = 0; b < cfg.batch_size && !result.diverged; ++b) {
            const VideoSequence& seq = data[sampler.below(data.size())];
            const std::size_t frames = seq.frames.size();
            const std::size_t max_gap = std::max<std::size_t>(1, std::min(cfg.clip_max_gap, (frames - 1) / 2));
            const std::size_t g2 = 1 + sampler.below(max_gap), g3 = 1 + sampler.below(max_gap);
            const std::size_t t1 = sampler.below(frames - g2 - g3);

            Clip clip;
            clip.key = {0, g2, g2 + g3};
            for (std::size_t k = 0; k <= g2 + g3; ++k) {
                clip.frames.push_back(frame_tensor(seq.frames[t1 + k]));
                clip.masks.push_back(seq.masks[t1 + k].reshaped({seq.height(), seq.width()}));
            }
            if (cfg.augment) clip = augment_clip(std::move(clip), sampler);

            StepOutcome one;
            try {
                one = train_step(model, clip, t1, it, noise);
            } catch (const NumericError& e) {
                result.diverged = true;
                result.diagnostic = "iteration " + std::to_string(it) + ": " + e.what();
                break;
            }
            if (!one.finite) {
                result.diverged = true;
                result.diagnostic = "iteration " + std::to_string(it) + ": non-finite loss or gradient (loss " +
                                    format_real(one.row.loss) + ")";
                break;
            }
            if (b == 0) {
                step.row = one.row;
                step.row.l_seg = step.row.l_layer = step.row.l_global = step.row.hard_sparsity = step.row.loss = 0;
                for (const auto& g : one.grads) step.grads.emplace_back(g.shape());
            }
            step.row.l_seg += inv_batch * one.row.l_seg;
            step.row.l_layer += inv_batch * one.row.l_layer;
            step.row.l_global += inv_batch * one.row.l_global;
            step.row.hard_sparsity += inv_batch * one.row.hard_sparsity;
            step.row.loss += inv_batch * one.row.loss;
            for (std::size_t i = 0; i < one.grads.size(); ++i) {
                auto acc = step.grads[i].data();
                const auto g = one.grads[i].data();
                for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += inv_batch * g[j];
            }
        }
        if (result.diverged) break;

        double norm2 = 0;
        for (const auto& g : step.grads)
            for (double v : g.data()) norm2 += v * v;
        const double norm = std::sqrt(norm2);
        const double clip_scale = cfg.grad_clip > 0 && norm > cfg.grad_clip ? cfg.grad_clip / norm : 1.0;

        const double lr = step.row.lr;
        const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(it + 1));
        const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(it + 1));
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto w = params[i].tensor->data();
            auto m = adam.m[i].data();
            auto v = adam.v[i].data();
            const auto g = step.grads[i].data();
            const double decay = params[i].decay ? cfg.weight_decay : 0.0;
            const double step_lr = params[i].name.find(".gate.") != std::string::npos ? lr * cfg.gate_lr_scale : lr;
            for (std::size_t j = 0; j < w.size(); ++j) {
                const double gj = g[j] * clip_scale;
                m[j] = kBeta1 * m[j] + (1 - kBeta1) * gj;
                v[j] = kBeta2 * v[j] + (1 - kBeta2) * gj * gj;
                w[j] -= step_lr * (decay * w[j] + (m[j] / bc1) / (std::sqrt(v[j] / bc2) + kEps));
            }
        }
        result.log.push_back(step.row);
        if (on_step) on_step(step.row);
    }
    model.reset_states();
    model.set_train_mode(false);
    return result;
}

}  // namespace trisparse
