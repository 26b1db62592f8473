#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "trisparse/autograd.hpp"
#include "trisparse/config.hpp"
#include "trisparse/flops.hpp"
#include "trisparse/losses.hpp"
#include "trisparse/matching.hpp"
#include "trisparse/sparse_conv.hpp"
#include "trisparse/synth.hpp"

namespace trisparse {

/// Which frames run sparse. Dense runs every frame dense (reference runs).
enum class Strategy { Fully, SemiMixed, Mixed, Dense };
/// Gate family of every sparse layer; Dense builds no gates.
enum class Variant { Triple, Static, Residual, Dense };

std::string to_string(Strategy s);
Strategy strategy_from_string(const std::string& name);
std::string to_string(Variant v);
Variant variant_from_string(const std::string& name);
std::optional<GateKind> gate_kind_of(Variant v);

struct FramePolicy {
    bool memory = false;
    Processing processing = Processing::Dense;         // query encoder and decoder
    Processing memory_processing = Processing::Dense;  // memory encoder
};

/// Frame 0 is always a dense memory frame; afterwards every `interval`-th frame
/// is memorized. Mixed runs memory frames dense and the rest sparse; fully and
/// semi-mixed run everything after frame 0 sparse (they differ only in which
/// frames are annotated, and only frame 0 is). The memory encoder goes sparse
/// only outside mixed processing and only with `sparsify_memory_encoder`.
FramePolicy frame_policy(Strategy strategy, std::size_t frame, std::size_t interval, bool sparsify_memory_encoder);

struct PipelineConfig {
    Variant variant = Variant::Triple;
    Strategy strategy = Strategy::Mixed;
    std::size_t stem_width = 8;
    std::array<std::size_t, 3> stage_widths{8, 16, 32};
    std::size_t decoder_width = 16;
    std::size_t key_dim = 8;
    std::size_t value_dim = 32;
    std::size_t memory_interval = 5;
    bool sparsify_memory_encoder = false;
    double tau = 1.0;
    std::uint64_t seed = 1;

    long iterations = 2000;
    double learning_rate = 3e-3;
    double weight_decay = 0.05;
    double warmup_fraction = 0.05;
    double flat_fraction = 0.2;  // constant phase after warmup, then cosine decay
    double min_lr_ratio = 0.05;
    double gate_lr_scale = 10.0;
    double grad_clip = 5.0;  // global L2 norm, 0 disables
    std::size_t clip_max_gap = 6;  // frames between sampled clip frames
    std::size_t batch_size = 4;
    bool augment = true;
    LossConfig loss;

    void validate() const;
};

/// Every PipelineConfig key, documented, bound to `cfg`.
std::vector<ConfigField> pipeline_fields(PipelineConfig& cfg);

/// Learning rate at `iteration`: linear warmup, flat phase, cosine decay.
double learning_rate_at(const PipelineConfig& cfg, long iteration);

/// Weights and per-layer temporal state of the segmentation network.
class Model {
public:
    explicit Model(PipelineConfig cfg);

    const PipelineConfig& config() const { return cfg_; }

    bool has_dense(const std::string& name) const { return dense_.count(name) > 0; }
    bool has_sparse(const std::string& name) const { return sparse_index_.count(name) > 0; }
    ConvSpec& dense(const std::string& name);
    const ConvSpec& dense(const std::string& name) const;
    SparseLayer& sparse(const std::string& name);
    const SparseLayer& sparse(const std::string& name) const;
    const std::vector<SparseLayer>& sparse_layers() const { return sparse_; }

    void reset_states();
    void set_train_mode(bool on);

    struct NamedTensor {
        std::string name;
        Tensor* tensor;
        bool decay;  // kernels decay, biases do not
    };
    /// All trainable tensors in a fixed order.
    std::vector<NamedTensor> parameters();

private:
    void add_dense(const std::string& name, std::size_t ci, std::size_t co, std::size_t k, std::size_t stride, Rng& rng);
    void add_sparse(const std::string& name, std::size_t ci, std::size_t co, std::size_t stride, bool gated, Rng& rng);
    void add_block(const std::string& prefix, std::size_t ci, std::size_t co, std::size_t stride, bool sparse, bool gated,
                   Rng& rng);

    PipelineConfig cfg_;
    std::map<std::string, ConvSpec> dense_;
    std::vector<SparseLayer> sparse_;
    std::map<std::string, std::size_t> sparse_index_;
};

Module module_of_layer(const std::string& layer_id);

/// Directory of tensor files plus manifest.txt (name file shape) and config.txt.
void save_weights(Model& model, const std::filesystem::path& dir);
Model load_weights(const std::filesystem::path& dir);

/// Trainable leaves for one optimisation step, one per model tensor.
class ParamBinder {
public:
    ag::Var bind(const Tensor& t);
    const std::map<const Tensor*, ag::Var>& bound() const { return vars_; }

private:
    std::map<const Tensor*, ag::Var> vars_;
};

struct GateTrace {
    std::string layer_id;
    GateKind kind = GateKind::Triple;
    ag::Var soft;
    SparseMask hard;
    std::uint64_t c_k = 0;
};

struct LayerMask {
    std::size_t frame = 0;
    std::string layer_id;
    SparseMask mask;
};

struct PassStats {
    std::array<std::uint64_t, 3> sparse_invocations{};  // per Module
    MacCounter conv;
    MacCounter gate;
};

/// Settings of one frame's forward pass. With a binder the pass builds a
/// differentiable graph; without one it executes sparse layers for real.
struct FramePass {
    Model* model = nullptr;
    ParamBinder* binder = nullptr;
    FramePolicy policy;
    std::size_t frame_index = 0;
    Rng* noise = nullptr;
    std::optional<Policy> forced_policy;
    FrameReport* report = nullptr;
    std::vector<GateTrace>* gates = nullptr;
    std::vector<LayerMask>* masks = nullptr;
    PassStats* stats = nullptr;
};

struct QueryFeatures {
    ag::Var key;    // C_k x L
    ag::Var value;  // C_v x L
    ag::Var f16, f8, f4;
};

QueryFeatures encode_query(FramePass& pass, const ag::Var& frame);
/// Memory value (C_v x L) of a frame and its mask (H x W, values in [0, 1]).
ag::Var encode_memory(FramePass& pass, const ag::Var& frame, const Tensor& mask, const ag::Var& query_f16);
/// Matching readout against the bank, then decoding to 2 x H x W logits.
ag::Var decode(FramePass& pass, const ag::Var& readout, const QueryFeatures& q);

struct SegmentOptions {
    std::optional<Strategy> strategy;  // overrides the model's
    std::optional<Policy> forced_policy;
    bool apply_memory_overrides = true;
    bool keep_layer_masks = false;
};

struct SegmentResult {
    std::vector<Tensor> masks;          // H x W, {0, 1}
    std::vector<Tensor> probabilities;  // foreground probability
    std::vector<FramePolicy> policies;
    std::vector<FrameReport> frame_reports;  // frames 1..F-1
    SparsityReport report;
    std::vector<PassStats> frame_stats;  // frames 1..F-1
    PassStats stats;                     // summed over frames 1..F-1
    std::vector<LayerMask> layer_masks;
    std::vector<std::size_t> bank_columns;  // after each frame
};

/// Semi-supervised segmentation from the first frame's mask. The first frame
/// initialises the memory and all layer states and is not part of the report.
SegmentResult segment_video(Model& model, const VideoSequence& seq, const SegmentOptions& opts = {});

struct TrainLogRow {
    long iteration = 0;
    double l_seg = 0, l_layer = 0, l_global = 0, hard_sparsity = 0, t_upper = 0, t_lower = 0, lr = 0, loss = 0;
};

inline constexpr const char* kTrainLogHeader = "iteration,l_seg,l_layer,l_global,hard_sparsity,t_upper,t_lower,lr,loss";
std::string train_log_line(const TrainLogRow& row);

struct TrainResult {
    std::vector<TrainLogRow> log;
    bool diverged = false;
    std::string diagnostic;
};

/// Three-frame clip training. On a non-finite loss or gradient the step is not
/// applied, training stops and `diverged` is set; the model keeps the last
/// good weights.
TrainResult train(Model& model, const std::vector<VideoSequence>& data,
                  const std::function<void(const TrainLogRow&)>& on_step = {});

}  // namespace trisparse
