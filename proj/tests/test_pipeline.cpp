#include <doctest.h>

#include <filesystem>
#include <random>

#include "oracles.hpp"
#include "trisparse/pipeline.hpp"

using namespace trisparse;

namespace {

VideoSequence make_video(std::uint64_t seed, std::size_t res = 32, std::size_t frames = 8, Preset preset = Preset::Default) {
    Rng rng(seed);
    return generate(make_scene(preset, rng, res, frames), seed + 1);
}

PipelineConfig small_config() {
    PipelineConfig c;
    c.iterations = 3;
    c.batch_size = 1;
    return c;
}

// Random gate weights so that masks mix all policies.
void randomize_gates(Model& model, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (const auto& p : model.parameters()) {
        if (p.name.find(".gate.") == std::string::npos) continue;
        *p.tensor = oracle::random_tensor(p.tensor->shape(), rng, -0.5, 0.5);
    }
}

FramePass pass_for(Model& m, Processing mode, PassStats* stats = nullptr) {
    FramePass p;
    p.model = &m;
    p.policy.processing = mode;
    p.stats = stats;
    return p;
}

SegmentOptions with_strategy(Strategy s) {
    SegmentOptions o;
    o.strategy = s;
    return o;
}

SegmentOptions without_overrides() {
    SegmentOptions o;
    o.apply_memory_overrides = false;
    return o;
}

SegmentOptions keeping_masks() {
    SegmentOptions o;
    o.keep_layer_masks = true;
    return o;
}

double mean_j(const SegmentResult& r, const VideoSequence& s) {
    double j = 0;
    for (std::size_t t = 1; t < s.frames.size(); ++t) j += region_similarity(r.masks[t], s.masks[t]);
    return j / static_cast<double>(s.frames.size() - 1);
}

}  // namespace

TEST_CASE("frame policies per strategy") {
    for (std::size_t t = 0; t < 12; ++t) {
        const auto mixed = frame_policy(Strategy::Mixed, t, 5, true);
        CHECK(mixed.memory == (t % 5 == 0));
        CHECK(mixed.processing == (mixed.memory ? Processing::Dense : Processing::Sparse));
        CHECK(mixed.memory_processing == Processing::Dense);

        for (Strategy s : {Strategy::Fully, Strategy::SemiMixed}) {
            const auto p = frame_policy(s, t, 5, true);
            CHECK(p.processing == (t == 0 ? Processing::Dense : Processing::Sparse));
            CHECK(p.memory_processing == (t == 0 ? Processing::Dense : Processing::Sparse));
            CHECK(frame_policy(s, t, 5, false).memory_processing == Processing::Dense);
        }
        const auto dense = frame_policy(Strategy::Dense, t, 5, true);
        CHECK(dense.processing == Processing::Dense);
        CHECK(dense.memory_processing == Processing::Dense);
    }
    CHECK(frame_policy(Strategy::Mixed, 0, 1, false).memory);
    CHECK_THROWS_AS(frame_policy(Strategy::Mixed, 3, 0, false), ConfigError);
}

TEST_CASE("strategy and variant names round-trip") {
    for (Strategy s : {Strategy::Fully, Strategy::SemiMixed, Strategy::Mixed, Strategy::Dense})
        CHECK(strategy_from_string(to_string(s)) == s);
    for (Variant v : {Variant::Triple, Variant::Static, Variant::Residual, Variant::Dense})
        CHECK(variant_from_string(to_string(v)) == v);
    CHECK_THROWS_AS(strategy_from_string("sparse"), ConfigError);
    CHECK_FALSE(gate_kind_of(Variant::Dense).has_value());
    CHECK(*gate_kind_of(Variant::Static) == GateKind::Static);
}

TEST_CASE("model topology: gated sparse layers, dense stems, skips and heads") {
    Model m(small_config());
    CHECK(m.has_dense("q.stem"));
    CHECK(m.has_dense("q.b1.skip"));
    CHECK(m.has_dense("q.key"));
    CHECK(m.has_dense("m.f1.conv1"));
    CHECK(m.has_dense("d.head"));
    std::size_t gated = 0;
    for (const auto& l : m.sparse_layers()) {
        if (l.gate) {
            ++gated;
            CHECK(l.gate->kind == GateKind::Triple);
            CHECK(l.gate->conv.stride == l.spec.stride);
            CHECK(l.id.rfind("m.", 0) != 0);
        }
    }
    CHECK(gated == 10);  // 3 query blocks and 2 decoder blocks, two convolutions each

    PipelineConfig c = small_config();
    c.sparsify_memory_encoder = true;
    Model with_memory(c);
    CHECK(with_memory.sparse("m.b2.conv1").gate.has_value());
    c.variant = Variant::Dense;
    Model dense(c);
    for (const auto& l : dense.sparse_layers()) CHECK_FALSE(l.gate.has_value());
    CHECK(module_of_layer("d.r1.conv2") == Module::Decoder);
    CHECK_THROWS_AS(module_of_layer("x.conv"), ContractError);
}

TEST_CASE("encode_query and decode shapes at 64x64") {
    Model m(small_config());
    FramePass pass = pass_for(m, Processing::Dense);
    const auto seq = make_video(1, 64, 2);
    const ag::Var frame = ag::constant(frame_tensor(seq.frames[0]));
    const QueryFeatures q = encode_query(pass, frame);
    CHECK(q.f4.shape() == Shape{8, 16, 16});
    CHECK(q.f8.shape() == Shape{16, 8, 8});
    CHECK(q.f16.shape() == Shape{32, 4, 4});
    CHECK(q.key.shape() == Shape{8, 16});
    CHECK(q.value.shape() == Shape{32, 16});
    const ag::Var value = encode_memory(pass, frame, seq.masks[0], q.f16);
    CHECK(value.shape() == Shape{32, 16});
    const ag::Var logits = decode(pass, ag::readout(q.value, value, ag::similarity(q.key, q.key)), q);
    CHECK(logits.shape() == Shape{2, 64, 64});
}

TEST_CASE("decode logits are 2 x H x W for other resolutions divisible by 16") {
    Model m(small_config());
    for (std::size_t res : {16u, 48u}) {
        FramePass pass = pass_for(m, Processing::Dense);
        const auto seq = make_video(2, res, 1);
        const QueryFeatures q = encode_query(pass, ag::constant(frame_tensor(seq.frames[0])));
        const ag::Var v = encode_memory(pass, ag::constant(frame_tensor(seq.frames[0])), seq.masks[0], q.f16);
        CHECK(decode(pass, ag::readout(q.value, v, ag::similarity(q.key, q.key)), q).shape() == Shape{2, res, res});
    }
}

TEST_CASE("encode_query: sparse processing needs primed states") {
    Model m(small_config());
    FramePass pass = pass_for(m, Processing::Sparse);
    const auto seq = make_video(3, 32, 1);
    CHECK_THROWS_AS(encode_query(pass, ag::constant(frame_tensor(seq.frames[0]))), ContractError);
}

TEST_CASE("encode_query: forced all-compute sparse equals dense within 1e-10") {
    Model m(small_config());
    randomize_gates(m, 4);
    const auto seq = make_video(4, 32, 2);
    FramePass dense = pass_for(m, Processing::Dense);
    encode_query(dense, ag::constant(frame_tensor(seq.frames[0])));
    const ag::Var f1 = ag::constant(frame_tensor(seq.frames[1]));
    FramePass sparse = pass_for(m, Processing::Sparse);
    sparse.forced_policy = Policy::Compute;
    const QueryFeatures qs = encode_query(sparse, f1);
    m.reset_states();
    FramePass again = pass_for(m, Processing::Dense);
    const QueryFeatures qd = encode_query(again, f1);
    CHECK(max_abs_diff(qs.key.value(), qd.key.value()) <= 1e-10);
    CHECK(max_abs_diff(qs.value.value(), qd.value.value()) <= 1e-10);
    CHECK(max_abs_diff(qs.f4.value(), qd.f4.value()) <= 1e-10);
}

TEST_CASE("encode_memory: the mask channel is live and shape-checked") {
    Model m(small_config());
    FramePass pass = pass_for(m, Processing::Dense);
    const auto seq = make_video(5, 32, 1);
    const ag::Var frame = ag::constant(frame_tensor(seq.frames[0]));
    const QueryFeatures q = encode_query(pass, frame);
    Tensor ones({32, 32});
    for (double& v : ones.data()) v = 1.0;
    const Tensor a = encode_memory(pass, frame, Tensor({32, 32}), q.f16).value();
    const Tensor b = encode_memory(pass, frame, ones, q.f16).value();
    CHECK(max_abs_diff(a, b) > 0.0);
    CHECK_THROWS_AS(encode_memory(pass, frame, Tensor({16, 16}), q.f16), ShapeError);
}

TEST_CASE("memory keys are the memorized frames' query keys, bit for bit") {
    Model m(small_config());
    const auto seq = make_video(6, 32, 1);
    FramePass pass = pass_for(m, Processing::Dense);
    const ag::Var frame = ag::constant(frame_tensor(seq.frames[0]));
    const QueryFeatures q = encode_query(pass, frame);
    MemoryBank bank;
    append_memory(bank, q.key.value(), encode_memory(pass, frame, seq.masks[0], q.f16).value());
    CHECK(bank.keys == q.key.value());
}

TEST_CASE("segment_video: single-frame video returns the annotation and an empty report") {
    Model m(small_config());
    const auto seq = make_video(7, 32, 1);
    const auto r = segment_video(m, seq);
    REQUIRE(r.masks.size() == 1);
    CHECK(r.masks[0] == seq.masks[0]);
    CHECK(r.report.frames == 0);
    CHECK(r.report.layers.empty());
    CHECK(r.frame_reports.empty());
}

TEST_CASE("segment_video: first mask unchanged, bank grows by L at memory frames only") {
    PipelineConfig c = small_config();
    c.memory_interval = 3;
    Model m(c);
    const auto seq = make_video(8, 32, 8);
    const auto r = segment_video(m, seq);
    CHECK(r.masks[0] == seq.masks[0]);
    const std::size_t L = 4;
    for (std::size_t t = 0; t < seq.frames.size(); ++t) {
        const std::size_t before = t == 0 ? 0 : r.bank_columns[t - 1];
        CHECK(r.bank_columns[t] - before == (t % 3 == 0 ? L : 0));
        CHECK(r.policies[t].memory == (t % 3 == 0));
        for (double v : r.masks[t].data()) CHECK((v == 0.0 || v == 1.0));
    }
    CHECK(r.report.frames == seq.frames.size() - 1);
}

TEST_CASE("segment_video: mixed processing never runs memory-frame layers sparse") {
    PipelineConfig c = small_config();
    c.sparsify_memory_encoder = true;
    Model m(c);
    randomize_gates(m, 9);
    const auto seq = make_video(9, 32, 12);
    const auto r = segment_video(m, seq);
    CHECK(r.stats.sparse_invocations[static_cast<std::size_t>(Module::MemoryEncoder)] == 0);
    for (std::size_t t = 1; t < seq.frames.size(); ++t) {
        const auto& s = r.frame_stats[t - 1];
        const std::uint64_t total = s.sparse_invocations[0] + s.sparse_invocations[1] + s.sparse_invocations[2];
        if (r.policies[t].memory) CHECK(total == 0);
        else CHECK(total > 0);
    }

    const auto fully = segment_video(m, seq, with_strategy(Strategy::Fully));
    CHECK(fully.stats.sparse_invocations[static_cast<std::size_t>(Module::MemoryEncoder)] > 0);
}

TEST_CASE("segment_video: strategies coincide bit-wise under forced all-compute masks") {
    PipelineConfig c = small_config();
    c.sparsify_memory_encoder = true;
    Model m(c);
    randomize_gates(m, 10);
    const auto seq = make_video(10, 32, 9);
    SegmentOptions o;
    o.forced_policy = Policy::Compute;
    o.strategy = Strategy::Dense;
    const auto ref = segment_video(m, seq, o);
    for (Strategy s : {Strategy::Mixed, Strategy::SemiMixed, Strategy::Fully}) {
        o.strategy = s;
        const auto r = segment_video(m, seq, o);
        for (std::size_t t = 0; t < seq.frames.size(); ++t) {
            CHECK(r.masks[t] == ref.masks[t]);
            CHECK(max_abs_diff(r.probabilities[t], ref.probabilities[t]) <= 1e-8);
        }
        CHECK(r.report.totals().executed == ref.report.totals().executed);
    }
}

TEST_CASE("segment_video: mixed FLOPs below dense when any position is not computed") {
    Model m(small_config());
    randomize_gates(m, 11);
    const auto seq = make_video(11, 32, 8);
    const auto mixed = segment_video(m, seq);
    const auto dense = segment_video(m, seq, with_strategy(Strategy::Dense));
    bool any_non_compute = false;
    for (const auto& l : mixed.report.layers) any_non_compute |= l.policy2_count < l.area;
    REQUIRE(any_non_compute);
    CHECK(mixed.report.totals().executed < dense.report.totals().executed);
    CHECK(dense.report.totals().executed == dense.report.totals().dense);
    CHECK(mixed.report.totals().dense == dense.report.totals().dense);
    // counted MACs agree with the mask-derived totals
    CHECK(mixed.stats.conv.macs == mixed.report.totals().executed);
    CHECK(mixed.stats.gate.macs == mixed.report.totals().gate);
}

TEST_CASE("segment_video: memory overrides replace the memorized mask") {
    Model m(small_config());
    auto seq = make_video(12, 32, 8, Preset::ErroneousMemory);
    REQUIRE(seq.memory_overrides.count(5) == 1);
    const auto with = segment_video(m, seq);
    const auto without = segment_video(m, seq, without_overrides());
    for (std::size_t t = 0; t <= 5; ++t) CHECK(with.probabilities[t] == without.probabilities[t]);
    bool differs = false;
    for (std::size_t t = 6; t < 8; ++t) differs |= max_abs_diff(with.probabilities[t], without.probabilities[t]) > 0;
    CHECK(differs);
}

TEST_CASE("segment_video: input errors") {
    Model m(small_config());
    auto seq = make_video(13, 32, 3);
    VideoSequence no_mask = seq;
    no_mask.masks.clear();
    CHECK_THROWS_AS(segment_video(m, no_mask), ContractError);

    VideoSequence odd = seq;
    for (auto& f : odd.frames) f = Image8{24, 24, 3, std::vector<std::uint8_t>(24 * 24 * 3)};
    odd.masks[0] = Tensor({24, 24});
    CHECK_THROWS_AS(segment_video(m, odd), ShapeError);

    VideoSequence changed = seq;
    changed.frames[2] = Image8{48, 48, 3, std::vector<std::uint8_t>(48 * 48 * 3)};
    CHECK_THROWS_AS(segment_video(m, changed), ShapeError);
}

TEST_CASE("segment_video: layer masks are kept on request") {
    Model m(small_config());
    randomize_gates(m, 14);
    const auto seq = make_video(14, 32, 3);
    const auto r = segment_video(m, seq, keeping_masks());
    // two sparse frames, ten gated layers each
    CHECK(r.layer_masks.size() == 20);
    CHECK(segment_video(m, seq).layer_masks.empty());
}

TEST_CASE("weights round-trip through a directory") {
    PipelineConfig c = small_config();
    c.variant = Variant::Static;
    c.seed = 99;
    Model a(c);
    randomize_gates(a, 15);
    const auto dir = std::filesystem::temp_directory_path() / "trisparse_weights_test";
    std::filesystem::remove_all(dir);
    save_weights(a, dir);
    Model b = load_weights(dir);
    CHECK(b.config().variant == Variant::Static);
    CHECK(b.config().seed == 99);
    const auto pa = a.parameters(), pb = b.parameters();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) CHECK(*pa[i].tensor == *pb[i].tensor);
    const auto seq = make_video(15, 32, 4);
    CHECK(segment_video(a, seq).masks == segment_video(b, seq).masks);

    write_text_file(dir / "manifest.txt", "q.stem.kernel q.stem.kernel.tensor [8,3,3,3]\n");
    CHECK_THROWS_AS(load_weights(dir), ConfigError);
    std::filesystem::remove_all(dir);
}

TEST_CASE("learning rate schedule: warmup, flat phase, cosine floor") {
    PipelineConfig c;
    c.iterations = 1000;
    c.learning_rate = 1e-2;
    c.warmup_fraction = 0.1;
    c.flat_fraction = 0.2;
    c.min_lr_ratio = 0.05;
    CHECK(learning_rate_at(c, 0) == doctest::Approx(1e-4));
    CHECK(learning_rate_at(c, 99) == doctest::Approx(1e-2));
    CHECK(learning_rate_at(c, 250) == 1e-2);
    CHECK(learning_rate_at(c, 650) == doctest::Approx(0.5 * (1e-2 + 5e-4)));
    CHECK(learning_rate_at(c, 999) == doctest::Approx(5e-4).epsilon(1e-3));
    for (long it = 300; it < 999; ++it) CHECK(learning_rate_at(c, it + 1) <= learning_rate_at(c, it));
}

TEST_CASE("train: zero iterations leaves the initial weights") {
    PipelineConfig c = small_config();
    c.iterations = 0;
    Model a(c), b(c);
    const auto r = train(a, {});
    CHECK(r.log.empty());
    CHECK_FALSE(r.diverged);
    const auto pa = a.parameters(), pb = b.parameters();
    for (std::size_t i = 0; i < pa.size(); ++i) CHECK(*pa[i].tensor == *pb[i].tensor);
}

TEST_CASE("train: identical seeds give bit-identical logs and weights") {
    const std::vector<VideoSequence> data{make_video(16, 32, 8), make_video(17, 32, 8)};
    PipelineConfig c = small_config();
    c.iterations = 4;
    c.batch_size = 2;
    Model a(c), b(c);
    const auto ra = train(a, data), rb = train(b, data);
    REQUIRE(ra.log.size() == 4);
    REQUIRE(rb.log.size() == 4);
    for (std::size_t i = 0; i < 4; ++i) CHECK(train_log_line(ra.log[i]) == train_log_line(rb.log[i]));
    const auto pa = a.parameters(), pb = b.parameters();
    for (std::size_t i = 0; i < pa.size(); ++i) CHECK(*pa[i].tensor == *pb[i].tensor);

    c.seed = 2;
    Model d(c);
    const auto rd = train(d, data);
    CHECK(train_log_line(rd.log[0]) != train_log_line(ra.log[0]));
}

TEST_CASE("train: the gate learning rate multiplier scales only gate steps") {
    const std::vector<VideoSequence> data{make_video(19, 32, 8)};
    PipelineConfig c = small_config();
    c.iterations = 1;
    c.gate_lr_scale = 1.0;
    Model a(c);
    train(a, data);
    c.gate_lr_scale = 7.0;
    Model b(c);
    train(b, data);
    const auto pa = a.parameters(), pb = b.parameters();
    std::size_t moved = 0;
    for (std::size_t i = 0; i < pa.size(); ++i) {
        if (pa[i].name.find(".gate.") == std::string::npos) {
            CHECK(*pa[i].tensor == *pb[i].tensor);
            continue;
        }
        // gates start at zero, so the first step is the whole value
        for (std::size_t j = 0; j < pa[i].tensor->size(); ++j) {
            const double sa = (*pa[i].tensor)[j], sb = (*pb[i].tensor)[j];
            if (sa == 0.0) continue;
            ++moved;
            CHECK(sb / sa == doctest::Approx(7.0).epsilon(1e-12));
        }
    }
    CHECK(moved > 0);

    c.gate_lr_scale = 0.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("train: log rows carry the schedule and finite losses") {
    const std::vector<VideoSequence> data{make_video(18, 32, 8)};
    for (Strategy s : {Strategy::Mixed, Strategy::Fully, Strategy::Dense}) {
        PipelineConfig c = small_config();
        c.strategy = s;
        c.sparsify_memory_encoder = s == Strategy::Fully;
        c.iterations = 2;
        Model m(c);
        const auto r = train(m, data);
        REQUIRE(r.log.size() == 2);
        for (const auto& row : r.log) {
            CHECK(std::isfinite(row.loss));
            CHECK(row.l_seg > 0.0);
            CHECK(row.hard_sparsity >= 0.0);
            CHECK(row.hard_sparsity <= 1.0);
            CHECK(row.t_upper >= row.t_lower);
        }
        if (s == Strategy::Dense) {
            CHECK(r.log[0].hard_sparsity == 1.0);
            CHECK(r.log[0].l_global == 0.0);
        } else {
            CHECK(r.log[0].l_global > 0.0);
        }
    }
}

TEST_CASE("train: non-finite loss aborts with a diagnostic and keeps the weights") {
    const std::vector<VideoSequence> data{make_video(19, 32, 8)};
    PipelineConfig c = small_config();
    Model m(c);
    m.dense("d.head").kernel[0] = std::numeric_limits<double>::quiet_NaN();
    const auto before = *m.parameters()[0].tensor;
    const auto r = train(m, data);
    CHECK(r.diverged);
    CHECK(r.log.empty());
    CHECK_FALSE(r.diagnostic.empty());
    CHECK(*m.parameters()[0].tensor == before);
}

TEST_CASE("train: rejects unusable data") {
    PipelineConfig c = small_config();
    Model m(c);
    CHECK_THROWS_AS(train(m, {}), ContractError);
    CHECK_THROWS_AS(train(m, {make_video(20, 32, 2)}), ContractError);
}

TEST_CASE("a short training run changes the segmentation") {
    const std::vector<VideoSequence> data{make_video(21, 32, 8)};
    PipelineConfig c = small_config();
    c.iterations = 5;
    Model trained(c), initial(c);
    train(trained, data);
    const auto seq = make_video(22, 32, 6);
    const auto a = segment_video(trained, seq), b = segment_video(initial, seq);
    CHECK(max_abs_diff(a.probabilities[3], b.probabilities[3]) > 0.0);
    CHECK(mean_j(a, seq) >= 0.0);
}
