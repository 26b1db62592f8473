#include "trisparse/run_config.hpp"

#include <algorithm>
#include <cstdio>

#include "trisparse/error.hpp"
#include "trisparse/io.hpp"

namespace trisparse {

void DataConfig::validate() const {
    if (sequences == 0) throw ConfigError("sequences must be positive");
    if (frames == 0) throw ConfigError("frames must be positive");
    if (resolution == 0 || resolution % 16 != 0) {
        throw ConfigError("resolution must be a positive multiple of 16, got " + std::to_string(resolution));
    }
    if (!(noise_sigma >= 0.0)) throw ConfigError("noise_sigma must be non-negative");
}

std::vector<ConfigField> run_fields(RunConfig& cfg) {
    std::vector<ConfigField> fields = pipeline_fields(cfg.pipeline);
    DataConfig& d = cfg.data;
    fields.push_back(enum_field<Preset>("preset", "synthetic scene family: default, similar-objects, erroneous-memory",
                                        d.preset, [](Preset p) { return to_string(p); }, preset_from_string));
    fields.push_back(size_field("sequences", "sequences written by synth-data", d.sequences, 1));
    fields.push_back(size_field("frames", "frames per synthetic sequence", d.frames, 1));
    fields.push_back(size_field("resolution", "synthetic frame side in pixels, a multiple of 16", d.resolution, 16));
    fields.push_back(u64_field("data_seed", "synthetic scene seed", d.seed));
    fields.push_back(real_field("noise_sigma", "per-pixel Gaussian noise of synthetic frames, 8-bit units", d.noise_sigma));
    fields.push_back(string_field("out", "output directory when --out is not given", cfg.out));
    return fields;
}

RunConfig parse_run_config(const std::string& text) {
    RunConfig cfg;
    apply_config(parse_config_text(text), run_fields(cfg));
    cfg.pipeline.validate();
    cfg.data.validate();
    return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    if (!std::filesystem::is_regular_file(path)) throw ConfigError("config file not found: " + path.string());
    return parse_run_config(read_text_file(path));
}

std::vector<VideoSequence> generate_dataset(const DataConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    std::vector<VideoSequence> out;
    for (std::size_t i = 0; i < cfg.sequences; ++i) {
        SceneSpec spec = make_scene(cfg.preset, rng, cfg.resolution, cfg.frames);
        spec.noise_sigma = cfg.noise_sigma;
        VideoSequence seq = generate(spec, rng.next());
        char name[32];
        std::snprintf(name, sizeof name, "seq_%03zu", i);
        seq.name = name;
        out.push_back(std::move(seq));
    }
    return out;
}

std::vector<VideoSequence> import_dataset(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) throw ConfigError("data directory not found: " + dir.string());
    std::vector<std::filesystem::path> dirs;
    for (const auto& e : std::filesystem::directory_iterator(dir)) {
        if (e.is_directory() && std::filesystem::exists(e.path() / "manifest.txt")) dirs.push_back(e.path());
    }
    if (dirs.empty()) throw ConfigError("no sequences in " + dir.string());
    std::sort(dirs.begin(), dirs.end());
    std::vector<VideoSequence> out;
    for (const auto& d : dirs) out.push_back(import_sequence(d));
    return out;
}

}  // namespace trisparse
