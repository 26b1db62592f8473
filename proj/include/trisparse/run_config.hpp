#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "trisparse/config.hpp"
#include "trisparse/pipeline.hpp"
#include "trisparse/synth.hpp"

namespace trisparse {

/// Synthetic dataset: `sequences` random scenes of one preset.
struct DataConfig {
    Preset preset = Preset::Default;
    std::size_t sequences = 8;
    std::size_t frames = 24;
    std::size_t resolution = 64;
    std::uint64_t seed = 1;
    double noise_sigma = 2.0;

    void validate() const;
};

struct RunConfig {
    PipelineConfig pipeline;
    DataConfig data;
    std::string out;  // output directory; a command-line --out wins
};

/// Every RunConfig key, documented, bound to `cfg`.
std::vector<ConfigField> run_fields(RunConfig& cfg);

/// Applies a key = value text over the defaults and validates the result.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);

/// Deterministic in the config; sequences are named seq_000, seq_001, ...
std::vector<VideoSequence> generate_dataset(const DataConfig& cfg);

/// Every subdirectory holding a sequence manifest, in name order.
std::vector<VideoSequence> import_dataset(const std::filesystem::path& dir);

}  // namespace trisparse
