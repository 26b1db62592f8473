#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "trisparse/io.hpp"
#include "trisparse/rng.hpp"
#include "trisparse/tensor.hpp"

namespace trisparse {

enum class ShapeKind { Disk, Square, Triangle };

std::string to_string(ShapeKind s);
ShapeKind shape_kind_from_string(const std::string& name);

struct ObjectSpec {
    ShapeKind shape = ShapeKind::Disk;
    std::array<std::uint8_t, 3> color{200, 60, 60};
    double size = 8.0;  // radius, half side, or circumradius in pixels
    double x = 32.0;    // centre at frame 0
    double y = 32.0;
    double vx = 0.0;  // pixels per frame
    double vy = 0.0;
    double deformation = 0.0;  // relative size oscillation amplitude

    double size_at(std::size_t frame, std::size_t frames) const;
    double x_at(std::size_t frame) const { return x + vx * static_cast<double>(frame); }
    double y_at(std::size_t frame) const { return y + vy * static_cast<double>(frame); }
};

enum class Preset { Default, SimilarObjects, ErroneousMemory };

std::string to_string(Preset p);
Preset preset_from_string(const std::string& name);

struct SceneSpec {
    std::size_t resolution = 64;
    std::size_t frames = 24;
    ObjectSpec object;
    std::vector<ObjectSpec> distractors;  // drawn behind the labeled object
    std::uint64_t background_seed = 0;
    double noise_sigma = 2.0;  // per-pixel Gaussian noise, 8-bit units
    /// Frames whose memory mask is replaced by a wrong one (erroneous-memory probe).
    std::vector<std::size_t> corrupted_memory_frames;

    /// Throws ConfigError on a bad resolution or frame count, or if the
    /// labeled object leaves the frame.
    void validate() const;
};

/// Random scene of the given preset; always passes validate().
SceneSpec make_scene(Preset preset, Rng& rng, std::size_t resolution = 64, std::size_t frames = 24);

struct VideoSequence {
    std::string name;
    std::vector<Image8> frames;                     // RGB
    std::vector<Tensor> masks;                      // H x W, values {0, 1}
    std::map<std::size_t, Tensor> memory_overrides;  // frame -> wrong memory mask

    std::size_t height() const { return frames.empty() ? 0 : frames[0].height; }
    std::size_t width() const { return frames.empty() ? 0 : frames[0].width; }
};

/// Deterministic in (spec, seed). Masks are exact rasterizations of the
/// labeled object (pixel centre inside the shape).
VideoSequence generate(const SceneSpec& spec, std::uint64_t seed);

/// Exact rasterization of one object at one frame.
Tensor rasterize(const ObjectSpec& object, std::size_t frame, std::size_t frames, std::size_t height, std::size_t width);

/// Numbered PPM frames, PGM masks (0/255), PGM overrides and manifest.txt.
void export_sequence(const VideoSequence& seq, const std::filesystem::path& dir);
VideoSequence import_sequence(const std::filesystem::path& dir);

/// Intersection over union of two binary masks; empty vs empty is 1.
double region_similarity(const Tensor& pred, const Tensor& gt);

/// Boundary F-measure. Boundary pixels are foreground pixels with a 4-neighbour
/// in the background; matches are counted within a Chebyshev radius.
double contour_accuracy(const Tensor& pred, const Tensor& gt, std::size_t tolerance = 1);

/// Smallest Euclidean distance between foreground pixels of two masks (0 if they overlap).
double mask_gap(const Tensor& a, const Tensor& b);

/// Binary mask <-> PGM with 0/255.
Image8 mask_to_pgm(const Tensor& mask);
Tensor mask_from_pgm(const Image8& img);

/// RGB frame as a 3 x H x W tensor in roughly [-1, 1].
Tensor frame_tensor(const Image8& frame);

}  // namespace trisparse
