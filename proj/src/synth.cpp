#include "trisparse/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numbers>
#include <sstream>

namespace trisparse {

namespace {

constexpr std::array<std::array<std::uint8_t, 3>, 6> kPalette{{
    {220, 50, 50}, {50, 200, 70}, {60, 90, 230}, {230, 210, 40}, {200, 60, 210}, {40, 210, 220}}};

bool inside_shape(const ObjectSpec& o, double size, double cx, double cy, double px, double py) {
    const double dx = px - cx, dy = py - cy;
    switch (o.shape) {
        case ShapeKind::Disk: return dx * dx + dy * dy <= size * size;
        case ShapeKind::Square: return std::abs(dx) <= size && std::abs(dy) <= size;
        case ShapeKind::Triangle: {
            // upward equilateral triangle with circumradius `size`
            const double h = 1.5 * size, half_base = size * std::sqrt(3.0) / 2.0;
            const double top = cy - size, bottom = cy + size / 2.0;
            if (py < top || py > bottom) return false;
            const double half_width = half_base * (py - top) / h;
            return std::abs(dx) <= half_width;
        }
    }
    return false;
}

double uniform(Rng& rng, double lo, double hi) { return rng.uniform(lo, hi); }

// Start coordinate and velocity along one axis that keep [c - extent, c + extent]
// inside [margin, res - margin] for all frames.
void fit_axis(Rng& rng, double res, double extent, std::size_t frames, double& start, double& velocity) {
    const double lo = extent + 1.0, hi = res - extent - 1.0;
    const double span = static_cast<double>(frames - 1);
    if (span > 0 && std::abs(velocity) * span > hi - lo) velocity = std::copysign((hi - lo) / span * 0.95, velocity);
    const double travel = velocity * span;
    const double s_lo = travel >= 0 ? lo : lo - travel;
    const double s_hi = travel >= 0 ? hi - travel : hi;
    start = uniform(rng, s_lo, std::max(s_lo, s_hi));
}

ObjectSpec random_object(Rng& rng, std::size_t res, std::size_t frames, std::size_t color_index, bool keep_inside) {
    ObjectSpec o;
    o.shape = static_cast<ShapeKind>(rng.below(3));
    o.color = kPalette[color_index % kPalette.size()];
    const double scale = static_cast<double>(res) / 64.0;
    o.size = uniform(rng, 6.0, 10.0) * scale;
    o.deformation = uniform(rng, 0.0, 0.15);
    const double speed = uniform(rng, 0.3, 1.2) * scale, angle = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    o.vx = speed * std::cos(angle);
    o.vy = speed * std::sin(angle);
    const double extent = o.size * (1.0 + o.deformation);
    if (keep_inside) {
        fit_axis(rng, static_cast<double>(res), extent, frames, o.x, o.vx);
        fit_axis(rng, static_cast<double>(res), extent, frames, o.y, o.vy);
    } else {
        o.x = uniform(rng, 0.0, static_cast<double>(res));
        o.y = uniform(rng, 0.0, static_cast<double>(res));
    }
    return o;
}

Tensor background(std::size_t res, std::uint64_t seed) {
    Rng rng(seed);
    Tensor bg({3, res, res});
    for (std::size_t c = 0; c < 3; ++c) {
        const double base = uniform(rng, 70.0, 150.0);
        struct Wave {
            double amp, fx, fy, phase;
        };
        std::array<Wave, 3> waves{};
        for (auto& w : waves) w = {uniform(rng, 4.0, 14.0), uniform(rng, -2.0, 2.0), uniform(rng, -2.0, 2.0), uniform(rng, 0.0, 6.3)};
        for (std::size_t y = 0; y < res; ++y)
            for (std::size_t x = 0; x < res; ++x) {
                double v = base;
                for (const auto& w : waves)
                    v += w.amp * std::sin(2.0 * std::numbers::pi * (w.fx * double(x) + w.fy * double(y)) / double(res) + w.phase);
                bg.at(c, y, x) = v;
            }
    }
    return bg;
}

std::uint8_t quantize(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

std::string numbered(const char* prefix, std::size_t i, const char* ext) {
    std::ostringstream os;
    os << prefix << std::setw(3) << std::setfill('0') << i << ext;
    return os.str();
}

void check_same(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape() != b.shape()) throw ShapeError(std::string(what) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

Tensor boundary(const Tensor& m) {
    const std::size_t h = m.dim(0), w = m.dim(1);
    Tensor b({h, w});
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            if (m[y * w + x] <= 0.5) continue;
            const bool edge = (y > 0 && m[(y - 1) * w + x] <= 0.5) || (y + 1 < h && m[(y + 1) * w + x] <= 0.5) ||
                              (x > 0 && m[y * w + x - 1] <= 0.5) || (x + 1 < w && m[y * w + x + 1] <= 0.5);
            b[y * w + x] = edge ? 1.0 : 0.0;
        }
    return b;
}

// Fraction of boundary pixels of `a` with a boundary pixel of `b` within `tol`.
double matched_fraction(const Tensor& a, const Tensor& b, std::size_t tol, std::size_t& count) {
    const long h = static_cast<long>(a.dim(0)), w = static_cast<long>(a.dim(1)), t = static_cast<long>(tol);
    std::size_t hits = 0;
    count = 0;
    for (long y = 0; y < h; ++y)
        for (long x = 0; x < w; ++x) {
            if (a[static_cast<std::size_t>(y * w + x)] == 0.0) continue;
            ++count;
            bool found = false;
            for (long yy = std::max(0L, y - t); yy <= std::min(h - 1, y + t) && !found; ++yy)
                for (long xx = std::max(0L, x - t); xx <= std::min(w - 1, x + t) && !found; ++xx)
                    found = b[static_cast<std::size_t>(yy * w + xx)] != 0.0;
            hits += found;
        }
    return count == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(count);
}

}  // namespace

std::string to_string(ShapeKind s) {
    switch (s) {
        case ShapeKind::Disk: return "disk";
        case ShapeKind::Square: return "square";
        case ShapeKind::Triangle: return "triangle";
    }
    return "?";
}

ShapeKind shape_kind_from_string(const std::string& name) {
    if (name == "disk") return ShapeKind::Disk;
    if (name == "square") return ShapeKind::Square;
    if (name == "triangle") return ShapeKind::Triangle;
    throw ConfigError("unknown shape '" + name + "'");
}

std::string to_string(Preset p) {
    switch (p) {
        case Preset::Default: return "default";
        case Preset::SimilarObjects: return "similar-objects";
        case Preset::ErroneousMemory: return "erroneous-memory";
    }
    return "?";
}

Preset preset_from_string(const std::string& name) {
    if (name == "default") return Preset::Default;
    if (name == "similar-objects") return Preset::SimilarObjects;
    if (name == "erroneous-memory") return Preset::ErroneousMemory;
    throw ConfigError("unknown preset '" + name + "'");
}

double ObjectSpec::size_at(std::size_t frame, std::size_t frames) const {
    if (deformation == 0.0 || frames < 2) return size;
    return size * (1.0 + deformation * std::sin(2.0 * std::numbers::pi * double(frame) / double(frames - 1)));
}

void SceneSpec::validate() const {
    if (resolution == 0 || resolution % 16 != 0) throw ConfigError("resolution must be a positive multiple of 16");
    if (frames == 0) throw ConfigError("a scene needs at least one frame");
    if (!(object.size > 0.0) || object.deformation < 0.0 || object.deformation >= 1.0) {
        throw ConfigError("object size must be positive and deformation in [0, 1)");
    }
    if (!(noise_sigma >= 0.0)) throw ConfigError("noise sigma must be non-negative");
    const double res = static_cast<double>(resolution);
    for (std::size_t t = 0; t < frames; ++t) {
        const double s = object.size_at(t, frames), x = object.x_at(t), y = object.y_at(t);
        if (x - s < 0.0 || y - s < 0.0 || x + s > res || y + s > res) {
            throw ConfigError("labeled object leaves the frame at frame " + std::to_string(t));
        }
    }
    for (std::size_t f : corrupted_memory_frames)
        if (f == 0 || f >= frames) throw ConfigError("corrupted memory frame " + std::to_string(f) + " out of range");
}

SceneSpec make_scene(Preset preset, Rng& rng, std::size_t resolution, std::size_t frames) {
    SceneSpec s;
    s.resolution = resolution;
    s.frames = frames;
    s.background_seed = rng.next();
    const std::size_t color = rng.below(kPalette.size());
    if (preset == Preset::SimilarObjects) {
        const double scale = static_cast<double>(resolution) / 64.0;
        const double r = uniform(rng, 6.0, 8.0) * scale;
        const double speed = uniform(rng, 0.6, 1.0) * scale * (rng.below(2) ? 1.0 : -1.0);
        const double tc = static_cast<double>(frames - 1) / 2.0;
        const double res = static_cast<double>(resolution);
        const double travel = std::abs(speed) * tc;
        const double cx = res / 2.0;
        const double cy = uniform(rng, r + 1.0, res - 3.0 * r - 2.0);
        s.object.shape = ShapeKind::Disk;
        s.object.color = kPalette[color];
        s.object.size = r;
        s.object.x = cx - speed * tc;
        s.object.y = cy;
        s.object.vx = speed;
        if (travel + r + 1.0 > res / 2.0) s.object.vx = std::copysign((res / 2.0 - r - 1.0) / tc, speed), s.object.x = cx - s.object.vx * tc;
        ObjectSpec twin = s.object;
        twin.vx = -s.object.vx;
        twin.x = cx - twin.vx * tc;
        twin.y = cy + 2.0 * r + 1.0;
        s.distractors.push_back(twin);
    } else {
        s.object = random_object(rng, resolution, frames, color, true);
        const std::size_t n = preset == Preset::ErroneousMemory ? 1 + rng.below(2) : rng.below(3);
        for (std::size_t i = 0; i < n; ++i) s.distractors.push_back(random_object(rng, resolution, frames, color + 1 + i, false));
        if (preset == Preset::ErroneousMemory && frames > 5) s.corrupted_memory_frames = {5};
    }
    s.validate();
    return s;
}

Tensor rasterize(const ObjectSpec& o, std::size_t frame, std::size_t frames, std::size_t height, std::size_t width) {
    Tensor m({height, width});
    const double size = o.size_at(frame, frames), cx = o.x_at(frame), cy = o.y_at(frame);
    for (std::size_t y = 0; y < height; ++y)
        for (std::size_t x = 0; x < width; ++x)
            if (inside_shape(o, size, cx, cy, double(x) + 0.5, double(y) + 0.5)) m[y * width + x] = 1.0;
    return m;
}

VideoSequence generate(const SceneSpec& spec, std::uint64_t seed) {
    spec.validate();
    const std::size_t res = spec.resolution;
    const Tensor bg = background(res, spec.background_seed);
    Rng noise(seed);
    VideoSequence seq;
    for (std::size_t t = 0; t < spec.frames; ++t) {
        Tensor img = bg;
        auto paint = [&](const ObjectSpec& o) {
            const Tensor m = rasterize(o, t, spec.frames, res, res);
            for (std::size_t c = 0; c < 3; ++c)
                for (std::size_t i = 0; i < res * res; ++i)
                    if (m[i] != 0.0) img[c * res * res + i] = o.color[c];
            return m;
        };
        for (const auto& d : spec.distractors) paint(d);
        seq.masks.push_back(paint(spec.object));
        Image8 frame{res, res, 3, std::vector<std::uint8_t>(res * res * 3)};
        for (std::size_t y = 0; y < res; ++y)
            for (std::size_t x = 0; x < res; ++x)
                for (std::size_t c = 0; c < 3; ++c) {
                    const double n = spec.noise_sigma > 0.0 ? spec.noise_sigma * noise.normal() : 0.0;
                    frame.at(y, x, c) = quantize(img.at(c, y, x) + n);
                }
        seq.frames.push_back(std::move(frame));
    }
    for (std::size_t f : spec.corrupted_memory_frames) {
        Tensor wrong = spec.distractors.empty()
                           ? Tensor({res, res})
                           : rasterize(spec.distractors.front(), f, spec.frames, res, res);
        seq.memory_overrides[f] = std::move(wrong);
    }
    return seq;
}

void export_sequence(const VideoSequence& seq, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::ostringstream manifest;
    manifest << "name=" << seq.name << "\nframes=" << seq.frames.size() << "\nwidth=" << seq.width()
             << "\nheight=" << seq.height() << '\n';
    for (std::size_t t = 0; t < seq.frames.size(); ++t) {
        write_pnm(dir / numbered("frame_", t, ".ppm"), seq.frames[t]);
        write_pnm(dir / numbered("mask_", t, ".pgm"), mask_to_pgm(seq.masks.at(t)));
    }
    for (const auto& [f, m] : seq.memory_overrides) {
        write_pnm(dir / numbered("override_", f, ".pgm"), mask_to_pgm(m));
        manifest << "override=" << f << '\n';
    }
    write_text_file(dir / "manifest.txt", manifest.str());
}

VideoSequence import_sequence(const std::filesystem::path& dir) {
    const std::string text = read_text_file(dir / "manifest.txt");
    std::istringstream is(text);
    VideoSequence seq;
    std::size_t frames = 0, width = 0, height = 0, offset = 0;
    std::vector<std::size_t> overrides;
    for (std::string line; std::getline(is, line); offset += line.size() + 1) {
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw FormatError("manifest: expected key=value, got '" + line + "'", offset);
        const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
        try {
            if (key == "name") seq.name = value;
            else if (key == "frames") frames = std::stoul(value);
            else if (key == "width") width = std::stoul(value);
            else if (key == "height") height = std::stoul(value);
            else if (key == "override") overrides.push_back(std::stoul(value));
            else throw FormatError("manifest: unknown key '" + key + "'", offset);
        } catch (const std::logic_error&) {
            throw FormatError("manifest: bad number in '" + line + "'", offset);
        }
    }
    for (std::size_t t = 0; t < frames; ++t) {
        Image8 f = read_pnm(dir / numbered("frame_", t, ".ppm"));
        if (f.width != width || f.height != height || f.channels != 3) {
            throw FormatError("frame " + std::to_string(t) + " does not match the manifest geometry", 0);
        }
        seq.frames.push_back(std::move(f));
        seq.masks.push_back(mask_from_pgm(read_pnm(dir / numbered("mask_", t, ".pgm"))));
    }
    for (std::size_t f : overrides) seq.memory_overrides[f] = mask_from_pgm(read_pnm(dir / numbered("override_", f, ".pgm")));
    return seq;
}

double region_similarity(const Tensor& pred, const Tensor& gt) {
    check_same(pred, gt, "region_similarity");
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool a = pred[i] > 0.5, b = gt[i] > 0.5;
        inter += a && b;
        uni += a || b;
    }
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

double contour_accuracy(const Tensor& pred, const Tensor& gt, std::size_t tolerance) {
    check_same(pred, gt, "contour_accuracy");
    if (pred.ndim() != 2) throw ShapeError("contour_accuracy expects H x W masks");
    const Tensor bp = boundary(pred), bg = boundary(gt);
    std::size_t np = 0, ng = 0;
    const double precision = matched_fraction(bp, bg, tolerance, np);
    const double recall = matched_fraction(bg, bp, tolerance, ng);
    if (np == 0 && ng == 0) return 1.0;
    if (np == 0 || ng == 0 || precision + recall == 0.0) return 0.0;
    return 2.0 * precision * recall / (precision + recall);
}

double mask_gap(const Tensor& a, const Tensor& b) {
    check_same(a, b, "mask_gap");
    const std::size_t w = a.dim(1);
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i] <= 0.5) continue;
        for (std::size_t j = 0; j < b.size(); ++j) {
            if (b[j] <= 0.5) continue;
            const double dy = double(i / w) - double(j / w), dx = double(i % w) - double(j % w);
            best = std::min(best, std::sqrt(dx * dx + dy * dy));
        }
    }
    return best;
}

Image8 mask_to_pgm(const Tensor& mask) {
    if (mask.ndim() != 2) throw ShapeError("mask_to_pgm expects H x W, got " + shape_str(mask.shape()));
    Image8 img{mask.dim(1), mask.dim(0), 1, std::vector<std::uint8_t>(mask.size())};
    for (std::size_t i = 0; i < mask.size(); ++i) img.pixels[i] = mask[i] > 0.5 ? 255 : 0;
    return img;
}

Tensor mask_from_pgm(const Image8& img) {
    if (img.channels != 1) throw FormatError("mask image must be single-channel", 0);
    Tensor m({img.height, img.width});
    for (std::size_t i = 0; i < m.size(); ++i) {
        if (img.pixels[i] != 0 && img.pixels[i] != 255) throw FormatError("mask pixel is neither 0 nor 255", i);
        m[i] = img.pixels[i] == 255 ? 1.0 : 0.0;
    }
    return m;
}

Tensor frame_tensor(const Image8& frame) {
    if (frame.channels != 3) throw ShapeError("frame_tensor expects an RGB image");
    Tensor t({3, frame.height, frame.width});
    for (std::size_t y = 0; y < frame.height; ++y)
        for (std::size_t x = 0; x < frame.width; ++x)
            for (std::size_t c = 0; c < 3; ++c) t.at(c, y, x) = frame.at(y, x, c) / 127.5 - 1.0;
    return t;
}

}  // namespace trisparse
