#pragma once

// Volume representation, the NEMV/NEML binary formats, windowed
// normalization, analytic phantom generation and Gaussian corruption.
//
// NEMV layout (little-endian):
//   "NEMV" | version u32 = 1 | H u32 | W u32 | D u32 | dtype u8 = 1 |
//   3 reserved zero bytes | H*W*D float32, row-major (H outer, D inner)
// NEML is identical with magic "NEML" and dtype 2 = uint16 organ ids.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "nemesis/errors.hpp"
#include "nemesis/rng.hpp"

namespace nemesis {

enum class IntensityUnit : std::uint8_t { raw = 0, hu = 1, normalized = 2 };

struct Volume {
    std::size_t height = 0, width = 0, depth = 0;
    IntensityUnit unit = IntensityUnit::raw;
    std::vector<float> voxels;  // row-major: index (i*W + j)*D + k

    Volume() = default;
    Volume(std::size_t h, std::size_t w, std::size_t d, float fill = 0.0f,
           IntensityUnit u = IntensityUnit::raw)
        : height(h), width(w), depth(d), unit(u), voxels(h * w * d, fill) {}

    std::size_t size() const { return height * width * depth; }
    std::size_t index(std::size_t i, std::size_t j, std::size_t k) const {
        return (i * width + j) * depth + k;
    }
    float at(std::size_t i, std::size_t j, std::size_t k) const { return voxels[index(i, j, k)]; }
    float& at(std::size_t i, std::size_t j, std::size_t k) { return voxels[index(i, j, k)]; }
    bool cubic() const { return height == width && width == depth; }
};

struct LabelGrid {
    std::size_t height = 0, width = 0, depth = 0;
    std::vector<std::uint16_t> labels;  // 0 = background

    LabelGrid() = default;
    LabelGrid(std::size_t h, std::size_t w, std::size_t d)
        : height(h), width(w), depth(d), labels(h * w * d, 0) {}

    std::size_t size() const { return height * width * depth; }
    std::size_t index(std::size_t i, std::size_t j, std::size_t k) const {
        return (i * width + j) * depth + k;
    }
    std::uint16_t at(std::size_t i, std::size_t j, std::size_t k) const { return labels[index(i, j, k)]; }
    std::uint16_t& at(std::size_t i, std::size_t j, std::size_t k) { return labels[index(i, j, k)]; }
};

namespace detail {

constexpr std::size_t kMaxVoxels = std::size_t(1) << 31;

inline void put_u32(std::string& out, std::uint32_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
    out.push_back(static_cast<char>((v >> 16) & 0xff));
    out.push_back(static_cast<char>((v >> 24) & 0xff));
}

struct ByteReader {
    const std::string& buf;
    std::size_t pos = 0;
    const char* what;

    ByteReader(const std::string& b, const char* w) : buf(b), what(w) {}

    void need(std::size_t n) {
        if (pos + n > buf.size())
            throw FormatError(std::string(what) + ": truncated at byte offset " + std::to_string(pos) +
                              " (need " + std::to_string(n) + " more bytes)");
    }
    std::uint8_t u8() {
        need(1);
        return static_cast<std::uint8_t>(buf[pos++]);
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(buf[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }
    void raw(void* dst, std::size_t n) {
        need(n);
        std::memcpy(dst, buf.data() + pos, n);
        pos += n;
    }
};

inline std::string read_file(const std::string& path, const char* what) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(std::string(what) + ": cannot open " + path);
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return buf;
}

inline void write_file(const std::string& path, const std::string& bytes, const char* what) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(std::string(what) + ": cannot open " + path + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError(std::string(what) + ": write failed for " + path);
}

}  // namespace detail

inline void save_volume(const Volume& v, const std::string& path) {
    std::string out;
    out.reserve(20 + v.size() * 4);
    out += "NEMV";
    detail::put_u32(out, 1);
    detail::put_u32(out, static_cast<std::uint32_t>(v.height));
    detail::put_u32(out, static_cast<std::uint32_t>(v.width));
    detail::put_u32(out, static_cast<std::uint32_t>(v.depth));
    out.push_back(1);  // dtype: float32
    out.append(3, '\0');
    const std::size_t base = out.size();
    out.resize(base + v.size() * 4);
    std::memcpy(out.data() + base, v.voxels.data(), v.size() * 4);
    detail::write_file(path, out, "volume");
}

inline Volume load_volume(const std::string& path) {
    const std::string buf = detail::read_file(path, "volume");
    detail::ByteReader r(buf, "volume");
    char magic[4];
    r.raw(magic, 4);
    if (std::memcmp(magic, "NEMV", 4) != 0)
        throw FormatError("volume: bad magic at byte offset 0 in " + path);
    const std::uint32_t version = r.u32();
    if (version != 1)
        throw FormatError("volume: unsupported version " + std::to_string(version) + " at byte offset 4");
    Volume v;
    v.height = r.u32();
    v.width = r.u32();
    v.depth = r.u32();
    if (v.height == 0 || v.width == 0 || v.depth == 0)
        throw FormatError("volume: zero extent at byte offset 8");
    const std::size_t n64 = static_cast<std::size_t>(v.height) * v.width * v.depth;
    if (v.width != 0 && n64 / v.width / v.height != v.depth)
        throw FormatError("volume: extent overflow at byte offset 8");
    if (n64 > detail::kMaxVoxels) throw FormatError("volume: extent overflow at byte offset 8");
    const std::uint8_t dtype = r.u8();
    if (dtype != 1) throw FormatError("volume: unexpected dtype code " + std::to_string(dtype) + " at byte offset 20");
    for (int i = 0; i < 3; ++i) (void)r.u8();
    v.voxels.resize(n64);
    r.raw(v.voxels.data(), n64 * 4);
    if (r.pos != buf.size())
        throw FormatError("volume: " + std::to_string(buf.size() - r.pos) + " trailing bytes at byte offset " +
                          std::to_string(r.pos));
    return v;
}

inline void save_labels(const LabelGrid& g, const std::string& path) {
    std::string out;
    out.reserve(20 + g.size() * 2);
    out += "NEML";
    detail::put_u32(out, 1);
    detail::put_u32(out, static_cast<std::uint32_t>(g.height));
    detail::put_u32(out, static_cast<std::uint32_t>(g.width));
    detail::put_u32(out, static_cast<std::uint32_t>(g.depth));
    out.push_back(2);  // dtype: uint16
    out.append(3, '\0');
    const std::size_t base = out.size();
    out.resize(base + g.size() * 2);
    std::memcpy(out.data() + base, g.labels.data(), g.size() * 2);
    detail::write_file(path, out, "labels");
}

inline LabelGrid load_labels(const std::string& path) {
    const std::string buf = detail::read_file(path, "labels");
    detail::ByteReader r(buf, "labels");
    char magic[4];
    r.raw(magic, 4);
    if (std::memcmp(magic, "NEML", 4) != 0)
        throw FormatError("labels: bad magic at byte offset 0 in " + path);
    const std::uint32_t version = r.u32();
    if (version != 1)
        throw FormatError("labels: unsupported version " + std::to_string(version) + " at byte offset 4");
    LabelGrid g;
    g.height = r.u32();
    g.width = r.u32();
    g.depth = r.u32();
    if (g.height == 0 || g.width == 0 || g.depth == 0)
        throw FormatError("labels: zero extent at byte offset 8");
    const std::size_t n64 = static_cast<std::size_t>(g.height) * g.width * g.depth;
    if (n64 > detail::kMaxVoxels) throw FormatError("labels: extent overflow at byte offset 8");
    const std::uint8_t dtype = r.u8();
    if (dtype != 2) throw FormatError("labels: unexpected dtype code " + std::to_string(dtype) + " at byte offset 20");
    for (int i = 0; i < 3; ++i) (void)r.u8();
    g.labels.resize(n64);
    r.raw(g.labels.data(), n64 * 2);
    if (r.pos != buf.size())
        throw FormatError("labels: " + std::to_string(buf.size() - r.pos) + " trailing bytes at byte offset " +
                          std::to_string(r.pos));
    return g;
}

// Clamp to [lo, hi] and map affinely onto [0, 1].
inline Volume normalize(const Volume& v, double lo, double hi) {
    if (!(lo < hi)) throw ParamError("normalize: window requires lo < hi");
    Volume out = v;
    out.unit = IntensityUnit::normalized;
    const double span = hi - lo;
    for (float& x : out.voxels) {
        const double c = std::clamp(static_cast<double>(x), lo, hi);
        x = static_cast<float>((c - lo) / span);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Phantoms

enum class OrganShape : std::uint8_t { sphere = 0, ellipsoid = 1, box = 2 };

struct OrganSpec {
    std::uint16_t id = 0;
    OrganShape shape = OrganShape::sphere;
    double cx = 0, cy = 0, cz = 0;  // center, voxel coordinates
    double rx = 0, ry = 0, rz = 0;  // half extents, voxels
    float intensity = 0.0f;
};

struct PhantomSpec {
    std::size_t height = 0, width = 0, depth = 0;
    std::vector<OrganSpec> organs;
    float background = 0.0f;
    std::uint64_t seed = 0;
};

inline bool organ_contains(const OrganSpec& o, double x, double y, double z) {
    const double dx = x - o.cx, dy = y - o.cy, dz = z - o.cz;
    switch (o.shape) {
        case OrganShape::sphere: {
            const double r = o.rx;
            return dx * dx + dy * dy + dz * dz <= r * r;
        }
        case OrganShape::ellipsoid: {
            const double a = dx / o.rx, b = dy / o.ry, c = dz / o.rz;
            return a * a + b * b + c * c <= 1.0;
        }
        case OrganShape::box:
            return std::abs(dx) <= o.rx && std::abs(dy) <= o.ry && std::abs(dz) <= o.rz;
    }
    return false;
}

inline void validate_phantom_spec(const PhantomSpec& spec) {
    if (spec.height == 0 || spec.width == 0 || spec.depth == 0)
        throw ParamError("phantom: zero extent");
    std::vector<std::uint16_t> ids;
    for (const OrganSpec& o : spec.organs) {
        if (o.id == 0) throw ParamError("phantom: organ id 0 is reserved for background");
        if (std::find(ids.begin(), ids.end(), o.id) != ids.end())
            throw ParamError("phantom: duplicate organ id " + std::to_string(o.id));
        ids.push_back(o.id);
        double rx = o.rx, ry = o.ry, rz = o.rz;
        if (o.shape == OrganShape::sphere) ry = rz = rx;
        if (rx <= 0 || ry <= 0 || rz <= 0)
            throw ParamError("phantom: organ " + std::to_string(o.id) + " has non-positive extent");
        if (o.cx - rx < 0 || o.cx + rx > static_cast<double>(spec.height - 1) ||
            o.cy - ry < 0 || o.cy + ry > static_cast<double>(spec.width - 1) ||
            o.cz - rz < 0 || o.cz + rz > static_cast<double>(spec.depth - 1))
            throw ParamError("phantom: organ " + std::to_string(o.id) + " exceeds volume bounds");
    }
}

// Voxel centers sit on integer coordinates. Overlaps resolve to the
// later-listed organ.
inline std::pair<Volume, LabelGrid> make_phantom(const PhantomSpec& spec) {
    validate_phantom_spec(spec);
    Volume vol(spec.height, spec.width, spec.depth, spec.background, IntensityUnit::raw);
    LabelGrid labels(spec.height, spec.width, spec.depth);
    for (const OrganSpec& o : spec.organs) {
        OrganSpec oc = o;
        if (oc.shape == OrganShape::sphere) oc.ry = oc.rz = oc.rx;
        const std::size_t i0 = static_cast<std::size_t>(std::max(0.0, std::floor(oc.cx - oc.rx)));
        const std::size_t i1 = static_cast<std::size_t>(std::min<double>(spec.height - 1, std::ceil(oc.cx + oc.rx)));
        const std::size_t j0 = static_cast<std::size_t>(std::max(0.0, std::floor(oc.cy - oc.ry)));
        const std::size_t j1 = static_cast<std::size_t>(std::min<double>(spec.width - 1, std::ceil(oc.cy + oc.ry)));
        const std::size_t k0 = static_cast<std::size_t>(std::max(0.0, std::floor(oc.cz - oc.rz)));
        const std::size_t k1 = static_cast<std::size_t>(std::min<double>(spec.depth - 1, std::ceil(oc.cz + oc.rz)));
        for (std::size_t i = i0; i <= i1; ++i)
            for (std::size_t j = j0; j <= j1; ++j)
                for (std::size_t k = k0; k <= k1; ++k)
                    if (organ_contains(oc, static_cast<double>(i), static_cast<double>(j),
                                       static_cast<double>(k))) {
                        vol.at(i, j, k) = o.intensity;
                        labels.at(i, j, k) = o.id;
                    }
    }
    return {std::move(vol), std::move(labels)};
}

// i.i.d. N(0, sigma^2) per voxel in row-major order; output is not
// re-clamped, so the clean volume stays the reconstruction target.
inline Volume corrupt_gaussian(const Volume& v, double sigma, std::uint64_t seed) {
    if (sigma < 0.0) throw ParamError("corrupt_gaussian: sigma must be >= 0");
    Volume out = v;
    if (sigma == 0.0) return out;
    Rng rng(seed);
    for (float& x : out.voxels) x = static_cast<float>(static_cast<double>(x) + sigma * rng.normal());
    return out;
}

// ---------------------------------------------------------------------------
// Randomized phantom corpora (synthetic stand-in for labelled CT studies)

struct CorpusSpec {
    std::size_t volume_count = 30;
    std::size_t train_count = 18;
    std::size_t dim = 64;           // cubic volumes
    std::size_t organ_count = 8;
    float background_hu = -950.0f;  // air-like
    double radius_lo = 9.0, radius_hi = 14.0;
    double center_jitter = 3.0;     // placement wobble inside the organ's octant
    std::uint64_t seed = 2024;
};

// One volume's spec: every organ id appears once at a consistent anatomical
// site (organ i sits in octant i, jittered), with shape cycling through
// sphere/ellipsoid/box and a distinct HU band per organ id. Deterministic
// in `seed`.
inline PhantomSpec random_phantom_spec(const CorpusSpec& cs, std::uint64_t seed) {
    PhantomSpec spec;
    spec.height = spec.width = spec.depth = cs.dim;
    spec.background = cs.background_hu;
    spec.seed = seed;
    Rng rng(seed);
    const double quarter = static_cast<double>(cs.dim) / 4.0;
    for (std::size_t c = 0; c < cs.organ_count; ++c) {
        OrganSpec o;
        o.id = static_cast<std::uint16_t>(c + 1);
        o.shape = static_cast<OrganShape>(c % 3);
        o.rx = rng.uniform(cs.radius_lo, cs.radius_hi);
        o.ry = o.shape == OrganShape::sphere ? o.rx : rng.uniform(cs.radius_lo, cs.radius_hi);
        o.rz = o.shape == OrganShape::sphere ? o.rx : rng.uniform(cs.radius_lo, cs.radius_hi);
        const std::size_t oct = c % 8;
        const double ox = quarter * (oct & 4 ? 3.0 : 1.0);
        const double oy = quarter * (oct & 2 ? 3.0 : 1.0);
        const double oz = quarter * (oct & 1 ? 3.0 : 1.0);
        auto place = [&](double base, double r) {
            const double j = rng.uniform(-cs.center_jitter, cs.center_jitter);
            const double lo = r + 1.0, hi = static_cast<double>(cs.dim - 2) - r;
            return std::clamp(base + j, lo, hi);
        };
        o.cx = place(ox, o.rx);
        o.cy = place(oy, o.ry);
        o.cz = place(oz, o.rz);
        // Distinct HU band per organ id, with per-volume jitter.
        const double base = -400.0 + 140.0 * static_cast<double>(c);
        o.intensity = static_cast<float>(base + rng.uniform(-30.0, 30.0));
        spec.organs.push_back(o);
    }
    return spec;
}

}  // namespace nemesis
