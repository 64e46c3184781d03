#pragma once

// Partition of a volume into non-overlapping cubic superpatches, random
// training-time sampling, exact stitched assembly, and tokenization of a
// superpatch into flattened p^3 patches.
//
// Token order is lexicographic over the (x, y, z) token grid, x-major,
// mirroring the row-major voxel layout. TokenGrid is the single source of
// truth for that mapping; mask generation and unpatchify both go through it.

#include <cstdint>
#include <string>
#include <vector>

#include "nemesis/errors.hpp"
#include "nemesis/rng.hpp"
#include "nemesis/volume.hpp"

namespace nemesis {

struct GridIndex {
    std::size_t a = 0, b = 0, c = 0;
    bool operator==(const GridIndex&) const = default;
};

struct SuperpatchGrid {
    std::size_t height = 0, width = 0, depth = 0;  // volume extents
    std::size_t side = 0;                          // superpatch side s
    std::size_t nx = 0, ny = 0, nz = 0;            // counts per axis

    SuperpatchGrid() = default;
    SuperpatchGrid(std::size_t h, std::size_t w, std::size_t d, std::size_t s)
        : height(h), width(w), depth(d), side(s) {
        if (s == 0) throw GeometryError("superpatch side must be positive");
        if (h % s || w % s || d % s)
            throw GeometryError("superpatch side " + std::to_string(s) + " does not divide volume " +
                                std::to_string(h) + "x" + std::to_string(w) + "x" + std::to_string(d));
        nx = h / s;
        ny = w / s;
        nz = d / s;
    }

    std::size_t count() const { return nx * ny * nz; }
    std::size_t linear(const GridIndex& g) const { return (g.a * ny + g.b) * nz + g.c; }
    GridIndex index(std::size_t linear_idx) const {
        GridIndex g;
        g.c = linear_idx % nz;
        g.b = (linear_idx / nz) % ny;
        g.a = linear_idx / (nz * ny);
        return g;
    }
};

// Token-grid index mapping shared by tokenization and mask generation.
struct TokenGrid {
    std::size_t side = 0;  // G, tokens per axis

    explicit TokenGrid(std::size_t g) : side(g) {}

    std::size_t count() const { return side * side * side; }
    std::size_t index(std::size_t x, std::size_t y, std::size_t z) const {
        return (x * side + y) * side + z;
    }
    void coords(std::size_t t, std::size_t& x, std::size_t& y, std::size_t& z) const {
        z = t % side;
        y = (t / side) % side;
        x = t / (side * side);
    }
};

struct PatchTokens {
    std::size_t grid_side = 0;   // G = s / p
    std::size_t patch_side = 0;  // p
    IntensityUnit unit = IntensityUnit::raw;
    std::vector<double> data;    // [G^3 x p^3], row j = flattened patch j

    std::size_t token_count() const { return grid_side * grid_side * grid_side; }
    std::size_t token_dim() const { return patch_side * patch_side * patch_side; }
    const double* row(std::size_t t) const { return data.data() + t * token_dim(); }
    double* row(std::size_t t) { return data.data() + t * token_dim(); }
};

// Cut the volume into its grid of superpatches, lexicographic index order.
inline std::vector<std::pair<GridIndex, Volume>> partition(const Volume& v, std::size_t side) {
    SuperpatchGrid grid(v.height, v.width, v.depth, side);
    std::vector<std::pair<GridIndex, Volume>> parts;
    parts.reserve(grid.count());
    for (std::size_t li = 0; li < grid.count(); ++li) {
        const GridIndex g = grid.index(li);
        Volume sp(side, side, side, 0.0f, v.unit);
        for (std::size_t i = 0; i < side; ++i)
            for (std::size_t j = 0; j < side; ++j) {
                const float* src = v.voxels.data() + v.index(g.a * side + i, g.b * side + j, g.c * side);
                float* dst = sp.voxels.data() + sp.index(i, j, 0);
                std::copy(src, src + side, dst);
            }
        parts.emplace_back(g, std::move(sp));
    }
    return parts;
}

// Copy one superpatch out of the volume without materializing the rest.
inline Volume extract_superpatch(const Volume& v, const SuperpatchGrid& grid, const GridIndex& g) {
    const std::size_t side = grid.side;
    Volume sp(side, side, side, 0.0f, v.unit);
    for (std::size_t i = 0; i < side; ++i)
        for (std::size_t j = 0; j < side; ++j) {
            const float* src = v.voxels.data() + v.index(g.a * side + i, g.b * side + j, g.c * side);
            float* dst = sp.voxels.data() + sp.index(i, j, 0);
            std::copy(src, src + side, dst);
        }
    return sp;
}

// Uniform over the superpatch grid, seeded.
inline std::pair<GridIndex, Volume> sample_superpatch(const Volume& v, std::size_t side,
                                                      std::uint64_t seed) {
    SuperpatchGrid grid(v.height, v.width, v.depth, side);
    Rng rng(seed);
    const GridIndex g = grid.index(rng.uniform_index(grid.count()));
    return {g, extract_superpatch(v, grid, g)};
}

// Index-keyed assembly; requires a complete, duplicate-free part set.
inline Volume stitch(const std::vector<std::pair<GridIndex, Volume>>& parts,
                     const SuperpatchGrid& grid) {
    Volume out(grid.height, grid.width, grid.depth);
    std::vector<bool> seen(grid.count(), false);
    for (const auto& [g, sp] : parts) {
        if (g.a >= grid.nx || g.b >= grid.ny || g.c >= grid.nz)
            throw AssemblyError("stitch: index (" + std::to_string(g.a) + "," + std::to_string(g.b) +
                                "," + std::to_string(g.c) + ") outside grid");
        const std::size_t li = grid.linear(g);
        if (seen[li])
            throw AssemblyError("stitch: duplicate index (" + std::to_string(g.a) + "," +
                                std::to_string(g.b) + "," + std::to_string(g.c) + ")");
        seen[li] = true;
        if (sp.height != grid.side || sp.width != grid.side || sp.depth != grid.side)
            throw AssemblyError("stitch: part extent mismatch at linear index " + std::to_string(li));
        out.unit = sp.unit;
        for (std::size_t i = 0; i < grid.side; ++i)
            for (std::size_t j = 0; j < grid.side; ++j) {
                const float* src = sp.voxels.data() + sp.index(i, j, 0);
                float* dst = out.voxels.data() +
                             out.index(g.a * grid.side + i, g.b * grid.side + j, g.c * grid.side);
                std::copy(src, src + grid.side, dst);
            }
    }
    for (std::size_t li = 0; li < grid.count(); ++li)
        if (!seen[li]) {
            const GridIndex g = grid.index(li);
            throw AssemblyError("stitch: missing part (" + std::to_string(g.a) + "," +
                                std::to_string(g.b) + "," + std::to_string(g.c) + ")");
        }
    return out;
}

// Flatten a cubic superpatch into its [G^3 x p^3] token matrix.
inline PatchTokens patchify(const Volume& sp, std::size_t patch_side) {
    if (!sp.cubic()) throw GeometryError("patchify: superpatch must be cubic");
    const std::size_t s = sp.height, p = patch_side;
    if (p == 0 || s % p)
        throw GeometryError("patchify: patch side " + std::to_string(p) + " does not divide " +
                            std::to_string(s));
    const std::size_t g = s / p;
    TokenGrid tokens(g);
    PatchTokens out;
    out.grid_side = g;
    out.patch_side = p;
    out.unit = sp.unit;
    out.data.resize(tokens.count() * p * p * p);
    for (std::size_t t = 0; t < tokens.count(); ++t) {
        std::size_t x, y, z;
        tokens.coords(t, x, y, z);
        double* row = out.row(t);
        for (std::size_t di = 0; di < p; ++di)
            for (std::size_t dj = 0; dj < p; ++dj) {
                const float* src = sp.voxels.data() + sp.index(x * p + di, y * p + dj, z * p);
                double* dst = row + (di * p + dj) * p;
                for (std::size_t dk = 0; dk < p; ++dk) dst[dk] = static_cast<double>(src[dk]);
            }
    }
    return out;
}

inline Volume unpatchify(const PatchTokens& t) {
    const std::size_t g = t.grid_side, p = t.patch_side, s = g * p;
    if (t.data.size() != g * g * g * p * p * p) throw GeometryError("unpatchify: token matrix size mismatch");
    TokenGrid tokens(g);
    Volume sp(s, s, s, 0.0f, t.unit);
    for (std::size_t ti = 0; ti < tokens.count(); ++ti) {
        std::size_t x, y, z;
        tokens.coords(ti, x, y, z);
        const double* row = t.row(ti);
        for (std::size_t di = 0; di < p; ++di)
            for (std::size_t dj = 0; dj < p; ++dj) {
                float* dst = sp.voxels.data() + sp.index(x * p + di, y * p + dj, z * p);
                const double* src = row + (di * p + dj) * p;
                for (std::size_t dk = 0; dk < p; ++dk) dst[dk] = static_cast<float>(src[dk]);
            }
    }
    return sp;
}

}  // namespace nemesis
