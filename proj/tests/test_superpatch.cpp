#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cstring>

#include "nemesis/rng.hpp"
#include "nemesis/superpatch.hpp"

using namespace nemesis;

namespace {

Volume random_volume(std::size_t dim, std::uint64_t seed) {
    Volume v(dim, dim, dim);
    Rng rng(seed);
    for (float& x : v.voxels) x = static_cast<float>(rng.uniform(0.0, 1.0));
    return v;
}

}  // namespace

TEST_CASE("partition counts") {
    Volume v256(256, 256, 256);
    CHECK(partition(v256, 128).size() == 8);

    Volume v128 = random_volume(128, 1);
    auto parts = partition(v128, 128);
    REQUIRE(parts.size() == 1);
    CHECK(std::memcmp(parts[0].second.voxels.data(), v128.voxels.data(), v128.size() * 4) == 0);

    Volume v100(100, 100, 100);
    CHECK_THROWS_AS(partition(v100, 128), GeometryError);
}

TEST_CASE("partition then stitch is the identity") {
    Volume v = random_volume(64, 7);
    auto parts = partition(v, 32);
    SuperpatchGrid grid(64, 64, 64, 32);
    Volume w = stitch(parts, grid);
    CHECK(std::memcmp(v.voxels.data(), w.voxels.data(), v.size() * 4) == 0);
}

TEST_CASE("partition tiles every voxel exactly once") {
    Volume v = random_volume(32, 9);
    auto parts = partition(v, 16);
    CHECK(parts.size() == 8);
    double total = 0.0, expected = 0.0;
    for (const auto& [g, sp] : parts)
        for (float x : sp.voxels) total += x;
    for (float x : v.voxels) expected += x;
    CHECK_THAT(total, Catch::Matchers::WithinRel(expected, 1e-12));
}

TEST_CASE("stitch is order-invariant and validates the index set") {
    Volume v = random_volume(32, 11);
    auto parts = partition(v, 16);
    SuperpatchGrid grid(32, 32, 32, 16);

    auto shuffled = parts;
    std::reverse(shuffled.begin(), shuffled.end());
    Volume a = stitch(parts, grid);
    Volume b = stitch(shuffled, grid);
    CHECK(std::memcmp(a.voxels.data(), b.voxels.data(), a.size() * 4) == 0);

    auto missing = parts;
    missing.pop_back();
    try {
        stitch(missing, grid);
        FAIL("expected AssemblyError");
    } catch (const AssemblyError& e) {
        CHECK(std::string(e.what()).find("missing part (1,1,1)") != std::string::npos);
    }

    auto dup = parts;
    dup[1] = dup[0];
    CHECK_THROWS_AS(stitch(dup, grid), AssemblyError);
}

TEST_CASE("sample_superpatch is uniform over the grid") {
    Volume v = random_volume(64, 13);
    // N=1: always the single superpatch
    auto [g1, sp1] = sample_superpatch(v, 64, 5);
    CHECK(g1 == GridIndex{0, 0, 0});

    // same seed, same cell
    auto [ga, _a] = sample_superpatch(v, 32, 123);
    auto [gb, _b] = sample_superpatch(v, 32, 123);
    CHECK(ga == gb);

    // chi-squared uniformity over N=8 cells with 8000 draws.
    SuperpatchGrid grid(64, 64, 64, 32);
    std::vector<std::size_t> counts(8, 0);
    for (std::uint64_t s = 0; s < 8000; ++s) {
        auto [g, sp] = sample_superpatch(v, 32, derive_seed(999, s));
        counts[grid.linear(g)] += 1;
    }
    const double expected = 1000.0;
    double chi2 = 0.0;
    for (std::size_t c : counts) chi2 += (c - expected) * (c - expected) / expected;
    // 0.999 quantile of chi-squared with 7 dof: p-value > 0.001 iff chi2 below it
    CHECK(chi2 < 24.3219);
}

TEST_CASE("patchify shapes") {
    Volume sp128(128, 128, 128);
    PatchTokens t = patchify(sp128, 16);
    CHECK(t.token_count() == 512);
    CHECK(t.token_dim() == 4096);

    Volume sp32(32, 32, 32);
    PatchTokens t32 = patchify(sp32, 8);
    CHECK(t32.token_count() == 64);
    CHECK(t32.token_dim() == 512);

    CHECK_THROWS_AS(patchify(sp32, 7), GeometryError);
}

TEST_CASE("unpatchify inverts patchify bit-exactly") {
    Volume sp = random_volume(32, 21);
    PatchTokens t = patchify(sp, 8);
    Volume back = unpatchify(t);
    REQUIRE(back.size() == sp.size());
    CHECK(std::memcmp(back.voxels.data(), sp.voxels.data(), sp.size() * 4) == 0);
}

TEST_CASE("patchify/unpatchify inverse across valid side pairs") {
    const std::size_t sides[] = {8, 16, 32};
    const std::size_t patches[] = {8, 16, 32};
    for (std::size_t s : sides)
        for (std::size_t p : patches) {
            if (p > s || s % p) continue;
            Volume sp = random_volume(s, derive_seed(31, s * 100 + p));
            Volume back = unpatchify(patchify(sp, p));
            CHECK(std::memcmp(back.voxels.data(), sp.voxels.data(), sp.size() * 4) == 0);
        }
}

TEST_CASE("token order is x-major lexicographic and matches TokenGrid") {
    // Mark each patch with a unique constant; detokenized voxel at patch
    // (x,y,z) must equal the token value at TokenGrid::index(x,y,z).
    const std::size_t g = 3, p = 2, s = g * p;
    TokenGrid tg(g);
    PatchTokens t;
    t.grid_side = g;
    t.patch_side = p;
    t.data.resize(tg.count() * p * p * p);
    for (std::size_t ti = 0; ti < tg.count(); ++ti)
        for (std::size_t e = 0; e < p * p * p; ++e) t.row(ti)[e] = static_cast<double>(ti);
    Volume sp = unpatchify(t);
    for (std::size_t x = 0; x < g; ++x)
        for (std::size_t y = 0; y < g; ++y)
            for (std::size_t z = 0; z < g; ++z)
                CHECK(sp.at(x * p, y * p, z * p) == static_cast<float>(tg.index(x, y, z)));

    std::size_t cx, cy, cz;
    tg.coords(tg.index(2, 0, 1), cx, cy, cz);
    CHECK(cx == 2);
    CHECK(cy == 0);
    CHECK(cz == 1);
}
