#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "nemesis/rng.hpp"
#include "nemesis/volume.hpp"

using namespace nemesis;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
    static fs::path dir = [] {
        fs::path p = fs::temp_directory_path() / "nemesis_volume_tests";
        fs::create_directories(p);
        return p;
    }();
    return dir;
}

Volume random_volume(std::size_t h, std::size_t w, std::size_t d, std::uint64_t seed) {
    Volume v(h, w, d);
    Rng rng(seed);
    for (float& x : v.voxels) x = static_cast<float>(rng.uniform(-1000.0, 1000.0));
    return v;
}

std::size_t count_label(const LabelGrid& g, std::uint16_t id) {
    std::size_t n = 0;
    for (std::uint16_t v : g.labels) n += (v == id);
    return n;
}

}  // namespace

TEST_CASE("volume roundtrip is bit-identical") {
    Volume v = random_volume(8, 8, 8, 99);
    const auto path = (temp_dir() / "rt.nemv").string();
    save_volume(v, path);
    Volume w = load_volume(path);
    CHECK(w.height == v.height);
    CHECK(w.width == v.width);
    CHECK(w.depth == v.depth);
    REQUIRE(w.voxels.size() == v.voxels.size());
    CHECK(std::memcmp(w.voxels.data(), v.voxels.data(), v.size() * 4) == 0);

    // load then save reproduces identical bytes
    const auto path2 = (temp_dir() / "rt2.nemv").string();
    save_volume(w, path2);
    std::ifstream a(path, std::ios::binary), b(path2, std::ios::binary);
    std::string sa((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
    std::string sb((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
    CHECK(sa == sb);
}

TEST_CASE("label grid roundtrip") {
    LabelGrid g(4, 5, 6);
    Rng rng(3);
    for (auto& v : g.labels) v = static_cast<std::uint16_t>(rng.uniform_index(9));
    const auto path = (temp_dir() / "rt.neml").string();
    save_labels(g, path);
    LabelGrid h = load_labels(path);
    CHECK(h.labels == g.labels);
}

TEST_CASE("wrong magic is a format error") {
    const auto path = (temp_dir() / "bad_magic.nemv").string();
    std::ofstream out(path, std::ios::binary);
    out << "XXXXrestoffile";
    out.close();
    CHECK_THROWS_AS(load_volume(path), FormatError);
}

TEST_CASE("truncated payload is a format error with offset") {
    Volume v(2, 2, 2, 1.0f);
    const auto path = (temp_dir() / "trunc.nemv").string();
    save_volume(v, path);
    // chop one payload value (4 bytes)
    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();
    bytes.resize(bytes.size() - 4);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << bytes;
    out.close();
    try {
        load_volume(path);
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        CHECK(std::string(e.what()).find("byte offset") != std::string::npos);
    }
}

TEST_CASE("extent overflow is a format error") {
    std::string bytes = "NEMV";
    auto push_u32 = [&](std::uint32_t v) {
        for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    };
    push_u32(1);
    push_u32(0xffffffffu);
    push_u32(0xffffffffu);
    push_u32(0xffffffffu);
    bytes.push_back(1);
    bytes.append(3, '\0');
    const auto path = (temp_dir() / "overflow.nemv").string();
    std::ofstream out(path, std::ios::binary);
    out << bytes;
    out.close();
    CHECK_THROWS_AS(load_volume(path), FormatError);
}

TEST_CASE("normalize maps the window onto [0,1]") {
    Volume v(1, 1, 3);
    v.voxels = {-1000.0f, 1000.0f, 0.0f};
    Volume n = normalize(v, -1000.0, 1000.0);
    CHECK(n.voxels[0] == 0.0f);
    CHECK(n.voxels[1] == 1.0f);
    CHECK(n.voxels[2] == 0.5f);
    CHECK(n.unit == IntensityUnit::normalized);
}

TEST_CASE("normalize clamps out-of-window values") {
    Volume v(1, 1, 1);
    v.voxels = {5000.0f};
    Volume n = normalize(v, -1000.0, 1000.0);
    CHECK(n.voxels[0] == 1.0f);
}

TEST_CASE("normalize with [0,1] window is idempotent") {
    Volume v(1, 1, 1, 0.3f, IntensityUnit::normalized);
    Volume n = normalize(v, 0.0, 1.0);
    CHECK(n.voxels[0] == 0.3f);

    Volume r = random_volume(4, 4, 4, 5);
    Volume n1 = normalize(r, -500.0, 500.0);
    Volume n2 = normalize(n1, 0.0, 1.0);
    CHECK(std::memcmp(n1.voxels.data(), n2.voxels.data(), n1.size() * 4) == 0);
}

TEST_CASE("normalize rejects bad window") {
    Volume v(1, 1, 1);
    CHECK_THROWS_AS(normalize(v, 1.0, 1.0), ParamError);
    CHECK_THROWS_AS(normalize(v, 2.0, 1.0), ParamError);
}

TEST_CASE("phantom sphere voxel count matches analytic volume") {
    PhantomSpec spec;
    spec.height = spec.width = spec.depth = 32;
    spec.background = 0.0f;
    OrganSpec o;
    o.id = 1;
    o.shape = OrganShape::sphere;
    o.cx = o.cy = o.cz = 16.0;
    o.rx = 8.0;
    o.intensity = 1.0f;
    spec.organs = {o};
    auto [vol, labels] = make_phantom(spec);
    const double analytic = 4.0 / 3.0 * 3.14159265358979323846 * 8.0 * 8.0 * 8.0;
    const double counted = static_cast<double>(count_label(labels, 1));
    CHECK(std::abs(counted - analytic) / analytic < 0.05);
    // labeled voxels carry the organ intensity
    for (std::size_t i = 0; i < labels.size(); ++i)
        CHECK(vol.voxels[i] == (labels.labels[i] == 1 ? 1.0f : 0.0f));
}

TEST_CASE("empty organ list gives uniform background") {
    PhantomSpec spec;
    spec.height = spec.width = spec.depth = 8;
    spec.background = -950.0f;
    auto [vol, labels] = make_phantom(spec);
    for (float x : vol.voxels) CHECK(x == -950.0f);
    for (auto l : labels.labels) CHECK(l == 0);
}

TEST_CASE("disjoint organs add up and are order-invariant") {
    PhantomSpec spec;
    spec.height = spec.width = spec.depth = 32;
    OrganSpec a;
    a.id = 1;
    a.shape = OrganShape::sphere;
    a.cx = a.cy = a.cz = 8.0;
    a.rx = 4.0;
    a.intensity = 0.5f;
    OrganSpec b;
    b.id = 2;
    b.shape = OrganShape::sphere;
    b.cx = b.cy = b.cz = 23.0;
    b.rx = 5.0;
    b.intensity = 0.8f;
    spec.organs = {a, b};
    auto [v1, l1] = make_phantom(spec);

    PhantomSpec only_a = spec;
    only_a.organs = {a};
    PhantomSpec only_b = spec;
    only_b.organs = {b};
    auto [va, la] = make_phantom(only_a);
    auto [vb, lb] = make_phantom(only_b);
    CHECK(count_label(l1, 1) == count_label(la, 1));
    CHECK(count_label(l1, 2) == count_label(lb, 2));

    PhantomSpec swapped = spec;
    swapped.organs = {b, a};
    auto [v2, l2] = make_phantom(swapped);
    CHECK(count_label(l2, 1) == count_label(l1, 1));
    CHECK(count_label(l2, 2) == count_label(l1, 2));
}

TEST_CASE("organ exceeding bounds is a spec error") {
    PhantomSpec spec;
    spec.height = spec.width = spec.depth = 16;
    OrganSpec o;
    o.id = 3;
    o.shape = OrganShape::sphere;
    o.cx = o.cy = o.cz = 14.0;
    o.rx = 4.0;
    spec.organs = {o};
    try {
        make_phantom(spec);
        FAIL("expected ParamError");
    } catch (const ParamError& e) {
        CHECK(std::string(e.what()).find("organ 3") != std::string::npos);
    }
}

TEST_CASE("corrupt_gaussian with sigma 0 is the identity") {
    Volume v = random_volume(8, 8, 8, 12);
    Volume c = corrupt_gaussian(v, 0.0, 777);
    CHECK(std::memcmp(v.voxels.data(), c.voxels.data(), v.size() * 4) == 0);
}

TEST_CASE("corrupt_gaussian is seeded and reproducible") {
    Volume v = random_volume(8, 8, 8, 12);
    Volume a = corrupt_gaussian(v, 0.25, 42);
    Volume b = corrupt_gaussian(v, 0.25, 42);
    CHECK(std::memcmp(a.voxels.data(), b.voxels.data(), v.size() * 4) == 0);
    Volume c = corrupt_gaussian(v, 0.25, 43);
    CHECK(std::memcmp(a.voxels.data(), c.voxels.data(), v.size() * 4) != 0);
}

TEST_CASE("corrupt_gaussian noise statistics") {
    const double sigma = 0.1;
    Volume v(64, 64, 64, 0.5f, IntensityUnit::normalized);
    Volume c = corrupt_gaussian(v, sigma, 2718);
    const std::size_t n = v.size();
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += c.voxels[i] - v.voxels[i];
    mean /= static_cast<double>(n);
    // CLT bound computed at test time
    CHECK(std::abs(mean) < 3.0 * sigma / std::sqrt(static_cast<double>(n)));

    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = (c.voxels[i] - v.voxels[i]) - mean;
        var += d * d;
    }
    var /= static_cast<double>(n - 1);
    CHECK(std::abs(var - sigma * sigma) / (sigma * sigma) < 0.05);
}

TEST_CASE("corrupt_gaussian rejects negative sigma") {
    Volume v(2, 2, 2);
    CHECK_THROWS_AS(corrupt_gaussian(v, -0.1, 1), ParamError);
}

TEST_CASE("random phantom specs are deterministic and in bounds") {
    CorpusSpec cs;
    PhantomSpec a = random_phantom_spec(cs, 7);
    PhantomSpec b = random_phantom_spec(cs, 7);
    REQUIRE(a.organs.size() == b.organs.size());
    for (std::size_t i = 0; i < a.organs.size(); ++i) {
        CHECK(a.organs[i].cx == b.organs[i].cx);
        CHECK(a.organs[i].intensity == b.organs[i].intensity);
    }
    CHECK(a.organs.size() == 8);
    CHECK_NOTHROW(make_phantom(a));
}
