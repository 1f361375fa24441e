#include <doctest.h>

#include <array>
#include <fstream>
#include <set>

#include "lsseg/data_synth.hpp"
#include "lsseg/ls_loss.hpp"
#include "test_util.hpp"

using namespace lsseg;
using lsseg::test::TempDir;

TEST_CASE("noiseless scenes have labels exactly matching shape intensities") {
    SceneSpec spec;
    spec.height = 32;
    spec.width = 32;
    spec.num_classes = 2;
    spec.shapes_min = 1;
    spec.shapes_max = 1;
    spec.noise_sigma = 0.0;
    spec.seed = 3;

    const Scene scene = generate_scene(spec, 0);
    REQUIRE(scene.placed_shapes == 1);
    CHECK_FALSE(scene.truncated);
    scene.labels.validate(2);
    scene.image.validate();

    // the disk's pixels share one intensity distinct from the background
    std::set<double> disk_values, bg_values;
    for (int r = 0; r < 32; ++r) {
        for (int c = 0; c < 32; ++c) {
            if (scene.labels.at(r, c) == 1) {
                disk_values.insert(scene.image.px.at(0, r, c));
            } else {
                bg_values.insert(scene.image.px.at(0, r, c));
            }
        }
    }
    CHECK(disk_values.size() == 1);
    CHECK(bg_values.size() == 1);
    CHECK(*disk_values.begin() != *bg_values.begin());
}

TEST_CASE("scene generation is deterministic in (seed, index)") {
    SceneSpec spec;
    spec.seed = 12;
    const Scene a = generate_scene(spec, 5);
    const Scene b = generate_scene(spec, 5);
    CHECK(a.image.px.data().size() == b.image.px.data().size());
    for (std::size_t i = 0; i < a.image.px.size(); ++i) {
        CHECK(a.image.px.data()[i] == b.image.px.data()[i]);
    }
    CHECK(a.labels.labels == b.labels.labels);

    const Scene c = generate_scene(spec, 6);
    CHECK(a.labels.labels != c.labels.labels);
}

TEST_CASE("generated labels always decompose into a partition") {
    SceneSpec spec;
    spec.seed = 9;
    for (std::uint64_t idx = 0; idx < 10; ++idx) {
        const Scene scene = generate_scene(spec, idx);
        scene.labels.validate(spec.num_classes);
        const DecomposedGT d = decompose_ground_truth(scene.labels);
        Grid sum(1, scene.labels.rows(), scene.labels.cols(), 0.0);
        for (const auto& [cls, mask] : d.masks) {
            auto dst = sum.data_mut();
            auto src = mask.mask.data();
            for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
        }
        for (double v : sum.data()) CHECK(v == 1.0);
    }
}

TEST_CASE("every class appears in nearly all scenes of the default spec") {
    SceneSpec spec;  // K = 4, 3..6 shapes
    spec.seed = 7;
    const int n = 200;
    int images_with_all = 0;
    std::array<int, 4> seen_count{};
    for (int idx = 0; idx < n; ++idx) {
        const Scene scene = generate_scene(spec, static_cast<std::uint64_t>(idx));
        std::set<std::int32_t> present(scene.labels.labels.begin(), scene.labels.labels.end());
        bool all = true;
        for (std::int32_t cls = 0; cls < 4; ++cls) {
            if (present.count(cls) != 0) {
                ++seen_count[cls];
            } else {
                all = false;
            }
        }
        images_with_all += all ? 1 : 0;
    }
    for (int cls = 0; cls < 4; ++cls) CHECK(seen_count[cls] >= n * 9 / 10);
    CHECK(images_with_all >= n * 9 / 10);
}

TEST_CASE("label maps round-trip exactly through PGM") {
    TempDir tmp;
    LabelMap labels(2, 2);
    labels.at_mut(0, 0) = 0;
    labels.at_mut(0, 1) = 1;
    labels.at_mut(1, 0) = 2;
    labels.at_mut(1, 1) = 3;
    const std::string path = tmp.file("labels.pgm");
    write_pgm(path, labels);
    const LabelMap back = read_pgm_labels(path);
    CHECK(back.labels == labels.labels);
}

TEST_CASE("image quantization rounds half up") {
    TempDir tmp;
    Image img(1, 2, 1);
    img.px.at_mut(0, 0, 0) = 0.5;  // 0.5*255 = 127.5 -> byte 128
    img.px.at_mut(0, 0, 1) = 1.0;
    const std::string path = tmp.file("img.pgm");
    write_pgm(path, img);

    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    CHECK(static_cast<unsigned char>(bytes[bytes.size() - 2]) == 128);
    CHECK(static_cast<unsigned char>(bytes[bytes.size() - 1]) == 255);

    const Image back = read_pgm_image(path);
    CHECK(back.px.at(0, 0, 0) == doctest::Approx(128.0 / 255.0).epsilon(1e-15));
}

TEST_CASE("images round-trip within one quantization step") {
    TempDir tmp;
    const Scene scene = generate_scene(SceneSpec{}, 1);
    const std::string path = tmp.file("img.pgm");
    write_pgm(path, scene.image);
    const Image back = read_pgm_image(path);
    for (std::size_t i = 0; i < back.px.size(); ++i) {
        CHECK(std::abs(back.px.data()[i] - scene.image.px.data()[i]) <= 0.5 / 255.0 + 1e-12);
    }
}

TEST_CASE("malformed PGM input names the byte offset") {
    TempDir tmp;
    const std::string path = tmp.file("bad.pgm");
    {
        std::ofstream out(path, std::ios::binary);
        out << "PX\n2 2\n255\n";
    }
    try {
        read_pgm_image(path);
        FAIL("expected IoError");
    } catch (const IoError& e) {
        CHECK(std::string(e.what()).find("byte offset") != std::string::npos);
    }

    const std::string truncated = tmp.file("short.pgm");
    {
        std::ofstream out(truncated, std::ios::binary);
        out << "P5\n4 4\n255\n";
        out << "ab";  // 2 of 16 payload bytes
    }
    try {
        read_pgm_image(truncated);
        FAIL("expected IoError");
    } catch (const IoError& e) {
        CHECK(std::string(e.what()).find("truncated") != std::string::npos);
    }
}

TEST_CASE("empty dataset has a valid manifest") {
    TempDir tmp;
    const DatasetManifest manifest = build_dataset(SceneSpec{}, 0, tmp.file("ds"));
    CHECK(manifest.entries.empty());
    const DatasetManifest back = read_manifest(tmp.file("ds") + "/manifest.txt");
    CHECK(back.entries.empty());
    CHECK(back.spec.num_classes == 4);
}

TEST_CASE("dataset files, manifest and loader agree") {
    TempDir tmp;
    SceneSpec spec;
    spec.height = 16;
    spec.width = 16;
    spec.shapes_min = 1;
    spec.shapes_max = 2;
    spec.seed = 42;

    const DatasetManifest manifest = build_dataset(spec, 10, tmp.file("ds"));
    CHECK(manifest.entries.size() == 10);

    int pgm_count = 0;
    for (const auto& entry : std::filesystem::directory_iterator(tmp.file("ds"))) {
        if (entry.path().extension() == ".pgm") ++pgm_count;
    }
    CHECK(pgm_count == 20);

    const Dataset ds = load_dataset(tmp.file("ds") + "/manifest.txt");
    CHECK(ds.samples.size() == 10);
    CHECK(ds.spec.seed == 42);
    for (const auto& s : ds.samples) {
        CHECK(s.image.rows() == 16);
        CHECK(s.labels.cols() == 16);
    }
}

TEST_CASE("rebuilding a dataset reproduces identical bytes") {
    TempDir tmp;
    SceneSpec spec;
    spec.height = 16;
    spec.width = 16;
    spec.seed = 5;
    spec.shapes_min = 1;
    spec.shapes_max = 2;

    build_dataset(spec, 4, tmp.file("a"));
    build_dataset(spec, 4, tmp.file("b"));
    for (int i = 0; i < 4; ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "img_%04d.pgm", i);
        std::ifstream fa(tmp.file("a") + "/" + name, std::ios::binary);
        std::ifstream fb(tmp.file("b") + "/" + name, std::ios::binary);
        const std::string a((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
        const std::string b((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
        CHECK(a == b);
        CHECK_FALSE(a.empty());
    }
}

TEST_CASE("spec validation") {
    SceneSpec spec;
    spec.num_classes = 1;
    CHECK_THROWS_AS(spec.validate(), ConfigError);
    spec = SceneSpec{};
    spec.noise_sigma = -0.1;
    CHECK_THROWS_AS(spec.validate(), ConfigError);
    spec = SceneSpec{};
    spec.shapes_min = 4;
    spec.shapes_max = 2;
    CHECK_THROWS_AS(spec.validate(), ConfigError);
}
