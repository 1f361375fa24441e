#include "lsseg/data_synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "lsseg/error.hpp"
#include "lsseg/rng.hpp"

namespace fs = std::filesystem;

namespace lsseg {

void SceneSpec::validate() const {
    if (height < 8 || width < 8) throw ConfigError("scene size must be at least 8x8");
    if (num_classes < 2) throw ConfigError("need at least 2 classes (background + 1 shape)");
    if (shapes_min < 0 || shapes_max < shapes_min) throw ConfigError("invalid shapes range");
    if (noise_sigma < 0.0) throw ConfigError("noise_sigma must be >= 0");
}

namespace {

double class_intensity(int cls, int num_classes) {
    if (cls == 0) return 0.1;
    if (num_classes == 2) return 0.6;
    return 0.35 + 0.55 * static_cast<double>(cls - 1) / static_cast<double>(num_classes - 2);
}

struct ShapeGeom {
    int kind = 0;  // 0 disk, 1 rectangle, 2 triangle
    int cx = 0, cy = 0;
    int a = 0, b = 0;  // radius / half extents

    bool contains(int r, int c) const {
        switch (kind) {
            case 0: {
                const double dr = r - cy, dc = c - cx;
                return dr * dr + dc * dc <= static_cast<double>(a) * a;
            }
            case 1:
                return std::abs(r - cy) <= b && std::abs(c - cx) <= a;
            default: {
                // upright isoceles triangle: apex (cx, cy-a), base at cy+a
                if (r < cy - a || r > cy + a) return false;
                const double frac = static_cast<double>(r - (cy - a)) / (2.0 * a);
                return std::abs(c - cx) <= frac * a;
            }
        }
    }
};

bool try_place(const LabelMap& labels, const ShapeGeom& s) {
    for (int r = s.cy - std::max(s.a, s.b); r <= s.cy + std::max(s.a, s.b); ++r) {
        for (int c = s.cx - std::max(s.a, s.b); c <= s.cx + std::max(s.a, s.b); ++c) {
            if (r < 0 || r >= labels.rows() || c < 0 || c >= labels.cols()) continue;
            if (s.contains(r, c) && labels.at(r, c) != 0) return false;
        }
    }
    return true;
}

void stamp(LabelMap& labels, Image& img, const ShapeGeom& s, std::int32_t cls, double intensity) {
    for (int r = s.cy - std::max(s.a, s.b); r <= s.cy + std::max(s.a, s.b); ++r) {
        for (int c = s.cx - std::max(s.a, s.b); c <= s.cx + std::max(s.a, s.b); ++c) {
            if (r < 0 || r >= labels.rows() || c < 0 || c >= labels.cols()) continue;
            if (s.contains(r, c)) {
                labels.at_mut(r, c) = cls;
                img.px.at_mut(0, r, c) = intensity;
            }
        }
    }
}

}  // namespace

Scene generate_scene(const SceneSpec& spec, std::uint64_t index) {
    spec.validate();
    Rng rng = Rng::for_index(spec.seed, index);

    Scene scene{Image(spec.height, spec.width, 1, class_intensity(0, spec.num_classes)),
                LabelMap(spec.height, spec.width, 0)};

    const int min_dim = std::min(spec.height, spec.width);
    const int r_min = std::max(3, min_dim / 16);
    const int r_max = std::max(r_min + 1, min_dim / 5);

    scene.requested_shapes =
        static_cast<int>(rng.uniform_int(spec.shapes_min, spec.shapes_max));

    for (int i = 0; i < scene.requested_shapes; ++i) {
        const std::int32_t cls = 1 + static_cast<std::int32_t>(i % (spec.num_classes - 1));
        ShapeGeom s;
        s.kind = (cls - 1) % 3;
        s.a = static_cast<int>(rng.uniform_int(r_min, r_max));
        s.b = s.kind == 1 ? static_cast<int>(rng.uniform_int(r_min, r_max)) : s.a;
        const double intensity = std::clamp(
            class_intensity(cls, spec.num_classes) + rng.uniform(-0.04, 0.04), 0.02, 0.98);

        bool placed = false;
        for (int attempt = 0; attempt < 100; ++attempt) {
            const int ext = std::max(s.a, s.b);
            s.cy = static_cast<int>(rng.uniform_int(ext, spec.height - 1 - ext));
            s.cx = static_cast<int>(rng.uniform_int(ext, spec.width - 1 - ext));
            if (try_place(scene.labels, s)) {
                stamp(scene.labels, scene.image, s, cls, intensity);
                placed = true;
                break;
            }
        }
        if (placed) {
            ++scene.placed_shapes;
        } else {
            scene.truncated = true;
        }
    }

    if (spec.noise_sigma > 0.0) {
        auto px = scene.image.px.data_mut();
        for (auto& v : px) v = std::clamp(v + spec.noise_sigma * rng.normal(), 0.0, 1.0);
    }
    return scene;
}

namespace {

void atomic_write(const std::string& path, const std::string& payload) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw IoError("cannot open " + tmp + " for writing");
        out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
        if (!out) throw IoError("failed writing " + tmp);
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) throw IoError("cannot rename " + tmp + " to " + path + ": " + ec.message());
}

/// Minimal PGM header parser that reports the byte offset of malformed input.
class PgmParser {
public:
    explicit PgmParser(std::string bytes, std::string path)
        : bytes_(std::move(bytes)), path_(std::move(path)) {}

    void expect_magic() {
        if (bytes_.size() < 2 || bytes_[0] != 'P' || bytes_[1] != '5') {
            fail("not a binary PGM (missing P5 magic)", 0);
        }
        pos_ = 2;
    }

    int read_int(const char* what) {
        skip_space_and_comments();
        const std::size_t start = pos_;
        long v = 0;
        while (pos_ < bytes_.size() && bytes_[pos_] >= '0' && bytes_[pos_] <= '9') {
            v = v * 10 + (bytes_[pos_] - '0');
            if (v > 1 << 30) fail(std::string(what) + " out of range", start);
            ++pos_;
        }
        if (pos_ == start) fail(std::string("expected ") + what, pos_);
        return static_cast<int>(v);
    }

    /// Consume the single whitespace byte separating header from payload.
    void expect_payload_separator() {
        if (pos_ >= bytes_.size() || !std::isspace(static_cast<unsigned char>(bytes_[pos_]))) {
            fail("missing whitespace before payload", pos_);
        }
        ++pos_;
    }

    std::string_view payload(std::size_t expected_bytes) {
        if (bytes_.size() - pos_ < expected_bytes) {
            fail("truncated payload: expected " + std::to_string(expected_bytes) + " bytes, have " +
                     std::to_string(bytes_.size() - pos_),
                 pos_);
        }
        return std::string_view(bytes_).substr(pos_, expected_bytes);
    }

    [[noreturn]] void fail(const std::string& msg, std::size_t offset) const {
        throw IoError(path_ + ": " + msg + " (byte offset " + std::to_string(offset) + ")");
    }

private:
    void skip_space_and_comments() {
        while (pos_ < bytes_.size()) {
            const char c = bytes_[pos_];
            if (std::isspace(static_cast<unsigned char>(c))) {
                ++pos_;
            } else if (c == '#') {
                while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
            } else {
                break;
            }
        }
    }

    std::string bytes_;
    std::string path_;
    std::size_t pos_ = 0;
};

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

void write_pgm(const std::string& path, const Image& img) {
    if (img.channels() != 1) throw ShapeError("PGM stores single-channel images");
    std::string payload = "P5\n" + std::to_string(img.cols()) + " " + std::to_string(img.rows()) +
                          "\n255\n";
    payload.reserve(payload.size() + img.px.size());
    for (double v : img.px.data()) {
        if (!(v >= 0.0 && v <= 1.0)) throw NumericError("image value outside [0,1]");
        payload.push_back(static_cast<char>(static_cast<unsigned char>(std::floor(v * 255.0 + 0.5))));
    }
    atomic_write(path, payload);
}

void write_pgm(const std::string& path, const LabelMap& labels) {
    std::string payload = "P5\n" + std::to_string(labels.cols()) + " " +
                          std::to_string(labels.rows()) + "\n65535\n";
    payload.reserve(payload.size() + 2 * labels.size());
    for (auto v : labels.labels) {
        if (v < 0 || v > 65535) throw NumericError("label not representable in 16 bits");
        // PGM stores 2-byte samples most significant byte first
        payload.push_back(static_cast<char>(static_cast<unsigned char>(v >> 8)));
        payload.push_back(static_cast<char>(static_cast<unsigned char>(v & 0xff)));
    }
    atomic_write(path, payload);
}

Image read_pgm_image(const std::string& path) {
    PgmParser parser(slurp(path), path);
    parser.expect_magic();
    const int w = parser.read_int("width");
    const int h = parser.read_int("height");
    const int maxval = parser.read_int("maxval");
    if (maxval != 255) parser.fail("expected maxval 255 for images, got " + std::to_string(maxval), 0);
    parser.expect_payload_separator();
    const auto bytes = parser.payload(static_cast<std::size_t>(w) * h);

    Image img(h, w, 1);
    auto dst = img.px.data_mut();
    for (std::size_t i = 0; i < dst.size(); ++i) {
        dst[i] = static_cast<double>(static_cast<unsigned char>(bytes[i])) / 255.0;
    }
    return img;
}

LabelMap read_pgm_labels(const std::string& path) {
    PgmParser parser(slurp(path), path);
    parser.expect_magic();
    const int w = parser.read_int("width");
    const int h = parser.read_int("height");
    const int maxval = parser.read_int("maxval");
    if (maxval != 65535) {
        parser.fail("expected maxval 65535 for labels, got " + std::to_string(maxval), 0);
    }
    parser.expect_payload_separator();
    const auto bytes = parser.payload(static_cast<std::size_t>(w) * h * 2);

    LabelMap labels(h, w, 0);
    for (std::size_t i = 0; i < labels.labels.size(); ++i) {
        const auto hi = static_cast<unsigned char>(bytes[2 * i]);
        const auto lo = static_cast<unsigned char>(bytes[2 * i + 1]);
        labels.labels[i] = static_cast<std::int32_t>((hi << 8) | lo);
    }
    return labels;
}

namespace {
std::string format_double(double v) {
    std::ostringstream ss;
    ss.precision(17);
    ss << v;
    return ss.str();
}
}  // namespace

void write_manifest(const std::string& path, const DatasetManifest& manifest) {
    std::ostringstream out;
    out << "lsseg-dataset " << manifest.version << "\n"
        << "height " << manifest.spec.height << "\n"
        << "width " << manifest.spec.width << "\n"
        << "classes " << manifest.spec.num_classes << "\n"
        << "shapes_min " << manifest.spec.shapes_min << "\n"
        << "shapes_max " << manifest.spec.shapes_max << "\n"
        << "noise_sigma " << format_double(manifest.spec.noise_sigma) << "\n"
        << "seed " << manifest.spec.seed << "\n"
        << "truncated_scenes " << manifest.truncated_scenes << "\n"
        << "count " << manifest.entries.size() << "\n";
    for (const auto& [img, lab] : manifest.entries) out << img << '\t' << lab << '\n';
    atomic_write(path, out.str());
}

DatasetManifest read_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);

    DatasetManifest m;
    std::string line;
    if (!std::getline(in, line)) throw IoError(path + ": empty manifest");
    {
        std::istringstream head(line);
        std::string tag;
        head >> tag >> m.version;
        if (tag != "lsseg-dataset" || m.version != 1) {
            throw IoError(path + ": unsupported manifest header '" + line + "'");
        }
    }

    std::size_t count = 0;
    while (std::getline(in, line)) {
        std::istringstream ls(line);
        std::string key;
        ls >> key;
        if (key == "height") ls >> m.spec.height;
        else if (key == "width") ls >> m.spec.width;
        else if (key == "classes") ls >> m.spec.num_classes;
        else if (key == "shapes_min") ls >> m.spec.shapes_min;
        else if (key == "shapes_max") ls >> m.spec.shapes_max;
        else if (key == "noise_sigma") ls >> m.spec.noise_sigma;
        else if (key == "seed") ls >> m.spec.seed;
        else if (key == "truncated_scenes") ls >> m.truncated_scenes;
        else if (key == "count") {
            ls >> count;
            break;
        } else {
            throw IoError(path + ": unknown manifest key '" + key + "'");
        }
        if (!ls) throw IoError(path + ": malformed manifest line '" + line + "'");
    }

    for (std::size_t i = 0; i < count; ++i) {
        if (!std::getline(in, line)) throw IoError(path + ": manifest lists fewer entries than count");
        const auto tab = line.find('\t');
        if (tab == std::string::npos) throw IoError(path + ": entry missing tab separator: " + line);
        m.entries.emplace_back(line.substr(0, tab), line.substr(tab + 1));
    }
    return m;
}

DatasetManifest build_dataset(const SceneSpec& spec, int n, const std::string& dir) {
    spec.validate();
    if (n < 0) throw ConfigError("dataset size must be >= 0");

    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory " + dir + ": " + ec.message());

    DatasetManifest manifest;
    manifest.spec = spec;
    for (int i = 0; i < n; ++i) {
        const Scene scene = generate_scene(spec, static_cast<std::uint64_t>(i));
        if (scene.truncated) ++manifest.truncated_scenes;

        char img_name[32], lab_name[32];
        std::snprintf(img_name, sizeof(img_name), "img_%04d.pgm", i);
        std::snprintf(lab_name, sizeof(lab_name), "lab_%04d.pgm", i);
        write_pgm((fs::path(dir) / img_name).string(), scene.image);
        write_pgm((fs::path(dir) / lab_name).string(), scene.labels);
        manifest.entries.emplace_back(img_name, lab_name);
    }
    write_manifest((fs::path(dir) / "manifest.txt").string(), manifest);
    return manifest;
}

Dataset load_dataset(const std::string& manifest_path) {
    const DatasetManifest manifest = read_manifest(manifest_path);
    const fs::path base = fs::path(manifest_path).parent_path();

    Dataset ds;
    ds.spec = manifest.spec;
    ds.samples.reserve(manifest.entries.size());
    for (const auto& [img_rel, lab_rel] : manifest.entries) {
        Image img = read_pgm_image((base / img_rel).string());
        LabelMap lab = read_pgm_labels((base / lab_rel).string());
        if (img.rows() != lab.rows() || img.cols() != lab.cols()) {
            throw IoError(img_rel + " and " + lab_rel + " disagree in shape");
        }
        lab.validate(manifest.spec.num_classes);
        ds.samples.emplace_back(std::move(img), std::move(lab));
    }
    return ds;
}

}  // namespace lsseg
