#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "lsseg/grid.hpp"

namespace lsseg {

/// Parameters of the synthetic corpus: geometric shapes with per-class
/// intensities on a dark background, with Gaussian pixel noise on the image
/// and exact noiseless labels.
struct SceneSpec {
    int height = 64;
    int width = 64;
    int num_classes = 4;  // background plus num_classes-1 shape classes
    int shapes_min = 3;
    int shapes_max = 6;
    double noise_sigma = 0.05;
    std::uint64_t seed = 0;

    void validate() const;
};

struct Scene {
    Image image;
    LabelMap labels;
    int requested_shapes = 0;
    int placed_shapes = 0;
    bool truncated = false;  // some shape could not be placed without overlap
};

/// Deterministic in (spec.seed, index): the same pair always produces the
/// same bytes. Shape classes cycle disk=1, rectangle=2, triangle=3, then
/// repeat for higher class ids.
Scene generate_scene(const SceneSpec& spec, std::uint64_t index);

/// Binary PGM (P5). Images quantize to maxval 255 with round-half-up;
/// label maps store maxval 65535 with the PGM standard byte order.
void write_pgm(const std::string& path, const Image& img);
void write_pgm(const std::string& path, const LabelMap& labels);
Image read_pgm_image(const std::string& path);
LabelMap read_pgm_labels(const std::string& path);

struct DatasetManifest {
    int version = 1;
    SceneSpec spec;
    int truncated_scenes = 0;
    std::vector<std::pair<std::string, std::string>> entries;  // image path, label path
};

/// Generate n scenes into dir (files are written atomically) and return the
/// manifest, which is also stored as dir/manifest.txt.
DatasetManifest build_dataset(const SceneSpec& spec, int n, const std::string& dir);

DatasetManifest read_manifest(const std::string& path);
void write_manifest(const std::string& path, const DatasetManifest& manifest);

struct Sample {
    Image image;
    LabelMap labels;

    Sample(Image img, LabelMap lab) : image(std::move(img)), labels(std::move(lab)) {}
};

struct Dataset {
    SceneSpec spec;
    std::vector<Sample> samples;
};

/// Load every image/label pair listed in a manifest; paths are resolved
/// relative to the manifest location. Shapes and label ranges are validated.
Dataset load_dataset(const std::string& manifest_path);

}  // namespace lsseg
