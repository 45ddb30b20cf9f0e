#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "caal/rng.hpp"
#include "caal/tensor.hpp"

namespace caal::data {

// One manifest row. Paths are relative to the manifest file's directory.
struct ManifestEntry {
    std::string id;
    std::string path;
    std::string patient_id;
    std::vector<int> labels;  // 0/1 per class, width = manifest class count
    std::string split;        // "train" | "val" | "test" | "" (unassigned)
    std::string mask_path;    // may be empty
};

struct DatasetManifest {
    std::string root;  // directory the paths resolve against
    std::vector<std::string> class_names;
    std::vector<ManifestEntry> entries;

    int num_classes() const { return static_cast<int>(class_names.size()); }
    const ManifestEntry* find(const std::string& id) const;
    std::vector<size_t> split_indices(const std::string& split) const;
    std::string label_string(const ManifestEntry& e) const;  // "|"-joined names
};

// in-memory sample used by trainers
struct Sample {
    std::string id;
    Tensor image;  // (H,W) in [0,1]
    Tensor mask;   // (H,W) in {0,1}; may be undefined
    std::vector<int> labels;
    std::string patient_id;
    bool synthetic = false;
    std::string base_id;
};

struct ClassDistribution {
    std::vector<int64_t> counts;
    std::vector<double> fractions;
    int64_t total = 0;
};

struct ToyConfig {
    int num_classes = 6;
    int num_patients = 400;
    int images_per_patient = 5;
    int side = 64;
    std::vector<double> imbalance;  // length num_classes
    std::string label_mode = "multilabel";
    double second_label_prob = 0.3;
    bool allow_normal = false;
    double normal_prob = 0.15;
    double artifact_strength = 0.35;
    double noise = 0.05;
    uint64_t seed = 7;
};

// deterministic procedural corpus: images + masks written under out_dir,
// manifest returned (splits unassigned). Every class is guaranteed >= 1 image.
DatasetManifest generate_toy_corpus(const ToyConfig& cfg, const std::string& out_dir);

// assigns each patient wholly to one split; fractions by image count
DatasetManifest split_by_patient(DatasetManifest m, const std::vector<double>& fractions,
                                 uint64_t seed);

ClassDistribution class_distribution(const DatasetManifest& m, const std::vector<size_t>& idx);
ClassDistribution class_distribution(const DatasetManifest& m);

void write_manifest(const DatasetManifest& m, const std::string& csv_path);
DatasetManifest read_manifest(const std::string& csv_path);

// image/mask loading against the manifest root
Tensor load_image(const DatasetManifest& m, const ManifestEntry& e);
Tensor load_mask(const DatasetManifest& m, const ManifestEntry& e);
Sample load_sample(const DatasetManifest& m, const ManifestEntry& e);
std::vector<Sample> load_split(const DatasetManifest& m, const std::string& split);

// deterministic toy class names; zero-padded index prefix keeps sorted order
// equal to index order when manifests are re-read
std::vector<std::string> toy_class_names(int num_classes);

}  // namespace caal::data
