#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "koa/image.hpp"
#include "koa/tensor.hpp"

namespace koa::dataset {

/// A preprocessed sample: image tensor plus KL grade in {0..4} (or a binary
/// label after remapping).
struct LabeledSample {
    Tensor tensor;
    int grade = 0;
    std::string source_id;
};

/// Raw image paired with its directory-name grade, before preprocessing.
struct RawSample {
    GrayImage image;
    int grade = 0;
    std::string source_id;
};

struct IngestResult {
    std::vector<RawSample> samples;
    std::map<int, size_t> class_counts;
    size_t skipped = 0;
    int n_classes = 0;  // max grade found + 1
};

/// Reads root/<grade>/<file>.png|.pgm. Subdirectories must be named 0..4;
/// unreadable files are skipped with a warning and counted. Samples are
/// ordered by (grade, filename) so downstream seeding is reproducible.
IngestResult ingest(const std::string& root);

struct SplitRatios {
    double train = 0.7;
    double val = 0.15;
    double test = 0.15;

    void validate() const;
};

/// Index-level stratified split; indices refer to the input label vector.
struct SplitIndices {
    std::vector<size_t> train;
    std::vector<size_t> val;
    std::vector<size_t> test;
    SplitRatios ratios;
    uint64_t seed = 0;
    bool empty_split_warning = false;
};

/// Per-class seeded shuffle followed by proportional assignment. Every class
/// needs at least 3 samples. Deterministic under (labels order, seed).
SplitIndices stratified_split(const std::vector<int>& labels, const SplitRatios& ratios,
                              uint64_t seed);

struct ClassWeights {
    std::vector<double> weights;
};

/// Inverse-frequency weights w_c = N / (C * n_c). Every class in
/// 0..n_classes-1 must appear at least once.
ClassWeights class_weights(const std::vector<int>& labels, int n_classes);

/// KL grade {0,1} -> 0 (negative prognosis); {2,3,4} -> 1 (positive).
int remap_binary(int grade);

struct SynthSpec {
    std::array<size_t, 5> counts = {50, 40, 45, 30, 15};
    size_t width = 64;
    size_t height = 64;
    uint64_t seed = 0;
};

/// Desk-scale synthetic radiograph stand-in: two bright horizontal bone bands
/// with a dark gap whose width shrinks monotonically with grade (emulating
/// joint space narrowing), grade-scaled noise, and bright speckles for
/// grades 3-4. Deterministic under seed.
std::vector<RawSample> synthesize(const SynthSpec& spec);

/// Writes samples to root/<grade>/<id>.pgm plus a manifest.csv
/// (source_id, grade) in root.
void write_dataset(const std::vector<RawSample>& samples, const std::string& root);

/// Split manifest persistence: CSV columns source_id, grade, split.
void write_split_manifest(const std::string& path, const std::vector<RawSample>& samples,
                          const SplitIndices& split,
                          const std::map<std::string, std::string>& meta);

struct ManifestRow {
    std::string source_id;
    int grade = 0;
    std::string split;
};

std::vector<ManifestRow> read_split_manifest(const std::string& path);

}  // namespace koa::dataset
