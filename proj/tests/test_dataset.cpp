#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "koa/dataset.hpp"
#include "koa/rng.hpp"
#include "test_util.hpp"

using namespace koa;
using namespace koa::dataset;
namespace fs = std::filesystem;

namespace {

void write_tiny_pgm(const std::string& path, uint8_t value) {
    GrayImage img(4, 4, value);
    img_io::write_pgm(img, path);
}

}  // namespace

TEST_CASE("ingest: counts per class and histogram") {
    koa_test::TempDir tmp("ingest");
    for (int g = 0; g < 5; ++g) {
        fs::create_directories(tmp.path / std::to_string(g));
        write_tiny_pgm((tmp.path / std::to_string(g) / "a.pgm").string(), 10);
        write_tiny_pgm((tmp.path / std::to_string(g) / "b.pgm").string(), 20);
    }
    IngestResult r = ingest(tmp.str());
    CHECK(r.samples.size() == 10);
    CHECK(r.n_classes == 5);
    for (int g = 0; g < 5; ++g) CHECK(r.class_counts.at(g) == 2);
    CHECK(r.skipped == 0);
    // source ids are relative paths
    std::set<std::string> ids;
    for (const auto& s : r.samples) ids.insert(s.source_id);
    CHECK(ids.count("0/a.pgm") == 1);
    CHECK(ids.size() == 10);
}

TEST_CASE("ingest: empty root raises 'no classes found'") {
    koa_test::TempDir tmp("ingest_empty");
    CHECK_THROWS_WITH_AS(ingest(tmp.str()), doctest::Contains("no classes found"), DataError);
}

TEST_CASE("ingest: out-of-range grade directory names the offending path") {
    koa_test::TempDir tmp("ingest_bad");
    fs::create_directories(tmp.path / "0");
    write_tiny_pgm((tmp.path / "0" / "a.pgm").string(), 1);
    fs::create_directories(tmp.path / "5");
    CHECK_THROWS_WITH_AS(ingest(tmp.str()), doctest::Contains("5"), DataError);
}

TEST_CASE("ingest: unreadable file is skipped with a count") {
    koa_test::TempDir tmp("ingest_skip");
    fs::create_directories(tmp.path / "0");
    fs::create_directories(tmp.path / "1");
    write_tiny_pgm((tmp.path / "0" / "a.pgm").string(), 1);
    write_tiny_pgm((tmp.path / "1" / "b.pgm").string(), 1);
    std::ofstream(tmp.path / "1" / "junk.pgm") << "P5 garbage";
    IngestResult r = ingest(tmp.str());
    CHECK(r.samples.size() == 2);
    CHECK(r.skipped == 1);
}

TEST_CASE("stratified_split: exact proportions at 100 per class") {
    std::vector<int> labels;
    for (int c = 0; c < 3; ++c) {
        for (int i = 0; i < 100; ++i) labels.push_back(c);
    }
    SplitIndices s = stratified_split(labels, {0.7, 0.15, 0.15}, 42);
    CHECK(s.train.size() == 210);
    CHECK(s.val.size() == 45);
    CHECK(s.test.size() == 45);

    // Every class contributes exactly 70/15/15.
    auto count_class = [&](const std::vector<size_t>& idx, int cls) {
        size_t n = 0;
        for (size_t i : idx) {
            if (labels[i] == cls) ++n;
        }
        return n;
    };
    for (int c = 0; c < 3; ++c) {
        CHECK(count_class(s.train, c) == 70);
        CHECK(count_class(s.val, c) == 15);
        CHECK(count_class(s.test, c) == 15);
    }
}

TEST_CASE("stratified_split: deterministic under the same seed") {
    std::vector<int> labels;
    for (int c = 0; c < 5; ++c) {
        for (int i = 0; i < 17; ++i) labels.push_back(c);
    }
    SplitIndices a = stratified_split(labels, {0.7, 0.15, 0.15}, 7);
    SplitIndices b = stratified_split(labels, {0.7, 0.15, 0.15}, 7);
    CHECK(a.train == b.train);
    CHECK(a.val == b.val);
    CHECK(a.test == b.test);
    SplitIndices c = stratified_split(labels, {0.7, 0.15, 0.15}, 8);
    CHECK(a.train != c.train);
}

TEST_CASE("stratified_split: splits partition the input") {
    std::vector<int> labels;
    Rng rng(3);
    for (int i = 0; i < 87; ++i) labels.push_back(static_cast<int>(rng.uniform_index(4)));
    for (int c = 0; c < 4; ++c) {
        labels.push_back(c);
        labels.push_back(c);
        labels.push_back(c);
    }
    SplitIndices s = stratified_split(labels, {0.6, 0.2, 0.2}, 11);
    std::set<size_t> seen;
    for (const auto* idx : {&s.train, &s.val, &s.test}) {
        for (size_t i : *idx) CHECK(seen.insert(i).second);
    }
    CHECK(seen.size() == labels.size());
}

TEST_CASE("stratified_split: zero test ratio accepted with warning flag") {
    std::vector<int> labels(30, 0);
    for (int i = 0; i < 30; ++i) labels.push_back(1);
    SplitIndices s = stratified_split(labels, {0.5, 0.5, 0.0}, 1);
    CHECK(s.test.empty());
    CHECK(s.empty_split_warning);
    CHECK(s.train.size() == 30);
    CHECK(s.val.size() == 30);
}

TEST_CASE("stratified_split: class with fewer than 3 samples rejected") {
    std::vector<int> labels = {0, 0, 0, 1, 1};
    CHECK_THROWS_AS(stratified_split(labels, {0.7, 0.15, 0.15}, 1), DataError);
}

TEST_CASE("class_weights: balanced counts give unit weights") {
    std::vector<int> labels;
    for (int c = 0; c < 2; ++c) {
        for (int i = 0; i < 10; ++i) labels.push_back(c);
    }
    ClassWeights w = class_weights(labels, 2);
    CHECK(w.weights[0] == 1.0);
    CHECK(w.weights[1] == 1.0);

    std::vector<int> five;
    for (int c = 0; c < 5; ++c) {
        for (int i = 0; i < 5; ++i) five.push_back(c);
    }
    for (double v : class_weights(five, 5).weights) CHECK(v == 1.0);
}

TEST_CASE("class_weights: inverse-frequency hand values for counts 40/10") {
    std::vector<int> labels;
    for (int i = 0; i < 40; ++i) labels.push_back(0);
    for (int i = 0; i < 10; ++i) labels.push_back(1);
    ClassWeights w = class_weights(labels, 2);
    CHECK(w.weights[0] == doctest::Approx(0.625).epsilon(1e-15));
    CHECK(w.weights[1] == doctest::Approx(2.5).epsilon(1e-15));
}

TEST_CASE("class_weights: absent class is an error") {
    std::vector<int> labels = {0, 0, 2};
    CHECK_THROWS_AS(class_weights(labels, 3), DataError);
}

TEST_CASE("class_weights: normalization identity sum(w_c * n_c) = N") {
    Rng rng(4);
    for (int rep = 0; rep < 20; ++rep) {
        std::vector<int> labels;
        int n_classes = 2 + static_cast<int>(rng.uniform_index(4));
        for (int c = 0; c < n_classes; ++c) {
            size_t n = 1 + rng.uniform_index(50);
            for (size_t i = 0; i < n; ++i) labels.push_back(c);
        }
        ClassWeights w = class_weights(labels, n_classes);
        std::vector<size_t> counts(static_cast<size_t>(n_classes), 0);
        for (int l : labels) ++counts[static_cast<size_t>(l)];
        double total = 0.0;
        for (int c = 0; c < n_classes; ++c) {
            total += w.weights[static_cast<size_t>(c)] * static_cast<double>(counts[static_cast<size_t>(c)]);
        }
        CHECK(total == doctest::Approx(static_cast<double>(labels.size())).epsilon(1e-12));
    }
}

TEST_CASE("remap_binary: exhaustive mapping and range check") {
    CHECK(remap_binary(0) == 0);
    CHECK(remap_binary(1) == 0);
    CHECK(remap_binary(2) == 1);
    CHECK(remap_binary(3) == 1);
    CHECK(remap_binary(4) == 1);
    CHECK_THROWS_AS(remap_binary(5), DataError);
    CHECK_THROWS_AS(remap_binary(-1), DataError);
}

TEST_CASE("synthesize: honors the per-class counts") {
    SynthSpec spec;
    spec.counts = {50, 40, 45, 30, 15};
    spec.width = 32;
    spec.height = 32;
    spec.seed = 5;
    auto samples = synthesize(spec);
    CHECK(samples.size() == 180);
    std::map<int, size_t> hist;
    for (const auto& s : samples) ++hist[s.grade];
    CHECK(hist[0] == 50);
    CHECK(hist[1] == 40);
    CHECK(hist[2] == 45);
    CHECK(hist[3] == 30);
    CHECK(hist[4] == 15);
}

TEST_CASE("synthesize: deterministic under seed") {
    SynthSpec spec;
    spec.counts = {5, 5, 5, 5, 5};
    spec.seed = 9;
    auto a = synthesize(spec);
    auto b = synthesize(spec);
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].image.pixels == b[i].image.pixels);
        CHECK(a[i].source_id == b[i].source_id);
    }
    spec.seed = 10;
    auto c = synthesize(spec);
    CHECK(a[0].image.pixels != c[0].image.pixels);
}

TEST_CASE("synthesize: size below 32x32 rejected") {
    SynthSpec spec;
    spec.width = 16;
    CHECK_THROWS_AS(synthesize(spec), ConfigError);
}

namespace {

// Independent gap measurement: row means, bright runs are the bands, the dark
// run between the first two bright runs is the joint gap.
int measure_gap_rows(const GrayImage& img) {
    std::vector<double> row_mean(img.height, 0.0);
    for (size_t y = 0; y < img.height; ++y) {
        double s = 0.0;
        for (size_t x = 0; x < img.width; ++x) s += img.at(x, y);
        row_mean[y] = s / static_cast<double>(img.width);
    }
    const double bright = 120.0;
    size_t y = 0;
    while (y < img.height && row_mean[y] < bright) ++y;   // background above
    while (y < img.height && row_mean[y] >= bright) ++y;  // upper band
    size_t gap_start = y;
    while (y < img.height && row_mean[y] < bright) ++y;  // the gap
    return static_cast<int>(y - gap_start);
}

}  // namespace

TEST_CASE("synthesize: mean gap width strictly decreases with grade") {
    SynthSpec spec;
    spec.counts = {30, 30, 30, 30, 30};
    spec.width = 48;
    spec.height = 48;
    spec.seed = 21;
    auto samples = synthesize(spec);
    std::map<int, double> gap_sum;
    std::map<int, int> gap_n;
    for (const auto& s : samples) {
        gap_sum[s.grade] += measure_gap_rows(s.image);
        gap_n[s.grade] += 1;
    }
    for (int g = 0; g < 4; ++g) {
        double mean_g = gap_sum[g] / gap_n[g];
        double mean_next = gap_sum[g + 1] / gap_n[g + 1];
        CAPTURE(g);
        CHECK(mean_g > mean_next);
    }
}

TEST_CASE("write_dataset + ingest round trip with manifest") {
    koa_test::TempDir tmp("ds_rt");
    SynthSpec spec;
    spec.counts = {3, 3, 3, 3, 3};
    spec.seed = 2;
    auto samples = synthesize(spec);
    write_dataset(samples, tmp.str());
    CHECK(fs::exists(tmp.path / "manifest.csv"));
    IngestResult r = ingest(tmp.str());
    CHECK(r.samples.size() == 15);
    for (int g = 0; g < 5; ++g) CHECK(r.class_counts.at(g) == 3);
}

TEST_CASE("split manifest round trip") {
    koa_test::TempDir tmp("manifest");
    SynthSpec spec;
    spec.counts = {4, 4, 4, 4, 4};
    spec.seed = 3;
    auto samples = synthesize(spec);
    std::vector<int> labels;
    for (const auto& s : samples) labels.push_back(s.grade);
    SplitIndices split = stratified_split(labels, {0.5, 0.25, 0.25}, 6);
    std::string path = tmp.sub("splits.csv");
    write_split_manifest(path, samples, split, {{"config_hash", "cafe"}, {"seed", "6"}});
    auto rows = read_split_manifest(path);
    CHECK(rows.size() == 20);
    size_t trains = 0;
    for (const auto& r : rows) {
        if (r.split == "train") ++trains;
    }
    CHECK(trains == split.train.size());
}
