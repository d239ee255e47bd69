#include "koa/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <iostream>

#include "koa/csv.hpp"
#include "koa/rng.hpp"

namespace fs = std::filesystem;

namespace koa::dataset {

IngestResult ingest(const std::string& root) {
    if (!fs::is_directory(root)) {
        throw DataError("ingest: not a directory: " + root);
    }

    std::vector<std::pair<int, fs::path>> class_dirs;
    for (const auto& entry : fs::directory_iterator(root)) {
        if (!entry.is_directory()) continue;
        std::string name = entry.path().filename().string();
        bool numeric = !name.empty() && name.find_first_not_of("0123456789") == std::string::npos;
        int grade = numeric ? std::stoi(name) : -1;
        if (!numeric || grade < 0 || grade > 4) {
            throw DataError("ingest: unknown class subdirectory (want 0..4): " +
                            entry.path().string());
        }
        class_dirs.emplace_back(grade, entry.path());
    }
    if (class_dirs.empty()) {
        throw DataError("ingest: no classes found under " + root);
    }
    std::sort(class_dirs.begin(), class_dirs.end());

    IngestResult result;
    for (const auto& [grade, dir] : class_dirs) {
        result.class_counts[grade] = 0;
        std::vector<fs::path> files;
        for (const auto& f : fs::directory_iterator(dir)) {
            if (f.is_regular_file()) files.push_back(f.path());
        }
        std::sort(files.begin(), files.end());
        for (const auto& file : files) {
            try {
                RawSample s;
                s.image = img_io::read_image(file.string());
                s.grade = grade;
                s.source_id = fs::relative(file, root).generic_string();
                result.samples.push_back(std::move(s));
                ++result.class_counts[grade];
            } catch (const DataError& e) {
                std::cerr << "warning: skipping unreadable file " << file.string() << " ("
                          << e.what() << ")\n";
                ++result.skipped;
            }
        }
        result.n_classes = std::max(result.n_classes, grade + 1);
    }
    return result;
}

void SplitRatios::validate() const {
    if (train <= 0.0 || val < 0.0 || test < 0.0) {
        throw ConfigError("split: train ratio must be positive, val/test non-negative");
    }
    if (std::abs(train + val + test - 1.0) > 1e-9) {
        throw ConfigError("split: ratios must sum to 1");
    }
}

SplitIndices stratified_split(const std::vector<int>& labels, const SplitRatios& ratios,
                              uint64_t seed) {
    ratios.validate();

    std::map<int, std::vector<size_t>> by_class;
    for (size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
    for (const auto& [cls, idx] : by_class) {
        if (idx.size() < 3) {
            throw DataError("split: class " + std::to_string(cls) + " has only " +
                            std::to_string(idx.size()) + " samples (need at least 3)");
        }
    }

    SplitIndices out;
    out.ratios = ratios;
    out.seed = seed;
    out.empty_split_warning = (ratios.val == 0.0 || ratios.test == 0.0);

    for (auto& [cls, idx] : by_class) {
        Rng rng(mix_seed(seed, "split_class_" + std::to_string(cls)));
        rng.shuffle(idx);
        size_t n = idx.size();
        // Cumulative rounding keeps every split within one sample of target.
        size_t n_train = static_cast<size_t>(std::llround(ratios.train * n));
        size_t n_train_val = static_cast<size_t>(std::llround((ratios.train + ratios.val) * n));
        n_train = std::min(n_train, n);
        n_train_val = std::clamp(n_train_val, n_train, n);
        for (size_t i = 0; i < n; ++i) {
            if (i < n_train) out.train.push_back(idx[i]);
            else if (i < n_train_val) out.val.push_back(idx[i]);
            else out.test.push_back(idx[i]);
        }
    }
    std::sort(out.train.begin(), out.train.end());
    std::sort(out.val.begin(), out.val.end());
    std::sort(out.test.begin(), out.test.end());

    if (out.empty_split_warning) {
        std::cerr << "warning: split produced an empty val or test set (ratio 0)\n";
    }
    return out;
}

ClassWeights class_weights(const std::vector<int>& labels, int n_classes) {
    if (n_classes < 1) throw ConfigError("class_weights: n_classes must be positive");
    std::vector<size_t> counts(static_cast<size_t>(n_classes), 0);
    for (int l : labels) {
        if (l < 0 || l >= n_classes) {
            throw DataError("class_weights: label " + std::to_string(l) + " out of range");
        }
        ++counts[static_cast<size_t>(l)];
    }
    ClassWeights w;
    double total = static_cast<double>(labels.size());
    for (int c = 0; c < n_classes; ++c) {
        if (counts[static_cast<size_t>(c)] == 0) {
            throw DataError("class_weights: class " + std::to_string(c) +
                            " absent, weight undefined");
        }
        w.weights.push_back(total / (static_cast<double>(n_classes) *
                                     static_cast<double>(counts[static_cast<size_t>(c)])));
    }
    return w;
}

int remap_binary(int grade) {
    if (grade < 0 || grade > 4) {
        throw DataError("remap_binary: grade " + std::to_string(grade) + " outside KL range 0..4");
    }
    return grade <= 1 ? 0 : 1;
}

namespace {

uint8_t clamp_u8d(double v) {
    long r = std::lround(v);
    if (r < 0) r = 0;
    if (r > 255) r = 255;
    return static_cast<uint8_t>(r);
}

GrayImage synth_image(int grade, size_t width, size_t height, Rng& rng) {
    GrayImage img(width, height);
    long h = static_cast<long>(height);

    long band = std::max<long>(3, std::lround(0.16 * h));
    double gap_frac = 0.30 - 0.06 * grade;
    long gap = std::max<long>(1, std::lround(gap_frac * h) + static_cast<long>(rng.uniform_index(3)) - 1);
    long center = h / 2 + static_cast<long>(rng.uniform_index(5)) - 2;

    long gap_top = center - gap / 2;
    long gap_bot = gap_top + gap;  // exclusive

    double bone = rng.uniform(185.0, 220.0);
    double background = rng.uniform(25.0, 45.0);
    double noise_sigma = 1.5 + 1.2 * grade;

    for (long y = 0; y < h; ++y) {
        bool in_band = (y >= gap_top - band && y < gap_top) || (y >= gap_bot && y < gap_bot + band);
        double base = in_band ? bone : background;
        for (size_t x = 0; x < width; ++x) {
            img.set(x, static_cast<size_t>(y), clamp_u8d(base + rng.normal(0.0, noise_sigma)));
        }
    }

    // Osteophyte-like bright speckles along the band inner edges.
    if (grade >= 3) {
        size_t n_speckles = 2 + static_cast<size_t>(grade);
        for (size_t s = 0; s < n_speckles; ++s) {
            long sy = rng.bernoulli(0.5) ? gap_top : gap_bot - 2;
            sy = std::clamp<long>(sy + static_cast<long>(rng.uniform_index(3)) - 1, 0, h - 2);
            size_t sx = rng.uniform_index(width > 2 ? width - 2 : 1);
            for (long dy = 0; dy < 2; ++dy) {
                for (long dx = 0; dx < 2; ++dx) {
                    img.set(sx + static_cast<size_t>(dx), static_cast<size_t>(sy + dy),
                            clamp_u8d(bone + 15.0));
                }
            }
        }
    }
    return img;
}

}  // namespace

std::vector<RawSample> synthesize(const SynthSpec& spec) {
    if (spec.width < 32 || spec.height < 32) {
        throw ConfigError("synthesize: image size must be at least 32x32");
    }
    std::vector<RawSample> samples;
    for (int grade = 0; grade < 5; ++grade) {
        size_t n = spec.counts[static_cast<size_t>(grade)];
        for (size_t i = 0; i < n; ++i) {
            Rng rng(mix_seed(mix_seed(spec.seed, static_cast<uint64_t>(grade)), i));
            RawSample s;
            s.image = synth_image(grade, spec.width, spec.height, rng);
            s.grade = grade;
            char buf[64];
            std::snprintf(buf, sizeof(buf), "%d/g%d_%05zu.pgm", grade, grade, i);
            s.source_id = buf;
            samples.push_back(std::move(s));
        }
    }
    return samples;
}

void write_dataset(const std::vector<RawSample>& samples, const std::string& root) {
    fs::create_directories(root);
    std::vector<std::vector<std::string>> rows;
    for (const auto& s : samples) {
        fs::path p = fs::path(root) / s.source_id;
        fs::create_directories(p.parent_path());
        img_io::write_pgm(s.image, p.string());
        rows.push_back({s.source_id, std::to_string(s.grade)});
    }
    csv::write((fs::path(root) / "manifest.csv").string(), {"source_id", "grade"}, rows);
}

void write_split_manifest(const std::string& path, const std::vector<RawSample>& samples,
                          const SplitIndices& split,
                          const std::map<std::string, std::string>& meta) {
    std::vector<std::vector<std::string>> rows;
    auto add = [&](const std::vector<size_t>& idx, const char* name) {
        for (size_t i : idx) {
            rows.push_back({samples[i].source_id, std::to_string(samples[i].grade), name});
        }
    };
    add(split.train, "train");
    add(split.val, "val");
    add(split.test, "test");
    csv::write(path, {"source_id", "grade", "split"}, rows, meta);
}

std::vector<ManifestRow> read_split_manifest(const std::string& path) {
    csv::Table t = csv::read(path);
    size_t c_id = t.col("source_id");
    size_t c_grade = t.col("grade");
    size_t c_split = t.col("split");
    std::vector<ManifestRow> rows;
    for (const auto& r : t.rows) {
        rows.push_back({r[c_id], std::stoi(r[c_grade]), r[c_split]});
    }
    return rows;
}

}  // namespace koa::dataset
