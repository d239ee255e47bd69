#include "koa/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "koa/csv.hpp"
#include "koa/errors.hpp"

namespace koa::metrics {

double accuracy(const std::vector<int>& pred, const std::vector<int>& truth) {
    if (pred.size() != truth.size() || truth.empty()) {
        throw DataError("accuracy: prediction/truth size mismatch or empty input");
    }
    size_t correct = 0;
    for (size_t i = 0; i < truth.size(); ++i) {
        if (pred[i] == truth[i]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(truth.size());
}

double balanced_accuracy(const std::vector<int>& pred, const std::vector<int>& truth,
                         int n_classes) {
    if (pred.size() != truth.size() || truth.empty()) {
        throw DataError("balanced_accuracy: prediction/truth size mismatch or empty input");
    }
    std::vector<size_t> per_class(static_cast<size_t>(n_classes), 0);
    std::vector<size_t> correct(static_cast<size_t>(n_classes), 0);
    for (size_t i = 0; i < truth.size(); ++i) {
        int t = truth[i];
        if (t < 0 || t >= n_classes) throw DataError("balanced_accuracy: label out of range");
        ++per_class[static_cast<size_t>(t)];
        if (pred[i] == t) ++correct[static_cast<size_t>(t)];
    }
    double sum = 0.0;
    for (int c = 0; c < n_classes; ++c) {
        if (per_class[static_cast<size_t>(c)] == 0) {
            throw DataError("balanced_accuracy: class " + std::to_string(c) +
                            " absent from truth, recall undefined");
        }
        sum += static_cast<double>(correct[static_cast<size_t>(c)]) /
               static_cast<double>(per_class[static_cast<size_t>(c)]);
    }
    return sum / static_cast<double>(n_classes);
}

double auc_binary(const std::vector<double>& scores, const std::vector<int>& truth) {
    if (scores.size() != truth.size() || truth.empty()) {
        throw DataError("auc: score/truth size mismatch or empty input");
    }
    size_t n_pos = 0, n_neg = 0;
    for (int t : truth) {
        if (t == 1) ++n_pos;
        else if (t == 0) ++n_neg;
        else throw DataError("auc: labels must be 0 or 1");
    }
    if (n_pos == 0 || n_neg == 0) {
        throw DataError("auc: both classes must be present");
    }

    // Average ranks with midpoint ties, then the Mann-Whitney statistic.
    std::vector<size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](size_t a, size_t b) { return scores[a] < scores[b]; });

    double rank_sum_pos = 0.0;
    size_t i = 0;
    while (i < order.size()) {
        size_t j = i;
        while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
        double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
        for (size_t k = i; k <= j; ++k) {
            if (truth[order[k]] == 1) rank_sum_pos += avg_rank;
        }
        i = j + 1;
    }
    double u = rank_sum_pos - static_cast<double>(n_pos) * (static_cast<double>(n_pos) + 1.0) / 2.0;
    return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

double auc_macro_ovr(const Tensor& probs, const std::vector<int>& truth, int n_classes) {
    if (probs.rank() != 2 || probs.dim(0) != truth.size() ||
        probs.dim(1) != static_cast<size_t>(n_classes)) {
        throw DataError("auc_macro_ovr: probability matrix shape mismatch");
    }
    double sum = 0.0;
    for (int c = 0; c < n_classes; ++c) {
        std::vector<double> scores(truth.size());
        std::vector<int> ovr(truth.size());
        for (size_t i = 0; i < truth.size(); ++i) {
            scores[i] = probs.at2(i, static_cast<size_t>(c));
            ovr[i] = truth[i] == c ? 1 : 0;
        }
        sum += auc_binary(scores, ovr);
    }
    return sum / static_cast<double>(n_classes);
}

std::vector<std::vector<size_t>> confusion(const std::vector<int>& pred,
                                           const std::vector<int>& truth, int n_classes) {
    if (pred.size() != truth.size()) throw DataError("confusion: size mismatch");
    std::vector<std::vector<size_t>> m(static_cast<size_t>(n_classes),
                                       std::vector<size_t>(static_cast<size_t>(n_classes), 0));
    for (size_t i = 0; i < truth.size(); ++i) {
        if (truth[i] < 0 || truth[i] >= n_classes || pred[i] < 0 || pred[i] >= n_classes) {
            throw DataError("confusion: label out of range");
        }
        ++m[static_cast<size_t>(truth[i])][static_cast<size_t>(pred[i])];
    }
    return m;
}

EvalReport evaluate(const std::string& split, const Tensor& probs,
                    const std::vector<int>& truth, int n_classes) {
    if (probs.rank() != 2 || probs.dim(0) != truth.size() ||
        probs.dim(1) != static_cast<size_t>(n_classes)) {
        throw DataError("evaluate: probability matrix shape mismatch");
    }
    std::vector<int> pred(truth.size());
    for (size_t i = 0; i < truth.size(); ++i) {
        int best = 0;
        for (int c = 1; c < n_classes; ++c) {
            if (probs.at2(i, static_cast<size_t>(c)) > probs.at2(i, static_cast<size_t>(best))) {
                best = c;
            }
        }
        pred[i] = best;
    }

    EvalReport r;
    r.split = split;
    r.n_classes = n_classes;
    r.n_samples = truth.size();
    r.accuracy = accuracy(pred, truth);
    r.balanced_accuracy = balanced_accuracy(pred, truth, n_classes);
    if (n_classes == 2) {
        std::vector<double> scores(truth.size());
        for (size_t i = 0; i < truth.size(); ++i) scores[i] = probs.at2(i, 1);
        r.auc = auc_binary(scores, truth);
    } else {
        r.auc = auc_macro_ovr(probs, truth, n_classes);
    }
    r.confusion = confusion(pred, truth, n_classes);
    return r;
}

void write_reports_csv(const std::string& path, const std::vector<EvalReport>& reports,
                       const std::map<std::string, std::string>& meta) {
    if (reports.empty()) throw DataError("write_reports_csv: no reports");
    int n_classes = reports.front().n_classes;
    std::vector<std::string> header = {"split",    "n_samples", "n_classes",
                                       "accuracy", "balanced_accuracy", "auc"};
    for (int i = 0; i < n_classes; ++i) {
        for (int j = 0; j < n_classes; ++j) {
            header.push_back("conf_" + std::to_string(i) + "_" + std::to_string(j));
        }
    }
    std::vector<std::vector<std::string>> rows;
    for (const auto& r : reports) {
        std::vector<std::string> row = {r.split,
                                        std::to_string(r.n_samples),
                                        std::to_string(r.n_classes),
                                        csv::fmt_double(r.accuracy),
                                        csv::fmt_double(r.balanced_accuracy),
                                        csv::fmt_double(r.auc)};
        for (const auto& conf_row : r.confusion) {
            for (size_t v : conf_row) row.push_back(std::to_string(v));
        }
        rows.push_back(std::move(row));
    }
    csv::write(path, header, rows, meta);
}

std::vector<EvalReport> read_reports_csv(const std::string& path) {
    csv::Table t = csv::read(path);
    std::vector<EvalReport> reports;
    for (const auto& row : t.rows) {
        EvalReport r;
        r.split = row[t.col("split")];
        r.n_samples = static_cast<size_t>(std::stoull(row[t.col("n_samples")]));
        r.n_classes = std::stoi(row[t.col("n_classes")]);
        r.accuracy = std::stod(row[t.col("accuracy")]);
        r.balanced_accuracy = std::stod(row[t.col("balanced_accuracy")]);
        r.auc = std::stod(row[t.col("auc")]);
        r.confusion.assign(static_cast<size_t>(r.n_classes),
                           std::vector<size_t>(static_cast<size_t>(r.n_classes), 0));
        for (int i = 0; i < r.n_classes; ++i) {
            for (int j = 0; j < r.n_classes; ++j) {
                std::string col = "conf_" + std::to_string(i) + "_" + std::to_string(j);
                r.confusion[static_cast<size_t>(i)][static_cast<size_t>(j)] =
                    static_cast<size_t>(std::stoull(row[t.col(col)]));
            }
        }
        reports.push_back(std::move(r));
    }
    return reports;
}

std::string format_summary(const std::string& model_name,
                           const std::vector<EvalReport>& reports) {
    auto find = [&](const char* split) -> const EvalReport* {
        for (const auto& r : reports) {
            if (r.split == split) return &r;
        }
        return nullptr;
    };
    const EvalReport* train = find("train");
    const EvalReport* val = find("val");
    const EvalReport* test = find("test");

    std::ostringstream os;
    auto line = [&](const char* metric, double EvalReport::*field) {
        char buf[160];
        auto cell = [&](const EvalReport* r) {
            return r ? r->*field : std::nan("");
        };
        std::snprintf(buf, sizeof(buf), "%-18s %-18s %8.3f %8.3f %8.3f\n", model_name.c_str(),
                      metric, cell(train), cell(val), cell(test));
        os << buf;
    };
    line("Accuracy", &EvalReport::accuracy);
    line("BalancedAccuracy", &EvalReport::balanced_accuracy);
    line("AUC", &EvalReport::auc);
    return os.str();
}

}  // namespace koa::metrics
