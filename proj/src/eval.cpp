#include "dcl/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace dcl {

// ---------------------------------------------------------------------------
// linear probe
// ---------------------------------------------------------------------------

LinearProbe train_linear_probe(const Tensor& features, const MultiLabelTargets& targets,
                               size_t epochs, double lr) {
    if (!features.valid() || features.shape().size() != 2) {
        throw std::invalid_argument("train_linear_probe: expected [N x D] features");
    }
    const Tensor& labels = targets.labels;
    if (!labels.valid() || labels.shape().size() != 2 || labels.dim(0) != features.dim(0)) {
        throw std::invalid_argument("train_linear_probe: labels do not match features");
    }
    if (!(lr > 0.0)) throw std::invalid_argument("train_linear_probe: lr must be positive");

    LinearProbe probe;
    probe.w = zeros({features.dim(1), labels.dim(1)});
    probe.b = zeros({labels.dim(1)});
    probe.w.set_requires_grad(true);
    probe.b.set_requires_grad(true);

    for (size_t epoch = 0; epoch < epochs; ++epoch) {
        Tape tape;
        Tensor logits = add_bias(matmul(features, probe.w), probe.b);
        Tensor loss = bce_with_logits(logits, labels);
        tape.backward(loss);
        for (size_t i = 0; i < probe.w.size(); ++i) probe.w[i] -= lr * probe.w.grad()[i];
        for (size_t i = 0; i < probe.b.size(); ++i) probe.b[i] -= lr * probe.b.grad()[i];
    }
    return probe;
}

Tensor probe_scores(const LinearProbe& probe, const Tensor& features) {
    Tensor logits = add_bias(matmul(features, probe.w), probe.b);
    Tensor out = zeros(logits.shape());
    for (size_t i = 0; i < logits.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-logits[i]));
    return out;
}

double probe_bce(const Tensor& scores, const Tensor& labels) {
    if (scores.shape() != labels.shape()) {
        throw std::invalid_argument("probe_bce: shape mismatch");
    }
    double total = 0.0;
    for (size_t i = 0; i < scores.size(); ++i) {
        const double p = std::min(1.0 - 1e-12, std::max(1e-12, scores[i]));
        total += labels[i] > 0.5 ? -std::log(p) : -std::log(1.0 - p);
    }
    return total / static_cast<double>(scores.size());
}

// ---------------------------------------------------------------------------
// ranking metrics
// ---------------------------------------------------------------------------

double average_precision(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size()) {
        throw std::invalid_argument("average_precision: size mismatch");
    }
    size_t positives = 0;
    for (int l : labels) positives += l != 0;
    if (positives == 0) {
        throw std::invalid_argument("average_precision: no positive labels");
    }

    std::vector<size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t a, size_t b) { return scores[a] > scores[b]; });

    double sum = 0.0;
    size_t hits = 0;
    for (size_t rank = 0; rank < order.size(); ++rank) {
        if (labels[order[rank]] != 0) {
            ++hits;
            sum += static_cast<double>(hits) / static_cast<double>(rank + 1);
        }
    }
    return sum / static_cast<double>(positives);
}

double f1_score(const std::vector<double>& scores, const std::vector<int>& labels,
                double threshold) {
    if (scores.size() != labels.size()) {
        throw std::invalid_argument("f1_score: size mismatch");
    }
    size_t tp = 0, fp = 0, fn = 0;
    for (size_t i = 0; i < scores.size(); ++i) {
        const bool pred = scores[i] > threshold;
        const bool truth = labels[i] != 0;
        if (pred && truth) ++tp;
        if (pred && !truth) ++fp;
        if (!pred && truth) ++fn;
    }
    if (tp == 0) return 0.0;
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    const double recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
    return 2.0 * precision * recall / (precision + recall);
}

// ---------------------------------------------------------------------------
// similarity histograms
// ---------------------------------------------------------------------------

namespace {

// dot / sqrt(|a|^2 |b|^2): bitwise-identical inputs give exactly 1.0.
double cell_cosine(const Tensor& rows_a, size_t ra, const Tensor& rows_b, size_t rb, size_t w) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (size_t k = 0; k < w; ++k) {
        const double x = rows_a[ra * w + k];
        const double y = rows_b[rb * w + k];
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    const double denom = std::sqrt(na * nb);
    return denom > 0.0 ? dot / denom : 0.0;
}

size_t bin_of(double v, size_t bins) {
    const double pos = (v + 1.0) * static_cast<double>(bins) / 2.0;
    const double idx = std::floor(pos);
    if (idx < 0.0) return 0;
    if (idx >= static_cast<double>(bins)) return bins - 1;
    return static_cast<size_t>(idx);
}

}  // namespace

HistogramRecord similarity_histograms(const DenseFeatureGrid& anchors,
                                      const DenseFeatureGrid& partners,
                                      const std::vector<DenseFeatureGrid>& others,
                                      size_t bins) {
    if (bins == 0) throw std::invalid_argument("similarity_histograms: need at least one bin");
    if (anchors.batch != partners.batch || anchors.grid != partners.grid ||
        anchors.width() != partners.width()) {
        throw std::invalid_argument("similarity_histograms: anchor/partner grids differ in shape");
    }

    HistogramRecord rec;
    rec.bin_edges.resize(bins + 1);
    for (size_t i = 0; i <= bins; ++i) {
        rec.bin_edges[i] = -1.0 + 2.0 * static_cast<double>(i) / static_cast<double>(bins);
    }
    rec.intra_counts.assign(bins, 0);
    rec.inter_counts.assign(bins, 0);

    const size_t cells = anchors.grid * anchors.grid;
    const size_t w = anchors.width();
    Tensor a_rows = anchors.rows();
    Tensor p_rows = partners.rows();

    for (size_t img = 0; img < anchors.batch; ++img) {
        for (size_t ca = 0; ca < cells; ++ca) {
            for (size_t cb = 0; cb < cells; ++cb) {
                const double v = cell_cosine(a_rows, img * cells + ca, p_rows, img * cells + cb, w);
                ++rec.intra_counts[bin_of(v, bins)];
            }
        }
    }

    for (const DenseFeatureGrid& other : others) {
        if (other.width() != w) {
            throw std::invalid_argument("similarity_histograms: feature width mismatch");
        }
        Tensor o_rows = other.rows();
        const size_t o_cells = other.batch * other.grid * other.grid;
        for (size_t ra = 0; ra < anchors.batch * cells; ++ra) {
            for (size_t rb = 0; rb < o_cells; ++rb) {
                const double v = cell_cosine(a_rows, ra, o_rows, rb, w);
                ++rec.inter_counts[bin_of(v, bins)];
            }
        }
    }
    return rec;
}

// ---------------------------------------------------------------------------
// aggregate record
// ---------------------------------------------------------------------------

MetricsRecord evaluate_scores(const Tensor& scores, const Tensor& labels, double threshold) {
    if (!scores.valid() || scores.shape().size() != 2 || scores.shape() != labels.shape()) {
        throw std::invalid_argument("evaluate_scores: need matching [N x K] scores and labels");
    }
    const size_t n = scores.dim(0), k = scores.dim(1);

    MetricsRecord rec;
    rec.threshold = threshold;

    std::vector<double> col_scores(n);
    std::vector<int> col_labels(n);
    for (size_t c = 0; c < k; ++c) {
        size_t positives = 0;
        for (size_t r = 0; r < n; ++r) {
            col_scores[r] = scores(r, c);
            col_labels[r] = labels(r, c) > 0.5 ? 1 : 0;
            positives += static_cast<size_t>(col_labels[r]);
        }
        if (positives == 0) {
            rec.skipped_classes.push_back(c);
            continue;
        }
        rec.evaluated_classes.push_back(c);
        rec.per_class_ap.push_back(average_precision(col_scores, col_labels));
    }
    if (rec.per_class_ap.empty()) {
        throw std::invalid_argument("evaluate_scores: every class is all-negative");
    }

    double total = 0.0;
    for (double ap : rec.per_class_ap) total += ap;
    rec.map = total / static_cast<double>(rec.per_class_ap.size());

    std::vector<double> flat_scores(n * k);
    std::vector<int> flat_labels(n * k);
    for (size_t i = 0; i < n * k; ++i) {
        flat_scores[i] = scores[i];
        flat_labels[i] = labels[i] > 0.5 ? 1 : 0;
    }
    rec.f1 = f1_score(flat_scores, flat_labels, threshold);
    return rec;
}

// ---------------------------------------------------------------------------
// split and reporting helpers
// ---------------------------------------------------------------------------

SplitIndices split_train_eval(size_t n, double train_fraction, Rng& rng) {
    if (n < 2) throw std::invalid_argument("split_train_eval: need at least two rows");
    if (!(train_fraction > 0.0) || !(train_fraction < 1.0)) {
        throw std::invalid_argument("split_train_eval: train_fraction outside (0, 1)");
    }
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);

    size_t cut = static_cast<size_t>(std::llround(train_fraction * static_cast<double>(n)));
    cut = std::max<size_t>(1, std::min(n - 1, cut));

    SplitIndices split;
    split.train.assign(order.begin(), order.begin() + static_cast<long>(cut));
    split.eval.assign(order.begin() + static_cast<long>(cut), order.end());
    return split;
}

void append_metrics_csv(const std::string& path, const std::string& tag,
                        const MetricsRecord& record) {
    const bool fresh = !std::filesystem::exists(path);
    std::ofstream f(path, std::ios::app);
    if (!f) throw std::runtime_error("cannot open for writing: " + path);
    if (fresh) f << "tag,map,f1,threshold,evaluated,skipped\n";
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%.17g,%zu,%zu", record.map, record.f1,
                  record.threshold, record.evaluated_classes.size(),
                  record.skipped_classes.size());
    f << tag << ',' << buf << '\n';
}

void write_histogram_csv(const std::string& path, const HistogramRecord& record) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open for writing: " + path);
    f << "lo,hi,intra,inter\n";
    const size_t bins = record.intra_counts.size();
    for (size_t i = 0; i < bins; ++i) {
        char buf[96];
        std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%zu,%zu", record.bin_edges[i],
                      record.bin_edges[i + 1], record.intra_counts[i], record.inter_counts[i]);
        f << buf << '\n';
    }
}

}  // namespace dcl
