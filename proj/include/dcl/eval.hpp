#pragma once

#include <string>
#include <vector>

#include "dcl/data.hpp"
#include "dcl/encoder.hpp"
#include "dcl/rng.hpp"
#include "dcl/tensor.hpp"

namespace dcl {

// ---------------------------------------------------------------------------
// linear probe
// ---------------------------------------------------------------------------

/// Per-class logistic classifier on frozen features.
struct LinearProbe {
    Tensor w;  ///< [D x K]
    Tensor b;  ///< [K]
};

/// Trains the probe from zero init by full-batch gradient descent on the
/// mean binary cross-entropy of sigmoid outputs. The backbone features are
/// inputs, never updated. Deterministic (no randomness at all).
LinearProbe train_linear_probe(const Tensor& features, const MultiLabelTargets& targets,
                               size_t epochs, double lr);

/// Sigmoid probabilities [N x K] for frozen features. Not taped.
Tensor probe_scores(const LinearProbe& probe, const Tensor& features);

/// Mean binary cross-entropy of probabilities against 0/1 targets.
double probe_bce(const Tensor& scores, const Tensor& labels);

// ---------------------------------------------------------------------------
// ranking metrics
// ---------------------------------------------------------------------------

/// Average precision: sort by descending score (ties broken by original
/// index), then average precision-at-rank over the ranks holding positives.
/// Throws std::invalid_argument when labels contain no positive.
double average_precision(const std::vector<double>& scores, const std::vector<int>& labels);

/// Micro-averaged F1 over all score/label pairs at the given threshold
/// (prediction = score > threshold). Zero true positives give 0.
double f1_score(const std::vector<double>& scores, const std::vector<int>& labels,
                double threshold = 0.5);

// ---------------------------------------------------------------------------
// similarity histograms
// ---------------------------------------------------------------------------

/// Fixed-width histogram over [-1, 1] of dense-cell cosine similarities.
struct HistogramRecord {
    std::vector<double> bin_edges;     ///< bins + 1 edges, -1 to 1
    std::vector<size_t> intra_counts;  ///< same-image cross-view cell pairs
    std::vector<size_t> inter_counts;  ///< anchor cells vs other-image cells
};

/// Intra-image: for each image i, every cell of anchors[i] against every
/// cell of partners[i] (S^4 pairs per image). Inter-image: every anchor
/// cell against every cell of every grid in `others`; callers must pass
/// grids whose images differ from all anchor images. Values exactly at 1
/// land in the last bin.
HistogramRecord similarity_histograms(const DenseFeatureGrid& anchors,
                                      const DenseFeatureGrid& partners,
                                      const std::vector<DenseFeatureGrid>& others,
                                      size_t bins);

// ---------------------------------------------------------------------------
// aggregate record
// ---------------------------------------------------------------------------

struct MetricsRecord {
    std::vector<size_t> evaluated_classes;  ///< class ids with >= 1 positive
    std::vector<double> per_class_ap;       ///< same order as evaluated_classes
    std::vector<size_t> skipped_classes;    ///< all-negative classes, excluded
    double map = 0.0;                       ///< mean of per_class_ap
    double f1 = 0.0;                        ///< micro-F1 over every decision
    double threshold = 0.5;
};

/// Scores and labels are [N x K]. Classes without a single positive are
/// excluded from the mean and listed in skipped_classes.
MetricsRecord evaluate_scores(const Tensor& scores, const Tensor& labels,
                              double threshold = 0.5);

// ---------------------------------------------------------------------------
// split and reporting helpers
// ---------------------------------------------------------------------------

struct SplitIndices {
    std::vector<size_t> train, eval;
};

/// Shuffled disjoint split; train gets round(n * train_fraction) rows.
SplitIndices split_train_eval(size_t n, double train_fraction, Rng& rng);

/// One CSV row per call: creates the file with a header when absent,
/// appends otherwise. Columns: tag,map,f1,threshold,evaluated,skipped.
void append_metrics_csv(const std::string& path, const std::string& tag,
                        const MetricsRecord& record);

/// CSV with one row per bin: lo,hi,intra,inter.
void write_histogram_csv(const std::string& path, const HistogramRecord& record);

}  // namespace dcl
