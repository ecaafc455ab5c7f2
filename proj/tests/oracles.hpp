#pragma once

// Brute-force reference implementations the tests compare against. These are
// written for clarity, not speed, and deliberately avoid sharing code with
// the library.

#include <cmath>
#include <cstddef>
#include <vector>

namespace oracle {

inline std::vector<double> matmul(const std::vector<double>& a, const std::vector<double>& b,
                                  size_t m, size_t k, size_t n) {
    std::vector<double> c(m * n, 0.0);
    for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < n; ++j)
            for (size_t p = 0; p < k; ++p) c[i * n + j] += a[i * k + p] * b[p * n + j];
    return c;
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm(const std::vector<double>& a) { return std::sqrt(dot(a, a)); }

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    double na = norm(a), nb = norm(b);
    if (na <= 1e-12 || nb <= 1e-12) return 0.0;
    return dot(a, b) / (na * nb);
}

inline double log_sum_exp(const std::vector<double>& x) {
    double m = x[0];
    for (double v : x) m = std::max(m, v);
    double s = 0.0;
    for (double v : x) s += std::exp(v - m);
    return m + std::log(s);
}

using Rows = std::vector<std::vector<double>>;

// Per-image contrastive loss, one anchor at a time. anchors[i]/positives[i]
// are the two views of image i (pre-normalized rows; dots are cosines).
inline double info_nce(const Rows& anchors, const Rows& positives, double tau,
                       bool negatives_from_both_views) {
    size_t b = anchors.size();
    double total = 0.0;
    for (size_t i = 0; i < b; ++i) {
        std::vector<double> logits;
        logits.push_back(dot(anchors[i], positives[i]) / tau);
        for (size_t j = 0; j < b; ++j) {
            if (j == i) continue;
            logits.push_back(dot(anchors[i], anchors[j]) / tau);
            if (negatives_from_both_views) logits.push_back(dot(anchors[i], positives[j]) / tau);
        }
        total += log_sum_exp(logits) - logits[0];
    }
    return total / static_cast<double>(b);
}

// Dense loss over one anchor view, scalar loop form. Per anchor cell: mean
// over its positives p of  lse(all logits) - logit_p, where "all logits" are
// the positives, the shared negatives, and the cell's own partner-view
// negatives, every dot divided by tau.
inline double dense_loss(const Rows& anchor, const Rows& partner,
                         const std::vector<std::vector<size_t>>& positives, const Rows& shared_negs,
                         const std::vector<std::vector<size_t>>& cross_negs, double tau) {
    double total = 0.0;
    for (size_t k = 0; k < anchor.size(); ++k) {
        std::vector<double> logits;
        for (size_t p : positives[k]) logits.push_back(dot(anchor[k], partner[p]) / tau);
        size_t npos = logits.size();
        for (const auto& n : shared_negs) logits.push_back(dot(anchor[k], n) / tau);
        if (!cross_negs.empty())
            for (size_t c : cross_negs[k]) logits.push_back(dot(anchor[k], partner[c]) / tau);
        double lse = log_sum_exp(logits);
        double cell = 0.0;
        for (size_t p = 0; p < npos; ++p) cell += lse - logits[p];
        total += cell / static_cast<double>(npos);
    }
    return total / static_cast<double>(anchor.size());
}

}  // namespace oracle
