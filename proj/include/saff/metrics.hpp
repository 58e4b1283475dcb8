#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <iostream>
#include <limits>
#include <numeric>
#include <vector>

#include "saff/common.hpp"
#include "saff/tensor.hpp"

namespace saff {

struct EvalResult {
    double accuracy = 0.0;
    double auc = 0.0;
    double map = 0.0;
    double psnr = 0.0;  // reconstruction only
    std::size_t n_samples = 0;
};

inline double accuracy(const std::vector<int>& pred, const std::vector<int>& truth) {
    if (pred.size() != truth.size()) throw DimensionError("accuracy: length mismatch");
    if (pred.empty()) throw InputError("accuracy: empty input");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == truth[i] ? 1 : 0;
    return static_cast<double>(hits) / static_cast<double>(pred.size());
}

namespace detail {

// Binary AUC by the rank / Mann-Whitney formula, ties assigned mean ranks.
inline double binary_auc(const std::vector<double>& score, const std::vector<bool>& positive) {
    const std::size_t n = score.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return score[a] < score[b]; });
    std::vector<double> rank(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && score[order[j + 1]] == score[order[i]]) ++j;
        const double mean_rank = 0.5 * static_cast<double>(i + j) + 1.0;  // ranks are 1-based
        for (std::size_t k = i; k <= j; ++k) rank[order[k]] = mean_rank;
        i = j + 1;
    }
    double rank_sum = 0.0;
    std::size_t n_pos = 0;
    for (std::size_t k = 0; k < n; ++k)
        if (positive[k]) {
            rank_sum += rank[k];
            ++n_pos;
        }
    const std::size_t n_neg = n - n_pos;
    return (rank_sum - 0.5 * static_cast<double>(n_pos) * static_cast<double>(n_pos + 1)) /
           (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

}  // namespace detail

// Macro one-vs-rest AUC over the classes present in truth; absent classes are
// skipped with a warning.
inline double auc_macro_ovr(const Tensor& scores, const std::vector<int>& truth) {
    if (scores.rank() != 2 || scores.dim(0) != truth.size())
        throw DimensionError("auc_macro_ovr: scores must be [N,K] with one row per truth entry");
    const std::size_t n = truth.size(), k = scores.dim(1);
    bool multi = false;
    for (std::size_t i = 1; i < n; ++i) multi |= truth[i] != truth[0];
    if (!multi) throw MetricError("AUC undefined: truth contains a single class");
    double acc = 0.0;
    std::size_t used = 0;
    for (std::size_t c = 0; c < k; ++c) {
        std::vector<double> col(n);
        std::vector<bool> pos(n);
        std::size_t n_pos = 0;
        for (std::size_t i = 0; i < n; ++i) {
            col[i] = scores.at(i, c);
            pos[i] = truth[i] == static_cast<int>(c);
            n_pos += pos[i] ? 1 : 0;
        }
        if (n_pos == 0) {
            std::cerr << "[metrics] class " << c << " absent from truth, skipped in AUC\n";
            continue;
        }
        acc += detail::binary_auc(col, pos);
        ++used;
    }
    return acc / static_cast<double>(used);
}

// Macro mean average precision; ranks by descending score, ties broken by
// index. Absent classes are skipped with a warning.
inline double mean_average_precision(const Tensor& scores, const std::vector<int>& truth) {
    if (scores.rank() != 2 || scores.dim(0) != truth.size())
        throw DimensionError("mean_average_precision: scores must be [N,K]");
    const std::size_t n = truth.size(), k = scores.dim(1);
    bool multi = false;
    for (std::size_t i = 1; i < n; ++i) multi |= truth[i] != truth[0];
    if (!multi) throw MetricError("mAP undefined: truth contains a single class");
    double acc = 0.0;
    std::size_t used = 0;
    for (std::size_t c = 0; c < k; ++c) {
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            return scores.at(a, c) > scores.at(b, c);
        });
        std::size_t n_pos = 0;
        double ap = 0.0;
        std::size_t seen_pos = 0;
        for (std::size_t r = 0; r < n; ++r) {
            if (truth[order[r]] == static_cast<int>(c)) {
                ++seen_pos;
                ap += static_cast<double>(seen_pos) / static_cast<double>(r + 1);
            }
        }
        for (std::size_t i = 0; i < n; ++i) n_pos += truth[i] == static_cast<int>(c) ? 1 : 0;
        if (n_pos == 0) {
            std::cerr << "[metrics] class " << c << " absent from truth, skipped in mAP\n";
            continue;
        }
        acc += ap / static_cast<double>(n_pos);
        ++used;
    }
    return acc / static_cast<double>(used);
}

// 10*log10(range^2 / MSE); identical tensors give +infinity.
inline double psnr(const Tensor& x, const Tensor& ref, double data_range) {
    if (!x.same_shape(ref)) throw DimensionError("psnr: shape mismatch");
    if (data_range <= 0.0) throw ConfigError("psnr: data_range must be positive");
    double mse = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) mse += (x[i] - ref[i]) * (x[i] - ref[i]);
    mse /= static_cast<double>(x.size());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(data_range * data_range / mse);
}

}  // namespace saff
