#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include <nlohmann/json.hpp>

#include "cwsam/autograd.hpp"
#include "cwsam/grid.hpp"

namespace cwsam {

struct LossSpec {
    std::vector<double> weights;  // one per class, > 0
    int ignore_index = 255;
};

// 1 / (1 + e^-x), evaluated without overflow for any finite x.
double sigmoid(double x);
// log(1 + e^x), overflow-free.
double softplus(double x);

// Mean over non-ignored pixels of
//   -sum_c w_c [ y_c log s(z_c) + (1 - y_c) log(1 - s(z_c)) ],
// with y the one-hot label and s the sigmoid. Logits are [num_classes, pixels].
double weighted_loss(const Matrix& logits, const LabelMap& labels, const LossSpec& spec);
ag::Var weighted_loss(const ag::Var& logits, const LabelMap& labels, const LossSpec& spec);

// Class-weighted softmax cross-entropy, mean over non-ignored pixels.
ag::Var softmax_ce_loss(const ag::Var& logits, const LabelMap& labels, const LossSpec& spec);

// counts[g * k + p]: pixels with ground truth g predicted as p.
class ConfusionMatrix {
public:
    explicit ConfusionMatrix(std::size_t k) : k_(k), counts_(k * k, 0) {}

    std::size_t classes() const { return k_; }
    std::uint64_t at(std::size_t gt, std::size_t pred) const { return counts_[gt * k_ + pred]; }
    std::uint64_t& at(std::size_t gt, std::size_t pred) { return counts_[gt * k_ + pred]; }
    std::uint64_t total() const;
    std::uint64_t row_sum(std::size_t gt) const;
    std::uint64_t col_sum(std::size_t pred) const;

    ConfusionMatrix& operator+=(const ConfusionMatrix& other);
    friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

private:
    std::size_t k_;
    std::vector<std::uint64_t> counts_;
};

// Adds every pixel whose ground truth is not ignore_index.
void accumulate(const LabelMap& pred, const LabelMap& gt, int ignore_index, ConfusionMatrix& cm);

// Per-class values; classes with a zero denominator hold NaN and are left out of means.
struct ClassScores {
    std::vector<double> per_class;
    double mean = 0.0;
};

// `exclude` lists classes (e.g. a background class) left out of every mean.
ClassScores miou(const ConfusionMatrix& cm, std::span<const std::size_t> exclude = {});
double overall_accuracy(const ConfusionMatrix& cm);

struct AuxMetrics {
    ClassScores accuracy;   // recall
    ClassScores precision;
    ClassScores dice;
};
AuxMetrics aux_metrics(const ConfusionMatrix& cm, std::span<const std::size_t> exclude = {});

struct MetricsReport {
    std::vector<std::size_t> classes;  // class index of each per-class entry
    ClassScores iou;
    ClassScores accuracy;
    ClassScores precision;
    ClassScores dice;
    double overall_accuracy = 0.0;
    std::size_t step = 0;
    double wall_time_s = 0.0;
};

// Background class (if >= 0) is removed from the report's per-class lists and means.
MetricsReport make_report(const ConfusionMatrix& cm, int background_class = -1);

// Fields: miou, oa, mean_accuracy, mean_precision, mdice, classes, per_class{iou,
// accuracy, precision, dice} (null for undefined classes), step, wall_time_s.
nlohmann::json to_json(const MetricsReport& report);

class MetricError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

}  // namespace cwsam
