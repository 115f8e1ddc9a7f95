#include "cwsam/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace cwsam {
namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

void check_loss_inputs(const Matrix& logits, const LabelMap& labels, const LossSpec& spec) {
    if (logits.cols() != labels.height * labels.width)
        throw std::invalid_argument("loss: logit map has " + std::to_string(logits.cols()) + " pixels, labels have " +
                                    std::to_string(labels.height * labels.width));
    if (spec.weights.size() != logits.rows())
        throw std::invalid_argument("loss: " + std::to_string(spec.weights.size()) + " weights for " +
                                    std::to_string(logits.rows()) + " classes");
    for (double w : spec.weights)
        if (!(w > 0.0) || !std::isfinite(w)) throw std::invalid_argument("loss: weights must be finite and > 0");
}

// Number of counted pixels; throws on out-of-range labels or when nothing is counted.
std::size_t counted_pixels(const LabelMap& labels, std::size_t k, int ignore_index) {
    std::size_t n = 0;
    for (std::uint8_t l : labels.labels) {
        if (static_cast<int>(l) == ignore_index) continue;
        if (l >= k) throw std::invalid_argument("loss: label " + std::to_string(l) + " is not a class index");
        ++n;
    }
    if (n == 0) throw std::domain_error("loss: every pixel is ignored; the mean is undefined");
    return n;
}

bool in_set(std::span<const std::size_t> set, std::size_t v) {
    return std::find(set.begin(), set.end(), v) != set.end();
}

ClassScores finish_scores(std::vector<double> values, std::span<const std::size_t> exclude) {
    ClassScores s{std::move(values), 0.0};
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t c = 0; c < s.per_class.size(); ++c) {
        if (in_set(exclude, c) || std::isnan(s.per_class[c])) continue;
        sum += s.per_class[c];
        ++n;
    }
    s.mean = n == 0 ? kNaN : sum / static_cast<double>(n);
    return s;
}

double ratio(std::uint64_t num, std::uint64_t den) {
    return den == 0 ? kNaN : static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

double weighted_loss(const Matrix& logits, const LabelMap& labels, const LossSpec& spec) {
    check_loss_inputs(logits, labels, spec);
    const std::size_t k = logits.rows();
    const std::size_t n = counted_pixels(labels, k, spec.ignore_index);
    double total = 0.0;
    for (std::size_t p = 0; p < labels.labels.size(); ++p) {
        const int l = labels.labels[p];
        if (l == spec.ignore_index) continue;
        double px = 0.0;
        for (std::size_t c = 0; c < k; ++c) {
            const double z = logits(c, p);
            // -log s(z) = softplus(-z); -log(1 - s(z)) = softplus(z)
            px += spec.weights[c] * (static_cast<std::size_t>(l) == c ? softplus(-z) : softplus(z));
        }
        total += px;
    }
    return total / static_cast<double>(n);
}

ag::Var weighted_loss(const ag::Var& logits, const LabelMap& labels, const LossSpec& spec) {
    const double value = weighted_loss(logits.value(), labels, spec);
    const std::size_t n = counted_pixels(labels, logits.rows(), spec.ignore_index);
    return ag::make_op(Matrix(1, 1, value), {logits}, [logits, labels, spec, n](ag::Node& self) {
        Matrix& g = logits.node()->grad_buffer();
        const double scale = self.grad[0] / static_cast<double>(n);
        for (std::size_t p = 0; p < labels.labels.size(); ++p) {
            const int l = labels.labels[p];
            if (l == spec.ignore_index) continue;
            for (std::size_t c = 0; c < g.rows(); ++c) {
                const double y = static_cast<std::size_t>(l) == c ? 1.0 : 0.0;
                g(c, p) += scale * spec.weights[c] * (sigmoid(logits.value()(c, p)) - y);
            }
        }
    });
}

ag::Var softmax_ce_loss(const ag::Var& logits, const LabelMap& labels, const LossSpec& spec) {
    check_loss_inputs(logits.value(), labels, spec);
    const std::size_t k = logits.rows();
    const std::size_t n = counted_pixels(labels, k, spec.ignore_index);
    const Matrix& z = logits.value();
    double total = 0.0;
    for (std::size_t p = 0; p < labels.labels.size(); ++p) {
        const int l = labels.labels[p];
        if (l == spec.ignore_index) continue;
        double mx = z(0, p);
        for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, z(c, p));
        double s = 0.0;
        for (std::size_t c = 0; c < k; ++c) s += std::exp(z(c, p) - mx);
        total += spec.weights[static_cast<std::size_t>(l)] * (mx + std::log(s) - z(static_cast<std::size_t>(l), p));
    }
    return ag::make_op(Matrix(1, 1, total / static_cast<double>(n)), {logits},
                       [logits, labels, spec, n, k](ag::Node& self) {
                           Matrix& g = logits.node()->grad_buffer();
                           const Matrix& z = logits.value();
                           const double scale = self.grad[0] / static_cast<double>(n);
                           for (std::size_t p = 0; p < labels.labels.size(); ++p) {
                               const int l = labels.labels[p];
                               if (l == spec.ignore_index) continue;
                               double mx = z(0, p);
                               for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, z(c, p));
                               double s = 0.0;
                               for (std::size_t c = 0; c < k; ++c) s += std::exp(z(c, p) - mx);
                               const double w = spec.weights[static_cast<std::size_t>(l)];
                               for (std::size_t c = 0; c < k; ++c) {
                                   const double prob = std::exp(z(c, p) - mx) / s;
                                   g(c, p) += scale * w * (prob - (static_cast<std::size_t>(l) == c ? 1.0 : 0.0));
                               }
                           }
                       });
}

std::uint64_t ConfusionMatrix::total() const {
    std::uint64_t t = 0;
    for (auto v : counts_) t += v;
    return t;
}

std::uint64_t ConfusionMatrix::row_sum(std::size_t gt) const {
    std::uint64_t t = 0;
    for (std::size_t p = 0; p < k_; ++p) t += at(gt, p);
    return t;
}

std::uint64_t ConfusionMatrix::col_sum(std::size_t pred) const {
    std::uint64_t t = 0;
    for (std::size_t g = 0; g < k_; ++g) t += at(g, pred);
    return t;
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& other) {
    if (other.k_ != k_) throw std::invalid_argument("confusion matrices differ in class count");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
    return *this;
}

void accumulate(const LabelMap& pred, const LabelMap& gt, int ignore_index, ConfusionMatrix& cm) {
    if (pred.height != gt.height || pred.width != gt.width)
        throw std::invalid_argument("accumulate: prediction and ground truth shapes differ");
    const std::size_t k = cm.classes();
    for (std::size_t i = 0; i < gt.labels.size(); ++i) {
        const int g = gt.labels[i];
        if (g == ignore_index) continue;
        const std::size_t p = pred.labels[i];
        if (static_cast<std::size_t>(g) >= k || p >= k)
            throw std::invalid_argument("accumulate: label " + std::to_string(std::max<std::size_t>(g, p)) +
                                        " >= " + std::to_string(k) + " classes");
        ++cm.at(static_cast<std::size_t>(g), p);
    }
}

ClassScores miou(const ConfusionMatrix& cm, std::span<const std::size_t> exclude) {
    std::vector<double> iou(cm.classes());
    for (std::size_t c = 0; c < cm.classes(); ++c) {
        const std::uint64_t tp = cm.at(c, c);
        const std::uint64_t fp = cm.col_sum(c) - tp, fn = cm.row_sum(c) - tp;
        iou[c] = ratio(tp, tp + fp + fn);
    }
    ClassScores s = finish_scores(std::move(iou), exclude);
    if (std::isnan(s.mean)) throw MetricError("mIoU undefined: no class has a nonzero denominator");
    return s;
}

double overall_accuracy(const ConfusionMatrix& cm) {
    std::uint64_t diag = 0;
    for (std::size_t c = 0; c < cm.classes(); ++c) diag += cm.at(c, c);
    const std::uint64_t total = cm.total();
    if (total == 0) throw MetricError("overall accuracy undefined: confusion matrix is empty");
    return static_cast<double>(diag) / static_cast<double>(total);
}

AuxMetrics aux_metrics(const ConfusionMatrix& cm, std::span<const std::size_t> exclude) {
    if (cm.total() == 0) throw MetricError("metrics undefined: confusion matrix is empty");
    const std::size_t k = cm.classes();
    std::vector<double> rec(k), prec(k), dice(k);
    for (std::size_t c = 0; c < k; ++c) {
        const std::uint64_t tp = cm.at(c, c);
        const std::uint64_t fp = cm.col_sum(c) - tp, fn = cm.row_sum(c) - tp;
        rec[c] = ratio(tp, tp + fn);
        prec[c] = ratio(tp, tp + fp);
        dice[c] = ratio(2 * tp, 2 * tp + fp + fn);
    }
    return {finish_scores(std::move(rec), exclude), finish_scores(std::move(prec), exclude),
            finish_scores(std::move(dice), exclude)};
}

MetricsReport make_report(const ConfusionMatrix& cm, int background_class) {
    std::vector<std::size_t> exclude;
    if (background_class >= 0) exclude.push_back(static_cast<std::size_t>(background_class));

    // Background ground truth is not scored at all.
    ConfusionMatrix scored = cm;
    for (std::size_t bg : exclude)
        for (std::size_t p = 0; p < cm.classes(); ++p) scored.at(bg, p) = 0;

    MetricsReport r;
    for (std::size_t c = 0; c < cm.classes(); ++c)
        if (!in_set(exclude, c)) r.classes.push_back(c);
    auto keep = [&](ClassScores s) {
        ClassScores out{{}, s.mean};
        for (std::size_t c : r.classes) out.per_class.push_back(s.per_class[c]);
        return out;
    };
    r.iou = keep(miou(scored, exclude));
    r.overall_accuracy = overall_accuracy(scored);
    AuxMetrics aux = aux_metrics(scored, exclude);
    r.accuracy = keep(std::move(aux.accuracy));
    r.precision = keep(std::move(aux.precision));
    r.dice = keep(std::move(aux.dice));
    return r;
}

nlohmann::json to_json(const MetricsReport& r) {
    auto arr = [](const ClassScores& s) {
        nlohmann::json a = nlohmann::json::array();
        for (double v : s.per_class) a.push_back(std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v));
        return a;
    };
    auto num = [](double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v); };
    return nlohmann::json{
        {"miou", num(r.iou.mean)},
        {"oa", num(r.overall_accuracy)},
        {"mean_accuracy", num(r.accuracy.mean)},
        {"mean_precision", num(r.precision.mean)},
        {"mdice", num(r.dice.mean)},
        {"classes", r.classes},
        {"per_class",
         {{"iou", arr(r.iou)}, {"accuracy", arr(r.accuracy)}, {"precision", arr(r.precision)}, {"dice", arr(r.dice)}}},
        {"step", r.step},
        {"wall_time_s", r.wall_time_s},
    };
}

}  // namespace cwsam
