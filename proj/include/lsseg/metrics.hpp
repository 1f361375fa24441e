#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "lsseg/grid.hpp"

namespace lsseg {

/// K x K pixel counts, rows indexed by ground truth class, columns by
/// predicted class. Plain integer counts, so matrices merge associatively.
class ConfusionMatrix {
public:
    explicit ConfusionMatrix(int num_classes);

    int num_classes() const { return k_; }
    std::uint64_t at(int gt, int pred) const { return counts_[index(gt, pred)]; }
    std::uint64_t& at_mut(int gt, int pred) { return counts_[index(gt, pred)]; }
    std::uint64_t total() const;

    void merge(const ConfusionMatrix& other);

private:
    std::size_t index(int gt, int pred) const {
        return static_cast<std::size_t>(gt) * k_ + pred;
    }
    int k_;
    std::vector<std::uint64_t> counts_;
};

/// Add one prediction/ground-truth pair; labels must be < num_classes.
void accumulate(ConfusionMatrix& cm, const LabelMap& gt, const LabelMap& pred);

struct IouResult {
    double miou = 0.0;
    /// Per-class IoU; nullopt for classes absent from both gt and prediction
    /// (those are excluded from the mean).
    std::vector<std::optional<double>> per_class;
};

IouResult mean_iou(const ConfusionMatrix& cm);

/// Per-pixel argmax over class maps; ties break toward the lowest class.
LabelMap argmax_labels(const ProbMaps& p);

/// Trailing moving average with the window clipped at the start.
std::vector<double> moving_average(const std::vector<double>& xs, int window);

/// Spearman rank correlation with average ranks for ties. Returns 0 when
/// either input is constant.
double spearman(const std::vector<double>& xs, const std::vector<double>& ys);

struct CurvePoint {
    int iter = 0;
    double ce = 0.0;
    double ls = 0.0;
    double total = 0.0;
    std::optional<double> miou;  // present only on evaluation iterations
};

/// CSV with header iter,ce,ls,total,miou; the miou column is empty on
/// non-evaluation rows.
void write_curve_csv(const std::string& path, const std::vector<CurvePoint>& points);

struct SvgSeries {
    std::string label;
    std::string color;             // CSS color
    std::vector<double> xs;
    std::vector<double> ys;
};

/// Self-contained SVG line plot (no external renderer needed).
void write_svg_lineplot(const std::string& path, const std::string& title,
                        const std::vector<SvgSeries>& series);

}  // namespace lsseg
