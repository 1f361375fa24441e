#include "lsseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "lsseg/error.hpp"

namespace lsseg {

ConfusionMatrix::ConfusionMatrix(int num_classes) : k_(num_classes) {
    if (num_classes < 1) throw ConfigError("confusion matrix needs at least one class");
    counts_.assign(static_cast<std::size_t>(k_) * k_, 0);
}

std::uint64_t ConfusionMatrix::total() const {
    std::uint64_t t = 0;
    for (auto c : counts_) t += c;
    return t;
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
    if (other.k_ != k_) throw ShapeError("confusion matrix class counts differ");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

void accumulate(ConfusionMatrix& cm, const LabelMap& gt, const LabelMap& pred) {
    if (gt.rows() != pred.rows() || gt.cols() != pred.cols()) {
        throw ShapeError("accumulate: gt and prediction shapes differ");
    }
    gt.validate(cm.num_classes());
    pred.validate(cm.num_classes());
    for (std::size_t i = 0; i < gt.labels.size(); ++i) {
        cm.at_mut(gt.labels[i], pred.labels[i]) += 1;
    }
}

IouResult mean_iou(const ConfusionMatrix& cm) {
    const int k = cm.num_classes();
    IouResult r;
    r.per_class.assign(k, std::nullopt);

    double sum = 0.0;
    int defined = 0;
    for (int c = 0; c < k; ++c) {
        std::uint64_t row = 0, col = 0;
        for (int j = 0; j < k; ++j) {
            row += cm.at(c, j);
            col += cm.at(j, c);
        }
        const std::uint64_t inter = cm.at(c, c);
        const std::uint64_t uni = row + col - inter;
        if (uni == 0) continue;  // class absent from gt and prediction
        const double iou = static_cast<double>(inter) / static_cast<double>(uni);
        r.per_class[c] = iou;
        sum += iou;
        ++defined;
    }
    if (defined == 0) throw NumericError("mean IoU undefined: every class is empty");
    r.miou = sum / defined;
    return r;
}

LabelMap argmax_labels(const ProbMaps& p) {
    LabelMap out(p.rows(), p.cols(), 0);
    const std::size_t plane_size = static_cast<std::size_t>(p.rows()) * p.cols();
    auto probs = p.maps.data();
    for (std::size_t i = 0; i < plane_size; ++i) {
        int best = 0;
        double best_v = probs[i];
        for (int k = 1; k < p.classes(); ++k) {
            const double v = probs[static_cast<std::size_t>(k) * plane_size + i];
            if (v > best_v) {
                best_v = v;
                best = k;
            }
        }
        out.labels[i] = best;
    }
    return out;
}

std::vector<double> moving_average(const std::vector<double>& xs, int window) {
    if (window < 1) throw ConfigError("moving average window must be >= 1");
    std::vector<double> out(xs.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        acc += xs[i];
        if (i >= static_cast<std::size_t>(window)) acc -= xs[i - window];
        const double n = static_cast<double>(std::min<std::size_t>(i + 1, window));
        out[i] = acc / n;
    }
    return out;
}

namespace {
std::vector<double> ranks_with_ties(const std::vector<double>& xs) {
    std::vector<std::size_t> order(xs.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });
    std::vector<double> ranks(xs.size());
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j + 1 < order.size() && xs[order[j + 1]] == xs[order[i]]) ++j;
        const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = avg;
        i = j + 1;
    }
    return ranks;
}
}  // namespace

double spearman(const std::vector<double>& xs, const std::vector<double>& ys) {
    if (xs.size() != ys.size()) throw ShapeError("spearman: series lengths differ");
    if (xs.size() < 2) throw ConfigError("spearman needs at least two points");
    const auto rx = ranks_with_ties(xs);
    const auto ry = ranks_with_ties(ys);
    const double n = static_cast<double>(xs.size());
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        mx += rx[i];
        my += ry[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) return 0.0;
    return sxy / std::sqrt(sxx * syy);
}

void write_curve_csv(const std::string& path, const std::vector<CurvePoint>& points) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out << "iter,ce,ls,total,miou\n";
    out.precision(17);
    for (const auto& p : points) {
        out << p.iter << ',' << p.ce << ',' << p.ls << ',' << p.total << ',';
        if (p.miou) out << *p.miou;
        out << '\n';
    }
    if (!out) throw IoError("failed writing " + path);
}

namespace {
struct Bounds {
    double lo = 0.0, hi = 1.0;
    void expand(double v) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
};

std::string fmt(double v) {
    std::ostringstream ss;
    ss.precision(4);
    ss << v;
    return ss.str();
}
}  // namespace

void write_svg_lineplot(const std::string& path, const std::string& title,
                        const std::vector<SvgSeries>& series) {
    constexpr int w = 720, h = 440;
    constexpr int ml = 64, mr = 16, mt = 36, mb = 44;

    Bounds bx, by;
    bool first = true;
    for (const auto& s : series) {
        for (std::size_t i = 0; i < s.xs.size(); ++i) {
            if (first) {
                bx = {s.xs[i], s.xs[i]};
                by = {s.ys[i], s.ys[i]};
                first = false;
            } else {
                bx.expand(s.xs[i]);
                by.expand(s.ys[i]);
            }
        }
    }
    if (bx.hi == bx.lo) bx.hi = bx.lo + 1.0;
    if (by.hi == by.lo) by.hi = by.lo + 1.0;

    auto px = [&](double x) { return ml + (x - bx.lo) / (bx.hi - bx.lo) * (w - ml - mr); };
    auto py = [&](double y) { return h - mb - (y - by.lo) / (by.hi - by.lo) * (h - mt - mb); };

    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
        << "\" viewBox=\"0 0 " << w << " " << h << "\">\n"
        << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
        << "<text x=\"" << w / 2 << "\" y=\"20\" text-anchor=\"middle\" font-family=\"sans-serif\" "
           "font-size=\"14\">"
        << title << "</text>\n"
        << "<line x1=\"" << ml << "\" y1=\"" << h - mb << "\" x2=\"" << w - mr << "\" y2=\""
        << h - mb << "\" stroke=\"black\"/>\n"
        << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << h - mb
        << "\" stroke=\"black\"/>\n";

    out << "<text x=\"" << ml << "\" y=\"" << h - mb + 16
        << "\" font-family=\"sans-serif\" font-size=\"11\">" << fmt(bx.lo) << "</text>\n"
        << "<text x=\"" << w - mr << "\" y=\"" << h - mb + 16
        << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" << fmt(bx.hi)
        << "</text>\n"
        << "<text x=\"" << ml - 6 << "\" y=\"" << h - mb
        << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" << fmt(by.lo)
        << "</text>\n"
        << "<text x=\"" << ml - 6 << "\" y=\"" << mt + 4
        << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" << fmt(by.hi)
        << "</text>\n";

    int legend_y = mt + 4;
    for (const auto& s : series) {
        if (s.xs.empty()) continue;
        out << "<polyline fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\"1.5\" points=\"";
        for (std::size_t i = 0; i < s.xs.size(); ++i) {
            out << px(s.xs[i]) << ',' << py(s.ys[i]) << ' ';
        }
        out << "\"/>\n";
        out << "<text x=\"" << w - mr - 4 << "\" y=\"" << legend_y
            << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"12\" fill=\""
            << s.color << "\">" << s.label << "</text>\n";
        legend_y += 16;
    }
    out << "</svg>\n";
    if (!out) throw IoError("failed writing " + path);
}

}  // namespace lsseg
