#include "efem/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace efem {

double mask_iou(const IndexSet& a, const IndexSet& b) {
    std::size_t i = 0, j = 0, inter = 0;
    while (i < a.size() && j < b.size()) {
        if (a[i] < b[j]) {
            ++i;
        } else if (b[j] < a[i]) {
            ++j;
        } else {
            ++inter;
            ++i;
            ++j;
        }
    }
    const std::size_t uni = a.size() + b.size() - inter;
    return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

MatchResult greedy_match(std::span<const Prediction> preds, std::span<const IndexSet> gts, double threshold) {
    MatchResult m;
    m.order.resize(preds.size());
    std::iota(m.order.begin(), m.order.end(), std::size_t{0});
    std::stable_sort(m.order.begin(), m.order.end(),
                     [&](std::size_t a, std::size_t b) { return preds[a].confidence > preds[b].confidence; });
    std::vector<bool> used(gts.size(), false);
    for (std::size_t p : m.order) {
        double best = -1.0;
        std::size_t best_g = gts.size();
        for (std::size_t g = 0; g < gts.size(); ++g) {
            if (used[g]) continue;
            const double iou = mask_iou(preds[p].points, gts[g]);
            if (iou >= threshold && iou > best) {
                best = iou;
                best_g = g;
            }
        }
        if (best_g < gts.size()) used[best_g] = true;
        m.true_positive.push_back(best_g < gts.size());
        m.confidence.push_back(preds[p].confidence);
    }
    return m;
}

namespace {

struct OperatingPoint {
    std::size_t rank = 0;  // predictions taken so far
    std::size_t hits = 0;
};

// One point per distinct confidence: tied predictions enter together.
std::vector<OperatingPoint> operating_points(const std::vector<bool>& true_positive,
                                             const std::vector<double>& confidence) {
    const bool blocks = confidence.size() == true_positive.size();
    std::vector<OperatingPoint> pts;
    std::size_t hits = 0;
    for (std::size_t k = 0; k < true_positive.size(); ++k) {
        if (true_positive[k]) ++hits;
        const bool last = k + 1 == true_positive.size() || !blocks || confidence[k + 1] != confidence[k];
        if (last) pts.push_back({k + 1, hits});
    }
    return pts;
}

}  // namespace

double ap_from_matches(const std::vector<bool>& true_positive, std::size_t gt_count,
                       const std::vector<double>& confidence) {
    if (gt_count == 0) return std::numeric_limits<double>::quiet_NaN();
    const auto pts = operating_points(true_positive, confidence);
    // Precision envelope from the right; recall grows by hits / gt_count.
    std::vector<double> env(pts.size());
    double envelope = 0.0;
    for (std::size_t b = pts.size(); b-- > 0;) {
        envelope = std::max(envelope, static_cast<double>(pts[b].hits) / static_cast<double>(pts[b].rank));
        env[b] = envelope;
    }
    double sum = 0.0;
    std::size_t prev = 0;
    for (std::size_t b = 0; b < pts.size(); ++b) {
        sum += static_cast<double>(pts[b].hits - prev) * env[b];
        prev = pts[b].hits;
    }
    return sum / static_cast<double>(gt_count);
}

PRCurve precision_recall(std::span<const Prediction> preds, std::span<const IndexSet> gts, double threshold) {
    const MatchResult m = greedy_match(preds, gts, threshold);
    PRCurve c;
    c.threshold = threshold;
    for (const auto& pt : operating_points(m.true_positive, m.confidence)) {
        c.precision.push_back(static_cast<double>(pt.hits) / static_cast<double>(pt.rank));
        c.recall.push_back(gts.empty() ? 0.0 : static_cast<double>(pt.hits) / static_cast<double>(gts.size()));
    }
    c.ap = ap_from_matches(m.true_positive, gts.size(), m.confidence);
    return c;
}

double average_precision(std::span<const Prediction> preds, std::span<const IndexSet> gts, double threshold) {
    const MatchResult m = greedy_match(preds, gts, threshold);
    return ap_from_matches(m.true_positive, gts.size(), m.confidence);
}

std::vector<double> ap_thresholds() {
    std::vector<double> t{0.25};
    for (int k = 0; k < 10; ++k) t.push_back(0.50 + 0.05 * k);
    return t;
}

namespace {

void summarize(APReport& r) {
    // thresholds[0] = 0.25, thresholds[1] = 0.50, then 0.55 ... 0.95
    r.ap25 = r.per_threshold[0];
    r.ap50 = r.per_threshold[1];
    double sum = 0.0;
    for (std::size_t k = 1; k < r.per_threshold.size(); ++k) sum += r.per_threshold[k];
    r.ap = sum / static_cast<double>(r.per_threshold.size() - 1);
}

}  // namespace

APReport evaluate(std::span<const Prediction> preds, std::span<const IndexSet> gts) {
    APReport r;
    r.thresholds = ap_thresholds();
    for (double t : r.thresholds) {
        r.curves.push_back(precision_recall(preds, gts, t));
        r.per_threshold.push_back(r.curves.back().ap);
    }
    r.scenes = gts.empty() ? 0 : 1;
    summarize(r);
    return r;
}

APReport evaluate(std::span<const SceneEval> scenes) {
    APReport r;
    r.thresholds = ap_thresholds();
    r.per_threshold.assign(r.thresholds.size(), 0.0);
    for (const auto& s : scenes) {
        if (s.ground_truth.empty()) continue;
        ++r.scenes;
        for (std::size_t k = 0; k < r.thresholds.size(); ++k)
            r.per_threshold[k] += average_precision(s.predictions, s.ground_truth, r.thresholds[k]);
    }
    for (double& v : r.per_threshold)
        v = r.scenes == 0 ? std::numeric_limits<double>::quiet_NaN() : v / r.scenes;
    if (scenes.size() == 1 && r.scenes == 1) {
        r.curves = evaluate(scenes[0].predictions, scenes[0].ground_truth).curves;
    }
    summarize(r);
    return r;
}

nlohmann::json APReport::to_json() const {
    auto num = [](double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v); };
    nlohmann::json per = nlohmann::json::array();
    for (std::size_t k = 0; k < thresholds.size(); ++k) {
        nlohmann::json e{{"iou", thresholds[k]}, {"ap", num(per_threshold[k])}};
        if (k < curves.size()) {
            e["precision"] = curves[k].precision;
            e["recall"] = curves[k].recall;
        }
        per.push_back(e);
    }
    return {{"ap", num(ap)}, {"ap50", num(ap50)}, {"ap25", num(ap25)}, {"scenes", scenes}, {"per_threshold", per}};
}

}  // namespace efem
