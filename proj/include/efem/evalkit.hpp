#pragma once

#include <span>
#include <vector>

#include <json.hpp>

namespace efem {

/// Sorted point indices.
using IndexSet = std::vector<std::size_t>;

struct Prediction {
    IndexSet points;
    double confidence = 0.0;
};

/// |a ∩ b| / |a ∪ b| for sorted sets; 0 when both are empty.
double mask_iou(const IndexSet& a, const IndexSet& b);

/// Greedy match flags in evaluation order. Predictions are visited by
/// descending confidence (lower index first on ties); each takes the unmatched
/// ground truth with the highest IoU >= threshold (lower index on ties).
struct MatchResult {
    std::vector<std::size_t> order;  // prediction indices in visit order
    std::vector<bool> true_positive; // aligned with order
    std::vector<double> confidence;   // aligned with order
};
MatchResult greedy_match(std::span<const Prediction> preds, std::span<const IndexSet> gts, double threshold);

/// Precision and recall at each operating point.
struct PRCurve {
    double threshold = 0.0;
    std::vector<double> precision;
    std::vector<double> recall;
    double ap = 0.0;
};

/// All-point interpolated AP from match flags in visit order. Precision and
/// recall are taken once per distinct confidence (tied predictions count as
/// one operating point); each true positive contributes the precision
/// envelope at its operating point, divided by the GT count. Without
/// confidences every rank is its own operating point. NaN when there is no GT.
double ap_from_matches(const std::vector<bool>& true_positive, std::size_t gt_count,
                       const std::vector<double>& confidence = {});

PRCurve precision_recall(std::span<const Prediction> preds, std::span<const IndexSet> gts, double threshold);

double average_precision(std::span<const Prediction> preds, std::span<const IndexSet> gts, double threshold);

struct SceneEval {
    std::vector<Prediction> predictions;
    std::vector<IndexSet> ground_truth;
};

struct APReport {
    double ap = 0.0;    // mean over 0.50:0.05:0.95
    double ap50 = 0.0;
    double ap25 = 0.0;
    std::vector<double> thresholds;   // 0.25, then 0.50 ... 0.95
    std::vector<double> per_threshold;
    std::vector<PRCurve> curves;      // filled for single-scene evaluation
    int scenes = 0;                   // scenes with at least one GT instance

    nlohmann::json to_json() const;
};

/// The IoU thresholds used by evaluate().
std::vector<double> ap_thresholds();

APReport evaluate(std::span<const Prediction> preds, std::span<const IndexSet> gts);

/// Per-scene APs macro-averaged over scenes; GT-empty scenes are excluded.
/// With no usable scene every value is NaN.
APReport evaluate(std::span<const SceneEval> scenes);

}  // namespace efem
