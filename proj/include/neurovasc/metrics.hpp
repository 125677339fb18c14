#pragma once

#include <iomanip>
#include <sstream>

#include "tensor.hpp"

namespace neurovasc {

// =====================================================================
// Voxel-level evaluation metrics (one-vs-rest per class)
// =====================================================================

struct ConfusionCounts {
    std::int64_t tp = 0, fp = 0, fn = 0, tn = 0;
    std::int64_t total() const { return tp + fp + fn + tn; }
};

inline ConfusionCounts confusion_counts(const LabelVol& pred, const LabelVol& gt, int class_k) {
    if (!pred.same_shape(gt)) throw std::invalid_argument("confusion_counts: shape mismatch");
    ConfusionCounts c;
    for (index_t i = 0, n = pred.numel(); i < n; ++i) {
        const bool p = pred[i] == class_k;
        const bool g = gt[i] == class_k;
        if (p && g)
            ++c.tp;
        else if (p && !g)
            ++c.fp;
        else if (!p && g)
            ++c.fn;
        else
            ++c.tn;
    }
    return c;
}

/// Metrics for one class. A 0/0 ratio is reported as 1.0 with the matching
/// `*_empty` flag set (consistent with the epsilon behaviour of soft Dice).
struct ClassMetrics {
    double dsc = 1.0, ji = 1.0, sens = 1.0, spec = 1.0, prec = 1.0;
    bool dsc_empty = false, sens_empty = false, spec_empty = false, prec_empty = false;
};

inline ClassMetrics metrics_from_counts(const ConfusionCounts& c) {
    ClassMetrics m;
    const double tp = static_cast<double>(c.tp), fp = static_cast<double>(c.fp);
    const double fn = static_cast<double>(c.fn), tn = static_cast<double>(c.tn);
    if (2 * c.tp + c.fp + c.fn > 0) {
        m.dsc = 2.0 * tp / (2.0 * tp + fp + fn);
        m.ji = tp / (tp + fp + fn);
    } else {
        m.dsc = m.ji = 1.0;
        m.dsc_empty = true;
    }
    if (c.tp + c.fn > 0)
        m.sens = tp / (tp + fn);
    else
        m.sens_empty = true;
    if (c.tn + c.fp > 0)
        m.spec = tn / (tn + fp);
    else
        m.spec_empty = true;
    if (c.tp + c.fp > 0)
        m.prec = tp / (tp + fp);
    else
        m.prec_empty = true;
    return m;
}

/// Aggregated evaluation results, Table-style: per class plus the mean over
/// foreground classes, model size and total inference wall time.
struct MetricsReport {
    std::vector<ClassMetrics> per_class;  // indexed by class id (0 = background)
    ClassMetrics aggregate;               // mean over classes >= 1
    index_t params = 0;
    double inference_seconds = 0.0;
    index_t volumes = 0;

    static ClassMetrics mean_of(const std::vector<ClassMetrics>& ms) {
        ClassMetrics a;
        if (ms.empty()) return a;
        a.dsc = a.ji = a.sens = a.spec = a.prec = 0.0;
        for (const ClassMetrics& m : ms) {
            a.dsc += m.dsc;
            a.ji += m.ji;
            a.sens += m.sens;
            a.spec += m.spec;
            a.prec += m.prec;
        }
        const double n = static_cast<double>(ms.size());
        a.dsc /= n;
        a.ji /= n;
        a.sens /= n;
        a.spec /= n;
        a.prec /= n;
        return a;
    }

    /// CSV rows in the Table column order: DSC, JI, Sens, Spec, Prec, Params, Inf. time.
    std::string to_csv() const {
        std::ostringstream os;
        os << std::setprecision(10);
        os << "label,DSC,JI,Sens,Spec,Prec,Params,InfTimeSec\n";
        auto row = [&](const std::string& label, const ClassMetrics& m) {
            os << label << "," << m.dsc << "," << m.ji << "," << m.sens << "," << m.spec << ","
               << m.prec << "," << params << "," << inference_seconds << "\n";
        };
        for (size_t k = 0; k < per_class.size(); ++k) row("class" + std::to_string(k), per_class[k]);
        row("aggregate", aggregate);
        return os.str();
    }
};

}  // namespace neurovasc
