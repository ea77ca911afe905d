#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "crayonbox/datagen.hpp"
#include "crayonbox/model.hpp"

namespace crayonbox {

enum class ProbeKind { C2B, B2C, Count };

struct ProbeResult {
    ProbeKind kind = ProbeKind::C2B;
    int scene = -1;
    int class_id = -1;  // probed class (C2B/Count) or the box's true class (B2C)
    bool positive = false;  // C2B ground truth
    std::string question;
    std::string answer;
    std::string prediction;  // normalized: "yes", "no", a class name, or "" when unparseable
    bool unparseable = false;
    bool correct = false;
};

// Answers a question about one scene; lets oracles and trivial baselines
// stand in for the trained model.
using Answerer = std::function<std::string(const Scene&, const std::string& question)>;

Answerer model_answerer(const Model& model, int beam_n = 1);
Answerer oracle_answerer();      // reads the grid; scores 100% by construction
Answerer always_yes_answerer();

// Balanced per image: one positive probe per present thing class (optionally
// restricted to `classes`) and an equal number of absent-class negatives.
std::vector<ProbeResult> probe_c2b(const Answerer& answer, const SynthDataset& ds,
                                   const std::vector<int>& classes, uint64_t seed);

// One probe per extracted thing entry, bbox taken verbatim from extract_objects.
std::vector<ProbeResult> probe_b2c(const Answerer& answer, const SynthDataset& ds);

// Counting task over present thing classes; supplies the per-class task
// accuracy axis of the correlation analysis.
std::vector<ProbeResult> probe_count(const Answerer& answer, const SynthDataset& ds);

std::map<int, double> per_class_accuracy(const std::vector<ProbeResult>& results);

struct ClassAccuracy {
    int class_id = -1;
    double c2b = -1.0;  // -1 when the class has no probes of that kind
    double b2c = -1.0;
    double mean = 0.0;
};

struct CategoryStats {
    std::vector<ClassAccuracy> rows;  // ascending class id, only probed classes
    std::vector<int> excluded;        // thing classes with zero probes
    int k = 0;                        // min(20, floor(classes/2))
    double overall = 0.0;
    double top_mean = 0.0;
    double bottom_mean = 0.0;
};

CategoryStats category_stats(const std::vector<ProbeResult>& c2b,
                             const std::vector<ProbeResult>& b2c);

struct RegressionResult {
    int n = 0;
    double slope = 0.0;
    double intercept = 0.0;
    double r = 0.0;
    double x_mean = 0.0;
    double sxx = 0.0;
    double resid_std = 0.0;  // sqrt(SSE / (n-2))
    double t_crit = 0.0;     // two-sided 95% Student-t quantile, n-2 dof

    double fit(double x) const { return intercept + slope * x; }
    // 95% confidence band for the mean response at x.
    std::pair<double, double> band(double x) const;
};

RegressionResult regress_ci(const std::vector<double>& x, const std::vector<double>& y,
                            double confidence = 0.95);

// report.csv (class,c2b_acc,b2c_acc,mean_acc,task_acc), summary.txt
// (slope/intercept/r/n), plot.svg (scatter, fit line, band polygon in data
// coordinates with y drawn as 1-y).
void emit_report(const CategoryStats& stats, const std::map<int, double>& task_acc,
                 const RegressionResult& reg, const std::string& dir);

}  // namespace crayonbox
