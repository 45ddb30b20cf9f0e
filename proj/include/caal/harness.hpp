#pragma once

#include <string>
#include <vector>

#include "caal/al.hpp"

namespace caal::harness {

// who produced a report and from what; rerunning the same frozen config must
// reproduce the emitted CSVs bitwise
struct Provenance {
    std::vector<uint64_t> seeds;
    uint64_t config_hash = 0;
    std::string code_version;
};

// seed medians everywhere; quartiles by Tukey hinges (median of each half)
double median_of(std::vector<double> v);
double iqr_of(std::vector<double> v);

// ---- label-budget sweep: AL strategies vs random few-shot sampling ----------

struct SweepCell {
    std::string method;
    double budget = 0;             // fraction of the train split
    std::vector<double> per_seed;  // test macro AUC; empty when skipped
    double median = 0;
    double iqr = 0;
    std::vector<int64_t> per_seed_labels;  // real labels consumed (AL can stop early)
    int64_t labels_used = 0;               // max over seeds
    std::string skip_reason;  // nonempty: condition skipped, cells read `undef`
};

// smallest budget where a method's median reaches the full-data bar minus slack
struct SweepHeadline {
    std::string method;
    double budget = -1;  // -1: never reached within the sweep
    double auc_median = 0;
    double fsl_at_same_budget = 0;  // fsl_random median at that budget (-1 if absent)
};

struct SweepReport {
    Provenance prov;
    std::vector<double> budgets;       // ascending
    std::vector<std::string> methods;  // row order of table.csv
    std::vector<SweepCell> cells;      // methods x budgets, budget-major per method
    double fsl_full_median = -1;       // fsl_random at budget 1.0 when swept
    double headline_slack = 0.02;
    std::vector<SweepHeadline> headlines;  // one per AL method
};

struct SweepJob {
    std::vector<double> budgets;       // subset of (0,1]
    std::vector<std::string> methods;  // "fsl_random" and/or selection strategies
    std::vector<uint64_t> seeds{1, 2, 3, 4, 5};
    al::AlJob al;  // template: models, schedule, finetune, scoring
    cls::ClassifierSpec classifier;
    cls::FinetuneHyper fsl_finetune;
    double headline_slack = 0.02;
    uint64_t seed = 101;  // master for per-condition forks
    std::string out_dir;  // empty: in-memory only
};

SweepReport label_budget_sweep(const data::DatasetManifest& m, const SweepJob& job);

// ---- real/synthetic/mixed train-test matrix ---------------------------------

struct MixCell {
    std::string train_kind;  // real | syn | mix
    std::string test_kind;
    std::vector<double> per_seed;
    double median = 0;
    double iqr = 0;
    std::string skip_reason;
};

struct MixReport {
    Provenance prov;
    std::vector<MixCell> cells;  // 9, train-major
    double rr_sr_gap_median = 0; // |real-real minus syn-real| over seeds
    double rr_mm_gap_median = 0; // |real-real minus mix-mix| over seeds
};

struct MixJob {
    std::vector<uint64_t> seeds{1, 2, 3, 4, 5};
    cls::ClassifierSpec classifier;
    cls::FinetuneHyper finetune;
    uint64_t seed = 202;
    std::string out_dir;
};

// synthetic samples must carry base_id; each lands in its base patient's fold,
// anything else is a leakage guard trip
MixReport real_syn_mix_matrix(const data::DatasetManifest& real,
                              const std::vector<data::Sample>& syn, const MixJob& job);

// same-class counterpart(s) for every manifest image, staying inside the base
// patient's fold; images snapped to the PNG grid
std::vector<data::Sample> generate_synthetic_counterparts(const data::DatasetManifest& m,
                                                          const seg::SegmenterNet& segnet,
                                                          const cagan::CaganModel& gan,
                                                          int per_real, double perturb_magnitude,
                                                          uint64_t seed);

// ---- synthetic-only growth curve --------------------------------------------

struct GrowthPoint {
    int64_t x_count = 0;  // cumulative synthetic images added
    std::string mode;     // informative | random | fsl_full
    uint64_t seed = 0;
    double macro_auc = 0;
};

struct GrowthReport {
    Provenance prov;
    std::vector<GrowthPoint> curve;  // x-major per (mode, seed); fsl_full rows at x=0
    double informative_final_median = 0;
    double random_final_median = 0;
    double fsl_full_median = 0;
    int64_t train_size = 0;    // denominators for the two x normalizations
    int64_t initial_pool = 0;
};

struct GrowthJob {
    int initial_real_per_class = 10;
    int step_per_class = 5;
    int steps = 8;
    int bank_per_class = 0;  // candidate bank; 0 = exactly steps*step_per_class
    std::vector<std::string> modes{"informative", "random"};
    std::vector<uint64_t> seeds{1, 2, 3, 4, 5};
    const seg::SegmenterNet* segmenter = nullptr;
    const cagan::CaganModel* gan = nullptr;
    cls::ClassifierSpec classifier;
    cls::FinetuneHyper finetune;
    unc::McConfig scoring;
    double perturb_magnitude = 0.1;
    uint64_t seed = 303;
    std::string out_dir;
};

GrowthReport synthetic_growth_curve(const data::DatasetManifest& m, const GrowthJob& job);

// each writes summary.json, table.csv and curve.csv under dir
void write_report(const SweepReport& r, const std::string& dir);
void write_report(const MixReport& r, const std::string& dir);
void write_report(const GrowthReport& r, const std::string& dir);

}  // namespace caal::harness
