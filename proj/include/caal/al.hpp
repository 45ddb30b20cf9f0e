#pragma once

#include <string>
#include <vector>

#include "caal/cagan.hpp"
#include "caal/classifier.hpp"
#include "caal/data.hpp"
#include "caal/segmenter.hpp"
#include "caal/uncertainty.hpp"

namespace caal::al {

struct AlScheduleConfig {
    double initial_pool_fraction = 0.03;
    int top_k_real = 32;
    int gen_per_class = 250;
    int keep_per_class = 150;
    int stop_window = 3;           // consecutive stable rounds before stopping
    double stop_epsilon = 0.001;   // absolute AUC change counted as "no change"
    double gain_threshold = -1.0;  // >=0: stop when a round gains less than this
    int max_rounds = 20;
    std::string synthetic_mode = "accumulate";  // accumulate | replace
    int64_t synthetic_cap = 100000;             // oldest kept samples drop beyond this
};

struct AlRoundRecord {
    int round = 0;  // 1-based
    std::vector<std::string> selected_real;
    std::vector<std::vector<std::string>> kept_synthetic;  // per class index
    double val_auc_before = 0;
    double val_auc_after = 0;
    int64_t labels_consumed = 0;  // cumulative, including the initial pool
    double wall_seconds = 0;
};

// everything a run needs besides the manifest and the starting classifier
struct AlJob {
    const seg::SegmenterNet* segmenter = nullptr;  // gan strategies need it
    const cagan::CaganModel* gan = nullptr;        // cagan | plain_gan | no_bnn_entropy
    AlScheduleConfig schedule;
    cls::FinetuneHyper finetune;
    unc::McConfig scoring;  // BNN passes/reduce; entropy strategies ignore passes
    std::string strategy = "cagan";  // cagan|standard_da|plain_gan|no_bnn_entropy|random_select
    double perturb_magnitude = 0.1;
    uint64_t seed = 7;
    std::string out_dir;  // empty: in-memory only
    bool resume = false;  // continue a run found in out_dir instead of refusing
};

struct AlResult {
    cls::Classifier classifier;
    std::vector<AlRoundRecord> trail;
    int64_t initial_pool = 0;
    std::string stop_reason;  // stable | pool_exhausted | max_rounds | gain_below_threshold
};

// the selection/augment/finetune loop; deterministic under job.seed
AlResult run_al(const data::DatasetManifest& m, const cls::Classifier& init, const AlJob& job);

// rotation [-15deg,15deg], translation up to 10% of the side, coin-flip
// horizontal mirror; labels and patient follow the base sample
std::vector<data::Sample> augment_standard(const std::vector<data::Sample>& samples,
                                           int per_sample_count, uint64_t seed);

// one transformed copy: bilinear image warp, nearest-neighbour mask warp,
// zero fill outside the frame; theta=dx=dy=0 without flip is a pixel copy
data::Sample warp_sample(const data::Sample& base, double theta, double dx, double dy, bool flip,
                         const std::string& new_id);

// true iff the last `w` successive changes all stayed within eps
bool stopping_check(const std::vector<double>& auc_history, double eps, int w);

// trail round trip for run directories
void write_trail(const std::string& path, const AlResult& r, const AlJob& job);
AlResult read_trail(const std::string& path);  // classifier left empty

}  // namespace caal::al
