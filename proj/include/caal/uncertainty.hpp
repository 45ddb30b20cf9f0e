#pragma once

#include <string>
#include <vector>

#include "caal/classifier.hpp"

namespace caal::unc {

struct McConfig {
    int passes = 20;              // stochastic forward passes per sample
    std::string reduce = "mean";  // mean | max over classes
    bool epistemic_only = false;  // skip the aleatoric head
    uint64_t seed = 11;
};

// raw per-pass outputs with the feature mask live at inference
struct McTrace {
    Tensor mean;  // (T,N,C) per-pass probabilities
    Tensor var;   // (T,N,C) per-pass predicted variances; zero when epistemic_only
};
McTrace mc_predict(const cls::Classifier& c, const std::vector<data::Sample>& samples,
                   const McConfig& cfg);

// total predictive variance per class: spread of the pass means plus the
// average predicted noise; (T,N,C) -> (N,C)
Tensor combine_variance(const Tensor& means, const Tensor& vars);

struct UncertaintyEstimate {
    std::string id;
    double score = 0;
    std::vector<double> per_class;
};
std::vector<UncertaintyEstimate> estimate_uncertainty(const cls::Classifier& c,
                                                      const std::vector<data::Sample>& samples,
                                                      const McConfig& cfg);

// most informative first, cut to n_inf; ties broken by a seeded shuffle so
// reruns with the same seed agree
struct RankResult {
    std::vector<std::string> order;
    bool truncated = false;  // fewer candidates than requested
};
RankResult rank_by_informativeness(const std::vector<UncertaintyEstimate>& est, int n_inf,
                                   uint64_t tie_seed);

// predictive entropy in nats; exclusive rows use Shannon entropy, multilabel
// rows average the per-class binary entropies
double entropy_score(const std::vector<double>& probs, const std::string& label_mode);

}  // namespace caal::unc
