#pragma once

#include <string>
#include <vector>

#include "caal/cagan.hpp"
#include "caal/data.hpp"
#include "caal/nn.hpp"

namespace caal::cls {

using ag::Var;

struct ClassifierSpec {
    std::string backbone = "toy_cnn";
    int side = 64;
    int num_classes = 2;
    int width = 16;  // first block; deeper blocks double then hold
    std::string label_mode = "exclusive";
    double mask_rate = 0.2;   // stochastic masking on the pooled features
    bool variance_head = true;
};

// compact task net: four conv blocks with 2x pooling, global average pool,
// masked dense head for class logits plus an aleatoric log-variance head
class ToyCnn {
public:
    ToyCnn() = default;
    ToyCnn(const ClassifierSpec& spec, uint64_t init_seed);
    struct Out {
        Var logits;   // (N,C)
        Var log_var;  // (N,C); undefined when the variance head is disabled
    };
    Out forward(const Var& x, nn::Ctx& ctx) const;
    // feature map after `layer` blocks (1-based), frozen-view for perceptual use
    Var feature_map(const Var& x, int layer, nn::Ctx& ctx) const;
    const ClassifierSpec& spec() const { return spec_; }
    nn::ParamStore& params() { return ps_; }
    const nn::ParamStore& params() const { return ps_; }

private:
    ClassifierSpec spec_;
    nn::ParamStore ps_;
    nn::Conv2d conv_[4];
    nn::BatchNorm bn_[4];
    nn::Dropout drop_;
    nn::Linear head_;
    nn::Linear var_head_;
    int feat_dim_ = 0;
};

struct Classifier {
    ClassifierSpec spec;
    ToyCnn net;
    int round = -1;  // AL round that produced these weights; -1 = pilot

    Classifier() = default;
    Classifier(const ClassifierSpec& spec, uint64_t init_seed);
};

// rejects saves that would move round provenance backwards in `dir`
void save_classifier(const Classifier& c, const std::string& dir);
Classifier load_classifier(const std::string& dir);

// fresh parameter buffers; fine-tuning the copy leaves the original alone
Classifier clone_classifier(const Classifier& c);

struct FinetuneHyper {
    double lr = 1e-3;
    int epochs = 8;
    int batch = 16;
    std::vector<double> class_weights;  // empty: unweighted
    std::string freeze = "none";        // none | backbone
    double var_weight = 1.0;            // aleatoric head fitting strength
    uint64_t seed = 7;
};

struct FinetuneMetrics {
    std::vector<double> epoch_loss;
    bool improved = true;
};

// supervised update on real + synthetic samples; epochs=0 is the identity
FinetuneMetrics finetune(Classifier& c, const std::vector<data::Sample>& samples,
                         const FinetuneHyper& hy);

// deterministic probabilities, masking off; exclusive rows sum to 1
Tensor predict_proba(const Classifier& c, const std::vector<data::Sample>& samples);

// rank-based AUC with midrank ties; single-class inputs are undefined, not an error
struct AucValue {
    double value = 0.5;
    bool defined = false;
};
AucValue auc(const std::vector<double>& scores, const std::vector<int>& labels);

struct AucReport {
    std::string split;
    int64_t n = 0;
    std::vector<double> per_class;
    std::vector<bool> defined;
    std::vector<int64_t> positives;
    std::vector<int64_t> negatives;
    double macro = 0.0;  // over defined classes only
};

// restricts which splits an evaluation phase may touch; violations are bugs
struct SplitGuard {
    std::vector<std::string> allowed;
    bool permits(const std::string& split) const;
};

AucReport evaluate(const Classifier& c, const data::DatasetManifest& m, const std::string& split,
                   const SplitGuard* guard = nullptr);
AucReport evaluate_samples(const Classifier& c, const std::vector<data::Sample>& samples,
                           const std::string& split_tag);

// per-split evaluation tally for leakage audits
int64_t evaluate_count(const std::string& split);
void reset_evaluate_counts();

void write_auc_report_json(const AucReport& r, const std::string& path);
AucReport read_auc_report_json(const std::string& path);
void write_auc_report_csv(const AucReport& r, const std::string& path);

// frozen intermediate feature map of a task classifier, for the content loss
struct CnnFeatures : cagan::PerceptualExtractor {
    const Classifier* c = nullptr;
    int layer = 2;
    CnnFeatures(const Classifier* c, int layer) : c(c), layer(layer) {}
    Var features(const Var& images) const override;
};

}  // namespace caal::cls
