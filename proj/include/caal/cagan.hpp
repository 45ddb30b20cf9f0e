#pragma once

#include <array>
#include <functional>
#include <string>
#include <vector>

#include "caal/data.hpp"
#include "caal/nn.hpp"
#include "caal/segmenter.hpp"

namespace caal::cagan {

using ag::Var;

struct LossWeights {
    double lambda_cls = 1.0;
    double lambda_content = 10.0;
    double lambda_gp = 10.0;
    double w_perc = 1.0;
    double w_mse = 1.0;
    double w_nmi = 1.0;
    double nmi_eps = 1e-4;
    int nmi_bins = 64;
};

struct CaganSpec {
    int side = 64;
    int num_classes = 2;
    int z_dim = 256;
    int g_width = 64;
    int residual_blocks = 3;
    std::vector<int> d_widths{64, 128, 256, 512, 1024, 1024};
    std::string d_norm = "instance";  // instance | batch | none
    std::string label_mode = "exclusive";
};

// frozen feature map used by the perceptual part of the content loss;
// implementations must not expose trainable parameters to the caller
struct PerceptualExtractor {
    virtual ~PerceptualExtractor() = default;
    virtual Var features(const Var& images) const = 0;  // (N,1,S,S) -> (N,...)
};

// image-to-image translator conditioned on the mask code z and a target
// class vector, both spatially replicated and concatenated to the input
class GeneratorNet {
public:
    GeneratorNet() = default;
    GeneratorNet(const CaganSpec& spec, uint64_t init_seed);
    // x (N,1,S,S), z (N,z_dim), cls (N,C) -> image in [0,1]
    Var forward(const Var& x, const Tensor& z_rows, const Tensor& cls_rows, nn::Ctx& ctx) const;
    nn::ParamStore& params() { return ps_; }
    const nn::ParamStore& params() const { return ps_; }

private:
    CaganSpec spec_;
    nn::ParamStore ps_;
    nn::Conv2d down_[3];
    nn::BatchNorm dn_[3];
    std::vector<nn::Conv2d> rc1_, rc2_;
    std::vector<nn::BatchNorm> rn1_, rn2_;
    nn::TConv2d up_[3];
    nn::BatchNorm un_[3];
    nn::Conv2d out_;
};

// critic trunk shared by a patch realness head and a dense class head;
// never sees labels or z, class awareness comes only from its own head
class DiscriminatorNet {
public:
    DiscriminatorNet() = default;
    DiscriminatorNet(const CaganSpec& spec, uint64_t init_seed);
    struct Out {
        Var src;  // (N,1,hp,wp) patch realness map
        Var cls;  // (N,C) class logits
    };
    Out forward(const Var& x, nn::Ctx& ctx) const;
    int patch_side() const { return patch_side_; }
    nn::ParamStore& params() { return ps_; }
    const nn::ParamStore& params() const { return ps_; }

private:
    CaganSpec spec_;
    int patch_side_ = 0;
    nn::ParamStore ps_;
    std::vector<nn::Conv2d> convs_;
    std::vector<nn::InstanceNorm> inorms_;
    std::vector<nn::BatchNorm> bnorms_;
    nn::Conv2d src_head_;
    nn::Linear cls_head_;
};

// ---- loss pieces -----------------------------------------------------------

// interpolate real/fake pairs at per-sample eps, differentiate the critic's
// per-sample mean response, and penalize gradient norms away from 1. The eps
// vector is injected so closed-form tests can pin the interpolates.
Var gradient_penalty(const std::function<Var(const Var&)>& d_src, const Tensor& real,
                     const Tensor& fake, const Tensor& eps);

// mean(d_real) - mean(d_fake) - lambda_gp * gp
Var adv_loss_wgan_gp(const Var& d_src_real, const Var& d_src_fake, const Var& gp_term,
                     const LossWeights& w);

// exclusive: softmax NLL of the true class; multilabel: mean per-class bce
Var cls_loss_real(const Var& logits, const Tensor& labels, const std::string& mode);
Var cls_loss_fake(const Var& logits, const Tensor& targets, const std::string& mode);

// histogram mutual information of two equal-shape images, quantized to `bins`
// levels in [0,1]; (H(x)+H(y))/H(x,y), range [1,2]; both-constant pairs
// define NMI := 2 (identical degenerate images are maximally similar)
double nmi_value(const Tensor& x, const Tensor& y, int bins);

// w_perc * mse(feat(a), feat(b)) + w_mse * mse(a, b) + w_nmi * mean 1/(NMI+eps)
// the NMI term is histogram-based and enters as a value only (no gradient)
Var content_loss(const Var& a, const Var& b, const PerceptualExtractor* feat,
                 const LossWeights& w);

// ---- training & generation -------------------------------------------------

struct CaganModel {
    CaganSpec spec;
    LossWeights weights;
    GeneratorNet G;
    DiscriminatorNet D;
    int64_t iter = 0;
    uint64_t seed = 7;
    bool diverged = false;
    // rows: iter, L_D, L_G, L_adv, L_cls_r, L_cls_f, L_content, gp
    std::vector<std::array<double, 8>> history;

    CaganModel() = default;
    CaganModel(const CaganSpec& spec, const LossWeights& weights, uint64_t seed);
};

struct CaganHyper {
    double lr = 1e-3;
    double beta1 = 0.93;
    double beta2 = 0.999;
    int64_t iters = 100000;  // hard cap
    int batch = 8;
    int n_critic = 5;
    uint64_t seed = 7;
    int checkpoint_every = 500;
    std::string out_dir;  // empty: keep everything in memory
    std::string z_source = "mix";  // gt | perturbed | mix
    double perturb_magnitude = 0.1;
};

// Alternating critic/generator updates (n_critic:1), WGAN-GP adversary plus
// class and content terms. Resumes from model.iter when positive; history
// row per generator step. On a non-finite loss the last checkpoint is
// restored and the model is flagged diverged.
void train_cagan(CaganModel& m, const std::vector<data::Sample>& samples,
                 const seg::SegmenterNet& segnet, const PerceptualExtractor* feat,
                 const CaganHyper& hy);

void save_cagan(const CaganModel& m, const std::string& dir);
CaganModel load_cagan(const std::string& dir);

// one synthetic sample of the requested class; deterministic per inputs
data::Sample generate(const CaganModel& m, const data::Sample& base,
                      const seg::MaskLatent& ml, const std::vector<int>& target_labels,
                      const std::string& new_id);

}  // namespace caal::cagan
