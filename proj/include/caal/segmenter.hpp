#pragma once

#include <string>
#include <vector>

#include "caal/data.hpp"
#include "caal/nn.hpp"

namespace caal::seg {

using ag::Var;

// binary shape mask plus the bottleneck code describing it
struct MaskLatent {
    Tensor mask;                 // (S,S), values exactly 0 or 1
    Tensor z;                    // (z_dim)
    std::string source;          // ground_truth | predicted | perturbed
    std::string parent_mask_id;  // set when source == perturbed
};

struct SegmenterSpec {
    int side = 64;
    int filters = 64;
    int z_dim = 256;
    double threshold = 0.5;
};

// Encoder: 4 convs (3x3) with stride-2 pooling between them, then a fully
// connected bottleneck of width z_dim. Decoder mirrors it with nearest
// upsampling, u-net skip concatenation at each scale, and a 1x1 logit head.
// z is the bottleneck activation: on mask inputs it is a pure function of the
// encoder, skips play no part in it.
class SegmenterNet {
public:
    SegmenterNet() = default;
    SegmenterNet(const SegmenterSpec& spec, uint64_t init_seed);

    struct Out {
        Var logit;  // (N,1,S,S)
        Var z;      // (N,z_dim)
    };
    Out forward(const Var& x) const;  // x: (N,1,S,S)

    const SegmenterSpec& spec() const { return spec_; }
    nn::ParamStore& params() { return ps_; }
    const nn::ParamStore& params() const { return ps_; }

private:
    SegmenterSpec spec_;
    nn::ParamStore ps_;
    nn::Conv2d c1_, c2_, c3_, c4_;  // encoder
    nn::Linear fc_enc_, fc_dec_;    // bottleneck
    nn::Conv2d d1_, d2_, d3_, d4_;  // decoder
    nn::Conv2d head_;
};

struct SegmenterHyper {
    double lr = 1e-3;
    double beta1 = 0.9;
    int epochs = 12;
    int batch = 8;
    uint64_t seed = 7;
};

struct SegmenterMetrics {
    std::vector<double> epoch_loss;  // mean per-pixel bce per epoch
    double val_dice = 0.0;
    int epochs = 0;
};

// Per-pixel bce on ground-truth masks; deterministic under hyper.seed.
// epochs=0 leaves the net at initialization and just records baseline dice.
SegmenterMetrics train_segmenter(SegmenterNet& net, const std::vector<data::Sample>& train,
                                 const std::vector<data::Sample>& val,
                                 const SegmenterHyper& hyper);

// checkpoint directory layout: weights.bin + spec.json + metrics.json
void save_segmenter(const SegmenterNet& net, const SegmenterMetrics& metrics,
                    const std::string& dir);
SegmenterNet load_segmenter(const std::string& dir);

enum class LatentInput { image, mask };

// z is always the bottleneck activation of the input. For images the mask is
// the thresholded decoder output; a supplied mask passes through unchanged.
MaskLatent extract_latent(const SegmenterNet& net, const Tensor& input, LatentInput kind);

// Contour jitter: per connected component, fit a star-shaped radius profile
// around the centroid, displace the control radii by ~ magnitude x radius,
// smooth with a periodic cubic b-spline and re-rasterize. Keeps the component
// count of the parent (damped retries, parent copy as last resort) and the
// foreground area within +-3*magnitude of the parent's.
std::vector<MaskLatent> perturb_mask(const SegmenterNet& net, const MaskLatent& parent,
                                     const std::string& parent_id, double magnitude, int count,
                                     uint64_t seed, int control_points = 12);

// mask metrics; inputs binarized at 0.5, empty-vs-empty counts as a match
double dice(const Tensor& a, const Tensor& b);
double iou(const Tensor& a, const Tensor& b);
int component_count(const Tensor& mask);  // 8-connectivity

}  // namespace caal::seg
