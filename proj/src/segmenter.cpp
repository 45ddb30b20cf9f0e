#include "caal/segmenter.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "caal/ops.hpp"

namespace caal::seg {

namespace fs = std::filesystem;
using nlohmann::json;

SegmenterNet::SegmenterNet(const SegmenterSpec& spec, uint64_t init_seed) : spec_(spec) {
    if (spec.side < 32 || spec.side % 8 != 0)
        throw ConfigError("segmenter: side must be >= 32 and divisible by 8, got " +
                          std::to_string(spec.side));
    if (spec.filters < 1 || spec.z_dim < 1) throw ConfigError("segmenter: filters/z_dim must be positive");
    Rng rng(init_seed);
    int f = spec.filters;
    int bs = spec.side / 8;  // bottleneck side after three pools
    int flat = f * bs * bs;
    c1_ = nn::Conv2d(ps_, "enc1", 1, f, 3, 1, 1, rng);
    c2_ = nn::Conv2d(ps_, "enc2", f, f, 3, 1, 1, rng);
    c3_ = nn::Conv2d(ps_, "enc3", f, f, 3, 1, 1, rng);
    c4_ = nn::Conv2d(ps_, "enc4", f, f, 3, 1, 1, rng);
    fc_enc_ = nn::Linear(ps_, "fc_enc", flat, spec.z_dim, rng, 1.0);
    fc_dec_ = nn::Linear(ps_, "fc_dec", spec.z_dim, flat, rng);
    // decoder convs see the upsampled features concatenated with the
    // same-scale encoder features
    d1_ = nn::Conv2d(ps_, "dec1", 2 * f, f, 3, 1, 1, rng);
    d2_ = nn::Conv2d(ps_, "dec2", 2 * f, f, 3, 1, 1, rng);
    d3_ = nn::Conv2d(ps_, "dec3", 2 * f, f, 3, 1, 1, rng);
    d4_ = nn::Conv2d(ps_, "dec4", 2 * f, f, 3, 1, 1, rng);
    head_ = nn::Conv2d(ps_, "head", f, 1, 1, 1, 0, rng, 1.0);
}

SegmenterNet::Out SegmenterNet::forward(const Var& x) const {
    if (x.shape().size() != 4 || x.shape()[1] != 1 || x.shape()[2] != spec_.side ||
        x.shape()[3] != spec_.side)
        throw ShapeError("segmenter forward: want (N,1," + std::to_string(spec_.side) + "," +
                         std::to_string(spec_.side) + "), got " + x.val().shape_str());
    int n = x.shape()[0];
    int f = spec_.filters, bs = spec_.side / 8;

    Var e1 = ops::relu(c1_.forward(x));
    Var e2 = ops::relu(c2_.forward(ops::avg_pool2(e1)));
    Var e3 = ops::relu(c3_.forward(ops::avg_pool2(e2)));
    Var e4 = ops::relu(c4_.forward(ops::avg_pool2(e3)));

    Var z = fc_enc_.forward(ops::reshape(e4, {n, f * bs * bs}));
    Var g = ops::relu(fc_dec_.forward(z));
    Var h = ops::reshape(g, {n, f, bs, bs});

    h = ops::relu(d1_.forward(ops::concat_ch({h, e4})));
    h = ops::upsample2(h);
    h = ops::relu(d2_.forward(ops::concat_ch({h, e3})));
    h = ops::upsample2(h);
    h = ops::relu(d3_.forward(ops::concat_ch({h, e2})));
    h = ops::upsample2(h);
    h = ops::relu(d4_.forward(ops::concat_ch({h, e1})));
    return {head_.forward(h), z};
}

namespace {

// (B,1,S,S) image batch / mask batch from samples[idx[first..last)]
Tensor stack_field(const std::vector<data::Sample>& samples, const std::vector<size_t>& idx,
                   size_t first, size_t last, bool masks, int side) {
    int b = static_cast<int>(last - first);
    Tensor t = Tensor::zeros({b, 1, side, side});
    int64_t plane = static_cast<int64_t>(side) * side;
    for (size_t i = first; i < last; ++i) {
        const Tensor& src = masks ? samples[idx[i]].mask : samples[idx[i]].image;
        std::copy(src.data(), src.data() + plane,
                  t.data() + static_cast<int64_t>(i - first) * plane);
    }
    return t;
}

double mean_val_dice(const SegmenterNet& net, const std::vector<data::Sample>& val) {
    double acc = 0;
    for (const auto& s : val) {
        MaskLatent ml = extract_latent(net, s.image, LatentInput::image);
        acc += dice(ml.mask, s.mask);
    }
    return acc / static_cast<double>(val.size());
}

}  // namespace

SegmenterMetrics train_segmenter(SegmenterNet& net, const std::vector<data::Sample>& train,
                                 const std::vector<data::Sample>& val,
                                 const SegmenterHyper& hyper) {
    std::string missing;
    auto want_mask = [&](const std::vector<data::Sample>& ss) {
        for (const auto& s : ss)
            if (!s.mask.defined() || s.mask.size() == 0) missing += (missing.empty() ? "" : ", ") + s.id;
    };
    want_mask(train);
    want_mask(val);
    if (!missing.empty()) throw DataError("train_segmenter: samples without masks: " + missing);
    if (train.empty()) throw DataError("train_segmenter: empty training set");
    if (val.empty()) throw DataError("train_segmenter: empty validation set");
    if (hyper.epochs < 0 || hyper.batch < 1) throw ConfigError("train_segmenter: bad epochs/batch");

    int side = net.spec().side;
    nn::Adam opt(net.params().trainable_vars(), hyper.lr, hyper.beta1);
    Rng master(hyper.seed);

    SegmenterMetrics out;
    out.epochs = hyper.epochs;
    std::vector<size_t> idx(train.size());
    std::iota(idx.begin(), idx.end(), size_t{0});

    for (int e = 0; e < hyper.epochs; ++e) {
        Rng erng = master.fork("epoch", e);
        erng.shuffle(idx);
        double esum = 0;
        int ebatches = 0;
        for (size_t first = 0; first < idx.size(); first += static_cast<size_t>(hyper.batch)) {
            size_t last = std::min(idx.size(), first + static_cast<size_t>(hyper.batch));
            Var x = Var::leaf(stack_field(train, idx, first, last, false, side));
            Tensor y = stack_field(train, idx, first, last, true, side);
            auto fwd = net.forward(x);
            Var loss = ops::bce_with_logits(fwd.logit, y);
            auto grads = ag::grad(loss, net.params().trainable_vars());
            opt.step(grads);
            esum += loss.item();
            ++ebatches;
        }
        out.epoch_loss.push_back(esum / ebatches);
    }
    out.val_dice = mean_val_dice(net, val);
    return out;
}

void save_segmenter(const SegmenterNet& net, const SegmenterMetrics& metrics,
                    const std::string& dir) {
    fs::create_directories(dir);
    net.params().save_file(dir + "/weights.bin");
    const auto& sp = net.spec();
    json j{{"side", sp.side},
           {"filters", sp.filters},
           {"z_dim", sp.z_dim},
           {"threshold", sp.threshold}};
    std::ofstream(dir + "/spec.json") << j.dump(2) << "\n";
    json m{{"val_dice", metrics.val_dice},
           {"epochs", metrics.epochs},
           {"epoch_loss", metrics.epoch_loss}};
    std::ofstream(dir + "/metrics.json") << m.dump(2) << "\n";
}

SegmenterNet load_segmenter(const std::string& dir) {
    std::ifstream is(dir + "/spec.json");
    if (!is) throw DataError("load_segmenter: cannot open " + dir + "/spec.json");
    json j = json::parse(is, nullptr, false);
    if (j.is_discarded()) throw DataError("load_segmenter: invalid json in " + dir + "/spec.json");
    SegmenterSpec sp;
    sp.side = j.at("side").get<int>();
    sp.filters = j.at("filters").get<int>();
    sp.z_dim = j.at("z_dim").get<int>();
    sp.threshold = j.at("threshold").get<double>();
    SegmenterNet net(sp, 0);
    net.params().load_file(dir + "/weights.bin");
    return net;
}

MaskLatent extract_latent(const SegmenterNet& net, const Tensor& input, LatentInput kind) {
    const auto& sp = net.spec();
    if (input.dim() != 2 || input.shape(0) != sp.side || input.shape(1) != sp.side)
        throw ShapeError("extract_latent: want (" + std::to_string(sp.side) + "," +
                         std::to_string(sp.side) + "), got " + input.shape_str());
    ag::GradMode off(false);
    Tensor x4 = input.clone().reshaped({1, 1, sp.side, sp.side});
    auto fwd = net.forward(Var::leaf(x4));

    MaskLatent out;
    out.z = fwd.z.val().clone().reshaped({sp.z_dim});
    if (!out.z.all_finite()) throw NumericError("extract_latent: non-finite latent code");
    out.mask = Tensor::zeros({sp.side, sp.side});
    if (kind == LatentInput::image) {
        Tensor prob = ops::sigmoid(fwd.logit).val();
        for (int64_t i = 0; i < out.mask.size(); ++i) out.mask[i] = prob[i] > sp.threshold ? 1.0 : 0.0;
        out.source = "predicted";
    } else {
        for (int64_t i = 0; i < out.mask.size(); ++i) out.mask[i] = input[i] > 0.5 ? 1.0 : 0.0;
        out.source = "ground_truth";
    }
    return out;
}

namespace {

// 8-connected component labels; returns count, fills labels with 0..count-1 or -1
int label_components(const Tensor& mask, std::vector<int>& labels) {
    int h = mask.shape(0), w = mask.shape(1);
    labels.assign(static_cast<size_t>(h) * w, -1);
    int count = 0;
    std::vector<int> stack;
    for (int s = 0; s < h * w; ++s) {
        if (mask[s] <= 0.5 || labels[static_cast<size_t>(s)] != -1) continue;
        labels[static_cast<size_t>(s)] = count;
        stack.assign(1, s);
        while (!stack.empty()) {
            int cur = stack.back();
            stack.pop_back();
            int cy = cur / w, cx = cur % w;
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    int ny = cy + dy, nx = cx + dx;
                    if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
                    int ni = ny * w + nx;
                    if (mask[ni] > 0.5 && labels[static_cast<size_t>(ni)] == -1) {
                        labels[static_cast<size_t>(ni)] = count;
                        stack.push_back(ni);
                    }
                }
        }
        ++count;
    }
    return count;
}

double bspline_closed(const std::vector<double>& c, double t) {
    int k = static_cast<int>(c.size());
    int i = static_cast<int>(std::floor(t));
    double u = t - i;
    i = ((i % k) + k) % k;
    double u2 = u * u, u3 = u2 * u;
    double b0 = (1 - u) * (1 - u) * (1 - u) / 6.0;
    double b1 = (3 * u3 - 6 * u2 + 4) / 6.0;
    double b2 = (-3 * u3 + 3 * u2 + 3 * u + 1) / 6.0;
    double b3 = u3 / 6.0;
    return b0 * c[static_cast<size_t>((i + k - 1) % k)] + b1 * c[static_cast<size_t>(i)] +
           b2 * c[static_cast<size_t>((i + 1) % k)] + b3 * c[static_cast<size_t>((i + 2) % k)];
}

// control points of the closed cubic b-spline that interpolates r at the
// knots: cyclic tridiagonal system (c[j-1] + 4 c[j] + c[j+1]) / 6 = r[j].
// Without this the curve shrinks toward the control polygon and even tiny
// jitters lose several IoU points against the parent mask.
std::vector<double> interp_controls(const std::vector<double>& r) {
    int k = static_cast<int>(r.size());
    std::vector<std::vector<double>> a(static_cast<size_t>(k),
                                       std::vector<double>(static_cast<size_t>(k), 0.0));
    std::vector<double> c(r);
    for (int j = 0; j < k; ++j) {
        a[static_cast<size_t>(j)][static_cast<size_t>((j + k - 1) % k)] = 1.0 / 6;
        a[static_cast<size_t>(j)][static_cast<size_t>(j)] = 4.0 / 6;
        a[static_cast<size_t>(j)][static_cast<size_t>((j + 1) % k)] = 1.0 / 6;
    }
    // dense gaussian elimination with partial pivoting; k is ~12
    for (int col = 0; col < k; ++col) {
        int piv = col;
        for (int row = col + 1; row < k; ++row)
            if (std::fabs(a[static_cast<size_t>(row)][static_cast<size_t>(col)]) >
                std::fabs(a[static_cast<size_t>(piv)][static_cast<size_t>(col)]))
                piv = row;
        std::swap(a[static_cast<size_t>(col)], a[static_cast<size_t>(piv)]);
        std::swap(c[static_cast<size_t>(col)], c[static_cast<size_t>(piv)]);
        double d = a[static_cast<size_t>(col)][static_cast<size_t>(col)];
        for (int row = col + 1; row < k; ++row) {
            double f = a[static_cast<size_t>(row)][static_cast<size_t>(col)] / d;
            if (f == 0) continue;
            for (int j = col; j < k; ++j)
                a[static_cast<size_t>(row)][static_cast<size_t>(j)] -=
                    f * a[static_cast<size_t>(col)][static_cast<size_t>(j)];
            c[static_cast<size_t>(row)] -= f * c[static_cast<size_t>(col)];
        }
    }
    for (int col = k - 1; col >= 0; --col) {
        double s = c[static_cast<size_t>(col)];
        for (int j = col + 1; j < k; ++j)
            s -= a[static_cast<size_t>(col)][static_cast<size_t>(j)] * c[static_cast<size_t>(j)];
        c[static_cast<size_t>(col)] = s / a[static_cast<size_t>(col)][static_cast<size_t>(col)];
    }
    return c;
}

// one jittered re-rasterization of every component; star-shaped approximation
// around each component centroid
Tensor raster_perturb(const Tensor& mask, const std::vector<int>& labels, int ncomp, Rng& rng,
                      double magnitude, int knots) {
    int h = mask.shape(0), w = mask.shape(1);
    Tensor out = Tensor::zeros({h, w});
    std::vector<double> cy(static_cast<size_t>(ncomp), 0), cx(static_cast<size_t>(ncomp), 0);
    std::vector<double> npix(static_cast<size_t>(ncomp), 0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            int l = labels[static_cast<size_t>(y) * w + x];
            if (l < 0) continue;
            cy[static_cast<size_t>(l)] += y;
            cx[static_cast<size_t>(l)] += x;
            npix[static_cast<size_t>(l)] += 1;
        }
    for (int l = 0; l < ncomp; ++l) {
        cy[static_cast<size_t>(l)] /= npix[static_cast<size_t>(l)];
        cx[static_cast<size_t>(l)] /= npix[static_cast<size_t>(l)];
    }

    for (int l = 0; l < ncomp; ++l) {
        double ly = cy[static_cast<size_t>(l)], lx = cx[static_cast<size_t>(l)];
        double reach = 0;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                if (labels[static_cast<size_t>(y) * w + x] == l)
                    reach = std::max(reach, std::hypot(y - ly, x - lx));
        // star profile: cast a ray at each knot angle (bin centers) and take
        // the outermost pixel of this component along it
        std::vector<double> rad(static_cast<size_t>(knots), -1.0);
        for (int j = 0; j < knots; ++j) {
            double ang = -M_PI + (j + 0.5) * 2 * M_PI / knots;
            double sy = std::sin(ang), sx = std::cos(ang);
            for (double s = reach + 0.5; s >= 0; s -= 0.25) {
                int iy = static_cast<int>(std::lround(ly + s * sy));
                int ix = static_cast<int>(std::lround(lx + s * sx));
                if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                if (labels[static_cast<size_t>(iy) * w + ix] == l) {
                    rad[static_cast<size_t>(j)] = s + 0.5;
                    break;
                }
            }
        }
        // rays that miss (concave spots, centroid outside): copy circularly
        // nearest hit
        for (int j = 0; j < knots; ++j) {
            if (rad[static_cast<size_t>(j)] >= 0) continue;
            double fill = 0.5;
            for (int d = 1; d < knots; ++d) {
                double a = rad[static_cast<size_t>((j + d) % knots)];
                double b = rad[static_cast<size_t>(((j - d) % knots + knots) % knots)];
                if (a >= 0 || b >= 0) {
                    fill = a >= 0 && b >= 0 ? 0.5 * (a + b) : std::max(a, b);
                    break;
                }
            }
            rad[static_cast<size_t>(j)] = fill;
        }
        std::vector<double> target(static_cast<size_t>(knots));
        for (int j = 0; j < knots; ++j)
            target[static_cast<size_t>(j)] =
                rad[static_cast<size_t>(j)] * (1.0 + magnitude * rng.uniform(-1.0, 1.0));
        std::vector<double> ctrl = interp_controls(target);
        double rmax = 0;
        for (double v : ctrl) rmax = std::max(rmax, std::fabs(v));
        // the spline is a convex combination of controls, so rmax bounds it
        int y0 = std::max(0, static_cast<int>(std::floor(cy[static_cast<size_t>(l)] - rmax - 1)));
        int y1 = std::min(h - 1, static_cast<int>(std::ceil(cy[static_cast<size_t>(l)] + rmax + 1)));
        int x0 = std::max(0, static_cast<int>(std::floor(cx[static_cast<size_t>(l)] - rmax - 1)));
        int x1 = std::min(w - 1, static_cast<int>(std::ceil(cx[static_cast<size_t>(l)] + rmax + 1)));
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x) {
                double dy = y - cy[static_cast<size_t>(l)], dx = x - cx[static_cast<size_t>(l)];
                double r = std::hypot(dy, dx);
                if (r > rmax) continue;
                // knot j sits at the center of angular bin j
                double t = (std::atan2(dy, dx) + M_PI) / (2 * M_PI) * knots - 0.5;
                if (r <= bspline_closed(ctrl, t)) out[static_cast<int64_t>(y) * w + x] = 1.0;
            }
    }
    return out;
}

double fg_area(const Tensor& m) {
    double a = 0;
    for (int64_t i = 0; i < m.size(); ++i) a += m[i] > 0.5 ? 1.0 : 0.0;
    return a;
}

}  // namespace

std::vector<MaskLatent> perturb_mask(const SegmenterNet& net, const MaskLatent& parent,
                                     const std::string& parent_id, double magnitude, int count,
                                     uint64_t seed, int control_points) {
    if (magnitude < 0.0 || magnitude > 1.0)
        throw DomainError("perturb_mask: magnitude must be in [0,1]");
    if (count < 1) throw DomainError("perturb_mask: count must be >= 1");
    if (control_points < 4) throw ConfigError("perturb_mask: need at least 4 control points");
    if (count > 200) {
        warnf("perturb_mask: count " + std::to_string(count) + " clamped to 200");
        count = 200;
    }
    const Tensor& pm = parent.mask;
    if (!pm.defined() || pm.dim() != 2) throw ShapeError("perturb_mask: mask must be 2-D");
    double parent_area = fg_area(pm);
    if (parent_area == 0) throw DomainError("perturb_mask: empty mask");

    std::vector<int> labels;
    int ncomp = label_components(pm, labels);
    Rng master(seed);
    std::vector<MaskLatent> out;
    out.reserve(static_cast<size_t>(count));

    if (magnitude == 0.0) {
        MaskLatent base = extract_latent(net, pm, LatentInput::mask);
        for (int i = 0; i < count; ++i) {
            MaskLatent ml;
            ml.mask = base.mask.clone();
            ml.z = base.z;
            ml.source = "perturbed";
            ml.parent_mask_id = parent_id;
            out.push_back(std::move(ml));
        }
        return out;
    }

    double lo = parent_area * (1.0 - 3.0 * magnitude);
    double hi = parent_area * (1.0 + 3.0 * magnitude);
    for (int i = 0; i < count; ++i) {
        Rng rng = master.fork("mask", i);
        Tensor cand;
        bool ok = false;
        double m = magnitude;
        for (int attempt = 0; attempt < 8 && !ok; ++attempt, m *= 0.6) {
            cand = raster_perturb(pm, labels, ncomp, rng, m, control_points);
            double a = fg_area(cand);
            ok = a >= lo && a <= hi && component_count(cand) == ncomp;
        }
        if (!ok) cand = pm.clone();  // give up gracefully; parent satisfies every bound
        MaskLatent ml = extract_latent(net, cand, LatentInput::mask);
        ml.source = "perturbed";
        ml.parent_mask_id = parent_id;
        out.push_back(std::move(ml));
    }
    return out;
}

double dice(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "dice");
    double inter = 0, sa = 0, sb = 0;
    for (int64_t i = 0; i < a.size(); ++i) {
        bool fa = a[i] > 0.5, fb = b[i] > 0.5;
        inter += fa && fb;
        sa += fa;
        sb += fb;
    }
    if (sa + sb == 0) return 1.0;
    return 2.0 * inter / (sa + sb);
}

double iou(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "iou");
    double inter = 0, uni = 0;
    for (int64_t i = 0; i < a.size(); ++i) {
        bool fa = a[i] > 0.5, fb = b[i] > 0.5;
        inter += fa && fb;
        uni += fa || fb;
    }
    if (uni == 0) return 1.0;
    return inter / uni;
}

int component_count(const Tensor& mask) {
    std::vector<int> labels;
    return label_components(mask, labels);
}

}  // namespace caal::seg
