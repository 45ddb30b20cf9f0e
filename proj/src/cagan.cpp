#include "caal/cagan.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include <json.hpp>

#include "caal/csvio.hpp"

namespace caal::cagan {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void check_spec(const CaganSpec& sp) {
    if (sp.side < 32 || sp.side % 8 != 0)
        throw ConfigError("cagan: side must be >= 32 and divisible by 8");
    if (sp.num_classes < 2) throw ConfigError("cagan: num_classes must be >= 2");
    if (sp.z_dim < 1) throw ConfigError("cagan: z_dim must be positive");
    if (sp.g_width < 1) throw ConfigError("cagan: g_width must be positive");
    if (sp.residual_blocks < 0) throw ConfigError("cagan: residual_blocks must be >= 0");
    if (sp.d_widths.size() != 6) throw ConfigError("cagan: d_widths must list 6 layer widths");
    for (int w : sp.d_widths)
        if (w < 1) throw ConfigError("cagan: d_widths entries must be positive");
    if (sp.d_norm != "instance" && sp.d_norm != "batch" && sp.d_norm != "none")
        throw ConfigError("cagan: d_norm must be instance|batch|none");
    if (sp.label_mode != "exclusive" && sp.label_mode != "multilabel")
        throw ConfigError("cagan: label_mode must be exclusive|multilabel");
}

void check_weights(const LossWeights& w) {
    if (w.lambda_cls < 0 || w.lambda_content < 0 || w.lambda_gp < 0 || w.w_perc < 0 ||
        w.w_mse < 0 || w.w_nmi < 0)
        throw ConfigError("cagan: loss weights must be nonnegative");
    if (w.nmi_eps <= 0) throw ConfigError("cagan: nmi_eps must be positive");
    if (w.nmi_bins < 2) throw ConfigError("cagan: nmi_bins must be >= 2");
}

constexpr double kLeakySlope = 0.2;
constexpr double kLeakyGain = 2.0 / (1.0 + kLeakySlope * kLeakySlope);

}  // namespace

// ---- generator --------------------------------------------------------------

GeneratorNet::GeneratorNet(const CaganSpec& spec, uint64_t init_seed) : spec_(spec) {
    check_spec(spec);
    Rng r = Rng(init_seed).fork("g");
    const int w = spec.g_width;
    const int ch[4] = {1 + spec.z_dim + spec.num_classes, w, 2 * w, 4 * w};
    for (int i = 0; i < 3; ++i) {
        std::string nm = "down" + std::to_string(i + 1);
        down_[i] = nn::Conv2d(ps_, nm, ch[i], ch[i + 1], 4, 2, 1, r);
        dn_[i] = nn::BatchNorm(ps_, nm + ".bn", ch[i + 1]);
    }
    const int c = 4 * w;
    for (int b = 0; b < spec.residual_blocks; ++b) {
        std::string nm = "res" + std::to_string(b + 1);
        rn1_.push_back(nn::BatchNorm(ps_, nm + ".n1", c));
        rc1_.push_back(nn::Conv2d(ps_, nm + ".c1", c, c, 3, 1, 1, r));
        rn2_.push_back(nn::BatchNorm(ps_, nm + ".n2", c));
        rc2_.push_back(nn::Conv2d(ps_, nm + ".c2", c, c, 3, 1, 1, r));
    }
    const int uw[4] = {4 * w, 2 * w, w, w};
    for (int i = 0; i < 3; ++i) {
        std::string nm = "up" + std::to_string(i + 1);
        up_[i] = nn::TConv2d(ps_, nm, uw[i], uw[i + 1], 4, 2, 1, r);
        un_[i] = nn::BatchNorm(ps_, nm + ".bn", uw[i + 1]);
    }
    out_ = nn::Conv2d(ps_, "out", w, 1, 3, 1, 1, r, 1.0);
}

Var GeneratorNet::forward(const Var& x, const Tensor& z_rows, const Tensor& cls_rows,
                          nn::Ctx& ctx) const {
    const int S = spec_.side;
    const auto& sh = x.shape();
    if (sh.size() != 4 || sh[1] != 1 || sh[2] != S || sh[3] != S)
        throw ShapeError("generator: input must be (N,1," + std::to_string(S) + "," +
                         std::to_string(S) + ")");
    const int n = sh[0];
    if (z_rows.shape() != std::vector<int>{n, spec_.z_dim})
        throw ShapeError("generator: z rows must be (N," + std::to_string(spec_.z_dim) + ")");
    if (cls_rows.shape() != std::vector<int>{n, spec_.num_classes})
        throw ShapeError("generator: class rows must be (N," + std::to_string(spec_.num_classes) +
                         ")");
    Var z = ops::broadcast_to(Var::leaf(z_rows.reshaped({n, spec_.z_dim, 1, 1})),
                              {n, spec_.z_dim, S, S});
    Var cl = ops::broadcast_to(Var::leaf(cls_rows.reshaped({n, spec_.num_classes, 1, 1})),
                               {n, spec_.num_classes, S, S});
    Var h = ops::concat_ch({x, z, cl});
    for (int i = 0; i < 3; ++i) h = ops::relu(dn_[i].forward(down_[i].forward(h), ctx));
    for (size_t b = 0; b < rc1_.size(); ++b) {
        // pre-activation residual: norm -> relu -> conv, twice, plus identity
        Var t = rc1_[b].forward(ops::relu(rn1_[b].forward(h, ctx)));
        t = rc2_[b].forward(ops::relu(rn2_[b].forward(t, ctx)));
        h = ops::add(h, t);
    }
    for (int i = 0; i < 3; ++i) h = ops::relu(un_[i].forward(up_[i].forward(h), ctx));
    return ops::sigmoid(out_.forward(h));
}

// ---- discriminator ----------------------------------------------------------

DiscriminatorNet::DiscriminatorNet(const CaganSpec& spec, uint64_t init_seed) : spec_(spec) {
    check_spec(spec);
    Rng r = Rng(init_seed).fork("d");
    int cur = spec.side, in = 1;
    for (int i = 0; i < 6; ++i) {
        const int out = spec.d_widths[static_cast<size_t>(i)];
        std::string nm = "c" + std::to_string(i + 1);
        // downsample while there is room, then keep refining at constant scale
        // so small sides still support six layers and a real patch map
        if (cur >= 8) {
            convs_.push_back(nn::Conv2d(ps_, nm, in, out, 4, 2, 1, r, kLeakyGain));
            cur /= 2;
        } else {
            convs_.push_back(nn::Conv2d(ps_, nm, in, out, 3, 1, 1, r, kLeakyGain));
        }
        if (i > 0) {  // critic convention: first layer runs unnormalized
            if (spec.d_norm == "instance")
                inorms_.push_back(nn::InstanceNorm(ps_, nm + ".in", out));
            else if (spec.d_norm == "batch")
                bnorms_.push_back(nn::BatchNorm(ps_, nm + ".bn", out));
        }
        in = out;
    }
    patch_side_ = cur;
    src_head_ = nn::Conv2d(ps_, "src", in, 1, 3, 1, 1, r, 1.0);
    cls_head_ = nn::Linear(ps_, "cls", in * cur * cur, spec.num_classes, r, 1.0);
}

DiscriminatorNet::Out DiscriminatorNet::forward(const Var& x, nn::Ctx& ctx) const {
    const int S = spec_.side;
    const auto& sh = x.shape();
    if (sh.size() != 4 || sh[1] != 1 || sh[2] != S || sh[3] != S)
        throw ShapeError("discriminator: input must be (N,1," + std::to_string(S) + "," +
                         std::to_string(S) + ")");
    Var h = x;
    for (size_t i = 0; i < convs_.size(); ++i) {
        h = convs_[i].forward(h);
        if (i > 0) {
            if (spec_.d_norm == "instance")
                h = inorms_[i - 1].forward(h);
            else if (spec_.d_norm == "batch")
                h = bnorms_[i - 1].forward(h, ctx);
        }
        h = ops::leaky_relu(h, kLeakySlope);
    }
    Var src = src_head_.forward(h);
    const int n = sh[0];
    const int flat = spec_.d_widths.back() * patch_side_ * patch_side_;
    Var cls = cls_head_.forward(ops::reshape(h, {n, flat}));
    return {src, cls};
}

// ---- loss pieces -------------------------------------------------------------

Var gradient_penalty(const std::function<Var(const Var&)>& d_src, const Tensor& real,
                     const Tensor& fake, const Tensor& eps) {
    if (!real.defined() || real.dim() < 1) throw ShapeError("gradient_penalty: empty real batch");
    if (real.shape() != fake.shape())
        throw ShapeError("gradient_penalty: real/fake shape mismatch");
    const int n = real.shape()[0];
    if (eps.dim() != 1 || eps.shape()[0] != n)
        throw ShapeError("gradient_penalty: need one eps per real/fake pair");
    for (int i = 0; i < n; ++i)
        if (!(eps[i] >= 0.0 && eps[i] <= 1.0))
            throw DomainError("gradient_penalty: eps must lie in [0,1]");
    const int64_t per = real.size() / n;
    Tensor xh = Tensor::zeros(real.shape());
    for (int i = 0; i < n; ++i) {
        const double e = eps[i];
        for (int64_t j = 0; j < per; ++j)
            xh[i * per + j] = e * real[i * per + j] + (1.0 - e) * fake[i * per + j];
    }
    Var xhat = Var::leaf(xh, true);
    Var d = d_src(xhat);
    if (d.val().dim() < 1 || d.shape()[0] != n)
        throw ShapeError("gradient_penalty: critic must keep the batch dimension");
    Var crit = d;
    if (d.val().dim() > 1) {  // patch critics: per-sample mean response
        std::vector<int> axes;
        for (int a = 1; a < d.val().dim(); ++a) axes.push_back(a);
        crit = ops::muls(ops::reduce_sum(d, axes, false),
                         static_cast<double>(n) / static_cast<double>(d.val().size()));
    }
    Var g = ag::grad(ops::sum_all(crit), {xhat}, /*create_graph=*/true)[0];
    Var norms = ops::l2_norm_rows(g);
    return ops::mean_all(ops::square(ops::adds(norms, -1.0)));
}

Var adv_loss_wgan_gp(const Var& d_src_real, const Var& d_src_fake, const Var& gp_term,
                     const LossWeights& w) {
    if (gp_term.val().size() != 1) throw ShapeError("adv_loss_wgan_gp: gp_term must be a scalar");
    if (!d_src_real.val().all_finite() || !d_src_fake.val().all_finite() ||
        !gp_term.val().all_finite())
        throw NumericError("adv_loss_wgan_gp: non-finite critic response");
    return ops::sub(ops::sub(ops::mean_all(d_src_real), ops::mean_all(d_src_fake)),
                    ops::muls(gp_term, w.lambda_gp));
}

namespace {

void check_label_rows(const Var& logits, const Tensor& rows, const std::string& mode,
                      const char* what) {
    if (mode != "exclusive" && mode != "multilabel")
        throw ConfigError(std::string(what) + ": label_mode must be exclusive|multilabel");
    if (logits.val().dim() != 2) throw ShapeError(std::string(what) + ": logits must be (N,C)");
    if (rows.shape() != logits.shape())
        throw ShapeError(std::string(what) + ": label rows must match logits");
    const int n = rows.shape()[0], c = rows.shape()[1];
    for (int i = 0; i < n; ++i) {
        int pos = 0;
        for (int j = 0; j < c; ++j) {
            const double v = rows[i * c + j];
            if (v != 0.0 && v != 1.0)
                throw DomainError(std::string(what) + ": label entries must be 0 or 1");
            pos += v == 1.0;
        }
        if (mode == "exclusive" && pos != 1)
            throw DomainError(std::string(what) + ": exclusive rows need exactly one class");
    }
}

}  // namespace

Var cls_loss_real(const Var& logits, const Tensor& labels, const std::string& mode) {
    check_label_rows(logits, labels, mode, "cls_loss_real");
    return mode == "exclusive" ? ops::ce_with_logits(logits, labels)
                               : ops::bce_with_logits(logits, labels);
}

Var cls_loss_fake(const Var& logits, const Tensor& targets, const std::string& mode) {
    check_label_rows(logits, targets, mode, "cls_loss_fake");
    return mode == "exclusive" ? ops::ce_with_logits(logits, targets)
                               : ops::bce_with_logits(logits, targets);
}

double nmi_value(const Tensor& x, const Tensor& y, int bins) {
    if (!x.defined() || x.size() == 0) throw ShapeError("nmi: empty input");
    if (x.shape() != y.shape()) throw ShapeError("nmi: shape mismatch");
    if (bins < 2) throw ConfigError("nmi: bins must be >= 2");
    const int64_t n = x.size();
    std::vector<double> joint(static_cast<size_t>(bins) * bins, 0.0);
    auto bin_of = [bins](double v) {
        if (!std::isfinite(v)) throw NumericError("nmi: non-finite pixel value");
        v = std::min(1.0, std::max(0.0, v));
        return std::min(bins - 1, static_cast<int>(v * bins));
    };
    for (int64_t i = 0; i < n; ++i) joint[bin_of(x[i]) * bins + bin_of(y[i])] += 1.0;
    std::vector<double> px(bins, 0.0), py(bins, 0.0);
    for (int a = 0; a < bins; ++a)
        for (int b = 0; b < bins; ++b) {
            const double p = joint[a * bins + b] / static_cast<double>(n);
            joint[a * bins + b] = p;
            px[a] += p;
            py[b] += p;
        }
    auto ent = [](const std::vector<double>& p) {
        double h = 0.0;
        for (double v : p)
            if (v > 0.0) h -= v * std::log(v);
        return h;
    };
    const double hxy = ent(joint);
    if (hxy <= 0.0) return 2.0;  // both images constant: treat as maximal agreement
    return (ent(px) + ent(py)) / hxy;
}

Var content_loss(const Var& a, const Var& b, const PerceptualExtractor* feat,
                 const LossWeights& w) {
    check_weights(w);
    if (a.shape() != b.shape()) throw ShapeError("content_loss: shape mismatch");
    if (a.val().dim() != 4) throw ShapeError("content_loss: expected (N,C,H,W) batches");
    const int n = a.shape()[0];
    Var total;
    if (feat != nullptr && w.w_perc != 0.0) {
        Var fa = feat->features(a);
        Var fb = feat->features(b);
        if (fa.shape() != fb.shape())
            throw ShapeError("content_loss: extractor output shapes disagree");
        total = ops::muls(ops::mse_loss(fa, fb), w.w_perc);
    }
    Var m = ops::muls(ops::mse_loss(a, b), w.w_mse);
    total = total.defined() ? ops::add(total, m) : m;
    // similarity term from quantized joint histograms; value only, no gradient
    const int64_t per = a.val().size() / n;
    double acc = 0.0;
    for (int i = 0; i < n; ++i) {
        Tensor pa = Tensor::zeros({static_cast<int>(per)});
        Tensor pb = Tensor::zeros({static_cast<int>(per)});
        for (int64_t j = 0; j < per; ++j) {
            pa[j] = a.val()[i * per + j];
            pb[j] = b.val()[i * per + j];
        }
        acc += 1.0 / (nmi_value(pa, pb, w.nmi_bins) + w.nmi_eps);
    }
    Tensor nmi_t = Tensor::full({1}, w.w_nmi * acc / n);
    return ops::add(total, Var::leaf(nmi_t));
}

// ---- model, persistence ------------------------------------------------------

CaganModel::CaganModel(const CaganSpec& sp, const LossWeights& w, uint64_t sd)
    : spec(sp), weights(w), seed(sd) {
    check_spec(sp);
    check_weights(w);
    G = GeneratorNet(sp, sd);
    D = DiscriminatorNet(sp, sd);
}

static const std::vector<std::string> kHistoryHeader = {"iter",    "L_D",     "L_G",
                                                        "L_adv",   "L_cls_r", "L_cls_f",
                                                        "L_content", "gp"};

void save_cagan(const CaganModel& m, const std::string& dir) {
    fs::create_directories(dir);
    m.G.params().save_file(dir + "/G.bin");
    m.D.params().save_file(dir + "/D.bin");
    json j;
    j["side"] = m.spec.side;
    j["num_classes"] = m.spec.num_classes;
    j["z_dim"] = m.spec.z_dim;
    j["g_width"] = m.spec.g_width;
    j["residual_blocks"] = m.spec.residual_blocks;
    j["d_widths"] = m.spec.d_widths;
    j["d_norm"] = m.spec.d_norm;
    j["label_mode"] = m.spec.label_mode;
    j["lambda_cls"] = m.weights.lambda_cls;
    j["lambda_content"] = m.weights.lambda_content;
    j["lambda_gp"] = m.weights.lambda_gp;
    j["w_perc"] = m.weights.w_perc;
    j["w_mse"] = m.weights.w_mse;
    j["w_nmi"] = m.weights.w_nmi;
    j["nmi_eps"] = m.weights.nmi_eps;
    j["nmi_bins"] = m.weights.nmi_bins;
    j["iter"] = m.iter;
    j["seed"] = m.seed;
    j["diverged"] = m.diverged;
    std::ofstream os(dir + "/weights.json");
    if (!os) throw DataError("save_cagan: cannot write " + dir + "/weights.json");
    os << j.dump(2) << "\n";
    CsvWriter hw(dir + "/history.csv");
    hw.row(kHistoryHeader);
    for (const auto& r : m.history) {
        std::vector<std::string> f;
        f.push_back(std::to_string(static_cast<int64_t>(r[0])));
        for (int k = 1; k < 8; ++k) f.push_back(fmt_double(r[static_cast<size_t>(k)], 17));
        hw.row(f);
    }
    hw.close();
}

CaganModel load_cagan(const std::string& dir) {
    std::ifstream is(dir + "/weights.json");
    if (!is) throw DataError("load_cagan: missing " + dir + "/weights.json");
    json j;
    try {
        is >> j;
    } catch (const json::exception&) {
        throw DataError("load_cagan: unparsable " + dir + "/weights.json");
    }
    CaganSpec sp;
    LossWeights w;
    int64_t iter = 0;
    uint64_t seed = 0;
    bool diverged = false;
    try {
        sp.side = j.at("side");
        sp.num_classes = j.at("num_classes");
        sp.z_dim = j.at("z_dim");
        sp.g_width = j.at("g_width");
        sp.residual_blocks = j.at("residual_blocks");
        sp.d_widths = j.at("d_widths").get<std::vector<int>>();
        sp.d_norm = j.at("d_norm");
        sp.label_mode = j.at("label_mode");
        w.lambda_cls = j.at("lambda_cls");
        w.lambda_content = j.at("lambda_content");
        w.lambda_gp = j.at("lambda_gp");
        w.w_perc = j.at("w_perc");
        w.w_mse = j.at("w_mse");
        w.w_nmi = j.at("w_nmi");
        w.nmi_eps = j.at("nmi_eps");
        w.nmi_bins = j.at("nmi_bins");
        iter = j.at("iter");
        seed = j.at("seed");
        diverged = j.at("diverged");
    } catch (const json::exception&) {
        throw DataError("load_cagan: weights.json is missing fields");
    }
    CaganModel m(sp, w, seed);
    m.G.params().load_file(dir + "/G.bin");
    m.D.params().load_file(dir + "/D.bin");
    m.iter = iter;
    m.diverged = diverged;
    auto rows = read_csv(dir + "/history.csv");
    if (rows.empty() || rows[0] != kHistoryHeader)
        throw DataError("load_cagan: bad history.csv header in " + dir);
    for (size_t i = 1; i < rows.size(); ++i) {
        if (rows[i].size() != 8) throw DataError("load_cagan: malformed history row");
        std::array<double, 8> r{};
        for (int k = 0; k < 8; ++k) r[static_cast<size_t>(k)] = std::stod(rows[i][static_cast<size_t>(k)]);
        m.history.push_back(r);
    }
    return m;
}

// ---- training ----------------------------------------------------------------

void train_cagan(CaganModel& m, const std::vector<data::Sample>& samples,
                 const seg::SegmenterNet& segnet, const PerceptualExtractor* feat,
                 const CaganHyper& hy) {
    const int C = m.spec.num_classes, S = m.spec.side, zd = m.spec.z_dim;
    if (hy.iters < 1 || hy.iters > 100000)
        throw ConfigError("train_cagan: iters must be in [1, 100000]");
    if (hy.batch < 1) throw ConfigError("train_cagan: batch must be positive");
    if (hy.n_critic < 1) throw ConfigError("train_cagan: n_critic must be positive");
    if (hy.checkpoint_every < 1) throw ConfigError("train_cagan: checkpoint_every must be positive");
    if (hy.lr <= 0) throw ConfigError("train_cagan: lr must be positive");
    if (hy.z_source != "gt" && hy.z_source != "perturbed" && hy.z_source != "mix")
        throw ConfigError("train_cagan: z_source must be gt|perturbed|mix");
    if (samples.empty()) throw DataError("train_cagan: no training samples");

    std::string missing;
    std::set<int> classes;
    for (const auto& s : samples) {
        if (s.image.shape() != std::vector<int>{S, S})
            throw ShapeError("train_cagan: sample " + s.id + " image size mismatch");
        if (static_cast<int>(s.labels.size()) != C)
            throw DataError("train_cagan: sample " + s.id + " label width mismatch");
        if (!s.mask.defined()) missing += (missing.empty() ? "" : ", ") + s.id;
        for (int c = 0; c < C; ++c)
            if (s.labels[static_cast<size_t>(c)]) classes.insert(c);
    }
    if (!missing.empty()) throw DataError("train_cagan: samples without masks: " + missing);
    if (classes.size() < 2)
        throw TrainError("train_cagan: adversarial class head needs >= 2 classes present, got " +
                         std::to_string(classes.size()));
    if (m.iter >= hy.iters) return;

    const bool persist = !hy.out_dir.empty();
    if (m.iter > 0 && !persist)
        throw TrainError("train_cagan: resuming requires the checkpoint directory");

    // mask codes fed to the generator: each sample's own code plus a few
    // contour-jittered variants so z carries real signal during training
    const int nz = hy.z_source == "gt" ? 0 : 4;
    Rng master(hy.seed);
    std::vector<Tensor> z_own(samples.size());
    std::vector<std::vector<Tensor>> z_pool(samples.size());
    for (size_t i = 0; i < samples.size(); ++i) {
        seg::MaskLatent own = seg::extract_latent(segnet, samples[i].mask, seg::LatentInput::mask);
        z_own[i] = own.z;
        if (nz > 0) {
            const uint64_t ps = static_cast<uint64_t>(
                master.fork("zpool", static_cast<int64_t>(i))
                    .uniform_int(0, std::numeric_limits<int64_t>::max()));
            auto kids = seg::perturb_mask(segnet, own, samples[i].id, hy.perturb_magnitude, nz, ps);
            for (auto& k : kids) z_pool[i].push_back(k.z);
        }
    }

    nn::Adam optG(m.G.params().trainable_vars(), hy.lr, hy.beta1, hy.beta2);
    nn::Adam optD(m.D.params().trainable_vars(), hy.lr, hy.beta1, hy.beta2);
    if (m.iter > 0) {
        if (!fs::exists(hy.out_dir + "/G.adam") || !fs::exists(hy.out_dir + "/D.adam"))
            throw TrainError("train_cagan: no optimizer state in " + hy.out_dir +
                             ", cannot resume exactly");
        optG.load_file(hy.out_dir + "/G.adam");
        optD.load_file(hy.out_dir + "/D.adam");
    }

    // rolling last-good snapshot for the divergence bail-out
    std::string snapG, snapD, snapOG, snapOD;
    int64_t snap_iter = 0;
    size_t snap_rows = 0;
    auto snapshot = [&]() {
        std::ostringstream g, d, og, od;
        m.G.params().save(g);
        m.D.params().save(d);
        optG.save(og);
        optD.save(od);
        snapG = g.str();
        snapD = d.str();
        snapOG = og.str();
        snapOD = od.str();
        snap_iter = m.iter;
        snap_rows = m.history.size();
    };
    auto restore = [&]() {
        std::istringstream g(snapG), d(snapD), og(snapOG), od(snapOD);
        m.G.params().load(g);
        m.D.params().load(d);
        optG.load(og);
        optD.load(od);
        m.iter = snap_iter;
        m.history.resize(snap_rows);
    };
    auto write_ckpt = [&]() {
        if (!persist) return;
        save_cagan(m, hy.out_dir);
        optG.save_file(hy.out_dir + "/G.adam");
        optD.save_file(hy.out_dir + "/D.adam");
    };
    snapshot();
    write_ckpt();

    nn::Ctx tctx{true, nullptr};
    const std::string& mode = m.spec.label_mode;
    auto d_src_apply = [&](const Var& xh) { return m.D.forward(xh, tctx).src; };

    auto pick_z = [&](Rng& r, size_t si) -> const Tensor& {
        if (nz == 0 || z_pool[si].empty()) return z_own[si];
        if (hy.z_source == "perturbed")
            return z_pool[si][static_cast<size_t>(r.uniform_int(0, nz - 1))];
        return r.bernoulli(0.5) ? z_own[si]
                                : z_pool[si][static_cast<size_t>(r.uniform_int(0, nz - 1))];
    };
    auto make_batch = [&](Rng& r, Tensor& x, Tensor& lab, Tensor& z, Tensor& tgt) {
        x = Tensor::zeros({hy.batch, 1, S, S});
        lab = Tensor::zeros({hy.batch, C});
        z = Tensor::zeros({hy.batch, zd});
        tgt = Tensor::zeros({hy.batch, C});
        const int64_t plane = static_cast<int64_t>(S) * S;
        for (int b = 0; b < hy.batch; ++b) {
            const size_t si =
                static_cast<size_t>(r.uniform_int(0, static_cast<int64_t>(samples.size()) - 1));
            const Tensor& img = samples[si].image;
            for (int64_t j = 0; j < plane; ++j) x[b * plane + j] = img[j];
            for (int c = 0; c < C; ++c) lab[b * C + c] = samples[si].labels[static_cast<size_t>(c)];
            const Tensor& zz = pick_z(r, si);
            for (int k = 0; k < zd; ++k) z[b * zd + k] = zz[k];
            tgt[b * C + r.uniform_int(0, C - 1)] = 1.0;
        }
    };

    for (int64_t it = m.iter; it < hy.iters; ++it) {
        Rng itr = master.fork("iter", it);
        bool bad = false;
        double v_adv = 0, v_clsr = 0, v_clsf = 0, v_cont = 0, v_gp = 0;
        try {
            for (int k = 0; k < hy.n_critic && !bad; ++k) {
                Rng sr = itr.fork("d", k);
                Tensor x, lab, z, tgt;
                make_batch(sr, x, lab, z, tgt);
                ag::GradMode gm(true);
                Var xv = Var::leaf(x);
                Var fake = m.G.forward(xv, z, tgt, tctx).detach();
                auto dr = m.D.forward(xv, tctx);
                auto df = m.D.forward(fake, tctx);
                Tensor eps = Tensor::zeros({hy.batch});
                for (int b = 0; b < hy.batch; ++b) eps[b] = sr.uniform();
                Var gp = gradient_penalty(d_src_apply, x, fake.val(), eps);
                Var ladv = adv_loss_wgan_gp(dr.src, df.src, gp, m.weights);
                Var lclsr = cls_loss_real(dr.cls, lab, mode);
                Var ld = ops::add(ops::neg(ladv), ops::muls(lclsr, m.weights.lambda_cls));
                if (!ld.val().all_finite()) {
                    bad = true;
                    break;
                }
                optD.step(ag::grad(ld, m.D.params().trainable_vars()));
            }
            if (!bad) {
                Rng gr = itr.fork("g");
                Tensor x, lab, z, tgt;
                make_batch(gr, x, lab, z, tgt);
                ag::GradMode gm(true);
                Var xv = Var::leaf(x);
                Var fake = m.G.forward(xv, z, tgt, tctx);
                auto df = m.D.forward(fake, tctx);
                auto dr = m.D.forward(xv, tctx);
                Tensor eps = Tensor::zeros({hy.batch});
                for (int b = 0; b < hy.batch; ++b) eps[b] = gr.uniform();
                // the penalty is a critic regularizer: keep its value in the
                // logged objective but cut the path back into the generator
                Var gp = gradient_penalty(d_src_apply, x, fake.val(), eps);
                Var ladv = adv_loss_wgan_gp(dr.src, df.src, gp, m.weights);
                Var lclsf = cls_loss_fake(df.cls, tgt, mode);
                Var lcont = content_loss(fake, xv, feat, m.weights);
                Var lg = ops::add(ladv, ops::add(ops::muls(lclsf, m.weights.lambda_cls),
                                                 ops::muls(lcont, m.weights.lambda_content)));
                Var lclsr = cls_loss_real(dr.cls, lab, mode);
                if (!lg.val().all_finite() || !lclsr.val().all_finite()) {
                    bad = true;
                } else {
                    optG.step(ag::grad(lg, m.G.params().trainable_vars()));
                    v_adv = ladv.item();
                    v_clsr = lclsr.item();
                    v_clsf = lclsf.item();
                    v_cont = lcont.item();
                    v_gp = gp.item();
                }
            }
        } catch (const NumericError&) {
            bad = true;
        }
        if (bad) {
            restore();
            m.diverged = true;
            write_ckpt();
            warnf("train_cagan: non-finite loss at iter " + std::to_string(it) +
                  ", restored checkpoint from iter " + std::to_string(snap_iter));
            return;
        }
        const double v_ld = -v_adv + m.weights.lambda_cls * v_clsr;
        const double v_lg = v_adv + (m.weights.lambda_cls * v_clsf +
                                     m.weights.lambda_content * v_cont);
        m.history.push_back({static_cast<double>(it), v_ld, v_lg, v_adv, v_clsr, v_clsf, v_cont,
                             v_gp});
        m.iter = it + 1;
        if (m.iter % hy.checkpoint_every == 0) {
            snapshot();
            write_ckpt();
        }
    }
    snapshot();
    write_ckpt();
}

// ---- generation ---------------------------------------------------------------

data::Sample generate(const CaganModel& m, const data::Sample& base, const seg::MaskLatent& ml,
                      const std::vector<int>& target_labels, const std::string& new_id) {
    const int C = m.spec.num_classes, S = m.spec.side;
    if (static_cast<int>(target_labels.size()) != C)
        throw DomainError("generate: target class vector must have width " + std::to_string(C));
    int pos = 0;
    for (int v : target_labels) {
        if (v != 0 && v != 1) throw DomainError("generate: target entries must be 0 or 1");
        pos += v;
    }
    if (pos == 0) throw DomainError("generate: target must set at least one class");
    if (m.spec.label_mode == "exclusive" && pos != 1)
        throw DomainError("generate: exclusive corpora take exactly one target class");
    if (base.image.shape() != std::vector<int>{S, S})
        throw ShapeError("generate: base image size mismatch");
    if (ml.z.dim() != 1 || ml.z.shape()[0] != m.spec.z_dim)
        throw ShapeError("generate: mask code width mismatch");
    if (new_id.empty()) throw DomainError("generate: synthetic id must be nonempty");

    ag::GradMode gm(false);
    nn::Ctx ectx{false, nullptr};
    Tensor z = ml.z.reshaped({1, m.spec.z_dim});
    Tensor t = Tensor::zeros({1, C});
    for (int c = 0; c < C; ++c) t[c] = target_labels[static_cast<size_t>(c)];
    Var out = m.G.forward(Var::leaf(base.image.reshaped({1, 1, S, S})), z, t, ectx);
    if (!out.val().all_finite()) throw NumericError("generate: non-finite generator output");

    data::Sample s;
    s.id = new_id;
    s.image = out.val().reshaped({S, S});
    s.mask = ml.mask;  // carry the contour that conditioned this draw
    s.labels = target_labels;
    s.patient_id = base.patient_id;  // synthetic stays inside its source patient's fold
    s.synthetic = true;
    s.base_id = base.id;
    return s;
}

}  // namespace caal::cagan
