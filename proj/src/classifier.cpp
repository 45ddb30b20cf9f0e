#include "caal/classifier.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include <json.hpp>

#include "caal/csvio.hpp"

namespace caal::cls {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void check_spec(const ClassifierSpec& sp) {
    if (sp.backbone != "toy_cnn")
        throw CapabilityError("classifier: backbone '" + sp.backbone +
                              "' is not available in this build");
    if (sp.side < 16 || sp.side % 16 != 0)
        throw ConfigError("classifier: side must be >= 16 and divisible by 16");
    if (sp.num_classes < 1) throw ConfigError("classifier: num_classes must be >= 1");
    if (sp.width < 1) throw ConfigError("classifier: width must be positive");
    if (sp.label_mode != "exclusive" && sp.label_mode != "multilabel")
        throw ConfigError("classifier: label_mode must be exclusive|multilabel");
    if (sp.mask_rate < 0 || sp.mask_rate >= 1)
        throw ConfigError("classifier: mask_rate must lie in [0,1)");
}

std::map<std::string, int64_t>& eval_counts() {
    static std::map<std::string, int64_t> counts;
    return counts;
}

}  // namespace

// ---- backbone -----------------------------------------------------------------

ToyCnn::ToyCnn(const ClassifierSpec& spec, uint64_t init_seed) : spec_(spec) {
    check_spec(spec);
    Rng r = Rng(init_seed).fork("cls");
    const int w = spec.width;
    const int ch[5] = {1, w, 2 * w, 4 * w, 4 * w};
    for (int i = 0; i < 4; ++i) {
        std::string nm = "blk" + std::to_string(i + 1);
        conv_[i] = nn::Conv2d(ps_, nm + ".c", ch[i], ch[i + 1], 3, 1, 1, r);
        bn_[i] = nn::BatchNorm(ps_, nm + ".bn", ch[i + 1]);
    }
    drop_ = nn::Dropout(spec.mask_rate);
    feat_dim_ = ch[4];
    head_ = nn::Linear(ps_, "head", feat_dim_, spec.num_classes, r, 1.0);
    if (spec.variance_head) var_head_ = nn::Linear(ps_, "var", feat_dim_, spec.num_classes, r, 1.0);
}

Var ToyCnn::feature_map(const Var& x, int layer, nn::Ctx& ctx) const {
    if (layer < 1 || layer > 4) throw ConfigError("classifier: feature layer must be 1..4");
    const auto& sh = x.shape();
    if (sh.size() != 4 || sh[1] != 1 || sh[2] != spec_.side || sh[3] != spec_.side)
        throw ShapeError("classifier: input must be (N,1," + std::to_string(spec_.side) + "," +
                         std::to_string(spec_.side) + ")");
    Var h = x;
    for (int i = 0; i < layer; ++i)
        h = ops::avg_pool2(ops::relu(bn_[i].forward(conv_[i].forward(h), ctx)));
    return h;
}

ToyCnn::Out ToyCnn::forward(const Var& x, nn::Ctx& ctx) const {
    Var h = feature_map(x, 4, ctx);
    const auto& hs = h.shape();
    const double hw = static_cast<double>(hs[2]) * hs[3];
    Var pooled = ops::muls(ops::reduce_sum(h, {2, 3}, false), 1.0 / hw);  // (N, feat)
    pooled = drop_.forward(pooled, ctx);
    Out out;
    out.logits = head_.forward(pooled);
    if (spec_.variance_head) {
        // the noise head reads frozen features: its loss can tune var.* only,
        // never the classifier; the squash keeps log-variance well-conditioned
        Var raw = var_head_.forward(pooled.detach());
        out.log_var = ops::adds(ops::muls(ops::sigmoid(raw), 18.0), -12.0);
    }
    return out;
}

Classifier::Classifier(const ClassifierSpec& sp, uint64_t init_seed) : spec(sp) {
    net = ToyCnn(sp, init_seed);
}

// ---- persistence ----------------------------------------------------------------

void save_classifier(const Classifier& c, const std::string& dir) {
    fs::create_directories(dir);
    const std::string spec_path = dir + "/spec.json";
    if (fs::exists(spec_path)) {
        std::ifstream is(spec_path);
        json prev;
        try {
            is >> prev;
        } catch (const json::exception&) {
            throw DataError("save_classifier: existing spec.json is unreadable");
        }
        if (prev.contains("round") && prev["round"].get<int>() > c.round)
            throw GuardError("save_classifier: round provenance would move backwards (" +
                             std::to_string(prev["round"].get<int>()) + " -> " +
                             std::to_string(c.round) + ")");
    }
    c.net.params().save_file(dir + "/weights.bin");
    json j;
    j["backbone"] = c.spec.backbone;
    j["side"] = c.spec.side;
    j["num_classes"] = c.spec.num_classes;
    j["width"] = c.spec.width;
    j["label_mode"] = c.spec.label_mode;
    j["mask_rate"] = c.spec.mask_rate;
    j["variance_head"] = c.spec.variance_head;
    j["round"] = c.round;
    std::ofstream os(spec_path);
    if (!os) throw DataError("save_classifier: cannot write " + spec_path);
    os << j.dump(2) << "\n";
}

Classifier load_classifier(const std::string& dir) {
    std::ifstream is(dir + "/spec.json");
    if (!is) throw DataError("load_classifier: missing " + dir + "/spec.json");
    json j;
    try {
        is >> j;
    } catch (const json::exception&) {
        throw DataError("load_classifier: unparsable " + dir + "/spec.json");
    }
    ClassifierSpec sp;
    int round = -1;
    try {
        sp.backbone = j.at("backbone");
        sp.side = j.at("side");
        sp.num_classes = j.at("num_classes");
        sp.width = j.at("width");
        sp.label_mode = j.at("label_mode");
        sp.mask_rate = j.at("mask_rate");
        sp.variance_head = j.at("variance_head");
        round = j.at("round");
    } catch (const json::exception&) {
        throw DataError("load_classifier: spec.json is missing fields");
    }
    Classifier c(sp, 0);
    c.net.params().load_file(dir + "/weights.bin");
    c.round = round;
    return c;
}

Classifier clone_classifier(const Classifier& c) {
    Classifier out(c.spec, 0);
    out.round = c.round;
    const auto& src = c.net.params().items();
    const auto& dst = out.net.params().items();
    if (src.size() != dst.size()) throw GuardError("clone_classifier: layout mismatch");
    for (size_t i = 0; i < src.size(); ++i) {
        if (src[i].name != dst[i].name) throw GuardError("clone_classifier: layout mismatch");
        Var v = dst[i].var;
        v.mutable_val() = src[i].var.val().clone();
    }
    return out;
}

// ---- training ---------------------------------------------------------------------

namespace {

Tensor stack_images(const std::vector<data::Sample>& samples, const std::vector<size_t>& idx,
                    size_t first, size_t last, int side) {
    const int b = static_cast<int>(last - first);
    Tensor x = Tensor::zeros({b, 1, side, side});
    const int64_t plane = static_cast<int64_t>(side) * side;
    for (size_t k = first; k < last; ++k) {
        const Tensor& img = samples[idx[k]].image;
        for (int64_t j = 0; j < plane; ++j) x[(k - first) * plane + j] = img[j];
    }
    return x;
}

Tensor stack_labels(const std::vector<data::Sample>& samples, const std::vector<size_t>& idx,
                    size_t first, size_t last, int c) {
    const int b = static_cast<int>(last - first);
    Tensor y = Tensor::zeros({b, c});
    for (size_t k = first; k < last; ++k)
        for (int j = 0; j < c; ++j)
            y[(k - first) * c + j] = samples[idx[k]].labels[static_cast<size_t>(j)];
    return y;
}

}  // namespace

FinetuneMetrics finetune(Classifier& c, const std::vector<data::Sample>& samples,
                         const FinetuneHyper& hy) {
    const int C = c.spec.num_classes, S = c.spec.side;
    if (hy.epochs < 0) throw ConfigError("finetune: epochs must be >= 0");
    if (hy.batch < 1) throw ConfigError("finetune: batch must be positive");
    if (hy.lr <= 0) throw ConfigError("finetune: lr must be positive");
    if (hy.var_weight < 0) throw ConfigError("finetune: var_weight must be nonnegative");
    if (hy.freeze != "none" && hy.freeze != "backbone")
        throw ConfigError("finetune: freeze must be none|backbone");
    if (!hy.class_weights.empty()) {
        if (static_cast<int>(hy.class_weights.size()) != C)
            throw ConfigError("finetune: class_weights width mismatch");
        for (double w : hy.class_weights)
            if (!(w > 0)) throw ConfigError("finetune: class_weights must be positive");
    }
    if (samples.empty()) throw DataError("finetune: empty sample pool");
    std::set<int> classes;
    for (const auto& s : samples) {
        if (s.image.shape() != std::vector<int>{S, S})
            throw ShapeError("finetune: sample " + s.id + " image size mismatch");
        if (static_cast<int>(s.labels.size()) != C)
            throw DataError("finetune: sample " + s.id + " label width mismatch");
        int pos = 0;
        for (int k = 0; k < C; ++k) {
            const int v = s.labels[static_cast<size_t>(k)];
            if (v != 0 && v != 1) throw DataError("finetune: sample " + s.id + " has non-binary labels");
            if (v) classes.insert(k);
            pos += v;
        }
        if (c.spec.label_mode == "exclusive" && pos != 1)
            throw DataError("finetune: sample " + s.id + " is not single-label");
    }
    if (c.spec.label_mode == "exclusive" && classes.size() < 2)
        throw TrainError("finetune: exclusive pool holds a single class, nothing to separate");

    FinetuneMetrics metrics;
    if (hy.epochs == 0) return metrics;  // identity by contract

    std::vector<Var> trainables;
    if (hy.freeze == "none") {
        trainables = c.net.params().trainable_vars();
    } else {
        for (const auto& it : c.net.params().items())
            if (it.trainable &&
                (it.name.rfind("head", 0) == 0 || it.name.rfind("var", 0) == 0))
                trainables.push_back(it.var);
    }
    nn::Adam opt(trainables, hy.lr);
    Tensor cw;
    if (!hy.class_weights.empty()) {
        cw = Tensor::zeros({C});
        for (int k = 0; k < C; ++k) cw[k] = hy.class_weights[static_cast<size_t>(k)];
    }

    Rng master(hy.seed);
    std::vector<size_t> idx(samples.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;

    for (int e = 0; e < hy.epochs; ++e) {
        Rng erng = master.fork("epoch", e);
        erng.shuffle(idx);
        double esum = 0;
        int64_t nb = 0;
        for (size_t first = 0; first < idx.size(); first += static_cast<size_t>(hy.batch)) {
            const size_t last = std::min(idx.size(), first + static_cast<size_t>(hy.batch));
            Rng brng = erng.fork("batch", static_cast<int64_t>(first));
            nn::Ctx tctx{true, &brng};
            ag::GradMode gm(true);
            Var x = Var::leaf(stack_images(samples, idx, first, last, S));
            Tensor y = stack_labels(samples, idx, first, last, C);
            auto out = c.net.forward(x, tctx);
            Var loss = c.spec.label_mode == "exclusive"
                           ? ops::ce_with_logits(out.logits, y, cw.defined() ? &cw : nullptr)
                           : ops::bce_with_logits(out.logits, y, cw.defined() ? &cw : nullptr);
            if (c.spec.variance_head && hy.var_weight > 0) {
                // fit sigma^2 to the squared probability residual; the residual
                // is detached so the aleatoric head cannot steer the classifier
                Var p = c.spec.label_mode == "exclusive" ? ops::softmax_rows(out.logits)
                                                         : ops::sigmoid(out.logits);
                Tensor r2 = Tensor::zeros(y.shape());
                for (int64_t i = 0; i < r2.size(); ++i) {
                    const double d = p.val()[i] - y[i];
                    r2[i] = d * d;
                }
                Var nll = ops::add(ops::mul_const(ops::exp(ops::neg(out.log_var)), r2),
                                   out.log_var);
                loss = ops::add(loss, ops::muls(ops::mean_all(nll), hy.var_weight));
            }
            if (!loss.val().all_finite()) throw NumericError("finetune: non-finite loss");
            opt.step(ag::grad(loss, trainables));
            esum += loss.item();
            ++nb;
        }
        metrics.epoch_loss.push_back(esum / static_cast<double>(nb));
    }
    metrics.improved =
        metrics.epoch_loss.size() < 2 || metrics.epoch_loss.back() < metrics.epoch_loss.front();
    if (!metrics.improved)
        warnf("finetune: training loss did not improve over " + std::to_string(hy.epochs) +
              " epochs");
    return metrics;
}

// ---- inference and metrics ----------------------------------------------------------

Tensor predict_proba(const Classifier& c, const std::vector<data::Sample>& samples) {
    const int C = c.spec.num_classes, S = c.spec.side;
    if (samples.empty()) throw DomainError("predict_proba: no samples");
    for (const auto& s : samples)
        if (s.image.shape() != std::vector<int>{S, S})
            throw ShapeError("predict_proba: sample " + s.id + " image size mismatch");
    ag::GradMode gm(false);
    nn::Ctx ectx{false, nullptr};
    Tensor probs = Tensor::zeros({static_cast<int>(samples.size()), C});
    const size_t chunk = 32;
    std::vector<size_t> idx(samples.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    for (size_t first = 0; first < samples.size(); first += chunk) {
        const size_t last = std::min(samples.size(), first + chunk);
        Var x = Var::leaf(stack_images(samples, idx, first, last, S));
        auto out = c.net.forward(x, ectx);
        Var p = c.spec.label_mode == "exclusive" ? ops::softmax_rows(out.logits)
                                                 : ops::sigmoid(out.logits);
        for (size_t k = first; k < last; ++k)
            for (int j = 0; j < C; ++j) probs[k * C + j] = p.val()[(k - first) * C + j];
    }
    if (!probs.all_finite()) throw NumericError("predict_proba: non-finite probabilities");
    return probs;
}

AucValue auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size()) throw ShapeError("auc: scores/labels length mismatch");
    if (scores.empty()) throw DomainError("auc: empty input");
    int64_t npos = 0, nneg = 0;
    for (size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] != 0 && labels[i] != 1) throw DomainError("auc: labels must be 0/1");
        if (!std::isfinite(scores[i])) throw NumericError("auc: non-finite score");
        labels[i] ? ++npos : ++nneg;
    }
    if (npos == 0 || nneg == 0) return {0.5, false};
    std::vector<size_t> order(scores.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](size_t a, size_t b) { return scores[a] < scores[b]; });
    // midranks: tie groups share the average of their 1-based rank range
    std::vector<double> rank(scores.size(), 0.0);
    size_t i = 0;
    while (i < order.size()) {
        size_t j = i;
        while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
        const double mid = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
        for (size_t k = i; k <= j; ++k) rank[order[k]] = mid;
        i = j + 1;
    }
    double pos_ranks = 0;
    for (size_t k = 0; k < labels.size(); ++k)
        if (labels[k]) pos_ranks += rank[k];
    const double u = pos_ranks - static_cast<double>(npos) * (static_cast<double>(npos) + 1) / 2.0;
    return {u / (static_cast<double>(npos) * static_cast<double>(nneg)), true};
}

bool SplitGuard::permits(const std::string& split) const {
    return std::find(allowed.begin(), allowed.end(), split) != allowed.end();
}

AucReport evaluate_samples(const Classifier& c, const std::vector<data::Sample>& samples,
                           const std::string& split_tag) {
    if (samples.empty()) throw DomainError("evaluate: empty split '" + split_tag + "'");
    const int C = c.spec.num_classes;
    Tensor probs = predict_proba(c, samples);
    AucReport r;
    r.split = split_tag;
    r.n = static_cast<int64_t>(samples.size());
    double macro_sum = 0;
    int64_t macro_n = 0;
    for (int k = 0; k < C; ++k) {
        std::vector<double> sc(samples.size());
        std::vector<int> lb(samples.size());
        for (size_t s = 0; s < samples.size(); ++s) {
            sc[s] = probs[s * C + k];
            lb[s] = samples[s].labels[static_cast<size_t>(k)];
        }
        AucValue v = auc(sc, lb);
        int64_t pos = 0;
        for (int l : lb) pos += l;
        r.per_class.push_back(v.value);
        r.defined.push_back(v.defined);
        r.positives.push_back(pos);
        r.negatives.push_back(static_cast<int64_t>(samples.size()) - pos);
        if (v.defined) {
            macro_sum += v.value;
            ++macro_n;
        }
    }
    r.macro = macro_n > 0 ? macro_sum / static_cast<double>(macro_n) : 0.0;
    return r;
}

AucReport evaluate(const Classifier& c, const data::DatasetManifest& m, const std::string& split,
                   const SplitGuard* guard) {
    if (guard != nullptr && !guard->permits(split))
        throw GuardError("evaluate: split '" + split + "' is off-limits in this phase");
    eval_counts()[split] += 1;
    return evaluate_samples(c, data::load_split(m, split), split);
}

int64_t evaluate_count(const std::string& split) {
    auto it = eval_counts().find(split);
    return it == eval_counts().end() ? 0 : it->second;
}

void reset_evaluate_counts() { eval_counts().clear(); }

// ---- report serialization --------------------------------------------------------------

void write_auc_report_json(const AucReport& r, const std::string& path) {
    json j;
    j["split"] = r.split;
    j["n"] = r.n;
    j["per_class"] = r.per_class;
    j["defined"] = r.defined;
    j["positives"] = r.positives;
    j["negatives"] = r.negatives;
    j["macro"] = r.macro;
    std::ofstream os(path);
    if (!os) throw DataError("write_auc_report_json: cannot write " + path);
    os << j.dump(2) << "\n";
}

AucReport read_auc_report_json(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("read_auc_report_json: missing " + path);
    json j;
    try {
        is >> j;
    } catch (const json::exception&) {
        throw DataError("read_auc_report_json: unparsable " + path);
    }
    AucReport r;
    try {
        r.split = j.at("split");
        r.n = j.at("n");
        r.per_class = j.at("per_class").get<std::vector<double>>();
        r.defined = j.at("defined").get<std::vector<bool>>();
        r.positives = j.at("positives").get<std::vector<int64_t>>();
        r.negatives = j.at("negatives").get<std::vector<int64_t>>();
        r.macro = j.at("macro");
    } catch (const json::exception&) {
        throw DataError("read_auc_report_json: missing fields in " + path);
    }
    return r;
}

void write_auc_report_csv(const AucReport& r, const std::string& path) {
    CsvWriter w(path);
    w.row({"class", "auc", "defined", "positives", "negatives"});
    for (size_t k = 0; k < r.per_class.size(); ++k)
        w.row({std::to_string(k), fmt_double(r.per_class[k], 17), r.defined[k] ? "1" : "0",
               std::to_string(r.positives[k]), std::to_string(r.negatives[k])});
    w.row({"macro", fmt_double(r.macro, 17), "", std::to_string(r.n), ""});
    w.close();
}

Var CnnFeatures::features(const Var& images) const {
    if (c == nullptr) throw GuardError("CnnFeatures: no classifier attached");
    nn::Ctx ectx{false, nullptr};
    return c->net.feature_map(images, layer, ectx);
}

}  // namespace caal::cls
