#include "caal/config.hpp"

#include <algorithm>
#include <fstream>
#include <ostream>
#include <sstream>

namespace caal {

const std::vector<Config::KeySpec>& Config::registry() {
    static const std::vector<KeySpec> kRegistry = {
        // ---- toy corpus ----
        {"data.num_classes", "6", "number of classes C"},
        {"data.num_patients", "400", "patients in the toy corpus"},
        {"data.images_per_patient", "5", "images per patient"},
        {"data.side", "64", "square image side in pixels (>= 32)"},
        {"data.imbalance", "10,5,3,2,1.5,1",
         "per-class draw weights; length C (most to least frequent is conventional)"},
        {"data.label_mode", "multilabel", "label semantics: multilabel | exclusive"},
        {"data.second_label_prob", "0.3",
         "multilabel mode: probability an image carries one extra label"},
        {"data.allow_normal", "false", "permit all-zero label vectors (no finding)"},
        {"data.normal_prob", "0.15",
         "probability of a no-finding image when allow_normal is on"},
        {"data.artifact_strength", "0.35", "intensity contrast of class artifacts"},
        {"data.noise", "0.05", "background noise amplitude"},
        {"data.split_fractions", "0.70,0.10,0.20", "train,val,test fractions (sum to 1)"},

        // ---- segmenter ----
        {"segmenter.lr", "1e-3", "learning rate"},
        {"segmenter.beta1", "0.9", "Adam beta1 for the segmenter"},
        {"segmenter.epochs", "12", "training epochs"},
        {"segmenter.batch", "8", "batch size"},
        {"segmenter.filters", "64", "filters per encoder/decoder convolution"},
        {"segmenter.z_dim", "256", "bottleneck latent width Z"},
        {"segmenter.threshold", "0.5", "mask binarization threshold"},

        // ---- mask perturbation ----
        {"perturb.control_points", "12", "b-spline control points per contour"},
        {"perturb.magnitude", "0.1", "radial displacement scale in [0,1]"},

        // ---- class-aware GAN ----
        {"cagan.lr", "1e-3", "learning rate for G and D"},
        {"cagan.beta1", "0.93", "Adam beta1"},
        {"cagan.beta2", "0.999", "Adam beta2"},
        {"cagan.iters", "100000", "generator update iterations (cap)"},
        {"cagan.batch", "8", "batch size"},
        {"cagan.n_critic", "5", "critic steps per generator step"},
        {"cagan.lambda_cls", "1", "class-loss weight"},
        {"cagan.lambda_content", "10", "content-loss weight"},
        {"cagan.lambda_gp", "10", "gradient-penalty weight"},
        {"cagan.w_perc", "1", "content: perceptual-feature term weight"},
        {"cagan.w_mse", "1", "content: mean-squared-error term weight"},
        {"cagan.w_nmi", "1", "content: inverse-NMI term weight"},
        {"cagan.nmi_eps", "1e-4", "guard added to NMI before inversion"},
        {"cagan.nmi_bins", "64", "intensity histogram bins for NMI"},
        {"cagan.g_width", "64", "generator base channel width"},
        {"cagan.residual_blocks", "3", "residual blocks in the generator trunk"},
        {"cagan.d_widths", "64,128,256,512,1024,1024", "discriminator channel schedule"},
        {"cagan.d_norm", "instance", "discriminator normalization: instance | none"},
        {"cagan.z_source", "mix",
         "latent fed to G during training: image | mask | mix (50/50 per sample)"},
        {"cagan.checkpoint_every", "500", "iterations between checkpoints"},
        {"cagan.perc_layer", "2", "classifier block index used as perceptual features"},

        // ---- uncertainty ----
        {"uncertainty.passes", "20", "stochastic forward passes T"},
        {"uncertainty.dropout", "0.2", "masking rate for Bayesian passes"},
        {"uncertainty.reduce", "mean", "class-variance reduction to a scalar: mean | max"},
        {"uncertainty.epistemic_only", "false",
         "allow scoring without a variance head (aleatoric term forced to 0)"},

        // ---- task classifier ----
        {"classifier.lr", "1e-3", "learning rate for initial training"},
        {"classifier.beta1", "0.9", "Adam beta1 for the classifier"},
        {"classifier.epochs", "8", "initial training epochs"},
        {"classifier.batch", "16", "batch size"},
        {"classifier.width", "16", "toy backbone base channel width"},
        {"classifier.backbone", "toy_cnn", "backbone identifier"},
        {"classifier.variance_head", "true", "train the heteroscedastic variance head"},
        {"classifier.class_weighted", "false", "weight the loss by inverse class frequency"},
        {"classifier.finetune_lr", "5e-4", "learning rate for AL-round fine-tuning"},
        {"classifier.finetune_epochs", "4", "epochs per AL-round fine-tune"},
        {"classifier.finetune_freeze", "none",
         "layers frozen during fine-tuning: none | backbone | all_but_head"},

        // ---- active-learning schedule ----
        {"schedule.initial_pool_fraction", "0.03", "initially labeled fraction of train"},
        {"schedule.top_k_real", "32", "real samples labeled per round (class-agnostic)"},
        {"schedule.gen_per_class", "250", "synthetic candidates generated per class"},
        {"schedule.keep_per_class", "150", "most-informative synthetics kept per class"},
        {"schedule.stop_window", "3", "consecutive small-change rounds required to stop"},
        {"schedule.stop_epsilon", "0.1", "AUC-change threshold (units below)"},
        {"schedule.stop_epsilon_units", "pp",
         "stop_epsilon units: pp (percentage points) | absolute"},
        {"schedule.stop_rule", "window", "stopping rule: window | gain | either"},
        {"schedule.gain_threshold", "0.2",
         "gain rule: stop when a round improves AUC by less than this (pp)"},
        {"schedule.max_rounds", "10", "hard round cap"},
        {"schedule.accumulate", "true", "keep synthetics across rounds (false: replace)"},
        {"schedule.synth_cap", "100000", "ceiling on accumulated synthetic samples"},
        {"schedule.strategy", "cagan",
         "cagan | standard_da | plain_gan | no_bnn_entropy | random_select"},

        // ---- experiment harness ----
        {"experiment.budgets", "0.05,0.10,0.15,0.25,0.35,0.50,0.75,1.0",
         "label-budget fractions for the sweep"},
        {"experiment.seeds", "5", "seeds per condition (median reported)"},
        {"experiment.growth_initial_per_class", "10", "growth curve: real images per class"},
        {"experiment.growth_step_per_class", "5", "growth curve: synthetics added per step"},
        {"experiment.growth_steps", "8", "growth curve: number of steps"},

        // ---- run plumbing ----
        {"run.seed", "7", "master seed; all randomness forks from it"},
        {"run.out_root", "", "output root; empty uses $CAGAN_AL_HOME or the cwd"},
        {"run.name", "run", "run directory name"},
        {"run.resume", "false", "resume an existing run directory instead of refusing"},
    };
    return kRegistry;
}

Config Config::defaults() {
    Config c;
    for (const auto& k : registry()) c.values_[k.key] = k.def;
    return c;
}

void Config::set(const std::string& key, const std::string& value) {
    if (values_.find(key) == values_.end())
        throw ConfigError("unknown config key: " + key);
    values_[key] = value;
}

namespace {
std::string strip(const std::string& s) {
    size_t a = s.find_first_not_of(" \t");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t");
    return s.substr(a, b - a + 1);
}
}  // namespace

void Config::load_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot read config file " + path);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        std::string t = strip(line);
        if (t.empty() || t[0] == '#') continue;
        size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key=value");
        set(strip(t.substr(0, eq)), strip(t.substr(eq + 1)));
    }
}

void Config::apply_overrides(const std::vector<std::string>& kvs) {
    for (const auto& kv : kvs) {
        size_t eq = kv.find('=');
        if (eq == std::string::npos)
            throw ConfigError("override must be key=value, got: " + kv);
        set(strip(kv.substr(0, eq)), strip(kv.substr(eq + 1)));
    }
}

const std::string& Config::str(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key: " + key);
    return it->second;
}

double Config::num(const std::string& key) const {
    const std::string& v = str(key);
    try {
        size_t pos = 0;
        double d = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw ConfigError(key + ": expected a number, got '" + v + "'");
    }
}

int64_t Config::integer(const std::string& key) const {
    const std::string& v = str(key);
    try {
        size_t pos = 0;
        long long d = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw ConfigError(key + ": expected an integer, got '" + v + "'");
    }
}

bool Config::flag(const std::string& key) const {
    const std::string& v = str(key);
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError(key + ": expected a boolean, got '" + v + "'");
}

std::vector<std::string> Config::list(const std::string& key) const {
    const std::string& v = str(key);
    std::vector<std::string> out;
    std::string cur;
    for (char c : v) {
        if (c == ',') {
            out.push_back(strip(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (!strip(cur).empty() || !out.empty()) out.push_back(strip(cur));
    return out;
}

std::vector<double> Config::nums(const std::string& key) const {
    std::vector<double> out;
    for (const auto& s : list(key)) {
        try {
            out.push_back(std::stod(s));
        } catch (const std::exception&) {
            throw ConfigError(key + ": expected numbers, got '" + s + "'");
        }
    }
    return out;
}

std::string Config::frozen_text() const {
    std::ostringstream os;
    for (const auto& [k, v] : values_) os << k << "=" << v << "\n";
    return os.str();
}

void Config::freeze_to(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw DataError("cannot write " + path);
    os << frozen_text();
    os.close();
    if (os.fail()) throw DataError("write failed for " + path);
}

uint64_t Config::hash() const { return fnv1a64(frozen_text()); }

void Config::print_help(std::ostream& os) {
    os << "Config keys (override with key=value on the command line or a --config file):\n";
    size_t width = 0;
    for (const auto& k : registry()) width = std::max(width, std::string(k.key).size());
    for (const auto& k : registry()) {
        os << "  " << k.key;
        for (size_t i = std::string(k.key).size(); i < width + 2; ++i) os << ' ';
        os << "[" << k.def << "]  " << k.doc << "\n";
    }
}

}  // namespace caal
