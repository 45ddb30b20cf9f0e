#include "caal/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <set>

#include "caal/csvio.hpp"
#include "caal/image_io.hpp"

namespace fs = std::filesystem;

namespace caal::data {

const ManifestEntry* DatasetManifest::find(const std::string& id) const {
    for (const auto& e : entries)
        if (e.id == id) return &e;
    return nullptr;
}

std::vector<size_t> DatasetManifest::split_indices(const std::string& split) const {
    std::vector<size_t> out;
    for (size_t i = 0; i < entries.size(); ++i)
        if (entries[i].split == split) out.push_back(i);
    return out;
}

std::string DatasetManifest::label_string(const ManifestEntry& e) const {
    std::string s;
    for (size_t c = 0; c < e.labels.size(); ++c) {
        if (!e.labels[c]) continue;
        if (!s.empty()) s += '|';
        s += class_names[c];
    }
    return s;
}

std::vector<std::string> toy_class_names(int num_classes) {
    static const char* kKinds[6] = {"blob", "gradient", "ring", "streak", "haze", "bands"};
    std::vector<std::string> out;
    for (int c = 0; c < num_classes; ++c) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "c%02d_%s", c, kKinds[c % 6]);
        out.push_back(buf);
    }
    return out;
}

// ---------------------------------------------------------------- toy corpus

namespace {

struct Ellipse {
    double cx, cy, rx, ry, rot;
    bool contains(double x, double y) const {
        double dx = x - cx, dy = y - cy;
        double c = std::cos(rot), s = std::sin(rot);
        double u = (dx * c + dy * s) / rx;
        double v = (-dx * s + dy * c) / ry;
        return u * u + v * v <= 1.0;
    }
};

struct PatientAnatomy {
    Ellipse left, right;
    double bg_level;
    double tex_fx, tex_fy, tex_phase, tex_amp;
    double mediastinum_amp;
};

PatientAnatomy draw_anatomy(Rng& rng, int side) {
    double S = side;
    PatientAnatomy a;
    auto lung = [&](double cx_base) {
        Ellipse e;
        e.cx = (cx_base + rng.uniform(-0.03, 0.03)) * S;
        e.cy = (0.52 + rng.uniform(-0.04, 0.04)) * S;
        e.rx = (0.14 + rng.uniform(-0.02, 0.02)) * S;
        e.ry = (0.27 + rng.uniform(-0.03, 0.03)) * S;
        e.rot = rng.uniform(-0.12, 0.12);
        return e;
    };
    a.left = lung(0.31);
    a.right = lung(0.69);
    a.bg_level = 0.42 + rng.uniform(-0.04, 0.04);
    a.tex_fx = rng.uniform(0.5, 1.8);
    a.tex_fy = rng.uniform(0.5, 1.8);
    a.tex_phase = rng.uniform(0.0, 6.28318530717958647692);
    a.tex_amp = 0.06 + rng.uniform(0.0, 0.04);
    a.mediastinum_amp = 0.12 + rng.uniform(0.0, 0.06);
    return a;
}

// per-image jitter: breathing-like scale change on the lung fields
PatientAnatomy jitter(const PatientAnatomy& base, Rng& rng) {
    PatientAnatomy a = base;
    double s = 1.0 + rng.uniform(-0.03, 0.03);
    for (Ellipse* e : {&a.left, &a.right}) {
        e->rx *= s;
        e->ry *= s;
        e->cx += rng.uniform(-0.8, 0.8);
        e->cy += rng.uniform(-0.8, 0.8);
    }
    return a;
}

std::vector<int> draw_labels(const ToyConfig& cfg, Rng& rng) {
    std::vector<int> labels(static_cast<size_t>(cfg.num_classes), 0);
    if (cfg.allow_normal && rng.uniform() < cfg.normal_prob) return labels;
    size_t primary = rng.categorical(cfg.imbalance);
    labels[primary] = 1;
    if (cfg.label_mode == "multilabel" && cfg.num_classes > 1 &&
        rng.uniform() < cfg.second_label_prob) {
        std::vector<double> w = cfg.imbalance;
        w[primary] = 0.0;
        labels[rng.categorical(w)] = 1;
    }
    return labels;
}

// class artifacts are painted inside the lung fields so that the class signal
// lives in the masked region the generator is conditioned on
void paint_artifact(Tensor& img, const Tensor& mask, int class_idx, const ToyConfig& cfg,
                    Rng& rng) {
    int S = cfg.side;
    double a = cfg.artifact_strength;
    int kind = class_idx % 6;
    // variant index flips which lung is preferred for repeated kinds
    bool prefer_left = ((class_idx / 6) % 2 == 0) ? rng.bernoulli(0.5) : rng.bernoulli(0.2);

    // collect foreground pixels of the preferred half (fallback: whole mask)
    std::vector<std::pair<int, int>> fg;
    for (int y = 0; y < S; ++y)
        for (int x = 0; x < S; ++x)
            if (mask[static_cast<int64_t>(y) * S + x] > 0.5 &&
                (prefer_left ? x < S / 2 : x >= S / 2))
                fg.push_back({y, x});
    if (fg.empty()) {
        for (int y = 0; y < S; ++y)
            for (int x = 0; x < S; ++x)
                if (mask[static_cast<int64_t>(y) * S + x] > 0.5) fg.push_back({y, x});
    }
    if (fg.empty()) return;

    auto masked_add = [&](int y, int x, double v) {
        int64_t i = static_cast<int64_t>(y) * S + x;
        if (mask[i] > 0.5) img[i] += v;
    };
    auto pick_center = [&]() { return fg[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(fg.size()) - 1))]; };

    switch (kind) {
        case 0: {  // bright blobs
            int nb = 1 + static_cast<int>(rng.bernoulli(0.5));
            for (int b = 0; b < nb; ++b) {
                auto [cy, cx] = pick_center();
                double sig = S * (0.045 + rng.uniform(0.0, 0.035));
                for (auto [y, x] : fg) {
                    double d2 = (y - cy) * double(y - cy) + (x - cx) * double(x - cx);
                    masked_add(y, x, a * std::exp(-d2 / (2 * sig * sig)));
                }
            }
            break;
        }
        case 1: {  // vertical gradient (fluid-like)
            int ymin = S, ymax = 0;
            for (auto [y, x] : fg) {
                ymin = std::min(ymin, y);
                ymax = std::max(ymax, y);
            }
            double span = std::max(1, ymax - ymin);
            for (auto [y, x] : fg) masked_add(y, x, a * 0.9 * (y - ymin) / span);
            break;
        }
        case 2: {  // bright ring
            auto [cy, cx] = pick_center();
            double r0 = S * (0.07 + rng.uniform(0.0, 0.05));
            double w = S * 0.018;
            for (auto [y, x] : fg) {
                double d = std::sqrt((y - cy) * double(y - cy) + (x - cx) * double(x - cx));
                masked_add(y, x, a * std::exp(-(d - r0) * (d - r0) / (2 * w * w)));
            }
            break;
        }
        case 3: {  // oriented streak
            auto [cy, cx] = pick_center();
            double phi = rng.uniform(0.0, 3.14159265358979323846);
            double nx = -std::sin(phi), ny = std::cos(phi);
            double w = S * 0.016;
            for (auto [y, x] : fg) {
                double d = (x - cx) * nx + (y - cy) * ny;
                masked_add(y, x, a * 0.8 * std::exp(-d * d / (2 * w * w)));
            }
            break;
        }
        case 4: {  // diffuse haze over one lung
            for (auto [y, x] : fg) masked_add(y, x, a * 0.45);
            break;
        }
        default: {  // horizontal bands
            double lambda = S * (0.12 + rng.uniform(0.0, 0.08));
            double phase = rng.uniform(0.0, 6.28318530717958647692);
            for (auto [y, x] : fg)
                masked_add(y, x, a * 0.5 * 0.5 *
                                     (1.0 + std::sin(6.28318530717958647692 * y / lambda + phase)));
            break;
        }
    }
}

void render_image(Tensor& img, Tensor& mask, const PatientAnatomy& an, const ToyConfig& cfg,
                  const std::vector<int>& labels, Rng& rng) {
    int S = cfg.side;
    double Sf = S;
    Ellipse body{Sf * 0.5, Sf * 0.55, Sf * 0.43, Sf * 0.47, 0.0};
    for (int y = 0; y < S; ++y) {
        for (int x = 0; x < S; ++x) {
            int64_t i = static_cast<int64_t>(y) * S + x;
            bool in_lung = an.left.contains(x, y) || an.right.contains(x, y);
            mask[i] = in_lung ? 1.0 : 0.0;
            double v = body.contains(x, y) ? an.bg_level : an.bg_level - 0.22;
            v += an.tex_amp *
                 std::sin(6.28318530717958647692 * (an.tex_fx * x + an.tex_fy * y) / Sf +
                          an.tex_phase);
            double dx = (x - Sf * 0.5) / (Sf * 0.10);
            v += an.mediastinum_amp * std::exp(-dx * dx);
            if (in_lung) v -= 0.20;  // air is dark
            img[i] = v;
        }
    }
    for (int c = 0; c < cfg.num_classes; ++c)
        if (labels[static_cast<size_t>(c)]) paint_artifact(img, mask, c, cfg, rng);
    for (int64_t i = 0; i < img.size(); ++i) {
        img[i] += cfg.noise * rng.uniform(-1.0, 1.0);
        img[i] = std::clamp(img[i], 0.0, 1.0);
    }
}

}  // namespace

DatasetManifest generate_toy_corpus(const ToyConfig& cfg, const std::string& out_dir) {
    if (cfg.num_classes < 2 && !cfg.allow_normal)
        throw ConfigError("data.num_classes: need >= 2 classes (or allow_normal)");
    if (cfg.num_classes < 1) throw ConfigError("data.num_classes: need >= 1");
    if (cfg.side < 32) throw ConfigError("data.side: need >= 32");
    if (cfg.num_patients < 1) throw ConfigError("data.num_patients: need >= 1");
    if (cfg.images_per_patient < 1) throw ConfigError("data.images_per_patient: need >= 1");
    if (static_cast<int>(cfg.imbalance.size()) != cfg.num_classes)
        throw ConfigError("data.imbalance: need exactly num_classes weights");
    for (double w : cfg.imbalance)
        if (!(w > 0.0)) throw ConfigError("data.imbalance: weights must be strictly positive");
    if (!(cfg.second_label_prob >= 0.0 && cfg.second_label_prob <= 1.0))
        throw ConfigError("data.second_label_prob: must lie in [0,1]");

    fs::create_directories(fs::path(out_dir) / "images");
    fs::create_directories(fs::path(out_dir) / "masks");

    DatasetManifest m;
    m.root = out_dir;
    m.class_names = toy_class_names(cfg.num_classes);

    Rng master(cfg.seed);
    Rng label_rng = master.fork("labels");

    // draw all labels first so rare classes can be guaranteed presence
    std::vector<std::vector<int>> all_labels;
    int total = cfg.num_patients * cfg.images_per_patient;
    all_labels.reserve(static_cast<size_t>(total));
    for (int i = 0; i < total; ++i) all_labels.push_back(draw_labels(cfg, label_rng));
    for (int c = 0; c < cfg.num_classes; ++c) {
        bool present = false;
        for (const auto& l : all_labels)
            if (l[static_cast<size_t>(c)]) {
                present = true;
                break;
            }
        if (!present && total > c) {  // deterministic fallback, effectively never hit
            std::fill(all_labels[static_cast<size_t>(c)].begin(),
                      all_labels[static_cast<size_t>(c)].end(), 0);
            all_labels[static_cast<size_t>(c)][static_cast<size_t>(c)] = 1;
        }
    }

    Tensor img = Tensor::zeros({cfg.side, cfg.side});
    Tensor mask = Tensor::zeros({cfg.side, cfg.side});
    int flat = 0;
    for (int p = 0; p < cfg.num_patients; ++p) {
        Rng prng = master.fork("patient", p);
        PatientAnatomy anatomy = draw_anatomy(prng, cfg.side);
        char pid[16];
        std::snprintf(pid, sizeof(pid), "p%04d", p);
        for (int k = 0; k < cfg.images_per_patient; ++k, ++flat) {
            Rng irng = prng.fork("img", k);
            PatientAnatomy an = jitter(anatomy, irng);
            const std::vector<int>& labels = all_labels[static_cast<size_t>(flat)];
            render_image(img, mask, an, cfg, labels, irng);

            char iid[32];
            std::snprintf(iid, sizeof(iid), "%s_i%02d", pid, k);
            std::string img_rel = std::string("images/") + iid + ".png";
            std::string mask_rel = std::string("masks/") + iid + ".png";
            write_png_gray((fs::path(out_dir) / img_rel).string(), img);
            write_png_mask((fs::path(out_dir) / mask_rel).string(), mask);

            ManifestEntry e;
            e.id = iid;
            e.path = img_rel;
            e.patient_id = pid;
            e.labels = labels;
            e.mask_path = mask_rel;
            m.entries.push_back(std::move(e));
        }
    }
    return m;
}

// ---------------------------------------------------------------- splits

DatasetManifest split_by_patient(DatasetManifest m, const std::vector<double>& fractions,
                                 uint64_t seed) {
    if (fractions.size() != 3) throw SplitError("split: need train,val,test fractions");
    double sum = fractions[0] + fractions[1] + fractions[2];
    if (std::abs(sum - 1.0) > 1e-9) throw SplitError("split: fractions must sum to 1");

    std::map<std::string, std::vector<size_t>> by_patient;
    for (size_t i = 0; i < m.entries.size(); ++i) by_patient[m.entries[i].patient_id].push_back(i);
    if (by_patient.size() < 3)
        throw SplitError("split: need >= 3 patients, have " + std::to_string(by_patient.size()));

    std::vector<std::string> patients;
    for (const auto& [pid, _] : by_patient) patients.push_back(pid);
    std::sort(patients.begin(), patients.end());
    Rng rng = Rng(seed).fork("split");
    rng.shuffle(patients);

    const char* names[3] = {"train", "val", "test"};
    double total = static_cast<double>(m.entries.size());
    double assigned[3] = {0, 0, 0};
    bool has_any[3] = {false, false, false};
    for (const auto& pid : patients) {
        double n = static_cast<double>(by_patient[pid].size());
        // fill the split with the largest remaining deficit; unfilled splits first
        int best = 0;
        double best_deficit = -1e18;
        for (int s = 0; s < 3; ++s) {
            double deficit = fractions[static_cast<size_t>(s)] - assigned[s] / total;
            if (!has_any[s]) deficit += 1.0;  // guarantee every split is nonempty
            if (deficit > best_deficit) {
                best_deficit = deficit;
                best = s;
            }
        }
        for (size_t i : by_patient[pid]) m.entries[i].split = names[best];
        assigned[best] += n;
        has_any[best] = true;
    }
    return m;
}

ClassDistribution class_distribution(const DatasetManifest& m, const std::vector<size_t>& idx) {
    if (idx.empty()) throw DomainError("class_distribution: empty sample set");
    ClassDistribution d;
    d.counts.assign(static_cast<size_t>(m.num_classes()), 0);
    d.total = static_cast<int64_t>(idx.size());
    for (size_t i : idx)
        for (size_t c = 0; c < m.entries[i].labels.size(); ++c)
            if (m.entries[i].labels[c]) d.counts[c]++;
    for (int64_t c : d.counts) d.fractions.push_back(static_cast<double>(c) / d.total);
    return d;
}

ClassDistribution class_distribution(const DatasetManifest& m) {
    std::vector<size_t> all(m.entries.size());
    for (size_t i = 0; i < all.size(); ++i) all[i] = i;
    return class_distribution(m, all);
}

// ---------------------------------------------------------------- manifest io

void write_manifest(const DatasetManifest& m, const std::string& csv_path) {
    CsvWriter w(csv_path);
    w.row({"id", "path", "patient_id", "labels", "split", "mask_path"});
    for (const auto& e : m.entries)
        w.row({e.id, e.path, e.patient_id, m.label_string(e), e.split, e.mask_path});
    w.close();
}

DatasetManifest read_manifest(const std::string& csv_path) {
    auto rows = read_csv(csv_path);
    if (rows.empty()) throw DataError(csv_path + ": empty manifest");
    const std::vector<std::string> header = {"id",     "path",  "patient_id",
                                             "labels", "split", "mask_path"};
    if (rows[0] != header) throw DataError(csv_path + ": unexpected manifest header");

    DatasetManifest m;
    m.root = fs::path(csv_path).parent_path().string();
    if (m.root.empty()) m.root = ".";

    // first pass: the sorted union of label tokens fixes class identity
    std::set<std::string> names;
    std::vector<std::vector<std::string>> tokens(rows.size());
    for (size_t r = 1; r < rows.size(); ++r) {
        if (rows[r].size() != 6)
            throw DataError(csv_path + ": row " + std::to_string(r + 1) + ": expected 6 fields");
        const std::string& ls = rows[r][3];
        std::string cur;
        for (char ch : ls) {
            if (ch == '|') {
                if (!cur.empty()) tokens[r].push_back(cur);
                cur.clear();
            } else {
                cur += ch;
            }
        }
        if (!cur.empty()) tokens[r].push_back(cur);
        for (const auto& t : tokens[r]) names.insert(t);
    }
    m.class_names.assign(names.begin(), names.end());

    std::map<std::string, size_t> index;
    for (size_t c = 0; c < m.class_names.size(); ++c) index[m.class_names[c]] = c;

    std::set<std::string> seen_ids;
    for (size_t r = 1; r < rows.size(); ++r) {
        ManifestEntry e;
        e.id = rows[r][0];
        e.path = rows[r][1];
        e.patient_id = rows[r][2];
        e.split = rows[r][4];
        e.mask_path = rows[r][5];
        e.labels.assign(m.class_names.size(), 0);
        for (const auto& t : tokens[r]) e.labels[index[t]] = 1;
        if (!seen_ids.insert(e.id).second)
            throw DataError(csv_path + ": duplicate id " + e.id);
        if (e.split != "train" && e.split != "val" && e.split != "test" && !e.split.empty())
            throw DataError(csv_path + ": bad split '" + e.split + "' on " + e.id);
        m.entries.push_back(std::move(e));
    }
    return m;
}

// ---------------------------------------------------------------- loading

Tensor load_image(const DatasetManifest& m, const ManifestEntry& e) {
    return read_png_gray((fs::path(m.root) / e.path).string());
}

Tensor load_mask(const DatasetManifest& m, const ManifestEntry& e) {
    if (e.mask_path.empty()) throw DataError(e.id + ": no mask recorded");
    return read_png_mask((fs::path(m.root) / e.mask_path).string());
}

Sample load_sample(const DatasetManifest& m, const ManifestEntry& e) {
    Sample s;
    s.id = e.id;
    s.image = load_image(m, e);
    if (!e.mask_path.empty()) s.mask = load_mask(m, e);
    s.labels = e.labels;
    s.patient_id = e.patient_id;
    return s;
}

std::vector<Sample> load_split(const DatasetManifest& m, const std::string& split) {
    std::vector<Sample> out;
    for (size_t i : m.split_indices(split)) out.push_back(load_sample(m, m.entries[i]));
    return out;
}

}  // namespace caal::data
