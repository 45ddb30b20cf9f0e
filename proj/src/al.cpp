#include "caal/al.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include <json.hpp>

#include "caal/csvio.hpp"
#include "caal/image_io.hpp"

namespace caal::al {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kPi = 3.14159265358979323846;

void check_schedule(const AlScheduleConfig& s) {
    if (!(s.initial_pool_fraction > 0.0 && s.initial_pool_fraction <= 1.0))
        throw ConfigError("schedule: initial_pool_fraction must lie in (0,1]");
    if (s.top_k_real < 1) throw ConfigError("schedule: top_k_real must be positive");
    if (s.gen_per_class < 1) throw ConfigError("schedule: gen_per_class must be positive");
    if (s.keep_per_class < 1 || s.keep_per_class > s.gen_per_class)
        throw ConfigError("schedule: keep_per_class must lie in [1, gen_per_class]");
    if (s.stop_window < 1) throw ConfigError("schedule: stop_window must be >= 1");
    if (s.stop_epsilon < 0) throw ConfigError("schedule: stop_epsilon must be nonnegative");
    if (s.max_rounds < 0) throw ConfigError("schedule: max_rounds must be nonnegative");
    if (s.synthetic_mode != "accumulate" && s.synthetic_mode != "replace")
        throw ConfigError("schedule: synthetic_mode must be accumulate|replace");
    if (s.synthetic_cap < 1) throw ConfigError("schedule: synthetic_cap must be positive");
}

bool known_strategy(const std::string& s) {
    return s == "cagan" || s == "standard_da" || s == "plain_gan" || s == "no_bnn_entropy" ||
           s == "random_select";
}

uint64_t seed_from(Rng r) { return r.next_u64(); }

std::vector<unc::UncertaintyEstimate> score_pool(const cls::Classifier& c,
                                                 const std::vector<data::Sample>& pool,
                                                 const std::string& strategy,
                                                 const unc::McConfig& mc, Rng& rand_rng) {
    std::vector<unc::UncertaintyEstimate> est;
    if (strategy == "random_select") {
        est.resize(pool.size());
        for (size_t i = 0; i < pool.size(); ++i) est[i] = {pool[i].id, rand_rng.uniform(), {}};
        return est;
    }
    if (strategy == "no_bnn_entropy") {
        Tensor p = cls::predict_proba(c, pool);
        const int C = c.spec.num_classes;
        est.resize(pool.size());
        for (size_t i = 0; i < pool.size(); ++i) {
            std::vector<double> row(p.data() + i * C, p.data() + (i + 1) * C);
            est[i] = {pool[i].id, unc::entropy_score(row, c.spec.label_mode), {}};
        }
        return est;
    }
    return unc::estimate_uncertainty(c, pool, mc);
}

std::string join_labels(const std::vector<int>& labels, const std::vector<std::string>& names) {
    std::string out;
    for (size_t k = 0; k < labels.size(); ++k)
        if (labels[k]) {
            if (!out.empty()) out += "|";
            out += names[k];
        }
    return out;
}

struct Candidate {
    data::Sample s;
    double score = 0;
};

// id encodes lineage: syn_r<round>_<base>_c<class pattern>_<j>
std::string synth_id(int round, const std::string& base, const std::vector<int>& target, int j) {
    std::string cls;
    for (size_t k = 0; k < target.size(); ++k)
        if (target[k]) cls += (cls.empty() ? "" : "+") + std::to_string(k);
    return "syn_r" + std::to_string(round) + "_" + base + "_c" + cls + "_" + std::to_string(j);
}

}  // namespace

std::vector<data::Sample> augment_standard(const std::vector<data::Sample>& samples,
                                           int per_sample_count, uint64_t seed) {
    if (per_sample_count < 1) throw ConfigError("augment_standard: per_sample_count must be >= 1");
    std::vector<data::Sample> out;
    out.reserve(samples.size() * static_cast<size_t>(per_sample_count));
    Rng master(seed);
    for (size_t i = 0; i < samples.size(); ++i)
        for (int k = 0; k < per_sample_count; ++k) {
            Rng r = master.fork("da", static_cast<int64_t>(i) * per_sample_count + k);
            const int side = samples[i].image.shape()[0];
            const double theta = r.uniform(-15.0, 15.0) * kPi / 180.0;
            const double dx = r.uniform(-0.1, 0.1) * side;
            const double dy = r.uniform(-0.1, 0.1) * side;
            const bool flip = r.bernoulli(0.5);
            out.push_back(warp_sample(samples[i], theta, dx, dy, flip,
                                      samples[i].id + "_da" + std::to_string(k)));
        }
    return out;
}

data::Sample warp_sample(const data::Sample& base, double theta, double dx, double dy, bool flip,
                         const std::string& new_id) {
    const auto& sh = base.image.shape();
    if (sh.size() != 2 || sh[0] != sh[1]) throw ShapeError("warp_sample: image must be square");
    const int s = sh[0];
    const double h = (s - 1) / 2.0;
    const double ct = std::cos(theta), st = std::sin(theta);
    data::Sample out;
    out.id = new_id;
    out.labels = base.labels;
    out.patient_id = base.patient_id;
    out.synthetic = true;
    out.base_id = base.id;
    out.image = Tensor::zeros({s, s});
    const bool has_mask = base.mask.defined();
    if (has_mask) out.mask = Tensor::zeros({s, s});
    for (int r = 0; r < s; ++r)
        for (int c = 0; c < s; ++c) {
            // pull each output pixel back through the inverse transform
            double x = c - h - dx, y = r - h - dy;
            double xs = ct * x + st * y, ys = -st * x + ct * y;
            if (flip) xs = -xs;
            xs += h;
            ys += h;
            const int x0 = static_cast<int>(std::floor(xs)), y0 = static_cast<int>(std::floor(ys));
            const double fx = xs - x0, fy = ys - y0;
            auto at = [&](int yy, int xx) {
                return (xx < 0 || yy < 0 || xx >= s || yy >= s)
                           ? 0.0
                           : base.image[static_cast<int64_t>(yy) * s + xx];
            };
            out.image[static_cast<int64_t>(r) * s + c] =
                (1 - fx) * (1 - fy) * at(y0, x0) + fx * (1 - fy) * at(y0, x0 + 1) +
                (1 - fx) * fy * at(y0 + 1, x0) + fx * fy * at(y0 + 1, x0 + 1);
            if (has_mask) {
                const int xn = static_cast<int>(std::lround(xs)),
                          yn = static_cast<int>(std::lround(ys));
                out.mask[static_cast<int64_t>(r) * s + c] =
                    (xn < 0 || yn < 0 || xn >= s || yn >= s)
                        ? 0.0
                        : base.mask[static_cast<int64_t>(yn) * s + xn];
            }
        }
    return out;
}

bool stopping_check(const std::vector<double>& auc_history, double eps, int w) {
    if (auc_history.empty()) throw DomainError("stopping_check: empty history");
    if (w < 1) throw ConfigError("stopping_check: window must be positive");
    if (static_cast<int>(auc_history.size()) < w + 1) return false;
    for (size_t i = auc_history.size() - static_cast<size_t>(w); i < auc_history.size(); ++i)
        if (std::abs(auc_history[i] - auc_history[i - 1]) > eps) return false;
    return true;
}

// ---- trail persistence --------------------------------------------------------

void write_trail(const std::string& path, const AlResult& r, const AlJob& job) {
    json j;
    j["strategy"] = job.strategy;
    j["seed"] = job.seed;
    j["initial_pool"] = r.initial_pool;
    j["stop_reason"] = r.stop_reason;
    json rounds = json::array();
    for (const auto& rec : r.trail) {
        json rj;
        rj["round"] = rec.round;
        rj["selected_real"] = rec.selected_real;
        rj["kept_synthetic"] = rec.kept_synthetic;
        rj["val_auc_before"] = rec.val_auc_before;
        rj["val_auc_after"] = rec.val_auc_after;
        rj["labels_consumed"] = rec.labels_consumed;
        rj["wall_seconds"] = rec.wall_seconds;
        rounds.push_back(std::move(rj));
    }
    j["rounds"] = std::move(rounds);
    std::ofstream os(path);
    if (!os) throw DataError("write_trail: cannot write " + path);
    os << j.dump(2) << "\n";
}

AlResult read_trail(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("read_trail: missing " + path);
    json j;
    try {
        is >> j;
    } catch (const json::exception&) {
        throw DataError("read_trail: unparsable " + path);
    }
    AlResult r;
    try {
        r.initial_pool = j.at("initial_pool");
        r.stop_reason = j.at("stop_reason");
        for (const auto& rj : j.at("rounds")) {
            AlRoundRecord rec;
            rec.round = rj.at("round");
            rec.selected_real = rj.at("selected_real").get<std::vector<std::string>>();
            rec.kept_synthetic =
                rj.at("kept_synthetic").get<std::vector<std::vector<std::string>>>();
            rec.val_auc_before = rj.at("val_auc_before");
            rec.val_auc_after = rj.at("val_auc_after");
            rec.labels_consumed = rj.at("labels_consumed");
            rec.wall_seconds = rj.at("wall_seconds");
            r.trail.push_back(std::move(rec));
        }
    } catch (const json::exception&) {
        throw DataError("read_trail: missing fields in " + path);
    }
    return r;
}

// ---- the loop ----------------------------------------------------------------------

namespace {

void write_run_config(const data::DatasetManifest& m, const AlJob& job, const std::string& path) {
    json j;
    j["strategy"] = job.strategy;
    j["seed"] = job.seed;
    j["perturb_magnitude"] = job.perturb_magnitude;
    j["classes"] = m.class_names;
    json s;
    s["initial_pool_fraction"] = job.schedule.initial_pool_fraction;
    s["top_k_real"] = job.schedule.top_k_real;
    s["gen_per_class"] = job.schedule.gen_per_class;
    s["keep_per_class"] = job.schedule.keep_per_class;
    s["stop_window"] = job.schedule.stop_window;
    s["stop_epsilon"] = job.schedule.stop_epsilon;
    s["gain_threshold"] = job.schedule.gain_threshold;
    s["max_rounds"] = job.schedule.max_rounds;
    s["synthetic_mode"] = job.schedule.synthetic_mode;
    s["synthetic_cap"] = job.schedule.synthetic_cap;
    j["schedule"] = std::move(s);
    json f;
    f["lr"] = job.finetune.lr;
    f["epochs"] = job.finetune.epochs;
    f["batch"] = job.finetune.batch;
    f["class_weights"] = job.finetune.class_weights;
    f["freeze"] = job.finetune.freeze;
    f["var_weight"] = job.finetune.var_weight;
    j["finetune"] = std::move(f);
    json u;
    u["passes"] = job.scoring.passes;
    u["reduce"] = job.scoring.reduce;
    u["epistemic_only"] = job.scoring.epistemic_only;
    j["scoring"] = std::move(u);
    std::ofstream os(path);
    if (!os) throw DataError("run_al: cannot write " + path);
    os << j.dump(2) << "\n";
}

void persist_round(const std::string& run_dir, int round,
                   const std::vector<unc::UncertaintyEstimate>& pool_scores,
                   const std::set<std::string>& picked,
                   const std::vector<Candidate>& kept_synth, const data::DatasetManifest& m,
                   const cls::AucReport& val_report, const cls::Classifier& c) {
    const std::string rdir = run_dir + "/round_" + std::to_string(round);
    fs::create_directories(rdir + "/synthetic");

    CsvWriter sel(rdir + "/selected.csv");
    sel.row({"sample_id", "score", "selected"});
    for (const auto& e : pool_scores)
        sel.row({e.id, fmt_double(e.score, 17), picked.count(e.id) ? "1" : "0"});
    sel.close();

    // the manifest keeps the core column set so read_manifest can load it back;
    // lineage and scores live beside it
    CsvWriter syn(rdir + "/synthetic_manifest.csv");
    syn.row({"id", "path", "patient_id", "labels", "split", "mask_path"});
    CsvWriter sco(rdir + "/synthetic_scores.csv");
    sco.row({"id", "base_id", "score"});
    for (const auto& cand : kept_synth) {
        const std::string img_rel = "synthetic/" + cand.s.id + ".png";
        const std::string msk_rel =
            cand.s.mask.defined() ? "synthetic/" + cand.s.id + "_mask.png" : "";
        write_png_gray(rdir + "/" + img_rel, cand.s.image);
        if (cand.s.mask.defined()) write_png_mask(rdir + "/" + msk_rel, cand.s.mask);
        syn.row({cand.s.id, img_rel, cand.s.patient_id, join_labels(cand.s.labels, m.class_names),
                 "train", msk_rel});
        sco.row({cand.s.id, cand.s.base_id, fmt_double(cand.score, 17)});
    }
    syn.close();
    sco.close();

    cls::write_auc_report_json(val_report, rdir + "/auc.json");
    cls::save_classifier(c, rdir + "/checkpoint");
}

}  // namespace

AlResult run_al(const data::DatasetManifest& m, const cls::Classifier& init, const AlJob& job) {
    check_schedule(job.schedule);
    if (!known_strategy(job.strategy))
        throw ConfigError("run_al: unknown strategy '" + job.strategy + "'");
    const bool gan_aug = job.strategy != "standard_da";
    if (gan_aug && (job.gan == nullptr || job.segmenter == nullptr))
        throw CapabilityError("run_al: strategy " + job.strategy +
                              " needs a trained generator and segmenter");
    if (job.gan != nullptr && job.gan->diverged)
        throw CapabilityError("run_al: the generator checkpoint is marked diverged");
    const int C = init.spec.num_classes;
    if (C != m.num_classes()) throw ConfigError("run_al: classifier/manifest class count mismatch");

    auto train = data::load_split(m, "train");
    if (train.empty()) throw DataError("run_al: manifest has no train split");
    if (data::load_split(m, "val").empty()) throw DataError("run_al: manifest has no val split");

    Rng master(job.seed);
    const cls::SplitGuard guard{{"train", "val"}};

    // resume bookkeeping: completed rounds come from the trail on disk
    std::vector<AlRoundRecord> done;
    int64_t recorded_initial = 0;
    const std::string trail_path = job.out_dir.empty() ? "" : job.out_dir + "/trail.json";
    bool resuming = false;
    std::string prior_reason;
    if (!job.out_dir.empty() && fs::exists(trail_path)) {
        if (!job.resume)
            throw DataError("run_al: " + job.out_dir +
                            " already holds a run; pass resume to continue it");
        AlResult prior = read_trail(trail_path);
        done = std::move(prior.trail);
        recorded_initial = prior.initial_pool;
        prior_reason = prior.stop_reason;
        resuming = true;
    }
    if (!job.out_dir.empty() && !resuming) {
        fs::create_directories(job.out_dir);
        write_run_config(m, job, job.out_dir + "/config.json");
    }

    // initial labeled pool: a seeded cut of the train split
    std::vector<size_t> order(train.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    master.fork("init").shuffle(order);
    const int64_t want =
        std::llround(job.schedule.initial_pool_fraction * static_cast<double>(train.size()));
    const size_t l0 = static_cast<size_t>(std::clamp<int64_t>(want, 1, train.size()));
    if (resuming && recorded_initial != static_cast<int64_t>(l0))
        throw DataError("run_al: resumed trail was produced by a different schedule");

    std::set<std::string> labeled;
    for (size_t i = 0; i < l0; ++i) labeled.insert(train[order[i]].id);
    for (const auto& rec : done)
        for (const auto& id : rec.selected_real) labeled.insert(id);

    std::map<std::string, const data::Sample*> by_id;
    for (const auto& s : train) by_id[s.id] = &s;

    AlResult res;
    res.initial_pool = static_cast<int64_t>(l0);
    res.trail = done;
    res.classifier = cls::clone_classifier(init);

    auto labeled_samples = [&] {
        std::vector<data::Sample> out;
        for (const auto& s : train)
            if (labeled.count(s.id)) out.push_back(s);
        return out;
    };
    auto unlabeled_samples = [&] {
        std::vector<data::Sample> out;
        for (const auto& s : train)
            if (!labeled.count(s.id)) out.push_back(s);
        return out;
    };

    std::vector<data::Sample> synthetic_pool;
    std::vector<double> auc_history;

    if (resuming) {
        // a budget stop reopens when the budget grows; data-driven stops are final
        const bool budget_stop = prior_reason == "max_rounds" &&
                                 (done.empty() ? 0 : done.back().round) < job.schedule.max_rounds;
        if (!prior_reason.empty() && prior_reason != "in_progress" && !budget_stop) {
            // nothing left to do; hand back the final checkpoint and trail
            res.stop_reason = prior_reason;
            if (!done.empty())
                res.classifier = cls::load_classifier(job.out_dir + "/round_" +
                                                      std::to_string(done.back().round) +
                                                      "/checkpoint");
            return res;
        }
        if (!done.empty()) {
            res.classifier = cls::load_classifier(
                job.out_dir + "/round_" + std::to_string(done.back().round) + "/checkpoint");
            auc_history.push_back(done.front().val_auc_before);
            for (const auto& rec : done) auc_history.push_back(rec.val_auc_after);
            const bool replace = job.schedule.synthetic_mode == "replace";
            const int first = replace ? done.back().round : 1;
            std::map<std::string, int> main_idx;
            for (int k = 0; k < C; ++k) main_idx[m.class_names[static_cast<size_t>(k)]] = k;
            for (int k = first; k <= done.back().round; ++k) {
                const std::string rdir = job.out_dir + "/round_" + std::to_string(k);
                auto sm = data::read_manifest(rdir + "/synthetic_manifest.csv");
                std::map<std::string, std::string> base_of;
                auto rows = read_csv(rdir + "/synthetic_scores.csv");
                for (size_t i = 1; i < rows.size(); ++i)
                    if (rows[i].size() >= 2) base_of[rows[i][0]] = rows[i][1];
                for (const auto& e : sm.entries) {
                    data::Sample s = data::load_sample(sm, e);
                    // the round manifest may not mention every class, so its
                    // token indices need remapping into the run's class order
                    std::vector<int> lab(static_cast<size_t>(C), 0);
                    for (size_t t = 0; t < s.labels.size(); ++t)
                        if (s.labels[t]) {
                            auto it = main_idx.find(sm.class_names[t]);
                            if (it == main_idx.end())
                                throw DataError("run_al: resumed synthetic sample " + s.id +
                                                " carries unknown class " + sm.class_names[t]);
                            lab[static_cast<size_t>(it->second)] = 1;
                        }
                    s.labels = std::move(lab);
                    s.synthetic = true;
                    auto bit = base_of.find(s.id);
                    if (bit != base_of.end()) s.base_id = bit->second;
                    synthetic_pool.push_back(std::move(s));
                }
            }
            while (static_cast<int64_t>(synthetic_pool.size()) > job.schedule.synthetic_cap)
                synthetic_pool.erase(synthetic_pool.begin());
        }
    }

    auto flush_trail = [&](const std::string& reason) {
        res.stop_reason = reason;
        if (!trail_path.empty()) write_trail(trail_path, res, job);
    };

    if (job.schedule.max_rounds == 0) {
        // nothing to run; hand back the starting point untouched
        flush_trail("max_rounds");
        return res;
    }

    if (!resuming || done.empty()) {
        // round 0: train on the initial pool and take the baseline reading
        cls::FinetuneHyper hy = job.finetune;
        hy.seed = seed_from(master.fork("ft", 0));
        cls::finetune(res.classifier, labeled_samples(), hy);
        auc_history.push_back(cls::evaluate(res.classifier, m, "val", &guard).macro);
    }

    const int start_round = done.empty() ? 1 : done.back().round + 1;
    if (start_round <= job.schedule.max_rounds &&
        unlabeled_samples().size() < static_cast<size_t>(job.schedule.top_k_real))
        throw ScheduleError("run_al: unlabeled pool smaller than top_k_real before round " +
                            std::to_string(start_round));
    flush_trail("in_progress");

    for (int r = start_round; r <= job.schedule.max_rounds; ++r) {
        const auto t0 = std::chrono::steady_clock::now();
        AlRoundRecord rec;
        rec.round = r;
        rec.val_auc_before = auc_history.back();

        // 1-2) score the unlabeled pool, take the top slice
        auto pool = unlabeled_samples();
        Rng rand_rng = master.fork("rand", r);
        unc::McConfig mc = job.scoring;
        mc.seed = seed_from(master.fork("score", r));
        auto est = score_pool(res.classifier, pool, job.strategy, mc, rand_rng);
        auto ranked = unc::rank_by_informativeness(est, job.schedule.top_k_real,
                                                   seed_from(master.fork("tie", r)));
        rec.selected_real = ranked.order;
        std::set<std::string> picked(ranked.order.begin(), ranked.order.end());

        // 3) build augmentation candidates around the picked samples
        std::vector<Candidate> cands;
        if (gan_aug) {
            Rng pr = master.fork("pert", r);
            for (size_t i = 0; i < rec.selected_real.size(); ++i) {
                const data::Sample& base = *by_id.at(rec.selected_real[i]);
                seg::MaskLatent ml =
                    seg::extract_latent(*job.segmenter, base.image, seg::LatentInput::image);
                auto variants =
                    seg::perturb_mask(*job.segmenter, ml, base.id, job.perturb_magnitude,
                                      job.schedule.gen_per_class,
                                      seed_from(pr.fork("s", static_cast<int64_t>(i))));
                if (job.strategy == "plain_gan") {
                    for (int j = 0; j < job.schedule.gen_per_class; ++j) {
                        Candidate cand;
                        cand.s = cagan::generate(*job.gan, base, variants[static_cast<size_t>(j)],
                                                 base.labels,
                                                 synth_id(r, base.id, base.labels, j));
                        snap_to_gray_grid(cand.s.image);
                        cands.push_back(std::move(cand));
                    }
                } else {
                    for (int cl = 0; cl < C; ++cl) {
                        std::vector<int> target(static_cast<size_t>(C), 0);
                        target[static_cast<size_t>(cl)] = 1;
                        for (int j = 0; j < job.schedule.gen_per_class; ++j) {
                            Candidate cand;
                            cand.s = cagan::generate(*job.gan, base,
                                                     variants[static_cast<size_t>(j)], target,
                                                     synth_id(r, base.id, target, j));
                            snap_to_gray_grid(cand.s.image);
                            cands.push_back(std::move(cand));
                        }
                    }
                }
            }
        } else {
            // classic augmentation keeps everything; volume matched to the
            // C * keep_per_class the generator path would add
            std::vector<data::Sample> picked_samples;
            for (const auto& id : rec.selected_real) picked_samples.push_back(*by_id.at(id));
            const int per = std::max(
                1, (C * job.schedule.keep_per_class + job.schedule.top_k_real - 1) /
                       job.schedule.top_k_real);
            auto aug = augment_standard(picked_samples, per, seed_from(master.fork("da", r)));
            for (auto& s : aug) {
                snap_to_gray_grid(s.image);
                Candidate cand;
                cand.s = std::move(s);
                cands.push_back(std::move(cand));
            }
        }

        // score candidates with the pre-round classifier, keep the top of each
        // target-class group; classic augmentation skips the cut
        std::vector<Candidate> kept;
        if (gan_aug && !cands.empty()) {
            std::vector<data::Sample> cand_samples;
            cand_samples.reserve(cands.size());
            for (const auto& cand : cands) cand_samples.push_back(cand.s);
            Rng crand = master.fork("crand", r);
            unc::McConfig cmc = job.scoring;
            cmc.seed = seed_from(master.fork("cscore", r));
            auto cest = score_pool(res.classifier, cand_samples, job.strategy, cmc, crand);
            std::map<std::string, double> score_of;
            for (size_t i = 0; i < cest.size(); ++i) score_of[cest[i].id] = cest[i].score;
            for (auto& cand : cands) cand.score = score_of.at(cand.s.id);

            std::map<std::string, std::vector<unc::UncertaintyEstimate>> groups;
            std::map<std::string, Candidate*> by_cid;
            for (auto& cand : cands) {
                groups[join_labels(cand.s.labels, m.class_names)].push_back(
                    {cand.s.id, cand.score, {}});
                by_cid[cand.s.id] = &cand;
            }
            int gi = 0;
            for (auto& [pattern, group] : groups) {
                auto cut = unc::rank_by_informativeness(
                    group, job.schedule.keep_per_class,
                    seed_from(master.fork("ctie", r).fork("g", gi++)));
                for (const auto& id : cut.order) kept.push_back(*by_cid.at(id));
            }
        } else {
            kept = std::move(cands);
            for (auto& cand : kept) cand.score = 0.0;
        }

        rec.kept_synthetic.assign(static_cast<size_t>(C), {});
        for (const auto& cand : kept)
            for (int k = 0; k < C; ++k)
                if (cand.s.labels[static_cast<size_t>(k)])
                    rec.kept_synthetic[static_cast<size_t>(k)].push_back(cand.s.id);

        // 4-6) grow the labeled set, refresh the synthetic pool, fine-tune
        for (const auto& id : rec.selected_real) labeled.insert(id);
        if (job.schedule.synthetic_mode == "replace") synthetic_pool.clear();
        for (const auto& cand : kept) synthetic_pool.push_back(cand.s);
        while (static_cast<int64_t>(synthetic_pool.size()) > job.schedule.synthetic_cap)
            synthetic_pool.erase(synthetic_pool.begin());

        auto pool_now = labeled_samples();
        pool_now.insert(pool_now.end(), synthetic_pool.begin(), synthetic_pool.end());
        cls::FinetuneHyper hy = job.finetune;
        hy.seed = seed_from(master.fork("ft", r));
        cls::finetune(res.classifier, pool_now, hy);
        res.classifier.round = r;

        auto val_report = cls::evaluate(res.classifier, m, "val", &guard);
        rec.val_auc_after = val_report.macro;
        auc_history.push_back(val_report.macro);
        rec.labels_consumed =
            static_cast<int64_t>(l0) + static_cast<int64_t>(r) * job.schedule.top_k_real;
        rec.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        res.trail.push_back(rec);

        if (!job.out_dir.empty())
            persist_round(job.out_dir, r, est, picked, kept, m, val_report, res.classifier);

        const double gain = rec.val_auc_after - rec.val_auc_before;
        if (job.schedule.gain_threshold >= 0 && gain < job.schedule.gain_threshold) {
            flush_trail("gain_below_threshold");
            return res;
        }
        if (stopping_check(auc_history, job.schedule.stop_epsilon, job.schedule.stop_window)) {
            flush_trail("stable");
            return res;
        }
        if (unlabeled_samples().size() < static_cast<size_t>(job.schedule.top_k_real)) {
            flush_trail("pool_exhausted");
            return res;
        }
        flush_trail("in_progress");
    }
    flush_trail("max_rounds");
    return res;
}

}  // namespace caal::al
