#include "caal/harness.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include <json.hpp>

#include "caal/csvio.hpp"
#include "caal/image_io.hpp"

namespace caal::harness {

namespace fs = std::filesystem;
using nlohmann::json;

double median_of(std::vector<double> v) {
    if (v.empty()) throw DomainError("median_of: empty sample");
    std::sort(v.begin(), v.end());
    const size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double iqr_of(std::vector<double> v) {
    if (v.empty()) throw DomainError("iqr_of: empty sample");
    if (v.size() < 2) return 0.0;
    std::sort(v.begin(), v.end());
    const size_t n = v.size();
    // Tukey hinges: an odd-length sample shares its median with both halves
    std::vector<double> lo(v.begin(), v.begin() + (n + 1) / 2);
    std::vector<double> hi(v.begin() + n / 2, v.end());
    return median_of(hi) - median_of(lo);
}

namespace {

uint64_t seed_from(Rng r) { return r.next_u64(); }

void check_seeds(const std::vector<uint64_t>& seeds) {
    if (seeds.empty()) throw ConfigError("harness: at least one seed required");
    std::set<uint64_t> uniq(seeds.begin(), seeds.end());
    if (uniq.size() != seeds.size()) throw ConfigError("harness: duplicate seeds");
}

json finetune_json(const cls::FinetuneHyper& h) {
    return {{"lr", h.lr},
            {"epochs", h.epochs},
            {"batch", h.batch},
            {"class_weights", h.class_weights},
            {"freeze", h.freeze},
            {"var_weight", h.var_weight}};
}

json classifier_json(const cls::ClassifierSpec& s) {
    return {{"backbone", s.backbone},     {"side", s.side},
            {"num_classes", s.num_classes}, {"width", s.width},
            {"label_mode", s.label_mode}, {"mask_rate", s.mask_rate},
            {"variance_head", s.variance_head}};
}

json schedule_json(const al::AlScheduleConfig& s) {
    return {{"initial_pool_fraction", s.initial_pool_fraction},
            {"top_k_real", s.top_k_real},
            {"gen_per_class", s.gen_per_class},
            {"keep_per_class", s.keep_per_class},
            {"stop_window", s.stop_window},
            {"stop_epsilon", s.stop_epsilon},
            {"gain_threshold", s.gain_threshold},
            {"synthetic_mode", s.synthetic_mode},
            {"synthetic_cap", s.synthetic_cap}};
}

uint64_t hash_config(const json& j) { return fnv1a64(j.dump()); }

std::string auc_cell(const std::vector<double>& per_seed, double value) {
    return per_seed.empty() ? "undef" : fmt_double(value, 17);
}

void require_out_dir(const std::string& dir) {
    fs::create_directories(dir);
}

std::string hex64(uint64_t h) {
    char buf[19];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

json provenance_json(const Provenance& p) {
    return {{"seeds", p.seeds},
            {"config_hash", p.config_hash},
            {"config_hash_hex", hex64(p.config_hash)},
            {"code_version", p.code_version}};
}

void dump_json(const json& j, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw DataError("harness: cannot write " + path);
    os << j.dump(2) << "\n";
}

}  // namespace

// ---- label-budget sweep ------------------------------------------------------------

SweepReport label_budget_sweep(const data::DatasetManifest& m, const SweepJob& job) {
    check_seeds(job.seeds);
    if (job.budgets.empty()) throw ConfigError("sweep: no budgets");
    for (double b : job.budgets)
        if (!(b > 0.0 && b <= 1.0)) throw ConfigError("sweep: budgets must lie in (0,1]");
    std::vector<double> budgets = job.budgets;
    std::sort(budgets.begin(), budgets.end());
    if (std::adjacent_find(budgets.begin(), budgets.end()) != budgets.end())
        throw ConfigError("sweep: duplicate budgets");
    if (job.methods.empty()) throw ConfigError("sweep: no methods");
    for (const auto& meth : job.methods)
        if (meth != "fsl_random" && meth != "cagan" && meth != "standard_da" &&
            meth != "plain_gan" && meth != "no_bnn_entropy" && meth != "random_select")
            throw ConfigError("sweep: unknown method '" + meth + "'");

    const auto train = data::load_split(m, "train");
    if (train.empty()) throw DataError("sweep: manifest has no train split");
    const int64_t n = static_cast<int64_t>(train.size());

    SweepReport rep;
    rep.prov.seeds = job.seeds;
    rep.prov.code_version = kVersion;
    rep.prov.config_hash = hash_config({{"kind", "label_budget_sweep"},
                                        {"budgets", budgets},
                                        {"methods", job.methods},
                                        {"seeds", job.seeds},
                                        {"seed", job.seed},
                                        {"classifier", classifier_json(job.classifier)},
                                        {"fsl_finetune", finetune_json(job.fsl_finetune)},
                                        {"al_finetune", finetune_json(job.al.finetune)},
                                        {"schedule", schedule_json(job.al.schedule)},
                                        {"headline_slack", job.headline_slack}});
    rep.budgets = budgets;
    rep.methods = job.methods;
    rep.headline_slack = job.headline_slack;

    const int64_t test_before = cls::evaluate_count("test");
    int64_t models_trained = 0;

    Rng master(job.seed);
    for (const auto& meth : job.methods) {
        for (size_t bi = 0; bi < budgets.size(); ++bi) {
            const double budget = budgets[bi];
            SweepCell cell;
            cell.method = meth;
            cell.budget = budget;
            const int64_t budget_n = std::max<int64_t>(1, std::llround(budget * n));

            if (meth == "fsl_random") {
                for (uint64_t sv : job.seeds) {
                    Rng cond = master.fork(meth).fork("b", static_cast<int64_t>(bi))
                                   .fork("s", static_cast<int64_t>(sv));
                    std::vector<size_t> idx(train.size());
                    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
                    cond.fork("pick").shuffle(idx);
                    idx.resize(static_cast<size_t>(budget_n));
                    std::sort(idx.begin(), idx.end());  // budget 1.0 == the plain run
                    std::vector<data::Sample> subset;
                    for (size_t i : idx) subset.push_back(train[i]);
                    cls::Classifier c(job.classifier, seed_from(cond.fork("init")));
                    cls::FinetuneHyper hy = job.fsl_finetune;
                    hy.seed = seed_from(cond.fork("ft"));
                    cls::finetune(c, subset, hy);
                    ++models_trained;
                    cell.per_seed_labels.push_back(budget_n);
                    cell.per_seed.push_back(cls::evaluate(c, m, "test").macro);
                }
            } else {
                const double l0_frac = job.al.schedule.initial_pool_fraction;
                const int64_t l0 =
                    std::clamp<int64_t>(std::llround(l0_frac * static_cast<double>(n)), 1, n);
                const int64_t rounds = (budget_n - l0) / job.al.schedule.top_k_real;
                if (budget < l0_frac) {
                    cell.skip_reason = "budget below the initial pool fraction";
                } else if (rounds < 1) {
                    cell.skip_reason = "budget admits no selection round";
                } else {
                    for (uint64_t sv : job.seeds) {
                        Rng cond = master.fork(meth).fork("b", static_cast<int64_t>(bi))
                                       .fork("s", static_cast<int64_t>(sv));
                        al::AlJob aj = job.al;
                        aj.strategy = meth;
                        aj.schedule.max_rounds = static_cast<int>(rounds);
                        aj.seed = seed_from(cond.fork("al"));
                        aj.out_dir.clear();
                        cls::Classifier c(job.classifier, seed_from(cond.fork("init")));
                        auto res = al::run_al(m, c, aj);
                        ++models_trained;
                        cell.per_seed_labels.push_back(res.trail.empty()
                                                           ? res.initial_pool
                                                           : res.trail.back().labels_consumed);
                        cell.per_seed.push_back(cls::evaluate(res.classifier, m, "test").macro);
                    }
                }
            }
            if (!cell.per_seed.empty()) {
                cell.median = median_of(cell.per_seed);
                cell.iqr = iqr_of(cell.per_seed);
                cell.labels_used =
                    *std::max_element(cell.per_seed_labels.begin(), cell.per_seed_labels.end());
            }
            rep.cells.push_back(std::move(cell));
        }
    }
    if (cls::evaluate_count("test") - test_before > models_trained)
        throw GuardError("sweep: test split touched more than once per trained model");

    auto cell_at = [&](const std::string& meth, double b) -> const SweepCell* {
        for (const auto& c : rep.cells)
            if (c.method == meth && c.budget == b) return &c;
        return nullptr;
    };
    const SweepCell* full = cell_at("fsl_random", 1.0);
    if (full && !full->per_seed.empty()) rep.fsl_full_median = full->median;
    if (rep.fsl_full_median >= 0) {
        for (const auto& meth : job.methods) {
            if (meth == "fsl_random") continue;
            SweepHeadline h;
            h.method = meth;
            for (double b : budgets) {
                const SweepCell* c = cell_at(meth, b);
                if (c && !c->per_seed.empty() &&
                    c->median >= rep.fsl_full_median - job.headline_slack) {
                    h.budget = b;
                    h.auc_median = c->median;
                    const SweepCell* f = cell_at("fsl_random", b);
                    h.fsl_at_same_budget = (f && !f->per_seed.empty()) ? f->median : -1.0;
                    break;
                }
            }
            rep.headlines.push_back(std::move(h));
        }
    }

    if (!job.out_dir.empty()) write_report(rep, job.out_dir);
    return rep;
}

// ---- real/syn/mix matrix -----------------------------------------------------------

namespace {

const char* kKinds[3] = {"real", "syn", "mix"};

}  // namespace

std::vector<data::Sample> generate_synthetic_counterparts(const data::DatasetManifest& m,
                                                          const seg::SegmenterNet& segnet,
                                                          const cagan::CaganModel& gan,
                                                          int per_real, double perturb_magnitude,
                                                          uint64_t seed) {
    if (per_real < 1) throw ConfigError("counterparts: per_real must be >= 1");
    if (gan.diverged) throw CapabilityError("counterparts: generator checkpoint marked diverged");
    std::vector<data::Sample> out;
    Rng master(seed);
    for (size_t i = 0; i < m.entries.size(); ++i) {
        data::Sample base = data::load_sample(m, m.entries[i]);
        seg::MaskLatent ml = seg::extract_latent(segnet, base.image, seg::LatentInput::image);
        auto variants =
            seg::perturb_mask(segnet, ml, base.id, perturb_magnitude, per_real,
                              seed_from(master.fork("pert", static_cast<int64_t>(i))));
        for (int j = 0; j < per_real; ++j) {
            auto s = cagan::generate(gan, base, variants[static_cast<size_t>(j)], base.labels,
                                     base.id + "_syn" + std::to_string(j));
            snap_to_gray_grid(s.image);
            out.push_back(std::move(s));
        }
    }
    return out;
}

MixReport real_syn_mix_matrix(const data::DatasetManifest& real,
                              const std::vector<data::Sample>& syn, const MixJob& job) {
    check_seeds(job.seeds);
    if (syn.empty()) throw DataError("mix_matrix: no synthetic samples");

    // fold bookkeeping; any synthetic sample outside its base patient's fold is
    // leakage and a bug somewhere upstream
    std::map<std::string, std::string> patient_fold;
    for (const auto& e : real.entries) {
        auto [it, fresh] = patient_fold.try_emplace(e.patient_id, e.split);
        if (!fresh && it->second != e.split)
            throw GuardError("mix_matrix: patient " + e.patient_id + " straddles folds");
    }
    std::map<std::string, std::vector<data::Sample>> syn_fold;
    for (const auto& s : syn) {
        if (s.base_id.empty())
            throw GuardError("mix_matrix: synthetic sample " + s.id + " lacks a base_id");
        const auto* base = real.find(s.base_id);
        if (base == nullptr)
            throw GuardError("mix_matrix: synthetic sample " + s.id + " has unknown base " +
                             s.base_id);
        if (base->patient_id != s.patient_id)
            throw GuardError("mix_matrix: synthetic sample " + s.id + " left patient " +
                             base->patient_id + " for " + s.patient_id);
        syn_fold[patient_fold.at(base->patient_id)].push_back(s);
    }

    std::map<std::string, std::vector<data::Sample>> real_fold;
    real_fold["train"] = data::load_split(real, "train");
    real_fold["test"] = data::load_split(real, "test");
    if (real_fold["train"].empty() || real_fold["test"].empty())
        throw DataError("mix_matrix: manifest needs train and test folds");

    MixReport rep;
    rep.prov.seeds = job.seeds;
    rep.prov.code_version = kVersion;
    rep.prov.config_hash = hash_config({{"kind", "real_syn_mix_matrix"},
                                        {"seeds", job.seeds},
                                        {"seed", job.seed},
                                        {"classifier", classifier_json(job.classifier)},
                                        {"finetune", finetune_json(job.finetune)},
                                        {"n_syn", syn.size()}});

    // sets[kind][fold]; mix is re-drawn per seed at the real fold's size
    auto mix_set = [&](const std::string& fold, uint64_t sv) {
        std::vector<data::Sample> pool = real_fold[fold];
        pool.insert(pool.end(), syn_fold[fold].begin(), syn_fold[fold].end());
        std::vector<size_t> idx(pool.size());
        for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        Rng(job.seed).fork("mix").fork(fold).fork("s", static_cast<int64_t>(sv)).shuffle(idx);
        idx.resize(real_fold[fold].size());
        std::sort(idx.begin(), idx.end());
        std::vector<data::Sample> out;
        for (size_t i : idx) out.push_back(pool[i]);
        return out;
    };

    std::map<std::string, std::vector<double>> per_cell;
    Rng master(job.seed);
    for (uint64_t sv : job.seeds) {
        Rng sfork = master.fork("s", static_cast<int64_t>(sv));
        for (const char* tk : kKinds) {
            std::vector<data::Sample> train_set =
                std::string(tk) == "real"  ? real_fold["train"]
                : std::string(tk) == "syn" ? syn_fold["train"]
                                           : mix_set("train", sv);
            if (train_set.empty()) continue;  // cell rows stay empty -> undef
            cls::Classifier c(job.classifier,
                              seed_from(sfork.fork(std::string(tk) + ".init")));
            cls::FinetuneHyper hy = job.finetune;
            hy.seed = seed_from(sfork.fork(std::string(tk) + ".ft"));
            cls::finetune(c, train_set, hy);
            for (const char* vk : kKinds) {
                std::vector<data::Sample> test_set =
                    std::string(vk) == "real"  ? real_fold["test"]
                    : std::string(vk) == "syn" ? syn_fold["test"]
                                               : mix_set("test", sv);
                if (test_set.empty()) continue;
                auto report = cls::evaluate_samples(c, test_set, std::string(tk) + "-" + vk);
                per_cell[std::string(tk) + "-" + vk].push_back(report.macro);
            }
        }
    }

    for (const char* tk : kKinds)
        for (const char* vk : kKinds) {
            MixCell cell;
            cell.train_kind = tk;
            cell.test_kind = vk;
            cell.per_seed = per_cell[std::string(tk) + "-" + vk];
            if (cell.per_seed.empty()) {
                cell.skip_reason = std::string(tk) == "syn" && syn_fold["train"].empty()
                                       ? "no synthetic samples in the train fold"
                                       : "no synthetic samples in the test fold";
            } else {
                cell.median = median_of(cell.per_seed);
                cell.iqr = iqr_of(cell.per_seed);
            }
            rep.cells.push_back(std::move(cell));
        }

    const auto& rr = per_cell["real-real"];
    const auto& sr = per_cell["syn-real"];
    const auto& mm = per_cell["mix-mix"];
    rep.rr_sr_gap_median = -1;
    rep.rr_mm_gap_median = -1;
    if (rr.size() == job.seeds.size() && sr.size() == rr.size()) {
        std::vector<double> g;
        for (size_t i = 0; i < rr.size(); ++i) g.push_back(std::abs(rr[i] - sr[i]));
        rep.rr_sr_gap_median = median_of(g);
    }
    if (rr.size() == job.seeds.size() && mm.size() == rr.size()) {
        std::vector<double> g;
        for (size_t i = 0; i < rr.size(); ++i) g.push_back(std::abs(rr[i] - mm[i]));
        rep.rr_mm_gap_median = median_of(g);
    }

    if (!job.out_dir.empty()) write_report(rep, job.out_dir);
    return rep;
}

// ---- synthetic growth curve --------------------------------------------------------

GrowthReport synthetic_growth_curve(const data::DatasetManifest& m, const GrowthJob& job) {
    check_seeds(job.seeds);
    if (job.initial_real_per_class < 1)
        throw ConfigError("growth: initial_real_per_class must be >= 1");
    if (job.step_per_class < 1) throw ConfigError("growth: step_per_class must be >= 1");
    if (job.steps < 0) throw ConfigError("growth: steps must be nonnegative");
    if (job.modes.empty()) throw ConfigError("growth: no modes");
    for (const auto& mode : job.modes)
        if (mode != "informative" && mode != "random")
            throw ConfigError("growth: unknown mode '" + mode + "'");
    const int bank = job.bank_per_class == 0 ? job.steps * job.step_per_class
                                             : job.bank_per_class;
    if (bank < job.steps * job.step_per_class)
        throw ConfigError("growth: bank_per_class smaller than the additions");
    if (job.steps > 0 && (job.segmenter == nullptr || job.gan == nullptr))
        throw CapabilityError("growth: synthetic additions need a segmenter and generator");

    const auto train = data::load_split(m, "train");
    if (train.empty()) throw DataError("growth: manifest has no train split");
    const int C = m.num_classes();

    GrowthReport rep;
    rep.prov.seeds = job.seeds;
    rep.prov.code_version = kVersion;
    rep.prov.config_hash = hash_config({{"kind", "synthetic_growth_curve"},
                                        {"initial_real_per_class", job.initial_real_per_class},
                                        {"step_per_class", job.step_per_class},
                                        {"steps", job.steps},
                                        {"bank_per_class", bank},
                                        {"modes", job.modes},
                                        {"seeds", job.seeds},
                                        {"seed", job.seed},
                                        {"perturb_magnitude", job.perturb_magnitude},
                                        {"classifier", classifier_json(job.classifier)},
                                        {"finetune", finetune_json(job.finetune)}});
    rep.train_size = static_cast<int64_t>(train.size());

    std::map<std::string, std::vector<double>> finals;
    std::vector<double> full_refs;

    Rng master(job.seed);
    for (uint64_t sv : job.seeds) {
        Rng sfork = master.fork("s", static_cast<int64_t>(sv));

        // fixed real pool: the first n of each class off a seeded shuffle
        std::vector<size_t> order(train.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = i;
        sfork.fork("pool").shuffle(order);
        std::set<std::string> picked_ids;
        std::vector<data::Sample> pool;
        std::vector<std::vector<const data::Sample*>> members(static_cast<size_t>(C));
        for (int k = 0; k < C; ++k) {
            int got = 0;
            for (size_t i : order) {
                if (got == job.initial_real_per_class) break;
                const auto& s = train[i];
                if (!s.labels[static_cast<size_t>(k)]) continue;
                ++got;
                if (picked_ids.insert(s.id).second) pool.push_back(s);
            }
            if (got < job.initial_real_per_class)
                throw DataError("growth: train split lacks " +
                                std::to_string(job.initial_real_per_class) + " images of class " +
                                m.class_names[static_cast<size_t>(k)]);
        }
        for (const auto& s : pool)
            for (int k = 0; k < C; ++k)
                if (s.labels[static_cast<size_t>(k)]) members[static_cast<size_t>(k)].push_back(&s);
        rep.initial_pool = static_cast<int64_t>(pool.size());

        // one candidate bank per seed, shared by both modes
        std::vector<data::Sample> cands;
        std::map<std::string, int> cand_class;
        if (job.steps > 0) {
            for (int k = 0; k < C; ++k) {
                const auto& mem = members[static_cast<size_t>(k)];
                const int per_base =
                    (bank + static_cast<int>(mem.size()) - 1) / static_cast<int>(mem.size());
                std::vector<std::vector<seg::MaskLatent>> variants(mem.size());
                for (size_t b = 0; b < mem.size(); ++b) {
                    seg::MaskLatent ml = seg::extract_latent(*job.segmenter, mem[b]->image,
                                                             seg::LatentInput::image);
                    variants[b] = seg::perturb_mask(
                        *job.segmenter, ml, mem[b]->id, job.perturb_magnitude, per_base,
                        seed_from(sfork.fork("pert", k * 1000 + static_cast<int64_t>(b))));
                }
                std::vector<int> target(static_cast<size_t>(C), 0);
                target[static_cast<size_t>(k)] = 1;
                for (int j = 0; j < bank; ++j) {
                    const size_t b = static_cast<size_t>(j) % mem.size();
                    const size_t v = static_cast<size_t>(j) / mem.size();
                    auto s = cagan::generate(*job.gan, *mem[b], variants[b][v], target,
                                             "grow_s" + std::to_string(sv) + "_c" +
                                                 std::to_string(k) + "_" + std::to_string(j));
                    snap_to_gray_grid(s.image);
                    cand_class[s.id] = k;
                    cands.push_back(std::move(s));
                }
            }
        }

        // shared baseline; both modes continue from a private copy of it
        cls::Classifier base(job.classifier, seed_from(sfork.fork("init")));
        cls::FinetuneHyper hy0 = job.finetune;
        hy0.seed = seed_from(sfork.fork("ft0"));
        cls::finetune(base, pool, hy0);
        const double base_auc = cls::evaluate(base, m, "test").macro;

        cls::Classifier full(job.classifier, seed_from(sfork.fork("init_full")));
        cls::FinetuneHyper hyf = job.finetune;
        hyf.seed = seed_from(sfork.fork("ft_full"));
        cls::finetune(full, train, hyf);
        full_refs.push_back(cls::evaluate(full, m, "test").macro);
        rep.curve.push_back({0, "fsl_full", sv, full_refs.back()});

        for (const auto& mode : job.modes) {
            rep.curve.push_back({0, mode, sv, base_auc});
            cls::Classifier c = cls::clone_classifier(base);
            std::vector<data::Sample> grown = pool;
            std::map<int, std::vector<size_t>> remaining;  // class -> candidate index
            for (size_t i = 0; i < cands.size(); ++i)
                remaining[cand_class.at(cands[i].id)].push_back(i);
            double last = base_auc;
            for (int t = 1; t <= job.steps; ++t) {
                for (int k = 0; k < C; ++k) {
                    auto& rem = remaining[k];
                    std::vector<size_t> take;
                    if (mode == "informative") {
                        std::vector<data::Sample> view;
                        for (size_t i : rem) view.push_back(cands[i]);
                        unc::McConfig mc = job.scoring;
                        mc.seed = seed_from(sfork.fork(mode + ".score", t * 100 + k));
                        auto est = unc::estimate_uncertainty(c, view, mc);
                        auto ranked = unc::rank_by_informativeness(
                            est, job.step_per_class,
                            seed_from(sfork.fork(mode + ".tie", t * 100 + k)));
                        std::map<std::string, size_t> where;
                        for (size_t i : rem) where[cands[i].id] = i;
                        for (const auto& id : ranked.order) take.push_back(where.at(id));
                    } else {
                        std::vector<size_t> shuffled = rem;
                        sfork.fork(mode + ".pick", t * 100 + k).shuffle(shuffled);
                        shuffled.resize(static_cast<size_t>(job.step_per_class));
                        take = shuffled;
                    }
                    for (size_t i : take) {
                        grown.push_back(cands[i]);
                        rem.erase(std::find(rem.begin(), rem.end(), i));
                    }
                }
                cls::FinetuneHyper hy = job.finetune;
                hy.seed = seed_from(sfork.fork(mode + ".ft", t));
                cls::finetune(c, grown, hy);
                last = cls::evaluate(c, m, "test").macro;
                rep.curve.push_back(
                    {static_cast<int64_t>(t) * job.step_per_class * C, mode, sv, last});
            }
            finals[mode].push_back(last);
        }
    }

    if (finals.count("informative")) rep.informative_final_median = median_of(finals["informative"]);
    if (finals.count("random")) rep.random_final_median = median_of(finals["random"]);
    rep.fsl_full_median = median_of(full_refs);

    if (!job.out_dir.empty()) write_report(rep, job.out_dir);
    return rep;
}

// ---- report files ------------------------------------------------------------------

void write_report(const SweepReport& r, const std::string& dir) {
    require_out_dir(dir);

    json cells = json::array();
    for (const auto& c : r.cells)
        cells.push_back({{"method", c.method},
                         {"budget", c.budget},
                         {"per_seed", c.per_seed},
                         {"median", c.median},
                         {"iqr", c.iqr},
                         {"per_seed_labels", c.per_seed_labels},
                         {"labels_used", c.labels_used},
                         {"skip_reason", c.skip_reason}});
    json heads = json::array();
    for (const auto& h : r.headlines)
        heads.push_back({{"method", h.method},
                         {"budget", h.budget},
                         {"auc_median", h.auc_median},
                         {"fsl_at_same_budget", h.fsl_at_same_budget}});
    dump_json({{"kind", "label_budget_sweep"},
               {"provenance", provenance_json(r.prov)},
               {"budgets", r.budgets},
               {"methods", r.methods},
               {"cells", cells},
               {"fsl_full_median", r.fsl_full_median},
               {"headline_slack", r.headline_slack},
               {"headlines", heads}},
              dir + "/summary.json");

    CsvWriter table(dir + "/table.csv");
    std::vector<std::string> head{"method"};
    for (double b : r.budgets) head.push_back(fmt_double(b, 12));
    table.row(head);
    for (const auto& meth : r.methods) {
        std::vector<std::string> row{meth};
        for (double b : r.budgets)
            for (const auto& c : r.cells)
                if (c.method == meth && c.budget == b) row.push_back(auc_cell(c.per_seed, c.median));
        table.row(row);
    }
    table.close();

    CsvWriter curve(dir + "/curve.csv");
    curve.row({"x_count", "mode", "seed", "macro_auc"});
    for (const auto& c : r.cells)
        for (size_t i = 0; i < c.per_seed.size(); ++i)
            curve.row({std::to_string(c.labels_used), c.method, std::to_string(r.prov.seeds[i]),
                       fmt_double(c.per_seed[i], 17)});
    curve.close();
}

void write_report(const MixReport& r, const std::string& dir) {
    require_out_dir(dir);

    json cells = json::array();
    for (const auto& c : r.cells)
        cells.push_back({{"train", c.train_kind},
                         {"test", c.test_kind},
                         {"per_seed", c.per_seed},
                         {"median", c.median},
                         {"iqr", c.iqr},
                         {"skip_reason", c.skip_reason}});
    dump_json({{"kind", "real_syn_mix_matrix"},
               {"provenance", provenance_json(r.prov)},
               {"cells", cells},
               {"rr_sr_gap_median", r.rr_sr_gap_median},
               {"rr_mm_gap_median", r.rr_mm_gap_median}},
              dir + "/summary.json");

    CsvWriter table(dir + "/table.csv");
    table.row({"block", "train_set", "real", "syn", "mix"});
    for (const std::string block : {"median", "iqr"})
        for (const char* tk : kKinds) {
            std::vector<std::string> row{block, tk};
            for (const char* vk : kKinds)
                for (const auto& c : r.cells)
                    if (c.train_kind == tk && c.test_kind == vk)
                        row.push_back(c.per_seed.empty()
                                          ? "undef"
                                          : fmt_double(block == "median" ? c.median : c.iqr, 17));
            table.row(row);
        }
    table.close();

    CsvWriter curve(dir + "/curve.csv");
    curve.row({"x_count", "mode", "seed", "macro_auc"});
    for (const auto& c : r.cells)
        for (size_t i = 0; i < c.per_seed.size(); ++i)
            curve.row({"0", c.train_kind + "-" + c.test_kind, std::to_string(r.prov.seeds[i]),
                       fmt_double(c.per_seed[i], 17)});
    curve.close();
}

void write_report(const GrowthReport& r, const std::string& dir) {
    require_out_dir(dir);

    // raw counts plus both normalizations, since the natural x-axis is ambiguous
    std::set<int64_t> xs;
    for (const auto& p : r.curve)
        if (p.mode != "fsl_full") xs.insert(p.x_count);
    json axis = json::array();
    for (int64_t x : xs)
        axis.push_back({{"count", x},
                        {"fraction_of_train",
                         r.train_size ? static_cast<double>(x) / static_cast<double>(r.train_size)
                                      : 0.0},
                        {"fraction_of_initial_pool",
                         r.initial_pool ? static_cast<double>(x) / static_cast<double>(r.initial_pool)
                                        : 0.0}});
    json points = json::array();
    for (const auto& p : r.curve)
        points.push_back({{"x_count", p.x_count},
                          {"mode", p.mode},
                          {"seed", p.seed},
                          {"macro_auc", p.macro_auc}});
    dump_json({{"kind", "synthetic_growth_curve"},
               {"provenance", provenance_json(r.prov)},
               {"x_axis", axis},
               {"points", points},
               {"informative_final_median", r.informative_final_median},
               {"random_final_median", r.random_final_median},
               {"fsl_full_median", r.fsl_full_median},
               {"train_size", r.train_size},
               {"initial_pool", r.initial_pool}},
              dir + "/summary.json");

    CsvWriter table(dir + "/table.csv");
    table.row({"mode", "final_median"});
    table.row({"informative", fmt_double(r.informative_final_median, 17)});
    table.row({"random", fmt_double(r.random_final_median, 17)});
    table.row({"fsl_full", fmt_double(r.fsl_full_median, 17)});
    table.close();

    CsvWriter curve(dir + "/curve.csv");
    curve.row({"x_count", "mode", "seed", "macro_auc"});
    for (const auto& p : r.curve)
        curve.row({std::to_string(p.x_count), p.mode, std::to_string(p.seed),
                   fmt_double(p.macro_auc, 17)});
    curve.close();
}

}  // namespace caal::harness
