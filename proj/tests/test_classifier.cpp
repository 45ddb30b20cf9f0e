#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <set>

#include "caal/classifier.hpp"
#include "caal/csvio.hpp"
#include "caal/data.hpp"

using namespace caal;
using ag::Var;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path p;
    explicit TempDir(const std::string& tag) {
        p = fs::temp_directory_path() / (tag + std::to_string(::getpid()));
        fs::remove_all(p);
        fs::create_directories(p);
    }
    ~TempDir() { fs::remove_all(p); }
    std::string str() const { return p.string(); }
};

cls::ClassifierSpec small_spec() {
    cls::ClassifierSpec sp;
    sp.side = 32;
    sp.num_classes = 2;
    sp.width = 8;
    return sp;
}

std::vector<data::Sample> toy_pool(int patients, double artifact, uint64_t seed,
                                   const std::string& dir,
                                   const std::vector<double>& imbalance = {1, 1}) {
    data::ToyConfig cfg;
    cfg.num_classes = 2;
    cfg.num_patients = patients;
    cfg.images_per_patient = 2;
    cfg.side = 32;
    cfg.imbalance = imbalance;
    cfg.label_mode = "exclusive";
    cfg.artifact_strength = artifact;
    cfg.noise = 0.03;
    cfg.seed = seed;
    auto m = data::generate_toy_corpus(cfg, dir);
    std::vector<data::Sample> out;
    for (const auto& e : m.entries) out.push_back(data::load_sample(m, e));
    return out;
}

// brute-force AUC: fraction of pos/neg pairs ranked correctly, ties half
double pairwise_auc(const std::vector<double>& s, const std::vector<int>& y) {
    double num = 0;
    int64_t pairs = 0;
    for (size_t i = 0; i < s.size(); ++i)
        for (size_t j = 0; j < s.size(); ++j) {
            if (!(y[i] == 1 && y[j] == 0)) continue;
            ++pairs;
            if (s[i] > s[j])
                num += 1.0;
            else if (s[i] == s[j])
                num += 0.5;
        }
    return num / static_cast<double>(pairs);
}

data::Sample mk_sample(const std::string& id, int side, const std::vector<int>& labels,
                       uint64_t seed) {
    data::Sample s;
    s.id = id;
    s.patient_id = "p0000";
    s.labels = labels;
    s.image = Tensor::zeros({side, side});
    Rng r(seed);
    for (int64_t i = 0; i < s.image.size(); ++i) s.image[i] = r.uniform();
    s.mask = Tensor::zeros({side, side});
    return s;
}

}  // namespace

TEST_CASE("rank-based auc equals the pairwise oracle") {
    Rng rng(404);
    for (int trial = 0; trial < 40; ++trial) {
        const int n = 3 + static_cast<int>(rng.uniform_int(0, 37));
        std::vector<double> s(n);
        std::vector<int> y(n);
        bool pos = false, neg = false;
        for (int i = 0; i < n; ++i) {
            // quantized scores force ties
            s[i] = std::floor(rng.uniform() * 10.0) / 10.0;
            y[i] = rng.uniform() < 0.4 ? 1 : 0;
            (y[i] ? pos : neg) = true;
        }
        if (!pos || !neg) {
            CHECK(!cls::auc(s, y).defined);
            continue;
        }
        auto v = cls::auc(s, y);
        CHECK(v.defined);
        CHECK(v.value == pairwise_auc(s, y));
    }

    // one larger mixed case
    const int n = 200;
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (int i = 0; i < n; ++i) {
        s[i] = std::floor(rng.uniform() * 25.0) / 25.0;
        y[i] = i % 3 == 0 ? 1 : 0;
    }
    CHECK(cls::auc(s, y).value == pairwise_auc(s, y));

    CHECK(cls::auc({1.0, 1.0, 1.0, 1.0}, {1, 0, 1, 0}).value == 0.5);
    CHECK(cls::auc({0.1, 0.2, 0.8, 0.9}, {0, 0, 1, 1}).value == 1.0);
    CHECK(cls::auc({0.9, 0.8, 0.2, 0.1}, {0, 0, 1, 1}).value == 0.0);
}

TEST_CASE("auc ignores monotone rescaling and mirrors under negation") {
    Rng rng(405);
    const int n = 60;
    std::vector<double> s(n);
    std::vector<int> y(n);
    std::set<double> seen;
    for (int i = 0; i < n; ++i) {
        do s[i] = rng.normal();
        while (!seen.insert(s[i]).second);
        y[i] = rng.uniform() < 0.5 ? 1 : 0;
    }
    y[0] = 1;
    y[1] = 0;
    const double base = cls::auc(s, y).value;
    std::vector<double> affine(n), expo(n), negs(n);
    for (int i = 0; i < n; ++i) {
        affine[i] = 2.0 * s[i] + 3.0;
        expo[i] = std::exp(s[i]);
        negs[i] = -s[i];
    }
    CHECK(cls::auc(affine, y).value == base);
    CHECK(cls::auc(expo, y).value == base);
    CHECK(cls::auc(negs, y).value == doctest::Approx(1.0 - base).epsilon(1e-14));
}

TEST_CASE("single-class inputs are undefined rather than an error") {
    auto v = cls::auc({0.1, 0.5, 0.9}, {1, 1, 1});
    CHECK(!v.defined);
    CHECK(v.value == 0.5);
    CHECK(!cls::auc({0.1, 0.5}, {0, 0}).defined);
}

TEST_CASE("auc rejects malformed input") {
    CHECK_THROWS_AS(cls::auc({0.1, 0.2}, {1}), ShapeError);
    CHECK_THROWS_AS(cls::auc({0.1, 0.2}, {1, 2}), DomainError);
    CHECK_THROWS_AS(cls::auc({0.1, std::nan("")}, {1, 0}), NumericError);
    CHECK_THROWS_AS(cls::auc({}, {}), DomainError);
}

TEST_CASE("fresh nets carry no systematic class signal") {
    TempDir td("caal_cls_fresh_");
    auto pool = toy_pool(12, 0.6, 31, td.str());
    double acc = 0;
    for (uint64_t sd = 1; sd <= 8; ++sd) {
        cls::Classifier c(small_spec(), sd);
        acc += cls::evaluate_samples(c, pool, "probe").macro;
    }
    const double mean = acc / 8.0;
    // individual seeds swing hard; the average must sit near chance
    CHECK(mean > 0.2);
    CHECK(mean < 0.8);
}

TEST_CASE("a short finetune separates the toy classes on held-out patients") {
    TempDir td("caal_cls_sep_");
    auto all = toy_pool(24, 0.6, 31, td.str());
    std::vector<data::Sample> train, held;
    for (const auto& s : all) (s.patient_id < "p0018" ? train : held).push_back(s);
    REQUIRE(train.size() == 36);
    REQUIRE(held.size() == 12);

    cls::Classifier c(small_spec(), 3);
    cls::FinetuneHyper hy;
    hy.epochs = 4;
    hy.batch = 8;
    hy.seed = 5;
    auto met = cls::finetune(c, train, hy);
    CHECK(met.epoch_loss.size() == 4);
    CHECK(met.epoch_loss.back() < met.epoch_loss.front());
    CHECK(met.improved);
    auto r = cls::evaluate_samples(c, held, "held");
    CHECK(r.macro >= 0.9);
    CHECK(r.defined[0]);
    CHECK(r.defined[1]);
}

TEST_CASE("zero epochs is the identity") {
    TempDir td("caal_cls_id_");
    auto pool = toy_pool(6, 0.6, 9, td.str());
    cls::Classifier c(small_spec(), 11);
    const uint64_t before = c.net.params().content_hash();
    cls::FinetuneHyper hy;
    hy.epochs = 0;
    auto met = cls::finetune(c, pool, hy);
    CHECK(c.net.params().content_hash() == before);
    CHECK(met.epoch_loss.empty());
    CHECK(met.improved);
}

TEST_CASE("freeze=backbone moves only the heads") {
    TempDir td("caal_cls_frz_");
    auto pool = toy_pool(8, 0.6, 13, td.str());
    cls::Classifier c(small_spec(), 17);
    std::vector<std::pair<std::string, Tensor>> before;
    for (const auto& it : c.net.params().items())
        if (it.trainable) {
            Tensor copy = Tensor::zeros(it.var.val().shape());
            for (int64_t i = 0; i < copy.size(); ++i) copy[i] = it.var.val()[i];
            before.emplace_back(it.name, copy);
        }
    cls::FinetuneHyper hy;
    hy.epochs = 2;
    hy.batch = 8;
    hy.freeze = "backbone";
    cls::finetune(c, pool, hy);
    bool head_moved = false;
    for (const auto& [name, snap] : before) {
        const Var v = c.net.params().find(name);
        bool same = true;
        for (int64_t i = 0; i < snap.size() && same; ++i) same = v.val()[i] == snap[i];
        if (name.rfind("head", 0) == 0 || name.rfind("var", 0) == 0) {
            if (!same) head_moved = true;
        } else {
            CHECK(same);  // conv and norm weights stay put
        }
    }
    CHECK(head_moved);
}

TEST_CASE("unit class weights are the unweighted loss") {
    TempDir td("caal_cls_cw_");
    auto pool = toy_pool(8, 0.6, 19, td.str());
    auto run = [&](std::vector<double> w) {
        cls::Classifier c(small_spec(), 23);
        cls::FinetuneHyper hy;
        hy.epochs = 2;
        hy.batch = 8;
        hy.seed = 41;
        hy.class_weights = std::move(w);
        cls::finetune(c, pool, hy);
        return c.net.params().content_hash();
    };
    const uint64_t unweighted = run({});
    CHECK(run({1.0, 1.0}) == unweighted);
    CHECK(run({1.0, 5.0}) != unweighted);

    cls::Classifier c(small_spec(), 23);
    cls::FinetuneHyper hy;
    hy.class_weights = {1.0, 2.0, 3.0};
    CHECK_THROWS_AS(cls::finetune(c, pool, hy), ConfigError);
    hy.class_weights = {1.0, 0.0};
    CHECK_THROWS_AS(cls::finetune(c, pool, hy), ConfigError);
}

TEST_CASE("the noise head cannot steer the classifier") {
    TempDir td("caal_cls_var_");
    auto pool = toy_pool(8, 0.6, 29, td.str());
    auto run = [&](double var_weight, std::vector<std::pair<std::string, Tensor>>& out) {
        cls::Classifier c(small_spec(), 37);
        cls::FinetuneHyper hy;
        hy.epochs = 2;
        hy.batch = 8;
        hy.seed = 43;
        hy.var_weight = var_weight;
        cls::finetune(c, pool, hy);
        for (const auto& it : c.net.params().items()) {
            Tensor copy = Tensor::zeros(it.var.val().shape());
            for (int64_t i = 0; i < copy.size(); ++i) copy[i] = it.var.val()[i];
            out.emplace_back(it.name, copy);
        }
    };
    std::vector<std::pair<std::string, Tensor>> with, without;
    run(1.0, with);
    run(0.0, without);
    REQUIRE(with.size() == without.size());
    bool var_moved = false;
    for (size_t k = 0; k < with.size(); ++k) {
        REQUIRE(with[k].first == without[k].first);
        bool same = true;
        for (int64_t i = 0; i < with[k].second.size() && same; ++i)
            same = with[k].second[i] == without[k].second[i];
        if (with[k].first.rfind("var", 0) == 0) {
            if (!same) var_moved = true;
        } else {
            // bitwise: the aleatoric term contributes nothing outside var.*
            CHECK(same);
        }
    }
    CHECK(var_moved);
}

TEST_CASE("log-variance stays inside its squash range") {
    cls::Classifier c(small_spec(), 47);
    Tensor x = Tensor::zeros({3, 1, 32, 32});
    Rng r(5);
    for (int64_t i = 0; i < x.size(); ++i) x[i] = r.uniform();
    nn::Ctx ectx{false, nullptr};
    auto out = c.net.forward(Var::leaf(x), ectx);
    REQUIRE(out.log_var.defined());
    CHECK(out.log_var.shape() == std::vector<int>{3, 2});
    for (int64_t i = 0; i < out.log_var.val().size(); ++i) {
        CHECK(out.log_var.val()[i] > -12.0);
        CHECK(out.log_var.val()[i] < 6.0);
    }

    auto sp = small_spec();
    sp.variance_head = false;
    cls::Classifier bare(sp, 47);
    auto out2 = bare.net.forward(Var::leaf(x), ectx);
    CHECK(!out2.log_var.defined());
}

TEST_CASE("save and load round trip with round provenance") {
    TempDir td("caal_cls_sl_");
    cls::Classifier c(small_spec(), 53);
    c.round = 3;
    const std::string dir = td.str() + "/ckpt";
    cls::save_classifier(c, dir);
    auto back = cls::load_classifier(dir);
    CHECK(back.net.params().content_hash() == c.net.params().content_hash());
    CHECK(back.round == 3);
    CHECK(back.spec.side == c.spec.side);
    CHECK(back.spec.label_mode == c.spec.label_mode);

    back.round = 2;  // stale weights must not clobber newer ones
    CHECK_THROWS_AS(cls::save_classifier(back, dir), GuardError);
    back.round = 3;
    CHECK_NOTHROW(cls::save_classifier(back, dir));
    back.round = 4;
    CHECK_NOTHROW(cls::save_classifier(back, dir));

    CHECK_THROWS_AS(cls::load_classifier(td.str() + "/missing"), DataError);
}

TEST_CASE("evaluation counters and the split guard") {
    TempDir td("caal_cls_guard_");
    data::ToyConfig cfg;
    cfg.num_classes = 2;
    cfg.num_patients = 10;
    cfg.images_per_patient = 2;
    cfg.side = 32;
    cfg.imbalance = {1, 1};
    cfg.label_mode = "exclusive";
    cfg.artifact_strength = 0.6;
    cfg.noise = 0.03;
    cfg.seed = 61;
    auto m = data::generate_toy_corpus(cfg, td.str());
    m = data::split_by_patient(std::move(m), {0.6, 0.2, 0.2}, 7);

    cls::Classifier c(small_spec(), 59);
    cls::reset_evaluate_counts();
    cls::SplitGuard guard{{"val"}};
    auto r = cls::evaluate(c, m, "val", &guard);
    CHECK(r.split == "val");
    CHECK(r.n > 0);
    cls::evaluate(c, m, "val", &guard);
    CHECK(cls::evaluate_count("val") == 2);

    CHECK_THROWS_AS(cls::evaluate(c, m, "test", &guard), GuardError);
    CHECK(cls::evaluate_count("test") == 0);  // refused before touching data

    cls::evaluate(c, m, "test", nullptr);  // unguarded phases may look
    CHECK(cls::evaluate_count("test") == 1);
    cls::reset_evaluate_counts();
    CHECK(cls::evaluate_count("val") == 0);
}

TEST_CASE("duplicating every sample leaves per-class auc unchanged") {
    TempDir td("caal_cls_dup_");
    auto pool = toy_pool(8, 0.6, 67, td.str());
    cls::Classifier c(small_spec(), 71);
    auto one = cls::evaluate_samples(c, pool, "x");
    auto doubled = pool;
    for (auto s : pool) {
        s.id += "_copy";
        doubled.push_back(std::move(s));
    }
    auto two = cls::evaluate_samples(c, doubled, "x");
    CHECK(two.n == 2 * one.n);
    for (size_t k = 0; k < one.per_class.size(); ++k) {
        CHECK(two.per_class[k] == one.per_class[k]);
        CHECK(two.positives[k] == 2 * one.positives[k]);
    }
    CHECK(two.macro == one.macro);
}

TEST_CASE("auc reports survive the files") {
    TempDir td("caal_cls_rep_");
    cls::AucReport r;
    r.split = "val";
    r.n = 40;
    r.per_class = {0.625, 1.0 / 3.0, 0.5};
    r.defined = {true, true, false};
    r.positives = {12, 9, 0};
    r.negatives = {28, 31, 40};
    r.macro = (0.625 + 1.0 / 3.0) / 2.0;
    const std::string jp = td.str() + "/auc.json";
    cls::write_auc_report_json(r, jp);
    auto back = cls::read_auc_report_json(jp);
    CHECK(back.split == r.split);
    CHECK(back.n == r.n);
    CHECK(back.per_class == r.per_class);  // shortest-round-trip doubles
    CHECK(back.defined == r.defined);
    CHECK(back.positives == r.positives);
    CHECK(back.negatives == r.negatives);
    CHECK(back.macro == r.macro);

    const std::string cp = td.str() + "/auc.csv";
    cls::write_auc_report_csv(r, cp);
    auto rows = read_csv(cp);
    REQUIRE(rows.size() == 5);  // header + 3 classes + macro
    CHECK(rows[0][0] == "class");
    CHECK(std::strtod(rows[1][1].c_str(), nullptr) == r.per_class[0]);
    CHECK(std::strtod(rows[2][1].c_str(), nullptr) == r.per_class[1]);
    CHECK(rows[3][2] == "0");
    CHECK(rows[4][0] == "macro");
    CHECK(std::strtod(rows[4][1].c_str(), nullptr) == r.macro);

    CHECK_THROWS_AS(cls::read_auc_report_json(td.str() + "/none.json"), DataError);
}

TEST_CASE("feature maps stack up and feed the content loss") {
    cls::Classifier c(small_spec(), 73);
    Tensor x = Tensor::zeros({2, 1, 32, 32});
    Rng r(3);
    for (int64_t i = 0; i < x.size(); ++i) x[i] = r.uniform();
    nn::Ctx ectx{false, nullptr};
    Var vx = Var::leaf(x);
    CHECK(c.net.feature_map(vx, 1, ectx).shape() == std::vector<int>{2, 8, 16, 16});
    CHECK(c.net.feature_map(vx, 2, ectx).shape() == std::vector<int>{2, 16, 8, 8});
    CHECK(c.net.feature_map(vx, 3, ectx).shape() == std::vector<int>{2, 32, 4, 4});
    CHECK(c.net.feature_map(vx, 4, ectx).shape() == std::vector<int>{2, 32, 2, 2});
    CHECK_THROWS_AS(c.net.feature_map(vx, 0, ectx), ConfigError);
    CHECK_THROWS_AS(c.net.feature_map(vx, 5, ectx), ConfigError);

    cls::CnnFeatures feat(&c, 2);
    Var fa = feat.features(vx);
    Var fb = c.net.feature_map(vx, 2, ectx);
    REQUIRE(fa.shape() == fb.shape());
    for (int64_t i = 0; i < fa.val().size(); ++i) CHECK(fa.val()[i] == fb.val()[i]);

    cls::CnnFeatures orphan(nullptr, 2);
    CHECK_THROWS_AS(orphan.features(vx), GuardError);
}

TEST_CASE("spec validation refuses what the backbone cannot do") {
    auto sp = small_spec();
    sp.side = 20;
    CHECK_THROWS_AS(cls::Classifier(sp, 1), ConfigError);
    sp = small_spec();
    sp.side = 8;
    CHECK_THROWS_AS(cls::Classifier(sp, 1), ConfigError);
    sp = small_spec();
    sp.width = 0;
    CHECK_THROWS_AS(cls::Classifier(sp, 1), ConfigError);
    sp = small_spec();
    sp.label_mode = "soft";
    CHECK_THROWS_AS(cls::Classifier(sp, 1), ConfigError);
    sp = small_spec();
    sp.mask_rate = 1.0;
    CHECK_THROWS_AS(cls::Classifier(sp, 1), ConfigError);
    sp = small_spec();
    sp.backbone = "resnet18";
    CHECK_THROWS_AS(cls::Classifier(sp, 1), CapabilityError);
}

TEST_CASE("finetune rejects pools it cannot learn from") {
    cls::Classifier c(small_spec(), 79);
    cls::FinetuneHyper hy;
    hy.epochs = 1;

    CHECK_THROWS_AS(cls::finetune(c, {}, hy), DataError);

    std::vector<data::Sample> pool{mk_sample("a", 32, {1, 0}, 1), mk_sample("b", 32, {1, 0}, 2)};
    CHECK_THROWS_AS(cls::finetune(c, pool, hy), TrainError);  // one class only

    pool[1].labels = {1, 1};
    CHECK_THROWS_AS(cls::finetune(c, pool, hy), DataError);  // two-hot in exclusive mode
    pool[1].labels = {0, 2};
    CHECK_THROWS_AS(cls::finetune(c, pool, hy), DataError);
    pool[1].labels = {0, 1, 0};
    CHECK_THROWS_AS(cls::finetune(c, pool, hy), DataError);  // width mismatch

    pool[1] = mk_sample("b", 32, {0, 1}, 2);
    auto bad = hy;
    bad.epochs = -1;
    CHECK_THROWS_AS(cls::finetune(c, pool, bad), ConfigError);
    bad = hy;
    bad.batch = 0;
    CHECK_THROWS_AS(cls::finetune(c, pool, bad), ConfigError);
    bad = hy;
    bad.lr = 0;
    CHECK_THROWS_AS(cls::finetune(c, pool, bad), ConfigError);
    bad = hy;
    bad.freeze = "heads";
    CHECK_THROWS_AS(cls::finetune(c, pool, bad), ConfigError);
    bad = hy;
    bad.var_weight = -1;
    CHECK_THROWS_AS(cls::finetune(c, pool, bad), ConfigError);

    // multilabel pools may be single-class; nothing to separate is fine there
    auto ml = small_spec();
    ml.label_mode = "multilabel";
    cls::Classifier mc(ml, 83);
    std::vector<data::Sample> mono{mk_sample("a", 32, {1, 0}, 3), mk_sample("b", 32, {1, 0}, 4)};
    CHECK_NOTHROW(cls::finetune(mc, mono, hy));
}

TEST_CASE("predicted probabilities are deterministic and well-formed") {
    TempDir td("caal_cls_pp_");
    auto pool = toy_pool(6, 0.6, 89, td.str());
    cls::Classifier c(small_spec(), 97);
    Tensor p1 = cls::predict_proba(c, pool);
    Tensor p2 = cls::predict_proba(c, pool);
    REQUIRE(p1.shape() == std::vector<int>{static_cast<int>(pool.size()), 2});
    for (int64_t i = 0; i < p1.size(); ++i) CHECK(p1[i] == p2[i]);
    for (size_t i = 0; i < pool.size(); ++i) {
        const double row = p1[i * 2] + p1[i * 2 + 1];
        CHECK(row == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(p1[i * 2] >= 0.0);
        CHECK(p1[i * 2] <= 1.0);
    }

    auto ml = small_spec();
    ml.label_mode = "multilabel";
    cls::Classifier mc(ml, 97);
    Tensor q = cls::predict_proba(mc, pool);
    for (int64_t i = 0; i < q.size(); ++i) {
        CHECK(q[i] > 0.0);
        CHECK(q[i] < 1.0);
    }

    CHECK_THROWS_AS(cls::predict_proba(c, {}), DomainError);
    std::vector<data::Sample> wrong{mk_sample("w", 16, {1, 0}, 5)};
    CHECK_THROWS_AS(cls::predict_proba(c, wrong), ShapeError);
}
