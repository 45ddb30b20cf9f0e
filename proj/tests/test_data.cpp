#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "caal/data.hpp"
#include "caal/image_io.hpp"

namespace fs = std::filesystem;
namespace data = caal::data;
using caal::Rng;
using caal::Tensor;

namespace {

struct TempDir {
    fs::path p;
    explicit TempDir(const std::string& tag) {
        p = fs::temp_directory_path() / ("caal_data_" + tag + "_" + std::to_string(::getpid()));
        fs::remove_all(p);
        fs::create_directories(p);
    }
    ~TempDir() { fs::remove_all(p); }
    std::string str() const { return p.string(); }
};

std::string file_bytes(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    REQUIRE(is);
    return std::string(std::istreambuf_iterator<char>(is), {});
}

data::ToyConfig small_cfg() {
    data::ToyConfig cfg;
    cfg.num_classes = 3;
    cfg.num_patients = 12;
    cfg.images_per_patient = 2;
    cfg.side = 32;
    cfg.imbalance = {4, 2, 1};
    cfg.label_mode = "exclusive";
    cfg.seed = 7;
    return cfg;
}

}  // namespace

TEST_CASE("toy corpus is deterministic under the seed") {
    TempDir a("det_a"), b("det_b");
    auto cfg = small_cfg();
    auto ma = data::generate_toy_corpus(cfg, a.str());
    auto mb = data::generate_toy_corpus(cfg, b.str());

    REQUIRE(ma.entries.size() == mb.entries.size());
    for (size_t i = 0; i < ma.entries.size(); ++i) {
        CHECK(ma.entries[i].id == mb.entries[i].id);
        CHECK(ma.entries[i].labels == mb.entries[i].labels);
        CHECK(file_bytes(a.str() + "/" + ma.entries[i].path) ==
              file_bytes(b.str() + "/" + mb.entries[i].path));
        CHECK(file_bytes(a.str() + "/" + ma.entries[i].mask_path) ==
              file_bytes(b.str() + "/" + mb.entries[i].mask_path));
    }
}

TEST_CASE("toy images are valid and masks nonempty") {
    TempDir td("valid");
    auto cfg = small_cfg();
    auto m = data::generate_toy_corpus(cfg, td.str());
    REQUIRE(m.entries.size() == 24);
    for (const auto& e : m.entries) {
        Tensor img = data::load_image(m, e);
        Tensor mask = data::load_mask(m, e);
        CHECK(img.shape() == std::vector<int>{32, 32});
        CHECK(img.all_finite());
        double mn = 1e9, mx = -1e9, fg = 0;
        for (int64_t i = 0; i < img.size(); ++i) {
            mn = std::min(mn, img[i]);
            mx = std::max(mx, img[i]);
            fg += mask[i];
        }
        CHECK(mn >= 0.0);
        CHECK(mx <= 1.0);
        CHECK(fg > 30);                    // two lung fields at side 32
        CHECK(fg < 32 * 32 * 0.6);
        int bits = 0;
        for (int l : e.labels) bits += l;
        CHECK(bits == 1);  // exclusive mode, no normals
    }
}

TEST_CASE("imbalance ratios are respected") {
    TempDir td("imb");
    data::ToyConfig cfg;
    cfg.num_classes = 2;
    cfg.num_patients = 275;
    cfg.images_per_patient = 4;  // 1100 images
    cfg.side = 32;
    cfg.imbalance = {10, 1};
    cfg.label_mode = "exclusive";
    cfg.seed = 11;
    auto m = data::generate_toy_corpus(cfg, td.str());
    auto dist = data::class_distribution(m);
    CHECK(std::abs(dist.counts[0] - 1000.0) <= 33);  // +-3% of 1100
    CHECK(std::abs(dist.counts[1] - 100.0) <= 33);
}

TEST_CASE("label frequencies pass a chi-square fit at alpha=0.01") {
    TempDir td("chi");
    data::ToyConfig cfg;
    cfg.num_classes = 6;
    cfg.num_patients = 1250;
    cfg.images_per_patient = 4;  // 5000 images
    cfg.side = 32;
    cfg.imbalance = {10, 5, 3, 2, 1.5, 1};
    cfg.label_mode = "exclusive";
    cfg.seed = 13;
    auto m = data::generate_toy_corpus(cfg, td.str());
    auto dist = data::class_distribution(m);
    double wsum = 0;
    for (double w : cfg.imbalance) wsum += w;
    double chi2 = 0;
    for (int c = 0; c < 6; ++c) {
        double expect = 5000.0 * cfg.imbalance[static_cast<size_t>(c)] / wsum;
        double diff = dist.counts[static_cast<size_t>(c)] - expect;
        chi2 += diff * diff / expect;
    }
    CHECK(chi2 < 15.086);  // chi-square critical value, df=5, alpha=0.01
}

TEST_CASE("multilabel mode emits second labels and normals only when allowed") {
    TempDir td("ml");
    data::ToyConfig cfg = small_cfg();
    cfg.label_mode = "multilabel";
    cfg.second_label_prob = 0.5;
    cfg.num_patients = 100;
    auto m = data::generate_toy_corpus(cfg, td.str());
    int multi = 0;
    for (const auto& e : m.entries) {
        int bits = 0;
        for (int l : e.labels) bits += l;
        CHECK(bits >= 1);  // allow_normal off
        multi += bits > 1;
    }
    CHECK(multi > 30);  // ~50% of 200

    TempDir td2("ml2");
    cfg.allow_normal = true;
    cfg.normal_prob = 0.3;
    auto m2 = data::generate_toy_corpus(cfg, td2.str());
    int normals = 0;
    for (const auto& e : m2.entries) {
        int bits = 0;
        for (int l : e.labels) bits += l;
        normals += bits == 0;
    }
    CHECK(normals > 20);
}

TEST_CASE("config validation errors name the field") {
    TempDir td("cfgerr");
    data::ToyConfig cfg = small_cfg();
    cfg.num_classes = 1;
    cfg.imbalance = {1};
    CHECK_THROWS_WITH_AS(data::generate_toy_corpus(cfg, td.str()),
                         doctest::Contains("num_classes"), caal::ConfigError);
    cfg = small_cfg();
    cfg.imbalance = {1, 0, 1};
    CHECK_THROWS_WITH_AS(data::generate_toy_corpus(cfg, td.str()),
                         doctest::Contains("imbalance"), caal::ConfigError);
    cfg = small_cfg();
    cfg.side = 16;
    CHECK_THROWS_WITH_AS(data::generate_toy_corpus(cfg, td.str()), doctest::Contains("side"),
                         caal::ConfigError);
}

TEST_CASE("class_distribution hand case") {
    data::DatasetManifest m;
    m.class_names = {"A", "B"};
    m.entries.push_back({"s1", "", "p1", {1, 0}, "", ""});
    m.entries.push_back({"s2", "", "p1", {1, 1}, "", ""});
    auto d = data::class_distribution(m);
    CHECK(d.counts[0] == 2);
    CHECK(d.counts[1] == 1);
    CHECK(d.fractions[0] == 1.0);
    CHECK(d.fractions[1] == 0.5);
    CHECK_THROWS_AS(data::class_distribution(m, {}), caal::DomainError);
}

TEST_CASE("split_by_patient forced three-way and determinism") {
    data::DatasetManifest m;
    m.class_names = {"A", "B"};
    for (int p = 0; p < 3; ++p)
        m.entries.push_back({"s" + std::to_string(p), "", "p" + std::to_string(p), {1, 0}, "", ""});
    auto s1 = data::split_by_patient(m, {1.0 / 3, 1.0 / 3, 1.0 / 3}, 5);
    std::set<std::string> splits;
    for (const auto& e : s1.entries) splits.insert(e.split);
    CHECK(splits == std::set<std::string>{"train", "val", "test"});

    auto s2 = data::split_by_patient(m, {1.0 / 3, 1.0 / 3, 1.0 / 3}, 5);
    for (size_t i = 0; i < s1.entries.size(); ++i) CHECK(s1.entries[i].split == s2.entries[i].split);

    data::DatasetManifest two;
    two.entries.push_back({"a", "", "p0", {1}, "", ""});
    two.entries.push_back({"b", "", "p1", {1}, "", ""});
    CHECK_THROWS_AS(data::split_by_patient(two, {0.7, 0.1, 0.2}, 1), caal::SplitError);
    CHECK_THROWS_AS(data::split_by_patient(m, {0.5, 0.5, 0.5}, 1), caal::SplitError);
}

TEST_CASE("split fractions within two points at 100 patients") {
    data::DatasetManifest m;
    m.class_names = {"A"};
    for (int p = 0; p < 100; ++p)
        for (int i = 0; i < 10; ++i)
            m.entries.push_back(
                {"p" + std::to_string(p) + "_" + std::to_string(i), "", "p" + std::to_string(p),
                 {1}, "", ""});
    auto s = data::split_by_patient(m, {0.70, 0.10, 0.20}, 21);
    double n = static_cast<double>(s.entries.size());
    double train = static_cast<double>(s.split_indices("train").size()) / n;
    double val = static_cast<double>(s.split_indices("val").size()) / n;
    double test = static_cast<double>(s.split_indices("test").size()) / n;
    CHECK(std::abs(train - 0.70) <= 0.02);
    CHECK(std::abs(val - 0.10) <= 0.02);
    CHECK(std::abs(test - 0.20) <= 0.02);
}

TEST_CASE("patient disjointness holds over 1000 random manifests") {
    Rng rng(31337);
    for (int trial = 0; trial < 1000; ++trial) {
        data::DatasetManifest m;
        m.class_names = {"A"};
        int patients = static_cast<int>(rng.uniform_int(3, 60));
        for (int p = 0; p < patients; ++p) {
            int imgs = static_cast<int>(rng.uniform_int(1, 12));
            for (int i = 0; i < imgs; ++i)
                m.entries.push_back({"p" + std::to_string(p) + "_" + std::to_string(i), "",
                                     "p" + std::to_string(p), {1}, "", ""});
        }
        // random-ish fractions that sum to 1
        double a = rng.uniform(0.2, 0.8);
        double b = rng.uniform(0.05, (1.0 - a) * 0.8);
        auto s = data::split_by_patient(m, {a, b, 1.0 - a - b},
                                        rng.uniform_int(0, 1 << 30));
        std::map<std::string, std::set<std::string>> splits_of_patient;
        for (const auto& e : s.entries) {
            REQUIRE(!e.split.empty());
            splits_of_patient[e.patient_id].insert(e.split);
        }
        for (const auto& [pid, ss] : splits_of_patient) REQUIRE(ss.size() == 1);
    }
}

TEST_CASE("manifest round trip is structurally identical") {
    TempDir td("rt");
    auto cfg = small_cfg();
    cfg.label_mode = "multilabel";
    cfg.second_label_prob = 0.5;
    auto m = data::generate_toy_corpus(cfg, td.str());
    m = data::split_by_patient(m, {0.7, 0.1, 0.2}, 3);
    std::string path = td.str() + "/manifest.csv";
    data::write_manifest(m, path);
    auto back = data::read_manifest(path);

    CHECK(back.class_names == m.class_names);
    REQUIRE(back.entries.size() == m.entries.size());
    for (size_t i = 0; i < m.entries.size(); ++i) {
        CHECK(back.entries[i].id == m.entries[i].id);
        CHECK(back.entries[i].path == m.entries[i].path);
        CHECK(back.entries[i].patient_id == m.entries[i].patient_id);
        CHECK(back.entries[i].labels == m.entries[i].labels);
        CHECK(back.entries[i].split == m.entries[i].split);
        CHECK(back.entries[i].mask_path == m.entries[i].mask_path);
    }

    // writing the re-read manifest reproduces the same bytes
    std::string path2 = td.str() + "/manifest2.csv";
    data::write_manifest(back, path2);
    CHECK(file_bytes(path) == file_bytes(path2));
}

TEST_CASE("read_manifest rejects malformed files") {
    TempDir td("bad");
    {
        std::ofstream os(td.str() + "/h.csv");
        os << "id,wrong,header\n";
    }
    CHECK_THROWS_AS(data::read_manifest(td.str() + "/h.csv"), caal::DataError);
    {
        std::ofstream os(td.str() + "/dup.csv");
        os << "id,path,patient_id,labels,split,mask_path\n";
        os << "a,x.png,p1,A,train,\n";
        os << "a,y.png,p1,A,train,\n";
    }
    CHECK_THROWS_AS(data::read_manifest(td.str() + "/dup.csv"), caal::DataError);
    {
        std::ofstream os(td.str() + "/sp.csv");
        os << "id,path,patient_id,labels,split,mask_path\n";
        os << "a,x.png,p1,A,weird,\n";
    }
    CHECK_THROWS_AS(data::read_manifest(td.str() + "/sp.csv"), caal::DataError);
}
