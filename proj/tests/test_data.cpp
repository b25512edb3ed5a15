#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "levi/data.hpp"

using namespace levi;

TEST_CASE("fixture vectors and points are the constructed constants") {
    const LinearFixture fx = linear_fixture();
    CHECK(fx.w_true == LinearFixture::Vec5{0, 1, 1, 1, 0});
    CHECK(fx.w_pretrain == LinearFixture::Vec5{1, 1, 1, 0, 0});
    CHECK(fx.w_scratch == LinearFixture::Vec5{0, 0, 1, 1, 1});
    CHECK(fx.w_finetune == LinearFixture::Vec5{1, 1, 1, 1, 1});
    REQUIRE(fx.finetune_points.size() == 3);
    REQUIRE(fx.test_points.size() == 4);

    // second fine-tuning point
    CHECK(fx.finetune_points[1].first == LinearFixture::Vec5{0, 0, -0.5, -0.5, 0});
    CHECK(fx.finetune_points[1].second == -1.0);

    // first test point with label 1 is present
    CHECK(fx.test_points[0].first == LinearFixture::Vec5{1, 1.0 / 3, 1.0 / 3, 1.0 / 3, 1});
    CHECK(fx.test_points[0].second == 1.0);
}

TEST_CASE("optimal weights predict every test point exactly") {
    const LinearFixture fx = linear_fixture();
    for (const auto& [x, y] : fx.test_points) {
        CHECK(linear_predict(fx.w_true, x) == doctest::Approx(y).epsilon(1e-12));
    }
}

TEST_CASE("fine-tuning points are orthogonal to the pretrain-spurious feature") {
    const LinearFixture fx = linear_fixture();
    for (const auto& [x, y] : fx.finetune_points) {
        CHECK(x[0] == 0.0);
    }
}

TEST_CASE("linear_predict known values") {
    const LinearFixture fx = linear_fixture();
    CHECK(linear_predict(fx.w_finetune, fx.test_points[0].first) == doctest::Approx(3.0).epsilon(1e-12));
    CHECK(linear_predict(fx.w_pretrain, fx.test_points[1].first) == doctest::Approx(1.0 / 3).epsilon(1e-12));
    CHECK(linear_predict({0, 0, 0, 0, 0}, fx.test_points[2].first) == 0.0);
}

TEST_CASE("fixture table reproduces every prediction and error") {
    const FixtureTable table = fixture_table(linear_fixture());
    REQUIRE(table.rows.size() == 12);

    auto row = [&](int test_point, const std::string& model) -> const FixtureRow& {
        for (const FixtureRow& r : table.rows) {
            if (r.test_point == test_point && r.model == model) {
                return r;
            }
        }
        FAIL("row not found");
        return table.rows[0];
    };

    CHECK(row(1, "finetune").prediction == doctest::Approx(3.0).epsilon(1e-12));
    CHECK(row(1, "finetune").l1 == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(row(2, "pretrain").prediction == doctest::Approx(1.0 / 3).epsilon(1e-12));
    CHECK(row(2, "pretrain").l1 == doctest::Approx(4.0 / 3).epsilon(1e-12));
    CHECK(row(3, "scratch").prediction == doctest::Approx(-1.0 / 3).epsilon(1e-12));
    CHECK(row(3, "scratch").l1 == doctest::Approx(4.0 / 3).epsilon(1e-12));
    CHECK(row(4, "pretrain").prediction == doctest::Approx(-5.0 / 3).epsilon(1e-12));
    CHECK(row(4, "pretrain").l1 == doctest::Approx(2.0 / 3).epsilon(1e-12));

    CHECK(table.mean_l1_pretrain == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(table.mean_l1_scratch == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(table.mean_l1_finetune == doctest::Approx(2.0).epsilon(1e-12));

    // the jointly-affected model is strictly worst
    CHECK(table.mean_l1_finetune > table.mean_l1_pretrain);
    CHECK(table.mean_l1_finetune > table.mean_l1_scratch);

    const FixtureCheck check = check_fixture_table(table);
    CHECK(check.pass);
    CHECK(check.first_mismatch.empty());
}

TEST_CASE("perturbed fixture fails the check naming the first row") {
    LinearFixture fx = linear_fixture();
    fx.w_finetune[0] = 1.0 + 1e-6;
    const FixtureCheck check = check_fixture_table(fixture_table(fx));
    CHECK_FALSE(check.pass);
    CHECK(check.first_mismatch.find("row 1") != std::string::npos);
}

TEST_CASE("spec validation rejects degenerate inputs") {
    SpuriousSpec spec;
    spec.d_transfer = 0;
    CHECK_THROWS_AS(generate_bundle(spec), std::runtime_error);
    spec = SpuriousSpec{};
    spec.strength_transfer = 1.5;
    CHECK_THROWS_AS(generate_bundle(spec), std::runtime_error);
    spec = SpuriousSpec{};
    spec.samples_per_split = 0;
    CHECK_THROWS_AS(generate_bundle(spec), std::runtime_error);
}

TEST_CASE("bundle correlations follow the split roles") {
    SpuriousSpec spec; // defaults: 1+1+1 features, binary, 2000 per split
    spec.seed = 99;
    const SpuriousDatasetBundle b = generate_bundle(spec);

    CHECK(b.pretrain.rows() == 2000);
    CHECK(b.pretrain.x.cols() == 3);

    // column 0: pretrain-spurious, column 1: finetune-spurious, column 2: transferable
    CHECK(feature_label_correlation(b.pretrain, 0) > 0.5);
    CHECK(std::abs(feature_label_correlation(b.pretrain, 1)) < 0.05);
    CHECK(feature_label_correlation(b.pretrain, 2) > 0.3);

    CHECK(std::abs(feature_label_correlation(b.finetune, 0)) < 0.05);
    CHECK(feature_label_correlation(b.finetune, 1) > 0.5);
    CHECK(feature_label_correlation(b.finetune, 2) > 0.3);

    CHECK(std::abs(feature_label_correlation(b.id_test, 0)) < 0.05);
    CHECK(feature_label_correlation(b.id_test, 1) > 0.5);

    CHECK(std::abs(feature_label_correlation(b.ood_test, 0)) < 0.05);
    CHECK(std::abs(feature_label_correlation(b.ood_test, 1)) < 0.05);
    CHECK(feature_label_correlation(b.ood_test, 2) > 0.3);
}

TEST_CASE("binary labels stay balanced in every split") {
    SpuriousSpec spec;
    spec.seed = 7;
    const SpuriousDatasetBundle b = generate_bundle(spec);
    for (const DataSplit* s : {&b.pretrain, &b.finetune, &b.id_test, &b.ood_test}) {
        double ones = 0;
        for (Extent i = 0; i < s->rows(); ++i) {
            ones += s->y.at(i);
        }
        const double frac = ones / static_cast<double>(s->rows());
        CHECK(frac > 0.4);
        CHECK(frac < 0.6);
    }
}

TEST_CASE("zero spurious strength makes pretrain and ood distributions agree") {
    SpuriousSpec spec;
    spec.strength_spurious_pretrain = 0.0;
    spec.strength_spurious_finetune = 0.0;
    spec.seed = 5;
    const SpuriousDatasetBundle b = generate_bundle(spec);

    // label-conditional means of each feature column agree within sampling noise
    auto cond_mean = [](const DataSplit& s, Extent col, double label) {
        double acc = 0;
        Extent n = 0;
        for (Extent i = 0; i < s.rows(); ++i) {
            if (s.y.at(i) == label) {
                acc += s.x.at(i, col);
                ++n;
            }
        }
        return acc / static_cast<double>(n);
    };
    for (Extent col = 0; col < 3; ++col) {
        for (double label : {0.0, 1.0}) {
            const double diff = std::abs(cond_mean(b.pretrain, col, label) - cond_mean(b.ood_test, col, label));
            CHECK(diff < 0.12); // ~3.8 sigma at n=1000 per class
        }
    }
}

TEST_CASE("same seed reproduces the bundle bit-identically") {
    SpuriousSpec spec;
    spec.seed = 4242;
    spec.samples_per_split = 200;
    const SpuriousDatasetBundle a = generate_bundle(spec);
    const SpuriousDatasetBundle b = generate_bundle(spec);
    CHECK(a.pretrain.x.data == b.pretrain.x.data);
    CHECK(a.finetune.y.data == b.finetune.y.data);
    CHECK(a.id_test.x.data == b.id_test.x.data);
    CHECK(a.ood_test.y.data == b.ood_test.y.data);
}

TEST_CASE("regression labels carry the raw signal") {
    SpuriousSpec spec;
    spec.label = LabelKind::regression;
    spec.samples_per_split = 500;
    spec.seed = 8;
    const SpuriousDatasetBundle b = generate_bundle(spec);
    bool non_binary = false;
    for (Extent i = 0; i < b.finetune.rows(); ++i) {
        const double y = b.finetune.y.at(i);
        non_binary = non_binary || (y != 0.0 && y != 1.0);
    }
    CHECK(non_binary);
    CHECK(feature_label_correlation(b.finetune, 2) > 0.3);
}

TEST_CASE("bundle export writes one delimited file per split") {
    SpuriousSpec spec;
    spec.samples_per_split = 5;
    spec.seed = 3;
    const SpuriousDatasetBundle b = generate_bundle(spec);
    const std::string dir = (std::filesystem::temp_directory_path() / "levi_export_test").string();
    export_bundle(b, dir);

    for (const char* name : {"pretrain", "finetune", "id_test", "ood_test"}) {
        std::ifstream in(dir + "/" + name + ".csv");
        REQUIRE(in.good());
        std::string header;
        std::getline(in, header);
        CHECK(header == "f0,f1,f2,label");
        int rows = 0;
        std::string line;
        while (std::getline(in, line)) {
            if (!line.empty()) {
                ++rows;
            }
        }
        CHECK(rows == 5);
    }

    // values round-trip through the 17-digit rendering
    std::ifstream in(dir + "/pretrain.csv");
    std::string header, first;
    std::getline(in, header);
    std::getline(in, first);
    const double parsed = std::stod(first.substr(0, first.find(',')));
    CHECK(parsed == b.pretrain.x.at(0, 0));

    std::filesystem::remove_all(dir);
}
