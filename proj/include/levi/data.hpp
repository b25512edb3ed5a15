#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "levi/train.hpp"

namespace levi {

// ---------------------------------------------------------------------------
// closed-form linear fixture
// ---------------------------------------------------------------------------

// Five-feature linear task where one spurious feature comes with the
// pre-trained weights and another with the fine-tuning data. The fine-tuned
// weights inherit both, so their out-of-distribution error is strictly worse
// than either single-source model. All values are exact by construction.
struct LinearFixture {
    using Vec5 = std::array<double, 5>;
    Vec5 w_true;
    Vec5 w_pretrain;
    Vec5 w_scratch;
    Vec5 w_finetune;
    std::vector<std::pair<Vec5, double>> finetune_points; // (x, y)
    std::vector<std::pair<Vec5, double>> test_points;     // (x, y)
};

LinearFixture linear_fixture();

double linear_predict(const LinearFixture::Vec5& w, const LinearFixture::Vec5& x);

struct FixtureRow {
    int test_point = 0; // 1-based
    std::string model;  // pretrain | scratch | finetune
    double label = 0.0;
    double prediction = 0.0;
    double l1 = 0.0;
};

struct FixtureTable {
    std::vector<FixtureRow> rows;            // 12 rows: 4 test points x 3 models
    double mean_l1_pretrain = 0.0;
    double mean_l1_scratch = 0.0;
    double mean_l1_finetune = 0.0;
};

FixtureTable fixture_table(const LinearFixture& fx);

// Verification of a fixture table against the exact expected values.
struct FixtureCheck {
    bool pass = false;
    std::string first_mismatch; // empty when pass
};

FixtureCheck check_fixture_table(const FixtureTable& table, double tolerance = 1e-12);

// ---------------------------------------------------------------------------
// spurious-feature bundles
// ---------------------------------------------------------------------------

enum class LabelKind { regression, binary };

// Feature layout: [pretrain-spurious..., finetune-spurious..., transferable...].
// Features are standard normal; the label is a linear combination of the
// split's active feature groups plus gaussian noise (sign of it for binary
// labels). Group strengths are the mixing coefficients, scaled by 1/sqrt(d)
// within a group. Spurious features are active only in their own split, so
// they carry no label signal anywhere else by construction.
struct SpuriousSpec {
    Extent d_spurious_pretrain = 1;
    Extent d_spurious_finetune = 1;
    Extent d_transfer = 1;
    double strength_spurious_pretrain = 0.8;
    double strength_spurious_finetune = 0.8;
    double strength_transfer = 0.6;
    double noise_std = 0.5;
    LabelKind label = LabelKind::binary;
    Extent samples_per_split = 2000;
    std::uint64_t seed = 0;

    Extent feature_dim() const { return d_spurious_pretrain + d_spurious_finetune + d_transfer; }
    void validate() const; // throws on degenerate specs
};

struct SpuriousDatasetBundle {
    SpuriousSpec spec;
    DataSplit pretrain;
    DataSplit finetune;
    DataSplit id_test;  // fresh draw from the finetune distribution
    DataSplit ood_test; // only transferable features carry label signal
};

SpuriousDatasetBundle generate_bundle(const SpuriousSpec& spec);

// one delimited text file per split, header f0..fk,label, 17 significant digits
void export_bundle(const SpuriousDatasetBundle& bundle, const std::string& dir);

// Pearson correlation between feature column `col` and the labels
double feature_label_correlation(const DataSplit& split, Extent col);

} // namespace levi
