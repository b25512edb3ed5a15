#include "levi/data.hpp"

#include <cmath>
#include <filesystem>
#include <sstream>
#include <stdexcept>

#include "levi/checkpoint.hpp"

namespace levi {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

} // namespace

// ---------------------------------------------------------------------------
// linear fixture
// ---------------------------------------------------------------------------

LinearFixture linear_fixture() {
    LinearFixture fx;
    fx.w_true = {0, 1, 1, 1, 0};
    fx.w_pretrain = {1, 1, 1, 0, 0};
    fx.w_scratch = {0, 0, 1, 1, 1};
    fx.w_finetune = {1, 1, 1, 1, 1};
    fx.finetune_points = {
        {{0, 0, 1.0 / 3, 1.0 / 3, 1.0 / 3}, 1.0},
        {{0, 0, -0.5, -0.5, 0}, -1.0},
        {{0, 0, 0.5, 0.25, 0.25}, 1.0},
    };
    fx.test_points = {
        {{1, 1.0 / 3, 1.0 / 3, 1.0 / 3, 1}, 1.0},
        {{1, -1.0 / 3, -1.0 / 3, -1.0 / 3, 1}, -1.0},
        {{-1, 1.0 / 3, 1.0 / 3, 1.0 / 3, -1}, 1.0},
        {{-1, -1.0 / 3, -1.0 / 3, -1.0 / 3, -1}, -1.0},
    };
    return fx;
}

double linear_predict(const LinearFixture::Vec5& w, const LinearFixture::Vec5& x) {
    double acc = 0.0;
    for (std::size_t i = 0; i < 5; ++i) {
        acc += w[i] * x[i];
    }
    return acc;
}

FixtureTable fixture_table(const LinearFixture& fx) {
    FixtureTable table;
    const std::pair<std::string, const LinearFixture::Vec5*> models[] = {
        {"pretrain", &fx.w_pretrain},
        {"scratch", &fx.w_scratch},
        {"finetune", &fx.w_finetune},
    };
    double sums[3] = {0, 0, 0};
    for (std::size_t t = 0; t < fx.test_points.size(); ++t) {
        const auto& [x, y] = fx.test_points[t];
        for (std::size_t m = 0; m < 3; ++m) {
            FixtureRow row;
            row.test_point = static_cast<int>(t) + 1;
            row.model = models[m].first;
            row.label = y;
            row.prediction = linear_predict(*models[m].second, x);
            row.l1 = std::abs(y - row.prediction);
            sums[m] += row.l1;
            table.rows.push_back(row);
        }
    }
    const double n = static_cast<double>(fx.test_points.size());
    table.mean_l1_pretrain = sums[0] / n;
    table.mean_l1_scratch = sums[1] / n;
    table.mean_l1_finetune = sums[2] / n;
    return table;
}

FixtureCheck check_fixture_table(const FixtureTable& table, double tolerance) {
    // expected predictions per (test point, model), exact rationals
    const double expected_pred[4][3] = {
        {5.0 / 3, 5.0 / 3, 3.0},
        {1.0 / 3, 1.0 / 3, 1.0},
        {-1.0 / 3, -1.0 / 3, -1.0},
        {-5.0 / 3, -5.0 / 3, -3.0},
    };
    const double expected_l1[4][3] = {
        {2.0 / 3, 2.0 / 3, 2.0},
        {4.0 / 3, 4.0 / 3, 2.0},
        {4.0 / 3, 4.0 / 3, 2.0},
        {2.0 / 3, 2.0 / 3, 2.0},
    };
    FixtureCheck check;
    if (table.rows.size() != 12) {
        check.first_mismatch = "expected 12 rows, got " + std::to_string(table.rows.size());
        return check;
    }
    for (std::size_t i = 0; i < table.rows.size(); ++i) {
        const FixtureRow& row = table.rows[i];
        const std::size_t t = static_cast<std::size_t>(row.test_point - 1);
        const std::size_t m = row.model == "pretrain" ? 0 : row.model == "scratch" ? 1 : 2;
        if (std::abs(row.prediction - expected_pred[t][m]) > tolerance ||
            std::abs(row.l1 - expected_l1[t][m]) > tolerance) {
            check.first_mismatch = "row " + std::to_string(row.test_point) + " (" + row.model + ", table row " +
                                   std::to_string(i + 1) + "): prediction " + format_g17(row.prediction) +
                                   ", l1 " + format_g17(row.l1);
            return check;
        }
    }
    if (std::abs(table.mean_l1_pretrain - 1.0) > tolerance || std::abs(table.mean_l1_scratch - 1.0) > tolerance ||
        std::abs(table.mean_l1_finetune - 2.0) > tolerance) {
        check.first_mismatch = "mean l1 row: pretrain " + format_g17(table.mean_l1_pretrain) + ", scratch " +
                               format_g17(table.mean_l1_scratch) + ", finetune " +
                               format_g17(table.mean_l1_finetune);
        return check;
    }
    if (!(table.mean_l1_finetune > table.mean_l1_pretrain && table.mean_l1_finetune > table.mean_l1_scratch)) {
        check.first_mismatch = "fine-tuned model is not strictly worst";
        return check;
    }
    check.pass = true;
    return check;
}

// ---------------------------------------------------------------------------
// spurious-feature bundles
// ---------------------------------------------------------------------------

void SpuriousSpec::validate() const {
    if (d_transfer < 1) {
        fail("spurious spec: need at least one transferable feature");
    }
    if (d_spurious_pretrain < 0 || d_spurious_finetune < 0) {
        fail("spurious spec: negative feature group size");
    }
    for (double s : {strength_spurious_pretrain, strength_spurious_finetune, strength_transfer}) {
        if (s < 0.0 || s > 1.0) {
            fail("spurious spec: correlation strength " + std::to_string(s) + " outside [0, 1]");
        }
    }
    if (noise_std < 0.0) {
        fail("spurious spec: negative noise std");
    }
    if (samples_per_split < 1) {
        fail("spurious spec: samples_per_split must be >= 1");
    }
}

namespace {

enum class SplitRole { pretrain, finetune, id_test, ood_test };

DataSplit draw_split(const SpuriousSpec& spec, SplitRole role, Rng& rng) {
    const Extent m = spec.samples_per_split;
    const Extent d = spec.feature_dim();
    DataSplit split;
    split.x = Tensor::zeros({m, d});
    split.y = Tensor::zeros({m});

    const bool pre_active = role == SplitRole::pretrain;
    const bool fin_active = role == SplitRole::finetune || role == SplitRole::id_test;
    const double pre_coef =
        spec.d_spurious_pretrain > 0 ? spec.strength_spurious_pretrain / std::sqrt(double(spec.d_spurious_pretrain)) : 0.0;
    const double fin_coef =
        spec.d_spurious_finetune > 0 ? spec.strength_spurious_finetune / std::sqrt(double(spec.d_spurious_finetune)) : 0.0;
    const double tr_coef = spec.strength_transfer / std::sqrt(static_cast<double>(spec.d_transfer));

    for (Extent i = 0; i < m; ++i) {
        double signal = 0.0;
        Extent c = 0;
        for (Extent k = 0; k < spec.d_spurious_pretrain; ++k, ++c) {
            const double v = rng.normal();
            split.x.at(i, c) = v;
            if (pre_active) {
                signal += pre_coef * v;
            }
        }
        for (Extent k = 0; k < spec.d_spurious_finetune; ++k, ++c) {
            const double v = rng.normal();
            split.x.at(i, c) = v;
            if (fin_active) {
                signal += fin_coef * v;
            }
        }
        for (Extent k = 0; k < spec.d_transfer; ++k, ++c) {
            const double v = rng.normal();
            split.x.at(i, c) = v;
            signal += tr_coef * v;
        }
        const double raw = signal + spec.noise_std * rng.normal();
        split.y.at(i) = spec.label == LabelKind::binary ? (raw >= 0.0 ? 1.0 : 0.0) : raw;
    }
    return split;
}

} // namespace

SpuriousDatasetBundle generate_bundle(const SpuriousSpec& spec) {
    spec.validate();
    SpuriousDatasetBundle bundle;
    bundle.spec = spec;
    {
        Rng rng(derive_seed(spec.seed, SeedPurpose::data, 0));
        bundle.pretrain = draw_split(spec, SplitRole::pretrain, rng);
    }
    {
        Rng rng(derive_seed(spec.seed, SeedPurpose::data, 1));
        bundle.finetune = draw_split(spec, SplitRole::finetune, rng);
    }
    {
        Rng rng(derive_seed(spec.seed, SeedPurpose::data, 2));
        bundle.id_test = draw_split(spec, SplitRole::id_test, rng);
    }
    {
        Rng rng(derive_seed(spec.seed, SeedPurpose::data, 3));
        bundle.ood_test = draw_split(spec, SplitRole::ood_test, rng);
    }
    return bundle;
}

void export_bundle(const SpuriousDatasetBundle& bundle, const std::string& dir) {
    std::filesystem::create_directories(dir);
    const std::pair<std::string, const DataSplit*> splits[] = {
        {"pretrain", &bundle.pretrain},
        {"finetune", &bundle.finetune},
        {"id_test", &bundle.id_test},
        {"ood_test", &bundle.ood_test},
    };
    for (const auto& [name, split] : splits) {
        std::ostringstream out;
        for (Extent c = 0; c < split->x.cols(); ++c) {
            out << "f" << c << ",";
        }
        out << "label\n";
        for (Extent i = 0; i < split->x.rows(); ++i) {
            for (Extent c = 0; c < split->x.cols(); ++c) {
                out << format_g17(split->x.at(i, c)) << ",";
            }
            out << format_g17(split->y.at(i)) << "\n";
        }
        atomic_write_file(dir + "/" + name + ".csv", out.str());
    }
}

double feature_label_correlation(const DataSplit& split, Extent col) {
    const Extent m = split.rows();
    if (m < 2) {
        fail("correlation needs at least two rows");
    }
    double mx = 0.0, my = 0.0;
    for (Extent i = 0; i < m; ++i) {
        mx += split.x.at(i, col);
        my += split.y.at(i);
    }
    mx /= static_cast<double>(m);
    my /= static_cast<double>(m);
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (Extent i = 0; i < m; ++i) {
        const double dx = split.x.at(i, col) - mx;
        const double dy = split.y.at(i) - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx == 0.0 || syy == 0.0) {
        return 0.0;
    }
    return sxy / std::sqrt(sxx * syy);
}

} // namespace levi
