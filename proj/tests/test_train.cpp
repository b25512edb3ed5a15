#include <doctest.h>

#include <cmath>
#include <stdexcept>

#include "levi/nn.hpp"
#include "levi/train.hpp"

using namespace levi;

namespace {

DataSplit regression_split(std::uint64_t seed, Extent rows, Extent cols) {
    Rng rng(seed);
    DataSplit d;
    d.x = Tensor::zeros({rows, cols});
    for (double& v : d.x.data) {
        v = rng.uniform(-1.0, 1.0);
    }
    d.y = Tensor::zeros({rows});
    for (Extent i = 0; i < rows; ++i) {
        d.y.at(i) = rng.uniform(-1.0, 1.0);
    }
    return d;
}

std::vector<std::vector<double>> snapshot(const ParamStore& store) {
    std::vector<std::vector<double>> s;
    for (const Param& p : store) {
        s.push_back(p.value.data);
    }
    return s;
}

BackboneDims small_backbone() {
    BackboneDims d;
    d.input = 3;
    d.width = 5;
    d.blocks = 4;
    d.output = 1;
    return d;
}

} // namespace

TEST_CASE("levi_loss: n=1 equals the plain head loss") {
    Rng rng(1);
    Graph g;
    Tensor pred = Tensor::zeros({7, 1});
    Tensor label = Tensor::zeros({7, 1});
    for (Extent i = 0; i < 7; ++i) {
        pred.at(i) = rng.uniform(-2, 2);
        label.at(i) = rng.uniform(-2, 2);
    }
    const NodeId p = g.constant(pred);
    const NodeId y = g.constant(label);
    LossSpec spec;
    const NodeId plain = mean_loss(g, p, y, spec);
    const NodeId both = levi_loss(g, {p}, y, HeadWeights::uniform(1), spec);
    CHECK(g.value(both).data[0] == g.value(plain).data[0]);
}

TEST_CASE("levi_loss: uniform weights average per-head mean losses") {
    Graph g;
    // two heads with mean losses 2 and 4: labels 0, predictions sqrt(2), 2
    const NodeId y = g.constant(Tensor::from({2, 1}, {0.0, 0.0}));
    const NodeId h1 = g.constant(Tensor::from({2, 1}, {std::sqrt(2.0), std::sqrt(2.0)}));
    const NodeId h2 = g.constant(Tensor::from({2, 1}, {2.0, 2.0}));
    LossSpec spec;
    const NodeId out = levi_loss(g, {h1, h2}, y, HeadWeights::uniform(2), spec);
    CHECK(g.value(out).data[0] == doctest::Approx(3.0).epsilon(1e-15));
}

TEST_CASE("levi_loss: weighted arithmetic over fixed per-head losses") {
    Graph g;
    const NodeId y = g.constant(Tensor::from({1, 1}, {0.0}));
    const NodeId h1 = g.constant(Tensor::from({1, 1}, {1.0}));            // loss 1
    const NodeId h2 = g.constant(Tensor::from({1, 1}, {std::sqrt(2.0)})); // loss 2
    const NodeId h3 = g.constant(Tensor::from({1, 1}, {std::sqrt(3.0)})); // loss 3
    HeadWeights w;
    w.weights = {0.5, 0.3, 0.2};
    LossSpec spec;
    const NodeId out = levi_loss(g, {h1, h2, h3}, y, w, spec);
    CHECK(g.value(out).data[0] == doctest::Approx(1.7).epsilon(1e-12));
}

TEST_CASE("levi_loss: uniform weights equal the double-average form") {
    // reference: (1/m)(1/n) sum over samples and heads of the per-sample loss
    Rng rng(2);
    for (int trial = 0; trial < 30; ++trial) {
        const Extent m = 1 + rng.below(8);
        const std::size_t n = 1 + static_cast<std::size_t>(rng.below(5));
        Graph g;
        Tensor label = Tensor::zeros({m, 1});
        for (Extent i = 0; i < m; ++i) {
            label.at(i) = rng.uniform(-2, 2);
        }
        const NodeId y = g.constant(label);
        std::vector<NodeId> preds;
        double double_avg = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            Tensor p = Tensor::zeros({m, 1});
            for (Extent i = 0; i < m; ++i) {
                p.at(i) = rng.uniform(-2, 2);
                const double d = p.at(i) - label.at(i);
                double_avg += d * d;
            }
            preds.push_back(g.constant(p));
        }
        double_avg /= static_cast<double>(m) * static_cast<double>(n);
        LossSpec spec;
        const NodeId out = levi_loss(g, preds, y, HeadWeights::uniform(n), spec);
        CHECK(g.value(out).data[0] == doctest::Approx(double_avg).epsilon(1e-12));
    }
}

TEST_CASE("levi_loss validates weights and shapes") {
    Graph g;
    const NodeId y = g.constant(Tensor::from({1, 1}, {0.0}));
    const NodeId h = g.constant(Tensor::from({1, 1}, {1.0}));
    HeadWeights bad;
    bad.weights = {0.5, 0.6};
    LossSpec spec;
    CHECK_THROWS_AS(levi_loss(g, {h, h}, y, bad, spec), std::runtime_error);
    HeadWeights neg;
    neg.weights = {1.5, -0.5};
    CHECK_THROWS_AS(levi_loss(g, {h, h}, y, neg, spec), std::runtime_error);
    const NodeId wide = g.constant(Tensor::zeros({1, 2}));
    CHECK_THROWS_AS(levi_loss(g, {h, wide}, y, HeadWeights::uniform(2), spec), std::runtime_error);
}

TEST_CASE("zero head weight stops gradient into that head") {
    LeviDims dims;
    dims.backbone = {3, 4, 2, 1};
    dims.task = {3, 4, 4, 2, {}};
    dims.head_hidden = 3;
    dims.head_weights = {1.0, 0.0};
    LeviComposition levi(dims, 8);
    levi.freeze_backbone(true);

    const DataSplit data = regression_split(9, 12, 3);
    Graph g;
    const ParamBinding b = bind_params(levi.store(), g);
    LossSpec spec;
    const NodeId loss =
        levi.loss_node(g, b, g.constant(data.x), g.constant(reshape(data.y, {12, 1})), spec);
    const GradMap grads = g.backward(loss);
    for (std::size_t i = 0; i < levi.store().size(); ++i) {
        const Param& p = levi.store().at(i);
        if (p.frozen) {
            continue;
        }
        double norm = 0.0;
        for (double v : grads.at(b.node_of[i]).data) {
            norm += std::abs(v);
        }
        INFO(p.name);
        if (p.name.rfind("head2.", 0) == 0) {
            CHECK(norm == 0.0);
        } else {
            CHECK(norm > 0.0);
        }
    }
}

TEST_CASE("train with zero steps returns the model bit-identical") {
    Backbone bb(small_backbone(), 3);
    const auto before = snapshot(bb.store());
    TrainConfig cfg;
    cfg.steps = 0;
    const TrainResult r = train(bb, regression_split(4, 10, 3), cfg);
    CHECK(r.trace.empty());
    CHECK(snapshot(bb.store()) == before);
}

TEST_CASE("train rejects an empty split and names the step on blow-up") {
    Backbone bb(small_backbone(), 3);
    DataSplit empty;
    empty.x = Tensor::zeros({1, 3});
    empty.y = Tensor::zeros({1});
    TrainConfig cfg;
    cfg.steps = 5;
    SUBCASE("empty") {
        DataSplit d;
        CHECK_THROWS_AS(train(bb, d, cfg), std::runtime_error);
    }
    SUBCASE("divergence diagnostic carries the step") {
        cfg.opt.kind = OptimizerKind::sgd;
        cfg.opt.lr = 1e18; // guaranteed blow-up
        cfg.steps = 50;
        try {
            train(bb, regression_split(4, 10, 3), cfg);
            FAIL("expected non-finite loss");
        } catch (const std::runtime_error& e) {
            CHECK(std::string(e.what()).find("step") != std::string::npos);
        }
    }
}

TEST_CASE("lp regime: 200 steps touch only the final head") {
    Backbone bb(small_backbone(), 5);
    set_regime_mask(bb, Regime::lp);
    const auto before = snapshot(bb.store());
    TrainConfig cfg;
    cfg.steps = 200;
    cfg.batch = 16;
    cfg.seed = 6;
    train(bb, regression_split(7, 40, 3), cfg);
    bool head_changed = false;
    for (std::size_t i = 0; i < bb.store().size(); ++i) {
        const Param& p = bb.store().at(i);
        if (p.name.rfind("backbone.head", 0) == 0) {
            head_changed = head_changed || p.value.data != before[i];
        } else {
            CHECK(p.value.data == before[i]);
        }
    }
    CHECK(head_changed);
}

TEST_CASE("regime masks set the documented freeze patterns") {
    Backbone bb(small_backbone(), 5);

    SUBCASE("lp trainable count equals final-head size") {
        set_regime_mask(bb, Regime::lp);
        CHECK(bb.store().count_elements(true) == 5 * 1 + 1);
    }
    SUBCASE("ht with four blocks trains blocks 3,4 and the head") {
        set_regime_mask(bb, Regime::ht);
        for (const Param& p : bb.store()) {
            const bool trainable = p.name.rfind("backbone.block3", 0) == 0 ||
                                   p.name.rfind("backbone.block4", 0) == 0 ||
                                   p.name.rfind("backbone.head", 0) == 0;
            INFO(p.name);
            CHECK(p.frozen == !trainable);
        }
    }
    SUBCASE("ft unfreezes everything") {
        set_regime_mask(bb, Regime::lp);
        set_regime_mask(bb, Regime::ft);
        CHECK(bb.store().count_elements(true) == bb.store().count_elements(false));
    }
    SUBCASE("fs reinitializes from the seed, independent of prior values") {
        TrainConfig cfg;
        cfg.steps = 20;
        cfg.batch = 8;
        train(bb, regression_split(8, 16, 3), cfg); // drift away from init
        set_regime_mask(bb, Regime::fs, 1234);
        Backbone fresh(small_backbone(), 1234);
        CHECK(snapshot(bb.store()) == snapshot(fresh.store()));
    }
    SUBCASE("lora mask without adapters is an error") {
        CHECK_THROWS_AS(set_regime_mask(bb, Regime::lora), std::runtime_error);
    }
}

TEST_CASE("frozen parameters are bit-identical before and after training in every regime") {
    for (Regime r : {Regime::lp, Regime::ht}) {
        Backbone bb(small_backbone(), 9);
        set_regime_mask(bb, r);
        const auto before = snapshot(bb.store());
        TrainConfig cfg;
        cfg.steps = 80;
        cfg.batch = 16;
        cfg.seed = 10;
        train(bb, regression_split(11, 32, 3), cfg);
        for (std::size_t i = 0; i < bb.store().size(); ++i) {
            if (bb.store().at(i).frozen) {
                INFO(regime_name(r), " ", bb.store().at(i).name);
                CHECK(bb.store().at(i).value.data == before[i]);
            }
        }
    }
}

TEST_CASE("train is a pure function of seed, init, config and data") {
    const DataSplit data = regression_split(12, 24, 3);
    TrainConfig cfg;
    cfg.steps = 60;
    cfg.batch = 8;
    cfg.seed = 77;

    Backbone a(small_backbone(), 13);
    Backbone b(small_backbone(), 13);
    const TrainResult ra = train(a, data, cfg);
    const TrainResult rb = train(b, data, cfg);
    CHECK(ra.trace == rb.trace);
    CHECK(snapshot(a.store()) == snapshot(b.store()));
}

TEST_CASE("lp_then_ft degenerates to its phases") {
    const DataSplit data = regression_split(14, 24, 3);
    TrainConfig lp_cfg;
    lp_cfg.steps = 50;
    lp_cfg.batch = 8;
    lp_cfg.seed = 15;
    TrainConfig ft_cfg;
    ft_cfg.steps = 40;
    ft_cfg.batch = 8;
    ft_cfg.seed = 16;

    SUBCASE("zero-length second phase equals pure lp") {
        Backbone a(small_backbone(), 17);
        Backbone b(small_backbone(), 17);
        TwoPhaseConfig two;
        two.phase1 = lp_cfg;
        two.phase2 = ft_cfg;
        two.phase2.steps = 0;
        const TrainResult r = lp_then_ft(a, data, two);
        set_regime_mask(b, Regime::lp);
        const TrainResult rb = train(b, data, lp_cfg);
        CHECK(r.trace == rb.trace);
        CHECK(snapshot(a.store()) == snapshot(b.store()));
    }
    SUBCASE("zero-length first phase equals pure ft") {
        Backbone a(small_backbone(), 17);
        Backbone b(small_backbone(), 17);
        TwoPhaseConfig two;
        two.phase1 = lp_cfg;
        two.phase1.steps = 0;
        two.phase2 = ft_cfg;
        const TrainResult r = lp_then_ft(a, data, two);
        set_regime_mask(b, Regime::ft);
        const TrainResult rb = train(b, data, ft_cfg);
        CHECK(r.trace == rb.trace);
        CHECK(snapshot(a.store()) == snapshot(b.store()));
    }
    SUBCASE("both phases replay bit-exactly") {
        Backbone a(small_backbone(), 18);
        Backbone b(small_backbone(), 18);
        TwoPhaseConfig two;
        two.phase1 = lp_cfg;
        two.phase2 = ft_cfg;
        const TrainResult ra = lp_then_ft(a, data, two);
        const TrainResult rb = lp_then_ft(b, data, two);
        CHECK(ra.trace.size() == 90);
        CHECK(ra.trace == rb.trace);
        CHECK(snapshot(a.store()) == snapshot(b.store()));
    }
}

TEST_CASE("output ensemble of identical members equals the single member") {
    Backbone a(small_backbone(), 19);
    Backbone b(small_backbone(), 19);
    Rng rng(20);
    Tensor x = Tensor::zeros({6, 3});
    for (double& v : x.data) {
        v = rng.uniform(-1, 1);
    }
    const Tensor solo = a.predict(x);
    const Tensor duo = ensemble_output({&a, &b}, x);
    CHECK(solo.data == duo.data);
}

TEST_CASE("output ensemble averages member predictions") {
    // two fixed linear models emitting constants 1 and 3
    BackboneDims dims;
    dims.input = 1;
    dims.width = 1;
    dims.blocks = 0;
    dims.output = 1;
    Backbone m1(dims, 1), m3(dims, 1);
    auto force_constant = [](Backbone& m, double c) {
        for (Param& p : m.store()) {
            std::fill(p.value.data.begin(), p.value.data.end(), 0.0);
        }
        m.store().find("backbone.head.b")->value.data[0] = c;
    };
    force_constant(m1, 1.0);
    force_constant(m3, 3.0);
    const Tensor x = Tensor::from({1, 1}, {0.42});
    CHECK(ensemble_output({&m1, &m3}, x).data[0] == 2.0);

    // order invariance (commutative mean up to rounding)
    Backbone m2(dims, 1);
    force_constant(m2, 2.0);
    const double abc = ensemble_output({&m1, &m2, &m3}, x).data[0];
    const double cab = ensemble_output({&m3, &m1, &m2}, x).data[0];
    CHECK(abc == doctest::Approx(cab).epsilon(1e-15));
}

TEST_CASE("output ensemble rejects mismatched member output shapes") {
    BackboneDims d1;
    d1.input = 2;
    d1.output = 1;
    BackboneDims d2 = d1;
    d2.output = 3;
    Backbone a(d1, 1), b(d2, 1);
    const Tensor x = Tensor::zeros({2, 2});
    CHECK_THROWS_AS(ensemble_output({&a, &b}, x), std::runtime_error);
}

TEST_CASE("weight ensemble endpoints and midpoint") {
    ParamStore ft, zero;
    ft.add("w", Tensor::row({1, 1, 1, 1, 1}));
    zero.add("w", Tensor::row({1, 1, 1, 0, 0}));

    CHECK(ensemble_weight(ft, zero, 1.0).at(0).value.data == ft.at(0).value.data);
    CHECK(ensemble_weight(ft, zero, 0.0).at(0).value.data == zero.at(0).value.data);
    CHECK(ensemble_weight(ft, zero, 0.5).at(0).value.data == std::vector<double>{1, 1, 1, 0.5, 0.5});
}

TEST_CASE("weight ensemble is linear along the segment") {
    Rng rng(21);
    ParamStore a, b;
    Tensor ta = Tensor::zeros({4});
    Tensor tb = Tensor::zeros({4});
    for (int i = 0; i < 4; ++i) {
        ta.at(i) = rng.uniform(-1, 1);
        tb.at(i) = rng.uniform(-1, 1);
    }
    a.add("w", ta);
    b.add("w", tb);
    for (double alpha : {0.1, 0.3, 0.7, 0.9}) {
        const ParamStore mid = ensemble_weight(a, b, alpha);
        for (int i = 0; i < 4; ++i) {
            CHECK(mid.at(0).value.at(i) ==
                  doctest::Approx(alpha * ta.at(i) + (1 - alpha) * tb.at(i)).epsilon(1e-15));
        }
    }
}

TEST_CASE("weight ensemble rejects structural mismatches") {
    ParamStore a, b;
    a.add("w", Tensor::row({1, 2}));
    b.add("v", Tensor::row({1, 2}));
    CHECK_THROWS_AS(ensemble_weight(a, b, 0.5), std::runtime_error);
}

TEST_CASE("single-head levi training trace matches a hand-rolled loop") {
    LeviDims dims;
    dims.backbone = {3, 4, 1, 1};
    dims.task = {3, 4, 4, 2, {}};
    dims.head_hidden = 3;
    LeviComposition levi(dims, 30);
    levi.freeze_backbone(true);
    LeviComposition twin(dims, 30);
    twin.freeze_backbone(true);

    const DataSplit data = regression_split(31, 16, 3);
    TrainConfig cfg;
    cfg.steps = 30;
    cfg.batch = 16; // full batch, no shuffling
    cfg.seed = 32;
    cfg.opt.kind = OptimizerKind::sgd;
    cfg.opt.lr = 0.05;
    const TrainResult fast = train(levi, data, cfg);

    // manual loop: same forward, plain mean loss on the only head
    std::vector<double> trace;
    for (int step = 0; step < 30; ++step) {
        Graph g;
        const ParamBinding b = bind_params(twin.store(), g);
        const std::vector<NodeId> heads = twin.forward_heads(g, b, g.constant(data.x));
        REQUIRE(heads.size() == 1);
        LossSpec spec;
        const NodeId loss = mean_loss(g, heads[0], g.constant(reshape(data.y, {16, 1})), spec);
        trace.push_back(g.value(loss).data[0]);
        const GradMap grads = g.backward(loss);
        for (std::size_t i = 0; i < twin.store().size(); ++i) {
            Param& p = twin.store().at(i);
            if (p.frozen) {
                continue;
            }
            const Tensor& grad = grads.at(b.node_of[i]);
            for (std::size_t k = 0; k < p.value.data.size(); ++k) {
                p.value.data[k] -= 0.05 * grad.data[k];
            }
        }
    }
    CHECK(fast.trace == trace);
}
