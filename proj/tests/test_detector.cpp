#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "saegis/detector.hpp"
#include "saegis/error.hpp"
#include "test_util.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

using namespace saegis;

namespace {

SparseCode code(std::size_t d_sae, std::vector<std::uint32_t> idx) {
    SparseCode c;
    c.d_sae = d_sae;
    c.values.assign(idx.size(), 1.0f);
    c.indices = std::move(idx);
    return c;
}

FeatureRanking ranking_of(std::vector<std::uint32_t> sel, std::size_t d_sae, std::string layer = "L") {
    FeatureRanking r;
    r.layer_id = std::move(layer);
    r.d_sae = d_sae;
    r.K = sel.size();
    r.selected = std::move(sel);
    r.selected_scores.assign(r.K, 1.0);
    return r;
}

SaeModel identity_model(std::size_t d) {
    SaeModel m;
    m.d_model = m.d_sae = m.k = d;
    m.w_enc = SaeModel::Matrix::Identity(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
    m.w_dec = m.w_enc;
    m.b_enc = SaeModel::Vector::Zero(static_cast<Eigen::Index>(d));
    m.b_dec = SaeModel::Vector::Zero(static_cast<Eigen::Index>(d));
    return m;
}

// Sample i has 10 tokens; the first fires[i] of them are positive on dimension 0.
ActivationSet firing_set(const std::string& layer, const std::vector<int>& fires) {
    ActivationSet s;
    s.layer_id = layer;
    s.dim = 2;
    for (std::size_t i = 0; i < fires.size(); ++i) {
        SampleRecord r{"x" + std::to_string(i), Label::clean, 10, {}};
        for (int t = 0; t < 10; ++t) {
            r.values.push_back(t < fires[i] ? 1.0f : -1.0f);
            r.values.push_back(-1.0f);
        }
        s.samples.push_back(std::move(r));
    }
    return s;
}

LayerDetector layer_of(const std::string& id, std::vector<std::uint32_t> sel) {
    return {id, id + ".sae", id + ".json", identity_model(2), ranking_of(std::move(sel), 2, id)};
}

// Brute-force nearest-rank quantile with alpha = num / 100, all in integers.
double oracle_quantile(std::vector<double> v, int num) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    const std::size_t rank = std::max<std::size_t>(1, ((100 - num) * n + 99) / 100);
    return v[rank - 1];
}

double log_choose(double n, double k) { return std::lgamma(n + 1) - std::lgamma(k + 1) - std::lgamma(n - k + 1); }

} // namespace

TEST_CASE("activation_count examples") {
    const auto r = ranking_of({0, 2, 5}, 8);
    const std::vector<SparseCode> quiet{code(8, {1, 3}), code(8, {4})};
    CHECK(activation_count(quiet, r) == 0.0);
    const std::vector<SparseCode> full{code(8, {0, 2, 5}), code(8, {0, 2, 5, 7})};
    CHECK(activation_count(full, r) == 3.0);
    const std::vector<SparseCode> mixed{code(8, {0, 2, 4}), code(8, {5, 6})};
    CHECK(activation_count(mixed, r) == 1.5);
}

TEST_CASE("activation_count rejects mismatched shapes") {
    const auto m = identity_model(2);
    CHECK_THROWS_AS(activation_count(m, ranking_of({0}, 3), firing_set("L", {3}).samples[0]), DataError);
    const auto sample = test::random_set(1, 3, 1).samples[0];
    CHECK_THROWS_AS(activation_count(m, ranking_of({0}, 2), sample), DataError);
    CHECK(activation_count(m, ranking_of({0}, 2), firing_set("L", {3}).samples[0]) == doctest::Approx(0.3));
}

TEST_CASE("calibrate_threshold examples") {
    std::vector<double> c(100);
    std::iota(c.begin(), c.end(), 0.0);
    const double tau = calibrate_threshold(c, 0.02);
    CHECK(tau == 97.0);
    const auto above = std::count_if(c.begin(), c.end(), [&](double v) { return v > tau; });
    CHECK(above == 2);

    const std::vector<double> flat(37, 1.25);
    CHECK(calibrate_threshold(flat, 0.02) == 1.25);
    CHECK(std::count_if(flat.begin(), flat.end(), [](double v) { return v > 1.25; }) == 0);

    const std::vector<double> some{0.3, 4.0, 2.0, 4.5, 1.0};
    CHECK(calibrate_threshold(some, 0.0) == 4.5);

    CHECK_THROWS_AS(calibrate_threshold(std::vector<double>{}, 0.02), DataError);
    CHECK_THROWS_AS(calibrate_threshold(some, 1.0), DataError);
    CHECK_THROWS_AS(calibrate_threshold(some, -0.1), DataError);
}

TEST_CASE("calibrate_threshold equals a sort-and-index oracle, duplicates included") {
    std::mt19937_64 rng(4);
    std::uniform_int_distribution<int> value(0, 12), size(1, 300), pct(0, 50);
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<double> v(static_cast<std::size_t>(size(rng)));
        for (auto& x : v) x = 0.25 * value(rng);
        const int num = pct(rng);
        const double alpha = num / 100.0;
        const double tau = calibrate_threshold(v, alpha);
        REQUIRE(tau == oracle_quantile(v, num));
        const auto above = std::count_if(v.begin(), v.end(), [&](double x) { return x > tau; });
        CHECK(static_cast<double>(above) <= alpha * static_cast<double>(v.size()) + 1e-12);
    }
}

TEST_CASE("classify uses a strict inequality") {
    DetectorProfile p;
    CHECK_THROWS_AS(classify(p, "a", 1.0), DataError);
    p.tau = 2.5;
    CHECK(classify(p, "a", 2.5).verdict == Label::clean);
    CHECK(classify(p, "a", std::nextafter(2.5, 3.0)).verdict == Label::adversarial);
    CHECK(classify(p, "a", 2.5 + 1e-9).verdict == Label::adversarial);
    p.tau = 0.0;
    const auto pred = classify(p, "zero", 0.0);
    CHECK(pred.verdict == Label::clean);
    CHECK(pred.score == 0.0);
    CHECK(pred.sample_id == "zero");
}

TEST_CASE("ensemble_count examples") {
    CHECK(ensemble_count(std::vector<double>{2.0, 4.0}) == 3.0);
    CHECK(ensemble_count(std::vector<double>{5.0}) == 5.0);
    CHECK(ensemble_count(std::vector<double>{0.0, 0.0, 0.0}) == 0.0);
    CHECK_THROWS_AS(ensemble_count(std::vector<double>{1.0, 2.0}, 3), DataError);
    CHECK_THROWS_AS(ensemble_count(std::vector<double>{}), DataError);

    std::mt19937_64 rng(8);
    std::uniform_real_distribution<double> u(0.0, 64.0);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> v(1 + trial % 6);
        for (auto& x : v) x = u(rng);
        const double base = ensemble_count(v);
        std::vector<double> same(v.size(), v[0]);
        CHECK(ensemble_count(same) == doctest::Approx(v[0]).epsilon(1e-15));
        std::shuffle(v.begin(), v.end(), rng);
        CHECK(ensemble_count(v) == base);
    }
}

TEST_CASE("ensemble calibration: identical layers, a silent layer, layer order") {
    const std::vector<int> fires{0, 1, 1, 2, 3, 5, 5, 6, 7, 8, 9, 10, 2, 4, 4, 6, 0, 3, 8, 1};
    const std::vector<ActivationSet> single_dev{firing_set("A", fires)};
    const auto single = calibrate_ensemble({layer_of("A", {0})}, single_dev, 0.1);
    CHECK(single.mode == DetectorMode::single);
    CHECK(single.calibration_size == fires.size());
    const double tau_a = *single.tau;
    CHECK(tau_a == doctest::Approx(0.8)); // 18th smallest of 20

    const std::vector<ActivationSet> twin_dev{firing_set("A", fires), firing_set("B", fires)};
    const auto twin = calibrate_ensemble({layer_of("A", {0}), layer_of("B", {0})}, twin_dev, 0.1);
    CHECK(twin.mode == DetectorMode::ensemble);
    CHECK(*twin.tau == tau_a);

    // Layer B selects feature 1, which never fires.
    const auto half = calibrate_ensemble({layer_of("A", {0}), layer_of("B", {1})}, twin_dev, 0.1);
    CHECK(*half.tau == tau_a / 2.0);
    const auto swapped = calibrate_ensemble({layer_of("B", {1}), layer_of("A", {0})}, twin_dev, 0.1);
    CHECK(*swapped.tau == *half.tau);
    const auto s1 = score_inputs(half, twin_dev);
    const auto s2 = score_inputs(swapped, twin_dev);
    CHECK(s1 == s2);
}

TEST_CASE("score_inputs matches samples across layers by id") {
    auto a = firing_set("A", {1, 2, 3});
    auto b = firing_set("B", {4, 5, 6});
    std::reverse(b.samples.begin(), b.samples.end());
    DetectorProfile p;
    p.layers = {layer_of("A", {0}), layer_of("B", {0})};
    const std::vector<ActivationSet> sets{b, a};
    const auto scored = score_inputs(p, sets);
    REQUIRE(scored.size() == 3);
    CHECK(scored[0].first == "x0");
    CHECK(scored[0].second == doctest::Approx((0.1 + 0.4) / 2));
    CHECK(scored[2].second == doctest::Approx((0.3 + 0.6) / 2));

    b.samples.pop_back();
    const std::vector<ActivationSet> short_sets{a, b};
    CHECK_THROWS_AS(score_inputs(p, short_sets), DataError);
    const std::vector<ActivationSet> missing{a};
    CHECK_THROWS_AS(score_inputs(p, missing), DataError);
}

TEST_CASE("calibration refuses adversarial dev samples") {
    auto dev = firing_set("A", {1, 2, 3});
    dev.samples[1].label = Label::adversarial;
    const std::vector<ActivationSet> sets{dev};
    CHECK_THROWS_AS(calibrate_ensemble({layer_of("A", {0})}, sets, 0.02), DataError);
    CHECK_THROWS_AS(calibrate_ensemble({}, sets, 0.02), DataError);
}

TEST_CASE("counts stay in [0, K] and grow with the selection") {
    std::mt19937_64 rng(31);
    const auto model = init_model(6, 24, 5, 3);
    const auto set = test::random_set(20, 6, 5);
    for (const auto& s : set.samples) {
        std::vector<std::uint32_t> sel;
        std::vector<std::uint32_t> order(24);
        std::iota(order.begin(), order.end(), 0u);
        std::shuffle(order.begin(), order.end(), rng);
        double prev = 0.0;
        for (auto f : order) {
            sel.push_back(f);
            const double n = activation_count(model, ranking_of(sel, 24), s);
            CHECK(n >= prev);
            CHECK(n <= static_cast<double>(sel.size()));
            prev = n;
        }
        CHECK(prev <= 5.0);
    }
}

TEST_CASE("dense baseline examples") {
    ActivationSet clean{"L", 2, {{"c0", Label::clean, 1, {1.0f, 0.0f}}}};
    ActivationSet adv{"L", 2, {{"a0", Label::adversarial, 2, {0.0f, 1.0f, 0.0f, 3.0f}}}};
    const auto p = dense_fit(clean, adv);
    CHECK(p.mu_clean == std::vector<double>{1.0, 0.0});
    CHECK(p.mu_adversarial == std::vector<double>{0.0, 2.0});
    CHECK(dense_fit(clean, clean).mu_clean == dense_fit(clean, clean).mu_adversarial);

    ActivationSet two{"L", 2, {{"u", Label::clean, 1, {2.0f, 0.0f}}, {"v", Label::clean, 2, {0.0f, 4.0f, 2.0f, 0.0f}}}};
    CHECK(dense_fit(two, adv).mu_clean == std::vector<double>{1.5, 1.0});

    const DenseProfile profile{{p}};
    auto verdict = [&](std::vector<float> e) {
        const SampleRecord s{"s", Label::unknown, 1, std::move(e)};
        const SampleRecord* row[] = {&s};
        return dense_classify(profile, row).verdict;
    };
    CHECK(verdict({1.0f, 0.0f}) == Label::clean);
    CHECK(verdict({0.0f, 2.0f}) == Label::adversarial);
    CHECK(verdict({1.0f, 1.0f}) == Label::clean);
    CHECK_THROWS_AS(verdict({0.0f, 0.0f}), NumericError);

    ActivationSet empty{"L", 2, {}};
    CHECK_THROWS(dense_fit(empty, adv));
}

TEST_CASE("dense ensemble averages the margin across layers") {
    const DenseLayerProfile a{"A", {1.0, 0.0}, {0.0, 1.0}};
    const DenseLayerProfile b{"B", {0.0, 1.0}, {1.0, 0.0}};
    const DenseProfile profile{{a, b}};
    const SampleRecord sa{"s", Label::unknown, 1, {0.0f, 1.0f}};  // margin +1 on A
    const SampleRecord sb{"s", Label::unknown, 1, {1.0f, 0.2f}};  // margin on B
    const SampleRecord* row[] = {&sa, &sb};
    const auto pred = dense_classify(profile, row);
    const double mb = dense_margin(b, sb);
    CHECK(pred.score == doctest::Approx((1.0 + mb) / 2.0));
    CHECK(pred.verdict == ((1.0 + mb) > 0 ? Label::adversarial : Label::clean));
}

TEST_CASE("reconstruction_anomaly") {
    const auto m = identity_model(3);
    const SampleRecord exact{"e", Label::clean, 2, {0.5f, 1.0f, 0.0f, 2.0f, 0.1f, 0.3f}};
    CHECK(reconstruction_anomaly(m, exact) == 0.0);
    const auto model = init_model(4, 9, 2, 6);
    const auto set = test::random_set(5, 4, 2);
    for (const auto& s : set.samples) CHECK(reconstruction_anomaly(model, s) == reconstruction_loss(model, s));
    CHECK_THROWS_AS(reconstruction_anomaly(m, set.samples[0]), DataError);
}

TEST_CASE("clean-only threshold controls the fresh false-positive rate at the exact rate") {
    // With continuous i.i.d. scores the number of fresh samples above the r-th smallest
    // of n calibration samples follows a closed form; compare the pass rate against it.
    const std::size_t n = 100, m = 100, trials = 4000;
    const double alpha = 0.02;
    const std::size_t r = 98;
    const double bound = alpha + 3.0 * std::sqrt(alpha * (1 - alpha) / static_cast<double>(m));
    double p_ok = 0.0;
    for (std::size_t j = 0; static_cast<double>(j) <= bound * static_cast<double>(m); ++j) {
        p_ok += std::exp(log_choose(static_cast<double>(r - 1 + m - j), static_cast<double>(m - j)) +
                         log_choose(static_cast<double>(n - r + j), static_cast<double>(j)) -
                         log_choose(static_cast<double>(n + m), static_cast<double>(m)));
    }
    std::mt19937_64 rng(77);
    std::normal_distribution<double> g(0.0, 1.0);
    std::size_t ok = 0;
    for (std::size_t t = 0; t < trials; ++t) {
        std::vector<double> dev(n);
        for (auto& x : dev) x = g(rng);
        DetectorProfile p;
        p.tau = calibrate_threshold(dev, alpha);
        std::size_t fp = 0;
        for (std::size_t i = 0; i < m; ++i) fp += classify(p, "", g(rng)).verdict == Label::adversarial;
        ok += static_cast<double>(fp) / static_cast<double>(m) <= bound;
    }
    const double rate = static_cast<double>(ok) / static_cast<double>(trials);
    const double se = std::sqrt(p_ok * (1 - p_ok) / static_cast<double>(trials));
    MESSAGE("exact pass probability " << p_ok << ", observed " << rate);
    CHECK(p_ok > 0.9);
    CHECK(std::abs(rate - p_ok) < 4.0 * se);
}

TEST_CASE("profile and prediction files round trip") {
    const auto dir = test::scratch_dir("profile");
    save_model(identity_model(2), dir / "A.sae");
    save_ranking(ranking_of({0}, 2, "A"), dir / "A.json");
    save_model(identity_model(2), dir / "B.sae");
    save_ranking(ranking_of({1}, 2, "B"), dir / "B.json");

    const std::vector<ActivationSet> dev{firing_set("A", {1, 4, 6, 2}), firing_set("B", {1, 4, 6, 2})};
    auto layers = std::vector<LayerDetector>{layer_of("A", {0}), layer_of("B", {1})};
    // Relative names resolve against the profile directory.
    const auto p = calibrate_ensemble(layers, dev, 0.25);
    save_profile(p, dir / "profile.json");
    const auto back = load_profile(dir / "profile.json");
    CHECK(back.mode == DetectorMode::ensemble);
    CHECK(*back.tau == *p.tau);
    CHECK(back.alpha == 0.25);
    CHECK(back.calibration_size == 4);
    REQUIRE(back.layers.size() == 2);
    CHECK(back.layers[1].ranking.selected == std::vector<std::uint32_t>{1});
    CHECK(back.layers[0].model == identity_model(2));

    DetectorProfile uncal;
    uncal.layers = layers;
    CHECK_THROWS_AS(save_profile(uncal, dir / "bad.json"), DataError);
    std::filesystem::remove(dir / "B.sae");
    CHECK_THROWS_AS(load_profile(dir / "profile.json"), DataError);

    const auto preds = detect(p, dev);
    std::vector<double> scores;
    std::vector<Label> labels;
    for (const auto& q : preds) {
        scores.push_back(q.score);
        labels.push_back(q.verdict);
    }
    const auto hist = make_histogram(scores, labels, 5);
    CHECK(hist.edges.size() == 6);
    std::size_t total = 0;
    for (const auto& [label, row] : hist.counts) total += std::accumulate(row.begin(), row.end(), std::size_t{0});
    CHECK(total == preds.size());
    save_predictions(preds, *p.tau, hist, dir / "pred.json");
    double tau = -1;
    const auto loaded = load_predictions(dir / "pred.json", &tau);
    CHECK(tau == *p.tau);
    REQUIRE(loaded.size() == preds.size());
    for (std::size_t i = 0; i < preds.size(); ++i) {
        CHECK(loaded[i].sample_id == preds[i].sample_id);
        CHECK(loaded[i].score == preds[i].score);
        CHECK(loaded[i].verdict == preds[i].verdict);
    }
}
