#include "shdl/svm.hpp"

#include "oracles.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

using namespace shdl;
using namespace shdl::svm;

namespace {

struct Problem {
    Eigen::MatrixXd x;
    std::vector<int> y;
};

Problem random_binary(int n, int dim, std::mt19937_64& rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    Problem p;
    p.x.resize(n, dim);
    for (int i = 0; i < n; ++i) {
        const int label = i % 2 == 0 ? 1 : -1;
        for (int d = 0; d < dim; ++d) p.x(i, d) = normal(rng) + 0.8 * label;
        p.y.push_back(label);
    }
    return p;
}

// Six well separated Gaussian clusters.
void separable_multiclass(int per_class, int dim, std::mt19937_64& rng, Eigen::MatrixXd& x,
                          std::vector<ActivityLabel>& y, double spread = 0.3) {
    std::normal_distribution<double> normal(0.0, spread);
    x.resize(per_class * kNumClasses, dim);
    y.clear();
    for (int c = 0; c < kNumClasses; ++c) {
        for (int i = 0; i < per_class; ++i) {
            const int row = c * per_class + i;
            for (int d = 0; d < dim; ++d) x(row, d) = normal(rng) + (d % kNumClasses == c ? 4.0 : 0.0);
            y.push_back(kAllLabels[static_cast<std::size_t>(c)]);
        }
    }
}

double accuracy(const SvmModel& m, const Eigen::MatrixXd& x, const std::vector<ActivityLabel>& y) {
    int ok = 0;
    for (Eigen::Index i = 0; i < x.rows(); ++i) ok += predict(m, x.row(i).transpose()).label == y[static_cast<std::size_t>(i)] ? 1 : 0;
    return static_cast<double>(ok) / static_cast<double>(x.rows());
}

}  // namespace

TEST_CASE("labels and hyperparameter defaults") {
    const SvmHyperparams hp;
    CHECK(hp.c == 14.0);
    CHECK(hp.gamma == 2e-5);
    CHECK(hp.kkt_tolerance == 1e-3);
    for (ActivityLabel l : kAllLabels) CHECK(label_from_string(to_string(l)) == l);
    CHECK_THROWS_AS(label_from_string("dancing"), ParameterError);
    CHECK_FALSE(is_violent(ActivityLabel::neutral));
    CHECK(is_violent(ActivityLabel::kicking));
    SvmHyperparams bad;
    bad.c = 0.0;
    CHECK_THROWS_AS(bad.validate(), ParameterError);
    bad = SvmHyperparams{};
    bad.gamma = -1.0;
    CHECK_THROWS_AS(bad.validate(), ParameterError);
}

TEST_CASE("gaussian kernel examples") {
    const Eigen::VectorXd a = Eigen::VectorXd::LinSpaced(5, 0.0, 1.0);
    CHECK(gaussian_kernel(a, a, 3.0) == 1.0);
    CHECK(gaussian_kernel(a, a + Eigen::VectorXd::Ones(5), 0.0) == 1.0);
    Eigen::VectorXd b = a;
    b(0) += std::sqrt(1e5);
    CHECK(gaussian_kernel(a, b, 2e-5) == doctest::Approx(std::exp(-2.0)).epsilon(1e-12));
    CHECK(gaussian_kernel(a, b, 2e-5) == doctest::Approx(0.1353).epsilon(1e-3));
    CHECK_THROWS_AS(gaussian_kernel(a, Eigen::VectorXd::Zero(4), 1.0), DimensionError);
}

TEST_CASE("gram matrix is symmetric positive semidefinite") {
    std::mt19937_64 rng(1);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (int t = 0; t < 10; ++t) {
        const Eigen::MatrixXd x = Eigen::MatrixXd::NullaryExpr(30, 7, [&]() { return normal(rng); });
        const Eigen::MatrixXd k = gaussian_gram(x, x, 0.05 + 0.2 * t);
        CHECK((k - k.transpose()).cwiseAbs().maxCoeff() == 0.0);
        CHECK(Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(k).eigenvalues().minCoeff() > -1e-8);
    }
}

TEST_CASE("symmetric two-point problem puts the boundary at zero") {
    Eigen::MatrixXd x(2, 1);
    x << -1.0, 1.0;
    SvmHyperparams hp;
    hp.c = 1e6;
    hp.gamma = 0.5;
    const BinaryModel m = train_binary(x, {-1, 1}, hp);
    CHECK(m.support_vectors.rows() == 2);
    CHECK(std::abs(m.decision(Eigen::VectorXd::Zero(1))) < 1e-9);
    CHECK(m.decision(Eigen::VectorXd::Constant(1, 0.5)) > 0.0);
    CHECK(m.decision(Eigen::VectorXd::Constant(1, -0.5)) < 0.0);
}

TEST_CASE("single-class data is rejected") {
    const Eigen::MatrixXd x = Eigen::MatrixXd::Random(4, 2);
    CHECK_THROWS_AS(train_binary(x, {1, 1, 1, 1}, SvmHyperparams{}), SvmError);
    CHECK_THROWS_AS(train_binary(x, {1, 0, 1, -1}, SvmHyperparams{}), SvmError);
}

TEST_CASE("SMO matches the projected-gradient QP oracle and passes the KKT audit") {
    std::mt19937_64 rng(2);
    std::uniform_int_distribution<int> size(4, 40);
    std::uniform_real_distribution<double> logc(-1.0, 2.0);
    std::uniform_real_distribution<double> logg(-2.0, 0.5);
    for (int t = 0; t < 50; ++t) {
        const Problem p = random_binary(size(rng), 3, rng);
        const double c = std::pow(10.0, logc(rng));
        const double g = std::pow(10.0, logg(rng));
        const Eigen::MatrixXd k = gaussian_gram(p.x, p.x, g);
        const DualSolution s = solve_dual(k, p.y, c, 1e-9);
        const std::vector<double> ref = oracle::svm_dual_projected_gradient(k, p.y, c, 20000);
        const double ref_obj = oracle::svm_dual_objective(k, p.y, ref);
        const std::vector<double> mine(s.alpha.data(), s.alpha.data() + s.alpha.size());
        CHECK(std::abs(oracle::svm_dual_objective(k, p.y, mine) - ref_obj) <= 1e-6 * std::max(1.0, std::abs(ref_obj)));
        CHECK(kkt_violation(k, p.y, c, s.alpha, s.bias) <= 1e-3);
        double balance = 0.0;
        for (Eigen::Index i = 0; i < s.alpha.size(); ++i) {
            CHECK(s.alpha(i) >= 0.0);
            CHECK(s.alpha(i) <= c);
            balance += s.alpha(i) * p.y[static_cast<std::size_t>(i)];
        }
        CHECK(std::abs(balance) < 1e-6);
    }
}

TEST_CASE("duplicating the training set keeps the decision function") {
    std::mt19937_64 rng(3);
    for (int t = 0; t < 5; ++t) {
        const Problem p = random_binary(24, 4, rng);
        SvmHyperparams hp;
        hp.c = 3.0;
        hp.gamma = 0.3;
        const BinaryModel a = train_binary(p.x, p.y, hp);
        Problem d;
        d.x.resize(48, 4);
        d.x << p.x, p.x;
        d.y = p.y;
        d.y.insert(d.y.end(), p.y.begin(), p.y.end());
        // each copy carries half the weight of the original, so C halves
        hp.c = 1.5;
        const BinaryModel b = train_binary(d.x, d.y, hp);
        std::normal_distribution<double> normal(0.0, 1.5);
        for (int q = 0; q < 20; ++q) {
            Eigen::VectorXd x(4);
            for (int i = 0; i < 4; ++i) x(i) = normal(rng);
            CHECK(std::abs(a.decision(x) - b.decision(x)) < 1e-6);
        }
    }
}

TEST_CASE("one-vs-one model on separable data") {
    std::mt19937_64 rng(4);
    Eigen::MatrixXd x;
    std::vector<ActivityLabel> y;
    separable_multiclass(15, 8, rng, x, y);
    SvmHyperparams hp;
    hp.gamma = 0.05;
    const SvmModel m = train_multiclass(x, y, hp);
    CHECK(m.pairs.size() == 15);
    CHECK(m.warnings.empty());
    CHECK(accuracy(m, x, y) == 1.0);
    for (const PairModel& pm : m.pairs) {
        for (Eigen::Index i = 0; i < pm.model.alpha.size(); ++i) {
            CHECK(pm.model.alpha(i) > 0.0);
            CHECK(pm.model.alpha(i) <= hp.c);
        }
        double balance = 0.0;
        for (Eigen::Index i = 0; i < pm.model.alpha.size(); ++i) balance += pm.model.alpha(i) * pm.model.labels[static_cast<std::size_t>(i)];
        CHECK(std::abs(balance) < 1e-6);
        // a stored support vector is recalled with its own label
        const Eigen::VectorXd sv = pm.model.support_vectors.row(0).transpose();
        const Eigen::VectorXd raw = sv.cwiseQuotient(m.inv_std) + m.mean;
        const ActivityLabel own = pm.model.labels[0] > 0 ? pm.positive : pm.negative;
        CHECK(predict(m, raw).label == own);
    }
    const Prediction p = predict(m, x.row(3).transpose());
    int votes = 0;
    for (int v : p.votes) votes += v;
    CHECK(votes == 15);
    const Prediction again = predict(m, x.row(3).transpose());
    CHECK(again.label == p.label);
    CHECK(again.votes == p.votes);
    CHECK_THROWS_AS(predict(m, Eigen::VectorXd::Zero(7)), DimensionError);
}

TEST_CASE("missing classes skip their pairs with warnings") {
    std::mt19937_64 rng(5);
    Eigen::MatrixXd x;
    std::vector<ActivityLabel> y;
    separable_multiclass(6, 6, rng, x, y);
    const Eigen::MatrixXd three = x.topRows(18);
    const std::vector<ActivityLabel> y3(y.begin(), y.begin() + 18);
    SvmHyperparams hp;
    hp.gamma = 0.1;
    const SvmModel m = train_multiclass(three, y3, hp);
    CHECK(m.pairs.size() == 3);
    CHECK(m.warnings.size() == 12);
    CHECK(accuracy(m, three, y3) == 1.0);
    const std::vector<ActivityLabel> one(18, ActivityLabel::neutral);
    CHECK_THROWS_AS(train_multiclass(three, one, hp), SvmError);
}

TEST_CASE("rescaled features with rescaled gamma give the same labels") {
    std::mt19937_64 rng(6);
    Eigen::MatrixXd x;
    std::vector<ActivityLabel> y;
    separable_multiclass(10, 6, rng, x, y, 1.2);
    Eigen::MatrixXd test;
    std::vector<ActivityLabel> ty;
    separable_multiclass(5, 6, rng, test, ty, 1.2);
    SvmHyperparams hp;
    hp.gamma = 0.2;
    const double s = 7.5;
    SvmHyperparams scaled = hp;
    scaled.gamma = hp.gamma / (s * s);
    const SvmModel raw = train_multiclass(x, y, hp, false);
    const SvmModel big = train_multiclass(x * s, y, scaled, false);
    const SvmModel std_a = train_multiclass(x, y, hp, true);
    const SvmModel std_b = train_multiclass(x * s, y, hp, true);
    for (Eigen::Index i = 0; i < test.rows(); ++i) {
        const Eigen::VectorXd v = test.row(i).transpose();
        CHECK(predict(raw, v).label == predict(big, v * s).label);
        CHECK(predict(std_a, v).label == predict(std_b, v * s).label);
    }
}

TEST_CASE("stratified folds are balanced and deterministic") {
    std::vector<ActivityLabel> y;
    for (int c = 0; c < kNumClasses; ++c) y.insert(y.end(), 10 + c, kAllLabels[static_cast<std::size_t>(c)]);
    const std::vector<int> f = stratified_folds(y, 5, 3);
    CHECK(f == stratified_folds(y, 5, 3));
    for (int c = 0; c < kNumClasses; ++c) {
        std::array<int, 5> counts{};
        for (std::size_t i = 0; i < y.size(); ++i) {
            if (y[i] == kAllLabels[static_cast<std::size_t>(c)]) ++counts[static_cast<std::size_t>(f[i])];
        }
        CHECK(*std::max_element(counts.begin(), counts.end()) - *std::min_element(counts.begin(), counts.end()) <= 1);
    }
    std::vector<ActivityLabel> small = y;
    small.push_back(ActivityLabel::neutral);
    small.resize(20);
    small.push_back(ActivityLabel::kicking);
    CHECK_THROWS_WITH_AS(stratified_folds(small, 5, 0), doctest::Contains("kicking"), SvmError);
}

TEST_CASE("cross validation selects by accuracy with ordered ties") {
    std::mt19937_64 rng(7);
    Eigen::MatrixXd x;
    std::vector<ActivityLabel> y;
    separable_multiclass(10, 6, rng, x, y);

    const CvResult single = cross_validate(x, y, {2.0}, {0.1}, 5, 1);
    CHECK(single.best.c == 2.0);
    CHECK(single.best.gamma == 0.1);
    CHECK(single.table.size() == 1);

    // every point separates the clusters perfectly, so the tie rule decides
    const CvResult tie = cross_validate(x, y, {5.0, 1.0, 3.0}, {0.2, 0.05}, 5, 1);
    CHECK(tie.best.c == 1.0);
    CHECK(tie.best.gamma == 0.05);
    const CvResult again = cross_validate(x, y, {5.0, 1.0, 3.0}, {0.2, 0.05}, 5, 1);
    CHECK(again.best.c == tie.best.c);
    CHECK(again.best.gamma == tie.best.gamma);
}

TEST_CASE("cross validation finds a constructed optimum") {
    // Classes differ only in one feature along which they form two
    // interleaved rings: a tiny gamma smooths them away and a huge gamma
    // memorizes the folds, so the middle of the grid is strictly best.
    std::mt19937_64 rng(8);
    std::normal_distribution<double> noise(0.0, 0.05);
    std::uniform_real_distribution<double> angle(0.0, 2.0 * 3.141592653589793);
    Eigen::MatrixXd x(120, 2);
    std::vector<ActivityLabel> y;
    for (int i = 0; i < 120; ++i) {
        const bool inner = i % 2 == 0;
        const double r = inner ? 1.0 : 2.0;
        const double a = angle(rng);
        x(i, 0) = r * std::cos(a) + noise(rng);
        x(i, 1) = r * std::sin(a) + noise(rng);
        y.push_back(inner ? ActivityLabel::neutral : ActivityLabel::punching);
    }
    const CvResult r = cross_validate(x, y, {10.0}, {1e-4, 1.0, 1e4}, 5, 2);
    CHECK(r.best.gamma == 1.0);
    for (const CvEntry& e : r.table) {
        if (e.gamma != 1.0) CHECK(e.mean_accuracy < r.table[1].mean_accuracy);
    }
}

TEST_CASE("model serialization round trip") {
    std::mt19937_64 rng(9);
    Eigen::MatrixXd x;
    std::vector<ActivityLabel> y;
    separable_multiclass(8, 5, rng, x, y, 1.0);
    SvmHyperparams hp;
    hp.gamma = 0.1;
    SvmModel m = train_multiclass(x, y, hp);
    round_to_f32(m);
    const auto stem = std::filesystem::temp_directory_path() / "shdl_svm_roundtrip";
    save_model(stem, m);
    const SvmModel back = load_model(stem);
    CHECK(back.pairs.size() == m.pairs.size());
    CHECK(back.hyperparams.c == hp.c);
    CHECK(back.hyperparams.gamma == hp.gamma);
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const Prediction a = predict(m, x.row(i).transpose());
        const Prediction b = predict(back, x.row(i).transpose());
        CHECK(a.label == b.label);
        CHECK(a.votes == b.votes);
        for (int c = 0; c < kNumClasses; ++c) CHECK(a.margins[static_cast<std::size_t>(c)] == b.margins[static_cast<std::size_t>(c)]);
    }
}

TEST_CASE("svm features encode absolute angles on the circle") {
    pose::AngleVector a;
    pose::AngleVector b;
    a.values[1] = 359.0;
    b.values[1] = 1.0;
    a.values[pose::kNumEdges] = 42.0;
    const Eigen::VectorXd fa = svm_features(a);
    const Eigen::VectorXd fb = svm_features(b);
    CHECK(fa.size() == kSvmFeatureSize);
    CHECK((fa.segment(2, 2) - fb.segment(2, 2)).norm() < 0.035);
    CHECK(fa(0) == 1.0);
    CHECK(fa(1) == 0.0);
    CHECK(fa(2 * pose::kNumEdges) == 42.0);
}
