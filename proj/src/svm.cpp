#include "shdl/svm.hpp"

#include "shdl/float_array.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <random>

namespace shdl::svm {

namespace {

// SMO stops when the maximal violating pair is closer than this; much
// tighter than the audited KKT tolerance so dual objectives are accurate.
constexpr double kSolverTolerance = 1e-9;
constexpr double kTau = 1e-12;
constexpr long kMaxIterationsPerPoint = 200000;
constexpr double kMinStd = 1e-12;
constexpr double kTieEpsilon = 1e-12;

bool at_upper(double a, double c) { return a >= c; }
bool at_lower(double a) { return a <= 0.0; }

double dual_objective(const Eigen::MatrixXd& kernel, const Eigen::VectorXd& y, const Eigen::VectorXd& alpha) {
    const Eigen::VectorXd ay = alpha.cwiseProduct(y);
    return alpha.sum() - 0.5 * ay.dot(kernel * ay);
}

Eigen::MatrixXd select_rows(const Eigen::MatrixXd& x, const std::vector<int>& rows) {
    Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), x.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = x.row(rows[i]);
    return out;
}

}  // namespace

std::string to_string(ActivityLabel label) {
    switch (label) {
        case ActivityLabel::punching: return "punching";
        case ActivityLabel::stabbing: return "stabbing";
        case ActivityLabel::shooting: return "shooting";
        case ActivityLabel::kicking: return "kicking";
        case ActivityLabel::strangling: return "strangling";
        case ActivityLabel::neutral: return "neutral";
    }
    throw ParameterError("unknown activity label");
}

ActivityLabel label_from_string(const std::string& name) {
    for (ActivityLabel l : kAllLabels) {
        if (to_string(l) == name) return l;
    }
    throw ParameterError("unknown activity label '" + name + "'");
}

bool is_violent(ActivityLabel label) { return label != ActivityLabel::neutral; }

Eigen::VectorXd svm_features(const pose::AngleVector& angles) {
    Eigen::VectorXd f(kSvmFeatureSize);
    for (int e = 0; e < pose::kNumEdges; ++e) {
        const double rad = angles.values[static_cast<std::size_t>(e)] * std::numbers::pi / 180.0;
        f(2 * e) = std::cos(rad);
        f(2 * e + 1) = std::sin(rad);
    }
    for (int j = 0; j < pose::kNumJointPairs; ++j) {
        f(2 * pose::kNumEdges + j) = angles.values[static_cast<std::size_t>(pose::kNumEdges + j)];
    }
    return f;
}

void SvmHyperparams::validate() const {
    if (!(c > 0.0) || !std::isfinite(c)) throw ParameterError("svm: C must be positive");
    if (!(gamma >= 0.0) || !std::isfinite(gamma)) throw ParameterError("svm: gamma must be nonnegative");
    if (!(kkt_tolerance > 0.0)) throw ParameterError("svm: kkt_tolerance must be positive");
}

double gaussian_kernel(const Eigen::VectorXd& a, const Eigen::VectorXd& b, double gamma) {
    if (a.size() != b.size()) throw DimensionError("gaussian_kernel: vector lengths differ");
    return std::exp(-gamma * (a - b).squaredNorm());
}

Eigen::MatrixXd gaussian_gram(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, double gamma) {
    if (a.cols() != b.cols()) throw DimensionError("gaussian_gram: feature dimensions differ");
    Eigen::MatrixXd k(a.rows(), b.rows());
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
        for (Eigen::Index j = 0; j < b.rows(); ++j) k(i, j) = std::exp(-gamma * (a.row(i) - b.row(j)).squaredNorm());
    }
    return k;
}

DualSolution solve_dual(const Eigen::MatrixXd& kernel, const std::vector<int>& labels, double c, double tolerance) {
    const Eigen::Index n = kernel.rows();
    if (kernel.cols() != n || static_cast<Eigen::Index>(labels.size()) != n) {
        throw DimensionError("solve_dual: kernel and labels disagree in size");
    }
    Eigen::VectorXd y(n);
    bool has_pos = false;
    bool has_neg = false;
    for (Eigen::Index i = 0; i < n; ++i) {
        const int l = labels[static_cast<std::size_t>(i)];
        if (l != 1 && l != -1) throw SvmError("solve_dual: labels must be +1 or -1");
        y(i) = l;
        has_pos = has_pos || l == 1;
        has_neg = has_neg || l == -1;
    }
    if (!has_pos || !has_neg) throw SvmError("solve_dual: both classes must be present");

    DualSolution s;
    s.alpha = Eigen::VectorXd::Zero(n);
    Eigen::VectorXd grad = Eigen::VectorXd::Constant(n, -1.0);  // Q alpha - 1
    const long max_iterations = kMaxIterationsPerPoint * std::max<long>(n, 10);
    Eigen::VectorXd& a = s.alpha;
    for (;;) {
        double gmax = -std::numeric_limits<double>::infinity();
        double gmin = std::numeric_limits<double>::infinity();
        Eigen::Index i = -1;
        Eigen::Index j = -1;
        for (Eigen::Index t = 0; t < n; ++t) {
            const double v = -y(t) * grad(t);
            const bool up = y(t) > 0 ? !at_upper(a(t), c) : !at_lower(a(t));
            const bool low = y(t) > 0 ? !at_lower(a(t)) : !at_upper(a(t), c);
            if (up && v > gmax) {
                gmax = v;
                i = t;
            }
            if (low && v < gmin) {
                gmin = v;
                j = t;
            }
        }
        if (i < 0 || j < 0 || gmax - gmin < tolerance) break;
        if (++s.iterations > max_iterations) throw SvmError("solve_dual: iteration limit reached");

        const double old_ai = a(i);
        const double old_aj = a(j);
        const double kii = kernel(i, i);
        const double kjj = kernel(j, j);
        const double kij = kernel(i, j);
        if (y(i) != y(j)) {
            double quad = kii + kjj - 2.0 * kij;
            if (quad <= 0.0) quad = kTau;
            const double delta = (-grad(i) - grad(j)) / quad;
            const double diff = a(i) - a(j);
            a(i) += delta;
            a(j) += delta;
            if (diff > 0.0) {
                if (a(j) < 0.0) {
                    a(j) = 0.0;
                    a(i) = diff;
                }
            } else if (a(i) < 0.0) {
                a(i) = 0.0;
                a(j) = -diff;
            }
            if (diff > 0.0) {
                if (a(i) > c) {
                    a(i) = c;
                    a(j) = c - diff;
                }
            } else if (a(j) > c) {
                a(j) = c;
                a(i) = c + diff;
            }
        } else {
            double quad = kii + kjj - 2.0 * kij;
            if (quad <= 0.0) quad = kTau;
            const double delta = (grad(i) - grad(j)) / quad;
            const double sum = a(i) + a(j);
            a(i) -= delta;
            a(j) += delta;
            if (sum > c) {
                if (a(i) > c) {
                    a(i) = c;
                    a(j) = sum - c;
                }
                if (a(j) > c) {
                    a(j) = c;
                    a(i) = sum - c;
                }
            } else {
                if (a(j) < 0.0) {
                    a(j) = 0.0;
                    a(i) = sum;
                }
                if (a(i) < 0.0) {
                    a(i) = 0.0;
                    a(j) = sum;
                }
            }
        }
        const double di = a(i) - old_ai;
        const double dj = a(j) - old_aj;
        // Q(:, t) = y .* K(:, t) * y(t)
        grad += (y(i) * di) * y.cwiseProduct(kernel.col(i)) + (y(j) * dj) * y.cwiseProduct(kernel.col(j));
    }

    // offset from free vectors, else the midpoint of the feasible interval
    double ub = std::numeric_limits<double>::infinity();
    double lb = -std::numeric_limits<double>::infinity();
    double free_sum = 0.0;
    int free_count = 0;
    for (Eigen::Index t = 0; t < n; ++t) {
        const double yg = y(t) * grad(t);
        if (at_upper(a(t), c)) {
            if (y(t) < 0) ub = std::min(ub, yg);
            else lb = std::max(lb, yg);
        } else if (at_lower(a(t))) {
            if (y(t) > 0) ub = std::min(ub, yg);
            else lb = std::max(lb, yg);
        } else {
            free_sum += yg;
            ++free_count;
        }
    }
    const double rho = free_count > 0 ? free_sum / free_count : 0.5 * (ub + lb);
    s.bias = -rho;
    s.objective = dual_objective(kernel, y, a);
    return s;
}

double kkt_violation(const Eigen::MatrixXd& kernel, const std::vector<int>& labels, double c,
                     const Eigen::VectorXd& alpha, double bias) {
    const Eigen::Index n = kernel.rows();
    Eigen::VectorXd y(n);
    for (Eigen::Index i = 0; i < n; ++i) y(i) = labels[static_cast<std::size_t>(i)];
    const Eigen::VectorXd f = kernel * alpha.cwiseProduct(y) + Eigen::VectorXd::Constant(n, bias);
    double worst = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        const double m = y(i) * f(i);
        double v = 0.0;
        if (at_lower(alpha(i))) v = std::max(0.0, 1.0 - m);
        else if (at_upper(alpha(i), c)) v = std::max(0.0, m - 1.0);
        else v = std::abs(m - 1.0);
        worst = std::max(worst, v);
    }
    return worst;
}

double BinaryModel::decision(const Eigen::VectorXd& x) const {
    if (x.size() != support_vectors.cols()) throw DimensionError("decision: feature dimension mismatch");
    double f = bias;
    for (Eigen::Index i = 0; i < support_vectors.rows(); ++i) {
        f += alpha(i) * labels[static_cast<std::size_t>(i)] *
             std::exp(-gamma * (support_vectors.row(i).transpose() - x).squaredNorm());
    }
    return f;
}

BinaryModel train_binary(const Eigen::MatrixXd& x, const std::vector<int>& labels, const SvmHyperparams& hp) {
    hp.validate();
    if (x.rows() != static_cast<Eigen::Index>(labels.size())) throw DimensionError("train_binary: label count mismatch");
    const Eigen::MatrixXd k = gaussian_gram(x, x, hp.gamma);
    const DualSolution s = solve_dual(k, labels, hp.c, std::min(kSolverTolerance, hp.kkt_tolerance));
    const double violation = kkt_violation(k, labels, hp.c, s.alpha, s.bias);
    if (violation > hp.kkt_tolerance) {
        throw SvmError("train_binary: KKT audit failed with violation " + std::to_string(violation));
    }
    BinaryModel m;
    m.gamma = hp.gamma;
    m.c = hp.c;
    m.bias = s.bias;
    std::vector<int> sv;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        if (s.alpha(i) > 0.0) sv.push_back(static_cast<int>(i));
    }
    m.support_vectors = select_rows(x, sv);
    m.alpha.resize(static_cast<Eigen::Index>(sv.size()));
    for (std::size_t i = 0; i < sv.size(); ++i) {
        m.alpha(static_cast<Eigen::Index>(i)) = s.alpha(sv[i]);
        m.labels.push_back(labels[static_cast<std::size_t>(sv[i])]);
    }
    return m;
}

Eigen::VectorXd SvmModel::standardize(const Eigen::VectorXd& x) const {
    if (x.size() != mean.size()) {
        throw DimensionError("svm: expected " + std::to_string(mean.size()) + " features, got " + std::to_string(x.size()));
    }
    return (x - mean).cwiseProduct(inv_std);
}

SvmModel train_multiclass(const Eigen::MatrixXd& x, const std::vector<ActivityLabel>& labels,
                          const SvmHyperparams& hp, bool standardize) {
    hp.validate();
    if (x.rows() != static_cast<Eigen::Index>(labels.size())) throw DimensionError("train_multiclass: label count mismatch");
    std::array<std::vector<int>, kNumClasses> members;
    for (std::size_t i = 0; i < labels.size(); ++i) members[static_cast<std::size_t>(index_of(labels[i]))].push_back(static_cast<int>(i));
    int present = 0;
    for (const auto& m : members) present += m.empty() ? 0 : 1;
    if (present < 2) throw SvmError("train_multiclass: need at least two classes");

    SvmModel model;
    model.hyperparams = hp;
    model.standardized = standardize;
    model.mean = Eigen::VectorXd::Zero(x.cols());
    model.inv_std = Eigen::VectorXd::Ones(x.cols());
    if (standardize) {
        model.mean = x.colwise().mean().transpose();
        for (Eigen::Index d = 0; d < x.cols(); ++d) {
            const double var = (x.col(d).array() - model.mean(d)).square().mean();
            const double sd = std::sqrt(var);
            model.inv_std(d) = sd > kMinStd ? 1.0 / sd : 1.0;
        }
    }
    Eigen::MatrixXd z(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) z.row(i) = model.standardize(x.row(i).transpose()).transpose();

    for (int a = 0; a < kNumClasses; ++a) {
        for (int b = a + 1; b < kNumClasses; ++b) {
            const auto& ma = members[static_cast<std::size_t>(a)];
            const auto& mb = members[static_cast<std::size_t>(b)];
            if (ma.empty() || mb.empty()) {
                model.warnings.push_back("skipped pair " + to_string(kAllLabels[static_cast<std::size_t>(a)]) + "/" +
                                         to_string(kAllLabels[static_cast<std::size_t>(b)]) + ": class without samples");
                continue;
            }
            std::vector<int> rows = ma;
            rows.insert(rows.end(), mb.begin(), mb.end());
            std::vector<int> y(ma.size(), 1);
            y.insert(y.end(), mb.size(), -1);
            model.pairs.push_back({kAllLabels[static_cast<std::size_t>(a)], kAllLabels[static_cast<std::size_t>(b)],
                                   train_binary(select_rows(z, rows), y, hp)});
        }
    }
    return model;
}

Prediction predict(const SvmModel& model, const Eigen::VectorXd& x) {
    const Eigen::VectorXd z = model.standardize(x);
    Prediction p;
    for (const PairModel& pm : model.pairs) {
        const double d = pm.model.decision(z);
        const auto pos = static_cast<std::size_t>(index_of(pm.positive));
        const auto neg = static_cast<std::size_t>(index_of(pm.negative));
        ++p.votes[d > 0.0 ? pos : neg];
        p.margins[pos] += d;
        p.margins[neg] -= d;
    }
    std::size_t best = 0;
    for (std::size_t c = 1; c < kNumClasses; ++c) {
        if (p.votes[c] > p.votes[best] || (p.votes[c] == p.votes[best] && p.margins[c] > p.margins[best])) best = c;
    }
    p.label = kAllLabels[best];
    return p;
}

Prediction predict(const SvmModel& model, const pose::AngleVector& angles) { return predict(model, svm_features(angles)); }

std::vector<int> stratified_folds(const std::vector<ActivityLabel>& labels, int folds, std::uint64_t seed) {
    if (folds < 2) throw ParameterError("stratified_folds: need at least two folds");
    std::array<std::vector<int>, kNumClasses> members;
    for (std::size_t i = 0; i < labels.size(); ++i) members[static_cast<std::size_t>(index_of(labels[i]))].push_back(static_cast<int>(i));
    for (int c = 0; c < kNumClasses; ++c) {
        const auto& m = members[static_cast<std::size_t>(c)];
        if (!m.empty() && static_cast<int>(m.size()) < folds) {
            throw SvmError("stratified_folds: class '" + to_string(kAllLabels[static_cast<std::size_t>(c)]) + "' has " +
                           std::to_string(m.size()) + " samples, fewer than " + std::to_string(folds) + " folds");
        }
    }
    std::mt19937_64 rng(seed);
    std::vector<int> fold(labels.size(), 0);
    int next = 0;
    for (auto& m : members) {
        std::shuffle(m.begin(), m.end(), rng);
        for (int i : m) {
            fold[static_cast<std::size_t>(i)] = next;
            next = (next + 1) % folds;
        }
    }
    return fold;
}

CvResult cross_validate(const Eigen::MatrixXd& x, const std::vector<ActivityLabel>& labels,
                        const std::vector<double>& c_grid, const std::vector<double>& gamma_grid, int folds,
                        std::uint64_t seed, const SvmHyperparams& base, bool standardize) {
    if (c_grid.empty() || gamma_grid.empty()) throw ParameterError("cross_validate: empty grid");
    if (x.rows() != static_cast<Eigen::Index>(labels.size())) throw DimensionError("cross_validate: label count mismatch");
    const std::vector<int> fold = stratified_folds(labels, folds, seed);
    std::vector<double> cs = c_grid;
    std::vector<double> gs = gamma_grid;
    std::sort(cs.begin(), cs.end());
    std::sort(gs.begin(), gs.end());

    CvResult result;
    double best_acc = -1.0;
    for (double c : cs) {
        for (double g : gs) {
            SvmHyperparams hp = base;
            hp.c = c;
            hp.gamma = g;
            double total = 0.0;
            for (int f = 0; f < folds; ++f) {
                std::vector<int> train_rows;
                std::vector<int> test_rows;
                for (std::size_t i = 0; i < labels.size(); ++i) (fold[i] == f ? test_rows : train_rows).push_back(static_cast<int>(i));
                std::vector<ActivityLabel> train_labels;
                for (int i : train_rows) train_labels.push_back(labels[static_cast<std::size_t>(i)]);
                const SvmModel m = train_multiclass(select_rows(x, train_rows), train_labels, hp, standardize);
                int correct = 0;
                for (int i : test_rows) correct += predict(m, x.row(i).transpose()).label == labels[static_cast<std::size_t>(i)] ? 1 : 0;
                total += test_rows.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(test_rows.size());
            }
            const double acc = total / folds;
            result.table.push_back({c, g, acc});
            // grid is visited in ascending (C, gamma) order, so only strict gains move the choice
            if (acc > best_acc + kTieEpsilon) {
                best_acc = acc;
                result.best = hp;
            }
        }
    }
    return result;
}

void round_to_f32(SvmModel& model) {
    for (PairModel& p : model.pairs) {
        p.model.support_vectors = p.model.support_vectors.unaryExpr([](double v) { return to_f32(v); });
        p.model.alpha = p.model.alpha.unaryExpr([](double v) { return to_f32(v); });
    }
}

void save_model(const std::filesystem::path& stem, const SvmModel& model) {
    nlohmann::json doc;
    doc["dtype"] = "float32";
    doc["byte_order"] = "little";
    nlohmann::json labels = nlohmann::json::array();
    for (ActivityLabel l : kAllLabels) labels.push_back(to_string(l));
    doc["labels"] = labels;
    doc["hyperparams"] = {{"C", model.hyperparams.c},
                          {"gamma", model.hyperparams.gamma},
                          {"kkt_tolerance", model.hyperparams.kkt_tolerance}};
    doc["standardized"] = model.standardized;
    doc["mean"] = std::vector<double>(model.mean.data(), model.mean.data() + model.mean.size());
    doc["inv_std"] = std::vector<double>(model.inv_std.data(), model.inv_std.data() + model.inv_std.size());
    doc["warnings"] = model.warnings;
    nlohmann::json pairs = nlohmann::json::array();
    std::vector<double> flat;
    for (const PairModel& p : model.pairs) {
        pairs.push_back({{"positive", to_string(p.positive)},
                         {"negative", to_string(p.negative)},
                         {"bias", p.model.bias},
                         {"support_vectors", p.model.support_vectors.rows()},
                         {"labels", p.model.labels}});
        for (Eigen::Index i = 0; i < p.model.support_vectors.rows(); ++i) {
            for (Eigen::Index d = 0; d < p.model.support_vectors.cols(); ++d) flat.push_back(p.model.support_vectors(i, d));
        }
        for (Eigen::Index i = 0; i < p.model.alpha.size(); ++i) flat.push_back(p.model.alpha(i));
    }
    doc["pairs"] = pairs;
    write_f32(std::filesystem::path(stem).concat(".bin"), flat);
    write_json(std::filesystem::path(stem).concat(".json"), doc);
}

SvmModel load_model(const std::filesystem::path& stem) {
    const nlohmann::json doc = read_json(std::filesystem::path(stem).concat(".json"));
    const std::vector<double> flat = read_f32(std::filesystem::path(stem).concat(".bin"));
    SvmModel m;
    m.hyperparams.c = doc.at("hyperparams").at("C").get<double>();
    m.hyperparams.gamma = doc.at("hyperparams").at("gamma").get<double>();
    m.hyperparams.kkt_tolerance = doc.at("hyperparams").at("kkt_tolerance").get<double>();
    m.hyperparams.validate();
    m.standardized = doc.at("standardized").get<bool>();
    const auto mean = doc.at("mean").get<std::vector<double>>();
    const auto inv_std = doc.at("inv_std").get<std::vector<double>>();
    if (mean.size() != inv_std.size()) throw DimensionError("load_model: standardization sizes differ");
    m.mean = Eigen::Map<const Eigen::VectorXd>(mean.data(), static_cast<Eigen::Index>(mean.size()));
    m.inv_std = Eigen::Map<const Eigen::VectorXd>(inv_std.data(), static_cast<Eigen::Index>(inv_std.size()));
    m.warnings = doc.at("warnings").get<std::vector<std::string>>();
    const auto dim = static_cast<std::size_t>(m.mean.size());
    std::size_t offset = 0;
    for (const auto& p : doc.at("pairs")) {
        PairModel pm{label_from_string(p.at("positive").get<std::string>()),
                     label_from_string(p.at("negative").get<std::string>()), {}};
        const auto n = p.at("support_vectors").get<std::size_t>();
        if (offset + n * (dim + 1) > flat.size()) throw DimensionError("load_model: data shorter than manifest");
        pm.model.support_vectors.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dim));
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t d = 0; d < dim; ++d) {
                pm.model.support_vectors(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(d)) = flat[offset++];
            }
        }
        pm.model.alpha.resize(static_cast<Eigen::Index>(n));
        for (std::size_t i = 0; i < n; ++i) pm.model.alpha(static_cast<Eigen::Index>(i)) = flat[offset++];
        pm.model.labels = p.at("labels").get<std::vector<int>>();
        if (pm.model.labels.size() != n) throw DimensionError("load_model: label count mismatch");
        pm.model.bias = p.at("bias").get<double>();
        pm.model.gamma = m.hyperparams.gamma;
        pm.model.c = m.hyperparams.c;
        m.pairs.push_back(std::move(pm));
    }
    if (offset != flat.size()) throw DimensionError("load_model: data longer than manifest");
    return m;
}

}  // namespace shdl::svm
