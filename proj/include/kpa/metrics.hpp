#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "kpa/common.hpp"
#include "kpa/image.hpp"

namespace kpa {

// ---------------------------------------------------------------------------
// Gaussian statistics and the Frechet distance
// ---------------------------------------------------------------------------

struct GaussianStats {
    Eigen::VectorXd mean;
    Eigen::MatrixXd cov;
    std::size_t n = 0;
};

inline Eigen::MatrixXd to_eigen(const Matrix& m) {
    Eigen::MatrixXd out(m.rows, m.cols);
    for (std::size_t r = 0; r < m.rows; ++r)
        for (std::size_t c = 0; c < m.cols; ++c) out(r, c) = m.data[r * m.cols + c];
    return out;
}

inline GaussianStats fit_gaussian(const Eigen::MatrixXd& features) {
    if (features.rows() < 2)
        throw std::invalid_argument("fit_gaussian: need at least 2 rows, got " +
                                    std::to_string(features.rows()));
    GaussianStats g;
    g.n = static_cast<std::size_t>(features.rows());
    g.mean = features.colwise().mean();
    Eigen::MatrixXd centered = features.rowwise() - g.mean.transpose();
    g.cov = (centered.transpose() * centered) / static_cast<double>(features.rows() - 1);
    return g;
}

// Symmetric PSD square root by eigendecomposition. Eigenvalues below -1e-6
// reject the input; small negatives are treated as rounding and clamped.
inline Eigen::MatrixXd sqrt_psd(const Eigen::MatrixXd& m) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
    if (es.info() != Eigen::Success)
        throw std::runtime_error("sqrt_psd: eigendecomposition did not converge");
    Eigen::VectorXd ev = es.eigenvalues();
    for (Eigen::Index i = 0; i < ev.size(); ++i) {
        if (ev[i] < -1e-6)
            throw std::invalid_argument("sqrt_psd: matrix is not PSD (eigenvalue " +
                                        std::to_string(ev[i]) + ")");
        ev[i] = std::sqrt(std::max(0.0, ev[i]));
    }
    return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

// Squared Frechet distance between two Gaussians:
//   |mu_a - mu_b|^2 + Tr(Sa + Sb - 2 (Sa^1/2 Sb Sa^1/2)^1/2)
inline double frechet_distance(const GaussianStats& a, const GaussianStats& b) {
    if (a.mean.size() != b.mean.size())
        throw std::invalid_argument("frechet_distance: dimension mismatch (" +
                                    std::to_string(a.mean.size()) + " vs " +
                                    std::to_string(b.mean.size()) + ")");
    auto check_sym = [](const Eigen::MatrixXd& s, const char* which) {
        if ((s - s.transpose()).cwiseAbs().maxCoeff() > 1e-9)
            throw std::invalid_argument(std::string("frechet_distance: covariance ") + which +
                                        " is not symmetric");
    };
    check_sym(a.cov, "a");
    check_sym(b.cov, "b");
    Eigen::MatrixXd sa = 0.5 * (a.cov + a.cov.transpose());
    Eigen::MatrixXd sb = 0.5 * (b.cov + b.cov.transpose());

    Eigen::MatrixXd ra = sqrt_psd(sa);
    Eigen::MatrixXd inner = ra * sb * ra;
    Eigen::MatrixXd cross = sqrt_psd(0.5 * (inner + inner.transpose()));

    double d2 = (a.mean - b.mean).squaredNorm() + sa.trace() + sb.trace() - 2.0 * cross.trace();
    return std::max(0.0, d2);
}

// ---------------------------------------------------------------------------
// NIQE
// ---------------------------------------------------------------------------

struct NiqeConfig {
    std::size_t patch_size = 96;      // patch side at scale 1
    double sharpness_fraction = 0.75; // keep patches above this fraction of peak sharpness
    std::size_t scales = 2;
    double window_sigma = 7.0 / 6.0;  // 7x7 Gaussian window
    double c = 1.0 / 255.0;           // MSCN stabilizer

    std::size_t feature_dim() const { return 18 * scales; }

    void validate() const {
        if (patch_size < 8 || patch_size % 2 != 0)
            throw std::invalid_argument("niqe config: patch size must be even and >= 8");
        if (scales < 1) throw std::invalid_argument("niqe config: need at least one scale");
        if (sharpness_fraction < 0.0 || sharpness_fraction >= 1.0)
            throw std::invalid_argument("niqe config: sharpness fraction must be in [0,1)");
    }
};

struct NiqeModel {
    Eigen::VectorXd mean;
    Eigen::MatrixXd cov;
    NiqeConfig config;
};

struct MscnField {
    Image coefficients;
    Image sigma;  // local deviation, reused as the sharpness map
};

namespace detail {

inline std::vector<double> gaussian_window(double sigma, int radius) {
    std::vector<double> w(2 * radius + 1);
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        w[i + radius] = std::exp(-static_cast<double>(i) * i / (2.0 * sigma * sigma));
        sum += w[i + radius];
    }
    for (double& x : w) x /= sum;
    return w;
}

// Separable Gaussian blur with replicated borders, all in double.
inline std::vector<double> blur(const std::vector<double>& src, std::size_t rows, std::size_t cols,
                                const std::vector<double>& w) {
    const int radius = static_cast<int>(w.size() / 2);
    std::vector<double> tmp(rows * cols), out(rows * cols);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) {
            double acc = 0.0;
            for (int k = -radius; k <= radius; ++k) {
                long cc = std::clamp<long>(static_cast<long>(c) + k, 0, static_cast<long>(cols) - 1);
                acc += w[k + radius] * src[r * cols + cc];
            }
            tmp[r * cols + c] = acc;
        }
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) {
            double acc = 0.0;
            for (int k = -radius; k <= radius; ++k) {
                long rr = std::clamp<long>(static_cast<long>(r) + k, 0, static_cast<long>(rows) - 1);
                acc += w[k + radius] * tmp[rr * cols + c];
            }
            out[r * cols + c] = acc;
        }
    return out;
}

}  // namespace detail

inline MscnField compute_mscn(const Image& img, double window_sigma = 7.0 / 6.0,
                              double c = 1.0 / 255.0) {
    if (img.rows < 16 || img.cols < 16)
        throw std::invalid_argument("mscn: image must be at least 16x16, got " +
                                    std::to_string(img.rows) + "x" + std::to_string(img.cols));
    const std::size_t n = img.rows * img.cols;
    std::vector<double> x(n), x2(n);
    for (std::size_t i = 0; i < n; ++i) {
        x[i] = img.px[i];
        x2[i] = x[i] * x[i];
    }
    std::vector<double> w = detail::gaussian_window(window_sigma, 3);
    std::vector<double> mu = detail::blur(x, img.rows, img.cols, w);
    std::vector<double> mu2 = detail::blur(x2, img.rows, img.cols, w);

    MscnField f;
    f.coefficients = Image(img.rows, img.cols);
    f.sigma = Image(img.rows, img.cols);
    for (std::size_t i = 0; i < n; ++i) {
        double var = std::max(0.0, mu2[i] - mu[i] * mu[i]);
        double sd = std::sqrt(var);
        f.sigma.px[i] = static_cast<float>(sd);
        f.coefficients.px[i] = static_cast<float>((x[i] - mu[i]) / (sd + c));
    }
    return f;
}

inline Image mscn(const Image& img, double window_sigma = 7.0 / 6.0) {
    return compute_mscn(img, window_sigma).coefficients;
}

struct AggdFit {
    double alpha = 0.0;
    double beta_left = 0.0;   // one-sided RMS of the negative samples
    double beta_right = 0.0;  // one-sided RMS of the positive samples
};

namespace detail {

// r(alpha) = Gamma(2/a)^2 / (Gamma(1/a) Gamma(3/a)) over alpha in [0.2, 10]
// step 0.001; shared lookup for the moment-matching fit.
inline const std::vector<double>& aggd_r_table() {
    static const std::vector<double> table = [] {
        std::vector<double> t(9801);
        for (std::size_t i = 0; i < t.size(); ++i) {
            double a = 0.2 + 0.001 * static_cast<double>(i);
            t[i] = std::tgamma(2.0 / a) * std::tgamma(2.0 / a) /
                   (std::tgamma(1.0 / a) * std::tgamma(3.0 / a));
        }
        return t;
    }();
    return table;
}

inline double aggd_alpha_at(std::size_t i) { return 0.2 + 0.001 * static_cast<double>(i); }

// Sorted-ascending sum: order-insensitive, so mirrored sample sets produce
// bit-identical one-sided moments.
inline double sorted_sum(std::vector<double>& v) {
    std::sort(v.begin(), v.end());
    double s = 0.0;
    for (double x : v) s += x;
    return s;
}

}  // namespace detail

inline AggdFit fit_aggd(std::span<const double> samples) {
    if (samples.size() < 16)
        throw std::invalid_argument("fit_aggd: need at least 16 samples, got " +
                                    std::to_string(samples.size()));
    std::vector<double> left2, right2;
    double abs_sum = 0.0;
    for (double s : samples) {
        if (s < 0.0) left2.push_back(s * s);
        else if (s > 0.0) right2.push_back(s * s);
        abs_sum += std::abs(s);
    }
    if (left2.empty() && right2.empty())
        throw std::invalid_argument("fit_aggd: all samples are zero");

    double lsum = detail::sorted_sum(left2);
    double rsum = detail::sorted_sum(right2);
    double sigma_l = left2.empty() ? 0.0 : std::sqrt(lsum / static_cast<double>(left2.size()));
    double sigma_r = right2.empty() ? 0.0 : std::sqrt(rsum / static_cast<double>(right2.size()));

    double n = static_cast<double>(samples.size());
    double second = (lsum + rsum) / n;
    double rhat = (abs_sum / n) * (abs_sum / n) / second;
    double rhatnorm = rhat;
    if (sigma_r > 0.0 && sigma_l >= 0.0) {
        double g = sigma_l / sigma_r;
        rhatnorm = rhat * (g * g * g + 1.0) * (g + 1.0) / ((g * g + 1.0) * (g * g + 1.0));
    }

    const std::vector<double>& table = detail::aggd_r_table();
    std::size_t best = 0;
    double best_diff = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < table.size(); ++i) {
        double diff = std::abs(table[i] - rhatnorm);
        if (diff < best_diff) {
            best_diff = diff;
            best = i;
        }
    }
    return {detail::aggd_alpha_at(best), sigma_l, sigma_r};
}

namespace detail {

// 2x box downsample, truncating odd margins.
inline Image downsample2(const Image& img) {
    Image out(img.rows / 2, img.cols / 2);
    for (std::size_t r = 0; r < out.rows; ++r)
        for (std::size_t c = 0; c < out.cols; ++c)
            out.at(r, c) = 0.25f * (img.at(2 * r, 2 * c) + img.at(2 * r, 2 * c + 1) +
                                    img.at(2 * r + 1, 2 * c) + img.at(2 * r + 1, 2 * c + 1));
    return out;
}

// 18 NSS features of one MSCN patch: GGD fit of the coefficients, then AGGD
// fits of the four pairwise-product orientations (H, V, D1, D2).
inline void patch_features(const Image& coef, std::size_t r0, std::size_t c0, std::size_t side,
                           std::vector<double>& out) {
    std::vector<double> vals;
    vals.reserve(side * side);
    for (std::size_t r = 0; r < side; ++r)
        for (std::size_t c = 0; c < side; ++c) vals.push_back(coef.at(r0 + r, c0 + c));
    AggdFit g = fit_aggd(vals);
    out.push_back(g.alpha);
    out.push_back((g.beta_left * g.beta_left + g.beta_right * g.beta_right) / 2.0);

    static constexpr int shifts[4][2] = {{0, 1}, {1, 0}, {1, 1}, {1, -1}};
    for (const auto& sh : shifts) {
        std::vector<double> prod;
        prod.reserve(side * side);
        for (std::size_t r = 0; r < side; ++r)
            for (std::size_t c = 0; c < side; ++c) {
                long rr = static_cast<long>(r) + sh[0];
                long cc = static_cast<long>(c) + sh[1];
                if (rr < 0 || cc < 0 || rr >= static_cast<long>(side) ||
                    cc >= static_cast<long>(side))
                    continue;
                prod.push_back(static_cast<double>(coef.at(r0 + r, c0 + c)) *
                               coef.at(r0 + rr, c0 + cc));
            }
        AggdFit a = fit_aggd(prod);
        double c1 = std::sqrt(std::tgamma(1.0 / a.alpha)) / std::sqrt(std::tgamma(3.0 / a.alpha));
        double eta = (a.beta_right - a.beta_left) *
                     (std::tgamma(2.0 / a.alpha) / std::tgamma(1.0 / a.alpha)) * c1;
        out.push_back(a.alpha);
        out.push_back(eta);
        out.push_back(a.beta_left * a.beta_left);
        out.push_back(a.beta_right * a.beta_right);
    }
}

}  // namespace detail

// Per-patch NSS features: one row per selected patch, 18 features per scale.
// Patches are non-overlapping patch_size blocks; the sharpness gate keeps
// patches whose mean local deviation strictly exceeds the configured fraction
// of the maximum, judged at scale 1.
inline Eigen::MatrixXd niqe_patch_features(const Image& img, const NiqeConfig& cfg = {}) {
    cfg.validate();
    if (img.rows < 2 * cfg.patch_size || img.cols < 2 * cfg.patch_size)
        throw std::invalid_argument("niqe: image must be at least twice the patch size (" +
                                    std::to_string(2 * cfg.patch_size) + "), got " +
                                    std::to_string(img.rows) + "x" + std::to_string(img.cols));

    std::vector<MscnField> fields;
    Image cur = img;
    for (std::size_t s = 0; s < cfg.scales; ++s) {
        if (s > 0) cur = detail::downsample2(cur);
        fields.push_back(compute_mscn(cur, cfg.window_sigma, cfg.c));
    }

    const std::size_t np_r = img.rows / cfg.patch_size;
    const std::size_t np_c = img.cols / cfg.patch_size;
    std::vector<double> sharp(np_r * np_c);
    double max_sharp = 0.0;
    for (std::size_t pr = 0; pr < np_r; ++pr)
        for (std::size_t pc = 0; pc < np_c; ++pc) {
            double acc = 0.0;
            for (std::size_t r = 0; r < cfg.patch_size; ++r)
                for (std::size_t c = 0; c < cfg.patch_size; ++c)
                    acc += fields[0].sigma.at(pr * cfg.patch_size + r, pc * cfg.patch_size + c);
            double s = acc / static_cast<double>(cfg.patch_size * cfg.patch_size);
            sharp[pr * np_c + pc] = s;
            max_sharp = std::max(max_sharp, s);
        }

    std::vector<std::pair<std::size_t, std::size_t>> selected;
    for (std::size_t pr = 0; pr < np_r; ++pr)
        for (std::size_t pc = 0; pc < np_c; ++pc)
            if (sharp[pr * np_c + pc] > cfg.sharpness_fraction * max_sharp)
                selected.push_back({pr, pc});
    if (selected.empty())
        throw std::runtime_error("niqe: no patch passes the sharpness gate (max sharpness " +
                                 std::to_string(max_sharp) + ")");

    Eigen::MatrixXd feats(selected.size(), cfg.feature_dim());
    for (std::size_t i = 0; i < selected.size(); ++i) {
        std::vector<double> row;
        row.reserve(cfg.feature_dim());
        for (std::size_t s = 0; s < cfg.scales; ++s) {
            std::size_t side = cfg.patch_size >> s;
            detail::patch_features(fields[s].coefficients, selected[i].first * side,
                                   selected[i].second * side, side, row);
        }
        for (std::size_t j = 0; j < row.size(); ++j) feats(static_cast<Eigen::Index>(i), j) = row[j];
    }
    return feats;
}

inline Eigen::VectorXd niqe_features(const Image& img, const NiqeConfig& cfg = {}) {
    Eigen::MatrixXd feats = niqe_patch_features(img, cfg);
    return feats.colwise().mean();
}

// Gaussian fit over rows of a feature matrix, with rank repair: a covariance
// of rank < f gets epsilon=1e-6 added to the diagonal (logged).
inline NiqeModel fit_niqe_model_from_features(const Eigen::MatrixXd& features,
                                              const NiqeConfig& cfg) {
    NiqeModel model;
    model.config = cfg;
    if (features.rows() == 1) {
        model.mean = features.row(0);
        model.cov = Eigen::MatrixXd::Zero(features.cols(), features.cols());
    } else {
        GaussianStats g = fit_gaussian(features);
        model.mean = g.mean;
        model.cov = g.cov;
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(model.cov);
    if (es.info() != Eigen::Success)
        throw std::runtime_error("niqe fit: eigendecomposition did not converge");
    double max_ev = std::max(1.0, es.eigenvalues().maxCoeff());
    if (es.eigenvalues().minCoeff() <= 1e-12 * max_ev) {
        log_warn("niqe fit: degenerate feature covariance, adding 1e-6 to the diagonal");
        model.cov += 1e-6 * Eigen::MatrixXd::Identity(model.cov.rows(), model.cov.cols());
    }
    return model;
}

inline NiqeModel fit_niqe_model(const std::vector<Image>& pristine, const NiqeConfig& cfg = {},
                                std::size_t threads = 1) {
    cfg.validate();
    if (pristine.size() < 10)
        throw std::invalid_argument("niqe fit: need at least 10 pristine images, got " +
                                    std::to_string(pristine.size()));
    Eigen::MatrixXd features(pristine.size(), cfg.feature_dim());
    std::size_t workers = std::max<std::size_t>(1, std::min(threads, pristine.size()));
    std::exception_ptr first_error;
    std::mutex err_mu;
    auto work = [&](std::size_t w) {
        for (std::size_t i = w; i < pristine.size(); i += workers) {
            try {
                features.row(static_cast<Eigen::Index>(i)) = niqe_features(pristine[i], cfg);
            } catch (...) {
                std::lock_guard<std::mutex> lk(err_mu);
                if (!first_error) first_error = std::current_exception();
                return;
            }
        }
    };
    if (workers == 1) {
        work(0);
    } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, w);
        for (std::thread& t : pool) t.join();
    }
    if (first_error) std::rethrow_exception(first_error);
    return fit_niqe_model_from_features(features, cfg);
}

// Mahalanobis-style NIQE score: sqrt((v1-v2)^T ((S1+S2)/2)^-1 (v1-v2)) where
// (v1,S1) is the pristine model and (v2,S2) the test image's patch statistics.
inline double niqe_score(const Image& img, const NiqeModel& model) {
    Eigen::MatrixXd feats = niqe_patch_features(img, model.config);
    if (static_cast<std::size_t>(feats.cols()) != static_cast<std::size_t>(model.mean.size()))
        throw std::invalid_argument("niqe score: feature arity does not match the model");
    Eigen::VectorXd v2 = feats.colwise().mean();
    Eigen::MatrixXd s2;
    if (feats.rows() < 2) {
        s2 = Eigen::MatrixXd::Zero(feats.cols(), feats.cols());
    } else {
        s2 = fit_gaussian(feats).cov;
    }
    Eigen::MatrixXd pooled = 0.5 * (model.cov + s2);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(pooled);
    if (es.info() != Eigen::Success)
        throw std::runtime_error("niqe score: eigendecomposition did not converge");
    Eigen::VectorXd ev = es.eigenvalues();
    double max_ev = std::max(1.0, ev.maxCoeff());
    if (ev.minCoeff() <= 1e-12 * max_ev) {
        log_warn("niqe score: singular pooled covariance, adding 1e-6 to the diagonal");
        ev.array() += 1e-6;
    }
    Eigen::VectorXd x = model.mean - v2;
    Eigen::VectorXd y = es.eigenvectors().transpose() * x;
    double q = 0.0;
    for (Eigen::Index i = 0; i < y.size(); ++i) q += y[i] * y[i] / ev[i];
    return std::sqrt(std::max(0.0, q));
}

// ---------------------------------------------------------------------------
// NIQE model file (JSON)
// ---------------------------------------------------------------------------

inline void save_niqe_model(const std::filesystem::path& path, const NiqeModel& model) {
    nlohmann::json cov = nlohmann::json::array();
    for (Eigen::Index r = 0; r < model.cov.rows(); ++r) {
        nlohmann::json row = nlohmann::json::array();
        for (Eigen::Index c = 0; c < model.cov.cols(); ++c) row.push_back(model.cov(r, c));
        cov.push_back(row);
    }
    std::vector<double> mean(model.mean.data(), model.mean.data() + model.mean.size());
    nlohmann::json j{{"mean", mean},
                     {"cov", cov},
                     {"patch_size", model.config.patch_size},
                     {"sharpness_fraction", model.config.sharpness_fraction},
                     {"scales", model.config.scales},
                     {"window_sigma", model.config.window_sigma},
                     {"c", model.config.c}};
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
    out << j.dump(2) << "\n";
}

inline NiqeModel load_niqe_model(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open: " + path.string());
    nlohmann::json j = nlohmann::json::parse(in);
    NiqeModel model;
    model.config.patch_size = j.at("patch_size").get<std::size_t>();
    model.config.sharpness_fraction = j.at("sharpness_fraction").get<double>();
    model.config.scales = j.at("scales").get<std::size_t>();
    model.config.window_sigma = j.value("window_sigma", 7.0 / 6.0);
    model.config.c = j.value("c", 1.0 / 255.0);
    model.config.validate();

    std::vector<double> mean = j.at("mean").get<std::vector<double>>();
    if (mean.size() != model.config.feature_dim())
        throw std::runtime_error(path.string() + ": mean arity does not match config");
    model.mean = Eigen::Map<Eigen::VectorXd>(mean.data(), static_cast<Eigen::Index>(mean.size()));

    const nlohmann::json& cov = j.at("cov");
    if (cov.size() != mean.size())
        throw std::runtime_error(path.string() + ": covariance shape does not match mean");
    model.cov.resize(static_cast<Eigen::Index>(mean.size()), static_cast<Eigen::Index>(mean.size()));
    for (std::size_t r = 0; r < cov.size(); ++r) {
        if (cov[r].size() != mean.size())
            throw std::runtime_error(path.string() + ": covariance row " + std::to_string(r) +
                                     " has wrong arity");
        for (std::size_t c = 0; c < cov[r].size(); ++c)
            model.cov(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) =
                cov[r][c].get<double>();
    }
    return model;
}

}  // namespace kpa
