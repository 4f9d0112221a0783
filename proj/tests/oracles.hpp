#pragma once

// Independent reference implementations the tests compare the library
// against. Deliberately naive: explicit double loops, full sorts, no code
// shared with the headers under test beyond the data types.

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "kpa/align.hpp"
#include "kpa/corpus.hpp"
#include "kpa/image.hpp"

namespace oracle {

inline double cosine(std::span<const float> a, std::span<const float> b) {
    double dot = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) dot += static_cast<double>(a[i]) * b[i];
    double na = 0.0;
    for (float x : a) na += static_cast<double>(x) * x;
    double nb = 0.0;
    for (float x : b) nb += static_cast<double>(x) * x;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

struct Hit {
    double score;
    std::size_t patch;
};

inline std::vector<Hit> token_maxima(const kpa::TokenSeq& tokens, const kpa::PatchGrid& grid) {
    std::vector<Hit> out;
    for (std::size_t k = 0; k < tokens.tokens.size(); ++k) {
        Hit best{-2.0, 0};
        for (std::size_t p = 0; p < grid.patches.size(); ++p) {
            double s = cosine(tokens.embeddings.row(k),
                              std::span<const float>(grid.patches[p].embedding));
            if (s > best.score) best = {s, p};
        }
        out.push_back(best);
    }
    return out;
}

inline double mean_of_max(const kpa::TokenSeq& tokens, const kpa::PatchGrid& grid) {
    std::vector<Hit> maxima = token_maxima(tokens, grid);
    double sum = 0.0;
    for (const Hit& h : maxima) sum += h.score;
    return sum / static_cast<double>(maxima.size());
}

// A patch's identity independent of storage order.
struct PatchRef {
    std::string image;
    std::size_t row = 0;
    std::size_t col = 0;

    auto operator<=>(const PatchRef&) const = default;
};

inline std::vector<std::size_t> ranked_pairs(const std::vector<kpa::PairedSample>& corpus) {
    std::vector<std::size_t> order(corpus.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::vector<double> st(corpus.size());
    for (std::size_t i = 0; i < corpus.size(); ++i)
        st[i] = mean_of_max(corpus[i].token_seq, corpus[i].patch_grid);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (st[a] != st[b]) return st[a] > st[b];
        return corpus[a].report.id < corpus[b].report.id;
    });
    return order;
}

struct OracleKeypatch {
    PatchRef ref;
    std::vector<float> embedding;  // raw, not normalized
    double score = 0.0;
};

// Full enumeration of the mining contract: rank pairs, rank hits inside each
// kept pair, keep kappa2 distinct patches per pair.
inline std::vector<OracleKeypatch> codebook_patches(const std::vector<kpa::PairedSample>& corpus,
                                                    std::size_t kappa1, std::size_t kappa2) {
    std::vector<std::size_t> order = ranked_pairs(corpus);
    kappa1 = std::min(kappa1, corpus.size());
    std::vector<OracleKeypatch> out;
    for (std::size_t rank = 0; rank < kappa1; ++rank) {
        const kpa::PairedSample& pair = corpus[order[rank]];
        std::vector<Hit> maxima = token_maxima(pair.token_seq, pair.patch_grid);
        std::vector<std::size_t> hit_order(maxima.size());
        for (std::size_t i = 0; i < maxima.size(); ++i) hit_order[i] = i;
        std::sort(hit_order.begin(), hit_order.end(), [&](std::size_t a, std::size_t b) {
            if (maxima[a].score != maxima[b].score) return maxima[a].score > maxima[b].score;
            if (a != b) return a < b;
            return maxima[a].patch < maxima[b].patch;
        });
        std::set<std::size_t> used;
        std::vector<OracleKeypatch> selected;
        for (std::size_t h : hit_order) {
            if (selected.size() == kappa2) break;
            if (!used.insert(maxima[h].patch).second) continue;
            const kpa::Patch& p = pair.patch_grid.patches[maxima[h].patch];
            selected.push_back({{pair.patch_grid.image_id, p.row, p.col}, p.embedding,
                                maxima[h].score});
        }
        std::sort(selected.begin(), selected.end(),
                  [&](const OracleKeypatch& a, const OracleKeypatch& b) {
                      if (a.score != b.score) return a.score > b.score;
                      std::size_t ia = a.ref.row * pair.patch_grid.cols + a.ref.col;
                      std::size_t ib = b.ref.row * pair.patch_grid.cols + b.ref.col;
                      return ia < ib;
                  });
        for (OracleKeypatch& kp : selected) out.push_back(std::move(kp));
    }
    return out;
}

// Per-token top-kappa3 keypatch identity sets over an oracle codebook.
inline std::vector<std::set<PatchRef>> retrieval_sets(const std::vector<OracleKeypatch>& codebook,
                                                      const kpa::TokenSeq& tokens,
                                                      std::size_t kappa3) {
    kappa3 = std::min(kappa3, codebook.size());
    std::vector<std::set<PatchRef>> out(tokens.tokens.size());
    for (std::size_t k = 0; k < tokens.tokens.size(); ++k) {
        std::vector<std::pair<double, std::size_t>> scored;
        for (std::size_t r = 0; r < codebook.size(); ++r)
            scored.push_back({cosine(std::span<const float>(codebook[r].embedding),
                                     tokens.embeddings.row(k)),
                              r});
        std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
            if (a.first != b.first) return a.first > b.first;
            return a.second < b.second;
        });
        for (std::size_t i = 0; i < kappa3; ++i) out[k].insert(codebook[scored[i].second].ref);
    }
    return out;
}

// Two-pass mean/covariance with explicit loops.
inline void gaussian_two_pass(const std::vector<std::vector<double>>& rows,
                              std::vector<double>& mean, std::vector<std::vector<double>>& cov) {
    const std::size_t n = rows.size();
    const std::size_t d = rows.front().size();
    mean.assign(d, 0.0);
    for (const auto& r : rows)
        for (std::size_t j = 0; j < d; ++j) mean[j] += r[j];
    for (std::size_t j = 0; j < d; ++j) mean[j] /= static_cast<double>(n);
    cov.assign(d, std::vector<double>(d, 0.0));
    for (const auto& r : rows)
        for (std::size_t a = 0; a < d; ++a)
            for (std::size_t b = 0; b < d; ++b)
                cov[a][b] += (r[a] - mean[a]) * (r[b] - mean[b]);
    for (std::size_t a = 0; a < d; ++a)
        for (std::size_t b = 0; b < d; ++b) cov[a][b] /= static_cast<double>(n - 1);
}

// Closed-form squared Frechet distance for simultaneously diagonal Gaussians.
inline double frechet_diagonal(const std::vector<double>& mu_a, const std::vector<double>& var_a,
                               const std::vector<double>& mu_b, const std::vector<double>& var_b) {
    double d2 = 0.0;
    for (std::size_t i = 0; i < mu_a.size(); ++i) {
        double dm = mu_a[i] - mu_b[i];
        double ds = std::sqrt(var_a[i]) - std::sqrt(var_b[i]);
        d2 += dm * dm + ds * ds;
    }
    return d2;
}

// MSCN by direct 2-D convolution with a replicated border.
inline kpa::Image mscn_naive(const kpa::Image& img, double sigma, double c) {
    const int radius = 3;
    double kernel[7][7];
    double ksum = 0.0;
    for (int i = -radius; i <= radius; ++i)
        for (int j = -radius; j <= radius; ++j) {
            kernel[i + radius][j + radius] =
                std::exp(-(static_cast<double>(i) * i + static_cast<double>(j) * j) /
                         (2.0 * sigma * sigma));
            ksum += kernel[i + radius][j + radius];
        }
    for (auto& row : kernel)
        for (double& k : row) k /= ksum;

    auto sample = [&](long r, long co) {
        r = std::clamp<long>(r, 0, static_cast<long>(img.rows) - 1);
        co = std::clamp<long>(co, 0, static_cast<long>(img.cols) - 1);
        return static_cast<double>(img.px[static_cast<std::size_t>(r) * img.cols +
                                          static_cast<std::size_t>(co)]);
    };
    kpa::Image out(img.rows, img.cols);
    for (std::size_t r = 0; r < img.rows; ++r)
        for (std::size_t co = 0; co < img.cols; ++co) {
            double mu = 0.0, mu2 = 0.0;
            for (int i = -radius; i <= radius; ++i)
                for (int j = -radius; j <= radius; ++j) {
                    double v = sample(static_cast<long>(r) + i, static_cast<long>(co) + j);
                    mu += kernel[i + radius][j + radius] * v;
                    mu2 += kernel[i + radius][j + radius] * v * v;
                }
            double sd = std::sqrt(std::max(0.0, mu2 - mu * mu));
            out.px[r * img.cols + co] =
                static_cast<float>((sample(static_cast<long>(r), static_cast<long>(co)) - mu) /
                                   (sd + c));
        }
    return out;
}

// Linear-scan nearest code.
inline std::size_t nearest_code(std::span<const float> v, const kpa::Matrix& codes) {
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < codes.rows; ++i) {
        double d = 0.0;
        auto row = codes.row(i);
        for (std::size_t j = 0; j < row.size(); ++j) {
            double diff = static_cast<double>(v[j]) - row[j];
            d += diff * diff;
        }
        if (d < best_d) {
            best_d = d;
            best = i;
        }
    }
    return best;
}

}  // namespace oracle
