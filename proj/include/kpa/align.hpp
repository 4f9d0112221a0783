#pragma once

#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "kpa/common.hpp"
#include "kpa/corpus.hpp"

namespace kpa {

struct AlignParams {
    std::size_t kappa1 = 64;  // report-image pairs kept
    std::size_t kappa2 = 16;  // patches mined per kept pair
    std::size_t kappa3 = 4;   // keypatches retrieved per token

    void validate() const {
        if (kappa1 == 0 || kappa2 == 0 || kappa3 == 0)
            throw std::invalid_argument("align params: kappa values must be >= 1");
    }
};

struct KeypatchProvenance {
    std::size_t pair_rank = 0;     // rank of the source pair in the kept top-kappa1 list
    std::string selecting_token;   // token whose word-patch maximum selected the patch
    double score = 0.0;            // that word-patch similarity, in [-1,1]
};

struct Keypatch {
    Patch patch;  // embedding stored unit-normalized
    std::string source_image_id;
    KeypatchProvenance prov;
};

struct VisualCodebook {
    std::vector<Keypatch> keypatches;  // pair_rank asc, then score desc, then patch index asc
    AlignParams params;
    std::size_t dim = 0;
    std::size_t patch_px = 0;

    std::size_t size() const { return keypatches.size(); }
};

struct SimilarityMatrix {
    std::size_t rows = 0;  // codebook size
    std::size_t cols = 0;  // token count
    std::vector<double> values;  // row-major, each in [-1,1]
    std::vector<std::size_t> row_ids;
    std::vector<std::string> col_tokens;

    double at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
    double& at(std::size_t r, std::size_t c) { return values[r * cols + c]; }
};

struct ScoredKeypatch {
    std::size_t index = 0;
    double score = 0.0;
};

struct RetrievalResult {
    std::vector<std::vector<ScoredKeypatch>> per_token;  // score desc, index asc on ties
    std::vector<std::size_t> flattened;                  // rank-major interleave, deduplicated
};

struct TokenMax {
    double score = 0.0;
    std::size_t patch_index = 0;
};

// ---------------------------------------------------------------------------
// Similarity kernel
// ---------------------------------------------------------------------------

inline double cosine_sim(std::span<const float> u, std::span<const float> v) {
    if (u.size() != v.size())
        throw std::invalid_argument("cosine_sim: dimension mismatch (" + std::to_string(u.size()) +
                                    " vs " + std::to_string(v.size()) + ")");
    double dot = 0.0, nu = 0.0, nv = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        dot += static_cast<double>(u[i]) * v[i];
        nu += static_cast<double>(u[i]) * u[i];
        nv += static_cast<double>(v[i]) * v[i];
    }
    if (nu == 0.0 || nv == 0.0) throw std::invalid_argument("cosine_sim: zero-norm input");
    return std::clamp(dot / (std::sqrt(nu) * std::sqrt(nv)), -1.0, 1.0);
}

// Per-token maximum similarity over all patches. Ties take the smallest patch
// linear index (strict-greater update keeps the first maximum).
inline std::vector<TokenMax> word_patch_max(const TokenSeq& tokens, const PatchGrid& patches) {
    if (patches.patches.empty())
        throw std::invalid_argument("word_patch_max: empty patch set for image " +
                                    patches.image_id);
    if (tokens.dim() != patches.dim())
        throw std::invalid_argument("word_patch_max: embedding dim mismatch (" +
                                    std::to_string(tokens.dim()) + " vs " +
                                    std::to_string(patches.dim()) + ")");
    std::vector<TokenMax> out(tokens.tokens.size());
    for (std::size_t k = 0; k < tokens.tokens.size(); ++k) {
        TokenMax best{-2.0, 0};
        for (std::size_t p = 0; p < patches.patches.size(); ++p) {
            double s = cosine_sim(tokens.embeddings.row(k),
                                  std::span<const float>(patches.patches[p].embedding));
            if (s > best.score) best = {s, p};
        }
        out[k] = best;
    }
    return out;
}

// Report-to-image similarity: mean over tokens of the per-token maxima.
inline double report_to_cxr_sim(const TokenSeq& tokens, const PatchGrid& patches) {
    if (tokens.tokens.empty())
        throw std::invalid_argument("report_to_cxr_sim: empty token sequence for report " +
                                    tokens.report_id);
    std::vector<TokenMax> maxima = word_patch_max(tokens, patches);
    double sum = 0.0;
    for (const TokenMax& m : maxima) sum += m.score;
    return sum / static_cast<double>(maxima.size());
}

// ---------------------------------------------------------------------------
// Codebook construction
// ---------------------------------------------------------------------------

namespace detail {

inline void normalize_in_place(std::vector<float>& v) {
    double n = 0.0;
    for (float x : v) n += static_cast<double>(x) * x;
    n = std::sqrt(n);
    if (n == 0.0) throw std::invalid_argument("cannot normalize a zero embedding");
    for (float& x : v) x = static_cast<float>(x / n);
}

struct PairHit {
    double score;
    std::size_t token;
    std::size_t patch;
};

}  // namespace detail

// Mines the visual codebook. Pairs are ranked by report-to-image similarity
// (ties: report id ascending) and the top kappa1 kept. Within each kept pair
// the per-token maxima are ranked (score desc, token asc, patch asc) and the
// top kappa2 distinct patches taken; a patch hit by several tokens keeps its
// highest-scoring provenance. Stored embeddings are unit-normalized so
// retrieval can use plain dot products.
inline VisualCodebook build_codebook(const std::vector<PairedSample>& corpus,
                                     const AlignParams& params, std::size_t threads = 1) {
    params.validate();
    if (corpus.empty()) throw std::invalid_argument("build_codebook: empty corpus");
    const std::size_t dim = corpus.front().token_seq.dim();
    for (const PairedSample& s : corpus) {
        s.validate();
        if (s.token_seq.dim() != dim)
            throw std::invalid_argument("build_codebook: sample " + s.report.id +
                                        " has embedding dim " + std::to_string(s.token_seq.dim()) +
                                        ", expected " + std::to_string(dim));
    }

    std::size_t kappa1 = params.kappa1;
    if (kappa1 > corpus.size()) {
        log_warn("build_codebook: kappa1=" + std::to_string(kappa1) + " clamped to corpus size " +
                 std::to_string(corpus.size()));
        kappa1 = corpus.size();
    }

    // pairwise scores; chunked across workers, each writing disjoint slots
    std::vector<double> st(corpus.size());
    std::size_t workers = std::max<std::size_t>(1, std::min(threads, corpus.size()));
    if (workers == 1) {
        for (std::size_t i = 0; i < corpus.size(); ++i)
            st[i] = report_to_cxr_sim(corpus[i].token_seq, corpus[i].patch_grid);
    } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w) {
            pool.emplace_back([&, w] {
                for (std::size_t i = w; i < corpus.size(); i += workers)
                    st[i] = report_to_cxr_sim(corpus[i].token_seq, corpus[i].patch_grid);
            });
        }
        for (std::thread& t : pool) t.join();
    }

    std::vector<std::size_t> order(corpus.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (st[a] != st[b]) return st[a] > st[b];
        return corpus[a].report.id < corpus[b].report.id;
    });

    VisualCodebook cb;
    cb.params = params;
    cb.dim = dim;
    bool pixels_uniform = true;
    for (std::size_t rank = 0; rank < kappa1; ++rank) {
        const PairedSample& pair = corpus[order[rank]];
        std::vector<TokenMax> maxima = word_patch_max(pair.token_seq, pair.patch_grid);

        std::vector<detail::PairHit> hits(maxima.size());
        for (std::size_t k = 0; k < maxima.size(); ++k)
            hits[k] = {maxima[k].score, k, maxima[k].patch_index};
        std::sort(hits.begin(), hits.end(), [](const detail::PairHit& a, const detail::PairHit& b) {
            if (a.score != b.score) return a.score > b.score;
            if (a.token != b.token) return a.token < b.token;
            return a.patch < b.patch;
        });

        std::vector<Keypatch> selected;
        std::set<std::size_t> used;
        for (const detail::PairHit& h : hits) {
            if (selected.size() == params.kappa2) break;
            if (!used.insert(h.patch).second) continue;
            Keypatch kp;
            kp.patch = pair.patch_grid.patches[h.patch];
            kp.source_image_id = pair.patch_grid.image_id;
            kp.prov = {rank, pair.token_seq.tokens[h.token], h.score};
            selected.push_back(std::move(kp));
        }
        std::sort(selected.begin(), selected.end(), [&](const Keypatch& a, const Keypatch& b) {
            if (a.prov.score != b.prov.score) return a.prov.score > b.prov.score;
            std::size_t ia = a.patch.row * pair.patch_grid.cols + a.patch.col;
            std::size_t ib = b.patch.row * pair.patch_grid.cols + b.patch.col;
            return ia < ib;
        });
        for (Keypatch& kp : selected) {
            detail::normalize_in_place(kp.patch.embedding);
            cb.keypatches.push_back(std::move(kp));
        }
        if (pair.patch_grid.patch_px != corpus.front().patch_grid.patch_px)
            pixels_uniform = false;
    }
    cb.patch_px = pixels_uniform ? corpus.front().patch_grid.patch_px : 0;
    if (!pixels_uniform) {
        log_warn("build_codebook: mixed patch pixel sizes, dropping pixel payloads");
        for (Keypatch& kp : cb.keypatches) kp.patch.pixels.reset();
    }
    return cb;
}

// ---------------------------------------------------------------------------
// Retrieval
// ---------------------------------------------------------------------------

// Word-patch similarity matrix between the codebook and a report's tokens.
inline SimilarityMatrix compute_sw(const VisualCodebook& codebook, const TokenSeq& tokens) {
    if (tokens.tokens.empty())
        throw std::invalid_argument("compute_sw: empty token sequence");
    if (!codebook.keypatches.empty() && tokens.dim() != codebook.dim)
        throw std::invalid_argument("compute_sw: token dim " + std::to_string(tokens.dim()) +
                                    " does not match codebook dim " +
                                    std::to_string(codebook.dim));
    const std::size_t R = codebook.size();
    const std::size_t K = tokens.tokens.size();
    SimilarityMatrix sw;
    sw.rows = R;
    sw.cols = K;
    sw.values.resize(R * K);
    sw.row_ids.resize(R);
    for (std::size_t r = 0; r < R; ++r) sw.row_ids[r] = r;
    sw.col_tokens = tokens.tokens;

    // normalize each token once; keypatch embeddings are stored normalized
    std::vector<double> tok(codebook.dim);
    for (std::size_t k = 0; k < K; ++k) {
        auto row = tokens.embeddings.row(k);
        double n = 0.0;
        for (float x : row) n += static_cast<double>(x) * x;
        if (n == 0.0)
            throw std::invalid_argument("compute_sw: zero-norm embedding for token '" +
                                        tokens.tokens[k] + "'");
        n = std::sqrt(n);
        for (std::size_t i = 0; i < row.size(); ++i) tok[i] = row[i] / n;
        for (std::size_t r = 0; r < R; ++r) {
            const std::vector<float>& kp = codebook.keypatches[r].patch.embedding;
            double dot = 0.0;
            for (std::size_t i = 0; i < kp.size(); ++i) dot += kp[i] * tok[i];
            sw.at(r, k) = std::clamp(dot, -1.0, 1.0);
        }
    }
    return sw;
}

// Per-token top-kappa3 keypatches (score desc, index asc on ties). The
// flattened sequence interleaves tokens rank by rank, skipping keypatches
// already taken, so every token keeps representation near the front.
inline RetrievalResult extract_keypatches(const SimilarityMatrix& matrix, std::size_t kappa3) {
    if (kappa3 == 0) throw std::invalid_argument("extract_keypatches: kappa3 must be >= 1");
    if (matrix.rows == 0 || matrix.cols == 0)
        throw std::invalid_argument("extract_keypatches: empty similarity matrix");
    if (kappa3 > matrix.rows) {
        log_warn("extract_keypatches: kappa3=" + std::to_string(kappa3) + " clamped to " +
                 std::to_string(matrix.rows) + " keypatches");
        kappa3 = matrix.rows;
    }

    RetrievalResult result;
    result.per_token.resize(matrix.cols);
    std::vector<std::size_t> idx(matrix.rows);
    for (std::size_t k = 0; k < matrix.cols; ++k) {
        for (std::size_t r = 0; r < matrix.rows; ++r) idx[r] = r;
        std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
            double sa = matrix.at(a, k), sb = matrix.at(b, k);
            if (sa != sb) return sa > sb;
            return a < b;
        });
        result.per_token[k].reserve(kappa3);
        for (std::size_t r = 0; r < kappa3; ++r)
            result.per_token[k].push_back({matrix.row_ids[idx[r]], matrix.at(idx[r], k)});
    }

    std::set<std::size_t> seen;
    for (std::size_t rank = 0; rank < kappa3; ++rank)
        for (std::size_t k = 0; k < matrix.cols; ++k) {
            std::size_t id = result.per_token[k][rank].index;
            if (seen.insert(id).second) result.flattened.push_back(id);
        }
    return result;
}

// ---------------------------------------------------------------------------
// Codebook files: <base>.json header + <base>.emb1 + optional <base>.pix
// ---------------------------------------------------------------------------

inline void write_codebook(const std::filesystem::path& base, const VisualCodebook& cb) {
    nlohmann::json prov = nlohmann::json::array();
    for (const Keypatch& kp : cb.keypatches) {
        prov.push_back({{"image_id", kp.source_image_id},
                        {"pair_rank", kp.prov.pair_rank},
                        {"token", kp.prov.selecting_token},
                        {"score", kp.prov.score},
                        {"row", kp.patch.row},
                        {"col", kp.patch.col}});
    }
    nlohmann::json header{{"kappa1", cb.params.kappa1}, {"kappa2", cb.params.kappa2},
                          {"kappa3", cb.params.kappa3}, {"dim", cb.dim},
                          {"count", cb.keypatches.size()}, {"patch_px", cb.patch_px},
                          {"provenance", prov}};
    std::ofstream hj(base.string() + ".json");
    if (!hj) throw std::runtime_error("cannot open for writing: " + base.string() + ".json");
    hj << header.dump(2) << "\n";

    Matrix m(cb.keypatches.size(), cb.dim);
    std::vector<std::string> ids(cb.keypatches.size());
    for (std::size_t i = 0; i < cb.keypatches.size(); ++i) {
        ids[i] = std::to_string(i);
        std::copy(cb.keypatches[i].patch.embedding.begin(), cb.keypatches[i].patch.embedding.end(),
                  m.row(i).begin());
    }
    write_embeddings(base.string() + ".emb1", ids, m);

    if (cb.patch_px > 0) {
        std::ofstream px(base.string() + ".pix", std::ios::binary);
        if (!px) throw std::runtime_error("cannot open for writing: " + base.string() + ".pix");
        for (const Keypatch& kp : cb.keypatches) {
            if (!kp.patch.pixels)
                throw std::runtime_error("codebook: patch_px set but keypatch has no pixels");
            for (float v : *kp.patch.pixels) put_f32_le(px, v);
        }
    }
}

inline VisualCodebook read_codebook(const std::filesystem::path& base) {
    std::ifstream hj(base.string() + ".json");
    if (!hj) throw std::runtime_error("cannot open: " + base.string() + ".json");
    nlohmann::json header = nlohmann::json::parse(hj);

    VisualCodebook cb;
    cb.params.kappa1 = header.at("kappa1").get<std::size_t>();
    cb.params.kappa2 = header.at("kappa2").get<std::size_t>();
    cb.params.kappa3 = header.value("kappa3", std::size_t{4});
    cb.dim = header.at("dim").get<std::size_t>();
    cb.patch_px = header.at("patch_px").get<std::size_t>();

    EmbeddingFile emb = read_embeddings(base.string() + ".emb1");
    std::size_t count = header.at("count").get<std::size_t>();
    if (emb.matrix.rows != count || emb.matrix.cols != cb.dim)
        throw std::runtime_error(base.string() + ": embeddings do not match header counts");

    const nlohmann::json& prov = header.at("provenance");
    if (prov.size() != count)
        throw std::runtime_error(base.string() + ": provenance table does not match count");
    cb.keypatches.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
        Keypatch& kp = cb.keypatches[i];
        auto r = emb.matrix.row(i);
        kp.patch.embedding.assign(r.begin(), r.end());
        kp.patch.row = prov[i].at("row").get<std::size_t>();
        kp.patch.col = prov[i].at("col").get<std::size_t>();
        kp.source_image_id = prov[i].at("image_id").get<std::string>();
        kp.prov.pair_rank = prov[i].at("pair_rank").get<std::size_t>();
        kp.prov.selecting_token = prov[i].at("token").get<std::string>();
        kp.prov.score = prov[i].at("score").get<double>();
    }

    if (cb.patch_px > 0) {
        std::ifstream px(base.string() + ".pix", std::ios::binary);
        if (!px) throw std::runtime_error("cannot open: " + base.string() + ".pix");
        std::size_t block = cb.patch_px * cb.patch_px;
        for (Keypatch& kp : cb.keypatches) {
            std::vector<float> pix(block);
            for (std::size_t j = 0; j < block; ++j) pix[j] = get_f32_le(px, "pixel payload");
            kp.patch.pixels = std::move(pix);
        }
    }
    return cb;
}

// Retrieval results as a JSON document.
inline void write_retrieval(const std::filesystem::path& path, const RetrievalResult& result,
                            const std::vector<std::string>& tokens, std::size_t kappa3) {
    nlohmann::json per_token = nlohmann::json::array();
    for (std::size_t k = 0; k < result.per_token.size(); ++k) {
        nlohmann::json hits = nlohmann::json::array();
        for (const ScoredKeypatch& h : result.per_token[k])
            hits.push_back({{"keypatch", h.index}, {"score", h.score}});
        per_token.push_back({{"token", tokens[k]}, {"hits", hits}});
    }
    nlohmann::json j{{"kappa3", kappa3}, {"per_token", per_token},
                     {"flattened", result.flattened}};
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
    out << j.dump(2) << "\n";
}

}  // namespace kpa
