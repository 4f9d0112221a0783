#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "kpa/align.hpp"
#include "kpa/common.hpp"
#include "kpa/corpus.hpp"
#include "kpa/image.hpp"
#include "kpa/prompt.hpp"
#include "kpa/vocab.hpp"

namespace kpa {

// ---------------------------------------------------------------------------
// VQ codebook (stub stand-in for a frozen VQ-GAN)
// ---------------------------------------------------------------------------

struct VqCodebook {
    Matrix codes;            // V x d_q
    std::size_t patch_px = 0;  // decoded pixel block side p

    std::size_t vocab_size() const { return codes.rows; }
    std::size_t code_dim() const { return codes.cols; }

    void validate() const {
        if (codes.rows < 2) throw std::invalid_argument("vq codebook: need at least 2 codes");
        if (patch_px == 0) throw std::invalid_argument("vq codebook: patch_px must be >= 1");
        if (!all_finite(codes.data)) throw std::invalid_argument("vq codebook: non-finite code");
        for (std::size_t a = 0; a < codes.rows; ++a)
            for (std::size_t b = a + 1; b < codes.rows; ++b) {
                auto ra = codes.row(a), rb = codes.row(b);
                if (std::equal(ra.begin(), ra.end(), rb.begin()))
                    throw std::invalid_argument("vq codebook: codes " + std::to_string(a) +
                                                " and " + std::to_string(b) + " are identical");
            }
    }
};

struct TokenImage {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<std::size_t> grid;  // row-major code indices

    std::size_t at(std::size_t r, std::size_t c) const { return grid[r * cols + c]; }
};

struct SynthesisRequest {
    std::string instruction;
    std::string report;  // generated findings, non-empty
    std::vector<std::size_t> context_tokens;

    // space-separated <img_k> markers, e.g. "<img_5> <img_2>"
    std::string context_string() const {
        std::string out;
        for (std::size_t i = 0; i < context_tokens.size(); ++i) {
            if (i) out += ' ';
            out += "<img_" + std::to_string(context_tokens[i]) + ">";
        }
        return out;
    }
};

// Optional linear map from alignment-embedding dim to VQ code dim.
struct Projection {
    Matrix weights;  // d_q x d

    std::vector<float> apply(std::span<const float> v) const {
        if (v.size() != weights.cols)
            throw std::invalid_argument("projection: input dim " + std::to_string(v.size()) +
                                        " does not match " + std::to_string(weights.cols));
        std::vector<float> out(weights.rows);
        for (std::size_t r = 0; r < weights.rows; ++r) {
            double acc = 0.0;
            auto w = weights.row(r);
            for (std::size_t c = 0; c < v.size(); ++c) acc += static_cast<double>(w[c]) * v[c];
            out[r] = static_cast<float>(acc);
        }
        return out;
    }
};

// ---------------------------------------------------------------------------
// Quantization and decoding
// ---------------------------------------------------------------------------

inline std::size_t quantize(std::span<const float> embedding, const VqCodebook& vq) {
    if (embedding.size() != vq.code_dim())
        throw std::invalid_argument("quantize: embedding dim " + std::to_string(embedding.size()) +
                                    " does not match code dim " + std::to_string(vq.code_dim()));
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < vq.vocab_size(); ++i) {
        auto code = vq.codes.row(i);
        double d = 0.0;
        for (std::size_t j = 0; j < code.size(); ++j) {
            double diff = static_cast<double>(embedding[j]) - code[j];
            d += diff * diff;
        }
        if (d < best_d) {  // strict: ties keep the smallest index
            best_d = d;
            best = i;
        }
    }
    return best;
}

// Quantizes every flattened keypatch of a retrieval result, in order.
inline std::vector<std::size_t> encode_keypatches(const RetrievalResult& result,
                                                  const VisualCodebook& codebook,
                                                  const VqCodebook& vq,
                                                  const Projection* proj = nullptr) {
    if (result.flattened.empty())
        throw std::invalid_argument("encode_keypatches: empty retrieval result");
    if (proj == nullptr && codebook.dim != vq.code_dim())
        throw std::invalid_argument("encode_keypatches: keypatch dim " +
                                    std::to_string(codebook.dim) + " does not match code dim " +
                                    std::to_string(vq.code_dim()) +
                                    " and no projection was configured");
    std::vector<std::size_t> out;
    out.reserve(result.flattened.size());
    for (std::size_t id : result.flattened) {
        if (id >= codebook.size())
            throw std::out_of_range("encode_keypatches: keypatch index " + std::to_string(id) +
                                    " outside codebook of size " + std::to_string(codebook.size()));
        const std::vector<float>& emb = codebook.keypatches[id].patch.embedding;
        if (proj) {
            out.push_back(quantize(proj->apply(emb), vq));
        } else {
            out.push_back(quantize(emb, vq));
        }
    }
    return out;
}

inline constexpr const char* kSynthesisTemplateId = "synthesize-v1";

inline SynthesisRequest assemble_request(const GeneratedPrompt& prompt,
                                         const std::vector<std::size_t>& tokens,
                                         const std::string& template_id = kSynthesisTemplateId) {
    if (template_id != kSynthesisTemplateId)
        throw std::invalid_argument("assemble_request: unknown template id '" + template_id + "'");
    if (prompt.findings.empty())
        throw std::invalid_argument("assemble_request: prompt has empty findings");
    SynthesisRequest req;
    req.instruction =
        "Predict the image tokens of a chest X-ray matching the report below. "
        "Use the keypatch image tokens as visual context.";
    req.report = prompt.findings;
    req.context_tokens = tokens;
    return req;
}

// Decodes each cell to a p x p pixel block by cycling the code vector over the
// block, clamped to [0,1]. block_feature inverts this by averaging each cycle
// class, so decode -> block_feature -> quantize recovers the index whenever
// codes are separated and lie inside [0,1].
inline Image decode_tokens(const TokenImage& tokens, const VqCodebook& vq) {
    if (tokens.rows == 0 || tokens.cols == 0 || tokens.grid.size() != tokens.rows * tokens.cols)
        throw std::invalid_argument("decode_tokens: malformed token grid");
    const std::size_t p = vq.patch_px;
    const std::size_t d = vq.code_dim();
    if (d > p * p)
        throw std::invalid_argument("decode_tokens: code dim " + std::to_string(d) +
                                    " exceeds block capacity " + std::to_string(p * p));
    Image img(tokens.rows * p, tokens.cols * p);
    for (std::size_t r = 0; r < tokens.rows; ++r)
        for (std::size_t c = 0; c < tokens.cols; ++c) {
            std::size_t idx = tokens.at(r, c);
            if (idx >= vq.vocab_size())
                throw std::out_of_range("decode_tokens: index " + std::to_string(idx) +
                                        " out of range for vocab size " +
                                        std::to_string(vq.vocab_size()));
            auto code = vq.codes.row(idx);
            for (std::size_t j = 0; j < p * p; ++j) {
                float v = std::min(1.0f, std::max(0.0f, code[j % d]));
                img.at(r * p + j / p, c * p + j % p) = v;
            }
        }
    return img;
}

// Mean of each cycle class of a p x p block; inverse of the decode layout.
inline std::vector<float> block_feature(const Image& img, std::size_t r0, std::size_t c0,
                                        std::size_t p, std::size_t code_dim) {
    if (code_dim == 0 || code_dim > p * p)
        throw std::invalid_argument("block_feature: invalid code dim");
    std::vector<double> acc(code_dim, 0.0);
    std::vector<std::size_t> n(code_dim, 0);
    for (std::size_t j = 0; j < p * p; ++j) {
        acc[j % code_dim] += img.at(r0 + j / p, c0 + j % p);
        ++n[j % code_dim];
    }
    std::vector<float> out(code_dim);
    for (std::size_t j = 0; j < code_dim; ++j) out[j] = static_cast<float>(acc[j] / n[j]);
    return out;
}

// ---------------------------------------------------------------------------
// Token prediction clients
// ---------------------------------------------------------------------------

class ImageTokenClient {
  public:
    virtual ~ImageTokenClient() = default;
    // Raw prediction; values are validated by predict_tokens.
    virtual std::vector<long long> predict(const SynthesisRequest& request, std::size_t rows,
                                           std::size_t cols) = 0;
};

// Deterministic offline stand-in: tiles the context tokens over the grid and
// replaces roughly a quarter of the cells with jitter drawn from a stream
// seeded by (seed, request content), so equal requests give equal grids.
class StubImageTokenClient : public ImageTokenClient {
  public:
    StubImageTokenClient(std::uint64_t seed, std::size_t vocab_size)
        : seed_(seed), vocab_(vocab_size) {
        if (vocab_ == 0) throw std::invalid_argument("stub client: vocab size must be >= 1");
    }

    std::vector<long long> predict(const SynthesisRequest& request, std::size_t rows,
                                   std::size_t cols) override {
        std::string canon = request.instruction;
        canon += '\x1f';
        canon += request.report;
        canon += '\x1f';
        canon += request.context_string();
        canon += '\x1f';
        canon += std::to_string(rows) + "x" + std::to_string(cols);
        Rng rng(derive_seed(seed_, fnv1a64(canon)));
        std::vector<long long> out(rows * cols);
        for (std::size_t i = 0; i < out.size(); ++i) {
            bool jitter = rng.below(4) == 0;
            if (jitter || request.context_tokens.empty())
                out[i] = static_cast<long long>(rng.below(vocab_));
            else
                out[i] = static_cast<long long>(
                    request.context_tokens[i % request.context_tokens.size()]);
        }
        return out;
    }

  private:
    std::uint64_t seed_;
    std::size_t vocab_;
};

namespace detail {

inline std::string payload_string(const std::vector<long long>& raw) {
    nlohmann::json j = raw;
    return j.dump();
}

}  // namespace detail

inline TokenImage predict_tokens(const SynthesisRequest& request, ImageTokenClient& client,
                                 std::size_t rows, std::size_t cols, std::size_t vocab_size) {
    if (rows == 0 || cols == 0)
        throw std::invalid_argument("predict_tokens: target shape must be nonzero");
    if (request.report.empty())
        throw std::invalid_argument("predict_tokens: request has empty report");
    std::vector<long long> raw = client.predict(request, rows, cols);
    if (raw.size() != rows * cols)
        throw std::runtime_error("predict_tokens: expected " + std::to_string(rows * cols) +
                                 " tokens, client returned " + std::to_string(raw.size()) +
                                 "; payload " + detail::payload_string(raw));
    TokenImage out;
    out.rows = rows;
    out.cols = cols;
    out.grid.resize(raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i) {
        if (raw[i] < 0 || static_cast<std::size_t>(raw[i]) >= vocab_size)
            throw std::runtime_error("predict_tokens: token " + std::to_string(raw[i]) +
                                     " at cell " + std::to_string(i) +
                                     " outside [0," + std::to_string(vocab_size) +
                                     "); payload " + detail::payload_string(raw));
        out.grid[i] = static_cast<std::size_t>(raw[i]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Text-encoder providers (word -> embedding)
// ---------------------------------------------------------------------------

class TextEncoder {
  public:
    virtual ~TextEncoder() = default;
    virtual std::size_t dim() const = 0;
    virtual std::vector<float> embed(const std::string& word) = 0;
};

// Deterministic hash embedding: a unit vector drawn from an rng seeded by the
// word's content hash. No semantics, but stable across runs and platforms.
class HashTextEncoder : public TextEncoder {
  public:
    explicit HashTextEncoder(std::size_t dim, std::uint64_t seed = 0) : dim_(dim), seed_(seed) {
        if (dim_ == 0) throw std::invalid_argument("hash encoder: dim must be >= 1");
    }

    std::size_t dim() const override { return dim_; }

    std::vector<float> embed(const std::string& word) override {
        Rng rng(derive_seed(seed_, fnv1a64(word)));
        std::vector<float> v(dim_);
        double n = 0.0;
        for (float& x : v) {
            x = static_cast<float>(rng.gauss());
            n += static_cast<double>(x) * x;
        }
        n = std::sqrt(n);
        if (n == 0.0) v[0] = 1.0f;  // unreachable in practice, keeps the unit-norm contract
        else
            for (float& x : v) x = static_cast<float>(x / n);
        return v;
    }

  private:
    std::size_t dim_;
    std::uint64_t seed_;
};

// Table lookup over an embedding file (ids are words); unknown words fall back
// to the hash encoder so synthesis never stalls on vocabulary drift.
class EmbeddingTableEncoder : public TextEncoder {
  public:
    explicit EmbeddingTableEncoder(const std::filesystem::path& emb1_path, std::uint64_t seed = 0)
        : table_(read_embeddings(emb1_path)), fallback_(table_.matrix.cols, seed) {
        for (std::size_t i = 0; i < table_.ids.size(); ++i) index_[table_.ids[i]] = i;
    }

    std::size_t dim() const override { return table_.matrix.cols; }

    std::vector<float> embed(const std::string& word) override {
        auto it = index_.find(word);
        if (it == index_.end()) {
            log_info("text encoder: no table entry for '" + word + "', using hash fallback");
            return fallback_.embed(word);
        }
        auto r = table_.matrix.row(it->second);
        return {r.begin(), r.end()};
    }

  private:
    EmbeddingFile table_;
    HashTextEncoder fallback_;
    std::map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// End-to-end synthesis
// ---------------------------------------------------------------------------

struct SynthesisParams {
    std::size_t rows = 16;
    std::size_t cols = 16;
    std::string template_id = kSynthesisTemplateId;
    std::size_t kappa3 = 0;  // 0: use the codebook's stored kappa3
};

struct SynthesisProvenance {
    std::vector<std::string> words;
    RetrievalResult retrieval;
    std::vector<std::size_t> context_tokens;
    TokenImage token_image;

    nlohmann::json to_json() const {
        nlohmann::json per_token = nlohmann::json::array();
        for (std::size_t k = 0; k < retrieval.per_token.size(); ++k) {
            nlohmann::json hits = nlohmann::json::array();
            for (const ScoredKeypatch& h : retrieval.per_token[k])
                hits.push_back({{"keypatch", h.index}, {"score", h.score}});
            per_token.push_back({{"word", words[k]}, {"hits", hits}});
        }
        return nlohmann::json{{"words", words},
                              {"per_token", per_token},
                              {"flattened", retrieval.flattened},
                              {"context_tokens", context_tokens},
                              {"token_grid",
                               {{"rows", token_image.rows},
                                {"cols", token_image.cols},
                                {"indices", token_image.grid}}}};
    }
};

struct SynthesisResult {
    Image image;
    SynthesisProvenance provenance;
};

namespace detail {

template <typename F>
auto synth_stage(const char* stage, F&& f) {
    try {
        return f();
    } catch (const std::exception& e) {
        throw std::runtime_error(std::string("synthesize [") + stage + "]: " + e.what());
    }
}

}  // namespace detail

inline SynthesisResult synthesize(const GeneratedPrompt& prompt, const VisualCodebook& codebook,
                                  const VqCodebook& vq, TextEncoder& encoder,
                                  ImageTokenClient& client, const SynthesisParams& params,
                                  const Projection* proj = nullptr) {
    vq.validate();
    SynthesisResult result;

    TokenSeq seq = detail::synth_stage("embed", [&] {
        std::vector<std::string> words = tokenize(prompt.findings);
        if (words.empty()) throw std::invalid_argument("findings produced no tokens");
        if (encoder.dim() != codebook.dim)
            throw std::invalid_argument("encoder dim " + std::to_string(encoder.dim()) +
                                        " does not match codebook dim " +
                                        std::to_string(codebook.dim));
        TokenSeq s;
        s.report_id = "generated";
        s.tokens = words;
        s.embeddings = Matrix(words.size(), encoder.dim());
        for (std::size_t k = 0; k < words.size(); ++k) {
            std::vector<float> e = encoder.embed(words[k]);
            std::copy(e.begin(), e.end(), s.embeddings.row(k).begin());
        }
        return s;
    });
    result.provenance.words = seq.tokens;

    SimilarityMatrix sw =
        detail::synth_stage("similarity", [&] { return compute_sw(codebook, seq); });

    std::size_t kappa3 = params.kappa3 ? params.kappa3 : codebook.params.kappa3;
    result.provenance.retrieval =
        detail::synth_stage("retrieve", [&] { return extract_keypatches(sw, kappa3); });

    result.provenance.context_tokens = detail::synth_stage("encode", [&] {
        return encode_keypatches(result.provenance.retrieval, codebook, vq, proj);
    });

    SynthesisRequest request = detail::synth_stage("assemble", [&] {
        return assemble_request(prompt, result.provenance.context_tokens, params.template_id);
    });

    result.provenance.token_image = detail::synth_stage("predict", [&] {
        return predict_tokens(request, client, params.rows, params.cols, vq.vocab_size());
    });

    result.image = detail::synth_stage(
        "decode", [&] { return decode_tokens(result.provenance.token_image, vq); });
    return result;
}

// ---------------------------------------------------------------------------
// VQ codebook files: <base>.json + <base>.emb1
// ---------------------------------------------------------------------------

inline void write_vq(const std::filesystem::path& base, const VqCodebook& vq) {
    nlohmann::json header{{"vocab_size", vq.vocab_size()},
                          {"dim", vq.code_dim()},
                          {"patch_px", vq.patch_px}};
    std::ofstream hj(base.string() + ".json");
    if (!hj) throw std::runtime_error("cannot open for writing: " + base.string() + ".json");
    hj << header.dump(2) << "\n";
    std::vector<std::string> ids(vq.vocab_size());
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = std::to_string(i);
    write_embeddings(base.string() + ".emb1", ids, vq.codes);
}

inline VqCodebook read_vq(const std::filesystem::path& base) {
    std::ifstream hj(base.string() + ".json");
    if (!hj) throw std::runtime_error("cannot open: " + base.string() + ".json");
    nlohmann::json header = nlohmann::json::parse(hj);
    VqCodebook vq;
    vq.patch_px = header.at("patch_px").get<std::size_t>();
    EmbeddingFile emb = read_embeddings(base.string() + ".emb1");
    if (emb.matrix.rows != header.at("vocab_size").get<std::size_t>() ||
        emb.matrix.cols != header.at("dim").get<std::size_t>())
        throw std::runtime_error(base.string() + ": embeddings do not match header");
    vq.codes = std::move(emb.matrix);
    vq.validate();
    return vq;
}

}  // namespace kpa
