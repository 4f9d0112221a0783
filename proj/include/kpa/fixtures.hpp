#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "kpa/common.hpp"
#include "kpa/corpus.hpp"
#include "kpa/image.hpp"
#include "kpa/metrics.hpp"
#include "kpa/synth.hpp"
#include "kpa/vocab.hpp"

namespace kpa {

struct FixtureSizes {
    std::size_t pairs = 8;
    std::size_t grid_rows = 3;
    std::size_t grid_cols = 3;
    std::size_t dim = 16;
    std::size_t planted_per_pair = 3;
    std::size_t vq_size = 32;
    std::size_t patch_px = 4;
    double noise = 0.0;  // added to planted word embeddings per component
};

struct PlantRecord {
    std::string report_id;
    std::string image_id;
    std::string word;
    std::size_t row = 0;
    std::size_t col = 0;
};

struct PlantManifest {
    std::uint64_t seed = 0;
    FixtureSizes sizes;
    std::vector<std::string> anatomy;
    std::vector<std::string> pathology;
    std::vector<std::string> fillers;
    std::vector<PlantRecord> plants;
};

namespace detail {

inline const std::vector<std::string>& fixture_anatomy() {
    static const std::vector<std::string> v{"lobe", "heart", "mediastinal",
                                            "diaphragm", "pleura", "apex"};
    return v;
}

inline const std::vector<std::string>& fixture_pathology() {
    static const std::vector<std::string> v{"opacity", "effusion", "consolidation",
                                            "edema", "nodule", "pneumothorax"};
    return v;
}

inline const std::vector<std::string>& fixture_fillers() {
    static const std::vector<std::string> v{"presence", "observed", "regions", "suggestive",
                                            "noted", "seen", "appearance", "margins",
                                            "silhouette", "contour", "projection", "study"};
    return v;
}

// Unit-length anchor embedding shared by every plant of the same word.
inline std::vector<float> word_anchor(std::uint64_t seed, const std::string& word,
                                      std::size_t dim) {
    Rng rng(derive_seed(seed, fnv1a64("anchor:" + word)));
    std::vector<float> v(dim);
    double n = 0.0;
    for (float& x : v) {
        x = static_cast<float>(rng.gauss());
        n += static_cast<double>(x) * x;
    }
    n = std::sqrt(n);
    for (float& x : v) x = static_cast<float>(x / n);
    return v;
}

template <typename T>
inline void fixture_shuffle(std::vector<T>& v, Rng& rng) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
}

}  // namespace detail

// Deterministic pseudo-texture for metric tests: blurred noise rescaled into
// [0.2, 0.8] so the sharpness gate sees real local variance.
inline Image synthetic_texture(std::uint64_t seed, std::size_t rows, std::size_t cols) {
    if (rows == 0 || cols == 0) throw std::invalid_argument("synthetic_texture: empty shape");
    Rng rng(seed);
    std::vector<double> field(rows * cols);
    for (double& x : field) x = rng.gauss();
    std::vector<double> w = detail::gaussian_window(2.0, 4);
    field = detail::blur(field, rows, cols, w);
    double lo = field[0], hi = field[0];
    for (double x : field) {
        lo = std::min(lo, x);
        hi = std::max(hi, x);
    }
    Image img(rows, cols, 0.5f);
    if (hi > lo)
        for (std::size_t i = 0; i < field.size(); ++i)
            img.px[i] = static_cast<float>(0.2 + 0.6 * (field[i] - lo) / (hi - lo));
    return img;
}

// Generates a complete seeded fixture corpus under out_dir: reports composed
// from a toy vocabulary, token/patch embeddings with planted word-patch
// correspondences (planted token = patch anchor + noise), a lexicon, seed
// word sets, a word embedding table, a separated VQ codebook, and the plant
// manifest that records every correspondence for oracle checks.
inline PlantManifest make_fixtures(const std::filesystem::path& out_dir, std::uint64_t seed,
                                   const FixtureSizes& sizes = {}) {
    const auto& anatomy = detail::fixture_anatomy();
    const auto& pathology = detail::fixture_pathology();
    const auto& fillers = detail::fixture_fillers();
    std::vector<std::string> plantable = anatomy;
    plantable.insert(plantable.end(), pathology.begin(), pathology.end());

    const std::size_t cells = sizes.grid_rows * sizes.grid_cols;
    if (sizes.pairs == 0 || cells == 0 || sizes.dim == 0)
        throw std::invalid_argument("make_fixtures: pairs, grid, and dim must be nonzero");
    if (sizes.planted_per_pair == 0 || sizes.planted_per_pair > cells ||
        sizes.planted_per_pair > plantable.size())
        throw std::invalid_argument("make_fixtures: planted_per_pair must fit the grid and vocabulary");
    if (sizes.dim > sizes.patch_px * sizes.patch_px)
        throw std::invalid_argument("make_fixtures: dim must be <= patch_px^2 for VQ decoding");
    if (sizes.noise < 0.0) throw std::invalid_argument("make_fixtures: negative noise");

    std::filesystem::create_directories(out_dir / "tokens");
    std::filesystem::create_directories(out_dir / "patches");
    std::filesystem::create_directories(out_dir / "seeds");

    PlantManifest manifest;
    manifest.seed = seed;
    manifest.sizes = sizes;
    manifest.anatomy = anatomy;
    manifest.pathology = pathology;
    manifest.fillers = fillers;

    std::vector<Report> reports;
    for (std::size_t i = 0; i < sizes.pairs; ++i) {
        Rng rng(derive_seed(seed, i));
        std::string pad = std::to_string(i);
        while (pad.size() < 3) pad.insert(pad.begin(), '0');
        std::string id = "r" + pad;

        std::vector<std::size_t> word_pick = rng.sample_indices(plantable.size(),
                                                                sizes.planted_per_pair);
        std::vector<std::size_t> cell_pick = rng.sample_indices(cells, sizes.planted_per_pair);
        std::size_t filler_n = std::min<std::size_t>(3, fillers.size());
        std::vector<std::size_t> filler_pick = rng.sample_indices(fillers.size(), filler_n);

        std::vector<std::string> words;
        for (std::size_t w : word_pick) words.push_back(plantable[w]);
        for (std::size_t f : filler_pick) words.push_back(fillers[f]);
        detail::fixture_shuffle(words, rng);

        Report rep;
        rep.id = id;
        std::string findings;
        for (std::size_t k = 0; k < words.size(); ++k) {
            if (k) findings += ' ';
            findings += words[k];
        }
        findings[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(findings[0])));
        rep.findings = findings + ".";
        rep.impression = "Stable study.";
        reports.push_back(rep);

        // planted word -> cell assignment, in sampled order
        std::map<std::string, std::size_t> plant_cell;
        for (std::size_t k = 0; k < sizes.planted_per_pair; ++k) {
            const std::string& w = plantable[word_pick[k]];
            plant_cell[w] = cell_pick[k];
            manifest.plants.push_back({id, id, w, cell_pick[k] / sizes.grid_cols,
                                       cell_pick[k] % sizes.grid_cols});
        }

        TokenSeq seq;
        seq.report_id = id;
        seq.tokens = tokenize(rep.findings);
        seq.embeddings = Matrix(seq.tokens.size(), sizes.dim);
        std::set<std::string> plantable_set(plantable.begin(), plantable.end());
        for (std::size_t k = 0; k < seq.tokens.size(); ++k) {
            auto row = seq.embeddings.row(k);
            if (plantable_set.count(seq.tokens[k])) {
                std::vector<float> anchor = detail::word_anchor(seed, seq.tokens[k], sizes.dim);
                for (std::size_t j = 0; j < sizes.dim; ++j)
                    row[j] = anchor[j] + static_cast<float>(sizes.noise * rng.gauss());
            } else {
                for (std::size_t j = 0; j < sizes.dim; ++j)
                    row[j] = static_cast<float>(rng.gauss());
            }
        }
        write_token_seq(out_dir / "tokens" / (id + ".emb1"), seq);

        PatchGrid grid;
        grid.image_id = id;
        grid.rows = sizes.grid_rows;
        grid.cols = sizes.grid_cols;
        grid.patch_px = sizes.patch_px;
        std::map<std::size_t, std::string> cell_word;
        for (const auto& [w, cell] : plant_cell) cell_word[cell] = w;
        for (std::size_t cell = 0; cell < cells; ++cell) {
            Patch p;
            p.row = cell / sizes.grid_cols;
            p.col = cell % sizes.grid_cols;
            auto it = cell_word.find(cell);
            if (it != cell_word.end()) {
                p.embedding = detail::word_anchor(seed, it->second, sizes.dim);
            } else {
                p.embedding.resize(sizes.dim);
                for (float& x : p.embedding) x = static_cast<float>(rng.gauss());
            }
            if (sizes.patch_px > 0) {
                std::vector<float> pix(sizes.patch_px * sizes.patch_px);
                for (std::size_t j = 0; j < pix.size(); ++j)
                    pix[j] = std::min(1.0f, std::max(0.0f,
                             0.5f + 0.25f * p.embedding[j % sizes.dim]));
                p.pixels = std::move(pix);
            }
            grid.patches.push_back(std::move(p));
        }
        write_patch_grid(out_dir / "patches" / id, grid);
    }
    save_reports(out_dir / "reports.jsonl", reports);

    // word embedding table: anchors for plantable words, hash vectors for fillers
    {
        std::vector<std::string> ids = plantable;
        ids.insert(ids.end(), fillers.begin(), fillers.end());
        Matrix table(ids.size(), sizes.dim);
        for (std::size_t i = 0; i < ids.size(); ++i) {
            std::vector<float> v = i < plantable.size()
                                       ? detail::word_anchor(seed, ids[i], sizes.dim)
                                       : detail::word_anchor(seed, "filler:" + ids[i], sizes.dim);
            std::copy(v.begin(), v.end(), table.row(i).begin());
        }
        write_embeddings(out_dir / "words.emb1", ids, table);
    }

    // lexicon: plantable words are nouns, two fillers adjectives, the rest other
    {
        Lexicon lex;
        for (const std::string& w : plantable) lex.entries[w].insert(LexClass::noun);
        for (const std::string& w : fillers) lex.entries[w].insert(LexClass::other);
        lex.entries["suggestive"] = {LexClass::adjective};
        lex.entries["stable"] = {LexClass::adjective};
        save_lexicon(out_dir / "lexicon.tsv", lex);
    }

    save_word_set(out_dir / "seeds" / "anatomy.txt",
                  std::set<std::string>(anatomy.begin(), anatomy.end()));
    save_word_set(out_dir / "seeds" / "pathology.txt",
                  std::set<std::string>(pathology.begin(), pathology.end()));
    save_word_set(out_dir / "seeds" / "exclusions.txt", {"study", "projection"});

    Vocabularies vocab;
    vocab.anatomy = anatomy;
    vocab.pathology = pathology;
    vocab.exclusions = {"study", "projection"};
    save_vocabularies(out_dir / "vocab.json", vocab);

    // VQ codebook: uniform codes in [0,1]^dim, rejection-separated
    {
        if (sizes.vq_size < 2) throw std::invalid_argument("make_fixtures: vq_size must be >= 2");
        Rng rng(derive_seed(seed, fnv1a64("vq")));
        Matrix codes(sizes.vq_size, sizes.dim);
        std::size_t accepted = 0;
        std::size_t attempts = 0;
        std::vector<float> cand(sizes.dim);
        while (accepted < sizes.vq_size) {
            if (++attempts > 100000)
                throw std::runtime_error("make_fixtures: VQ separation rejection did not converge");
            for (float& x : cand) x = static_cast<float>(rng.unit());
            double min_d = std::numeric_limits<double>::infinity();
            for (std::size_t a = 0; a < accepted; ++a) {
                auto row = codes.row(a);
                double d = 0.0;
                for (std::size_t j = 0; j < sizes.dim; ++j) {
                    double diff = static_cast<double>(cand[j]) - row[j];
                    d += diff * diff;
                }
                min_d = std::min(min_d, std::sqrt(d));
            }
            if (accepted == 0 || min_d >= 0.8) {
                std::copy(cand.begin(), cand.end(), codes.row(accepted).begin());
                ++accepted;
            }
        }
        VqCodebook vq;
        vq.codes = std::move(codes);
        vq.patch_px = sizes.patch_px;
        vq.validate();
        write_vq(out_dir / "vq", vq);
    }

    // plant manifest
    {
        nlohmann::json plants = nlohmann::json::array();
        for (const PlantRecord& p : manifest.plants)
            plants.push_back({{"report_id", p.report_id},
                              {"image_id", p.image_id},
                              {"word", p.word},
                              {"row", p.row},
                              {"col", p.col}});
        nlohmann::json j{{"seed", seed},
                         {"pairs", sizes.pairs},
                         {"grid_rows", sizes.grid_rows},
                         {"grid_cols", sizes.grid_cols},
                         {"dim", sizes.dim},
                         {"planted_per_pair", sizes.planted_per_pair},
                         {"vq_size", sizes.vq_size},
                         {"patch_px", sizes.patch_px},
                         {"noise", sizes.noise},
                         {"anatomy", manifest.anatomy},
                         {"pathology", manifest.pathology},
                         {"fillers", manifest.fillers},
                         {"plants", plants}};
        std::ofstream out(out_dir / "plant.json");
        if (!out)
            throw std::runtime_error("cannot open for writing: " +
                                     (out_dir / "plant.json").string());
        out << j.dump(2) << "\n";
    }
    return manifest;
}

inline PlantManifest load_plant_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open: " + path.string());
    nlohmann::json j = nlohmann::json::parse(in);
    PlantManifest m;
    m.seed = j.at("seed").get<std::uint64_t>();
    m.sizes.pairs = j.at("pairs").get<std::size_t>();
    m.sizes.grid_rows = j.at("grid_rows").get<std::size_t>();
    m.sizes.grid_cols = j.at("grid_cols").get<std::size_t>();
    m.sizes.dim = j.at("dim").get<std::size_t>();
    m.sizes.planted_per_pair = j.at("planted_per_pair").get<std::size_t>();
    m.sizes.vq_size = j.at("vq_size").get<std::size_t>();
    m.sizes.patch_px = j.at("patch_px").get<std::size_t>();
    m.sizes.noise = j.at("noise").get<double>();
    m.anatomy = j.at("anatomy").get<std::vector<std::string>>();
    m.pathology = j.at("pathology").get<std::vector<std::string>>();
    m.fillers = j.at("fillers").get<std::vector<std::string>>();
    for (const auto& p : j.at("plants"))
        m.plants.push_back({p.at("report_id").get<std::string>(),
                            p.at("image_id").get<std::string>(),
                            p.at("word").get<std::string>(), p.at("row").get<std::size_t>(),
                            p.at("col").get<std::size_t>()});
    return m;
}

}  // namespace kpa
