#include <cstdint>
#include <filesystem>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "kpa/align.hpp"
#include "kpa/common.hpp"
#include "kpa/corpus.hpp"
#include "kpa/fixtures.hpp"
#include "kpa/http.hpp"
#include "kpa/image.hpp"
#include "kpa/metrics.hpp"
#include "kpa/prompt.hpp"
#include "kpa/synth.hpp"
#include "kpa/vocab.hpp"

namespace fs = std::filesystem;

namespace {

std::vector<fs::path> list_pgms(const fs::path& dir) {
    if (!fs::is_directory(dir))
        throw std::runtime_error("not a directory: " + dir.string());
    std::vector<fs::path> out;
    for (const auto& entry : fs::directory_iterator(dir))
        if (entry.is_regular_file() && entry.path().extension() == ".pgm")
            out.push_back(entry.path());
    std::sort(out.begin(), out.end());
    if (out.empty()) throw std::runtime_error("no .pgm images in " + dir.string());
    return out;
}

std::string padded(std::size_t i, std::size_t width) {
    std::string s = std::to_string(i);
    while (s.size() < width) s.insert(s.begin(), '0');
    return s;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"keypatch-aligned chest X-ray synthesis pipeline"};
    app.require_subcommand(1);

    std::uint64_t seed = 0;
    std::size_t threads = 1;
    std::string level = "info";
    CLI::Option* seed_opt = app.add_option("--seed", seed, "global RNG seed (default 0)");
    app.add_option("--threads", threads, "worker threads where supported");
    app.add_option("--log-level", level, "quiet|warn|info|debug")
        ->check(CLI::IsMember({"quiet", "warn", "info", "debug"}));

    // build-vocab
    std::string bv_reports, bv_lexicon, bv_anat, bv_path, bv_excl, bv_out, bv_freq;
    std::size_t bv_topk = 0;
    CLI::App* build_vocab = app.add_subcommand("build-vocab", "mine vocabularies from reports");
    build_vocab->add_option("--reports", bv_reports)->required();
    build_vocab->add_option("--lexicon", bv_lexicon)->required();
    build_vocab->add_option("--top-k", bv_topk)->required();
    build_vocab->add_option("--anatomy-seeds", bv_anat)->required();
    build_vocab->add_option("--pathology-seeds", bv_path)->required();
    build_vocab->add_option("--exclusions", bv_excl)->required();
    build_vocab->add_option("--out", bv_out)->required();
    build_vocab->add_option("--freq-out", bv_freq, "also write the frequency table");

    // gen-prompts
    std::string gp_vocab, gp_client = "fallback", gp_out;
    std::size_t gp_n = 0, gp_m = 0, gp_count = 0, gp_retries = 3;
    CLI::App* gen_prompts = app.add_subcommand("gen-prompts", "generate findings prompts");
    gen_prompts->add_option("--vocab", gp_vocab)->required();
    gen_prompts->add_option("--n", gp_n)->required();
    gen_prompts->add_option("--m", gp_m)->required();
    gen_prompts->add_option("--count", gp_count)->required();
    gen_prompts->add_option("--client", gp_client)->check(CLI::IsMember({"http", "fallback"}));
    gen_prompts->add_option("--retries", gp_retries, "parse retries per prompt");
    gen_prompts->add_option("--out", gp_out)->required();

    // build-codebook
    std::string bc_corpus, bc_out;
    std::size_t bc_k1 = 64, bc_k2 = 16;
    CLI::App* build_codebook = app.add_subcommand("build-codebook", "mine the visual codebook");
    build_codebook->add_option("--corpus", bc_corpus)->required();
    build_codebook->add_option("--kappa1", bc_k1);
    build_codebook->add_option("--kappa2", bc_k2);
    build_codebook->add_option("--out", bc_out, "output base path (.json/.emb1)")->required();

    // retrieve
    std::string rt_codebook, rt_emb, rt_out;
    std::size_t rt_k3 = 4;
    CLI::App* retrieve = app.add_subcommand("retrieve", "top keypatches per report token");
    retrieve->add_option("--codebook", rt_codebook, "codebook base path")->required();
    retrieve->add_option("--report-embeddings", rt_emb, "token sequence EMB1 file")->required();
    retrieve->add_option("--kappa3", rt_k3);
    retrieve->add_option("--out", rt_out)->required();

    // synthesize
    std::string sy_prompts, sy_codebook, sy_vq, sy_client = "stub", sy_out, sy_words;
    std::size_t sy_rows = 16, sy_cols = 16;
    CLI::App* synth = app.add_subcommand("synthesize", "prompts to images via image tokens");
    synth->add_option("--prompts", sy_prompts)->required();
    synth->add_option("--codebook", sy_codebook, "codebook base path")->required();
    synth->add_option("--vq", sy_vq, "VQ codebook base path")->required();
    synth->add_option("--client", sy_client)->check(CLI::IsMember({"http", "stub"}));
    synth->add_option("--out-dir", sy_out)->required();
    synth->add_option("--words", sy_words, "word embedding table (EMB1); hash encoder otherwise");
    synth->add_option("--rows", sy_rows, "token grid rows");
    synth->add_option("--cols", sy_cols, "token grid cols");

    // eval
    CLI::App* eval = app.add_subcommand("eval", "quality metrics");
    eval->require_subcommand(1);
    std::string ef_real, ef_synth;
    CLI::App* eval_fid = eval->add_subcommand("fid", "Frechet distance between feature sets");
    eval_fid->add_option("--real", ef_real)->required();
    eval_fid->add_option("--synth", ef_synth)->required();
    std::string en_model, en_images;
    CLI::App* eval_niqe = eval->add_subcommand("niqe", "score images against a NIQE model");
    eval_niqe->add_option("--model", en_model)->required();
    eval_niqe->add_option("--images", en_images)->required();
    std::string nf_pristine, nf_out;
    std::size_t nf_patch = 96;
    CLI::App* eval_niqe_fit = eval->add_subcommand("niqe-fit", "fit a NIQE model");
    eval_niqe_fit->add_option("--pristine", nf_pristine)->required();
    eval_niqe_fit->add_option("--out", nf_out)->required();
    eval_niqe_fit->add_option("--patch-size", nf_patch);

    // make-fixtures
    std::string mf_out;
    kpa::FixtureSizes mf_sizes;
    std::size_t mf_textures = 0;
    CLI::App* make_fx = app.add_subcommand("make-fixtures", "generate a synthetic paired corpus");

    // let global flags (--seed etc.) appear after the subcommand name
    for (CLI::App* sub : {build_vocab, gen_prompts, build_codebook, retrieve, synth, eval,
                          eval_fid, eval_niqe, eval_niqe_fit, make_fx})
        sub->fallthrough();
    make_fx->add_option("--out", mf_out)->required();
    make_fx->add_option("--pairs", mf_sizes.pairs);
    make_fx->add_option("--grid-rows", mf_sizes.grid_rows);
    make_fx->add_option("--grid-cols", mf_sizes.grid_cols);
    make_fx->add_option("--dim", mf_sizes.dim);
    make_fx->add_option("--planted", mf_sizes.planted_per_pair);
    make_fx->add_option("--vq-size", mf_sizes.vq_size);
    make_fx->add_option("--patch-px", mf_sizes.patch_px);
    make_fx->add_option("--noise", mf_sizes.noise);
    make_fx->add_option("--textures", mf_textures, "also write N pristine textures (192x192)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    if (level == "quiet") kpa::log_level() = kpa::LogLevel::quiet;
    else if (level == "warn") kpa::log_level() = kpa::LogLevel::warn;
    else if (level == "debug") kpa::log_level() = kpa::LogLevel::debug;
    else kpa::log_level() = kpa::LogLevel::info;
    if (seed_opt->count() == 0) kpa::log_info("seed not given, defaulting to 0");

    try {
        if (*build_vocab) {
            std::vector<kpa::Report> reports = kpa::load_reports(bv_reports);
            kpa::Lexicon lexicon = kpa::load_lexicon(bv_lexicon);
            kpa::FrequencyTable table = kpa::count_frequencies(reports, lexicon);
            std::vector<std::string> top = kpa::select_top_k(table, bv_topk);
            std::vector<std::string> unassigned;
            kpa::Vocabularies vocab =
                kpa::categorize(top, kpa::load_word_set(bv_anat), kpa::load_word_set(bv_path),
                                kpa::load_word_set(bv_excl), &unassigned);
            for (const std::string& w : unassigned)
                kpa::log_info("build-vocab: '" + w + "' not in any seed set, dropped");
            kpa::save_vocabularies(bv_out, vocab);
            if (!bv_freq.empty()) kpa::save_frequency_table(bv_freq, table);
            kpa::log_info("build-vocab: " + std::to_string(vocab.anatomy.size()) + " anatomy, " +
                          std::to_string(vocab.pathology.size()) + " pathology words");
        } else if (*gen_prompts) {
            kpa::Vocabularies vocab = kpa::load_vocabularies(gp_vocab);
            std::unique_ptr<kpa::TextClient> client;
            if (gp_client == "http")
                client = std::make_unique<kpa::HttpTextClient>();
            else
                client = std::make_unique<kpa::FallbackTextClient>(seed);
            kpa::GenerateOptions opts;
            opts.retries = gp_retries;
            std::vector<kpa::GeneratedPrompt> prompts;
            for (std::size_t i = 0; i < gp_count; ++i) {
                kpa::PromptSpec spec =
                    kpa::sample_words(vocab, gp_n, gp_m, kpa::derive_seed(seed, i));
                prompts.push_back(kpa::generate_prompt(spec, vocab, *client, opts));
            }
            kpa::save_prompts(gp_out, prompts);
            kpa::log_info("gen-prompts: wrote " + std::to_string(prompts.size()) + " prompts");
        } else if (*build_codebook) {
            std::vector<kpa::PairedSample> corpus = kpa::load_corpus(bc_corpus);
            kpa::AlignParams params;
            params.kappa1 = bc_k1;
            params.kappa2 = bc_k2;
            kpa::VisualCodebook cb = kpa::build_codebook(corpus, params, threads);
            kpa::write_codebook(bc_out, cb);
            kpa::log_info("build-codebook: " + std::to_string(cb.size()) + " keypatches");
        } else if (*retrieve) {
            kpa::VisualCodebook cb = kpa::read_codebook(rt_codebook);
            std::string id = fs::path(rt_emb).stem().string();
            kpa::TokenSeq seq = kpa::read_token_seq(rt_emb, id);
            kpa::SimilarityMatrix sw = kpa::compute_sw(cb, seq);
            kpa::RetrievalResult result = kpa::extract_keypatches(sw, rt_k3);
            kpa::write_retrieval(rt_out, result, seq.tokens, rt_k3);
            kpa::log_info("retrieve: " + std::to_string(result.flattened.size()) +
                          " distinct keypatches");
        } else if (*synth) {
            std::vector<kpa::GeneratedPrompt> prompts = kpa::load_prompts(sy_prompts);
            kpa::VisualCodebook cb = kpa::read_codebook(sy_codebook);
            kpa::VqCodebook vq = kpa::read_vq(sy_vq);
            std::unique_ptr<kpa::TextEncoder> encoder;
            if (!sy_words.empty())
                encoder = std::make_unique<kpa::EmbeddingTableEncoder>(sy_words, seed);
            else
                encoder = std::make_unique<kpa::HashTextEncoder>(cb.dim, seed);
            std::unique_ptr<kpa::ImageTokenClient> client;
            if (sy_client == "http")
                client = std::make_unique<kpa::HttpImageTokenClient>();
            else
                client = std::make_unique<kpa::StubImageTokenClient>(seed, vq.vocab_size());
            kpa::SynthesisParams params;
            params.rows = sy_rows;
            params.cols = sy_cols;
            fs::create_directories(sy_out);
            for (std::size_t i = 0; i < prompts.size(); ++i) {
                kpa::SynthesisResult result =
                    kpa::synthesize(prompts[i], cb, vq, *encoder, *client, params);
                std::string stem = "img_" + padded(i, 3);
                kpa::write_pgm(fs::path(sy_out) / (stem + ".pgm"), result.image);
                std::ofstream prov(fs::path(sy_out) / (stem + ".json"));
                if (!prov) throw std::runtime_error("cannot write provenance for " + stem);
                prov << result.provenance.to_json().dump(2) << "\n";
            }
            kpa::log_info("synthesize: wrote " + std::to_string(prompts.size()) + " images to " +
                          sy_out);
        } else if (*eval_fid) {
            kpa::EmbeddingFile real = kpa::read_embeddings(ef_real);
            kpa::EmbeddingFile synthetic = kpa::read_embeddings(ef_synth);
            kpa::GaussianStats a = kpa::fit_gaussian(kpa::to_eigen(real.matrix));
            kpa::GaussianStats b = kpa::fit_gaussian(kpa::to_eigen(synthetic.matrix));
            double d = kpa::frechet_distance(a, b);
            std::cout << "metric\tn_real\tn_synth\tvalue\n";
            std::cout << "fid\t" << a.n << "\t" << b.n << "\t" << d << "\n";
        } else if (*eval_niqe) {
            kpa::NiqeModel model = kpa::load_niqe_model(en_model);
            std::vector<fs::path> files = list_pgms(en_images);
            std::cout << "metric\timage\tvalue\n";
            double sum = 0.0;
            for (const fs::path& f : files) {
                double s = kpa::niqe_score(kpa::read_pgm(f), model);
                sum += s;
                std::cout << "niqe\t" << f.filename().string() << "\t" << s << "\n";
            }
            std::cout << "niqe_mean\t-\t" << sum / static_cast<double>(files.size()) << "\n";
        } else if (*eval_niqe_fit) {
            std::vector<fs::path> files = list_pgms(nf_pristine);
            std::vector<kpa::Image> images;
            images.reserve(files.size());
            for (const fs::path& f : files) images.push_back(kpa::read_pgm(f));
            kpa::NiqeConfig cfg;
            cfg.patch_size = nf_patch;
            kpa::NiqeModel model = kpa::fit_niqe_model(images, cfg, threads);
            kpa::save_niqe_model(nf_out, model);
            kpa::log_info("niqe-fit: model over " + std::to_string(images.size()) + " images");
        } else if (*make_fx) {
            kpa::PlantManifest manifest = kpa::make_fixtures(mf_out, seed, mf_sizes);
            if (mf_textures > 0) {
                fs::create_directories(fs::path(mf_out) / "textures");
                for (std::size_t i = 0; i < mf_textures; ++i)
                    kpa::write_pgm(fs::path(mf_out) / "textures" / ("tex_" + padded(i, 3) + ".pgm"),
                                   kpa::synthetic_texture(kpa::derive_seed(seed, 1000 + i), 192,
                                                          192));
            }
            kpa::log_info("make-fixtures: " + std::to_string(manifest.plants.size()) +
                          " planted correspondences in " + mf_out);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
