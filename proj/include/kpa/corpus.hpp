#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "kpa/common.hpp"

namespace kpa {

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

struct Report {
    std::string id;
    std::string findings;
    std::string impression;
};

struct TokenSeq {
    std::string report_id;
    std::vector<std::string> tokens;
    Matrix embeddings;  // tokens.size() x d

    std::size_t dim() const { return embeddings.cols; }
};

struct Patch {
    std::size_t row = 0;
    std::size_t col = 0;
    std::vector<float> embedding;
    std::optional<std::vector<float>> pixels;  // p*p grayscale in [0,1]
};

struct PatchGrid {
    std::string image_id;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::size_t patch_px = 0;  // 0 when patches carry no pixels
    std::vector<Patch> patches;  // linear index r*cols+c

    std::size_t dim() const { return patches.empty() ? 0 : patches.front().embedding.size(); }

    void validate() const {
        if (patches.size() != rows * cols)
            throw std::runtime_error("patch grid " + image_id + ": patch count " +
                                     std::to_string(patches.size()) + " != rows*cols");
        for (std::size_t i = 0; i < patches.size(); ++i) {
            const Patch& p = patches[i];
            if (p.row * cols + p.col != i)
                throw std::runtime_error("patch grid " + image_id + ": patch index mismatch at " +
                                         std::to_string(i));
            if (!all_finite(p.embedding))
                throw std::runtime_error("patch grid " + image_id + ": non-finite embedding at " +
                                         std::to_string(i));
            if (p.embedding.size() != patches.front().embedding.size())
                throw std::runtime_error("patch grid " + image_id + ": ragged embedding dims");
            if (p.pixels) {
                if (p.pixels->size() != patch_px * patch_px)
                    throw std::runtime_error("patch grid " + image_id + ": pixel block size mismatch");
                for (float v : *p.pixels)
                    if (!(v >= 0.0f && v <= 1.0f))
                        throw std::runtime_error("patch grid " + image_id +
                                                 ": pixel value outside [0,1]");
            }
        }
    }
};

struct PairedSample {
    Report report;
    TokenSeq token_seq;
    PatchGrid patch_grid;

    void validate() const {
        if (token_seq.report_id != report.id)
            throw std::runtime_error("paired sample " + report.id + ": token_seq.report_id is " +
                                     token_seq.report_id);
        if (token_seq.dim() != patch_grid.dim())
            throw std::runtime_error("paired sample " + report.id + ": embedding dim mismatch (" +
                                     std::to_string(token_seq.dim()) + " vs " +
                                     std::to_string(patch_grid.dim()) + ")");
    }
};

// ---------------------------------------------------------------------------
// Reports file: one JSON object per line, fields id / findings / impression.
// Output order always equals file order.
// ---------------------------------------------------------------------------

inline std::vector<Report> load_reports(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open reports file: " + path.string());

    std::vector<Report> out;
    std::set<std::string> seen;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw std::runtime_error(path.string() + ":" + std::to_string(line_no) +
                                     ": malformed record: " + e.what());
        }
        Report r;
        if (!j.is_object() || !j.contains("id") || !j["id"].is_string())
            throw std::runtime_error(path.string() + ":" + std::to_string(line_no) +
                                     ": malformed record: missing string field 'id'");
        r.id = j["id"].get<std::string>();
        r.findings = j.value("findings", std::string());
        r.impression = j.value("impression", std::string());
        if (r.id.empty())
            throw std::runtime_error(path.string() + ":" + std::to_string(line_no) +
                                     ": malformed record: empty id");
        if (r.findings.empty() && r.impression.empty())
            throw std::runtime_error(path.string() + ":" + std::to_string(line_no) +
                                     ": malformed record: both findings and impression empty");
        if (!seen.insert(r.id).second)
            throw std::runtime_error(path.string() + ":" + std::to_string(line_no) +
                                     ": duplicate report id '" + r.id + "'");
        out.push_back(std::move(r));
    }
    return out;
}

inline void save_reports(const std::filesystem::path& path, const std::vector<Report>& reports) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open reports file for writing: " + path.string());
    for (const Report& r : reports) {
        nlohmann::json j{{"id", r.id}, {"findings", r.findings}, {"impression", r.impression}};
        out << j.dump() << "\n";
    }
}

// ---------------------------------------------------------------------------
// EMB1: binary embedding container.
//   magic "EMB1" | u32 version=1 | u32 count | u32 dim |
//   count x (u16 id length + id bytes) | count*dim f32, row-major.
// All integers and floats little-endian. Round trips are byte-exact.
// ---------------------------------------------------------------------------

inline void write_embeddings(const std::filesystem::path& path,
                             const std::vector<std::string>& ids, const Matrix& matrix) {
    if (ids.size() != matrix.rows)
        throw std::invalid_argument("write_embeddings: " + std::to_string(ids.size()) +
                                    " ids for " + std::to_string(matrix.rows) + " rows");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
    out.write("EMB1", 4);
    put_u32_le(out, 1u);
    put_u32_le(out, static_cast<std::uint32_t>(matrix.rows));
    put_u32_le(out, static_cast<std::uint32_t>(matrix.cols));
    for (const std::string& id : ids) {
        if (id.size() > 0xffff)
            throw std::invalid_argument("write_embeddings: id longer than 65535 bytes");
        put_u16_le(out, static_cast<std::uint16_t>(id.size()));
        out.write(id.data(), static_cast<std::streamsize>(id.size()));
    }
    for (float v : matrix.data) put_f32_le(out, v);
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

struct EmbeddingFile {
    std::vector<std::string> ids;
    Matrix matrix;
};

inline EmbeddingFile read_embeddings(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open: " + path.string());
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, "EMB1", 4) != 0)
        throw std::runtime_error(path.string() + ": bad magic, not an EMB1 file");
    std::uint32_t version = get_u32_le(in, "version");
    if (version != 1)
        throw std::runtime_error(path.string() + ": unsupported EMB1 version " +
                                 std::to_string(version));
    std::uint32_t count = get_u32_le(in, "count");
    std::uint32_t dim = get_u32_le(in, "dim");

    EmbeddingFile out;
    out.ids.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        std::uint16_t len = get_u16_le(in, "id length");
        std::string id(len, '\0');
        if (len > 0 && !in.read(id.data(), len))
            throw std::runtime_error(path.string() + ": truncated id table");
        out.ids.push_back(std::move(id));
    }
    out.matrix = Matrix(count, dim);
    for (std::size_t i = 0; i < out.matrix.data.size(); ++i)
        out.matrix.data[i] = get_f32_le(in, "payload");
    // a trailing byte means the file does not match its header
    char extra;
    if (in.read(&extra, 1))
        throw std::runtime_error(path.string() + ": trailing bytes after payload");
    return out;
}

// ---------------------------------------------------------------------------
// PatchGrid files: <base>.json header, <base>.emb1 embeddings,
// <base>.pix raw pixel payload (n*p*p f32) when patch_px > 0.
// ---------------------------------------------------------------------------

inline void write_patch_grid(const std::filesystem::path& base, const PatchGrid& grid) {
    grid.validate();
    nlohmann::json header{{"image_id", grid.image_id},
                          {"rows", grid.rows},
                          {"cols", grid.cols},
                          {"patch_px", grid.patch_px}};
    std::ofstream hj(base.string() + ".json");
    if (!hj) throw std::runtime_error("cannot open for writing: " + base.string() + ".json");
    hj << header.dump() << "\n";

    Matrix m(grid.patches.size(), grid.dim());
    std::vector<std::string> ids(grid.patches.size());
    for (std::size_t i = 0; i < grid.patches.size(); ++i) {
        ids[i] = std::to_string(i);
        std::copy(grid.patches[i].embedding.begin(), grid.patches[i].embedding.end(),
                  m.row(i).begin());
    }
    write_embeddings(base.string() + ".emb1", ids, m);

    if (grid.patch_px > 0) {
        std::ofstream px(base.string() + ".pix", std::ios::binary);
        if (!px) throw std::runtime_error("cannot open for writing: " + base.string() + ".pix");
        for (const Patch& p : grid.patches) {
            if (!p.pixels)
                throw std::runtime_error("patch grid " + grid.image_id +
                                         ": patch_px set but patch has no pixels");
            for (float v : *p.pixels) put_f32_le(px, v);
        }
    }
}

inline PatchGrid read_patch_grid(const std::filesystem::path& base) {
    std::ifstream hj(base.string() + ".json");
    if (!hj) throw std::runtime_error("cannot open: " + base.string() + ".json");
    nlohmann::json header = nlohmann::json::parse(hj);

    PatchGrid grid;
    grid.image_id = header.at("image_id").get<std::string>();
    grid.rows = header.at("rows").get<std::size_t>();
    grid.cols = header.at("cols").get<std::size_t>();
    grid.patch_px = header.at("patch_px").get<std::size_t>();

    EmbeddingFile emb = read_embeddings(base.string() + ".emb1");
    if (emb.matrix.rows != grid.rows * grid.cols)
        throw std::runtime_error(base.string() + ": embeddings count " +
                                 std::to_string(emb.matrix.rows) + " != rows*cols");
    grid.patches.resize(emb.matrix.rows);
    for (std::size_t i = 0; i < emb.matrix.rows; ++i) {
        grid.patches[i].row = i / grid.cols;
        grid.patches[i].col = i % grid.cols;
        auto r = emb.matrix.row(i);
        grid.patches[i].embedding.assign(r.begin(), r.end());
    }

    if (grid.patch_px > 0) {
        std::ifstream px(base.string() + ".pix", std::ios::binary);
        if (!px) throw std::runtime_error("cannot open: " + base.string() + ".pix");
        std::size_t block = grid.patch_px * grid.patch_px;
        for (Patch& p : grid.patches) {
            std::vector<float> pix(block);
            for (std::size_t j = 0; j < block; ++j) pix[j] = get_f32_le(px, "pixel payload");
            p.pixels = std::move(pix);
        }
    }
    grid.validate();
    return grid;
}

// ---------------------------------------------------------------------------
// Corpus directory: reports.jsonl + tokens/<id>.emb1 + patches/<id>.{json,emb1[,pix]}
// ---------------------------------------------------------------------------

inline TokenSeq read_token_seq(const std::filesystem::path& path, const std::string& report_id) {
    EmbeddingFile emb = read_embeddings(path);
    if (emb.matrix.rows == 0)
        throw std::runtime_error(path.string() + ": token sequence is empty");
    TokenSeq seq;
    seq.report_id = report_id;
    seq.tokens = std::move(emb.ids);
    seq.embeddings = std::move(emb.matrix);
    if (!all_finite(seq.embeddings.data))
        throw std::runtime_error(path.string() + ": non-finite token embedding");
    return seq;
}

inline void write_token_seq(const std::filesystem::path& path, const TokenSeq& seq) {
    write_embeddings(path, seq.tokens, seq.embeddings);
}

inline std::vector<PairedSample> load_corpus(const std::filesystem::path& dir) {
    std::vector<Report> reports = load_reports(dir / "reports.jsonl");
    std::vector<PairedSample> out;
    out.reserve(reports.size());
    for (Report& r : reports) {
        PairedSample sample;
        sample.token_seq = read_token_seq(dir / "tokens" / (r.id + ".emb1"), r.id);
        sample.patch_grid = read_patch_grid(dir / "patches" / r.id);
        sample.report = std::move(r);
        sample.validate();
        out.push_back(std::move(sample));
    }
    return out;
}

}  // namespace kpa
