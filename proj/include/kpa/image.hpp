#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace kpa {

// Grayscale image, values in [0,1], row-major.
struct Image {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<float> px;

    Image() = default;
    Image(std::size_t r, std::size_t c, float fill = 0.0f) : rows(r), cols(c), px(r * c, fill) {}

    float at(std::size_t r, std::size_t c) const { return px[r * cols + c]; }
    float& at(std::size_t r, std::size_t c) { return px[r * cols + c]; }
};

// Binary PGM (P5), 8-bit. Values are clamped to [0,1] before quantization.
inline void write_pgm(const std::filesystem::path& path, const Image& img) {
    if (img.rows == 0 || img.cols == 0)
        throw std::invalid_argument("write_pgm: empty image");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
    out << "P5\n" << img.cols << " " << img.rows << "\n255\n";
    for (float v : img.px) {
        float c = std::min(1.0f, std::max(0.0f, v));
        out.put(static_cast<char>(static_cast<unsigned char>(std::lround(c * 255.0f))));
    }
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

namespace detail {

inline std::string next_pgm_field(std::istream& in, const std::string& path) {
    std::string tok;
    for (;;) {
        int c = in.get();
        if (c == EOF) throw std::runtime_error(path + ": truncated PGM header");
        if (c == '#') {  // comment runs to end of line
            while (c != EOF && c != '\n') c = in.get();
            continue;
        }
        if (std::isspace(c)) {
            if (!tok.empty()) return tok;
            continue;
        }
        tok.push_back(static_cast<char>(c));
    }
}

}  // namespace detail

inline Image read_pgm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open: " + path.string());
    if (detail::next_pgm_field(in, path.string()) != "P5")
        throw std::runtime_error(path.string() + ": not a binary PGM (P5) file");
    std::size_t cols = std::stoul(detail::next_pgm_field(in, path.string()));
    std::size_t rows = std::stoul(detail::next_pgm_field(in, path.string()));
    std::size_t maxval = std::stoul(detail::next_pgm_field(in, path.string()));
    if (maxval == 0 || maxval > 255)
        throw std::runtime_error(path.string() + ": unsupported maxval " + std::to_string(maxval));
    if (rows == 0 || cols == 0) throw std::runtime_error(path.string() + ": empty image");
    Image img(rows, cols);
    for (std::size_t i = 0; i < img.px.size(); ++i) {
        int c = in.get();
        if (c == EOF) throw std::runtime_error(path.string() + ": truncated pixel data");
        img.px[i] = static_cast<float>(c) / static_cast<float>(maxval);
    }
    return img;
}

}  // namespace kpa
