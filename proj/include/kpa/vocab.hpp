#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "kpa/common.hpp"
#include "kpa/corpus.hpp"

namespace kpa {

enum class LexClass { noun, adjective, other };

inline LexClass parse_lex_class(std::string_view s) {
    if (s == "noun") return LexClass::noun;
    if (s == "adjective") return LexClass::adjective;
    if (s == "other") return LexClass::other;
    throw std::runtime_error("unknown lexical class '" + std::string(s) + "'");
}

struct Lexicon {
    std::map<std::string, std::set<LexClass>> entries;

    bool keeps(const std::string& word) const {
        auto it = entries.find(word);
        if (it == entries.end()) return false;
        return it->second.count(LexClass::noun) > 0 || it->second.count(LexClass::adjective) > 0;
    }
};

struct FrequencyTable {
    std::map<std::string, std::size_t> counts;
};

struct Vocabularies {
    std::vector<std::string> anatomy;
    std::vector<std::string> pathology;
    std::set<std::string> exclusions;
};

// ---------------------------------------------------------------------------
// Tokenization: maximal runs of ASCII letters, lowercased. Digits and
// punctuation act as separators; single-letter fragments (the debris digit
// stripping leaves behind, e.g. the "T" of "T2") are dropped.
// ---------------------------------------------------------------------------

inline std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> out;
    std::string cur;
    auto flush = [&] {
        if (cur.size() >= 2) out.push_back(cur);
        cur.clear();
    };
    for (char c : text) {
        if (std::isalpha(static_cast<unsigned char>(c)))
            cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
        else
            flush();
    }
    flush();
    return out;
}

// Keep tokens the lexicon marks noun or adjective, in order. Unknown tokens drop.
inline std::vector<std::string> filter_words(const std::vector<std::string>& tokens,
                                             const Lexicon& lexicon) {
    std::vector<std::string> out;
    for (const std::string& t : tokens)
        if (lexicon.keeps(t)) out.push_back(t);
    return out;
}

inline FrequencyTable count_frequencies(const std::vector<Report>& corpus,
                                        const Lexicon& lexicon) {
    FrequencyTable table;
    for (const Report& r : corpus) {
        for (const std::string& section : {r.findings, r.impression}) {
            for (const std::string& w : filter_words(tokenize(section), lexicon))
                ++table.counts[w];
        }
    }
    return table;
}

// Top-k words by count descending, ties broken lexicographically ascending.
inline std::vector<std::string> select_top_k(const FrequencyTable& table, std::size_t k) {
    if (k == 0) throw std::invalid_argument("select_top_k: k must be >= 1");
    std::vector<std::pair<std::string, std::size_t>> rows(table.counts.begin(),
                                                          table.counts.end());
    std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    if (rows.size() > k) rows.resize(k);
    std::vector<std::string> out;
    out.reserve(rows.size());
    for (auto& [w, c] : rows) out.push_back(w);
    return out;
}

// Curated categorization. Words in `exclusions` drop; the rest go to whichever
// seed set contains them; words in neither seed set drop and are reported via
// `unassigned` when given.
inline Vocabularies categorize(const std::vector<std::string>& words,
                               const std::set<std::string>& anatomy_seeds,
                               const std::set<std::string>& pathology_seeds,
                               const std::set<std::string>& exclusions,
                               std::vector<std::string>* unassigned = nullptr) {
    for (const std::string& w : anatomy_seeds)
        if (pathology_seeds.count(w))
            throw std::invalid_argument("categorize: word '" + w +
                                        "' appears in both seed sets");
    Vocabularies vocab;
    vocab.exclusions = exclusions;
    std::set<std::string> seen;
    for (const std::string& w : words) {
        if (!seen.insert(w).second) continue;
        if (exclusions.count(w)) continue;
        if (anatomy_seeds.count(w))
            vocab.anatomy.push_back(w);
        else if (pathology_seeds.count(w))
            vocab.pathology.push_back(w);
        else if (unassigned)
            unassigned->push_back(w);
    }
    return vocab;
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

// Lexicon file: one "word<TAB>class[,class...]" line per entry.
inline Lexicon load_lexicon(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open lexicon: " + path.string());
    Lexicon lex;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        std::string_view sv = trim(line);
        if (sv.empty() || sv.front() == '#') continue;
        std::size_t tab = sv.find('\t');
        if (tab == std::string_view::npos)
            throw std::runtime_error(path.string() + ":" + std::to_string(line_no) +
                                     ": expected word<TAB>classes");
        std::string word = to_lower(trim(sv.substr(0, tab)));
        std::set<LexClass>& classes = lex.entries[word];
        for (const std::string& cls : split(trim(sv.substr(tab + 1)), ',')) {
            try {
                classes.insert(parse_lex_class(trim(cls)));
            } catch (const std::exception& e) {
                throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": " +
                                         e.what());
            }
        }
        if (classes.empty())
            throw std::runtime_error(path.string() + ":" + std::to_string(line_no) +
                                     ": entry has no classes");
    }
    return lex;
}

inline void save_lexicon(const std::filesystem::path& path, const Lexicon& lex) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
    auto name = [](LexClass c) {
        switch (c) {
            case LexClass::noun: return "noun";
            case LexClass::adjective: return "adjective";
            default: return "other";
        }
    };
    for (const auto& [word, classes] : lex.entries) {
        out << word << "\t";
        bool first = true;
        for (LexClass c : classes) {
            if (!first) out << ",";
            out << name(c);
            first = false;
        }
        out << "\n";
    }
}

// Word-list file: one word per line, '#' comments allowed.
inline std::set<std::string> load_word_set(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open word list: " + path.string());
    std::set<std::string> out;
    std::string line;
    while (std::getline(in, line)) {
        std::string_view sv = trim(line);
        if (sv.empty() || sv.front() == '#') continue;
        out.insert(to_lower(sv));
    }
    return out;
}

inline void save_word_set(const std::filesystem::path& path, const std::set<std::string>& words) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
    for (const std::string& w : words) out << w << "\n";
}

inline void save_vocabularies(const std::filesystem::path& path, const Vocabularies& vocab) {
    nlohmann::json j{{"anatomy", vocab.anatomy},
                     {"pathology", vocab.pathology},
                     {"exclusions", std::vector<std::string>(vocab.exclusions.begin(),
                                                             vocab.exclusions.end())}};
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
    out << j.dump(2) << "\n";
}

inline Vocabularies load_vocabularies(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open vocabularies: " + path.string());
    nlohmann::json j = nlohmann::json::parse(in);
    Vocabularies vocab;
    vocab.anatomy = j.at("anatomy").get<std::vector<std::string>>();
    vocab.pathology = j.at("pathology").get<std::vector<std::string>>();
    for (const auto& w : j.value("exclusions", std::vector<std::string>{}))
        vocab.exclusions.insert(w);
    for (const std::string& w : vocab.anatomy)
        if (std::count(vocab.pathology.begin(), vocab.pathology.end(), w))
            throw std::runtime_error(path.string() + ": word '" + w +
                                     "' present in both vocabularies");
    return vocab;
}

// Frequency table export, count descending then word ascending: stable data
// for downstream plotting.
inline void save_frequency_table(const std::filesystem::path& path, const FrequencyTable& table) {
    std::vector<std::pair<std::string, std::size_t>> rows(table.counts.begin(),
                                                          table.counts.end());
    std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
    for (auto& [w, c] : rows) out << w << "\t" << c << "\n";
}

}  // namespace kpa
