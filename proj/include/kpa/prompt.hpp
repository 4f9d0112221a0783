#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "kpa/common.hpp"
#include "kpa/vocab.hpp"

namespace kpa {

struct PromptSpec {
    std::vector<std::string> anatomy_words;
    std::vector<std::string> pathology_words;
    std::size_t n = 0;
    std::size_t m = 0;
    std::uint64_t seed = 0;
};

struct GeneratedPrompt {
    std::vector<std::string> anatomy_list;
    std::vector<std::string> pathology_list;
    std::string findings;
};

// Uniform sampling without replacement, fully determined by the seed. Anatomy
// words are drawn first, then pathology; each selection keeps vocabulary order.
inline PromptSpec sample_words(const Vocabularies& vocab, std::size_t n, std::size_t m,
                               std::uint64_t seed) {
    if (n == 0 || m == 0) throw std::invalid_argument("sample_words: n and m must be >= 1");
    if (n > vocab.anatomy.size())
        throw std::invalid_argument("sample_words: n=" + std::to_string(n) + " exceeds anatomy vocabulary size " +
                                    std::to_string(vocab.anatomy.size()));
    if (m > vocab.pathology.size())
        throw std::invalid_argument("sample_words: m=" + std::to_string(m) + " exceeds pathology vocabulary size " +
                                    std::to_string(vocab.pathology.size()));
    Rng rng(seed);
    PromptSpec spec;
    spec.n = n;
    spec.m = m;
    spec.seed = seed;
    for (std::size_t i : rng.sample_indices(vocab.anatomy.size(), n))
        spec.anatomy_words.push_back(vocab.anatomy[i]);
    for (std::size_t i : rng.sample_indices(vocab.pathology.size(), m))
        spec.pathology_words.push_back(vocab.pathology[i]);
    return spec;
}

namespace detail {

inline std::string quote_list(const std::vector<std::string>& words) {
    std::string out = "[";
    for (std::size_t i = 0; i < words.size(); ++i) {
        if (i) out += ", ";
        out += "'" + words[i] + "'";
    }
    return out + "]";
}

inline std::string placeholder_list(std::size_t from, std::size_t count) {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < count; ++i) out.push_back("word" + std::to_string(from + i));
    return quote_list(out);
}

inline std::string spell_count(std::size_t n) {
    static const char* small[] = {"zero", "one", "two",  "three", "four",  "five",  "six",
                                  "seven", "eight", "nine", "ten",  "eleven", "twelve", "thirteen",
                                  "fourteen", "fifteen", "sixteen", "seventeen", "eighteen",
                                  "nineteen", "twenty"};
    if (n <= 20) return small[n];
    return std::to_string(n);
}

}  // namespace detail

enum class WordChoice {
    exact_words,    // instruction lists the sampled words; the model must use all of them
    model_chooses,  // instruction lists the full vocabularies; the model picks N and M
};

// The instruction sent to the report-writing model. The template is fixed;
// only the two word arrays and the N/M numerals vary. The example block at the
// end never changes so response formatting stays parseable.
inline std::string render_instruction(const PromptSpec& spec, const Vocabularies& full_vocab,
                                      WordChoice mode = WordChoice::exact_words) {
    const std::vector<std::string>* anatomy = &spec.anatomy_words;
    const std::vector<std::string>* pathology = &spec.pathology_words;
    if (mode == WordChoice::model_chooses) {
        anatomy = &full_vocab.anatomy;
        pathology = &full_vocab.pathology;
    } else {
        for (const std::string& w : spec.anatomy_words)
            if (!std::count(full_vocab.anatomy.begin(), full_vocab.anatomy.end(), w))
                throw std::invalid_argument("render_instruction: '" + w +
                                            "' is not in the anatomy vocabulary");
        for (const std::string& w : spec.pathology_words)
            if (!std::count(full_vocab.pathology.begin(), full_vocab.pathology.end(), w))
                throw std::invalid_argument("render_instruction: '" + w +
                                            "' is not in the pathology vocabulary");
    }
    std::string n = std::to_string(spec.n);
    std::string m = std::to_string(spec.m);
    std::string out;
    out += "anatomy_list = " + detail::quote_list(*anatomy) + "\n";
    out += "pathology_list = " + detail::quote_list(*pathology) + "\n";
    out += "Here are two lists of anatomy and pathology for chest X-rays. Please write some "
           "findings that only include " + n + " words from the anatomy list and " + m +
           " from the pathology list, and do not write any negative sentences in the findings. "
           "These " + detail::spell_count(spec.n + spec.m) +
           " words can be randomly selected from the two lists, respectively. Please ensure the "
           "findings are reasonable for a chest x-ray in real medical scenarios. The output "
           "should be in 50 words.\n";
    out += "Here is an example:\n";
    out += "anatomy_list = ['heart', 'diaphragm']\n";
    out += "pathology_list = ['effusion', 'opacity']\n";
    out += "Findings: Presence of opacity observed near the heart and diaphragm regions "
           "suggestive of effusion.\n";
    out += "Please generate the output in the following format:\n";
    out += "anatomy_list = " + detail::placeholder_list(1, spec.n) + "\n";
    out += "pathology_list = " + detail::placeholder_list(spec.n + 1, spec.m) + "\n";
    out += "Findings:";
    return out;
}

// ---------------------------------------------------------------------------
// Response parsing
// ---------------------------------------------------------------------------

namespace detail {

struct BracketList {
    std::vector<std::string> words;
    std::size_t end = 0;  // index one past the closing bracket
};

inline BracketList parse_bracket_list(std::string_view text, std::string_view field,
                                      std::size_t from) {
    std::size_t pos = text.find(field, from);
    if (pos == std::string_view::npos)
        throw std::runtime_error("parse error: missing field '" + std::string(field) + "'");
    std::size_t open = text.find('[', pos + field.size());
    if (open == std::string_view::npos)
        throw std::runtime_error("parse error: field '" + std::string(field) + "' has no list");
    std::size_t close = text.find(']', open);
    if (close == std::string_view::npos)
        throw std::runtime_error("parse error: unbalanced bracket in '" + std::string(field) + "'");
    BracketList out;
    out.end = close + 1;
    for (const std::string& raw : split(text.substr(open + 1, close - open - 1), ',')) {
        std::string_view item = trim(raw);
        if (item.size() >= 2 && (item.front() == '\'' || item.front() == '"') &&
            item.back() == item.front())
            item = item.substr(1, item.size() - 2);
        item = trim(item);
        if (!item.empty()) out.words.emplace_back(item);
    }
    if (out.words.empty())
        throw std::runtime_error("parse error: field '" + std::string(field) + "' list is empty");
    return out;
}

}  // namespace detail

// Extracts the anatomy list, pathology list, and findings text from a model
// response in the instruction's output format. Tolerates surrounding
// whitespace and single or double quotes.
inline GeneratedPrompt parse_response(std::string_view text) {
    GeneratedPrompt out;
    detail::BracketList anatomy = detail::parse_bracket_list(text, "anatomy_list", 0);
    out.anatomy_list = anatomy.words;
    detail::BracketList pathology = detail::parse_bracket_list(text, "pathology_list", anatomy.end);
    out.pathology_list = pathology.words;
    const std::string_view marker = "Findings:";
    std::size_t pos = text.find(marker, pathology.end);
    if (pos == std::string_view::npos)
        throw std::runtime_error("parse error: missing field 'findings'");
    out.findings = std::string(trim(text.substr(pos + marker.size())));
    if (out.findings.empty()) throw std::runtime_error("parse error: field 'findings' is empty");
    return out;
}

// ---------------------------------------------------------------------------
// Offline findings generator
// ---------------------------------------------------------------------------

// Words that would make a sentence negative; the templates below avoid them
// and tests scan for them.
inline bool contains_negation(std::string_view text) {
    static const std::vector<std::string> single = {"no",     "not",         "without",
                                                    "negative", "absent",    "unremarkable"};
    std::vector<std::string> words;
    std::string cur;
    for (char c : text) {
        if (std::isalpha(static_cast<unsigned char>(c)))
            cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
        else if (!cur.empty()) {
            words.push_back(cur);
            cur.clear();
        }
    }
    if (!cur.empty()) words.push_back(cur);
    for (std::size_t i = 0; i < words.size(); ++i) {
        for (const std::string& s : single)
            if (words[i] == s) return true;
        if (words[i] == "clear" && i + 1 < words.size() && words[i + 1] == "of") return true;
    }
    return false;
}

namespace detail {

inline std::string join_words(const std::vector<std::string>& words) {
    std::string out;
    for (std::size_t i = 0; i < words.size(); ++i) {
        if (i > 0) out += (i + 1 == words.size()) ? " and " : ", ";
        out += words[i];
    }
    return out;
}

inline std::size_t word_count(std::string_view text) {
    std::size_t count = 0;
    bool in_word = false;
    for (char c : text) {
        bool space = std::isspace(static_cast<unsigned char>(c));
        if (!space && !in_word) ++count;
        in_word = !space;
    }
    return count;
}

}  // namespace detail

// Deterministic templated findings: every requested word appears exactly once,
// at most 50 words, never negated. Substitutes for the report-writing model
// when running offline.
inline GeneratedPrompt fallback_findings(const PromptSpec& spec, std::uint64_t seed) {
    if (spec.anatomy_words.empty() || spec.pathology_words.empty())
        throw std::invalid_argument("fallback_findings: empty word lists");
    static const std::vector<std::string> openers = {"Presence of", "Evidence of",
                                                     "Appearance of"};
    static const std::vector<std::string> verbs = {"observed", "seen", "noted"};
    static const std::vector<std::string> preps = {"near", "around", "along"};
    Rng rng(seed);
    const std::string& opener = openers[rng.below(openers.size())];
    const std::string& verb = verbs[rng.below(verbs.size())];
    const std::string& prep = preps[rng.below(preps.size())];

    std::string text = opener + " " + spec.pathology_words.front() + " " + verb + " " + prep +
                       " the " + detail::join_words(spec.anatomy_words) + " regions";
    if (spec.pathology_words.size() > 1) {
        std::vector<std::string> tail(spec.pathology_words.begin() + 1,
                                      spec.pathology_words.end());
        text += " suggestive of " + detail::join_words(tail);
    }
    text += ".";
    if (detail::word_count(text) > 50)
        throw std::invalid_argument("fallback_findings: " +
                                    std::to_string(spec.anatomy_words.size() +
                                                   spec.pathology_words.size()) +
                                    " words cannot fit a 50-word findings sentence");
    return GeneratedPrompt{spec.anatomy_words, spec.pathology_words, text};
}

// ---------------------------------------------------------------------------
// Clients
// ---------------------------------------------------------------------------

struct TextClient {
    virtual ~TextClient() = default;
    virtual std::string complete(const std::string& prompt) = 0;
};

// Fixed-response client for tests.
class StaticTextClient : public TextClient {
public:
    explicit StaticTextClient(std::string response) : response_(std::move(response)) {}
    std::string complete(const std::string&) override { return response_; }

private:
    std::string response_;
};

// Offline substitute for the report-writing model. Reads the word lists and
// the N/M counts out of the instruction itself, picks words, and answers in
// the requested output format. Per-call behavior depends only on the client
// seed and the instruction text.
class FallbackTextClient : public TextClient {
public:
    explicit FallbackTextClient(std::uint64_t seed = 0) : seed_(seed) {}

    std::string complete(const std::string& prompt) override {
        detail::BracketList anatomy = detail::parse_bracket_list(prompt, "anatomy_list", 0);
        detail::BracketList pathology =
            detail::parse_bracket_list(prompt, "pathology_list", anatomy.end);
        std::size_t n = parse_count(prompt, "only include ", anatomy.words.size());
        std::size_t m =
            parse_count(prompt, " from the anatomy list and ", pathology.words.size());
        n = std::min(n, anatomy.words.size());
        m = std::min(m, pathology.words.size());

        std::uint64_t call_seed = derive_seed(seed_, fnv1a64(prompt));
        Rng rng(call_seed);
        PromptSpec spec;
        spec.n = n;
        spec.m = m;
        spec.seed = call_seed;
        for (std::size_t i : rng.sample_indices(anatomy.words.size(), n))
            spec.anatomy_words.push_back(anatomy.words[i]);
        for (std::size_t i : rng.sample_indices(pathology.words.size(), m))
            spec.pathology_words.push_back(pathology.words[i]);

        GeneratedPrompt g = fallback_findings(spec, derive_seed(call_seed, 1));
        return "anatomy_list = " + detail::quote_list(g.anatomy_list) + "\n" +
               "pathology_list = " + detail::quote_list(g.pathology_list) + "\n" +
               "Findings: " + g.findings;
    }

private:
    static std::size_t parse_count(std::string_view text, std::string_view marker,
                                   std::size_t fallback) {
        std::size_t pos = text.find(marker);
        if (pos == std::string_view::npos) return fallback;
        pos += marker.size();
        std::size_t value = 0;
        bool any = false;
        while (pos < text.size() && std::isdigit(static_cast<unsigned char>(text[pos]))) {
            value = value * 10 + static_cast<std::size_t>(text[pos] - '0');
            ++pos;
            any = true;
        }
        return any ? value : fallback;
    }

    std::uint64_t seed_;
};

struct GenerateOptions {
    std::size_t retries = 3;
    WordChoice mode = WordChoice::exact_words;
};

// render -> client -> parse, retrying unparseable responses up to the limit.
// Transport errors from the client propagate immediately.
inline GeneratedPrompt generate_prompt(const PromptSpec& spec, const Vocabularies& full_vocab,
                                       TextClient& client, const GenerateOptions& opts = {}) {
    std::string instruction = render_instruction(spec, full_vocab, opts.mode);
    std::string last_error;
    std::string last_response;
    for (std::size_t attempt = 0; attempt < std::max<std::size_t>(opts.retries, 1); ++attempt) {
        last_response = client.complete(instruction);
        try {
            return parse_response(last_response);
        } catch (const std::exception& e) {
            last_error = e.what();
            log_info("generate_prompt: attempt " + std::to_string(attempt + 1) + " failed: " +
                     last_error);
        }
    }
    throw std::runtime_error("generate_prompt: retries exhausted (" + last_error +
                             "); last response: " + last_response);
}

// ---------------------------------------------------------------------------
// Prompt records: one JSON object per line
// ---------------------------------------------------------------------------

inline void save_prompts(const std::filesystem::path& path,
                         const std::vector<GeneratedPrompt>& prompts) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
    for (const GeneratedPrompt& p : prompts) {
        nlohmann::json j{{"anatomy_list", p.anatomy_list},
                         {"pathology_list", p.pathology_list},
                         {"findings", p.findings}};
        out << j.dump() << "\n";
    }
}

inline std::vector<GeneratedPrompt> load_prompts(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open prompts file: " + path.string());
    std::vector<GeneratedPrompt> out;
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
                                     ": malformed prompt record: " + e.what());
        }
        GeneratedPrompt p;
        p.anatomy_list = j.at("anatomy_list").get<std::vector<std::string>>();
        p.pathology_list = j.at("pathology_list").get<std::vector<std::string>>();
        p.findings = j.at("findings").get<std::string>();
        if (p.findings.empty() || p.anatomy_list.empty() || p.pathology_list.empty())
            throw std::runtime_error(path.string() + ":" + std::to_string(line_no) +
                                     ": incomplete prompt record");
        out.push_back(std::move(p));
    }
    return out;
}

}  // namespace kpa
