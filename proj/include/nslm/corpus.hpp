// Corpus ingestion: number de-tokenization, gazetteer chunking, token-class
// assignment, vocabulary construction and the tagged/per-class streams the
// models consume.

#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "nslm/common.hpp"

namespace nslm {

enum class Split { Train, Valid, Test };

struct RawCorpus {
    std::vector<std::vector<std::string>> documents;
    Split split = Split::Train;
};

enum class PlaceKind { City, State, Country };

struct GazetteerEntry {
    std::string name;  // possibly multi-word, space separated
    double latitude = 0.0;
    double longitude = 0.0;
    long long population = 0;
    PlaceKind kind = PlaceKind::City;
};

// Token classes. Order encodes the number-class precedence ladder:
// convert > range > day > year > round > decimal > other-number.
enum class TokenClass : std::uint8_t {
    Plain = 0,
    Convert,
    Range,
    Day,
    Year,
    Round,
    Decimal,
    OtherNumber,
    City,
    State,
    Country,
};

constexpr int kTokenClassCount = 11;

inline bool is_number_class(TokenClass c) {
    return c >= TokenClass::Convert && c <= TokenClass::OtherNumber;
}

inline bool is_geo_class(TokenClass c) {
    return c == TokenClass::City || c == TokenClass::State || c == TokenClass::Country;
}

inline const char* class_name(TokenClass c) {
    switch (c) {
        case TokenClass::Plain: return "plain";
        case TokenClass::Convert: return "convert";
        case TokenClass::Range: return "range";
        case TokenClass::Day: return "day";
        case TokenClass::Year: return "year";
        case TokenClass::Round: return "round";
        case TokenClass::Decimal: return "decimal";
        case TokenClass::OtherNumber: return "other-number";
        case TokenClass::City: return "city";
        case TokenClass::State: return "state";
        case TokenClass::Country: return "country";
    }
    return "plain";
}

inline std::optional<TokenClass> class_from_name(const std::string& s) {
    for (int i = 0; i < kTokenClassCount; ++i) {
        auto c = static_cast<TokenClass>(i);
        if (s == class_name(c)) return c;
    }
    return std::nullopt;
}

// ---------------------------------------------------------------------------
// Token shape helpers
// ---------------------------------------------------------------------------

inline bool all_digits(const std::string& s) {
    if (s.empty()) return false;
    for (char ch : s)
        if (!std::isdigit(static_cast<unsigned char>(ch))) return false;
    return true;
}

// Digit run possibly containing ',' or '.' strictly between digits: "1066",
// "1,066", "3.5", "1,066.5". This is the <digits> shape the @,@/@.@ rewrite
// accepts on either side, so already-merged numbers keep merging to fixpoint.
inline bool is_digit_chunk(const std::string& s) {
    if (s.empty() || !std::isdigit(static_cast<unsigned char>(s.front())) ||
        !std::isdigit(static_cast<unsigned char>(s.back())))
        return false;
    for (std::size_t i = 0; i < s.size(); ++i) {
        char ch = s[i];
        if (std::isdigit(static_cast<unsigned char>(ch))) continue;
        if (ch != ',' && ch != '.') return false;
    }
    return true;
}

// Integer-shaped chunk: digits with optional thousands commas, no decimal point.
inline bool is_integer_chunk(const std::string& s) {
    return is_digit_chunk(s) && s.find('.') == std::string::npos;
}

inline bool is_decimal_chunk(const std::string& s) {
    return is_digit_chunk(s) && s.find('.') != std::string::npos;
}

// Parses "1,066.5" -> 1066.5. Returns nullopt for non-numeric tokens.
inline std::optional<double> parse_number(const std::string& token) {
    if (!is_digit_chunk(token)) return std::nullopt;
    std::string clean;
    clean.reserve(token.size());
    for (char ch : token)
        if (ch != ',') clean.push_back(ch);
    try {
        return std::stod(clean);
    } catch (...) {
        return std::nullopt;
    }
}

// Decimal places in the surface form ("8" -> 0, "8.0" -> 1, "1,066.25" -> 2).
inline int surface_decimals(const std::string& token) {
    auto pos = token.rfind('.');
    if (pos == std::string::npos) return 0;
    return static_cast<int>(token.size() - pos - 1);
}

inline bool is_month_name(const std::string& s) {
    static const std::array<const char*, 12> months = {
        "January", "February", "March", "April", "May", "June",
        "July", "August", "September", "October", "November", "December"};
    for (const char* m : months)
        if (s == m) return true;
    return false;
}

// ---------------------------------------------------------------------------
// External tables
// ---------------------------------------------------------------------------

inline std::vector<std::string> split_ws(const std::string& line, char sep = '\t') {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : line) {
        if (ch == sep) {
            out.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(ch);
        }
    }
    out.push_back(cur);
    return out;
}

// Unit conversion table. The first row listed for a source unit is its
// conventional conversion partner, used when the target unit is not known
// from context.
class UnitTable {
public:
    struct Row {
        std::string from, to;
        double factor;
    };

    void add(const std::string& from, const std::string& to, double factor) {
        rows_.push_back({from, to, factor});
        if (!default_to_.count(from)) default_to_[from] = rows_.size() - 1;
        pair_factor_[from + "\t" + to] = factor;
    }

    bool has_unit(const std::string& u) const { return default_to_.count(u) > 0; }

    std::optional<double> factor(const std::string& from, const std::string& to) const {
        auto it = pair_factor_.find(from + "\t" + to);
        if (it == pair_factor_.end()) return std::nullopt;
        return it->second;
    }

    std::optional<Row> default_target(const std::string& from) const {
        auto it = default_to_.find(from);
        if (it == default_to_.end()) return std::nullopt;
        return rows_[it->second];
    }

    std::size_t size() const { return rows_.size(); }

private:
    std::vector<Row> rows_;
    std::unordered_map<std::string, std::size_t> default_to_;
    std::unordered_map<std::string, double> pair_factor_;
};

inline UnitTable load_unit_table(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open unit table: " + path);
    UnitTable table;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        auto cols = split_ws(line);
        if (cols.size() < 3) throw DataError("malformed unit table row: " + line);
        table.add(cols[0], cols[1], std::stod(cols[2]));
    }
    return table;
}

inline PlaceKind place_kind_from_name(const std::string& s) {
    if (s == "city") return PlaceKind::City;
    if (s == "state") return PlaceKind::State;
    if (s == "country") return PlaceKind::Country;
    throw DataError("unknown gazetteer kind: " + s);
}

inline const char* place_kind_name(PlaceKind k) {
    switch (k) {
        case PlaceKind::City: return "city";
        case PlaceKind::State: return "state";
        case PlaceKind::Country: return "country";
    }
    return "city";
}

inline std::vector<GazetteerEntry> load_gazetteer(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open gazetteer: " + path);
    std::vector<GazetteerEntry> entries;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        auto cols = split_ws(line);
        if (cols.size() < 5) throw DataError("malformed gazetteer row: " + line);
        GazetteerEntry e;
        e.name = cols[0];
        e.latitude = std::stod(cols[1]);
        e.longitude = std::stod(cols[2]);
        e.population = std::stoll(cols[3]);
        e.kind = place_kind_from_name(cols[4]);
        if (e.latitude < -90.0 || e.latitude > 90.0 || e.longitude < -180.0 || e.longitude > 180.0 ||
            e.population < 0)
            throw DataError("out-of-range gazetteer row: " + line);
        entries.push_back(std::move(e));
    }
    return entries;
}

// Keeps cities above the population threshold plus all states and countries.
inline std::vector<GazetteerEntry> filter_gazetteer(const std::vector<GazetteerEntry>& entries,
                                                    long long min_city_population = 500000) {
    std::vector<GazetteerEntry> out;
    for (const auto& e : entries) {
        if (e.kind == PlaceKind::City && e.population <= min_city_population) continue;
        out.push_back(e);
    }
    return out;
}

constexpr char kChunkJoiner = '_';

// Lookup structure for chunking and geo classification. Names present under
// more than one kind resolve to the highest-population entry.
class GazetteerIndex {
public:
    explicit GazetteerIndex(const std::vector<GazetteerEntry>& entries) {
        for (const auto& e : entries) {
            auto words = split_name(e.name);
            if (words.size() > 1) multiword_[words[0]].push_back(words);
            std::string key = joined(words);
            auto it = by_token_.find(key);
            if (it == by_token_.end() || entries_[it->second].population < e.population) {
                entries_.push_back(e);
                by_token_[key] = entries_.size() - 1;
            }
        }
        for (auto& [first, seqs] : multiword_) {
            std::sort(seqs.begin(), seqs.end(),
                      [](const auto& a, const auto& b) { return a.size() > b.size(); });
        }
    }

    // Longest gazetteer name starting at tokens[pos]; 0 if none (single-word
    // names need no chunking).
    std::size_t longest_match(const std::vector<std::string>& tokens, std::size_t pos) const {
        auto it = multiword_.find(tokens[pos]);
        if (it == multiword_.end()) return 0;
        for (const auto& seq : it->second) {
            if (pos + seq.size() > tokens.size()) continue;
            bool ok = true;
            for (std::size_t k = 1; k < seq.size(); ++k) {
                if (tokens[pos + k] != seq[k]) {
                    ok = false;
                    break;
                }
            }
            if (ok) return seq.size();
        }
        return 0;
    }

    // Looks up a (possibly chunked) surface token.
    const GazetteerEntry* find(const std::string& token) const {
        auto it = by_token_.find(token);
        if (it == by_token_.end()) return nullptr;
        return &entries_[it->second];
    }

    static std::vector<std::string> split_name(const std::string& name) {
        std::vector<std::string> words;
        std::string cur;
        for (char ch : name) {
            if (ch == ' ') {
                if (!cur.empty()) words.push_back(cur);
                cur.clear();
            } else {
                cur.push_back(ch);
            }
        }
        if (!cur.empty()) words.push_back(cur);
        return words;
    }

    static std::string joined(const std::vector<std::string>& words) {
        std::string out;
        for (std::size_t i = 0; i < words.size(); ++i) {
            if (i) out.push_back(kChunkJoiner);
            out += words[i];
        }
        return out;
    }

    // Chunked surface token back to the gazetteer spelling.
    static std::string unjoin(const std::string& token) {
        std::string out = token;
        std::replace(out.begin(), out.end(), kChunkJoiner, ' ');
        return out;
    }

private:
    std::vector<GazetteerEntry> entries_;
    std::unordered_map<std::string, std::size_t> by_token_;  // joined name -> entry
    std::unordered_map<std::string, std::vector<std::vector<std::string>>> multiword_;
};

// ---------------------------------------------------------------------------
// Raw corpus IO and rewrites
// ---------------------------------------------------------------------------

// Blank-line separated documents, whitespace tokenized.
inline RawCorpus load_raw_corpus(const std::string& path, Split split) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open corpus file: " + path);
    RawCorpus corpus;
    corpus.split = split;
    std::vector<std::string> doc;
    std::string line;
    while (std::getline(in, line)) {
        std::istringstream ss(line);
        std::string tok;
        bool any = false;
        while (ss >> tok) {
            doc.push_back(tok);
            any = true;
        }
        if (!any && !doc.empty()) {
            corpus.documents.push_back(std::move(doc));
            doc.clear();
        }
    }
    if (!doc.empty()) corpus.documents.push_back(std::move(doc));
    if (corpus.documents.empty()) throw DataError("empty corpus: " + path);
    return corpus;
}

// Reverses wikitext number tokenization: "1 @,@ 066" -> "1,066" and
// "3 @.@ 5" -> "3.5", left to right until fixpoint. Negative-sign
// tokenization is left alone.
inline std::vector<std::string> detokenize_numbers_doc(const std::vector<std::string>& doc) {
    std::vector<std::string> cur = doc;
    bool changed = true;
    while (changed) {
        changed = false;
        std::vector<std::string> next;
        next.reserve(cur.size());
        std::size_t i = 0;
        while (i < cur.size()) {
            if (i + 2 < cur.size() && (cur[i + 1] == "@,@" || cur[i + 1] == "@.@") &&
                is_digit_chunk(cur[i]) && is_digit_chunk(cur[i + 2])) {
                next.push_back(cur[i] + (cur[i + 1] == "@,@" ? "," : ".") + cur[i + 2]);
                i += 3;
                changed = true;
            } else {
                next.push_back(cur[i]);
                ++i;
            }
        }
        cur = std::move(next);
    }
    return cur;
}

inline RawCorpus detokenize_numbers(const RawCorpus& raw) {
    RawCorpus out;
    out.split = raw.split;
    out.documents.reserve(raw.documents.size());
    for (const auto& doc : raw.documents) out.documents.push_back(detokenize_numbers_doc(doc));
    return out;
}

// Greedy left-to-right longest-match replacement of multi-word gazetteer
// names by single joined tokens.
inline std::vector<std::string> chunk_locations_doc(const std::vector<std::string>& doc,
                                                    const GazetteerIndex& index) {
    std::vector<std::string> out;
    out.reserve(doc.size());
    std::size_t i = 0;
    while (i < doc.size()) {
        std::size_t len = index.longest_match(doc, i);
        if (len > 1) {
            std::vector<std::string> span(doc.begin() + static_cast<long>(i),
                                          doc.begin() + static_cast<long>(i + len));
            out.push_back(GazetteerIndex::joined(span));
            i += len;
        } else {
            out.push_back(doc[i]);
            ++i;
        }
    }
    return out;
}

inline RawCorpus chunk_locations(const RawCorpus& raw, const GazetteerIndex& index) {
    RawCorpus out;
    out.split = raw.split;
    out.documents.reserve(raw.documents.size());
    for (const auto& doc : raw.documents) out.documents.push_back(chunk_locations_doc(doc, index));
    return out;
}

// ---------------------------------------------------------------------------
// Classification
// ---------------------------------------------------------------------------

// Context-sensitive class of a single position. Expects de-tokenization and
// chunking to have been applied. Precedence:
// convert > range > day > year > round > decimal > other-number, then geo.
inline TokenClass classify_token(const std::vector<std::string>& doc, std::size_t pos,
                                 const GazetteerIndex& gazetteer, const UnitTable& units) {
    const std::string& tok = doc[pos];
    if (is_digit_chunk(tok)) {
        double value = *parse_number(tok);
        // convert: number inside parentheses directly after "<number> <unit> ("
        if (pos >= 3 && doc[pos - 1] == "(" && units.has_unit(doc[pos - 2]) &&
            is_digit_chunk(doc[pos - 3]))
            return TokenClass::Convert;
        bool integer = is_integer_chunk(tok);
        // range: integer right after "-"/"–" that follows another integer
        if (integer && pos >= 2 && (doc[pos - 1] == "-" || doc[pos - 1] == "–") &&
            is_integer_chunk(doc[pos - 2]))
            return TokenClass::Range;
        // day: 1..31 adjacent to a month name
        if (integer && value >= 1 && value <= 31 &&
            ((pos > 0 && is_month_name(doc[pos - 1])) ||
             (pos + 1 < doc.size() && is_month_name(doc[pos + 1]))))
            return TokenClass::Day;
        // year: standalone 4-digit integer in [1000, 2100]
        if (tok.size() == 4 && all_digits(tok) && value >= 1000 && value <= 2100)
            return TokenClass::Year;
        // round: >= 3 digits with >= 2 trailing zeros
        if (integer) {
            std::string digits;
            for (char ch : tok)
                if (ch != ',') digits.push_back(ch);
            std::size_t zeros = 0;
            for (auto it = digits.rbegin(); it != digits.rend() && *it == '0'; ++it) ++zeros;
            if (digits.size() >= 3 && zeros >= 2) return TokenClass::Round;
        }
        if (is_decimal_chunk(tok)) return TokenClass::Decimal;
        return TokenClass::OtherNumber;
    }
    if (const GazetteerEntry* e = gazetteer.find(tok)) {
        switch (e->kind) {
            case PlaceKind::City: return TokenClass::City;
            case PlaceKind::State: return TokenClass::State;
            case PlaceKind::Country: return TokenClass::Country;
        }
    }
    return TokenClass::Plain;
}

inline std::vector<std::vector<TokenClass>> classify_corpus(const RawCorpus& corpus,
                                                            const GazetteerIndex& gazetteer,
                                                            const UnitTable& units) {
    std::vector<std::vector<TokenClass>> labels(corpus.documents.size());
#pragma omp parallel for schedule(static)
    for (long long d = 0; d < static_cast<long long>(corpus.documents.size()); ++d) {
        const auto& doc = corpus.documents[static_cast<std::size_t>(d)];
        auto& lab = labels[static_cast<std::size_t>(d)];
        lab.resize(doc.size());
        for (std::size_t i = 0; i < doc.size(); ++i)
            lab[i] = classify_token(doc, i, gazetteer, units);
    }
    return labels;
}

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

struct ClassVocab {
    std::vector<int> members;                        // word ids, sorted by id
    std::vector<double> values;                      // numeric side data (number classes)
    std::vector<std::pair<double, double>> coords;   // lat/lon side data (geo classes)
    std::vector<int> decimals;                       // surface decimal places (numbers)
    std::vector<long long> counts;                   // training occurrences per member
    std::unordered_map<int, int> word_to_local;

    int size() const { return static_cast<int>(members.size()); }
    bool contains(int word_id) const { return word_to_local.count(word_id) > 0; }
    int local(int word_id) const { return word_to_local.at(word_id); }
};

struct Vocabulary {
    std::vector<std::string> id_to_word;
    std::unordered_map<std::string, int> word_to_id;
    std::vector<long long> train_count;     // per word id, training occurrences
    std::vector<TokenClass> word_class;     // type-level class per word id
    int unk_id = -1;

    std::array<ClassVocab, kTokenClassCount> class_vocab;

    // Class-augmented head vocabulary: plain words followed by one tag per
    // class with members.
    std::vector<int> class_head_of_word;    // word id -> class-head id, -1 for class members
    std::array<int, kTokenClassCount> tag_id{};           // class -> class-head id, -1 if absent
    std::vector<std::string> class_head_names;            // class-head id -> display string
    std::vector<int> class_head_word;                     // class-head id -> word id, -1 for tags

    int size() const { return static_cast<int>(id_to_word.size()); }
    int class_head_size() const { return static_cast<int>(class_head_names.size()); }

    int id_of(const std::string& w) const {
        auto it = word_to_id.find(w);
        return it == word_to_id.end() ? unk_id : it->second;
    }

    bool has_class(TokenClass c) const { return class_vocab[static_cast<int>(c)].size() > 0; }

    std::vector<TokenClass> present_classes() const {
        std::vector<TokenClass> out;
        for (int i = 1; i < kTokenClassCount; ++i)
            if (class_vocab[i].size() > 0) out.push_back(static_cast<TokenClass>(i));
        return out;
    }

    std::uint64_t hash() const {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (int i = 0; i < size(); ++i) {
            h = fnv1a(id_to_word[static_cast<std::size_t>(i)], h);
            const char sep = '\x1f';
            h = fnv1a(&sep, 1, h);
            int c = static_cast<int>(word_class[static_cast<std::size_t>(i)]);
            h = fnv1a(&c, sizeof(c), h);
        }
        int chs = class_head_size();
        h = fnv1a(&chs, sizeof(chs), h);
        return h;
    }
};

struct VocabBuildConfig {
    int min_count = 2;           // below this, tokens map to <unk>
    std::string unk_token = "<unk>";
};

namespace detail {

// Majority class over a token's training occurrences; ties resolved by the
// precedence ladder (lower enum value wins).
inline TokenClass vote_class(const std::array<long long, kTokenClassCount>& votes) {
    int best = 0;
    for (int c = 1; c < kTokenClassCount; ++c) {
        if (votes[static_cast<std::size_t>(c)] >
            votes[static_cast<std::size_t>(best)])
            best = c;
        // equal counts: keep the earlier (higher-precedence) class
    }
    return static_cast<TokenClass>(best);
}

}  // namespace detail

// Builds V_W with frequency cutoff, votes a type-level class per token, and
// attaches side data to class vocabularies. `labels` are the per-position
// contextual classes of the training corpus.
inline Vocabulary build_vocabularies(const RawCorpus& train,
                                     const std::vector<std::vector<TokenClass>>& labels,
                                     const GazetteerIndex& gazetteer,
                                     const VocabBuildConfig& cfg = {}) {
    if (train.documents.size() != labels.size())
        throw ConfigError("label/document count mismatch in build_vocabularies");

    // Occurrence and per-class vote counts per surface token.
    std::map<std::string, long long> count;
    std::map<std::string, std::array<long long, kTokenClassCount>> votes;
    for (std::size_t d = 0; d < train.documents.size(); ++d) {
        const auto& doc = train.documents[d];
        const auto& lab = labels[d];
        if (doc.size() != lab.size()) throw ConfigError("label/token count mismatch");
        for (std::size_t i = 0; i < doc.size(); ++i) {
            ++count[doc[i]];
            auto& v = votes[doc[i]];
            ++v[static_cast<std::size_t>(lab[i])];
        }
    }

    Vocabulary vocab;
    vocab.unk_id = 0;
    vocab.id_to_word.push_back(cfg.unk_token);
    vocab.train_count.push_back(0);
    vocab.word_class.push_back(TokenClass::Plain);
    for (const auto& [word, c] : count) {
        if (c < cfg.min_count) {
            vocab.train_count[0] += c;  // mass folded into <unk>
            continue;
        }
        vocab.id_to_word.push_back(word);
        vocab.train_count.push_back(c);
        vocab.word_class.push_back(detail::vote_class(votes[word]));
    }
    for (int i = 0; i < vocab.size(); ++i) vocab.word_to_id[vocab.id_to_word[static_cast<std::size_t>(i)]] = i;

    // Class vocabularies with side data.
    for (int i = 0; i < vocab.size(); ++i) {
        TokenClass c = vocab.word_class[static_cast<std::size_t>(i)];
        if (c == TokenClass::Plain) continue;
        auto& cv = vocab.class_vocab[static_cast<int>(c)];
        const std::string& word = vocab.id_to_word[static_cast<std::size_t>(i)];
        cv.word_to_local[i] = cv.size();
        cv.members.push_back(i);
        cv.counts.push_back(vocab.train_count[static_cast<std::size_t>(i)]);
        if (is_number_class(c)) {
            auto value = parse_number(word);
            if (!value) throw DataError("cannot parse numeric side data for token: " + word);
            cv.values.push_back(*value);
            cv.decimals.push_back(surface_decimals(word));
        } else {
            const GazetteerEntry* e = gazetteer.find(word);
            if (!e) throw DataError("gazetteer has no entry for geo token: " + word);
            cv.coords.emplace_back(e->latitude, e->longitude);
        }
    }

    // Class-augmented head vocabulary: plain words then tags.
    vocab.class_head_of_word.assign(static_cast<std::size_t>(vocab.size()), -1);
    vocab.tag_id.fill(-1);
    for (int i = 0; i < vocab.size(); ++i) {
        if (vocab.word_class[static_cast<std::size_t>(i)] != TokenClass::Plain) continue;
        vocab.class_head_of_word[static_cast<std::size_t>(i)] = static_cast<int>(vocab.class_head_names.size());
        vocab.class_head_names.push_back(vocab.id_to_word[static_cast<std::size_t>(i)]);
        vocab.class_head_word.push_back(i);
    }
    for (TokenClass c : vocab.present_classes()) {
        vocab.tag_id[static_cast<std::size_t>(static_cast<int>(c))] = static_cast<int>(vocab.class_head_names.size());
        vocab.class_head_names.push_back(std::string("<") + class_name(c) + ">");
        vocab.class_head_word.push_back(-1);
    }
    return vocab;
}

// ---------------------------------------------------------------------------
// Tagged corpus and streams
// ---------------------------------------------------------------------------

struct TaggedCorpus {
    std::vector<int> tokens;                 // V_W ids
    std::vector<TokenClass> classes;         // type-level class per position
    std::vector<std::int64_t> prev_same_class;  // index of previous same-class token in doc, -1
    std::vector<std::size_t> doc_begin;      // start offsets, plus sentinel = tokens.size()

    std::size_t size() const { return tokens.size(); }
    std::size_t doc_count() const { return doc_begin.empty() ? 0 : doc_begin.size() - 1; }
};

// Maps a raw (de-tokenized, chunked) corpus onto vocabulary ids. Positions are
// labeled with the type-level class of their token; OOV tokens become <unk>
// and are plain. prev_same_class links never cross document boundaries.
inline TaggedCorpus tag_corpus(const RawCorpus& corpus, const Vocabulary& vocab) {
    TaggedCorpus tagged;
    for (const auto& doc : corpus.documents) {
        tagged.doc_begin.push_back(tagged.tokens.size());
        std::array<std::int64_t, kTokenClassCount> last;
        last.fill(-1);
        for (const auto& word : doc) {
            int id = vocab.id_of(word);
            TokenClass c = vocab.word_class[static_cast<std::size_t>(id)];
            std::int64_t pos = static_cast<std::int64_t>(tagged.tokens.size());
            tagged.tokens.push_back(id);
            tagged.classes.push_back(c);
            if (c == TokenClass::Plain) {
                tagged.prev_same_class.push_back(-1);
            } else {
                tagged.prev_same_class.push_back(last[static_cast<std::size_t>(c)]);
                last[static_cast<std::size_t>(c)] = pos;
            }
        }
    }
    tagged.doc_begin.push_back(tagged.tokens.size());
    return tagged;
}

struct TagStreams {
    std::vector<int> class_head;  // class-head ids, aligned with positions
    struct PerClass {
        std::vector<int> local_ids;          // class-local ids, in stream order
        std::vector<std::size_t> positions;  // alignment back into the tagged stream
    };
    std::array<PerClass, kTokenClassCount> per_class;
};

inline TagStreams tag_stream(const TaggedCorpus& tagged, const Vocabulary& vocab) {
    TagStreams out;
    out.class_head.reserve(tagged.size());
    for (std::size_t i = 0; i < tagged.size(); ++i) {
        TokenClass c = tagged.classes[i];
        int word = tagged.tokens[i];
        if (c == TokenClass::Plain) {
            out.class_head.push_back(vocab.class_head_of_word[static_cast<std::size_t>(word)]);
        } else {
            out.class_head.push_back(vocab.tag_id[static_cast<std::size_t>(static_cast<int>(c))]);
            auto& pc = out.per_class[static_cast<std::size_t>(static_cast<int>(c))];
            pc.local_ids.push_back(vocab.class_vocab[static_cast<int>(c)].local(word));
            pc.positions.push_back(i);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Serialization: columnar tagged corpus and vocabulary files
// ---------------------------------------------------------------------------

inline void save_tagged(const TaggedCorpus& tagged, const Vocabulary& vocab,
                        const std::string& path, const std::string& meta = "") {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write tagged corpus: " + path);
    if (!meta.empty()) out << "# " << meta << "\n";
    std::size_t next_doc = 1;
    for (std::size_t i = 0; i < tagged.size(); ++i) {
        if (next_doc + 1 < tagged.doc_begin.size() && i == tagged.doc_begin[next_doc]) {
            out << "\n";  // blank line between documents
            ++next_doc;
        }
        std::int64_t prev = tagged.prev_same_class[i];
        std::int64_t offset = prev < 0 ? 0 : static_cast<std::int64_t>(i) - prev;
        out << vocab.id_to_word[static_cast<std::size_t>(tagged.tokens[i])] << '\t'
            << class_name(tagged.classes[i]) << '\t' << offset << '\n';
    }
}

inline TaggedCorpus load_tagged(const std::string& path, const Vocabulary& vocab) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open tagged corpus: " + path);
    TaggedCorpus tagged;
    std::string line;
    bool in_doc = false;
    while (std::getline(in, line)) {
        if (!line.empty() && line[0] == '#') continue;
        if (line.empty()) {
            in_doc = false;
            continue;
        }
        if (!in_doc) {
            tagged.doc_begin.push_back(tagged.tokens.size());
            in_doc = true;
        }
        auto cols = split_ws(line);
        if (cols.size() != 3) throw DataError("malformed tagged row: " + line);
        int id = vocab.id_of(cols[0]);
        auto cls = class_from_name(cols[1]);
        if (!cls) throw DataError("unknown class label: " + cols[1]);
        std::int64_t offset = std::stoll(cols[2]);
        std::int64_t pos = static_cast<std::int64_t>(tagged.tokens.size());
        tagged.tokens.push_back(id);
        tagged.classes.push_back(*cls);
        tagged.prev_same_class.push_back(offset == 0 ? -1 : pos - offset);
    }
    tagged.doc_begin.push_back(tagged.tokens.size());
    return tagged;
}

inline void save_vocabulary(const Vocabulary& vocab, const std::string& path,
                            const std::string& meta = "") {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write vocabulary: " + path);
    if (!meta.empty()) out << "# " << meta << "\n";
    for (int i = 0; i < vocab.size(); ++i) {
        TokenClass c = vocab.word_class[static_cast<std::size_t>(i)];
        out << vocab.id_to_word[static_cast<std::size_t>(i)] << '\t' << i << '\t' << class_name(c)
            << '\t' << vocab.train_count[static_cast<std::size_t>(i)];
        if (is_number_class(c)) {
            const auto& cv = vocab.class_vocab[static_cast<int>(c)];
            int local = cv.local(i);
            out << '\t' << cv.values[static_cast<std::size_t>(local)];
        } else if (is_geo_class(c)) {
            const auto& cv = vocab.class_vocab[static_cast<int>(c)];
            int local = cv.local(i);
            out << '\t' << cv.coords[static_cast<std::size_t>(local)].first << ','
                << cv.coords[static_cast<std::size_t>(local)].second;
        }
        out << '\n';
    }
}

// Rebuilds a vocabulary from its file. Side data is re-parsed from the stored
// columns, so a load round-trips without the gazetteer.
inline Vocabulary load_vocabulary(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open vocabulary: " + path);
    Vocabulary vocab;
    std::string line;
    struct Row {
        std::string word;
        TokenClass cls;
        long long count;
        std::string side;
    };
    std::vector<Row> rows;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        auto cols = split_ws(line);
        if (cols.size() < 4) throw DataError("malformed vocabulary row: " + line);
        auto cls = class_from_name(cols[2]);
        if (!cls) throw DataError("unknown class label: " + cols[2]);
        rows.push_back({cols[0], *cls, std::stoll(cols[3]), cols.size() > 4 ? cols[4] : ""});
    }
    for (std::size_t i = 0; i < rows.size(); ++i) {
        vocab.id_to_word.push_back(rows[i].word);
        vocab.train_count.push_back(rows[i].count);
        vocab.word_class.push_back(rows[i].cls);
        vocab.word_to_id[rows[i].word] = static_cast<int>(i);
    }
    vocab.unk_id = 0;
    for (int i = 0; i < vocab.size(); ++i) {
        TokenClass c = vocab.word_class[static_cast<std::size_t>(i)];
        if (c == TokenClass::Plain) continue;
        auto& cv = vocab.class_vocab[static_cast<int>(c)];
        const Row& row = rows[static_cast<std::size_t>(i)];
        cv.word_to_local[i] = cv.size();
        cv.members.push_back(i);
        cv.counts.push_back(row.count);
        if (is_number_class(c)) {
            cv.values.push_back(std::stod(row.side));
            cv.decimals.push_back(surface_decimals(row.word));
        } else {
            auto comma = row.side.find(',');
            if (comma == std::string::npos) throw DataError("malformed geo side data: " + row.side);
            cv.coords.emplace_back(std::stod(row.side.substr(0, comma)),
                                   std::stod(row.side.substr(comma + 1)));
        }
    }
    vocab.class_head_of_word.assign(static_cast<std::size_t>(vocab.size()), -1);
    vocab.tag_id.fill(-1);
    for (int i = 0; i < vocab.size(); ++i) {
        if (vocab.word_class[static_cast<std::size_t>(i)] != TokenClass::Plain) continue;
        vocab.class_head_of_word[static_cast<std::size_t>(i)] = static_cast<int>(vocab.class_head_names.size());
        vocab.class_head_names.push_back(vocab.id_to_word[static_cast<std::size_t>(i)]);
        vocab.class_head_word.push_back(i);
    }
    for (TokenClass c : vocab.present_classes()) {
        vocab.tag_id[static_cast<std::size_t>(static_cast<int>(c))] = static_cast<int>(vocab.class_head_names.size());
        vocab.class_head_names.push_back(std::string("<") + class_name(c) + ">");
        vocab.class_head_word.push_back(-1);
    }
    return vocab;
}

}  // namespace nslm
