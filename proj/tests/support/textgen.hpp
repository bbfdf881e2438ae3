// Test-support corpus generator: wikitext-flavored documents with planted
// number locality (year walks, ranges, conversions) and geographic locality
// (per-document city clusters). Deterministic for a fixed seed.

#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "nslm/corpus.hpp"

namespace nslm::testgen {

struct TextGenOptions {
    std::uint64_t seed = 1;
    std::size_t train_tokens = 100000;
    std::size_t valid_tokens = 12000;
    std::size_t test_tokens = 12000;
    int plain_types = 3000;
    int year_lo = 1000, year_hi = 2080;
};

namespace detail {

inline std::vector<std::string> make_pseudo_words(int count, std::mt19937_64& gen) {
    static const char* syllables[] = {"ba", "ri", "mon", "vel", "ta", "so", "ken", "dur", "li",
                                      "gar", "ne", "pol", "sha", "tu", "wex", "ol", "fra", "mi",
                                      "cas", "ver", "do", "lum", "har", "sel", "qui", "nor", "ze"};
    const int ns = static_cast<int>(sizeof(syllables) / sizeof(syllables[0]));
    std::vector<std::string> words;
    std::set<std::string> seen;
    while (static_cast<int>(words.size()) < count) {
        int parts = 2 + static_cast<int>(gen() % 3);
        std::string w;
        for (int i = 0; i < parts; ++i) w += syllables[gen() % ns];
        if (seen.insert(w).second) words.push_back(w);
    }
    return words;
}

// wikitext-style tokenization of a non-negative integer: thousands groups
// separated by " @,@ "
inline std::string wikitext_int(long long v) {
    std::string digits = std::to_string(v);
    if (digits.size() <= 3) return digits;
    std::string out;
    int lead = static_cast<int>(digits.size()) % 3;
    if (lead == 0) lead = 3;
    out = digits.substr(0, static_cast<std::size_t>(lead));
    for (std::size_t i = static_cast<std::size_t>(lead); i < digits.size(); i += 3)
        out += " @,@ " + digits.substr(i, 3);
    return out;
}

inline std::string wikitext_decimal(long long whole, int tenth) {
    return wikitext_int(whole) + " @.@ " + std::to_string(tenth);
}

struct GeoPools {
    std::vector<GazetteerEntry> cities, states, countries;
    std::vector<std::vector<int>> city_neighbors;   // 12 nearest cities per city
    std::vector<std::vector<int>> state_neighbors;  // 4 nearest states per city
    std::vector<std::vector<int>> country_neighbors;

    static std::vector<int> nearest(const GazetteerEntry& from,
                                    const std::vector<GazetteerEntry>& pool, std::size_t k,
                                    bool skip_self = false) {
        std::vector<std::pair<double, int>> dist;
        for (std::size_t j = 0; j < pool.size(); ++j) {
            if (skip_self && pool[j].name == from.name) continue;
            double dlat = from.latitude - pool[j].latitude;
            double dlon = from.longitude - pool[j].longitude;
            dist.emplace_back(dlat * dlat + dlon * dlon, static_cast<int>(j));
        }
        std::sort(dist.begin(), dist.end());
        std::vector<int> out;
        for (std::size_t i = 0; i < dist.size() && i < k; ++i) out.push_back(dist[i].second);
        return out;
    }
};

inline GeoPools build_geo_pools(const std::vector<GazetteerEntry>& gazetteer) {
    GeoPools pools;
    for (const auto& e : gazetteer) {
        if (e.kind == PlaceKind::City) pools.cities.push_back(e);
        else if (e.kind == PlaceKind::State) pools.states.push_back(e);
        else pools.countries.push_back(e);
    }
    for (const auto& city : pools.cities) {
        pools.city_neighbors.push_back(GeoPools::nearest(city, pools.cities, 12, true));
        pools.state_neighbors.push_back(GeoPools::nearest(city, pools.states, 4));
        pools.country_neighbors.push_back(GeoPools::nearest(city, pools.countries, 4));
    }
    return pools;
}

}  // namespace detail

class CorpusGenerator {
public:
    CorpusGenerator(const TextGenOptions& opts, const std::vector<GazetteerEntry>& gazetteer,
                    const UnitTable& units)
        : opts_(opts), gen_(opts.seed), pools_(detail::build_geo_pools(gazetteer)), units_(units) {
        words_ = detail::make_pseudo_words(opts.plain_types, gen_);
        if (pools_.cities.empty() || pools_.states.empty() || pools_.countries.empty())
            throw DataError("corpus generator needs cities, states and countries");
    }

    // One blank-line-separated split of roughly `budget` tokens.
    std::string generate_split(std::size_t budget) {
        std::ostringstream out;
        std::size_t emitted = 0;
        while (emitted < budget) {
            std::string doc = generate_document();
            emitted += count_tokens(doc);
            out << doc << "\n\n";
        }
        return out.str();
    }

    void write_splits(const std::string& dir) {
        namespace fs = std::filesystem;
        fs::create_directories(dir);
        for (auto& [name, budget] :
             std::vector<std::pair<std::string, std::size_t>>{{"train", opts_.train_tokens},
                                                              {"valid", opts_.valid_tokens},
                                                              {"test", opts_.test_tokens}}) {
            std::ofstream f(dir + "/" + name + ".txt");
            if (!f) throw DataError("cannot write corpus split in " + dir);
            f << generate_split(budget);
        }
    }

private:
    // Zipf-ish plain word: rank r with weight 1/(r+3)
    const std::string& plain_word() {
        double u = uniform();
        // inverse of the truncated harmonic cdf, cheap approximation
        double x = std::pow(static_cast<double>(words_.size()), u);
        auto idx = static_cast<std::size_t>(x) - 1;
        if (idx >= words_.size()) idx = words_.size() - 1;
        return words_[idx];
    }

    double uniform() { return std::uniform_real_distribution<double>(0, 1)(gen_); }
    long long pick(long long n) { return static_cast<long long>(gen_() % static_cast<std::uint64_t>(n)); }

    int year_step() {
        double u = uniform();
        if (u < 0.55) return 1;  // peaked at one
        if (u < 0.70) return 0;
        if (u < 0.85) return 2;
        if (u < 0.93) return 3;
        if (u < 0.98) return 5;
        return 10;
    }

    std::string month() {
        static const char* months[] = {"January", "February", "March", "April", "May", "June",
                                       "July", "August", "September", "October", "November", "December"};
        return months[pick(12)];
    }

    std::string geo_token(const GazetteerEntry& e) { return e.name; }

    std::string generate_document() {
        // per-document state: a year cursor and a geographic cluster
        year_ = opts_.year_lo + 600 + static_cast<int>(pick(400));  // mostly 1600..2000
        if (uniform() < 0.25) year_ = opts_.year_lo + static_cast<int>(pick(opts_.year_hi - opts_.year_lo - 30));
        home_city_ = static_cast<int>(pick(static_cast<long long>(pools_.cities.size())));

        std::ostringstream doc;
        int sentences = 6 + static_cast<int>(pick(12));
        for (int s = 0; s < sentences; ++s) {
            if (s) doc << " ";
            doc << sentence();
        }
        return doc.str();
    }

    int nearby_city() {
        const auto& nb = pools_.city_neighbors[static_cast<std::size_t>(home_city_)];
        if (nb.empty() || uniform() < 0.2) return home_city_;
        return nb[static_cast<std::size_t>(pick(static_cast<long long>(std::min<std::size_t>(nb.size(), 6))))];
    }

    std::string next_year() {
        year_ += year_step();
        if (year_ > opts_.year_hi) year_ = opts_.year_lo + static_cast<int>(pick(900));
        return std::to_string(year_);
    }

    std::string sentence() {
        double u = uniform();
        std::ostringstream s;
        if (u < 0.14) {  // year events
            s << "the " << plain_word() << " of " << plain_word() << " happened in " << next_year() << " .";
        } else if (u < 0.24) {
            std::string a = next_year(), b = next_year();
            s << plain_word() << " began in " << a << " and ended in " << b << " .";
        } else if (u < 0.30) {  // dated event
            s << "on " << month() << " " << 1 + pick(28) << " , " << next_year() << " the "
              << plain_word() << " " << plain_word() << " .";
        } else if (u < 0.36) {  // round numbers
            static const long long rounds[] = {100, 200, 300, 400, 500, 600, 700, 800, 900,
                                               1000, 1200, 1500, 2000, 2500, 5000, 10000,
                                               15000, 20000, 50000, 100000, 250000, 500000};
            long long r = rounds[pick(22)];
            s << "the " << plain_word() << " counted " << detail::wikitext_int(r) << " " << plain_word() << " .";
        } else if (u < 0.42) {  // conversion pair (mostly correct)
            static const char* pairs[][2] = {{"miles", "km"}, {"kg", "lb"}};
            const auto& p = pairs[pick(2)];
            long long a = 30 + pick(60);  // targets stay clear of day-sized integers
            auto factor = units_.factor(p[0], p[1]);
            long long b = static_cast<long long>(std::llround(static_cast<double>(a) * *factor));
            if (uniform() < 0.08) b += 1 + pick(3);  // occasional sloppy conversion
            s << "it measured " << a << " " << p[0] << " ( " << detail::wikitext_int(b) << " " << p[1] << " ) .";
        } else if (u < 0.48) {  // decimals with mild locality
            long long whole = 30 + pick(40);
            int tenth = static_cast<int>(pick(10));
            s << "readings of " << detail::wikitext_decimal(whole, tenth) << " and "
              << detail::wikitext_decimal(whole + (pick(3) - 1), static_cast<int>(pick(10))) << " were "
              << plain_word() << " .";
        } else if (u < 0.54) {  // range over three-digit spans, disjoint from years
            long long a = 810 + pick(180);
            if (a % 100 == 0) ++a;
            long long b = a + 1 + pick(30);
            s << "the " << plain_word() << " war of " << a << " – " << b << " ended badly .";
        } else if (u < 0.70) {  // geographic cluster sentences
            int c1 = nearby_city(), c2 = nearby_city();
            double v = uniform();
            if (v < 0.45) {
                s << geo_token(pools_.cities[static_cast<std::size_t>(c1)]) << " and "
                  << geo_token(pools_.cities[static_cast<std::size_t>(c2)]) << " "
                  << plain_word() << " the " << plain_word() << " .";
            } else if (v < 0.75) {
                s << "the " << plain_word() << " moved from "
                  << geo_token(pools_.cities[static_cast<std::size_t>(c1)]) << " to "
                  << geo_token(pools_.cities[static_cast<std::size_t>(c2)]) << " in " << next_year() << " .";
            } else {
                const auto& sn = pools_.state_neighbors[static_cast<std::size_t>(c1)];
                const auto& cn = pools_.country_neighbors[static_cast<std::size_t>(c1)];
                s << geo_token(pools_.cities[static_cast<std::size_t>(c1)]) << " lies in "
                  << geo_token(pools_.states[static_cast<std::size_t>(sn[static_cast<std::size_t>(pick(static_cast<long long>(sn.size())))])])
                  << " near " << geo_token(pools_.countries[static_cast<std::size_t>(cn[static_cast<std::size_t>(pick(static_cast<long long>(cn.size())))])])
                  << " .";
            }
        } else {  // plain filler
            int len = 5 + static_cast<int>(pick(8));
            for (int i = 0; i < len; ++i) {
                if (i) s << " ";
                s << plain_word();
            }
            s << " .";
        }
        return s.str();
    }

    static std::size_t count_tokens(const std::string& text) {
        std::size_t n = 0;
        bool in_tok = false;
        for (char ch : text) {
            if (ch == ' ' || ch == '\n') {
                in_tok = false;
            } else if (!in_tok) {
                in_tok = true;
                ++n;
            }
        }
        return n;
    }

    TextGenOptions opts_;
    std::mt19937_64 gen_;
    detail::GeoPools pools_;
    UnitTable units_;
    std::vector<std::string> words_;
    int year_ = 1900;
    int home_city_ = 0;
};

}  // namespace nslm::testgen
