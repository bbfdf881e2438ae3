// Run configuration: one sectioned key-value file layered over defaults.
// Every hyperparameter with a published setting keeps that value as its
// default (650 dims, cache 500/0.25/0.75, sampled softmax 2500, ...).

#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "nslm/language_model.hpp"

namespace nslm {

struct RunConfig {
    // [paths]
    std::string train = "data/sample_corpus/train.txt";
    std::string valid = "data/sample_corpus/valid.txt";
    std::string test = "data/sample_corpus/test.txt";
    std::string gazetteer = "data/gazetteer.tsv";
    std::string units = "data/units.tsv";
    std::string out_dir = "out";
    std::string pretrained_embeddings;  // optional token-per-line vector file

    // [corpus]
    int vocab_min_count = 2;
    long long min_city_population = 500000;

    // [model]
    ModelConfig model;

    // [micro]
    double alpha = 0.1;

    // [eval]
    std::vector<long long> rarity_edges = {1, 10, 100, 1000};
    bool eval_cache = true;
    bool eval_crnn = false;
    bool eval_ensemble = true;
    std::string eval_split = "test";

    // [synth]
    std::vector<long long> synth_sizes = {100, 1000};
    double synth_train_fraction = 0.8;

    std::uint64_t seed = 42;
    int threads = 0;  // 0 = hardware default

    std::string vocab_path() const { return out_dir + "/vocab.tsv"; }
    std::string tagged_path(const std::string& split) const { return out_dir + "/" + split + ".tagged.tsv"; }
    std::string checkpoint_path() const { return out_dir + "/model.ckpt"; }
    std::string micro_model_path(TokenClass c) const {
        return out_dir + "/mm_" + class_name(c) + ".txt";
    }
};

namespace detail {

inline bool parse_bool(const std::string& v) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError("not a boolean: " + v);
}

inline std::vector<long long> parse_list(const std::string& v) {
    std::vector<long long> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(std::stoll(item));
    return out;
}

inline std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

}  // namespace detail

inline void apply_config_entry(RunConfig& cfg, const std::string& section, const std::string& key,
                               const std::string& value) {
    const std::string k = section.empty() ? key : section + "." + key;
    auto& m = cfg.model;
    if (k == "paths.train") cfg.train = value;
    else if (k == "paths.valid") cfg.valid = value;
    else if (k == "paths.test") cfg.test = value;
    else if (k == "paths.gazetteer") cfg.gazetteer = value;
    else if (k == "paths.units") cfg.units = value;
    else if (k == "paths.out_dir") cfg.out_dir = value;
    else if (k == "paths.pretrained_embeddings") cfg.pretrained_embeddings = value;
    else if (k == "corpus.vocab_min_count") cfg.vocab_min_count = std::stoi(value);
    else if (k == "corpus.min_city_population") cfg.min_city_population = std::stoll(value);
    else if (k == "model.dim") m.dim = std::stoi(value);
    else if (k == "model.layers") m.layers = std::stoi(value);
    else if (k == "model.dropout") m.dropout = static_cast<real>(std::stod(value));
    else if (k == "model.bptt") m.bptt = std::stoi(value);
    else if (k == "model.batch") m.batch = std::stoi(value);
    else if (k == "model.learning_rate") m.learning_rate = static_cast<real>(std::stod(value));
    else if (k == "model.lr_decay") m.lr_decay = static_cast<real>(std::stod(value));
    else if (k == "model.clip_norm") m.clip_norm = static_cast<real>(std::stod(value));
    else if (k == "model.max_epochs") m.max_epochs = std::stoi(value);
    else if (k == "model.sampled_softmax") m.sampled_softmax = std::stoi(value);
    else if (k == "model.init_range") m.init_range = static_cast<real>(std::stod(value));
    else if (k == "model.multi_task") m.multi_task = detail::parse_bool(value);
    else if (k == "model.single_task_summation") m.single_task_summation = detail::parse_bool(value);
    else if (k == "model.ground") m.ground = detail::parse_bool(value);
    else if (k == "model.stop_at_train_ppl") m.stop_at_train_ppl = static_cast<real>(std::stod(value));
    else if (k == "cache.window") m.cache.window = std::stoi(value);
    else if (k == "cache.lambda") m.cache.lambda = static_cast<real>(std::stod(value));
    else if (k == "cache.theta") m.cache.theta = static_cast<real>(std::stod(value));
    else if (k == "micro.alpha") cfg.alpha = std::stod(value);
    else if (k == "eval.rarity_edges") cfg.rarity_edges = detail::parse_list(value);
    else if (k == "eval.cache") cfg.eval_cache = detail::parse_bool(value);
    else if (k == "eval.crnn") cfg.eval_crnn = detail::parse_bool(value);
    else if (k == "eval.ensemble") cfg.eval_ensemble = detail::parse_bool(value);
    else if (k == "eval.split") cfg.eval_split = value;
    else if (k == "synth.sizes") cfg.synth_sizes = detail::parse_list(value);
    else if (k == "synth.train_fraction") cfg.synth_train_fraction = std::stod(value);
    else if (k == "run.seed") cfg.seed = std::stoull(value);
    else if (k == "run.threads") cfg.threads = std::stoi(value);
    else throw ConfigError("unknown configuration key: " + k);
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open config file: " + path);
    RunConfig cfg;
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string t = detail::trim(line);
        if (t.empty() || t[0] == '#' || t[0] == ';') continue;
        if (t.front() == '[' && t.back() == ']') {
            section = t.substr(1, t.size() - 2);
            continue;
        }
        auto eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
        try {
            apply_config_entry(cfg, section, detail::trim(t.substr(0, eq)), detail::trim(t.substr(eq + 1)));
        } catch (const ConfigError&) {
            throw;
        } catch (const std::exception& e) {
            throw ConfigError("config line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return cfg;
}

inline std::string canonical_config_dump(const RunConfig& c) {
    std::ostringstream ss;
    ss << std::setprecision(17);
    ss << "train=" << c.train << ";valid=" << c.valid << ";test=" << c.test
       << ";gazetteer=" << c.gazetteer << ";units=" << c.units
       << ";min_count=" << c.vocab_min_count << ";min_pop=" << c.min_city_population
       << ";dim=" << c.model.dim << ";layers=" << c.model.layers << ";dropout=" << c.model.dropout
       << ";bptt=" << c.model.bptt << ";batch=" << c.model.batch << ";lr=" << c.model.learning_rate
       << ";lr_decay=" << c.model.lr_decay << ";clip=" << c.model.clip_norm
       << ";epochs=" << c.model.max_epochs << ";sampled=" << c.model.sampled_softmax
       << ";init=" << c.model.init_range << ";multi=" << c.model.multi_task
       << ";sts=" << c.model.single_task_summation << ";ground=" << c.model.ground
       << ";cache=" << c.model.cache.window << "/" << c.model.cache.lambda << "/" << c.model.cache.theta
       << ";alpha=" << c.alpha << ";seed=" << c.seed;
    return ss.str();
}

inline std::uint64_t config_hash(const RunConfig& c) { return fnv1a(canonical_config_dump(c)); }

}  // namespace nslm
