// nslm: preprocess corpora, train the multi-task model, select micro-models,
// evaluate, and run the increment experiment, all from one config file.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "nslm/config.hpp"
#include "nslm/evaluation.hpp"
#include "nslm/synthetic.hpp"

namespace fs = std::filesystem;
using namespace nslm;

namespace {

// distinct exit codes per failure family
constexpr int kExitUsage = 1;
constexpr int kExitMissingInput = 2;
constexpr int kExitVocabMismatch = 3;
constexpr int kExitDiverged = 4;
constexpr int kExitBadConfig = 5;

struct CommonArgs {
    std::string config_path;
    std::string out_override;
    std::uint64_t seed = 0;
    bool seed_set = false;
    int threads = 0;
    bool dry_run = false;
};

RunConfig resolve_config(const CommonArgs& args) {
    RunConfig cfg = args.config_path.empty() ? RunConfig{} : load_run_config(args.config_path);
    if (!args.out_override.empty()) cfg.out_dir = args.out_override;
    if (args.seed_set) cfg.seed = args.seed;
    cfg.model.seed = cfg.seed;
    if (args.threads > 0) cfg.threads = args.threads;
#ifdef _OPENMP
    if (cfg.threads > 0) omp_set_num_threads(cfg.threads);
#endif
    return cfg;
}

std::string run_meta(const RunConfig& cfg) {
    return "config " + hash_hex(config_hash(cfg)) + " seed " + std::to_string(cfg.seed);
}

nlohmann::json run_meta_json(const RunConfig& cfg) {
    return {{"config_hash", hash_hex(config_hash(cfg))}, {"seed", cfg.seed}};
}

void require_file(const std::string& path) {
    if (!fs::exists(path)) throw DataError("missing input: " + path);
}

int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const ConfigError*>(&e)) return kExitBadConfig;
    if (dynamic_cast<const TrainingError*>(&e)) return kExitDiverged;
    if (const auto* d = dynamic_cast<const DataError*>(&e)) {
        return std::string(d->what()).find("hash mismatch") != std::string::npos ? kExitVocabMismatch
                                                                                 : kExitMissingInput;
    }
    return kExitUsage;
}

// ---------------------------------------------------------------------------

int cmd_preprocess(const RunConfig& cfg, bool dry_run) {
    for (const auto& p : {cfg.train, cfg.valid, cfg.test, cfg.gazetteer, cfg.units}) require_file(p);
    if (dry_run) {
        std::cout << "plan: load gazetteer " << cfg.gazetteer << " (cities over "
                  << cfg.min_city_population << ")\n"
                  << "plan: detokenize + chunk + classify " << cfg.train << ", " << cfg.valid << ", "
                  << cfg.test << "\n"
                  << "plan: write " << cfg.vocab_path() << " and tagged splits under " << cfg.out_dir
                  << "\n";
        return 0;
    }
    auto gazetteer = filter_gazetteer(load_gazetteer(cfg.gazetteer), cfg.min_city_population);
    GazetteerIndex index(gazetteer);
    auto units = load_unit_table(cfg.units);

    auto prepare = [&](const std::string& path, Split split) {
        auto raw = load_raw_corpus(path, split);
        return chunk_locations(detokenize_numbers(raw), index);
    };
    auto train = prepare(cfg.train, Split::Train);
    auto labels = classify_corpus(train, index, units);
    auto vocab = build_vocabularies(train, labels, index, {.min_count = cfg.vocab_min_count});

    fs::create_directories(cfg.out_dir);
    const std::string meta = run_meta(cfg);
    save_vocabulary(vocab, cfg.vocab_path(), meta);
    save_tagged(tag_corpus(train, vocab), vocab, cfg.tagged_path("train"), meta);
    save_tagged(tag_corpus(prepare(cfg.valid, Split::Valid), vocab), vocab, cfg.tagged_path("valid"), meta);
    save_tagged(tag_corpus(prepare(cfg.test, Split::Test), vocab), vocab, cfg.tagged_path("test"), meta);

    std::cout << "vocabulary: " << vocab.size() << " types, class-head " << vocab.class_head_size()
              << " (hash " << hash_hex(vocab.hash()) << ")\n";
    for (TokenClass c : vocab.present_classes())
        std::cout << "  " << class_name(c) << ": " << vocab.class_vocab[static_cast<int>(c)].size()
                  << " types\n";
    return 0;
}

int cmd_train(const RunConfig& cfg, bool dry_run) {
    for (const auto& p : {cfg.vocab_path(), cfg.tagged_path("train"), cfg.tagged_path("valid")})
        require_file(p);
    if (dry_run) {
        std::cout << "plan: train " << cfg.model.dim << "-dim " << cfg.model.layers
                  << "-layer model, batch " << cfg.model.batch << ", bptt " << cfg.model.bptt
                  << ", up to " << cfg.model.max_epochs << " epochs\n"
                  << "plan: write " << cfg.checkpoint_path() << "\n";
        return 0;
    }
    auto vocab = load_vocabulary(cfg.vocab_path());
    auto train = load_tagged(cfg.tagged_path("train"), vocab);
    auto valid = load_tagged(cfg.tagged_path("valid"), vocab);

    ModelConfig mc = cfg.model;
    if (!cfg.pretrained_embeddings.empty()) {
        require_file(cfg.pretrained_embeddings);
        mc.pretrained_embeddings = cfg.pretrained_embeddings;
    }
    std::vector<EpochLog> log;
    auto model = train_model(train, &valid, vocab, mc, &log, &std::cout);
    fs::create_directories(cfg.out_dir);
    save_language_model(model, cfg.checkpoint_path(), run_meta_json(cfg));
    std::ofstream lf(cfg.out_dir + "/train_log.txt");
    lf << "# " << run_meta(cfg) << "\n";
    for (const auto& e : log)
        lf << "epoch " << e.epoch << "\ttrain_loss " << e.train_loss << "\tvalid_ppl " << e.valid_ppl
           << "\tlr " << e.lr << "\n";
    std::cout << "checkpoint written to " << cfg.checkpoint_path() << "\n";
    return 0;
}

int cmd_gridsearch(const RunConfig& cfg, bool dry_run) {
    for (const auto& p : {cfg.vocab_path(), cfg.tagged_path("train"), cfg.tagged_path("valid"), cfg.units})
        require_file(p);
    if (dry_run) {
        std::cout << "plan: fit candidate {metric, pdf} pairs per class on the training split\n"
                  << "plan: select by validation class-conditional perplexity, write mm_<class>.txt\n";
        return 0;
    }
    auto vocab = load_vocabulary(cfg.vocab_path());
    auto train = load_tagged(cfg.tagged_path("train"), vocab);
    auto valid = load_tagged(cfg.tagged_path("valid"), vocab);
    auto units = load_unit_table(cfg.units);

    fs::create_directories(cfg.out_dir);
    std::ofstream log(cfg.out_dir + "/gridsearch_log.txt");
    log << "# " << run_meta(cfg) << "\n";
    Rng rng(cfg.seed);
    FitConfig fit;
    fit.alpha = cfg.alpha;
    for (TokenClass c : vocab.present_classes()) {
        auto train_stream = extract_class_stream(train, vocab, c, &units);
        auto valid_stream = extract_class_stream(valid, vocab, c, &units);
        if (valid_stream.local.empty()) {
            log << class_name(c) << "\tskipped: no validation occurrences\n";
            continue;
        }
        auto result = grid_search(c, default_candidates(c), vocab, train_stream, valid_stream, rng,
                                  fit, &units);
        save_micro_model(result.model, cfg.micro_model_path(c), run_meta(cfg));
        for (const auto& entry : result.log)
            log << class_name(c) << "\t" << metric_name(entry.candidate.metric) << "+"
                << pdf_name(entry.candidate.pdf)
                << (entry.candidate.components ? "(K=" + std::to_string(entry.candidate.components) + ")" : "")
                << "\tvalid_ppl " << entry.valid_perplexity << "\tparams " << entry.parameters
                << (entry.note.empty() ? "" : "\t" + entry.note) << "\n";
        std::cout << class_name(c) << ": selected " << metric_name(result.chosen.candidate.metric)
                  << " + " << pdf_name(result.chosen.candidate.pdf) << " (valid ppl "
                  << result.chosen.valid_perplexity << ")\n";
    }
    return 0;
}

int cmd_eval(const RunConfig& cfg, bool dry_run) {
    for (const auto& p : {cfg.vocab_path(), cfg.tagged_path(cfg.eval_split), cfg.checkpoint_path()})
        require_file(p);
    if (dry_run) {
        std::cout << "plan: score " << cfg.eval_split << " split with flat/hierarchical/nslm"
                  << (cfg.eval_crnn ? "/crnn" : "") << (cfg.eval_cache ? " plus cache variants" : "")
                  << "\nplan: write report.txt and report.json under " << cfg.out_dir << "\n";
        return 0;
    }
    auto vocab = load_vocabulary(cfg.vocab_path());
    auto eval_tagged = load_tagged(cfg.tagged_path(cfg.eval_split), vocab);
    auto model = load_language_model(cfg.checkpoint_path(), vocab);
    auto units = load_unit_table(cfg.units);

    MicroModelSet mms;
    bool have_mms = !vocab.present_classes().empty();
    for (TokenClass c : vocab.present_classes()) {
        const std::string path = cfg.micro_model_path(c);
        if (!fs::exists(path)) {
            have_mms = false;
            continue;
        }
        mms[static_cast<std::size_t>(static_cast<int>(c))] = load_micro_model(path, vocab);
    }

    std::array<std::vector<real>, kTokenClassCount> crnn_dists{};
    if (cfg.eval_crnn) {
        auto train = load_tagged(cfg.tagged_path("train"), vocab);
        Rng rng(cfg.seed);
        for (TokenClass c : vocab.present_classes()) {
            auto stream = extract_class_stream(train, vocab, c, &units);
            const auto& cv = vocab.class_vocab[static_cast<int>(c)];
            std::vector<std::string> occurrences;
            for (int local : stream.local)
                occurrences.push_back(vocab.id_to_word[static_cast<std::size_t>(cv.members[static_cast<std::size_t>(local)])]);
            std::vector<std::string> members;
            for (int id : cv.members) members.push_back(vocab.id_to_word[static_cast<std::size_t>(id)]);
            auto crnn = train_char_rnn(c, occurrences, 100, 8, rng);
            crnn_dists[static_cast<std::size_t>(static_cast<int>(c))] =
                char_rnn_class_distribution(crnn, members);
        }
    }

    EvalOptions opts;
    opts.hierarchical = model.heads.cls >= 0;
    opts.nslm = have_mms;
    opts.crnn = cfg.eval_crnn;
    opts.cache_variants = cfg.eval_cache;
    opts.cache = cfg.model.cache;
    opts.units = &units;
    opts.batch = cfg.model.batch;
    opts.bptt = cfg.model.bptt;

    auto result = evaluate_corpus(model, vocab, eval_tagged, have_mms ? &mms : nullptr,
                                  cfg.eval_crnn ? &crnn_dists : nullptr, opts);
    nlohmann::json meta = run_meta_json(cfg);
    meta["vocab_hash"] = hash_hex(vocab.hash());
    meta["split"] = cfg.eval_split;
    if (cfg.eval_ensemble && have_mms && cfg.eval_split != "valid" &&
        fs::exists(cfg.tagged_path("valid"))) {
        // interpolation weight tuned on the validation split
        auto valid_tagged = load_tagged(cfg.tagged_path("valid"), vocab);
        auto valid_result = evaluate_corpus(model, vocab, valid_tagged, &mms,
                                            cfg.eval_crnn ? &crnn_dists : nullptr, opts);
        double lambda = tune_ensemble_lambda(valid_result, "flat", "nslm");
        add_ensemble_column(result, "flat", "nslm", lambda);
        meta["ensemble_lambda"] = lambda;
    }

    ReportConfig rc;
    rc.rarity_edges = cfg.rarity_edges;
    auto report = build_report(result, vocab.train_count, rc, meta);
    fs::create_directories(cfg.out_dir);
    std::ofstream txt(cfg.out_dir + "/report.txt");
    txt << "# " << run_meta(cfg) << "\n" << format_report_text(report);
    std::ofstream js(cfg.out_dir + "/report.json");
    js << report_to_json(report).dump(2) << "\n";
    std::cout << format_report_text(report);
    return 0;
}

int cmd_synth(const RunConfig& cfg, bool dry_run) {
    if (dry_run) {
        std::cout << "plan: increment experiment for N in {";
        for (std::size_t i = 0; i < cfg.synth_sizes.size(); ++i)
            std::cout << (i ? ", " : "") << cfg.synth_sizes[i];
        std::cout << "}\nplan: write synth_report.txt and synth_report.json under " << cfg.out_dir
                  << "\n";
        return 0;
    }
    IncrementSpec spec;
    spec.train_fraction = cfg.synth_train_fraction;
    spec.seed = cfg.seed;
    auto report = run_increment_experiment(cfg.synth_sizes, spec);
    report.metadata.update(run_meta_json(cfg));
    fs::create_directories(cfg.out_dir);
    std::ofstream txt(cfg.out_dir + "/synth_report.txt");
    txt << "# " << run_meta(cfg) << "\n" << format_report_text(report);
    std::ofstream js(cfg.out_dir + "/synth_report.json");
    js << report_to_json(report).dump(2) << "\n";
    std::cout << format_report_text(report);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"neural-symbolic language modeling toolkit"};
    app.require_subcommand(1);

    CommonArgs args;
    for (auto* sub : {app.add_subcommand("preprocess", "tag corpora and build vocabularies"),
                      app.add_subcommand("train", "train the multi-task LSTM"),
                      app.add_subcommand("gridsearch", "select micro-models on the validation split"),
                      app.add_subcommand("eval", "score a split and emit reports"),
                      app.add_subcommand("synth", "run the increment-function experiment")}) {
        sub->add_option("--config", args.config_path, "configuration file");
        sub->add_option("--out", args.out_override, "output directory override");
        sub->add_option("--seed", args.seed, "seed override")->each([&args](const std::string&) {
            args.seed_set = true;
        });
        sub->add_option("--threads", args.threads, "worker thread count");
        sub->add_flag("--dry-run", args.dry_run, "validate inputs and print the plan only");
    }

    CLI11_PARSE(app, argc, argv);

    try {
        RunConfig cfg = resolve_config(args);
        if (app.got_subcommand("preprocess")) return cmd_preprocess(cfg, args.dry_run);
        if (app.got_subcommand("train")) return cmd_train(cfg, args.dry_run);
        if (app.got_subcommand("gridsearch")) return cmd_gridsearch(cfg, args.dry_run);
        if (app.got_subcommand("eval")) return cmd_eval(cfg, args.dry_run);
        if (app.got_subcommand("synth")) return cmd_synth(cfg, args.dry_run);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_code_for(e);
    }
    return kExitUsage;
}
