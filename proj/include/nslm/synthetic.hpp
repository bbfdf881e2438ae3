// Increment-function experiment: consecutive integer pairs, a small LSTM
// that memorizes them, and a difference micro-model that generalizes.

#pragma once

#include <algorithm>
#include <numeric>

#include "nslm/evaluation.hpp"

namespace nslm {

struct IncrementSpec {
    long long n = 100;           // pairs ("k", "k+1") for k in 1..n
    double train_fraction = 0.8;
    std::uint64_t seed = 1;

    void validate() const {
        if (n < 10) throw ConfigError("increment experiment needs n >= 10");
        if (!(train_fraction > 0.0 && train_fraction < 1.0))
            throw ConfigError("train fraction must lie in (0, 1)");
    }
};

struct IncrementCorpus {
    RawCorpus train, test;
};

// Documents are the pairs ("k", "k+1"); the seeded shuffle splits pairs
// disjointly between train and test.
inline IncrementCorpus generate_increment_corpus(const IncrementSpec& spec) {
    spec.validate();
    std::vector<long long> firsts(static_cast<std::size_t>(spec.n));
    std::iota(firsts.begin(), firsts.end(), 1);
    std::mt19937_64 gen(spec.seed);
    std::shuffle(firsts.begin(), firsts.end(), gen);
    const auto train_count = static_cast<std::size_t>(spec.train_fraction * static_cast<double>(spec.n));

    IncrementCorpus out;
    out.train.split = Split::Train;
    out.test.split = Split::Test;
    for (std::size_t i = 0; i < firsts.size(); ++i) {
        auto& dst = i < train_count ? out.train : out.test;
        dst.documents.push_back({std::to_string(firsts[i]), std::to_string(firsts[i] + 1)});
    }
    return out;
}

// Closed vocabulary over 1..n+1 so test failure measures generalization, not
// out-of-vocabulary tokens. Every integer is one number class.
inline Vocabulary increment_vocabulary(long long n) {
    Vocabulary v;
    v.unk_id = 0;
    v.id_to_word.push_back("<unk>");
    v.train_count.push_back(0);
    v.word_class.push_back(TokenClass::Plain);
    auto& cv = v.class_vocab[static_cast<int>(TokenClass::OtherNumber)];
    for (long long k = 1; k <= n + 1; ++k) {
        int id = static_cast<int>(v.id_to_word.size());
        v.id_to_word.push_back(std::to_string(k));
        v.word_to_id[v.id_to_word.back()] = id;
        v.train_count.push_back(1);
        v.word_class.push_back(TokenClass::OtherNumber);
        cv.word_to_local[id] = cv.size();
        cv.members.push_back(id);
        cv.values.push_back(static_cast<double>(k));
        cv.decimals.push_back(0);
        cv.counts.push_back(1);
    }
    v.word_to_id["<unk>"] = 0;
    v.class_head_of_word.assign(static_cast<std::size_t>(v.size()), -1);
    v.class_head_of_word[0] = 0;
    v.tag_id.fill(-1);
    v.tag_id[static_cast<int>(TokenClass::OtherNumber)] = 1;
    v.class_head_names = {"<unk>", "<other-number>"};
    v.class_head_word = {0, -1};
    return v;
}

struct IncrementRow {
    long long n = 0;
    double nnlm_train_ppl = 0;
    double nnlm_test_ppl = 0;
    double nslm_test_ppl = 0;
    int epochs = 0;
};

struct IncrementOptions {
    int dim = 100;
    int max_epochs = 200;
    int batch = 10;
    real learning_rate = real(2.0);
    real init_range = real(0.2);  // the tiny model needs strong signals to memorize
    real stop_at_train_ppl = real(1.02);
};

// Trains the word head to memorize the training pairs, fits the difference
// Gaussian on the same pairs, and scores second-token perplexity on both
// splits.
inline IncrementRow run_increment_cell(const IncrementSpec& spec, const IncrementOptions& opts = {}) {
    auto corpus = generate_increment_corpus(spec);
    auto vocab = increment_vocabulary(spec.n);
    auto train_tagged = tag_corpus(corpus.train, vocab);
    auto test_tagged = tag_corpus(corpus.test, vocab);

    ModelConfig cfg;
    cfg.dim = opts.dim;
    cfg.layers = 1;
    cfg.dropout = 0;
    cfg.bptt = 1;    // documents are pairs; one scored position per window slot
    cfg.batch = opts.batch;
    cfg.learning_rate = opts.learning_rate;
    cfg.init_range = opts.init_range;
    cfg.max_epochs = opts.max_epochs;
    cfg.seed = spec.seed;
    cfg.multi_task = false;
    cfg.single_task_summation = true;  // class mass is one; NSLM scores P_MM directly
    cfg.stop_at_train_ppl = opts.stop_at_train_ppl;

    std::vector<EpochLog> log;
    auto model = train_model(train_tagged, nullptr, vocab, cfg, &log);

    auto train_stream = extract_class_stream(train_tagged, vocab, TokenClass::OtherNumber);
    MicroModelSet mms;
    Rng fit_rng(spec.seed);
    mms[static_cast<int>(TokenClass::OtherNumber)] =
        fit_micro_model(TokenClass::OtherNumber, MetricKind::Difference, PdfKind::Gaussian, vocab,
                        train_stream, fit_rng);

    EvalOptions eval;
    eval.hierarchical = false;
    eval.nslm = true;

    auto train_result = evaluate_corpus(model, vocab, train_tagged, &mms, nullptr, eval);
    auto test_result = evaluate_corpus(model, vocab, test_tagged, &mms, nullptr, eval);
    auto train_report = build_report(train_result, vocab.train_count);
    auto test_report = build_report(test_result, vocab.train_count);

    IncrementRow row;
    row.n = spec.n;
    row.epochs = static_cast<int>(log.size());
    int flat = train_result.predictor_index("flat");
    int nslm = test_result.predictor_index("nslm");
    row.nnlm_train_ppl = train_report.row("global")->perplexity[static_cast<std::size_t>(flat)];
    row.nnlm_test_ppl = test_report.row("global")->perplexity[static_cast<std::size_t>(flat)];
    row.nslm_test_ppl = test_report.row("global")->perplexity[static_cast<std::size_t>(nslm)];
    return row;
}

// Table-shaped report over several corpus sizes, through the shared report
// formats.
inline EvalReport run_increment_experiment(const std::vector<long long>& sizes,
                                           const IncrementSpec& base = {},
                                           const IncrementOptions& opts = {}) {
    EvalReport report;
    report.predictors = {"nnlm-train", "nnlm-test", "nslm-test"};
    report.baseline = "nnlm-test";
    for (long long n : sizes) {
        IncrementSpec spec = base;
        spec.n = n;
        auto row = run_increment_cell(spec, opts);
        ReportRow r;
        r.mask = "N=" + std::to_string(n);
        r.count = n;
        r.perplexity = {row.nnlm_train_ppl, row.nnlm_test_ppl, row.nslm_test_ppl};
        report.rows.push_back(std::move(r));
    }
    report.metadata["experiment"] = "increment";
    report.metadata["train_fraction"] = base.train_fraction;
    report.metadata["seed"] = base.seed;
    return report;
}

}  // namespace nslm
