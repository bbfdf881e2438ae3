#include <doctest.h>

#include <cmath>

#include "nslm/evaluation.hpp"

using namespace nslm;

namespace {

std::vector<std::string> toks(std::initializer_list<const char*> list) {
    return std::vector<std::string>(list.begin(), list.end());
}

struct Pipeline {
    Vocabulary vocab;
    TaggedCorpus tagged;
};

Pipeline build_pipeline(std::vector<std::vector<std::string>> docs) {
    RawCorpus corpus;
    corpus.documents = std::move(docs);
    GazetteerIndex index({});
    UnitTable units;
    auto labels = classify_corpus(corpus, index, units);
    Pipeline p{build_vocabularies(corpus, labels, index, {.min_count = 1}), {}};
    p.tagged = tag_corpus(corpus, p.vocab);
    return p;
}

EvalResult hand_result(std::vector<double> probs, std::vector<int> words = {},
                       std::vector<TokenClass> classes = {}) {
    EvalResult r;
    r.predictors = {"flat"};
    for (std::size_t i = 0; i < probs.size(); ++i) {
        PositionScore s;
        s.position = i;
        s.word = words.empty() ? 0 : words[i];
        s.cls = classes.empty() ? TokenClass::Plain : classes[i];
        s.logp = {std::log(probs[i])};
        r.positions.push_back(std::move(s));
    }
    return r;
}

}  // namespace

TEST_CASE("masked perplexity follows the hand-computed mean") {
    // probabilities 0.5, 0.5, 0.25, 0.125 -> exp(mean nll) = 2^(7/4)
    auto result = hand_result({0.5, 0.5, 0.25, 0.125});
    auto report = build_report(result, {100});
    const ReportRow* global = report.row("global");
    REQUIRE(global != nullptr);
    CHECK(global->count == 4);
    CHECK(global->perplexity[0] == doctest::Approx(std::pow(2.0, 7.0 / 4.0)).epsilon(1e-12));
}

TEST_CASE("probability one everywhere gives perplexity one for every mask") {
    auto p = build_pipeline({toks({"a", "a", "a", "a", "a"}), toks({"a", "a", "a"})});
    ModelConfig cfg;
    cfg.dim = 6;
    cfg.layers = 1;
    Rng rng(1);
    auto model = build_model(p.vocab, cfg, rng);
    for (auto& t : model.params.tensors()) std::fill(t.data, t.data + t.size, real(0));
    model.params.heads[static_cast<std::size_t>(model.heads.word)].bias[static_cast<std::size_t>(p.vocab.id_of("a"))] = real(200);

    EvalOptions opts;
    opts.hierarchical = false;
    opts.nslm = false;
    auto result = evaluate_corpus(model, p.vocab, p.tagged, nullptr, nullptr, opts);
    auto report = build_report(result, p.vocab.train_count);
    CHECK(report.row("global")->perplexity[0] == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("a uniform model scores vocabulary-size perplexity") {
    auto p = build_pipeline({toks({"a", "b", "c", "d", "e", "f", "g", "h"})});
    ModelConfig cfg;
    cfg.dim = 4;
    cfg.layers = 1;
    Rng rng(1);
    auto model = build_model(p.vocab, cfg, rng);
    for (auto& t : model.params.tensors()) std::fill(t.data, t.data + t.size, real(0));

    EvalOptions opts;
    opts.hierarchical = false;
    opts.nslm = false;
    auto result = evaluate_corpus(model, p.vocab, p.tagged, nullptr, nullptr, opts);
    auto report = build_report(result, p.vocab.train_count);
    CHECK(report.row("global")->perplexity[0] == doctest::Approx(p.vocab.size()).epsilon(1e-9));
}

TEST_CASE("rarity buckets partition positions and reproduce masked perplexity") {
    // rare tokens (count 2) get probability 0.01, frequent (count 500) 0.5
    std::vector<double> probs;
    std::vector<int> words;
    std::vector<TokenClass> classes;
    for (int i = 0; i < 12; ++i) {
        bool rare = i % 3 == 0;
        probs.push_back(rare ? 0.01 : 0.5);
        words.push_back(rare ? 1 : 2);
        classes.push_back(TokenClass::Year);
    }
    auto result = hand_result(probs, words, classes);
    std::vector<long long> counts = {0, 2, 500};

    auto rows = rarity_report(result, counts, {1, 10, 100});
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].mask == "[1,10)");
    CHECK(rows[0].perplexity[0] == doctest::Approx(100.0).epsilon(1e-9));
    CHECK(rows[1].mask == "[100,inf)");
    CHECK(rows[1].perplexity[0] == doctest::Approx(2.0).epsilon(1e-9));

    // exhaustive and disjoint
    long long total = 0;
    for (const auto& r : rows) total += r.count;
    CHECK(total == 12);

    // count-weighted mean of per-bucket log-perplexities equals the aggregate
    double weighted = 0;
    for (const auto& r : rows) weighted += static_cast<double>(r.count) * std::log(r.perplexity[0]);
    weighted = std::exp(weighted / static_cast<double>(total));
    auto report = build_report(result, counts);
    CHECK(weighted == doctest::Approx(report.row("classes")->perplexity[0]).epsilon(1e-6));
}

TEST_CASE("evaluation is independent of the batching of documents") {
    auto p = build_pipeline({
        toks({"a", "b", "c", "d"}),
        toks({"b", "c", "d", "a", "b"}),
        toks({"c", "a"}),
        toks({"d", "c", "b", "a", "d", "c"}),
    });
    ModelConfig cfg;
    cfg.dim = 10;
    cfg.layers = 1;
    cfg.seed = 5;
    Rng rng(cfg.seed);
    auto model = build_model(p.vocab, cfg, rng);

    EvalOptions one;
    one.hierarchical = false;
    one.nslm = false;
    one.batch = 1;
    one.bptt = 3;
    EvalOptions four = one;
    four.batch = 4;
    four.bptt = 7;
    auto ra = evaluate_corpus(model, p.vocab, p.tagged, nullptr, nullptr, one);
    auto rb = evaluate_corpus(model, p.vocab, p.tagged, nullptr, nullptr, four);
    REQUIRE(ra.positions.size() == rb.positions.size());
    for (std::size_t i = 0; i < ra.positions.size(); ++i) {
        CHECK(ra.positions[i].position == rb.positions[i].position);
        CHECK(ra.positions[i].logp[0] == rb.positions[i].logp[0]);
    }
}

TEST_CASE("cache-off equals a lambda-zero cache-on report exactly") {
    auto p = build_pipeline({
        toks({"a", "b", "c", "a", "b", "c", "a", "b"}),
        toks({"c", "b", "a", "c", "b", "a"}),
    });
    ModelConfig cfg;
    cfg.dim = 8;
    cfg.layers = 1;
    Rng rng(3);
    auto model = build_model(p.vocab, cfg, rng);

    EvalOptions off;
    off.hierarchical = false;
    off.nslm = false;
    EvalOptions on = off;
    on.cache_variants = true;
    on.cache.lambda = 0;

    auto r_off = evaluate_corpus(model, p.vocab, p.tagged, nullptr, nullptr, off);
    auto r_on = evaluate_corpus(model, p.vocab, p.tagged, nullptr, nullptr, on);
    int flat = r_on.predictor_index("flat");
    int flat_cache = r_on.predictor_index("flat+cache");
    REQUIRE(flat_cache >= 0);
    for (std::size_t i = 0; i < r_on.positions.size(); ++i) {
        CHECK(r_on.positions[i].logp[static_cast<std::size_t>(flat)] ==
              r_off.positions[i].logp[0]);
        CHECK(r_on.positions[i].logp[static_cast<std::size_t>(flat_cache)] ==
              r_on.positions[i].logp[static_cast<std::size_t>(flat)]);
    }
}

TEST_CASE("cache upweights recent repetitions") {
    // long repetitive document: the cache must help a weak model
    std::vector<std::string> doc;
    for (int i = 0; i < 60; ++i) {
        doc.push_back("rare" + std::to_string(i % 5));
        doc.push_back("again");
    }
    auto p = build_pipeline({doc});
    ModelConfig cfg;
    cfg.dim = 12;
    cfg.layers = 1;
    Rng rng(5);
    auto model = build_model(p.vocab, cfg, rng);

    EvalOptions opts;
    opts.hierarchical = false;
    opts.nslm = false;
    opts.cache_variants = true;
    opts.cache.lambda = real(0.25);
    opts.cache.theta = real(0.75);
    opts.cache.window = 50;
    auto result = evaluate_corpus(model, p.vocab, p.tagged, nullptr, nullptr, opts);
    auto report = build_report(result, p.vocab.train_count);
    int flat = result.predictor_index("flat");
    int cached = result.predictor_index("flat+cache");
    CHECK(report.row("global")->perplexity[static_cast<std::size_t>(cached)] <
          report.row("global")->perplexity[static_cast<std::size_t>(flat)]);
}

TEST_CASE("ensemble tuning recovers the better endpoint") {
    EvalResult r;
    r.predictors = {"flat", "nslm"};
    std::mt19937 gen(9);
    for (int i = 0; i < 200; ++i) {
        PositionScore s;
        s.position = static_cast<std::size_t>(i);
        s.word = 0;
        // nslm strictly better everywhere: lambda should go to 0
        double pa = 0.05 + 0.001 * static_cast<double>(gen() % 100);
        double pb = std::min(0.95, pa * 4);
        s.logp = {std::log(pa), std::log(pb)};
        r.positions.push_back(std::move(s));
    }
    double lambda = tune_ensemble_lambda(r, "flat", "nslm");
    CHECK(lambda == doctest::Approx(0.0));
    add_ensemble_column(r, "flat", "nslm", lambda);
    int e = r.predictor_index("ensemble");
    REQUIRE(e >= 0);
    for (const auto& p : r.positions) CHECK(p.logp[static_cast<std::size_t>(e)] == doctest::Approx(p.logp[1]));
}

TEST_CASE("report formatting prints parenthesized reductions and consistent changes") {
    EvalResult r;
    r.predictors = {"flat", "nslm"};
    for (int i = 0; i < 10; ++i) {
        PositionScore s;
        s.position = static_cast<std::size_t>(i);
        s.word = 0;
        s.cls = TokenClass::Year;
        s.logp = {std::log(0.1), std::log(0.2)};
        r.positions.push_back(std::move(s));
    }
    auto report = build_report(r, {5});
    auto text = format_report_text(report);
    CHECK(text.find("(50.0%)") != std::string::npos);  // 10 -> 5 is a 50% reduction

    auto j = report_to_json(report);
    CHECK(j["rows"].size() == report.rows.size());
    // stored perplexities reproduce the printed change within 0.1%
    double base = report.row("year")->perplexity[0];
    double nslm = report.row("year")->perplexity[1];
    CHECK(std::fabs((nslm - base) / base * 100.0 - (-50.0)) < 0.1);

    CHECK(format_percent_change(10.0, 12.5) == "25.0%");
    CHECK(format_percent_change(10.0, 5.0) == "(50.0%)");
}

TEST_CASE("nslm beats the flat head on a year-locality corpus end to end") {
    // documents walk through years in +1 steps; the flat softmax must spread
    // mass over all years while the micro-model rides the difference
    std::mt19937 gen(31);
    std::vector<std::vector<std::string>> docs;
    for (int d = 0; d < 150; ++d) {
        int year = 1200 + static_cast<int>(gen() % 60);
        std::vector<std::string> doc;
        for (int i = 0; i < 8; ++i) {
            doc.push_back("in");
            doc.push_back(std::to_string(year));
            doc.push_back("war");
            year += 1;
        }
        docs.push_back(doc);
    }
    auto p = build_pipeline(docs);
    ModelConfig cfg;
    cfg.dim = 16;
    cfg.layers = 1;
    cfg.batch = 10;
    cfg.bptt = 12;
    cfg.max_epochs = 2;
    cfg.dropout = 0;
    cfg.learning_rate = real(0.5);
    cfg.seed = 7;
    auto model = train_model(p.tagged, nullptr, p.vocab, cfg);

    auto stream = extract_class_stream(p.tagged, p.vocab, TokenClass::Year);
    MicroModelSet mms;
    Rng fit_rng(3);
    mms[static_cast<int>(TokenClass::Year)] = fit_micro_model(
        TokenClass::Year, MetricKind::Difference, PdfKind::Gaussian, p.vocab, stream, fit_rng);

    EvalOptions opts;
    auto result = evaluate_corpus(model, p.vocab, p.tagged, &mms, nullptr, opts);
    auto report = build_report(result, p.vocab.train_count);
    int flat = result.predictor_index("flat");
    int nslm = result.predictor_index("nslm");
    const auto* years = report.row("year");
    REQUIRE(years != nullptr);
    CHECK(years->perplexity[static_cast<std::size_t>(nslm)] <
          0.5 * years->perplexity[static_cast<std::size_t>(flat)]);
}
