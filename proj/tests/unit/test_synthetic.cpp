#include <doctest.h>

#include <set>

#include "nslm/synthetic.hpp"

using namespace nslm;

TEST_CASE("increment corpus enumerates consecutive pairs") {
    IncrementSpec spec;
    spec.n = 12;
    spec.train_fraction = 0.999;  // effectively all-train
    auto corpus = generate_increment_corpus(spec);
    std::set<std::pair<std::string, std::string>> pairs;
    for (const auto& doc : corpus.train.documents) {
        REQUIRE(doc.size() == 2);
        CHECK(std::stoll(doc[1]) == std::stoll(doc[0]) + 1);
        pairs.emplace(doc[0], doc[1]);
    }
    for (const auto& doc : corpus.test.documents) pairs.emplace(doc[0], doc[1]);
    CHECK(pairs.size() == 12);  // all pairs present exactly once across splits
}

TEST_CASE("train and test pairs are disjoint and seed-stable") {
    IncrementSpec spec;
    spec.n = 50;
    spec.train_fraction = 0.8;
    spec.seed = 9;
    auto a = generate_increment_corpus(spec);
    auto b = generate_increment_corpus(spec);
    CHECK(a.train.documents == b.train.documents);
    CHECK(a.test.documents == b.test.documents);
    CHECK(a.train.documents.size() == 40);
    CHECK(a.test.documents.size() == 10);

    std::set<std::string> train_firsts;
    for (const auto& doc : a.train.documents) train_firsts.insert(doc[0]);
    for (const auto& doc : a.test.documents) CHECK(train_firsts.count(doc[0]) == 0);

    spec.seed = 10;
    auto c = generate_increment_corpus(spec);
    CHECK(c.train.documents != a.train.documents);

    IncrementSpec bad;
    bad.n = 5;
    CHECK_THROWS_AS(generate_increment_corpus(bad), ConfigError);
}

TEST_CASE("the fitted difference gaussian sits exactly at one") {
    IncrementSpec spec;
    spec.n = 40;
    auto corpus = generate_increment_corpus(spec);
    auto vocab = increment_vocabulary(spec.n);
    auto tagged = tag_corpus(corpus.train, vocab);
    auto stream = extract_class_stream(tagged, vocab, TokenClass::OtherNumber);
    Rng rng(1);
    auto mm = fit_micro_model(TokenClass::OtherNumber, MetricKind::Difference, PdfKind::Gaussian,
                              vocab, stream, rng);
    CHECK(mm.gauss.mean == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(mm.gauss.var <= kVarianceFloor);
}

TEST_CASE("every integer token is known to the shared vocabulary") {
    IncrementSpec spec;
    spec.n = 25;
    auto corpus = generate_increment_corpus(spec);
    auto vocab = increment_vocabulary(spec.n);
    for (const auto& split : {corpus.train, corpus.test})
        for (const auto& doc : split.documents)
            for (const auto& tok : doc) CHECK(vocab.id_of(tok) != vocab.unk_id);
}

TEST_CASE("micro-model generalizes the increment function where the LSTM cannot") {
    IncrementSpec spec;
    spec.n = 60;
    spec.seed = 4;
    auto row = run_increment_cell(spec);
    CHECK(row.nnlm_train_ppl <= 1.3);        // memorization under way
    CHECK(row.nslm_test_ppl <= 1.05);        // the micro-model nails unseen pairs
    CHECK(row.nnlm_test_ppl > 5 * row.nslm_test_ppl);
}
