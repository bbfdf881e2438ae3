#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "nslm/lstm.hpp"

using namespace nslm;

namespace {

NetworkConfig small_config(int vocab, int dim, std::vector<HeadSpec> heads, int layers = 1) {
    NetworkConfig cfg;
    cfg.input_vocab = vocab;
    cfg.dim = dim;
    cfg.layers = layers;
    cfg.heads = std::move(heads);
    return cfg;
}

// Total window loss from a zero state, forward only.
double window_loss(const LstmParams& params, const WindowBatch& w) {
    BatchState st = BatchState::zeros(params.cfg, w.B);
    return static_cast<double>(run_window(params, w, st, nullptr).total_loss);
}

// Independent scalar evaluation of the LSTM gate equations for one layer.
struct ScalarOracle {
    static double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

    static void step(const LstmParams& p, int input, std::vector<double>& h, std::vector<double>& c,
                     std::vector<double>& logits_out) {
        const int H = p.cfg.dim;
        const int D = p.cfg.input_dim();
        std::vector<double> x(static_cast<std::size_t>(D));
        for (int j = 0; j < D; ++j) x[static_cast<std::size_t>(j)] = p.embedding.at(input, j);
        const auto& L = p.layers[0];
        std::vector<double> z(static_cast<std::size_t>(4 * H));
        for (int k = 0; k < 4 * H; ++k) {
            double s = L.bias[static_cast<std::size_t>(k)];
            for (int j = 0; j < D; ++j) s += x[static_cast<std::size_t>(j)] * L.wx.at(j, k);
            for (int j = 0; j < H; ++j) s += h[static_cast<std::size_t>(j)] * L.wh.at(j, k);
            z[static_cast<std::size_t>(k)] = s;
        }
        for (int k = 0; k < H; ++k) {
            double gi = sig(z[static_cast<std::size_t>(k)]);
            double gf = sig(z[static_cast<std::size_t>(H + k)]);
            double gg = std::tanh(z[static_cast<std::size_t>(2 * H + k)]);
            double go = sig(z[static_cast<std::size_t>(3 * H + k)]);
            c[static_cast<std::size_t>(k)] = gf * c[static_cast<std::size_t>(k)] + gi * gg;
            h[static_cast<std::size_t>(k)] = go * std::tanh(c[static_cast<std::size_t>(k)]);
        }
        const auto& head = p.heads[0];
        logits_out.assign(static_cast<std::size_t>(head.u.cols), 0.0);
        for (int v = 0; v < head.u.cols; ++v) {
            double s = head.bias[static_cast<std::size_t>(v)];
            for (int j = 0; j < H; ++j) s += h[static_cast<std::size_t>(j)] * head.u.at(j, v);
            logits_out[static_cast<std::size_t>(v)] = s;
        }
    }
};

}  // namespace

TEST_CASE("softmax basics") {
    auto p = softmax({0, 0, 0});
    CHECK(p[0] == doctest::Approx(1.0 / 3).epsilon(1e-12));
    CHECK(p[2] == doctest::Approx(1.0 / 3).epsilon(1e-12));

    p = softmax({0, std::log(real(2))});
    CHECK(p[0] == doctest::Approx(1.0 / 3).epsilon(1e-9));
    CHECK(p[1] == doctest::Approx(2.0 / 3).epsilon(1e-9));

    p = softmax({1000, 1000});
    CHECK(p[0] == doctest::Approx(0.5));
    CHECK(p[1] == doctest::Approx(0.5));
}

TEST_CASE("softmax sums to one and is shift invariant") {
    std::mt19937 rng(11);
    std::uniform_real_distribution<double> d(-30, 30);
    for (int trial = 0; trial < 100; ++trial) {
        int n = 2 + static_cast<int>(rng() % 40);
        std::vector<real> logits(static_cast<std::size_t>(n));
        for (auto& v : logits) v = static_cast<real>(d(rng));
        auto p = softmax(logits);
        double sum = 0;
        for (auto v : p) {
            CHECK(v > 0);
            sum += v;
        }
        CHECK(std::fabs(sum - 1.0) < 1e-9);

        std::vector<real> shifted = logits;
        for (auto& v : shifted) v += real(123.5);
        auto q = softmax(shifted);
        for (std::size_t i = 0; i < p.size(); ++i)
            CHECK(static_cast<double>(p[i]) == doctest::Approx(static_cast<double>(q[i])).epsilon(1e-9));
    }
}

TEST_CASE("lstm_step with zero weights produces zero logits and state") {
    auto cfg = small_config(5, 4, {{"word", 5}});
    auto params = LstmParams::build(cfg);  // all zeros
    RnnState st = RnnState::zeros(cfg);
    auto logits = lstm_step(params, 2, st);
    for (auto v : logits[0]) CHECK(v == real(0));
    for (auto v : st.h[0]) CHECK(v == real(0));
    for (auto v : st.c[0]) CHECK(v == real(0));
}

TEST_CASE("lstm_step is deterministic") {
    auto cfg = small_config(6, 4, {{"word", 6}});
    auto params = LstmParams::build(cfg);
    Rng rng(42);
    params.init_uniform(rng);
    RnnState a = RnnState::zeros(cfg), b = RnnState::zeros(cfg);
    auto la = lstm_step(params, 3, a);
    auto lb = lstm_step(params, 3, b);
    CHECK(la[0] == lb[0]);
    CHECK(a.h[0] == b.h[0]);
    CHECK(a.c[0] == b.c[0]);
}

TEST_CASE("lstm_step matches a hand-evaluated gate oracle on a 4-dim model") {
    auto cfg = small_config(7, 4, {{"word", 7}});
    auto params = LstmParams::build(cfg);
    Rng rng(1234);
    params.init_uniform(rng);
    for (auto& v : params.layers[0].wx.data) v *= real(8);
    for (auto& v : params.layers[0].wh.data) v *= real(8);
    RnnState st = RnnState::zeros(cfg);
    std::vector<double> h(4, 0.0), c(4, 0.0), logits;
    for (int step = 0; step < 5; ++step) {
        int input = (step * 3 + 1) % 7;
        auto out = lstm_step(params, input, st);
        ScalarOracle::step(params, input, h, c, logits);
        for (int k = 0; k < 4; ++k) {
            CHECK(static_cast<double>(st.h[0][static_cast<std::size_t>(k)]) == doctest::Approx(h[static_cast<std::size_t>(k)]).epsilon(1e-12));
            CHECK(static_cast<double>(st.c[0][static_cast<std::size_t>(k)]) == doctest::Approx(c[static_cast<std::size_t>(k)]).epsilon(1e-12));
        }
        for (int v = 0; v < 7; ++v)
            CHECK(static_cast<double>(out[0][static_cast<std::size_t>(v)]) == doctest::Approx(logits[static_cast<std::size_t>(v)]).epsilon(1e-12));
    }
}

TEST_CASE("lstm_step rejects mismatched dimensions") {
    auto cfg = small_config(5, 4, {{"word", 5}});
    auto params = LstmParams::build(cfg);
    RnnState st = RnnState::zeros(small_config(5, 8, {{"word", 5}}));
    CHECK_THROWS_AS(lstm_step(params, 0, st), ConfigError);
    RnnState ok = RnnState::zeros(cfg);
    CHECK_THROWS_AS(lstm_step(params, 99, ok), ConfigError);
}

TEST_CASE("sequence_loss on a uniform model equals log vocabulary size") {
    const int K = 11;
    auto cfg = small_config(K, 6, {{"word", K}});
    auto params = LstmParams::build(cfg);  // zero weights -> uniform softmax
    std::vector<int> stream = {0, 1, 2, 3, 4, 5};
    CHECK(static_cast<double>(sequence_loss(params, stream, 0)) == doctest::Approx(std::log(K)).epsilon(1e-12));
}

TEST_CASE("sequence_loss with probability one is zero") {
    const int K = 6;
    auto cfg = small_config(K, 4, {{"word", K}});
    auto params = LstmParams::build(cfg);
    params.heads[0].bias[3] = real(60);  // all mass on token 3
    std::vector<int> stream = {3, 3, 3, 3};
    CHECK(std::fabs(static_cast<double>(sequence_loss(params, stream, 0))) < 1e-9);
}

TEST_CASE("sequence_loss matches hand-specified probabilities") {
    // zero LSTM weights keep the head input at zero, so probabilities come
    // from the bias alone: P = softmax(bias)
    auto cfg = small_config(3, 4, {{"word", 3}});
    auto params = LstmParams::build(cfg);
    params.heads[0].bias = {real(0), static_cast<real>(std::log(2.0)), real(0)};
    // P = (0.25, 0.5, 0.25); stream a,b,c scores ln P(b) and ln P(c)
    std::vector<int> stream = {0, 1, 2};
    double expected = -(std::log(0.5) + std::log(0.25)) / 2.0;
    CHECK(static_cast<double>(sequence_loss(params, stream, 0)) == doctest::Approx(expected).epsilon(1e-12));
    CHECK_THROWS_AS(sequence_loss(params, {0}, 0), ConfigError);
}

TEST_CASE("sequence_loss is covariant under vocabulary relabeling") {
    const int K = 9;
    auto cfg = small_config(K, 5, {{"word", K}});
    auto params = LstmParams::build(cfg);
    Rng rng(77);
    params.init_uniform(rng);
    std::vector<int> stream = {0, 4, 2, 8, 1, 1, 5, 3};
    double base = static_cast<double>(sequence_loss(params, stream, 0));

    // permute token ids, embedding rows, and head columns consistently
    std::vector<int> perm(K);
    std::iota(perm.begin(), perm.end(), 0);
    std::mt19937 shuffler(5);
    std::shuffle(perm.begin(), perm.end(), shuffler);

    auto relabeled = LstmParams::build(cfg);
    relabeled.layers = params.layers;
    for (int v = 0; v < K; ++v) {
        for (int j = 0; j < cfg.input_dim(); ++j)
            relabeled.embedding.at(perm[static_cast<std::size_t>(v)], j) = params.embedding.at(v, j);
        for (int j = 0; j < cfg.dim; ++j)
            relabeled.heads[0].u.at(j, perm[static_cast<std::size_t>(v)]) = params.heads[0].u.at(j, v);
        relabeled.heads[0].bias[static_cast<std::size_t>(perm[static_cast<std::size_t>(v)])] = params.heads[0].bias[static_cast<std::size_t>(v)];
    }
    std::vector<int> relabeled_stream;
    for (int t : stream) relabeled_stream.push_back(perm[static_cast<std::size_t>(t)]);
    double moved = static_cast<double>(sequence_loss(relabeled, relabeled_stream, 0));
    CHECK(moved == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("analytic BPTT gradients match central finite differences") {
    // Multi-head model with mid-window resets and a sparse head.
    auto cfg = small_config(10, 8, {{"word", 10}, {"class", 7}, {"year", 4}}, 2);
    cfg.init_range = real(0.4);  // strong weights keep gradients well above FD noise
    auto params = LstmParams::build(cfg);
    Rng rng(2024);
    params.init_uniform(rng);

    WindowBatch w;
    w.T = 9;
    w.B = 2;
    std::mt19937 gen(3);
    for (int i = 0; i < w.T * w.B; ++i) w.inputs.push_back(static_cast<int>(gen() % 10));
    w.reset_before.assign(static_cast<std::size_t>(w.T * w.B), 0);
    w.reset_before[0] = w.reset_before[1] = 1;
    w.reset_before[4 * w.B + 1] = 1;  // one lane resets mid-window
    w.head_targets.resize(3);
    w.head_targets[0].assign(static_cast<std::size_t>(w.T * w.B), -1);
    w.head_targets[1].assign(static_cast<std::size_t>(w.T * w.B), -1);
    w.head_targets[2].assign(static_cast<std::size_t>(w.T * w.B), -1);
    for (int i = 0; i < w.T * w.B; ++i) {
        w.head_targets[0][static_cast<std::size_t>(i)] = static_cast<int>(gen() % 10);
        w.head_targets[1][static_cast<std::size_t>(i)] = static_cast<int>(gen() % 7);
        if (gen() % 4 == 0) w.head_targets[2][static_cast<std::size_t>(i)] = static_cast<int>(gen() % 4);
    }

    GradientSet grads = zero_like(params);
    BatchState st = BatchState::zeros(cfg, w.B);
    run_window(params, w, st, &grads);

    const double eps = 1e-5;
    auto ptensors = params.tensors();
    auto gtensors = grads.tensors();
    std::mt19937 pick(99);
    for (std::size_t ti = 0; ti < ptensors.size(); ++ti) {
        auto& pt = ptensors[ti];
        auto& gt = gtensors[ti];
        const std::size_t coords = std::min<std::size_t>(pt.size, 20);
        for (std::size_t k = 0; k < coords; ++k) {
            std::size_t idx = coords == pt.size ? k : pick() % pt.size;
            const real saved = pt.data[idx];
            pt.data[idx] = saved + static_cast<real>(eps);
            double lp = window_loss(params, w);
            pt.data[idx] = saved - static_cast<real>(eps);
            double lm = window_loss(params, w);
            pt.data[idx] = saved;
            double numeric = (lp - lm) / (2 * eps);
            double analytic = static_cast<double>(gt.data[idx]);
            // the 1e-5 floor covers coordinates whose true gradient sits
            // below the finite-difference noise floor
            double denom = std::max({std::fabs(numeric), std::fabs(analytic), 1e-5});
            INFO(pt.name << "[" << idx << "] analytic=" << analytic << " numeric=" << numeric);
            CHECK(std::fabs(analytic - numeric) / denom < 1e-4);
        }
    }
}

TEST_CASE("sampled-softmax and dropout gradients match finite differences") {
    // reseeding the rng before every pass pins the sampled candidates and
    // dropout masks, making the stochastic loss a deterministic function
    auto cfg = small_config(10, 6, {{"word", 10}});
    cfg.init_range = real(0.4);
    auto params = LstmParams::build(cfg);
    Rng init_rng(55);
    params.init_uniform(init_rng);

    WindowBatch w;
    w.T = 6;
    w.B = 2;
    std::mt19937 gen(7);
    for (int i = 0; i < w.T * w.B; ++i) w.inputs.push_back(static_cast<int>(gen() % 10));
    w.reset_before.assign(static_cast<std::size_t>(w.T * w.B), 0);
    w.reset_before[0] = w.reset_before[1] = 1;
    w.head_targets.assign(1, std::vector<int>(static_cast<std::size_t>(w.T * w.B), -1));
    for (int i = 0; i < w.T * w.B; ++i)
        w.head_targets[0][static_cast<std::size_t>(i)] = static_cast<int>(gen() % 10);

    auto run_with = [&](GradientSet* grads, real dropout, int sample) {
        Rng rng(999);
        TrainOptions opts;
        opts.rng = &rng;
        opts.dropout = dropout;
        opts.sample_size = {sample};
        BatchState st = BatchState::zeros(cfg, w.B);
        GradientSet scratch = zero_like(params);
        return static_cast<double>(run_window(params, w, st, grads ? grads : &scratch, opts).total_loss);
    };

    for (auto [dropout, sample] : {std::pair<real, int>{0, 4}, {real(0.3), 0}, {real(0.3), 4}}) {
        GradientSet grads = zero_like(params);
        run_with(&grads, dropout, sample);
        auto pt = params.tensors();
        auto gt = grads.tensors();
        std::mt19937 pick(3);
        const double eps = 1e-5;
        for (std::size_t ti = 0; ti < pt.size(); ++ti) {
            for (int k = 0; k < 8; ++k) {
                std::size_t idx = pick() % pt[ti].size;
                const real saved = pt[ti].data[idx];
                pt[ti].data[idx] = saved + static_cast<real>(eps);
                double lp = run_with(nullptr, dropout, sample);
                pt[ti].data[idx] = saved - static_cast<real>(eps);
                double lm = run_with(nullptr, dropout, sample);
                pt[ti].data[idx] = saved;
                double numeric = (lp - lm) / (2 * eps);
                double analytic = static_cast<double>(gt[ti].data[idx]);
                double denom = std::max({std::fabs(numeric), std::fabs(analytic), 1e-5});
                INFO("dropout=" << dropout << " sample=" << sample << " " << pt[ti].name << "[" << idx << "]");
                CHECK(std::fabs(analytic - numeric) / denom < 1e-4);
            }
        }
    }
}

TEST_CASE("gradients are zero without targets and deterministic with them") {
    auto cfg = small_config(6, 4, {{"word", 6}});
    auto params = LstmParams::build(cfg);
    Rng rng(5);
    params.init_uniform(rng);

    WindowBatch w;
    w.T = 4;
    w.B = 2;
    w.inputs = {0, 1, 2, 3, 4, 5, 0, 1};
    w.head_targets = {std::vector<int>(8, -1)};

    GradientSet g1 = zero_like(params);
    BatchState st = BatchState::zeros(cfg, 2);
    run_window(params, w, st, &g1);
    for (auto& t : g1.tensors())
        for (std::size_t i = 0; i < t.size; ++i) CHECK(t.data[i] == real(0));

    w.head_targets[0] = {1, 2, 3, 4, 5, 0, 1, 2};
    GradientSet g2 = zero_like(params), g3 = zero_like(params);
    BatchState s2 = BatchState::zeros(cfg, 2), s3 = BatchState::zeros(cfg, 2);
    run_window(params, w, s2, &g2);
    run_window(params, w, s3, &g3);
    auto t2 = g2.tensors(), t3 = g3.tensors();
    for (std::size_t i = 0; i < t2.size(); ++i)
        for (std::size_t j = 0; j < t2[i].size; ++j) CHECK(t2[i].data[j] == t3[i].data[j]);
}

TEST_CASE("sgd_step clips by global norm") {
    auto cfg = small_config(2, 2, {{"word", 2}});
    auto params = LstmParams::build(cfg);
    auto before = params;

    GradientSet grads = zero_like(params);
    CHECK(global_grad_norm(grads) == real(0));
    sgd_step(params, grads, real(0.5), real(5));
    for (std::size_t i = 0; i < params.embedding.size(); ++i)
        CHECK(params.embedding.data[i] == before.embedding.data[i]);

    // gradient vector of norm 10 against clip 5: effective step is grads/2
    grads.embedding.at(0, 0) = real(6);
    grads.embedding.at(0, 1) = real(8);
    sgd_step(params, grads, real(1), real(5));
    CHECK(params.embedding.at(0, 0) == doctest::Approx(-3.0));
    CHECK(params.embedding.at(0, 1) == doctest::Approx(-4.0));

    // lr = 0 leaves parameters unchanged
    auto snapshot = params;
    sgd_step(params, grads, real(0), real(5));
    CHECK(params.embedding.data == snapshot.embedding.data);
}

TEST_CASE("sampled softmax degenerates to the full loss when all negatives are taken") {
    const int V = 8;
    auto cfg = small_config(V, 5, {{"word", V}});
    auto params = LstmParams::build(cfg);
    Rng rng(8);
    params.init_uniform(rng);
    std::vector<int> stream = {3, 3, 3, 3, 3};

    double full = static_cast<double>(sequence_loss(params, stream, 0));
    Rng srng(123);
    double sampled = static_cast<double>(sampled_softmax_loss(params, stream, 0, V - 1, srng));
    CHECK(sampled == doctest::Approx(full).epsilon(1e-6));

    CHECK_THROWS_AS(sampled_softmax_loss(params, stream, 0, V, srng), ConfigError);

    Rng ra(55), rb(55);
    double a = static_cast<double>(sampled_softmax_loss(params, stream, 0, 3, ra));
    double b = static_cast<double>(sampled_softmax_loss(params, stream, 0, 3, rb));
    CHECK(a == b);
}

TEST_CASE("a small LSTM memorizes a periodic stream") {
    const int V = 5;
    auto cfg = small_config(V, 16, {{"word", V}});
    cfg.init_range = real(0.1);
    auto params = LstmParams::build(cfg);
    Rng rng(9);
    params.init_uniform(rng);

    WindowBatch w;
    w.T = 20;
    w.B = 1;
    for (int t = 0; t < w.T; ++t) w.inputs.push_back(t % V);
    w.head_targets.resize(1);
    w.head_targets[0].resize(static_cast<std::size_t>(w.T));
    for (int t = 0; t < w.T; ++t) w.head_targets[0][static_cast<std::size_t>(t)] = (t + 1) % V;

    real loss = real(0);
    for (int step = 0; step < 400; ++step) {
        GradientSet grads = zero_like(params);
        BatchState st = BatchState::zeros(cfg, 1);
        auto stats = run_window(params, w, st, &grads);
        loss = stats.head_loss[0];
        sgd_step(params, grads, real(0.5), real(5));
    }
    CHECK(std::exp(static_cast<double>(loss)) <= 1.05);  // perplexity at memorization
}

TEST_CASE("checkpoints round-trip and refuse a wrong vocabulary hash") {
    auto cfg = small_config(12, 6, {{"word", 12}, {"class", 9}});
    auto params = LstmParams::build(cfg);
    Rng rng(31);
    params.init_uniform(rng);

    auto dir = std::filesystem::temp_directory_path() / "nslm_ckpt_test";
    std::filesystem::create_directories(dir);
    auto path = (dir / "model.ckpt").string();
    nlohmann::json extra = {{"note", "test"}};
    save_checkpoint(path, params, 0xabcdefULL, extra);

    nlohmann::json extra_out;
    auto loaded = load_checkpoint(path, 0xabcdefULL, &extra_out);
    CHECK(extra_out["note"] == "test");
    CHECK(loaded.cfg.heads.size() == 2);
    auto pt = params.tensors();
    auto lt = loaded.tensors();
    for (std::size_t i = 0; i < pt.size(); ++i)
        for (std::size_t j = 0; j < pt[i].size; ++j) CHECK(pt[i].data[j] == lt[i].data[j]);

    CHECK_THROWS_AS(load_checkpoint(path, 0x1234ULL), DataError);
    std::filesystem::remove_all(dir);
}
