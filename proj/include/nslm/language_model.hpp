// Composes the LSTM trunk and micro-models into the evaluated systems:
// flat, hierarchical, NSLM and per-class character-RNN predictors, plus the
// neural cache, ensembling, multi-task training and grounded embeddings.

#pragma once

#include <array>
#include <deque>
#include <memory>
#include <optional>
#include <ostream>

#include "nslm/corpus.hpp"
#include "nslm/lstm.hpp"
#include "nslm/micro_model.hpp"

namespace nslm {

struct CacheConfig {
    int window = 500;
    real lambda = real(0.25);
    real theta = real(0.75);
};

struct ModelConfig {
    int dim = 650;
    int layers = 2;
    real dropout = real(0.5);
    int bptt = 35;
    int batch = 20;
    real learning_rate = real(1.0);
    real lr_decay = real(0.5);
    real clip_norm = real(5.0);
    int max_epochs = 20;
    int sampled_softmax = 0;  // 0 keeps the full softmax during training
    real init_range = real(0.05);
    std::uint64_t seed = 42;
    bool multi_task = true;
    bool single_task_summation = false;  // class mass by summing word-head probabilities
    bool ground = false;                 // append frozen grounded embedding dimensions
    real stop_at_train_ppl = 0;          // early stop once training perplexity drops below
    real divergence_factor = real(10);
    CacheConfig cache;
    std::string pretrained_embeddings;   // optional vector file applied before training
};

// Head bookkeeping for the multi-task trunk.
struct HeadLayout {
    int word = -1;
    int cls = -1;                                 // class-augmented head
    std::array<int, kTokenClassCount> per_class;  // neural heads over each V_C
    std::vector<HeadSpec> specs;

    HeadLayout() { per_class.fill(-1); }
};

inline HeadLayout make_head_layout(const Vocabulary& vocab, const ModelConfig& cfg) {
    HeadLayout layout;
    layout.word = 0;
    layout.specs.push_back({"word", vocab.size()});
    if (cfg.multi_task && !cfg.single_task_summation) {
        layout.cls = static_cast<int>(layout.specs.size());
        layout.specs.push_back({"class", vocab.class_head_size()});
    }
    for (TokenClass c : vocab.present_classes()) {
        layout.per_class[static_cast<int>(c)] = static_cast<int>(layout.specs.size());
        layout.specs.push_back({class_name(c), vocab.class_vocab[static_cast<int>(c)].size()});
    }
    return layout;
}

struct LanguageModel {
    LstmParams params;
    HeadLayout heads;
    std::uint64_t vocab_hash = 0;
    ModelConfig cfg;
};

using MicroModelSet = std::array<std::optional<MicroModel>, kTokenClassCount>;

// ---------------------------------------------------------------------------
// Grounded embeddings
// ---------------------------------------------------------------------------

constexpr int kGroundDims = 3;  // standardized value, latitude, longitude

// Fills the trailing grounded columns: per-class standardized numeric value
// for number classes, standardized coordinates for geo classes, zeros
// elsewhere. The columns are frozen by sgd_step.
inline void fill_grounded_columns(Mat& embedding, const Vocabulary& vocab, int base_dim) {
    for (int ci = 1; ci < kTokenClassCount; ++ci) {
        const auto& cv = vocab.class_vocab[ci];
        if (cv.size() == 0) continue;
        const auto c = static_cast<TokenClass>(ci);
        auto standardized = [](const std::vector<double>& xs) {
            double mean = 0;
            for (double x : xs) mean += x;
            mean /= static_cast<double>(xs.size());
            double var = 0;
            for (double x : xs) var += (x - mean) * (x - mean);
            var /= static_cast<double>(xs.size());
            double sd = var > 0 ? std::sqrt(var) : 1.0;
            std::vector<double> out;
            out.reserve(xs.size());
            for (double x : xs) out.push_back((x - mean) / sd);
            return out;
        };
        if (is_number_class(c)) {
            auto z = standardized(cv.values);
            for (int i = 0; i < cv.size(); ++i)
                embedding.at(cv.members[static_cast<std::size_t>(i)], base_dim + 0) = static_cast<real>(z[static_cast<std::size_t>(i)]);
        } else {
            std::vector<double> lats, lons;
            for (const auto& [lat, lon] : cv.coords) {
                lats.push_back(lat);
                lons.push_back(lon);
            }
            auto zlat = standardized(lats);
            auto zlon = standardized(lons);
            for (int i = 0; i < cv.size(); ++i) {
                embedding.at(cv.members[static_cast<std::size_t>(i)], base_dim + 1) = static_cast<real>(zlat[static_cast<std::size_t>(i)]);
                embedding.at(cv.members[static_cast<std::size_t>(i)], base_dim + 2) = static_cast<real>(zlon[static_cast<std::size_t>(i)]);
            }
        }
    }
}

inline LanguageModel build_model(const Vocabulary& vocab, const ModelConfig& cfg, Rng& rng) {
    LanguageModel model;
    model.cfg = cfg;
    model.heads = make_head_layout(vocab, cfg);
    NetworkConfig net;
    net.input_vocab = vocab.size();
    net.dim = cfg.dim;
    net.layers = cfg.layers;
    net.ground_dims = cfg.ground ? kGroundDims : 0;
    net.init_range = cfg.init_range;
    net.heads = model.heads.specs;
    model.params = LstmParams::build(net);
    model.params.init_uniform(rng);
    if (cfg.ground) {
        // grounded columns replace their random initialization
        for (int r = 0; r < model.params.embedding.rows; ++r)
            for (int j = cfg.dim; j < net.input_dim(); ++j) model.params.embedding.at(r, j) = real(0);
        fill_grounded_columns(model.params.embedding, vocab, cfg.dim);
    }
    model.vocab_hash = vocab.hash();
    return model;
}

// Widens an ungrounded model with frozen grounded dimensions, keeping every
// trained tensor and initializing only the new input rows of layer 0.
inline LanguageModel ground_embeddings(const LanguageModel& base, const Vocabulary& vocab, Rng& rng) {
    if (base.params.cfg.ground_dims > 0) return base;
    LanguageModel out = base;
    out.cfg.ground = true;
    NetworkConfig net = base.params.cfg;
    net.ground_dims = kGroundDims;
    out.params = LstmParams::build(net);
    out.params.init_uniform(rng);
    // copy embedding into the leading columns, grounded columns from side data
    for (int r = 0; r < base.params.embedding.rows; ++r) {
        for (int j = 0; j < base.params.cfg.dim; ++j)
            out.params.embedding.at(r, j) = base.params.embedding.at(r, j);
        for (int j = base.params.cfg.dim; j < net.input_dim(); ++j) out.params.embedding.at(r, j) = real(0);
    }
    fill_grounded_columns(out.params.embedding, vocab, base.params.cfg.dim);
    // layer 0 keeps its trained rows; the rows fed by grounded dims stay random
    for (int r = 0; r < base.params.layers[0].wx.rows; ++r)
        for (int j = 0; j < base.params.layers[0].wx.cols; ++j)
            out.params.layers[0].wx.at(r, j) = base.params.layers[0].wx.at(r, j);
    for (std::size_t l = 1; l < base.params.layers.size(); ++l) out.params.layers[l] = base.params.layers[l];
    out.params.layers[0].wh = base.params.layers[0].wh;
    out.params.layers[0].bias = base.params.layers[0].bias;
    out.params.heads = base.params.heads;
    return out;
}

// Overwrites embedding rows from a text vector file: one token per line,
// token followed by `dim` values. Tokens outside the vocabulary are skipped;
// grounded columns are left alone.
inline int load_pretrained_embeddings(LanguageModel& model, const Vocabulary& vocab,
                                      const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open embedding file: " + path);
    const int dim = model.cfg.dim;
    int loaded = 0;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string token;
        ss >> token;
        auto it = vocab.word_to_id.find(token);
        std::vector<real> values;
        values.reserve(static_cast<std::size_t>(dim));
        double v;
        while (ss >> v) values.push_back(static_cast<real>(v));
        if (static_cast<int>(values.size()) != dim)
            throw DataError("embedding line " + std::to_string(lineno) + ": expected " +
                            std::to_string(dim) + " values, got " + std::to_string(values.size()));
        if (it == vocab.word_to_id.end()) continue;
        std::memcpy(model.params.embedding.row(it->second), values.data(),
                    sizeof(real) * static_cast<std::size_t>(dim));
        ++loaded;
    }
    return loaded;
}

// ---------------------------------------------------------------------------
// Training streams
// ---------------------------------------------------------------------------

// Scored positions of a tagged corpus: position i (document offset >= 1) is
// predicted from the token before it. Document-initial tokens are inputs
// only, so streams never predict across a reset.
struct StreamData {
    std::vector<int> inputs;
    std::vector<std::uint8_t> reset;             // reset state before this position
    std::vector<std::vector<int>> targets;       // per head
    std::vector<std::size_t> corpus_position;    // tagged-corpus index of each target

    std::size_t size() const { return inputs.size(); }
};

inline StreamData make_stream(const TaggedCorpus& tagged, const Vocabulary& vocab,
                              const HeadLayout& layout) {
    StreamData s;
    s.targets.resize(layout.specs.size());
    for (std::size_t d = 0; d + 1 < tagged.doc_begin.size(); ++d) {
        const std::size_t begin = tagged.doc_begin[d], end = tagged.doc_begin[d + 1];
        for (std::size_t i = begin; i + 1 < end; ++i) {
            const int target = tagged.tokens[i + 1];
            const TokenClass tc = tagged.classes[i + 1];
            s.inputs.push_back(tagged.tokens[i]);
            s.reset.push_back(i == begin ? 1 : 0);
            s.corpus_position.push_back(i + 1);
            for (std::size_t h = 0; h < layout.specs.size(); ++h) s.targets[h].push_back(-1);
            s.targets[static_cast<std::size_t>(layout.word)].back() = target;
            if (layout.cls >= 0)
                s.targets[static_cast<std::size_t>(layout.cls)].back() =
                    tc == TokenClass::Plain
                        ? vocab.class_head_of_word[static_cast<std::size_t>(target)]
                        : vocab.tag_id[static_cast<std::size_t>(static_cast<int>(tc))];
            if (tc != TokenClass::Plain) {
                int hi = layout.per_class[static_cast<int>(tc)];
                if (hi >= 0)
                    s.targets[static_cast<std::size_t>(hi)].back() =
                        vocab.class_vocab[static_cast<int>(tc)].local(target);
            }
        }
    }
    return s;
}

// Splits a stream into B lanes of ceiling length so every position is
// covered; slots past the end of the stream are unscored filler.
struct LanedStream {
    int B = 0;
    long long lane_len = 0;
    const StreamData* stream = nullptr;

    std::size_t index(int b, long long t) const {
        return static_cast<std::size_t>(b) * static_cast<std::size_t>(lane_len) + static_cast<std::size_t>(t);
    }
};

inline LanedStream make_lanes(const StreamData& stream, int batch) {
    if (stream.size() == 0) throw ConfigError("make_lanes: empty stream");
    LanedStream lanes;
    lanes.stream = &stream;
    lanes.B = std::max(1, std::min<int>(batch, static_cast<int>(stream.size())));
    lanes.lane_len = (static_cast<long long>(stream.size()) + lanes.B - 1) / lanes.B;
    return lanes;
}

inline WindowBatch window_at(const LanedStream& lanes, long long start, int bptt,
                             std::size_t head_count) {
    const auto& s = *lanes.stream;
    WindowBatch w;
    w.T = static_cast<int>(std::min<long long>(bptt, lanes.lane_len - start));
    w.B = lanes.B;
    w.inputs.resize(static_cast<std::size_t>(w.T) * w.B);
    w.reset_before.resize(static_cast<std::size_t>(w.T) * w.B);
    w.head_targets.assign(head_count, std::vector<int>(static_cast<std::size_t>(w.T) * w.B, -1));
    for (int t = 0; t < w.T; ++t) {
        for (int b = 0; b < w.B; ++b) {
            std::size_t src = lanes.index(b, start + t);
            std::size_t dst = static_cast<std::size_t>(t) * w.B + b;
            if (src >= s.size()) {  // filler past the stream's end
                w.inputs[dst] = 0;
                w.reset_before[dst] = 1;
                continue;
            }
            w.inputs[dst] = s.inputs[src];
            w.reset_before[dst] = (start + t == 0) ? 1 : s.reset[src];
            for (std::size_t h = 0; h < head_count; ++h) w.head_targets[h][dst] = s.targets[h][src];
        }
    }
    return w;
}

// Full-softmax perplexity of one head over a stream, batched.
inline double stream_perplexity(const LstmParams& params, const StreamData& stream, int head,
                                int batch = 20, int bptt = 35) {
    auto lanes = make_lanes(stream, batch);
    BatchState state = BatchState::zeros(params.cfg, lanes.B);
    double nll = 0;
    long long count = 0;
    for (long long start = 0; start < lanes.lane_len; start += bptt) {
        auto w = window_at(lanes, start, bptt, params.heads.size());
        auto stats = run_window(params, w, state, nullptr);
        nll += static_cast<double>(stats.head_loss[static_cast<std::size_t>(head)]) *
               static_cast<double>(stats.head_count[static_cast<std::size_t>(head)]);
        count += stats.head_count[static_cast<std::size_t>(head)];
    }
    if (count == 0) throw DataError("stream_perplexity: no scored positions");
    return std::exp(nll / static_cast<double>(count));
}

struct EpochLog {
    int epoch = 0;
    double train_loss = 0;  // word-head mean NLL
    double valid_ppl = 0;
    real lr = 0;
};

// Multi-task training: one trunk, all configured heads, losses summed with
// equal weight. Learning rate halves when validation perplexity stalls.
inline LanguageModel train_model(const TaggedCorpus& train, const TaggedCorpus* valid,
                                 const Vocabulary& vocab, const ModelConfig& cfg,
                                 std::vector<EpochLog>* log = nullptr, std::ostream* progress = nullptr) {
    Rng rng(cfg.seed);
    LanguageModel model = build_model(vocab, cfg, rng);
    if (!cfg.pretrained_embeddings.empty())
        load_pretrained_embeddings(model, vocab, cfg.pretrained_embeddings);
    StreamData train_stream = make_stream(train, vocab, model.heads);
    std::optional<StreamData> valid_stream;
    if (valid) valid_stream = make_stream(*valid, vocab, model.heads);

    auto lanes = make_lanes(train_stream, cfg.batch);
    TrainOptions opts;
    opts.dropout = cfg.dropout;
    opts.rng = &rng;
    opts.sample_size.assign(model.heads.specs.size(), 0);
    if (cfg.sampled_softmax > 0) {
        opts.sample_size[static_cast<std::size_t>(model.heads.word)] = cfg.sampled_softmax;
        if (model.heads.cls >= 0)
            opts.sample_size[static_cast<std::size_t>(model.heads.cls)] = cfg.sampled_softmax;
    }

    real lr = cfg.learning_rate;
    double best_valid = std::numeric_limits<double>::infinity();
    double initial_valid = 0;
    GradientSet grads = zero_like(model.params);

    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        BatchState state = BatchState::zeros(model.params.cfg, lanes.B);
        double word_nll = 0;
        long long word_count = 0;
        for (long long start = 0; start < lanes.lane_len; start += cfg.bptt) {
            auto w = window_at(lanes, start, cfg.bptt, model.heads.specs.size());
            for (auto& t : grads.tensors()) std::fill(t.data, t.data + t.size, real(0));
            auto stats = run_window(model.params, w, state, &grads, opts);
            sgd_step(model.params, grads, lr, cfg.clip_norm);
            word_nll += static_cast<double>(stats.head_loss[static_cast<std::size_t>(model.heads.word)]) *
                        static_cast<double>(stats.head_count[static_cast<std::size_t>(model.heads.word)]);
            word_count += stats.head_count[static_cast<std::size_t>(model.heads.word)];
        }
        EpochLog entry;
        entry.epoch = epoch;
        entry.train_loss = word_nll / std::max<long long>(1, word_count);
        entry.lr = lr;

        if (valid_stream) {
            entry.valid_ppl = stream_perplexity(model.params, *valid_stream, model.heads.word,
                                                cfg.batch, cfg.bptt);
            if (epoch == 1) initial_valid = entry.valid_ppl;
            if (entry.valid_ppl > cfg.divergence_factor * initial_valid)
                throw TrainingError("training diverged: validation perplexity " +
                                    std::to_string(entry.valid_ppl) + " vs initial " +
                                    std::to_string(initial_valid));
            if (entry.valid_ppl >= best_valid * 0.999) lr *= cfg.lr_decay;  // stalled
            best_valid = std::min(best_valid, entry.valid_ppl);
        }
        if (progress)
            (*progress) << "epoch " << epoch << " train-loss " << entry.train_loss << " valid-ppl "
                        << entry.valid_ppl << " lr " << lr << "\n";
        if (log) log->push_back(entry);
        if (cfg.stop_at_train_ppl > 0 && std::exp(entry.train_loss) <= static_cast<double>(cfg.stop_at_train_ppl))
            break;
    }
    return model;
}

// ---------------------------------------------------------------------------
// Prediction contexts and predictors
// ---------------------------------------------------------------------------

struct CacheEntry {
    std::vector<real> h;
    int word;
};

// Per-stream state for stepwise prediction: RNN state, the last seen token of
// each class, a short surface history for convert contexts, and the cache
// buffer of (hidden, token) pairs.
struct PredictionContext {
    RnnState state;
    std::vector<real> h_top;
    std::array<int, kTokenClassCount> last_local;
    std::deque<int> recent_words;  // last 3 word ids, newest last
    std::deque<CacheEntry> cache;
    int cache_window = 500;
    bool has_h = false;

    explicit PredictionContext(const NetworkConfig& cfg, int window = 500)
        : state(RnnState::zeros(cfg)), cache_window(window) {
        last_local.fill(-1);
    }

    void reset(const NetworkConfig& cfg) {
        state = RnnState::zeros(cfg);
        h_top.clear();
        has_h = false;
        last_local.fill(-1);
        recent_words.clear();
        cache.clear();
    }
};

// Advances the context over one token of the prefix.
inline void advance(PredictionContext& ctx, const LanguageModel& model, const Vocabulary& vocab,
                    int word_id) {
    if (ctx.has_h) {
        ctx.cache.push_back({ctx.h_top, word_id});
        if (static_cast<int>(ctx.cache.size()) > ctx.cache_window) ctx.cache.pop_front();
    }
    lstm_advance(model.params, word_id, ctx.state);
    ctx.h_top = ctx.state.h.back();
    ctx.has_h = true;
    TokenClass c = vocab.word_class[static_cast<std::size_t>(word_id)];
    if (c != TokenClass::Plain)
        ctx.last_local[static_cast<std::size_t>(static_cast<int>(c))] =
            vocab.class_vocab[static_cast<int>(c)].local(word_id);
    ctx.recent_words.push_back(word_id);
    if (ctx.recent_words.size() > 3) ctx.recent_words.pop_front();
}

// Convert conditioning for the next position, if the last three tokens match
// "<number> <unit> (".
inline MmContext mm_context_for(const PredictionContext& ctx, const Vocabulary& vocab,
                                TokenClass cls, const UnitTable* units) {
    MmContext mc;
    mc.prev_local = ctx.last_local[static_cast<std::size_t>(static_cast<int>(cls))];
    if (cls == TokenClass::Convert && units && ctx.recent_words.size() == 3) {
        const std::string& open = vocab.id_to_word[static_cast<std::size_t>(ctx.recent_words[2])];
        const std::string& unit = vocab.id_to_word[static_cast<std::size_t>(ctx.recent_words[1])];
        const std::string& num = vocab.id_to_word[static_cast<std::size_t>(ctx.recent_words[0])];
        auto value = parse_number(num);
        if (open == "(" && units->has_unit(unit) && value) {
            mc.has_convert = true;
            mc.conv_value = *value;
            mc.conv_unit = unit;
        }
    }
    return mc;
}

namespace detail {

inline std::vector<real> head_softmax(const LanguageModel& model, const std::vector<real>& h,
                                      int head) {
    const auto& hd = model.params.heads[static_cast<std::size_t>(head)];
    std::vector<real> logits(static_cast<std::size_t>(hd.u.cols));
    affine_row(h.data(), hd.u, hd.bias.data(), logits.data());
    softmax_inplace(logits.data(), static_cast<int>(logits.size()));
    return logits;
}

}  // namespace detail

inline std::vector<real> predict_flat(const LanguageModel& model, const PredictionContext& ctx) {
    if (!ctx.has_h) throw ConfigError("predict: context has not consumed any prefix");
    return detail::head_softmax(model, ctx.h_top, model.heads.word);
}

// Hierarchical composition. `within_class` supplies P_C per class; plain
// tokens take the class-head probability of the token itself.
template <typename WithinClassFn>
inline std::vector<real> predict_composed(const LanguageModel& model, const Vocabulary& vocab,
                                          const PredictionContext& ctx, WithinClassFn&& within_class) {
    if (!ctx.has_h) throw ConfigError("predict: context has not consumed any prefix");
    std::vector<real> out(static_cast<std::size_t>(vocab.size()), real(0));
    std::vector<real> class_mass(kTokenClassCount, real(0));
    if (model.cfg.single_task_summation || model.heads.cls < 0) {
        auto flat = detail::head_softmax(model, ctx.h_top, model.heads.word);
        for (int w = 0; w < vocab.size(); ++w) {
            TokenClass c = vocab.word_class[static_cast<std::size_t>(w)];
            if (c == TokenClass::Plain)
                out[static_cast<std::size_t>(w)] = flat[static_cast<std::size_t>(w)];
            else
                class_mass[static_cast<std::size_t>(static_cast<int>(c))] += flat[static_cast<std::size_t>(w)];
        }
    } else {
        auto ch = detail::head_softmax(model, ctx.h_top, model.heads.cls);
        for (int w = 0; w < vocab.size(); ++w) {
            int id = vocab.class_head_of_word[static_cast<std::size_t>(w)];
            if (id >= 0) out[static_cast<std::size_t>(w)] = ch[static_cast<std::size_t>(id)];
        }
        for (TokenClass c : vocab.present_classes())
            class_mass[static_cast<std::size_t>(static_cast<int>(c))] =
                ch[static_cast<std::size_t>(vocab.tag_id[static_cast<std::size_t>(static_cast<int>(c))])];
    }
    for (TokenClass c : vocab.present_classes()) {
        const auto& cv = vocab.class_vocab[static_cast<int>(c)];
        std::vector<real> within = within_class(c);
        const real mass = class_mass[static_cast<std::size_t>(static_cast<int>(c))];
        for (int i = 0; i < cv.size(); ++i)
            out[static_cast<std::size_t>(cv.members[static_cast<std::size_t>(i)])] = mass * within[static_cast<std::size_t>(i)];
    }
    return out;
}

inline std::vector<real> predict_hierarchical(const LanguageModel& model, const Vocabulary& vocab,
                                              const PredictionContext& ctx) {
    return predict_composed(model, vocab, ctx, [&](TokenClass c) {
        int head = model.heads.per_class[static_cast<int>(c)];
        if (head < 0) throw ConfigError("hierarchical predictor missing class head");
        return detail::head_softmax(model, ctx.h_top, head);
    });
}

inline std::vector<real> predict_nslm(const LanguageModel& model, const Vocabulary& vocab,
                                      const MicroModelSet& mms, const PredictionContext& ctx,
                                      const UnitTable* units = nullptr) {
    return predict_composed(model, vocab, ctx, [&](TokenClass c) {
        const auto& mm = mms[static_cast<std::size_t>(static_cast<int>(c))];
        if (!mm) throw ConfigError("nslm predictor missing micro-model for class");
        return mm_distribution(*mm, mm_context_for(ctx, vocab, c, units), units);
    });
}

// Recency cache: p_cache(w) from exp-scaled dot products between the current
// hidden state and buffered states; mixed into the base distribution.
inline std::vector<real> cache_adjust(const std::vector<real>& base, const PredictionContext& ctx,
                                      const CacheConfig& cache) {
    if (cache.lambda == real(0) || ctx.cache.empty()) return base;
    std::vector<double> scores;
    scores.reserve(ctx.cache.size());
    double mx = -std::numeric_limits<double>::infinity();
    for (const auto& entry : ctx.cache) {
        double s = static_cast<double>(cache.theta) *
                   static_cast<double>(dot(ctx.h_top.data(), entry.h.data(), static_cast<int>(ctx.h_top.size())));
        scores.push_back(s);
        mx = std::max(mx, s);
    }
    std::vector<double> pc(base.size(), 0.0);
    double z = 0;
    std::size_t i = 0;
    for (const auto& entry : ctx.cache) {
        double e = std::exp(scores[i++] - mx);
        pc[static_cast<std::size_t>(entry.word)] += e;
        z += e;
    }
    std::vector<real> out(base.size());
    for (std::size_t w = 0; w < base.size(); ++w)
        out[w] = (real(1) - cache.lambda) * base[w] + cache.lambda * static_cast<real>(pc[w] / z);
    return out;
}

inline std::vector<real> ensemble_interpolate(const std::vector<real>& p_a,
                                              const std::vector<real>& p_b, real lambda_ens) {
    if (p_a.size() != p_b.size()) throw ConfigError("ensemble_interpolate: support mismatch");
    std::vector<real> out(p_a.size());
    for (std::size_t i = 0; i < p_a.size(); ++i)
        out[i] = lambda_ens * p_a[i] + (real(1) - lambda_ens) * p_b[i];
    return out;
}

// ---------------------------------------------------------------------------
// Per-class character RNN
// ---------------------------------------------------------------------------

struct CharRnn {
    TokenClass cls = TokenClass::Plain;
    LstmParams params;
    std::vector<char> alphabet;
    std::unordered_map<char, int> char_id;
    int start_id = 0;  // input-side start marker
    int end_id = 0;    // head-side end-of-token symbol
};

inline CharRnn train_char_rnn(TokenClass cls, const std::vector<std::string>& tokens, int dim,
                              int epochs, Rng& rng, real lr = real(0.5)) {
    if (tokens.empty()) throw DataError("train_char_rnn: no tokens");
    CharRnn crnn;
    crnn.cls = cls;
    std::map<char, int> seen;
    for (const auto& t : tokens)
        for (char ch : t) seen.emplace(ch, 0);
    for (auto& [ch, id] : seen) {
        id = static_cast<int>(crnn.alphabet.size());
        crnn.alphabet.push_back(ch);
        crnn.char_id[ch] = id;
    }
    const int A = static_cast<int>(crnn.alphabet.size());
    crnn.start_id = A;
    crnn.end_id = A;

    NetworkConfig cfg;
    cfg.input_vocab = A + 1;  // characters plus start marker
    cfg.dim = dim;
    cfg.layers = 1;
    cfg.heads = {{"char", A + 1}};  // characters plus end marker
    crnn.params = LstmParams::build(cfg);
    crnn.params.init_uniform(rng);

    // one long stream, one token per reset span
    StreamData s;
    s.targets.resize(1);
    for (const auto& t : tokens) {
        s.inputs.push_back(crnn.start_id);
        s.reset.push_back(1);
        s.targets[0].push_back(crnn.char_id.at(t[0]));
        for (std::size_t i = 0; i + 1 < t.size(); ++i) {
            s.inputs.push_back(crnn.char_id.at(t[i]));
            s.reset.push_back(0);
            s.targets[0].push_back(crnn.char_id.at(t[i + 1]));
        }
        s.inputs.push_back(crnn.char_id.at(t.back()));
        s.reset.push_back(0);
        s.targets[0].push_back(crnn.end_id);
    }
    auto lanes = make_lanes(s, 20);
    GradientSet grads = zero_like(crnn.params);
    for (int epoch = 0; epoch < epochs; ++epoch) {
        BatchState state = BatchState::zeros(cfg, lanes.B);
        for (long long start = 0; start < lanes.lane_len; start += 35) {
            auto w = window_at(lanes, start, 35, 1);
            for (auto& t : grads.tensors()) std::fill(t.data, t.data + t.size, real(0));
            run_window(crnn.params, w, state, &grads);
            sgd_step(crnn.params, grads, lr, real(5));
        }
    }
    return crnn;
}

// Chain-rule log probability of spelling `token` and ending.
inline double char_rnn_token_logprob(const CharRnn& crnn, const std::string& token) {
    constexpr double kCharFloor = 1e-8;
    RnnState st = RnnState::zeros(crnn.params.cfg);
    double lp = 0;
    int input = crnn.start_id;
    for (char ch : token) {
        auto logits = lstm_step(crnn.params, input, st);
        auto it = crnn.char_id.find(ch);
        if (it == crnn.char_id.end()) {
            lp += std::log(kCharFloor);  // character outside the alphabet
            continue;
        }
        auto p = softmax(logits[0]);
        lp += std::log(std::max(static_cast<double>(p[static_cast<std::size_t>(it->second)]), kCharFloor));
        input = it->second;
    }
    auto logits = lstm_step(crnn.params, input, st);
    auto p = softmax(logits[0]);
    lp += std::log(std::max(static_cast<double>(p[static_cast<std::size_t>(crnn.end_id)]), kCharFloor));
    return lp;
}

// Token probabilities renormalized over the closed class vocabulary. The
// spelling model does not condition on sentence context, so this is a fixed
// distribution per class.
inline std::vector<real> char_rnn_class_distribution(const CharRnn& crnn,
                                                     const std::vector<std::string>& members) {
    std::vector<double> lp(members.size());
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < members.size(); ++i) {
        lp[i] = char_rnn_token_logprob(crnn, members[i]);
        mx = std::max(mx, lp[i]);
    }
    std::vector<real> out(members.size());
    double z = 0;
    for (std::size_t i = 0; i < members.size(); ++i) z += std::exp(lp[i] - mx);
    for (std::size_t i = 0; i < members.size(); ++i)
        out[i] = static_cast<real>(std::exp(lp[i] - mx) / z);
    return out;
}

inline std::vector<real> predict_char_rnn_composed(const LanguageModel& model, const Vocabulary& vocab,
                                                   const std::array<std::vector<real>, kTokenClassCount>& class_dists,
                                                   const PredictionContext& ctx) {
    return predict_composed(model, vocab, ctx, [&](TokenClass c) {
        const auto& d = class_dists[static_cast<std::size_t>(static_cast<int>(c))];
        if (d.empty()) throw ConfigError("char-rnn predictor missing class distribution");
        return d;
    });
}

// ---------------------------------------------------------------------------
// Model checkpoints
// ---------------------------------------------------------------------------

inline void save_language_model(const LanguageModel& model, const std::string& path,
                                const nlohmann::json& run_meta = {}) {
    nlohmann::json extra;
    extra["word_head"] = model.heads.word;
    extra["class_head"] = model.heads.cls;
    extra["per_class"] = nlohmann::json::object();
    for (int c = 0; c < kTokenClassCount; ++c)
        if (model.heads.per_class[static_cast<std::size_t>(c)] >= 0)
            extra["per_class"][class_name(static_cast<TokenClass>(c))] = model.heads.per_class[static_cast<std::size_t>(c)];
    extra["dim"] = model.cfg.dim;
    extra["single_task_summation"] = model.cfg.single_task_summation;
    extra["ground"] = model.cfg.ground;
    if (!run_meta.is_null() && !run_meta.empty()) extra["run"] = run_meta;
    LstmParams copy = model.params;
    save_checkpoint(path, copy, model.vocab_hash, extra);
}

inline LanguageModel load_language_model(const std::string& path, const Vocabulary& vocab) {
    nlohmann::json extra;
    LanguageModel model;
    model.params = load_checkpoint(path, vocab.hash(), &extra);
    model.vocab_hash = vocab.hash();
    model.heads.word = extra["word_head"].get<int>();
    model.heads.cls = extra["class_head"].get<int>();
    model.heads.per_class.fill(-1);
    for (auto& [name, idx] : extra["per_class"].items()) {
        auto c = class_from_name(name);
        if (!c) throw DataError("unknown class in checkpoint: " + name);
        model.heads.per_class[static_cast<std::size_t>(static_cast<int>(*c))] = idx.get<int>();
    }
    model.heads.specs = model.params.cfg.heads;
    model.cfg.dim = extra["dim"].get<int>();
    model.cfg.layers = model.params.cfg.layers;
    model.cfg.single_task_summation = extra["single_task_summation"].get<bool>();
    model.cfg.ground = extra["ground"].get<bool>();
    model.cfg.multi_task = model.heads.cls >= 0;
    return model;
}

}  // namespace nslm
