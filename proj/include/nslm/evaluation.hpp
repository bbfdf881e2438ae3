// Evaluation: per-position log probabilities for every configured predictor,
// perplexity masks (global, per class, aggregates, rarity buckets) and the
// text/JSON report writers.

#pragma once

#include <iomanip>
#include <map>
#include <sstream>

#include "nslm/language_model.hpp"

namespace nslm {

struct EvalOptions {
    bool flat = true;
    bool hierarchical = true;
    bool nslm = true;
    bool crnn = false;
    bool cache_variants = false;
    CacheConfig cache;
    const UnitTable* units = nullptr;
    int batch = 20;
    int bptt = 35;
    bool cache_resets_per_document = true;
};

struct PositionScore {
    std::size_t position = 0;  // index into the tagged corpus
    TokenClass cls = TokenClass::Plain;
    int word = -1;
    std::vector<double> logp;  // natural log, parallel to predictor names
};

struct EvalResult {
    std::vector<std::string> predictors;
    std::vector<PositionScore> positions;  // corpus order

    int predictor_index(const std::string& name) const {
        for (std::size_t i = 0; i < predictors.size(); ++i)
            if (predictors[i] == name) return static_cast<int>(i);
        return -1;
    }
};

namespace detail {

struct LaneInfo {
    std::vector<std::size_t> doc_ids;
    std::size_t length = 0;  // scored positions
};

// Documents go whole onto lanes (shortest lane first) so that contexts,
// links and caches never straddle a lane cut.
inline std::vector<LaneInfo> assign_documents(const TaggedCorpus& tagged, int batch) {
    std::vector<LaneInfo> lanes(static_cast<std::size_t>(std::max(1, batch)));
    for (std::size_t d = 0; d + 1 < tagged.doc_begin.size(); ++d) {
        std::size_t len = tagged.doc_begin[d + 1] - tagged.doc_begin[d];
        if (len < 2) continue;  // nothing to score
        auto best = std::min_element(lanes.begin(), lanes.end(),
                                     [](const LaneInfo& a, const LaneInfo& b) { return a.length < b.length; });
        best->doc_ids.push_back(d);
        best->length += len - 1;
    }
    lanes.erase(std::remove_if(lanes.begin(), lanes.end(),
                               [](const LaneInfo& l) { return l.length == 0; }),
                lanes.end());
    return lanes;
}

struct LaneStream {
    std::vector<int> inputs;
    std::vector<std::uint8_t> reset;
    std::vector<std::size_t> target_pos;  // tagged index of the scored token
};

inline LaneStream lane_stream(const TaggedCorpus& tagged, const LaneInfo& lane) {
    LaneStream s;
    for (std::size_t d : lane.doc_ids) {
        std::size_t begin = tagged.doc_begin[d], end = tagged.doc_begin[d + 1];
        for (std::size_t i = begin; i + 1 < end; ++i) {
            s.inputs.push_back(tagged.tokens[i]);
            s.reset.push_back(i == begin ? 1 : 0);
            s.target_pos.push_back(i + 1);
        }
    }
    return s;
}

inline double row_log_prob(const real* logits, int n, int target) {
    return static_cast<double>(logits[target]) - static_cast<double>(log_sum_exp(logits, n));
}

}  // namespace detail

// Scores every document-internal position of `eval` under the configured
// predictors. Results are bit-identical for any batch size: documents are
// processed independently from a reset state.
inline EvalResult evaluate_corpus(const LanguageModel& model, const Vocabulary& vocab,
                                  const TaggedCorpus& eval, const MicroModelSet* mms,
                                  const std::array<std::vector<real>, kTokenClassCount>* crnn_dists,
                                  const EvalOptions& opts) {
    EvalResult result;
    const bool summation = model.cfg.single_task_summation || model.heads.cls < 0;
    const bool want_hier = opts.hierarchical;
    const bool want_nslm = opts.nslm && mms;
    const bool want_crnn = opts.crnn && crnn_dists;

    std::vector<std::string> names;
    if (opts.flat) names.push_back("flat");
    if (want_hier) names.push_back("hierarchical");
    if (want_crnn) names.push_back("crnn");
    if (want_nslm) names.push_back("nslm");
    std::size_t base_count = names.size();
    if (opts.cache_variants)
        for (std::size_t i = 0; i < base_count; ++i) names.push_back(names[i] + "+cache");
    result.predictors = names;

    const int H = model.params.cfg.dim;
    auto lanes = detail::assign_documents(eval, opts.batch);
    if (lanes.empty()) throw DataError("evaluate_corpus: no scorable positions");
    std::vector<detail::LaneStream> streams;
    std::size_t max_len = 0, total = 0;
    for (const auto& lane : lanes) {
        streams.push_back(detail::lane_stream(eval, lane));
        max_len = std::max(max_len, streams.back().inputs.size());
        total += streams.back().inputs.size();
    }
    const int B = static_cast<int>(lanes.size());

    std::map<std::size_t, PositionScore> scored;

    BatchState state = BatchState::zeros(model.params.cfg, B);
    Mat h_top;

    // cache buffers per lane
    struct Buffered {
        std::deque<CacheEntry> entries;
    };
    std::vector<Buffered> cache(static_cast<std::size_t>(B));

    const auto& word_head = model.params.heads[static_cast<std::size_t>(model.heads.word)];

    for (std::size_t start = 0; start < max_len; start += static_cast<std::size_t>(opts.bptt)) {
        const int T = static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(opts.bptt), max_len - start));
        WindowBatch w;
        w.T = T;
        w.B = B;
        w.inputs.assign(static_cast<std::size_t>(T) * B, 0);
        w.reset_before.assign(static_cast<std::size_t>(T) * B, 0);
        std::vector<std::size_t> slot_target(static_cast<std::size_t>(T) * B, SIZE_MAX);
        for (int t = 0; t < T; ++t) {
            for (int b = 0; b < B; ++b) {
                std::size_t idx = start + static_cast<std::size_t>(t);
                if (idx >= streams[static_cast<std::size_t>(b)].inputs.size()) continue;
                std::size_t slot = static_cast<std::size_t>(t) * B + b;
                w.inputs[slot] = streams[static_cast<std::size_t>(b)].inputs[idx];
                w.reset_before[slot] = streams[static_cast<std::size_t>(b)].reset[idx];
                slot_target[slot] = streams[static_cast<std::size_t>(b)].target_pos[idx];
            }
        }
        forward_hidden(model.params, w, state, h_top);

        // word-head logits for the whole window
        Mat word_logits(T * B, word_head.u.cols);
        for (int r = 0; r < T * B; ++r)
            std::memcpy(word_logits.row(r), word_head.bias.data(),
                        sizeof(real) * static_cast<std::size_t>(word_head.u.cols));
        gemm_add(word_logits, h_top, word_head.u);

        Mat class_logits;
        if (!summation && (want_hier || want_nslm || want_crnn)) {
            const auto& ch = model.params.heads[static_cast<std::size_t>(model.heads.cls)];
            class_logits.resize(T * B, ch.u.cols);
            for (int r = 0; r < T * B; ++r)
                std::memcpy(class_logits.row(r), ch.bias.data(), sizeof(real) * static_cast<std::size_t>(ch.u.cols));
            gemm_add(class_logits, h_top, ch.u);
        }

        // per-class neural head logits only at that class's positions
        std::array<std::vector<int>, kTokenClassCount> class_rows;
        std::array<Mat, kTokenClassCount> per_class_logits;
        if (want_hier) {
            for (int r = 0; r < T * B; ++r) {
                if (slot_target[static_cast<std::size_t>(r)] == SIZE_MAX) continue;
                TokenClass c = eval.classes[slot_target[static_cast<std::size_t>(r)]];
                if (c != TokenClass::Plain) class_rows[static_cast<std::size_t>(static_cast<int>(c))].push_back(r);
            }
            for (int ci = 1; ci < kTokenClassCount; ++ci) {
                int head = model.heads.per_class[static_cast<std::size_t>(ci)];
                if (head < 0 || class_rows[static_cast<std::size_t>(ci)].empty()) continue;
                const auto& hd = model.params.heads[static_cast<std::size_t>(head)];
                const auto& rows = class_rows[static_cast<std::size_t>(ci)];
                Mat hsub(static_cast<int>(rows.size()), H);
                for (std::size_t k = 0; k < rows.size(); ++k)
                    std::memcpy(hsub.row(static_cast<int>(k)), h_top.row(rows[k]), sizeof(real) * static_cast<std::size_t>(H));
                Mat& lg = per_class_logits[static_cast<std::size_t>(ci)];
                lg.resize(static_cast<int>(rows.size()), hd.u.cols);
                for (int r = 0; r < lg.rows; ++r)
                    std::memcpy(lg.row(r), hd.bias.data(), sizeof(real) * static_cast<std::size_t>(hd.u.cols));
                gemm_add(lg, hsub, hd.u);
            }
        }
        std::array<std::map<int, int>, kTokenClassCount> row_rank;
        for (int ci = 1; ci < kTokenClassCount; ++ci)
            for (std::size_t k = 0; k < class_rows[static_cast<std::size_t>(ci)].size(); ++k)
                row_rank[static_cast<std::size_t>(ci)][class_rows[static_cast<std::size_t>(ci)][k]] = static_cast<int>(k);

        for (int t = 0; t < T; ++t) {
            for (int b = 0; b < B; ++b) {
                const std::size_t slot = static_cast<std::size_t>(t) * B + b;
                const std::size_t pos = slot_target[slot];
                if (pos == SIZE_MAX) continue;
                const int target = eval.tokens[pos];
                const TokenClass cls = eval.classes[pos];
                const int r = static_cast<int>(slot);

                PositionScore score;
                score.position = pos;
                score.cls = cls;
                score.word = target;
                score.logp.assign(result.predictors.size(), 0.0);

                const double word_lse = static_cast<double>(log_sum_exp(word_logits.row(r), word_logits.cols));
                const double logp_flat = static_cast<double>(word_logits.row(r)[target]) - word_lse;

                // class mass for the composed predictors
                double log_class_mass = 0, logp_plain_composed = 0;
                if (!(want_hier || want_nslm || want_crnn)) {
                    // nothing composed requested; leave the placeholders at zero
                } else if (cls == TokenClass::Plain) {
                    if (summation) {
                        logp_plain_composed = logp_flat;
                    } else {
                        int id = vocab.class_head_of_word[static_cast<std::size_t>(target)];
                        logp_plain_composed = detail::row_log_prob(class_logits.row(r), class_logits.cols, id);
                    }
                } else {
                    if (summation) {
                        const auto& cv = vocab.class_vocab[static_cast<int>(cls)];
                        double mass = 0;
                        for (int m : cv.members)
                            mass += std::exp(static_cast<double>(word_logits.row(r)[m]) - word_lse);
                        log_class_mass = std::log(std::max(mass, 1e-300));
                    } else {
                        int tag = vocab.tag_id[static_cast<std::size_t>(static_cast<int>(cls))];
                        log_class_mass = detail::row_log_prob(class_logits.row(r), class_logits.cols, tag);
                    }
                }

                std::size_t col = 0;
                std::vector<double> base_logp;
                if (opts.flat) base_logp.push_back(logp_flat);
                if (want_hier) {
                    double lp;
                    if (cls == TokenClass::Plain) {
                        lp = logp_plain_composed;
                    } else {
                        int local = vocab.class_vocab[static_cast<int>(cls)].local(target);
                        const Mat& lg = per_class_logits[static_cast<std::size_t>(static_cast<int>(cls))];
                        int rank = row_rank[static_cast<std::size_t>(static_cast<int>(cls))].at(r);
                        lp = log_class_mass + detail::row_log_prob(lg.row(rank), lg.cols, local);
                    }
                    base_logp.push_back(lp);
                }
                if (want_crnn) {
                    double lp;
                    if (cls == TokenClass::Plain) {
                        lp = logp_plain_composed;
                    } else {
                        const auto& d = (*crnn_dists)[static_cast<std::size_t>(static_cast<int>(cls))];
                        int local = vocab.class_vocab[static_cast<int>(cls)].local(target);
                        lp = log_class_mass + std::log(std::max(static_cast<double>(d[static_cast<std::size_t>(local)]), 1e-300));
                    }
                    base_logp.push_back(lp);
                }
                if (want_nslm) {
                    double lp;
                    if (cls == TokenClass::Plain) {
                        lp = logp_plain_composed;
                    } else {
                        const auto& mm = (*mms)[static_cast<std::size_t>(static_cast<int>(cls))];
                        if (!mm) throw ConfigError("evaluate_corpus: micro-model missing for class");
                        MmContext ctx;
                        std::int64_t prev = eval.prev_same_class[pos];
                        if (prev >= 0)
                            ctx.prev_local = vocab.class_vocab[static_cast<int>(cls)].local(
                                eval.tokens[static_cast<std::size_t>(prev)]);
                        if (cls == TokenClass::Convert && opts.units && pos >= 3) {
                            const std::string& open = vocab.id_to_word[static_cast<std::size_t>(eval.tokens[pos - 1])];
                            const std::string& unit = vocab.id_to_word[static_cast<std::size_t>(eval.tokens[pos - 2])];
                            const std::string& num = vocab.id_to_word[static_cast<std::size_t>(eval.tokens[pos - 3])];
                            auto value = parse_number(num);
                            if (open == "(" && opts.units->has_unit(unit) && value) {
                                ctx.has_convert = true;
                                ctx.conv_value = *value;
                                ctx.conv_unit = unit;
                            }
                        }
                        auto dist = mm_distribution(*mm, ctx, opts.units);
                        int local = vocab.class_vocab[static_cast<int>(cls)].local(target);
                        lp = log_class_mass + std::log(static_cast<double>(dist[static_cast<std::size_t>(local)]));
                    }
                    base_logp.push_back(lp);
                }
                for (double lp : base_logp) score.logp[col++] = lp;

                if (opts.cache_variants) {
                    auto& buf = cache[static_cast<std::size_t>(b)].entries;
                    if (opts.cache_resets_per_document && w.reset_before[slot]) buf.clear();
                    double log_mix_cache = -std::numeric_limits<double>::infinity();
                    if (!buf.empty() && opts.cache.lambda > real(0)) {
                        double mx = -std::numeric_limits<double>::infinity();
                        std::vector<double> scores_buf;
                        scores_buf.reserve(buf.size());
                        for (const auto& e : buf) {
                            double s = static_cast<double>(opts.cache.theta) *
                                       static_cast<double>(dot(h_top.row(r), e.h.data(), H));
                            scores_buf.push_back(s);
                            mx = std::max(mx, s);
                        }
                        double z = 0, num = 0;
                        std::size_t k = 0;
                        for (const auto& e : buf) {
                            double ev = std::exp(scores_buf[k++] - mx);
                            z += ev;
                            if (e.word == target) num += ev;
                        }
                        log_mix_cache = std::log(std::max(num, 0.0)) - std::log(z);
                    }
                    for (std::size_t i = 0; i < base_count; ++i) {
                        double lp;
                        if (opts.cache.lambda == real(0) || buf.empty()) {
                            lp = base_logp[i];  // exact identity
                        } else {
                            double pb = std::exp(base_logp[i]);
                            double pc = std::isfinite(log_mix_cache) ? std::exp(log_mix_cache) : 0.0;
                            lp = std::log((1.0 - static_cast<double>(opts.cache.lambda)) * pb +
                                          static_cast<double>(opts.cache.lambda) * pc);
                        }
                        score.logp[col++] = lp;
                    }
                    // push this position into the lane cache
                    CacheEntry entry;
                    entry.h.assign(h_top.row(r), h_top.row(r) + H);
                    entry.word = target;
                    buf.push_back(std::move(entry));
                    if (static_cast<int>(buf.size()) > opts.cache.window) buf.pop_front();
                }

                scored.emplace(pos, std::move(score));
            }
        }
    }

    result.positions.reserve(scored.size());
    for (auto& [pos, score] : scored) result.positions.push_back(std::move(score));
    return result;
}

// Adds a probability-space interpolation column between two predictors.
inline void add_ensemble_column(EvalResult& result, const std::string& a, const std::string& b,
                                double lambda, const std::string& name = "ensemble") {
    int ia = result.predictor_index(a), ib = result.predictor_index(b);
    if (ia < 0 || ib < 0) throw ConfigError("add_ensemble_column: unknown predictor");
    result.predictors.push_back(name);
    for (auto& p : result.positions) {
        double mix = lambda * std::exp(p.logp[static_cast<std::size_t>(ia)]) +
                     (1.0 - lambda) * std::exp(p.logp[static_cast<std::size_t>(ib)]);
        p.logp.push_back(std::log(std::max(mix, 1e-300)));
    }
}

// Validation grid {0, 0.1, ..., 1.0} for the interpolation weight.
inline double tune_ensemble_lambda(const EvalResult& valid, const std::string& a,
                                   const std::string& b) {
    int ia = valid.predictor_index(a), ib = valid.predictor_index(b);
    if (ia < 0 || ib < 0) throw ConfigError("tune_ensemble_lambda: unknown predictor");
    double best_lambda = 0, best_nll = std::numeric_limits<double>::infinity();
    for (int step = 0; step <= 10; ++step) {
        double lambda = step / 10.0;
        double nll = 0;
        for (const auto& p : valid.positions) {
            double mix = lambda * std::exp(p.logp[static_cast<std::size_t>(ia)]) +
                         (1.0 - lambda) * std::exp(p.logp[static_cast<std::size_t>(ib)]);
            nll -= std::log(std::max(mix, 1e-300));
        }
        if (nll < best_nll) {
            best_nll = nll;
            best_lambda = lambda;
        }
    }
    return best_lambda;
}

// ---------------------------------------------------------------------------
// Report assembly
// ---------------------------------------------------------------------------

struct ReportRow {
    std::string mask;
    long long count = 0;
    std::vector<double> perplexity;  // parallel to predictor names; NaN = absent
};

struct EvalReport {
    std::vector<std::string> predictors;
    std::vector<ReportRow> rows;
    std::string baseline;  // predictor name percent changes compare against
    nlohmann::json metadata;

    const ReportRow* row(const std::string& mask) const {
        for (const auto& r : rows)
            if (r.mask == mask) return &r;
        return nullptr;
    }
};

namespace detail {

template <typename Pred>
inline ReportRow masked_row(const EvalResult& result, const std::string& name, Pred&& keep) {
    ReportRow row;
    row.mask = name;
    row.perplexity.assign(result.predictors.size(), std::numeric_limits<double>::quiet_NaN());
    std::vector<double> nll(result.predictors.size(), 0.0);
    for (const auto& p : result.positions) {
        if (!keep(p)) continue;
        ++row.count;
        for (std::size_t i = 0; i < nll.size(); ++i) nll[i] -= p.logp[i];
    }
    if (row.count > 0)
        for (std::size_t i = 0; i < nll.size(); ++i)
            row.perplexity[i] = std::exp(nll[i] / static_cast<double>(row.count));
    return row;
}

}  // namespace detail

// Bucketed perplexities by training frequency of the target token.
inline std::vector<ReportRow> rarity_report(const EvalResult& result,
                                            const std::vector<long long>& train_count,
                                            const std::vector<long long>& edges,
                                            bool class_tokens_only = true) {
    std::vector<long long> bounds = edges;
    std::sort(bounds.begin(), bounds.end());
    std::vector<ReportRow> rows;
    auto in_scope = [&](const PositionScore& p) {
        return !class_tokens_only || p.cls != TokenClass::Plain;
    };
    auto count_of = [&](const PositionScore& p) { return train_count[static_cast<std::size_t>(p.word)]; };

    // implicit leading bucket when counts fall below the first edge
    bool any_low = false;
    for (const auto& p : result.positions)
        if (in_scope(p) && count_of(p) < bounds.front()) any_low = true;
    if (any_low) {
        auto row = detail::masked_row(result, "[0," + std::to_string(bounds.front()) + ")",
                                      [&](const PositionScore& p) {
                                          return in_scope(p) && count_of(p) < bounds.front();
                                      });
        rows.push_back(std::move(row));
    }
    for (std::size_t e = 0; e < bounds.size(); ++e) {
        long long lo = bounds[e];
        long long hi = e + 1 < bounds.size() ? bounds[e + 1] : std::numeric_limits<long long>::max();
        std::string label = "[" + std::to_string(lo) + "," +
                            (e + 1 < bounds.size() ? std::to_string(hi) : "inf") + ")";
        auto row = detail::masked_row(result, label, [&](const PositionScore& p) {
            return in_scope(p) && count_of(p) >= lo && count_of(p) < hi;
        });
        if (row.count > 0) rows.push_back(std::move(row));
    }
    return rows;
}

struct ReportConfig {
    std::vector<long long> rarity_edges = {1, 10, 100, 1000};
    std::string baseline = "flat";
    bool rarity_class_tokens_only = true;
};

inline EvalReport build_report(const EvalResult& result, const std::vector<long long>& train_count,
                               const ReportConfig& cfg = {}, nlohmann::json metadata = {}) {
    EvalReport report;
    report.predictors = result.predictors;
    report.baseline = cfg.baseline;
    report.metadata = std::move(metadata);
    report.metadata["cache_semantics"] =
        "general cache over the evaluation stream, scoring masked per class";

    for (int ci = 1; ci < kTokenClassCount; ++ci) {
        auto c = static_cast<TokenClass>(ci);
        auto row = detail::masked_row(result, class_name(c),
                                      [&](const PositionScore& p) { return p.cls == c; });
        if (row.count > 0) report.rows.push_back(std::move(row));
    }
    report.rows.push_back(detail::masked_row(result, "numbers", [](const PositionScore& p) {
        return is_number_class(p.cls);
    }));
    report.rows.push_back(detail::masked_row(result, "locations", [](const PositionScore& p) {
        return is_geo_class(p.cls);
    }));
    report.rows.push_back(detail::masked_row(result, "classes", [](const PositionScore& p) {
        return p.cls != TokenClass::Plain;
    }));
    report.rows.push_back(detail::masked_row(result, "global", [](const PositionScore&) { return true; }));
    for (auto& row : rarity_report(result, train_count, cfg.rarity_edges, cfg.rarity_class_tokens_only)) {
        row.mask = "rarity " + row.mask;
        report.rows.push_back(std::move(row));
    }
    // drop empty aggregate rows (e.g. no geo classes in a number corpus)
    report.rows.erase(std::remove_if(report.rows.begin(), report.rows.end(),
                                     [](const ReportRow& r) { return r.count == 0; }),
                      report.rows.end());
    return report;
}

// Percent change vs the baseline; parenthesized numbers are reductions.
inline std::string format_percent_change(double baseline, double value) {
    if (!(baseline > 0) || !(value > 0)) return "";
    double change = (value - baseline) / baseline * 100.0;
    std::ostringstream ss;
    ss << std::fixed << std::setprecision(1);
    if (change <= 0)
        ss << "(" << -change << "%)";
    else
        ss << change << "%";
    return ss.str();
}

inline std::string format_report_text(const EvalReport& report) {
    std::ostringstream out;
    int base = -1;
    std::vector<int> width;
    for (std::size_t i = 0; i < report.predictors.size(); ++i) {
        if (report.predictors[i] == report.baseline) base = static_cast<int>(i);
        width.push_back(std::max<int>(12, static_cast<int>(report.predictors[i].size()) + 2));
    }

    out << std::left << std::setw(18) << "mask" << std::right << std::setw(10) << "tokens";
    for (std::size_t i = 0; i < report.predictors.size(); ++i) {
        out << std::setw(width[i]) << report.predictors[i];
        if (base >= 0 && report.predictors[i] != report.baseline) out << std::setw(10) << "chg";
    }
    out << "\n";
    for (const auto& row : report.rows) {
        out << std::left << std::setw(18) << row.mask << std::right << std::setw(10) << row.count;
        for (std::size_t i = 0; i < report.predictors.size(); ++i) {
            std::ostringstream val;
            if (std::isnan(row.perplexity[i]))
                val << "-";
            else
                val << std::fixed << std::setprecision(row.perplexity[i] < 100 ? 2 : 1) << row.perplexity[i];
            out << std::setw(width[i]) << val.str();
            if (base >= 0 && report.predictors[i] != report.baseline)
                out << std::setw(10)
                    << format_percent_change(row.perplexity[static_cast<std::size_t>(base)], row.perplexity[i]);
        }
        out << "\n";
    }
    return out.str();
}

inline nlohmann::json report_to_json(const EvalReport& report) {
    nlohmann::json j;
    j["predictors"] = report.predictors;
    j["baseline"] = report.baseline;
    j["metadata"] = report.metadata;
    j["rows"] = nlohmann::json::array();
    for (const auto& row : report.rows) {
        nlohmann::json r;
        r["mask"] = row.mask;
        r["tokens"] = row.count;
        r["perplexity"] = nlohmann::json::object();
        for (std::size_t i = 0; i < report.predictors.size(); ++i) {
            if (!std::isnan(row.perplexity[i])) r["perplexity"][report.predictors[i]] = row.perplexity[i];
        }
        j["rows"].push_back(std::move(r));
    }
    return j;
}

}  // namespace nslm
