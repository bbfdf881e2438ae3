// Micro-models: metric functions paired with fitted PDFs that allocate a
// class's probability mass over its vocabulary, plus grid-search selection.

#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "nslm/common.hpp"
#include "nslm/corpus.hpp"

namespace nslm {

enum class MetricKind { Difference, Value, Frequency, Convert, Euclidean };
enum class PdfKind { Multinomial, Unigram, Gaussian, MixtureOfGaussians, Binary };

inline const char* metric_name(MetricKind m) {
    switch (m) {
        case MetricKind::Difference: return "difference";
        case MetricKind::Value: return "value";
        case MetricKind::Frequency: return "frequency";
        case MetricKind::Convert: return "convert";
        case MetricKind::Euclidean: return "euclidean";
    }
    return "value";
}

inline const char* pdf_name(PdfKind p) {
    switch (p) {
        case PdfKind::Multinomial: return "multinomial";
        case PdfKind::Unigram: return "unigram";
        case PdfKind::Gaussian: return "gaussian";
        case PdfKind::MixtureOfGaussians: return "mixture-of-gaussians";
        case PdfKind::Binary: return "binary";
    }
    return "unigram";
}

inline std::optional<MetricKind> metric_from_name(const std::string& s) {
    for (MetricKind m : {MetricKind::Difference, MetricKind::Value, MetricKind::Frequency,
                         MetricKind::Convert, MetricKind::Euclidean})
        if (s == metric_name(m)) return m;
    return std::nullopt;
}

inline std::optional<PdfKind> pdf_from_name(const std::string& s) {
    for (PdfKind p : {PdfKind::Multinomial, PdfKind::Unigram, PdfKind::Gaussian,
                      PdfKind::MixtureOfGaussians, PdfKind::Binary})
        if (s == pdf_name(p)) return p;
    return std::nullopt;
}

// Binary-arity metrics condition on the most recent same-class token.
inline bool metric_uses_prev(MetricKind m) {
    return m == MetricKind::Difference || m == MetricKind::Convert || m == MetricKind::Euclidean;
}

// ---------------------------------------------------------------------------
// Metric functions
// ---------------------------------------------------------------------------

inline double difference_metric(double value_t, double value_prev) { return value_t - value_prev; }

inline double value_metric(double value_t) { return value_t; }

inline double frequency_metric(double train_count) { return train_count; }

// Negative squared distance in degrees; identical coordinates give the
// maximum value 0.
inline double euclidean_metric(double lat_t, double lon_t, double lat_prev, double lon_prev) {
    const double dlat = lat_t - lat_prev;
    const double dlon = lon_t - lon_prev;
    return -(dlat * dlat + dlon * dlon);
}

inline double round_to_decimals(double x, int decimals) {
    double scale = std::pow(10.0, decimals);
    return std::round(x * scale) / scale;
}

// True iff value_prev converted by `factor` and rounded to the candidate's
// surface precision reproduces the candidate's value.
inline bool convert_check(double value_t, int decimals_t, double value_prev, double factor) {
    const double expected = round_to_decimals(value_prev * factor, decimals_t);
    return std::fabs(expected - value_t) <= 1e-9 * std::max(1.0, std::fabs(value_t));
}

// Convert metric over surface tokens and a unit table.
inline bool convert_metric(const std::string& token_t, const std::string& token_prev,
                           const std::string& prev_unit, const std::string& target_unit,
                           const UnitTable& units) {
    auto factor = units.factor(prev_unit, target_unit);
    if (!factor) throw DataError("unknown unit pair: " + prev_unit + " -> " + target_unit);
    auto vt = parse_number(token_t);
    auto vp = parse_number(token_prev);
    if (!vt || !vp) throw DataError("convert metric on non-numeric token");
    return convert_check(*vt, surface_decimals(token_t), *vp, *factor);
}

// ---------------------------------------------------------------------------
// PDFs
// ---------------------------------------------------------------------------

struct GaussianParams {
    double mean = 0;
    double var = 1;
};

inline double gaussian_density(double x, const GaussianParams& g) {
    const double d = x - g.mean;
    return std::exp(-0.5 * d * d / g.var) / std::sqrt(2.0 * M_PI * g.var);
}

struct MoGParams {
    std::vector<double> weight, mean, var;
    int components() const { return static_cast<int>(weight.size()); }
};

inline double mog_density(double x, const MoGParams& m) {
    double s = 0;
    for (int k = 0; k < m.components(); ++k) {
        const double d = x - m.mean[static_cast<std::size_t>(k)];
        s += m.weight[static_cast<std::size_t>(k)] *
             std::exp(-0.5 * d * d / m.var[static_cast<std::size_t>(k)]) /
             std::sqrt(2.0 * M_PI * m.var[static_cast<std::size_t>(k)]);
    }
    return s;
}

// Add-alpha smoothed table over observed metric values.
struct CountTable {
    std::map<double, double> count;
    double alpha = 0.1;
    double total = 0;

    double weight(double m) const {
        auto it = count.find(m);
        return (it == count.end() ? 0.0 : it->second) + alpha;
    }
    std::size_t distinct() const { return count.size(); }
};

struct BinaryParams {
    double p_correct = 0.5;
};

constexpr double kVarianceFloor = 1e-6;

inline GaussianParams fit_gaussian(const std::vector<double>& samples,
                                   double var_floor = kVarianceFloor) {
    if (samples.empty()) throw DataError("fit_gaussian: no samples");
    double mean = 0;
    for (double s : samples) mean += s;
    mean /= static_cast<double>(samples.size());
    double var = 0;
    for (double s : samples) var += (s - mean) * (s - mean);
    var /= static_cast<double>(samples.size());
    return {mean, std::max(var, var_floor)};
}

inline CountTable fit_table(const std::vector<double>& samples, double alpha = 0.1) {
    if (samples.empty()) throw DataError("fit_table: no samples");
    CountTable t;
    t.alpha = alpha;
    for (double s : samples) t.count[s] += 1.0;
    t.total = static_cast<double>(samples.size());
    return t;
}

inline BinaryParams fit_binary(const std::vector<char>& outcomes, double alpha = 0.1) {
    if (outcomes.empty()) throw DataError("fit_binary: no samples");
    double succ = 0;
    for (char c : outcomes) succ += c ? 1.0 : 0.0;
    return {(succ + alpha) / (static_cast<double>(outcomes.size()) + 2.0 * alpha)};
}

// ---------------------------------------------------------------------------
// Mixture-of-Gaussians EM
// ---------------------------------------------------------------------------

struct EmOptions {
    int max_iterations = 200;
    double rel_tolerance = 1e-6;
    double var_floor = kVarianceFloor;
    int max_restarts = 5;
};

struct EmTrace {
    std::vector<double> log_likelihood;  // one entry per iteration
    int restarts = 0;
};

namespace detail {

inline double mog_log_likelihood(const std::vector<double>& x, const MoGParams& p) {
    double ll = 0;
    for (double xi : x) ll += std::log(std::max(mog_density(xi, p), 1e-300));
    return ll;
}

inline MoGParams mog_init(const std::vector<double>& sorted, int K, double var, Rng& rng,
                          double jitter) {
    MoGParams p;
    p.weight.assign(static_cast<std::size_t>(K), 1.0 / K);
    const std::size_t n = sorted.size();
    for (int k = 0; k < K; ++k) {
        std::size_t q = std::min(n - 1, static_cast<std::size_t>((k + 0.5) * static_cast<double>(n) / K));
        p.mean.push_back(sorted[q] + (jitter > 0 ? rng.normal(0.0, jitter) : 0.0));
        p.var.push_back(var);
    }
    return p;
}

}  // namespace detail

// EM for a 1-D mixture of K Gaussians. Log-likelihood is non-decreasing
// across iterations; a degenerate component triggers a restart with
// perturbed means (up to max_restarts).
inline MoGParams fit_mog(const std::vector<double>& samples, int K, Rng& rng,
                         const EmOptions& opts = {}, EmTrace* trace = nullptr) {
    if (samples.empty()) throw DataError("fit_mog: no samples");
    if (K < 1) throw ConfigError("fit_mog: K must be positive");
    GaussianParams overall = fit_gaussian(samples, opts.var_floor);

    // constant or near-constant data: every component sits on the mean
    if (overall.var <= opts.var_floor || K == 1 || samples.size() == 1) {
        MoGParams p;
        p.weight.assign(static_cast<std::size_t>(K), 1.0 / K);
        p.mean.assign(static_cast<std::size_t>(K), overall.mean);
        p.var.assign(static_cast<std::size_t>(K), overall.var);
        if (trace) trace->log_likelihood.push_back(detail::mog_log_likelihood(samples, p));
        return p;
    }

    std::vector<double> sorted = samples;
    std::sort(sorted.begin(), sorted.end());
    const std::size_t n = samples.size();
    const double spread = std::sqrt(overall.var);

    for (int attempt = 0; attempt <= opts.max_restarts; ++attempt) {
        MoGParams p = detail::mog_init(sorted, K, overall.var, rng,
                                       attempt == 0 ? 0.0 : 0.25 * spread);
        std::vector<double> resp(n * static_cast<std::size_t>(K));
        double prev_ll = -std::numeric_limits<double>::infinity();
        bool degenerate = false;
        std::vector<double> ll_trace;

        for (int iter = 0; iter < opts.max_iterations; ++iter) {
            // E step (log domain)
            double ll = 0;
            for (std::size_t i = 0; i < n; ++i) {
                double mx = -std::numeric_limits<double>::infinity();
                std::vector<double> lp(static_cast<std::size_t>(K));
                for (int k = 0; k < K; ++k) {
                    const double d = samples[i] - p.mean[static_cast<std::size_t>(k)];
                    lp[static_cast<std::size_t>(k)] = std::log(std::max(p.weight[static_cast<std::size_t>(k)], 1e-300)) -
                                                      0.5 * d * d / p.var[static_cast<std::size_t>(k)] -
                                                      0.5 * std::log(2.0 * M_PI * p.var[static_cast<std::size_t>(k)]);
                    mx = std::max(mx, lp[static_cast<std::size_t>(k)]);
                }
                double z = 0;
                for (int k = 0; k < K; ++k) z += std::exp(lp[static_cast<std::size_t>(k)] - mx);
                ll += mx + std::log(z);
                for (int k = 0; k < K; ++k)
                    resp[i * static_cast<std::size_t>(K) + static_cast<std::size_t>(k)] =
                        std::exp(lp[static_cast<std::size_t>(k)] - mx) / z;
            }
            ll_trace.push_back(ll);
            if (std::isfinite(prev_ll) && ll + 1e-9 * std::max(1.0, std::fabs(prev_ll)) < prev_ll) {
                degenerate = true;  // numerical trouble; try again from a new start
                break;
            }
            const bool converged = std::isfinite(prev_ll) &&
                                   (ll - prev_ll) <= opts.rel_tolerance * std::max(1.0, std::fabs(prev_ll));
            prev_ll = ll;

            // M step
            for (int k = 0; k < K; ++k) {
                double nk = 0, mu = 0;
                for (std::size_t i = 0; i < n; ++i) {
                    const double r = resp[i * static_cast<std::size_t>(K) + static_cast<std::size_t>(k)];
                    nk += r;
                    mu += r * samples[i];
                }
                if (nk < 1e-8) {
                    degenerate = true;
                    break;
                }
                mu /= nk;
                double var = 0;
                for (std::size_t i = 0; i < n; ++i) {
                    const double r = resp[i * static_cast<std::size_t>(K) + static_cast<std::size_t>(k)];
                    var += r * (samples[i] - mu) * (samples[i] - mu);
                }
                var = std::max(var / nk, opts.var_floor);
                p.weight[static_cast<std::size_t>(k)] = nk / static_cast<double>(n);
                p.mean[static_cast<std::size_t>(k)] = mu;
                p.var[static_cast<std::size_t>(k)] = var;
            }
            if (degenerate || converged) break;
        }

        if (!degenerate) {
            if (trace) {
                trace->log_likelihood = ll_trace;
                trace->restarts = attempt;
            }
            return p;
        }
    }
    throw TrainingError("fit_mog: EM failed to produce a stable fit after restarts");
}

// ---------------------------------------------------------------------------
// Micro-model
// ---------------------------------------------------------------------------

// Conditioning available at a class position. `prev_local` is the most
// recent same-class token in the document; convert positions additionally
// carry the source number and its unit from the surrounding text.
struct MmContext {
    int prev_local = -1;
    bool has_convert = false;
    double conv_value = 0;
    std::string conv_unit;
    std::string conv_target_unit;  // empty -> the unit table's default partner
};

struct MicroModel {
    TokenClass cls = TokenClass::Plain;
    MetricKind metric = MetricKind::Value;
    PdfKind pdf = PdfKind::Unigram;

    GaussianParams gauss;
    MoGParams mog;
    CountTable table;
    BinaryParams binary;

    // class vocabulary V_MM with side data, self contained
    std::vector<int> member_word_ids;
    std::vector<std::string> member_words;
    std::vector<double> values;                     // number classes
    std::vector<std::pair<double, double>> coords;  // geo classes
    std::vector<int> decimals;
    std::vector<double> occurrence_count;           // training occurrences

    std::vector<real> fallback;  // smoothed class unigram

    int size() const { return static_cast<int>(member_word_ids.size()); }

    std::size_t parameter_count() const {
        std::size_t theta = 0;
        switch (pdf) {
            case PdfKind::Gaussian: theta = 2; break;
            case PdfKind::MixtureOfGaussians: theta = 3 * static_cast<std::size_t>(mog.components()); break;
            case PdfKind::Multinomial: theta = table.distinct(); break;
            case PdfKind::Unigram: theta = 0; break;  // shares the fallback table
            case PdfKind::Binary: theta = 1; break;
        }
        return theta + static_cast<std::size_t>(size());  // plus fallback table
    }
};

namespace detail {

inline std::vector<real> floor_and_normalize(std::vector<double> w) {
    const int n = static_cast<int>(w.size());
    double sum = 0;
    bool ok = true;
    for (double v : w) {
        if (!(v >= 0) || !std::isfinite(v)) {
            ok = false;
            break;
        }
        sum += v;
    }
    if (!ok || sum <= 0) return {};
    const double floor = 1e-8 / n;
    double sum2 = 0;
    for (double& v : w) {
        v = std::max(v / sum, floor);
        sum2 += v;
    }
    std::vector<real> out(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = static_cast<real>(w[static_cast<std::size_t>(i)] / sum2);
    return out;
}

}  // namespace detail

// Probability distribution over V_MM given the context. Falls back to the
// class unigram when no conditioning token exists or the metric cannot be
// evaluated.
inline std::vector<real> mm_distribution(const MicroModel& mm, const MmContext& ctx,
                                         const UnitTable* units = nullptr) {
    const int n = mm.size();
    if (n == 0) throw ConfigError("mm_distribution: empty class vocabulary");

    auto fallback = [&]() { return mm.fallback; };

    if (metric_uses_prev(mm.metric)) {
        if (mm.metric == MetricKind::Convert) {
            if (!ctx.has_convert || !units) return fallback();
        } else if (ctx.prev_local < 0) {
            return fallback();
        }
    }

    std::vector<double> w(static_cast<std::size_t>(n), 0.0);
    if (mm.metric == MetricKind::Convert) {
        std::string target = ctx.conv_target_unit;
        double factor = 0;
        if (target.empty()) {
            auto row = units->default_target(ctx.conv_unit);
            if (!row) return fallback();
            factor = row->factor;
        } else {
            auto f = units->factor(ctx.conv_unit, target);
            if (!f) return fallback();
            factor = *f;
        }
        int passes = 0;
        std::vector<char> ok(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) {
            ok[static_cast<std::size_t>(i)] =
                convert_check(mm.values[static_cast<std::size_t>(i)], mm.decimals[static_cast<std::size_t>(i)], ctx.conv_value, factor) ? 1 : 0;
            passes += ok[static_cast<std::size_t>(i)];
        }
        const double p = mm.binary.p_correct;
        for (int i = 0; i < n; ++i) {
            if (ok[static_cast<std::size_t>(i)])
                w[static_cast<std::size_t>(i)] = p / std::max(passes, 1);
            else
                w[static_cast<std::size_t>(i)] = (1.0 - p) / std::max(n - passes, 1);
        }
    } else {
        for (int i = 0; i < n; ++i) {
            double m = 0;
            switch (mm.metric) {
                case MetricKind::Difference:
                    m = difference_metric(mm.values[static_cast<std::size_t>(i)], mm.values[static_cast<std::size_t>(ctx.prev_local)]);
                    break;
                case MetricKind::Value:
                    m = value_metric(mm.values[static_cast<std::size_t>(i)]);
                    break;
                case MetricKind::Frequency:
                    m = frequency_metric(mm.occurrence_count[static_cast<std::size_t>(i)]);
                    break;
                case MetricKind::Euclidean:
                    m = euclidean_metric(mm.coords[static_cast<std::size_t>(i)].first, mm.coords[static_cast<std::size_t>(i)].second,
                                         mm.coords[static_cast<std::size_t>(ctx.prev_local)].first,
                                         mm.coords[static_cast<std::size_t>(ctx.prev_local)].second);
                    break;
                default: break;
            }
            switch (mm.pdf) {
                case PdfKind::Gaussian: w[static_cast<std::size_t>(i)] = gaussian_density(m, mm.gauss); break;
                case PdfKind::MixtureOfGaussians: w[static_cast<std::size_t>(i)] = mog_density(m, mm.mog); break;
                case PdfKind::Multinomial: w[static_cast<std::size_t>(i)] = mm.table.weight(m); break;
                case PdfKind::Unigram: w[static_cast<std::size_t>(i)] = mm.occurrence_count[static_cast<std::size_t>(i)] + mm.table.alpha; break;
                case PdfKind::Binary: throw ConfigError("binary PDF requires the convert metric");
            }
        }
    }
    auto out = detail::floor_and_normalize(std::move(w));
    if (out.empty()) return fallback();  // degenerate densities
    return out;
}

// ---------------------------------------------------------------------------
// Class streams and fitting
// ---------------------------------------------------------------------------

// The ordered occurrences of one class in a tagged corpus, with the
// conditioning context available at each one.
struct ClassStream {
    std::vector<int> local;        // class-local target ids
    std::vector<MmContext> context;
};

inline ClassStream extract_class_stream(const TaggedCorpus& tagged, const Vocabulary& vocab,
                                        TokenClass cls, const UnitTable* units = nullptr) {
    const auto& cv = vocab.class_vocab[static_cast<int>(cls)];
    ClassStream out;
    for (std::size_t i = 0; i < tagged.size(); ++i) {
        if (tagged.classes[i] != cls) continue;
        MmContext ctx;
        std::int64_t prev = tagged.prev_same_class[i];
        if (prev >= 0) ctx.prev_local = cv.local(tagged.tokens[static_cast<std::size_t>(prev)]);
        if (cls == TokenClass::Convert && units && i >= 3) {
            const std::string& open = vocab.id_to_word[static_cast<std::size_t>(tagged.tokens[i - 1])];
            const std::string& unit = vocab.id_to_word[static_cast<std::size_t>(tagged.tokens[i - 2])];
            const std::string& num = vocab.id_to_word[static_cast<std::size_t>(tagged.tokens[i - 3])];
            auto value = parse_number(num);
            if (open == "(" && units->has_unit(unit) && value) {
                ctx.has_convert = true;
                ctx.conv_value = *value;
                ctx.conv_unit = unit;
            }
        }
        out.local.push_back(cv.local(tagged.tokens[i]));
        out.context.push_back(std::move(ctx));
    }
    return out;
}

namespace detail {

inline void copy_side_data(MicroModel& mm, const Vocabulary& vocab, TokenClass cls) {
    const auto& cv = vocab.class_vocab[static_cast<int>(cls)];
    mm.member_word_ids = cv.members;
    for (int id : cv.members) mm.member_words.push_back(vocab.id_to_word[static_cast<std::size_t>(id)]);
    mm.values = cv.values;
    mm.coords = cv.coords;
    mm.decimals = cv.decimals;
    mm.occurrence_count.assign(cv.counts.begin(), cv.counts.end());
}

inline void build_fallback(MicroModel& mm, double alpha) {
    std::vector<double> w(mm.occurrence_count.begin(), mm.occurrence_count.end());
    for (double& v : w) v += alpha;
    mm.fallback = floor_and_normalize(std::move(w));
}

}  // namespace detail

// Metric samples over the training stream (skipping occurrences whose
// conditioning is unavailable for binary-arity metrics).
inline std::vector<double> metric_samples(const MicroModel& mm, const ClassStream& stream) {
    std::vector<double> samples;
    for (std::size_t i = 0; i < stream.local.size(); ++i) {
        const int cur = stream.local[i];
        const int prev = stream.context[i].prev_local;
        switch (mm.metric) {
            case MetricKind::Difference:
                if (prev >= 0)
                    samples.push_back(difference_metric(mm.values[static_cast<std::size_t>(cur)], mm.values[static_cast<std::size_t>(prev)]));
                break;
            case MetricKind::Value:
                samples.push_back(value_metric(mm.values[static_cast<std::size_t>(cur)]));
                break;
            case MetricKind::Frequency:
                samples.push_back(frequency_metric(mm.occurrence_count[static_cast<std::size_t>(cur)]));
                break;
            case MetricKind::Euclidean:
                if (prev >= 0)
                    samples.push_back(euclidean_metric(mm.coords[static_cast<std::size_t>(cur)].first, mm.coords[static_cast<std::size_t>(cur)].second,
                                                       mm.coords[static_cast<std::size_t>(prev)].first,
                                                       mm.coords[static_cast<std::size_t>(prev)].second));
                break;
            case MetricKind::Convert: break;  // handled by convert_outcomes
        }
    }
    return samples;
}

inline std::vector<char> convert_outcomes(const MicroModel& mm, const ClassStream& stream,
                                          const UnitTable& units) {
    std::vector<char> out;
    for (std::size_t i = 0; i < stream.local.size(); ++i) {
        const auto& ctx = stream.context[i];
        if (!ctx.has_convert) continue;
        auto row = units.default_target(ctx.conv_unit);
        if (!row) continue;
        const int cur = stream.local[i];
        out.push_back(convert_check(mm.values[static_cast<std::size_t>(cur)], mm.decimals[static_cast<std::size_t>(cur)],
                                    ctx.conv_value, row->factor)
                          ? 1
                          : 0);
    }
    return out;
}

struct FitConfig {
    double alpha = 0.1;
    double var_floor = kVarianceFloor;
    int mog_components = 2;
    EmOptions em;
};

inline MicroModel fit_micro_model(TokenClass cls, MetricKind metric, PdfKind pdf,
                                  const Vocabulary& vocab, const ClassStream& train,
                                  Rng& rng, const FitConfig& cfg = {},
                                  const UnitTable* units = nullptr) {
    if (train.local.empty()) throw DataError("fit_micro_model: empty training stream for class");
    if ((pdf == PdfKind::Binary) != (metric == MetricKind::Convert))
        throw ConfigError("binary PDF pairs only with the convert metric");

    MicroModel mm;
    mm.cls = cls;
    mm.metric = metric;
    mm.pdf = pdf;
    mm.table.alpha = cfg.alpha;
    detail::copy_side_data(mm, vocab, cls);
    detail::build_fallback(mm, cfg.alpha);

    if (pdf == PdfKind::Binary) {
        if (!units) throw ConfigError("convert metric requires a unit table");
        auto outcomes = convert_outcomes(mm, train, *units);
        if (outcomes.empty()) throw DataError("fit_micro_model: no usable convert contexts");
        mm.binary = fit_binary(outcomes, cfg.alpha);
        return mm;
    }

    auto samples = metric_samples(mm, train);
    if (samples.empty()) throw DataError("fit_micro_model: no metric samples for class");
    switch (pdf) {
        case PdfKind::Gaussian: mm.gauss = fit_gaussian(samples, cfg.var_floor); break;
        case PdfKind::MixtureOfGaussians: {
            EmOptions em = cfg.em;
            em.var_floor = cfg.var_floor;
            mm.mog = fit_mog(samples, cfg.mog_components, rng, em);
            break;
        }
        case PdfKind::Multinomial: mm.table = fit_table(samples, cfg.alpha); break;
        case PdfKind::Unigram: break;  // occurrence counts already attached
        case PdfKind::Binary: break;
    }
    return mm;
}

// Class-conditional perplexity of the micro-model alone over a stream.
inline double mm_perplexity(const MicroModel& mm, const ClassStream& stream,
                            const UnitTable* units = nullptr) {
    if (stream.local.empty()) throw DataError("mm_perplexity: empty stream");
    double nll = 0;
    for (std::size_t i = 0; i < stream.local.size(); ++i) {
        auto dist = mm_distribution(mm, stream.context[i], units);
        nll -= std::log(static_cast<double>(dist[static_cast<std::size_t>(stream.local[i])]));
    }
    return std::exp(nll / static_cast<double>(stream.local.size()));
}

// ---------------------------------------------------------------------------
// Grid search
// ---------------------------------------------------------------------------

struct GridCandidate {
    MetricKind metric;
    PdfKind pdf;
    int components = 0;  // MoG only; 0 expands to {1, 2, 3, 5}
};

struct GridEntry {
    GridCandidate candidate;
    double valid_perplexity = 0;
    std::size_t parameters = 0;
    std::string note;
};

struct GridSearchResult {
    MicroModel model;
    GridEntry chosen;
    std::vector<GridEntry> log;
};

inline std::vector<GridCandidate> default_candidates(TokenClass cls) {
    std::vector<GridCandidate> out;
    if (is_geo_class(cls)) {
        for (PdfKind p : {PdfKind::Gaussian, PdfKind::MixtureOfGaussians, PdfKind::Multinomial})
            out.push_back({MetricKind::Euclidean, p, 0});
        out.push_back({MetricKind::Frequency, PdfKind::Unigram, 0});
        return out;
    }
    if (cls == TokenClass::Convert) out.push_back({MetricKind::Convert, PdfKind::Binary, 0});
    for (MetricKind m : {MetricKind::Difference, MetricKind::Value}) {
        for (PdfKind p : {PdfKind::Gaussian, PdfKind::MixtureOfGaussians, PdfKind::Multinomial})
            out.push_back({m, p, 0});
    }
    out.push_back({MetricKind::Frequency, PdfKind::Multinomial, 0});
    out.push_back({MetricKind::Frequency, PdfKind::Unigram, 0});
    return out;
}

// Fits every candidate on the training stream and keeps the pair with the
// lowest class-conditional validation perplexity; ties go to the model with
// fewer parameters.
inline GridSearchResult grid_search(TokenClass cls, const std::vector<GridCandidate>& candidates,
                                    const Vocabulary& vocab, const ClassStream& train,
                                    const ClassStream& valid, Rng& rng,
                                    const FitConfig& cfg = {}, const UnitTable* units = nullptr) {
    if (valid.local.empty()) throw DataError("grid_search: empty validation stream");
    std::vector<GridCandidate> expanded;
    for (const auto& c : candidates) {
        if (c.pdf == PdfKind::MixtureOfGaussians && c.components == 0) {
            for (int k : {1, 2, 3, 5}) expanded.push_back({c.metric, c.pdf, k});
        } else {
            expanded.push_back(c);
        }
    }

    GridSearchResult result;
    bool have_best = false;
    for (const auto& cand : expanded) {
        GridEntry entry;
        entry.candidate = cand;
        try {
            FitConfig fc = cfg;
            if (cand.components > 0) fc.mog_components = cand.components;
            MicroModel mm = fit_micro_model(cls, cand.metric, cand.pdf, vocab, train, rng, fc, units);
            entry.valid_perplexity = mm_perplexity(mm, valid, units);
            entry.parameters = mm.parameter_count();
            const bool better =
                !have_best || entry.valid_perplexity < result.chosen.valid_perplexity ||
                (entry.valid_perplexity == result.chosen.valid_perplexity &&
                 entry.parameters < result.chosen.parameters);
            if (better) {
                result.model = std::move(mm);
                result.chosen = entry;
                have_best = true;
            }
        } catch (const std::exception& e) {
            entry.valid_perplexity = std::numeric_limits<double>::infinity();
            entry.note = e.what();
        }
        result.log.push_back(entry);
    }
    if (!have_best) throw DataError("grid_search: no viable candidate for class");
    return result;
}

// ---------------------------------------------------------------------------
// Serialization (human-inspectable text)
// ---------------------------------------------------------------------------

inline void save_micro_model(const MicroModel& mm, const std::string& path,
                             const std::string& meta = "") {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write micro-model: " + path);
    out << std::setprecision(17);
    if (!meta.empty()) out << "# " << meta << "\n";
    out << "class " << class_name(mm.cls) << "\n";
    out << "metric " << metric_name(mm.metric) << "\n";
    out << "pdf " << pdf_name(mm.pdf) << "\n";
    out << "alpha " << mm.table.alpha << "\n";
    switch (mm.pdf) {
        case PdfKind::Gaussian:
            out << "gaussian " << mm.gauss.mean << " " << mm.gauss.var << "\n";
            break;
        case PdfKind::MixtureOfGaussians:
            out << "components " << mm.mog.components() << "\n";
            for (int k = 0; k < mm.mog.components(); ++k)
                out << "component " << mm.mog.weight[static_cast<std::size_t>(k)] << " "
                    << mm.mog.mean[static_cast<std::size_t>(k)] << " " << mm.mog.var[static_cast<std::size_t>(k)] << "\n";
            break;
        case PdfKind::Multinomial:
            out << "bins " << mm.table.distinct() << "\n";
            for (const auto& [value, count] : mm.table.count) out << "bin " << value << " " << count << "\n";
            break;
        case PdfKind::Binary:
            out << "p_correct " << mm.binary.p_correct << "\n";
            break;
        case PdfKind::Unigram: break;
    }
    out << "members " << mm.size() << "\n";
    for (int i = 0; i < mm.size(); ++i) {
        out << mm.member_words[static_cast<std::size_t>(i)] << "\t";
        if (is_geo_class(mm.cls))
            out << mm.coords[static_cast<std::size_t>(i)].first << "," << mm.coords[static_cast<std::size_t>(i)].second;
        else
            out << mm.values[static_cast<std::size_t>(i)];
        out << "\t" << mm.occurrence_count[static_cast<std::size_t>(i)] << "\t" << mm.fallback[static_cast<std::size_t>(i)] << "\n";
    }
}

inline MicroModel load_micro_model(const std::string& path, const Vocabulary& vocab) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open micro-model: " + path);
    MicroModel mm;
    std::string line;
    int members = -1;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ss(line);
        std::string key;
        ss >> key;
        if (key == "class") {
            std::string v;
            ss >> v;
            auto c = class_from_name(v);
            if (!c) throw DataError("unknown class in micro-model: " + v);
            mm.cls = *c;
        } else if (key == "metric") {
            std::string v;
            ss >> v;
            auto m = metric_from_name(v);
            if (!m) throw DataError("unknown metric: " + v);
            mm.metric = *m;
        } else if (key == "pdf") {
            std::string v;
            ss >> v;
            auto p = pdf_from_name(v);
            if (!p) throw DataError("unknown pdf: " + v);
            mm.pdf = *p;
        } else if (key == "alpha") {
            ss >> mm.table.alpha;
        } else if (key == "gaussian") {
            ss >> mm.gauss.mean >> mm.gauss.var;
        } else if (key == "component") {
            double w, m, v;
            ss >> w >> m >> v;
            mm.mog.weight.push_back(w);
            mm.mog.mean.push_back(m);
            mm.mog.var.push_back(v);
        } else if (key == "bin") {
            double value, count;
            ss >> value >> count;
            mm.table.count[value] = count;
            mm.table.total += count;
        } else if (key == "p_correct") {
            ss >> mm.binary.p_correct;
        } else if (key == "members") {
            ss >> members;
            break;
        }
    }
    if (members < 0) throw DataError("micro-model missing members section: " + path);
    for (int i = 0; i < members; ++i) {
        if (!std::getline(in, line)) throw DataError("truncated micro-model: " + path);
        auto cols = split_ws(line);
        if (cols.size() != 4) throw DataError("malformed micro-model member row: " + line);
        auto it = vocab.word_to_id.find(cols[0]);
        if (it == vocab.word_to_id.end())
            throw DataError("micro-model member not in vocabulary: " + cols[0]);
        mm.member_word_ids.push_back(it->second);
        mm.member_words.push_back(cols[0]);
        if (is_geo_class(mm.cls)) {
            auto comma = cols[1].find(',');
            mm.coords.emplace_back(std::stod(cols[1].substr(0, comma)), std::stod(cols[1].substr(comma + 1)));
        } else {
            mm.values.push_back(std::stod(cols[1]));
            mm.decimals.push_back(surface_decimals(cols[0]));
        }
        mm.occurrence_count.push_back(std::stod(cols[2]));
        mm.fallback.push_back(static_cast<real>(std::stod(cols[3])));
    }
    return mm;
}

}  // namespace nslm
