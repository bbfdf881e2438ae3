// LSTM network with multiple softmax heads: forward, exact truncated BPTT,
// SGD with global-norm clipping, sampled softmax, and checkpoint IO.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "nslm/common.hpp"
#include "nslm/matrix.hpp"

namespace nslm {

struct HeadSpec {
    std::string name;
    int vocab = 0;
};

struct NetworkConfig {
    int input_vocab = 0;
    int dim = 0;          // hidden size, also the trainable embedding width
    int ground_dims = 0;  // frozen trailing embedding columns
    int layers = 1;
    std::vector<HeadSpec> heads;
    real init_range = real(0.05);

    int input_dim() const { return dim + ground_dims; }

    int head_index(const std::string& name) const {
        for (std::size_t i = 0; i < heads.size(); ++i)
            if (heads[i].name == name) return static_cast<int>(i);
        return -1;
    }
};

struct LstmParams {
    NetworkConfig cfg;

    Mat embedding;  // input_vocab x input_dim
    struct Layer {
        Mat wx;                  // layer_input_dim x 4H
        Mat wh;                  // H x 4H
        std::vector<real> bias;  // 4H
    };
    std::vector<Layer> layers;
    struct Head {
        Mat u;                   // H x V
        std::vector<real> bias;  // V
    };
    std::vector<Head> heads;

    static LstmParams build(const NetworkConfig& cfg) {
        LstmParams p;
        p.cfg = cfg;
        p.embedding.resize(cfg.input_vocab, cfg.input_dim());
        p.layers.resize(static_cast<std::size_t>(cfg.layers));
        for (int l = 0; l < cfg.layers; ++l) {
            int in = l == 0 ? cfg.input_dim() : cfg.dim;
            p.layers[static_cast<std::size_t>(l)].wx.resize(in, 4 * cfg.dim);
            p.layers[static_cast<std::size_t>(l)].wh.resize(cfg.dim, 4 * cfg.dim);
            p.layers[static_cast<std::size_t>(l)].bias.assign(static_cast<std::size_t>(4 * cfg.dim), real(0));
        }
        for (const auto& h : cfg.heads) {
            Head head;
            head.u.resize(cfg.dim, h.vocab);
            head.bias.assign(static_cast<std::size_t>(h.vocab), real(0));
            p.heads.push_back(std::move(head));
        }
        return p;
    }

    void init_uniform(Rng& rng) {
        auto fill = [&](real* data, std::size_t n) {
            for (std::size_t i = 0; i < n; ++i)
                data[i] = static_cast<real>(rng.uniform(-cfg.init_range, cfg.init_range));
        };
        fill(embedding.data.data(), embedding.size());
        for (auto& l : layers) {
            fill(l.wx.data.data(), l.wx.size());
            fill(l.wh.data.data(), l.wh.size());
            fill(l.bias.data(), l.bias.size());
        }
        for (auto& h : heads) {
            fill(h.u.data.data(), h.u.size());
            fill(h.bias.data(), h.bias.size());
        }
    }

    struct TensorRef {
        std::string name;
        real* data;
        std::size_t size;
    };

    std::vector<TensorRef> tensors() {
        std::vector<TensorRef> out;
        out.push_back({"embedding", embedding.data.data(), embedding.size()});
        for (std::size_t l = 0; l < layers.size(); ++l) {
            std::string p = "layer" + std::to_string(l) + ".";
            out.push_back({p + "wx", layers[l].wx.data.data(), layers[l].wx.size()});
            out.push_back({p + "wh", layers[l].wh.data.data(), layers[l].wh.size()});
            out.push_back({p + "bias", layers[l].bias.data(), layers[l].bias.size()});
        }
        for (std::size_t h = 0; h < heads.size(); ++h) {
            std::string p = "head." + cfg.heads[h].name + ".";
            out.push_back({p + "u", heads[h].u.data.data(), heads[h].u.size()});
            out.push_back({p + "bias", heads[h].bias.data(), heads[h].bias.size()});
        }
        return out;
    }
};

// One tensor per parameter tensor, same shapes.
using GradientSet = LstmParams;

inline GradientSet zero_like(const LstmParams& p) { return LstmParams::build(p.cfg); }

// ---------------------------------------------------------------------------
// Softmax and per-row losses
// ---------------------------------------------------------------------------

inline void softmax_inplace(real* x, int n) {
    real mx = x[0];
    for (int i = 1; i < n; ++i) mx = std::max(mx, x[i]);
    real sum = 0;
    for (int i = 0; i < n; ++i) {
        x[i] = std::exp(x[i] - mx);
        sum += x[i];
    }
    const real inv = real(1) / sum;
    for (int i = 0; i < n; ++i) x[i] *= inv;
}

inline std::vector<real> softmax(const std::vector<real>& logits) {
    if (logits.empty()) throw ConfigError("softmax of empty logits");
    std::vector<real> out = logits;
    softmax_inplace(out.data(), static_cast<int>(out.size()));
    return out;
}

inline real log_sum_exp(const real* x, int n) {
    real mx = x[0];
    for (int i = 1; i < n; ++i) mx = std::max(mx, x[i]);
    real sum = 0;
    for (int i = 0; i < n; ++i) sum += std::exp(x[i] - mx);
    return mx + std::log(sum);
}

// ---------------------------------------------------------------------------
// Single-step path (prediction contexts)
// ---------------------------------------------------------------------------

struct RnnState {
    std::vector<std::vector<real>> h, c;  // per layer, length dim

    static RnnState zeros(const NetworkConfig& cfg) {
        RnnState s;
        s.h.assign(static_cast<std::size_t>(cfg.layers), std::vector<real>(static_cast<std::size_t>(cfg.dim), real(0)));
        s.c = s.h;
        return s;
    }
};

namespace detail {

inline real sigmoid(real x) { return real(1) / (real(1) + std::exp(-x)); }

// Applies the gate equations to one lane. z holds pre-activations [i|f|g|o];
// on return z holds post-activations, and c/h are updated in place.
inline void apply_gates(real* z, real* c, real* h, int H) {
    real* zi = z;
    real* zf = z + H;
    real* zg = z + 2 * H;
    real* zo = z + 3 * H;
    for (int k = 0; k < H; ++k) {
        zi[k] = sigmoid(zi[k]);
        zf[k] = sigmoid(zf[k]);
        zg[k] = std::tanh(zg[k]);
        zo[k] = sigmoid(zo[k]);
        c[k] = zf[k] * c[k] + zi[k] * zg[k];
        h[k] = zo[k] * std::tanh(c[k]);
    }
}

}  // namespace detail

// Advances the state by one token without touching any head.
inline void lstm_advance(const LstmParams& params, int input_id, RnnState& state) {
    const auto& cfg = params.cfg;
    if (input_id < 0 || input_id >= cfg.input_vocab)
        throw ConfigError("lstm_advance: input id out of range");
    const int H = cfg.dim;
    std::vector<real> x(params.embedding.row(input_id),
                        params.embedding.row(input_id) + cfg.input_dim());
    std::vector<real> z(static_cast<std::size_t>(4 * H));
    std::vector<real> hz(static_cast<std::size_t>(4 * H));
    for (int l = 0; l < cfg.layers; ++l) {
        const auto& layer = params.layers[static_cast<std::size_t>(l)];
        affine_row(x.data(), layer.wx, layer.bias.data(), z.data());
        std::fill(hz.begin(), hz.end(), real(0));
        affine_row(state.h[static_cast<std::size_t>(l)].data(), layer.wh, nullptr, hz.data());
        for (int k = 0; k < 4 * H; ++k) z[static_cast<std::size_t>(k)] += hz[static_cast<std::size_t>(k)];
        detail::apply_gates(z.data(), state.c[static_cast<std::size_t>(l)].data(),
                            state.h[static_cast<std::size_t>(l)].data(), H);
        x = state.h[static_cast<std::size_t>(l)];
    }
}

// Advances the state by one token and returns the logits of the requested
// heads (all heads when `wanted` is empty).
inline std::vector<std::vector<real>> lstm_step(const LstmParams& params, int input_id,
                                                RnnState& state,
                                                const std::vector<int>& wanted = {}) {
    const auto& cfg = params.cfg;
    if (input_id < 0 || input_id >= cfg.input_vocab)
        throw ConfigError("lstm_step: input id out of range");
    if (static_cast<int>(state.h.size()) != cfg.layers ||
        (cfg.layers > 0 && static_cast<int>(state.h[0].size()) != cfg.dim))
        throw ConfigError("lstm_step: state does not match network dimensions");

    const int H = cfg.dim;
    std::vector<real> x(params.embedding.row(input_id),
                        params.embedding.row(input_id) + cfg.input_dim());
    std::vector<real> z(static_cast<std::size_t>(4 * H));
    for (int l = 0; l < cfg.layers; ++l) {
        const auto& layer = params.layers[static_cast<std::size_t>(l)];
        affine_row(x.data(), layer.wx, layer.bias.data(), z.data());
        std::vector<real> hz(static_cast<std::size_t>(4 * H), real(0));
        affine_row(state.h[static_cast<std::size_t>(l)].data(), layer.wh, nullptr, hz.data());
        for (int k = 0; k < 4 * H; ++k) z[static_cast<std::size_t>(k)] += hz[static_cast<std::size_t>(k)];
        detail::apply_gates(z.data(), state.c[static_cast<std::size_t>(l)].data(),
                            state.h[static_cast<std::size_t>(l)].data(), H);
        x = state.h[static_cast<std::size_t>(l)];
    }

    std::vector<int> which = wanted;
    if (which.empty()) {
        which.resize(params.heads.size());
        std::iota(which.begin(), which.end(), 0);
    }
    std::vector<std::vector<real>> logits;
    for (int hi : which) {
        const auto& head = params.heads[static_cast<std::size_t>(hi)];
        std::vector<real> lg(static_cast<std::size_t>(head.u.cols));
        affine_row(x.data(), head.u, head.bias.data(), lg.data());
        logits.push_back(std::move(lg));
    }
    return logits;
}

// ---------------------------------------------------------------------------
// Batched window: forward, loss, and exact BPTT
// ---------------------------------------------------------------------------

struct BatchState {
    std::vector<Mat> h, c;  // per layer: B x H

    static BatchState zeros(const NetworkConfig& cfg, int B) {
        BatchState s;
        s.h.assign(static_cast<std::size_t>(cfg.layers), Mat(B, cfg.dim));
        s.c = s.h;
        return s;
    }
};

// Time-major batch window. Index (t, b) -> t * B + b. A target of -1 means
// the head is not scored at that slot.
struct WindowBatch {
    int T = 0, B = 0;
    std::vector<int> inputs;
    std::vector<std::uint8_t> reset_before;       // zero h,c of lane b before step t
    std::vector<std::vector<int>> head_targets;   // per head, T*B

    int input_at(int t, int b) const { return inputs[static_cast<std::size_t>(t) * B + b]; }
};

struct TrainOptions {
    real dropout = 0;
    Rng* rng = nullptr;
    std::vector<int> sample_size;  // per head, 0 = full softmax
};

struct WindowStats {
    std::vector<real> head_loss;        // mean NLL per head over its targets
    std::vector<long long> head_count;  // targets scored per head
    real total_loss = 0;                // sum of per-head means
};

namespace detail {

struct StepCache {
    struct LayerCache {
        Mat x;        // B x in, post-dropout layer input
        Mat x_mask;   // dropout mask (empty if no dropout)
        Mat hprev, cprev;
        Mat gates;    // B x 4H, post-activation [i|f|g|o]
        Mat c, tanh_c, h;
    };
    std::vector<LayerCache> layers;
    Mat h_drop;       // B x H, top hidden after dropout
    Mat top_mask;
};

inline void fill_dropout_mask(Mat& mask, real dropout, Rng& rng) {
    const real keep = real(1) - dropout;
    const real scale = real(1) / keep;
    for (auto& v : mask.data) v = rng.uniform(0.0, 1.0) < keep ? scale : real(0);
}

}  // namespace detail

// Runs a window forward, scores every head over its targets, and (when
// `grads` is non-null) backpropagates through time, accumulating into
// `grads`. `state` is carried across windows; lanes reset where flagged.
inline WindowStats run_window(const LstmParams& params, const WindowBatch& window,
                              BatchState& state, GradientSet* grads,
                              const TrainOptions& opts = {}) {
    const auto& cfg = params.cfg;
    const int T = window.T, B = window.B, H = cfg.dim;
    if (T <= 0 || B <= 0) throw ConfigError("run_window: empty window");
    if (window.head_targets.size() != params.heads.size())
        throw ConfigError("run_window: target streams do not match heads");
    const bool use_dropout = opts.dropout > 0 && grads != nullptr;
    if (use_dropout && !opts.rng) throw ConfigError("run_window: dropout requires an rng");

    std::vector<detail::StepCache> cache(static_cast<std::size_t>(T));

    // ---- forward through time ----
    Mat z(B, 4 * H);
    for (int t = 0; t < T; ++t) {
        auto& sc = cache[static_cast<std::size_t>(t)];
        sc.layers.resize(static_cast<std::size_t>(cfg.layers));

        for (int b = 0; b < B; ++b) {
            if (!window.reset_before.empty() && window.reset_before[static_cast<std::size_t>(t) * B + b]) {
                for (int l = 0; l < cfg.layers; ++l) {
                    std::fill(state.h[static_cast<std::size_t>(l)].row(b), state.h[static_cast<std::size_t>(l)].row(b) + H, real(0));
                    std::fill(state.c[static_cast<std::size_t>(l)].row(b), state.c[static_cast<std::size_t>(l)].row(b) + H, real(0));
                }
            }
        }

        Mat layer_in(B, cfg.input_dim());
        for (int b = 0; b < B; ++b) {
            int id = window.input_at(t, b);
            if (id < 0 || id >= cfg.input_vocab) throw ConfigError("run_window: input id out of range");
            std::memcpy(layer_in.row(b), params.embedding.row(id),
                        sizeof(real) * static_cast<std::size_t>(cfg.input_dim()));
        }

        for (int l = 0; l < cfg.layers; ++l) {
            auto& lc = sc.layers[static_cast<std::size_t>(l)];
            const auto& layer = params.layers[static_cast<std::size_t>(l)];
            if (use_dropout) {
                lc.x_mask.resize(layer_in.rows, layer_in.cols);
                detail::fill_dropout_mask(lc.x_mask, opts.dropout, *opts.rng);
                for (std::size_t i = 0; i < layer_in.size(); ++i) layer_in.data[i] *= lc.x_mask.data[i];
            }
            lc.x = layer_in;
            lc.hprev = state.h[static_cast<std::size_t>(l)];
            lc.cprev = state.c[static_cast<std::size_t>(l)];

            for (int b = 0; b < B; ++b)
                std::memcpy(z.row(b), layer.bias.data(), sizeof(real) * static_cast<std::size_t>(4 * H));
            gemm_add(z, lc.x, layer.wx);
            gemm_add(z, lc.hprev, layer.wh);

            lc.gates = z;
            lc.c.resize(B, H);
            lc.tanh_c.resize(B, H);
            lc.h.resize(B, H);
            for (int b = 0; b < B; ++b) {
                real* g = lc.gates.row(b);
                const real* cp = lc.cprev.row(b);
                real* cc = lc.c.row(b);
                real* tc = lc.tanh_c.row(b);
                real* hh = lc.h.row(b);
                for (int k = 0; k < H; ++k) {
                    real gi = detail::sigmoid(g[k]);
                    real gf = detail::sigmoid(g[H + k]);
                    real gg = std::tanh(g[2 * H + k]);
                    real go = detail::sigmoid(g[3 * H + k]);
                    g[k] = gi;
                    g[H + k] = gf;
                    g[2 * H + k] = gg;
                    g[3 * H + k] = go;
                    cc[k] = gf * cp[k] + gi * gg;
                    tc[k] = std::tanh(cc[k]);
                    hh[k] = go * tc[k];
                }
            }
            state.h[static_cast<std::size_t>(l)] = lc.h;
            state.c[static_cast<std::size_t>(l)] = lc.c;
            layer_in = lc.h;
        }

        if (use_dropout) {
            sc.top_mask.resize(B, H);
            detail::fill_dropout_mask(sc.top_mask, opts.dropout, *opts.rng);
            sc.h_drop.resize(B, H);
            for (std::size_t i = 0; i < sc.h_drop.size(); ++i)
                sc.h_drop.data[i] = cache[static_cast<std::size_t>(t)].layers.back().h.data[i] * sc.top_mask.data[i];
        } else {
            sc.h_drop = sc.layers.back().h;
        }
    }

    // ---- heads ----
    WindowStats stats;
    stats.head_loss.assign(params.heads.size(), real(0));
    stats.head_count.assign(params.heads.size(), 0);

    std::vector<Mat> d_hdrop;  // per t, B x H
    if (grads) d_hdrop.assign(static_cast<std::size_t>(T), Mat(B, H));

    for (std::size_t hi = 0; hi < params.heads.size(); ++hi) {
        const auto& targets = window.head_targets[hi];
        std::vector<std::pair<int, int>> slots;  // (t, b) with a target
        for (int t = 0; t < T; ++t)
            for (int b = 0; b < B; ++b)
                if (targets[static_cast<std::size_t>(t) * B + b] >= 0) slots.emplace_back(t, b);
        if (slots.empty()) continue;
        const int n = static_cast<int>(slots.size());
        const auto& head = params.heads[hi];
        const int V = head.u.cols;

        Mat hsub(n, H);
        for (int r = 0; r < n; ++r)
            std::memcpy(hsub.row(r), cache[static_cast<std::size_t>(slots[static_cast<std::size_t>(r)].first)].h_drop.row(slots[static_cast<std::size_t>(r)].second),
                        sizeof(real) * static_cast<std::size_t>(H));

        // candidate set: full vocabulary, or targets plus uniform negatives
        // sampling is a training-only approximation; evaluation keeps the full softmax
        int sample = (grads && hi < opts.sample_size.size()) ? opts.sample_size[hi] : 0;
        std::vector<int> cand;
        std::vector<int> target_pos(static_cast<std::size_t>(n));
        bool sampled = sample > 0 && sample < V;
        if (sampled) {
            if (!opts.rng) throw ConfigError("sampled softmax requires an rng");
            std::unordered_set<int> in_cand;
            for (int r = 0; r < n; ++r) {
                int tgt = targets[static_cast<std::size_t>(slots[static_cast<std::size_t>(r)].first) * B + slots[static_cast<std::size_t>(r)].second];
                if (tgt >= V) throw ConfigError("target id out of head range");
                if (in_cand.insert(tgt).second) cand.push_back(tgt);
            }
            std::sort(cand.begin(), cand.end());
            const int negatives = std::min(sample, V - static_cast<int>(cand.size()));
            if (negatives >= V - static_cast<int>(cand.size())) {
                for (int v = 0; v < V; ++v)
                    if (!in_cand.count(v)) cand.push_back(v);
            } else {
                in_cand.clear();
                for (int c : cand) in_cand.insert(c);
                int added = 0;
                while (added < negatives) {
                    int v = static_cast<int>(opts.rng->index(static_cast<std::size_t>(V)));
                    if (in_cand.insert(v).second) {
                        cand.push_back(v);
                        ++added;
                    }
                }
            }
        } else {
            cand.resize(static_cast<std::size_t>(V));
            std::iota(cand.begin(), cand.end(), 0);
        }
        const int S = static_cast<int>(cand.size());
        std::unordered_map<int, int> cand_index;
        if (sampled)
            for (int j = 0; j < S; ++j) cand_index[cand[static_cast<std::size_t>(j)]] = j;
        for (int r = 0; r < n; ++r) {
            int tgt = targets[static_cast<std::size_t>(slots[static_cast<std::size_t>(r)].first) * B + slots[static_cast<std::size_t>(r)].second];
            if (tgt >= V) throw ConfigError("target id out of head range");
            target_pos[static_cast<std::size_t>(r)] = sampled ? cand_index.at(tgt) : tgt;
        }

        // logits over candidates
        Mat usub;  // H x S
        const Mat* u = &head.u;
        if (sampled) {
            usub.resize(H, S);
            for (int k = 0; k < H; ++k) {
                const real* src = head.u.row(k);
                real* dst = usub.row(k);
                for (int j = 0; j < S; ++j) dst[j] = src[cand[static_cast<std::size_t>(j)]];
            }
            u = &usub;
        }
        Mat logits(n, S);
        for (int r = 0; r < n; ++r) {
            real* row = logits.row(r);
            for (int j = 0; j < S; ++j) row[j] = head.bias[static_cast<std::size_t>(cand[static_cast<std::size_t>(j)])];
        }
        gemm_add(logits, hsub, *u);

        double nll_sum = 0;
        for (int r = 0; r < n; ++r) {
            real* row = logits.row(r);
            const real lse = log_sum_exp(row, S);
            nll_sum += static_cast<double>(lse - row[target_pos[static_cast<std::size_t>(r)]]);
            if (grads) {
                for (int j = 0; j < S; ++j) row[j] = std::exp(row[j] - lse);
                row[target_pos[static_cast<std::size_t>(r)]] -= real(1);
            }
        }
        stats.head_loss[hi] = static_cast<real>(nll_sum / n);
        stats.head_count[hi] = n;

        if (grads) {
            const real scale = real(1) / static_cast<real>(n);
            for (std::size_t i = 0; i < logits.size(); ++i) logits.data[i] *= scale;

            // dU += hsub^T * dlogits, scattered back for sampled heads
            Mat& du = grads->heads[hi].u;
            if (sampled) {
                Mat dusub(H, S);
                Mat hsub_t = transposed(hsub);
                gemm_add(dusub, hsub_t, logits);
                for (int k = 0; k < H; ++k) {
                    const real* src = dusub.row(k);
                    real* dst = du.row(k);
                    for (int j = 0; j < S; ++j) dst[cand[static_cast<std::size_t>(j)]] += src[j];
                }
            } else {
                Mat hsub_t = transposed(hsub);
                gemm_add(du, hsub_t, logits);
            }
            auto& dbias = grads->heads[hi].bias;
            for (int r = 0; r < n; ++r) {
                const real* row = logits.row(r);
                for (int j = 0; j < S; ++j) dbias[static_cast<std::size_t>(cand[static_cast<std::size_t>(j)])] += row[j];
            }

            // dHsub = dlogits * U^T, scattered into per-step dH
            Mat ut = sampled ? transposed(usub) : transposed(head.u);
            Mat dhsub(n, H);
            gemm_add(dhsub, logits, ut);
            for (int r = 0; r < n; ++r)
                axpy(real(1), dhsub.row(r), d_hdrop[static_cast<std::size_t>(slots[static_cast<std::size_t>(r)].first)].row(slots[static_cast<std::size_t>(r)].second), H);
        }
    }

    for (std::size_t hi = 0; hi < params.heads.size(); ++hi) stats.total_loss += stats.head_loss[hi];
    if (!grads) return stats;

    // ---- backward through time ----
    std::vector<Mat> wx_t, wh_t;
    for (auto& layer : params.layers) {
        wx_t.push_back(transposed(layer.wx));
        wh_t.push_back(transposed(layer.wh));
    }

    std::vector<Mat> dh_rec(static_cast<std::size_t>(cfg.layers), Mat(B, H));
    std::vector<Mat> dc_rec(static_cast<std::size_t>(cfg.layers), Mat(B, H));
    Mat dz(B, 4 * H);
    Mat dx;

    for (int t = T - 1; t >= 0; --t) {
        auto& sc = cache[static_cast<std::size_t>(t)];
        Mat dh_above;  // gradient flowing into layer below via its input
        for (int l = cfg.layers - 1; l >= 0; --l) {
            auto& lc = sc.layers[static_cast<std::size_t>(l)];
            Mat dh = dh_rec[static_cast<std::size_t>(l)];
            if (l == cfg.layers - 1) {
                // head gradient through the top dropout mask
                const Mat& dtop = d_hdrop[static_cast<std::size_t>(t)];
                if (use_dropout) {
                    for (std::size_t i = 0; i < dh.size(); ++i)
                        dh.data[i] += dtop.data[i] * sc.top_mask.data[i];
                } else {
                    for (std::size_t i = 0; i < dh.size(); ++i) dh.data[i] += dtop.data[i];
                }
            } else {
                for (std::size_t i = 0; i < dh.size(); ++i) dh.data[i] += dh_above.data[i];
            }

            Mat& dc = dc_rec[static_cast<std::size_t>(l)];
            for (int b = 0; b < B; ++b) {
                const real* g = lc.gates.row(b);
                const real* tc = lc.tanh_c.row(b);
                const real* cp = lc.cprev.row(b);
                real* dhb = dh.row(b);
                real* dcb = dc.row(b);
                real* dzb = dz.row(b);
                for (int k = 0; k < H; ++k) {
                    const real gi = g[k], gf = g[H + k], gg = g[2 * H + k], go = g[3 * H + k];
                    const real d_o = dhb[k] * tc[k];
                    real dck = dcb[k] + dhb[k] * go * (real(1) - tc[k] * tc[k]);
                    const real d_i = dck * gg;
                    const real d_g = dck * gi;
                    const real d_f = dck * cp[k];
                    dcb[k] = dck * gf;  // becomes dc_prev
                    dzb[k] = d_i * gi * (real(1) - gi);
                    dzb[H + k] = d_f * gf * (real(1) - gf);
                    dzb[2 * H + k] = d_g * (real(1) - gg * gg);
                    dzb[3 * H + k] = d_o * go * (real(1) - go);
                }
            }

            auto& glayer = grads->layers[static_cast<std::size_t>(l)];
            {
                Mat x_t = transposed(lc.x);
                gemm_add(glayer.wx, x_t, dz);
                Mat hprev_t = transposed(lc.hprev);
                gemm_add(glayer.wh, hprev_t, dz);
                for (int b = 0; b < B; ++b) {
                    const real* dzb = dz.row(b);
                    for (int k = 0; k < 4 * H; ++k) glayer.bias[static_cast<std::size_t>(k)] += dzb[k];
                }
            }

            dx.resize(B, lc.x.cols);
            dx.zero();
            gemm_add(dx, dz, wx_t[static_cast<std::size_t>(l)]);
            if (use_dropout)
                for (std::size_t i = 0; i < dx.size(); ++i) dx.data[i] *= lc.x_mask.data[i];

            Mat& dhp = dh_rec[static_cast<std::size_t>(l)];
            dhp.zero();
            gemm_add(dhp, dz, wh_t[static_cast<std::size_t>(l)]);

            // a reset cuts the gradient into the previous step
            for (int b = 0; b < B; ++b) {
                if (!window.reset_before.empty() && window.reset_before[static_cast<std::size_t>(t) * B + b]) {
                    std::fill(dhp.row(b), dhp.row(b) + H, real(0));
                    std::fill(dc.row(b), dc.row(b) + H, real(0));
                }
            }

            if (l == 0) {
                for (int b = 0; b < B; ++b)
                    axpy(real(1), dx.row(b), grads->embedding.row(window.input_at(t, b)), cfg.input_dim());
            } else {
                dh_above = dx;
            }
        }
    }
    return stats;
}

// Evaluation forward: advances the state over a window without dropout or
// gradients and writes the top-layer hidden rows into `h_top` (row t*B+b).
inline void forward_hidden(const LstmParams& params, const WindowBatch& window, BatchState& state,
                           Mat& h_top) {
    const auto& cfg = params.cfg;
    const int T = window.T, B = window.B, H = cfg.dim;
    h_top.resize(T * B, H);
    Mat z(B, 4 * H);
    Mat layer_in(B, cfg.input_dim());
    for (int t = 0; t < T; ++t) {
        for (int b = 0; b < B; ++b) {
            if (!window.reset_before.empty() && window.reset_before[static_cast<std::size_t>(t) * B + b]) {
                for (int l = 0; l < cfg.layers; ++l) {
                    std::fill(state.h[static_cast<std::size_t>(l)].row(b), state.h[static_cast<std::size_t>(l)].row(b) + H, real(0));
                    std::fill(state.c[static_cast<std::size_t>(l)].row(b), state.c[static_cast<std::size_t>(l)].row(b) + H, real(0));
                }
            }
        }
        layer_in.resize(B, cfg.input_dim());
        for (int b = 0; b < B; ++b)
            std::memcpy(layer_in.row(b), params.embedding.row(window.input_at(t, b)),
                        sizeof(real) * static_cast<std::size_t>(cfg.input_dim()));
        for (int l = 0; l < cfg.layers; ++l) {
            const auto& layer = params.layers[static_cast<std::size_t>(l)];
            for (int b = 0; b < B; ++b)
                std::memcpy(z.row(b), layer.bias.data(), sizeof(real) * static_cast<std::size_t>(4 * H));
            gemm_add(z, layer_in, layer.wx);
            gemm_add(z, state.h[static_cast<std::size_t>(l)], layer.wh);
            for (int b = 0; b < B; ++b)
                detail::apply_gates(z.row(b), state.c[static_cast<std::size_t>(l)].row(b),
                                    state.h[static_cast<std::size_t>(l)].row(b), H);
            layer_in = state.h[static_cast<std::size_t>(l)];
        }
        for (int b = 0; b < B; ++b)
            std::memcpy(h_top.row(t * B + b), state.h[static_cast<std::size_t>(cfg.layers - 1)].row(b),
                        sizeof(real) * static_cast<std::size_t>(H));
    }
}

// Mean negative log probability of each next token in `stream` under one
// head, starting from a zero state. Perplexity is exp of this.
inline real sequence_loss(const LstmParams& params, const std::vector<int>& stream, int head) {
    if (stream.size() < 2) throw ConfigError("sequence_loss: stream must have at least 2 tokens");
    WindowBatch w;
    w.T = static_cast<int>(stream.size()) - 1;
    w.B = 1;
    w.inputs.assign(stream.begin(), stream.end() - 1);
    w.head_targets.assign(params.heads.size(), std::vector<int>(static_cast<std::size_t>(w.T), -1));
    for (int t = 0; t < w.T; ++t) w.head_targets[static_cast<std::size_t>(head)][static_cast<std::size_t>(t)] = stream[static_cast<std::size_t>(t) + 1];
    BatchState st = BatchState::zeros(params.cfg, 1);
    auto stats = run_window(params, w, st, nullptr);
    return stats.head_loss[static_cast<std::size_t>(head)];
}

// Training-only sampled approximation of sequence_loss.
inline real sampled_softmax_loss(const LstmParams& params, const std::vector<int>& stream, int head,
                                 int sample_size, Rng& rng) {
    const int V = params.cfg.heads[static_cast<std::size_t>(head)].vocab;
    if (sample_size >= V) throw ConfigError("sampled_softmax_loss: sample size must be below vocabulary size");
    if (stream.size() < 2) throw ConfigError("sampled_softmax_loss: stream must have at least 2 tokens");
    WindowBatch w;
    w.T = static_cast<int>(stream.size()) - 1;
    w.B = 1;
    w.inputs.assign(stream.begin(), stream.end() - 1);
    w.head_targets.assign(params.heads.size(), std::vector<int>(static_cast<std::size_t>(w.T), -1));
    for (int t = 0; t < w.T; ++t) w.head_targets[static_cast<std::size_t>(head)][static_cast<std::size_t>(t)] = stream[static_cast<std::size_t>(t) + 1];
    BatchState st = BatchState::zeros(params.cfg, 1);
    TrainOptions opts;
    opts.rng = &rng;
    opts.sample_size.assign(params.heads.size(), 0);
    opts.sample_size[static_cast<std::size_t>(head)] = sample_size;
    GradientSet g = zero_like(params);  // sampling path is only taken when grads are computed
    auto stats = run_window(params, w, st, &g, opts);
    return stats.head_loss[static_cast<std::size_t>(head)];
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

inline real global_grad_norm(GradientSet& grads) {
    double sq = 0;
    for (auto& t : grads.tensors())
        for (std::size_t i = 0; i < t.size; ++i) sq += static_cast<double>(t.data[i]) * t.data[i];
    return static_cast<real>(std::sqrt(sq));
}

// Global-norm clipping followed by a plain SGD update. Frozen (grounded)
// embedding columns are excluded from both the norm and the update.
inline void sgd_step(LstmParams& params, GradientSet& grads, real lr, real clip_norm) {
    if (lr < 0) throw ConfigError("sgd_step: negative learning rate");
    const int gd = params.cfg.ground_dims;
    if (gd > 0) {
        const int in = params.cfg.input_dim();
        for (int r = 0; r < grads.embedding.rows; ++r) {
            real* row = grads.embedding.row(r);
            for (int j = in - gd; j < in; ++j) row[j] = real(0);
        }
    }
    const real norm = global_grad_norm(grads);
    if (!std::isfinite(norm))
        throw TrainingError("non-finite gradient norm; aborting update");
    real scale = real(1);
    if (clip_norm > 0 && norm > clip_norm) scale = clip_norm / norm;
    const real step = lr * scale;

    auto pt = params.tensors();
    auto gt = grads.tensors();
    for (std::size_t i = 0; i < pt.size(); ++i)
        for (std::size_t j = 0; j < pt[i].size; ++j) pt[i].data[j] -= step * gt[i].data[j];
}

// ---------------------------------------------------------------------------
// Checkpoint IO
// ---------------------------------------------------------------------------

constexpr char kCheckpointMagic[8] = {'N', 'S', 'L', 'M', 'C', 'K', 'P', '1'};

inline void save_checkpoint(const std::string& path, LstmParams& params, std::uint64_t vocab_hash,
                            const nlohmann::json& extra = {}) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint: " + path);
    nlohmann::json header;
    header["version"] = 1;
    header["input_vocab"] = params.cfg.input_vocab;
    header["dim"] = params.cfg.dim;
    header["ground_dims"] = params.cfg.ground_dims;
    header["layers"] = params.cfg.layers;
    header["init_range"] = params.cfg.init_range;
    header["vocab_hash"] = hash_hex(vocab_hash);
    header["heads"] = nlohmann::json::array();
    for (const auto& h : params.cfg.heads) header["heads"].push_back({{"name", h.name}, {"vocab", h.vocab}});
    if (!extra.is_null() && !extra.empty()) header["extra"] = extra;
    const std::string hs = header.dump();
    out.write(kCheckpointMagic, 8);
    std::uint64_t len = hs.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (auto& t : params.tensors()) {
        std::uint64_t n = t.size;
        out.write(reinterpret_cast<const char*>(&n), sizeof(n));
        for (std::size_t i = 0; i < t.size; ++i) {
            double v = static_cast<double>(t.data[i]);
            out.write(reinterpret_cast<const char*>(&v), sizeof(v));
        }
    }
    if (!out) throw DataError("failed while writing checkpoint: " + path);
}

// Loads a checkpoint, refusing when the stored vocabulary hash does not match
// `expected_vocab_hash` (pass 0 to skip the check).
inline LstmParams load_checkpoint(const std::string& path, std::uint64_t expected_vocab_hash,
                                  nlohmann::json* extra_out = nullptr) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint: " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0)
        throw DataError("not a checkpoint file: " + path);
    std::uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof(len));
    std::string hs(len, '\0');
    in.read(hs.data(), static_cast<std::streamsize>(len));
    nlohmann::json header = nlohmann::json::parse(hs);
    if (expected_vocab_hash != 0 && header["vocab_hash"].get<std::string>() != hash_hex(expected_vocab_hash))
        throw DataError("checkpoint vocabulary hash mismatch: refusing to load " + path);

    NetworkConfig cfg;
    cfg.input_vocab = header["input_vocab"].get<int>();
    cfg.dim = header["dim"].get<int>();
    cfg.ground_dims = header["ground_dims"].get<int>();
    cfg.layers = header["layers"].get<int>();
    cfg.init_range = header["init_range"].get<real>();
    for (const auto& h : header["heads"])
        cfg.heads.push_back({h["name"].get<std::string>(), h["vocab"].get<int>()});
    LstmParams params = LstmParams::build(cfg);
    for (auto& t : params.tensors()) {
        std::uint64_t n = 0;
        in.read(reinterpret_cast<char*>(&n), sizeof(n));
        if (n != t.size) throw DataError("checkpoint tensor size mismatch for " + t.name);
        for (std::size_t i = 0; i < t.size; ++i) {
            double v = 0;
            in.read(reinterpret_cast<char*>(&v), sizeof(v));
            t.data[i] = static_cast<real>(v);
        }
    }
    if (!in) throw DataError("truncated checkpoint: " + path);
    if (extra_out && header.contains("extra")) *extra_out = header["extra"];
    return params;
}

}  // namespace nslm
