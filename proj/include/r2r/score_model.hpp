#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <memory>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "r2r/attention.hpp"
#include "r2r/autograd.hpp"
#include "r2r/conditioning.hpp"
#include "r2r/rng.hpp"
#include "r2r/schedule.hpp"
#include "r2r/tensor.hpp"

namespace r2r {

// ---------------------------------------------------------------------------
// score-estimator contract
// ---------------------------------------------------------------------------

template <typename T>
class ScoreEstimatorT {
public:
    virtual ~ScoreEstimatorT() = default;

    // eps prediction for a single latent; deterministic given (weights, inputs,
    // mode, trace)
    virtual TensorT<T> predict(const LatentT<T>& z, int t, const ConditioningEmbeddingT<T>& cond) = 0;

    virtual std::vector<AttentionLayerInfo> enumerate_attention_layers() const = 0;

    // record: append q/k of every self-attention layer into `trace`.
    // inject: layers picked by `selector` use q/k from `trace` and their own v.
    // passthrough releases the hook.
    virtual void set_attention_mode(AttentionMode mode, AttentionTraceT<T>* trace,
                                    InjectionSelector selector) = 0;

    // step coordinate for trace keys during record/inject runs
    virtual void set_step_index(int step) = 0;

    virtual const ConditioningEmbeddingT<T>& null_embedding() const = 0;
    virtual int conditioning_dim() const = 0;
};

using ScoreEstimator = ScoreEstimatorT<float>;

template <typename T>
TensorT<T> predict_noise(ScoreEstimatorT<T>& model, const LatentT<T>& z, int t,
                         const ConditioningEmbeddingT<T>& cond) {
    return model.predict(z, t, cond);
}

// ---------------------------------------------------------------------------
// bundled trainable backbone
// ---------------------------------------------------------------------------

struct UNetConfig {
    int in_channels = 4;
    int latent_size = 32;  // nominal spatial side of the latent
    int base_channels = 40;
    std::vector<int> channel_mult = {1, 2, 3};
    int num_res_blocks = 1;
    int num_heads = 2;
    int cond_dim = 16;
    int null_tokens = 8;
    int time_sinusoid_dim = 32;
    int time_dim = 64;
    int groups = 8;
    std::vector<int> self_attention_levels = {0, 1};
    int max_timestep = 1000;
    uint64_t init_seed = 42;

    int levels() const { return static_cast<int>(channel_mult.size()); }
    int channels_at(int level) const { return base_channels * channel_mult[static_cast<size_t>(level)]; }
    bool self_attention_at(int level) const {
        for (int l : self_attention_levels)
            if (l == level) return true;
        return false;
    }

    void validate() const {
        if (in_channels < 1 || latent_size < 1 || base_channels < 1 || num_res_blocks < 1 ||
            num_heads < 1 || cond_dim < 1 || null_tokens < 1 || time_dim < 1 || groups < 1 ||
            max_timestep < 1 || channel_mult.empty())
            throw std::invalid_argument("unet config: non-positive field");
        int down_factor = 1 << (levels() - 1);
        if (latent_size % down_factor != 0)
            throw std::invalid_argument("unet config: latent_size must be divisible by " +
                                        std::to_string(down_factor));
        for (int l = 0; l < levels(); ++l) {
            int ch = channels_at(l);
            if (ch % groups != 0 || (2 * ch) % groups != 0)
                throw std::invalid_argument("unet config: groups must divide all channel counts");
            if (ch % num_heads != 0)
                throw std::invalid_argument("unet config: heads must divide all channel counts");
        }
        for (int l : self_attention_levels)
            if (l < 0 || l >= levels())
                throw std::invalid_argument("unet config: self-attention level out of range");
    }
};

namespace detail {

// sinusoidal embedding of integer timesteps, [N, dim]
template <typename T>
TensorT<T> timestep_embedding(const std::vector<int>& ts, int dim) {
    int half = dim / 2;
    TensorT<T> out({static_cast<int64_t>(ts.size()), static_cast<int64_t>(dim)});
    for (size_t n = 0; n < ts.size(); ++n) {
        for (int i = 0; i < half; ++i) {
            double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) /
                                   std::max(1, half - 1));
            double a = static_cast<double>(ts[n]) * freq;
            out.at2(static_cast<int64_t>(n), i) = static_cast<T>(std::sin(a));
            out.at2(static_cast<int64_t>(n), half + i) = static_cast<T>(std::cos(a));
        }
        if (dim % 2 == 1) out.at2(static_cast<int64_t>(n), dim - 1) = T(0);
    }
    return out;
}

template <typename T>
struct ParamRegistry {
    std::vector<std::pair<std::string, VarT<T>>> params;

    VarT<T> add(const std::string& name, TensorT<T> init) {
        auto v = make_leaf(std::move(init), true);
        params.emplace_back(name, v);
        return v;
    }
};

template <typename T>
TensorT<T> conv_init(int64_t out_ch, int64_t in_ch, int64_t k, Rng& rng) {
    double std = std::sqrt(2.0 / static_cast<double>(in_ch * k * k));
    return randn<T>({out_ch, in_ch, k, k}, rng, std);
}

template <typename T>
TensorT<T> dense_init(int64_t in_dim, int64_t out_dim, Rng& rng) {
    double std = std::sqrt(1.0 / static_cast<double>(in_dim));
    return randn<T>({in_dim, out_dim}, rng, std);
}

template <typename T>
struct ConvLayer {
    VarT<T> w, b;
    int64_t stride = 1, pad = 1;

    ConvLayer() = default;
    ConvLayer(ParamRegistry<T>& reg, const std::string& name, int64_t in_ch, int64_t out_ch,
              int64_t k, int64_t stride_, int64_t pad_, Rng& rng, bool zero_init = false)
        : stride(stride_), pad(pad_) {
        auto wt = zero_init ? TensorT<T>({out_ch, in_ch, k, k}) : conv_init<T>(out_ch, in_ch, k, rng);
        w = reg.add(name + ".w", std::move(wt));
        b = reg.add(name + ".b", TensorT<T>({out_ch}));
    }

    VarT<T> operator()(const VarT<T>& x) const { return conv2d(x, w, b, stride, pad); }
};

template <typename T>
struct DenseLayer {
    VarT<T> w, b;

    DenseLayer() = default;
    DenseLayer(ParamRegistry<T>& reg, const std::string& name, int64_t in_dim, int64_t out_dim,
               Rng& rng) {
        w = reg.add(name + ".w", dense_init<T>(in_dim, out_dim, rng));
        b = reg.add(name + ".b", TensorT<T>({out_dim}));
    }

    VarT<T> operator()(const VarT<T>& x) const { return linear(x, w, b); }
};

template <typename T>
struct NormLayer {
    VarT<T> gamma, beta;
    int64_t groups = 1;

    NormLayer() = default;
    NormLayer(ParamRegistry<T>& reg, const std::string& name, int64_t ch, int64_t groups_)
        : groups(groups_) {
        gamma = reg.add(name + ".gamma", TensorT<T>({ch}, T(1)));
        beta = reg.add(name + ".beta", TensorT<T>({ch}));
    }

    VarT<T> operator()(const VarT<T>& x) const { return group_norm(x, gamma, beta, groups); }
};

// runtime state shared by all self-attention layers during one hooked run
template <typename T>
struct AttnRuntime {
    AttentionMode mode = AttentionMode::passthrough;
    AttentionTraceT<T>* trace = nullptr;
    InjectionSelector selector;
    int step_index = -1;
    std::vector<std::pair<int, std::string>> injection_log;
};

template <typename T>
struct SelfAttentionBlock {
    AttentionLayerInfo info;
    NormLayer<T> norm;
    DenseLayer<T> wq, wk, wv, proj;
    int heads = 1;

    SelfAttentionBlock() = default;
    SelfAttentionBlock(ParamRegistry<T>& reg, const std::string& name, AttentionLayerInfo info_,
                       int64_t ch, int heads_, int64_t groups, Rng& rng)
        : info(std::move(info_)), norm(reg, name + ".norm", ch, groups),
          wq(reg, name + ".q", ch, ch, rng), wk(reg, name + ".k", ch, ch, rng),
          wv(reg, name + ".v", ch, ch, rng), proj(reg, name + ".proj", ch, ch, rng),
          heads(heads_) {}

    VarT<T> operator()(const VarT<T>& x, AttnRuntime<T>& rt) const {
        int64_t N = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
        int64_t S = H * W;
        auto tokens = nchw_to_tokens(norm(x));                 // [N, S, C]
        auto flat = reshape(tokens, {N * S, C});
        auto q = split_heads(reshape(wq(flat), {N, S, C}), heads);  // [N*h, S, d]
        auto k = split_heads(reshape(wk(flat), {N, S, C}), heads);
        auto v = split_heads(reshape(wv(flat), {N, S, C}), heads);

        if (rt.mode == AttentionMode::record) {
            if (N != 1) throw std::runtime_error("attention record requires batch size 1");
            rt.trace->put(rt.step_index, info.layer_id, q->value, k->value);
        } else if (rt.mode == AttentionMode::inject && rt.selector && rt.selector(rt.step_index, info)) {
            if (N != 1) throw std::runtime_error("attention inject requires batch size 1");
            if (grad_mode_flag())
                throw std::runtime_error("attention inject is an inference-only mode");
            const auto& e = rt.trace->get(rt.step_index, info.layer_id);
            check_same_shape(e.q, q->value, "injected q");
            check_same_shape(e.k, k->value, "injected k");
            q = make_const(e.q);
            k = make_const(e.k);
            rt.injection_log.emplace_back(rt.step_index, info.layer_id);
        }

        int64_t d = C / heads;
        auto att = softmax_lastdim(scale(bmm_nt(q, k), 1.0 / std::sqrt(static_cast<double>(d))));
        auto out = merge_heads(bmm(att, v), heads);            // [N, S, C]
        out = reshape(proj(reshape(out, {N * S, C})), {N, S, C});
        return add(x, tokens_to_nchw(out, H, W));
    }
};

template <typename T>
struct CrossAttentionBlock {
    NormLayer<T> norm;
    DenseLayer<T> wq, wk, wv, proj;
    int heads = 1;

    CrossAttentionBlock() = default;
    CrossAttentionBlock(ParamRegistry<T>& reg, const std::string& name, int64_t ch, int64_t cond_dim,
                        int heads_, int64_t groups, Rng& rng)
        : norm(reg, name + ".norm", ch, groups), wq(reg, name + ".q", ch, ch, rng),
          wk(reg, name + ".k", cond_dim, ch, rng), wv(reg, name + ".v", cond_dim, ch, rng),
          proj(reg, name + ".proj", ch, ch, rng), heads(heads_) {}

    // cond: [N, L, cond_dim]
    VarT<T> operator()(const VarT<T>& x, const VarT<T>& cond) const {
        int64_t N = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
        int64_t S = H * W;
        int64_t L = cond->value.dim(1), cd = cond->value.dim(2);
        auto tokens = nchw_to_tokens(norm(x));
        auto q = split_heads(reshape(wq(reshape(tokens, {N * S, C})), {N, S, C}), heads);
        auto kv_in = reshape(cond, {N * L, cd});
        auto k = split_heads(reshape(wk(kv_in), {N, L, C}), heads);
        auto v = split_heads(reshape(wv(kv_in), {N, L, C}), heads);
        int64_t d = C / heads;
        auto att = softmax_lastdim(scale(bmm_nt(q, k), 1.0 / std::sqrt(static_cast<double>(d))));
        auto out = merge_heads(bmm(att, v), heads);
        out = reshape(proj(reshape(out, {N * S, C})), {N, S, C});
        return add(x, tokens_to_nchw(out, H, W));
    }
};

template <typename T>
struct ResBlock {
    NormLayer<T> n1, n2;
    ConvLayer<T> c1, c2;
    DenseLayer<T> temb_proj;
    std::optional<ConvLayer<T>> skip;  // 1x1 when channel count changes

    ResBlock() = default;
    ResBlock(ParamRegistry<T>& reg, const std::string& name, int64_t in_ch, int64_t out_ch,
             int64_t time_dim, int64_t groups, Rng& rng)
        : n1(reg, name + ".n1", in_ch, groups),
          n2(reg, name + ".n2", out_ch, groups),
          c1(reg, name + ".c1", in_ch, out_ch, 3, 1, 1, rng),
          c2(reg, name + ".c2", out_ch, out_ch, 3, 1, 1, rng),
          temb_proj(reg, name + ".temb", time_dim, out_ch, rng) {
        if (in_ch != out_ch) skip.emplace(reg, name + ".skip", in_ch, out_ch, 1, 1, 0, rng);
    }

    VarT<T> operator()(const VarT<T>& x, const VarT<T>& temb) const {
        auto h = c1(silu(n1(x)));
        h = add_channel_vec(h, temb_proj(silu(temb)));
        h = c2(silu(n2(h)));
        auto s = skip ? (*skip)(x) : x;
        return add(s, h);
    }
};

}  // namespace detail

// Small encoder/decoder eps-prediction network: residual blocks, self-attention
// at the configured shallow levels, cross-attention on the conditioning tokens
// at every level.
template <typename T>
class UNetBackboneT : public ScoreEstimatorT<T> {
public:
    explicit UNetBackboneT(UNetConfig cfg) : cfg_(std::move(cfg)) {
        cfg_.validate();
        Rng rng(cfg_.init_seed);
        build(rng);
        null_embedding_.tokens = randn<T>({cfg_.null_tokens, cfg_.cond_dim}, rng);
        null_embedding_.kind = EmbeddingKind::null;
    }

    UNetBackboneT(const UNetBackboneT&) = delete;
    UNetBackboneT& operator=(const UNetBackboneT&) = delete;

    const UNetConfig& config() const { return cfg_; }

    // ---- ScoreEstimator surface ----

    TensorT<T> predict(const LatentT<T>& z, int t,
                       const ConditioningEmbeddingT<T>& cond) override {
        validate_inputs(z, t, cond);
        NoGradGuard no_grad;
        auto x = make_const(z.data.reshaped({1, z.data.dim(0), z.data.dim(1), z.data.dim(2)}));
        auto c = make_const(cond.tokens.reshaped({1, cond.tokens.dim(0), cond.tokens.dim(1)}));
        auto out = forward(x, {t}, c);
        if (!out->value.all_finite()) throw std::runtime_error("predict: non-finite output");
        return out->value.reshaped(z.data.shape);
    }

    std::vector<AttentionLayerInfo> enumerate_attention_layers() const override {
        std::vector<AttentionLayerInfo> out;
        for (const auto* blk : self_attn_blocks_) out.push_back(blk->info);
        std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
            return std::tie(a.depth_level, a.layer_id) < std::tie(b.depth_level, b.layer_id);
        });
        return out;
    }

    void set_attention_mode(AttentionMode mode, AttentionTraceT<T>* trace,
                            InjectionSelector selector) override {
        if (mode != AttentionMode::passthrough) {
            if (runtime_.mode != AttentionMode::passthrough)
                throw std::runtime_error(
                    "model is already bound to a hooked run; concurrent hooked runs are rejected");
            if (trace == nullptr)
                throw std::invalid_argument("record/inject modes need a trace");
        }
        runtime_.mode = mode;
        runtime_.trace = trace;
        runtime_.selector = std::move(selector);
        runtime_.step_index = -1;
        runtime_.injection_log.clear();
    }

    void set_step_index(int step) override { runtime_.step_index = step; }

    const ConditioningEmbeddingT<T>& null_embedding() const override { return null_embedding_; }
    int conditioning_dim() const override { return cfg_.cond_dim; }

    // ---- training / persistence surface ----

    // batched forward used by the training loops; builds the autodiff graph
    // when grad mode is on
    VarT<T> forward(const VarT<T>& x, const std::vector<int>& timesteps, const VarT<T>& cond) {
        int64_t N = x->value.dim(0);
        if (static_cast<int64_t>(timesteps.size()) != N)
            throw std::invalid_argument("forward: timestep count != batch size");
        ++eval_count_;

        auto temb_in = make_const(detail::timestep_embedding<T>(timesteps, cfg_.time_sinusoid_dim));
        auto temb = time_d2_(silu(time_d1_(temb_in)));

        auto h = conv_in_(x);
        std::vector<VarT<T>> skips;
        int L = cfg_.levels();
        for (int l = 0; l < L; ++l) {
            for (int b = 0; b < cfg_.num_res_blocks; ++b) {
                auto& stage = down_[static_cast<size_t>(l)][static_cast<size_t>(b)];
                h = stage.res(h, temb);
                if (stage.self) h = (*stage.self)(h, runtime_);
                h = stage.cross(h, cond);
            }
            skips.push_back(h);
            if (l + 1 < L) h = down_conv_[static_cast<size_t>(l)](h);
        }

        h = mid_res1_(h, temb);
        h = mid_cross_(h, cond);
        h = mid_res2_(h, temb);

        for (int l = L - 1; l >= 0; --l) {
            h = concat_channels(h, skips[static_cast<size_t>(l)]);
            for (int b = 0; b < cfg_.num_res_blocks; ++b) {
                auto& stage = up_[static_cast<size_t>(l)][static_cast<size_t>(b)];
                h = stage.res(h, temb);
                if (stage.self) h = (*stage.self)(h, runtime_);
                h = stage.cross(h, cond);
            }
            if (l > 0) h = up_conv_[static_cast<size_t>(l)](upsample_nearest2x(h));
        }

        h = conv_out_(silu(norm_out_(h)));
        return h;
    }

    std::vector<std::pair<std::string, VarT<T>>>& parameters() { return reg_.params; }

    // all persistent tensors, parameters plus the stored null embedding
    std::vector<std::pair<std::string, TensorT<T>>> named_tensors() const {
        std::vector<std::pair<std::string, TensorT<T>>> out;
        for (const auto& [name, v] : reg_.params) out.emplace_back(name, v->value);
        out.emplace_back("null_embedding", null_embedding_.tokens);
        return out;
    }

    void load_named_tensors(const std::vector<std::pair<std::string, TensorT<T>>>& tensors) {
        size_t matched = 0;
        for (const auto& [name, tensor] : tensors) {
            if (name == "null_embedding") {
                if (tensor.shape != null_embedding_.tokens.shape)
                    throw std::runtime_error("load: null embedding shape mismatch");
                null_embedding_.tokens = tensor;
                ++matched;
                continue;
            }
            bool found = false;
            for (auto& [pname, var] : reg_.params)
                if (pname == name) {
                    if (tensor.shape != var->value.shape)
                        throw std::runtime_error("load: shape mismatch for " + name);
                    var->value = tensor;
                    found = true;
                    ++matched;
                    break;
                }
            if (!found) throw std::runtime_error("load: unknown tensor " + name);
        }
        if (matched != reg_.params.size() + 1)
            throw std::runtime_error("load: tensor set incomplete");
    }

    // content hash over all persistent tensors, in registration order
    std::string fingerprint() const {
        uint64_t h = 0xcbf29ce484222325ULL;
        for (const auto& [name, tensor] : named_tensors()) {
            h = fnv1a64(name.data(), name.size(), h);
            uint64_t th = content_hash(tensor);
            h = fnv1a64(&th, sizeof(th), h);
        }
        std::ostringstream os;
        os << "fnv1a64:" << std::hex << h;
        return os.str();
    }

    int64_t parameter_count() const {
        int64_t n = 0;
        for (const auto& [name, v] : reg_.params) n += v->value.numel();
        return n;
    }

    void set_trainable(bool trainable) {
        for (auto& [name, v] : reg_.params) v->requires_grad = trainable;
        frozen_ = !trainable;
    }
    bool frozen() const { return frozen_; }

    void set_finetuned(bool f) { finetuned_ = f; }
    bool finetuned() const { return finetuned_; }

    void set_null_embedding(TensorT<T> tokens) {
        if (tokens.ndim() != 2 || tokens.dim(1) != cfg_.cond_dim)
            throw std::invalid_argument("null embedding must be [L, cond_dim]");
        null_embedding_.tokens = std::move(tokens);
    }

    int64_t eval_count() const { return eval_count_.load(); }

    const std::vector<std::pair<int, std::string>>& injection_log() const {
        return runtime_.injection_log;
    }

    std::unique_ptr<UNetBackboneT<T>> clone() const {
        auto copy = std::make_unique<UNetBackboneT<T>>(cfg_);
        std::vector<std::pair<std::string, TensorT<T>>> tensors = named_tensors();
        copy->load_named_tensors(tensors);
        copy->set_finetuned(finetuned_);
        return copy;
    }

private:
    struct Stage {
        detail::ResBlock<T> res;
        std::optional<detail::SelfAttentionBlock<T>> self;
        detail::CrossAttentionBlock<T> cross;
    };

    void build(Rng& rng) {
        int L = cfg_.levels();
        conv_in_ = detail::ConvLayer<T>(reg_, "conv_in", cfg_.in_channels, cfg_.channels_at(0), 3, 1,
                                        1, rng);
        time_d1_ = detail::DenseLayer<T>(reg_, "time.d1", cfg_.time_sinusoid_dim, cfg_.time_dim, rng);
        time_d2_ = detail::DenseLayer<T>(reg_, "time.d2", cfg_.time_dim, cfg_.time_dim, rng);

        down_.resize(static_cast<size_t>(L));
        for (int l = 0; l < L; ++l) {
            int ch = cfg_.channels_at(l);
            for (int b = 0; b < cfg_.num_res_blocks; ++b) {
                std::string base = "down." + std::to_string(l) + "." + std::to_string(b);
                Stage st;
                st.res = detail::ResBlock<T>(reg_, base + ".res", ch, ch, cfg_.time_dim, cfg_.groups,
                                             rng);
                if (cfg_.self_attention_at(l))
                    st.self.emplace(reg_, base + ".self",
                                    AttentionLayerInfo{base + ".self", l, cfg_.latent_size >> l}, ch,
                                    cfg_.num_heads, cfg_.groups, rng);
                st.cross = detail::CrossAttentionBlock<T>(reg_, base + ".cross", ch, cfg_.cond_dim,
                                                          cfg_.num_heads, cfg_.groups, rng);
                down_[static_cast<size_t>(l)].push_back(std::move(st));
            }
            if (l + 1 < L)
                down_conv_.push_back(detail::ConvLayer<T>(reg_, "down." + std::to_string(l) + ".down",
                                                          ch, cfg_.channels_at(l + 1), 3, 2, 1, rng));
        }

        int mid_ch = cfg_.channels_at(L - 1);
        mid_res1_ = detail::ResBlock<T>(reg_, "mid.res1", mid_ch, mid_ch, cfg_.time_dim, cfg_.groups,
                                        rng);
        mid_cross_ = detail::CrossAttentionBlock<T>(reg_, "mid.cross", mid_ch, cfg_.cond_dim,
                                                    cfg_.num_heads, cfg_.groups, rng);
        mid_res2_ = detail::ResBlock<T>(reg_, "mid.res2", mid_ch, mid_ch, cfg_.time_dim, cfg_.groups,
                                        rng);

        up_.resize(static_cast<size_t>(L));
        up_conv_.resize(static_cast<size_t>(L));
        for (int l = L - 1; l >= 0; --l) {
            int ch = cfg_.channels_at(l);
            for (int b = 0; b < cfg_.num_res_blocks; ++b) {
                std::string base = "up." + std::to_string(l) + "." + std::to_string(b);
                int in_ch = b == 0 ? 2 * ch : ch;
                Stage st;
                st.res = detail::ResBlock<T>(reg_, base + ".res", in_ch, ch, cfg_.time_dim,
                                             cfg_.groups, rng);
                if (cfg_.self_attention_at(l))
                    st.self.emplace(reg_, base + ".self",
                                    AttentionLayerInfo{base + ".self", l, cfg_.latent_size >> l}, ch,
                                    cfg_.num_heads, cfg_.groups, rng);
                st.cross = detail::CrossAttentionBlock<T>(reg_, base + ".cross", ch, cfg_.cond_dim,
                                                          cfg_.num_heads, cfg_.groups, rng);
                up_[static_cast<size_t>(l)].push_back(std::move(st));
            }
            if (l > 0)
                up_conv_[static_cast<size_t>(l)] = detail::ConvLayer<T>(
                    reg_, "up." + std::to_string(l) + ".up", ch, cfg_.channels_at(l - 1), 3, 1, 1,
                    rng);
        }

        norm_out_ = detail::NormLayer<T>(reg_, "out.norm", cfg_.channels_at(0), cfg_.groups);
        conv_out_ = detail::ConvLayer<T>(reg_, "out.conv", cfg_.channels_at(0), cfg_.in_channels, 3,
                                         1, 1, rng, /*zero_init=*/true);

        // collect self-attention sites for enumeration
        for (auto& level : down_)
            for (auto& st : level)
                if (st.self) self_attn_blocks_.push_back(&*st.self);
        for (auto& level : up_)
            for (auto& st : level)
                if (st.self) self_attn_blocks_.push_back(&*st.self);
    }

    void validate_inputs(const LatentT<T>& z, int t, const ConditioningEmbeddingT<T>& cond) const {
        if (z.data.ndim() != 3 || z.data.dim(0) != cfg_.in_channels)
            throw std::invalid_argument("predict: latent must be [" +
                                        std::to_string(cfg_.in_channels) + ", H, W]");
        int down_factor = 1 << (cfg_.levels() - 1);
        if (z.data.dim(1) % down_factor != 0 || z.data.dim(2) % down_factor != 0)
            throw std::invalid_argument("predict: latent spatial dims must be divisible by " +
                                        std::to_string(down_factor));
        if (t < 1 || t > cfg_.max_timestep)
            throw std::out_of_range("predict: timestep " + std::to_string(t) +
                                    " outside trained range [1," + std::to_string(cfg_.max_timestep) +
                                    "]");
        cond.validate();
        if (cond.dim() != cfg_.cond_dim)
            throw std::invalid_argument("predict: conditioning dim " + std::to_string(cond.dim()) +
                                        " != model cond_dim " + std::to_string(cfg_.cond_dim));
    }

    UNetConfig cfg_;
    detail::ParamRegistry<T> reg_;
    detail::ConvLayer<T> conv_in_, conv_out_;
    detail::DenseLayer<T> time_d1_, time_d2_;
    detail::NormLayer<T> norm_out_;
    std::vector<std::vector<Stage>> down_, up_;
    std::vector<detail::ConvLayer<T>> down_conv_, up_conv_;
    detail::ResBlock<T> mid_res1_, mid_res2_;
    detail::CrossAttentionBlock<T> mid_cross_;
    std::vector<detail::SelfAttentionBlock<T>*> self_attn_blocks_;
    ConditioningEmbeddingT<T> null_embedding_;
    detail::AttnRuntime<T> runtime_;
    std::atomic<int64_t> eval_count_{0};
    bool frozen_ = false;
    bool finetuned_ = false;
};

using UNetBackbone = UNetBackboneT<float>;

// convenience wrapper matching the spec's record_run operation: a full DDIM
// sampling pass in record mode, returning the final latent and the trace
template <typename T>
std::pair<LatentT<T>, AttentionTraceT<T>> record_run(ScoreEstimatorT<T>& model,
                                                     const LatentT<T>& z_start,
                                                     const StepPlan& plan,
                                                     const ConditioningEmbeddingT<T>& cond,
                                                     const NoiseSchedule& sched) {
    if (plan.run_length() < 1) throw std::invalid_argument("record_run: empty plan");
    if (cond.kind != EmbeddingKind::null)
        throw std::invalid_argument("record_run: the recording branch is unconditional (null kind)");
    AttentionTraceT<T> trace;
    model.set_attention_mode(AttentionMode::record, &trace, nullptr);
    LatentT<T> z = z_start;
    try {
        for (int i = 0; i < plan.run_length(); ++i) {
            model.set_step_index(i);
            int t = plan.timestep(i);
            auto eps = model.predict(z, t, cond);
            z = ddim_step(z, eps, t, plan.prev_timestep(i), sched);
        }
    } catch (...) {
        model.set_attention_mode(AttentionMode::passthrough, nullptr, nullptr);
        throw;
    }
    model.set_attention_mode(AttentionMode::passthrough, nullptr, nullptr);
    return {std::move(z), std::move(trace)};
}

}  // namespace r2r
