#include "frul/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <limits>
#include <random>
#include <unordered_map>

#include <nlohmann/json.hpp>
#include <zlib.h>

#include "frul/common.hpp"
#include "frul/rng.hpp"

namespace frul::model {

static_assert(std::endian::native == std::endian::little, "checkpoint payloads assume a little-endian host");

using nlohmann::json;

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kInitStd = 0.02;

template <class S>
using RowVec = Eigen::Matrix<S, 1, Eigen::Dynamic>;

template <class S>
S gelu(S u) {
    const S k = static_cast<S>(0.7978845608028654);  // sqrt(2 / pi)
    const S c = static_cast<S>(0.044715);
    return static_cast<S>(0.5) * u * (static_cast<S>(1) + std::tanh(k * (u + c * u * u * u)));
}

template <class S>
S gelu_grad(S u) {
    const S k = static_cast<S>(0.7978845608028654);
    const S c = static_cast<S>(0.044715);
    const S t = std::tanh(k * (u + c * u * u * u));
    return static_cast<S>(0.5) * (static_cast<S>(1) + t) +
           static_cast<S>(0.5) * u * (static_cast<S>(1) - t * t) * k * (static_cast<S>(1) + static_cast<S>(3) * c * u * u);
}

template <class S>
void layer_norm(const Matrix<S>& x, const Matrix<S>& gain, const Matrix<S>& bias, Matrix<S>& xhat,
                std::vector<S>& rstd, Matrix<S>& y) {
    const auto n = x.rows();
    const auto d = x.cols();
    xhat.resize(n, d);
    y.resize(n, d);
    rstd.resize(static_cast<std::size_t>(n));
    for (Eigen::Index r = 0; r < n; ++r) {
        const S mean = x.row(r).mean();
        const S var = (x.row(r).array() - mean).square().mean();
        const S rs = static_cast<S>(1) / std::sqrt(var + static_cast<S>(kLnEps));
        rstd[static_cast<std::size_t>(r)] = rs;
        xhat.row(r) = (x.row(r).array() - mean) * rs;
        y.row(r) = xhat.row(r).cwiseProduct(gain.row(0)) + bias.row(0);
    }
}

// Returns dx; accumulates gain and bias gradients.
template <class S>
Matrix<S> layer_norm_backward(const Matrix<S>& dy, const Matrix<S>& xhat, const std::vector<S>& rstd,
                              const Matrix<S>& gain, Matrix<S>& dgain, Matrix<S>& dbias) {
    dgain.row(0) += dy.cwiseProduct(xhat).colwise().sum();
    dbias.row(0) += dy.colwise().sum();
    Matrix<S> dxhat = dy.array().rowwise() * gain.row(0).array();
    Matrix<S> dx(dy.rows(), dy.cols());
    for (Eigen::Index r = 0; r < dy.rows(); ++r) {
        const S m1 = dxhat.row(r).mean();
        const S m2 = dxhat.row(r).cwiseProduct(xhat.row(r)).mean();
        dx.row(r) = ((dxhat.row(r).array() - m1) - xhat.row(r).array() * m2) * rstd[static_cast<std::size_t>(r)];
    }
    return dx;
}

template <class S>
void add_bias(Matrix<S>& m, const Matrix<S>& bias) {
    m.rowwise() += bias.row(0);
}

std::vector<std::pair<std::string, std::pair<int, int>>> tensor_layout(const ModelConfig& c) {
    std::vector<std::pair<std::string, std::pair<int, int>>> out;
    out.push_back({"tok_emb", {c.vocab_size, c.d_model}});
    out.push_back({"pos_emb", {c.context_len, c.d_model}});
    for (int l = 0; l < c.n_layers; ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        out.push_back({p + "ln1.gain", {1, c.d_model}});
        out.push_back({p + "ln1.bias", {1, c.d_model}});
        out.push_back({p + "attn.qkv.weight", {c.d_model, 3 * c.d_model}});
        out.push_back({p + "attn.qkv.bias", {1, 3 * c.d_model}});
        out.push_back({p + "attn.out.weight", {c.d_model, c.d_model}});
        out.push_back({p + "attn.out.bias", {1, c.d_model}});
        out.push_back({p + "ln2.gain", {1, c.d_model}});
        out.push_back({p + "ln2.bias", {1, c.d_model}});
        out.push_back({p + "mlp.fc.weight", {c.d_model, c.d_ff}});
        out.push_back({p + "mlp.fc.bias", {1, c.d_ff}});
        out.push_back({p + "mlp.proj.weight", {c.d_ff, c.d_model}});
        out.push_back({p + "mlp.proj.bias", {1, c.d_model}});
    }
    out.push_back({"ln_f.gain", {1, c.d_model}});
    out.push_back({"ln_f.bias", {1, c.d_model}});
    out.push_back({"head.weight", {c.d_model, c.vocab_size}});
    out.push_back({"head.bias", {1, c.vocab_size}});
    return out;
}

}  // namespace

void ModelConfig::validate() const {
    if (n_layers < 1) throw ValidationError("n_layers must be >= 1");
    if (n_heads < 1) throw ValidationError("n_heads must be >= 1");
    if (d_model < 1 || d_model % n_heads != 0) throw ValidationError("d_model must be a positive multiple of n_heads");
    if (d_ff < 1) throw ValidationError("d_ff must be >= 1");
    if (context_len < 2) throw ValidationError("context_len must be >= 2");
    if (vocab_size < 1) throw ValidationError("vocab_size must be >= 1");
}

template <class S>
std::size_t Parameters<S>::count() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += static_cast<std::size_t>(t.size());
    return n;
}

template <class S>
bool Parameters<S>::all_finite() const {
    for (const auto& t : tensors) {
        if (!t.allFinite()) return false;
    }
    return true;
}

template <class S>
Parameters<S> Parameters<S>::zeros_like() const {
    Parameters<S> out;
    out.config = config;
    out.names = names;
    out.tensors.reserve(tensors.size());
    for (const auto& t : tensors) out.tensors.push_back(Matrix<S>::Zero(t.rows(), t.cols()));
    return out;
}

template <class S>
Parameters<S> init_model(const ModelConfig& config) {
    config.validate();
    Parameters<S> p;
    p.config = config;
    Rng rng(config.init_seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    const double resid_scale = 1.0 / std::sqrt(2.0 * config.n_layers);
    for (const auto& [name, shape] : tensor_layout(config)) {
        Matrix<S> t = Matrix<S>::Zero(shape.first, shape.second);
        const bool is_gain = name.ends_with(".gain");
        const bool is_bias = name.ends_with(".bias");
        if (is_gain) {
            t.setOnes();
        } else if (!is_bias) {
            double std = kInitStd;
            if (name.ends_with("attn.out.weight") || name.ends_with("mlp.proj.weight")) std *= resid_scale;
            for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = static_cast<S>(std * normal(rng));
        }
        p.names.push_back(name);
        p.tensors.push_back(std::move(t));
    }
    return p;
}

// ---------------------------------------------------------------- ForwardPass

template <class S>
ForwardPass<S>::ForwardPass(const Parameters<S>& params, std::vector<std::vector<TokenId>> sequences)
    : params_(params), seqs_(std::move(sequences)) {
    const auto& c = params.config;
    const int d = c.d_model;
    const int dh = c.head_dim();
    const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));

    offsets_.reserve(seqs_.size());
    for (const auto& s : seqs_) {
        if (s.empty()) throw ValidationError("empty token sequence");
        if (static_cast<int>(s.size()) > c.context_len) {
            throw ValidationError("sequence of length " + std::to_string(s.size()) + " exceeds context_len " +
                                  std::to_string(c.context_len));
        }
        offsets_.push_back(rows_);
        rows_ += s.size();
    }

    Matrix<S> x(static_cast<Eigen::Index>(rows_), d);
    const auto& tok = params[Parameters<S>::kTokEmb];
    const auto& pos = params[Parameters<S>::kPosEmb];
    for (std::size_t s = 0; s < seqs_.size(); ++s) {
        for (std::size_t t = 0; t < seqs_[s].size(); ++t) {
            const TokenId id = seqs_[s][t];
            if (id < 0 || id >= c.vocab_size) throw ValidationError("token id " + std::to_string(id) + " out of range");
            x.row(static_cast<Eigen::Index>(offsets_[s] + t)) = tok.row(id) + pos.row(static_cast<Eigen::Index>(t));
        }
    }

    layers_.resize(static_cast<std::size_t>(c.n_layers));
    for (int l = 0; l < c.n_layers; ++l) {
        using P = Parameters<S>;
        auto& L = layers_[static_cast<std::size_t>(l)];
        L.x_in = std::move(x);
        layer_norm(L.x_in, params[params.layer(l, P::Ln1Gain)], params[params.layer(l, P::Ln1Bias)], L.xhat1, L.rstd1,
                   L.h1);
        L.qkv.noalias() = L.h1 * params[params.layer(l, P::Wqkv)];
        add_bias(L.qkv, params[params.layer(l, P::Bqkv)]);

        L.att = Matrix<S>::Zero(static_cast<Eigen::Index>(rows_), d);
        L.probs.resize(seqs_.size() * static_cast<std::size_t>(c.n_heads));
        for (std::size_t s = 0; s < seqs_.size(); ++s) {
            const auto off = static_cast<Eigen::Index>(offsets_[s]);
            const auto T = static_cast<Eigen::Index>(seqs_[s].size());
            for (int h = 0; h < c.n_heads; ++h) {
                auto Q = L.qkv.block(off, h * dh, T, dh);
                auto K = L.qkv.block(off, d + h * dh, T, dh);
                auto V = L.qkv.block(off, 2 * d + h * dh, T, dh);
                Matrix<S>& P = L.probs[s * static_cast<std::size_t>(c.n_heads) + static_cast<std::size_t>(h)];
                P.noalias() = (Q * K.transpose()) * scale;
                for (Eigen::Index i = 0; i < T; ++i) {
                    const S mx = P.row(i).head(i + 1).maxCoeff();
                    S sum = 0;
                    for (Eigen::Index j = 0; j <= i; ++j) {
                        const S e = std::exp(P(i, j) - mx);
                        P(i, j) = e;
                        sum += e;
                    }
                    P.row(i).head(i + 1) /= sum;
                    P.row(i).tail(T - i - 1).setZero();
                }
                L.att.block(off, h * dh, T, dh).noalias() = P * V;
            }
        }
        L.x_mid.noalias() = L.att * params[params.layer(l, P::Wo)];
        add_bias(L.x_mid, params[params.layer(l, P::Bo)]);
        L.x_mid += L.x_in;

        layer_norm(L.x_mid, params[params.layer(l, P::Ln2Gain)], params[params.layer(l, P::Ln2Bias)], L.xhat2, L.rstd2,
                   L.h2);
        L.u.noalias() = L.h2 * params[params.layer(l, P::Wfc)];
        add_bias(L.u, params[params.layer(l, P::Bfc)]);
        L.z = L.u.unaryExpr([](S v) { return gelu(v); });
        L.x_out.noalias() = L.z * params[params.layer(l, P::Wproj)];
        add_bias(L.x_out, params[params.layer(l, P::Bproj)]);
        L.x_out += L.x_mid;
        x = L.x_out;
    }

    layer_norm(x, params[params.lnf_gain()], params[params.lnf_bias()], xhatf_, rstdf_, hf_);
    logprobs_.noalias() = hf_ * params[params.w_out()];
    add_bias(logprobs_, params[params.b_out()]);
    for (Eigen::Index r = 0; r < logprobs_.rows(); ++r) {
        const S mx = logprobs_.row(r).maxCoeff();
        const S lse = mx + std::log((logprobs_.row(r).array() - mx).exp().sum());
        logprobs_.row(r).array() -= lse;
    }
    hidden_seeds_.resize(static_cast<std::size_t>(c.n_layers));
}

template <class S>
S ForwardPass<S>::target_logprob(std::size_t seq, std::size_t pos) const {
    if (pos == 0 || pos >= seqs_[seq].size()) throw ValidationError("target position out of range");
    return logprobs_(static_cast<Eigen::Index>(row(seq, pos - 1)), seqs_[seq][pos]);
}

template <class S>
void ForwardPass<S>::seed_target(std::size_t seq, std::size_t pos, S coeff) {
    if (pos == 0 || pos >= seqs_[seq].size()) throw ValidationError("target position out of range");
    target_seeds_.push_back({row(seq, pos - 1), seqs_[seq][pos], coeff});
    seeded_ = true;
}

template <class S>
void ForwardPass<S>::seed_hidden(int layer, std::size_t seq, std::size_t pos,
                                 const Eigen::Ref<const Eigen::Matrix<S, 1, Eigen::Dynamic>>& g) {
    if (layer < 0 || layer >= params_.config.n_layers) throw ValidationError("layer index out of range");
    auto& m = hidden_seeds_[static_cast<std::size_t>(layer)];
    if (m.size() == 0) m = Matrix<S>::Zero(static_cast<Eigen::Index>(rows_), params_.config.d_model);
    m.row(static_cast<Eigen::Index>(row(seq, pos))) += g;
    seeded_ = true;
}

template <class S>
void ForwardPass<S>::backward(Parameters<S>& g) const {
    if (!seeded_) return;
    using P = Parameters<S>;
    const auto& params = params_;
    const auto& c = params.config;
    const int d = c.d_model;
    const int dh = c.head_dim();
    const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
    const auto n = static_cast<Eigen::Index>(rows_);

    int top = -1;
    Matrix<S> dx;
    if (!target_seeds_.empty()) {
        Matrix<S> dlogits = Matrix<S>::Zero(n, c.vocab_size);
        // d logp[target] / d logits = onehot(target) - softmax
        for (const auto& seed : target_seeds_) {
            const auto ri = static_cast<Eigen::Index>(seed.row);
            dlogits.row(ri) -= seed.coeff * logprobs_.row(ri).array().exp().matrix();
            dlogits(ri, seed.target) += seed.coeff;
        }
        g[g.w_out()].noalias() += hf_.transpose() * dlogits;
        g[g.b_out()].row(0) += dlogits.colwise().sum();
        Matrix<S> dhf = dlogits * params[params.w_out()].transpose();
        dx = layer_norm_backward(dhf, xhatf_, rstdf_, params[params.lnf_gain()], g[g.lnf_gain()], g[g.lnf_bias()]);
        top = c.n_layers - 1;
    }
    for (int l = c.n_layers - 1; l >= 0; --l) {
        if (hidden_seeds_[static_cast<std::size_t>(l)].size() != 0) {
            if (top < 0) {
                top = l;
                dx = Matrix<S>::Zero(n, d);
            }
            break;
        }
    }
    if (top < 0) return;
    if (const auto& hs = hidden_seeds_[static_cast<std::size_t>(top)]; hs.size() != 0) dx += hs;

    for (int l = top; l >= 0; --l) {
        const auto& L = layers_[static_cast<std::size_t>(l)];

        // MLP branch.
        g[g.layer(l, P::Wproj)].noalias() += L.z.transpose() * dx;
        g[g.layer(l, P::Bproj)].row(0) += dx.colwise().sum();
        Matrix<S> du = dx * params[params.layer(l, P::Wproj)].transpose();
        du.array() *= L.u.unaryExpr([](S v) { return gelu_grad(v); }).array();
        g[g.layer(l, P::Wfc)].noalias() += L.h2.transpose() * du;
        g[g.layer(l, P::Bfc)].row(0) += du.colwise().sum();
        Matrix<S> dh2 = du * params[params.layer(l, P::Wfc)].transpose();
        Matrix<S> dx_mid = dx + layer_norm_backward(dh2, L.xhat2, L.rstd2, params[params.layer(l, P::Ln2Gain)],
                                                    g[g.layer(l, P::Ln2Gain)], g[g.layer(l, P::Ln2Bias)]);

        // Attention branch.
        g[g.layer(l, P::Wo)].noalias() += L.att.transpose() * dx_mid;
        g[g.layer(l, P::Bo)].row(0) += dx_mid.colwise().sum();
        Matrix<S> datt = dx_mid * params[params.layer(l, P::Wo)].transpose();
        Matrix<S> dqkv = Matrix<S>::Zero(n, 3 * d);
        for (std::size_t s = 0; s < seqs_.size(); ++s) {
            const auto off = static_cast<Eigen::Index>(offsets_[s]);
            const auto T = static_cast<Eigen::Index>(seqs_[s].size());
            for (int h = 0; h < c.n_heads; ++h) {
                const Matrix<S>& Pm = L.probs[s * static_cast<std::size_t>(c.n_heads) + static_cast<std::size_t>(h)];
                auto Q = L.qkv.block(off, h * dh, T, dh);
                auto K = L.qkv.block(off, d + h * dh, T, dh);
                auto V = L.qkv.block(off, 2 * d + h * dh, T, dh);
                auto dO = datt.block(off, h * dh, T, dh);
                Matrix<S> dP = dO * V.transpose();
                dqkv.block(off, 2 * d + h * dh, T, dh).noalias() += Pm.transpose() * dO;
                Eigen::Matrix<S, Eigen::Dynamic, 1> rowdot = dP.cwiseProduct(Pm).rowwise().sum();
                Matrix<S> dS = (Pm.array() * (dP.array().colwise() - rowdot.array())).matrix() * scale;
                dqkv.block(off, h * dh, T, dh).noalias() += dS * K;
                dqkv.block(off, d + h * dh, T, dh).noalias() += dS.transpose() * Q;
            }
        }
        g[g.layer(l, P::Wqkv)].noalias() += L.h1.transpose() * dqkv;
        g[g.layer(l, P::Bqkv)].row(0) += dqkv.colwise().sum();
        Matrix<S> dh1 = dqkv * params[params.layer(l, P::Wqkv)].transpose();
        dx = dx_mid + layer_norm_backward(dh1, L.xhat1, L.rstd1, params[params.layer(l, P::Ln1Gain)],
                                          g[g.layer(l, P::Ln1Gain)], g[g.layer(l, P::Ln1Bias)]);
        if (l > 0) {
            if (const auto& hs = hidden_seeds_[static_cast<std::size_t>(l - 1)]; hs.size() != 0) dx += hs;
        }
    }

    auto& gtok = g[P::kTokEmb];
    auto& gpos = g[P::kPosEmb];
    for (std::size_t s = 0; s < seqs_.size(); ++s) {
        for (std::size_t t = 0; t < seqs_[s].size(); ++t) {
            const auto r = static_cast<Eigen::Index>(offsets_[s] + t);
            gtok.row(seqs_[s][t]) += dx.row(r);
            gpos.row(static_cast<Eigen::Index>(t)) += dx.row(r);
        }
    }
}

template <class S>
ForwardPass<S>& Tape<S>::run(std::vector<std::vector<TokenId>> sequences) {
    passes_.push_back(std::make_unique<ForwardPass<S>>(params_, std::move(sequences)));
    return *passes_.back();
}

template <class S>
Parameters<S> Tape<S>::backward() const {
    Parameters<S> g = params_.zeros_like();
    for (const auto& p : passes_) p->backward(g);
    return g;
}

// ------------------------------------------------------------------- queries

template <class S>
Matrix<S> forward_logprobs(const Parameters<S>& params, std::span<const TokenId> token_ids) {
    ForwardPass<S> pass(params, {std::vector<TokenId>(token_ids.begin(), token_ids.end())});
    return pass.logprobs();
}

template <class S>
Matrix<S> hidden_state(const Parameters<S>& params, std::span<const TokenId> token_ids, int layer_index) {
    if (layer_index < 0 || layer_index >= params.config.n_layers) {
        throw ValidationError("layer index " + std::to_string(layer_index) + " out of range");
    }
    ForwardPass<S> pass(params, {std::vector<TokenId>(token_ids.begin(), token_ids.end())});
    return pass.hidden(layer_index);
}

template <class S>
SequenceLogprob<S> sequence_logprob(const Parameters<S>& params, const tok::RenderedExample& rendered,
                                    tok::RoleSet roles) {
    ForwardPass<S> pass(params, {rendered.token_ids});
    SequenceLogprob<S> out;
    for (std::size_t t = 1; t < rendered.size(); ++t) {
        if (!(roles & tok::role_bit(rendered.roles[t]))) continue;
        const S lp = pass.target_logprob(0, t);
        out.per_token.push_back(lp);
        out.positions.push_back(t);
        out.total += lp;
    }
    if (out.positions.empty()) throw ValidationError("role filter selects no positions");
    return out;
}

namespace {

template <class Row>
TokenId argmax_lowest(const Row& row) {
    TokenId best = 0;
    for (Eigen::Index j = 1; j < row.size(); ++j) {
        if (row(j) > row(best)) best = static_cast<TokenId>(j);
    }
    return best;
}

}  // namespace

template <class S>
std::vector<std::vector<TokenId>> greedy_decode_batch(const Parameters<S>& params,
                                                      const std::vector<std::vector<TokenId>>& prompts, int max_new,
                                                      TokenId stop_token) {
    std::vector<std::vector<TokenId>> seqs = prompts;
    std::vector<std::vector<TokenId>> out(prompts.size());
    std::vector<std::size_t> active;
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        if (prompts[i].empty()) throw ValidationError("empty prompt");
        if (static_cast<int>(prompts[i].size()) > params.config.context_len) {
            throw ValidationError("prompt exceeds context_len");
        }
        if (max_new > 0) active.push_back(i);
    }
    for (int step = 0; step < max_new && !active.empty(); ++step) {
        std::vector<std::vector<TokenId>> batch;
        batch.reserve(active.size());
        for (auto i : active) batch.push_back(seqs[i]);
        ForwardPass<S> pass(params, std::move(batch));
        std::vector<std::size_t> still;
        for (std::size_t k = 0; k < active.size(); ++k) {
            const auto i = active[k];
            const TokenId next = argmax_lowest(pass.next_logprobs(k, seqs[i].size() - 1));
            out[i].push_back(next);
            seqs[i].push_back(next);
            if (next != stop_token && static_cast<int>(seqs[i].size()) < params.config.context_len) still.push_back(i);
        }
        active = std::move(still);
    }
    return out;
}

template <class S>
std::vector<TokenId> greedy_decode(const Parameters<S>& params, std::span<const TokenId> prompt, int max_new,
                                   TokenId stop_token) {
    return greedy_decode_batch(params, {std::vector<TokenId>(prompt.begin(), prompt.end())}, max_new, stop_token)
        .front();
}

// ----------------------------------------------------------------- optimizer

double lr_at(std::int64_t step, const AdamWHyper& hyper) {
    if (hyper.warmup_steps <= 0) return hyper.lr;
    const double frac = static_cast<double>(step + 1) / static_cast<double>(hyper.warmup_steps);
    return hyper.lr * std::min(1.0, frac);
}

template <class S>
OptimizerState<S> OptimizerState<S>::fresh(const Parameters<S>& params, const AdamWHyper& hyper) {
    return {0, params.zeros_like(), params.zeros_like(), hyper};
}

template <class S>
void adamw_step(Parameters<S>& params, const Parameters<S>& grads, OptimizerState<S>& state) {
    if (grads.tensors.size() != params.tensors.size() || state.first_moment.tensors.size() != params.tensors.size()) {
        throw ValidationError("optimizer state does not match parameters");
    }
    if (!grads.all_finite()) throw RuntimeFailure("non-finite gradient at optimizer step " + std::to_string(state.step));
    const auto& h = state.hyper;
    const double lr = lr_at(state.step, h);
    const double t = static_cast<double>(state.step + 1);
    const double bc1 = 1.0 - std::pow(h.beta1, t);
    const double bc2 = 1.0 - std::pow(h.beta2, t);
    const S b1 = static_cast<S>(h.beta1), b2 = static_cast<S>(h.beta2);
    for (std::size_t i = 0; i < params.tensors.size(); ++i) {
        auto& theta = params.tensors[i];
        const auto& gi = grads.tensors[i];
        auto& m = state.first_moment.tensors[i];
        auto& v = state.second_moment.tensors[i];
        if (gi.rows() != theta.rows() || gi.cols() != theta.cols() || m.rows() != theta.rows() || m.cols() != theta.cols()) {
            throw ValidationError("shape mismatch in optimizer step for " + params.names[i]);
        }
        for (Eigen::Index k = 0; k < theta.size(); ++k) {
            S& mk = m.data()[k];
            S& vk = v.data()[k];
            const S gk = gi.data()[k];
            mk = b1 * mk + (S(1) - b1) * gk;
            vk = b2 * vk + (S(1) - b2) * gk * gk;
            const double mhat = static_cast<double>(mk) / bc1;
            const double vhat = static_cast<double>(vk) / bc2;
            const double th = static_cast<double>(theta.data()[k]);
            theta.data()[k] = static_cast<S>(th - lr * (mhat / (std::sqrt(vhat) + h.eps) + h.weight_decay * th));
        }
    }
    ++state.step;
}

// ---------------------------------------------------------------- checkpoint

namespace {

constexpr char kMagic[8] = {'F', 'R', 'U', 'L', 'C', 'K', 'P', '1'};

template <class S>
constexpr const char* dtype_name() {
    return sizeof(S) == 8 ? "f64" : "f32";
}

json config_to_json(const ModelConfig& c) {
    return {{"n_layers", c.n_layers}, {"n_heads", c.n_heads},       {"d_model", c.d_model},
            {"d_ff", c.d_ff},         {"context_len", c.context_len}, {"vocab_size", c.vocab_size},
            {"init_seed", c.init_seed}};
}

ModelConfig config_from_json(const json& j) {
    ModelConfig c;
    c.n_layers = j.at("n_layers").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.d_ff = j.at("d_ff").get<int>();
    c.context_len = j.at("context_len").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.init_seed = j.at("init_seed").get<std::uint64_t>();
    return c;
}

json hyper_to_json(const AdamWHyper& h) {
    return {{"lr", h.lr},   {"beta1", h.beta1},        {"beta2", h.beta2},
            {"eps", h.eps}, {"weight_decay", h.weight_decay}, {"warmup_steps", h.warmup_steps}};
}

AdamWHyper hyper_from_json(const json& j) {
    AdamWHyper h;
    h.lr = j.at("lr").get<double>();
    h.beta1 = j.at("beta1").get<double>();
    h.beta2 = j.at("beta2").get<double>();
    h.eps = j.at("eps").get<double>();
    h.weight_decay = j.at("weight_decay").get<double>();
    h.warmup_steps = j.at("warmup_steps").get<int>();
    return h;
}

}  // namespace

template <class S>
std::string serialize_checkpoint(const Parameters<S>& params, const OptimizerState<S>* state,
                                 const CheckpointMeta& meta) {
    std::vector<std::pair<std::string, const Matrix<S>*>> entries;
    for (std::size_t i = 0; i < params.tensors.size(); ++i) entries.push_back({params.names[i], &params.tensors[i]});
    if (state != nullptr) {
        for (std::size_t i = 0; i < params.tensors.size(); ++i) {
            entries.push_back({"adam.m/" + params.names[i], &state->first_moment.tensors[i]});
        }
        for (std::size_t i = 0; i < params.tensors.size(); ++i) {
            entries.push_back({"adam.v/" + params.names[i], &state->second_moment.tensors[i]});
        }
    }

    json manifest = json::array();
    std::string payload;
    for (const auto& [name, t] : entries) {
        manifest.push_back({{"name", name},
                            {"shape", {t->rows(), t->cols()}},
                            {"dtype", dtype_name<S>()},
                            {"byte_offset", payload.size()}});
        payload.append(reinterpret_cast<const char*>(t->data()), static_cast<std::size_t>(t->size()) * sizeof(S));
    }

    json header = {{"version", kCheckpointVersion},
                   {"config", config_to_json(params.config)},
                   {"meta", {{"vocab_fingerprint", meta.vocab_fingerprint}, {"label", meta.label}}},
                   {"tensors", manifest}};
    header["optimizer"] = state ? json{{"step", state->step}, {"hyper", hyper_to_json(state->hyper)}} : json(nullptr);

    std::string out(kMagic, sizeof(kMagic));
    out += header.dump();
    out += '\n';
    out += payload;
    const uLong crc = crc32(crc32(0L, Z_NULL, 0), reinterpret_cast<const Bytef*>(payload.data()),
                            static_cast<uInt>(payload.size()));
    const auto crc32v = static_cast<std::uint32_t>(crc);
    out.append(reinterpret_cast<const char*>(&crc32v), 4);
    return out;
}

template <class S>
void save_checkpoint(const Parameters<S>& params, const OptimizerState<S>* state, const CheckpointMeta& meta,
                     const std::filesystem::path& path) {
    write_file_atomic(path, serialize_checkpoint(params, state, meta));
}

template <class S>
Checkpoint<S> parse_checkpoint(std::string_view bytes, const ModelConfig* expected) {
    if (bytes.size() < sizeof(kMagic) + 5 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
        throw ValidationError("not a checkpoint (bad magic)");
    }
    const auto nl = bytes.find('\n', sizeof(kMagic));
    if (nl == std::string_view::npos) throw ValidationError("checkpoint header is unterminated");
    json header;
    try {
        header = json::parse(bytes.substr(sizeof(kMagic), nl - sizeof(kMagic)));
    } catch (const json::exception& e) {
        throw ValidationError(std::string("malformed checkpoint header: ") + e.what());
    }
    const int version = header.value("version", -1);
    if (version != kCheckpointVersion) {
        throw ValidationError("checkpoint version mismatch: file has " + std::to_string(version) + ", expected " +
                              std::to_string(kCheckpointVersion));
    }

    const std::string_view payload = bytes.substr(nl + 1, bytes.size() - (nl + 1) - 4);
    std::uint32_t stored_crc = 0;
    std::memcpy(&stored_crc, bytes.data() + bytes.size() - 4, 4);
    const auto crc = static_cast<std::uint32_t>(crc32(crc32(0L, Z_NULL, 0), reinterpret_cast<const Bytef*>(payload.data()),
                                                      static_cast<uInt>(payload.size())));
    if (crc != stored_crc) throw ValidationError("checkpoint checksum failure");

    Checkpoint<S> ck;
    ModelConfig config;
    try {
        config = config_from_json(header.at("config"));
        ck.meta.vocab_fingerprint = header.at("meta").value("vocab_fingerprint", "");
        ck.meta.label = header.at("meta").value("label", "");
    } catch (const json::exception& e) {
        throw ValidationError(std::string("malformed checkpoint config: ") + e.what());
    }
    config.validate();
    if (expected != nullptr && !(*expected == config)) {
        auto dump = [](const ModelConfig& c) { return config_to_json(c).dump(); };
        throw ValidationError("checkpoint shape mismatch: stored config " + dump(config) + " vs expected " +
                              dump(*expected));
    }

    const auto layout = tensor_layout(config);
    std::unordered_map<std::string, Matrix<S>> found;
    for (const auto& entry : header.at("tensors")) {
        const auto name = entry.at("name").get<std::string>();
        const auto shape = entry.at("shape").get<std::vector<long>>();
        const auto dtype = entry.at("dtype").get<std::string>();
        const auto offset = entry.at("byte_offset").get<std::size_t>();
        if (shape.size() != 2) throw ValidationError("tensor " + name + " is not rank 2");
        const std::size_t elem = dtype == "f64" ? 8 : dtype == "f32" ? 4 : 0;
        if (elem == 0) throw ValidationError("unsupported dtype " + dtype);
        const std::size_t count = static_cast<std::size_t>(shape[0] * shape[1]);
        if (offset + count * elem > payload.size()) throw ValidationError("tensor " + name + " exceeds payload");
        Matrix<S> t(shape[0], shape[1]);
        const char* src = payload.data() + offset;
        for (std::size_t k = 0; k < count; ++k) {
            if (elem == 8) {
                double v;
                std::memcpy(&v, src + k * 8, 8);
                t.data()[k] = static_cast<S>(v);
            } else {
                float v;
                std::memcpy(&v, src + k * 4, 4);
                t.data()[k] = static_cast<S>(v);
            }
        }
        found.emplace(name, std::move(t));
    }

    auto take = [&](const std::string& name, int rows, int cols) {
        auto it = found.find(name);
        if (it == found.end()) throw ValidationError("checkpoint is missing tensor " + name);
        if (it->second.rows() != rows || it->second.cols() != cols) {
            throw ValidationError("checkpoint shape mismatch for " + name);
        }
        return std::move(it->second);
    };

    ck.params.config = config;
    for (const auto& [name, shape] : layout) {
        ck.params.names.push_back(name);
        ck.params.tensors.push_back(take(name, shape.first, shape.second));
    }
    if (!header.at("optimizer").is_null()) {
        OptimizerState<S> st;
        st.step = header["optimizer"].at("step").get<std::int64_t>();
        st.hyper = hyper_from_json(header["optimizer"].at("hyper"));
        st.first_moment = ck.params.zeros_like();
        st.second_moment = ck.params.zeros_like();
        for (std::size_t i = 0; i < layout.size(); ++i) {
            const auto& [name, shape] = layout[i];
            st.first_moment.tensors[i] = take("adam.m/" + name, shape.first, shape.second);
            st.second_moment.tensors[i] = take("adam.v/" + name, shape.first, shape.second);
        }
        ck.optimizer = std::move(st);
    }
    return ck;
}

template <class S>
Checkpoint<S> load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected) {
    const std::string bytes = read_file(path);
    try {
        return parse_checkpoint<S>(bytes, expected);
    } catch (const ValidationError& e) {
        throw ValidationError(path.string() + ": " + e.what());
    }
}

#define FRUL_INSTANTIATE_MODEL(S)                                                                                   \
    template struct Parameters<S>;                                                                                  \
    template Parameters<S> init_model<S>(const ModelConfig&);                                                       \
    template class ForwardPass<S>;                                                                                  \
    template class Tape<S>;                                                                                         \
    template Matrix<S> forward_logprobs<S>(const Parameters<S>&, std::span<const TokenId>);                         \
    template Matrix<S> hidden_state<S>(const Parameters<S>&, std::span<const TokenId>, int);                        \
    template SequenceLogprob<S> sequence_logprob<S>(const Parameters<S>&, const tok::RenderedExample&, tok::RoleSet); \
    template std::vector<TokenId> greedy_decode<S>(const Parameters<S>&, std::span<const TokenId>, int, TokenId);   \
    template std::vector<std::vector<TokenId>> greedy_decode_batch<S>(                                              \
        const Parameters<S>&, const std::vector<std::vector<TokenId>>&, int, TokenId);                              \
    template struct OptimizerState<S>;                                                                              \
    template void adamw_step<S>(Parameters<S>&, const Parameters<S>&, OptimizerState<S>&);                          \
    template std::string serialize_checkpoint<S>(const Parameters<S>&, const OptimizerState<S>*,                    \
                                                 const CheckpointMeta&);                                            \
    template void save_checkpoint<S>(const Parameters<S>&, const OptimizerState<S>*, const CheckpointMeta&,         \
                                     const std::filesystem::path&);                                                 \
    template Checkpoint<S> parse_checkpoint<S>(std::string_view, const ModelConfig*);                               \
    template Checkpoint<S> load_checkpoint<S>(const std::filesystem::path&, const ModelConfig*);

FRUL_INSTANTIATE_MODEL(float)
FRUL_INSTANTIATE_MODEL(double)

#undef FRUL_INSTANTIATE_MODEL

}  // namespace frul::model
