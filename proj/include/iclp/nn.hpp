#pragma once

#include <map>
#include <string>
#include <vector>

#include "iclp/graph.hpp"
#include "iclp/params.hpp"
#include "iclp/rng.hpp"

namespace iclp {

struct TransformerConfig {
    int layers = 2;
    int heads = 4;
    int d_model = 64;
    int max_seq = 64;
    bool causal = false;
    double dropout = 0.0;

    int d_ff() const { return 4 * d_model; }
    int head_dim() const { return d_model / heads; }

    void validate() const {
        if (layers < 1 || heads < 1 || d_model < 1 || max_seq < 1)
            throw std::invalid_argument("transformer config: dims must be positive");
        if (d_model % heads != 0)
            throw std::invalid_argument("transformer config: d_model not divisible by heads");
    }
};

// ---- initialization ----

template <typename T>
Tensor<T> gaussian_init(std::vector<int> shape, Rng& rng, double std_dev = 0.02) {
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data) v = static_cast<T>(std_dev * rng.next_gaussian());
    return t;
}

template <typename T>
void init_transformer_params(ModuleParams<T>& params, const std::string& prefix,
                             const TransformerConfig& cfg, Rng& rng) {
    cfg.validate();
    int d = cfg.d_model;
    params.add(prefix + ".pos_emb", gaussian_init<T>({cfg.max_seq, d}, rng));
    for (int l = 0; l < cfg.layers; ++l) {
        std::string p = prefix + ".l" + std::to_string(l);
        auto ones = Tensor<T>({d});
        for (auto& v : ones.data) v = T(1);
        params.add(p + ".ln1.g", ones);
        params.add(p + ".ln1.b", Tensor<T>({d}));
        params.add(p + ".attn.wq", gaussian_init<T>({d, d}, rng));
        params.add(p + ".attn.wk", gaussian_init<T>({d, d}, rng));
        params.add(p + ".attn.wv", gaussian_init<T>({d, d}, rng));
        params.add(p + ".attn.wo", gaussian_init<T>({d, d}, rng));
        params.add(p + ".attn.bq", Tensor<T>({d}));
        params.add(p + ".attn.bk", Tensor<T>({d}));
        params.add(p + ".attn.bv", Tensor<T>({d}));
        params.add(p + ".attn.bo", Tensor<T>({d}));
        params.add(p + ".ln2.g", ones);
        params.add(p + ".ln2.b", Tensor<T>({d}));
        params.add(p + ".mlp.w1", gaussian_init<T>({d, cfg.d_ff()}, rng));
        params.add(p + ".mlp.b1", Tensor<T>({cfg.d_ff()}));
        params.add(p + ".mlp.w2", gaussian_init<T>({cfg.d_ff(), d}, rng));
        params.add(p + ".mlp.b2", Tensor<T>({d}));
    }
    auto ones = Tensor<T>({d});
    for (auto& v : ones.data) v = T(1);
    params.add(prefix + ".lnf.g", ones);
    params.add(prefix + ".lnf.b", Tensor<T>({d}));
}

// ---- graph binding ----

// Inserts every parameter as a leaf on the tape once per forward build.
template <typename T>
class BoundParams {
public:
    BoundParams(Tape<T>& tape, const ModuleParams<T>& params) : tape_(&tape) {
        for (const auto& [name, t] : params) refs_.emplace(name, tape.leaf(t));
    }

    typename Tape<T>::Ref operator()(const std::string& name) const {
        auto it = refs_.find(name);
        if (it == refs_.end()) throw std::out_of_range("unbound parameter: " + name);
        return it->second;
    }
    bool contains(const std::string& name) const { return refs_.count(name) > 0; }
    const std::map<std::string, typename Tape<T>::Ref>& refs() const { return refs_; }

private:
    Tape<T>* tape_;
    std::map<std::string, typename Tape<T>::Ref> refs_;
};

// Gradients per named parameter after tape.backward(). Parameters not on the
// recorded graph come back as zeros rather than an error.
template <typename T>
GradMap<T> collect_gradients(const Tape<T>& tape, const BoundParams<T>& bound,
                             const ModuleParams<T>& params) {
    GradMap<T> out;
    for (const auto& [name, p] : params) {
        const auto& g = tape.grad(bound(name));
        out.emplace(name, g.data.empty() ? Tensor<T>(p.shape) : g);
    }
    return out;
}

template <typename T>
typename Tape<T>::Ref linear(Tape<T>& t, typename Tape<T>::Ref x, const BoundParams<T>& b,
                             const std::string& prefix) {
    return t.add_rowvec(t.matmul(x, b(prefix + ".w")), b(prefix + ".b"));
}

// additive attention mask: 0 everywhere, -1e9 above the diagonal when causal
template <typename T>
Tensor<T> attention_mask(int seq, bool causal) {
    Tensor<T> m({seq, seq});
    if (causal)
        for (int r = 0; r < seq; ++r)
            for (int c = r + 1; c < seq; ++c) m.at(r, c) = static_cast<T>(-1e9);
    return m;
}

template <typename T>
typename Tape<T>::Ref multi_head_attention(Tape<T>& t, typename Tape<T>::Ref x,
                                           const BoundParams<T>& b, const std::string& p,
                                           const TransformerConfig& cfg,
                                           const Tensor<T>& mask) {
    using Ref = typename Tape<T>::Ref;
    Ref q = t.add_rowvec(t.matmul(x, b(p + ".wq")), b(p + ".bq"));
    Ref k = t.add_rowvec(t.matmul(x, b(p + ".wk")), b(p + ".bk"));
    Ref v = t.add_rowvec(t.matmul(x, b(p + ".wv")), b(p + ".bv"));
    int hd = cfg.head_dim();
    T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));
    std::vector<Ref> heads;
    heads.reserve(static_cast<size_t>(cfg.heads));
    for (int h = 0; h < cfg.heads; ++h) {
        Ref qh = t.slice_cols(q, h * hd, hd);
        Ref kh = t.slice_cols(k, h * hd, hd);
        Ref vh = t.slice_cols(v, h * hd, hd);
        Ref scores = t.scale(t.matmul(qh, t.transpose(kh)), inv_sqrt);
        Ref probs = t.softmax_rows(scores, &mask);
        heads.push_back(t.matmul(probs, vh));
    }
    Ref cat = cfg.heads == 1 ? heads[0] : t.concat_cols(heads);
    return t.add_rowvec(t.matmul(cat, b(p + ".wo")), b(p + ".bo"));
}

// Pre-norm block stack over already-embedded input rows (S x d_model).
// Returns final-layer-norm output, same shape.
template <typename T>
typename Tape<T>::Ref transformer_stack(Tape<T>& t, typename Tape<T>::Ref x,
                                        const BoundParams<T>& b, const std::string& prefix,
                                        const TransformerConfig& cfg, Rng* dropout_rng = nullptr) {
    using Ref = typename Tape<T>::Ref;
    int seq = t.value(x).rows();
    if (seq > cfg.max_seq) throw std::invalid_argument("sequence exceeds max_seq");
    Tensor<T> mask = attention_mask<T>(seq, cfg.causal);
    bool drop = cfg.dropout > 0.0 && dropout_rng != nullptr;
    for (int l = 0; l < cfg.layers; ++l) {
        std::string p = prefix + ".l" + std::to_string(l);
        Ref h = t.layer_norm(x, b(p + ".ln1.g"), b(p + ".ln1.b"));
        Ref a = multi_head_attention(t, h, b, p + ".attn", cfg, mask);
        if (drop) a = t.dropout(a, cfg.dropout, *dropout_rng);
        x = t.add(x, a);
        Ref h2 = t.layer_norm(x, b(p + ".ln2.g"), b(p + ".ln2.b"));
        Ref m = t.add_rowvec(t.matmul(h2, b(p + ".mlp.w1")), b(p + ".mlp.b1"));
        m = t.gelu(m);
        m = t.add_rowvec(t.matmul(m, b(p + ".mlp.w2")), b(p + ".mlp.b2"));
        if (drop) m = t.dropout(m, cfg.dropout, *dropout_rng);
        x = t.add(x, m);
    }
    return t.layer_norm(x, b(prefix + ".lnf.g"), b(prefix + ".lnf.b"));
}

// token embeddings + learned positional embeddings for a given id sequence;
// the token rows are supplied by the caller (codec prepends memory slots etc.)
template <typename T>
typename Tape<T>::Ref add_positions(Tape<T>& t, typename Tape<T>::Ref rows,
                                    const BoundParams<T>& b, const std::string& prefix) {
    int seq = t.value(rows).rows();
    std::vector<int> pos(static_cast<size_t>(seq));
    for (int i = 0; i < seq; ++i) pos[static_cast<size_t>(i)] = i;
    return t.add(rows, t.gather_rows(b(prefix + ".pos_emb"), pos));
}

}  // namespace iclp
