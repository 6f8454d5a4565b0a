#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "iclp/checkpoint.hpp"
#include "iclp/latentize.hpp"
#include "iclp/nn.hpp"
#include "iclp/optim.hpp"

namespace iclp {

struct LMConfig {
    int layers = 4;
    int heads = 4;
    int d_model = 128;
    int context = 256;
    int vocab = 0;  // set from the (extended) vocabulary
    double dropout = 0.0;
    bool tied_head = true;

    TransformerConfig tf() const { return {layers, heads, d_model, context, true, dropout}; }

    void validate() const {
        tf().validate();
        if (vocab < kNumReserved) throw std::invalid_argument("LMConfig: vocab too small");
    }

    nlohmann::json to_json() const {
        return {{"layers", layers},     {"heads", heads},     {"d_model", d_model},
                {"context", context},   {"vocab", vocab},     {"dropout", dropout},
                {"tied_head", tied_head}};
    }
    static LMConfig from_json(const nlohmann::json& j) {
        LMConfig c;
        c.layers = j.at("layers").get<int>();
        c.heads = j.at("heads").get<int>();
        c.d_model = j.at("d_model").get<int>();
        c.context = j.at("context").get<int>();
        c.vocab = j.at("vocab").get<int>();
        c.dropout = j.at("dropout").get<double>();
        c.tied_head = j.at("tied_head").get<bool>();
        c.validate();
        return c;
    }
};

// Closed-form parameter count for the builder below; kept in sync by test.
inline int64_t lm_param_count(const LMConfig& cfg) {
    int64_t d = cfg.d_model, dff = 4 * d;
    int64_t per_layer = 4 * (d * d + d)        // wq/wk/wv/wo + biases
                        + 2 * (2 * d)          // ln1, ln2
                        + d * dff + dff        // mlp.w1 + b1
                        + dff * d + d;         // mlp.w2 + b2
    int64_t total = int64_t(cfg.vocab) * d     // token embedding
                    + int64_t(cfg.context) * d // positions
                    + cfg.layers * per_layer + 2 * d;  // final layer norm
    if (!cfg.tied_head) total += int64_t(cfg.vocab) * d;
    return total;
}

template <typename T>
void init_lm_params(ModuleParams<T>& params, const LMConfig& cfg, Rng& rng) {
    cfg.validate();
    params.add("tok_emb", gaussian_init<T>({cfg.vocab, cfg.d_model}, rng, 0.02));
    init_transformer_params(params, "lm", cfg.tf(), rng);
    if (!cfg.tied_head)
        params.add("head.w", gaussian_init<T>({cfg.d_model, cfg.vocab}, rng, 0.02));
}

// Rows at and above `base_vocab` start at the mean of the base rows plus small
// noise, so fresh latent tokens begin in-distribution rather than at random.
template <typename T>
void init_extended_embeddings(ModuleParams<T>& params, int base_vocab, Rng& rng,
                              double noise = 0.01) {
    auto& emb = params.at("tok_emb");
    if (base_vocab <= 0 || base_vocab >= emb.rows()) return;
    int d = emb.cols();
    std::vector<double> mean(static_cast<size_t>(d), 0.0);
    for (int r = 0; r < base_vocab; ++r)
        for (int c = 0; c < d; ++c) mean[static_cast<size_t>(c)] += emb.at(r, c);
    for (auto& m : mean) m /= base_vocab;
    for (int r = base_vocab; r < emb.rows(); ++r)
        for (int c = 0; c < d; ++c)
            emb.at(r, c) =
                static_cast<T>(mean[static_cast<size_t>(c)] + noise * rng.next_gaussian());
}

template <typename T>
typename Tape<T>::Ref build_lm_logits(Tape<T>& t, const BoundParams<T>& b, const LMConfig& cfg,
                                      const std::vector<int>& ids, Rng* dropout_rng = nullptr) {
    if (ids.empty()) throw std::invalid_argument("build_lm_logits: empty sequence");
    if (static_cast<int>(ids.size()) > cfg.context)
        throw std::invalid_argument("sequence of " + std::to_string(ids.size()) +
                                    " tokens exceeds context " + std::to_string(cfg.context));
    using Ref = typename Tape<T>::Ref;
    Ref rows = t.gather_rows(b("tok_emb"), ids);
    rows = add_positions(t, rows, b, "lm");
    Ref h = transformer_stack(t, rows, b, "lm", cfg.tf(), dropout_rng);
    Ref head = cfg.tied_head ? t.transpose(b("tok_emb")) : b("head.w");
    return t.matmul(h, head);
}

// Mean next-token cross-entropy over assistant positions only. The model sees
// [<bos>, user, assistant]; position t carries loss iff token t+1 is masked in.
template <typename T>
typename Tape<T>::Ref build_completion_loss(Tape<T>& t, const BoundParams<T>& b,
                                            const LMConfig& cfg, const TrainingRecord& rec,
                                            Rng* dropout_rng = nullptr) {
    std::vector<int> ids;
    ids.push_back(kBos);
    for (int id : rec.user_ids) ids.push_back(id);
    for (int id : rec.assistant_ids) ids.push_back(id);
    int S = static_cast<int>(ids.size());
    std::vector<int> targets(static_cast<size_t>(S), 0);
    std::vector<T> weights(static_cast<size_t>(S), T(0));
    int any = 0;
    for (int p = 0; p + 1 < S; ++p) {
        targets[static_cast<size_t>(p)] = ids[static_cast<size_t>(p) + 1];
        if (rec.mask[static_cast<size_t>(p)] == 1) {  // mask is over ids[1..], shifted by bos
            weights[static_cast<size_t>(p)] = T(1);
            ++any;
        }
    }
    if (any == 0) throw std::invalid_argument("completion_loss: record has no loss positions");
    auto logits = build_lm_logits(t, b, cfg, ids, dropout_rng);
    return t.cross_entropy_rows(logits, targets, weights);
}

struct FinetuneOptions {
    int epochs = 2;       // reference default
    int batch_size = 16;  // reference default
    double lr = 3e-4;
    double lr_floor = 3e-5;
    double weight_decay = 0.01;
    // restrict updates to embedding rows at/above this offset (extended tokens
    // only); < 0 trains everything
    int freeze_except_embeddings_from = -1;
    int eval_records = 64;          // fixed prefix used for per-epoch eval loss
    double divergence_factor = 10;  // abort when eval exceeds factor * initial
    int divergence_patience = 3;    // ... for this many consecutive evals
    bool verbose = false;
};

struct StepLog {
    int step;
    double loss, lr, grad_norm;
};

struct TrainingRunLog {
    uint64_t seed = 0;
    nlohmann::json config;
    std::vector<StepLog> steps;
    std::vector<double> epoch_eval_loss;
    int skipped_steps = 0;
    bool aborted = false;
    std::string abort_reason;

    void to_csv(const std::string& path) const {
        std::ofstream out(path);
        if (!out) throw std::runtime_error("cannot write " + path);
        out << "step,loss,lr,grad_norm\n";
        char buf[160];
        for (const auto& s : steps) {
            std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%.9g\n", s.step, s.loss, s.lr,
                          s.grad_norm);
            out << buf;
        }
    }
};

class LanguageModel {
public:
    LanguageModel(LMConfig cfg, uint64_t seed, int base_vocab = -1) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(seed);
        init_lm_params(params_, cfg_, rng);
        if (base_vocab > 0) init_extended_embeddings(params_, base_vocab, rng);
    }

    const LMConfig& config() const { return cfg_; }
    ModuleParams<float>& params() { return params_; }
    const ModuleParams<float>& params() const { return params_; }

    double record_loss(const TrainingRecord& rec) const {
        Tape<float> t;
        BoundParams<float> b(t, params_);
        return t.value(build_completion_loss(t, b, cfg_, rec)).data[0];
    }

    // value-only forward; returns the final-position logits row
    std::vector<float> next_token_logits(const std::vector<int>& ids) const {
        Tape<float> t;
        BoundParams<float> b(t, params_);
        auto logits = build_lm_logits(t, b, cfg_, ids);
        const auto& v = t.value(logits);
        std::vector<float> row(static_cast<size_t>(v.cols()));
        for (int c = 0; c < v.cols(); ++c) row[static_cast<size_t>(c)] = v.at(v.rows() - 1, c);
        return row;
    }

    void save(const std::string& path, nlohmann::json extra_meta = {}) const {
        nlohmann::json meta = std::move(extra_meta);
        meta["kind"] = "lm";
        meta["lm_config"] = cfg_.to_json();
        save_checkpoint(path, params_, meta);
    }

    static LanguageModel load(const std::string& path) {
        auto ck = load_checkpoint(path);
        if (ck.meta.value("kind", "") != "lm")
            throw std::runtime_error(path + " is not a language-model checkpoint");
        LanguageModel lm(LMConfig::from_json(ck.meta.at("lm_config")), 0);
        lm.params_ = std::move(ck.params);
        return lm;
    }

private:
    LMConfig cfg_;
    ModuleParams<float> params_;
};

inline TrainingRunLog finetune_sft(LanguageModel& lm, const std::vector<TrainingRecord>& records,
                                   const FinetuneOptions& opt, uint64_t seed) {
    if (records.empty()) throw std::invalid_argument("finetune_sft: no records");
    for (const auto& r : records) {
        r.validate();
        if (static_cast<int>(r.user_ids.size() + r.assistant_ids.size()) + 1 > lm.config().context)
            throw std::invalid_argument("record " + r.id + " does not fit the model context");
    }
    TrainingRunLog log;
    log.seed = seed;
    log.config = {{"lm", lm.config().to_json()},
                  {"epochs", opt.epochs},
                  {"batch_size", opt.batch_size},
                  {"lr", opt.lr},
                  {"weight_decay", opt.weight_decay},
                  {"freeze_except_embeddings_from", opt.freeze_except_embeddings_from}};

    int n = static_cast<int>(records.size());
    int steps_per_epoch = (n + opt.batch_size - 1) / opt.batch_size;
    AdamWConfig acfg;
    acfg.lr = opt.lr;
    acfg.lr_floor = opt.lr_floor;
    acfg.weight_decay = opt.weight_decay;
    acfg.total_steps = opt.epochs * steps_per_epoch;
    AdamW<float> optimizer(acfg);

    int n_eval = std::min<int>(opt.eval_records, n);
    auto eval_loss = [&] {
        double s = 0;
        for (int i = 0; i < n_eval; ++i) s += lm.record_loss(records[static_cast<size_t>(i)]);
        return s / n_eval;
    };
    double initial_eval = eval_loss();
    log.epoch_eval_loss.push_back(initial_eval);

    Rng shuffle_rng(seed);
    std::vector<size_t> order(records.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    int step = 0, bad_evals = 0;
    for (int epoch = 0; epoch < opt.epochs && !log.aborted; ++epoch) {
        // Fisher-Yates with our own rng so runs replay exactly
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle_rng.next_below(i)]);
        for (int start = 0; start < n; start += opt.batch_size) {
            int b_end = std::min(n, start + opt.batch_size);
            GradMap<float> acc;
            double loss_sum = 0;
            for (int i = start; i < b_end; ++i) {
                Tape<float> t;
                BoundParams<float> bp(t, lm.params());
                auto loss = build_completion_loss(t, bp, lm.config(), records[order[size_t(i)]]);
                loss_sum += t.value(loss).data[0];
                t.backward(loss);
                auto g = collect_gradients(t, bp, lm.params());
                for (auto& [name, gt] : g) {
                    auto it = acc.find(name);
                    if (it == acc.end())
                        acc.emplace(name, std::move(gt));
                    else
                        it->second += gt;
                }
            }
            int bsz = b_end - start;
            double inv = 1.0 / bsz;
            // Freezing must bypass the optimizer entirely: even a zero gradient
            // would still apply decoupled weight decay. Drop frozen tensors from
            // the gradient map (the optimizer skips absent entries) and put the
            // frozen embedding rows back after the step.
            std::vector<float> frozen_rows;
            if (opt.freeze_except_embeddings_from >= 0) {
                for (auto it = acc.begin(); it != acc.end();)
                    it = (it->first == "tok_emb") ? std::next(it) : acc.erase(it);
                const auto& emb = lm.params().at("tok_emb");
                int nfrozen = std::min(opt.freeze_except_embeddings_from, emb.rows());
                frozen_rows.assign(emb.data.begin(),
                                   emb.data.begin() + int64_t(nfrozen) * emb.cols());
                auto& g = acc.at("tok_emb");
                for (int r = 0; r < nfrozen; ++r)
                    for (int c = 0; c < g.cols(); ++c) g.at(r, c) = 0.0f;
            }
            double norm_sq = 0;
            for (auto& [name, g] : acc) {
                for (auto& x : g.data) x = static_cast<float>(x * inv);
                for (float x : g.data) norm_sq += double(x) * x;
            }
            bool ok = optimizer.step(lm.params(), acc);
            if (!frozen_rows.empty()) {
                auto& emb = lm.params().at("tok_emb");
                std::copy(frozen_rows.begin(), frozen_rows.end(), emb.data.begin());
            }
            if (!ok) ++log.skipped_steps;
            log.steps.push_back(
                {step, loss_sum * inv, cosine_lr(acfg, step), std::sqrt(norm_sq)});
            ++step;
        }
        double ev = eval_loss();
        log.epoch_eval_loss.push_back(ev);
        if (opt.verbose)
            std::cerr << "epoch " << epoch + 1 << " eval_loss " << ev << "\n";
        if (ev > opt.divergence_factor * initial_eval) {
            if (++bad_evals >= opt.divergence_patience) {
                log.aborted = true;
                log.abort_reason = "eval loss " + std::to_string(ev) + " exceeded " +
                                   std::to_string(opt.divergence_factor) + "x the initial " +
                                   std::to_string(initial_eval) + " for " +
                                   std::to_string(bad_evals) + " consecutive evals";
            }
        } else {
            bad_evals = 0;
        }
    }
    return log;
}

// ---- generation ----

struct GenerateOptions {
    double temperature = 0.0;  // 0 = greedy argmax
    int max_new_tokens = 96;
    uint64_t seed = 0;  // used only when temperature > 0
};

struct Generation {
    std::vector<int> ids;  // newly emitted tokens, <eos> excluded
    bool hit_eos = false;
};

inline Generation generate(const LanguageModel& lm, const std::vector<int>& user_ids,
                           const GenerateOptions& opt) {
    std::vector<int> ids;
    ids.push_back(kBos);
    ids.insert(ids.end(), user_ids.begin(), user_ids.end());
    Generation gen;
    Rng rng(opt.seed);
    for (int emitted = 0; emitted < opt.max_new_tokens; ++emitted) {
        if (static_cast<int>(ids.size()) >= lm.config().context) break;
        auto logits = lm.next_token_logits(ids);
        int next;
        if (opt.temperature <= 0.0) {
            next = 0;
            for (size_t c = 1; c < logits.size(); ++c)
                if (logits[c] > logits[static_cast<size_t>(next)]) next = static_cast<int>(c);
        } else {
            double mx = -1e300;
            for (float l : logits) mx = std::max(mx, double(l));
            std::vector<double> probs(logits.size());
            double z = 0;
            for (size_t c = 0; c < logits.size(); ++c) {
                probs[c] = std::exp((double(logits[c]) - mx) / opt.temperature);
                z += probs[c];
            }
            double u = rng.next_double() * z, cum = 0;
            next = static_cast<int>(logits.size()) - 1;
            for (size_t c = 0; c < probs.size(); ++c) {
                cum += probs[c];
                if (u <= cum) {
                    next = static_cast<int>(c);
                    break;
                }
            }
        }
        if (next == kEos) {
            gen.hit_eos = true;
            break;
        }
        ids.push_back(next);
        gen.ids.push_back(next);
    }
    return gen;
}

}  // namespace iclp
