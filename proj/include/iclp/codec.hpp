#pragma once

#include <cmath>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "iclp/checkpoint.hpp"
#include "iclp/corpus.hpp"
#include "iclp/nn.hpp"
#include "iclp/optim.hpp"
#include "iclp/tokenizer.hpp"

namespace iclp {

struct CodecConfig {
    int memory_tokens = 6;  // L
    int codebook_size = 2048;  // K
    int code_dim = 512;  // d_h
    TransformerConfig encoder{2, 4, 64, 64, false, 0.0};
    TransformerConfig decoder{2, 4, 64, 64, true, 0.0};
    double commitment_beta = 0.3;
    int max_plan_len = 32;
    bool commitment_squared = true;  // false: unsquared norm, as written in some VQ losses

    void validate() const {
        if (memory_tokens < 1) throw std::invalid_argument("memory_tokens must be >= 1");
        if (codebook_size < 2) throw std::invalid_argument("codebook_size must be >= 2");
        if (code_dim < 1) throw std::invalid_argument("code_dim must be >= 1");
        if (commitment_beta <= 0) throw std::invalid_argument("commitment_beta must be > 0");
        if (max_plan_len < 1) throw std::invalid_argument("max_plan_len must be >= 1");
        encoder.validate();
        decoder.validate();
    }

    nlohmann::json to_json() const {
        return {{"memory_tokens", memory_tokens}, {"codebook_size", codebook_size},
                {"code_dim", code_dim},           {"commitment_beta", commitment_beta},
                {"max_plan_len", max_plan_len},   {"commitment_squared", commitment_squared},
                {"encoder", {{"layers", encoder.layers}, {"heads", encoder.heads},
                             {"d_model", encoder.d_model}, {"max_seq", encoder.max_seq}}},
                {"decoder", {{"layers", decoder.layers}, {"heads", decoder.heads},
                             {"d_model", decoder.d_model}, {"max_seq", decoder.max_seq}}}};
    }

    static CodecConfig from_json(const nlohmann::json& j) {
        CodecConfig c;
        c.memory_tokens = j.at("memory_tokens");
        c.codebook_size = j.at("codebook_size");
        c.code_dim = j.at("code_dim");
        c.commitment_beta = j.at("commitment_beta");
        c.max_plan_len = j.at("max_plan_len");
        c.commitment_squared = j.at("commitment_squared");
        auto tf = [](const nlohmann::json& t, bool causal) {
            TransformerConfig cfg;
            cfg.layers = t.at("layers");
            cfg.heads = t.at("heads");
            cfg.d_model = t.at("d_model");
            cfg.max_seq = t.at("max_seq");
            cfg.causal = causal;
            return cfg;
        };
        c.encoder = tf(j.at("encoder"), false);
        c.decoder = tf(j.at("decoder"), true);
        return c;
    }
};

struct QuantizedPlan {
    Tensor<float> quantized;   // L x d_h, rows copied from the codebook
    std::vector<int> indices;  // length L, each in [0, K)
};

// Exhaustive nearest-row scan, double accumulation, ties broken by lowest
// index. Deliberately a plain scan: the acceptance oracle is this same
// contract written independently.
template <typename T>
std::vector<int> quantize_nearest(const Tensor<T>& slots, const Tensor<T>& codebook) {
    if (slots.cols() != codebook.cols())
        throw std::invalid_argument("quantize: code dimension mismatch");
    int L = slots.rows(), K = codebook.rows(), D = slots.cols();
    std::vector<int> out(static_cast<size_t>(L));
    for (int e = 0; e < L; ++e) {
        double best = std::numeric_limits<double>::infinity();
        int best_k = 0;
        for (int k = 0; k < K; ++k) {
            double d2 = 0;
            for (int c = 0; c < D; ++c) {
                double d = static_cast<double>(slots.at(e, c)) - codebook.at(k, c);
                d2 += d * d;
            }
            if (d2 < best) {
                best = d2;
                best_k = k;
            }
        }
        out[static_cast<size_t>(e)] = best_k;
    }
    return out;
}

// usage histogram + perplexity = exp(entropy) of the normalized histogram
struct CodebookStats {
    std::vector<int64_t> histogram;
    double perplexity = 0.0;
};

inline CodebookStats codebook_stats(const std::vector<int>& assignments, int codebook_size) {
    if (assignments.empty()) throw std::invalid_argument("codebook_stats: no assignments");
    CodebookStats s;
    s.histogram.assign(static_cast<size_t>(codebook_size), 0);
    for (int a : assignments) s.histogram[static_cast<size_t>(a)]++;
    double n = static_cast<double>(assignments.size());
    double ent = 0;
    for (int64_t c : s.histogram) {
        if (c == 0) continue;
        double p = c / n;
        ent -= p * std::log(p);
    }
    s.perplexity = std::exp(ent);
    return s;
}

// ---- differentiable forward pieces ----

template <typename T>
struct CodecLossParts {
    typename Tape<T>::Ref total, ce, codebook_term, commitment_term;
    typename Tape<T>::Ref slots;      // encoder memory-slot outputs, L x d_h
    typename Tape<T>::Ref quantized;  // gather of selected codebook rows
    typename Tape<T>::Ref st;         // straight-through node feeding the decoder
    std::vector<int> indices;
};

// encoder: [plan tokens, memory tokens] -> slot rows projected to d_h
template <typename T>
typename Tape<T>::Ref build_encoder_slots(Tape<T>& t, const BoundParams<T>& b,
                                          const CodecConfig& cfg,
                                          const std::vector<int>& plan_ids) {
    if (plan_ids.empty()) throw std::invalid_argument("empty plan");
    using Ref = typename Tape<T>::Ref;
    Ref tok_rows = t.gather_rows(b("enc.tok_emb"), plan_ids);
    Ref rows = t.concat_rows({tok_rows, b("mem.emb")});
    rows = add_positions(t, rows, b, "enc");
    Ref h = transformer_stack(t, rows, b, "enc", cfg.encoder);
    Ref slots_raw = t.slice_rows(h, static_cast<int>(plan_ids.size()), cfg.memory_tokens);
    return t.add_rowvec(t.matmul(slots_raw, b("enc.proj.w")), b("enc.proj.b"));
}

// causal decoder over [quantized slots, RECON, teacher-forced plan tokens];
// logits via the tied decoder token embedding
template <typename T>
typename Tape<T>::Ref build_decoder_logits(Tape<T>& t, const BoundParams<T>& b,
                                           const CodecConfig& cfg,
                                           typename Tape<T>::Ref slot_rows,
                                           const std::vector<int>& teacher_ids) {
    using Ref = typename Tape<T>::Ref;
    Ref dec_in = t.add_rowvec(t.matmul(slot_rows, b("dec.proj.w")), b("dec.proj.b"));
    std::vector<int> ids;
    ids.push_back(kRecon);
    ids.insert(ids.end(), teacher_ids.begin(), teacher_ids.end());
    Ref tok_rows = t.gather_rows(b("dec.tok_emb"), ids);
    Ref seq = t.concat_rows({dec_in, tok_rows});
    seq = add_positions(t, seq, b, "dec");
    Ref h = transformer_stack(t, seq, b, "dec", cfg.decoder);
    return t.matmul(h, t.transpose(b("dec.tok_emb")));
}

// Frozen base-point values for gradient checking. The codec loss is not a
// smooth function of its parameters: assignments jump, the straight-through
// node's forward ignores the encoder, and both stop-gradient nodes hide a
// forward dependence that finite differences would otherwise measure. What the
// reverse-mode gradient actually represents is the loss with the assignments,
// sg[slots] and sg[quantized] all pinned at the base point — freezing those
// yields a smooth function with the identical value and the identical exact
// gradient there, which a finite-difference probe can check honestly.
template <typename T>
struct FrozenStops {
    std::vector<int> indices;
    Tensor<T> slots0, quantized0;
};

template <typename T>
CodecLossParts<T> build_codec_loss(Tape<T>& t, const BoundParams<T>& b, const CodecConfig& cfg,
                                   const std::vector<int>& plan_ids,
                                   const FrozenStops<T>* frozen = nullptr) {
    using Ref = typename Tape<T>::Ref;
    CodecLossParts<T> parts;
    parts.slots = build_encoder_slots(t, b, cfg, plan_ids);
    parts.indices = frozen ? frozen->indices
                           : quantize_nearest(t.value(parts.slots), t.value(b("codebook")));
    parts.quantized = t.gather_rows(b("codebook"), parts.indices);

    Ref sg_slots = frozen ? t.constant(frozen->slots0) : t.stop_gradient(parts.slots);
    Ref sg_quant = frozen ? t.constant(frozen->quantized0) : t.stop_gradient(parts.quantized);

    // || sg[f_a(p)] - H_q ||^2 : pulls selected codebook rows toward the encoder
    Ref cb_diff = t.sub(sg_slots, parts.quantized);
    parts.codebook_term = t.sum(t.mul(cb_diff, cb_diff));

    // beta * || f_a(p) - sg[H_q] ||^2 (config switch for the unsquared form)
    Ref cm_diff = t.sub(parts.slots, sg_quant);
    Ref cm = t.sum(t.mul(cm_diff, cm_diff));
    if (!cfg.commitment_squared) cm = t.sqrt_scalar(cm);
    parts.commitment_term = t.scale(cm, static_cast<T>(cfg.commitment_beta));

    // decoder sees quantized values; gradient crosses back to the encoder
    if (frozen) {
        Tensor<T> off = frozen->quantized0;
        for (int64_t i = 0; i < off.size(); ++i) off.data[i] -= frozen->slots0.data[i];
        parts.st = t.add(parts.slots, t.constant(off));
    } else {
        parts.st = t.straight_through(parts.slots, t.value(parts.quantized));
    }
    Ref logits = build_decoder_logits(t, b, cfg, parts.st, plan_ids);

    // next-token targets: positions L .. L+|p| predict plan tokens then <eos>
    int L = cfg.memory_tokens;
    int S = L + 1 + static_cast<int>(plan_ids.size());
    std::vector<int> targets(static_cast<size_t>(S), 0);
    std::vector<T> weights(static_cast<size_t>(S), T(0));
    for (size_t i = 0; i < plan_ids.size(); ++i) {
        targets[static_cast<size_t>(L) + i] = plan_ids[i];
        weights[static_cast<size_t>(L) + i] = T(1);
    }
    targets[static_cast<size_t>(S - 1)] = kEos;
    weights[static_cast<size_t>(S - 1)] = T(1);
    parts.ce = t.cross_entropy_rows(logits, targets, weights);

    parts.total = t.add(t.add(parts.ce, parts.codebook_term), parts.commitment_term);
    return parts;
}

template <typename T>
void init_codec_params(ModuleParams<T>& params, const CodecConfig& cfg, int vocab_size,
                       Rng& rng) {
    init_transformer_params(params, "enc", cfg.encoder, rng);
    init_transformer_params(params, "dec", cfg.decoder, rng);
    params.add("enc.tok_emb", gaussian_init<T>({vocab_size, cfg.encoder.d_model}, rng));
    params.add("dec.tok_emb", gaussian_init<T>({vocab_size, cfg.decoder.d_model}, rng));
    params.add("mem.emb", gaussian_init<T>({cfg.memory_tokens, cfg.encoder.d_model}, rng));
    params.add("enc.proj.w", gaussian_init<T>({cfg.encoder.d_model, cfg.code_dim}, rng));
    params.add("enc.proj.b", Tensor<T>({cfg.code_dim}));
    params.add("dec.proj.w", gaussian_init<T>({cfg.code_dim, cfg.decoder.d_model}, rng));
    params.add("dec.proj.b", Tensor<T>({cfg.decoder.d_model}));
    // fallback init; train() reseeds rows from first-batch encoder outputs
    params.add("codebook",
               gaussian_init<T>({cfg.codebook_size, cfg.code_dim}, rng,
                                1.0 / std::sqrt(static_cast<double>(cfg.code_dim))));
}

// ---- training ----

struct CodecTrainOptions {
    int epochs = 2;       // reference default
    int batch_size = 16;  // reference default
    double lr = 3e-3;
    double lr_floor = 3e-4;
    double weight_decay = 0.01;
    bool init_codebook_from_batch = true;
    bool dead_code_restarts = true;
    double dead_ema_decay = 0.9;
    double dead_threshold_scale = 0.1;  // dead if EMA usage < scale / K
    int dead_patience = 3;              // consecutive epoch-end checks
    bool verbose = false;
};

struct CodecEpochStats {
    double mean_ce = 0, mean_quant_err = 0, perplexity = 0;
    int skipped_steps = 0, restarts = 0;
};

struct CodecTrainingStats {
    std::vector<CodecEpochStats> epochs;
};

class Codec {
public:
    Codec(CodecConfig cfg, Vocabulary vocab, uint64_t seed)
        : cfg_(cfg), vocab_(std::move(vocab)) {
        cfg_.validate();
        Rng rng(seed);
        init_codec_params(params_, cfg_, vocab_.size(), rng);
        usage_ema_.assign(static_cast<size_t>(cfg_.codebook_size),
                          1.0 / cfg_.codebook_size);
        dead_streak_.assign(static_cast<size_t>(cfg_.codebook_size), 0);
    }

    const CodecConfig& config() const { return cfg_; }
    const Vocabulary& vocab() const { return vocab_; }
    ModuleParams<float>& params() { return params_; }
    const ModuleParams<float>& params() const { return params_; }
    const std::vector<double>& usage_ema() const { return usage_ema_; }
    std::vector<double>& usage_ema() { return usage_ema_; }

    std::vector<int> tokenize_plan(const std::string& plan_text) const {
        auto ids = vocab_.encode(plan_text);
        if (ids.empty()) throw std::invalid_argument("empty plan");
        if (static_cast<int>(ids.size()) > cfg_.max_plan_len) {
            std::cerr << "[codec] plan truncated to " << cfg_.max_plan_len
                      << " tokens: " << plan_text << "\n";
            ids.resize(static_cast<size_t>(cfg_.max_plan_len));
        }
        return ids;
    }

    Tensor<float> encode_memory_slots(const std::vector<int>& plan_ids) const {
        Tape<float> t;
        BoundParams<float> b(t, params_);
        auto slots = build_encoder_slots(t, b, cfg_, plan_ids);
        return t.value(slots);
    }

    QuantizedPlan quantize_slots(const Tensor<float>& slots) const {
        QuantizedPlan q;
        q.indices = quantize_nearest(slots, params_.at("codebook"));
        q.quantized = Tensor<float>({slots.rows(), slots.cols()});
        const auto& cb = params_.at("codebook");
        for (int e = 0; e < slots.rows(); ++e)
            for (int c = 0; c < slots.cols(); ++c)
                q.quantized.at(e, c) = cb.at(q.indices[static_cast<size_t>(e)], c);
        return q;
    }

    std::vector<int> plan_to_latent(const std::string& plan_text) const {
        return quantize_slots(encode_memory_slots(tokenize_plan(plan_text))).indices;
    }

    // greedy next-token decoding conditioned on the quantized slots + [RECON]
    std::vector<int> reconstruct_greedy(const Tensor<float>& quantized) const {
        std::vector<int> out;
        for (int step = 0; step < cfg_.max_plan_len; ++step) {
            Tape<float> t;
            BoundParams<float> b(t, params_);
            auto slot_rows = t.constant(quantized);
            auto logits = build_decoder_logits(t, b, cfg_, slot_rows, out);
            const auto& v = t.value(logits);
            int last = v.rows() - 1;
            int best = 0;
            float best_v = v.at(last, 0);
            for (int c = 1; c < v.cols(); ++c)
                if (v.at(last, c) > best_v) {
                    best_v = v.at(last, c);
                    best = c;
                }
            if (best == kEos) break;
            out.push_back(best);
        }
        return out;
    }

    std::string reconstruct_plan_text(const std::string& plan_text) const {
        auto q = quantize_slots(encode_memory_slots(tokenize_plan(plan_text)));
        return vocab_.decode(reconstruct_greedy(q.quantized));
    }

    CodecTrainingStats train(const std::vector<std::string>& plans, const CodecTrainOptions& opt,
                             uint64_t seed);

    void save(const std::string& path, nlohmann::json extra_meta = {}) const {
        nlohmann::json meta = std::move(extra_meta);
        meta["kind"] = "codec";
        meta["codec_config"] = cfg_.to_json();
        meta["vocab_tokens"] = vocab_.tokens();
        meta["usage_ema"] = usage_ema_;
        save_checkpoint(path, params_, std::move(meta));
    }

    static Codec load(const std::string& path) {
        auto ck = load_checkpoint(path);
        if (ck.meta.value("kind", "") != "codec")
            throw std::runtime_error(path + " is not a codec checkpoint");
        CodecConfig cfg = CodecConfig::from_json(ck.meta.at("codec_config"));
        Vocabulary vocab;
        for (const auto& t : ck.meta.at("vocab_tokens").get<std::vector<std::string>>())
            vocab.intern(t);
        Codec c(cfg, std::move(vocab), 0);
        c.params_ = std::move(ck.params);
        c.usage_ema_ = ck.meta.at("usage_ema").get<std::vector<double>>();
        return c;
    }

    // re-seed rows whose EMA usage stayed below threshold for `patience`
    // consecutive checks; returns number of restarted rows
    int reset_dead_codes(const std::vector<Tensor<float>>& batch_slot_rows, double threshold,
                         int patience, Rng& rng) {
        if (batch_slot_rows.empty()) return 0;
        auto& cb = params_.at("codebook");
        int restarted = 0;
        for (int k = 0; k < cfg_.codebook_size; ++k) {
            if (usage_ema_[static_cast<size_t>(k)] < threshold) {
                if (++dead_streak_[static_cast<size_t>(k)] < patience) continue;
                const auto& src =
                    batch_slot_rows[rng.next_below(batch_slot_rows.size())];
                int row = static_cast<int>(rng.next_below(static_cast<uint64_t>(src.rows())));
                for (int c = 0; c < cfg_.code_dim; ++c) cb.at(k, c) = src.at(row, c);
                usage_ema_[static_cast<size_t>(k)] = 1.0 / cfg_.codebook_size;
                dead_streak_[static_cast<size_t>(k)] = 0;
                ++restarted;
            } else {
                dead_streak_[static_cast<size_t>(k)] = 0;
            }
        }
        return restarted;
    }

private:
    CodecConfig cfg_;
    Vocabulary vocab_;
    ModuleParams<float> params_;
    std::vector<double> usage_ema_;
    std::vector<int> dead_streak_;
};

inline CodecTrainingStats Codec::train(const std::vector<std::string>& plans,
                                       const CodecTrainOptions& opt, uint64_t seed) {
    std::set<std::string> distinct(plans.begin(), plans.end());
    if (distinct.size() < 2 && opt.epochs > 0 && plans.size() < 2)
        throw std::invalid_argument("train_codec: need at least 2 plans");
    std::vector<std::vector<int>> plan_ids;
    plan_ids.reserve(plans.size());
    for (const auto& p : plans) plan_ids.push_back(tokenize_plan(p));

    Rng rng(seed ^ 0x5ebc0dec);
    // encoder max_seq must fit plan + memory tokens; fail fast here
    for (const auto& ids : plan_ids)
        if (static_cast<int>(ids.size()) + cfg_.memory_tokens > cfg_.encoder.max_seq)
            throw std::invalid_argument("encoder max_seq too small for plan + memory tokens");

    if (opt.init_codebook_from_batch) {
        std::vector<Tensor<float>> first;
        for (size_t i = 0; i < plan_ids.size() && i < static_cast<size_t>(opt.batch_size); ++i)
            first.push_back(encode_memory_slots(plan_ids[i]));
        if (!first.empty()) {
            auto& cb = params_.at("codebook");
            for (int k = 0; k < cfg_.codebook_size; ++k) {
                const auto& src = first[rng.next_below(first.size())];
                int row = static_cast<int>(rng.next_below(static_cast<uint64_t>(src.rows())));
                for (int c = 0; c < cfg_.code_dim; ++c)
                    cb.at(k, c) = src.at(row, c) +
                                  static_cast<float>(0.01 * rng.next_gaussian());
            }
        }
    }

    AdamWConfig acfg;
    acfg.lr = opt.lr;
    acfg.lr_floor = opt.lr_floor;
    acfg.weight_decay = opt.weight_decay;
    int64_t steps_per_epoch =
        (static_cast<int64_t>(plan_ids.size()) + opt.batch_size - 1) / opt.batch_size;
    acfg.total_steps = steps_per_epoch * opt.epochs;
    AdamW<float> optimizer(acfg);

    double dead_threshold = opt.dead_threshold_scale / cfg_.codebook_size;
    CodecTrainingStats stats;

    std::vector<size_t> order(plan_ids.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 0; epoch < opt.epochs; ++epoch) {
        // deterministic shuffle
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[rng.next_below(i)]);

        CodecEpochStats es;
        std::vector<int> epoch_assignments;
        double ce_sum = 0, qerr_sum = 0;
        int64_t n_seen = 0;
        std::vector<Tensor<float>> last_batch_slots;

        for (size_t batch_start = 0; batch_start < order.size();
             batch_start += static_cast<size_t>(opt.batch_size)) {
            size_t batch_end =
                std::min(order.size(), batch_start + static_cast<size_t>(opt.batch_size));
            GradMap<float> acc;
            bool bad = false;
            last_batch_slots.clear();
            double batch_scale = 1.0 / static_cast<double>(batch_end - batch_start);
            for (size_t bi = batch_start; bi < batch_end; ++bi) {
                const auto& ids = plan_ids[order[bi]];
                Tape<float> tape;
                BoundParams<float> bound(tape, params_);
                auto parts = build_codec_loss(tape, bound, cfg_, ids);
                float total = tape.value(parts.total).data[0];
                if (!std::isfinite(total)) {
                    bad = true;
                    break;
                }
                tape.backward(parts.total);
                auto g = collect_gradients(tape, bound, params_);
                for (auto& [name, gt] : g) {
                    for (auto& v : gt.data) v = static_cast<float>(v * batch_scale);
                    auto it = acc.find(name);
                    if (it == acc.end())
                        acc.emplace(name, std::move(gt));
                    else
                        it->second += gt;
                }
                ce_sum += tape.value(parts.ce).data[0];
                qerr_sum += tape.value(parts.codebook_term).data[0];
                ++n_seen;
                epoch_assignments.insert(epoch_assignments.end(), parts.indices.begin(),
                                         parts.indices.end());
                last_batch_slots.push_back(tape.value(parts.slots));
            }
            if (bad || !optimizer.step(params_, acc)) {
                ++es.skipped_steps;
                std::cerr << "[codec] non-finite loss/grad, step skipped\n";
                continue;
            }
            // EMA of per-batch usage frequencies
            std::vector<double> freq(static_cast<size_t>(cfg_.codebook_size), 0.0);
            size_t cnt = (batch_end - batch_start) * static_cast<size_t>(cfg_.memory_tokens);
            for (size_t a = epoch_assignments.size() - cnt; a < epoch_assignments.size(); ++a)
                freq[static_cast<size_t>(epoch_assignments[a])] += 1.0 / static_cast<double>(cnt);
            for (int k = 0; k < cfg_.codebook_size; ++k)
                usage_ema_[static_cast<size_t>(k)] =
                    opt.dead_ema_decay * usage_ema_[static_cast<size_t>(k)] +
                    (1.0 - opt.dead_ema_decay) * freq[static_cast<size_t>(k)];
        }

        if (opt.dead_code_restarts)
            es.restarts =
                reset_dead_codes(last_batch_slots, dead_threshold, opt.dead_patience, rng);

        es.mean_ce = n_seen ? ce_sum / static_cast<double>(n_seen) : 0.0;
        es.mean_quant_err = n_seen ? qerr_sum / static_cast<double>(n_seen) : 0.0;
        es.perplexity = epoch_assignments.empty()
                            ? 0.0
                            : codebook_stats(epoch_assignments, cfg_.codebook_size).perplexity;
        if (opt.verbose)
            std::cerr << "[codec] epoch " << epoch << " ce=" << es.mean_ce
                      << " qerr=" << es.mean_quant_err << " ppl=" << es.perplexity
                      << " restarts=" << es.restarts << "\n";
        stats.epochs.push_back(es);
    }
    return stats;
}

// latent-index dedup key for merge_corpora: the sequence of per-plan index vectors
inline std::function<std::string(const ReasoningSample&)> latent_merge_key(const Codec& codec) {
    return [&codec](const ReasoningSample& s) {
        std::string key;
        for (const auto& p : s.plans) {
            for (int idx : codec.plan_to_latent(p)) {
                key += std::to_string(idx);
                key += ',';
            }
            key += '|';
        }
        return key;
    };
}

}  // namespace iclp
