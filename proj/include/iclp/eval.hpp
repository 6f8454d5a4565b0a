#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "iclp/lm.hpp"

namespace iclp {

// ---- pass@1 ----

struct EvalReport {
    std::string mode;  // "normal", "cross:arith→strings", "accumulation"
    int total = 0, correct = 0, extraction_failures = 0;
    std::map<std::string, int> family_total, family_correct;
    nlohmann::json meta;  // model/codec/config hashes, seed

    double accuracy() const { return total == 0 ? 0.0 : 100.0 * correct / total; }

    nlohmann::json to_json() const {
        nlohmann::json per_family;
        for (const auto& [fam, n] : family_total)
            per_family[fam] = {{"total", n},
                              {"correct", family_correct.count(fam) ? family_correct.at(fam) : 0}};
        return {{"mode", mode},          {"total", total},
                {"correct", correct},    {"accuracy", accuracy()},
                {"extraction_failures", extraction_failures},
                {"per_family", per_family}, {"meta", meta}};
    }
};

// cross-mode tag in "train→test" form
inline std::string cross_mode_tag(const std::string& train_family,
                                  const std::string& test_family) {
    return "cross:" + train_family + "→" + test_family;
}

using GenerateFn = std::function<std::vector<int>(const std::vector<int>& user_ids)>;

inline GenerateFn lm_generator(const LanguageModel& lm, GenerateOptions opt = {}) {
    return [&lm, opt](const std::vector<int>& user_ids) { return generate(lm, user_ids, opt).ids; };
}

// One greedy generation per question; LP ids stripped; the family's answer
// grammar decides correctness. Extraction failures count as incorrect.
inline EvalReport evaluate_pass1(const GenerateFn& gen,
                                 const std::vector<ReasoningSample>& testset,
                                 const ExtendedVocabulary& vocab, const std::string& mode,
                                 nlohmann::json meta = {}) {
    EvalReport rep;
    rep.mode = mode;
    rep.meta = std::move(meta);
    for (const auto& s : testset) {
        auto out_ids = gen(vocab.base().encode(s.question));
        std::vector<int> text_ids;
        for (int id : out_ids)
            if (!vocab.is_latent(id)) text_ids.push_back(id);
        std::string text = vocab.base().decode(text_ids);
        auto extracted = extract_answer(text, s.family);
        rep.total++;
        rep.family_total[s.family]++;
        if (!extracted) {
            rep.extraction_failures++;
        } else if (*extracted == s.answer) {
            rep.correct++;
            rep.family_correct[s.family]++;
        }
    }
    return rep;
}

// ---- token cost (prompt + generated tokens, per question) ----

struct TokenCostRow {
    std::string id;
    int prompt_tokens = 0, generated_tokens = 0;
    int total() const { return prompt_tokens + generated_tokens; }
};

struct TokenCostReport {
    std::vector<TokenCostRow> rows;
    double mean = 0.0, stddev = 0.0;  // population std

    void finalize() {
        mean = 0.0;
        stddev = 0.0;
        if (rows.empty()) return;
        for (const auto& r : rows) mean += r.total();
        mean /= static_cast<double>(rows.size());
        for (const auto& r : rows) {
            double d = r.total() - mean;
            stddev += d * d;
        }
        stddev = std::sqrt(stddev / static_cast<double>(rows.size()));
    }

    void to_csv(const std::string& path) const {
        std::ofstream out(path);
        if (!out) throw std::runtime_error("cannot write " + path);
        out << "id,prompt_tokens,generated_tokens,total_tokens\n";
        for (const auto& r : rows)
            out << r.id << "," << r.prompt_tokens << "," << r.generated_tokens << ","
                << r.total() << "\n";
    }
};

inline TokenCostReport token_cost_report(const GenerateFn& gen,
                                         const std::vector<ReasoningSample>& testset,
                                         const ExtendedVocabulary& vocab) {
    TokenCostReport rep;
    for (const auto& s : testset) {
        auto user = vocab.base().encode(s.question);
        auto out = gen(user);
        rep.rows.push_back(
            {s.id, static_cast<int>(user.size()), static_cast<int>(out.size())});
    }
    rep.finalize();
    return rep;
}

// ---- latent-encoding analysis ----

struct EncodingLabel {
    std::string trace_id, family, procedure_id;
    int step_index = 0;  // 1-based
};

struct EncodingSet {
    std::vector<std::vector<double>> vectors;  // each of dimension d_h
    std::vector<EncodingLabel> labels;
    int skipped_traces = 0;  // traces with fewer steps than requested

    size_t size() const { return vectors.size(); }
};

// Mean-pool the codebook rows selected by each trace's step_index-th LP span.
inline EncodingSet collect_step_encodings(const std::vector<TrainingRecord>& traces,
                                          const Codec& codec, const ExtendedVocabulary& vocab,
                                          int step_index) {
    if (step_index < 1) throw std::invalid_argument("step_index is 1-based");
    const auto& cb = codec.params().at("codebook");
    EncodingSet set;
    for (const auto& tr : traces) {
        auto spans = strip_latent_spans(tr, vocab);
        if (static_cast<int>(spans.latents.size()) < step_index) {
            set.skipped_traces++;
            continue;
        }
        const auto& span = spans.latents[static_cast<size_t>(step_index) - 1];
        std::vector<double> pooled(static_cast<size_t>(cb.cols()), 0.0);
        for (int idx : span)
            for (int c = 0; c < cb.cols(); ++c)
                pooled[static_cast<size_t>(c)] += cb.at(idx, c);
        for (auto& x : pooled) x /= static_cast<double>(span.size());
        set.vectors.push_back(std::move(pooled));
        set.labels.push_back({tr.id, tr.family, tr.procedure_id, step_index});
    }
    return set;
}

// Euclidean distance matrix, rows/cols ordered by (procedure, trace) group.
inline Tensor<double> pairwise_distances(const EncodingSet& set) {
    if (set.size() < 2) throw std::invalid_argument("need at least 2 encodings");
    int n = static_cast<int>(set.size());
    Tensor<double> m({n, n});
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) {
            double acc = 0;
            for (size_t c = 0; c < set.vectors[size_t(i)].size(); ++c) {
                double d = set.vectors[size_t(i)][c] - set.vectors[size_t(j)][c];
                acc += d * d;
            }
            double dist = std::sqrt(acc);
            m.at(i, j) = dist;
            m.at(j, i) = dist;
        }
    return m;
}

// indices sorted so same-procedure traces sit next to each other in plots
inline std::vector<int> group_order(const EncodingSet& set) {
    std::vector<int> order(set.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        const auto& la = set.labels[size_t(a)];
        const auto& lb = set.labels[size_t(b)];
        if (la.procedure_id != lb.procedure_id) return la.procedure_id < lb.procedure_id;
        return la.trace_id < lb.trace_id;
    });
    return order;
}

inline void write_distance_csv(const Tensor<double>& m, const EncodingSet& set,
                               const std::string& path) {
    auto order = group_order(set);
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << "label";
    for (int i : order) out << "," << set.labels[size_t(i)].procedure_id;
    out << "\n";
    char buf[32];
    for (int i : order) {
        out << set.labels[size_t(i)].procedure_id;
        for (int j : order) {
            std::snprintf(buf, sizeof buf, "%.9g", m.at(i, j));
            out << "," << buf;
        }
        out << "\n";
    }
}

inline void write_heatmap_svg(const Tensor<double>& m, const EncodingSet& set,
                              const std::string& path) {
    auto order = group_order(set);
    int n = static_cast<int>(order.size());
    double mx = 1e-12;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) mx = std::max(mx, m.at(order[size_t(i)], order[size_t(j)]));
    int cell = std::max(2, 600 / std::max(1, n));
    int side = cell * n;
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << side << "\" height=\"" << side
        << "\">\n";
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            int v = static_cast<int>(255.0 * (1.0 - m.at(order[size_t(i)], order[size_t(j)]) / mx));
            out << "<rect x=\"" << j * cell << "\" y=\"" << i * cell << "\" width=\"" << cell
                << "\" height=\"" << cell << "\" fill=\"rgb(" << v << "," << v << "," << v
                << ")\"/>\n";
        }
    out << "</svg>\n";
}

// mean pairwise distance within the same procedure vs across procedures
struct GroupDistanceStats {
    double within_mean = 0.0, between_mean = 0.0;
    int within_pairs = 0, between_pairs = 0;
};

inline GroupDistanceStats within_between_stats(const Tensor<double>& m, const EncodingSet& set) {
    GroupDistanceStats st;
    int n = static_cast<int>(set.size());
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) {
            bool same = set.labels[size_t(i)].procedure_id == set.labels[size_t(j)].procedure_id;
            if (same) {
                st.within_mean += m.at(i, j);
                st.within_pairs++;
            } else {
                st.between_mean += m.at(i, j);
                st.between_pairs++;
            }
        }
    if (st.within_pairs) st.within_mean /= st.within_pairs;
    if (st.between_pairs) st.between_mean /= st.between_pairs;
    return st;
}

// ---- 2D projection ----

struct ProjectionOptions {
    bool refine = false;   // seeded stochastic-neighbor refinement on top of PCA
    int refine_iters = 150;
    double refine_lr = 40.0;
};

// PCA to 2 components; each component's sign fixed so its largest-magnitude
// loading is positive. Rank-deficient input pads with zeros and warns.
inline std::vector<std::array<double, 2>> project_2d(const EncodingSet& set, uint64_t seed,
                                                     const ProjectionOptions& opt = {}) {
    if (set.size() < 3) throw std::invalid_argument("need at least 3 encodings to project");
    int n = static_cast<int>(set.size());
    int d = static_cast<int>(set.vectors[0].size());
    Eigen::MatrixXd x(n, d);
    for (int i = 0; i < n; ++i)
        for (int c = 0; c < d; ++c) x(i, c) = set.vectors[size_t(i)][size_t(c)];
    Eigen::RowVectorXd mean = x.colwise().mean();
    x.rowwise() -= mean;
    Eigen::MatrixXd cov = (x.transpose() * x) / double(n);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
    // eigenvalues ascending; take the top two
    std::vector<std::array<double, 2>> out(static_cast<size_t>(n), {0.0, 0.0});
    for (int comp = 0; comp < 2; ++comp) {
        int which = d - 1 - comp;
        if (which < 0 || solver.eigenvalues()(which) < 1e-12) {
            std::cerr << "project_2d: component " << comp + 1
                      << " is rank-deficient; padding with zeros\n";
            continue;
        }
        Eigen::VectorXd v = solver.eigenvectors().col(which);
        int arg = 0;
        for (int c = 1; c < d; ++c)
            if (std::abs(v(c)) > std::abs(v(arg))) arg = c;
        if (v(arg) < 0) v = -v;
        Eigen::VectorXd proj = x * v;
        for (int i = 0; i < n; ++i) out[size_t(i)][size_t(comp)] = proj(i);
    }
    if (opt.refine) {
        // Small exact SNE pass over the PCA layout: Gaussian affinities in the
        // original space, Student-t in the plane, plain gradient descent.
        Rng rng(seed);
        std::vector<std::array<double, 2>> y = out;
        for (auto& p : y) {
            p[0] += 1e-3 * rng.next_gaussian();
            p[1] += 1e-3 * rng.next_gaussian();
        }
        Eigen::MatrixXd p_aff = Eigen::MatrixXd::Zero(n, n);
        double sigma2 = 0.0;
        {
            double acc = 0;
            int cnt = 0;
            for (int i = 0; i < n; ++i)
                for (int j = i + 1; j < n; ++j) {
                    acc += (x.row(i) - x.row(j)).squaredNorm();
                    ++cnt;
                }
            sigma2 = std::max(1e-9, acc / std::max(1, cnt) / 2.0);
        }
        double psum = 0;
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) {
                if (i == j) continue;
                p_aff(i, j) = std::exp(-(x.row(i) - x.row(j)).squaredNorm() / (2 * sigma2));
                psum += p_aff(i, j);
            }
        p_aff /= psum;
        for (int it = 0; it < opt.refine_iters; ++it) {
            // q_ij ∝ (1 + |y_i - y_j|^2)^-1
            Eigen::MatrixXd w = Eigen::MatrixXd::Zero(n, n);
            double qsum = 0;
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < n; ++j) {
                    if (i == j) continue;
                    double dy0 = y[size_t(i)][0] - y[size_t(j)][0];
                    double dy1 = y[size_t(i)][1] - y[size_t(j)][1];
                    w(i, j) = 1.0 / (1.0 + dy0 * dy0 + dy1 * dy1);
                    qsum += w(i, j);
                }
            for (int i = 0; i < n; ++i) {
                double g0 = 0, g1 = 0;
                for (int j = 0; j < n; ++j) {
                    if (i == j) continue;
                    double coef = (p_aff(i, j) - w(i, j) / qsum) * w(i, j);
                    g0 += 4 * coef * (y[size_t(i)][0] - y[size_t(j)][0]);
                    g1 += 4 * coef * (y[size_t(i)][1] - y[size_t(j)][1]);
                }
                y[size_t(i)][0] -= opt.refine_lr * g0;
                y[size_t(i)][1] -= opt.refine_lr * g1;
            }
        }
        out = y;
    }
    return out;
}

inline void write_projection_csv(const std::vector<std::array<double, 2>>& coords,
                                 const EncodingSet& set, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << "trace_id,family,procedure_id,step,x,y\n";
    char buf[96];
    for (size_t i = 0; i < coords.size(); ++i) {
        const auto& l = set.labels[i];
        std::snprintf(buf, sizeof buf, "%.9g,%.9g", coords[i][0], coords[i][1]);
        out << l.trace_id << "," << l.family << "," << l.procedure_id << "," << l.step_index
            << "," << buf << "\n";
    }
}

inline void write_scatter_svg(const std::vector<std::array<double, 2>>& coords,
                              const EncodingSet& set, const std::string& path) {
    double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
    for (const auto& c : coords) {
        x0 = std::min(x0, c[0]);
        x1 = std::max(x1, c[0]);
        y0 = std::min(y0, c[1]);
        y1 = std::max(y1, c[1]);
    }
    double sx = (x1 - x0) < 1e-12 ? 1.0 : 560.0 / (x1 - x0);
    double sy = (y1 - y0) < 1e-12 ? 1.0 : 560.0 / (y1 - y0);
    // deterministic per-procedure colors
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"600\" height=\"600\">\n";
    for (size_t i = 0; i < coords.size(); ++i) {
        uint64_t h = fnv1a64(set.labels[i].procedure_id);
        int r = 40 + int(h % 180), g = 40 + int((h >> 8) % 180), b = 40 + int((h >> 16) % 180);
        out << "<circle cx=\"" << 20 + (coords[i][0] - x0) * sx << "\" cy=\""
            << 20 + (coords[i][1] - y0) * sy << "\" r=\"4\" fill=\"rgb(" << r << "," << g << ","
            << b << ")\"><title>" << set.labels[i].procedure_id << "</title></circle>\n";
    }
    out << "</svg>\n";
}

// ---- d_h / K ablation grid ----

struct AblationRow {
    int code_dim = 0, codebook_size = 0;
    bool ok = false;
    double reconstruction_rate = 0.0, perplexity = 0.0, pass1 = 0.0;
    std::string error;
};

struct AblationOptions {
    CodecTrainOptions codec_train;
    LMConfig lm;  // vocab filled per cell
    FinetuneOptions finetune;
    GenerateOptions generate;
    int codec_layers = 1, codec_heads = 2, codec_d_model = 32;
    int memory_tokens = 6;
    int max_plan_len = 32;
};

inline void write_ablation_csv(const std::vector<AblationRow>& rows, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << "code_dim,codebook_size,ok,reconstruction_rate,perplexity,pass1,error\n";
    char buf[96];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%.9g,%.9g,%.9g", r.reconstruction_rate, r.perplexity,
                      r.pass1);
        out << r.code_dim << "," << r.codebook_size << "," << (r.ok ? 1 : 0) << "," << buf << ","
            << r.error << "\n";
    }
}

// Train codec → latentize → fine-tune → evaluate for each (d_h, K) cell with a
// shared seed. A cell that throws is recorded and the grid moves on.
inline std::vector<AblationRow> run_ablation_grid(const std::vector<int>& dims,
                                                  const std::vector<int>& sizes,
                                                  const SyntheticCorpus& train,
                                                  const std::vector<ReasoningSample>& test,
                                                  const AblationOptions& opt, uint64_t seed) {
    if (dims.empty() || sizes.empty()) throw std::invalid_argument("empty ablation grid");
    std::vector<std::string> texts;
    for (const auto& s : train.samples) {
        texts.push_back(s.question);
        for (const auto& st : s.steps) texts.push_back(st);
        for (const auto& p : s.plans) texts.push_back(p);
    }
    auto vocab = Vocabulary::build(texts);
    std::vector<std::string> plan_set;
    {
        std::set<std::string> uniq;
        for (const auto& s : train.samples)
            for (const auto& p : s.plans) uniq.insert(p);
        plan_set.assign(uniq.begin(), uniq.end());
    }
    std::vector<AblationRow> rows;
    for (int dh : dims) {
        for (int K : sizes) {
            AblationRow row;
            row.code_dim = dh;
            row.codebook_size = K;
            try {
                CodecConfig ccfg;
                ccfg.memory_tokens = opt.memory_tokens;
                ccfg.codebook_size = K;
                ccfg.code_dim = dh;
                ccfg.encoder = {opt.codec_layers, opt.codec_heads, opt.codec_d_model,
                                opt.max_plan_len + opt.memory_tokens + 8, false, 0.0};
                ccfg.decoder = {opt.codec_layers, opt.codec_heads, opt.codec_d_model,
                                opt.max_plan_len + opt.memory_tokens + 8, true, 0.0};
                ccfg.max_plan_len = opt.max_plan_len;
                Codec codec(ccfg, vocab, seed);
                auto stats = codec.train(plan_set, opt.codec_train, seed);
                int exact = 0;
                for (const auto& p : plan_set)
                    if (codec.reconstruct_plan_text(p) == p) ++exact;
                row.reconstruction_rate =
                    plan_set.empty() ? 0.0 : double(exact) / double(plan_set.size());
                row.perplexity = stats.epochs.empty() ? 0.0 : stats.epochs.back().perplexity;

                ExtendedVocabulary ext(vocab, K);
                std::vector<TrainingRecord> records;
                for (const auto& s : train.samples)
                    records.push_back(latentize_sample(s, codec, ext));
                LMConfig lmc = opt.lm;
                lmc.vocab = ext.size();
                LanguageModel lm(lmc, seed, ext.offset());
                auto log = finetune_sft(lm, records, opt.finetune, seed);
                if (log.aborted) throw std::runtime_error("fine-tune aborted: " + log.abort_reason);
                auto rep = evaluate_pass1(lm_generator(lm, opt.generate), test, ext, "normal");
                row.pass1 = rep.accuracy();
                row.ok = true;
            } catch (const std::exception& e) {
                row.error = e.what();
            }
            rows.push_back(row);
        }
    }
    return rows;
}

}  // namespace iclp
