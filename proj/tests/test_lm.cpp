#include <catch2/catch_amalgamated.hpp>

#include "iclp/gradcheck.hpp"
#include "iclp/lm.hpp"

using namespace iclp;

namespace {

LMConfig tiny_config(int vocab) {
    LMConfig cfg;
    cfg.layers = 1;
    cfg.heads = 2;
    cfg.d_model = 16;
    cfg.context = 48;
    cfg.vocab = vocab;
    return cfg;
}

TrainingRecord make_record(std::string id, std::vector<int> user, std::vector<int> assistant) {
    TrainingRecord r;
    r.id = std::move(id);
    r.family = "arith";
    r.procedure_id = "P-1";
    r.user_ids = std::move(user);
    r.assistant_ids = std::move(assistant);
    r.mask = default_mask(r.user_ids.size(), r.assistant_ids.size());
    r.n_steps = 1;
    return r;
}

}  // namespace

TEST_CASE("parameter count formula matches the actual tensors") {
    for (auto [layers, heads, d, vocab, tied] :
         {std::tuple{4, 4, 128, 2148, true}, {2, 2, 32, 200, true}, {1, 4, 64, 500, false}}) {
        LMConfig cfg;
        cfg.layers = layers;
        cfg.heads = heads;
        cfg.d_model = d;
        cfg.vocab = vocab;
        cfg.tied_head = tied;
        Rng rng(1);
        ModuleParams<float> p;
        init_lm_params(p, cfg, rng);
        CHECK(p.scalar_count() == lm_param_count(cfg));
    }
}

TEST_CASE("the acceptance-scale model lands near 1.5M parameters") {
    LMConfig cfg;  // defaults: 4 layers, 4 heads, d_model 128
    cfg.vocab = 300;
    int64_t n = lm_param_count(cfg);
    CHECK(n > 800'000);
    CHECK(n < 2'500'000);
}

TEST_CASE("same seed gives identical initial parameters") {
    auto cfg = tiny_config(40);
    LanguageModel a(cfg, 9), b(cfg, 9), c(cfg, 10);
    for (const auto& [name, pa] : a.params()) {
        CHECK(pa.data == b.params().at(name).data);
    }
    CHECK(a.params().at("tok_emb").data != c.params().at("tok_emb").data);
}

TEST_CASE("extended embedding rows start at the base mean plus noise") {
    auto cfg = tiny_config(64);
    int base = 40;
    LanguageModel lm(cfg, 3, base);
    const auto& emb = lm.params().at("tok_emb");
    for (int c = 0; c < cfg.d_model; ++c) {
        double mean = 0;
        for (int r = 0; r < base; ++r) mean += emb.at(r, c);
        mean /= base;
        for (int r = base; r < cfg.vocab; ++r)
            CHECK(std::abs(emb.at(r, c) - mean) < 0.1);  // noise sigma 0.01
    }
    // distinct rows, not copies of the mean
    bool differs = false;
    for (int c = 0; c < cfg.d_model; ++c)
        if (emb.at(base, c) != emb.at(base + 1, c)) differs = true;
    CHECK(differs);
}

TEST_CASE("zeroed model gives uniform logits and loss ln V") {
    auto cfg = tiny_config(40);
    LanguageModel lm(cfg, 1);
    for (auto& [name, p] : lm.params()) p.data.assign(p.data.size(), 0.0f);
    auto rec = make_record("r", {6, 7}, {8, 9, kEos});
    CHECK(lm.record_loss(rec) == Catch::Approx(std::log(40.0)).epsilon(1e-5));
}

TEST_CASE("loss ignores user-span positions entirely") {
    auto cfg = tiny_config(40);
    LanguageModel lm(cfg, 4);
    auto rec = make_record("r", {6, 7, 8}, {9, 10, kEos});
    double base = lm.record_loss(rec);
    // perturbing which token a user position would have "predicted" does not
    // matter: only assistant-span targets carry weight, and those are fixed by
    // the ids themselves; verify instead via an equivalent record whose user
    // span is the same but is marked longer (moving a token from assistant to
    // user changes the loss set)
    auto rec2 = make_record("r2", {6, 7, 8, 9}, {10, kEos});
    CHECK(lm.record_loss(rec2) != Catch::Approx(base));
    // and a record with no assistant positions is rejected
    TrainingRecord empty = rec;
    empty.assistant_ids.clear();
    empty.mask = default_mask(empty.user_ids.size(), 0);
    CHECK_THROWS_AS(lm.record_loss(empty), std::invalid_argument);
}

TEST_CASE("completion loss matches finite differences on a 2-record batch (64-bit)") {
    LMConfig cfg = tiny_config(14);
    cfg.d_model = 8;
    cfg.heads = 2;
    Rng rng(11);
    ModuleParams<double> params;
    init_lm_params(params, cfg, rng);
    std::vector<TrainingRecord> recs = {make_record("a", {5, 6}, {7, 8, kEos}),
                                        make_record("b", {9}, {10, 11, 12, kEos})};
    auto f = [&](const ModuleParams<double>& p) {
        double s = 0;
        for (const auto& r : recs) {
            Tape<double> t;
            BoundParams<double> b(t, p);
            s += t.value(build_completion_loss(t, b, cfg, r)).data[0];
        }
        return s;
    };
    GradMap<double> analytic;
    for (const auto& r : recs) {
        Tape<double> t;
        BoundParams<double> b(t, params);
        auto loss = build_completion_loss(t, b, cfg, r);
        t.backward(loss);
        auto g = collect_gradients(t, b, params);
        for (auto& [name, gt] : g) {
            auto it = analytic.find(name);
            if (it == analytic.end())
                analytic.emplace(name, std::move(gt));
            else
                it->second += gt;
        }
    }
    auto res = finite_difference_check(f, params, analytic, 1e-5);
    INFO("worst: " << res.worst_param << "[" << res.worst_index << "]");
    CHECK(res.max_rel_error < 1e-4);
}

TEST_CASE("sequences longer than the context are rejected") {
    auto cfg = tiny_config(40);
    LanguageModel lm(cfg, 1);
    std::vector<int> user(30, 6), assistant(30, 7);
    assistant.push_back(kEos);
    auto rec = make_record("big", user, assistant);
    CHECK_THROWS_AS(finetune_sft(lm, {rec}, FinetuneOptions{}, 1), std::invalid_argument);
    std::vector<int> too_long(cfg.context + 1, 6);
    CHECK_THROWS_AS(lm.next_token_logits(too_long), std::invalid_argument);
}

TEST_CASE("fine-tuning reduces loss, logs every step, and replays exactly") {
    auto cfg = tiny_config(40);
    Rng data_rng(5);
    std::vector<TrainingRecord> recs;
    for (int i = 0; i < 24; ++i) {
        std::vector<int> user = {int(5 + data_rng.next_below(10))};
        // the answer is a fixed function of the question token: learnable
        std::vector<int> assistant = {user[0] + 10, user[0] + 20, kEos};
        recs.push_back(make_record("r" + std::to_string(i), user, assistant));
    }
    LanguageModel lm(cfg, 2);
    FinetuneOptions opt;
    opt.epochs = 8;
    opt.batch_size = 8;
    opt.lr = 3e-3;
    opt.lr_floor = 3e-4;
    auto log = finetune_sft(lm, recs, opt, 77);
    REQUIRE_FALSE(log.aborted);
    CHECK(log.skipped_steps == 0);
    REQUIRE(log.epoch_eval_loss.size() == size_t(opt.epochs) + 1);
    CHECK(log.epoch_eval_loss.back() < log.epoch_eval_loss.front());
    REQUIRE(log.steps.size() == size_t(opt.epochs * 3));
    for (size_t i = 0; i < log.steps.size(); ++i) CHECK(log.steps[i].step == int(i));
    for (const auto& s : log.steps) {
        CHECK(std::isfinite(s.loss));
        CHECK(s.grad_norm >= 0.0);
        CHECK(s.lr <= opt.lr);
        CHECK(s.lr >= opt.lr_floor - 1e-12);
    }

    // same seed; identical trajectory and identical final weights
    LanguageModel lm2(cfg, 2);
    auto log2 = finetune_sft(lm2, recs, opt, 77);
    REQUIRE(log2.steps.size() == log.steps.size());
    for (size_t i = 0; i < log.steps.size(); ++i) CHECK(log2.steps[i].loss == log.steps[i].loss);
    for (const auto& [name, p] : lm.params()) CHECK(p.data == lm2.params().at(name).data);

    // csv artifact
    std::string path = "/tmp/iclp_test_runlog.csv";
    log.to_csv(path);
    std::ifstream in(path);
    std::string header;
    std::getline(in, header);
    CHECK(header == "step,loss,lr,grad_norm");
    int lines = 0;
    for (std::string l; std::getline(in, l);) ++lines;
    CHECK(lines == int(log.steps.size()));
    std::remove(path.c_str());
}

TEST_CASE("freeze flag trains only the extended embedding rows") {
    auto cfg = tiny_config(48);
    int base = 40;
    LanguageModel lm(cfg, 6, base);
    auto before = lm.params();  // copy
    std::vector<TrainingRecord> recs;
    for (int i = 0; i < 8; ++i) {
        // latent-style span in the extended range followed by text
        std::vector<int> assistant = {base + (i % 8), 20 + (i % 4), kEos};
        recs.push_back(make_record("r" + std::to_string(i), {10 + i}, assistant));
    }
    FinetuneOptions opt;
    opt.epochs = 2;
    opt.batch_size = 4;
    opt.freeze_except_embeddings_from = base;
    auto log = finetune_sft(lm, recs, opt, 3);
    REQUIRE_FALSE(log.aborted);
    for (const auto& [name, p] : lm.params()) {
        if (name == "tok_emb") continue;
        INFO(name << " should be frozen");
        CHECK(p.data == before.at(name).data);
    }
    const auto& emb = lm.params().at("tok_emb");
    const auto& emb0 = before.at("tok_emb");
    bool base_same = true, ext_changed = false;
    for (int r = 0; r < base; ++r)
        for (int c = 0; c < cfg.d_model; ++c)
            if (emb.at(r, c) != emb0.at(r, c)) base_same = false;
    for (int r = base; r < cfg.vocab; ++r)
        for (int c = 0; c < cfg.d_model; ++c)
            if (emb.at(r, c) != emb0.at(r, c)) ext_changed = true;
    CHECK(base_same);
    CHECK(ext_changed);
}

TEST_CASE("divergence guard aborts after consecutive bad evals") {
    auto cfg = tiny_config(40);
    LanguageModel lm(cfg, 2);
    std::vector<TrainingRecord> recs = {make_record("a", {6}, {7, kEos}),
                                        make_record("b", {8}, {9, kEos})};
    FinetuneOptions opt;
    opt.epochs = 6;
    opt.batch_size = 2;
    opt.divergence_factor = 0.01;  // triggers immediately: eval > 1% of initial
    opt.divergence_patience = 2;
    auto log = finetune_sft(lm, recs, opt, 1);
    CHECK(log.aborted);
    CHECK(log.abort_reason.find("consecutive") != std::string::npos);
    // aborted at the patience boundary, not after all epochs
    CHECK(log.epoch_eval_loss.size() == 3);  // initial + 2 epochs
}

TEST_CASE("greedy generation is deterministic and capped") {
    auto cfg = tiny_config(40);
    LanguageModel lm(cfg, 8);
    GenerateOptions opt;
    opt.max_new_tokens = 12;
    auto a = generate(lm, {6, 7}, opt);
    auto b = generate(lm, {6, 7}, opt);
    CHECK(a.ids == b.ids);
    CHECK(a.hit_eos == b.hit_eos);
    CHECK(int(a.ids.size()) <= 12);
    // temperature 0 goes through the same argmax path
    GenerateOptions zero = opt;
    zero.temperature = 0.0;
    CHECK(generate(lm, {6, 7}, zero).ids == a.ids);
}

TEST_CASE("temperature sampling replays under a fixed seed") {
    auto cfg = tiny_config(40);
    LanguageModel lm(cfg, 8);
    GenerateOptions opt;
    opt.temperature = 0.3;  // paper-scale sampling temperature
    opt.max_new_tokens = 10;
    opt.seed = 99;
    auto a = generate(lm, {6}, opt);
    auto b = generate(lm, {6}, opt);
    CHECK(a.ids == b.ids);
    opt.seed = 100;
    bool any_diff = false;
    for (int trial = 0; trial < 5 && !any_diff; ++trial, ++opt.seed)
        any_diff = generate(lm, {6}, opt).ids != a.ids;
    CHECK(any_diff);
}

TEST_CASE("a trained model learns to emit eos and the mapping") {
    auto cfg = tiny_config(40);
    std::vector<TrainingRecord> recs;
    for (int q = 5; q < 15; ++q)
        recs.push_back(make_record("r" + std::to_string(q), {q}, {q + 10, kEos}));
    LanguageModel lm(cfg, 4);
    FinetuneOptions opt;
    opt.epochs = 40;
    opt.batch_size = 10;
    opt.lr = 3e-3;
    opt.lr_floor = 1e-4;
    auto log = finetune_sft(lm, recs, opt, 21);
    REQUIRE_FALSE(log.aborted);
    int correct = 0;
    for (int q = 5; q < 15; ++q) {
        auto gen = generate(lm, {q}, GenerateOptions{});
        if (gen.hit_eos && gen.ids == std::vector<int>{q + 10}) ++correct;
    }
    CHECK(correct >= 8);
}

TEST_CASE("checkpoint round-trip preserves behavior") {
    auto cfg = tiny_config(40);
    LanguageModel lm(cfg, 13);
    std::string path = "/tmp/iclp_test_lm.ckpt";
    lm.save(path, {{"note", "test"}});
    auto loaded = LanguageModel::load(path);
    CHECK(loaded.config().vocab == 40);
    CHECK(loaded.next_token_logits({6, 7, 8}) == lm.next_token_logits({6, 7, 8}));
    std::remove(path.c_str());
}
