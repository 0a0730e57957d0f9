#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <set>
#include <sstream>

#include "hlm/retrieval.hpp"
#include "hlm/trainer.hpp"
#include "test_util.hpp"

using namespace hlm;

namespace {

EncoderConfig tiny_config(int layers = 1, std::vector<int> prompt = {}) {
    EncoderConfig cfg;
    cfg.vocab_size = 64;
    cfg.hidden_dim = 16;
    cfg.ffn_dim = 32;
    cfg.n_layers = layers;
    cfg.n_query_heads = 2;
    cfg.n_kv_heads = 1;
    cfg.head_dim = 8;
    cfg.embed_dim = 8;
    cfg.max_seq_len = 16;
    cfg.prompt_prefix = std::move(prompt);
    return cfg;
}

struct TinyWorld {
    TopicModel model;
    SyntheticCorpus corpus;
    std::vector<SupervisedPair> pairs;
};

TinyWorld tiny_world() {
    TinyWorld w{make_topic_model(4, 64, 2, 11), {}, {}};
    w.corpus = generate(w.model, 30, 12, 10, 6);
    w.pairs = mine_pairs(w.corpus, 1, 0);
    return w;
}

TrainConfig tiny_train(int steps, double lr = 5e-3) {
    TrainConfig cfg;
    cfg.batch_size = 4;
    cfg.peak_lr = lr;
    cfg.total_steps = steps;
    cfg.seed = 3;
    // a soft temperature and no masking keep the tiny-scale loss signal dense
    cfg.cl.temperature = 0.5;
    cfg.cl.mask_false_negatives = false;
    return cfg;
}

double mean_of(const std::vector<double>& v, std::size_t from, std::size_t to) {
    double s = 0;
    for (std::size_t i = from; i < to; ++i) s += v[i];
    return s / static_cast<double>(to - from);
}

}  // namespace

TEST_CASE("learning-rate schedule is a trapezoid") {
    TrainConfig cfg;
    cfg.peak_lr = 2.0;
    cfg.warmup_fraction = 0.10;
    cfg.total_steps = 100;

    REQUIRE(lr_at(0, cfg) == 0.0);
    REQUIRE(lr_at(5, cfg) == Catch::Approx(1.0));
    REQUIRE(lr_at(10, cfg) == Catch::Approx(2.0));
    REQUIRE(lr_at(55, cfg) == Catch::Approx(1.0));
    REQUIRE(lr_at(100, cfg) == 0.0);
    double peak = 0.0;
    for (int s = 0; s <= 100; ++s) peak = std::max(peak, lr_at(s, cfg));
    REQUIRE(peak == Catch::Approx(cfg.peak_lr));
    // piecewise linear: constant slope inside each segment
    for (int s = 1; s < 9; ++s)
        REQUIRE(lr_at(s + 1, cfg) - lr_at(s, cfg) ==
                Catch::Approx(lr_at(s, cfg) - lr_at(s - 1, cfg)));
    for (int s = 12; s < 99; ++s)
        REQUIRE(lr_at(s + 1, cfg) - lr_at(s, cfg) ==
                Catch::Approx(lr_at(s, cfg) - lr_at(s - 1, cfg)));

    TrainConfig no_warm = cfg;
    no_warm.warmup_fraction = 0.0;
    REQUIRE(lr_at(0, no_warm) == Catch::Approx(2.0));
    REQUIRE(lr_at(50, no_warm) == Catch::Approx(1.0));
    REQUIRE(lr_at(100, no_warm) == 0.0);

    REQUIRE_THROWS_AS(lr_at(-1, cfg), config_error);
    REQUIRE_THROWS_AS(lr_at(101, cfg), config_error);

    TrainConfig bad = cfg;
    bad.batch_size = 0;
    REQUIRE_THROWS_AS(validate_train(bad), config_error);
    bad = cfg;
    bad.warmup_fraction = 1.0;
    REQUIRE_THROWS_AS(validate_train(bad), config_error);
    bad = cfg;
    bad.total_steps = -1;
    REQUIRE_THROWS_AS(validate_train(bad), config_error);
    bad = cfg;
    bad.peak_lr = -0.5;
    REQUIRE_THROWS_AS(validate_train(bad), config_error);
}

TEST_CASE("Adam optimizer") {
    SECTION("zero gradient from a fresh state changes nothing") {
        auto w = Tensor<float>::from({1.0f, -2.0f, 3.0f}, {3});
        auto before = w.vec();
        Adam<float> opt({&w});
        opt.step(0.1);
        opt.step(0.1);
        REQUIRE(w.vec() == before);
    }
    SECTION("matches a hand-rolled reference over several steps") {
        auto w = Tensor<double>::from({0.5, -1.5}, {2});
        std::vector<double> ref = w.vec();
        Adam<double> opt({&w});
        double m0 = 0, m1 = 0, v0 = 0, v1 = 0;
        for (int t = 1; t <= 5; ++t) {
            std::vector<double> g{0.3 * t, -0.7};
            w.node()->grad = g;
            opt.step(0.01);
            m0 = 0.9 * m0 + 0.1 * g[0];
            m1 = 0.9 * m1 + 0.1 * g[1];
            v0 = 0.999 * v0 + 0.001 * g[0] * g[0];
            v1 = 0.999 * v1 + 0.001 * g[1] * g[1];
            double bc1 = 1.0 - std::pow(0.9, t), bc2 = 1.0 - std::pow(0.999, t);
            ref[0] -= 0.01 * (m0 / bc1) / (std::sqrt(v0 / bc2) + 1e-8);
            ref[1] -= 0.01 * (m1 / bc1) / (std::sqrt(v1 / bc2) + 1e-8);
            REQUIRE(w.vec()[0] == Catch::Approx(ref[0]).margin(1e-15));
            REQUIRE(w.vec()[1] == Catch::Approx(ref[1]).margin(1e-15));
            w.zero_grad();
        }
        REQUIRE(opt.steps_taken() == 5);
    }
    SECTION("rejects a gradient shaped unlike its parameter") {
        auto w = Tensor<float>::from({1.0f, 2.0f}, {2});
        w.node()->grad = {1.0f};
        Adam<float> opt({&w});
        REQUIRE_THROWS_AS(opt.step(0.1), contract_error);
    }
}

TEST_CASE("masked token cross-entropy") {
    SECTION("single-row closed form") {
        auto h = Tensor<double>::from({1.0, 0.0}, {1, 2});
        auto e = Tensor<double>::from({2.0, 0.0, 0.0, 1.0, -1.0, 0.5}, {3, 2});
        // logits = {2, 0, -1}
        double denom = std::exp(2.0) + 1.0 + std::exp(-1.0);
        auto loss = detail::masked_token_ce(h, e, {1});
        REQUIRE(loss.item() == Catch::Approx(std::log(denom) - 0.0).epsilon(1e-12));
    }
    SECTION("rows without targets contribute nothing") {
        auto h = Tensor<double>::from({1.0, 0.0, 0.5, 0.5}, {2, 2});
        auto e = Tensor<double>::from({2.0, 0.0, 0.0, 1.0}, {2, 2});
        auto all = detail::masked_token_ce(h, e, {0, -1});
        auto only = detail::masked_token_ce(
            Tensor<double>::from({1.0, 0.0}, {1, 2}), e, {0});
        REQUIRE(all.item() == only.item());
        auto none = detail::masked_token_ce(h, e, {-1, -1});
        REQUIRE(none.item() == 0.0);
        REQUIRE_FALSE(none.requires_grad());
    }
    SECTION("gradients match finite differences for hidden and table") {
        auto rng = CounterRng::stream(21, rng_tag::test);
        auto h = hlmtest::random_tensor<double>({3, 4}, rng);
        auto e = hlmtest::random_tensor<double>({6, 4}, rng);
        std::vector<int> targets{2, -1, 5};
        auto fd = hlmtest::fd_check({h, e}, [&] {
            return detail::masked_token_ce(h, e, targets);
        });
        REQUIRE(fd.checked == 36);
        REQUIRE(fd.max_rel_err < 1e-6);
    }
    SECTION("validation") {
        auto h = Tensor<double>::from({1.0, 0.0}, {1, 2});
        auto e = Tensor<double>::from({2.0, 0.0, 0.0, 1.0}, {2, 2});
        REQUIRE_THROWS_AS(detail::masked_token_ce(h, e, {2}), data_error);
        REQUIRE_THROWS_AS(detail::masked_token_ce(h, e, {0, 0}), dimension_error);
        auto wide = Tensor<double>::from({1.0, 0.0, 0.0}, {1, 3});
        REQUIRE_THROWS_AS(detail::masked_token_ce(wide, e, {0}), dimension_error);
    }
}

TEST_CASE("epoch shuffling and batching") {
    SECTION("epoch order is a seeded permutation") {
        auto a = detail::epoch_order(10, 5, 0);
        auto b = detail::epoch_order(10, 5, 0);
        auto c = detail::epoch_order(10, 5, 1);
        REQUIRE(a == b);
        REQUIRE(a != c);
        auto sorted = a;
        std::sort(sorted.begin(), sorted.end());
        REQUIRE(sorted == std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9});
    }
    SECTION("cursor yields whole batches and drops the epoch remainder") {
        detail::BatchCursor cursor(10, 3, 5);
        auto epoch0 = detail::epoch_order(10, 5, 0);
        auto epoch1 = detail::epoch_order(10, 5, 1);
        std::vector<std::size_t> seen;
        for (int b = 0; b < 3; ++b) {
            auto batch = cursor.next();
            REQUIRE(batch.size() == 3);
            seen.insert(seen.end(), batch.begin(), batch.end());
        }
        REQUIRE(seen == std::vector<std::size_t>(epoch0.begin(), epoch0.begin() + 9));
        auto batch = cursor.next();  // item 10 of epoch 0 is dropped
        REQUIRE(batch == std::vector<std::size_t>(epoch1.begin(), epoch1.begin() + 3));
    }
    SECTION("batch larger than the dataset is rejected") {
        REQUIRE_THROWS_AS(detail::BatchCursor(3, 4, 0), data_error);
    }
}

TEST_CASE("teacher contrastive training") {
    auto w = tiny_world();
    REQUIRE(w.pairs.size() >= 8);

    SECTION("loss trajectory is logged, finite, and decreasing") {
        auto q = Encoder<float>::init(tiny_config(), 50);
        auto d = Encoder<float>::init(tiny_config(), 51);
        auto out = train_teacher(q, d, w.corpus, w.pairs, tiny_train(40, 1e-2));
        REQUIRE(out.loss_trajectory.size() == 40);
        for (double v : out.loss_trajectory) {
            REQUIRE(std::isfinite(v));
            REQUIRE(v >= 0.0);
        }
        REQUIRE(mean_of(out.loss_trajectory, 35, 40) <
                mean_of(out.loss_trajectory, 0, 5));
    }
    SECTION("training is a pure function of config and seed") {
        auto q1 = Encoder<float>::init(tiny_config(), 52);
        auto d1 = Encoder<float>::init(tiny_config(), 53);
        auto q2 = q1.clone(), d2 = d1.clone();
        auto o1 = train_teacher(q1, d1, w.corpus, w.pairs, tiny_train(10));
        auto o2 = train_teacher(q2, d2, w.corpus, w.pairs, tiny_train(10));
        REQUIRE(o1.loss_trajectory == o2.loss_trajectory);
        REQUIRE(q1.weight_checksum() == q2.weight_checksum());
        REQUIRE(d1.weight_checksum() == d2.weight_checksum());
    }
    SECTION("zero steps is a zero-shot pass-through") {
        auto q = Encoder<float>::init(tiny_config(), 54);
        auto d = Encoder<float>::init(tiny_config(), 55);
        auto before_q = q.weight_checksum(), before_d = d.weight_checksum();
        auto out = train_teacher(q, d, w.corpus, w.pairs, tiny_train(0));
        REQUIRE(out.loss_trajectory.empty());
        REQUIRE(q.weight_checksum() == before_q);
        REQUIRE(d.weight_checksum() == before_d);
    }
    SECTION("adapter mode trains and merges back to a dense tower") {
        auto q1 = Encoder<float>::init(tiny_config(), 56);
        auto d1 = Encoder<float>::init(tiny_config(), 57);
        auto q2 = q1.clone(), d2 = d1.clone();
        auto cfg = tiny_train(8);
        cfg.lora_rank = 2;
        auto o1 = train_teacher(q1, d1, w.corpus, w.pairs, cfg, TrainMode::lora);
        REQUIRE(o1.loss_trajectory.size() == 8);
        REQUIRE(q1.lora.empty());
        REQUIRE(d1.lora.empty());
        REQUIRE(q1.weight_checksum() != q2.weight_checksum());  // merged delta
        auto o2 = train_teacher(q2, d2, w.corpus, w.pairs, cfg, TrainMode::lora);
        REQUIRE(o1.loss_trajectory == o2.loss_trajectory);
        REQUIRE(q1.weight_checksum() == q2.weight_checksum());
    }
    SECTION("oracle features change the training signal") {
        auto q1 = Encoder<float>::init(tiny_config(), 58);
        auto d1 = Encoder<float>::init(tiny_config(), 59);
        auto q2 = q1.clone(), d2 = d1.clone();
        auto plain = train_teacher(q1, d1, w.corpus, w.pairs, tiny_train(5));
        auto oracle =
            train_teacher(q2, d2, w.corpus, w.pairs, tiny_train(5),
                          TrainMode::full, FeatureChannel::oracle, &w.model);
        REQUIRE(plain.loss_trajectory != oracle.loss_trajectory);
    }
    SECTION("frozen towers and bad configs are rejected") {
        auto q = Encoder<float>::init(tiny_config(), 60);
        auto d = Encoder<float>::init(tiny_config(), 61);
        auto cfg = tiny_train(5);
        cfg.freeze_query = cfg.freeze_doc = true;
        REQUIRE_THROWS_AS(train_teacher(q, d, w.corpus, w.pairs, cfg), config_error);
        auto narrow = tiny_config();
        narrow.embed_dim = 4;
        auto d4 = Encoder<float>::init(narrow, 62);
        REQUIRE_THROWS_AS(train_teacher(q, d4, w.corpus, w.pairs, tiny_train(5)),
                          config_error);
        REQUIRE_THROWS_AS(train_teacher(q, d, w.corpus, {}, tiny_train(5)),
                          data_error);
        REQUIRE_THROWS_AS(
            train_teacher(q, d, w.corpus, w.pairs, tiny_train(5), TrainMode::full,
                          FeatureChannel::oracle, nullptr),
            config_error);
        auto bad_pairs = w.pairs;
        bad_pairs[0].positive_id = 999;
        REQUIRE_THROWS_AS(train_teacher(q, d, w.corpus, bad_pairs, tiny_train(5)),
                          data_error);
    }
    SECTION("one-shot baseline trains both towers jointly") {
        Encoder<float> q, d;
        auto out = one_shot_asymmetric(tiny_config(), tiny_config(2), w.corpus,
                                       w.pairs, tiny_train(20), q, d);
        REQUIRE(out.loss_trajectory.size() == 20);
        REQUIRE(q.cfg.n_layers == 1);
        REQUIRE(d.cfg.n_layers == 2);
        REQUIRE(mean_of(out.loss_trajectory, 16, 20) <
                mean_of(out.loss_trajectory, 0, 4));
    }
}

TEST_CASE("masked-token pretraining") {
    auto model = make_topic_model(4, 64, 2, 12);
    auto corpus = alignment_corpus(model, 40, 0.5, 6);
    PretrainConfig cfg;
    cfg.batch_size = 4;
    cfg.peak_lr = 5e-3;
    cfg.total_steps = 40;
    cfg.seed = 7;

    SECTION("loss starts near uniform-vocabulary entropy and decreases") {
        auto student = Encoder<float>::init(tiny_config(), 70);
        auto out = pretrain_student(student, corpus, cfg);
        REQUIRE(out.loss_trajectory.size() == 40);
        REQUIRE(out.loss_trajectory.front() ==
                Catch::Approx(std::log(64.0)).margin(1.0));
        REQUIRE(mean_of(out.loss_trajectory, 35, 40) <
                mean_of(out.loss_trajectory, 0, 5));
    }
    SECTION("deterministic and inert at zero steps") {
        auto s1 = Encoder<float>::init(tiny_config(), 71);
        auto s2 = s1.clone();
        auto o1 = pretrain_student(s1, corpus, cfg);
        auto o2 = pretrain_student(s2, corpus, cfg);
        REQUIRE(o1.loss_trajectory == o2.loss_trajectory);
        REQUIRE(s1.weight_checksum() == s2.weight_checksum());

        auto s3 = Encoder<float>::init(tiny_config(), 72);
        auto before = s3.weight_checksum();
        auto none = cfg;
        none.total_steps = 0;
        REQUIRE(pretrain_student(s3, corpus, none).loss_trajectory.empty());
        REQUIRE(s3.weight_checksum() == before);
    }
    SECTION("validation") {
        auto student = Encoder<float>::init(tiny_config(), 73);
        auto bad = cfg;
        bad.mask_prob = 0.0;
        REQUIRE_THROWS_AS(pretrain_student(student, corpus, bad), config_error);
        REQUIRE_THROWS_AS(pretrain_student(student, AlignmentCorpus{}, cfg),
                          data_error);
    }
}

TEST_CASE("shared backbone warm-up for dual towers") {
    auto model = make_topic_model(4, 64, 2, 12);
    auto corpus = alignment_corpus(model, 40, 0.5, 6);
    PretrainConfig cfg;
    cfg.batch_size = 4;
    cfg.peak_lr = 5e-3;
    cfg.total_steps = 30;
    cfg.seed = 7;

    SECTION("both towers leave the warm-up bit-identical and trained") {
        auto q = Encoder<float>::init(tiny_config(1, {3}), 80);
        auto d = Encoder<float>::init(tiny_config(), 81);
        auto fresh_d = d.weight_checksum();
        REQUIRE(q.weight_checksum() != d.weight_checksum());

        auto out = warm_dual_towers(q, d, corpus, cfg);
        REQUIRE(out.loss_trajectory.size() == 30);
        REQUIRE(q.weight_checksum() == d.weight_checksum());
        REQUIRE(d.weight_checksum() != fresh_d);
        // the query tower keeps its prompt behavior; only weights are shared
        REQUIRE(q.apply_prompt({5}).size() == 2);
        REQUIRE(d.apply_prompt({5}).size() == 1);
    }
    SECTION("deterministic across repeated runs") {
        auto q1 = Encoder<float>::init(tiny_config(), 82);
        auto d1 = Encoder<float>::init(tiny_config(), 83);
        auto q2 = Encoder<float>::init(tiny_config(), 82);
        auto d2 = Encoder<float>::init(tiny_config(), 83);
        auto o1 = warm_dual_towers(q1, d1, corpus, cfg);
        auto o2 = warm_dual_towers(q2, d2, corpus, cfg);
        REQUIRE(o1.loss_trajectory == o2.loss_trajectory);
        REQUIRE(q1.weight_checksum() == q2.weight_checksum());
    }
    SECTION("mismatched tower architectures are rejected") {
        auto q = Encoder<float>::init(tiny_config(2), 84);
        auto d = Encoder<float>::init(tiny_config(1), 85);
        REQUIRE_THROWS_AS(warm_dual_towers(q, d, corpus, cfg), config_error);
    }
}

TEST_CASE("student-teacher alignment") {
    auto model = make_topic_model(4, 64, 2, 13);
    auto corpus = alignment_corpus(model, 40, 0.5, 6);

    SECTION("an exact teacher copy starts at zero loss and never moves") {
        auto teacher = Encoder<float>::init(tiny_config(), 80);
        auto student = teacher.clone();
        auto before = student.weight_checksum();
        auto out = align_student(student, teacher, corpus, tiny_train(5));
        REQUIRE(out.loss_trajectory.size() == 5);
        REQUIRE(out.loss_trajectory.front() == 0.0);
        REQUIRE(student.weight_checksum() == before);
    }
    SECTION("alignment pulls a random student toward the teacher") {
        auto teacher = Encoder<float>::init(tiny_config(2, {1, 2}), 81);
        auto student = Encoder<float>::init(tiny_config(), 82);
        auto out = align_student(student, teacher, corpus, tiny_train(60, 1e-2));
        REQUIRE(out.loss_trajectory.size() == 60);
        REQUIRE(mean_of(out.loss_trajectory, 55, 60) <
                0.5 * mean_of(out.loss_trajectory, 0, 5));
    }
    SECTION("the teacher prompt participates in the target embeddings") {
        auto teacher = Encoder<float>::init(tiny_config(1, {1, 2}), 83);
        auto student = teacher.clone();
        student.cfg.prompt_prefix.clear();  // same weights, no prompt
        auto out = align_student(student, teacher, corpus, tiny_train(1));
        REQUIRE(out.loss_trajectory.front() > 1e-4);
    }
    SECTION("deterministic across reruns") {
        auto teacher = Encoder<float>::init(tiny_config(), 84);
        auto s1 = Encoder<float>::init(tiny_config(), 85);
        auto s2 = s1.clone();
        auto o1 = align_student(s1, teacher, corpus, tiny_train(12));
        auto o2 = align_student(s2, teacher, corpus, tiny_train(12));
        REQUIRE(o1.loss_trajectory == o2.loss_trajectory);
        REQUIRE(s1.weight_checksum() == s2.weight_checksum());
    }
    SECTION("validation") {
        auto teacher = Encoder<float>::init(tiny_config(), 86);
        auto narrow = tiny_config();
        narrow.embed_dim = 4;
        auto student = Encoder<float>::init(narrow, 87);
        REQUIRE_THROWS_AS(align_student(student, teacher, corpus, tiny_train(5)),
                          config_error);
        auto ok = Encoder<float>::init(tiny_config(), 88);
        REQUIRE_THROWS_AS(align_student(ok, teacher, AlignmentCorpus{}, tiny_train(5)),
                          data_error);
    }
}

TEST_CASE("contrastive refinement against a frozen document tower") {
    auto w = tiny_world();
    auto doc = Encoder<float>::init(tiny_config(2), 90);

    SECTION("improves the contrastive loss without touching documents") {
        auto student = Encoder<float>::init(tiny_config(), 91);
        auto doc_sum = doc.weight_checksum();
        auto index_before = build_index(doc, w.corpus.documents);
        auto out = contrastive_refine(student, doc, w.corpus, w.pairs,
                                      tiny_train(40, 1e-2));
        REQUIRE(out.loss_trajectory.size() == 40);
        REQUIRE(mean_of(out.loss_trajectory, 35, 40) <
                mean_of(out.loss_trajectory, 0, 5));
        REQUIRE(doc.weight_checksum() == doc_sum);
        auto index_after = build_index(doc, w.corpus.documents);
        REQUIRE(std::memcmp(index_before.embeddings.data(),
                            index_after.embeddings.data(),
                            index_before.embeddings.numel() * sizeof(float)) == 0);
    }
    SECTION("zero steps returns the aligned student unchanged") {
        auto student = Encoder<float>::init(tiny_config(), 92);
        auto before = student.weight_checksum();
        auto out = contrastive_refine(student, doc, w.corpus, w.pairs,
                                      tiny_train(0));
        REQUIRE(out.loss_trajectory.empty());
        REQUIRE(student.weight_checksum() == before);
    }
    SECTION("deterministic across reruns") {
        auto s1 = Encoder<float>::init(tiny_config(), 93);
        auto s2 = s1.clone();
        auto o1 = contrastive_refine(s1, doc, w.corpus, w.pairs, tiny_train(10));
        auto o2 = contrastive_refine(s2, doc, w.corpus, w.pairs, tiny_train(10));
        REQUIRE(o1.loss_trajectory == o2.loss_trajectory);
        REQUIRE(s1.weight_checksum() == s2.weight_checksum());
    }
    SECTION("plain in-batch objective also runs") {
        auto student = Encoder<float>::init(tiny_config(), 94);
        auto cfg = tiny_train(5);
        cfg.loss = LossKind::info_nce;
        auto out = contrastive_refine(student, doc, w.corpus, w.pairs, cfg);
        REQUIRE(out.loss_trajectory.size() == 5);
    }
}

TEST_CASE("progressive prune-and-align") {
    auto model = make_topic_model(4, 64, 2, 14);
    auto corpus = alignment_corpus(model, 40, 0.5, 6);
    auto teacher = Encoder<float>::init(tiny_config(), 100);

    SECTION("empty schedule is the identity") {
        auto student = Encoder<float>::init(tiny_config(3), 101);
        auto before = student.weight_checksum();
        auto reports = progressive_prune_align(student, teacher, corpus,
                                               PruneSchedule{}, tiny_train(5));
        REQUIRE(reports.empty());
        REQUIRE(student.weight_checksum() == before);
    }
    SECTION("full-shape stage is a pure re-alignment pass") {
        auto student = Encoder<float>::init(tiny_config(3), 102);
        auto before = student.weight_checksum();
        PruneSchedule schedule;
        schedule.stages = {{3, 32}};
        auto reports = progressive_prune_align(student, teacher, corpus, schedule,
                                               tiny_train(10));
        REQUIRE(reports.size() == 1);
        REQUIRE(student.cfg.n_layers == 3);
        REQUIRE(student.cfg.ffn_dim == 32);
        REQUIRE(student.weight_checksum() != before);  // alignment trained it
        REQUIRE(std::isfinite(reports[0].final_align_loss));
    }
    SECTION("multi-stage schedule shrinks the student and logs metrics") {
        auto student = Encoder<float>::init(tiny_config(3), 103);
        PruneSchedule schedule;
        schedule.stages = {{2, 24}, {1, 16}};
        int probes = 0;
        auto reports = progressive_prune_align(
            student, teacher, corpus, schedule, tiny_train(8),
            std::function<double(const Encoder<float>&)>(
                [&](const Encoder<float>& e) {
                    ++probes;
                    return static_cast<double>(e.cfg.n_layers);
                }));
        REQUIRE(student.cfg.n_layers == 1);
        REQUIRE(student.cfg.ffn_dim == 16);
        REQUIRE(reports.size() == 2);
        REQUIRE(probes == 2);
        REQUIRE(reports[0].quality == 2.0);
        REQUIRE(reports[1].quality == 1.0);
        REQUIRE(reports[1].target.k_layers == 1);
        auto emb = student.embed(corpus.items[0].tokens);
        REQUIRE(emb.dim(0) == 8);
    }
    SECTION("validation") {
        auto student = Encoder<float>::init(tiny_config(3), 104);
        PruneSchedule widening;
        widening.stages = {{2, 16}, {2, 24}};
        REQUIRE_THROWS_AS(progressive_prune_align(student, teacher, corpus,
                                                  widening, tiny_train(5)),
                          config_error);
        PruneSchedule ok;
        ok.stages = {{2, 24}};
        REQUIRE_THROWS_AS(
            progressive_prune_align(student, teacher, corpus, ok, tiny_train(5),
                                    {}, 0),
            config_error);
    }
}

TEST_CASE("per-step loss logs serialize as CSV") {
    PhaseOutput out;
    out.loss_trajectory = {2.0, 1.5, 1.25};
    TrainConfig cfg;
    cfg.peak_lr = 1.0;
    cfg.warmup_fraction = 0.0;
    cfg.total_steps = 4;
    std::ostringstream os;
    write_loss_log(os, out, cfg);
    REQUIRE(os.str() ==
            "step,lr,loss\n"
            "0,0.75,2\n"
            "1,0.5,1.5\n"
            "2,0.25,1.25\n");
}
