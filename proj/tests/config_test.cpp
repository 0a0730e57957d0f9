// Experiment-file parsing: strict structured-text configs with typed
// sections, line-anchored syntax errors, unknown-key rejection, and the
// semantic checks that keep a parsed run internally consistent.

#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "hlm/config.hpp"

using namespace hlm;

namespace {

const char* kFullConfig = R"(# A fully spelled-out experiment.
seed = 42

[corpus]
n_topics = 8
vocab_size = 128
topic_mix_sparsity = 2
concentration = 6.5
n_docs = 120
n_queries = 30
doc_len = 12
query_len = 6
hard_negatives = 3
alignment_items = 64
general_fraction = 0.5

[teacher]
hidden_dim = 32
ffn_dim = 48
n_layers = 4
n_query_heads = 4
n_kv_heads = 2
head_dim = 8
embed_dim = 16
max_seq_len = 24
prompt_prefix = [5, 7, 11]

[student]
hidden_dim = 16
ffn_dim = 24
n_layers = 3
n_query_heads = 2
n_kv_heads = 1
head_dim = 8
embed_dim = 16
max_seq_len = 24

[train_teacher]
batch_size = 8
peak_lr = 2e-3
warmup_fraction = 0.2
total_steps = 50
loss = "info_nce"
temperature = 0.1
in_batch_negatives = true
same_tower_negatives = true
mask_false_negatives = false
false_negative_margin = 0.05
mode = "lora"
lora_rank = 4
features = "oracle"
snapshot_every = 10
warmup_steps = 30
warmup_mask_prob = 0.5
warmup_lr = 2e-3

[pretrain]
batch_size = 4
peak_lr = 5e-4
warmup_fraction = 0.0
total_steps = 20
mask_prob = 0.25

[align]
batch_size = 8
peak_lr = 1.5e-3
total_steps = 40
init = "random"
target_loss = 0.75
snapshot_every = 5

[refine]
batch_size = 8
peak_lr = 1e-3
total_steps = 30
temperature = 0.2

[prune]
schedule_layers = [2, 1]
schedule_ffn = [16, 12]
batch_size = 8
peak_lr = 8e-4
total_steps = 25
calibration_items = 32
rank_by_deviation = true

[eval]
k = 5
threshold = 0.4
truncate_dims = [16, 8, 4]
)";

std::string minimal_config(const std::string& extra = "") {
    return "[corpus]\nn_docs = 40\nn_queries = 10\n" + extra;
}

}  // namespace

TEST_CASE("a fully spelled-out config binds every section") {
    RunConfig run = parse_run_config(kFullConfig);

    CHECK(run.seed == 42);
    CHECK(run.corpus.n_topics == 8);
    CHECK(run.corpus.vocab_size == 128);
    CHECK(run.corpus.topic_mix_sparsity == 2);
    CHECK(run.corpus.concentration == 6.5);
    CHECK(run.corpus.n_docs == 120);
    CHECK(run.corpus.n_queries == 30);
    CHECK(run.corpus.doc_len == 12);
    CHECK(run.corpus.query_len == 6);
    CHECK(run.corpus.hard_negatives == 3);
    CHECK(run.corpus.alignment_items == 64);
    CHECK(run.corpus.general_fraction == 0.5);

    CHECK(run.teacher.vocab_size == 128);  // towers inherit the corpus vocab
    CHECK(run.teacher.hidden_dim == 32);
    CHECK(run.teacher.ffn_dim == 48);
    CHECK(run.teacher.n_layers == 4);
    CHECK(run.teacher.prompt_prefix == std::vector<int>{5, 7, 11});
    CHECK(run.student.vocab_size == 128);
    CHECK(run.student.hidden_dim == 16);
    CHECK(run.student.n_layers == 3);
    CHECK(run.student.prompt_prefix.empty());

    const auto& tt = run.train_teacher;
    CHECK(tt.train.batch_size == 8);
    CHECK(tt.train.peak_lr == 2e-3);
    CHECK(tt.train.warmup_fraction == 0.2);
    CHECK(tt.train.total_steps == 50);
    CHECK(tt.train.loss == LossKind::info_nce);
    CHECK(tt.train.cl.temperature == 0.1);
    CHECK(tt.train.cl.use_in_batch_negatives);
    CHECK(tt.train.cl.use_same_tower_negatives);
    CHECK_FALSE(tt.train.cl.mask_false_negatives);
    CHECK(tt.train.cl.false_negative_margin == 0.05);
    CHECK(tt.mode == TrainMode::lora);
    CHECK(tt.train.lora_rank == 4);
    CHECK(tt.features == FeatureChannel::oracle);
    CHECK(tt.train.snapshot_every == 10);
    CHECK(tt.warmup.total_steps == 30);
    CHECK(tt.warmup.mask_prob == 0.5);
    CHECK(tt.warmup.peak_lr == 2e-3);

    CHECK(run.pretrain.batch_size == 4);
    CHECK(run.pretrain.peak_lr == 5e-4);
    CHECK(run.pretrain.warmup_fraction == 0.0);
    CHECK(run.pretrain.total_steps == 20);
    CHECK(run.pretrain.mask_prob == 0.25);

    CHECK(run.align.train.batch_size == 8);
    CHECK(run.align.train.peak_lr == 1.5e-3);
    CHECK(run.align.train.total_steps == 40);
    CHECK(run.align.init == InitMode::random);
    CHECK(run.align.target_loss == 0.75);
    CHECK(run.align.train.snapshot_every == 5);

    CHECK(run.refine.batch_size == 8);
    CHECK(run.refine.peak_lr == 1e-3);
    CHECK(run.refine.total_steps == 30);
    CHECK(run.refine.cl.temperature == 0.2);
    CHECK(run.refine.loss == LossKind::qwen_cl);

    REQUIRE(run.prune.schedule.stages.size() == 2);
    CHECK(run.prune.schedule.stages[0].k_layers == 2);
    CHECK(run.prune.schedule.stages[0].k_ffn == 16);
    CHECK(run.prune.schedule.stages[1].k_layers == 1);
    CHECK(run.prune.schedule.stages[1].k_ffn == 12);
    CHECK(run.prune.stage_align.batch_size == 8);
    CHECK(run.prune.stage_align.peak_lr == 8e-4);
    CHECK(run.prune.stage_align.total_steps == 25);
    CHECK(run.prune.calibration_items == 32);
    CHECK(run.prune.rank_mode == LayerRankMode::deviation_from_identity);

    CHECK(run.eval.k == 5);
    CHECK(run.eval.threshold == 0.4);
    CHECK(run.eval.truncate_dims == std::vector<int>{16, 8, 4});

    SECTION("derived world matches the corpus section") {
        auto model = run.topic_model();
        CHECK(model.n_topics == 8);
        CHECK(model.vocab_size == 128);
        CHECK(model.seed == 42);
        auto corpus = run.make_corpus();
        CHECK(corpus.documents.size() == 120);
        CHECK(corpus.queries.size() == 30);
        CHECK(corpus.documents[0].tokens.size() == 12);
        CHECK(corpus.queries[0].tokens.size() == 6);
        auto alignment = run.make_alignment_corpus();
        CHECK(alignment.items.size() == 64);
    }
}

TEST_CASE("a minimal config keeps the documented defaults") {
    RunConfig run = parse_run_config(minimal_config());

    CHECK(run.seed == 0);
    CHECK(run.corpus.n_topics == 16);
    CHECK(run.corpus.vocab_size == 512);
    CHECK(run.corpus.topic_mix_sparsity == 2);
    CHECK(run.corpus.concentration == 8.0);
    CHECK(run.corpus.doc_len == 24);
    CHECK(run.corpus.query_len == 8);
    CHECK(run.corpus.hard_negatives == 2);
    CHECK(run.corpus.alignment_items == 2048);
    CHECK(run.corpus.general_fraction == 0.25);

    EncoderConfig fresh;
    for (const EncoderConfig* enc : {&run.teacher, &run.student}) {
        CHECK(enc->vocab_size == 512);
        CHECK(enc->hidden_dim == fresh.hidden_dim);
        CHECK(enc->ffn_dim == fresh.ffn_dim);
        CHECK(enc->n_layers == fresh.n_layers);
        CHECK(enc->n_query_heads == fresh.n_query_heads);
        CHECK(enc->n_kv_heads == fresh.n_kv_heads);
        CHECK(enc->head_dim == fresh.head_dim);
        CHECK(enc->embed_dim == fresh.embed_dim);
        CHECK(enc->max_seq_len == fresh.max_seq_len);
        CHECK(enc->prompt_prefix.empty());
    }

    CHECK(run.train_teacher.train.batch_size == 64);
    CHECK(run.train_teacher.train.peak_lr == 3e-3);
    CHECK(run.train_teacher.train.warmup_fraction == 0.10);
    CHECK(run.train_teacher.train.total_steps == 2000);
    CHECK(run.train_teacher.train.loss == LossKind::qwen_cl);
    CHECK(run.train_teacher.train.cl.temperature == 0.05);
    CHECK(run.train_teacher.train.cl.mask_false_negatives);
    CHECK(run.train_teacher.mode == TrainMode::full);
    CHECK(run.train_teacher.features == FeatureChannel::deployable);
    CHECK(run.train_teacher.warmup.total_steps == 0);  // warmup is opt-in
    CHECK(run.train_teacher.warmup.mask_prob == 0.3);
    CHECK(run.train_teacher.warmup.peak_lr == 3e-3);
    CHECK(run.train_teacher.warmup.batch_size == 32);

    CHECK(run.pretrain.batch_size == 32);
    CHECK(run.pretrain.peak_lr == 1e-3);
    CHECK(run.pretrain.total_steps == 500);
    CHECK(run.pretrain.mask_prob == 0.15);

    CHECK(run.align.train.peak_lr == 1e-3);  // alignment default is gentler
    CHECK(run.align.train.total_steps == 2000);
    CHECK(run.align.init == InitMode::pretrained);
    CHECK(run.align.target_loss == 0.0);

    CHECK(run.refine.peak_lr == 3e-3);
    CHECK(run.refine.total_steps == 2000);

    CHECK(run.prune.schedule.stages.empty());
    CHECK(run.prune.stage_align.peak_lr == 1e-3);
    CHECK(run.prune.stage_align.total_steps == 500);
    CHECK(run.prune.calibration_items == 512);
    CHECK(run.prune.rank_mode == LayerRankMode::score);

    CHECK(run.eval.k == 10);
    CHECK(run.eval.threshold == 0.5);
    CHECK(run.eval.truncate_dims.empty());
}

TEST_CASE("missing required keys are reported by name") {
    CHECK_THROWS_WITH(parse_run_config("[corpus]\nn_queries = 10\n"),
                      Catch::Matchers::ContainsSubstring("n_docs"));
    CHECK_THROWS_WITH(parse_run_config("[corpus]\nn_docs = 10\n"),
                      Catch::Matchers::ContainsSubstring("n_queries"));
    // A wholly absent [corpus] section reports its first required key.
    CHECK_THROWS_WITH(parse_run_config("seed = 1\n"),
                      Catch::Matchers::ContainsSubstring("n_docs"));
}

TEST_CASE("unknown keys and sections are rejected with their line") {
    SECTION("unknown key inside a known section") {
        auto text = minimal_config("n_ducks = 7\n");  // line 4
        CHECK_THROWS_WITH(parse_run_config(text),
                          Catch::Matchers::ContainsSubstring("line 4") &&
                              Catch::Matchers::ContainsSubstring("n_ducks") &&
                              Catch::Matchers::ContainsSubstring("[corpus]"));
    }
    SECTION("unknown top-level key") {
        auto text = "sead = 3\n" + minimal_config();
        CHECK_THROWS_WITH(parse_run_config(text),
                          Catch::Matchers::ContainsSubstring("line 1") &&
                              Catch::Matchers::ContainsSubstring("sead"));
    }
    SECTION("unknown section") {
        auto text = minimal_config("[corups]\nn = 1\n");  // header on line 4
        CHECK_THROWS_WITH(parse_run_config(text),
                          Catch::Matchers::ContainsSubstring("line 4") &&
                              Catch::Matchers::ContainsSubstring("[corups]"));
    }
}

TEST_CASE("syntax errors are line-anchored") {
    auto fails_at = [](const std::string& text, const std::string& line,
                       const std::string& what) {
        CHECK_THROWS_WITH(ParsedConfig::from_text(text),
                          Catch::Matchers::ContainsSubstring(line) &&
                              Catch::Matchers::ContainsSubstring(what));
    };
    fails_at("[corpus]\nn_docs 40\n", "line 2", "key = value");
    fails_at("[corpus\nn_docs = 40\n", "line 1", "malformed section header");
    fails_at("[]\n", "line 1", "malformed section name");
    fails_at("[corpus]\nname = \"unterminated\n", "line 2", "unterminated string");
    fails_at("x = \n", "line 1", "empty value");
    fails_at("a b = 1\n", "line 1", "malformed key name");
    fails_at("[corpus]\nn_docs = 1\nn_docs = 2\n", "line 3", "duplicate key");
    fails_at("[corpus]\nn_docs = 1\n[corpus]\n", "line 3", "duplicate section");

    SECTION("typed value errors carry the line too") {
        CHECK_THROWS_WITH(
            parse_run_config("[corpus]\nn_docs = 4O\nn_queries = 10\n"),
            Catch::Matchers::ContainsSubstring("line 2") &&
                Catch::Matchers::ContainsSubstring("integer"));
        CHECK_THROWS_WITH(
            parse_run_config(minimal_config("concentration = soft\n")),
            Catch::Matchers::ContainsSubstring("line 4") &&
                Catch::Matchers::ContainsSubstring("number"));
        CHECK_THROWS_WITH(
            parse_run_config(minimal_config("[prune]\nrank_by_deviation = yes\n")),
            Catch::Matchers::ContainsSubstring("line 5") &&
                Catch::Matchers::ContainsSubstring("true or false"));
        CHECK_THROWS_WITH(
            parse_run_config(minimal_config("[eval]\ntruncate_dims = [4, four]\n")),
            Catch::Matchers::ContainsSubstring("line 5") &&
                Catch::Matchers::ContainsSubstring("array element"));
        CHECK_THROWS_WITH(
            parse_run_config(minimal_config("[align]\ninit = \"warm\"\n")),
            Catch::Matchers::ContainsSubstring("line 5") &&
                Catch::Matchers::ContainsSubstring("pretrained"));
        CHECK_THROWS_WITH(
            parse_run_config(minimal_config("[train_teacher]\nloss = qwen_cl\n")),
            Catch::Matchers::ContainsSubstring("line 5") &&
                Catch::Matchers::ContainsSubstring("quoted string"));
    }
}

TEST_CASE("comments and blank lines do not affect the parse") {
    std::string commented =
        "# top comment\n"
        "seed = 9   # trailing\n"
        "\n"
        "[corpus]   # section comment\n"
        "n_docs = 40\n"
        "\n"
        "n_queries = 10\n"
        "[align]\n"
        "init = \"random\"  # the string itself may hold a '#'\n";
    RunConfig a = parse_run_config(commented);
    RunConfig b = parse_run_config(
        "seed = 9\n[corpus]\nn_docs = 40\nn_queries = 10\n[align]\ninit = \"random\"\n");
    CHECK(a.seed == b.seed);
    CHECK(a.corpus.n_docs == b.corpus.n_docs);
    CHECK(a.align.init == InitMode::random);
    CHECK(a.teacher_train().seed == b.teacher_train().seed);

    SECTION("a '#' inside a quoted string survives") {
        auto doc = ParsedConfig::from_text("x = \"a#b\" # note\n");
        const auto* e = doc.find("", "x");
        REQUIRE(e != nullptr);
        CHECK(e->text == "\"a#b\"");
    }
}

TEST_CASE("semantic validation rejects inconsistent runs") {
    auto rejects = [](const std::string& extra, const std::string& what) {
        CHECK_THROWS_WITH(parse_run_config(minimal_config(extra)),
                          Catch::Matchers::ContainsSubstring(what));
    };
    rejects("[student]\nembed_dim = 16\n", "embed_dim must match");
    rejects("[prune]\nschedule_layers = [4]\nschedule_ffn = [64, 32]\n",
            "same length");
    rejects("[prune]\nschedule_layers = [2, 4]\nschedule_ffn = [64, 64]\n",
            "non-increasing");
    rejects("[prune]\nschedule_layers = [9]\nschedule_ffn = [64]\n",
            "outside [1, 6]");
    rejects("[train_teacher]\ntemperature = 0.0\n", "temperature");
    rejects("[eval]\ntruncate_dims = [48]\n", "truncate dimension 48");
    rejects("[eval]\nthreshold = 1.5\n", "threshold");
    rejects("[teacher]\nprompt_prefix = [600]\n", "prompt token 600");
    rejects("[student]\nprompt_prefix = [1]\n", "student prompt_prefix");
    rejects("[teacher]\nhead_dim = 10\n", "head_dim");  // 4 * 10 != 64
    rejects("[pretrain]\nmask_prob = 0.0\n", "mask_prob");
    rejects("[train_teacher]\nwarmup_steps = -1\n", "warmup_steps");
    rejects("[train_teacher]\nwarmup_mask_prob = 1.5\n", "warmup_mask_prob");
    rejects("[train_teacher]\nwarmup_lr = 0.0\n", "warmup_lr");
    rejects("[align]\ntarget_loss = -1.0\n", "target_loss");
    rejects("[corpus]\n", "duplicate section");  // sanity on the helper itself
    CHECK_THROWS_WITH(
        parse_run_config("[corpus]\nn_docs = 0\nn_queries = 10\n"),
        Catch::Matchers::ContainsSubstring("n_docs"));
}

TEST_CASE("phase seeds derive from the run seed and stay distinct") {
    RunConfig a = parse_run_config("seed = 5\n" + minimal_config());
    RunConfig b = parse_run_config("seed = 6\n" + minimal_config());

    CHECK(a.teacher_train().seed == mix64(5 ^ 0x7463ull));
    CHECK(a.align_train().seed == mix64(5 ^ 0x616cull));
    CHECK(a.refine_train().seed == mix64(5 ^ 0x7266ull));
    CHECK(a.prune_stage_train().seed == mix64(5 ^ 0x7072ull));
    CHECK(a.pretrain_config().seed == mix64(5 ^ 0x7074ull));
    CHECK(a.teacher_warmup().seed == mix64(5 ^ 0x7761726dull));

    std::vector<std::uint64_t> seeds = {
        a.teacher_train().seed,      a.align_train().seed,
        a.refine_train().seed,       a.prune_stage_train().seed,
        a.pretrain_config().seed,    a.teacher_warmup().seed};
    std::sort(seeds.begin(), seeds.end());
    CHECK(std::adjacent_find(seeds.begin(), seeds.end()) == seeds.end());

    CHECK(a.teacher_train().seed != b.teacher_train().seed);
    CHECK(a.align_train().seed != b.align_train().seed);

    SECTION("changing the seed after parse flows into the accessors") {
        RunConfig c = a;
        c.seed = 6;
        CHECK(c.teacher_train().seed == b.teacher_train().seed);
        CHECK(c.make_corpus().documents[0].tokens ==
              b.make_corpus().documents[0].tokens);
    }
}

TEST_CASE("load_run_config reads files and prefixes errors with the path") {
    auto dir = std::filesystem::temp_directory_path() / "hlm_config_test";
    std::filesystem::create_directories(dir);
    auto good = (dir / "good.toml").string();
    auto bad = (dir / "bad.toml").string();
    {
        std::ofstream out(good);
        out << minimal_config();
    }
    {
        std::ofstream out(bad);
        out << "[corpus]\nn_docs = 40\nn_queries = 10\nwat = 1\n";
    }

    CHECK(load_run_config(good).corpus.n_docs == 40);
    CHECK_THROWS_WITH(load_run_config(bad),
                      Catch::Matchers::ContainsSubstring("bad.toml") &&
                          Catch::Matchers::ContainsSubstring("line 4"));
    CHECK_THROWS_AS(load_run_config((dir / "absent.toml").string()), data_error);
    std::filesystem::remove_all(dir);
}
