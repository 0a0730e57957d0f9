// Command-line driver for the retrieval lab. One subcommand per pipeline
// phase (gen-corpus, train-teacher, align, prune, refine, eval, bench) plus
// `pipeline` to chain them end to end. Every command is a pure function of
// its config file, seed, and input checkpoints: rerunning it reproduces the
// output artifacts byte for byte (benchmark timings excepted).
//
// Exit codes: 0 success, 1 usage or config error, 2 data/format error,
// 3 numeric failure.

#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "hlm/config.hpp"
#include "hlm/io.hpp"
#include "hlm/pruning.hpp"
#include "hlm/retrieval.hpp"
#include "hlm/synthgen.hpp"
#include "hlm/trainer.hpp"

namespace {

using namespace hlm;

// ---------------------------------------------------------------------------
// Shared phase drivers. `pipeline` and the per-phase subcommands call the
// same functions, so chaining subcommands by hand reproduces a pipeline run.
// ---------------------------------------------------------------------------

/// Prompts are a query-side behavior: the document tower of a dual encoder
/// shares the query tower's architecture but never prepends the prompt.
EncoderConfig doc_tower_config(EncoderConfig cfg) {
    cfg.prompt_prefix.clear();
    return cfg;
}

/// P@K of a (query tower, document index) pairing. Towers that were trained
/// on the oracle feature channel are served with it too: the augmentation is
/// an offline artifact that exists at query time, not a training-only input.
double measure_p_at_k(const RunConfig& run, const Encoder<float>& query_enc,
                      const Encoder<float>& doc_enc,
                      const SyntheticCorpus& corpus,
                      std::optional<int> truncate = std::nullopt,
                      FeatureChannel features = FeatureChannel::deployable,
                      const TopicModel* oracle_model = nullptr) {
    auto index = build_index(doc_enc, corpus.documents, truncate);
    std::vector<RetrievalResult> results;
    results.reserve(corpus.queries.size());
    for (const auto& q : corpus.queries) {
        auto emb =
            query_enc.embed(query_input(query_enc, q, features, oracle_model),
                            truncate);
        results.push_back(top_k(index, emb, run.eval.k));
    }
    return precision_at_k(results, corpus.queries, corpus.documents,
                          run.eval.threshold, run.eval.k);
}

struct TeacherResult {
    Encoder<float> query;
    Encoder<float> doc;
    PhaseOutput output;
};

TeacherResult run_teacher_phase(const RunConfig& run, const TopicModel& model,
                                const SyntheticCorpus& corpus,
                                const std::vector<SupervisedPair>& pairs) {
    TeacherResult r{
        Encoder<float>::init(run.teacher, run.init_seed(0x7131ull)),
        Encoder<float>::init(doc_tower_config(run.teacher),
                             run.init_seed(0x7164ull)),
        {}};
    auto warmup = run.teacher_warmup();
    if (warmup.total_steps > 0) {
        AlignmentCorpus text;
        text.items.reserve(corpus.documents.size());
        for (const auto& d : corpus.documents)
            text.items.push_back({d.tokens, false});
        warm_dual_towers(r.query, r.doc, text, warmup);
    }
    const TopicModel* oracle =
        run.train_teacher.features == FeatureChannel::oracle ? &model : nullptr;
    r.output = train_teacher(r.query, r.doc, corpus, pairs, run.teacher_train(),
                             run.train_teacher.mode, run.train_teacher.features,
                             oracle);
    return r;
}

struct AlignResult {
    Encoder<float> student;
    PhaseOutput pretrain;
    PhaseOutput align;
};

AlignResult run_align_phase(const RunConfig& run, const Encoder<float>& teacher_q,
                            const AlignmentCorpus& alignment) {
    AlignResult r{Encoder<float>::init(run.student, run.init_seed(0x7374ull)),
                  {},
                  {}};
    if (run.align.init == InitMode::pretrained)
        r.pretrain = pretrain_student(r.student, alignment, run.pretrain_config());
    r.align = align_student(r.student, teacher_q, alignment, run.align_train());
    return r;
}

// ---------------------------------------------------------------------------
// Artifact compatibility checks: checkpoints are self-describing, so a
// loaded tower must agree with the world and towers it is used against.
// ---------------------------------------------------------------------------

void check_corpus_vocab(const Encoder<float>& enc, const RunConfig& run,
                        const std::string& which) {
    if (enc.cfg.vocab_size != run.corpus.vocab_size)
        throw data_error(which + " checkpoint vocabulary (" +
                         std::to_string(enc.cfg.vocab_size) +
                         ") does not match the corpus vocabulary (" +
                         std::to_string(run.corpus.vocab_size) + ")");
}

void check_embed_match(const Encoder<float>& a, const std::string& a_name,
                       int want_dim, const std::string& want_name) {
    if (a.cfg.embed_dim != want_dim)
        throw data_error(a_name + " checkpoint embed_dim (" +
                         std::to_string(a.cfg.embed_dim) + ") does not match " +
                         want_name + " (" + std::to_string(want_dim) + ")");
}

// ---------------------------------------------------------------------------
// Output helpers.
// ---------------------------------------------------------------------------

void write_metrics(const std::string& path, const std::vector<PhaseSummary>& rows) {
    if (!path.empty()) atomic_write_file(path, phase_summary_csv(rows));
}

void print_phase(const std::string& name, const PhaseOutput& out, double p_at_k) {
    std::cout << "phase " << name << ": " << out.loss_trajectory.size()
              << " steps";
    if (!out.loss_trajectory.empty())
        std::cout << ", final loss " << out.loss_trajectory.back();
    if (p_at_k >= 0.0) std::cout << ", P@K " << p_at_k;
    std::cout << '\n';
}

PhaseSummary summarize(const std::string& name, const PhaseOutput& out,
                       double p_at_k) {
    PhaseSummary row;
    row.phase = name;
    row.steps = static_cast<int>(out.loss_trajectory.size());
    row.final_loss =
        out.loss_trajectory.empty() ? 0.0 : out.loss_trajectory.back();
    row.p_at_k = p_at_k;
    return row;
}

std::vector<PhaseSummary> eval_rows(const RunConfig& run,
                                    const Encoder<float>& query_enc,
                                    const Encoder<float>& doc_enc,
                                    const SyntheticCorpus& corpus,
                                    std::vector<int> dims,
                                    FeatureChannel features,
                                    const TopicModel* oracle_model) {
    if (dims.empty()) dims.push_back(query_enc.cfg.embed_dim);
    std::vector<PhaseSummary> rows;
    for (int dim : dims) {
        if (dim < 1 || dim > query_enc.cfg.embed_dim)
            throw config_error("truncate dimension " + std::to_string(dim) +
                               " outside [1, " +
                               std::to_string(query_enc.cfg.embed_dim) + "]");
        std::optional<int> truncate;
        if (dim != query_enc.cfg.embed_dim) truncate = dim;
        double p = measure_p_at_k(run, query_enc, doc_enc, corpus, truncate,
                                  features, oracle_model);
        rows.push_back({"eval_d" + std::to_string(dim), 0, 0.0, p});
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Subcommand bodies.
// ---------------------------------------------------------------------------

int cmd_gen_corpus(const RunConfig& run, const std::string& out_dir) {
    auto corpus = run.make_corpus();
    auto pairs = run.make_pairs(corpus);
    auto alignment = run.make_alignment_corpus();

    std::filesystem::create_directories(out_dir);
    auto at = [&](const char* name) {
        return (std::filesystem::path(out_dir) / name).string();
    };
    atomic_write_file(at("documents.jsonl"), corpus_items_jsonl(corpus.documents));
    atomic_write_file(at("queries.jsonl"), corpus_items_jsonl(corpus.queries));
    atomic_write_file(at("pairs.jsonl"), pairs_jsonl(pairs));
    atomic_write_file(at("alignment.jsonl"), alignment_jsonl(alignment));

    auto stats = compute_oracle_stats(corpus);
    std::cout << "documents: " << corpus.documents.size() << '\n'
              << "queries: " << corpus.queries.size() << '\n'
              << "supervised pairs: " << pairs.size() << '\n'
              << "alignment items: " << alignment.items.size() << '\n'
              << "queries with a positive: " << stats.queries_with_positive
              << '\n'
              << "oracle positive rate: " << stats.positive_rate << '\n'
              << "oracle hard-band rate: " << stats.hard_band_rate << '\n'
              << "oracle score histogram:";
    for (auto count : stats.histogram) std::cout << ' ' << count;
    std::cout << '\n';
    return 0;
}

int cmd_train_teacher(const RunConfig& run, const std::string& out_query,
                      const std::string& out_doc, const std::string& metrics) {
    auto model = run.topic_model();
    auto corpus = run.make_corpus();
    auto pairs = run.make_pairs(corpus);
    auto teacher = run_teacher_phase(run, model, corpus, pairs);

    save_checkpoint(teacher.query, out_query);
    save_checkpoint(teacher.doc, out_doc);
    double p = measure_p_at_k(run, teacher.query, teacher.doc, corpus,
                              std::nullopt, run.train_teacher.features, &model);
    print_phase("teacher", teacher.output, p);
    write_metrics(metrics, {summarize("teacher", teacher.output, p)});
    return 0;
}

int cmd_align(const RunConfig& run, const std::string& teacher_path,
              const std::string& out_student, const std::string& doc_path,
              const std::string& metrics) {
    auto teacher_q = load_checkpoint(teacher_path);
    check_corpus_vocab(teacher_q, run, "teacher");
    check_embed_match(teacher_q, "teacher", run.student.embed_dim,
                      "the configured student embed_dim");

    auto alignment = run.make_alignment_corpus();
    auto result = run_align_phase(run, teacher_q, alignment);
    save_checkpoint(result.student, out_student);

    double p = -1.0;
    if (!doc_path.empty()) {
        auto doc = load_checkpoint(doc_path);
        check_corpus_vocab(doc, run, "document");
        check_embed_match(doc, "document", result.student.cfg.embed_dim,
                          "the student embed_dim");
        p = measure_p_at_k(run, result.student, doc, run.make_corpus());
    }
    std::vector<PhaseSummary> rows;
    if (run.align.init == InitMode::pretrained) {
        print_phase("pretrain", result.pretrain, -1.0);
        rows.push_back(summarize("pretrain", result.pretrain, 0.0));
    }
    print_phase("align", result.align, p);
    rows.push_back(summarize("align", result.align, p < 0.0 ? 0.0 : p));
    write_metrics(metrics, rows);
    return 0;
}

int cmd_prune(const RunConfig& run, const std::string& teacher_path,
              const std::string& student_path, const std::string& out_student,
              const std::string& doc_path, const std::string& metrics) {
    auto teacher_q = load_checkpoint(teacher_path);
    auto student = load_checkpoint(student_path);
    check_corpus_vocab(teacher_q, run, "teacher");
    check_corpus_vocab(student, run, "student");
    check_embed_match(student, "student", teacher_q.cfg.embed_dim,
                      "the teacher embed_dim");

    auto alignment = run.make_alignment_corpus();
    std::function<double(const Encoder<float>&)> probe;
    SyntheticCorpus corpus;
    Encoder<float> doc;
    if (!doc_path.empty()) {
        doc = load_checkpoint(doc_path);
        check_corpus_vocab(doc, run, "document");
        check_embed_match(doc, "document", student.cfg.embed_dim,
                          "the student embed_dim");
        corpus = run.make_corpus();
        probe = [&](const Encoder<float>& s) {
            return measure_p_at_k(run, s, doc, corpus);
        };
    }

    auto reports = progressive_prune_align(student, teacher_q, alignment,
                                           run.prune.schedule,
                                           run.prune_stage_train(), probe,
                                           run.prune.calibration_items,
                                           run.prune.rank_mode);
    save_checkpoint(student, out_student);

    std::vector<PhaseSummary> rows;
    for (const auto& r : reports) {
        std::string name = "prune_l" + std::to_string(r.target.k_layers) + "_f" +
                           std::to_string(r.target.k_ffn);
        double quality = std::isnan(r.quality) ? 0.0 : r.quality;
        std::cout << "stage " << name << ": final align loss "
                  << r.final_align_loss;
        if (!std::isnan(r.quality)) std::cout << ", P@K " << r.quality;
        std::cout << '\n';
        rows.push_back({name, run.prune.stage_align.total_steps,
                        r.final_align_loss, quality});
    }
    if (reports.empty())
        std::cout << "empty prune schedule: student copied unchanged\n";
    write_metrics(metrics, rows);
    return 0;
}

int cmd_refine(const RunConfig& run, const std::string& student_path,
               const std::string& doc_path, const std::string& out_student,
               const std::string& metrics) {
    auto student = load_checkpoint(student_path);
    auto doc = load_checkpoint(doc_path);
    check_corpus_vocab(student, run, "student");
    check_corpus_vocab(doc, run, "document");
    check_embed_match(doc, "document", student.cfg.embed_dim,
                      "the student embed_dim");

    auto corpus = run.make_corpus();
    auto pairs = run.make_pairs(corpus);
    auto output = contrastive_refine(student, doc, corpus, pairs,
                                     run.refine_train());
    save_checkpoint(student, out_student);

    double p = measure_p_at_k(run, student, doc, corpus);
    print_phase("refine", output, p);
    write_metrics(metrics, {summarize("refine", output, p)});
    return 0;
}

int cmd_eval(const RunConfig& run, const std::string& query_path,
             const std::string& doc_path, const std::string& out,
             std::vector<int> dims) {
    auto query_enc = load_checkpoint(query_path);
    auto doc = load_checkpoint(doc_path);
    check_corpus_vocab(query_enc, run, "query");
    check_corpus_vocab(doc, run, "document");
    check_embed_match(doc, "document", query_enc.cfg.embed_dim,
                      "the query tower embed_dim");

    if (dims.empty()) dims = run.eval.truncate_dims;
    auto corpus = run.make_corpus();
    // The config's feature channel describes how the experiment's query tower
    // is served; an oracle-features experiment evaluates with them attached.
    auto model = run.topic_model();
    auto rows = eval_rows(run, query_enc, doc, corpus, std::move(dims),
                          run.train_teacher.features, &model);
    for (const auto& r : rows)
        std::cout << r.phase << ": P@" << run.eval.k << " = " << r.p_at_k << '\n';
    write_metrics(out, rows);
    return 0;
}

int cmd_bench(const RunConfig& run, const std::string& query_path,
              const std::string& doc_path, const std::string& label,
              const std::string& out, int repetitions) {
    auto query_enc = load_checkpoint(query_path);
    check_corpus_vocab(query_enc, run, "query");

    auto corpus = run.make_corpus();
    std::vector<std::vector<int>> sample;
    sample.reserve(corpus.queries.size());
    for (const auto& q : corpus.queries)
        sample.push_back(query_enc.apply_prompt(q.tokens));

    auto report = bench_encoder(query_enc, label, sample, repetitions);
    if (!doc_path.empty()) {
        auto doc = load_checkpoint(doc_path);
        check_corpus_vocab(doc, run, "document");
        check_embed_match(doc, "document", query_enc.cfg.embed_dim,
                          "the query tower embed_dim");
        report.p_at_k = measure_p_at_k(run, query_enc, doc, corpus);
    }

    std::ostringstream csv;
    write_bench_csv(csv, {report});
    std::cout << csv.str();
    if (!out.empty()) atomic_write_file(out, csv.str());
    return 0;
}

int cmd_pipeline(const RunConfig& run, const std::string& out_dir) {
    std::filesystem::create_directories(out_dir);
    auto at = [&](const char* name) {
        return (std::filesystem::path(out_dir) / name).string();
    };

    auto model = run.topic_model();
    auto corpus = run.make_corpus();
    auto pairs = run.make_pairs(corpus);
    auto alignment = run.make_alignment_corpus();
    std::vector<PhaseSummary> rows;

    auto teacher = run_teacher_phase(run, model, corpus, pairs);
    save_checkpoint(teacher.query, at("teacher_query.ckpt"));
    save_checkpoint(teacher.doc, at("teacher_doc.ckpt"));
    double teacher_p =
        measure_p_at_k(run, teacher.query, teacher.doc, corpus, std::nullopt,
                       run.train_teacher.features, &model);
    print_phase("teacher", teacher.output, teacher_p);
    rows.push_back(summarize("teacher", teacher.output, teacher_p));

    auto aligned = run_align_phase(run, teacher.query, alignment);
    save_checkpoint(aligned.student, at("student_aligned.ckpt"));
    double aligned_p = measure_p_at_k(run, aligned.student, teacher.doc, corpus);
    if (run.align.init == InitMode::pretrained) {
        print_phase("pretrain", aligned.pretrain, -1.0);
        rows.push_back(summarize("pretrain", aligned.pretrain, 0.0));
    }
    print_phase("align", aligned.align, aligned_p);
    rows.push_back(summarize("align", aligned.align, aligned_p));

    Encoder<float> student = aligned.student.clone();
    if (!run.prune.schedule.stages.empty()) {
        auto probe = [&](const Encoder<float>& s) {
            return measure_p_at_k(run, s, teacher.doc, corpus);
        };
        auto reports = progressive_prune_align(
            student, teacher.query, alignment, run.prune.schedule,
            run.prune_stage_train(),
            std::function<double(const Encoder<float>&)>(probe),
            run.prune.calibration_items, run.prune.rank_mode);
        save_checkpoint(student, at("student_pruned.ckpt"));
        for (const auto& r : reports) {
            std::string name = "prune_l" + std::to_string(r.target.k_layers) +
                               "_f" + std::to_string(r.target.k_ffn);
            std::cout << "stage " << name << ": final align loss "
                      << r.final_align_loss << ", P@K " << r.quality << '\n';
            rows.push_back({name, run.prune.stage_align.total_steps,
                            r.final_align_loss, r.quality});
        }
    }

    auto refined = contrastive_refine(student, teacher.doc, corpus, pairs,
                                      run.refine_train());
    save_checkpoint(student, at("student_refined.ckpt"));
    double refined_p = measure_p_at_k(run, student, teacher.doc, corpus);
    print_phase("refine", refined, refined_p);
    rows.push_back(summarize("refine", refined, refined_p));

    auto final_rows =
        eval_rows(run, student, teacher.doc, corpus, run.eval.truncate_dims,
                  FeatureChannel::deployable, nullptr);
    for (const auto& r : final_rows)
        std::cout << r.phase << ": P@" << run.eval.k << " = " << r.p_at_k << '\n';
    rows.insert(rows.end(), final_rows.begin(), final_rows.end());

    write_metrics(at("metrics.csv"), rows);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Dual-encoder retrieval lab: synthetic corpus generation, "
                 "teacher training, student alignment, structured pruning, "
                 "contrastive refinement, and evaluation."};
    app.require_subcommand(1);

    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out_dir, out_query, out_doc, out_student, metrics, out_file;
    std::string teacher_path, student_path, doc_path, query_path;
    std::string label = "query_tower";
    std::vector<int> dims;
    int repetitions = 30;

    auto load_run = [&]() {
        RunConfig run = load_run_config(config_path);
        if (seed) run.seed = *seed;
        return run;
    };
    auto common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "Experiment config file")
            ->required();
        sub->add_option("--seed", seed, "Override the config seed");
    };

    auto* gen = app.add_subcommand(
        "gen-corpus", "Write the synthetic corpus, mined pairs, and "
                      "alignment set as JSONL, plus an oracle summary");
    common(gen);
    gen->add_option("--out", out_dir, "Output directory")->required();
    gen->callback([&]() { cmd_gen_corpus(load_run(), out_dir); });

    auto* teach = app.add_subcommand(
        "train-teacher", "Train the prompted dual-encoder teacher on mined "
                         "pairs and save both towers");
    common(teach);
    teach->add_option("--out-query", out_query, "Query tower checkpoint")
        ->required();
    teach->add_option("--out-doc", out_doc, "Document tower checkpoint")
        ->required();
    teach->add_option("--metrics", metrics, "Phase-summary CSV");
    teach->callback(
        [&]() { cmd_train_teacher(load_run(), out_query, out_doc, metrics); });

    auto* align = app.add_subcommand(
        "align", "Fit the student query tower to frozen teacher query "
                 "embeddings over the unlabeled alignment set");
    common(align);
    align->add_option("--teacher", teacher_path, "Teacher query checkpoint")
        ->required();
    align->add_option("--out", out_student, "Aligned student checkpoint")
        ->required();
    align->add_option("--doc", doc_path,
                      "Document tower checkpoint (attaches P@K to metrics)");
    align->add_option("--metrics", metrics, "Phase-summary CSV");
    align->callback([&]() {
        cmd_align(load_run(), teacher_path, out_student, doc_path, metrics);
    });

    auto* prune = app.add_subcommand(
        "prune", "Progressively prune the student (layers, then FFN width) "
                 "with re-alignment after every stage");
    common(prune);
    prune->add_option("--teacher", teacher_path, "Teacher query checkpoint")
        ->required();
    prune->add_option("--student", student_path, "Student checkpoint to prune")
        ->required();
    prune->add_option("--out", out_student, "Pruned student checkpoint")
        ->required();
    prune->add_option("--doc", doc_path,
                      "Document tower checkpoint (attaches P@K per stage)");
    prune->add_option("--metrics", metrics, "Phase-summary CSV");
    prune->callback([&]() {
        cmd_prune(load_run(), teacher_path, student_path, out_student, doc_path,
                  metrics);
    });

    auto* refine = app.add_subcommand(
        "refine", "Contrastively refine the student query tower against a "
                  "frozen document tower");
    common(refine);
    refine->add_option("--student", student_path, "Aligned student checkpoint")
        ->required();
    refine->add_option("--doc", doc_path, "Frozen document tower checkpoint")
        ->required();
    refine->add_option("--out", out_student, "Refined student checkpoint")
        ->required();
    refine->add_option("--metrics", metrics, "Phase-summary CSV");
    refine->callback([&]() {
        cmd_refine(load_run(), student_path, doc_path, out_student, metrics);
    });

    auto* eval = app.add_subcommand(
        "eval", "Report P@K of a query tower against a document tower, "
                "optionally sweeping truncated embedding widths");
    common(eval);
    eval->add_option("--query", query_path, "Query tower checkpoint")
        ->required();
    eval->add_option("--doc", doc_path, "Document tower checkpoint")
        ->required();
    eval->add_option("--out", out_file, "Metrics CSV");
    eval->add_option("--truncate-dim", dims,
                     "Embedding width(s) to evaluate (defaults to the config "
                     "sweep, or the full width)");
    eval->callback(
        [&]() { cmd_eval(load_run(), query_path, doc_path, out_file, dims); });

    auto* bench = app.add_subcommand(
        "bench", "Measure per-query latency and batch throughput of a query "
                 "tower on the corpus query sample");
    common(bench);
    bench->add_option("--query", query_path, "Query tower checkpoint")
        ->required();
    bench->add_option("--doc", doc_path,
                      "Document tower checkpoint (attaches P@K)");
    bench->add_option("--label", label, "Row label");
    bench->add_option("--out", out_file, "Bench CSV");
    bench->add_option("--reps", repetitions, "Timed repetitions (min 30)");
    bench->callback([&]() {
        cmd_bench(load_run(), query_path, doc_path, label, out_file,
                  repetitions);
    });

    auto* pipe = app.add_subcommand(
        "pipeline", "Run teacher, alignment, pruning, refinement, and eval "
                    "in sequence, writing checkpoints and metrics");
    common(pipe);
    pipe->add_option("--out", out_dir, "Output directory")->required();
    pipe->callback([&]() { cmd_pipeline(load_run(), out_dir); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 1;
    } catch (const config_error& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 1;
    } catch (const data_error& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return 2;
    } catch (const dimension_error& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return 2;
    } catch (const error& e) {  // numeric, degenerate, contract breaches
        std::cerr << "numeric error: " << e.what() << '\n';
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 3;
    }
    return 0;
}
