#pragma once

// Experiment configuration files. A run config is a small structured-text
// document (TOML-style sections and `key = value` lines) that pins every
// knob of a pipeline run: the synthetic world, both encoder towers, the
// per-phase training budgets, the prune schedule, and the eval protocol.
//
// Parsing is strict on purpose: unknown keys and sections are rejected with
// the offending line number, so a typo'd ablation fails loudly instead of
// silently running the defaults. Required keys report their own names.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "hlm/common.hpp"
#include "hlm/encoder.hpp"
#include "hlm/pruning.hpp"
#include "hlm/synthgen.hpp"
#include "hlm/trainer.hpp"

namespace hlm {

namespace detail {

struct ConfigEntry {
    std::string text;  // raw value, trimmed, comments stripped
    int line = 0;
    mutable bool used = false;
};

struct ConfigSection {
    int line = 0;  // header line; 0 for the implicit top-level section
    mutable bool touched = false;
    std::map<std::string, ConfigEntry> entries;
};

inline std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r'))
        s.remove_suffix(1);
    return s;
}

[[noreturn]] inline void config_fail(int line, const std::string& what) {
    throw config_error("line " + std::to_string(line) + ": " + what);
}

/// Strips a trailing comment, honoring double-quoted strings so that a '#'
/// inside a quoted value survives. Unterminated strings are an error.
inline std::string_view strip_comment(std::string_view s, int line) {
    bool in_string = false;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (s[i] == '"') in_string = !in_string;
        else if (s[i] == '#' && !in_string) return s.substr(0, i);
    }
    if (in_string) config_fail(line, "unterminated string");
    return s;
}

inline bool valid_name(std::string_view s) {
    if (s.empty()) return false;
    for (char c : s)
        if (!((c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '_'))
            return false;
    return true;
}

}  // namespace detail

/// Raw parse result: sections of key/value lines, each remembering where it
/// came from. The top-level (pre-section) scope is the "" section.
class ParsedConfig {
  public:
    static ParsedConfig from_text(const std::string& text) {
        ParsedConfig doc;
        doc.sections_[""];  // the top-level scope always exists
        std::string current;
        std::istringstream in(text);
        std::string raw;
        int line = 0;
        while (std::getline(in, raw)) {
            ++line;
            auto s = detail::trim(detail::strip_comment(raw, line));
            if (s.empty()) continue;
            if (s.front() == '[') {
                if (s.back() != ']')
                    detail::config_fail(line, "malformed section header");
                auto name = detail::trim(s.substr(1, s.size() - 2));
                if (!detail::valid_name(name))
                    detail::config_fail(line, "malformed section name");
                current = std::string(name);
                auto [it, fresh] = doc.sections_.try_emplace(current);
                if (!fresh)
                    detail::config_fail(line, "duplicate section [" + current + "]");
                it->second.line = line;
                continue;
            }
            auto eq = s.find('=');
            if (eq == std::string_view::npos)
                detail::config_fail(line, "expected `key = value` or `[section]`");
            auto key = detail::trim(s.substr(0, eq));
            auto value = detail::trim(s.substr(eq + 1));
            if (!detail::valid_name(key))
                detail::config_fail(line, "malformed key name");
            if (value.empty()) detail::config_fail(line, "empty value");
            auto& section = doc.sections_[current];
            auto [it, fresh] = section.entries.try_emplace(
                std::string(key), detail::ConfigEntry{std::string(value), line});
            if (!fresh)
                detail::config_fail(line, "duplicate key '" + std::string(key) + "'");
        }
        return doc;
    }

    const detail::ConfigEntry* find(const std::string& section,
                                    const std::string& key) const {
        auto sit = sections_.find(section);
        if (sit == sections_.end()) return nullptr;
        sit->second.touched = true;
        auto eit = sit->second.entries.find(key);
        if (eit == sit->second.entries.end()) return nullptr;
        eit->second.used = true;
        return &eit->second;
    }

    void mark_section(const std::string& section) const {
        auto sit = sections_.find(section);
        if (sit != sections_.end()) sit->second.touched = true;
    }

    /// Rejects anything the binder never asked about, most specific first.
    void reject_leftovers() const {
        for (const auto& [name, section] : sections_) {
            if (!section.touched && !name.empty())
                detail::config_fail(section.line, "unknown section [" + name + "]");
            for (const auto& [key, entry] : section.entries)
                if (!entry.used)
                    detail::config_fail(
                        entry.line,
                        "unknown key '" + key + "'" +
                            (name.empty() ? "" : " in section [" + name + "]"));
        }
    }

  private:
    std::map<std::string, detail::ConfigSection> sections_;
};

namespace detail {

inline std::int64_t parse_int(const ConfigEntry& e) {
    std::int64_t v = 0;
    const char* begin = e.text.data();
    const char* end = begin + e.text.size();
    auto [ptr, ec] = std::from_chars(begin, end, v);
    if (ec != std::errc{} || ptr != end)
        config_fail(e.line, "expected an integer, got '" + e.text + "'");
    return v;
}

inline double parse_double(const ConfigEntry& e) {
    double v = 0.0;
    const char* begin = e.text.data();
    const char* end = begin + e.text.size();
    auto [ptr, ec] = std::from_chars(begin, end, v);
    if (ec != std::errc{} || ptr != end)
        config_fail(e.line, "expected a number, got '" + e.text + "'");
    return v;
}

inline bool parse_bool(const ConfigEntry& e) {
    if (e.text == "true") return true;
    if (e.text == "false") return false;
    config_fail(e.line, "expected true or false, got '" + e.text + "'");
}

inline std::string parse_string(const ConfigEntry& e) {
    if (e.text.size() < 2 || e.text.front() != '"' || e.text.back() != '"')
        config_fail(e.line, "expected a quoted string, got '" + e.text + "'");
    auto body = e.text.substr(1, e.text.size() - 2);
    if (body.find('"') != std::string::npos)
        config_fail(e.line, "string may not contain embedded quotes");
    return body;
}

inline std::vector<int> parse_int_array(const ConfigEntry& e) {
    if (e.text.size() < 2 || e.text.front() != '[' || e.text.back() != ']')
        config_fail(e.line, "expected an array like [1, 2, 3]");
    std::vector<int> out;
    std::string body = e.text.substr(1, e.text.size() - 2);
    if (trim(body).empty()) return out;
    std::size_t start = 0;
    while (start <= body.size()) {
        auto comma = body.find(',', start);
        auto piece = trim(std::string_view(body).substr(
            start, comma == std::string::npos ? std::string::npos : comma - start));
        int v = 0;
        auto [ptr, ec] = std::from_chars(piece.data(), piece.data() + piece.size(), v);
        if (piece.empty() || ec != std::errc{} || ptr != piece.data() + piece.size())
            config_fail(e.line, "bad array element '" + std::string(piece) + "'");
        out.push_back(v);
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return out;
}

/// Typed reads over a parsed document. Every getter marks the key consumed;
/// `finish()` turns anything left over into a line-anchored error.
class ConfigBinder {
  public:
    explicit ConfigBinder(const ParsedConfig& doc) : doc_(doc) {}

    void expect_section(const std::string& s) { doc_.mark_section(s); }

    std::int64_t require_int_key(const std::string& s, const std::string& k) {
        const auto* e = doc_.find(s, k);
        if (!e)
            throw config_error("missing required key '" + k + "' in section [" +
                               s + "]");
        return parse_int(*e);
    }

    std::int64_t int_key(const std::string& s, const std::string& k,
                         std::int64_t fallback) {
        const auto* e = doc_.find(s, k);
        return e ? parse_int(*e) : fallback;
    }

    double double_key(const std::string& s, const std::string& k, double fallback) {
        const auto* e = doc_.find(s, k);
        if (!e) return fallback;
        // integers are acceptable spellings of numbers
        return parse_double(*e);
    }

    bool bool_key(const std::string& s, const std::string& k, bool fallback) {
        const auto* e = doc_.find(s, k);
        return e ? parse_bool(*e) : fallback;
    }

    std::string string_key(const std::string& s, const std::string& k,
                           const std::string& fallback) {
        const auto* e = doc_.find(s, k);
        return e ? parse_string(*e) : fallback;
    }

    std::vector<int> int_array_key(const std::string& s, const std::string& k,
                                   std::vector<int> fallback) {
        const auto* e = doc_.find(s, k);
        return e ? parse_int_array(*e) : std::move(fallback);
    }

    /// Constrained string with a fixed vocabulary; reports the line on error.
    std::string choice_key(const std::string& s, const std::string& k,
                           const std::string& fallback,
                           std::initializer_list<const char*> allowed) {
        const auto* e = doc_.find(s, k);
        std::string v = e ? parse_string(*e) : fallback;
        for (const char* a : allowed)
            if (v == a) return v;
        std::string msg = "key '" + k + "' must be one of {";
        bool first = true;
        for (const char* a : allowed) {
            if (!first) msg += ", ";
            msg += a;
            first = false;
        }
        msg += "}, got \"" + v + "\"";
        if (e) config_fail(e->line, msg);
        throw config_error(msg);
    }

    void finish() { doc_.reject_leftovers(); }

  private:
    const ParsedConfig& doc_;
};

}  // namespace detail

/// Parameters of the synthetic world. `n_docs` and `n_queries` are the only
/// required keys of the whole file; everything else has a sensible default.
struct CorpusSection {
    int n_topics = 16;
    int vocab_size = 512;
    int topic_mix_sparsity = 2;
    double concentration = 8.0;
    int n_docs = 0;
    int n_queries = 0;
    int doc_len = 24;
    int query_len = 8;
    int hard_negatives = 2;
    int alignment_items = 2048;
    double general_fraction = 0.25;
};

struct TeacherTrainSection {
    TrainConfig train{};
    TrainMode mode = TrainMode::full;
    FeatureChannel features = FeatureChannel::deployable;
    // Backbone warm-up on the document collection before contrastive
    // training; 0 steps disables it. A warmed shared init is what makes the
    // score-relative false-negative mask informative from the first step.
    PretrainConfig warmup{32, 3e-3, 0.10, 0, 0, 0.3};
};

struct AlignSection {
    TrainConfig train{};
    InitMode init = InitMode::pretrained;
    double target_loss = 0.0;  // 0 disables the reach-threshold probe
};

struct PruneSection {
    PruneSchedule schedule{};
    TrainConfig stage_align{};
    int calibration_items = 512;
    LayerRankMode rank_mode = LayerRankMode::score;
};

struct EvalSection {
    int k = 10;
    double threshold = 0.5;
    std::vector<int> truncate_dims;  // empty = full dimension only
};

/// One experiment, fully pinned: world, towers, phase budgets, eval.
struct RunConfig {
    std::uint64_t seed = 0;
    CorpusSection corpus{};
    EncoderConfig teacher{};
    EncoderConfig student{};
    TeacherTrainSection train_teacher{};
    PretrainConfig pretrain{};
    AlignSection align{};
    TrainConfig refine{};
    PruneSection prune{};
    EvalSection eval{};

    TopicModel topic_model() const {
        return make_topic_model(corpus.n_topics, corpus.vocab_size,
                                corpus.topic_mix_sparsity, seed,
                                corpus.concentration);
    }
    SyntheticCorpus make_corpus() const {
        return generate(topic_model(), corpus.n_docs, corpus.n_queries,
                        corpus.doc_len, corpus.query_len);
    }
    std::vector<SupervisedPair> make_pairs(const SyntheticCorpus& c) const {
        return mine_pairs(c, corpus.hard_negatives, mix64(seed ^ 0x70616972ull));
    }
    AlignmentCorpus make_alignment_corpus() const {
        return alignment_corpus(topic_model(), corpus.alignment_items,
                                corpus.general_fraction, corpus.query_len);
    }

    // Every phase trains under its own derived seed so shuffles and
    // initializations never collide across phases of one run.
    TrainConfig teacher_train() const { return seeded(train_teacher.train, 0x7463ull); }
    PretrainConfig teacher_warmup() const {
        PretrainConfig p = train_teacher.warmup;
        p.seed = mix64(seed ^ 0x7761726dull);
        return p;
    }
    PretrainConfig pretrain_config() const {
        PretrainConfig p = pretrain;
        p.seed = mix64(seed ^ 0x7074ull);
        return p;
    }
    TrainConfig align_train() const { return seeded(align.train, 0x616cull); }
    TrainConfig refine_train() const { return seeded(refine, 0x7266ull); }
    TrainConfig prune_stage_train() const { return seeded(prune.stage_align, 0x7072ull); }
    std::uint64_t init_seed(std::uint64_t tag) const { return mix64(seed ^ tag); }

  private:
    TrainConfig seeded(TrainConfig t, std::uint64_t tag) const {
        t.seed = mix64(seed ^ tag);
        return t;
    }
};

namespace detail {

inline void bind_encoder(ConfigBinder& b, const std::string& s, EncoderConfig& enc,
                         int vocab_size) {
    b.expect_section(s);
    enc.vocab_size = vocab_size;  // towers always share the corpus vocabulary
    enc.hidden_dim = static_cast<int>(b.int_key(s, "hidden_dim", enc.hidden_dim));
    enc.ffn_dim = static_cast<int>(b.int_key(s, "ffn_dim", enc.ffn_dim));
    enc.n_layers = static_cast<int>(b.int_key(s, "n_layers", enc.n_layers));
    enc.n_query_heads =
        static_cast<int>(b.int_key(s, "n_query_heads", enc.n_query_heads));
    enc.n_kv_heads = static_cast<int>(b.int_key(s, "n_kv_heads", enc.n_kv_heads));
    enc.head_dim = static_cast<int>(b.int_key(s, "head_dim", enc.head_dim));
    enc.embed_dim = static_cast<int>(b.int_key(s, "embed_dim", enc.embed_dim));
    enc.max_seq_len = static_cast<int>(b.int_key(s, "max_seq_len", enc.max_seq_len));
    enc.prompt_prefix = b.int_array_key(s, "prompt_prefix", {});
    for (int t : enc.prompt_prefix)
        if (t < 0 || t >= vocab_size)
            throw config_error("prompt token " + std::to_string(t) +
                               " outside the vocabulary in section [" + s + "]");
}

inline void bind_contrastive(ConfigBinder& b, const std::string& s, TrainConfig& t) {
    t.batch_size = static_cast<int>(b.int_key(s, "batch_size", t.batch_size));
    t.peak_lr = b.double_key(s, "peak_lr", t.peak_lr);
    t.warmup_fraction = b.double_key(s, "warmup_fraction", t.warmup_fraction);
    t.total_steps = static_cast<int>(b.int_key(s, "total_steps", t.total_steps));
    t.snapshot_every = static_cast<int>(b.int_key(s, "snapshot_every", 0));
    auto loss = b.choice_key(s, "loss", "qwen_cl", {"qwen_cl", "info_nce"});
    t.loss = loss == "qwen_cl" ? LossKind::qwen_cl : LossKind::info_nce;
    t.cl.temperature = b.double_key(s, "temperature", t.cl.temperature);
    t.cl.use_in_batch_negatives =
        b.bool_key(s, "in_batch_negatives", t.cl.use_in_batch_negatives);
    t.cl.use_same_tower_negatives =
        b.bool_key(s, "same_tower_negatives", t.cl.use_same_tower_negatives);
    t.cl.mask_false_negatives =
        b.bool_key(s, "mask_false_negatives", t.cl.mask_false_negatives);
    t.cl.false_negative_margin =
        b.double_key(s, "false_negative_margin", t.cl.false_negative_margin);
    if (!(t.cl.temperature > 0.0))
        throw config_error("temperature must be positive in section [" + s + "]");
}

inline void bind_budget(ConfigBinder& b, const std::string& s, TrainConfig& t) {
    t.batch_size = static_cast<int>(b.int_key(s, "batch_size", t.batch_size));
    t.peak_lr = b.double_key(s, "peak_lr", t.peak_lr);
    t.warmup_fraction = b.double_key(s, "warmup_fraction", t.warmup_fraction);
    t.total_steps = static_cast<int>(b.int_key(s, "total_steps", t.total_steps));
    t.snapshot_every = static_cast<int>(b.int_key(s, "snapshot_every", 0));
}

}  // namespace detail

/// Parses and validates a full experiment file. Throws config_error with a
/// line number for syntax problems and unknown keys, and with the key name
/// for missing required keys and semantic violations.
inline RunConfig parse_run_config(const std::string& text) {
    auto doc = ParsedConfig::from_text(text);
    detail::ConfigBinder b(doc);
    RunConfig run;

    run.seed = static_cast<std::uint64_t>(b.int_key("", "seed", 0));

    auto& c = run.corpus;
    b.expect_section("corpus");
    c.n_docs = static_cast<int>(b.require_int_key("corpus", "n_docs"));
    c.n_queries = static_cast<int>(b.require_int_key("corpus", "n_queries"));
    c.n_topics = static_cast<int>(b.int_key("corpus", "n_topics", c.n_topics));
    c.vocab_size = static_cast<int>(b.int_key("corpus", "vocab_size", c.vocab_size));
    c.topic_mix_sparsity = static_cast<int>(
        b.int_key("corpus", "topic_mix_sparsity", c.topic_mix_sparsity));
    c.concentration = b.double_key("corpus", "concentration", c.concentration);
    c.doc_len = static_cast<int>(b.int_key("corpus", "doc_len", c.doc_len));
    c.query_len = static_cast<int>(b.int_key("corpus", "query_len", c.query_len));
    c.hard_negatives =
        static_cast<int>(b.int_key("corpus", "hard_negatives", c.hard_negatives));
    c.alignment_items =
        static_cast<int>(b.int_key("corpus", "alignment_items", c.alignment_items));
    c.general_fraction =
        b.double_key("corpus", "general_fraction", c.general_fraction);

    detail::bind_encoder(b, "teacher", run.teacher, c.vocab_size);
    detail::bind_encoder(b, "student", run.student, c.vocab_size);

    auto& tt = run.train_teacher;
    b.expect_section("train_teacher");
    detail::bind_contrastive(b, "train_teacher", tt.train);
    auto mode = b.choice_key("train_teacher", "mode", "full", {"full", "lora"});
    tt.mode = mode == "full" ? TrainMode::full : TrainMode::lora;
    tt.train.lora_rank =
        static_cast<int>(b.int_key("train_teacher", "lora_rank", tt.train.lora_rank));
    auto feats = b.choice_key("train_teacher", "features", "deployable",
                              {"deployable", "oracle"});
    tt.features =
        feats == "oracle" ? FeatureChannel::oracle : FeatureChannel::deployable;
    tt.warmup.total_steps = static_cast<int>(
        b.int_key("train_teacher", "warmup_steps", tt.warmup.total_steps));
    tt.warmup.mask_prob =
        b.double_key("train_teacher", "warmup_mask_prob", tt.warmup.mask_prob);
    tt.warmup.peak_lr =
        b.double_key("train_teacher", "warmup_lr", tt.warmup.peak_lr);

    auto& pt = run.pretrain;
    b.expect_section("pretrain");
    pt.batch_size = static_cast<int>(b.int_key("pretrain", "batch_size", pt.batch_size));
    pt.peak_lr = b.double_key("pretrain", "peak_lr", pt.peak_lr);
    pt.warmup_fraction =
        b.double_key("pretrain", "warmup_fraction", pt.warmup_fraction);
    pt.total_steps =
        static_cast<int>(b.int_key("pretrain", "total_steps", pt.total_steps));
    pt.mask_prob = b.double_key("pretrain", "mask_prob", pt.mask_prob);

    auto& al = run.align;
    al.train.peak_lr = 1e-3;  // alignment default is gentler than contrastive
    b.expect_section("align");
    detail::bind_budget(b, "align", al.train);
    auto init = b.choice_key("align", "init", "pretrained", {"pretrained", "random"});
    al.init = init == "pretrained" ? InitMode::pretrained : InitMode::random;
    al.target_loss = b.double_key("align", "target_loss", 0.0);

    b.expect_section("refine");
    detail::bind_contrastive(b, "refine", run.refine);

    auto& pr = run.prune;
    pr.stage_align.peak_lr = 1e-3;
    pr.stage_align.total_steps = 500;
    b.expect_section("prune");
    auto layers = b.int_array_key("prune", "schedule_layers", {});
    auto ffn = b.int_array_key("prune", "schedule_ffn", {});
    if (layers.size() != ffn.size())
        throw config_error(
            "schedule_layers and schedule_ffn must have the same length");
    for (std::size_t i = 0; i < layers.size(); ++i)
        pr.schedule.stages.push_back(PruneTarget{layers[i], ffn[i]});
    detail::bind_budget(b, "prune", pr.stage_align);
    pr.calibration_items = static_cast<int>(
        b.int_key("prune", "calibration_items", pr.calibration_items));
    pr.rank_mode = b.bool_key("prune", "rank_by_deviation", false)
                       ? LayerRankMode::deviation_from_identity
                       : LayerRankMode::score;

    auto& ev = run.eval;
    b.expect_section("eval");
    ev.k = static_cast<int>(b.int_key("eval", "k", ev.k));
    ev.threshold = b.double_key("eval", "threshold", ev.threshold);
    ev.truncate_dims = b.int_array_key("eval", "truncate_dims", {});

    b.finish();

    // Semantic validation happens after the whole file is consumed, so the
    // first report is always about unknown/missing keys, not derived rules.
    if (c.n_docs < 1) throw config_error("n_docs must be at least 1");
    if (c.n_queries < 1) throw config_error("n_queries must be at least 1");
    if (c.doc_len < 1 || c.query_len < 1)
        throw config_error("doc_len and query_len must be at least 1");
    if (c.hard_negatives < 0)
        throw config_error("hard_negatives must be non-negative");
    if (c.alignment_items < 1)
        throw config_error("alignment_items must be at least 1");
    make_topic_model(c.n_topics, c.vocab_size, c.topic_mix_sparsity, 0,
                     c.concentration);  // reuses the world validators
    run.teacher.validate();
    run.student.validate();
    if (!run.student.prompt_prefix.empty())
        throw config_error(
            "student prompt_prefix must be empty: the student tower is "
            "trained to run without a prompt");
    if (run.teacher.embed_dim != run.student.embed_dim)
        throw config_error(
            "teacher and student embed_dim must match for alignment");
    validate_train(run.train_teacher.train);
    validate_train(run.align.train);
    validate_train(run.refine);
    validate_train(run.prune.stage_align);
    if (run.train_teacher.train.lora_rank < 1)
        throw config_error("lora_rank must be at least 1");
    if (!(pt.mask_prob > 0.0 && pt.mask_prob <= 1.0))
        throw config_error("mask_prob must lie in (0, 1]");
    if (run.train_teacher.warmup.total_steps < 0)
        throw config_error("warmup_steps must be non-negative");
    if (!(run.train_teacher.warmup.mask_prob > 0.0 &&
          run.train_teacher.warmup.mask_prob <= 1.0))
        throw config_error("warmup_mask_prob must lie in (0, 1]");
    if (!(run.train_teacher.warmup.peak_lr > 0.0))
        throw config_error("warmup_lr must be positive");
    if (al.target_loss < 0.0)
        throw config_error("target_loss must be non-negative");
    validate_schedule(pr.schedule, run.student.n_layers, run.student.ffn_dim);
    if (pr.calibration_items < 1)
        throw config_error("calibration_items must be at least 1");
    if (ev.k < 1) throw config_error("eval k must be at least 1");
    if (!(ev.threshold >= 0.0 && ev.threshold <= 1.0))
        throw config_error("eval threshold must lie in [0, 1]");
    for (int d : ev.truncate_dims)
        if (d < 1 || d > run.student.embed_dim)
            throw config_error("truncate dimension " + std::to_string(d) +
                               " outside [1, embed_dim]");
    return run;
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw data_error("cannot open config file: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    try {
        return parse_run_config(buf.str());
    } catch (const config_error& e) {
        throw config_error(path + ": " + e.what());
    }
}

}  // namespace hlm
