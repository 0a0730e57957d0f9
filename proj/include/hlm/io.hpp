#pragma once

// On-disk artifact formats: binary encoder checkpoints, JSONL corpus dumps,
// and CSV metric tables. Checkpoints are bit-exact round-trippable and every
// writer goes through an atomic temp-file + rename, so a crashed run never
// leaves a half-written artifact behind.
//
// Checkpoint layout (all integers little-endian):
//   magic "HLMC" | version u32 | metadata length u32 | metadata UTF-8 text
//   then one record per tensor until end of file:
//     name length u32 | name bytes | dtype code u8 (0 = float32) |
//     rank u32 | extents u32 each | row-major float32 payload
// The metadata is the encoder configuration in the same structured-text
// format as run configs. Loading rejects wrong magic, wrong version, unknown
// or duplicate tensors, shape mismatches, truncation, and trailing bytes.

#include <charconv>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "hlm/common.hpp"
#include "hlm/config.hpp"
#include "hlm/encoder.hpp"
#include "hlm/synthgen.hpp"

namespace hlm {

inline constexpr char checkpoint_magic[4] = {'H', 'L', 'M', 'C'};
inline constexpr std::uint32_t checkpoint_version = 1;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    out.push_back(static_cast<char>(v & 0xffu));
    out.push_back(static_cast<char>((v >> 8) & 0xffu));
    out.push_back(static_cast<char>((v >> 16) & 0xffu));
    out.push_back(static_cast<char>((v >> 24) & 0xffu));
}

inline void put_f32(std::string& out, float f) {
    std::uint32_t bits = 0;
    std::memcpy(&bits, &f, sizeof bits);
    put_u32(out, bits);
}

/// Cursor over checkpoint bytes; every read names the field it was after so
/// truncation errors say exactly what was missing.
struct ByteReader {
    std::string_view bytes;
    std::size_t off = 0;

    bool done() const { return off == bytes.size(); }
    void need(std::size_t n, const char* what) const {
        if (bytes.size() - off < n)
            throw data_error(std::string("corrupt checkpoint: truncated at ") +
                             what);
    }
    std::uint8_t u8(const char* what) {
        need(1, what);
        return static_cast<std::uint8_t>(bytes[off++]);
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 3; i >= 0; --i)
            v = (v << 8) | static_cast<std::uint8_t>(bytes[off + static_cast<std::size_t>(i)]);
        off += 4;
        return v;
    }
    float f32(const char* what) {
        std::uint32_t bits = u32(what);
        float f = 0.0f;
        std::memcpy(&f, &bits, sizeof f);
        return f;
    }
    std::string str(std::size_t n, const char* what) {
        need(n, what);
        std::string s(bytes.substr(off, n));
        off += n;
        return s;
    }
};

inline void append_number(std::string& out, double v) {
    char buf[32];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    out.append(buf, static_cast<std::size_t>(ptr - buf));
}

inline void append_number(std::string& out, std::int64_t v) {
    char buf[24];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    out.append(buf, static_cast<std::size_t>(ptr - buf));
}

inline void append_int_array(std::string& out, const std::vector<int>& xs) {
    out += '[';
    for (std::size_t i = 0; i < xs.size(); ++i) {
        if (i) out += ',';
        append_number(out, static_cast<std::int64_t>(xs[i]));
    }
    out += ']';
}

}  // namespace detail

/// The checkpoint metadata block: one key per encoder-config field, fixed
/// order, same structured-text syntax as run configs.
inline std::string encode_encoder_config(const EncoderConfig& cfg) {
    std::string out;
    auto put = [&](const char* key, int v) {
        out += key;
        out += " = ";
        detail::append_number(out, static_cast<std::int64_t>(v));
        out += '\n';
    };
    put("vocab_size", cfg.vocab_size);
    put("hidden_dim", cfg.hidden_dim);
    put("ffn_dim", cfg.ffn_dim);
    put("n_layers", cfg.n_layers);
    put("n_query_heads", cfg.n_query_heads);
    put("n_kv_heads", cfg.n_kv_heads);
    put("head_dim", cfg.head_dim);
    put("embed_dim", cfg.embed_dim);
    put("max_seq_len", cfg.max_seq_len);
    out += "prompt_prefix = ";
    std::string arr;
    detail::append_int_array(arr, cfg.prompt_prefix);
    out += arr;
    out += '\n';
    return out;
}

/// Strict inverse of encode_encoder_config. Anything wrong with the metadata
/// of a checkpoint is a data problem, not a config problem.
inline EncoderConfig decode_encoder_config(const std::string& text) {
    try {
        auto doc = ParsedConfig::from_text(text);
        detail::ConfigBinder b(doc);
        EncoderConfig cfg;
        auto get = [&](const char* key) {
            return static_cast<int>(b.require_int_key("", key));
        };
        cfg.vocab_size = get("vocab_size");
        cfg.hidden_dim = get("hidden_dim");
        cfg.ffn_dim = get("ffn_dim");
        cfg.n_layers = get("n_layers");
        cfg.n_query_heads = get("n_query_heads");
        cfg.n_kv_heads = get("n_kv_heads");
        cfg.head_dim = get("head_dim");
        cfg.embed_dim = get("embed_dim");
        cfg.max_seq_len = get("max_seq_len");
        cfg.prompt_prefix = b.int_array_key("", "prompt_prefix", {});
        b.finish();
        cfg.validate();
        return cfg;
    } catch (const config_error& e) {
        throw data_error(std::string("corrupt checkpoint metadata: ") + e.what());
    }
}

inline std::string serialize_checkpoint(const Encoder<float>& enc) {
    if (!enc.lora.empty())
        throw contract_error("merge adapters before saving a checkpoint");
    std::string out;
    out.append(checkpoint_magic, sizeof checkpoint_magic);
    detail::put_u32(out, checkpoint_version);
    std::string meta = encode_encoder_config(enc.cfg);
    detail::put_u32(out, static_cast<std::uint32_t>(meta.size()));
    out += meta;
    visit_named<float>(const_cast<EncoderWeights<float>&>(enc.w),
                [&](const std::string& name, Tensor<float>& t) {
                    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
                    out += name;
                    out.push_back('\0');  // dtype code 0: float32
                    const auto& shape = t.shape();
                    detail::put_u32(out, static_cast<std::uint32_t>(shape.size()));
                    for (int e : shape)
                        detail::put_u32(out, static_cast<std::uint32_t>(e));
                    const float* data = t.data();
                    for (std::size_t i = 0; i < t.numel(); ++i)
                        detail::put_f32(out, data[i]);
                });
    return out;
}

inline Encoder<float> deserialize_checkpoint(std::string_view bytes) {
    detail::ByteReader r{bytes};
    r.need(sizeof checkpoint_magic, "magic");
    if (std::memcmp(bytes.data(), checkpoint_magic, sizeof checkpoint_magic) != 0)
        throw data_error("corrupt checkpoint: bad magic bytes");
    r.off += sizeof checkpoint_magic;
    std::uint32_t version = r.u32("version");
    if (version != checkpoint_version)
        throw data_error("unsupported checkpoint version " +
                         std::to_string(version));
    std::uint32_t meta_len = r.u32("metadata length");
    std::string meta = r.str(meta_len, "metadata");
    EncoderConfig cfg = decode_encoder_config(meta);

    auto enc = Encoder<float>::init(cfg, 0);  // shapes only; records fill all
    std::map<std::string, Tensor<float>*> slots;
    std::map<std::string, bool> filled;
    visit_named<float>(enc.w, [&](const std::string& name, Tensor<float>& t) {
        slots[name] = &t;
        filled[name] = false;
    });

    while (!r.done()) {
        std::uint32_t name_len = r.u32("record name length");
        if (name_len == 0 || name_len > 4096)
            throw data_error("corrupt checkpoint: implausible tensor name length");
        std::string name = r.str(name_len, "record name");
        std::uint8_t dtype = r.u8("dtype code");
        if (dtype != 0)
            throw data_error("corrupt checkpoint: unknown dtype code " +
                             std::to_string(static_cast<int>(dtype)));
        std::uint32_t rank = r.u32("tensor rank");
        if (rank == 0 || rank > 8)
            throw data_error("corrupt checkpoint: implausible tensor rank");
        std::vector<int> extents;
        unsigned long long numel = 1;
        for (std::uint32_t i = 0; i < rank; ++i) {
            std::uint32_t e = r.u32("tensor extent");
            if (e == 0) throw data_error("corrupt checkpoint: zero extent");
            extents.push_back(static_cast<int>(e));
            numel *= e;
            if (numel > (1ull << 32))
                throw data_error("corrupt checkpoint: implausible tensor size");
        }
        auto it = slots.find(name);
        if (it == slots.end())
            throw data_error("corrupt checkpoint: unexpected tensor '" + name +
                             "'");
        if (filled[name])
            throw data_error("corrupt checkpoint: duplicate tensor '" + name +
                             "'");
        if (it->second->shape() != extents)
            throw data_error("checkpoint tensor '" + name +
                             "' does not match the architecture in its metadata");
        r.need(static_cast<std::size_t>(numel) * 4, "tensor payload");
        float* data = it->second->data();
        for (unsigned long long i = 0; i < numel; ++i)
            data[i] = r.f32("tensor payload");
        filled[name] = true;
    }
    for (const auto& [name, ok] : filled)
        if (!ok)
            throw data_error("corrupt checkpoint: missing tensor '" + name + "'");
    return enc;
}

/// Writes to `<path>.tmp` then renames into place, so `path` either keeps
/// its old contents or holds the complete new ones — never a partial write.
inline void atomic_write_file(const std::string& path, std::string_view bytes) {
    namespace fs = std::filesystem;
    fs::path target(path);
    fs::path tmp = target;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw data_error("cannot write file: " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out) {
            std::error_code ec;
            fs::remove(tmp, ec);
            throw data_error("write failed: " + tmp.string());
        }
    }
    std::error_code ec;
    fs::rename(tmp, target, ec);
    if (ec) {
        std::error_code ec2;
        fs::remove(tmp, ec2);
        throw data_error("cannot move " + tmp.string() +
                         " into place: " + ec.message());
    }
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw data_error("cannot open file: " + path);
    std::string bytes((std::istreambuf_iterator<char>(in)),
                      std::istreambuf_iterator<char>());
    if (in.bad()) throw data_error("read failed: " + path);
    return bytes;
}

inline void save_checkpoint(const Encoder<float>& enc, const std::string& path) {
    atomic_write_file(path, serialize_checkpoint(enc));
}

inline Encoder<float> load_checkpoint(const std::string& path) {
    try {
        return deserialize_checkpoint(read_file(path));
    } catch (const data_error& e) {
        throw data_error(path + ": " + e.what());
    }
}

/// One JSON object per line; numbers use shortest round-trip formatting so
/// the files are locale-independent and byte-stable across runs.
inline std::string corpus_items_jsonl(const std::vector<CorpusItem>& items) {
    std::string out;
    for (const auto& item : items) {
        out += "{\"id\":";
        detail::append_number(out, static_cast<std::int64_t>(item.id));
        out += ",\"tokens\":";
        detail::append_int_array(out, item.tokens);
        out += ",\"mixture\":[";
        for (std::size_t i = 0; i < item.mixture.size(); ++i) {
            if (i) out += ',';
            detail::append_number(out, item.mixture[i]);
        }
        out += "]}\n";
    }
    return out;
}

inline std::string pairs_jsonl(const std::vector<SupervisedPair>& pairs) {
    std::string out;
    for (const auto& p : pairs) {
        out += "{\"query_id\":";
        detail::append_number(out, static_cast<std::int64_t>(p.query_id));
        out += ",\"positive_id\":";
        detail::append_number(out, static_cast<std::int64_t>(p.positive_id));
        out += ",\"hard_negative_ids\":";
        detail::append_int_array(out, p.hard_negative_ids);
        out += "}\n";
    }
    return out;
}

inline std::string alignment_jsonl(const AlignmentCorpus& corpus) {
    std::string out;
    for (const auto& item : corpus.items) {
        out += "{\"tokens\":";
        detail::append_int_array(out, item.tokens);
        out += ",\"general\":";
        out += item.general ? "true" : "false";
        out += "}\n";
    }
    return out;
}

/// Phase-summary metrics rows, one per completed phase of a pipeline.
struct PhaseSummary {
    std::string phase;
    int steps = 0;
    double final_loss = 0.0;
    double p_at_k = 0.0;
};

inline std::string phase_summary_csv(const std::vector<PhaseSummary>& rows) {
    std::string out = "phase,steps,final_loss,p_at_k\n";
    for (const auto& r : rows) {
        out += r.phase;
        out += ',';
        detail::append_number(out, static_cast<std::int64_t>(r.steps));
        out += ',';
        detail::append_number(out, r.final_loss);
        out += ',';
        detail::append_number(out, r.p_at_k);
        out += '\n';
    }
    return out;
}

}  // namespace hlm
