#pragma once

// Byte-level BPE tokenizer compatible with the CLIP text encoder vocabulary
// (bpe_simple_vocab_16e6: 256 byte symbols x {plain, end-of-word} + 48,894 merges
// + start/end specials = 49,408 ids).
//
// Text cleaning: HTML entities are unescaped twice, whitespace is collapsed and the
// text lowercased. Unicode repair (ftfy) and full Unicode case folding are not
// performed; letter/number classification is exact for ASCII and Latin-1 and uses
// block ranges beyond that.

#include "rsprompt/core/log.hpp"
#include "rsprompt/core/tensor.hpp"

#include <zlib.h>

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <mutex>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace rsprompt {

namespace utf8 {

inline void append(std::string& out, char32_t cp) {
    if (cp < 0x80) {
        out.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
        out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else if (cp < 0x10000) {
        out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else {
        out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    }
}

/// Invalid sequences decode to U+FFFD one byte at a time.
inline std::u32string decode(std::string_view s) {
    std::u32string out;
    std::size_t i = 0;
    while (i < s.size()) {
        auto c = static_cast<unsigned char>(s[i]);
        int len = c < 0x80 ? 1 : (c >> 5) == 6 ? 2 : (c >> 4) == 14 ? 3 : (c >> 3) == 30 ? 4 : 0;
        if (len == 0 || i + len > s.size()) {
            out.push_back(0xFFFD);
            ++i;
            continue;
        }
        char32_t cp = len == 1 ? c : c & (0x7F >> len);
        bool ok = true;
        for (int k = 1; k < len; ++k) {
            auto cc = static_cast<unsigned char>(s[i + k]);
            if ((cc >> 6) != 2) ok = false;
            cp = (cp << 6) | (cc & 0x3F);
        }
        if (!ok) {
            out.push_back(0xFFFD);
            ++i;
            continue;
        }
        out.push_back(cp);
        i += len;
    }
    return out;
}

inline std::string encode(std::u32string_view s) {
    std::string out;
    for (char32_t cp : s) append(out, cp);
    return out;
}

}  // namespace utf8

namespace detail {

inline bool is_space(char32_t c) {
    return c == ' ' || (c >= 0x09 && c <= 0x0D) || (c >= 0x1C && c <= 0x1F) || c == 0x85 || c == 0xA0 ||
           c == 0x1680 || (c >= 0x2000 && c <= 0x200A) || c == 0x2028 || c == 0x2029 || c == 0x202F ||
           c == 0x205F || c == 0x3000;
}

inline bool is_number(char32_t c) {
    return (c >= '0' && c <= '9') || c == 0xB2 || c == 0xB3 || c == 0xB9 || (c >= 0xBC && c <= 0xBE) ||
           (c >= 0x660 && c <= 0x669) || (c >= 0x2070 && c <= 0x2079) || (c >= 0x2080 && c <= 0x2089) ||
           (c >= 0xFF10 && c <= 0xFF19);
}

inline bool is_letter(char32_t c) {
    if (c < 0x80) return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z');
    if (c < 0xC0) return c == 0xAA || c == 0xB5 || c == 0xBA;
    if (c == 0xD7 || c == 0xF7) return false;
    if (c <= 0x2FF) return true;
    if (c < 0x370) return false;  // combining marks
    if (is_number(c)) return false;
    if (c >= 0x2000 && c <= 0x2BFF) return false;  // punctuation, symbols, arrows, math
    if (c >= 0x3000 && c <= 0x303F) return false;
    if (c >= 0xFE30 && c <= 0xFE4F) return false;
    if (c >= 0xFF00 && c <= 0xFF20) return false;
    if (c >= 0x1F000) return false;  // emoji and pictographs
    return true;
}

inline char32_t to_lower(char32_t c) {
    if (c >= 'A' && c <= 'Z') return c + 32;
    if (c >= 0xC0 && c <= 0xDE && c != 0xD7) return c + 32;
    if (c >= 0x391 && c <= 0x3AB && c != 0x3A2) return c + 32;
    if (c >= 0x410 && c <= 0x42F) return c + 32;
    if (c >= 0x400 && c <= 0x40F) return c + 80;
    return c;
}

inline std::string html_unescape(std::string_view s) {
    static const std::array<std::pair<std::string_view, std::string_view>, 6> named{{
        {"&amp;", "&"}, {"&lt;", "<"}, {"&gt;", ">"}, {"&quot;", "\""}, {"&#39;", "'"}, {"&apos;", "'"}}};
    std::string out;
    std::size_t i = 0;
    while (i < s.size()) {
        if (s[i] == '&') {
            bool hit = false;
            for (const auto& [from, to] : named) {
                if (s.substr(i, from.size()) == from) {
                    out += to;
                    i += from.size();
                    hit = true;
                    break;
                }
            }
            if (!hit && s.substr(i, 2) == "&#") {
                std::size_t j = i + 2;
                bool hex = j < s.size() && (s[j] == 'x' || s[j] == 'X');
                if (hex) ++j;
                std::size_t start = j;
                while (j < s.size() && std::isxdigit(static_cast<unsigned char>(s[j])) &&
                       (hex || std::isdigit(static_cast<unsigned char>(s[j]))))
                    ++j;
                if (j > start && j < s.size() && s[j] == ';') {
                    auto cp = static_cast<char32_t>(std::stoul(std::string(s.substr(start, j - start)), nullptr, hex ? 16 : 10));
                    utf8::append(out, cp);
                    i = j + 1;
                    hit = true;
                }
            }
            if (hit) continue;
        }
        out.push_back(s[i++]);
    }
    return out;
}

inline std::string read_gzip(const std::filesystem::path& path) {
    gzFile f = gzopen(path.string().c_str(), "rb");
    if (!f) throw IoError("cannot open BPE vocabulary " + path.string());
    std::string out;
    std::array<char, 1 << 16> buf{};
    int n;
    while ((n = gzread(f, buf.data(), static_cast<unsigned>(buf.size()))) > 0) out.append(buf.data(), static_cast<std::size_t>(n));
    gzclose(f);
    if (n < 0) throw IoError("corrupt gzip stream in " + path.string());
    return out;
}

}  // namespace detail

/// Raw-BPE token ids for a text, before start/end/padding layout.
class BpeTokenizer {
public:
    static constexpr int kMergeCount = 49152 - 256 - 2;

    explicit BpeTokenizer(const std::filesystem::path& vocab_gz) {
        std::string text = detail::read_gzip(vocab_gz);
        std::istringstream in(text);
        std::string line;
        std::getline(in, line);  // version header
        std::vector<std::pair<std::string, std::string>> merges;
        merges.reserve(kMergeCount);
        while (static_cast<int>(merges.size()) < kMergeCount && std::getline(in, line)) {
            auto sp = line.find(' ');
            if (sp == std::string::npos) throw IoError("malformed merge line: " + line);
            merges.emplace_back(line.substr(0, sp), line.substr(sp + 1));
        }
        if (static_cast<int>(merges.size()) != kMergeCount) throw IoError("BPE vocabulary truncated");

        // byte -> printable code point, in the canonical order
        std::vector<int> bs;
        for (int b = '!'; b <= '~'; ++b) bs.push_back(b);
        for (int b = 0xA1; b <= 0xAC; ++b) bs.push_back(b);
        for (int b = 0xAE; b <= 0xFF; ++b) bs.push_back(b);
        std::vector<char32_t> cs(bs.begin(), bs.end());
        int extra = 0;
        for (int b = 0; b < 256; ++b) {
            if (std::find(bs.begin(), bs.end(), b) == bs.end()) {
                bs.push_back(b);
                cs.push_back(static_cast<char32_t>(256 + extra++));
            }
        }
        std::vector<std::string> vocab;
        for (std::size_t i = 0; i < bs.size(); ++i) {
            std::string sym;
            utf8::append(sym, cs[i]);
            byte_encoder_[static_cast<std::size_t>(bs[i])] = sym;
            vocab.push_back(sym);
        }
        for (std::size_t i = 0; i < bs.size(); ++i) vocab.push_back(vocab[i] + "</w>");
        for (const auto& [a, b] : merges) vocab.push_back(a + b);
        vocab.push_back("<|startoftext|>");
        vocab.push_back("<|endoftext|>");
        for (std::size_t i = 0; i < vocab.size(); ++i) encoder_.emplace(vocab[i], static_cast<int>(i));
        for (std::size_t i = 0; i < merges.size(); ++i)
            ranks_.emplace(merges[i].first + " " + merges[i].second, static_cast<int>(i));
    }

    int vocab_size() const { return static_cast<int>(encoder_.size()); }
    int sos_id() const { return encoder_.at("<|startoftext|>"); }
    int eos_id() const { return encoder_.at("<|endoftext|>"); }

    std::vector<int> encode(std::string_view text) const {
        std::vector<int> ids;
        for (const auto& word : split(clean(text))) {
            if (word == "<|startoftext|>" || word == "<|endoftext|>") {
                ids.push_back(encoder_.at(word));
                continue;
            }
            std::string mapped;
            for (unsigned char c : word) mapped += byte_encoder_[c];
            for (const auto& piece : bpe(mapped)) ids.push_back(encoder_.at(piece));
        }
        return ids;
    }

    /// Cleaned, lowercased text as seen by the pre-tokenizer.
    static std::string clean(std::string_view text) {
        std::string s = detail::html_unescape(detail::html_unescape(text));
        std::u32string cps = utf8::decode(s);
        std::u32string out;
        bool pending_space = false;
        for (char32_t c : cps) {
            if (detail::is_space(c)) {
                pending_space = !out.empty();
                continue;
            }
            if (pending_space) out.push_back(' ');
            pending_space = false;
            out.push_back(detail::to_lower(c));
        }
        return utf8::encode(out);
    }

    /// Pre-tokenizer: specials | contractions | letter runs | single digits | other-symbol runs.
    static std::vector<std::string> split(std::string_view cleaned) {
        static constexpr std::array<std::u32string_view, 9> fixed{
            U"<|startoftext|>", U"<|endoftext|>", U"'s", U"'t", U"'re", U"'ve", U"'m", U"'ll", U"'d"};
        std::u32string s = utf8::decode(cleaned);
        std::vector<std::string> out;
        std::size_t i = 0;
        while (i < s.size()) {
            bool matched = false;
            for (auto f : fixed) {
                if (std::u32string_view(s).substr(i, f.size()) == f) {
                    out.push_back(utf8::encode(f));
                    i += f.size();
                    matched = true;
                    break;
                }
            }
            if (matched) continue;
            char32_t c = s[i];
            std::size_t j = i + 1;
            if (detail::is_letter(c)) {
                while (j < s.size() && detail::is_letter(s[j])) ++j;
            } else if (detail::is_number(c)) {
                // one digit per token
            } else if (detail::is_space(c)) {
                i = j;
                continue;
            } else {
                while (j < s.size() && !detail::is_letter(s[j]) && !detail::is_number(s[j]) && !detail::is_space(s[j])) ++j;
            }
            out.push_back(utf8::encode(std::u32string_view(s).substr(i, j - i)));
            i = j;
        }
        return out;
    }

private:
    std::vector<std::string> bpe(const std::string& token) const {
        {
            std::lock_guard lock(cache_mu_);
            auto it = cache_.find(token);
            if (it != cache_.end()) return it->second;
        }
        // split into code-point symbols, marking the end of word on the last one
        std::vector<std::string> word;
        std::u32string cps = utf8::decode(token);
        for (std::size_t i = 0; i < cps.size(); ++i) {
            std::string sym;
            utf8::append(sym, cps[i]);
            if (i + 1 == cps.size()) sym += "</w>";
            word.push_back(std::move(sym));
        }
        while (word.size() > 1) {
            int best = -1;
            std::size_t best_i = 0;
            for (std::size_t i = 0; i + 1 < word.size(); ++i) {
                auto it = ranks_.find(word[i] + " " + word[i + 1]);
                if (it != ranks_.end() && (best < 0 || it->second < best)) {
                    best = it->second;
                    best_i = i;
                }
            }
            if (best < 0) break;
            const std::string first = word[best_i], second = word[best_i + 1];
            std::vector<std::string> merged;
            for (std::size_t i = 0; i < word.size();) {
                if (i + 1 < word.size() && word[i] == first && word[i + 1] == second) {
                    merged.push_back(first + second);
                    i += 2;
                } else {
                    merged.push_back(word[i++]);
                }
            }
            word = std::move(merged);
        }
        std::lock_guard lock(cache_mu_);
        cache_.emplace(token, word);
        return word;
    }

    std::array<std::string, 256> byte_encoder_;
    std::unordered_map<std::string, int> encoder_;
    std::unordered_map<std::string, int> ranks_;
    mutable std::unordered_map<std::string, std::vector<std::string>> cache_;
    mutable std::mutex cache_mu_;
};

/// Fixed-length sequence: [SOS] body [EOS] pad...
struct TokenSequence {
    std::vector<int> ids;
    Index eos_position = 0;
    /// [first, last) positions of the class-name tokens; empty when not a class prompt.
    std::pair<Index, Index> class_span{0, 0};
};

/// How BPE ids are laid out for a particular text encoder: context length, special ids,
/// and an optional fold of the BPE id space into a smaller vocabulary (used by the
/// micro backbone so the same tokenizer drives it).
struct TokenLayout {
    int context_length = 77;
    int vocab_size = 49408;
    int sos_id = 49406;
    int eos_id = 49407;
    int pad_id = 0;
    bool fold = false;

    static TokenLayout reference() { return {}; }

    static TokenLayout micro(int vocab = 64) {
        return TokenLayout{77, vocab, vocab - 2, vocab - 1, 0, true};
    }

    int map_id(int bpe_id) const {
        if (!fold) return bpe_id;
        return 1 + bpe_id % (vocab_size - 3);
    }

    int max_body() const { return context_length - 2; }
};

/// Tokenizer bound to a layout: produces fixed-length sequences for an encoder.
class Tokenizer {
public:
    Tokenizer(std::shared_ptr<const BpeTokenizer> bpe, TokenLayout layout) : bpe_(std::move(bpe)), layout_(layout) {}

    const TokenLayout& layout() const { return layout_; }

    /// Body ids (no SOS/EOS) in the layout's id space.
    std::vector<int> body(std::string_view text) const {
        std::vector<int> ids = bpe_->encode(text);
        for (int& id : ids) id = layout_.map_id(id);
        return ids;
    }

    /// Plain text; bodies longer than context_length - 2 are truncated.
    TokenSequence tokenize(std::string_view text) const {
        std::vector<int> b = body(text);
        if (static_cast<int>(b.size()) > layout_.max_body()) {
            log::info("tokenize: truncating ", b.size(), " body tokens to ", layout_.max_body());
            b.resize(static_cast<std::size_t>(layout_.max_body()));
        }
        return assemble(b, {0, 0});
    }

    /// Class prompt `prefix + class + suffix` (template placeholder already split out).
    /// Over-long prompts drop suffix tokens first, then prefix tokens nearest the start,
    /// so the class-name tokens survive.
    TokenSequence tokenize_prompt(std::string_view prefix, std::string_view class_name, std::string_view suffix) const {
        std::vector<int> p = body(prefix), c = body(class_name), s = body(suffix);
        const auto limit = static_cast<std::size_t>(layout_.max_body());
        if (p.size() + c.size() + s.size() > limit) {
            log::info("tokenize_prompt: truncating context around class '", class_name, "'");
            while (!s.empty() && p.size() + c.size() + s.size() > limit) s.pop_back();
            while (!p.empty() && p.size() + c.size() > limit) p.erase(p.begin());
            if (c.size() > limit) c.resize(limit);
        }
        std::vector<int> all = p;
        all.insert(all.end(), c.begin(), c.end());
        all.insert(all.end(), s.begin(), s.end());
        Index first = 1 + static_cast<Index>(p.size());
        return assemble(all, {first, first + static_cast<Index>(c.size())});
    }

    /// Layout for learned context: [SOS] ctx x n_ctx [class tokens] [EOS]. Context slots
    /// hold placeholder ids (pad) that the prompt learner overwrites with vectors.
    TokenSequence tokenize_context_prompt(int n_ctx, std::string_view class_name) const {
        std::vector<int> c = body(class_name);
        const auto room = static_cast<std::size_t>(layout_.max_body() - n_ctx);
        if (c.size() > room) {
            log::info("tokenize_context_prompt: truncating class '", class_name, "'");
            c.resize(room);
        }
        std::vector<int> all(static_cast<std::size_t>(n_ctx), layout_.pad_id);
        all.insert(all.end(), c.begin(), c.end());
        Index first = 1 + n_ctx;
        return assemble(all, {first, first + static_cast<Index>(c.size())});
    }

    TokenSequence assemble(const std::vector<int>& body_ids, std::pair<Index, Index> class_span) const {
        TokenSequence seq;
        seq.ids.assign(static_cast<std::size_t>(layout_.context_length), layout_.pad_id);
        seq.ids[0] = layout_.sos_id;
        for (std::size_t i = 0; i < body_ids.size(); ++i) seq.ids[i + 1] = body_ids[i];
        seq.eos_position = static_cast<Index>(body_ids.size()) + 1;
        seq.ids[static_cast<std::size_t>(seq.eos_position)] = layout_.eos_id;
        seq.class_span = class_span;
        return seq;
    }

private:
    std::shared_ptr<const BpeTokenizer> bpe_;
    TokenLayout layout_;
};

/// Splits a template on its placeholder ("{}" or "{class}").
inline std::pair<std::string, std::string> split_template(std::string_view tmpl) {
    for (std::string_view ph : {std::string_view("{class}"), std::string_view("{}")}) {
        auto pos = tmpl.find(ph);
        if (pos != std::string_view::npos)
            return {std::string(tmpl.substr(0, pos)), std::string(tmpl.substr(pos + ph.size()))};
    }
    throw ConfigError("template '" + std::string(tmpl) + "' has no {} placeholder");
}

}  // namespace rsprompt
