#include "lfr/corpus.hpp"

#include <openssl/evp.h>

#include <cctype>
#include <charconv>
#include <fstream>
#include <iterator>
#include <memory>

#include <json.hpp>

#include "lfr/detail/binary_io.hpp"
#include "lfr/error.hpp"

namespace lfr {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr char kBlockMagic[4] = {'L', 'F', 'R', 'B'};
constexpr std::size_t kBlockHeaderSize = 4 + 4 + 4 + 4 + 8;

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IngestError("cannot read " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IngestError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IngestError("short write to " + path.string());
}

json tokenizer_to_json(const TokenizerSpec& t) {
    json j = {{"kind", t.kind}, {"vocab_size", t.vocab_size}};
    j["separator"] = t.separator ? json(*t.separator) : json(nullptr);
    return j;
}

TokenizerSpec tokenizer_from_json(const json& j) {
    TokenizerSpec t;
    t.kind = j.at("kind").get<std::string>();
    t.vocab_size = j.at("vocab_size").get<std::uint32_t>();
    if (j.contains("separator") && !j.at("separator").is_null())
        t.separator = j.at("separator").get<TokenId>();
    return t;
}

void validate_tokenizer(const TokenizerSpec& t) {
    if (t.kind != "byte" && t.kind != "ids")
        throw ConfigError("unknown tokenizer kind '" + t.kind + "'");
    if (t.vocab_size == 0) throw ConfigError("tokenizer vocabulary is empty");
    if (t.kind == "byte" && t.vocab_size < 256)
        throw ConfigError("byte tokenizer needs vocab_size >= 256");
    if (t.separator && *t.separator >= t.vocab_size)
        throw ConfigError("separator id outside vocabulary");
}

}  // namespace

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(),
                                                               &EVP_MD_CTX_free);
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1 ||
        EVP_DigestUpdate(ctx.get(), bytes.data(), bytes.size()) != 1 ||
        EVP_DigestFinal_ex(ctx.get(), digest, &len) != 1)
        throw Error("sha256 failed");
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    out.reserve(len * 2);
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(hex[digest[i] >> 4]);
        out.push_back(hex[digest[i] & 0xF]);
    }
    return out;
}

std::vector<TokenId> tokenize_file(const fs::path& path, const TokenizerSpec& tokenizer) {
    validate_tokenizer(tokenizer);
    auto bytes = read_bytes(path);
    std::vector<TokenId> ids;
    if (tokenizer.kind == "byte") {
        ids.assign(bytes.begin(), bytes.end());
        return ids;
    }
    const char* p = reinterpret_cast<const char*>(bytes.data());
    const char* end = p + bytes.size();
    while (p < end) {
        while (p < end && std::isspace(static_cast<unsigned char>(*p))) ++p;
        if (p == end) break;
        TokenId id = 0;
        auto [next, ec] = std::from_chars(p, end, id);
        if (ec != std::errc())
            throw IngestError("bad token id in " + path.string() + " at byte " +
                              std::to_string(p - reinterpret_cast<const char*>(bytes.data())));
        if (id >= tokenizer.vocab_size)
            throw IngestError("token id " + std::to_string(id) + " >= vocab_size in " +
                              path.string());
        ids.push_back(id);
        p = next;
    }
    return ids;
}

Corpus Corpus::from_tokens(std::span<const TokenId> tokens, std::uint32_t context_length,
                           std::uint32_t vocab_size) {
    if (context_length == 0) throw ConfigError("context_length must be positive");
    if (vocab_size == 0) throw ConfigError("vocab_size must be positive");
    const std::size_t blocks = tokens.size() / context_length;
    if (blocks == 0) throw IngestError("corpus shorter than one block");
    for (TokenId t : tokens)
        if (t >= vocab_size)
            throw DomainError("token id " + std::to_string(t) + " >= vocab_size");

    Corpus c;
    c.context_length_ = context_length;
    c.vocab_size_ = vocab_size;
    c.block_count_ = blocks;
    c.tokens_.assign(tokens.begin(), tokens.begin() + blocks * context_length);
    c.manifest_.tokenizer.vocab_size = vocab_size;
    c.manifest_.tokenizer.kind = vocab_size == 256 ? "byte" : "ids";
    c.manifest_.total_tokens = tokens.size();
    c.manifest_.dropped_tokens = tokens.size() - c.tokens_.size();
    c.manifest_.block_count = blocks;
    c.manifest_.context_length = context_length;
    c.manifest_.sha256 = sha256_hex(serialize_block_store(c));
    return c;
}

TokenBlock Corpus::block(BlockId id) const {
    if (id >= block_count_)
        throw DomainError("block id " + std::to_string(id) + " outside corpus of " +
                          std::to_string(block_count_) + " blocks");
    return {id, std::span<const TokenId>(tokens_).subspan(id * context_length_, context_length_)};
}

std::vector<std::uint8_t> serialize_block_store(const Corpus& corpus) {
    std::vector<std::uint8_t> out;
    out.reserve(kBlockHeaderSize + corpus.tokens().size() * 4);
    out.insert(out.end(), std::begin(kBlockMagic), std::end(kBlockMagic));
    detail::put_le<std::uint32_t>(out, kBlockStoreVersion);
    detail::put_le<std::uint32_t>(out, corpus.context_length());
    detail::put_le<std::uint32_t>(out, corpus.vocab_size());
    detail::put_le<std::uint64_t>(out, corpus.size());
    for (TokenId t : corpus.tokens()) detail::put_le<std::uint32_t>(out, t);
    return out;
}

Corpus ingest(const std::vector<fs::path>& sources, const TokenizerSpec& tokenizer,
              std::uint32_t context_length, const fs::path& out_dir) {
    validate_tokenizer(tokenizer);
    if (sources.empty()) throw IngestError("no source files given");

    std::vector<TokenId> stream;
    for (std::size_t i = 0; i < sources.size(); ++i) {
        if (i > 0 && tokenizer.separator) stream.push_back(*tokenizer.separator);
        auto doc = tokenize_file(sources[i], tokenizer);
        stream.insert(stream.end(), doc.begin(), doc.end());
    }

    Corpus c = Corpus::from_tokens(stream, context_length, tokenizer.vocab_size);
    auto store = serialize_block_store(c);

    Manifest& m = c.manifest_;
    m.tokenizer = tokenizer;
    m.sources.clear();
    for (const auto& s : sources) m.sources.push_back(s.string());
    m.block_store = "blocks.bin";
    m.sha256 = sha256_hex(store);

    fs::create_directories(out_dir);
    write_bytes(out_dir / m.block_store, store);

    json j = {{"version", m.version},
              {"tokenizer", tokenizer_to_json(m.tokenizer)},
              {"sources", m.sources},
              {"total_tokens", m.total_tokens},
              {"dropped_tokens", m.dropped_tokens},
              {"block_count", m.block_count},
              {"context_length", m.context_length},
              {"block_store", m.block_store},
              {"sha256", m.sha256}};
    std::string text = j.dump(2) + "\n";
    write_bytes(out_dir / "manifest.json",
                {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
    return c;
}

Corpus load(const fs::path& manifest_path) {
    json j;
    {
        std::ifstream in(manifest_path);
        if (!in) throw IngestError("cannot read " + manifest_path.string());
        try {
            j = json::parse(in);
        } catch (const json::exception& e) {
            throw FormatError("manifest " + manifest_path.string() + ": " + e.what());
        }
    }

    Manifest m;
    try {
        m.version = j.at("version").get<std::uint32_t>();
        if (m.version != kManifestVersion)
            throw FormatError("manifest version " + std::to_string(m.version) +
                              " unsupported (expected " + std::to_string(kManifestVersion) + ")");
        m.tokenizer = tokenizer_from_json(j.at("tokenizer"));
        m.sources = j.at("sources").get<std::vector<std::string>>();
        m.total_tokens = j.at("total_tokens").get<std::uint64_t>();
        m.dropped_tokens = j.at("dropped_tokens").get<std::uint64_t>();
        m.block_count = j.at("block_count").get<std::uint64_t>();
        m.context_length = j.at("context_length").get<std::uint32_t>();
        m.block_store = j.at("block_store").get<std::string>();
        m.sha256 = j.at("sha256").get<std::string>();
    } catch (const json::exception& e) {
        throw FormatError("manifest " + manifest_path.string() + ": " + e.what());
    }

    const fs::path store_path = manifest_path.parent_path() / m.block_store;
    std::vector<std::uint8_t> bytes;
    try {
        bytes = read_bytes(store_path);
    } catch (const IngestError&) {
        throw CorruptionError("block store missing: " + store_path.string());
    }
    if (sha256_hex(bytes) != m.sha256)
        throw CorruptionError("checksum mismatch for " + store_path.string());

    std::span<const std::uint8_t> view(bytes);
    if (bytes.size() < kBlockHeaderSize || !std::equal(std::begin(kBlockMagic),
                                                       std::end(kBlockMagic), bytes.begin()))
        throw FormatError("not a block store: " + store_path.string());
    const auto version = detail::get_le<std::uint32_t>(view, 4);
    if (version != kBlockStoreVersion)
        throw FormatError("block store version " + std::to_string(version) + " unsupported");
    const auto context_length = detail::get_le<std::uint32_t>(view, 8);
    const auto vocab_size = detail::get_le<std::uint32_t>(view, 12);
    const auto block_count = detail::get_le<std::uint64_t>(view, 16);

    if (block_count != m.block_count || context_length != m.context_length ||
        vocab_size != m.tokenizer.vocab_size)
        throw FormatError("manifest disagrees with block store header (block_count " +
                          std::to_string(m.block_count) + " vs " + std::to_string(block_count) +
                          ")");
    if (context_length == 0 || block_count == 0)
        throw FormatError("empty block store");
    if (bytes.size() != kBlockHeaderSize + block_count * context_length * 4)
        throw CorruptionError("block store length does not match header");

    Corpus c;
    c.context_length_ = context_length;
    c.vocab_size_ = vocab_size;
    c.block_count_ = block_count;
    c.tokens_.resize(block_count * context_length);
    for (std::size_t i = 0; i < c.tokens_.size(); ++i) {
        c.tokens_[i] = detail::get_le<std::uint32_t>(view, kBlockHeaderSize + 4 * i);
        if (c.tokens_[i] >= vocab_size)
            throw CorruptionError("token id out of vocabulary at index " + std::to_string(i));
    }
    c.manifest_ = std::move(m);
    return c;
}

}  // namespace lfr
