#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace lfr {

using TokenId = std::uint32_t;
using BlockId = std::uint64_t;

inline constexpr std::uint32_t kBlockStoreVersion = 1;
inline constexpr std::uint32_t kManifestVersion = 1;

// How raw source files become token ids.
//   kind "byte": every byte of the file is a token, vocab 256.
//   kind "ids":  the file already holds whitespace-separated token ids.
// A separator token, when set, is inserted between consecutive documents.
struct TokenizerSpec {
    std::string kind = "byte";
    std::uint32_t vocab_size = 256;
    std::optional<TokenId> separator;

    static TokenizerSpec byte_level() { return {}; }
    static TokenizerSpec token_ids(std::uint32_t vocab_size) {
        return TokenizerSpec{"ids", vocab_size, std::nullopt};
    }
};

// Tokenizes one document. Throws IngestError if the file cannot be read or
// an id is out of range.
std::vector<TokenId> tokenize_file(const std::filesystem::path& path,
                                   const TokenizerSpec& tokenizer);

struct Manifest {
    std::uint32_t version = kManifestVersion;
    TokenizerSpec tokenizer;
    std::vector<std::string> sources;
    std::uint64_t total_tokens = 0;
    std::uint64_t dropped_tokens = 0;
    std::uint64_t block_count = 0;
    std::uint32_t context_length = 0;
    std::string block_store;  // file name relative to the manifest
    std::string sha256;       // hex digest of the block store file
};

// Non-owning view of one fixed-length block.
struct TokenBlock {
    BlockId block_id;
    std::span<const TokenId> tokens;
};

// An immutable set of fixed-length blocks. Copies share nothing; a const
// Corpus is safe to read from many threads.
class Corpus {
public:
    Corpus() = default;

    // Cuts a token stream into floor(size / context_length) blocks and drops
    // the remainder. Throws IngestError if not even one block fits.
    static Corpus from_tokens(std::span<const TokenId> tokens,
                              std::uint32_t context_length,
                              std::uint32_t vocab_size);

    std::size_t size() const { return block_count_; }
    std::uint32_t context_length() const { return context_length_; }
    std::uint32_t vocab_size() const { return vocab_size_; }

    TokenBlock block(BlockId id) const;
    std::span<const TokenId> tokens() const { return tokens_; }

    const Manifest& manifest() const { return manifest_; }
    // SHA-256 of the serialized block store; identifies the corpus on the
    // wire and across analysis artifacts.
    const std::string& checksum() const { return manifest_.sha256; }

    bool operator==(const Corpus& other) const {
        return context_length_ == other.context_length_ &&
               vocab_size_ == other.vocab_size_ && tokens_ == other.tokens_;
    }

private:
    friend Corpus ingest(const std::vector<std::filesystem::path>&,
                         const TokenizerSpec&, std::uint32_t,
                         const std::filesystem::path&);
    friend Corpus load(const std::filesystem::path&);

    std::vector<TokenId> tokens_;
    std::size_t block_count_ = 0;
    std::uint32_t context_length_ = 0;
    std::uint32_t vocab_size_ = 0;
    Manifest manifest_;
};

// Serialized block store: "LFRB", version, context length, vocab size,
// block count, then block_count * L little-endian u32 ids.
std::vector<std::uint8_t> serialize_block_store(const Corpus& corpus);

// Tokenizes the sources in order, concatenates them, cuts blocks and writes
// `blocks.bin` plus `manifest.json` into out_dir.
Corpus ingest(const std::vector<std::filesystem::path>& sources,
              const TokenizerSpec& tokenizer, std::uint32_t context_length,
              const std::filesystem::path& out_dir);

// Reads a manifest and its block store, verifying checksum and counts.
Corpus load(const std::filesystem::path& manifest_path);

std::string sha256_hex(std::span<const std::uint8_t> bytes);

}  // namespace lfr
