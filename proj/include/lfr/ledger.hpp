#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lfr/corpus.hpp"

namespace lfr {

using Step = std::uint64_t;

// exp of the mean per-token negative log likelihood (nats). Throws
// DomainError on an empty sequence or a non-finite value.
double ppl_from_nlls(std::span<const double> per_token_nlls);

struct PplRecord {
    BlockId block_id = 0;
    Step step = 0;
    double ppl = 0.0;
    std::uint16_t worker = 0;

    bool operator==(const PplRecord&) const = default;
};

struct Trajectory {
    BlockId block_id = 0;
    std::vector<PplRecord> records;  // strictly increasing step
};

enum class TrajectoryKind {
    Learned,      // only decreases (flats ignored)
    Unlearned,    // only increases
    Forgotten,    // at least one rise followed later by a fall
    Mixed,        // fell, then rose, and never fell again
    Insufficient  // fewer than two records, or nothing but flats
};

struct TrajectoryClass {
    TrajectoryKind kind = TrajectoryKind::Insufficient;
    // Number of maximal rise runs that are followed by a fall; >= 1 exactly
    // when kind == Forgotten, 0 otherwise.
    std::uint32_t descent_count = 0;

    bool operator==(const TrajectoryClass&) const = default;
};

std::string to_string(TrajectoryKind kind);

TrajectoryClass classify(std::span<const double> ppls, double epsilon = 0.0);
TrajectoryClass classify(const Trajectory& trajectory, double epsilon = 0.0);

struct StepWindow {
    Step first = 0;  // inclusive
    Step last = 0;   // inclusive
    bool contains(Step s) const { return s >= first && s <= last; }
};

struct LatestPpls {
    std::map<BlockId, double> ppl;
    std::vector<BlockId> missing;
};

struct ForgettingReport {
    std::size_t trajectories = 0;
    double fraction_forgotten_at_least_once = 0.0;
    double fraction_forgotten_multiple_given_forgotten = 0.0;
    std::map<TrajectoryKind, std::size_t> class_counts;
    std::map<std::uint32_t, std::size_t> descent_count_histogram;  // Forgotten only
};

// Per-block perplexity history. record() is safe to call from several
// threads; readers take a consistent snapshot under the same lock.
//
// With a persistence path, records are appended to a binary file:
//   header "LFRL" + u32 version
//   records of (block_id u64, step u64, ppl f64, worker u16), little-endian.
// Pending records are written at flush() sorted by (step, worker, block_id),
// so the file is independent of the order concurrent writers arrived in.
class PplLedger {
public:
    // block_count bounds valid ids; nullopt accepts any id.
    explicit PplLedger(std::optional<std::size_t> block_count = std::nullopt);
    // Opens (or creates) a persisted ledger. Existing records are loaded and
    // new ones appended.
    PplLedger(const std::filesystem::path& path, std::optional<std::size_t> block_count);
    ~PplLedger();

    PplLedger(const PplLedger&) = delete;
    PplLedger& operator=(const PplLedger&) = delete;

    void record(BlockId block_id, Step step, double ppl, std::uint16_t worker = 0);
    // Validates the whole set first; either all records are applied or none.
    void record_all(std::span<const PplRecord> records);
    void flush();

    std::size_t block_count_hint() const;
    std::size_t size() const;  // number of records
    std::vector<Trajectory> trajectories() const;
    std::optional<Trajectory> trajectory(BlockId id) const;
    std::vector<PplRecord> records() const;  // every record, (step, worker, block) order

    LatestPpls latest_ppls(std::optional<StepWindow> window, std::size_t corpus_blocks) const;
    ForgettingReport forgetting_report(double epsilon = 0.0) const;

    void export_csv(const std::filesystem::path& path) const;

    // Reads a persisted ledger file without opening it for append.
    static std::vector<PplRecord> read_file(const std::filesystem::path& path);

private:
    void check_locked(const PplRecord& r) const;
    void apply_locked(const PplRecord& r);

    mutable std::mutex mu_;
    std::optional<std::size_t> block_count_;
    std::map<BlockId, Trajectory> by_block_;
    std::size_t record_count_ = 0;
    std::vector<PplRecord> pending_;
    std::optional<std::filesystem::path> path_;
    std::ofstream out_;
};

ForgettingReport forgetting_report(std::span<const TrajectoryClass> classes);

}  // namespace lfr
