#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "lfr/corpus.hpp"
#include "lfr/ledger.hpp"

namespace lfr {

enum class PhaseKind { Learn, Focus, Revise };

std::string to_string(PhaseKind kind);
PhaseKind phase_kind_from_string(std::string_view name);

struct PhaseSpec {
    PhaseKind kind = PhaseKind::Learn;
    std::uint32_t epochs = 1;
    double keep_fraction = 1.0;  // < 1 only for Focus

    bool operator==(const PhaseSpec&) const = default;
};

struct Schedule {
    std::vector<PhaseSpec> phases;

    std::uint32_t total_epochs() const;
    // Throws ConfigError unless the first phase is Learn, every Focus follows
    // a recording phase, epochs >= 1 and keep fractions are in range.
    void validate() const;

    bool operator==(const Schedule&) const = default;
};

// Hyperparameters of the Learn / Focus / Revise loop. s1 is the percentage
// of blocks discarded in each Focus phase.
struct LfrHparams {
    std::uint32_t p1 = 1;
    double s1 = 50.0;
    std::uint32_t p2 = 1;
    std::uint32_t p3 = 1;
    std::uint32_t reps = 1;
};

// [Learn x p1] ++ reps x [Focus((100 - s1)%) x p2, Revise x p3], dropping
// zero-epoch phases.
Schedule schedule_from_hparams(const LfrHparams& hp);

struct StrategyParams {
    std::uint32_t total_epochs = 8;
};

// "lfr":    Learn 1, Focus(0.5) 1, Revise 1, Focus(0.3) total-3
// "aggr-1": Learn 1, Focus(0.5) total-1
// "aggr-2": Learn 1, Focus(0.3) 1, Revise 1, Focus(0.3) total-3
// "random": Learn total
Schedule apply_strategy(std::string_view name, const StrategyParams& base = {});

// The ceil(keep_fraction * n) highest-perplexity blocks, ties at the cut
// going to the smaller block id. `ppls` must cover ids 0..corpus_blocks-1;
// otherwise SchedulingError lists the missing ids. Result is ascending.
std::vector<BlockId> select_focus_set(const std::map<BlockId, double>& ppls,
                                      double keep_fraction, std::size_t corpus_blocks);

std::size_t focus_pool_size(double keep_fraction, std::size_t corpus_blocks);

// Which records a Focus transition ranks by.
enum class RankWindow {
    RecordingPhase,  // latest record inside the most recent Learn/Revise phase
    AllHistory       // latest record overall
};

struct SchedulerConfig {
    Schedule schedule;
    std::uint64_t seed = 0;
    std::size_t batch_size = 1;
    std::optional<Step> step_budget;
    RankWindow rank_window = RankWindow::RecordingPhase;
    bool record_focus = true;  // whether Focus-phase observations enter the ledger
    // Where dropped_phase<k>.ids / retained_phase<k>.ids are written; k is the
    // 1-based phase number.
    std::optional<std::filesystem::path> ids_dir;
};

// Accepts {"hparams": {...}}, {"phases": [...]} or {"strategy": name,
// "total_epochs": n}, plus seed, batch_size, step_budget, rank_window
// ("recording-phase" | "all-history") and record_focus.
SchedulerConfig scheduler_config_from_json(const nlohmann::json& j);
SchedulerConfig load_scheduler_config(const std::filesystem::path& path);
nlohmann::json to_json(const Schedule& schedule);

struct PhaseInfo {
    std::size_t phase_index = 0;
    PhaseKind kind = PhaseKind::Learn;
    std::uint32_t epoch = 0;  // within the phase, 0-based
    std::uint32_t epochs = 0;
    double keep_fraction = 1.0;
    std::size_t pool_size = 0;

    bool operator==(const PhaseInfo&) const = default;
};

struct Batch {
    Step step = 0;
    std::vector<BlockId> block_ids;
    PhaseInfo phase;
};

struct FocusSelection {
    std::size_t phase_index = 0;
    std::vector<BlockId> retained;
    std::vector<BlockId> dropped;
};

// Drives sampling through a schedule. Each epoch is a uniform random
// permutation of the active pool, cut into consecutive batches; the last
// batch of an epoch may be short. One thread calls next_batch(); the ledger
// may be written concurrently from others.
class Scheduler {
public:
    Scheduler(SchedulerConfig config, std::size_t corpus_blocks, const PplLedger& ledger);

    // nullopt once the schedule (or the step budget) is exhausted.
    std::optional<Batch> next_batch();

    bool exhausted() const { return exhausted_; }
    Step step() const { return step_; }
    std::size_t corpus_blocks() const { return corpus_blocks_; }
    const SchedulerConfig& config() const { return config_; }
    const std::vector<BlockId>& active_pool() const { return pool_; }
    PhaseInfo phase_info() const;
    const std::vector<FocusSelection>& focus_selections() const { return selections_; }

    // Kind of the phase that emitted `step`, if it has been emitted.
    std::optional<PhaseKind> phase_of_step(Step step) const;
    // Whether an observation made at `step` should be written to the ledger.
    bool records_step(Step step) const;

    nlohmann::json save_state() const;
    // Restores a state produced by save_state() under an identical config.
    void restore_state(const nlohmann::json& state);

private:
    struct PhaseWindow {
        std::size_t phase_index;
        PhaseKind kind;
        Step first;
        std::optional<Step> last;
    };

    void begin_phase(std::size_t index);
    void new_permutation();
    void write_ids(const FocusSelection& sel) const;
    std::string config_fingerprint() const;

    SchedulerConfig config_;
    std::size_t corpus_blocks_;
    const PplLedger& ledger_;

    std::mt19937_64 rng_;
    bool started_ = false;
    bool exhausted_ = false;
    std::size_t phase_index_ = 0;
    std::uint32_t epoch_ = 0;
    std::size_t cursor_ = 0;
    Step step_ = 0;
    std::vector<BlockId> pool_;
    std::vector<BlockId> permutation_;
    std::vector<PhaseWindow> windows_;
    std::vector<FocusSelection> selections_;
};

}  // namespace lfr
