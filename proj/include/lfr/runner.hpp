#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "lfr/corpus.hpp"
#include "lfr/learner.hpp"
#include "lfr/ledger.hpp"
#include "lfr/scheduler.hpp"

namespace lfr {

struct RunSummary {
    Step steps = 0;
    std::size_t samples = 0;  // blocks trained on, counting repeats
    std::size_t records = 0;  // ledger records written by this run
};

// Called after every trained batch with the batch and the per-block mean NLLs.
using BatchObserver = std::function<void(const Batch&, const std::vector<double>&)>;

// Pulls batches from the scheduler until it is exhausted, trains the learner
// on each and records ppl = exp(mean NLL) for steps the scheduler marks as
// recording. The ledger is flushed at the end.
RunSummary run_training(Scheduler& scheduler, Learner& learner, const Corpus& corpus,
                        PplLedger& ledger, const BatchObserver& observer = {});

// Noise-free perplexity of every block under the learner's current state.
std::vector<double> evaluate_ppls(const Learner& learner, const Corpus& corpus);

// Writes run.json describing a run directory (corpus checksum, schedule,
// seed, strategy label) so analysis tools can check artifact provenance.
void write_run_manifest(const std::filesystem::path& dir, const Corpus& corpus,
                        const SchedulerConfig& config, const std::string& label);

// A corpus of n blocks of length L whose content is irrelevant (every token
// is 0); used to drive the synthetic learner.
Corpus placeholder_corpus(std::size_t n, std::uint32_t context_length = 2);

struct SimulationResult {
    std::string strategy;
    std::uint64_t seed = 0;
    Step steps = 0;
    std::size_t samples = 0;
    double final_mean_ppl = 0.0;
    double hardest_decile_mean_ppl = 0.0;  // top 10% of blocks by difficulty
    ForgettingReport forgetting;
};

struct SimulationOptions {
    std::size_t blocks = 1000;
    std::size_t batch_size = 10;
    std::uint64_t seed = 0;  // drives both sampling and the learner
    double epsilon = 0.0;    // for the forgetting report
    std::optional<std::filesystem::path> out_dir;
};

SimulationResult simulate_synthetic(const std::string& label, const Schedule& schedule,
                                    SyntheticLearnerConfig learner,
                                    const SimulationOptions& options);

}  // namespace lfr
