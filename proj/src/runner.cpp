#include "lfr/runner.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "lfr/error.hpp"

namespace lfr {

namespace fs = std::filesystem;
using json = nlohmann::json;

RunSummary run_training(Scheduler& scheduler, Learner& learner, const Corpus& corpus,
                        PplLedger& ledger, const BatchObserver& observer) {
    RunSummary summary;
    std::vector<TokenBlock> blocks;
    std::vector<PplRecord> records;
    while (auto batch = scheduler.next_batch()) {
        blocks.clear();
        for (BlockId id : batch->block_ids) blocks.push_back(corpus.block(id));
        const auto nlls = learner.train_on(blocks, batch->step);
        if (nlls.size() != blocks.size())
            throw TrainingError("learner returned " + std::to_string(nlls.size()) +
                                " values for a batch of " + std::to_string(blocks.size()));
        if (scheduler.records_step(batch->step)) {
            records.clear();
            for (std::size_t i = 0; i < blocks.size(); ++i)
                records.push_back({batch->block_ids[i], batch->step, std::exp(nlls[i]), 0});
            ledger.record_all(records);
            summary.records += records.size();
        }
        summary.samples += blocks.size();
        summary.steps = batch->step + 1;
        if (observer) observer(*batch, nlls);
    }
    ledger.flush();
    return summary;
}

std::vector<double> evaluate_ppls(const Learner& learner, const Corpus& corpus) {
    std::vector<double> out(corpus.size());
    for (BlockId id = 0; id < corpus.size(); ++id)
        out[id] = ppl_from_nlls(learner.eval_nll(corpus.block(id)));
    return out;
}

void write_run_manifest(const fs::path& dir, const Corpus& corpus, const SchedulerConfig& config,
                        const std::string& label) {
    fs::create_directories(dir);
    json j = {{"label", label},
              {"corpus_checksum", corpus.checksum()},
              {"corpus_blocks", corpus.size()},
              {"schedule", to_json(config.schedule)},
              {"seed", config.seed},
              {"batch_size", config.batch_size},
              {"step_budget", config.step_budget ? json(*config.step_budget) : json(nullptr)}};
    std::ofstream out(dir / "run.json", std::ios::trunc);
    if (!out) throw Error("cannot write " + (dir / "run.json").string());
    out << j.dump(2) << '\n';
}

Corpus placeholder_corpus(std::size_t n, std::uint32_t context_length) {
    std::vector<TokenId> tokens(n * context_length, 0);
    return Corpus::from_tokens(tokens, context_length, 1);
}

SimulationResult simulate_synthetic(const std::string& label, const Schedule& schedule,
                                    SyntheticLearnerConfig learner_config,
                                    const SimulationOptions& options) {
    const Corpus corpus = placeholder_corpus(options.blocks);
    learner_config.seed = options.seed;
    SyntheticLearner learner(learner_config, corpus.size(), corpus.context_length());

    SchedulerConfig config;
    config.schedule = schedule;
    config.seed = options.seed;
    config.batch_size = options.batch_size;
    std::optional<PplLedger> persisted;
    if (options.out_dir) {
        config.ids_dir = options.out_dir;
        write_run_manifest(*options.out_dir, corpus, config, label);
        const auto path = *options.out_dir / "ledger.bin";
        fs::remove(path);
        persisted.emplace(path, corpus.size());
    }
    PplLedger in_memory(corpus.size());
    PplLedger& ledger = persisted ? *persisted : in_memory;

    Scheduler scheduler(config, corpus.size(), ledger);
    const auto run = run_training(scheduler, learner, corpus, ledger);

    SimulationResult r;
    r.strategy = label;
    r.seed = options.seed;
    r.steps = run.steps;
    r.samples = run.samples;
    const auto ppls = evaluate_ppls(learner, corpus);
    r.final_mean_ppl = std::accumulate(ppls.begin(), ppls.end(), 0.0) / static_cast<double>(ppls.size());

    std::vector<BlockId> by_difficulty(corpus.size());
    std::iota(by_difficulty.begin(), by_difficulty.end(), BlockId{0});
    std::stable_sort(by_difficulty.begin(), by_difficulty.end(), [&](BlockId a, BlockId b) {
        return learner.difficulty(a) > learner.difficulty(b);
    });
    const std::size_t decile = std::max<std::size_t>(1, corpus.size() / 10);
    double hard = 0.0;
    for (std::size_t i = 0; i < decile; ++i) hard += ppls[by_difficulty[i]];
    r.hardest_decile_mean_ppl = hard / static_cast<double>(decile);
    r.forgetting = ledger.forgetting_report(options.epsilon);
    if (options.out_dir) ledger.export_csv(*options.out_dir / "ledger.csv");
    return r;
}

}  // namespace lfr
