// lfr: command-line front end.
//
//   lfr ingest    <files...> --context-length L --out DIR
//   lfr train     --schedule S --corpus MANIFEST --learner tiny|synthetic --config C --out DIR
//   lfr simulate  --strategy lfr|aggr-1|aggr-2|random|all --learner synthetic --config C --out DIR
//   lfr analyze   classify|report|compare ...
//   lfr serve     --schedule S --corpus MANIFEST --ledger PATH --listen stdio|tcp:<port>
//   lfr client    --connect tcp:<host>:<port> --corpus MANIFEST --learner ... --config C

#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <numeric>

#include <CLI11.hpp>
#include <json.hpp>

#include "lfr/bridge.hpp"
#include "lfr/clustering.hpp"
#include "lfr/corpus.hpp"
#include "lfr/error.hpp"
#include "lfr/learner.hpp"
#include "lfr/ledger.hpp"
#include "lfr/runner.hpp"
#include "lfr/scheduler.hpp"

using namespace lfr;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read " + path.string());
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

void write_json(const fs::path& path, const json& j) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

// Loads a persisted ledger read-only into memory.
std::unique_ptr<PplLedger> load_ledger(const fs::path& path) {
    auto ledger = std::make_unique<PplLedger>();
    const auto records = PplLedger::read_file(path);
    ledger->record_all(records);
    return ledger;
}

json report_json(const ForgettingReport& r) {
    json counts = json::object();
    for (const auto& [kind, n] : r.class_counts) counts[to_string(kind)] = n;
    json hist = json::object();
    for (const auto& [d, n] : r.descent_count_histogram) hist[std::to_string(d)] = n;
    return {{"trajectories", r.trajectories},
            {"fraction_forgotten_at_least_once", r.fraction_forgotten_at_least_once},
            {"fraction_forgotten_multiple_given_forgotten",
             r.fraction_forgotten_multiple_given_forgotten},
            {"class_counts", counts},
            {"descent_count_histogram", hist}};
}

std::unique_ptr<Learner> make_learner(const std::string& kind, const std::optional<fs::path>& config,
                                      const Corpus& corpus) {
    const json j = config ? read_json(*config) : json::object();
    if (kind == "synthetic")
        return std::make_unique<SyntheticLearner>(synthetic_config_from_json(j), corpus.size(),
                                                  corpus.context_length());
    if (kind == "tiny") {
        auto cfg = tinylm_config_from_json(j);
        if (cfg.vocab_size < corpus.vocab_size())
            throw ConfigError("tiny learner vocab_size " + std::to_string(cfg.vocab_size) +
                              " is smaller than the corpus vocabulary " +
                              std::to_string(corpus.vocab_size()));
        return std::make_unique<TinyLM>(cfg);
    }
    throw ConfigError("unknown learner '" + kind + "' (expected tiny or synthetic)");
}

// ---------------------------------------------------------------------------

struct IngestArgs {
    std::vector<std::string> inputs;
    std::uint32_t context_length = 1024;
    std::string tokenizer = "byte";
    std::uint32_t vocab_size = 256;
    std::optional<std::uint32_t> separator;
    std::string out;
};

int run_ingest(const IngestArgs& a) {
    TokenizerSpec tok = a.tokenizer == "byte" ? TokenizerSpec::byte_level()
                                              : TokenizerSpec::token_ids(a.vocab_size);
    tok.separator = a.separator;
    std::vector<fs::path> paths(a.inputs.begin(), a.inputs.end());
    const Corpus c = ingest(paths, tok, a.context_length, a.out);
    std::printf("%zu blocks of %u tokens (%llu dropped), sha256 %s\n", c.size(), c.context_length(),
                static_cast<unsigned long long>(c.manifest().dropped_tokens), c.checksum().c_str());
    return 0;
}

struct TrainArgs {
    std::string schedule, corpus, learner = "tiny", out;
    std::optional<std::string> config;
    std::optional<Step> step_budget;
};

int run_train(const TrainArgs& a) {
    const Corpus corpus = load(a.corpus);
    SchedulerConfig sc = load_scheduler_config(a.schedule);
    if (a.step_budget) sc.step_budget = a.step_budget;
    const fs::path out = a.out;
    sc.ids_dir = out;
    write_run_manifest(out, corpus, sc, a.learner);

    auto learner = make_learner(a.learner, a.config ? std::optional<fs::path>(*a.config) : std::nullopt, corpus);
    fs::remove(out / "ledger.bin");
    PplLedger ledger(out / "ledger.bin", corpus.size());
    Scheduler scheduler(sc, corpus.size(), ledger);

    std::size_t last_phase = SIZE_MAX;
    const auto summary = run_training(scheduler, *learner, corpus, ledger,
                                      [&](const Batch& b, const std::vector<double>& nlls) {
                                          if (b.phase.phase_index != last_phase) {
                                              last_phase = b.phase.phase_index;
                                              std::fprintf(stderr, "step %llu: phase %zu (%s, pool %zu)\n",
                                                           static_cast<unsigned long long>(b.step),
                                                           b.phase.phase_index + 1,
                                                           to_string(b.phase.kind).c_str(), b.phase.pool_size);
                                          }
                                          (void)nlls;
                                      });
    ledger.export_csv(out / "ledger.csv");
    if (auto* tiny = dynamic_cast<TinyLM*>(learner.get())) tiny->save(out / "model.ckpt");

    const auto ppls = evaluate_ppls(*learner, corpus);
    const double mean = std::accumulate(ppls.begin(), ppls.end(), 0.0) / static_cast<double>(ppls.size());
    write_json(out / "summary.json", {{"steps", summary.steps},
                                      {"samples", summary.samples},
                                      {"records", summary.records},
                                      {"final_mean_ppl", mean},
                                      {"forgetting", report_json(ledger.forgetting_report())}});
    std::printf("%llu steps, %zu samples, final mean ppl %.6g\n",
                static_cast<unsigned long long>(summary.steps), summary.samples, mean);
    return 0;
}

struct SimulateArgs {
    std::string strategy = "lfr", learner = "synthetic";
    std::optional<std::string> config, out;
    std::size_t blocks = 1000, batch_size = 10, seeds = 1;
    std::uint64_t seed = 0;
    std::uint32_t total_epochs = 8;
    double epsilon = 0.0;
};

int run_simulate(const SimulateArgs& a) {
    if (a.learner != "synthetic") throw ConfigError("simulate supports --learner synthetic only");
    const auto cfg = synthetic_config_from_json(a.config ? read_json(*a.config) : json::object());
    std::vector<std::string> strategies;
    if (a.strategy == "all")
        strategies = {"lfr", "aggr-1", "aggr-2", "random"};
    else
        strategies = {a.strategy};

    json rows = json::array();
    std::printf("%-8s %6s %14s %16s %10s %10s\n", "strategy", "seed", "final_ppl", "hardest_decile",
                "forgot", "multi|f");
    for (const auto& name : strategies) {
        const Schedule schedule = apply_strategy(name, {a.total_epochs});
        for (std::size_t s = 0; s < a.seeds; ++s) {
            SimulationOptions opts;
            opts.blocks = a.blocks;
            opts.batch_size = a.batch_size;
            opts.seed = a.seed + s;
            opts.epsilon = a.epsilon;
            if (a.out) opts.out_dir = fs::path(*a.out) / name / ("seed" + std::to_string(opts.seed));
            const auto r = simulate_synthetic(name, schedule, cfg, opts);
            std::printf("%-8s %6llu %14.6f %16.6f %10.4f %10.4f\n", name.c_str(),
                        static_cast<unsigned long long>(r.seed), r.final_mean_ppl,
                        r.hardest_decile_mean_ppl, r.forgetting.fraction_forgotten_at_least_once,
                        r.forgetting.fraction_forgotten_multiple_given_forgotten);
            rows.push_back({{"strategy", name},
                            {"seed", r.seed},
                            {"steps", r.steps},
                            {"final_mean_ppl", r.final_mean_ppl},
                            {"hardest_decile_mean_ppl", r.hardest_decile_mean_ppl},
                            {"forgetting", report_json(r.forgetting)}});
        }
    }
    if (a.out) {
        fs::create_directories(*a.out);
        write_json(fs::path(*a.out) / "results.json", rows);
    }
    return 0;
}

struct ClassifyArgs {
    std::string ledger;
    double epsilon = 0.0;
    std::optional<std::string> out;
};

int run_classify(const ClassifyArgs& a) {
    const auto ledger = load_ledger(a.ledger);
    std::ofstream file;
    if (a.out) {
        file.open(*a.out, std::ios::trunc);
        if (!file) throw Error("cannot write " + *a.out);
    }
    std::ostream& out = a.out ? static_cast<std::ostream&>(file) : std::cout;
    out << "block_id,class,descent_count,records\n";
    for (const auto& t : ledger->trajectories()) {
        const auto c = classify(t, a.epsilon);
        out << t.block_id << ',' << to_string(c.kind) << ',' << c.descent_count << ','
            << t.records.size() << '\n';
    }
    return 0;
}

struct ReportArgs {
    std::string ledger;
    double epsilon = 0.0;
};

int run_report(const ReportArgs& a) {
    const auto ledger = load_ledger(a.ledger);
    std::cout << report_json(ledger->forgetting_report(a.epsilon)).dump(2) << '\n';
    return 0;
}

struct CompareArgs {
    std::vector<std::string> a, b;
    std::string corpus;
    std::size_t k = 0;
    std::string method = "token-frequency";
    std::optional<std::string> checkpoint, out;
    std::uint64_t seed = 0;
};

int run_compare(const CompareArgs& args) {
    if (args.a.size() != args.b.size())
        throw ConfigError("--a and --b must be given the same number of times");
    const Corpus corpus = load(args.corpus);
    std::optional<TinyLM> model;
    ComparisonOptions opts;
    opts.k = args.k;
    opts.seed = args.seed;
    opts.method = embedding_method_from_string(args.method);
    if (opts.method == EmbeddingMethod::LearnerHidden) {
        if (!args.checkpoint) throw ConfigError("--method learner-hidden needs --checkpoint");
        model.emplace(TinyLM::load(*args.checkpoint));
        opts.hidden = &*model;
    }
    if (args.out) opts.out_dir = fs::path(*args.out);

    std::vector<IdSet> sets;
    std::vector<Pairing> pairs;
    for (std::size_t i = 0; i < args.a.size(); ++i) {
        sets.push_back(read_id_set(args.a[i]));
        sets.push_back(read_id_set(args.b[i]));
        // Disambiguate equal stems from different runs.
        if (sets[sets.size() - 2].label == sets.back().label) {
            sets[sets.size() - 2].label += "_a";
            sets.back().label += "_b";
        }
        pairs.push_back({sets.size() - 2, sets.size() - 1});
    }
    for (const auto& r : phase_comparison(sets, pairs, corpus, opts)) {
        std::printf("%s vs %s: %zux%zu centroids, mean %.6f, std %.6f\n", r.a_label.c_str(),
                    r.b_label.c_str(), r.matrix.values.rows, r.matrix.values.cols, r.stats.mean,
                    r.stats.std);
    }
    return 0;
}

struct ServeArgs {
    std::string schedule, corpus, ledger, listen = "stdio";
    std::optional<std::string> state, transcript, ids_dir;
};

int run_serve(const ServeArgs& a) {
    const Corpus corpus = load(a.corpus);
    SchedulerConfig sc = load_scheduler_config(a.schedule);
    if (a.ids_dir) sc.ids_dir = fs::path(*a.ids_dir);
    PplLedger ledger(a.ledger, corpus.size());
    Scheduler scheduler(sc, corpus.size(), ledger);
    if (a.state && fs::exists(*a.state)) {
        scheduler.restore_state(read_json(*a.state));
        std::fprintf(stderr, "resumed at step %llu\n", static_cast<unsigned long long>(scheduler.step()));
    }
    BridgeOptions opts;
    if (a.state) opts.state_path = fs::path(*a.state);
    if (a.transcript) opts.transcript = fs::path(*a.transcript);
    BridgeServer server(scheduler, ledger, corpus, opts);

    const Endpoint ep = parse_endpoint(a.listen);
    if (ep.kind == Endpoint::Kind::Stdio) {
        serve_stream(server, std::cin, std::cout);
    } else {
        serve_tcp(server, ep.host, ep.port, [](std::uint16_t port) {
            std::fprintf(stderr, "listening on port %u\n", port);
        });
    }
    ledger.flush();
    return 0;
}

struct ClientArgs {
    std::string connect, corpus, learner = "synthetic";
    std::optional<std::string> config;
    bool inline_tokens = false;
};

int run_client(const ClientArgs& a) {
    const Corpus corpus = load(a.corpus);
    const Endpoint ep = parse_endpoint(a.connect);
    if (ep.kind != Endpoint::Kind::Tcp) throw ConfigError("client needs --connect tcp:<host>:<port>");
    auto learner = make_learner(a.learner, a.config ? std::optional<fs::path>(*a.config) : std::nullopt, corpus);
    TcpChannel channel(ep.host, ep.port);
    BridgeClient client(channel);
    const auto s = drive_learner(client, *learner, corpus, a.inline_tokens);
    std::printf("%llu steps, %zu samples, %zu recorded\n", static_cast<unsigned long long>(s.steps),
                s.samples, s.records);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Learn / Focus / Revise training-data scheduler"};
    app.require_subcommand(1);

    IngestArgs ingest_args;
    auto* ingest_cmd = app.add_subcommand("ingest", "Tokenize files into a block store");
    ingest_cmd->add_option("inputs", ingest_args.inputs, "Source files")->required()->check(CLI::ExistingFile);
    ingest_cmd->add_option("-L,--context-length", ingest_args.context_length, "Tokens per block");
    ingest_cmd->add_option("--tokenizer", ingest_args.tokenizer)->check(CLI::IsMember({"byte", "ids"}));
    ingest_cmd->add_option("--vocab-size", ingest_args.vocab_size, "Vocabulary size for --tokenizer ids");
    ingest_cmd->add_option("--separator", ingest_args.separator, "Token inserted between documents");
    ingest_cmd->add_option("-o,--out", ingest_args.out, "Output directory")->required();

    TrainArgs train_args;
    auto* train_cmd = app.add_subcommand("train", "Train a learner under a schedule");
    train_cmd->add_option("--schedule", train_args.schedule)->required()->check(CLI::ExistingFile);
    train_cmd->add_option("--corpus", train_args.corpus, "Corpus manifest")->required()->check(CLI::ExistingFile);
    train_cmd->add_option("--learner", train_args.learner)->check(CLI::IsMember({"tiny", "synthetic"}));
    train_cmd->add_option("--config", train_args.config, "Learner config JSON")->check(CLI::ExistingFile);
    train_cmd->add_option("--step-budget", train_args.step_budget, "Override the schedule's step budget");
    train_cmd->add_option("-o,--out", train_args.out, "Run directory")->required();

    SimulateArgs sim_args;
    auto* sim_cmd = app.add_subcommand("simulate", "Run strategies on the synthetic learner");
    sim_cmd->add_option("--strategy", sim_args.strategy)
        ->check(CLI::IsMember({"lfr", "aggr-1", "aggr-2", "random", "all"}));
    sim_cmd->add_option("--learner", sim_args.learner)->check(CLI::IsMember({"synthetic"}));
    sim_cmd->add_option("--config", sim_args.config)->check(CLI::ExistingFile);
    sim_cmd->add_option("--blocks", sim_args.blocks);
    sim_cmd->add_option("--batch-size", sim_args.batch_size);
    sim_cmd->add_option("--total-epochs", sim_args.total_epochs);
    sim_cmd->add_option("--seed", sim_args.seed, "First seed");
    sim_cmd->add_option("--seeds", sim_args.seeds, "Number of consecutive seeds");
    sim_cmd->add_option("--epsilon", sim_args.epsilon, "Flat threshold for classification");
    sim_cmd->add_option("-o,--out", sim_args.out);

    auto* analyze_cmd = app.add_subcommand("analyze", "Inspect ledgers and id sets");
    analyze_cmd->require_subcommand(1);

    ClassifyArgs classify_args;
    auto* classify_cmd = analyze_cmd->add_subcommand("classify", "Classify every trajectory");
    classify_cmd->add_option("--ledger", classify_args.ledger)->required()->check(CLI::ExistingFile);
    classify_cmd->add_option("--epsilon", classify_args.epsilon);
    classify_cmd->add_option("-o,--out", classify_args.out, "CSV output (default stdout)");

    ReportArgs report_args;
    auto* report_cmd = analyze_cmd->add_subcommand("report", "Forgetting statistics");
    report_cmd->add_option("--ledger", report_args.ledger)->required()->check(CLI::ExistingFile);
    report_cmd->add_option("--epsilon", report_args.epsilon);

    CompareArgs compare_args;
    auto* compare_cmd = analyze_cmd->add_subcommand("compare", "Cluster two id sets and compare centroids");
    compare_cmd->add_option("--a", compare_args.a)->required()->check(CLI::ExistingFile);
    compare_cmd->add_option("--b", compare_args.b)->required()->check(CLI::ExistingFile);
    compare_cmd->add_option("--corpus", compare_args.corpus)->required()->check(CLI::ExistingFile);
    compare_cmd->add_option("--k", compare_args.k, "Clusters per set (0: n/10, at most 270)");
    compare_cmd->add_option("--method", compare_args.method)
        ->check(CLI::IsMember({"token-frequency", "learner-hidden"}));
    compare_cmd->add_option("--checkpoint", compare_args.checkpoint, "TinyLM checkpoint for learner-hidden")
        ->check(CLI::ExistingFile);
    compare_cmd->add_option("--seed", compare_args.seed);
    compare_cmd->add_option("-o,--out", compare_args.out, "Directory for heatmaps and stats");

    ServeArgs serve_args;
    auto* serve_cmd = app.add_subcommand("serve", "Expose the scheduler over the bridge protocol");
    serve_cmd->add_option("--schedule", serve_args.schedule)->required()->check(CLI::ExistingFile);
    serve_cmd->add_option("--corpus", serve_args.corpus)->required()->check(CLI::ExistingFile);
    serve_cmd->add_option("--ledger", serve_args.ledger)->required();
    serve_cmd->add_option("--listen", serve_args.listen, "stdio | tcp:<port> | tcp:<host>:<port>");
    serve_cmd->add_option("--state", serve_args.state, "Scheduler state file (resumes if present)");
    serve_cmd->add_option("--transcript", serve_args.transcript, "Append a request/response log");
    serve_cmd->add_option("--ids-dir", serve_args.ids_dir, "Where Focus transitions write id files");

    ClientArgs client_args;
    auto* client_cmd = app.add_subcommand("client", "Drive a learner from a bridge server");
    client_cmd->add_option("--connect", client_args.connect, "tcp:<host>:<port>")->required();
    client_cmd->add_option("--corpus", client_args.corpus)->required()->check(CLI::ExistingFile);
    client_cmd->add_option("--learner", client_args.learner)->check(CLI::IsMember({"tiny", "synthetic"}));
    client_cmd->add_option("--config", client_args.config)->check(CLI::ExistingFile);
    client_cmd->add_flag("--inline-tokens", client_args.inline_tokens);

    CLI11_PARSE(app, argc, argv);

    try {
        if (ingest_cmd->parsed()) return run_ingest(ingest_args);
        if (train_cmd->parsed()) return run_train(train_args);
        if (sim_cmd->parsed()) return run_simulate(sim_args);
        if (classify_cmd->parsed()) return run_classify(classify_args);
        if (report_cmd->parsed()) return run_report(report_args);
        if (compare_cmd->parsed()) return run_compare(compare_args);
        if (serve_cmd->parsed()) return run_serve(serve_args);
        if (client_cmd->parsed()) return run_client(client_args);
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 0;
}
