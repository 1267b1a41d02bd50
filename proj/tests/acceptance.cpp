// Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
// fails. Artifacts land under the directory given as argv[1] (default
// ./acceptance_out).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <future>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>

#include <json.hpp>

#include "lfr/bridge.hpp"
#include "lfr/clustering.hpp"
#include "lfr/corpus.hpp"
#include "lfr/learner.hpp"
#include "lfr/ledger.hpp"
#include "lfr/runner.hpp"
#include "lfr/scheduler.hpp"
#include "oracles.hpp"

using namespace lfr;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path g_out = "acceptance_out";

struct Outcome {
    bool pass = true;
    std::string detail;

    void require(bool ok, const std::string& what) {
        if (!ok && pass) {
            pass = false;
            detail = what;
        }
    }
};

int g_failures = 0;

void criterion(const std::string& name, double limit_seconds, const std::function<Outcome()>& body) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
        o = body();
    } catch (const std::exception& e) {
        o.pass = false;
        o.detail = std::string("exception: ") + e.what();
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (o.pass && secs > limit_seconds) {
        o.pass = false;
        o.detail = "took longer than the limit";
    }
    char timing[64];
    std::snprintf(timing, sizeof(timing), "%.2fs / %.0fs", secs, limit_seconds);
    std::printf("%s %s [%s]%s%s\n", o.pass ? "PASS" : "FAIL", name.c_str(), timing,
                o.detail.empty() ? "" : " ", o.detail.c_str());
    std::fflush(stdout);
    if (!o.pass) ++g_failures;
}

std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), f, a, b, c);
    return buf;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

SyntheticLearnerConfig frozen_synthetic_config() {
    std::ifstream in(fs::path(LFR_CONFIG_DIR) / "synthetic.json");
    if (!in) throw std::runtime_error("configs/synthetic.json not found");
    return synthetic_config_from_json(json::parse(in));
}

// ---------------------------------------------------------------------------

Outcome classification_oracle() {
    Outcome o;
    std::size_t cases = 0;
    for (std::size_t len = 0; len <= 8; ++len) {
        std::size_t total = 1;
        for (std::size_t i = 0; i < len; ++i) total *= 3;
        for (std::size_t code = 0; code < total; ++code) {
            std::vector<double> v(len);
            std::size_t c = code;
            for (auto& x : v) {
                x = 1.0 + static_cast<double>(c % 3);
                c /= 3;
            }
            ++cases;
            if (classify(v) != oracle::classify_literal(v)) {
                std::string seq;
                for (double x : v) seq += std::to_string(static_cast<int>(x));
                o.require(false, "disagreement on " + seq);
                return o;
            }
        }
    }
    o.detail = std::to_string(cases) + " trajectories";
    return o;
}

Outcome ppl_formula() {
    Outcome o;
    const double four = ppl_from_nlls(std::vector<double>{std::log(2.0), std::log(8.0)});
    o.require(std::abs(four - 4.0) / 4.0 <= 1e-12, fmt("ppl([ln2, ln8]) = %.17g", four));

    double worst = 0.0;
    std::mt19937_64 rng(2024);
    for (int state = 0; state < 10; ++state) {
        TinyLMConfig cfg;
        cfg.seed = rng();
        cfg.width = 8 + static_cast<std::uint32_t>(rng() % 24);
        cfg.window = 1 + static_cast<std::uint32_t>(rng() % 8);
        cfg.depth = 1 + static_cast<std::uint32_t>(rng() % 2);
        cfg.eval_positions = state % 2 ? 0 : 32;
        TinyLM model(cfg);
        std::vector<TokenId> tokens(6 * 96);
        for (auto& t : tokens) t = static_cast<TokenId>(rng() % 256);
        const Corpus corpus = Corpus::from_tokens(tokens, 96, 256);
        std::vector<TokenBlock> batch;
        for (BlockId b = 0; b < corpus.size(); ++b) batch.push_back(corpus.block(b));
        // Move away from the initial state by a random number of steps.
        const auto warm = rng() % 5;
        for (Step s = 0; s < warm; ++s) model.train_on(batch, s);

        std::vector<double> eval_ppl;
        for (const auto& b : batch) {
            const auto nll = model.eval_nll(b);
            double sum = 0.0;
            for (double x : nll) sum += x;
            const double naive = std::exp(sum / static_cast<double>(nll.size()));
            const double ppl = ppl_from_nlls(nll);
            worst = std::max(worst, std::abs(ppl - naive) / naive);
            eval_ppl.push_back(ppl);
        }
        const auto reported = model.train_on(batch, warm);
        for (std::size_t i = 0; i < batch.size(); ++i)
            worst = std::max(worst, std::abs(std::exp(reported[i]) - eval_ppl[i]) / eval_ppl[i]);
    }
    o.require(worst <= 1e-9, fmt("train/eval ppl mismatch %.3g", worst));
    if (o.pass) o.detail = fmt("ppl = %.17g, worst relative gap %.2g", four, worst);
    return o;
}

Outcome scheduler_correctness() {
    Outcome o;
    const std::size_t n = 1000;
    const Corpus corpus = placeholder_corpus(n);
    SyntheticLearnerConfig lc = frozen_synthetic_config();
    lc.seed = 17;
    SyntheticLearner learner(lc, n, corpus.context_length());
    PplLedger ledger(n);
    SchedulerConfig cfg;
    cfg.schedule = Schedule{{{PhaseKind::Learn, 1, 1.0}, {PhaseKind::Focus, 1, 0.5}, {PhaseKind::Revise, 1, 1.0}}};
    cfg.batch_size = 10;
    cfg.seed = 17;
    Scheduler sched(cfg, n, ledger);

    std::vector<BlockId> all(n);
    std::iota(all.begin(), all.end(), BlockId{0});
    std::map<std::pair<std::size_t, std::uint32_t>, std::vector<BlockId>> emitted;  // (phase, epoch)
    std::set<BlockId> top500;
    bool focus_checked = false;
    std::size_t focus_batches = 0;

    while (auto b = sched.next_batch()) {
        if (b->phase.kind == PhaseKind::Focus) {
            if (!focus_checked) {
                // Oracle: full sort of every block's latest Learn-phase ppl.
                std::map<BlockId, double> latest;
                for (const auto& r : ledger.records()) latest[r.block_id] = r.ppl;
                o.require(latest.size() == n, "Learn did not record every block");
                const auto top = oracle::focus_by_full_sort(latest, 500);
                top500.insert(top.begin(), top.end());
                focus_checked = true;
            }
            ++focus_batches;
            for (BlockId id : b->block_ids) o.require(top500.contains(id), "Focus batch outside the top 500");
        }
        if (b->phase.kind == PhaseKind::Revise)
            o.require(sched.active_pool() == all, "Revise pool is not the full corpus");
        auto& bucket = emitted[{b->phase.phase_index, b->phase.epoch}];
        bucket.insert(bucket.end(), b->block_ids.begin(), b->block_ids.end());

        std::vector<TokenBlock> blocks;
        for (BlockId id : b->block_ids) blocks.push_back(corpus.block(id));
        const auto nll = learner.train_on(blocks, b->step);
        std::vector<PplRecord> recs;
        for (std::size_t i = 0; i < blocks.size(); ++i) recs.push_back({b->block_ids[i], b->step, std::exp(nll[i]), 0});
        ledger.record_all(recs);
    }
    o.require(emitted.size() == 3, "expected three epochs");
    for (auto& [key, ids] : emitted) {
        std::sort(ids.begin(), ids.end());
        if (key.first == 1)
            o.require(ids == std::vector<BlockId>(top500.begin(), top500.end()),
                      "Focus epoch is not exactly the top-500 pool");
        else
            o.require(ids == all, "epoch " + std::to_string(key.first + 1) + " is not a permutation of the corpus");
    }
    o.require(focus_batches == 50, "unexpected Focus batch count");
    if (o.pass) o.detail = "3 epochs, 250 batches";
    return o;
}

Outcome strategy_instantiation() {
    Outcome o;
    const Schedule lfr = apply_strategy("lfr");
    const std::vector<PhaseSpec> expected_lfr = {{PhaseKind::Learn, 1, 1.0},
                                                 {PhaseKind::Focus, 1, 0.5},
                                                 {PhaseKind::Revise, 1, 1.0},
                                                 {PhaseKind::Focus, 5, 0.3}};
    o.require(lfr.phases == expected_lfr, "lfr schedule differs");
    const Schedule a1 = apply_strategy("aggr-1");
    o.require(std::none_of(a1.phases.begin(), a1.phases.end(),
                           [](const PhaseSpec& p) { return p.kind == PhaseKind::Revise; }),
              "aggr-1 has a Revise phase");
    o.require(a1.phases == std::vector<PhaseSpec>{{PhaseKind::Learn, 1, 1.0}, {PhaseKind::Focus, 7, 0.5}},
              "aggr-1 schedule differs");
    const Schedule a2 = apply_strategy("aggr-2");
    std::vector<PhaseSpec> expected_a2 = expected_lfr;
    expected_a2[1].keep_fraction = 0.3;
    o.require(a2.phases == expected_a2, "aggr-2 schedule differs");
    o.require(apply_strategy("random").phases == std::vector<PhaseSpec>{{PhaseKind::Learn, 8, 1.0}},
              "random schedule differs");
    return o;
}

Outcome kmeans_criterion() {
    Outcome o;
    std::mt19937_64 rng(7);
    std::normal_distribution<double> g(0.0, 1.0);
    auto points = [&](std::size_t n, std::size_t d) {
        oracle::Points pts(n, std::vector<double>(d));
        for (auto& p : pts)
            for (auto& x : p) x = g(rng);
        return pts;
    };
    auto to_matrix = [](const oracle::Points& pts) {
        Matrix m(pts.size(), pts.front().size());
        for (std::size_t i = 0; i < pts.size(); ++i)
            for (std::size_t j = 0; j < pts[i].size(); ++j) m(i, j) = pts[i][j];
        return m;
    };
    auto check_history = [&](const ClusterModel& m) {
        for (std::size_t i = 1; i < m.inertia_history.size(); ++i)
            o.require(m.inertia_history[i] <= m.inertia_history[i - 1], "inertia increased");
    };

    // Fixed point on 100 random instances.
    for (int inst = 0; inst < 100; ++inst) {
        const std::size_t n = 2 + rng() % 63;
        const std::size_t d = 1 + rng() % 8;
        const std::size_t k = 1 + rng() % std::min<std::size_t>(n, 10);
        const auto pts = points(n, d);
        const auto m = kmeans(to_matrix(pts), {k, rng()});
        o.require(m.converged, "did not converge");
        check_history(m);
        // Lloyd step from the result changes nothing: each point's nearest
        // centroid is its own, and each centroid is its members' mean.
        for (std::size_t i = 0; i < n; ++i) {
            const double own = squared_distance(m.centroids.row(m.assignments[i]), pts[i]);
            for (std::size_t c = 0; c < k; ++c)
                o.require(own <= squared_distance(m.centroids.row(c), pts[i]), "point not at a nearest centroid");
        }
        for (std::size_t c = 0; c < k; ++c) {
            std::vector<double> mean(d, 0.0);
            std::size_t count = 0;
            for (std::size_t i = 0; i < n; ++i)
                if (m.assignments[i] == c) {
                    ++count;
                    for (std::size_t j = 0; j < d; ++j) mean[j] += pts[i][j];
                }
            o.require(count > 0, "empty cluster");
            for (std::size_t j = 0; j < d && count > 0; ++j)
                o.require(std::abs(m.centroids(c, j) - mean[j] / count) <= 1e-12 * (1 + std::abs(mean[j])),
                          "centroid is not the mean of its members");
        }
    }

    // Tiny instances against the brute-force optimum.
    int wins = 0;
    for (int seed = 0; seed < 100; ++seed) {
        const std::size_t n = 3 + rng() % 6;  // 3..8
        const std::size_t d = 1 + rng() % 8;
        const auto pts = points(n, d);
        const auto m = kmeans(to_matrix(pts), {2, static_cast<std::uint64_t>(seed)});
        check_history(m);
        std::vector<int> labels(m.assignments.begin(), m.assignments.end());
        const double ours = oracle::partition_inertia(pts, labels, 2);
        const double best = oracle::best_two_partition(pts);
        if (ours <= best * (1.0 + 1e-12)) ++wins;
    }
    o.require(wins >= 95, std::to_string(wins) + "/100 optimal");
    if (o.pass) o.detail = std::to_string(wins) + "/100 tiny instances optimal";
    return o;
}

Outcome cosine_criterion() {
    Outcome o;
    std::mt19937_64 rng(11);
    std::normal_distribution<double> g(0.0, 1.0);
    double worst = 0.0, worst_var = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t d = 1 + rng() % 32;
        oracle::Points pa(1 + rng() % 20, std::vector<double>(d)), pb(1 + rng() % 20, std::vector<double>(d));
        for (auto* p : {&pa, &pb})
            for (auto& row : *p)
                for (auto& x : row) x = g(rng);
        Matrix a(pa.size(), d), b(pb.size(), d);
        for (std::size_t i = 0; i < pa.size(); ++i)
            for (std::size_t j = 0; j < d; ++j) a(i, j) = pa[i][j];
        for (std::size_t i = 0; i < pb.size(); ++i)
            for (std::size_t j = 0; j < d; ++j) b(i, j) = pb[i][j];
        const auto s = cosine_similarity(a, b).values;
        const auto ref = oracle::naive_cosine(pa, pb);
        for (std::size_t i = 0; i < pa.size(); ++i)
            for (std::size_t j = 0; j < pb.size(); ++j) worst = std::max(worst, std::abs(s(i, j) - ref[i][j]));
        const auto st = similarity_stats(s);
        worst_var = std::max(worst_var, std::abs(st.variance - st.std * st.std));
    }
    o.require(worst <= 1e-12, fmt("max deviation from naive %.3g", worst));
    o.require(worst_var <= 1e-12, fmt("variance vs std^2 %.3g", worst_var));

    for (std::size_t d : {1u, 3u, 16u}) {
        Matrix eye(d, d);
        for (std::size_t i = 0; i < d; ++i) eye(i, i) = 1.0;
        o.require(cosine_similarity(eye, eye).values == eye, "orthonormal case is not the identity");
    }
    if (o.pass) o.detail = fmt("max deviation %.2g", worst);
    return o;
}

Outcome gradient_check() {
    Outcome o;
    TinyLMConfig cfg;
    cfg.vocab_size = 16;
    cfg.window = 4;
    cfg.width = 8;
    cfg.seed = 99;
    TinyLM model(cfg);
    std::mt19937_64 rng(5);
    std::vector<TokenId> tokens(2 * 20);
    for (auto& t : tokens) t = static_cast<TokenId>(rng() % 16);
    const Corpus corpus = Corpus::from_tokens(tokens, 20, 16);
    const std::vector<TokenBlock> batch = {corpus.block(0), corpus.block(1)};
    std::vector<double> grad;
    model.loss_and_gradient(batch, grad);
    auto params = model.parameters();
    const double h = 1e-5;
    double worst = 0.0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double saved = params[i];
        params[i] = saved + h;
        const double up = model.loss(batch);
        params[i] = saved - h;
        const double down = model.loss(batch);
        params[i] = saved;
        const double numeric = (up - down) / (2 * h);
        const double denom = std::max({std::abs(numeric), std::abs(grad[i]), 1e-6});
        worst = std::max(worst, std::abs(numeric - grad[i]) / denom);
    }
    o.require(worst <= 1e-4, fmt("worst relative error %.3g", worst));
    if (o.pass) o.detail = std::to_string(params.size()) + fmt(" parameters, worst relative error %.2g", worst);
    return o;
}

Outcome forgetting_profile() {
    Outcome o;
    SimulationOptions opts;
    opts.blocks = 1000;
    opts.seed = 0;
    opts.out_dir = g_out / "forgetting_profile";
    const auto r = simulate_synthetic("random", apply_strategy("random", {8}), frozen_synthetic_config(), opts);
    const double f = r.forgetting.fraction_forgotten_at_least_once;
    const double m = r.forgetting.fraction_forgotten_multiple_given_forgotten;
    o.require(f >= 0.25, fmt("fraction forgotten %.4f < 0.25", f));
    o.require(m >= 0.5, fmt("multiple given forgotten %.4f < 0.5", m));
    o.detail = fmt("forgotten %.4f, multiple|forgotten %.4f", f, m);
    return o;
}

Outcome directional_benefit() {
    Outcome o;
    const auto cfg = frozen_synthetic_config();
    const std::vector<std::string> names = {"lfr", "random", "aggr-1", "aggr-2"};
    std::map<std::string, std::vector<SimulationResult>> results;
    for (const auto& name : names)
        for (std::uint64_t seed = 0; seed < 10; ++seed) {
            SimulationOptions opts;
            opts.blocks = 1000;
            opts.seed = seed;
            results[name].push_back(simulate_synthetic(name, apply_strategy(name, {8}), cfg, opts));
        }

    int wins = 0;
    double worst_ratio = 0.0;
    for (std::size_t s = 0; s < 10; ++s) {
        const auto& l = results["lfr"][s];
        const auto& r = results["random"][s];
        if (l.hardest_decile_mean_ppl < r.hardest_decile_mean_ppl) ++wins;
        worst_ratio = std::max(worst_ratio, l.final_mean_ppl / r.final_mean_ppl);
    }

    fs::create_directories(g_out);
    std::ofstream table(g_out / "strategy_comparison.txt");
    table << "strategy  mean_final_ppl  mean_hardest_decile_ppl  mean_steps\n";
    for (const auto& name : names) {
        double fin = 0, hard = 0, steps = 0;
        for (const auto& r : results[name]) {
            fin += r.final_mean_ppl;
            hard += r.hardest_decile_mean_ppl;
            steps += static_cast<double>(r.steps);
        }
        char line[160];
        std::snprintf(line, sizeof(line), "%-8s  %14.6f  %23.6f  %10.1f\n", name.c_str(), fin / 10, hard / 10, steps / 10);
        table << line;
        std::printf("    %s", line);
    }

    o.require(wins >= 9, std::to_string(wins) + "/10 hardest-decile wins");
    o.require(worst_ratio <= 1.05, fmt("full-corpus ppl ratio %.4f > 1.05", worst_ratio));
    o.detail = std::to_string(wins) + fmt("/10 hardest-decile wins, worst full-corpus ratio %.4f", worst_ratio);
    return o;
}

// ~2 MB of text whose blocks range from trivially predictable to noise.
std::vector<fs::path> generate_text_corpus(const fs::path& dir, std::size_t target_bytes) {
    fs::create_directories(dir);
    std::mt19937_64 rng(314159);
    const std::vector<std::string> words = {"the", "block", "model", "learns", "forgets", "and", "again",
                                            "of", "data", "focus", "revise", "token", "a", "to", "is",
                                            "in", "loss", "step", "epoch", "pool"};
    std::vector<fs::path> files;
    std::size_t written = 0;
    for (int doc = 0; written < target_bytes; ++doc) {
        std::string text;
        const std::size_t len = 2000 + rng() % 30000;
        switch (rng() % 3) {
            case 0: {  // repeated phrase
                const std::string phrase = words[rng() % words.size()] + " " + words[rng() % words.size()] + ". ";
                while (text.size() < len) text += phrase;
                break;
            }
            case 1: {  // bigram-ish word salad
                std::size_t w = rng() % words.size();
                while (text.size() < len) {
                    text += words[w];
                    text += ' ';
                    w = (w * 7 + 1 + rng() % 3) % words.size();
                }
                break;
            }
            default:  // printable noise
                while (text.size() < len) text += static_cast<char>(32 + rng() % 95);
        }
        text.resize(len);
        const auto path = dir / ("doc" + std::to_string(doc) + ".txt");
        std::ofstream(path, std::ios::binary) << text;
        files.push_back(path);
        written += len;
    }
    return files;
}

Outcome tinylm_end_to_end() {
    Outcome o;
    const fs::path root = g_out / "tinylm_e2e";
    fs::remove_all(root);
    const auto files = generate_text_corpus(root / "text", 2'000'000);
    const Corpus corpus = ingest(files, TokenizerSpec::byte_level(), 256, root / "corpus");

    TinyLMConfig lm;
    lm.window = 4;
    lm.width = 16;
    lm.eval_positions = 64;
    lm.learning_rate = 0.1;
    lm.seed = 1;

    auto run = [&](const std::string& label, const Schedule& schedule, std::optional<Step> budget) {
        const fs::path dir = root / label;
        SchedulerConfig sc;
        sc.schedule = schedule;
        sc.batch_size = 16;
        sc.seed = 1;
        sc.step_budget = budget;
        sc.ids_dir = dir;
        write_run_manifest(dir, corpus, sc, label);
        TinyLM model(lm);
        PplLedger ledger(dir / "ledger.bin", corpus.size());
        Scheduler sched(sc, corpus.size(), ledger);
        const auto summary = run_training(sched, model, corpus, ledger);
        ledger.export_csv(dir / "ledger.csv");
        model.save(dir / "model.ckpt");
        const auto ppls = evaluate_ppls(model, corpus);
        const double mean = std::accumulate(ppls.begin(), ppls.end(), 0.0) / static_cast<double>(ppls.size());
        return std::make_tuple(summary, mean, sched.focus_selections().size());
    };

    const auto [lfr_summary, lfr_ppl, transitions] = run("lfr", apply_strategy("lfr", {8}), std::nullopt);
    const auto [rnd_summary, rnd_ppl, rnd_transitions] =
        run("random", apply_strategy("random", {8}), lfr_summary.steps);
    (void)rnd_transitions;
    o.require(rnd_summary.steps == lfr_summary.steps, "step budgets differ");
    o.require(transitions == 2, "expected two Focus transitions");

    for (const auto* label : {"lfr", "random"}) {
        o.require(fs::exists(root / label / "ledger.bin") && fs::file_size(root / label / "ledger.bin") > 8,
                  std::string(label) + " ledger missing");
        o.require(fs::exists(root / label / "ledger.csv"), std::string(label) + " ledger csv missing");
    }

    std::vector<IdSet> sets;
    std::vector<Pairing> pairs;
    for (int k : {2, 4}) {
        for (const auto* kind : {"dropped", "retained"}) {
            const auto p = root / "lfr" / (std::string(kind) + "_phase" + std::to_string(k) + ".ids");
            o.require(fs::exists(p), p.filename().string() + " missing");
            if (fs::exists(p)) sets.push_back(read_id_set(p));
        }
    }
    if (!o.pass) return o;
    pairs = {{0, 1}, {2, 3}, {1, 3}};
    ComparisonOptions opts;
    opts.k = 16;
    opts.seed = 1;
    opts.out_dir = root / "comparison";
    const auto results = phase_comparison(sets, pairs, corpus, opts);
    TinyLM trained = TinyLM::load(root / "lfr" / "model.ckpt");
    ComparisonOptions hidden_opts = opts;
    hidden_opts.method = EmbeddingMethod::LearnerHidden;
    hidden_opts.hidden = &trained;
    hidden_opts.out_dir = root / "comparison_hidden";
    const auto hidden_results = phase_comparison(sets, pairs, corpus, hidden_opts);

    for (const auto& dir : {opts.out_dir, hidden_opts.out_dir}) {
        o.require(fs::exists(*dir / "similarity_stats.json"), "similarity stats missing");
        for (const auto& p : pairs) {
            const std::string stem = sets[p.a].label + "__vs__" + sets[p.b].label;
            o.require(fs::exists(*dir / (stem + ".csv")) && fs::exists(*dir / (stem + ".ppm")),
                      stem + " heatmap missing");
        }
    }
    o.detail = "blocks " + std::to_string(corpus.size()) + ", steps " + std::to_string(lfr_summary.steps) +
               fmt(", final mean ppl lfr %.3f random %.3f", lfr_ppl, rnd_ppl) +
               fmt(", dropped-vs-retained cosine mean %.3f", results[0].stats.mean);
    return o;
}

Outcome bridge_equivalence() {
    Outcome o;
    const fs::path root = g_out / "bridge";
    fs::remove_all(root);
    const Corpus corpus = placeholder_corpus(100);
    SyntheticLearnerConfig lc = frozen_synthetic_config();
    lc.seed = 8;
    auto config = [&](const fs::path& ids) {
        SchedulerConfig sc;
        sc.schedule = Schedule{{{PhaseKind::Learn, 1, 1.0}, {PhaseKind::Focus, 1, 0.5}, {PhaseKind::Revise, 1, 1.0}}};
        sc.batch_size = 8;
        sc.seed = 8;
        sc.ids_dir = ids;
        return sc;
    };
    {
        PplLedger ledger(root / "inproc.bin", corpus.size());
        Scheduler sched(config(root / "inproc_ids"), corpus.size(), ledger);
        SyntheticLearner learner(lc, corpus.size(), corpus.context_length());
        run_training(sched, learner, corpus, ledger);
    }
    {
        PplLedger ledger(root / "bridge.bin", corpus.size());
        Scheduler sched(config(root / "bridge_ids"), corpus.size(), ledger);
        BridgeServer server(sched, ledger, corpus, {root / "state.json", root / "transcript.log"});
        std::promise<std::uint16_t> port;
        std::thread serving([&] { serve_tcp(server, "127.0.0.1", 0, [&](std::uint16_t p) { port.set_value(p); }); });
        {
            TcpChannel channel("127.0.0.1", port.get_future().get());
            BridgeClient client(channel);
            SyntheticLearner learner(lc, corpus.size(), corpus.context_length());
            drive_learner(client, learner, corpus);
        }
        serving.join();
    }
    o.require(slurp(root / "inproc.bin") == slurp(root / "bridge.bin"), "ledger files differ");
    for (const auto* name : {"dropped_phase2.ids", "retained_phase2.ids"}) {
        o.require(fs::exists(root / "inproc_ids" / name), std::string(name) + " missing");
        o.require(slurp(root / "inproc_ids" / name) == slurp(root / "bridge_ids" / name),
                  std::string(name) + " differs");
    }
    if (o.pass)
        o.detail = std::to_string(PplLedger::read_file(root / "bridge.bin").size()) +
                   " records identical over TCP";
    return o;
}

}  // namespace

int main(int argc, char** argv) {
    if (argc > 1) g_out = argv[1];
    fs::create_directories(g_out);

    criterion("classification-oracle", 10, classification_oracle);
    criterion("ppl-formula", 60, ppl_formula);
    criterion("scheduler-correctness", 5, scheduler_correctness);
    criterion("strategy-instantiation", 5, strategy_instantiation);
    criterion("kmeans", 60, kmeans_criterion);
    criterion("cosine-similarity", 10, cosine_criterion);
    criterion("gradient-check", 60, gradient_check);
    criterion("forgetting-profile", 30, forgetting_profile);
    criterion("directional-lfr-benefit", 300, directional_benefit);
    criterion("tinylm-end-to-end", 1800, tinylm_end_to_end);
    criterion("bridge-equivalence", 60, bridge_equivalence);

    std::printf("%d criteria failed\n", g_failures);
    return g_failures == 0 ? 0 : 1;
}
