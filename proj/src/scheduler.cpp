#include "lfr/scheduler.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "lfr/error.hpp"

namespace lfr {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

// Unbiased draw in [0, bound) by rejection. Spelled out instead of
// std::uniform_int_distribution so batch streams are identical across
// standard library implementations.
std::uint64_t bounded(std::mt19937_64& rng, std::uint64_t bound) {
    const std::uint64_t threshold = (0 - bound) % bound;
    for (;;) {
        const std::uint64_t r = rng();
        if (r >= threshold) return r % bound;
    }
}

void check_epochs(std::uint32_t epochs, const char* what) {
    if (epochs == 0) throw ConfigError(std::string(what) + " must be >= 1");
}

}  // namespace

std::string to_string(PhaseKind kind) {
    switch (kind) {
        case PhaseKind::Learn: return "learn";
        case PhaseKind::Focus: return "focus";
        case PhaseKind::Revise: return "revise";
    }
    return "?";
}

PhaseKind phase_kind_from_string(std::string_view name) {
    std::string lower(name);
    std::transform(lower.begin(), lower.end(), lower.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    if (lower == "learn") return PhaseKind::Learn;
    if (lower == "focus") return PhaseKind::Focus;
    if (lower == "revise" || lower == "review") return PhaseKind::Revise;
    throw ConfigError("unknown phase kind '" + std::string(name) + "'");
}

std::uint32_t Schedule::total_epochs() const {
    std::uint32_t total = 0;
    for (const auto& p : phases) total += p.epochs;
    return total;
}

void Schedule::validate() const {
    if (phases.empty()) throw ConfigError("schedule has no phases");
    if (phases.front().kind != PhaseKind::Learn)
        throw ConfigError("schedule must start with a Learn phase");
    for (std::size_t i = 0; i < phases.size(); ++i) {
        const auto& p = phases[i];
        if (p.epochs == 0)
            throw ConfigError("phase " + std::to_string(i + 1) + " has zero epochs");
        if (p.kind == PhaseKind::Focus) {
            if (!(p.keep_fraction > 0.0 && p.keep_fraction <= 1.0))
                throw ConfigError("phase " + std::to_string(i + 1) +
                                  ": keep_fraction must be in (0, 1]");
        } else if (p.keep_fraction != 1.0) {
            throw ConfigError("phase " + std::to_string(i + 1) +
                              ": only Focus phases may have keep_fraction < 1");
        }
    }
}

Schedule schedule_from_hparams(const LfrHparams& hp) {
    check_epochs(hp.p1, "p1");
    if (!(hp.s1 > 0.0 && hp.s1 < 100.0)) throw ConfigError("s1 must be in (0, 100)");
    Schedule s;
    s.phases.push_back({PhaseKind::Learn, hp.p1, 1.0});
    const double keep = (100.0 - hp.s1) / 100.0;
    for (std::uint32_t r = 0; r < hp.reps; ++r) {
        if (hp.p2 > 0) s.phases.push_back({PhaseKind::Focus, hp.p2, keep});
        if (hp.p3 > 0) s.phases.push_back({PhaseKind::Revise, hp.p3, 1.0});
    }
    s.validate();
    return s;
}

Schedule apply_strategy(std::string_view name, const StrategyParams& base) {
    const std::uint32_t total = base.total_epochs;
    auto need = [&](std::uint32_t minimum) {
        if (total < minimum)
            throw ConfigError("strategy '" + std::string(name) + "' needs at least " +
                              std::to_string(minimum) + " epochs");
    };
    Schedule s;
    if (name == "lfr" || name == "aggr-2") {
        need(4);
        const double phase2_keep = name == "lfr" ? 0.5 : 0.3;
        s.phases = {{PhaseKind::Learn, 1, 1.0},
                    {PhaseKind::Focus, 1, phase2_keep},
                    {PhaseKind::Revise, 1, 1.0},
                    {PhaseKind::Focus, total - 3, 0.3}};
    } else if (name == "aggr-1") {
        need(2);
        s.phases = {{PhaseKind::Learn, 1, 1.0}, {PhaseKind::Focus, total - 1, 0.5}};
    } else if (name == "random") {
        need(1);
        s.phases = {{PhaseKind::Learn, total, 1.0}};
    } else {
        throw ConfigError("unknown strategy '" + std::string(name) + "'");
    }
    return s;
}

std::size_t focus_pool_size(double keep_fraction, std::size_t corpus_blocks) {
    // The small offset keeps 0.7 * 10 (= 7.000000000000001) from rounding up.
    const double exact = keep_fraction * static_cast<double>(corpus_blocks);
    auto size = static_cast<std::size_t>(std::ceil(exact - 1e-9));
    return std::clamp<std::size_t>(size, 1, corpus_blocks);
}

std::vector<BlockId> select_focus_set(const std::map<BlockId, double>& ppls,
                                      double keep_fraction, std::size_t corpus_blocks) {
    if (!(keep_fraction > 0.0 && keep_fraction <= 1.0))
        throw ConfigError("keep_fraction must be in (0, 1]");
    std::vector<BlockId> missing;
    for (BlockId id = 0; id < corpus_blocks; ++id)
        if (!ppls.contains(id)) missing.push_back(id);
    if (!missing.empty()) {
        std::string msg = "no perplexity recorded for " + std::to_string(missing.size()) +
                          " block(s):";
        for (std::size_t i = 0; i < missing.size() && i < 20; ++i)
            msg += " " + std::to_string(missing[i]);
        if (missing.size() > 20) msg += " ...";
        throw SchedulingError(msg);
    }

    std::vector<std::pair<double, BlockId>> ranked;
    ranked.reserve(corpus_blocks);
    for (BlockId id = 0; id < corpus_blocks; ++id) ranked.emplace_back(ppls.at(id), id);
    const std::size_t keep = focus_pool_size(keep_fraction, corpus_blocks);
    auto higher = [](const auto& a, const auto& b) {
        return a.first != b.first ? a.first > b.first : a.second < b.second;
    };
    std::nth_element(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(keep - 1),
                     ranked.end(), higher);
    std::vector<BlockId> out;
    out.reserve(keep);
    const auto cut = ranked[keep - 1];
    for (const auto& r : ranked)
        if (!higher(cut, r)) out.push_back(r.second);
    std::sort(out.begin(), out.end());
    return out;
}

SchedulerConfig scheduler_config_from_json(const json& j) {
    SchedulerConfig c;
    try {
        if (j.contains("phases")) {
            for (const auto& p : j.at("phases")) {
                PhaseSpec spec;
                spec.kind = phase_kind_from_string(p.at("kind").get<std::string>());
                spec.epochs = p.at("epochs").get<std::uint32_t>();
                spec.keep_fraction = p.value("keep_fraction", 1.0);
                c.schedule.phases.push_back(spec);
            }
        } else if (j.contains("hparams")) {
            const auto& h = j.at("hparams");
            LfrHparams hp;
            hp.p1 = h.at("p1").get<std::uint32_t>();
            hp.s1 = h.at("s1").get<double>();
            hp.p2 = h.at("p2").get<std::uint32_t>();
            hp.p3 = h.at("p3").get<std::uint32_t>();
            hp.reps = h.at("reps").get<std::uint32_t>();
            c.schedule = schedule_from_hparams(hp);
        } else if (j.contains("strategy")) {
            c.schedule = apply_strategy(j.at("strategy").get<std::string>(),
                                        {j.value("total_epochs", 8u)});
        } else {
            throw ConfigError("schedule config needs \"phases\", \"hparams\" or \"strategy\"");
        }
        c.seed = j.value("seed", std::uint64_t{0});
        c.batch_size = j.value("batch_size", std::size_t{1});
        if (j.contains("step_budget") && !j.at("step_budget").is_null())
            c.step_budget = j.at("step_budget").get<Step>();
        const auto window = j.value("rank_window", std::string("recording-phase"));
        if (window == "recording-phase")
            c.rank_window = RankWindow::RecordingPhase;
        else if (window == "all-history")
            c.rank_window = RankWindow::AllHistory;
        else
            throw ConfigError("unknown rank_window '" + window + "'");
        c.record_focus = j.value("record_focus", true);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("schedule config: ") + e.what());
    }
    if (c.batch_size == 0) throw ConfigError("batch_size must be >= 1");
    c.schedule.validate();
    return c;
}

SchedulerConfig load_scheduler_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read " + path.string());
    try {
        return scheduler_config_from_json(json::parse(in));
    } catch (const json::parse_error& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

json to_json(const Schedule& schedule) {
    json phases = json::array();
    for (const auto& p : schedule.phases)
        phases.push_back(
            {{"kind", to_string(p.kind)}, {"epochs", p.epochs}, {"keep_fraction", p.keep_fraction}});
    return phases;
}

Scheduler::Scheduler(SchedulerConfig config, std::size_t corpus_blocks, const PplLedger& ledger)
    : config_(std::move(config)), corpus_blocks_(corpus_blocks), ledger_(ledger),
      rng_(config_.seed) {
    config_.schedule.validate();
    if (corpus_blocks_ == 0) throw ConfigError("scheduler over an empty corpus");
    if (config_.batch_size == 0) throw ConfigError("batch_size must be >= 1");
}

PhaseInfo Scheduler::phase_info() const {
    const std::size_t idx = std::min(phase_index_, config_.schedule.phases.size() - 1);
    const auto& spec = config_.schedule.phases[idx];
    return {idx, spec.kind, epoch_, spec.epochs, spec.keep_fraction, pool_.size()};
}

void Scheduler::new_permutation() {
    permutation_ = pool_;
    for (std::size_t i = permutation_.size(); i > 1; --i)
        std::swap(permutation_[i - 1], permutation_[bounded(rng_, i)]);
    cursor_ = 0;
}

void Scheduler::begin_phase(std::size_t index) {
    const auto& spec = config_.schedule.phases[index];
    phase_index_ = index;
    epoch_ = 0;

    if (spec.kind == PhaseKind::Focus) {
        std::optional<StepWindow> window;
        if (config_.rank_window == RankWindow::RecordingPhase) {
            auto recording = std::find_if(windows_.rbegin(), windows_.rend(), [](const auto& w) {
                return w.kind != PhaseKind::Focus && w.last.has_value();
            });
            if (recording == windows_.rend())
                throw SchedulingError("Focus phase " + std::to_string(index + 1) +
                                      " has no preceding recording phase");
            window = StepWindow{recording->first, *recording->last};
        }
        auto latest = ledger_.latest_ppls(window, corpus_blocks_);
        if (latest.ppl.empty())
            throw SchedulingError("Focus phase " + std::to_string(index + 1) +
                                  ": no perplexities recorded");
        FocusSelection sel;
        sel.phase_index = index;
        sel.retained = select_focus_set(latest.ppl, spec.keep_fraction, corpus_blocks_);
        for (const auto& [id, ppl] : latest.ppl)
            if (!std::binary_search(sel.retained.begin(), sel.retained.end(), id))
                sel.dropped.push_back(id);
        pool_ = sel.retained;
        write_ids(sel);
        selections_.push_back(std::move(sel));
    } else {
        pool_.resize(corpus_blocks_);
        std::iota(pool_.begin(), pool_.end(), BlockId{0});
    }
    windows_.push_back({index, spec.kind, step_, std::nullopt});
    new_permutation();
}

std::optional<Batch> Scheduler::next_batch() {
    if (exhausted_) return std::nullopt;
    if (config_.step_budget && step_ >= *config_.step_budget) {
        exhausted_ = true;
        return std::nullopt;
    }
    if (!started_) {
        started_ = true;
        begin_phase(0);
    }
    while (cursor_ == permutation_.size()) {
        const auto& spec = config_.schedule.phases[phase_index_];
        if (epoch_ + 1 < spec.epochs) {
            ++epoch_;
            new_permutation();
            continue;
        }
        if (phase_index_ + 1 == config_.schedule.phases.size()) {
            exhausted_ = true;
            return std::nullopt;
        }
        begin_phase(phase_index_ + 1);
    }

    Batch b;
    b.step = step_;
    b.phase = phase_info();
    const std::size_t end = std::min(cursor_ + config_.batch_size, permutation_.size());
    b.block_ids.assign(permutation_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                       permutation_.begin() + static_cast<std::ptrdiff_t>(end));
    cursor_ = end;
    windows_.back().last = step_;
    ++step_;
    return b;
}

std::optional<PhaseKind> Scheduler::phase_of_step(Step step) const {
    for (auto w = windows_.rbegin(); w != windows_.rend(); ++w)
        if (w->last && step >= w->first && step <= *w->last) return w->kind;
    return std::nullopt;
}

bool Scheduler::records_step(Step step) const {
    auto kind = phase_of_step(step);
    if (!kind) return false;
    return *kind != PhaseKind::Focus || config_.record_focus;
}

void Scheduler::write_ids(const FocusSelection& sel) const {
    if (!config_.ids_dir) return;
    fs::create_directories(*config_.ids_dir);
    auto dump = [&](const std::string& prefix, const std::vector<BlockId>& ids) {
        const auto path =
            *config_.ids_dir / (prefix + "_phase" + std::to_string(sel.phase_index + 1) + ".ids");
        std::ofstream out(path, std::ios::trunc);
        if (!out) throw Error("cannot write " + path.string());
        for (BlockId id : ids) out << id << '\n';
    };
    dump("dropped", sel.dropped);
    dump("retained", sel.retained);
}

std::string Scheduler::config_fingerprint() const {
    json j = {{"schedule", to_json(config_.schedule)},
              {"seed", config_.seed},
              {"batch_size", config_.batch_size},
              {"corpus_blocks", corpus_blocks_}};
    return j.dump();
}

json Scheduler::save_state() const {
    std::ostringstream rng;
    rng << rng_;
    json windows = json::array();
    for (const auto& w : windows_)
        windows.push_back({{"phase_index", w.phase_index},
                           {"kind", to_string(w.kind)},
                           {"first", w.first},
                           {"last", w.last ? json(*w.last) : json(nullptr)}});
    json selections = json::array();
    for (const auto& s : selections_)
        selections.push_back(
            {{"phase_index", s.phase_index}, {"retained", s.retained}, {"dropped", s.dropped}});
    return {{"version", 1},
            {"fingerprint", config_fingerprint()},
            {"started", started_},
            {"exhausted", exhausted_},
            {"phase_index", phase_index_},
            {"epoch", epoch_},
            {"cursor", cursor_},
            {"step", step_},
            {"pool", pool_},
            {"permutation", permutation_},
            {"rng", rng.str()},
            {"windows", windows},
            {"selections", selections}};
}

void Scheduler::restore_state(const json& state) {
    try {
        if (state.at("version").get<int>() != 1) throw FormatError("scheduler state version");
        if (state.at("fingerprint").get<std::string>() != config_fingerprint())
            throw ConfigError("scheduler state was saved under a different configuration");
        started_ = state.at("started").get<bool>();
        exhausted_ = state.at("exhausted").get<bool>();
        phase_index_ = state.at("phase_index").get<std::size_t>();
        epoch_ = state.at("epoch").get<std::uint32_t>();
        cursor_ = state.at("cursor").get<std::size_t>();
        step_ = state.at("step").get<Step>();
        pool_ = state.at("pool").get<std::vector<BlockId>>();
        permutation_ = state.at("permutation").get<std::vector<BlockId>>();
        std::istringstream rng(state.at("rng").get<std::string>());
        rng >> rng_;
        windows_.clear();
        for (const auto& w : state.at("windows")) {
            PhaseWindow pw{w.at("phase_index").get<std::size_t>(),
                           phase_kind_from_string(w.at("kind").get<std::string>()),
                           w.at("first").get<Step>(), std::nullopt};
            if (!w.at("last").is_null()) pw.last = w.at("last").get<Step>();
            windows_.push_back(pw);
        }
        selections_.clear();
        for (const auto& s : state.at("selections"))
            selections_.push_back({s.at("phase_index").get<std::size_t>(),
                                   s.at("retained").get<std::vector<BlockId>>(),
                                   s.at("dropped").get<std::vector<BlockId>>()});
    } catch (const json::exception& e) {
        throw FormatError(std::string("scheduler state: ") + e.what());
    }
    if (cursor_ > permutation_.size()) throw FormatError("scheduler state: cursor out of range");
}

}  // namespace lfr
