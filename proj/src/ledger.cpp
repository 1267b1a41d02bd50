#include "lfr/ledger.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iterator>
#include <tuple>

#include "lfr/detail/binary_io.hpp"
#include "lfr/error.hpp"

namespace lfr {

namespace fs = std::filesystem;

namespace {

constexpr char kLedgerMagic[4] = {'L', 'F', 'R', 'L'};
constexpr std::uint32_t kLedgerVersion = 1;
constexpr std::size_t kLedgerHeaderSize = 8;
constexpr std::size_t kRecordSize = 8 + 8 + 8 + 2;

bool persist_order(const PplRecord& a, const PplRecord& b) {
    return std::tie(a.step, a.worker, a.block_id) < std::tie(b.step, b.worker, b.block_id);
}

std::vector<std::uint8_t> encode(std::span<const PplRecord> records) {
    std::vector<std::uint8_t> out;
    out.reserve(records.size() * kRecordSize);
    for (const auto& r : records) {
        detail::put_le<std::uint64_t>(out, r.block_id);
        detail::put_le<std::uint64_t>(out, r.step);
        detail::put_le<double>(out, r.ppl);
        detail::put_le<std::uint16_t>(out, r.worker);
    }
    return out;
}

}  // namespace

double ppl_from_nlls(std::span<const double> nlls) {
    if (nlls.empty()) throw DomainError("ppl of an empty NLL sequence");
    // Neumaier summation.
    double sum = 0.0, comp = 0.0;
    for (double x : nlls) {
        if (!std::isfinite(x)) throw DomainError("non-finite NLL value");
        const double t = sum + x;
        if (std::abs(sum) >= std::abs(x))
            comp += (sum - t) + x;
        else
            comp += (x - t) + sum;
        sum = t;
    }
    return std::exp((sum + comp) / static_cast<double>(nlls.size()));
}

std::string to_string(TrajectoryKind kind) {
    switch (kind) {
        case TrajectoryKind::Learned: return "learned";
        case TrajectoryKind::Unlearned: return "unlearned";
        case TrajectoryKind::Forgotten: return "forgotten";
        case TrajectoryKind::Mixed: return "mixed";
        case TrajectoryKind::Insufficient: return "insufficient";
    }
    return "?";
}

TrajectoryClass classify(std::span<const double> ppls, double epsilon) {
    // Collapse the delta signs into runs, dropping flats: e.g. "UUDDU" -> "UDU".
    std::vector<char> runs;
    for (std::size_t i = 1; i < ppls.size(); ++i) {
        const double d = ppls[i] - ppls[i - 1];
        char sign = 0;
        if (d > epsilon)
            sign = 'U';
        else if (d < -epsilon)
            sign = 'D';
        if (sign != 0 && (runs.empty() || runs.back() != sign)) runs.push_back(sign);
    }

    if (runs.empty()) return {TrajectoryKind::Insufficient, 0};
    if (runs.size() == 1)
        return {runs[0] == 'D' ? TrajectoryKind::Learned : TrajectoryKind::Unlearned, 0};

    std::uint32_t descents = 0;
    for (std::size_t i = 0; i + 1 < runs.size(); ++i)
        if (runs[i] == 'U') ++descents;  // runs alternate, so the next one is 'D'
    if (descents == 0) return {TrajectoryKind::Mixed, 0};
    return {TrajectoryKind::Forgotten, descents};
}

TrajectoryClass classify(const Trajectory& trajectory, double epsilon) {
    std::vector<double> ppls;
    ppls.reserve(trajectory.records.size());
    for (const auto& r : trajectory.records) ppls.push_back(r.ppl);
    return classify(ppls, epsilon);
}

ForgettingReport forgetting_report(std::span<const TrajectoryClass> classes) {
    if (classes.empty()) throw DomainError("forgetting report over an empty ledger");
    ForgettingReport rep;
    rep.trajectories = classes.size();
    std::size_t forgotten = 0, multiple = 0;
    for (const auto& c : classes) {
        ++rep.class_counts[c.kind];
        if (c.kind == TrajectoryKind::Forgotten) {
            ++forgotten;
            if (c.descent_count > 1) ++multiple;
            ++rep.descent_count_histogram[c.descent_count];
        }
    }
    rep.fraction_forgotten_at_least_once =
        static_cast<double>(forgotten) / static_cast<double>(classes.size());
    rep.fraction_forgotten_multiple_given_forgotten =
        forgotten == 0 ? 0.0 : static_cast<double>(multiple) / static_cast<double>(forgotten);
    return rep;
}

PplLedger::PplLedger(std::optional<std::size_t> block_count) : block_count_(block_count) {}

PplLedger::PplLedger(const fs::path& path, std::optional<std::size_t> block_count)
    : block_count_(block_count), path_(path) {
    if (fs::exists(path)) {
        for (const auto& r : read_file(path)) {
            check_locked(r);
            apply_locked(r);
        }
        out_.open(path, std::ios::binary | std::ios::app);
    } else {
        if (path.has_parent_path()) fs::create_directories(path.parent_path());
        out_.open(path, std::ios::binary | std::ios::trunc);
        std::vector<std::uint8_t> header(std::begin(kLedgerMagic), std::end(kLedgerMagic));
        detail::put_le<std::uint32_t>(header, kLedgerVersion);
        out_.write(reinterpret_cast<const char*>(header.data()),
                   static_cast<std::streamsize>(header.size()));
        out_.flush();
    }
    if (!out_) throw Error("cannot open ledger " + path.string());
}

PplLedger::~PplLedger() {
    try {
        flush();
    } catch (...) {
    }
}

void PplLedger::check_locked(const PplRecord& r) const {
    if (!std::isfinite(r.ppl) || r.ppl <= 0.0)
        throw DomainError("ppl must be finite and positive (block " +
                          std::to_string(r.block_id) + ", step " + std::to_string(r.step) + ")");
    if (block_count_ && r.block_id >= *block_count_)
        throw DomainError("unknown block id " + std::to_string(r.block_id) + " (corpus has " +
                          std::to_string(*block_count_) + " blocks)");
    auto it = by_block_.find(r.block_id);
    if (it != by_block_.end() && !it->second.records.empty() &&
        r.step <= it->second.records.back().step)
        throw OrderingError("block " + std::to_string(r.block_id) + ": step " +
                            std::to_string(r.step) + " not after last recorded step " +
                            std::to_string(it->second.records.back().step));
}

void PplLedger::apply_locked(const PplRecord& r) {
    auto& traj = by_block_[r.block_id];
    traj.block_id = r.block_id;
    traj.records.push_back(r);
    ++record_count_;
}

void PplLedger::record(BlockId block_id, Step step, double ppl, std::uint16_t worker) {
    PplRecord r{block_id, step, ppl, worker};
    std::lock_guard lock(mu_);
    check_locked(r);
    apply_locked(r);
    if (path_) pending_.push_back(r);
}

void PplLedger::record_all(std::span<const PplRecord> records) {
    std::lock_guard lock(mu_);
    // Validate against a scratch view of the last step per block so that a
    // batch containing the same block twice is ordered too.
    std::map<BlockId, Step> last;
    for (const auto& r : records) {
        check_locked(r);
        auto [it, fresh] = last.try_emplace(r.block_id, r.step);
        if (!fresh) {
            if (r.step <= it->second)
                throw OrderingError("block " + std::to_string(r.block_id) + ": step " +
                                    std::to_string(r.step) + " not after step " +
                                    std::to_string(it->second) + " in the same report");
            it->second = r.step;
        }
    }
    for (const auto& r : records) {
        apply_locked(r);
        if (path_) pending_.push_back(r);
    }
}

void PplLedger::flush() {
    std::lock_guard lock(mu_);
    if (!path_ || pending_.empty()) return;
    std::sort(pending_.begin(), pending_.end(), persist_order);
    auto bytes = encode(pending_);
    out_.write(reinterpret_cast<const char*>(bytes.data()),
               static_cast<std::streamsize>(bytes.size()));
    out_.flush();
    if (!out_) throw Error("ledger write failed: " + path_->string());
    pending_.clear();
}

std::size_t PplLedger::block_count_hint() const {
    std::lock_guard lock(mu_);
    if (block_count_) return *block_count_;
    return by_block_.empty() ? 0 : static_cast<std::size_t>(by_block_.rbegin()->first + 1);
}

std::size_t PplLedger::size() const {
    std::lock_guard lock(mu_);
    return record_count_;
}

std::vector<Trajectory> PplLedger::trajectories() const {
    std::lock_guard lock(mu_);
    std::vector<Trajectory> out;
    out.reserve(by_block_.size());
    for (const auto& [id, t] : by_block_) out.push_back(t);
    return out;
}

std::optional<Trajectory> PplLedger::trajectory(BlockId id) const {
    std::lock_guard lock(mu_);
    auto it = by_block_.find(id);
    if (it == by_block_.end()) return std::nullopt;
    return it->second;
}

std::vector<PplRecord> PplLedger::records() const {
    std::lock_guard lock(mu_);
    std::vector<PplRecord> out;
    out.reserve(record_count_);
    for (const auto& [id, t] : by_block_) out.insert(out.end(), t.records.begin(), t.records.end());
    std::sort(out.begin(), out.end(), persist_order);
    return out;
}

LatestPpls PplLedger::latest_ppls(std::optional<StepWindow> window,
                                  std::size_t corpus_blocks) const {
    std::lock_guard lock(mu_);
    LatestPpls out;
    for (BlockId id = 0; id < corpus_blocks; ++id) {
        auto it = by_block_.find(id);
        bool found = false;
        if (it != by_block_.end()) {
            const auto& recs = it->second.records;
            for (auto r = recs.rbegin(); r != recs.rend(); ++r) {
                if (!window || window->contains(r->step)) {
                    out.ppl[id] = r->ppl;
                    found = true;
                    break;
                }
            }
        }
        if (!found) out.missing.push_back(id);
    }
    return out;
}

ForgettingReport PplLedger::forgetting_report(double epsilon) const {
    std::vector<TrajectoryClass> classes;
    for (const auto& t : trajectories()) classes.push_back(classify(t, epsilon));
    return lfr::forgetting_report(classes);
}

void PplLedger::export_csv(const fs::path& path) const {
    std::FILE* f = std::fopen(path.string().c_str(), "w");
    if (!f) throw Error("cannot write " + path.string());
    std::fputs("block_id,step,ppl\n", f);
    for (const auto& r : records())
        std::fprintf(f, "%llu,%llu,%.17g\n", static_cast<unsigned long long>(r.block_id),
                     static_cast<unsigned long long>(r.step), r.ppl);
    std::fclose(f);
}

std::vector<PplRecord> PplLedger::read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot read ledger " + path.string());
    std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in),
                                    std::istreambuf_iterator<char>()};
    std::span<const std::uint8_t> view(bytes);
    if (bytes.size() < kLedgerHeaderSize ||
        !std::equal(std::begin(kLedgerMagic), std::end(kLedgerMagic), bytes.begin()))
        throw FormatError("not a ledger file: " + path.string());
    const auto version = detail::get_le<std::uint32_t>(view, 4);
    if (version != kLedgerVersion)
        throw FormatError("ledger version " + std::to_string(version) + " unsupported");
    if ((bytes.size() - kLedgerHeaderSize) % kRecordSize != 0)
        throw CorruptionError("ledger " + path.string() + " ends in a partial record");

    std::vector<PplRecord> out;
    for (std::size_t off = kLedgerHeaderSize; off < bytes.size(); off += kRecordSize) {
        PplRecord r;
        r.block_id = detail::get_le<std::uint64_t>(view, off);
        r.step = detail::get_le<std::uint64_t>(view, off + 8);
        r.ppl = detail::get_le<double>(view, off + 16);
        r.worker = detail::get_le<std::uint16_t>(view, off + 24);
        out.push_back(r);
    }
    return out;
}

}  // namespace lfr
