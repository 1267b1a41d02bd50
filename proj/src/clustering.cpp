#include "lfr/clustering.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>

#include <json.hpp>

#include "lfr/error.hpp"

namespace lfr {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

double unit_uniform(std::mt19937_64& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// Index drawn with probability proportional to weights[i]; uniform when all
// weights are zero.
std::size_t weighted_pick(std::span<const double> weights, std::mt19937_64& rng) {
    double total = 0.0;
    for (double w : weights) total += w;
    if (!(total > 0.0)) return static_cast<std::size_t>(unit_uniform(rng) * weights.size());
    const double target = unit_uniform(rng) * total;
    double acc = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        acc += weights[i];
        if (target < acc) return i;
    }
    for (std::size_t i = weights.size(); i-- > 0;)
        if (weights[i] > 0.0) return i;
    return weights.size() - 1;
}

double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

std::array<std::uint8_t, 3> ramp(double v) {
    // Blue (-1) -> white (0) -> dark red (1).
    static constexpr std::array<std::array<double, 3>, 5> stops = {{
        {{33, 102, 172}}, {{146, 197, 222}}, {{247, 247, 247}}, {{244, 165, 130}}, {{178, 24, 43}}}};
    const double t = (std::clamp(v, -1.0, 1.0) + 1.0) / 2.0 * (stops.size() - 1);
    const auto i = std::min<std::size_t>(static_cast<std::size_t>(t), stops.size() - 2);
    const double f = t - static_cast<double>(i);
    std::array<std::uint8_t, 3> rgb{};
    for (int c = 0; c < 3; ++c)
        rgb[c] = static_cast<std::uint8_t>(std::lround(stops[i][c] * (1 - f) + stops[i + 1][c] * f));
    return rgb;
}

}  // namespace

EmbeddingMethod embedding_method_from_string(std::string_view name) {
    if (name == "token-frequency") return EmbeddingMethod::TokenFrequency;
    if (name == "learner-hidden") return EmbeddingMethod::LearnerHidden;
    throw ConfigError("unknown embedding method '" + std::string(name) + "'");
}

std::string to_string(EmbeddingMethod method) {
    return method == EmbeddingMethod::TokenFrequency ? "token-frequency" : "learner-hidden";
}

EmbeddingMatrix embed_blocks(const Corpus& corpus, std::span<const BlockId> block_ids,
                             EmbeddingMethod method, const HiddenStateProvider* hidden) {
    if (method == EmbeddingMethod::TokenFrequency) {
        EmbeddingMatrix m(block_ids.size(), corpus.vocab_size());
        for (std::size_t i = 0; i < block_ids.size(); ++i) {
            const auto block = corpus.block(block_ids[i]);
            auto row = m.row(i);
            const double w = 1.0 / static_cast<double>(block.tokens.size());
            for (TokenId t : block.tokens) row[t] += w;
        }
        return m;
    }
    if (!hidden) throw ConfigError("learner-hidden embedding needs a learner with hidden states");
    EmbeddingMatrix m(block_ids.size(), hidden->hidden_width());
    for (std::size_t i = 0; i < block_ids.size(); ++i) {
        const auto h = hidden->hidden_mean(corpus.block(block_ids[i]));
        std::copy(h.begin(), h.end(), m.row(i).begin());
    }
    return m;
}

double squared_distance(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

std::size_t default_cluster_count(std::size_t n) {
    return std::clamp<std::size_t>(n / 10, 1, 270);
}

namespace {

// One k-means++ start followed by Lloyd iterations.
ClusterModel lloyd_run(const EmbeddingMatrix& points, const KMeansOptions& options,
                       std::mt19937_64& rng) {
    const std::size_t n = points.rows, d = points.cols, k = options.k;
    ClusterModel model;
    model.k = k;
    model.centroids = Matrix(k, d);

    // k-means++ seeding.
    std::vector<double> nearest(n, std::numeric_limits<double>::infinity());
    std::size_t pick = static_cast<std::size_t>(unit_uniform(rng) * n);
    for (std::size_t c = 0; c < k; ++c) {
        if (c > 0) pick = weighted_pick(nearest, rng);
        std::copy(points.row(pick).begin(), points.row(pick).end(), model.centroids.row(c).begin());
        for (std::size_t i = 0; i < n; ++i)
            nearest[i] = std::min(nearest[i], squared_distance(points.row(i), model.centroids.row(c)));
    }

    constexpr auto kUnassigned = std::numeric_limits<std::uint32_t>::max();
    model.assignments.assign(n, kUnassigned);
    std::vector<double> dist(n, 0.0);
    std::vector<std::size_t> counts(k);

    for (std::size_t iter = 0; iter < options.max_iters; ++iter) {
        // Assignment: a point only moves to a strictly closer centroid.
        bool changed = false;
        for (std::size_t i = 0; i < n; ++i) {
            std::uint32_t best = model.assignments[i];
            double best_d = best == kUnassigned
                                ? std::numeric_limits<double>::infinity()
                                : squared_distance(points.row(i), model.centroids.row(best));
            for (std::uint32_t c = 0; c < k; ++c) {
                const double dc = squared_distance(points.row(i), model.centroids.row(c));
                if (dc < best_d) {
                    best_d = dc;
                    best = c;
                }
            }
            if (best != model.assignments[i]) changed = true;
            model.assignments[i] = best;
            dist[i] = best_d;
        }
        if (!changed && iter > 0) {
            model.converged = true;
            break;
        }

        std::fill(counts.begin(), counts.end(), 0);
        for (auto a : model.assignments) ++counts[a];
        for (std::uint32_t c = 0; c < k; ++c) {
            if (counts[c] != 0) continue;
            std::size_t far = n;
            for (std::size_t i = 0; i < n; ++i)
                if (counts[model.assignments[i]] > 1 && (far == n || dist[i] > dist[far])) far = i;
            if (far == n) continue;  // every cluster is a singleton already
            --counts[model.assignments[far]];
            model.assignments[far] = c;
            dist[far] = 0.0;
            counts[c] = 1;
        }

        // Update: centroids become member means; empty clusters keep theirs.
        Matrix sums(k, d);
        for (std::size_t i = 0; i < n; ++i) {
            auto s = sums.row(model.assignments[i]);
            auto p = points.row(i);
            for (std::size_t j = 0; j < d; ++j) s[j] += p[j];
        }
        for (std::size_t c = 0; c < k; ++c) {
            if (counts[c] == 0) continue;
            auto cen = model.centroids.row(c);
            auto s = sums.row(c);
            for (std::size_t j = 0; j < d; ++j) cen[j] = s[j] / static_cast<double>(counts[c]);
        }

        double inertia = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            inertia += squared_distance(points.row(i), model.centroids.row(model.assignments[i]));
        const double previous =
            model.inertia_history.empty() ? inertia : model.inertia_history.back();
        model.inertia_history.push_back(inertia);
        model.iterations = iter + 1;
        if (options.rel_tol > 0.0 && iter > 0 && previous > 0.0 &&
            (previous - inertia) / previous < options.rel_tol)
            break;
    }
    model.inertia = model.inertia_history.empty() ? 0.0 : model.inertia_history.back();
    return model;
}

}  // namespace

ClusterModel kmeans(const EmbeddingMatrix& points, const KMeansOptions& options) {
    const std::size_t n = points.rows, k = options.k;
    if (k == 0) throw ConfigError("k must be >= 1");
    if (k > n)
        throw ConfigError("k = " + std::to_string(k) + " exceeds the number of points (" +
                          std::to_string(n) + ")");
    if (options.max_iters == 0) throw ConfigError("max_iters must be >= 1");
    if (options.restarts == 0) throw ConfigError("restarts must be >= 1");
    for (double v : points.data)
        if (!std::isfinite(v)) throw DomainError("non-finite embedding value");

    std::mt19937_64 rng(options.seed);
    ClusterModel best = lloyd_run(points, options, rng);
    for (std::size_t r = 1; r < options.restarts; ++r) {
        ClusterModel next = lloyd_run(points, options, rng);
        if (next.inertia < best.inertia) best = std::move(next);
    }
    return best;
}

SimilarityMatrix cosine_similarity(const Matrix& a, const Matrix& b) {
    if (a.cols != b.cols)
        throw DomainError("dimension mismatch: " + std::to_string(a.cols) + " vs " +
                          std::to_string(b.cols));
    auto norms = [](const Matrix& m, const char* name) {
        std::vector<double> out(m.rows);
        for (std::size_t i = 0; i < m.rows; ++i) {
            out[i] = std::sqrt(dot(m.row(i), m.row(i)));
            if (!(out[i] > 0.0))
                throw DomainError(std::string("zero-norm vector at row ") + std::to_string(i) +
                                  " of " + name);
        }
        return out;
    };
    const auto na = norms(a, "A"), nb = norms(b, "B");
    SimilarityMatrix s;
    s.values = Matrix(a.rows, b.rows);
    for (std::size_t i = 0; i < a.rows; ++i)
        for (std::size_t j = 0; j < b.rows; ++j)
            s.values(i, j) = std::clamp(dot(a.row(i), b.row(j)) / (na[i] * nb[j]), -1.0, 1.0);
    for (std::size_t i = 0; i < a.rows; ++i) s.row_labels.push_back(std::to_string(i));
    for (std::size_t j = 0; j < b.rows; ++j) s.col_labels.push_back(std::to_string(j));
    return s;
}

SimilarityStats similarity_stats(const Matrix& values) {
    if (values.data.empty()) throw DomainError("statistics of an empty matrix");
    // Welford.
    double mean = 0.0, m2 = 0.0;
    std::size_t count = 0;
    for (double v : values.data) {
        ++count;
        const double delta = v - mean;
        mean += delta / static_cast<double>(count);
        m2 += delta * (v - mean);
    }
    SimilarityStats s;
    s.mean = mean;
    s.variance = std::max(0.0, m2 / static_cast<double>(count));
    s.std = std::sqrt(s.variance);
    return s;
}

IdSet read_id_set(const fs::path& path, std::string label) {
    std::ifstream in(path);
    if (!in) throw Error("cannot read id file " + path.string());
    IdSet set;
    set.label = label.empty() ? path.stem().string() : std::move(label);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            std::size_t used = 0;
            const auto id = std::stoull(line, &used);
            if (used != line.size()) throw std::invalid_argument("trailing characters");
            set.ids.push_back(id);
        } catch (const std::exception&) {
            throw FormatError(path.string() + ":" + std::to_string(lineno) + ": not a block id");
        }
    }
    const auto run = path.parent_path() / "run.json";
    if (fs::exists(run)) {
        std::ifstream r(run);
        const auto j = json::parse(r, nullptr, false);
        if (!j.is_discarded() && j.contains("corpus_checksum"))
            set.corpus_checksum = j.at("corpus_checksum").get<std::string>();
    }
    return set;
}

void write_heatmap_csv(const SimilarityMatrix& m, const fs::path& path) {
    std::FILE* f = std::fopen(path.string().c_str(), "w");
    if (!f) throw Error("cannot write " + path.string());
    std::fputs("row", f);
    for (const auto& c : m.col_labels) std::fprintf(f, ",%s", c.c_str());
    std::fputc('\n', f);
    for (std::size_t i = 0; i < m.values.rows; ++i) {
        std::fputs(i < m.row_labels.size() ? m.row_labels[i].c_str() : "", f);
        for (std::size_t j = 0; j < m.values.cols; ++j) std::fprintf(f, ",%.17g", m.values(i, j));
        std::fputc('\n', f);
    }
    std::fclose(f);
}

void write_heatmap_image(const SimilarityMatrix& m, const fs::path& path) {
    const std::size_t rows = m.values.rows, cols = m.values.cols;
    if (rows == 0 || cols == 0) throw DomainError("empty heatmap");
    const std::size_t cell = std::max<std::size_t>(1, 540 / std::max(rows, cols));
    const std::size_t width = cols * cell, height = rows * cell;
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + path.string());
    out << "P6\n" << width << ' ' << height << "\n255\n";
    std::vector<char> line(width * 3);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            const auto rgb = ramp(m.values(r, c));
            for (std::size_t x = 0; x < cell; ++x)
                for (int k = 0; k < 3; ++k) line[(c * cell + x) * 3 + k] = static_cast<char>(rgb[k]);
        }
        for (std::size_t y = 0; y < cell; ++y) out.write(line.data(), static_cast<std::streamsize>(line.size()));
    }
}

std::vector<PairingResult> phase_comparison(std::span<const IdSet> sets,
                                            std::span<const Pairing> pairings,
                                            const Corpus& corpus, const ComparisonOptions& options) {
    for (const auto& s : sets) {
        if (s.ids.empty()) throw DomainError("id set '" + s.label + "' is empty");
        if (!s.corpus_checksum.empty() && s.corpus_checksum != corpus.checksum())
            throw DomainError("id set '" + s.label + "' was produced on a different corpus");
    }

    // Cluster each referenced set once.
    std::vector<std::optional<ClusterModel>> models(sets.size());
    auto model_for = [&](std::size_t i) -> const ClusterModel& {
        if (i >= sets.size()) throw ConfigError("pairing references a missing id set");
        if (!models[i]) {
            const auto emb = embed_blocks(corpus, sets[i].ids, options.method, options.hidden);
            KMeansOptions ko;
            ko.k = std::min(options.k == 0 ? default_cluster_count(sets[i].ids.size()) : options.k,
                            sets[i].ids.size());
            ko.seed = options.seed;
            models[i] = kmeans(emb, ko);
        }
        return *models[i];
    };

    if (options.out_dir) fs::create_directories(*options.out_dir);
    std::vector<PairingResult> results;
    json summary = json::array();
    for (const auto& p : pairings) {
        PairingResult r;
        r.a_label = sets[p.a].label;
        r.b_label = sets[p.b].label;
        r.matrix = cosine_similarity(model_for(p.a).centroids, model_for(p.b).centroids);
        for (auto& l : r.matrix.row_labels) l = r.a_label + "#" + l;
        for (auto& l : r.matrix.col_labels) l = r.b_label + "#" + l;
        r.stats = similarity_stats(r.matrix.values);
        if (options.out_dir) {
            const std::string stem = r.a_label + "__vs__" + r.b_label;
            r.csv_path = *options.out_dir / (stem + ".csv");
            r.image_path = *options.out_dir / (stem + ".ppm");
            write_heatmap_csv(r.matrix, *r.csv_path);
            write_heatmap_image(r.matrix, *r.image_path);
        }
        summary.push_back({{"a", r.a_label},
                           {"b", r.b_label},
                           {"rows", r.matrix.values.rows},
                           {"cols", r.matrix.values.cols},
                           {"mean", r.stats.mean},
                           {"std", r.stats.std},
                           {"variance", r.stats.variance}});
        results.push_back(std::move(r));
    }
    if (options.out_dir) {
        std::ofstream out(*options.out_dir / "similarity_stats.json");
        out << summary.dump(2) << '\n';
    }
    return results;
}

}  // namespace lfr
