#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lfr/corpus.hpp"
#include "lfr/learner.hpp"

namespace lfr {

// Dense row-major matrix of doubles.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

    double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
    std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
    std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

    bool operator==(const Matrix&) const = default;
};

using EmbeddingMatrix = Matrix;

enum class EmbeddingMethod { TokenFrequency, LearnerHidden };

EmbeddingMethod embedding_method_from_string(std::string_view name);
std::string to_string(EmbeddingMethod method);

// Row i embeds block_ids[i]. TokenFrequency rows are L1-normalized token
// histograms (d = vocab size); LearnerHidden rows come from `hidden`.
EmbeddingMatrix embed_blocks(const Corpus& corpus, std::span<const BlockId> block_ids,
                             EmbeddingMethod method, const HiddenStateProvider* hidden = nullptr);

struct KMeansOptions {
    std::size_t k = 1;
    std::uint64_t seed = 0;
    std::size_t max_iters = 300;
    double rel_tol = 0.0;  // 0: iterate until assignments stop changing
    std::size_t restarts = 10;  // independent k-means++ starts; the lowest inertia wins
};

struct ClusterModel {
    std::size_t k = 0;
    Matrix centroids;
    std::vector<std::uint32_t> assignments;
    double inertia = 0.0;
    std::vector<double> inertia_history;  // after every Lloyd iteration
    std::size_t iterations = 0;
    bool converged = false;  // assignments reached a fixed point
};

// Lloyd's algorithm from `restarts` k-means++ starts, keeping the run with
// the lowest inertia (ties go to the earlier run). Empty clusters are reseeded
// with the point farthest from its centroid. Identical points with k > 1
// produce duplicate centroids.
ClusterModel kmeans(const EmbeddingMatrix& points, const KMeansOptions& options);

double squared_distance(std::span<const double> a, std::span<const double> b);

// min(270, n / 10), at least 1.
std::size_t default_cluster_count(std::size_t n);

struct SimilarityMatrix {
    Matrix values;
    std::vector<std::string> row_labels;
    std::vector<std::string> col_labels;
};

// values(i, j) = <a_i, b_j> / (|a_i| |b_j|). Throws DomainError naming the
// first zero-norm row.
SimilarityMatrix cosine_similarity(const Matrix& a, const Matrix& b);

struct SimilarityStats {
    double mean = 0.0;
    double std = 0.0;
    double variance = 0.0;
};

// Population moments over every entry.
SimilarityStats similarity_stats(const Matrix& values);

// A set of block ids emitted by one run (dropped/retained at some phase).
struct IdSet {
    std::string label;
    std::vector<BlockId> ids;
    std::string corpus_checksum;  // empty when unknown
};

// Reads a newline-delimited id file. If a run.json sits next to it, its
// corpus checksum is attached.
IdSet read_id_set(const std::filesystem::path& path, std::string label = {});

struct Pairing {
    std::size_t a = 0;  // indices into the id set list
    std::size_t b = 0;
};

struct ComparisonOptions {
    std::size_t k = 0;  // 0: default_cluster_count per set
    std::uint64_t seed = 0;
    EmbeddingMethod method = EmbeddingMethod::TokenFrequency;
    const HiddenStateProvider* hidden = nullptr;
    std::optional<std::filesystem::path> out_dir;  // heatmap CSV/PPM + stats JSON
};

struct PairingResult {
    std::string a_label;
    std::string b_label;
    SimilarityMatrix matrix;
    SimilarityStats stats;
    std::optional<std::filesystem::path> csv_path;
    std::optional<std::filesystem::path> image_path;
};

// Clusters each set independently and compares centroids pairwise.
std::vector<PairingResult> phase_comparison(std::span<const IdSet> sets,
                                            std::span<const Pairing> pairings,
                                            const Corpus& corpus, const ComparisonOptions& options);

void write_heatmap_csv(const SimilarityMatrix& m, const std::filesystem::path& path);
// Binary PPM, one square per cell, colour ramp over [-1, 1].
void write_heatmap_image(const SimilarityMatrix& m, const std::filesystem::path& path);

}  // namespace lfr
