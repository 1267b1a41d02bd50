#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "lfr/corpus.hpp"
#include "lfr/ledger.hpp"

namespace lfr {

// Anything the scheduler can drive. Implementations are single-writer:
// train_on() must not overlap other calls, eval_nll() is const and may run
// concurrently with other const calls.
class Learner {
public:
    virtual ~Learner() = default;

    // One optimization step on the batch. Returns each block's mean NLL
    // (nats/token) measured before the update.
    virtual std::vector<double> train_on(std::span<const TokenBlock> batch, Step step) = 0;

    // Per-token NLL of the block under the current parameters. Length L-1
    // (every next-token target), or M when an evaluation window is set.
    virtual std::vector<double> eval_nll(const TokenBlock& block) const = 0;

    virtual std::string name() const = 0;
};

// Learners that expose a per-block representation for embedding analyses.
class HiddenStateProvider {
public:
    virtual ~HiddenStateProvider() = default;
    virtual std::size_t hidden_width() const = 0;
    // Mean of the final hidden layer over every predicted position.
    virtual std::vector<double> hidden_mean(const TokenBlock& block) const = 0;
};

// ---------------------------------------------------------------------------
// Synthetic forgetting dynamics.
//
// Each block i has a difficulty d_i and a mastery m_i in [0, d_i]. Sampling
// a block reports ppl = 1 + (d_i - m_i)(1 + noise) and then pulls m_i toward
// d_i by the learning gain; every block left out of the batch decays by
// (1 - beta * batch/n). Perplexity therefore rises between visits and falls
// on each visit, which is the rise/fall pattern the ledger classifies.

struct SyntheticLearnerConfig {
    double alpha = 0.5;  // learning gain, (0, 1]
    double beta = 0.3;   // interference rate, >= 0
    double sigma = 0.0;  // multiplicative noise std-dev, >= 0
    double difficulty_min = 1.0;
    double difficulty_max = 10.0;
    std::vector<double> difficulties;  // explicit per-block values override the range
    std::uint64_t seed = 0;
};

SyntheticLearnerConfig synthetic_config_from_json(const nlohmann::json& j);

class SyntheticLearner final : public Learner {
public:
    SyntheticLearner(SyntheticLearnerConfig config, std::size_t corpus_blocks,
                     std::uint32_t context_length);

    std::vector<double> train_on(std::span<const TokenBlock> batch, Step step) override;
    std::vector<double> eval_nll(const TokenBlock& block) const override;
    std::string name() const override { return "synthetic"; }

    double difficulty(BlockId id) const { return difficulty_.at(id); }
    double mastery(BlockId id) const { return mastery_.at(id); }
    // Noise-free perplexity of the block right now.
    double current_ppl(BlockId id) const;

private:
    SyntheticLearnerConfig config_;
    std::uint32_t context_length_;
    std::vector<double> difficulty_;
    std::vector<double> mastery_;
    std::vector<std::uint8_t> in_batch_;
    std::mt19937_64 noise_rng_;
};

// ---------------------------------------------------------------------------
// TinyLM: a windowed neural next-token predictor.
//
//   x   = [E(t_{j-w}); ...; E(t_{j-1})]      (a padding row before the block start)
//   h_1 = tanh(W_1 x + b_1), h_k = tanh(W_k h_{k-1} + b_k)
//   p   = softmax(W_o h_depth + b_o)
//
// Trained with plain SGD (optional momentum) on the mean token cross-entropy.

struct TinyLMConfig {
    std::uint32_t vocab_size = 256;
    std::uint32_t window = 8;
    std::uint32_t width = 32;
    std::uint32_t depth = 1;
    double learning_rate = 0.1;
    double momentum = 0.0;
    std::uint32_t eval_positions = 0;  // M; 0 means every position (L-1)
    std::uint64_t seed = 0;
};

TinyLMConfig tinylm_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const TinyLMConfig& c);

class TinyLM final : public Learner, public HiddenStateProvider {
public:
    explicit TinyLM(TinyLMConfig config);

    std::vector<double> train_on(std::span<const TokenBlock> batch, Step step) override;
    std::vector<double> eval_nll(const TokenBlock& block) const override;
    std::string name() const override { return "tiny"; }

    std::size_t hidden_width() const override { return config_.width; }
    std::vector<double> hidden_mean(const TokenBlock& block) const override;

    // Mean token NLL over the batch and its gradient w.r.t. parameters().
    // Exposed for gradient checking.
    double loss_and_gradient(std::span<const TokenBlock> batch, std::vector<double>& grad,
                             std::vector<double>* per_block_mean = nullptr) const;
    double loss(std::span<const TokenBlock> batch) const;

    const TinyLMConfig& config() const { return config_; }
    std::size_t parameter_count() const { return params_.size(); }
    std::span<double> parameters() { return params_; }
    std::span<const double> parameters() const { return params_; }

    void save(const std::filesystem::path& path) const;
    static TinyLM load(const std::filesystem::path& path);

private:
    struct Layout {
        std::size_t embed, hidden_w, hidden_b, out_w, out_b, total;
        std::vector<std::size_t> hidden_w_at, hidden_b_at;  // per layer
    };
    struct Workspace;

    // First predicted position inside a block of the given length.
    std::size_t first_target(std::size_t block_len) const;
    void forward(std::span<const TokenId> tokens, std::size_t target, Workspace& ws) const;
    double block_nlls(const TokenBlock& block, std::vector<double>* nlls,
                      std::vector<double>* grad, double grad_scale,
                      std::vector<double>* hidden_sum) const;

    TinyLMConfig config_;
    Layout layout_;
    std::vector<double> params_;
    std::vector<double> velocity_;
};

}  // namespace lfr
