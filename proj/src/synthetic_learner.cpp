#include <algorithm>
#include <cmath>

#include "lfr/error.hpp"
#include "lfr/learner.hpp"

namespace lfr {

using json = nlohmann::json;

SyntheticLearnerConfig synthetic_config_from_json(const json& j) {
    SyntheticLearnerConfig c;
    try {
        c.alpha = j.value("alpha", c.alpha);
        c.beta = j.value("beta", c.beta);
        c.sigma = j.value("sigma", c.sigma);
        c.difficulty_min = j.value("difficulty_min", c.difficulty_min);
        c.difficulty_max = j.value("difficulty_max", c.difficulty_max);
        if (j.contains("difficulties")) c.difficulties = j.at("difficulties").get<std::vector<double>>();
        c.seed = j.value("seed", c.seed);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("synthetic learner config: ") + e.what());
    }
    return c;
}

SyntheticLearner::SyntheticLearner(SyntheticLearnerConfig config, std::size_t corpus_blocks,
                                   std::uint32_t context_length)
    : config_(std::move(config)), context_length_(context_length),
      noise_rng_(config_.seed ^ 0x9E3779B97F4A7C15ull) {
    if (!(config_.alpha > 0.0 && config_.alpha <= 1.0))
        throw ConfigError("alpha must be in (0, 1]");
    if (!(config_.beta >= 0.0)) throw ConfigError("beta must be >= 0");
    if (!(config_.sigma >= 0.0)) throw ConfigError("sigma must be >= 0");
    if (corpus_blocks == 0) throw ConfigError("synthetic learner over an empty corpus");

    if (!config_.difficulties.empty()) {
        if (config_.difficulties.size() != corpus_blocks)
            throw ConfigError("difficulties list does not match corpus size");
        difficulty_ = config_.difficulties;
    } else {
        if (!(config_.difficulty_min > 0.0 && config_.difficulty_max >= config_.difficulty_min))
            throw ConfigError("difficulty range must be positive and ordered");
        std::mt19937_64 rng(config_.seed);
        difficulty_.resize(corpus_blocks);
        const double span = config_.difficulty_max - config_.difficulty_min;
        for (auto& d : difficulty_)
            d = config_.difficulty_min + span * (static_cast<double>(rng() >> 11) * 0x1.0p-53);
    }
    for (double d : difficulty_)
        if (!(d > 0.0) || !std::isfinite(d)) throw ConfigError("difficulties must be positive");
    mastery_.assign(corpus_blocks, 0.0);
    in_batch_.assign(corpus_blocks, 0);
}

double SyntheticLearner::current_ppl(BlockId id) const {
    return 1.0 + (difficulty_.at(id) - mastery_.at(id));
}

std::vector<double> SyntheticLearner::train_on(std::span<const TokenBlock> batch, Step) {
    std::normal_distribution<double> noise(0.0, 1.0);
    std::vector<double> out;
    out.reserve(batch.size());
    for (const auto& b : batch) {
        const BlockId id = b.block_id;
        if (id >= mastery_.size()) throw DomainError("block id outside synthetic corpus");
        double eps = config_.sigma > 0.0 ? config_.sigma * noise(noise_rng_) : 0.0;
        eps = std::max(eps, -0.99);
        const double ppl = 1.0 + (difficulty_[id] - mastery_[id]) * (1.0 + eps);
        out.push_back(std::log(ppl));
    }
    for (const auto& b : batch) {
        const BlockId id = b.block_id;
        auto& m = mastery_[id];
        m = std::clamp(m + config_.alpha * (difficulty_[id] - m), 0.0, difficulty_[id]);
        in_batch_[id] = 1;
    }
    const double keep =
        1.0 - config_.beta * static_cast<double>(batch.size()) / static_cast<double>(mastery_.size());
    const double factor = std::max(keep, 0.0);
    for (std::size_t i = 0; i < mastery_.size(); ++i) {
        if (in_batch_[i])
            in_batch_[i] = 0;
        else
            mastery_[i] *= factor;
    }
    return out;
}

std::vector<double> SyntheticLearner::eval_nll(const TokenBlock& block) const {
    const std::size_t positions = std::max<std::size_t>(1, context_length_ - 1);
    return std::vector<double>(positions, std::log(current_ppl(block.block_id)));
}

}  // namespace lfr
