#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>

#include "lfr/detail/binary_io.hpp"
#include "lfr/error.hpp"
#include "lfr/learner.hpp"

namespace lfr {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr char kCheckpointMagic[4] = {'L', 'F', 'R', 'C'};
constexpr std::uint32_t kCheckpointVersion = 1;

double unit_uniform(std::mt19937_64& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

}  // namespace

TinyLMConfig tinylm_config_from_json(const json& j) {
    TinyLMConfig c;
    try {
        c.vocab_size = j.value("vocab_size", c.vocab_size);
        c.window = j.value("window", c.window);
        c.width = j.value("width", c.width);
        c.depth = j.value("depth", c.depth);
        c.learning_rate = j.value("learning_rate", c.learning_rate);
        c.momentum = j.value("momentum", c.momentum);
        c.eval_positions = j.value("eval_positions", c.eval_positions);
        c.seed = j.value("seed", c.seed);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("tiny learner config: ") + e.what());
    }
    return c;
}

json to_json(const TinyLMConfig& c) {
    return {{"vocab_size", c.vocab_size},       {"window", c.window},
            {"width", c.width},                 {"depth", c.depth},
            {"learning_rate", c.learning_rate}, {"momentum", c.momentum},
            {"eval_positions", c.eval_positions}, {"seed", c.seed}};
}

struct TinyLM::Workspace {
    std::vector<std::uint32_t> context;  // token per window slot (vocab_size = pad)
    std::vector<double> x;
    std::vector<std::vector<double>> h;
    std::vector<double> logits;
    // backward scratch
    std::vector<double> dh, dz, dprev;
};

TinyLM::TinyLM(TinyLMConfig config) : config_(config) {
    const auto& c = config_;
    if (c.vocab_size == 0 || c.window == 0 || c.width == 0 || c.depth == 0)
        throw ConfigError("tiny learner dimensions must be positive");
    if (!(c.learning_rate > 0.0) || !std::isfinite(c.learning_rate))
        throw ConfigError("learning_rate must be positive");
    if (!(c.momentum >= 0.0 && c.momentum < 1.0)) throw ConfigError("momentum must be in [0, 1)");

    const std::size_t V = c.vocab_size, W = c.width, in = std::size_t{c.window} * W;
    std::size_t at = 0;
    layout_.embed = at;
    at += (V + 1) * W;
    for (std::uint32_t l = 0; l < c.depth; ++l) {
        layout_.hidden_w_at.push_back(at);
        at += W * (l == 0 ? in : W);
        layout_.hidden_b_at.push_back(at);
        at += W;
    }
    layout_.hidden_w = layout_.hidden_w_at.front();
    layout_.hidden_b = layout_.hidden_b_at.front();
    layout_.out_w = at;
    at += V * W;
    layout_.out_b = at;
    at += V;
    layout_.total = at;

    params_.assign(layout_.total, 0.0);
    velocity_.assign(layout_.total, 0.0);

    std::mt19937_64 rng(c.seed);
    auto fill = [&](std::size_t offset, std::size_t count, double bound) {
        for (std::size_t i = 0; i < count; ++i)
            params_[offset + i] = (2.0 * unit_uniform(rng) - 1.0) * bound;
    };
    fill(layout_.embed, (V + 1) * W, 1.0);
    for (std::uint32_t l = 0; l < c.depth; ++l) {
        const std::size_t fan_in = l == 0 ? in : W;
        fill(layout_.hidden_w_at[l], W * fan_in, std::sqrt(6.0 / static_cast<double>(fan_in + W)));
    }
    fill(layout_.out_w, V * W, std::sqrt(6.0 / static_cast<double>(W + V)));
}

std::size_t TinyLM::first_target(std::size_t block_len) const {
    const std::size_t targets = block_len - 1;
    if (config_.eval_positions == 0 || config_.eval_positions >= targets) return 1;
    return block_len - config_.eval_positions;
}

void TinyLM::forward(std::span<const TokenId> tokens, std::size_t target, Workspace& ws) const {
    const std::size_t V = config_.vocab_size, W = config_.width, win = config_.window;
    const double* p = params_.data();

    ws.context.resize(win);
    ws.x.resize(win * W);
    for (std::size_t s = 0; s < win; ++s) {
        const std::ptrdiff_t pos = static_cast<std::ptrdiff_t>(target) -
                                   static_cast<std::ptrdiff_t>(win) + static_cast<std::ptrdiff_t>(s);
        const std::uint32_t tok = pos >= 0 ? tokens[static_cast<std::size_t>(pos)]
                                           : static_cast<std::uint32_t>(V);
        ws.context[s] = tok;
        std::copy_n(p + layout_.embed + std::size_t{tok} * W, W, ws.x.begin() + s * W);
    }

    ws.h.resize(config_.depth);
    const std::vector<double>* input = &ws.x;
    for (std::uint32_t l = 0; l < config_.depth; ++l) {
        const std::size_t fan_in = input->size();
        const double* w = p + layout_.hidden_w_at[l];
        const double* b = p + layout_.hidden_b_at[l];
        auto& h = ws.h[l];
        h.resize(W);
        for (std::size_t r = 0; r < W; ++r) {
            double z = b[r];
            const double* row = w + r * fan_in;
            for (std::size_t k = 0; k < fan_in; ++k) z += row[k] * (*input)[k];
            h[r] = std::tanh(z);
        }
        input = &h;
    }

    const auto& top = ws.h.back();
    ws.logits.resize(V);
    const double* wo = p + layout_.out_w;
    const double* bo = p + layout_.out_b;
    for (std::size_t v = 0; v < V; ++v) {
        double z = bo[v];
        const double* row = wo + v * W;
        for (std::size_t k = 0; k < W; ++k) z += row[k] * top[k];
        ws.logits[v] = z;
    }
}

double TinyLM::block_nlls(const TokenBlock& block, std::vector<double>* nlls,
                          std::vector<double>* grad, double grad_scale,
                          std::vector<double>* hidden_sum) const {
    const auto tokens = block.tokens;
    if (tokens.size() < 2) throw DomainError("block too short for next-token prediction");
    for (TokenId t : tokens)
        if (t >= config_.vocab_size)
            throw DomainError("token id " + std::to_string(t) + " >= vocab_size");

    const std::size_t V = config_.vocab_size, W = config_.width;
    const std::size_t start = hidden_sum ? 1 : first_target(tokens.size());
    Workspace ws;
    double total = 0.0;
    std::size_t count = 0;
    if (nlls) nlls->clear();

    for (std::size_t j = start; j < tokens.size(); ++j) {
        forward(tokens, j, ws);
        const std::uint32_t target = tokens[j];

        double max_logit = *std::max_element(ws.logits.begin(), ws.logits.end());
        double sum = 0.0;
        for (double z : ws.logits) sum += std::exp(z - max_logit);
        const double log_z = max_logit + std::log(sum);
        const double nll = log_z - ws.logits[target];
        total += nll;
        ++count;
        if (nlls) nlls->push_back(nll);
        if (hidden_sum)
            for (std::size_t k = 0; k < W; ++k) (*hidden_sum)[k] += ws.h.back()[k];
        if (!grad) continue;

        double* g = grad->data();
        const double* p = params_.data();
        // d nll / d logits = softmax - onehot
        const auto& top = ws.h.back();
        ws.dh.assign(W, 0.0);
        for (std::size_t v = 0; v < V; ++v) {
            double d = std::exp(ws.logits[v] - log_z);
            if (v == target) d -= 1.0;
            d *= grad_scale;
            g[layout_.out_b + v] += d;
            double* gw = g + layout_.out_w + v * W;
            const double* wrow = p + layout_.out_w + v * W;
            for (std::size_t k = 0; k < W; ++k) {
                gw[k] += d * top[k];
                ws.dh[k] += d * wrow[k];
            }
        }
        for (std::uint32_t l = config_.depth; l-- > 0;) {
            const auto& h = ws.h[l];
            const std::vector<double>& input = l == 0 ? ws.x : ws.h[l - 1];
            const std::size_t fan_in = input.size();
            ws.dz.resize(W);
            for (std::size_t r = 0; r < W; ++r) ws.dz[r] = ws.dh[r] * (1.0 - h[r] * h[r]);
            ws.dprev.assign(fan_in, 0.0);
            double* gw = g + layout_.hidden_w_at[l];
            double* gb = g + layout_.hidden_b_at[l];
            const double* w = p + layout_.hidden_w_at[l];
            for (std::size_t r = 0; r < W; ++r) {
                const double dz = ws.dz[r];
                gb[r] += dz;
                double* grow = gw + r * fan_in;
                const double* wrow = w + r * fan_in;
                for (std::size_t k = 0; k < fan_in; ++k) {
                    grow[k] += dz * input[k];
                    ws.dprev[k] += dz * wrow[k];
                }
            }
            std::swap(ws.dh, ws.dprev);
        }
        // ws.dh now holds d/dx
        for (std::size_t s = 0; s < config_.window; ++s) {
            double* ge = g + layout_.embed + std::size_t{ws.context[s]} * W;
            for (std::size_t k = 0; k < W; ++k) ge[k] += ws.dh[s * W + k];
        }
    }
    return total / static_cast<double>(count);
}

double TinyLM::loss_and_gradient(std::span<const TokenBlock> batch, std::vector<double>& grad,
                                 std::vector<double>* per_block_mean) const {
    if (batch.empty()) throw DomainError("empty batch");
    grad.assign(params_.size(), 0.0);
    std::size_t targets = 0;
    for (const auto& b : batch) targets += b.tokens.size() - first_target(b.tokens.size());
    const double scale = 1.0 / static_cast<double>(targets);

    double weighted = 0.0;
    if (per_block_mean) per_block_mean->clear();
    for (const auto& b : batch) {
        const double mean = block_nlls(b, nullptr, &grad, scale, nullptr);
        const std::size_t n = b.tokens.size() - first_target(b.tokens.size());
        weighted += mean * static_cast<double>(n);
        if (per_block_mean) per_block_mean->push_back(mean);
    }
    return weighted * scale;
}

double TinyLM::loss(std::span<const TokenBlock> batch) const {
    double weighted = 0.0;
    std::size_t targets = 0;
    for (const auto& b : batch) {
        const std::size_t n = b.tokens.size() - first_target(b.tokens.size());
        weighted += block_nlls(b, nullptr, nullptr, 0.0, nullptr) * static_cast<double>(n);
        targets += n;
    }
    return weighted / static_cast<double>(targets);
}

std::vector<double> TinyLM::train_on(std::span<const TokenBlock> batch, Step step) {
    std::vector<double> grad, means;
    const double loss = loss_and_gradient(batch, grad, &means);
    if (!std::isfinite(loss))
        throw TrainingError("tiny learner diverged (non-finite loss) at step " + std::to_string(step));
    const double lr = config_.learning_rate, mu = config_.momentum;
    for (std::size_t i = 0; i < params_.size(); ++i) {
        velocity_[i] = mu * velocity_[i] + grad[i];
        params_[i] -= lr * velocity_[i];
    }
    return means;
}

std::vector<double> TinyLM::eval_nll(const TokenBlock& block) const {
    std::vector<double> nlls;
    block_nlls(block, &nlls, nullptr, 0.0, nullptr);
    return nlls;
}

std::vector<double> TinyLM::hidden_mean(const TokenBlock& block) const {
    std::vector<double> sum(config_.width, 0.0);
    block_nlls(block, nullptr, nullptr, 0.0, &sum);
    const double n = static_cast<double>(block.tokens.size() - 1);
    for (auto& v : sum) v /= n;
    return sum;
}

void TinyLM::save(const fs::path& path) const {
    std::vector<std::uint8_t> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
    detail::put_le<std::uint32_t>(out, kCheckpointVersion);
    const std::string header = to_json(config_).dump();
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(header.size()));
    out.insert(out.end(), header.begin(), header.end());
    detail::put_le<std::uint64_t>(out, params_.size());
    for (double v : params_) detail::put_le<double>(out, v);
    for (double v : velocity_) detail::put_le<double>(out, v);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot write checkpoint " + path.string());
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
}

TinyLM TinyLM::load(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("cannot read checkpoint " + path.string());
    std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(f),
                                    std::istreambuf_iterator<char>()};
    std::span<const std::uint8_t> view(bytes);
    if (bytes.size() < 12 ||
        !std::equal(std::begin(kCheckpointMagic), std::end(kCheckpointMagic), bytes.begin()))
        throw FormatError("not a checkpoint: " + path.string());
    if (detail::get_le<std::uint32_t>(view, 4) != kCheckpointVersion)
        throw FormatError("checkpoint version unsupported: " + path.string());
    const auto header_len = detail::get_le<std::uint32_t>(view, 8);
    if (bytes.size() < 12 + header_len + 8) throw CorruptionError("truncated checkpoint");
    const std::string header(bytes.begin() + 12, bytes.begin() + 12 + header_len);
    TinyLM model(tinylm_config_from_json(json::parse(header)));
    std::size_t off = 12 + header_len;
    const auto count = detail::get_le<std::uint64_t>(view, off);
    off += 8;
    if (count != model.params_.size() || bytes.size() != off + 16 * count)
        throw CorruptionError("checkpoint parameter block does not match its config");
    for (std::size_t i = 0; i < count; ++i, off += 8) model.params_[i] = detail::get_le<double>(view, off);
    for (std::size_t i = 0; i < count; ++i, off += 8) model.velocity_[i] = detail::get_le<double>(view, off);
    return model;
}

}  // namespace lfr
