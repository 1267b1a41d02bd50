#include "lfr/bridge.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cmath>
#include <cstring>
#include <istream>
#include <ostream>

#include "lfr/error.hpp"

namespace lfr {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

json error_message(const json& id, const std::string& message) {
    return {{"id", id}, {"type", "error"}, {"message", message}};
}

void send_all(int fd, std::string_view data) {
    while (!data.empty()) {
        const ssize_t n = ::send(fd, data.data(), data.size(), MSG_NOSIGNAL);
        if (n < 0) {
            if (errno == EINTR) continue;
            throw Error(std::string("socket send failed: ") + std::strerror(errno));
        }
        data.remove_prefix(static_cast<std::size_t>(n));
    }
}

// Reads one '\n'-terminated line from fd using `buffer` for leftovers.
std::optional<std::string> recv_line(int fd, std::string& buffer) {
    for (;;) {
        const auto pos = buffer.find('\n');
        if (pos != std::string::npos) {
            std::string line = buffer.substr(0, pos);
            buffer.erase(0, pos + 1);
            if (!line.empty() && line.back() == '\r') line.pop_back();
            return line;
        }
        char chunk[4096];
        const ssize_t n = ::recv(fd, chunk, sizeof(chunk), 0);
        if (n < 0 && errno == EINTR) continue;
        if (n <= 0) {
            if (buffer.empty()) return std::nullopt;
            std::string rest;
            rest.swap(buffer);
            return rest;
        }
        buffer.append(chunk, static_cast<std::size_t>(n));
    }
}

}  // namespace

BridgeServer::BridgeServer(Scheduler& scheduler, PplLedger& ledger, const Corpus& corpus,
                           BridgeOptions options)
    : scheduler_(scheduler), ledger_(ledger), corpus_(corpus), options_(std::move(options)) {
    if (options_.transcript) {
        transcript_.emplace(*options_.transcript, std::ios::app);
        if (!*transcript_) throw Error("cannot open transcript " + options_.transcript->string());
    }
}

void BridgeServer::begin_connection() {
    greeted_ = false;
    inline_tokens_ = false;
    closed_ = false;
    last_id_.reset();
}

void BridgeServer::log(std::string_view direction, std::string_view line) {
    if (transcript_) {
        *transcript_ << direction << ' ' << line << '\n';
        transcript_->flush();
    }
}

json BridgeServer::phase_json() const {
    const auto p = scheduler_.phase_info();
    return {{"index", p.phase_index},
            {"kind", to_string(p.kind)},
            {"epoch", p.epoch},
            {"epochs", p.epochs},
            {"keep_fraction", p.keep_fraction},
            {"pool_size", p.pool_size}};
}

void BridgeServer::persist_state() const {
    if (!options_.state_path) return;
    const fs::path tmp = options_.state_path->string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::trunc);
        if (!out) throw Error("cannot write scheduler state " + tmp.string());
        out << scheduler_.save_state().dump() << '\n';
    }
    fs::rename(tmp, *options_.state_path);
}

std::string BridgeServer::handle(std::string_view line) {
    log(">", line);
    json response;
    json request;
    try {
        request = json::parse(line);
    } catch (const json::parse_error& e) {
        response = error_message(nullptr, std::string("malformed message: ") + e.what());
    }
    if (response.is_null()) {
        try {
            response = dispatch(request);
        } catch (const json::exception& e) {
            response = error_message(request.is_object() && request.contains("id") ? request["id"] : json(),
                                     std::string("malformed message: ") + e.what());
        } catch (const Error& e) {
            response = error_message(request.is_object() && request.contains("id") ? request["id"] : json(),
                                     e.what());
        }
    }
    std::string out = response.dump();
    log("<", out);
    return out;
}

json BridgeServer::dispatch(const json& request) {
    if (!request.is_object()) return error_message(nullptr, "malformed message: not an object");
    if (!request.contains("id") || !request["id"].is_number_integer())
        return error_message(nullptr, "malformed message: integer \"id\" required");
    const json id = request["id"];
    const auto id_value = id.get<std::int64_t>();
    if (last_id_ && id_value <= *last_id_)
        return error_message(id, "message id " + std::to_string(id_value) +
                                     " does not increase (last " + std::to_string(*last_id_) + ")");
    last_id_ = id_value;

    const std::string type = request.at("type").get<std::string>();

    if (type == "hello") {
        const auto version = request.at("protocol_version").get<std::uint32_t>();
        if (version != kProtocolVersion) {
            closed_ = true;
            return error_message(id, "protocol version " + std::to_string(version) +
                                         " unsupported (server speaks " +
                                         std::to_string(kProtocolVersion) + ")");
        }
        const auto checksum = request.at("corpus_checksum").get<std::string>();
        if (checksum != corpus_.checksum()) {
            closed_ = true;
            return error_message(id, "corpus checksum mismatch: client " + checksum +
                                         ", server " + corpus_.checksum());
        }
        greeted_ = true;
        inline_tokens_ = request.value("inline_tokens", false);
        return {{"id", id},
                {"type", "phase_info"},
                {"protocol_version", kProtocolVersion},
                {"batch_size", scheduler_.config().batch_size},
                {"corpus_blocks", corpus_.size()},
                {"context_length", corpus_.context_length()},
                {"num_phases", scheduler_.config().schedule.phases.size()},
                {"step", scheduler_.step()},
                {"phase", phase_json()}};
    }

    if (!greeted_) return error_message(id, "\"hello\" required before \"" + type + "\"");

    if (type == "get_batch") {
        auto batch = scheduler_.next_batch();
        if (!batch) {
            finished_ = true;
            closed_ = true;
            persist_state();
            return {{"id", id}, {"type", "end"}, {"step", scheduler_.step()}};
        }
        persist_state();
        json msg = {{"id", id},
                    {"type", "batch"},
                    {"step", batch->step},
                    {"block_ids", batch->block_ids},
                    {"phase", phase_json()}};
        if (inline_tokens_) {
            json tokens = json::array();
            for (BlockId b : batch->block_ids) {
                const auto blk = corpus_.block(b);
                tokens.push_back(std::vector<TokenId>(blk.tokens.begin(), blk.tokens.end()));
            }
            msg["tokens"] = std::move(tokens);
        }
        return msg;
    }

    if (type == "report") {
        std::vector<PplRecord> records;
        std::size_t index = 0;
        for (const auto& r : request.at("records")) {
            const auto block = r.at("block_id").get<BlockId>();
            const auto step = r.at("step").get<Step>();
            const auto nll = r.at("mean_nll").get<double>();
            const std::string where = "record " + std::to_string(index) + " (block " +
                                      std::to_string(block) + ", step " + std::to_string(step) + ")";
            if (!std::isfinite(nll)) return error_message(id, where + ": mean_nll not finite");
            if (step >= scheduler_.step())
                return error_message(id, where + ": step has not been issued");
            if (block >= corpus_.size()) return error_message(id, where + ": unknown block id");
            if (scheduler_.records_step(step)) records.push_back({block, step, std::exp(nll), 0});
            ++index;
        }
        try {
            ledger_.record_all(records);
        } catch (const Error& e) {
            return error_message(id, std::string("report rejected, ledger unchanged: ") + e.what());
        }
        ledger_.flush();
        return {{"id", id}, {"type", "phase_info"}, {"recorded", records.size()},
                {"step", scheduler_.step()}, {"phase", phase_json()}};
    }

    if (type == "end") {
        closed_ = true;
        ledger_.flush();
        return {{"id", id}, {"type", "end"}, {"step", scheduler_.step()}};
    }

    return error_message(id, "unknown message type \"" + type + "\"");
}

void serve_stream(BridgeServer& server, std::istream& in, std::ostream& out) {
    server.begin_connection();
    std::string line;
    while (!server.connection_closed() && std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        out << server.handle(line) << '\n';
        out.flush();
    }
}

void serve_tcp(BridgeServer& server, const std::string& host, std::uint16_t port,
               const std::function<void(std::uint16_t)>& on_listening) {
    const int listener = ::socket(AF_INET, SOCK_STREAM, 0);
    if (listener < 0) throw Error(std::string("socket: ") + std::strerror(errno));
    int one = 1;
    ::setsockopt(listener, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
        ::close(listener);
        throw ConfigError("not an IPv4 address: " + host);
    }
    if (::bind(listener, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) < 0 ||
        ::listen(listener, 1) < 0) {
        const std::string err = std::strerror(errno);
        ::close(listener);
        throw Error("cannot listen on " + host + ":" + std::to_string(port) + ": " + err);
    }
    socklen_t len = sizeof(addr);
    ::getsockname(listener, reinterpret_cast<sockaddr*>(&addr), &len);
    if (on_listening) on_listening(ntohs(addr.sin_port));

    while (!server.finished()) {
        const int fd = ::accept(listener, nullptr, nullptr);
        if (fd < 0) {
            if (errno == EINTR) continue;
            const std::string err = std::strerror(errno);
            ::close(listener);
            throw Error("accept failed: " + err);
        }
        server.begin_connection();
        std::string buffer;
        try {
            while (!server.connection_closed()) {
                auto line = recv_line(fd, buffer);
                if (!line) break;
                if (line->empty()) continue;
                send_all(fd, server.handle(*line) + "\n");
            }
        } catch (const Error&) {
            // Client vanished mid-write; wait for the next connection.
        }
        ::close(fd);
    }
    ::close(listener);
}

Endpoint parse_endpoint(std::string_view text) {
    Endpoint e;
    if (text == "stdio") return e;
    if (text.rfind("tcp:", 0) != 0)
        throw ConfigError("endpoint must be stdio or tcp:<port>: " + std::string(text));
    e.kind = Endpoint::Kind::Tcp;
    std::string rest(text.substr(4));
    const auto colon = rest.rfind(':');
    std::string port = rest;
    if (colon != std::string::npos) {
        e.host = rest.substr(0, colon);
        port = rest.substr(colon + 1);
    }
    try {
        std::size_t used = 0;
        const unsigned long value = std::stoul(port, &used);
        if (used != port.size() || value > 65535) throw std::out_of_range("port");
        e.port = static_cast<std::uint16_t>(value);
    } catch (const std::exception&) {
        throw ConfigError("bad port in endpoint: " + std::string(text));
    }
    return e;
}

TcpChannel::TcpChannel(const std::string& host, std::uint16_t port) {
    addrinfo hints{};
    hints.ai_family = AF_INET;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* res = nullptr;
    const std::string where = host + ":" + std::to_string(port);
    if (::getaddrinfo(host.c_str(), std::to_string(port).c_str(), &hints, &res) != 0 || !res)
        throw Error("cannot resolve " + where);
    fd_ = ::socket(res->ai_family, res->ai_socktype, res->ai_protocol);
    const bool ok = fd_ >= 0 && ::connect(fd_, res->ai_addr, res->ai_addrlen) == 0;
    const std::string err = std::strerror(errno);
    ::freeaddrinfo(res);
    if (!ok) {
        close();
        throw Error("cannot connect to " + where + ": " + err);
    }
}

TcpChannel::~TcpChannel() { close(); }

void TcpChannel::close() {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
}

void TcpChannel::send(std::string_view line) {
    if (fd_ < 0) throw Error("channel closed");
    send_all(fd_, std::string(line) + "\n");
}

std::optional<std::string> TcpChannel::receive() {
    if (fd_ < 0) return std::nullopt;
    return recv_line(fd_, buffer_);
}

void LoopbackChannel::send(std::string_view line) { pending_.push_back(server_.handle(line)); }

std::optional<std::string> LoopbackChannel::receive() {
    if (pending_.empty()) return std::nullopt;
    std::string out = std::move(pending_.front());
    pending_.erase(pending_.begin());
    return out;
}

json BridgeClient::request(json message) {
    message["id"] = next_id_++;
    const std::string line = message.dump();
    transcript_.push_back(line);
    channel_.send(line);
    auto reply = channel_.receive();
    if (!reply) throw ProtocolError("connection closed by server");
    transcript_.push_back(*reply);
    json response = json::parse(*reply);
    if (response.at("type") == "error")
        throw ProtocolError(response.at("message").get<std::string>());
    return response;
}

json BridgeClient::hello(const std::string& corpus_checksum, bool inline_tokens) {
    return request({{"type", "hello"},
                    {"protocol_version", kProtocolVersion},
                    {"corpus_checksum", corpus_checksum},
                    {"inline_tokens", inline_tokens}});
}

std::optional<ClientBatch> BridgeClient::get_batch() {
    const json r = request({{"type", "get_batch"}});
    if (r.at("type") == "end") return std::nullopt;
    ClientBatch b;
    b.step = r.at("step").get<Step>();
    b.block_ids = r.at("block_ids").get<std::vector<BlockId>>();
    b.phase = r.at("phase");
    if (r.contains("tokens")) b.tokens = r.at("tokens").get<std::vector<std::vector<TokenId>>>();
    return b;
}

json BridgeClient::report(const std::vector<ClientRecord>& records) {
    json recs = json::array();
    for (const auto& r : records)
        recs.push_back({{"block_id", r.block_id}, {"step", r.step}, {"mean_nll", r.mean_nll}});
    return request({{"type", "report"}, {"records", std::move(recs)}});
}

void BridgeClient::end() { request({{"type", "end"}}); }

RunSummary drive_learner(BridgeClient& client, Learner& learner, const Corpus& corpus,
                         bool inline_tokens) {
    client.hello(corpus.checksum(), inline_tokens);
    RunSummary summary;
    while (auto batch = client.get_batch()) {
        std::vector<TokenBlock> blocks;
        blocks.reserve(batch->block_ids.size());
        for (std::size_t i = 0; i < batch->block_ids.size(); ++i) {
            if (inline_tokens) {
                if (i >= batch->tokens.size()) throw ProtocolError("batch is missing inline tokens");
                blocks.push_back({batch->block_ids[i], batch->tokens[i]});
            } else {
                blocks.push_back(corpus.block(batch->block_ids[i]));
            }
        }
        const auto nlls = learner.train_on(blocks, batch->step);
        std::vector<ClientRecord> records;
        for (std::size_t i = 0; i < blocks.size(); ++i)
            records.push_back({batch->block_ids[i], batch->step, nlls[i]});
        const auto ack = client.report(records);
        summary.records += ack.value("recorded", std::size_t{0});
        summary.samples += blocks.size();
        ++summary.steps;
    }
    // The server answered get_batch with "end" and has closed the session.
    return summary;
}

}  // namespace lfr
