#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "lfr/corpus.hpp"
#include "lfr/learner.hpp"
#include "lfr/ledger.hpp"
#include "lfr/runner.hpp"
#include "lfr/scheduler.hpp"

namespace lfr {

inline constexpr std::uint32_t kProtocolVersion = 1;

// Newline-delimited JSON, one message per line. Requests carry a client
// "id" that must strictly increase within a connection; the response echoes
// it.
//
//   hello      {protocol_version, corpus_checksum, inline_tokens?} -> phase_info
//   get_batch  {}                                                  -> batch | end
//   report     {records: [{block_id, step, mean_nll}]}             -> phase_info
//   end        {}                                                  -> end
//
// Any failure answers "error" with a message; checksum and version
// mismatches also close the connection.
struct BridgeOptions {
    std::optional<std::filesystem::path> state_path;  // scheduler state, rewritten per batch
    std::optional<std::filesystem::path> transcript;  // appended request/response log
};

class BridgeServer {
public:
    BridgeServer(Scheduler& scheduler, PplLedger& ledger, const Corpus& corpus,
                 BridgeOptions options = {});

    // Resets per-connection state (hello, message ids). The scheduler and
    // ledger carry over, which is what makes reconnecting resume.
    void begin_connection();

    // Handles one request line and returns the response line (no newline).
    std::string handle(std::string_view line);

    bool connection_closed() const { return closed_; }
    bool finished() const { return finished_; }

private:
    nlohmann::json dispatch(const nlohmann::json& request);
    nlohmann::json phase_json() const;
    void persist_state() const;
    void log(std::string_view direction, std::string_view line);

    Scheduler& scheduler_;
    PplLedger& ledger_;
    const Corpus& corpus_;
    BridgeOptions options_;
    std::optional<std::ofstream> transcript_;

    bool greeted_ = false;
    bool inline_tokens_ = false;
    bool closed_ = false;
    bool finished_ = false;
    std::optional<std::int64_t> last_id_;
};

// Serves one connection over a pair of streams until "end", a fatal error
// or EOF.
void serve_stream(BridgeServer& server, std::istream& in, std::ostream& out);

// Listens on host:port and serves connections one after another until the
// schedule is finished. `on_listening` receives the bound port (useful with
// port 0).
void serve_tcp(BridgeServer& server, const std::string& host, std::uint16_t port,
               const std::function<void(std::uint16_t)>& on_listening = {});

struct Endpoint {
    enum class Kind { Stdio, Tcp } kind = Kind::Stdio;
    std::string host = "127.0.0.1";
    std::uint16_t port = 0;
};

// "stdio", "tcp:<port>" or "tcp:<host>:<port>".
Endpoint parse_endpoint(std::string_view text);

// Line transport used by BridgeClient.
class LineChannel {
public:
    virtual ~LineChannel() = default;
    virtual void send(std::string_view line) = 0;
    virtual std::optional<std::string> receive() = 0;
};

class TcpChannel final : public LineChannel {
public:
    TcpChannel(const std::string& host, std::uint16_t port);
    ~TcpChannel() override;
    TcpChannel(const TcpChannel&) = delete;
    TcpChannel& operator=(const TcpChannel&) = delete;

    void send(std::string_view line) override;
    std::optional<std::string> receive() override;
    void close();

private:
    int fd_ = -1;
    std::string buffer_;
};

// Calls BridgeServer::handle directly; the in-process "transport".
class LoopbackChannel final : public LineChannel {
public:
    explicit LoopbackChannel(BridgeServer& server) : server_(server) {}
    void send(std::string_view line) override;
    std::optional<std::string> receive() override;

private:
    BridgeServer& server_;
    std::vector<std::string> pending_;
};

struct ClientBatch {
    Step step = 0;
    std::vector<BlockId> block_ids;
    nlohmann::json phase;
    std::vector<std::vector<TokenId>> tokens;  // inline_tokens mode only
};

struct ClientRecord {
    BlockId block_id = 0;
    Step step = 0;
    double mean_nll = 0.0;
};

// Reference client for the wire protocol. Protocol errors surface as
// ProtocolError carrying the server's message.
class BridgeClient {
public:
    explicit BridgeClient(LineChannel& channel) : channel_(channel) {}

    nlohmann::json hello(const std::string& corpus_checksum, bool inline_tokens = false);
    std::optional<ClientBatch> get_batch();  // nullopt on "end"
    nlohmann::json report(const std::vector<ClientRecord>& records);
    void end();

    // Every raw line sent and received, in order.
    const std::vector<std::string>& transcript() const { return transcript_; }

private:
    nlohmann::json request(nlohmann::json message);

    LineChannel& channel_;
    std::int64_t next_id_ = 1;
    std::vector<std::string> transcript_;
};

// Runs a learner against a bridge server until the schedule ends: hello,
// then get_batch / train / report per step until get_batch answers "end". Block contents come
// from `corpus`, or from the batch itself with inline_tokens.
RunSummary drive_learner(BridgeClient& client, Learner& learner, const Corpus& corpus,
                         bool inline_tokens = false);

}  // namespace lfr
