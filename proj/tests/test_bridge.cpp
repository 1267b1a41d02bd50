#include <doctest.h>

#include <cmath>
#include <fstream>
#include <future>
#include <sstream>
#include <thread>

#include "lfr/bridge.hpp"
#include "lfr/error.hpp"
#include "lfr/runner.hpp"
#include "test_util.hpp"

using namespace lfr;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

SyntheticLearnerConfig learner_config() {
    SyntheticLearnerConfig c;
    c.alpha = 0.3;
    c.beta = 1.0;
    c.sigma = 0.05;
    c.seed = 5;
    return c;
}

SchedulerConfig sched_config(const fs::path& ids_dir) {
    SchedulerConfig c;
    c.schedule = apply_strategy("lfr", {5});
    c.batch_size = 7;
    c.seed = 21;
    c.ids_dir = ids_dir;
    return c;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

json ask(BridgeServer& server, const json& msg) { return json::parse(server.handle(msg.dump())); }

struct Fixture {
    Corpus corpus = placeholder_corpus(60);
    PplLedger ledger{std::optional<std::size_t>(60)};
    SchedulerConfig config;
    Scheduler scheduler;
    BridgeServer server;

    explicit Fixture(SchedulerConfig c = {apply_strategy("lfr", {4}), 3, 6})
        : config(std::move(c)), scheduler(config, corpus.size(), ledger),
          server(scheduler, ledger, corpus) {}

    json hello(std::int64_t id = 1) {
        return ask(server, {{"id", id}, {"type", "hello"}, {"protocol_version", kProtocolVersion},
                            {"corpus_checksum", corpus.checksum()}});
    }
};

}  // namespace

TEST_CASE("happy path over loopback") {
    Fixture f;
    const auto hi = f.hello();
    CHECK(hi["type"] == "phase_info");
    CHECK(hi["id"] == 1);
    CHECK(hi["phase"]["kind"] == "learn");

    const auto batch = ask(f.server, {{"id", 2}, {"type", "get_batch"}});
    CHECK(batch["type"] == "batch");
    CHECK(batch["step"] == 0);
    CHECK(batch["block_ids"].size() == 6);

    json records = json::array();
    for (const auto& b : batch["block_ids"])
        records.push_back({{"block_id", b}, {"step", 0}, {"mean_nll", std::log(2.0)}});
    const auto ack = ask(f.server, {{"id", 3}, {"type", "report"}, {"records", records}});
    CHECK(ack["type"] == "phase_info");
    CHECK(ack["recorded"] == 6);
    CHECK(ack["id"] == 3);
    for (const auto& r : f.ledger.records()) CHECK(std::abs(r.ppl - 2.0) <= 1e-12);

    const auto bye = ask(f.server, {{"id", 4}, {"type", "end"}});
    CHECK(bye["type"] == "end");
    CHECK(f.server.connection_closed());
    CHECK_FALSE(f.server.finished());
}

TEST_CASE("hello failures close the connection") {
    Fixture f;
    SUBCASE("checksum mismatch") {
        const auto r = ask(f.server, {{"id", 1}, {"type", "hello"}, {"protocol_version", kProtocolVersion},
                                      {"corpus_checksum", "0000"}});
        CHECK(r["type"] == "error");
        CHECK(r["message"].get<std::string>().find("checksum") != std::string::npos);
        CHECK(f.server.connection_closed());
    }
    SUBCASE("protocol version") {
        const auto r = ask(f.server, {{"id", 1}, {"type", "hello"}, {"protocol_version", 99},
                                      {"corpus_checksum", f.corpus.checksum()}});
        CHECK(r["type"] == "error");
        CHECK(f.server.connection_closed());
    }
    SUBCASE("serve_stream stops after the fatal error") {
        std::istringstream in(json({{"id", 1}, {"type", "hello"}, {"protocol_version", 1},
                                    {"corpus_checksum", "bad"}}).dump() +
                              "\n" + json({{"id", 2}, {"type", "get_batch"}}).dump() + "\n");
        std::ostringstream out;
        serve_stream(f.server, in, out);
        std::istringstream lines(out.str());
        std::string line;
        int n = 0;
        while (std::getline(lines, line)) ++n;
        CHECK(n == 1);
    }
}

TEST_CASE("malformed messages get an error and the session continues") {
    Fixture f;
    f.hello();
    const auto bad = json::parse(f.server.handle("{not json"));
    CHECK(bad["type"] == "error");
    CHECK(bad["message"].get<std::string>().find("malformed") != std::string::npos);
    CHECK(ask(f.server, {{"id", 2}, {"type", "fly"}})["type"] == "error");
    CHECK(ask(f.server, {{"id", 3}, {"type", "report"}})["type"] == "error");  // no records
    CHECK(ask(f.server, {{"type", "get_batch"}})["type"] == "error");           // no id
    CHECK_FALSE(f.server.connection_closed());
    CHECK(ask(f.server, {{"id", 4}, {"type", "get_batch"}})["type"] == "batch");
}

TEST_CASE("requests before hello are refused") {
    Fixture f;
    const auto r = ask(f.server, {{"id", 1}, {"type", "get_batch"}});
    CHECK(r["type"] == "error");
    CHECK(f.scheduler.step() == 0);
}

TEST_CASE("message ids must increase") {
    Fixture f;
    f.hello(5);
    const auto r = ask(f.server, {{"id", 5}, {"type", "get_batch"}});
    CHECK(r["type"] == "error");
    CHECK(r["id"] == 5);
    CHECK(ask(f.server, {{"id", 4}, {"type", "get_batch"}})["type"] == "error");
    CHECK(ask(f.server, {{"id", 6}, {"type", "get_batch"}})["type"] == "batch");
}

TEST_CASE("a bad report leaves the ledger unchanged") {
    Fixture f;
    f.hello();
    const auto b0 = ask(f.server, {{"id", 2}, {"type", "get_batch"}});
    const auto b1 = ask(f.server, {{"id", 3}, {"type", "get_batch"}});
    const BlockId first = b1["block_ids"][0];
    CHECK(ask(f.server, {{"id", 4}, {"type", "report"},
                         {"records", {{{"block_id", first}, {"step", 1}, {"mean_nll", 1.0}}}}})["type"] ==
          "phase_info");
    const auto before = f.ledger.records();

    SUBCASE("step regression") {
        // Second record goes back in time for `first`; the whole report is refused.
        const BlockId other = b0["block_ids"][0];
        const auto r = ask(f.server, {{"id", 5}, {"type", "report"},
                                      {"records", {{{"block_id", other}, {"step", 0}, {"mean_nll", 1.0}},
                                                   {{"block_id", first}, {"step", 0}, {"mean_nll", 1.0}}}}});
        CHECK(r["type"] == "error");
        const auto msg = r["message"].get<std::string>();
        CHECK(msg.find("unchanged") != std::string::npos);
        CHECK(msg.find("block " + std::to_string(first)) != std::string::npos);
    }
    SUBCASE("step not yet issued") {
        const auto r = ask(f.server, {{"id", 5}, {"type", "report"},
                                      {"records", {{{"block_id", 0}, {"step", 99}, {"mean_nll", 1.0}}}}});
        CHECK(r["type"] == "error");
    }
    SUBCASE("unknown block") {
        const auto r = ask(f.server, {{"id", 5}, {"type", "report"},
                                      {"records", {{{"block_id", 60}, {"step", 0}, {"mean_nll", 1.0}}}}});
        CHECK(r["type"] == "error");
    }
    SUBCASE("duplicate report") {
        const auto r = ask(f.server, {{"id", 5}, {"type", "report"},
                                      {"records", {{{"block_id", first}, {"step", 1}, {"mean_nll", 1.0}}}}});
        CHECK(r["type"] == "error");
    }
    CHECK(f.ledger.records() == before);
    CHECK_FALSE(f.server.connection_closed());
}

TEST_CASE("bridge run matches the in-process run byte for byte") {
    TempDir dir("bridge");
    const Corpus corpus = placeholder_corpus(200);

    {
        PplLedger ledger(dir / "inproc.bin", corpus.size());
        Scheduler sched(sched_config(dir / "inproc_ids"), corpus.size(), ledger);
        SyntheticLearner learner(learner_config(), corpus.size(), corpus.context_length());
        run_training(sched, learner, corpus, ledger);
    }

    SUBCASE("loopback") {
        {
            PplLedger ledger(dir / "bridge.bin", corpus.size());
            Scheduler sched(sched_config(dir / "bridge_ids"), corpus.size(), ledger);
            BridgeServer server(sched, ledger, corpus);
            LoopbackChannel channel(server);
            BridgeClient client(channel);
            SyntheticLearner learner(learner_config(), corpus.size(), corpus.context_length());
            const auto summary = drive_learner(client, learner, corpus);
            CHECK(server.finished());
            CHECK(summary.records == ledger.size());
        }
        CHECK(slurp(dir / "bridge.bin") == slurp(dir / "inproc.bin"));
    }
    SUBCASE("tcp") {
        {
            PplLedger ledger(dir / "bridge.bin", corpus.size());
            Scheduler sched(sched_config(dir / "bridge_ids"), corpus.size(), ledger);
            BridgeServer server(sched, ledger, corpus);
            std::promise<std::uint16_t> port;
            std::thread serving([&] { serve_tcp(server, "127.0.0.1", 0, [&](std::uint16_t p) { port.set_value(p); }); });
            {
                TcpChannel channel("127.0.0.1", port.get_future().get());
                BridgeClient client(channel);
                SyntheticLearner learner(learner_config(), corpus.size(), corpus.context_length());
                drive_learner(client, learner, corpus);
            }
            serving.join();
            CHECK(server.finished());
        }
        CHECK(slurp(dir / "bridge.bin") == slurp(dir / "inproc.bin"));
    }
    for (const auto* name : {"dropped_phase2.ids", "retained_phase2.ids", "dropped_phase4.ids",
                             "retained_phase4.ids"}) {
        REQUIRE(fs::exists(dir / "inproc_ids" / name));
        CHECK(slurp(dir / "bridge_ids" / name) == slurp(dir / "inproc_ids" / name));
    }
}

TEST_CASE("inline tokens carry the block contents") {
    std::vector<TokenId> tokens(40);
    for (std::size_t i = 0; i < tokens.size(); ++i) tokens[i] = static_cast<TokenId>(i % 13);
    const Corpus corpus = Corpus::from_tokens(tokens, 4, 13);
    PplLedger ledger(corpus.size());
    SchedulerConfig cfg{apply_strategy("random", {1}), 0, 3};
    Scheduler sched(cfg, corpus.size(), ledger);
    BridgeServer server(sched, ledger, corpus);
    LoopbackChannel channel(server);
    BridgeClient client(channel);
    client.hello(corpus.checksum(), true);
    while (auto b = client.get_batch()) {
        REQUIRE(b->tokens.size() == b->block_ids.size());
        for (std::size_t i = 0; i < b->block_ids.size(); ++i) {
            const auto blk = corpus.block(b->block_ids[i]);
            CHECK(b->tokens[i] == std::vector<TokenId>(blk.tokens.begin(), blk.tokens.end()));
        }
    }
}

TEST_CASE("reconnecting resumes without duplicates") {
    TempDir dir("resume");
    const Corpus corpus = placeholder_corpus(50);
    SchedulerConfig cfg = sched_config(dir / "ids");
    cfg.batch_size = 4;

    // Reference: one uninterrupted session.
    {
        PplLedger ledger(dir / "ref.bin", corpus.size());
        cfg.ids_dir = dir / "ref_ids";
        Scheduler sched(cfg, corpus.size(), ledger);
        BridgeServer server(sched, ledger, corpus);
        LoopbackChannel ch(server);
        BridgeClient client(ch);
        SyntheticLearner learner(learner_config(), corpus.size(), corpus.context_length());
        drive_learner(client, learner, corpus);
    }

    SUBCASE("same server process, new connection") {
        cfg.ids_dir = dir / "ids";
        PplLedger ledger(dir / "run.bin", corpus.size());
        Scheduler sched(cfg, corpus.size(), ledger);
        BridgeServer server(sched, ledger, corpus);
        SyntheticLearner learner(learner_config(), corpus.size(), corpus.context_length());
        {
            LoopbackChannel ch(server);
            BridgeClient client(ch);
            client.hello(corpus.checksum());
            for (int i = 0; i < 9; ++i) {
                auto b = client.get_batch();
                std::vector<TokenBlock> blocks;
                for (BlockId id : b->block_ids) blocks.push_back(corpus.block(id));
                const auto nll = learner.train_on(blocks, b->step);
                std::vector<ClientRecord> recs;
                for (std::size_t k = 0; k < blocks.size(); ++k) recs.push_back({b->block_ids[k], b->step, nll[k]});
                client.report(recs);
                if (i == 8) {
                    // Lost ack: the client retries on the next connection.
                    server.begin_connection();
                    LoopbackChannel ch2(server);
                    BridgeClient retry(ch2);
                    retry.hello(corpus.checksum());
                    CHECK_THROWS_AS(retry.report(recs), ProtocolError);
                }
            }
        }
        server.begin_connection();
        LoopbackChannel ch(server);
        BridgeClient client(ch);
        drive_learner(client, learner, corpus);
        ledger.flush();
        CHECK(ledger.records() == PplLedger::read_file(dir / "ref.bin"));
    }

    SUBCASE("server restart from persisted state") {
        cfg.ids_dir = dir / "ids";
        SyntheticLearner learner(learner_config(), corpus.size(), corpus.context_length());
        const auto state_path = dir / "state.json";
        {
            PplLedger ledger(dir / "run.bin", corpus.size());
            Scheduler sched(cfg, corpus.size(), ledger);
            BridgeServer server(sched, ledger, corpus, {state_path, std::nullopt});
            LoopbackChannel ch(server);
            BridgeClient client(ch);
            client.hello(corpus.checksum());
            for (int i = 0; i < 20; ++i) {
                auto b = client.get_batch();
                std::vector<TokenBlock> blocks;
                for (BlockId id : b->block_ids) blocks.push_back(corpus.block(id));
                const auto nll = learner.train_on(blocks, b->step);
                std::vector<ClientRecord> recs;
                for (std::size_t k = 0; k < blocks.size(); ++k) recs.push_back({b->block_ids[k], b->step, nll[k]});
                client.report(recs);
            }
            // Server process dies here without an "end".
        }
        {
            PplLedger ledger(dir / "run.bin", corpus.size());
            Scheduler sched(cfg, corpus.size(), ledger);
            std::ifstream in(state_path);
            sched.restore_state(json::parse(in));
            BridgeServer server(sched, ledger, corpus, {state_path, std::nullopt});
            LoopbackChannel ch(server);
            BridgeClient client(ch);
            drive_learner(client, learner, corpus);
        }
        CHECK(slurp(dir / "run.bin") == slurp(dir / "ref.bin"));
    }
}

TEST_CASE("stdio transport with a transcript") {
    TempDir dir("stdio");
    Fixture f;
    BridgeServer server(f.scheduler, f.ledger, f.corpus, {std::nullopt, dir / "t.log"});
    std::string input;
    input += json({{"id", 1}, {"type", "hello"}, {"protocol_version", 1}, {"corpus_checksum", f.corpus.checksum()}}).dump() + "\n";
    input += "\n";
    input += json({{"id", 2}, {"type", "get_batch"}}).dump() + "\r\n";
    input += json({{"id", 3}, {"type", "end"}}).dump() + "\n";
    input += json({{"id", 4}, {"type", "get_batch"}}).dump() + "\n";
    std::istringstream in(input);
    std::ostringstream out;
    serve_stream(server, in, out);
    std::istringstream lines(out.str());
    std::vector<json> replies;
    for (std::string line; std::getline(lines, line);) replies.push_back(json::parse(line));
    REQUIRE(replies.size() == 3);
    CHECK(replies[0]["type"] == "phase_info");
    CHECK(replies[1]["type"] == "batch");
    CHECK(replies[2]["type"] == "end");

    std::ifstream log(dir / "t.log");
    std::size_t n = 0;
    for (std::string line; std::getline(log, line);) {
        CHECK((line.rfind("> ", 0) == 0 || line.rfind("< ", 0) == 0));
        ++n;
    }
    CHECK(n == 6);
}

TEST_CASE("endpoint parsing") {
    CHECK(parse_endpoint("stdio").kind == Endpoint::Kind::Stdio);
    const auto a = parse_endpoint("tcp:5555");
    CHECK(a.kind == Endpoint::Kind::Tcp);
    CHECK(a.host == "127.0.0.1");
    CHECK(a.port == 5555);
    const auto b = parse_endpoint("tcp:0.0.0.0:80");
    CHECK(b.host == "0.0.0.0");
    CHECK(b.port == 80);
    CHECK_THROWS_AS(parse_endpoint("udp:1"), ConfigError);
    CHECK_THROWS_AS(parse_endpoint("tcp:70000"), ConfigError);
    CHECK_THROWS_AS(parse_endpoint("tcp:x"), ConfigError);
}

TEST_CASE("client surfaces server errors") {
    Fixture f;
    LoopbackChannel ch(f.server);
    BridgeClient client(ch);
    CHECK_THROWS_AS(client.hello("wrong"), ProtocolError);
    REQUIRE(client.transcript().size() == 2);
    CHECK(json::parse(client.transcript()[1])["type"] == "error");
}
