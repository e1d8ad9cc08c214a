#include "phub/harness.hpp"

#include <fcntl.h>
#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cfloat>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <thread>

#include "phub/error.hpp"

extern char** environ;

namespace phub {

// CSV

namespace {

std::string format_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

std::optional<double> parse_optional_double(const std::string& field) {
  if (field.empty()) return std::nullopt;
  return std::stod(field);
}

std::uint64_t parse_u64(const std::string& field) { return std::stoull(field); }

}  // namespace

std::string format_csv(const MetricsReport& report) {
  std::string out = kMetricsHeader;
  out += '\n';
  for (const auto& r : report.rows) {
    out += std::to_string(r.iteration) + ',';
    out += (r.wall_ms ? format_number(*r.wall_ms) : "") + ',';
    out += std::to_string(r.push_bytes) + ',' + std::to_string(r.bcast_bytes) + ',' + std::to_string(r.header_bytes) +
           ',' + std::to_string(r.chunks_completed) + ',' + std::to_string(r.max_core_load) + ',' +
           std::to_string(r.min_core_load) + ',';
    out += r.loss ? format_number(*r.loss) : "";
    out += '\n';
  }
  return out;
}

MetricsReport parse_csv(std::string_view text) {
  MetricsReport report;
  bool header = true;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    const std::string line(text.substr(0, nl));
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    if (header) {
      if (line != kMetricsHeader) throw Error(ErrorCode::kIo, "unexpected metrics header: " + line);
      header = false;
      continue;
    }
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::string cur;
    for (char c : line) {
      if (c == ',') {
        f.push_back(cur);
        cur.clear();
      } else {
        cur += c;
      }
    }
    f.push_back(cur);
    if (f.size() != 9) throw Error(ErrorCode::kIo, "metrics row needs 9 fields: " + line);
    try {
      MetricsRow r;
      r.iteration = static_cast<std::uint32_t>(parse_u64(f[0]));
      r.wall_ms = parse_optional_double(f[1]);
      r.push_bytes = parse_u64(f[2]);
      r.bcast_bytes = parse_u64(f[3]);
      r.header_bytes = parse_u64(f[4]);
      r.chunks_completed = parse_u64(f[5]);
      r.max_core_load = parse_u64(f[6]);
      r.min_core_load = parse_u64(f[7]);
      r.loss = parse_optional_double(f[8]);
      report.rows.push_back(r);
    } catch (const std::logic_error&) {
      throw Error(ErrorCode::kIo, "malformed metrics row: " + line);
    }
  }
  if (header) throw Error(ErrorCode::kIo, "metrics file has no header");
  return report;
}

void emit_csv(const MetricsReport& report, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path);
  out << format_csv(report);
  if (!out) throw Error(ErrorCode::kIo, "write failed: " + path);
}

MetricsReport load_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot read " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_csv(ss.str());
}

MetricsReport server_report(const ServerMetrics& metrics) {
  MetricsReport report;
  std::uint64_t max_load = 0;
  std::uint64_t min_load = metrics.core_loads.empty() ? 0 : UINT64_MAX;
  for (const auto& l : metrics.core_loads) {
    max_load = std::max(max_load, l.byte_load);
    min_load = std::min(min_load, l.byte_load);
  }
  for (std::size_t t = 0; t < metrics.iterations.size(); ++t) {
    const auto& c = metrics.iterations[t];
    MetricsRow r;
    r.iteration = static_cast<std::uint32_t>(t);
    r.push_bytes = c.push_payload_bytes;
    r.bcast_bytes = c.bcast_payload_bytes;
    r.header_bytes = c.header_bytes;
    r.chunks_completed = c.chunks_completed;
    r.max_core_load = max_load;
    r.min_core_load = min_load;
    report.rows.push_back(r);
  }
  return report;
}

namespace {

// Sums counters per iteration; core loads are taken across all servers.
MetricsReport merge_server_reports(const std::vector<MetricsReport>& reports) {
  MetricsReport merged;
  bool first = true;
  for (const auto& rep : reports) {
    if (merged.rows.size() < rep.rows.size()) merged.rows.resize(rep.rows.size());
    for (std::size_t t = 0; t < rep.rows.size(); ++t) {
      auto& m = merged.rows[t];
      const auto& r = rep.rows[t];
      m.iteration = static_cast<std::uint32_t>(t);
      m.push_bytes += r.push_bytes;
      m.bcast_bytes += r.bcast_bytes;
      m.header_bytes += r.header_bytes;
      m.chunks_completed += r.chunks_completed;
      m.max_core_load = first ? r.max_core_load : std::max(m.max_core_load, r.max_core_load);
      m.min_core_load = first ? r.min_core_load : std::min(m.min_core_load, r.min_core_load);
    }
    if (!rep.rows.empty()) first = false;
  }
  return merged;
}

}  // namespace

CheckResult byte_accounting_check(const MetricsReport& report, std::uint64_t model_bytes,
                                  std::uint32_t worker_count) {
  CheckResult c{"byte-accounting", true, ""};
  const std::uint64_t expected = model_bytes * worker_count;
  std::uint64_t payload = 0;
  std::uint64_t headers = 0;
  for (const auto& r : report.rows) {
    payload += r.push_bytes + r.bcast_bytes;
    headers += r.header_bytes;
    if (r.push_bytes != expected || r.bcast_bytes != expected) {
      c.passed = false;
      c.detail = "iteration " + std::to_string(r.iteration) + ": push " + std::to_string(r.push_bytes) + ", bcast " +
                 std::to_string(r.bcast_bytes) + ", expected " + std::to_string(expected) + " each";
      return c;
    }
  }
  c.detail = std::to_string(report.rows.size()) + " iterations x " + std::to_string(expected) +
             " bytes each way; header ratio " +
             format_number(payload == 0 ? 0.0 : static_cast<double>(headers) / static_cast<double>(payload));
  return c;
}

double header_overhead_ratio(std::uint64_t chunk_bytes) {
  return static_cast<double>(kHeaderBytes) / static_cast<double>(kHeaderBytes + chunk_bytes);
}

// Experiment configuration

ExperimentConfig parse_experiment(const KeyValueConfig& kv) {
  ExperimentConfig c;
  c.deployment = parse_deployment(kv.get_or("server", "deploy", "central"));
  c.endpoints = static_cast<std::uint32_t>(kv.get_uint("server", "endpoints", c.endpoints));
  c.cores = static_cast<std::uint32_t>(kv.get_uint("server", "cores", c.cores));
  c.groups = static_cast<std::uint32_t>(kv.get_uint("server", "groups", c.groups));
  c.chunk_bytes = kv.get_uint("server", "chunk-bytes", c.chunk_bytes);
  c.agg_mode = parse_aggregation_mode(kv.get_or("server", "agg-mode", "fast"));
  c.optimizer.learning_rate = static_cast<float>(kv.get_double("server", "lr", c.optimizer.learning_rate));
  c.optimizer.average_gradients = kv.get_bool("server", "average", true);
  c.shard_count = static_cast<std::uint32_t>(kv.get_uint("server", "shard-count", c.shard_count));
  c.iterations = static_cast<std::uint32_t>(kv.get_uint("server", "iters", c.iterations));
  c.transport = kv.get_or("server", "transport", c.transport);
  const auto launch = kv.get_or("server", "launch", "inprocess");
  if (launch == "inprocess") {
    c.launch = Launch::kInProcess;
  } else if (launch == "subprocess") {
    c.launch = Launch::kSubprocess;
  } else {
    throw Error(ErrorCode::kInvalidConfig, "unknown launch '" + launch + "'");
  }
  c.binary = kv.get_or("server", "binary", "");
  c.base_port = static_cast<std::uint32_t>(kv.get_uint("server", "base-port", c.base_port));
  c.single_thread = kv.get_bool("server", "single-thread", false);

  c.workers = static_cast<std::uint32_t>(kv.get_uint("workers", "count", c.workers));
  c.mode = parse_worker_mode(kv.get_or("workers", "mode", "logreg"));
  c.seed = kv.get_uint("workers", "seed", c.seed);
  c.samples = kv.get_uint("workers", "samples", c.samples);
  c.dim = kv.get_uint("workers", "dim", c.dim);
  c.model_bytes = kv.get_uint("workers", "model-bytes", c.model_bytes);
  c.key_count = static_cast<std::uint32_t>(kv.get_uint("workers", "keys", c.key_count));

  if (kv.has_section("switch")) {
    SwitchExperiment s;
    s.racks = static_cast<std::uint32_t>(kv.get_uint("switch", "racks", s.racks));
    s.workers_per_rack = static_cast<std::uint32_t>(kv.get_uint("switch", "workers-per-rack", s.workers_per_rack));
    s.model_bytes = kv.get_uint("switch", "model-bytes", s.model_bytes);
    s.chunk_bytes = kv.get_uint("switch", "chunk-bytes", s.chunk_bytes);
    s.model.scale = kv.get_uint("switch", "scale", s.model.scale);
    s.model.region_bytes = static_cast<std::uint32_t>(kv.get_uint("switch", "region-bytes", s.model.region_bytes));
    s.model.accumulator_width = static_cast<std::uint32_t>(kv.get_uint("switch", "acc-width", 32));
    s.model.storage_slots = static_cast<std::uint32_t>(kv.get_uint("switch", "storage-slots", s.model.storage_slots));
    s.seed = kv.get_uint("switch", "seed", s.seed);
    c.switch_experiment = s;
  }
  return c;
}

ExperimentConfig load_experiment(const std::string& path) { return parse_experiment(KeyValueConfig::load(path)); }

ModelSpec experiment_model_spec(const ExperimentConfig& cfg) {
  if (cfg.mode == WorkerMode::kLogReg) return logreg_model_spec(cfg.dim);
  if (cfg.model_bytes == 0 || cfg.model_bytes % kElementWidth != 0) {
    throw Error(ErrorCode::kInvalidConfig, "model-bytes must be a positive multiple of 4");
  }
  return build_model_spec(split_evenly(cfg.model_bytes / kElementWidth, cfg.key_count));
}

namespace {

std::uint64_t effective_chunk_bytes(const ExperimentConfig& cfg, const ModelSpec& spec) {
  if (cfg.chunk_bytes != 0) return cfg.chunk_bytes;
  std::uint64_t largest = 0;
  for (const auto& k : spec.keys) largest = std::max(largest, k.byte_size());
  return largest;
}

std::uint32_t server_count(const ExperimentConfig& cfg) {
  return cfg.deployment == Deployment::kShardMember ? cfg.shard_count : 1;
}

}  // namespace

ServerConfig experiment_server_config(const ExperimentConfig& cfg, std::uint32_t shard) {
  const ModelSpec spec = experiment_model_spec(cfg);
  ServerConfig s;
  s.listen.clear();
  for (std::uint32_t e = 0; e < cfg.endpoints; ++e) {
    if (cfg.launch == Launch::kSubprocess) {
      s.listen.push_back("127.0.0.1:" + std::to_string(cfg.base_port + shard * cfg.endpoints + e));
    } else if (cfg.transport == "tcp") {
      s.listen.push_back("127.0.0.1:0");
    } else {
      s.listen.push_back("inproc:s" + std::to_string(shard) + "e" + std::to_string(e));
    }
  }
  s.core_count = cfg.cores;
  s.group_count = cfg.groups;
  s.chunk_bytes = effective_chunk_bytes(cfg, spec);
  s.worker_count = cfg.workers;
  s.optimizer = cfg.optimizer;
  s.mode = cfg.agg_mode;
  s.deployment = cfg.deployment;
  if (cfg.deployment == Deployment::kShardMember) {
    s.shard_index = shard;
    s.shard_count = cfg.shard_count;
  }
  s.iterations = cfg.iterations;
  s.single_thread = cfg.single_thread;
  return s;
}

bool ExperimentResult::passed() const {
  return std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.passed; });
}

// Oracle trainer

OracleRun train_single_process(std::uint64_t seed, std::size_t samples, std::size_t dim, std::uint32_t workers,
                               float learning_rate, std::uint32_t iterations) {
  const auto data = synthetic_dataset(seed, samples, dim);
  OracleRun run;
  run.weights.assign(dim, 0.0f);
  run.losses.push_back(logistic_loss(run.weights, view(data)));
  for (std::uint32_t t = 0; t < iterations; ++t) {
    std::vector<float> sum = logreg_gradient(run.weights, worker_slice(data, 0, workers));
    for (std::uint32_t w = 1; w < workers; ++w) {
      const auto g = logreg_gradient(run.weights, worker_slice(data, w, workers));
      for (std::size_t j = 0; j < dim; ++j) sum[j] += g[j];
    }
    const auto n = static_cast<float>(workers);
    for (std::size_t j = 0; j < dim; ++j) run.weights[j] = run.weights[j] - learning_rate * (sum[j] / n);
    run.losses.push_back(logistic_loss(run.weights, view(data)));
  }
  return run;
}

// Experiment drivers

namespace {

WorkerConfig worker_config(const ExperimentConfig& cfg, const ModelSpec& spec, std::uint32_t id,
                           std::vector<std::string> connect) {
  WorkerConfig w;
  w.worker_id = id;
  w.worker_count = cfg.workers;
  w.connect = std::move(connect);
  w.mode = cfg.mode;
  w.iterations = cfg.iterations;
  w.seed = cfg.seed;
  w.samples = cfg.samples;
  w.dim = cfg.dim;
  w.spec = spec;
  w.track_loss = id == 0 && cfg.mode == WorkerMode::kLogReg;
  return w;
}

// Key ownership per server, for assembling the final model.
std::vector<std::uint32_t> key_owner(const ExperimentConfig& cfg, const ModelSpec& spec) {
  std::vector<std::uint32_t> owner(spec.keys.size(), 0);
  if (cfg.deployment == Deployment::kShardMember) {
    const auto shards = shard_keyspace(spec, cfg.shard_count);
    for (std::uint32_t s = 0; s < shards.size(); ++s) {
      for (auto k : shards[s]) owner[k] = s;
    }
  }
  return owner;
}

std::vector<float> assemble_model(const ModelSpec& spec, const std::vector<std::uint32_t>& owner,
                                  const std::vector<std::vector<float>>& server_models) {
  std::vector<float> flat;
  std::uint64_t off = 0;
  for (const auto& k : spec.keys) {
    const auto& src = server_models.at(owner[k.key_id]);
    flat.insert(flat.end(), src.begin() + static_cast<std::ptrdiff_t>(off),
                src.begin() + static_cast<std::ptrdiff_t>(off + k.element_count));
    off += k.element_count;
  }
  return flat;
}

void fill_rows_from_workers(const ExperimentConfig& cfg, ExperimentResult& r, bool timed) {
  for (auto& row : r.report.rows) {
    const auto& c0 = r.worker_counters.front();
    if (timed && row.iteration < c0.size()) row.wall_ms = c0[row.iteration].wall_ms;
    if (cfg.mode == WorkerMode::kLogReg && row.iteration + 1 < r.losses.size()) row.loss = r.losses[row.iteration + 1];
  }
}

ExperimentResult run_single_thread(const ExperimentConfig& cfg, const ModelSpec& spec) {
  if (cfg.transport != "inproc") throw Error(ErrorCode::kInvalidConfig, "single-thread mode needs inproc transport");
  const std::uint32_t servers_n = server_count(cfg);

  std::vector<std::unique_ptr<ParameterServer>> servers;
  for (std::uint32_t s = 0; s < servers_n; ++s) {
    servers.push_back(std::make_unique<ParameterServer>(spec, experiment_server_config(cfg, s)));
  }

  struct Link {
    std::unique_ptr<Connection> server_end;
    std::unique_ptr<Connection> worker_end;
    FrameReader server_frames;
    FrameReader worker_frames;
    std::uint32_t server;
    std::uint32_t endpoint;
  };
  std::vector<std::vector<std::unique_ptr<Link>>> worker_links(cfg.workers);
  std::vector<std::vector<Link*>> server_links(servers_n);
  std::vector<std::string> names;
  for (std::uint32_t s = 0; s < servers_n; ++s) {
    for (const auto& a : servers[s]->config().listen) names.push_back(a);
  }
  std::vector<WorkerClient> workers;
  for (std::uint32_t w = 0; w < cfg.workers; ++w) {
    for (std::uint32_t s = 0; s < servers_n; ++s) {
      for (std::uint32_t e = 0; e < cfg.endpoints; ++e) {
        auto [client, server] = make_channel_pair();
        auto link = std::make_unique<Link>();
        link->worker_end = std::move(client);
        link->server_end = std::move(server);
        link->server = s;
        link->endpoint = e;
        server_links[s].push_back(link.get());
        worker_links[w].push_back(std::move(link));
      }
    }
    workers.emplace_back(worker_config(cfg, spec, w, names));
  }

  auto send_worker = [&](std::uint32_t w, std::vector<WorkerOutbound>& out) {
    for (auto& o : out) worker_links[w][o.conn]->worker_end->send(encode_message(o.message));
  };
  for (std::uint32_t w = 0; w < cfg.workers; ++w) {
    auto out = workers[w].start();
    send_worker(w, out);
  }

  auto all_done = [&] {
    for (const auto& w : workers) {
      if (!w.done()) return false;
    }
    for (const auto& s : servers) {
      if (!s->finished()) return false;
    }
    return true;
  };
  auto failure = [&]() -> std::string {
    for (std::uint32_t s = 0; s < servers_n; ++s) {
      if (servers[s]->failed()) return "server " + std::to_string(s) + ": " + servers[s]->failure();
    }
    for (std::uint32_t w = 0; w < cfg.workers; ++w) {
      if (workers[w].failed()) return "worker " + std::to_string(w) + ": " + workers[w].failure();
    }
    return {};
  };

  Bytes buf;
  while (!all_done()) {
    bool progress = false;
    for (std::uint32_t s = 0; s < servers_n; ++s) {
      for (ConnId id = 0; id < server_links[s].size(); ++id) {
        Link& l = *server_links[s][id];
        buf.clear();
        if (l.server_end->recv_some(buf, false) != RecvStatus::kData) continue;
        progress = true;
        l.server_frames.feed(std::move(buf));
        while (auto m = l.server_frames.next()) {
          for (auto& o : servers[s]->on_frame(id, l.endpoint, *m)) {
            server_links[s][o.conn]->server_end->send(encode_message(o.message));
          }
        }
      }
    }
    for (std::uint32_t w = 0; w < cfg.workers; ++w) {
      for (std::size_t c = 0; c < worker_links[w].size(); ++c) {
        Link& l = *worker_links[w][c];
        buf.clear();
        if (l.worker_end->recv_some(buf, false) != RecvStatus::kData) continue;
        progress = true;
        l.worker_frames.feed(std::move(buf));
        while (auto m = l.worker_frames.next()) {
          auto out = workers[w].on_frame(c, *m);
          send_worker(w, out);
        }
      }
    }
    if (auto f = failure(); !f.empty()) throw Error(ErrorCode::kRemote, f);
    if (!progress && !all_done()) throw Error(ErrorCode::kRemote, "experiment stalled with no frames in flight");
  }

  ExperimentResult r;
  std::vector<MetricsReport> reports;
  std::vector<std::vector<float>> models;
  for (const auto& s : servers) {
    r.server_metrics.push_back(s->metrics());
    reports.push_back(server_report(r.server_metrics.back()));
    models.push_back(s->model().flatten());
    r.applied_updates += s->applied_updates();
    r.chunk_count += s->owned_chunks().size();
  }
  r.report = merge_server_reports(reports);
  r.final_model = assemble_model(spec, key_owner(cfg, spec), models);
  for (const auto& w : workers) {
    r.worker_mirrors.push_back(w.mirror().flatten());
    r.worker_counters.push_back(w.counters());
  }
  r.losses = workers.front().losses();
  fill_rows_from_workers(cfg, r, false);
  return r;
}

ExperimentResult run_threads(const ExperimentConfig& cfg, const ModelSpec& spec) {
  std::unique_ptr<Transport> transport;
  if (cfg.transport == "inproc") {
    transport = std::make_unique<InProcessTransport>();
  } else if (cfg.transport == "tcp") {
    transport = std::make_unique<TcpTransport>();
  } else {
    throw Error(ErrorCode::kInvalidConfig, "unknown transport '" + cfg.transport + "'");
  }
  const std::uint32_t servers_n = server_count(cfg);
  std::vector<std::unique_ptr<ServerRunner>> runners;
  std::vector<std::string> addresses;
  for (std::uint32_t s = 0; s < servers_n; ++s) {
    runners.push_back(std::make_unique<ServerRunner>(spec, experiment_server_config(cfg, s), *transport));
    for (const auto& a : runners.back()->addresses()) addresses.push_back(a);
  }

  std::vector<int> server_rc(servers_n, 1);
  std::vector<WorkerResult> worker_results(cfg.workers);
  std::vector<std::thread> threads;
  for (std::uint32_t s = 0; s < servers_n; ++s) {
    threads.emplace_back([&, s] { server_rc[s] = runners[s]->run(); });
  }
  for (std::uint32_t w = 0; w < cfg.workers; ++w) {
    threads.emplace_back([&, w] {
      worker_results[w] = run_worker(worker_config(cfg, spec, w, addresses), *transport);
      if (worker_results[w].status != 0) {
        for (auto& r : runners) r->abort("worker " + std::to_string(w) + " failed");
      }
    });
  }
  for (auto& t : threads) t.join();

  std::string failure;
  for (std::uint32_t w = 0; w < cfg.workers && failure.empty(); ++w) {
    if (worker_results[w].status != 0) failure = "worker " + std::to_string(w) + ": " + worker_results[w].failure;
  }
  for (std::uint32_t s = 0; s < servers_n && failure.empty(); ++s) {
    if (server_rc[s] != 0) failure = "server " + std::to_string(s) + ": " + runners[s]->failure();
  }
  if (!failure.empty()) throw Error(ErrorCode::kRemote, failure);

  ExperimentResult r;
  std::vector<MetricsReport> reports;
  std::vector<std::vector<float>> models;
  for (const auto& runner : runners) {
    const auto& s = runner->server();
    r.server_metrics.push_back(s.metrics());
    reports.push_back(server_report(r.server_metrics.back()));
    models.push_back(s.model().flatten());
    r.applied_updates += s.applied_updates();
    r.chunk_count += s.owned_chunks().size();
  }
  r.report = merge_server_reports(reports);
  r.final_model = assemble_model(spec, key_owner(cfg, spec), models);
  for (auto& w : worker_results) {
    r.worker_mirrors.push_back(w.mirror.flatten());
    r.worker_counters.push_back(std::move(w.counters));
  }
  r.losses = worker_results.front().losses;
  fill_rows_from_workers(cfg, r, true);
  return r;
}

std::vector<float> read_model_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot read " + path);
  Bytes bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return payload_to_floats(bytes);
}

std::string join(const std::vector<std::string>& items, char sep = ',') {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out += sep;
    out += items[i];
  }
  return out;
}

pid_t spawn(const std::vector<std::string>& args, const std::string& log_path) {
  std::vector<char*> argv;
  for (const auto& a : args) argv.push_back(const_cast<char*>(a.c_str()));
  argv.push_back(nullptr);
  posix_spawn_file_actions_t actions;
  posix_spawn_file_actions_init(&actions);
  posix_spawn_file_actions_addopen(&actions, 1, log_path.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
  posix_spawn_file_actions_adddup2(&actions, 1, 2);
  pid_t pid = 0;
  const int rc = posix_spawn(&pid, argv[0], &actions, nullptr, argv.data(), environ);
  posix_spawn_file_actions_destroy(&actions);
  if (rc != 0) throw Error(ErrorCode::kIo, "cannot launch " + args[0] + ": " + std::strerror(rc));
  return pid;
}

std::string read_text(const std::string& path) {
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ExperimentResult run_subprocesses(const ExperimentConfig& cfg, const ModelSpec& spec) {
  if (cfg.binary.empty()) throw Error(ErrorCode::kInvalidConfig, "subprocess launch needs [server] binary");
  char tmpl[] = "/tmp/phub-bench-XXXXXX";
  if (mkdtemp(tmpl) == nullptr) throw Error(ErrorCode::kIo, "cannot create scratch directory");
  const std::filesystem::path dir = tmpl;

  std::vector<std::string> key_elems;
  for (const auto& k : spec.keys) key_elems.push_back(std::to_string(k.element_count));
  const std::uint32_t servers_n = server_count(cfg);

  struct Role {
    std::string name;
    pid_t pid;
    std::string log;
  };
  std::vector<Role> roles;
  std::vector<std::string> addresses;
  for (std::uint32_t s = 0; s < servers_n; ++s) {
    const auto sc = experiment_server_config(cfg, s);
    for (const auto& a : sc.listen) addresses.push_back(a);
    const std::string tag = "server" + std::to_string(s);
    std::vector<std::string> args = {cfg.binary,
                                     "server",
                                     "--listen", join(sc.listen),
                                     "--cores", std::to_string(sc.core_count),
                                     "--groups", std::to_string(sc.group_count),
                                     "--chunk-bytes", std::to_string(sc.chunk_bytes),
                                     "--workers", std::to_string(sc.worker_count),
                                     "--lr", format_number(sc.optimizer.learning_rate),
                                     "--agg-mode", sc.mode == AggregationMode::kDeterministic ? "det" : "fast",
                                     "--deploy", std::string(to_string(sc.deployment)),
                                     "--shard-index", std::to_string(sc.shard_index),
                                     "--shard-count", std::to_string(sc.shard_count),
                                     "--iters", std::to_string(sc.iterations),
                                     "--key-elems", join(key_elems),
                                     "--metrics", (dir / (tag + ".csv")).string(),
                                     "--model-out", (dir / (tag + ".bin")).string()};
    if (cfg.single_thread) args.push_back("--single-thread");
    const std::string log = (dir / (tag + ".log")).string();
    roles.push_back({tag, spawn(args, log), log});
  }
  for (std::uint32_t w = 0; w < cfg.workers; ++w) {
    const std::string tag = "worker" + std::to_string(w);
    std::vector<std::string> args = {cfg.binary,
                                     "worker",
                                     "--connect", join(addresses),
                                     "--id", std::to_string(w),
                                     "--workers", std::to_string(cfg.workers),
                                     "--mode", std::string(to_string(cfg.mode)),
                                     "--iters", std::to_string(cfg.iterations),
                                     "--seed", std::to_string(cfg.seed),
                                     "--samples", std::to_string(cfg.samples),
                                     "--dim", std::to_string(cfg.dim),
                                     "--key-elems", join(key_elems),
                                     "--metrics", (dir / (tag + ".csv")).string(),
                                     "--model-out", (dir / (tag + ".bin")).string()};
    if (w == 0 && cfg.mode == WorkerMode::kLogReg) args.push_back("--track-loss");
    const std::string log = (dir / (tag + ".log")).string();
    roles.push_back({tag, spawn(args, log), log});
  }

  std::string failure;
  for (const auto& role : roles) {
    int status = 0;
    waitpid(role.pid, &status, 0);
    if ((!WIFEXITED(status) || WEXITSTATUS(status) != 0) && failure.empty()) {
      failure = role.name + " exited abnormally: " + read_text(role.log);
    }
  }
  if (!failure.empty()) throw Error(ErrorCode::kRemote, failure);

  ExperimentResult r;
  std::vector<MetricsReport> reports;
  std::vector<std::vector<float>> models;
  for (std::uint32_t s = 0; s < servers_n; ++s) {
    const std::string tag = "server" + std::to_string(s);
    reports.push_back(load_csv((dir / (tag + ".csv")).string()));
    models.push_back(read_model_file((dir / (tag + ".bin")).string()));
    for (const auto& row : reports.back().rows) r.applied_updates += row.chunks_completed;
    r.chunk_count += experiment_server_config(cfg, s).deployment == Deployment::kShardMember
                         ? 0
                         : partition_model(spec, experiment_server_config(cfg, s).chunk_bytes).size();
  }
  if (cfg.deployment == Deployment::kShardMember) {
    r.chunk_count = partition_model(spec, effective_chunk_bytes(cfg, spec)).size();
  }
  r.report = merge_server_reports(reports);
  r.final_model = assemble_model(spec, key_owner(cfg, spec), models);
  for (std::uint32_t w = 0; w < cfg.workers; ++w) {
    const std::string tag = "worker" + std::to_string(w);
    r.worker_mirrors.push_back(read_model_file((dir / (tag + ".bin")).string()));
    const auto rep = load_csv((dir / (tag + ".csv")).string());
    std::vector<WorkerIterationCounters> counters;
    for (const auto& row : rep.rows) {
      counters.push_back({row.push_bytes, row.bcast_bytes, row.header_bytes, row.wall_ms.value_or(0.0)});
      if (w == 0 && row.loss) r.losses.push_back(*row.loss);
    }
    r.worker_counters.push_back(std::move(counters));
  }
  // Worker rows carry the loss after each iteration; version 0 is
  // recomputed locally from the all-zero initial model.
  if (cfg.mode == WorkerMode::kLogReg) {
    const auto data = synthetic_dataset(cfg.seed, cfg.samples, cfg.dim);
    r.losses.insert(r.losses.begin(), logistic_loss(std::vector<float>(cfg.dim, 0.0f), view(data)));
  }
  fill_rows_from_workers(cfg, r, true);
  std::filesystem::remove_all(dir);
  return r;
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  const ModelSpec spec = experiment_model_spec(cfg);
  if (cfg.workers == 0) throw Error(ErrorCode::kInvalidConfig, "worker count must be at least 1");
  const auto start = std::chrono::steady_clock::now();
  ExperimentResult r;
  if (cfg.launch == Launch::kSubprocess) {
    r = run_subprocesses(cfg, spec);
  } else if (cfg.single_thread) {
    r = run_single_thread(cfg, spec);
  } else {
    r = run_threads(cfg, spec);
  }
  r.elapsed_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  r.checks = standard_checks(cfg, r);
  if (cfg.switch_experiment) {
    const auto sw = run_switch_experiment(*cfg.switch_experiment);
    for (auto& c : switch_checks(*cfg.switch_experiment, sw)) r.checks.push_back(std::move(c));
  }
  return r;
}

ExperimentResult run_experiment(const std::string& config_path) { return run_experiment(load_experiment(config_path)); }

std::vector<CheckResult> standard_checks(const ExperimentConfig& cfg, const ExperimentResult& r) {
  const ModelSpec spec = experiment_model_spec(cfg);
  std::vector<CheckResult> checks;

  auto accounting = byte_accounting_check(r.report, spec.total_bytes, cfg.workers);
  if (accounting.passed && r.report.rows.size() != cfg.iterations) {
    accounting.passed = false;
    accounting.detail = std::to_string(r.report.rows.size()) + " rows for " + std::to_string(cfg.iterations) +
                        " iterations";
  }
  checks.push_back(accounting);

  CheckResult agree{"counter-agreement", true, "worker-side and server-side byte counters match"};
  for (std::size_t t = 0; t < r.report.rows.size() && agree.passed; ++t) {
    std::uint64_t push = 0;
    std::uint64_t model = 0;
    for (const auto& wc : r.worker_counters) {
      if (t < wc.size()) {
        push += wc[t].push_payload_bytes;
        model += wc[t].model_payload_bytes;
      }
    }
    if (push != r.report.rows[t].push_bytes || model != r.report.rows[t].bcast_bytes) {
      agree.passed = false;
      agree.detail = "iteration " + std::to_string(t) + ": workers pushed " + std::to_string(push) + "/received " +
                     std::to_string(model) + ", servers counted " + std::to_string(r.report.rows[t].push_bytes) +
                     "/" + std::to_string(r.report.rows[t].bcast_bytes);
    }
  }
  checks.push_back(agree);

  CheckResult mirrors{"mirror-consistency", true, "every worker mirror equals the server model bitwise"};
  for (std::size_t w = 0; w < r.worker_mirrors.size(); ++w) {
    if (r.worker_mirrors[w].size() == r.final_model.size() &&
        std::memcmp(r.worker_mirrors[w].data(), r.final_model.data(), r.final_model.size() * sizeof(float)) == 0) {
      continue;
    }
    mirrors.passed = false;
    mirrors.detail = "worker " + std::to_string(w) + " mirror differs from the server model";
    break;
  }
  checks.push_back(mirrors);

  const std::uint64_t expected_updates = r.chunk_count * cfg.iterations;
  checks.push_back({"exactly-once-update", r.applied_updates == expected_updates,
                    std::to_string(r.applied_updates) + " optimizer steps for " + std::to_string(r.chunk_count) +
                        " chunks x " + std::to_string(cfg.iterations) + " iterations"});

  if (cfg.mode == WorkerMode::kLogReg && cfg.agg_mode == AggregationMode::kDeterministic &&
      cfg.optimizer.average_gradients) {
    const auto oracle =
        train_single_process(cfg.seed, cfg.samples, cfg.dim, cfg.workers, cfg.optimizer.learning_rate, cfg.iterations);
    const bool model_eq = oracle.weights.size() == r.final_model.size() &&
                          std::memcmp(oracle.weights.data(), r.final_model.data(),
                                      r.final_model.size() * sizeof(float)) == 0;
    auto expected_losses = oracle.losses;
    if (cfg.launch == Launch::kSubprocess) {
      // Losses travel through 9-digit CSV fields; version 0 is computed locally.
      for (std::size_t v = 1; v < expected_losses.size(); ++v) {
        expected_losses[v] = std::stod(format_number(expected_losses[v]));
      }
    }
    const bool loss_eq = expected_losses == r.losses;
    checks.push_back({"oracle-equivalence", model_eq && loss_eq,
                      model_eq ? (loss_eq ? "final model and loss curve match the single-process trainer bitwise"
                                          : "loss curve differs from the single-process trainer")
                               : "final model differs from the single-process trainer"});
  }
  return checks;
}

// Switch experiment

SwitchRunResult run_switch_experiment(const SwitchExperiment& exp) {
  validate(exp.model);
  const Topology topo = uniform_topology(exp.racks, exp.workers_per_rack);
  const std::uint32_t workers = exp.racks * exp.workers_per_rack;
  if (exp.model_bytes == 0 || exp.model_bytes % kElementWidth != 0) {
    throw Error(ErrorCode::kInvalidConfig, "switch model-bytes must be a positive multiple of 4");
  }
  const std::uint64_t elems[] = {exp.model_bytes / kElementWidth};
  const auto spec = build_model_spec(elems);
  const auto chunks = partition_model(spec, exp.chunk_bytes);

  SwitchRunResult r;
  std::mt19937_64 rng(exp.seed);
  std::uniform_real_distribution<float> dist(-1.0f, 1.0f);
  OptimizerConfig avg;
  for (const auto& c : chunks) {
    std::vector<std::vector<float>> payloads(workers, std::vector<float>(c.element_count));
    for (auto& p : payloads) {
      for (auto& v : p) v = dist(rng);
    }
    const auto h = hierarchical_reduce(topo, payloads, exp.model, avg);
    for (std::size_t i = 0; i < c.element_count; ++i) {
      double exact = 0.0;
      for (const auto& p : payloads) exact += p[i];
      exact /= workers;
      r.max_abs_error = std::max(r.max_abs_error, std::fabs(static_cast<double>(h.aggregate[i]) - exact));
    }
    r.traffic += h.traffic;
    ++r.chunks;
  }
  r.comparison = traffic_compare(topo, spec.total_bytes, workers);
  r.error_bound = 1.0 / (2.0 * static_cast<double>(exp.model.scale)) + workers * static_cast<double>(FLT_EPSILON);
  return r;
}

void emit_switch_csv(const SwitchExperiment& exp, const SwitchRunResult& r, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path);
  out << "metric,value\n";
  out << "racks," << exp.racks << "\n";
  out << "workers," << exp.racks * exp.workers_per_rack << "\n";
  out << "model_bytes," << exp.model_bytes << "\n";
  out << "chunks," << r.chunks << "\n";
  out << "worker_to_tor_bytes," << r.traffic.worker_to_tor_bytes << "\n";
  out << "tor_to_root_bytes," << r.traffic.tor_to_root_bytes << "\n";
  out << "root_to_tor_bytes," << r.traffic.root_to_tor_bytes << "\n";
  out << "tor_to_worker_bytes," << r.traffic.tor_to_worker_bytes << "\n";
  out << "hier_cross_rack_bytes," << r.comparison.hier_cross_rack_bytes << "\n";
  out << "flat_cross_rack_bytes," << r.comparison.flat_cross_rack_bytes << "\n";
  out << "fragments," << r.traffic.fragments << "\n";
  out << "storage_waves," << r.traffic.storage_waves << "\n";
  out << "max_abs_error," << format_number(r.max_abs_error) << "\n";
  out << "error_bound," << format_number(r.error_bound) << "\n";
  if (!out) throw Error(ErrorCode::kIo, "write failed: " + path);
}

std::vector<CheckResult> switch_checks(const SwitchExperiment& exp, const SwitchRunResult& r) {
  std::vector<CheckResult> checks;
  checks.push_back({"switch-error-bound", r.max_abs_error <= r.error_bound,
                    "max |hier - exact| " + format_number(r.max_abs_error) + " vs bound " +
                        format_number(r.error_bound)});
  const bool measured = r.traffic.cross_rack_bytes() == r.comparison.hier_cross_rack_bytes;
  checks.push_back({"switch-cross-rack-bytes", measured,
                    "emulated " + std::to_string(r.traffic.cross_rack_bytes()) + ", formula " +
                        std::to_string(r.comparison.hier_cross_rack_bytes) + ", flat " +
                        std::to_string(r.comparison.flat_cross_rack_bytes)});
  checks.push_back({"switch-root-conservation", r.traffic.tor_to_root_bytes == exp.racks * exp.model_bytes,
                    std::to_string(r.traffic.tor_to_root_bytes) + " bytes into root"});
  return checks;
}

}  // namespace phub
