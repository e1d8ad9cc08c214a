#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "phub/error.hpp"
#include "phub/harness.hpp"
#include "phub/server.hpp"
#include "phub/switch_emu.hpp"
#include "phub/transport.hpp"
#include "phub/worker.hpp"

using namespace phub;

namespace {

struct LayoutFlags {
  std::string key_elems;
  std::size_t dim = 0;
  std::uint64_t model_bytes = 0;
  std::uint32_t key_count = 1;

  void add(CLI::App& app) {
    app.add_option("--key-elems", key_elems, "Comma-separated element count per key");
    app.add_option("--dim", dim, "Feature dimension (logistic-regression layout)");
    app.add_option("--model-bytes", model_bytes, "Total model bytes, split evenly over --key-count keys");
    app.add_option("--key-count", key_count, "Number of keys for --model-bytes");
  }

  ModelSpec spec() const {
    if (!key_elems.empty()) {
      std::vector<std::uint64_t> counts;
      for (const auto& s : split_list(key_elems)) counts.push_back(std::stoull(s));
      return build_model_spec(counts);
    }
    if (model_bytes != 0) {
      if (model_bytes % kElementWidth != 0) throw Error(ErrorCode::kInvalidConfig, "--model-bytes must be a multiple of 4");
      return build_model_spec(split_evenly(model_bytes / kElementWidth, key_count));
    }
    if (dim != 0) return logreg_model_spec(dim);
    throw Error(ErrorCode::kInvalidConfig, "model layout needs --key-elems, --model-bytes or --dim");
  }
};

void write_model(const std::string& path, const std::vector<float>& flat) {
  const Bytes bytes = floats_to_payload(flat);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path);
}

std::unique_ptr<Transport> transport_for(const std::vector<std::string>& addresses) {
  for (const auto& a : addresses) {
    if (a.rfind("inproc:", 0) == 0) throw Error(ErrorCode::kInvalidConfig, "in-process addresses need the bench harness");
  }
  return std::make_unique<TcpTransport>();
}

// Fills options not given on the command line from `key = value` lines
// (top level or a section named after the subcommand).
void apply_config_file(CLI::App& sub, const std::string& path) {
  const auto kv = KeyValueConfig::load(path);
  for (const std::string& section : {std::string(), sub.get_name()}) {
    for (const auto& key : kv.keys(section)) {
      CLI::Option* opt = sub.get_option_no_throw("--" + key);
      if (opt == nullptr || key == "config") {
        throw Error(ErrorCode::kInvalidConfig, path + ": unknown key '" + key + "'");
      }
      if (opt->count() > 0) continue;
      opt->add_result(*kv.get(section, key));
      opt->run_callback();
    }
  }
}

struct ServerFlags {
  std::string listen = "127.0.0.1:47100";
  ServerConfig cfg;
  std::string lr_text;
  std::string agg_mode = "fast";
  std::string deploy = "central";
  std::string metrics;
  std::string model_out;
  LayoutFlags layout;
};

int run_server(ServerFlags& f) {
  ServerConfig cfg = f.cfg;
  cfg.listen = split_list(f.listen);
  cfg.mode = parse_aggregation_mode(f.agg_mode);
  cfg.deployment = parse_deployment(f.deploy);
  const ModelSpec spec = f.layout.spec();
  auto transport = transport_for(cfg.listen);
  ServerRunner runner(spec, cfg, *transport);
  for (const auto& a : runner.addresses()) std::cerr << "listening on " << a << "\n";
  const int rc = runner.run();
  if (rc != 0) {
    std::cerr << "server failed: " << runner.failure() << "\n";
    return 1;
  }
  if (!f.metrics.empty()) {
    auto report = server_report(runner.server().metrics());
    emit_csv(report, f.metrics);
  }
  if (!f.model_out.empty()) write_model(f.model_out, runner.server().model().flatten());
  return 0;
}

struct WorkerFlags {
  std::string connect = "127.0.0.1:47100";
  WorkerConfig cfg;
  std::string mode = "logreg";
  std::string metrics;
  std::string model_out;
  LayoutFlags layout;
};

int run_worker_cmd(WorkerFlags& f) {
  WorkerConfig cfg = f.cfg;
  cfg.connect = split_list(f.connect);
  cfg.mode = parse_worker_mode(f.mode);
  if (cfg.mode == WorkerMode::kLogReg) {
    if (f.layout.key_elems.empty() && f.layout.model_bytes == 0) f.layout.dim = cfg.dim;
  } else if (f.layout.key_elems.empty() && f.layout.model_bytes == 0) {
    throw Error(ErrorCode::kInvalidConfig, "zero mode needs --model-bytes or --key-elems");
  }
  cfg.spec = f.layout.spec();
  auto transport = transport_for(cfg.connect);
  const auto result = run_worker(cfg, *transport);
  if (result.status != 0) {
    std::cerr << "worker " << cfg.worker_id << " failed: " << result.failure << "\n";
    return 1;
  }
  if (!f.metrics.empty()) {
    MetricsReport report;
    for (std::size_t t = 0; t < result.counters.size(); ++t) {
      const auto& c = result.counters[t];
      MetricsRow row;
      row.iteration = static_cast<std::uint32_t>(t);
      row.wall_ms = c.wall_ms;
      row.push_bytes = c.push_payload_bytes;
      row.bcast_bytes = c.model_payload_bytes;
      row.header_bytes = c.header_bytes;
      if (t + 1 < result.losses.size()) row.loss = result.losses[t + 1];
      report.rows.push_back(row);
    }
    emit_csv(report, f.metrics);
  }
  if (!f.model_out.empty()) write_model(f.model_out, result.mirror.flatten());
  std::cerr << "worker " << cfg.worker_id << " finished " << result.counters.size() << " iterations\n";
  return 0;
}

struct SwitchFlags {
  SwitchExperiment exp;
  std::string out = "traffic.csv";
};

int run_switch(SwitchFlags& f) {
  const auto r = run_switch_experiment(f.exp);
  emit_switch_csv(f.exp, r, f.out);
  bool ok = true;
  for (const auto& c : switch_checks(f.exp, r)) {
    std::cout << (c.passed ? "PASS " : "FAIL ") << c.name << ": " << c.detail << "\n";
    ok = ok && c.passed;
  }
  return ok ? 0 : 1;
}

struct BenchFlags {
  std::string config;
  std::string out = "metrics.csv";
  bool single_thread = false;
};

int run_bench(BenchFlags& f) {
  auto cfg = load_experiment(f.config);
  if (f.single_thread) cfg.single_thread = true;
  if (cfg.launch == Launch::kSubprocess && cfg.binary.empty()) {
    cfg.binary = std::filesystem::read_symlink("/proc/self/exe").string();
  }
  const auto r = run_experiment(cfg);
  emit_csv(r.report, f.out);
  if (cfg.switch_experiment) {
    std::filesystem::path p = f.out;
    p.replace_extension(".switch.csv");
    emit_switch_csv(*cfg.switch_experiment, run_switch_experiment(*cfg.switch_experiment), p.string());
  }
  for (const auto& c : r.checks) {
    std::cout << (c.passed ? "PASS " : "FAIL ") << c.name << ": " << c.detail << "\n";
  }
  std::cout << r.report.rows.size() << " iterations in " << r.elapsed_s << " s\n";
  return r.passed() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"PHub parameter server"};
  app.require_subcommand(1);

  ServerFlags sf;
  auto* server = app.add_subcommand("server", "Run a parameter server");
  std::string server_config;
  server->add_option("--config", server_config, "key = value file with flag names as keys")->check(CLI::ExistingFile);
  server->add_option("--listen", sf.listen, "Endpoint addresses, host:port[,host:port...]");
  server->add_option("--cores", sf.cfg.core_count);
  server->add_option("--groups", sf.cfg.group_count);
  server->add_option("--chunk-bytes", sf.cfg.chunk_bytes);
  server->add_option("--workers", sf.cfg.worker_count);
  server->add_option("--lr", sf.cfg.optimizer.learning_rate);
  server->add_option("--agg-mode", sf.agg_mode)->check(CLI::IsMember({"fast", "det"}));
  server->add_option("--deploy", sf.deploy)->check(CLI::IsMember({"central", "pbox", "shard"}));
  server->add_option("--shard-index", sf.cfg.shard_index);
  server->add_option("--shard-count", sf.cfg.shard_count);
  server->add_option("--iters", sf.cfg.iterations);
  server->add_option("--metrics", sf.metrics, "Per-iteration CSV output");
  server->add_option("--model-out", sf.model_out, "Final model as little-endian float32");
  server->add_flag("--single-thread", sf.cfg.single_thread);
  sf.layout.add(*server);

  WorkerFlags wf;
  auto* worker = app.add_subcommand("worker", "Run a worker");
  std::string worker_config;
  worker->add_option("--config", worker_config, "key = value file with flag names as keys")->check(CLI::ExistingFile);
  worker->add_option("--connect", wf.connect, "Server endpoint addresses");
  worker->add_option("--id", wf.cfg.worker_id);
  worker->add_option("--workers", wf.cfg.worker_count);
  worker->add_option("--mode", wf.mode)->check(CLI::IsMember({"logreg", "zero"}));
  worker->add_option("--iters", wf.cfg.iterations);
  worker->add_option("--seed", wf.cfg.seed);
  worker->add_option("--samples", wf.cfg.samples);
  worker->add_option("--dim", wf.cfg.dim);
  worker->add_option("--key-elems", wf.layout.key_elems);
  worker->add_option("--model-bytes", wf.layout.model_bytes);
  worker->add_option("--key-count", wf.layout.key_count);
  worker->add_flag("--track-loss", wf.cfg.track_loss, "Record the full-dataset loss of every model version");
  worker->add_option("--metrics", wf.metrics);
  worker->add_option("--model-out", wf.model_out);

  SwitchFlags swf;
  auto* sw = app.add_subcommand("simulate-switch", "Emulate in-network hierarchical aggregation");
  sw->add_option("--racks", swf.exp.racks);
  sw->add_option("--workers-per-rack", swf.exp.workers_per_rack);
  sw->add_option("--model-bytes", swf.exp.model_bytes);
  sw->add_option("--chunk-bytes", swf.exp.chunk_bytes);
  sw->add_option("--scale", swf.exp.model.scale);
  sw->add_option("--region-bytes", swf.exp.model.region_bytes);
  sw->add_option("--acc-width", swf.exp.model.accumulator_width);
  sw->add_option("--storage-slots", swf.exp.model.storage_slots);
  sw->add_option("--seed", swf.exp.seed);
  sw->add_option("--out", swf.out);

  BenchFlags bf;
  auto* bench = app.add_subcommand("bench", "Run an experiment from a config file");
  bench->add_option("--config", bf.config)->required()->check(CLI::ExistingFile);
  bench->add_option("--out", bf.out);
  bench->add_flag("--single-thread", bf.single_thread);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*server && !server_config.empty()) apply_config_file(*server, server_config);
    if (*worker && !worker_config.empty()) apply_config_file(*worker, worker_config);
    if (*server) return run_server(sf);
    if (*worker) return run_worker_cmd(wf);
    if (*sw) return run_switch(swf);
    if (*bench) return run_bench(bf);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
