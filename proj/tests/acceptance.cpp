// Acceptance checks. Prints one PASS/FAIL line per criterion; the throughput
// smoke prints WARN instead of FAIL below its bound.
//
//   phub_acceptance [--csv throughput.csv]

#include <boost/multiprecision/cpp_int.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <numeric>
#include <queue>
#include <random>
#include <sstream>
#include <string>

#include "phub/assignment.hpp"
#include "phub/error.hpp"
#include "phub/harness.hpp"
#include "phub/switch_emu.hpp"
#include "phub/wire.hpp"

using namespace phub;
using boost::multiprecision::cpp_int;

namespace {

int failures = 0;

void report(const std::string& name, bool ok, const std::string& detail) {
  std::printf("%s %s: %s\n", ok ? "PASS" : "FAIL", name.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

template <class F>
void criterion(const std::string& name, F&& body) {
  try {
    std::string detail;
    const bool ok = body(detail);
    report(name, ok, detail);
  } catch (const std::exception& e) {
    report(name, false, std::string("exception: ") + e.what());
  }
}

bool bitwise_equal(const std::vector<float>& a, const std::vector<float>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

std::string failed_checks(const ExperimentResult& r) {
  std::string out;
  for (const auto& c : r.checks) {
    if (!c.passed) out += c.name + " (" + c.detail + ") ";
  }
  return out;
}

// Reference trainer, written from the workload description: LCG data,
// float gradients per worker, averaged in worker order, SGD in float.
struct Reference {
  std::vector<float> features;
  std::vector<float> labels;
  std::size_t dim;
  std::size_t samples;

  Reference(std::uint64_t seed, std::size_t n, std::size_t d) : dim(d), samples(n) {
    std::uint64_t state = seed;
    auto draw = [&] {
      state = state * 6364136223846793005ull + 1442695040888963407ull;
      return static_cast<float>(static_cast<std::uint32_t>(state >> 40)) / 8388608.0f - 1.0f;
    };
    std::vector<float> truth(d);
    for (auto& v : truth) v = draw();
    features.resize(n * d);
    labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      float dot = 0.0f;
      for (std::size_t j = 0; j < d; ++j) {
        features[i * d + j] = draw();
        dot += features[i * d + j] * truth[j];
      }
      labels[i] = dot > 0.0f ? 1.0f : 0.0f;
    }
  }

  std::vector<float> mean_gradient(const std::vector<float>& w, std::size_t first, std::size_t count) const {
    std::vector<float> g(dim, 0.0f);
    for (std::size_t i = first; i < first + count; ++i) {
      const float* x = &features[i * dim];
      float z = 0.0f;
      for (std::size_t j = 0; j < dim; ++j) z += w[j] * x[j];
      const float err = 1.0f / (1.0f + std::exp(-z)) - labels[i];
      for (std::size_t j = 0; j < dim; ++j) g[j] += err * x[j];
    }
    for (auto& v : g) v /= static_cast<float>(count);
    return g;
  }

  double loss(const std::vector<float>& w) const {
    double total = 0.0;
    for (std::size_t i = 0; i < samples; ++i) {
      double z = 0.0;
      for (std::size_t j = 0; j < dim; ++j) z += static_cast<double>(w[j]) * features[i * dim + j];
      total += (z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z))) - labels[i] * z;
    }
    return total / static_cast<double>(samples);
  }

  std::vector<float> train(std::uint32_t workers, float lr, std::uint32_t iters, std::vector<double>* losses) const {
    std::vector<float> w(dim, 0.0f);
    if (losses) losses->push_back(loss(w));
    const std::size_t per = samples / workers;
    for (std::uint32_t t = 0; t < iters; ++t) {
      std::vector<float> sum = mean_gradient(w, 0, per);
      for (std::uint32_t k = 1; k < workers; ++k) {
        const auto g = mean_gradient(w, k * per, per);
        for (std::size_t j = 0; j < dim; ++j) sum[j] += g[j];
      }
      for (std::size_t j = 0; j < dim; ++j) w[j] = w[j] - lr * (sum[j] / static_cast<float>(workers));
      if (losses) losses->push_back(loss(w));
    }
    return w;
  }
};

ExperimentConfig logreg_run() {
  ExperimentConfig c;
  c.workers = 4;
  c.samples = 400;
  c.dim = 16;
  c.seed = 1;
  c.optimizer.learning_rate = 0.05f;
  c.iterations = 50;
  c.agg_mode = AggregationMode::kDeterministic;
  c.single_thread = true;
  return c;
}

std::vector<ExperimentResult> accounting_runs;

ExperimentResult run_and_keep(const ExperimentConfig& c) {
  auto r = run_experiment(c);
  accounting_runs.push_back(r);
  return r;
}

// Longest-processing-time reference: sort by size descending (stable in
// chunk order), place each on the least-loaded core, lowest index on ties.
std::vector<std::uint32_t> lpt_reference(const std::vector<ChunkDescriptor>& chunks, std::uint32_t cores) {
  std::vector<std::size_t> order(chunks.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](auto a, auto b) { return chunks[a].byte_size > chunks[b].byte_size; });
  std::vector<std::uint64_t> load(cores, 0);
  std::vector<std::uint32_t> core_of(chunks.size());
  for (auto i : order) {
    const auto c = static_cast<std::uint32_t>(std::min_element(load.begin(), load.end()) - load.begin());
    core_of[i] = c;
    load[c] += chunks[i].byte_size;
  }
  return core_of;
}

}  // namespace

int main(int argc, char** argv) {
  std::string csv_path = "throughput.csv";
  for (int i = 1; i + 1 < argc; ++i) {
    if (std::string(argv[i]) == "--csv") csv_path = argv[i + 1];
  }
  const Reference ref(1, 400, 16);
  std::vector<double> ref_losses;
  const std::vector<float> ref_model = ref.train(4, 0.05f, 50, &ref_losses);

  ExperimentResult base;
  criterion("oracle-equivalence", [&](std::string& d) {
    const auto start = std::chrono::steady_clock::now();
    base = run_and_keep(logreg_run());
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool model_ok = bitwise_equal(base.final_model, ref_model);
    const bool loss_ok = base.losses == ref_losses;
    d = std::string(model_ok ? "final model bitwise equal" : "final model differs") + ", loss curve " +
        (loss_ok ? "equal" : "differs") + ", " + std::to_string(secs) + " s";
    return model_ok && loss_ok && secs < 10.0;
  });

  criterion("chunk-size-invariance", [&](std::string& d) {
    bool ok = true;
    for (std::uint64_t cb : {4ull, 8ull, 12ull, 1024ull, 32768ull, 0ull}) {
      auto c = logreg_run();
      c.chunk_bytes = cb;
      const auto r = run_and_keep(c);
      ok = ok && bitwise_equal(r.final_model, ref_model);
    }
    // Wider model so 1 KB chunks split keys.
    const Reference wide_ref(3, 64, 20000);
    const auto wide_model = wide_ref.train(4, 0.05f, 3, nullptr);
    std::size_t chunks_1k = 0;
    for (std::uint64_t cb : {1024ull, 32768ull, 0ull}) {
      auto c = logreg_run();
      c.seed = 3;
      c.samples = 64;
      c.dim = 20000;
      c.iterations = 3;
      c.chunk_bytes = cb;
      const auto r = run_and_keep(c);
      if (cb == 1024) chunks_1k = r.chunk_count;
      ok = ok && bitwise_equal(r.final_model, wide_model);
    }
    d = "d=16 with chunk bytes {4, 8, 12, 1024, 32768, whole-key}; d=20000 with {1024 (" +
        std::to_string(chunks_1k) + " chunks), 32768, whole-key}";
    return ok;
  });

  criterion("deployment-invariance", [&](std::string& d) {
    bool ok = true;
    std::string bad;
    struct Shape {
      const char* name;
      Deployment dep;
      std::uint32_t endpoints, cores, groups, shards;
    };
    for (const Shape s : {Shape{"central", Deployment::kCentral, 1, 1, 1, 1},
                          Shape{"pbox", Deployment::kPBox, 4, 4, 2, 1},
                          Shape{"shard", Deployment::kShardMember, 1, 1, 1, 2}}) {
      for (const char* mode : {"single-thread", "threads", "tcp"}) {
        auto c = logreg_run();
        c.deployment = s.dep;
        c.endpoints = s.endpoints;
        c.cores = s.cores;
        c.groups = s.groups;
        c.shard_count = s.shards;
        c.single_thread = std::string(mode) == "single-thread";
        if (std::string(mode) == "tcp") c.transport = "tcp";
        const auto r = run_and_keep(c);
        if (!bitwise_equal(r.final_model, base.final_model) || !r.passed()) {
          ok = false;
          bad += std::string(s.name) + "/" + mode + " ";
        }
      }
    }
    d = ok ? "central, pbox (4 endpoints, 4 cores, 2 groups), 2-way shard; single-thread, threads, tcp"
           : "differs: " + bad;
    return ok;
  });

  criterion("byte-accounting", [&](std::string& d) {
    ExperimentConfig z;
    z.mode = WorkerMode::kZeroCompute;
    z.workers = 8;
    z.model_bytes = 1 << 20;
    z.key_count = 3;
    z.iterations = 2;
    z.single_thread = true;
    const auto flat = run_and_keep(z);
    z.deployment = Deployment::kShardMember;
    z.shard_count = 2;
    const auto sharded = run_and_keep(z);
    bool ok = true;
    for (const auto* r : {&flat, &sharded}) {
      for (const auto& row : r->report.rows) {
        ok = ok && row.push_bytes == 8ull << 20 && row.bcast_bytes == 8ull << 20;
      }
    }
    const auto& per_shard = sharded.server_metrics;
    ok = ok && per_shard.size() == 2 &&
         per_shard[0].iterations[0].push_payload_bytes + per_shard[1].iterations[0].push_payload_bytes == 8ull << 20 &&
         per_shard[0].iterations[0].push_payload_bytes != 0 && per_shard[1].iterations[0].push_payload_bytes != 0;
    std::size_t runs = 0;
    for (const auto& r : accounting_runs) {
      for (const auto& c : r.checks) {
        if (c.name == "byte-accounting" || c.name == "counter-agreement" || c.name == "exactly-once-update") {
          ok = ok && c.passed;
        }
      }
      ++runs;
    }
    std::uint64_t headers = 0, payload = 0;
    for (const auto& row : flat.report.rows) {
      headers += row.header_bytes;
      payload += row.push_bytes + row.bcast_bytes;
    }
    const double ratio = static_cast<double>(headers) / static_cast<double>(payload);
    ok = ok && ratio < 0.001;
    d = "8 workers x 1 MB: 8 MB push and 8 MB bcast per iteration, central and 2-way shard; " +
        std::to_string(runs) + " runs with exact, agreeing counters; header ratio " + std::to_string(ratio);
    return ok;
  });

  criterion("load-balance", [&](std::string& d) {
    std::mt19937_64 rng(2024);
    bool ok = true;
    std::uint64_t worst_gap = 0;
    for (int trial = 0; trial < 200; ++trial) {
      std::vector<std::uint64_t> elems(1 + rng() % 40);
      for (auto& e : elems) e = 1 + rng() % (trial % 3 == 0 ? 300 : 60000);
      const std::uint64_t chunk_bytes = 4 * (1 + rng() % 16384);
      const std::uint32_t groups = 1 + static_cast<std::uint32_t>(rng() % 3);
      const std::uint32_t cores = groups * (1 + static_cast<std::uint32_t>(rng() % 6));
      const std::uint32_t endpoints = groups * (1 + static_cast<std::uint32_t>(rng() % 3));
      const auto chunks = partition_model(build_model_spec(elems), chunk_bytes);
      const auto a = assign_chunks(chunks, cores, groups, endpoints);
      const auto b = assign_chunks(chunks, cores, groups, endpoints);
      const auto loads = load_report(a);
      std::uint64_t hi = 0, lo = UINT64_MAX, max_chunk = 0;
      for (const auto& l : loads) {
        hi = std::max(hi, l.byte_load);
        lo = std::min(lo, l.byte_load);
      }
      for (const auto& c : chunks) max_chunk = std::max(max_chunk, c.byte_size);
      const auto expect = lpt_reference(chunks, cores);
      for (std::size_t i = 0; i < chunks.size(); ++i) ok = ok && a.placements()[i].core_shard == expect[i];
      ok = ok && hi - lo <= max_chunk && a == b;
      worst_gap = std::max(worst_gap, hi - lo);
    }
    d = "200 random specs: max-min <= largest chunk, placements match the reference and repeat exactly";
    return ok;
  });

  criterion("wire-round-trip", [&](std::string& d) {
    std::mt19937_64 rng(99);
    auto random_message = [&] {
      Message m;
      m.type = static_cast<MsgType>(1 + rng() % 6);
      m.worker_id = static_cast<std::uint16_t>(rng());
      m.iteration = static_cast<std::uint32_t>(rng());
      m.key_id = static_cast<std::uint32_t>(rng());
      m.chunk_index = static_cast<std::uint32_t>(rng());
      m.payload.resize(rng() % 3 == 0 ? 0 : rng() % 2048);
      for (auto& b : m.payload) b = static_cast<std::uint8_t>(rng());
      return m;
    };
    bool ok = true;
    for (int i = 0; i < 10000; ++i) {
      const auto m = random_message();
      const auto r = decode_message(encode_message(m));
      ok = ok && r.status == DecodeResult::Status::kOk && r.message == m && r.consumed == kHeaderBytes + m.payload.size();
    }
    for (int s = 0; s < 50; ++s) {
      std::vector<Message> sent(1 + rng() % 200);
      Bytes stream;
      for (auto& m : sent) {
        m = random_message();
        encode_message_into(m, stream);
      }
      FrameReader reader;
      std::vector<Message> got;
      std::size_t pos = 0;
      while (pos < stream.size()) {
        const std::size_t n = std::min<std::size_t>(stream.size() - pos, 1 + rng() % (s % 2 ? 7 : 5000));
        reader.feed(std::span(stream).subspan(pos, n));
        pos += n;
        while (auto m = reader.next()) got.push_back(std::move(*m));
      }
      ok = ok && got == sent && reader.buffered() == 0;
    }
    d = "10000 random messages; 50 streams re-segmented at random boundaries";
    return ok;
  });

  criterion("switch-integer-sums", [&](std::string& d) {
    std::mt19937_64 rng(5);
    bool ok = true;
    for (int trial = 0; trial < 1000; ++trial) {
      SwitchModel m;
      m.scale = 1ull << (8 + rng() % 13);
      m.region_bytes = 4 * static_cast<std::uint32_t>(1 + rng() % 256);
      const auto racks = 1 + static_cast<std::uint32_t>(rng() % 4);
      const auto per_rack = 1 + static_cast<std::uint32_t>(rng() % 8);
      const auto topo = uniform_topology(racks, per_rack);
      const std::uint32_t workers = racks * per_rack;
      const std::size_t len = 1 + rng() % 600;
      const double bound = 0.999 * static_cast<double>(INT32_MAX) / workers / static_cast<double>(m.scale);
      std::uniform_real_distribution<float> dist(static_cast<float>(-bound), static_cast<float>(bound));
      std::vector<std::vector<float>> g(workers, std::vector<float>(len));
      std::vector<std::vector<std::int64_t>> q(workers, std::vector<std::int64_t>(len));
      for (std::uint32_t w = 0; w < workers; ++w) {
        for (std::size_t i = 0; i < len; ++i) {
          g[w][i] = dist(rng);
          q[w][i] = static_cast<std::int64_t>(std::nearbyint(static_cast<long double>(g[w][i]) * m.scale));
        }
      }
      // Rack sums then the root, through the switch model.
      std::vector<std::vector<std::int64_t>> rack_sums;
      for (const auto& rack : topo.racks) {
        std::vector<std::vector<std::int64_t>> pk;
        for (auto w : rack) pk.push_back(q[w]);
        std::vector<std::int64_t> sum;
        for (std::size_t begin = 0; begin < len; begin += m.region_bytes / 4) {
          const std::size_t n = std::min<std::size_t>(m.region_bytes / 4, len - begin);
          std::vector<std::vector<std::int64_t>> frag;
          for (const auto& p : pk) frag.emplace_back(p.begin() + begin, p.begin() + begin + n);
          const auto s = switch_aggregate(frag, m);
          sum.insert(sum.end(), s.begin(), s.end());
        }
        rack_sums.push_back(sum);
      }
      std::vector<std::int64_t> root;
      for (std::size_t begin = 0; begin < len; begin += m.region_bytes / 4) {
        const std::size_t n = std::min<std::size_t>(m.region_bytes / 4, len - begin);
        std::vector<std::vector<std::int64_t>> frag;
        for (const auto& r : rack_sums) frag.emplace_back(r.begin() + begin, r.begin() + begin + n);
        const auto s = switch_aggregate(frag, m);
        root.insert(root.end(), s.begin(), s.end());
      }
      const auto h = hierarchical_reduce(topo, g, m, OptimizerConfig{});
      for (std::size_t i = 0; i < len; ++i) {
        cpp_int exact = 0;
        for (std::uint32_t w = 0; w < workers; ++w) exact += q[w][i];
        ok = ok && exact == root[i];
        const float mean = static_cast<float>(static_cast<long double>(root[i]) /
                                              (static_cast<long double>(m.scale) * workers));
        ok = ok && std::memcmp(&mean, &h.aggregate[i], sizeof(float)) == 0;
      }
    }
    d = "1000 random topologies and payloads; rack-then-root sums equal big-integer sums";
    return ok;
  });

  criterion("switch-overflow-detection", [&](std::string& d) {
    std::mt19937_64 rng(8);
    bool ok = true;
    int cases = 0, overflows = 0;
    for (std::uint32_t width : {32u, 64u}) {
      SwitchModel m;
      m.accumulator_width = width;
      const cpp_int hi = m.acc_max();
      const cpp_int lo = m.acc_min();
      const std::int64_t max = m.acc_max();
      const std::int64_t min = m.acc_min();
      std::vector<std::vector<std::int64_t>> crafted = {
          {max}, {max, 0}, {max, 1}, {max, -1, 1}, {max, 1, -1}, {min}, {min, -1}, {min, 1, -1},
          {min, -1, 1}, {max - 5, 3, 2}, {max - 5, 3, 3}, {min + 5, -5}, {min + 5, -6}, {max, min},
          {max / 2 + 1, max / 2 + 1}, {max / 2, max / 2, 1}, {min / 2, min / 2}, {min / 2, min / 2, -1}};
      for (int i = 0; i < 500; ++i) {
        const std::size_t n = 2 + rng() % 6;
        std::vector<std::int64_t> seq(n);
        for (auto& v : seq) {
          // Stay inside int64: nudge boundary values inward only.
          const auto near = static_cast<std::int64_t>(rng() % 5);
          const auto k = static_cast<std::int64_t>(1 + rng() % n);
          v = rng() % 2 ? max / k - near : min / k + near;
        }
        crafted.push_back(seq);
      }
      for (const auto& seq : crafted) {
        bool expect_overflow = false;
        cpp_int acc = 0;
        for (auto v : seq) {
          acc += v;
          if (acc > hi || acc < lo) expect_overflow = true;
        }
        std::vector<std::vector<std::int64_t>> packets;
        for (auto v : seq) packets.push_back({v});
        bool threw = false;
        std::int64_t got = 0;
        try {
          got = switch_aggregate(packets, m)[0];
        } catch (const Error& e) {
          threw = e.code() == ErrorCode::kSwitchOverflow;
        }
        ok = ok && threw == expect_overflow && (threw || cpp_int(got) == acc);
        ++cases;
        overflows += expect_overflow;
      }
    }
    d = std::to_string(cases) + " boundary cases (" + std::to_string(overflows) +
        " overflowing) on 32- and 64-bit accumulators";
    return ok;
  });

  criterion("switch-error-bound", [&](std::string& d) {
    bool ok = true;
    double worst = 0.0;
    for (auto [racks, per, scale] : {std::tuple{2u, 4u, 65536ull}, {4u, 2u, 4096ull}, {1u, 8u, 1048576ull},
                                     {3u, 5u, 256ull}}) {
      SwitchExperiment e;
      e.racks = racks;
      e.workers_per_rack = per;
      e.model_bytes = 256 << 10;
      e.model.scale = scale;
      e.seed = racks * 31 + per;
      const auto r = run_switch_experiment(e);
      ok = ok && r.max_abs_error <= r.error_bound;
      worst = std::max(worst, r.max_abs_error / r.error_bound);
    }
    d = "max error / bound over 4 configurations: " + std::to_string(worst);
    return ok;
  });

  criterion("switch-cross-rack-traffic", [&](std::string& d) {
    SwitchExperiment e;
    e.racks = 2;
    e.workers_per_rack = 4;
    e.model_bytes = 1 << 20;
    const auto r = run_switch_experiment(e);
    const std::uint64_t flat = 2ull * 8 * e.model_bytes;
    const bool ok = r.traffic.cross_rack_bytes() * 4 == flat && r.comparison.flat_cross_rack_bytes == flat &&
                    r.comparison.hier_cross_rack_bytes == r.traffic.cross_rack_bytes();
    d = "8 workers / 2 racks: hierarchical " + std::to_string(r.traffic.cross_rack_bytes()) + " bytes, flat " +
        std::to_string(flat);
    return ok;
  });

  criterion("convergence", [&](std::string& d) {
    bool ok = base.losses.size() > 10;
    for (std::size_t t = 1; ok && t <= 10; ++t) ok = base.losses[t] < base.losses[t - 1];
    char buf[96];
    std::snprintf(buf, sizeof(buf), "loss %.6f -> %.6f over 10 iterations", base.losses.at(0), base.losses.at(10));
    d = buf;
    return ok;
  });

  {
    ExperimentConfig c;
    c.mode = WorkerMode::kZeroCompute;
    c.workers = 4;
    c.model_bytes = 1 << 20;
    c.key_count = 4;
    c.cores = 4;
    c.iterations = 200;
    c.agg_mode = AggregationMode::kFast;
    try {
      const auto r = run_experiment(c);
      emit_csv(r.report, csv_path);
      const double its = c.iterations / r.elapsed_s;
      const double chunks_per_s = static_cast<double>(r.applied_updates) / r.elapsed_s;
      std::ofstream cores(csv_path + ".cores.csv");
      cores << "core,chunk_count,byte_load,chunks_per_s\n";
      const auto& loads = r.server_metrics.front().core_loads;
      for (std::size_t k = 0; k < loads.size(); ++k) {
        cores << k << ',' << loads[k].chunk_count << ',' << loads[k].byte_load << ','
              << chunks_per_s * static_cast<double>(loads[k].byte_load) / static_cast<double>(c.model_bytes) << '\n';
      }
      char buf[160];
      std::snprintf(buf, sizeof(buf), "%.0f iterations/s, %.0f chunks/s (4 workers, 1 MB, in-process, fast)", its,
                    chunks_per_s);
      if (!r.passed()) {
        report("throughput-smoke", false, failed_checks(r));
      } else {
        std::printf("%s throughput-smoke: %s\n", its >= 200.0 ? "PASS" : "WARN", buf);
      }
    } catch (const std::exception& e) {
      report("throughput-smoke", false, e.what());
    }
  }

  return failures == 0 ? 0 : 1;
}
