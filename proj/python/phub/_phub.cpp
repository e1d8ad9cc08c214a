#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "phub/assignment.hpp"
#include "phub/config.hpp"
#include "phub/error.hpp"
#include "phub/harness.hpp"
#include "phub/model.hpp"
#include "phub/switch_emu.hpp"
#include "phub/wire.hpp"

namespace py = pybind11;
using namespace phub;

namespace {

py::bytes to_py(const Bytes& b) { return py::bytes(reinterpret_cast<const char*>(b.data()), b.size()); }

Bytes from_py(const py::bytes& b) {
  std::string_view s = b;
  return Bytes(s.begin(), s.end());
}

}  // namespace

PYBIND11_MODULE(_phub, m) {
  m.doc() = "Parameter-server core: chunking, wire format, assignment, experiments, switch emulation.";

  py::register_exception<Error>(m, "PhubError", PyExc_RuntimeError);

  m.attr("HEADER_BYTES") = kHeaderBytes;
  m.attr("WIRE_MAGIC") = kWireMagic;
  m.attr("DEFAULT_CHUNK_BYTES") = kDefaultChunkBytes;

  py::class_<KeySpec>(m, "KeySpec")
      .def_readonly("key_id", &KeySpec::key_id)
      .def_readonly("element_count", &KeySpec::element_count)
      .def("byte_size", &KeySpec::byte_size);

  py::class_<ModelSpec>(m, "ModelSpec")
      .def_readonly("keys", &ModelSpec::keys)
      .def_readonly("total_bytes", &ModelSpec::total_bytes)
      .def("key_count", &ModelSpec::key_count);

  py::class_<ChunkDescriptor>(m, "ChunkDescriptor")
      .def_readonly("key_id", &ChunkDescriptor::key_id)
      .def_readonly("chunk_index", &ChunkDescriptor::chunk_index)
      .def_readonly("element_offset", &ChunkDescriptor::element_offset)
      .def_readonly("element_count", &ChunkDescriptor::element_count)
      .def_readonly("byte_size", &ChunkDescriptor::byte_size);

  m.def("build_model_spec", [](const std::vector<std::uint64_t>& counts) { return build_model_spec(counts); });
  m.def("partition_model", &partition_model, py::arg("spec"), py::arg("chunk_bytes") = kDefaultChunkBytes);
  m.def("spec_hash", &spec_hash);

  py::class_<ChunkPlacement>(m, "ChunkPlacement")
      .def_readonly("core_shard", &ChunkPlacement::core_shard)
      .def_readonly("endpoint", &ChunkPlacement::endpoint)
      .def_readonly("core_group", &ChunkPlacement::core_group);

  py::class_<CoreLoad>(m, "CoreLoad")
      .def_readonly("chunk_count", &CoreLoad::chunk_count)
      .def_readonly("byte_load", &CoreLoad::byte_load);

  py::class_<ChunkAssignment>(m, "ChunkAssignment")
      .def("placements", &ChunkAssignment::placements)
      .def("placement", &ChunkAssignment::placement, py::arg("key_id"), py::arg("chunk_index"))
      .def("core_count", &ChunkAssignment::core_count)
      .def("endpoint_count", &ChunkAssignment::endpoint_count);

  m.def(
      "assign_chunks",
      [](const std::vector<ChunkDescriptor>& chunks, std::uint32_t cores, std::uint32_t groups,
         std::uint32_t endpoints) { return assign_chunks(chunks, cores, groups, endpoints); },
      py::arg("chunks"), py::arg("cores"), py::arg("groups") = 1, py::arg("endpoints") = 1);
  m.def("load_report", &load_report);

  py::enum_<MsgType>(m, "MsgType")
      .value("REGISTER", MsgType::kRegister)
      .value("REGISTER_ACK", MsgType::kRegisterAck)
      .value("PUSH_GRAD", MsgType::kPushGrad)
      .value("MODEL_CHUNK", MsgType::kModelChunk)
      .value("FIN", MsgType::kFin)
      .value("ERROR", MsgType::kError);

  py::class_<Message>(m, "Message")
      .def(py::init<>())
      .def(py::init([](MsgType type, std::uint16_t worker_id, std::uint32_t iteration, std::uint32_t key_id,
                       std::uint32_t chunk_index, const py::bytes& payload) {
             return Message{type, worker_id, iteration, key_id, chunk_index, from_py(payload)};
           }),
           py::arg("type"), py::arg("worker_id") = 0, py::arg("iteration") = 0, py::arg("key_id") = 0,
           py::arg("chunk_index") = 0, py::arg("payload") = py::bytes())
      .def_readwrite("type", &Message::type)
      .def_readwrite("worker_id", &Message::worker_id)
      .def_readwrite("iteration", &Message::iteration)
      .def_readwrite("key_id", &Message::key_id)
      .def_readwrite("chunk_index", &Message::chunk_index)
      .def_property(
          "payload", [](const Message& msg) { return to_py(msg.payload); },
          [](Message& msg, const py::bytes& b) { msg.payload = from_py(b); })
      .def("__eq__", [](const Message& a, const Message& b) { return a == b; });

  m.def("encode_message", [](const Message& msg) { return to_py(encode_message(msg)); });
  m.def(
      "decode_message",
      [](const py::bytes& data) -> py::object {
        const Bytes buf = from_py(data);
        auto r = decode_message(buf);
        if (r.status == DecodeResult::Status::kNeedMoreBytes) return py::none();
        return py::make_tuple(r.message, r.consumed);
      },
      "Returns (message, consumed) or None when the frame is incomplete.");
  m.def("floats_to_payload", [](const std::vector<float>& v) { return to_py(floats_to_payload(v)); });
  m.def("payload_to_floats", [](const py::bytes& b) { return payload_to_floats(from_py(b)); });

  py::class_<CheckResult>(m, "CheckResult")
      .def_readonly("name", &CheckResult::name)
      .def_readonly("passed", &CheckResult::passed)
      .def_readonly("detail", &CheckResult::detail);

  py::class_<MetricsRow>(m, "MetricsRow")
      .def_readonly("iteration", &MetricsRow::iteration)
      .def_readonly("wall_ms", &MetricsRow::wall_ms)
      .def_readonly("push_bytes", &MetricsRow::push_bytes)
      .def_readonly("bcast_bytes", &MetricsRow::bcast_bytes)
      .def_readonly("header_bytes", &MetricsRow::header_bytes)
      .def_readonly("chunks_completed", &MetricsRow::chunks_completed)
      .def_readonly("max_core_load", &MetricsRow::max_core_load)
      .def_readonly("min_core_load", &MetricsRow::min_core_load)
      .def_readonly("loss", &MetricsRow::loss);

  py::class_<ExperimentResult>(m, "ExperimentResult")
      .def_property_readonly("rows", [](const ExperimentResult& r) { return r.report.rows; })
      .def_property_readonly("csv", [](const ExperimentResult& r) { return format_csv(r.report); })
      .def_readonly("final_model", &ExperimentResult::final_model)
      .def_readonly("losses", &ExperimentResult::losses)
      .def_readonly("applied_updates", &ExperimentResult::applied_updates)
      .def_readonly("chunk_count", &ExperimentResult::chunk_count)
      .def_readonly("elapsed_s", &ExperimentResult::elapsed_s)
      .def_readonly("checks", &ExperimentResult::checks)
      .def("passed", &ExperimentResult::passed);

  m.def(
      "run_experiment",
      [](const std::string& text, bool single_thread) {
        auto cfg = parse_experiment(KeyValueConfig::parse(text));
        if (cfg.launch == Launch::kSubprocess) {
          throw Error(ErrorCode::kInvalidConfig, "subprocess launch needs the phub executable; use the bench CLI");
        }
        cfg.single_thread = cfg.single_thread || single_thread;
        py::gil_scoped_release release;
        auto result = run_experiment(cfg);
        result.checks = standard_checks(cfg, result);
        return result;
      },
      py::arg("config_text"), py::arg("single_thread") = false,
      "Runs an in-process experiment described by config text and attaches the standard checks.");

  py::class_<OracleRun>(m, "OracleRun")
      .def_readonly("weights", &OracleRun::weights)
      .def_readonly("losses", &OracleRun::losses);
  m.def("train_single_process", &train_single_process, py::arg("seed"), py::arg("samples"), py::arg("dim"),
        py::arg("workers"), py::arg("learning_rate"), py::arg("iterations"));

  py::class_<SwitchModel>(m, "SwitchModel")
      .def(py::init<>())
      .def_readwrite("scale", &SwitchModel::scale)
      .def_readwrite("accumulator_width", &SwitchModel::accumulator_width)
      .def_readwrite("region_bytes", &SwitchModel::region_bytes)
      .def_readwrite("storage_slots", &SwitchModel::storage_slots)
      .def("acc_max", &SwitchModel::acc_max)
      .def("acc_min", &SwitchModel::acc_min);

  m.def(
      "quantize",
      [](const std::vector<float>& v, const SwitchModel& model, std::uint32_t workers) {
        return quantize(v, model, workers);
      },
      py::arg("values"), py::arg("model"), py::arg("worker_count") = 1);
  m.def("dequantize", [](const std::vector<std::int64_t>& v, std::uint64_t scale) { return dequantize(v, scale); });
  m.def("switch_aggregate", [](const std::vector<std::vector<std::int64_t>>& packets, const SwitchModel& model) {
    return switch_aggregate(packets, model);
  });
  m.def(
      "traffic_compare",
      [](std::uint32_t racks, std::uint32_t per_rack, std::uint64_t model_bytes) {
        auto r = traffic_compare(uniform_topology(racks, per_rack), model_bytes, racks * per_rack);
        return py::make_tuple(r.flat_cross_rack_bytes, r.hier_cross_rack_bytes);
      },
      py::arg("racks"), py::arg("workers_per_rack"), py::arg("model_bytes"),
      "Returns (flat, hierarchical) cross-rack bytes.");
}
