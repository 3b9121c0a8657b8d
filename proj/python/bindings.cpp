#include <sstream>

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "mshed/errors.hpp"
#include "mshed/harness.hpp"
#include "mshed/numerics/graph.hpp"

namespace py = pybind11;
using namespace mshed;

namespace {

py::array_t<float> to_numpy(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<float> out(shape);
  const auto src = t.data();
  std::copy(src.begin(), src.end(), out.mutable_data());
  return out;
}

py::dict candidate_dict(const shedder::Candidate& c) {
  py::dict d;
  d["kind"] = std::string(model::to_string(c.kind));
  d["block"] = c.block_index;
  d["group"] = c.group;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Selective state-space language models with training-free structured pruning.";

  auto base = py::register_exception<Error>(m, "Error");
  py::register_exception<DimensionError>(m, "DimensionError", base);
  py::register_exception<ContractError>(m, "ContractError", base);
  py::register_exception<NumericError>(m, "NumericError", base);
  py::register_exception<ValidationError>(m, "ValidationError", base);
  py::register_exception<InputError>(m, "InputError", base);
  py::register_exception<StateError>(m, "StateError", base);
  py::register_exception<CapacityError>(m, "CapacityError", base);
  py::register_exception<IoError>(m, "IoError", base);
  py::register_exception<ConfigError>(m, "ConfigError", base);

  py::class_<model::ArchDescriptor>(m, "ArchDescriptor")
      .def(py::init<>())
      .def_static("uniform",
                  [](const std::string& kind, std::int64_t n) {
                    return model::ArchDescriptor::uniform(model::parse_block_kind(kind), n);
                  })
      .def_static("hybrid",
                  [](std::int64_t n, std::vector<std::int64_t> positions) {
                    return model::ArchDescriptor::hybrid(n, std::move(positions));
                  })
      .def_static("from_json", &model::ArchDescriptor::from_json)
      .def_readwrite("vocab", &model::ArchDescriptor::vocab)
      .def_readwrite("d_model", &model::ArchDescriptor::d_model)
      .def_readwrite("d_inner", &model::ArchDescriptor::d_inner)
      .def_readwrite("ssm_state", &model::ArchDescriptor::ssm_state)
      .def_readwrite("conv_width", &model::ArchDescriptor::conv_width)
      .def_readwrite("n_heads", &model::ArchDescriptor::n_heads)
      .def_readwrite("mlp_widths", &model::ArchDescriptor::mlp_widths)
      .def_readonly("n_blocks", &model::ArchDescriptor::n_blocks)
      .def_property_readonly("block_kinds",
                             [](const model::ArchDescriptor& d) {
                               std::vector<std::string> out;
                               for (auto k : d.block_kinds) out.emplace_back(model::to_string(k));
                               return out;
                             })
      .def("validate", &model::ArchDescriptor::validate)
      .def("to_json", &model::ArchDescriptor::to_json);

  py::class_<model::Model>(m, "Model")
      .def_static("build", &model::Model::build, py::arg("descriptor"), py::arg("seed") = 0)
      .def_static("load", [](const std::string& path) { return model::load_checkpoint(path); })
      .def("save", [](const model::Model& self, const std::string& path) { model::save_checkpoint(self, path); })
      .def_property_readonly("descriptor", &model::Model::descriptor)
      .def("forward",
           [](const model::Model& self, const std::vector<std::int32_t>& tokens) {
             NoGradGuard no_grad;
             return to_numpy(self.forward(tokens));
           })
      .def("generate",
           [](const model::Model& self, const std::vector<std::int32_t>& prompt, std::int64_t new_tokens) {
             model::Session s(self);
             auto logits = s.prefill(prompt);
             std::vector<std::int32_t> out;
             for (std::int64_t k = 0; k < new_tokens; ++k) {
               const auto next =
                   static_cast<std::int32_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
               out.push_back(next);
               if (k + 1 < new_tokens) logits = s.step(next);
             }
             return out;
           })
      .def("remove",
           [](model::Model& self, const std::string& kind, std::int64_t block) {
             self.remove(model::parse_structure_kind(kind), block);
           })
      .def("slice_mlp", &model::Model::slice_mlp)
      .def("registry",
           [](const model::Model& self) {
             py::list out;
             for (const auto& s : self.registry()) {
               py::dict d;
               d["kind"] = std::string(model::to_string(s.kind));
               d["block"] = s.block_index;
               d["alive"] = s.alive;
               d["params"] = s.param_count;
               out.append(d);
             }
             return out;
           })
      .def_property_readonly("dense_param_count", &model::Model::dense_param_count)
      .def_property_readonly("active_param_count",
                             [](const model::Model& self) { return self.active_param_count(); })
      .def("prune_ratio", [](const model::Model& self) { return self.prune_ratio(); })
      .def("clone", &model::Model::clone)
      .def("compact", &model::Model::compact);

  py::class_<training::Corpus>(m, "Corpus")
      .def_static("bundled", &training::Corpus::bundled)
      .def_static("load", [](const std::string& path) { return training::Corpus::load(path); })
      .def_static("from_text", [](const std::string& text) { return training::Corpus::from_text(text); })
      .def_property_readonly("size", [](const training::Corpus& c) { return c.ids.size(); })
      .def("validation_windows",
           [](const training::Corpus& c, std::int64_t length, std::int64_t count) {
             return c.windows(c.validation, length, count);
           })
      .def("calibration_windows", [](const training::Corpus& c, std::int64_t length, std::int64_t count) {
        return c.windows(c.calibration, length, count);
      });

  m.def("encode", [](const std::string& text) { return training::encode(text); });
  m.def("decode", [](const std::vector<std::int32_t>& ids) { return training::decode(ids); });

  py::class_<training::TrainConfig>(m, "TrainConfig")
      .def(py::init<>())
      .def_readwrite("steps", &training::TrainConfig::steps)
      .def_readwrite("batch_size", &training::TrainConfig::batch_size)
      .def_readwrite("seq_len", &training::TrainConfig::seq_len)
      .def_readwrite("lr", &training::TrainConfig::lr)
      .def_readwrite("warmup", &training::TrainConfig::warmup)
      .def_readwrite("clip_norm", &training::TrainConfig::clip_norm)
      .def_readwrite("seed", &training::TrainConfig::seed);

  m.def(
      "train",
      [](model::Model& model, const training::Corpus& corpus, const training::TrainConfig& cfg) {
        std::vector<double> losses;
        for (const auto& p : training::train(model, corpus, cfg).curve) losses.push_back(p.loss);
        return losses;
      },
      py::arg("model"), py::arg("corpus"), py::arg("config"));
  m.def("perplexity", [](const model::Model& model, const std::vector<training::TokenSeq>& data) {
    return training::perplexity(model, data);
  });

  m.def(
      "prune",
      [](model::Model& model, const std::string& schedule, const std::vector<training::TokenSeq>& calibration,
         int threads) {
        shedder::CalibrationSet cal{calibration};
        std::vector<shedder::ImportanceRecord> trace;
        const auto plan = shedder::run_schedule(model, shedder::Schedule::parse(schedule), cal, {threads}, &trace);
        py::list actions, records;
        for (const auto& a : plan.actions) {
          py::dict d;
          d["stage"] = a.stage;
          d["iteration"] = a.iteration;
          d["target"] = candidate_dict(a.target);
          d["score"] = a.score;
          actions.append(d);
        }
        for (const auto& r : trace) {
          py::dict d;
          d["stage"] = r.stage;
          d["iteration"] = r.iteration;
          d["candidate"] = candidate_dict(r.candidate);
          d["score"] = r.score;
          d["selected"] = r.selected;
          records.append(d);
        }
        return py::make_tuple(actions, records, plan.truncated);
      },
      py::arg("model"), py::arg("schedule"), py::arg("calibration"), py::arg("threads") = 1);

  m.def(
      "run",
      [](const std::string& command, const std::string& config_text, const std::string& out) {
        auto cfg = harness::RunConfig::parse(config_text);
        cfg.command = command;
        if (!out.empty()) cfg.out = out;
        std::ostringstream log;
        harness::run(cfg, log);
        return log.str();
      },
      py::arg("command"), py::arg("config") = "", py::arg("out") = "");
}
