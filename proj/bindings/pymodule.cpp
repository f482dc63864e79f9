// python surface: config handling, pipeline stages, and a Session wrapper
// around a finished run for generation, steering and prototype queries.

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <string>
#include <vector>

#include "protosteer/io.hpp"
#include "protosteer/pipeline.hpp"
#include "protosteer/proto.hpp"
#include "protosteer/stylegen.hpp"

namespace py = pybind11;
using namespace ps;

namespace {

pipeline::ExperimentConfig parse_config(const std::string& text) {
  return pipeline::config_from_json(io::json::parse(text));
}

void run_stage(const std::string& stage, const std::string& config_json) {
  const auto cfg = parse_config(config_json);
  if (stage == "gen-data") {
    pipeline::stage_gen_data(cfg);
  } else if (stage == "train-lm") {
    pipeline::stage_train_lm(cfg);
  } else if (stage == "dump-acts") {
    pipeline::stage_dump_acts(cfg);
  } else if (stage == "train-sae") {
    pipeline::stage_train_sae(cfg);
  } else if (stage == "build-protos") {
    pipeline::stage_build_protos(cfg);
  } else if (stage == "eval-fewshot") {
    pipeline::stage_eval_fewshot(cfg);
  } else if (stage == "eval-steer") {
    pipeline::stage_eval_steer(cfg);
  } else if (stage == "baselines") {
    pipeline::stage_baselines(cfg);
  } else {
    throw std::invalid_argument("unknown stage '" + stage + "'");
  }
}

// borrows nothing: owns the model, bank, prototypes and specs of one run
class Session {
 public:
  explicit Session(const std::string& config_json) : cfg_(parse_config(config_json)) {
    const auto p = pipeline::Paths::at(cfg_.out_dir);
    const std::string kind = cfg_.hook_site == "query" ? "sae-query" : "sae-residual";
    loaded_ = pipeline::load_source(cfg_, kind);
    protos_ = proto::load_prototypes(p.protos);
    specs_ = io::load_specs(p.specs);
  }

  std::vector<int> generate(const std::vector<int>& prompt, int max_new) const {
    return microlm::generate(loaded_.lm, prefix(prompt), cap(max_new)).tokens;
  }

  py::dict steer(const std::vector<int>& prompt, int target, const std::string& method,
                 int max_new) const {
    const auto sg = pipeline::generate_steered(loaded_.lm, loaded_.source(), protos_, prompt,
                                               target, cfg_.mode, cfg_.steer, cap(max_new), method);
    py::dict out;
    out["tokens"] = sg.tokens;
    out["steps"] = sg.mean_steps;
    out["skipped"] = sg.skipped;
    out["judged"] = pipeline::judge_generated(sg.tokens, specs_, loaded_.lm.cfg.eos_token);
    return out;
  }

  proto::Code embed(const std::vector<int>& prompt, const std::vector<int>& response) const {
    stylegen::StyledExample ex;
    ex.prompt = prompt;
    ex.response = response;
    return proto::embed_example(loaded_.source(), ex);
  }

  std::vector<double> classify(const proto::Code& code) const {
    return proto::classify(code, protos_, cfg_.steer.distance);
  }

  int judge(const std::vector<int>& tokens) const {
    return pipeline::judge_generated(tokens, specs_, loaded_.lm.cfg.eos_token);
  }

  std::vector<proto::Code> prototypes() const { return protos_.mu; }

  std::vector<std::string> class_names() const {
    std::vector<std::string> names;
    for (const auto& s : specs_) names.push_back(s.name);
    return names;
  }

 private:
  std::vector<int> prefix(const std::vector<int>& prompt) const {
    std::vector<int> p;
    p.reserve(prompt.size() + 2);
    p.push_back(loaded_.lm.cfg.bos_token);
    p.insert(p.end(), prompt.begin(), prompt.end());
    p.push_back(loaded_.lm.cfg.sep_token);
    return p;
  }
  int cap(int max_new) const { return max_new > 0 ? max_new : cfg_.eval.max_new; }

  pipeline::ExperimentConfig cfg_;
  pipeline::LoadedSource loaded_;
  proto::PrototypeBank protos_;
  std::vector<stylegen::StyleSpec> specs_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "prototype-guided latent steering for a small decoder-only model";
  m.attr("__version__") = "0.1.0";

  m.def("default_config", [] { return pipeline::config_to_json(pipeline::default_config()).dump(2); },
        "resolved default experiment config as a json string");
  m.def("apply_override",
        [](const std::string& config_json, const std::string& assignment) {
          io::json j = io::json::parse(config_json);
          pipeline::apply_override(j, assignment);
          return j.dump(2);
        },
        py::arg("config_json"), py::arg("assignment"),
        "apply one dotted key=value override and return the new config json");
  m.def("run_stage", &run_stage, py::arg("stage"), py::arg("config_json"),
        "run one named pipeline stage against the config's run directory");
  m.def("run_all", [](const std::string& config_json) { pipeline::run_end_to_end(parse_config(config_json)); },
        py::arg("config_json"), "run the full pipeline: corpus through reports");
  m.def("run_sweep",
        [](const std::string& config_json, const std::string& axis) {
          pipeline::run_sweep(parse_config(config_json), axis);
        },
        py::arg("config_json"), py::arg("axis"),
        "sweep one config axis: layer | alpha | latent | penalty | site");

  py::class_<Session>(m, "Session")
      .def(py::init<const std::string&>(), py::arg("config_json"),
           "load the artifacts of a finished run")
      .def("generate", &Session::generate, py::arg("prompt"), py::arg("max_new") = -1,
           "greedy continuation of a prompt; returns generated tokens")
      .def("steer", &Session::steer, py::arg("prompt"), py::arg("target"),
           py::arg("method") = "gradient", py::arg("max_new") = -1,
           "steered continuation toward a target class")
      .def("embed", &Session::embed, py::arg("prompt"), py::arg("response"),
           "pooled code of one example")
      .def("classify", &Session::classify, py::arg("code"),
           "class probabilities of a code under the prototype bank")
      .def("judge", &Session::judge, py::arg("tokens"), "unigram judge class of generated tokens")
      .def("prototypes", &Session::prototypes, "class prototype codes")
      .def("class_names", &Session::class_names);
}
