// Python bindings. The module mirrors the CLI workflow: parse or generate a
// dataset, train models, score them on the cost-accuracy plane, reduce
// measurements to a frontier, and export episode traces. Handles are opaque
// wrappers; measurements cross the boundary as plain dicts and JSON text.

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cwcf/checkpoint.hpp"
#include "cwcf/dataset.hpp"
#include "cwcf/evaluation.hpp"
#include "cwcf/model.hpp"
#include "cwcf/schema.hpp"
#include "cwcf/training.hpp"

namespace py = pybind11;

namespace {

struct PySchema {
  std::shared_ptr<const cwcf::Schema> ptr;
};

struct PyDataset {
  cwcf::Dataset ds;
};

struct PyModel {
  cwcf::ModelParams params;
};

cwcf::EvalMode parse_mode(const std::string& mode) {
  if (mode == "greedy") return cwcf::EvalMode::Greedy;
  if (mode == "sampled") return cwcf::EvalMode::Sampled;
  throw std::invalid_argument("mode must be 'greedy' or 'sampled'");
}

py::dict point_to_dict(const cwcf::EvalPoint& p) {
  py::dict d;
  d["avg_cost"] = p.avg_cost;
  d["accuracy"] = p.accuracy;
  d["avg_reward"] = p.avg_reward;
  d["lambda"] = p.lambda;
  d["seed"] = p.seed;
  d["split"] = p.split;
  return d;
}

cwcf::EvalPoint point_from_dict(const py::dict& d) {
  cwcf::EvalPoint p;
  p.avg_cost = d["avg_cost"].cast<double>();
  p.accuracy = d["accuracy"].cast<double>();
  if (d.contains("avg_reward")) p.avg_reward = d["avg_reward"].cast<double>();
  if (d.contains("lambda")) p.lambda = d["lambda"].cast<double>();
  if (d.contains("seed")) p.seed = d["seed"].cast<uint64_t>();
  if (d.contains("split")) p.split = d["split"].cast<std::string>();
  return p;
}

py::dict validation_to_dict(const cwcf::ValidationPoint& vp) {
  py::dict d;
  d["step"] = vp.step;
  d["val_reward"] = vp.val_reward;
  d["val_accuracy"] = vp.val_accuracy;
  d["val_cost"] = vp.val_cost;
  d["lr"] = vp.lr;
  d["alpha_h"] = vp.alpha_h;
  return d;
}

const cwcf::Sample& sample_at(const PyDataset& ds, int index) {
  if (index < 0 || index >= static_cast<int>(ds.ds.samples.size()))
    throw std::out_of_range("sample index out of range");
  return ds.ds.samples[index];
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() =
      "Classification of tree-structured samples with costly feature "
      "acquisition: HMIL embeddings, a hierarchical acquisition policy, "
      "actor-critic training and cost-accuracy evaluation.";

  py::class_<PySchema>(m, "Schema")
      .def_static(
          "parse",
          [](const std::string& text) {
            return PySchema{std::make_shared<const cwcf::Schema>(
                cwcf::parse_schema(text))};
          },
          py::arg("text"), "Parse a schema from its JSON text.")
      .def("serialize",
           [](const PySchema& s) { return cwcf::serialize_schema(*s.ptr); })
      .def_property_readonly(
          "class_names",
          [](const PySchema& s) { return s.ptr->class_names; })
      .def("__repr__", [](const PySchema& s) {
        return "<Schema with " + std::to_string(s.ptr->class_count()) +
               " classes>";
      });

  py::class_<PyDataset>(m, "Dataset")
      .def_property_readonly(
          "size",
          [](const PyDataset& d) { return d.ds.samples.size(); })
      .def_property_readonly(
          "split_sizes",
          [](const PyDataset& d) {
            return py::make_tuple(d.ds.train.size(), d.ds.val.size(),
                                  d.ds.test.size());
          })
      .def(
          "split",
          [](PyDataset& d, int n_train, int n_val, int n_test, uint64_t seed) {
            cwcf::split_dataset(d.ds, n_train, n_val, n_test, seed);
          },
          py::arg("n_train"), py::arg("n_val"), py::arg("n_test"),
          py::arg("seed") = 0,
          "Reshuffle and repartition; normalization stats follow the new "
          "training split.")
      .def(
          "label",
          [](const PyDataset& d, int index) {
            return d.ds.schema->class_names[sample_at(d, index).label];
          },
          py::arg("index"))
      .def(
          "sample_json",
          [](const PyDataset& d, int index) {
            return cwcf::serialize_sample(*d.ds.schema, sample_at(d, index));
          },
          py::arg("index"), "One sample as its JSONL line.")
      .def("serialize",
           [](const PyDataset& d) { return cwcf::serialize_samples(d.ds); })
      .def("__len__",
           [](const PyDataset& d) { return d.ds.samples.size(); });

  py::class_<PyModel>(m, "Model")
      .def_property_readonly(
          "embed_dim", [](const PyModel& mdl) { return mdl.params.embed_dim; })
      .def(
          "save",
          [](PyModel& mdl, const std::string& path) {
            cwcf::save_model(path, mdl.params);
          },
          py::arg("path"))
      .def("serialize",
           [](PyModel& mdl) {
             return py::bytes(cwcf::serialize_model(mdl.params));
           });

  py::class_<cwcf::TrainConfig>(m, "TrainConfig")
      .def(py::init<>())
      .def_readwrite("lambda_", &cwcf::TrainConfig::lambda)
      .def_readwrite("gamma", &cwcf::TrainConfig::gamma)
      .def_readwrite("batch_size", &cwcf::TrainConfig::batch_size)
      .def_readwrite("epoch_length", &cwcf::TrainConfig::epoch_length)
      .def_readwrite("lr0", &cwcf::TrainConfig::lr0)
      .def_readwrite("alpha_v", &cwcf::TrainConfig::alpha_v)
      .def_readwrite("alpha_h0", &cwcf::TrainConfig::alpha_h0)
      .def_readwrite("l2", &cwcf::TrainConfig::l2)
      .def_readwrite("clip_norm", &cwcf::TrainConfig::clip_norm)
      .def_readwrite("seed", &cwcf::TrainConfig::seed)
      .def_readwrite("pretrain_epochs", &cwcf::TrainConfig::pretrain_epochs)
      .def_readwrite("patience", &cwcf::TrainConfig::patience)
      .def_readwrite("embed_dim", &cwcf::TrainConfig::embed_dim)
      .def("validate", &cwcf::TrainConfig::validate)
      .def("total_steps", &cwcf::TrainConfig::total_steps)
      .def("lr_at", &cwcf::TrainConfig::lr_at, py::arg("step"))
      .def("alpha_h_at", &cwcf::TrainConfig::alpha_h_at, py::arg("step"))
      .def("to_json", [](const cwcf::TrainConfig& cfg) {
        return cwcf::serialize_train_config(cfg);
      })
      .def_static(
          "from_json",
          [](const std::string& text) {
            return cwcf::parse_train_config(text);
          },
          py::arg("text"));

  m.def(
      "parse_schema",
      [](const std::string& text) {
        return PySchema{
            std::make_shared<const cwcf::Schema>(cwcf::parse_schema(text))};
      },
      py::arg("text"));

  m.def(
      "load_dataset",
      [](const PySchema& schema, const std::string& samples_document) {
        return PyDataset{cwcf::load_dataset(schema.ptr, samples_document)};
      },
      py::arg("schema"), py::arg("samples_document"),
      "Parse a JSONL samples document; every sample starts in the training "
      "split.");

  m.def(
      "generate_synthetic",
      [](int classes, int samples, int items_min, int items_max,
         int distractors, double set_cost, double signal_cost,
         double distractor_cost, uint64_t seed) {
        cwcf::SynthConfig cfg{classes,     samples,     items_min,
                              items_max,   distractors, set_cost,
                              signal_cost, distractor_cost};
        auto [schema, ds] = cwcf::generate_synthetic(cfg, seed);
        return py::make_tuple(PySchema{schema}, PyDataset{std::move(ds)});
      },
      py::arg("classes") = 2, py::arg("samples") = 1000,
      py::arg("items_min") = 2, py::arg("items_max") = 4,
      py::arg("distractors") = 3, py::arg("set_cost") = 2.0,
      py::arg("signal_cost") = 1.0, py::arg("distractor_cost") = 1.0,
      py::arg("seed") = 0,
      "Label-balanced synthetic dataset whose label is the majority signal "
      "of a costly item set.");

  m.def(
      "init_model",
      [](const PySchema& schema, const PyDataset& ds, uint64_t seed,
         int embed_dim) {
        return PyModel{cwcf::init_model(schema.ptr, ds.ds.norm, seed,
                                        embed_dim)};
      },
      py::arg("schema"), py::arg("dataset"), py::arg("seed") = 0,
      py::arg("embed_dim") = cwcf::kEmbedDim);

  m.def(
      "load_model",
      [](const std::string& path, const PySchema& schema) {
        return PyModel{cwcf::load_model(path, schema.ptr)};
      },
      py::arg("path"), py::arg("schema"));

  m.def(
      "pretrain_classifier",
      [](const PyDataset& ds, const PyModel& model,
         const cwcf::TrainConfig& cfg) {
        cwcf::ClassifierTrainResult res =
            cwcf::pretrain_classifier(ds.ds, model.params, cfg);
        py::dict out;
        out["model"] = PyModel{std::move(res.params)};
        out["val_ce"] = res.val_ce;
        out["best_epoch"] = res.best_epoch;
        return out;
      },
      py::arg("dataset"), py::arg("model"), py::arg("config"),
      "Cross-entropy training of the classifier path on randomly masked "
      "samples.");

  m.def(
      "train",
      [](const PyDataset& ds, const PyModel& model,
         const cwcf::TrainConfig& cfg) {
        cwcf::TrainedModel tm = cwcf::train(ds.ds, model.params, cfg);
        py::list metrics;
        for (const cwcf::ValidationPoint& vp : tm.metrics)
          metrics.append(validation_to_dict(vp));
        py::dict out;
        out["model"] = PyModel{std::move(tm.params)};
        out["metrics"] = metrics;
        out["best_index"] = tm.best_index;
        out["max_postclip_norm"] = tm.max_postclip_norm;
        return out;
      },
      py::arg("dataset"), py::arg("model"), py::arg("config"),
      "Actor-critic training of the acquisition policy; returns the best "
      "validation snapshot and the validation log.");

  m.def(
      "train_hmil_full",
      [](const PyDataset& ds, const cwcf::TrainConfig& cfg) {
        cwcf::ClassifierTrainResult res = cwcf::train_hmil_full(ds.ds, cfg);
        py::dict out;
        out["model"] = PyModel{std::move(res.params)};
        out["val_ce"] = res.val_ce;
        out["best_epoch"] = res.best_epoch;
        return out;
      },
      py::arg("dataset"), py::arg("config"),
      "Full-information classifier: the accuracy ceiling reference.");

  m.def(
      "train_rs_baseline",
      [](const PyDataset& ds, double budget, const cwcf::TrainConfig& cfg) {
        cwcf::RSPolicy policy = cwcf::train_rs_baseline(ds.ds, budget, cfg);
        return PyModel{std::move(policy.params)};
      },
      py::arg("dataset"), py::arg("budget"), py::arg("config"),
      "Classifier trained on random acquisitions under a budget.");

  m.def(
      "evaluate",
      [](PyModel& model, const PyDataset& ds, const std::string& split,
         double lambda, const std::string& mode, uint64_t seed) {
        return point_to_dict(cwcf::evaluate(model.params, ds.ds, split,
                                            lambda, parse_mode(mode), seed));
      },
      py::arg("model"), py::arg("dataset"), py::arg("split"),
      py::arg("lambda_"), py::arg("mode") = "greedy", py::arg("seed") = 0,
      "One policy episode per sample of the split; returns the aggregate "
      "cost-accuracy measurement.");

  m.def(
      "evaluate_budget",
      [](PyModel& model, double budget, const PyDataset& ds,
         const std::string& split, double lambda, uint64_t seed) {
        cwcf::RSPolicy policy{budget, model.params};
        return point_to_dict(
            cwcf::evaluate_random_budget(policy, ds.ds, split, lambda, seed));
      },
      py::arg("model"), py::arg("budget"), py::arg("dataset"),
      py::arg("split"), py::arg("lambda_"), py::arg("seed") = 0,
      "Score a classifier on fresh random acquisitions under a budget.");

  m.def(
      "pareto_frontier",
      [](const std::vector<py::dict>& points) {
        std::vector<cwcf::EvalPoint> pts;
        pts.reserve(points.size());
        for (const py::dict& d : points) pts.push_back(point_from_dict(d));
        cwcf::FrontierSet frontier = cwcf::pareto_frontier(std::move(pts));
        py::list kept;
        for (const cwcf::EvalPoint& p : frontier.points)
          kept.append(point_to_dict(p));
        py::dict out;
        out["test_set_warning"] = frontier.test_set_warning;
        out["points"] = kept;
        return out;
      },
      py::arg("points"),
      "Non-dominated subset under (minimize cost, maximize accuracy), "
      "sorted by cost.");

  m.def(
      "export_trace",
      [](PyModel& model, const PyDataset& ds, int sample_index,
         const std::string& mode, uint64_t seed) {
        const cwcf::Sample& sample = sample_at(ds, sample_index);
        cwcf::Trace trace = cwcf::export_trace(model.params, sample,
                                               parse_mode(mode), seed);
        return cwcf::trace_to_json(trace, *ds.ds.schema);
      },
      py::arg("model"), py::arg("dataset"), py::arg("sample_index"),
      py::arg("mode") = "greedy", py::arg("seed") = 0,
      "One narrated episode as JSON text: per step the observation, the "
      "decision path with probabilities, class beliefs, value and cost.");

  m.attr("__version__") = "0.1.0";
  m.attr("EMBED_DIM") = cwcf::kEmbedDim;
}
