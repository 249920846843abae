#include "cwcf/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <variant>

#include "json.hpp"

namespace cwcf {

namespace {

using nlohmann::ordered_json;

// Episodes cannot legally outlive the number of acquirable nodes, but a hard
// cap keeps a buggy policy from spinning forever.
constexpr int kEpisodeCap = 1000;

const std::vector<int>& split_indices(const Dataset& dataset,
                                      const std::string& split) {
  if (split == "train") return dataset.train;
  if (split == "val") return dataset.val;
  if (split == "test") return dataset.test;
  throw DataError(DataErrorKind::BadSplit, "unknown split: " + split);
}

// Same inverse-CDF walk as sample_action, on a bare probability row.
int sample_index(const Tensor& probs, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const double u = u01(rng);
  double acc = 0.0;
  for (int c = 0; c < probs.cols; ++c) {
    acc += probs.at(0, c);
    if (u < acc) return c;
  }
  return probs.cols - 1;
}

}  // namespace

std::string evalpoint_to_json(const EvalPoint& p) {
  ordered_json j;
  j["avg_cost"] = p.avg_cost;
  j["accuracy"] = p.accuracy;
  j["avg_reward"] = p.avg_reward;
  j["lambda"] = p.lambda;
  j["seed"] = p.seed;
  j["split"] = p.split;
  return j.dump();
}

EvalPoint evalpoint_from_json(const std::string& line) {
  nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
  if (j.is_discarded() || !j.is_object())
    throw DataError(DataErrorKind::Malformed,
                    "metrics line is not a JSON object");
  EvalPoint p;
  try {
    p.avg_cost = j.at("avg_cost").get<double>();
    p.accuracy = j.at("accuracy").get<double>();
    p.avg_reward = j.at("avg_reward").get<double>();
    p.lambda = j.at("lambda").get<double>();
    p.seed = j.at("seed").get<uint64_t>();
    p.split = j.at("split").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(DataErrorKind::Malformed,
                    std::string("metrics line: ") + e.what());
  }
  return p;
}

std::string evalpoints_to_jsonl(const std::vector<EvalPoint>& points) {
  std::string out;
  for (const EvalPoint& p : points) {
    out += evalpoint_to_json(p);
    out += '\n';
  }
  return out;
}

std::vector<EvalPoint> evalpoints_from_jsonl(const std::string& text) {
  std::vector<EvalPoint> points;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    points.push_back(evalpoint_from_json(line));
  }
  return points;
}

EvalPoint evaluate(ModelParams& params, const Dataset& dataset,
                   const std::string& split, double lambda, EvalMode mode,
                   uint64_t seed) {
  const std::vector<int>& indices = split_indices(dataset, split);
  if (indices.empty())
    throw DataError(DataErrorKind::BadSplit, "empty split: " + split);

  std::mt19937_64 rng(seed);
  std::vector<EpisodeState> eps;
  eps.reserve(indices.size());
  for (int i : indices)
    eps.push_back(
        make_episode(dataset.samples[static_cast<size_t>(i)], dataset.schema));

  std::vector<int> preds(eps.size(), -1);
  std::vector<double> rewards(eps.size(), 0.0);
  std::vector<size_t> active(eps.size());
  std::iota(active.begin(), active.end(), size_t{0});

  // Episodes advance in lockstep so each round embeds one batch. Batchnorm
  // runs on its running statistics here, so rows stay independent and the
  // result does not depend on how episodes are grouped.
  for (int round = 0; !active.empty(); ++round) {
    Tape tape;
    std::vector<const Observation*> batch;
    batch.reserve(active.size());
    for (size_t e : active) batch.push_back(&eps[e].observation);
    EmbedResult emb = embed_batch(tape, batch, params, BnMode::Inference);
    HeadsResult heads = heads_batch(tape, emb.root, params);
    const Tensor& class_probs = tape.value(heads.class_probs);

    std::vector<size_t> still_active;
    for (size_t bi = 0; bi < active.size(); ++bi) {
      size_t e = active[bi];
      Action a;
      if (round >= kEpisodeCap) {
        a = terminal_action();
      } else {
        PolicyTree tree = build_policy(tape, eps[e].observation, emb,
                                       static_cast<int>(bi), params);
        a = mode == EvalMode::Greedy ? greedy_action(tape, tree)
                                     : sample_action(tape, tree, rng).action;
      }
      const int pred =
          a.terminal ? argmax_row(class_probs, static_cast<int>(bi)) : -1;
      rewards[e] += reward(eps[e], a, pred, lambda);
      apply_transition(eps[e], a);
      if (a.terminal)
        preds[e] = pred;
      else
        still_active.push_back(e);
    }
    active = std::move(still_active);
  }

  EvalPoint p;
  const double n = static_cast<double>(eps.size());
  for (size_t e = 0; e < eps.size(); ++e) {
    p.avg_cost += eps[e].accumulated_cost;
    p.avg_reward += rewards[e];
    if (preds[e] == eps[e].label) p.accuracy += 1.0;
  }
  p.avg_cost /= n;
  p.avg_reward /= n;
  p.accuracy /= n;
  p.lambda = lambda;
  p.seed = seed;
  p.split = split;
  return p;
}

FrontierSet pareto_frontier(std::vector<EvalPoint> points) {
  std::stable_sort(points.begin(), points.end(),
                   [](const EvalPoint& a, const EvalPoint& b) {
                     return a.avg_cost < b.avg_cost;
                   });

  FrontierSet out;
  // Sweep cost groups left to right: a point survives iff nothing in its own
  // group beats its accuracy and nothing strictly cheaper matches it.
  double best_cheaper = -std::numeric_limits<double>::infinity();
  size_t i = 0;
  while (i < points.size()) {
    size_t j = i;
    double group_max = -std::numeric_limits<double>::infinity();
    while (j < points.size() && points[j].avg_cost == points[i].avg_cost) {
      group_max = std::max(group_max, points[j].accuracy);
      ++j;
    }
    for (size_t k = i; k < j; ++k) {
      const EvalPoint& p = points[k];
      if (p.accuracy >= group_max && p.accuracy > best_cheaper)
        out.points.push_back(p);
    }
    best_cheaper = std::max(best_cheaper, group_max);
    i = j;
  }
  return out;
}

std::string frontier_to_json(const FrontierSet& frontier) {
  ordered_json j;
  j["test_set_warning"] = frontier.test_set_warning;
  j["note"] =
      "points selected by measurements on the test split overstate held-out "
      "performance; select on the validation split and report test numbers "
      "for the chosen points only";
  ordered_json arr = ordered_json::array();
  for (const EvalPoint& p : frontier.points)
    arr.push_back(ordered_json::parse(evalpoint_to_json(p)));
  j["points"] = arr;
  return j.dump(2);
}

namespace {

ordered_json obs_object_json(const ObsObject& obj, const ObjectSchema& os) {
  ordered_json j = ordered_json::object();
  for (size_t fi = 0; fi < os.features.size(); ++fi) {
    const FeatureSpec& spec = os.features[fi];
    const ObsNode& node = obj.nodes[fi];
    if (!node.observed) {
      j[spec.name] = nullptr;
      continue;
    }
    switch (spec.type.kind) {
      case FeatureKind::Real:
        j[spec.name] = std::get<RealValue>(node.value->data).x;
        break;
      case FeatureKind::Categorical:
        j[spec.name] = std::get<CatValue>(node.value->data).symbol;
        break;
      case FeatureKind::Text:
        j[spec.name] = std::get<TextValue>(node.value->data).text;
        break;
      case FeatureKind::Set: {
        ordered_json arr = ordered_json::array();
        for (const ObsObject& child : node.children)
          arr.push_back(obs_object_json(child, *spec.type.child));
        j[spec.name] = std::move(arr);
        break;
      }
    }
  }
  return j;
}

std::string option_label(const PolicyOption& opt) {
  switch (opt.kind) {
    case OptionKind::Terminal:
      return "terminal";
    case OptionKind::Acquire:
      return "acquire " + path_to_string(opt.path);
    case OptionKind::Descend:
      return "descend " + path_to_string(opt.path);
  }
  return "";
}

}  // namespace

Trace export_trace(ModelParams& params, const Sample& sample, EvalMode mode,
                   uint64_t seed) {
  Trace trace;
  EpisodeState ep = make_episode(sample, params.schema);
  std::mt19937_64 rng(seed);

  for (int round = 0; !ep.done; ++round) {
    Tape tape;
    EmbedResult emb = embed(tape, ep.observation, params, BnMode::Inference);
    HeadsResult heads = heads_batch(tape, emb.root, params);
    PolicyTree tree = build_policy(tape, ep.observation, emb, 0, params);

    TraceStep step;
    step.observation = ep.observation;
    const Tensor& class_probs = tape.value(heads.class_probs);
    step.class_probs.assign(class_probs.data.begin(), class_probs.data.end());
    step.value = tape.value(heads.values).at(0, 0);

    const PolicyNode* node = tree.root.get();
    Action action;
    while (true) {
      const Tensor& probs = tape.value(node->probs);
      TraceLevel level;
      level.probs.assign(probs.data.begin(), probs.data.end());
      level.options.reserve(node->options.size());
      for (const PolicyOption& opt : node->options)
        level.options.push_back(option_label(opt));
      int idx;
      if (round >= kEpisodeCap)
        idx = 0;  // Terminal, the root's first option
      else if (mode == EvalMode::Greedy)
        idx = argmax_row(probs, 0);
      else
        idx = sample_index(probs, rng);
      level.chosen = idx;
      step.path.push_back(std::move(level));
      const PolicyOption& opt = node->options[static_cast<size_t>(idx)];
      if (opt.kind == OptionKind::Descend) {
        node = opt.child.get();
        continue;
      }
      action = opt.kind == OptionKind::Terminal ? terminal_action()
                                                : acquire_action(opt.path);
      break;
    }

    step.action = action;
    step.cost = action.terminal ? 0.0 : feature_cost(*params.schema, action.path);
    if (action.terminal) trace.prediction = argmax_row(class_probs, 0);
    trace.steps.push_back(std::move(step));
    apply_transition(ep, action);
  }

  trace.label = ep.label;
  return trace;
}

std::string trace_to_json(const Trace& trace, const Schema& schema) {
  ordered_json steps = ordered_json::array();
  for (const TraceStep& s : trace.steps) {
    ordered_json js;
    js["observation"] = obs_object_json(s.observation.root, schema.root);
    ordered_json path = ordered_json::array();
    for (const TraceLevel& level : s.path) {
      ordered_json jl;
      jl["options"] = level.options;
      jl["probs"] = level.probs;
      jl["chosen"] = level.chosen;
      path.push_back(std::move(jl));
    }
    js["path"] = std::move(path);
    js["class_probs"] = s.class_probs;
    js["value"] = s.value;
    js["action"] = s.action.terminal ? "terminal" : path_to_string(s.action.path);
    js["cost"] = s.cost;
    steps.push_back(std::move(js));
  }
  ordered_json j;
  j["steps"] = std::move(steps);
  j["prediction"] = schema.class_names[static_cast<size_t>(trace.prediction)];
  j["label"] = schema.class_names[static_cast<size_t>(trace.label)];
  return j.dump(2);
}

bool verify_trace_replay(const Trace& trace, ModelParams& params,
                         const Sample& sample) {
  if (trace.steps.empty() || !trace.steps.back().action.terminal) return false;

  EpisodeState ep = make_episode(sample, params.schema);
  for (const TraceStep& step : trace.steps) {
    if (ep.done) return false;
    const double cost =
        step.action.terminal ? 0.0 : feature_cost(*params.schema, step.action.path);
    if (cost != step.cost) return false;
    apply_transition(ep, step.action);
  }
  if (!ep.done) return false;
  if (ep.label != trace.label) return false;

  double recorded_total = 0.0;
  for (const TraceStep& step : trace.steps) recorded_total += step.cost;
  if (recorded_total != ep.accumulated_cost) return false;

  // The prediction must come out of the replayed observation, not the
  // recorded snapshot.
  Tape tape;
  EmbedResult emb = embed(tape, ep.observation, params, BnMode::Inference);
  HeadsResult heads = heads_batch(tape, emb.root, params);
  return argmax_row(tape.value(heads.class_probs), 0) == trace.prediction;
}

}  // namespace cwcf
