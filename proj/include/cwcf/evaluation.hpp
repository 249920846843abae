#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cwcf/dataset.hpp"
#include "cwcf/environment.hpp"
#include "cwcf/model.hpp"

namespace cwcf {

enum class EvalMode { Greedy, Sampled };

// One cost-accuracy measurement of a policy on a split. avg_cost is the mean
// acquired cost, unscaled by lambda.
struct EvalPoint {
  double avg_cost = 0.0;
  double accuracy = 0.0;
  double avg_reward = 0.0;
  double lambda = 0.0;
  uint64_t seed = 0;
  std::string split;

  bool operator==(const EvalPoint& other) const = default;
};

// One JSON object per line: {"avg_cost":..., "accuracy":..., "avg_reward":...,
// "lambda":..., "seed":..., "split":...}.
std::string evalpoint_to_json(const EvalPoint& p);
EvalPoint evalpoint_from_json(const std::string& line);
std::string evalpoints_to_jsonl(const std::vector<EvalPoint>& points);
std::vector<EvalPoint> evalpoints_from_jsonl(const std::string& text);

// Runs one episode per sample of the split ("train", "val" or "test"),
// descending greedily or by sampling, and aggregates the results. Greedy
// mode is deterministic and ignores the seed.
EvalPoint evaluate(ModelParams& params, const Dataset& dataset,
                   const std::string& split, double lambda,
                   EvalMode mode = EvalMode::Greedy, uint64_t seed = 0);

// The non-dominated subset under (minimize cost, maximize accuracy): a point
// is dropped iff some other point has cost <= and accuracy >= with at least
// one strict. Exact duplicates survive together. Points come back sorted by
// cost ascending, ties in input order.
struct FrontierSet {
  std::vector<EvalPoint> points;
  // Frontiers picked on the evaluation split overstate held-out performance;
  // the flag travels with the output so downstream plots can say so.
  bool test_set_warning = true;
};

FrontierSet pareto_frontier(std::vector<EvalPoint> points);
std::string frontier_to_json(const FrontierSet& frontier);

// One recorded decision level: the options of the node, their local
// probabilities, and the index chosen.
struct TraceLevel {
  std::vector<std::string> options;  // "terminal", "acquire p", "descend p"
  std::vector<double> probs;
  int chosen = 0;
};

struct TraceStep {
  Observation observation;        // snapshot before acting
  std::vector<TraceLevel> path;   // root-to-leaf decisions
  std::vector<double> class_probs;
  double value = 0.0;
  Action action;
  double cost = 0.0;              // acquisition cost, 0 for Terminal
};

// A full episode narrative: every acquisition step plus the terminal step.
struct Trace {
  std::vector<TraceStep> steps;
  int prediction = 0;
  int label = 0;
};

Trace export_trace(ModelParams& params, const Sample& sample,
                   EvalMode mode = EvalMode::Greedy, uint64_t seed = 0);

// {"steps": [{"observation":..., "path": [{"options":..., "probs":...,
// "chosen":...}], "class_probs":..., "value":..., "action":..., "cost":...}],
// "prediction":..., "label":...}; classes appear by name, actions as path
// strings ("terminal" for stopping), observations as nested feature maps
// with null for unobserved nodes.
std::string trace_to_json(const Trace& trace, const Schema& schema);

// Replays the trace's actions through a fresh episode: true iff every
// recorded cost matches and the model's prediction on the final observation
// equals the recorded one.
bool verify_trace_replay(const Trace& trace, ModelParams& params,
                         const Sample& sample);

}  // namespace cwcf
