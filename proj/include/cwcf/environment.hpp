#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "cwcf/dataset.hpp"
#include "cwcf/schema.hpp"

namespace cwcf {

struct ObsObject;

// One feature position of an observed object. Scalar features carry their
// value once observed; set features carry one child skeleton per object of
// the underlying sample. Unobserved sets are truncated: no children, not
// even their count, are visible.
struct ObsNode {
  bool observed = false;
  std::optional<Value> value;      // observed real/categorical/text
  std::vector<ObsObject> children; // observed set
};

struct ObsObject {
  std::vector<ObsNode> nodes;  // one per schema feature, in schema order
};

// A pruned view of one sample. The sample pointer is the transition's
// private answer key; policies must only read the observed tree. The caller
// keeps the sample (and schema) alive for the observation's lifetime.
struct Observation {
  ObsObject root;
  std::shared_ptr<const Schema> schema;
  const Sample* sample = nullptr;
};

struct Action {
  bool terminal = false;
  FeaturePath path;  // acquisition target when not terminal

  bool operator==(const Action& other) const = default;
};

inline Action terminal_action() { return {true, {}}; }
inline Action acquire_action(FeaturePath path) { return {false, std::move(path)}; }

struct EpisodeState {
  Observation observation;
  double accumulated_cost = 0.0;
  bool done = false;
  int label = 0;
};

enum class EnvErrorKind { EpisodeDone, AlreadyObserved, BadPath };

class EnvError : public std::runtime_error {
 public:
  EnvError(EnvErrorKind kind, const std::string& msg)
      : std::runtime_error(msg), kind_(kind) {}
  EnvErrorKind kind() const { return kind_; }

 private:
  EnvErrorKind kind_;
};

// Root skeleton with every node unobserved, then zero-cost nodes revealed;
// for zero-cost sets the reveal recurses into the children.
Observation initial_observation(const Sample& sample,
                                std::shared_ptr<const Schema> schema);

EpisodeState make_episode(const Sample& sample,
                          std::shared_ptr<const Schema> schema);

// All legal actions, Terminal first, then one Acquire per unobserved node in
// depth-first order: schema feature order within an object, child objects in
// index order. Fully observed subtrees contribute nothing.
std::vector<Action> enumerate_actions(const Observation& obs);

// Applies the action in place. Terminal marks the episode done. Acquiring a
// scalar fills its value; acquiring a set reveals its child skeletons (all
// features unobserved) and then auto-reveals zero-cost nodes inside them.
// The unscaled feature cost is added to accumulated_cost.
void apply_transition(EpisodeState& state, const Action& a);

// Reward of taking `a` from `state`: Terminal pays 0 for a correct
// prediction and -1 otherwise; Acquire pays -lambda * cost.
double reward(const EpisodeState& state, const Action& a, int prediction,
              double lambda);

// Observed fraction of the node's subtree: scalars are 1/0; an observed set
// averages its objects' masks, where an object's mask is the unweighted mean
// over its features. Empty observed sets and zero-feature objects count as
// fully observed.
double compute_mask(const ObsNode& node, const FeatureSpec& spec);
double object_mask(const ObsObject& obj, const ObjectSchema& os);

// True iff Terminal is the only legal action.
bool forced_terminal(const Observation& obs);

// Reveals the entire tree (no cost accounting) — full-information input.
void observe_all(Observation& obs);

// Sum of every node's acquisition cost in the sample's instance tree: the
// cost of buying all information.
double total_information_cost(const Schema& schema, const Sample& sample);

// The observed-tree node addressed by the path (must exist).
const ObsNode& find_node(const Observation& obs, const FeaturePath& path);

}  // namespace cwcf
