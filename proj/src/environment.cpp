#include "cwcf/environment.hpp"

#include <cassert>

namespace cwcf {

namespace {

[[noreturn]] void fail(EnvErrorKind kind, const std::string& msg) {
  throw EnvError(kind, msg);
}

ObsObject make_skeleton(const ObjectSchema& os) {
  ObsObject obj;
  obj.nodes.resize(os.features.size());
  return obj;
}

void observe_value(ObsNode& node, const FeatureSpec& spec,
                   const Value& value);

// Reveals every zero-cost feature of the object, recursing into the children
// of zero-cost sets.
void reveal_zero_cost(ObsObject& obj, const ObjectSchema& os,
                      const ObjectInstance& inst) {
  for (size_t i = 0; i < os.features.size(); ++i) {
    const FeatureSpec& spec = os.features[i];
    if (spec.cost == 0.0 && !obj.nodes[i].observed)
      observe_value(obj.nodes[i], spec, inst.values[i]);
  }
}

// Marks the node observed and copies its content from the sample. New set
// children start unobserved and then have their own zero-cost features
// revealed.
void observe_value(ObsNode& node, const FeatureSpec& spec,
                   const Value& value) {
  node.observed = true;
  if (spec.type.kind != FeatureKind::Set) {
    node.value = value;
    return;
  }
  const auto& objects = std::get<SetValue>(value.data).objects;
  node.children.clear();
  node.children.reserve(objects.size());
  for (const auto& inst : objects) {
    node.children.push_back(make_skeleton(*spec.type.child));
    reveal_zero_cost(node.children.back(), *spec.type.child, inst);
  }
}

struct NodeRef {
  ObsNode* node = nullptr;
  const FeatureSpec* spec = nullptr;
  const Value* value = nullptr;  // sample value at the same position
};

NodeRef locate(Observation& obs, const FeaturePath& path) {
  if (path.empty()) fail(EnvErrorKind::BadPath, "empty path");
  ObsObject* obj = &obs.root;
  const ObjectSchema* os = &obs.schema->root;
  const ObjectInstance* inst = &obs.sample->root;
  for (size_t i = 0; i < path.size(); ++i) {
    const PathStep& step = path[i];
    const int idx = os->find(step.feature);
    if (idx < 0)
      fail(EnvErrorKind::BadPath, "unknown feature '" + step.feature +
                                      "' in path " + path_to_string(path));
    const FeatureSpec& spec = os->features[idx];
    ObsNode& node = obj->nodes[idx];
    const Value& value = inst->values[idx];
    if (i + 1 == path.size()) return {&node, &spec, &value};
    if (spec.type.kind != FeatureKind::Set)
      fail(EnvErrorKind::BadPath, "cannot descend through scalar feature '" +
                                      step.feature + "'");
    if (!node.observed)
      fail(EnvErrorKind::BadPath, "cannot descend into unobserved set '" +
                                      step.feature + "'");
    if (!step.child || *step.child < 0 ||
        *step.child >= static_cast<int>(node.children.size()))
      fail(EnvErrorKind::BadPath,
           "bad child index in path " + path_to_string(path));
    obj = &node.children[*step.child];
    os = spec.type.child.get();
    inst = &std::get<SetValue>(value.data).objects[*step.child];
  }
  fail(EnvErrorKind::BadPath, "unreachable");
}

void enumerate_in_object(const ObsObject& obj, const ObjectSchema& os,
                         const FeaturePath& prefix,
                         std::vector<Action>& out) {
  for (size_t i = 0; i < os.features.size(); ++i) {
    const FeatureSpec& spec = os.features[i];
    const ObsNode& node = obj.nodes[i];
    FeaturePath path = prefix;
    path.push_back({spec.name, std::nullopt});
    if (!node.observed) {
      out.push_back(acquire_action(std::move(path)));
    } else if (spec.type.kind == FeatureKind::Set) {
      for (size_t j = 0; j < node.children.size(); ++j) {
        path.back().child = static_cast<int>(j);
        enumerate_in_object(node.children[j], *spec.type.child, path, out);
      }
    }
  }
}

void observe_all_in(ObsObject& obj, const ObjectSchema& os,
                    const ObjectInstance& inst) {
  for (size_t i = 0; i < os.features.size(); ++i) {
    const FeatureSpec& spec = os.features[i];
    if (!obj.nodes[i].observed) observe_value(obj.nodes[i], spec, inst.values[i]);
    if (spec.type.kind == FeatureKind::Set) {
      const auto& objects = std::get<SetValue>(inst.values[i].data).objects;
      for (size_t j = 0; j < objects.size(); ++j)
        observe_all_in(obj.nodes[i].children[j], *spec.type.child, objects[j]);
    }
  }
}

double total_cost_in(const ObjectSchema& os, const ObjectInstance& inst) {
  double total = 0.0;
  for (size_t i = 0; i < os.features.size(); ++i) {
    const FeatureSpec& spec = os.features[i];
    total += spec.cost;
    if (spec.type.kind == FeatureKind::Set)
      for (const auto& child : std::get<SetValue>(inst.values[i].data).objects)
        total += total_cost_in(*spec.type.child, child);
  }
  return total;
}

}  // namespace

Observation initial_observation(const Sample& sample,
                                std::shared_ptr<const Schema> schema) {
  Observation obs;
  obs.schema = std::move(schema);
  obs.sample = &sample;
  obs.root = make_skeleton(obs.schema->root);
  reveal_zero_cost(obs.root, obs.schema->root, sample.root);
  return obs;
}

EpisodeState make_episode(const Sample& sample,
                          std::shared_ptr<const Schema> schema) {
  EpisodeState state;
  state.observation = initial_observation(sample, std::move(schema));
  state.label = sample.label;
  return state;
}

std::vector<Action> enumerate_actions(const Observation& obs) {
  std::vector<Action> out;
  out.push_back(terminal_action());
  enumerate_in_object(obs.root, obs.schema->root, {}, out);
  return out;
}

void apply_transition(EpisodeState& state, const Action& a) {
  if (state.done)
    fail(EnvErrorKind::EpisodeDone, "episode is already terminated");
  if (a.terminal) {
    state.done = true;
    return;
  }
  const NodeRef ref = locate(state.observation, a.path);
  if (ref.node->observed)
    fail(EnvErrorKind::AlreadyObserved,
         "node already observed: " + path_to_string(a.path));
  observe_value(*ref.node, *ref.spec, *ref.value);
  state.accumulated_cost += ref.spec->cost;
}

double reward(const EpisodeState& state, const Action& a, int prediction,
              double lambda) {
  if (a.terminal) return prediction == state.label ? 0.0 : -1.0;
  return -lambda * feature_cost(*state.observation.schema, a.path);
}

double object_mask(const ObsObject& obj, const ObjectSchema& os) {
  if (os.features.empty()) return 1.0;
  double sum = 0.0;
  for (size_t i = 0; i < os.features.size(); ++i)
    sum += compute_mask(obj.nodes[i], os.features[i]);
  return sum / os.features.size();
}

double compute_mask(const ObsNode& node, const FeatureSpec& spec) {
  if (!node.observed) return 0.0;
  if (spec.type.kind != FeatureKind::Set) return 1.0;
  if (node.children.empty()) return 1.0;
  double sum = 0.0;
  for (const ObsObject& child : node.children)
    sum += object_mask(child, *spec.type.child);
  return sum / node.children.size();
}

bool forced_terminal(const Observation& obs) {
  std::vector<Action> acts;
  acts.push_back(terminal_action());
  enumerate_in_object(obs.root, obs.schema->root, {}, acts);
  return acts.size() == 1;
}

void observe_all(Observation& obs) {
  observe_all_in(obs.root, obs.schema->root, obs.sample->root);
}

double total_information_cost(const Schema& schema, const Sample& sample) {
  return total_cost_in(schema.root, sample.root);
}

const ObsNode& find_node(const Observation& obs, const FeaturePath& path) {
  return *locate(const_cast<Observation&>(obs), path).node;
}

}  // namespace cwcf
