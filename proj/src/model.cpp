#include "cwcf/model.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>

namespace cwcf {

namespace {

Tensor uniform_init(int rows, int cols, int fan_in, std::mt19937_64& rng) {
  const double bound = fan_in > 0 ? 1.0 / std::sqrt(static_cast<double>(fan_in)) : 1.0;
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor t(rows, cols);
  for (double& v : t.data) v = dist(rng);
  return t;
}

// "root.posts" -> "posts"; "root" -> "".
std::string bag_suffix(const std::string& bag_key) {
  return bag_key == "root" ? std::string() : bag_key.substr(5);
}

// Norm-stats key of a feature: dotted schema position without the root.
std::string stats_key(const std::string& bag_key, const std::string& feature) {
  const std::string suffix = bag_suffix(bag_key);
  return suffix.empty() ? feature : suffix + "." + feature;
}

}  // namespace

int bag_input_width(const ObjectSchema& os, int embed_dim) {
  int w = 0;
  for (const FeatureSpec& f : os.features) w += encoded_dim(f, embed_dim) + 1;
  return w;
}

std::vector<Parameter*> ModelParams::all_params() {
  std::vector<Parameter*> out;
  for (auto& [key, bag] : bags) {
    out.push_back(&bag.theta_w);
    out.push_back(&bag.theta_b);
    out.push_back(&bag.phi_w);
    out.push_back(&bag.phi_b);
  }
  for (auto& [key, site] : bn) {
    out.push_back(&site.gamma);
    out.push_back(&site.beta);
  }
  for (Parameter* p : {&head.p_w, &head.p_b, &head.v_w, &head.v_b, &head.at_w,
                       &head.at_b})
    out.push_back(p);
  return out;
}

std::vector<Parameter*> ModelParams::classifier_params() {
  std::vector<Parameter*> out;
  for (auto& [key, bag] : bags) {
    out.push_back(&bag.theta_w);
    out.push_back(&bag.theta_b);
  }
  for (auto& [key, site] : bn) {
    out.push_back(&site.gamma);
    out.push_back(&site.beta);
  }
  out.push_back(&head.p_w);
  out.push_back(&head.p_b);
  return out;
}

ModelParams init_model(std::shared_ptr<const Schema> schema, NormStats norm,
                       uint64_t seed, int embed_dim) {
  ModelParams m;
  m.schema = std::move(schema);
  m.embed_dim = embed_dim;
  m.norm = std::move(norm);

  std::mt19937_64 rng(seed);
  for (const BagInfo& bag : collect_bags(*m.schema)) {
    const int in_w = bag_input_width(*bag.schema, embed_dim);
    const int n_feat = static_cast<int>(bag.schema->features.size());
    BagParams bp;
    bp.theta_w = Parameter(bag.key + "/theta/W",
                           uniform_init(in_w, embed_dim, in_w, rng));
    bp.theta_b = Parameter(bag.key + "/theta/b",
                           uniform_init(1, embed_dim, in_w, rng));
    bp.phi_w = Parameter(bag.key + "/phi/W",
                         uniform_init(2 * embed_dim, n_feat, 2 * embed_dim, rng));
    bp.phi_b = Parameter(bag.key + "/phi/b",
                         uniform_init(1, n_feat, 2 * embed_dim, rng));
    m.bags.emplace(bag.key, std::move(bp));
    if (bag.depth > 0) {
      BnSite site;
      Tensor ones(1, embed_dim);
      for (double& v : ones.data) v = 1.0;
      site.gamma = Parameter(bag.key + "/bn/gamma", std::move(ones));
      site.beta = Parameter(bag.key + "/bn/beta", Tensor(1, embed_dim));
      site.state = BnState(embed_dim);
      m.bn.emplace(bag.key, std::move(site));
    }
  }

  const int k = m.schema->class_count();
  m.head.p_w = Parameter("head/p/W", uniform_init(embed_dim, k, embed_dim, rng));
  m.head.p_b = Parameter("head/p/b", uniform_init(1, k, embed_dim, rng));
  m.head.v_w = Parameter("head/V/W", uniform_init(embed_dim, 1, embed_dim, rng));
  m.head.v_b = Parameter("head/V/b", uniform_init(1, 1, embed_dim, rng));
  m.head.at_w = Parameter("head/At/W", uniform_init(embed_dim, 1, embed_dim, rng));
  m.head.at_b = Parameter("head/At/b", uniform_init(1, 1, embed_dim, rng));
  return m;
}

namespace {

// One object row of a bag matrix: which observation it belongs to and the
// instance path of the object itself ("" for the root object).
struct RowRef {
  int obs = 0;
  std::string objpath;
  const ObsObject* obj = nullptr;
};

// One observed instance of a set bag.
struct InstanceRec {
  int obs = 0;
  std::string path;
  const ObsNode* node = nullptr;
};

// A processed set bag: the batch-normalized aggregate matrix and the row of
// each instance in it.
struct BagComputed {
  NodeId y = -1;
  std::map<std::pair<int, std::string>, int> y_row;
};

void collect_instances(const ObsObject& obj, const ObjectSchema& os,
                       int obs_index, const std::string& objpath,
                       const std::string& bag_key,
                       std::map<std::string, std::vector<InstanceRec>>& by_bag) {
  for (size_t fi = 0; fi < os.features.size(); ++fi) {
    const FeatureSpec& spec = os.features[fi];
    if (spec.type.kind != FeatureKind::Set) continue;
    const ObsNode& node = obj.nodes[fi];
    if (!node.observed) continue;
    const std::string inst =
        objpath.empty() ? spec.name : objpath + "." + spec.name;
    const std::string child_key = bag_key + "." + spec.name;
    by_bag[child_key].push_back({obs_index, inst, &node});
    for (size_t j = 0; j < node.children.size(); ++j)
      collect_instances(node.children[j], *spec.type.child, obs_index,
                        inst + "[" + std::to_string(j) + "]", child_key, by_bag);
  }
}

// Stacks the input rows of a bag's objects: per feature, the encoded value
// (or the child bag's normalized aggregate) followed by the mask scalar.
NodeId build_object_matrix(Tape& tape, const std::vector<RowRef>& rows,
                           const ObjectSchema& os, const std::string& bag_key,
                           const ModelParams& params,
                           const std::map<std::string, BagComputed>& done) {
  const int n = static_cast<int>(rows.size());
  std::vector<NodeId> blocks;
  for (size_t fi = 0; fi < os.features.size(); ++fi) {
    const FeatureSpec& spec = os.features[fi];
    if (spec.type.kind == FeatureKind::Set) {
      Tensor mask_col(n, 1);
      std::vector<RowPlacement> placements;
      for (int r = 0; r < n; ++r) {
        const ObsNode& node = rows[r].obj->nodes[fi];
        if (!node.observed) continue;  // zero embedding, mask 0
        mask_col.at(r, 0) = compute_mask(node, spec);
        const std::string inst = rows[r].objpath.empty()
                                     ? spec.name
                                     : rows[r].objpath + "." + spec.name;
        const BagComputed& child = done.at(bag_key + "." + spec.name);
        placements.push_back({child.y, child.y_row.at({rows[r].obs, inst}), r});
      }
      NodeId embeds = placements.empty()
                          ? tape.constant(Tensor(n, params.embed_dim))
                          : tape.compose(Tensor(n, params.embed_dim),
                                         std::move(placements));
      blocks.push_back(tape.concat_cols(embeds, tape.constant(std::move(mask_col))));
    } else {
      const int dim = encoded_dim(spec, params.embed_dim);
      const std::pair<double, double>* stats = nullptr;
      const auto nit = params.norm.find(stats_key(bag_key, spec.name));
      if (nit != params.norm.end()) stats = &nit->second;
      Tensor block(n, dim + 1);
      for (int r = 0; r < n; ++r) {
        const ObsNode& node = rows[r].obj->nodes[fi];
        const EncodedFeature enc = encode_feature(
            spec, node.observed ? &*node.value : nullptr, stats);
        for (int c = 0; c < dim; ++c) block.at(r, c) = enc.vec[c];
        block.at(r, dim) = enc.mask;
      }
      blocks.push_back(tape.constant(std::move(block)));
    }
  }
  if (blocks.empty()) return tape.constant(Tensor(n, 0));
  NodeId x = blocks[0];
  for (size_t i = 1; i < blocks.size(); ++i) x = tape.concat_cols(x, blocks[i]);
  return x;
}

}  // namespace

EmbedResult embed_batch(Tape& tape, const std::vector<const Observation*>& batch,
                        ModelParams& params, BnMode mode) {
  for (const Observation* obs : batch)
    if (obs->schema.get() != params.schema.get() &&
        !(*obs->schema == *params.schema))
      throw SchemaError(SchemaErrorKind::Malformed,
                        "embed: observation schema differs from the model's");

  EmbedResult out;
  out.set_instances.resize(batch.size());

  std::map<std::string, std::vector<InstanceRec>> by_bag;
  for (size_t i = 0; i < batch.size(); ++i)
    collect_instances(batch[i]->root, params.schema->root,
                      static_cast<int>(i), "", "root", by_bag);

  // Deepest bags first, so child aggregates exist when parents consume them.
  const std::vector<BagInfo> bags = collect_bags(*params.schema);
  std::map<std::string, BagComputed> done;
  for (auto it = bags.rbegin(); it != bags.rend(); ++it) {
    if (it->key == "root") continue;
    const auto bit = by_bag.find(it->key);
    if (bit == by_bag.end()) continue;  // no observed instance in the batch
    const std::vector<InstanceRec>& insts = bit->second;

    std::vector<RowRef> rows;
    std::vector<std::pair<int, int>> ranges;
    ranges.reserve(insts.size());
    for (const InstanceRec& rec : insts) {
      const int r0 = static_cast<int>(rows.size());
      for (size_t j = 0; j < rec.node->children.size(); ++j)
        rows.push_back({rec.obs, rec.path + "[" + std::to_string(j) + "]",
                        &rec.node->children[j]});
      ranges.emplace_back(r0, static_cast<int>(rows.size()));
    }

    BagParams& bp = params.bags.at(it->key);
    NodeId z_objects = -1;
    if (!rows.empty()) {
      const NodeId x = build_object_matrix(tape, rows, *it->schema, it->key,
                                           params, done);
      z_objects =
          tape.relu(tape.linear(x, tape.param(bp.theta_w), tape.param(bp.theta_b)));
    }

    const int n_inst = static_cast<int>(insts.size());
    std::vector<RowPlacement> agg;
    for (int k = 0; k < n_inst; ++k) {
      if (ranges[k].first == ranges[k].second) continue;  // empty set: zero row
      const NodeId mean =
          tape.mean_row_range(z_objects, ranges[k].first, ranges[k].second);
      agg.push_back({mean, 0, k});
    }
    const NodeId aggregated =
        agg.empty() ? tape.constant(Tensor(n_inst, params.embed_dim))
                    : tape.compose(Tensor(n_inst, params.embed_dim), std::move(agg));
    BnSite& site = params.bn.at(it->key);
    const NodeId y =
        tape.batchnorm(aggregated, tape.param(site.gamma), tape.param(site.beta),
                       site.state, mode == BnMode::Training);

    BagComputed comp;
    comp.y = y;
    for (int k = 0; k < n_inst; ++k) {
      comp.y_row[{insts[k].obs, insts[k].path}] = k;
      out.set_instances[insts[k].obs][insts[k].path] = {
          z_objects, ranges[k].first, ranges[k].second};
    }
    done.emplace(it->key, std::move(comp));
  }

  std::vector<RowRef> root_rows;
  root_rows.reserve(batch.size());
  for (size_t i = 0; i < batch.size(); ++i)
    root_rows.push_back({static_cast<int>(i), "", &batch[i]->root});
  BagParams& root_bag = params.bags.at("root");
  const NodeId x = build_object_matrix(tape, root_rows, params.schema->root,
                                       "root", params, done);
  out.root = tape.relu(
      tape.linear(x, tape.param(root_bag.theta_w), tape.param(root_bag.theta_b)));
  return out;
}

EmbedResult embed(Tape& tape, const Observation& obs, ModelParams& params,
                  BnMode mode) {
  return embed_batch(tape, {&obs}, params, mode);
}

HeadsResult heads_batch(Tape& tape, NodeId root_embeddings, ModelParams& params) {
  HeadsResult h;
  h.class_probs = tape.softmax_row(tape.linear(
      root_embeddings, tape.param(params.head.p_w), tape.param(params.head.p_b)));
  h.values = tape.linear(root_embeddings, tape.param(params.head.v_w),
                         tape.param(params.head.v_b));
  h.terminal_potentials = tape.linear(
      root_embeddings, tape.param(params.head.at_w), tape.param(params.head.at_b));
  return h;
}

int argmax_row(const Tensor& t, int row) {
  int best = 0;
  for (int c = 1; c < t.cols; ++c)
    if (t.at(row, c) > t.at(row, best)) best = c;
  return best;
}

namespace {

std::unique_ptr<PolicyNode> build_set_node(Tape& tape, NodeId z_row,
                                           const ObsNode& set_node,
                                           const FeatureSpec& set_spec,
                                           const FeaturePath& set_path,
                                           const std::string& inst_path,
                                           const EmbedResult& emb, int obs_index,
                                           ModelParams& params,
                                           const std::string& bag_key) {
  auto node = std::make_unique<PolicyNode>();
  const ObjectSchema& os = *set_spec.type.child;
  const SetInstanceEmbed& se = emb.set_instances[obs_index].at(inst_path);
  const int m = static_cast<int>(set_node.children.size());

  // Score every (object, feature) pair with phi([z, z_i]), one row per object.
  std::vector<RowPlacement> z_rep, obj_rows;
  for (int i = 0; i < m; ++i) {
    z_rep.push_back({z_row, 0, i});
    obj_rows.push_back({se.objects, se.row_begin + i, i});
  }
  const NodeId z_mat =
      tape.compose(Tensor(m, params.embed_dim), std::move(z_rep));
  const NodeId o_mat =
      tape.compose(Tensor(m, params.embed_dim), std::move(obj_rows));
  BagParams& bp = params.bags.at(bag_key);
  const NodeId scores = tape.linear(tape.concat_cols(z_mat, o_mat),
                                    tape.param(bp.phi_w), tape.param(bp.phi_b));

  std::vector<std::pair<int, int>> positions;
  for (int i = 0; i < m; ++i) {
    const ObsObject& child = set_node.children[i];
    for (size_t fi = 0; fi < os.features.size(); ++fi) {
      const FeatureSpec& spec = os.features[fi];
      const ObsNode& fnode = child.nodes[fi];
      bool descend = false;
      if (spec.type.kind == FeatureKind::Set) {
        if (fnode.observed) {
          if (compute_mask(fnode, spec) >= 1.0) continue;
          descend = true;
        }
      } else if (fnode.observed) {
        continue;
      }
      FeaturePath path = set_path;
      path.back().child = i;
      path.push_back({spec.name, std::nullopt});
      positions.emplace_back(i, static_cast<int>(fi));
      if (descend) {
        auto sub = build_set_node(
            tape, z_row, fnode, spec, path,
            inst_path + "[" + std::to_string(i) + "]." + spec.name, emb,
            obs_index, params, bag_key + "." + spec.name);
        node->options.push_back(
            {OptionKind::Descend, std::move(path), std::move(sub)});
      } else {
        node->options.push_back({OptionKind::Acquire, std::move(path), nullptr});
      }
    }
  }

  const NodeId row = tape.gather_entries(scores, std::move(positions));
  node->probs = tape.softmax_row(row);
  node->logp = tape.log_softmax_row(row);
  return node;
}

}  // namespace

PolicyTree build_policy(Tape& tape, const Observation& obs,
                        const EmbedResult& emb, int obs_index,
                        ModelParams& params) {
  auto node = std::make_unique<PolicyNode>();
  const NodeId z = tape.select_row(emb.root, obs_index);
  const NodeId terminal_score =
      tape.linear(z, tape.param(params.head.at_w), tape.param(params.head.at_b));
  node->options.push_back({OptionKind::Terminal, {}, nullptr});

  const ObjectSchema& os = params.schema->root;
  std::vector<int> included;
  for (size_t fi = 0; fi < os.features.size(); ++fi) {
    const FeatureSpec& spec = os.features[fi];
    const ObsNode& fnode = obs.root.nodes[fi];
    if (spec.type.kind == FeatureKind::Set) {
      if (fnode.observed && compute_mask(fnode, spec) >= 1.0) continue;
    } else if (fnode.observed) {
      continue;
    }
    included.push_back(static_cast<int>(fi));
  }

  NodeId all_scores = terminal_score;
  if (!included.empty()) {
    BagParams& bp = params.bags.at("root");
    // The root is a one-object set, so the selector input is [z, z].
    const NodeId scores = tape.linear(tape.concat_cols(z, z),
                                      tape.param(bp.phi_w), tape.param(bp.phi_b));
    std::vector<std::pair<int, int>> positions;
    for (int fi : included) positions.emplace_back(0, fi);
    all_scores = tape.concat_cols(
        terminal_score, tape.gather_entries(scores, std::move(positions)));
  }
  node->probs = tape.softmax_row(all_scores);
  node->logp = tape.log_softmax_row(all_scores);

  for (int fi : included) {
    const FeatureSpec& spec = os.features[fi];
    const ObsNode& fnode = obs.root.nodes[fi];
    FeaturePath path{{spec.name, std::nullopt}};
    if (spec.type.kind == FeatureKind::Set && fnode.observed) {
      auto child = build_set_node(tape, z, fnode, spec, path, spec.name, emb,
                                  obs_index, params, "root." + spec.name);
      node->options.push_back(
          {OptionKind::Descend, std::move(path), std::move(child)});
    } else {
      node->options.push_back({OptionKind::Acquire, std::move(path), nullptr});
    }
  }

  PolicyTree tree;
  tree.root = std::move(node);
  return tree;
}

SampledAction sample_action(const Tape& tape, const PolicyTree& tree,
                            std::mt19937_64& rng) {
  SampledAction out;
  const PolicyNode* node = tree.root.get();
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  while (true) {
    const Tensor& probs = tape.value(node->probs);
    const double u = u01(rng);
    int pick = probs.cols - 1;
    double acc = 0.0;
    for (int c = 0; c < probs.cols; ++c) {
      acc += probs.at(0, c);
      if (u < acc) {
        pick = c;
        break;
      }
    }
    out.picks.emplace_back(node->logp, pick);
    out.log_prob += tape.value(node->logp).at(0, pick);
    const PolicyOption& opt = node->options[pick];
    if (opt.kind == OptionKind::Terminal) {
      out.action = terminal_action();
      return out;
    }
    if (opt.kind == OptionKind::Acquire) {
      out.action = acquire_action(opt.path);
      return out;
    }
    node = opt.child.get();
  }
}

namespace {

// True when the action's path continues below the set the option enters.
bool descends_into(const FeaturePath& set_path, const FeaturePath& action_path) {
  if (action_path.size() <= set_path.size()) return false;
  for (size_t i = 0; i + 1 < set_path.size(); ++i)
    if (!(set_path[i] == action_path[i])) return false;
  const PathStep& last = set_path.back();
  const PathStep& step = action_path[set_path.size() - 1];
  return last.feature == step.feature && step.child.has_value();
}

}  // namespace

PolicyPicks action_picks(const PolicyTree& tree, const Action& a) {
  PolicyPicks picks;
  const PolicyNode* node = tree.root.get();
  while (true) {
    const PolicyOption* chosen = nullptr;
    int index = -1;
    for (size_t i = 0; i < node->options.size(); ++i) {
      const PolicyOption& opt = node->options[i];
      bool match = false;
      switch (opt.kind) {
        case OptionKind::Terminal: match = a.terminal; break;
        case OptionKind::Acquire: match = !a.terminal && opt.path == a.path; break;
        case OptionKind::Descend:
          match = !a.terminal && descends_into(opt.path, a.path);
          break;
      }
      if (match) {
        chosen = &opt;
        index = static_cast<int>(i);
        break;
      }
    }
    if (!chosen)
      throw EnvError(EnvErrorKind::BadPath,
                     "action is not a leaf of the policy tree");
    picks.emplace_back(node->logp, index);
    if (chosen->kind != OptionKind::Descend) return picks;
    node = chosen->child.get();
  }
}

double action_logprob(const Tape& tape, const PolicyTree& tree, const Action& a) {
  double sum = 0.0;
  for (const auto& [row, index] : action_picks(tree, a))
    sum += tape.value(row).at(0, index);
  return sum;
}

NodeId logprob_node(Tape& tape, const PolicyTree& tree, const Action& a) {
  NodeId sum = -1;
  for (const auto& [row, index] : action_picks(tree, a)) {
    const NodeId entry = tape.select_entry(row, 0, index);
    sum = sum < 0 ? entry : tape.add(sum, entry);
  }
  return sum;
}

Action greedy_action(const Tape& tape, const PolicyTree& tree) {
  const PolicyNode* node = tree.root.get();
  while (true) {
    const int pick = argmax_row(tape.value(node->probs), 0);
    const PolicyOption& opt = node->options[pick];
    if (opt.kind == OptionKind::Terminal) return terminal_action();
    if (opt.kind == OptionKind::Acquire) return acquire_action(opt.path);
    node = opt.child.get();
  }
}

namespace {

void leaves_rec(const PolicyNode& node, std::vector<Action>& out) {
  for (const PolicyOption& opt : node.options) {
    switch (opt.kind) {
      case OptionKind::Terminal: out.push_back(terminal_action()); break;
      case OptionKind::Acquire: out.push_back(acquire_action(opt.path)); break;
      case OptionKind::Descend: leaves_rec(*opt.child, out); break;
    }
  }
}

}  // namespace

std::vector<Action> policy_leaves(const PolicyTree& tree) {
  std::vector<Action> out;
  leaves_rec(*tree.root, out);
  return out;
}

}  // namespace cwcf
