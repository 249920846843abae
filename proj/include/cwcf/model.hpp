#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "cwcf/autodiff.hpp"
#include "cwcf/dataset.hpp"
#include "cwcf/environment.hpp"
#include "cwcf/schema.hpp"

namespace cwcf {

inline constexpr int kEmbedDim = 64;

// Per-bag layers, shared across every object of that bag. theta embeds one
// object (encoded features + masks -> embed_dim, ReLU applied outside the
// linear map); phi scores the object's features for the policy (input is the
// concatenation [z, z_i], one output column per schema feature, no
// activation).
struct BagParams {
  Parameter theta_w, theta_b;
  Parameter phi_w, phi_b;
};

// Batch normalization applied to the aggregated (mean) embedding of each
// observed instance of a set bag.
struct BnSite {
  Parameter gamma, beta;
  BnState state;
};

// Heads on the root embedding: classifier logits, state value, and the score
// of the terminal option at the policy root.
struct HeadParams {
  Parameter p_w, p_b;
  Parameter v_w, v_b;
  Parameter at_w, at_b;
};

struct ModelParams {
  std::shared_ptr<const Schema> schema;
  int embed_dim = kEmbedDim;
  NormStats norm;  // training-split statistics used to encode real features

  std::map<std::string, BagParams> bags;  // by bag key: "root", "root.posts", ...
  std::map<std::string, BnSite> bn;       // set bags only

  HeadParams head;

  // Every trainable parameter, in a fixed deterministic order.
  std::vector<Parameter*> all_params();
  // The subset trained during classifier pretraining: all theta layers, all
  // batchnorm scales/shifts, and the classifier head.
  std::vector<Parameter*> classifier_params();
};

// Width of one object's input row: each feature contributes its encoded
// width plus one mask slot.
int bag_input_width(const ObjectSchema& os, int embed_dim);

// Fresh parameters with every linear layer drawn uniformly from
// [-1/sqrt(fan_in), 1/sqrt(fan_in)] (weights and biases alike), batchnorm
// scale 1 / shift 0. The draw order is fixed, so equal seeds give equal
// models.
ModelParams init_model(std::shared_ptr<const Schema> schema, NormStats norm,
                       uint64_t seed, int embed_dim = kEmbedDim);

// Batchnorm of set aggregates: rollouts and evaluation use the running
// statistics; gradient passes normalize by the visible batch.
enum class BnMode { Inference, Training };

// Where to find the embeddings of one observed set instance: rows
// [row_begin, row_end) of the bag's activated object matrix. Empty observed
// sets own an empty row range.
struct SetInstanceEmbed {
  NodeId objects = -1;
  int row_begin = 0;
  int row_end = 0;
};

struct EmbedResult {
  NodeId root = -1;  // one root-embedding row per observation in the batch
  // Per observation: observed set instances keyed by instance path string
  // ("posts", "posts[2].comments", ...).
  std::vector<std::map<std::string, SetInstanceEmbed>> set_instances;
};

// Bottom-up batched embedding of whole observations. Each object's input row
// concatenates, per schema feature, its encoded value (or set embedding) and
// its mask; unobserved sets contribute a zero vector with mask 0; observed
// sets contribute the batch-normalized mean of their children's embeddings
// (the normalized zero vector when empty) with the recursive observed
// fraction as mask.
EmbedResult embed_batch(Tape& tape, const std::vector<const Observation*>& batch,
                        ModelParams& params, BnMode mode);

EmbedResult embed(Tape& tape, const Observation& obs, ModelParams& params,
                  BnMode mode);

struct HeadsResult {
  NodeId class_probs = -1;          // one softmax row per observation
  NodeId values = -1;               // column vector
  NodeId terminal_potentials = -1;  // column vector
};

HeadsResult heads_batch(Tape& tape, NodeId root_embeddings, ModelParams& params);

// Index of the row's largest entry, ties toward the lowest index.
int argmax_row(const Tensor& t, int row);

enum class OptionKind { Terminal, Acquire, Descend };

struct PolicyNode;

struct PolicyOption {
  OptionKind kind = OptionKind::Terminal;
  // Acquire: the action's feature path. Descend: the path of the set being
  // entered (ancestor steps carry child indices, the last step does not).
  FeaturePath path;
  std::unique_ptr<PolicyNode> child;  // Descend only
};

// One decision point: a local probability row over its options. Option order
// is canonical: Terminal first (root only), then features in schema order,
// objects in index order.
struct PolicyNode {
  std::vector<PolicyOption> options;
  NodeId probs = -1;  // 1 x |options| softmax row
  NodeId logp = -1;   // its log
};

struct PolicyTree {
  std::unique_ptr<PolicyNode> root;
};

// The hierarchical policy over one observation of an embedded batch. The
// root node scores the root object's features with phi_root([z, z]) plus the
// terminal potential; a descended set instance scores all (object, feature)
// pairs jointly with phi_bag([z, z_i]). Observed scalar features and
// fully-observed (mask-1) sets are excluded; unobserved sets appear as
// acquisitions of the set itself, observed ones as descents.
PolicyTree build_policy(Tape& tape, const Observation& obs,
                        const EmbedResult& emb, int obs_index,
                        ModelParams& params);

// The (log-probability row, option index) choices along one root-to-leaf
// path; the action's log-probability is the sum of the indexed entries.
using PolicyPicks = std::vector<std::pair<NodeId, int>>;

struct SampledAction {
  Action action;
  double log_prob = 0.0;
  PolicyPicks picks;
};

// Samples one leaf by descending through the local distributions
// (inverse-CDF per node, so equal seeds give equal actions).
SampledAction sample_action(const Tape& tape, const PolicyTree& tree,
                            std::mt19937_64& rng);

// Picks along the path realizing `a`. Throws EnvError::BadPath if the tree
// has no such leaf.
PolicyPicks action_picks(const PolicyTree& tree, const Action& a);

double action_logprob(const Tape& tape, const PolicyTree& tree, const Action& a);

// Scalar tape node computing the action's log-probability (for gradients).
NodeId logprob_node(Tape& tape, const PolicyTree& tree, const Action& a);

// Locally most probable option at every node, ties toward the lower index
// (canonical order).
Action greedy_action(const Tape& tape, const PolicyTree& tree);

// All leaf actions in depth-first order; matches enumerate_actions of the
// same observation.
std::vector<Action> policy_leaves(const PolicyTree& tree);

}  // namespace cwcf
