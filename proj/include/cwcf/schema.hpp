#pragma once

#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace cwcf {

enum class FeatureKind { Real, Categorical, Text, Set };

struct ObjectSchema;

struct FeatureType {
  FeatureKind kind = FeatureKind::Real;
  std::vector<std::string> categories;        // Categorical only
  std::shared_ptr<const ObjectSchema> child;  // Set only

  bool operator==(const FeatureType& other) const;
};

struct FeatureSpec {
  std::string name;
  FeatureType type;
  double cost = 0.0;

  bool operator==(const FeatureSpec& other) const = default;
};

struct ObjectSchema {
  std::vector<FeatureSpec> features;

  // Index of the named feature, or -1.
  int find(const std::string& name) const;

  bool operator==(const ObjectSchema& other) const = default;
};

struct Schema {
  ObjectSchema root;
  std::vector<std::string> class_names;

  int class_count() const { return static_cast<int>(class_names.size()); }

  bool operator==(const Schema& other) const = default;
};

// One step of a path through the schema/observation tree. `child` is set
// exactly when the step descends through a set feature into one of its
// objects; the final step addresses the feature node itself and has no index.
struct PathStep {
  std::string feature;
  std::optional<int> child;

  bool operator==(const PathStep& other) const = default;
};

using FeaturePath = std::vector<PathStep>;

std::string path_to_string(const FeaturePath& path);

enum class SchemaErrorKind {
  Malformed,
  DuplicateFeature,
  NegativeCost,
  UnknownType,
  MissingChildSchema,
  BadClassList,
};

class SchemaError : public std::runtime_error {
 public:
  SchemaError(SchemaErrorKind kind, const std::string& msg)
      : std::runtime_error(msg), kind_(kind) {}
  SchemaErrorKind kind() const { return kind_; }

 private:
  SchemaErrorKind kind_;
};

enum class PathErrorKind { Empty, UnknownFeature, NotASet };

class PathError : public std::runtime_error {
 public:
  PathError(PathErrorKind kind, const std::string& msg)
      : std::runtime_error(msg), kind_(kind) {}
  PathErrorKind kind() const { return kind_; }

 private:
  PathErrorKind kind_;
};

// Parses a schema document. The document is a JSON object
// {"classes": [...], "root": {...}} where the root maps feature names to
// specs such as {"type":"real","cost":0.1} or
// {"type":"set","cost":2.0,"schema":{...}}. Feature order in the document is
// preserved. Throws SchemaError on invalid input.
Schema parse_schema(const std::string& text);

// Inverse of parse_schema up to whitespace.
std::string serialize_schema(const Schema& schema);

// Resolves a path against the schema and returns the addressed feature spec.
// Child indices are ignored here except that an index on a non-set feature is
// an error; schemas describe types, not instances.
const FeatureSpec& resolve_path(const Schema& schema, const FeaturePath& path);

// Cost of the feature the path addresses. Position-dependent only.
double feature_cost(const Schema& schema, const FeaturePath& path);

// Dotted schema position string, indices dropped: "posts.comments.text".
std::string schema_position(const FeaturePath& path);

struct BagInfo {
  std::string key;    // "root", "root.items", "root.posts.comments"
  int depth = 0;      // number of set descents from the root
  const ObjectSchema* schema = nullptr;
};

// All bags of the schema: the root object plus every set position, in
// depth-first schema order. Pointers remain valid while `schema` is alive.
std::vector<BagInfo> collect_bags(const Schema& schema);

}  // namespace cwcf
