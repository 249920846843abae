#include "cwcf/schema.hpp"

#include <set>
#include <sstream>

#include "json.hpp"

namespace cwcf {

using ordered_json = nlohmann::ordered_json;

bool FeatureType::operator==(const FeatureType& other) const {
  if (kind != other.kind) return false;
  if (kind == FeatureKind::Categorical && categories != other.categories)
    return false;
  if (kind == FeatureKind::Set) {
    if (!child || !other.child) return child == other.child;
    return *child == *other.child;
  }
  return true;
}

int ObjectSchema::find(const std::string& name) const {
  for (size_t i = 0; i < features.size(); ++i)
    if (features[i].name == name) return static_cast<int>(i);
  return -1;
}

std::string path_to_string(const FeaturePath& path) {
  std::string out;
  for (const auto& step : path) {
    if (!out.empty()) out += '.';
    out += step.feature;
    if (step.child) out += '[' + std::to_string(*step.child) + ']';
  }
  return out;
}

namespace {

double parse_cost(const ordered_json& spec, const std::string& name) {
  if (!spec.contains("cost") || !spec["cost"].is_number())
    throw SchemaError(SchemaErrorKind::Malformed,
                      "feature '" + name + "' has no numeric cost");
  double cost = spec["cost"].get<double>();
  if (cost < 0.0)
    throw SchemaError(SchemaErrorKind::NegativeCost,
                      "feature '" + name + "' has negative cost");
  return cost;
}

void check_keys(const ordered_json& spec, const std::string& name,
                const std::set<std::string>& allowed) {
  for (const auto& [key, _] : spec.items())
    if (!allowed.count(key))
      throw SchemaError(SchemaErrorKind::Malformed,
                        "feature '" + name + "' has unexpected key '" + key + "'");
}

ObjectSchema parse_object_schema(const ordered_json& obj) {
  if (!obj.is_object())
    throw SchemaError(SchemaErrorKind::Malformed, "object schema must be a JSON object");
  ObjectSchema out;
  for (const auto& [name, spec] : obj.items()) {
    if (!spec.is_object() || !spec.contains("type") || !spec["type"].is_string())
      throw SchemaError(SchemaErrorKind::Malformed,
                        "feature '" + name + "' must be an object with a type tag");
    FeatureSpec fs;
    fs.name = name;
    fs.cost = parse_cost(spec, name);
    const std::string type = spec["type"].get<std::string>();
    if (type == "real") {
      check_keys(spec, name, {"type", "cost"});
      fs.type.kind = FeatureKind::Real;
    } else if (type == "text") {
      check_keys(spec, name, {"type", "cost"});
      fs.type.kind = FeatureKind::Text;
    } else if (type == "cat") {
      check_keys(spec, name, {"type", "cost", "categories"});
      fs.type.kind = FeatureKind::Categorical;
      if (!spec.contains("categories") || !spec["categories"].is_array() ||
          spec["categories"].empty())
        throw SchemaError(SchemaErrorKind::Malformed,
                          "categorical '" + name + "' needs a non-empty category list");
      std::set<std::string> seen;
      for (const auto& c : spec["categories"]) {
        if (!c.is_string())
          throw SchemaError(SchemaErrorKind::Malformed,
                            "categories of '" + name + "' must be strings");
        if (!seen.insert(c.get<std::string>()).second)
          throw SchemaError(SchemaErrorKind::Malformed,
                            "categories of '" + name + "' must be distinct");
        fs.type.categories.push_back(c.get<std::string>());
      }
    } else if (type == "set") {
      check_keys(spec, name, {"type", "cost", "schema"});
      fs.type.kind = FeatureKind::Set;
      if (!spec.contains("schema"))
        throw SchemaError(SchemaErrorKind::MissingChildSchema,
                          "set '" + name + "' has no child schema");
      fs.type.child = std::make_shared<const ObjectSchema>(
          parse_object_schema(spec["schema"]));
    } else {
      throw SchemaError(SchemaErrorKind::UnknownType,
                        "feature '" + name + "' has unknown type '" + type + "'");
    }
    out.features.push_back(std::move(fs));
  }
  return out;
}

// nlohmann keeps the last duplicate key silently, so duplicates are caught
// with a parser callback tracking the open objects' key sets.
ordered_json parse_with_duplicate_check(const std::string& text) {
  std::vector<std::set<std::string>> open_objects;
  auto cb = [&](int /*depth*/, nlohmann::json::parse_event_t event,
                nlohmann::json& parsed) {
    using ev = nlohmann::json::parse_event_t;
    if (event == ev::object_start) {
      open_objects.emplace_back();
    } else if (event == ev::object_end) {
      open_objects.pop_back();
    } else if (event == ev::key) {
      if (!open_objects.back().insert(parsed.get<std::string>()).second)
        throw SchemaError(SchemaErrorKind::DuplicateFeature,
                          "duplicate key '" + parsed.get<std::string>() + "'");
    }
    return true;
  };
  try {
    [[maybe_unused]] auto scan = nlohmann::json::parse(text, cb);
  } catch (const nlohmann::json::parse_error& e) {
    throw SchemaError(SchemaErrorKind::Malformed, e.what());
  }
  try {
    return ordered_json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw SchemaError(SchemaErrorKind::Malformed, e.what());
  }
}

ordered_json serialize_object_schema(const ObjectSchema& os) {
  ordered_json out = ordered_json::object();
  for (const auto& f : os.features) {
    ordered_json spec;
    switch (f.type.kind) {
      case FeatureKind::Real:
        spec = {{"type", "real"}, {"cost", f.cost}};
        break;
      case FeatureKind::Text:
        spec = {{"type", "text"}, {"cost", f.cost}};
        break;
      case FeatureKind::Categorical:
        spec = {{"type", "cat"}, {"cost", f.cost}, {"categories", f.type.categories}};
        break;
      case FeatureKind::Set:
        spec = {{"type", "set"},
                {"cost", f.cost},
                {"schema", serialize_object_schema(*f.type.child)}};
        break;
    }
    out[f.name] = std::move(spec);
  }
  return out;
}

void collect_bags_rec(const ObjectSchema& os, const std::string& key, int depth,
                      std::vector<BagInfo>& out) {
  out.push_back({key, depth, &os});
  for (const auto& f : os.features)
    if (f.type.kind == FeatureKind::Set)
      collect_bags_rec(*f.type.child, key + "." + f.name, depth + 1, out);
}

}  // namespace

Schema parse_schema(const std::string& text) {
  ordered_json doc = parse_with_duplicate_check(text);
  if (!doc.is_object() || !doc.contains("classes") || !doc.contains("root"))
    throw SchemaError(SchemaErrorKind::Malformed,
                      "schema document needs 'classes' and 'root'");
  for (const auto& [key, _] : doc.items())
    if (key != "classes" && key != "root")
      throw SchemaError(SchemaErrorKind::Malformed,
                        "unexpected top-level key '" + key + "'");
  Schema schema;
  if (!doc["classes"].is_array())
    throw SchemaError(SchemaErrorKind::BadClassList, "'classes' must be an array");
  std::set<std::string> seen;
  for (const auto& c : doc["classes"]) {
    if (!c.is_string())
      throw SchemaError(SchemaErrorKind::BadClassList, "class names must be strings");
    if (!seen.insert(c.get<std::string>()).second)
      throw SchemaError(SchemaErrorKind::BadClassList, "class names must be distinct");
    schema.class_names.push_back(c.get<std::string>());
  }
  if (schema.class_names.size() < 2)
    throw SchemaError(SchemaErrorKind::BadClassList, "need at least two classes");
  schema.root = parse_object_schema(doc["root"]);
  return schema;
}

std::string serialize_schema(const Schema& schema) {
  ordered_json doc;
  doc["classes"] = schema.class_names;
  doc["root"] = serialize_object_schema(schema.root);
  return doc.dump(2);
}

const FeatureSpec& resolve_path(const Schema& schema, const FeaturePath& path) {
  if (path.empty())
    throw PathError(PathErrorKind::Empty, "empty path addresses no feature");
  const ObjectSchema* cur = &schema.root;
  for (size_t i = 0; i < path.size(); ++i) {
    const PathStep& step = path[i];
    int idx = cur->find(step.feature);
    if (idx < 0)
      throw PathError(PathErrorKind::UnknownFeature,
                      "unknown feature '" + step.feature + "' in path " +
                          path_to_string(path));
    const FeatureSpec& spec = cur->features[idx];
    bool is_set = spec.type.kind == FeatureKind::Set;
    if (step.child && !is_set)
      throw PathError(PathErrorKind::NotASet,
                      "child index on non-set feature '" + step.feature + "'");
    if (i + 1 < path.size()) {
      if (!is_set)
        throw PathError(PathErrorKind::NotASet,
                        "cannot descend through non-set feature '" + step.feature + "'");
      cur = spec.type.child.get();
    } else {
      return spec;
    }
  }
  throw PathError(PathErrorKind::Empty, "unreachable");
}

double feature_cost(const Schema& schema, const FeaturePath& path) {
  return resolve_path(schema, path).cost;
}

std::string schema_position(const FeaturePath& path) {
  std::string out;
  for (const auto& step : path) {
    if (!out.empty()) out += '.';
    out += step.feature;
  }
  return out;
}

std::vector<BagInfo> collect_bags(const Schema& schema) {
  std::vector<BagInfo> out;
  collect_bags_rec(schema.root, "root", 0, out);
  return out;
}

}  // namespace cwcf
