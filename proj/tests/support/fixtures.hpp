#pragma once

#include <memory>
#include <string>

#include "cwcf/dataset.hpp"
#include "cwcf/schema.hpp"

namespace cwcf::testing {

// Three-level user-activity schema: scalar profile features plus nested
// posts/comments and badges sets.
inline const char* kUserSchemaText = R"({
  "classes": ["low", "medium", "high"],
  "root": {
    "reputation": {"type": "real", "cost": 0.1},
    "views": {"type": "real", "cost": 0.2},
    "upvotes": {"type": "real", "cost": 0.3},
    "posts": {"type": "set", "cost": 2.0, "schema": {
      "title": {"type": "text", "cost": 0.4},
      "score": {"type": "real", "cost": 0.2},
      "comments": {"type": "set", "cost": 1.5, "schema": {
        "text": {"type": "text", "cost": 0.2},
        "kind": {"type": "cat", "cost": 0.1, "categories": ["question", "remark"]}
      }}
    }},
    "badges": {"type": "set", "cost": 1.0, "schema": {
      "name": {"type": "cat", "cost": 0.3, "categories": ["gold", "silver", "bronze"]}
    }}
  }
})";

inline std::shared_ptr<const Schema> user_schema() {
  return std::make_shared<Schema>(parse_schema(kUserSchemaText));
}

// One fully observed sample for the user-activity schema.
inline const char* kUserSampleLine =
    R"({"label":"medium","features":{"reputation":12.5,"views":340,"upvotes":17,"posts":[{"title":"how do sets work","score":4,"comments":[{"text":"see the docs","kind":"remark"},{"text":"which sets","kind":"question"}]},{"title":"hello","score":0,"comments":[]}],"badges":[{"name":"bronze"}]}})";

}  // namespace cwcf::testing
