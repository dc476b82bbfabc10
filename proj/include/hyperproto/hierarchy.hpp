/* Copyright 2026 The hyperproto Authors

   Licensed under the Apache License, Version 2.0 (the "License");
   you may not use this file except in compliance with the License.
   You may obtain a copy of the License at

       http://www.apache.org/licenses/LICENSE-2.0

   Unless required by applicable law or agreed to in writing, software
   distributed under the License is distributed on an "AS IS" BASIS,
   WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
   See the License for the specific language governing permissions and
   limitations under the License. */

#pragma once

// Three-level class taxonomy (grandparent -> parent -> child).
//
// Ids are 1-based and contiguous: child classes take 1..|A| and ancestor
// classes take |A|+1..|A|+|H|. All grandparents hang below an implicit
// virtual root that has no id and is never embedded.

#include <algorithm>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "hyperproto/errors.hpp"
#include "hyperproto/rng.hpp"

namespace hyperproto {

enum class Level { child, parent, grandparent };

inline std::string_view to_string(Level l) {
  switch (l) {
    case Level::child: return "child";
    case Level::parent: return "parent";
    case Level::grandparent: return "grandparent";
  }
  return "?";
}

inline std::optional<Level> level_from_string(std::string_view s) {
  if (s == "child") return Level::child;
  if (s == "parent") return Level::parent;
  if (s == "grandparent") return Level::grandparent;
  return std::nullopt;
}

struct Node {
  int id = 0;
  std::string name;
  Level level = Level::child;
  int parent = 0;  // 0 = none (grandparents)

  friend bool operator==(const Node&, const Node&) = default;
};

struct LevelCounts {
  int grandparents = 0;
  int parents = 0;
  int children = 0;
};

class HierarchyTree {
 public:
  /// Parses the JSON array form [{"id", "name", "level", "parent"}, ...].
  static HierarchyTree parse(std::string_view text);

  /// Builds and validates from explicit nodes (any order).
  static HierarchyTree from_nodes(std::vector<Node> nodes);

  std::string serialize() const;

  int size() const { return static_cast<int>(nodes_.size()); }
  int num_children() const { return num_children_; }
  int num_ancestors() const { return size() - num_children_; }
  bool contains(int id) const { return id >= 1 && id <= size(); }

  const Node& node(int id) const {
    if (!contains(id)) throw ArgumentError("unknown node id " + std::to_string(id));
    return nodes_[static_cast<std::size_t>(id - 1)];
  }
  const std::vector<Node>& nodes() const { return nodes_; }

  Level level(int id) const { return node(id).level; }
  int parent_of(int id) const { return node(id).parent; }
  const std::vector<int>& children_of(int id) const {
    node(id);
    return kids_[static_cast<std::size_t>(id - 1)];
  }

  /// Depth below the virtual root: grandparent 1, parent 2, child 3.
  int depth(int id) const {
    switch (level(id)) {
      case Level::grandparent: return 1;
      case Level::parent: return 2;
      case Level::child: return 3;
    }
    return 0;
  }

  std::vector<int> ids_at(Level l) const {
    std::vector<int> out;
    for (const auto& n : nodes_)
      if (n.level == l) out.push_back(n.id);
    return out;
  }

  LevelCounts level_counts() const {
    LevelCounts c;
    for (const auto& n : nodes_) {
      if (n.level == Level::grandparent) ++c.grandparents;
      if (n.level == Level::parent) ++c.parents;
      if (n.level == Level::child) ++c.children;
    }
    return c;
  }

  std::optional<int> find(std::string_view name) const {
    for (const auto& n : nodes_)
      if (n.name == name) return n.id;
    return std::nullopt;
  }

  friend bool operator==(const HierarchyTree& a, const HierarchyTree& b) {
    return a.nodes_ == b.nodes_;
  }

 private:
  std::vector<Node> nodes_;
  std::vector<std::vector<int>> kids_;
  int num_children_ = 0;
};

inline HierarchyTree HierarchyTree::from_nodes(std::vector<Node> nodes) {
  auto fail = [](const Node& n, const std::string& why) {
    throw ParseError("node " + std::to_string(n.id) + " (\"" + n.name + "\"): " + why);
  };

  std::set<int> seen;
  for (const auto& n : nodes) {
    if (!seen.insert(n.id).second) fail(n, "duplicate id");
  }
  const int total = static_cast<int>(nodes.size());
  for (const auto& n : nodes) {
    if (n.id < 1 || n.id > total) fail(n, "ids must be contiguous 1.." + std::to_string(total));
  }
  std::sort(nodes.begin(), nodes.end(), [](const Node& a, const Node& b) { return a.id < b.id; });

  auto at = [&](int id) -> const Node& { return nodes[static_cast<std::size_t>(id - 1)]; };

  for (const auto& n : nodes) {
    if (n.level == Level::grandparent) {
      if (n.parent != 0) fail(n, "grandparent must not have a parent");
      continue;
    }
    if (n.parent == 0) fail(n, "missing parent (orphan)");
    if (n.parent < 1 || n.parent > total)
      fail(n, "parent " + std::to_string(n.parent) + " does not exist (orphan)");
  }
  // A walk longer than the node count can only mean a cycle.
  for (const auto& n : nodes) {
    int cur = n.id;
    for (int steps = 0; cur != 0; ++steps) {
      if (steps > total) fail(n, "cycle in parent links");
      cur = at(cur).parent;
    }
  }
  for (const auto& n : nodes) {
    if (n.level == Level::child && at(n.parent).level != Level::parent)
      fail(n, "child's parent " + std::to_string(n.parent) + " is not parent-level");
    if (n.level == Level::parent && at(n.parent).level != Level::grandparent)
      fail(n, "parent's parent " + std::to_string(n.parent) + " is not grandparent-level");
  }

  HierarchyTree t;
  t.kids_.assign(nodes.size(), {});
  for (const auto& n : nodes)
    if (n.parent != 0) t.kids_[static_cast<std::size_t>(n.parent - 1)].push_back(n.id);

  int children = 0;
  for (const auto& n : nodes) {
    if (n.level == Level::child) {
      ++children;
    } else if (t.kids_[static_cast<std::size_t>(n.id - 1)].empty()) {
      fail(n, n.level == Level::parent ? "parent has no children" : "grandparent has no parents");
    }
  }
  for (const auto& n : nodes) {
    if ((n.level == Level::child) != (n.id <= children))
      fail(n, "child classes must occupy ids 1.." + std::to_string(children));
  }
  if (children == 0) throw ParseError("hierarchy has no child classes");

  t.nodes_ = std::move(nodes);
  t.num_children_ = children;
  return t;
}

inline HierarchyTree HierarchyTree::parse(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("hierarchy is not valid JSON: ") + e.what());
  }
  if (!j.is_array()) throw ParseError("hierarchy must be a JSON array of nodes");

  std::vector<Node> nodes;
  for (std::size_t i = 0; i < j.size(); ++i) {
    const auto& rec = j[i];
    const std::string where = "record " + std::to_string(i);
    if (!rec.is_object() || !rec.contains("id") || !rec["id"].is_number_integer())
      throw ParseError(where + ": missing integer \"id\"");
    Node n;
    n.id = rec["id"].get<int>();
    n.name = rec.value("name", std::string{});
    const auto lvl = level_from_string(rec.value("level", std::string{}));
    if (!lvl) throw ParseError("node " + std::to_string(n.id) + ": invalid \"level\"");
    n.level = *lvl;
    if (rec.contains("parent") && !rec["parent"].is_null()) {
      if (!rec["parent"].is_number_integer())
        throw ParseError("node " + std::to_string(n.id) + ": \"parent\" must be an integer");
      n.parent = rec["parent"].get<int>();
      if (n.parent == 0) throw ParseError("node " + std::to_string(n.id) + ": parent id 0 is invalid");
    }
    nodes.push_back(std::move(n));
  }
  return from_nodes(std::move(nodes));
}

inline std::string HierarchyTree::serialize() const {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& n : nodes_) {
    nlohmann::json rec{{"id", n.id}, {"name", n.name}, {"level", std::string(to_string(n.level))}};
    if (n.parent != 0) rec["parent"] = n.parent;
    j.push_back(std::move(rec));
  }
  return j.dump(1);
}

/// Shortest path length in the undirected tree, routing through the
/// virtual root when the two nodes sit under different grandparents.
inline int hop_distance(const HierarchyTree& tree, int a, int b) {
  int da = tree.depth(a);
  int db = tree.depth(b);
  int hops = 0;
  while (da > db) { a = tree.parent_of(a); --da; ++hops; }
  while (db > da) { b = tree.parent_of(b); --db; ++hops; }
  while (a != b) {
    a = tree.parent_of(a);  // 0 once both reach the virtual root
    b = tree.parent_of(b);
    hops += 2;
  }
  return hops;
}

/// (parent, grandparent) of a child class.
inline std::pair<int, int> ancestors(const HierarchyTree& tree, int child_id) {
  if (tree.level(child_id) != Level::child)
    throw ArgumentError("ancestors: node " + std::to_string(child_id) + " is not child-level");
  const int p = tree.parent_of(child_id);
  return {p, tree.parent_of(p)};
}

/// True when `cls` is the child itself, its parent, or its grandparent.
inline bool on_ancestor_path(const HierarchyTree& tree, int child_id, int cls) {
  if (cls == child_id) return true;
  const auto [p, g] = ancestors(tree, child_id);
  return cls == p || cls == g;
}

/// Same-parent children of `child_id`, excluding itself.
inline std::vector<int> siblings(const HierarchyTree& tree, int child_id) {
  std::vector<int> out;
  for (int k : tree.children_of(tree.parent_of(child_id)))
    if (k != child_id) out.push_back(k);
  return out;
}

/// Regular synthetic taxonomy: `grandparents` roots, each with
/// `parents_per` parents, each with `children_per` children. Names follow
/// "g1", "g1.p2", "g1.p2.c3".
inline HierarchyTree balanced_tree(int grandparents, int parents_per, int children_per) {
  if (grandparents < 1 || parents_per < 1 || children_per < 1)
    throw ArgumentError("balanced_tree: all level sizes must be >= 1");
  const int n_children = grandparents * parents_per * children_per;
  std::vector<Node> nodes;
  int child_id = 1;
  for (int g = 0; g < grandparents; ++g) {
    const int gid = n_children + 1 + g;
    const std::string gname = "g" + std::to_string(g + 1);
    nodes.push_back({gid, gname, Level::grandparent, 0});
    for (int p = 0; p < parents_per; ++p) {
      const int pid = n_children + grandparents + 1 + g * parents_per + p;
      const std::string pname = gname + ".p" + std::to_string(p + 1);
      nodes.push_back({pid, pname, Level::parent, gid});
      for (int c = 0; c < children_per; ++c)
        nodes.push_back({child_id++, pname + ".c" + std::to_string(c + 1), Level::child, pid});
    }
  }
  return HierarchyTree::from_nodes(std::move(nodes));
}

/// A (node, parent-candidate) pair: `child` is v, `parent` is u.
struct Pair {
  int child = 0;
  int parent = 0;
  friend bool operator==(const Pair&, const Pair&) = default;
};

struct PairBatch {
  std::vector<Pair> positives;
  /// negatives[i] belongs to positives[i]; same child, non-parent partner.
  std::vector<std::vector<Pair>> negatives;
  friend bool operator==(const PairBatch&, const PairBatch&) = default;
};

/// One positive per child- and parent-level node (grandparents are roots),
/// each with `negatives_per_positive` distinct non-parent partners drawn
/// uniformly from every other node.
inline PairBatch sample_pairs(const HierarchyTree& tree, int negatives_per_positive,
                              std::uint64_t rng_seed) {
  if (negatives_per_positive < 1) throw ArgumentError("sample_pairs: negatives_per_positive must be >= 1");
  const int available = tree.size() - 2;
  if (negatives_per_positive > available)
    throw ArgumentError("sample_pairs: " + std::to_string(negatives_per_positive) +
                        " negatives requested but only " + std::to_string(available) + " non-parents exist");
  Rng rng(rng_seed);
  PairBatch batch;
  for (const auto& n : tree.nodes()) {
    if (n.level == Level::grandparent) continue;
    batch.positives.push_back({n.id, n.parent});
    std::vector<int> pool;
    pool.reserve(static_cast<std::size_t>(available));
    for (const auto& m : tree.nodes())
      if (m.id != n.id && m.id != n.parent) pool.push_back(m.id);
    std::vector<Pair> negs;
    for (int u : sample_without_replacement(std::move(pool), static_cast<std::size_t>(negatives_per_positive), rng))
      negs.push_back({n.id, u});
    batch.negatives.push_back(std::move(negs));
  }
  return batch;
}

}  // namespace hyperproto
