#include "lgcaps/linglayout.hpp"

#include <algorithm>
#include <fstream>

#include "json.hpp"

namespace lgcaps {

namespace {

std::vector<std::vector<int>> children_lists(const ParseTree& tree, bool kept_only) {
  std::vector<std::vector<int>> ch(tree.tokens.size());
  for (const Token& t : tree.tokens) {
    if (kept_only && t.pruned) continue;
    if (t.head != kNoHead) ch[static_cast<std::size_t>(t.head)].push_back(t.index);
  }
  return ch;
}

int find_root(const ParseTree& tree) {
  for (const Token& t : tree.tokens)
    if (t.head == kNoHead && !t.pruned) return t.index;
  return -1;
}

}  // namespace

void validate_tree(const ParseTree& tree) {
  const int n = tree.n_q();
  if (n == 0) throw ParseError("empty tree");
  int root = -1;
  for (int i = 0; i < n; ++i) {
    const Token& t = tree.tokens[static_cast<std::size_t>(i)];
    if (t.index != i)
      throw ParseError("token " + std::to_string(i) + ": index mismatch (got " +
                       std::to_string(t.index) + ")");
    if (t.head == kNoHead) {
      if (root >= 0)
        throw ParseError("token " + std::to_string(i) + ": second root (first at " +
                         std::to_string(root) + ")");
      root = i;
    } else if (t.head < 0 || t.head >= n) {
      throw ParseError("token " + std::to_string(i) + ": head " + std::to_string(t.head) +
                       " out of range");
    } else if (t.head == i) {
      throw ParseError("token " + std::to_string(i) + ": self-loop");
    }
  }
  if (root < 0) throw ParseError("no root token");
  // Walk each token to the root; with one root and no self-loops, failure to
  // arrive within n steps means a cycle.
  for (int i = 0; i < n; ++i) {
    int cur = i, steps = 0;
    while (cur != root) {
      cur = tree.tokens[static_cast<std::size_t>(cur)].head;
      if (cur == kNoHead) break;
      if (++steps > n) throw ParseError("token " + std::to_string(i) + ": head cycle");
    }
  }
}

std::vector<int> node_levels(const ParseTree& tree) {
  const int n = tree.n_q();
  const auto ch = children_lists(tree, /*kept_only=*/true);
  std::vector<int> level(static_cast<std::size_t>(n), -1);
  // Iterative post-order from the root over kept nodes.
  const int root = find_root(tree);
  if (root < 0) return level;
  std::vector<std::pair<int, bool>> stack{{root, false}};
  while (!stack.empty()) {
    auto [node, expanded] = stack.back();
    stack.pop_back();
    if (expanded) {
      int h = 0;
      for (int c : ch[static_cast<std::size_t>(node)])
        h = std::max(h, level[static_cast<std::size_t>(c)] + 1);
      level[static_cast<std::size_t>(node)] = h;
    } else {
      stack.push_back({node, true});
      for (int c : ch[static_cast<std::size_t>(node)]) stack.push_back({c, false});
    }
  }
  return level;
}

ParseTree prune_leaves(const ParseTree& tree, const std::set<std::string>& keep_pos) {
  validate_tree(tree);
  ParseTree out = tree;
  const auto ch = children_lists(tree, /*kept_only=*/false);
  int kept = 0;
  for (Token& t : out.tokens) {
    const bool is_leaf = ch[static_cast<std::size_t>(t.index)].empty();
    if (is_leaf && keep_pos.count(t.pos) == 0) t.pruned = true;
    if (!t.pruned) ++kept;
  }
  if (kept == 0) throw ParseError("pruning would remove every token");
  return out;
}

LinguisticLayout build_layout(const ParseTree& tree, int H_max) {
  if (H_max < 1) throw ConfigError("build_layout: H_max must be >= 1");
  const int n = tree.n_q();
  const auto levels = node_levels(tree);
  const auto ch = children_lists(tree, /*kept_only=*/true);

  // Kept word set of the subtree under each kept node.
  std::vector<std::vector<int>> subtree(static_cast<std::size_t>(n));
  const int root = find_root(tree);
  if (root < 0) throw ParseError("build_layout: no kept tokens");
  // Children are fully processed before their parent when visiting nodes in
  // increasing level order.
  std::vector<int> order;
  for (int i = 0; i < n; ++i)
    if (levels[static_cast<std::size_t>(i)] >= 0) order.push_back(i);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    return levels[static_cast<std::size_t>(a)] < levels[static_cast<std::size_t>(b)];
  });
  for (int node : order) {
    auto& s = subtree[static_cast<std::size_t>(node)];
    s.push_back(node);
    for (int c : ch[static_cast<std::size_t>(node)])
      s.insert(s.end(), subtree[static_cast<std::size_t>(c)].begin(),
               subtree[static_cast<std::size_t>(c)].end());
    std::sort(s.begin(), s.end());
  }

  const int tree_h = levels[static_cast<std::size_t>(root)];
  LinguisticLayout lay;
  lay.n_q = n;
  lay.H = std::min(tree_h, H_max);
  lay.groups.resize(static_cast<std::size_t>(lay.H) + 1);

  // Level 0: every kept word as a singleton.
  for (int i = 0; i < n; ++i)
    if (levels[static_cast<std::size_t>(i)] >= 0) lay.groups[0].push_back({i});

  for (int l = 1; l <= lay.H; ++l) {
    auto& gl = lay.groups[static_cast<std::size_t>(l)];
    if (l == H_max && tree_h > H_max) {
      // Truncation: everything from this level up collapses into the root.
      gl.push_back(subtree[static_cast<std::size_t>(root)]);
      continue;
    }
    for (int node : order)
      if (levels[static_cast<std::size_t>(node)] == l)
        gl.push_back(subtree[static_cast<std::size_t>(node)]);
  }
  return lay;
}

Tensor correlation_matrix(const LinguisticLayout& layout, int level) {
  if (level < 0 || level > layout.H)
    throw ConfigError("correlation_matrix: level " + std::to_string(level) + " outside 0.." +
                      std::to_string(layout.H));
  const int n = layout.n_q;
  Tensor g(Shape{n, n});
  // group_of[i] = id of the level's group containing word i, or -1.
  std::vector<int> group_of(static_cast<std::size_t>(n), -1);
  const auto& gl = layout.groups[static_cast<std::size_t>(level)];
  for (std::size_t a = 0; a < gl.size(); ++a)
    for (int w : gl[a]) group_of[static_cast<std::size_t>(w)] = static_cast<int>(a);
  for (int i = 0; i < n; ++i) {
    const int gi = group_of[static_cast<std::size_t>(i)];
    if (gi < 0) continue;
    for (int j = 0; j < n; ++j) {
      const int gj = group_of[static_cast<std::size_t>(j)];
      if (gj < 0) continue;
      g.at(i, j) = (gi == gj) ? 1.0 : -1.0;
    }
  }
  return g;
}

AlignedLayout pad_align(const LinguisticLayout& layout, const ParseTree& tree, int n_q_max,
                        int H_target) {
  const int n = layout.n_q;
  if (n > n_q_max)
    throw ConfigError("pad_align: question length " + std::to_string(n) + " exceeds " +
                      std::to_string(n_q_max));
  if (H_target < layout.H)
    throw ConfigError("pad_align: H_target " + std::to_string(H_target) + " below layout H " +
                      std::to_string(layout.H));
  const int shift = n_q_max - n;

  AlignedLayout out;
  out.shift = shift;
  out.layout.n_q = n_q_max;
  out.layout.H = H_target;
  out.layout.groups.resize(static_cast<std::size_t>(H_target) + 1);
  for (int l = 0; l <= layout.H; ++l)
    for (const auto& grp : layout.groups[static_cast<std::size_t>(l)]) {
      std::vector<int> g;
      g.reserve(grp.size());
      for (int w : grp) g.push_back(w + shift);
      out.layout.groups[static_cast<std::size_t>(l)].push_back(std::move(g));
    }
  // Bottom-aligned: the root group fills the missing upper levels.
  std::vector<int> root_group;
  for (const auto& grp : out.layout.groups[static_cast<std::size_t>(layout.H)])
    root_group.insert(root_group.end(), grp.begin(), grp.end());
  std::sort(root_group.begin(), root_group.end());
  for (int l = layout.H + 1; l <= H_target; ++l)
    out.layout.groups[static_cast<std::size_t>(l)].push_back(root_group);

  out.tokens.resize(static_cast<std::size_t>(n_q_max));
  for (int i = 0; i < shift; ++i) {
    out.tokens[static_cast<std::size_t>(i)].index = i;
    out.tokens[static_cast<std::size_t>(i)].pruned = true;  // padding joins no group
  }
  for (int i = 0; i < n; ++i) {
    Token t = tree.tokens[static_cast<std::size_t>(i)];
    t.index = i + shift;
    if (t.head != kNoHead) t.head += shift;
    out.tokens[static_cast<std::size_t>(i + shift)] = std::move(t);
  }
  return out;
}

bool layout_consistent(const LinguisticLayout& layout) {
  for (int l = 0; l <= layout.H; ++l) {
    const auto& gl = layout.groups[static_cast<std::size_t>(l)];
    std::vector<int> seen(static_cast<std::size_t>(layout.n_q), 0);
    for (const auto& grp : gl) {
      if (grp.empty()) return false;
      for (int w : grp) {
        if (w < 0 || w >= layout.n_q) return false;
        if (seen[static_cast<std::size_t>(w)]++) return false;  // overlap within level
      }
    }
  }
  for (int l = 0; l < layout.H; ++l) {
    const auto& lower = layout.groups[static_cast<std::size_t>(l)];
    const auto& upper = layout.groups[static_cast<std::size_t>(l + 1)];
    for (const auto& up : upper) {
      std::set<int> u(up.begin(), up.end());
      for (const auto& lo : lower) {
        bool inside = true, outside = true;
        for (int w : lo) (u.count(w) ? outside : inside) = false;
        if (!inside && !outside) return false;  // straddles the upper group
      }
    }
  }
  return true;
}

// ---- file format ----

ParseTree tree_from_json_line(const std::string& line) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("bad parse-tree record: ") + e.what());
  }
  ParseTree tree;
  try {
    tree.id = j.at("id").get<std::string>();
    for (const auto& tok : j.at("tokens")) {
      Token t;
      t.index = tok.at("index").get<int>();
      t.text = tok.at("text").get<std::string>();
      t.pos = tok.at("pos").get<std::string>();
      t.head = tok.at("head").get<int>();
      tree.tokens.push_back(std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("bad parse-tree record: ") + e.what());
  }
  validate_tree(tree);
  return tree;
}

std::string tree_to_json_line(const ParseTree& tree) {
  nlohmann::ordered_json j;
  j["id"] = tree.id;
  nlohmann::ordered_json toks = nlohmann::ordered_json::array();
  for (const Token& t : tree.tokens) {
    nlohmann::ordered_json o;
    o["index"] = t.index;
    o["text"] = t.text;
    o["pos"] = t.pos;
    o["head"] = t.head;
    toks.push_back(std::move(o));
  }
  j["tokens"] = std::move(toks);
  return j.dump();
}

std::vector<ParseTree> load_parse_trees(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::vector<ParseTree> trees;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      trees.push_back(tree_from_json_line(line));
    } catch (const ParseError& e) {
      throw ParseError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return trees;
}

void save_parse_trees(const std::string& path, const std::vector<ParseTree>& trees) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  for (const ParseTree& t : trees) out << tree_to_json_line(t) << "\n";
}

}  // namespace lgcaps
